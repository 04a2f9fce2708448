//! Policy evaluation over whole episodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::Policy;
use crate::envs::{make_env, EnvConfig, Environment};
use crate::error::Result;
use crate::frame::StackedObservation;
use crate::tensor::Scalar;

/// Anything that maps an observation to an action without side effects.
pub trait ActionSource: Sync {
    fn action(&self, obs: &StackedObservation) -> Result<Vec<f32>>;
}

impl<S: Scalar> ActionSource for Policy<S> {
    fn action(&self, obs: &StackedObservation) -> Result<Vec<f32>> {
        self.act(obs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    /// Undiscounted return of each episode, in episode order.
    pub returns: Vec<f64>,
    pub mean: f64,
}

impl EvalResult {
    fn from_returns(returns: Vec<f64>) -> Self {
        let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
        Self { returns, mean }
    }
}

/// SplitMix64 finalizer over `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn run_episode<P: ActionSource + ?Sized>(policy: &P, env: &mut dyn Environment, seed: u64) -> Result<f64> {
    let mut obs = env.reset(seed);
    let mut total = 0.0;
    loop {
        let action = policy.action(&obs)?;
        let step = env.step(&action)?;
        total += step.reward as f64;
        obs = step.obs;
        if step.step_budget_exhausted {
            return Ok(total);
        }
    }
}

/// Runs `episodes` full episodes, episode `e` reset with
/// `derive_seed(base_seed, 1, e)`. Episodes are spread over `threads`
/// environment instances; the result does not depend on the thread count.
pub fn evaluate<P, F>(policy: &P, make: F, episodes: usize, base_seed: u64, threads: usize) -> Result<EvalResult>
where
    P: ActionSource,
    F: Fn() -> Result<Box<dyn Environment>> + Sync,
{
    let threads = threads.clamp(1, episodes.max(1));
    let seed_of = |e: usize| derive_seed(base_seed, 1, e as u64);
    if threads == 1 {
        let mut env = make()?;
        let returns = (0..episodes)
            .map(|e| run_episode(policy, env.as_mut(), seed_of(e)))
            .collect::<Result<Vec<_>>>()?;
        return Ok(EvalResult::from_returns(returns));
    }
    let mut returns = vec![0.0; episodes];
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let make = &make;
                scope.spawn(move || -> Result<Vec<(usize, f64)>> {
                    let mut env = make()?;
                    (w..episodes)
                        .step_by(threads)
                        .map(|e| Ok((e, run_episode(policy, env.as_mut(), seed_of(e))?)))
                        .collect()
                })
            })
            .collect();
        for h in handles {
            for (e, r) in h.join().expect("evaluation thread panicked")? {
                returns[e] = r;
            }
        }
        Ok(())
    })?;
    Ok(EvalResult::from_returns(returns))
}

/// Evaluates `policy` on fresh instances of the configured task.
pub fn evaluate_on<P: ActionSource>(
    policy: &P,
    env: &EnvConfig,
    episodes: usize,
    base_seed: u64,
    threads: usize,
) -> Result<EvalResult> {
    evaluate(policy, || make_env(env), episodes, base_seed, threads)
}

/// Mean return of uniformly random actions, sequentially over `episodes`.
pub fn random_baseline(env: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalResult> {
    let mut e = make_env(env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adim = e.action_dim();
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        e.reset(derive_seed(seed, 2, ep as u64));
        let mut total = 0.0;
        loop {
            let a: Vec<f32> = (0..adim).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
            let step = e.step(&a)?;
            total += step.reward as f64;
            if step.step_budget_exhausted {
                break;
            }
        }
        returns.push(total);
    }
    Ok(EvalResult::from_returns(returns))
}
