use std::sync::{Arc, Mutex};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use super::*;
use crate::frame::Frame;
use crate::nn::network::Dense;
use crate::replay::{BufferConfig, Episode};

fn spec() -> NetworkSpec {
    NetworkSpec {
        obs_channels: 3,
        obs_size: 15,
        action_dim: 1,
        features_dim: 8,
        hidden_dim: 16,
    }
}

fn config() -> AgentConfig {
    AgentConfig {
        batch_size: 4,
        features_dim: 8,
        hidden_dim: 16,
        ..Default::default()
    }
}

fn agent(seed: u64) -> Agent<f64> {
    Agent::new(spec(), config(), seed).unwrap()
}

fn random_obs(rng: &mut ChaCha8Rng, b: usize) -> Tensor<f64> {
    Tensor::from_fn(&[b, 3, 15, 15], |_| rng.random::<f64>())
}

fn batch(rng: &mut ChaCha8Rng, b: usize, reward: f64, discount: f64) -> NStepBatch<f64> {
    NStepBatch {
        obs: random_obs(rng, b),
        action: Tensor::from_fn(&[b, 1], |_| rng.random_range(-1.0..1.0)),
        reward: vec![reward; b],
        discount: vec![discount; b],
        next_obs: random_obs(rng, b),
    }
}

/// Makes a critic output `value` for every input.
fn constant_critic(c: &mut Critic<f64>, value: f64) {
    let last: &mut Dense<f64> = &mut c.mlp.layers[2];
    last.weight.tensor.values_mut().fill(0.0);
    last.bias.tensor.values_mut().fill(value);
}

fn recording_hook(agent: &mut Agent<f64>) -> Arc<Mutex<Vec<UpdateEvent>>> {
    let log = Arc::new(Mutex::new(Vec::new()));
    let sink = log.clone();
    agent.set_hook(Box::new(move |e| sink.lock().unwrap().push(*e)));
    log
}

const ALL: [&str; 6] = ["encoder", "actor", "critic1", "critic2", "critic1_target", "critic2_target"];

#[test]
fn config_defaults_and_validation() {
    let c = AgentConfig::default();
    assert_eq!((c.batch_size, c.nstep, c.update_every, c.seed_frames), (256, 3, 2, 4000));
    assert_eq!((c.lr, c.gamma, c.tau, c.noise_clip), (1e-4, 0.99, 0.01, 0.3));
    assert!(c.validate().is_ok());
    assert!(AgentConfig { noise_clip: 0.0, ..c }.validate().is_err());
    assert!(AgentConfig { batch_size: 0, ..c }.validate().is_err());
    assert!(Agent::<f64>::new(spec(), AgentConfig::default(), 0).is_err(), "width mismatch");
}

#[test]
fn eval_actions_are_deterministic_and_bounded() {
    let mut a = agent(0);
    let frame = Frame::new(15, (0..675).map(|i| (i % 251) as u8).collect()).unwrap();
    let obs = StackedObservation::from_frames([&frame]);
    let x = a.act(&obs, 0, ActMode::Eval).unwrap();
    let y = a.act(&obs, 0, ActMode::Eval).unwrap();
    assert_eq!(x, y);
    assert!(x.iter().all(|v| v.abs() < 1.0));
    for _ in 0..100 {
        let s = a.act(&obs, 0, ActMode::Seed).unwrap();
        assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn zero_noise_train_matches_eval() {
    let mut a = Agent::<f64>::new(
        spec(),
        AgentConfig {
            schedule: NoiseSchedule::fixed(0.0),
            ..config()
        },
        1,
    )
    .unwrap();
    let obs = StackedObservation::from_frames([&Frame::blank(15)]);
    assert_eq!(a.act(&obs, 10, ActMode::Train).unwrap(), a.act(&obs, 10, ActMode::Eval).unwrap());
}

#[test]
fn large_noise_saturates_per_gaussian_tail() {
    let mut a = Agent::<f64>::new(
        spec(),
        AgentConfig {
            schedule: NoiseSchedule::fixed(10.0),
            ..config()
        },
        2,
    )
    .unwrap();
    let obs = StackedObservation::from_frames([&Frame::blank(15)]);
    let mu = a.act(&obs, 0, ActMode::Eval).unwrap()[0] as f64;
    let n = 20_000;
    let saturated = (0..n)
        .filter(|_| a.act(&obs, 0, ActMode::Train).unwrap()[0].abs() == 1.0)
        .count() as f64
        / n as f64;
    let z = StdNormal::new(0.0, 10.0).unwrap();
    let expected = 1.0 - (z.cdf(1.0 - mu) - z.cdf(-1.0 - mu));
    let tol = 4.0 * (expected * (1.0 - expected) / n as f64).sqrt();
    assert!((saturated - expected).abs() < tol, "{saturated} vs {expected}");
}

#[test]
fn td_target_hand_example() {
    let mut a = agent(3);
    constant_critic(&mut a.critic1_target, 10.0);
    constant_critic(&mut a.critic2_target, 12.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = batch(&mut rng, 2, 2.9701, 0.970299);
    let y = a.td_target(&b, 0.5).unwrap();
    assert_eq!(y, vec![12.67309, 12.67309]);
}

#[test]
fn td_target_constant_and_ordered_critics() {
    let mut a = agent(4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    constant_critic(&mut a.critic1_target, 3.0);
    constant_critic(&mut a.critic2_target, 3.0);
    let mut b = batch(&mut rng, 5, 0.0, 0.9);
    b.reward = vec![0.1, 0.2, 0.3, 0.4, 0.5];
    let y = a.td_target(&b, 1.0).unwrap();
    for (yi, ri) in y.iter().zip(&b.reward) {
        assert_eq!(*yi, ri + 0.9 * 3.0);
    }
    constant_critic(&mut a.critic1_target, -1.0);
    constant_critic(&mut a.critic2_target, 4.0);
    let y = a.td_target(&b, 1.0).unwrap();
    for (yi, ri) in y.iter().zip(&b.reward) {
        assert_eq!(*yi, ri - 0.9);
    }
}

#[test]
fn swapping_critics_leaves_targets_and_actor_loss_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = batch(&mut rng, 6, 0.5, 0.97);
    let mut a = agent(5);
    let mut s = agent(5);
    std::mem::swap(&mut s.critic1, &mut s.critic2);
    std::mem::swap(&mut s.critic1_target, &mut s.critic2_target);
    assert_eq!(a.td_target(&b, 0.3).unwrap(), s.td_target(&b, 0.3).unwrap());
    let la = a.actor_step(&b.obs, 0.3).unwrap();
    let ls = s.actor_step(&b.obs, 0.3).unwrap();
    assert_eq!(la, ls);
}

#[test]
fn critic_update_leaves_no_target_gradient_and_moves_targets_by_tau() {
    let mut a = agent(6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = batch(&mut rng, 4, 0.7, 0.97);
    let before: Vec<Vec<f64>> = a.critic1_target.params().iter().map(|(_, p)| p.values().to_vec()).collect();
    a.update_critic(&b, 0.2).unwrap();
    for (_, p) in a.critic1_target.params().into_iter().chain(a.critic2_target.params()) {
        assert!(p.tensor.grad().is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    }
    let online = a.critic1.params();
    for ((old, (_, new)), (_, on)) in before.iter().zip(a.critic1_target.params()).zip(online) {
        for ((o, n), w) in old.iter().zip(new.values()).zip(on.values()) {
            let expect = 0.99 * o + 0.01 * w;
            assert!((n - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }
}

#[test]
fn actor_updates_never_touch_encoder_or_critics() {
    let mut a = agent(7);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fixed = ["encoder", "critic1", "critic2", "critic1_target", "critic2_target"];
    let digest = a.weights_digest(&fixed);
    let actor = a.weights_digest(&["actor"]);
    for _ in 0..20 {
        a.update_actor(&batch(&mut rng, 4, 0.5, 0.9), 0.2).unwrap();
    }
    assert_eq!(a.weights_digest(&fixed), digest);
    assert_ne!(a.weights_digest(&["actor"]), actor);
    let enc = a.weights_digest(&["encoder"]);
    a.update_critic(&batch(&mut rng, 4, 0.5, 0.9), 0.2).unwrap();
    assert_ne!(a.weights_digest(&["encoder"]), enc);
}

#[test]
fn exact_critics_give_zero_loss_and_no_movement() {
    let mut a = Agent::<f64>::new(spec(), AgentConfig { pad: 0, ..config() }, 8).unwrap();
    let (r, d, qt) = (0.25, 0.970299, 2.0);
    constant_critic(&mut a.critic1_target, qt);
    constant_critic(&mut a.critic2_target, qt);
    constant_critic(&mut a.critic1, r + d * qt);
    constant_critic(&mut a.critic2, r + d * qt);
    let online = a.weights_digest(&["encoder", "critic1", "critic2"]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stats = a.update_critic(&batch(&mut rng, 4, r, d), 0.4).unwrap();
    assert_eq!((stats.loss1, stats.loss2), (0.0, 0.0));
    assert_eq!(a.weights_digest(&["encoder", "critic1", "critic2"]), online);
}

#[test]
fn critic_loss_gradient_matches_finite_differences() {
    let a = agent(9);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let b = batch(&mut rng, 1, 0.0, 0.0);
    let y = [1.75];
    let loss_and_grad = |q: f64| {
        let mut c = a.critic1.clone();
        constant_critic(&mut c, q);
        let mut tape = Tape::new();
        let be = a.encoder.bind(&mut tape, false);
        let h = a.encoder.forward(&mut tape, &be, &b.obs).unwrap();
        let act = tape.constant(b.action.clone());
        let bc = c.bind(&mut tape, true);
        let out = c.forward(&mut tape, &bc, h, act).unwrap();
        let l = tape.mse(out, &y).unwrap();
        tape.backward(l).unwrap();
        (tape.item(l), tape.grad(out).unwrap()[0])
    };
    for q in [-2.0, 0.3, 1.75, 4.0] {
        let (_, g) = loss_and_grad(q);
        let h = 1e-6;
        let fd = (loss_and_grad(q + h).0 - loss_and_grad(q - h).0) / (2.0 * h);
        assert!((g - 2.0 * (q - y[0])).abs() < 1e-12);
        assert!((g - fd).abs() < 1e-4, "q={q}: {g} vs {fd}");
    }
}

/// Critic computing the piecewise-linear interpolant of −(a − 0.3)² on knots
/// spaced 0.05 over [−1, 1], ignoring the features.
fn quadratic_critic(features: usize, hidden: usize) -> Critic<f64> {
    let knots: Vec<f64> = (0..=40).map(|j| -1.0 + 0.05 * j as f64).collect();
    assert!(hidden >= knots.len());
    let f = |a: f64| -(a - 0.3) * (a - 0.3);
    let slopes: Vec<f64> = knots.windows(2).map(|w| (f(w[1]) - f(w[0])) / (w[1] - w[0])).collect();
    let inputs = features + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut c = Critic {
        mlp: crate::nn::network::Mlp::new(inputs, hidden, 1, &mut rng),
    };
    let [l0, l1, l2] = &mut c.mlp.layers;
    l0.weight.tensor.values_mut().fill(0.0);
    l0.bias.tensor.values_mut().fill(0.0);
    l1.weight.tensor.values_mut().fill(0.0);
    l1.bias.tensor.values_mut().fill(0.0);
    l2.weight.tensor.values_mut().fill(0.0);
    for (j, &k) in knots.iter().enumerate().take(slopes.len()) {
        // unit j: relu(a − k_j)
        l0.weight.tensor.values_mut()[j * inputs + features] = 1.0;
        l0.bias.tensor.values_mut()[j] = -k;
        l1.weight.tensor.values_mut()[j * hidden + j] = 1.0;
        let prev = if j == 0 { 0.0 } else { slopes[j - 1] };
        l2.weight.tensor.values_mut()[j] = slopes[j] - prev;
    }
    l2.bias.tensor.values_mut()[0] = f(-1.0);
    c
}

#[test]
fn quadratic_critic_matches_its_formula_at_knots() {
    let c = quadratic_critic(8, 48);
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::zeros(&[3, 8]));
    let a = tape.constant(Tensor::new(vec![3, 1], vec![-1.0, 0.3, 0.55]).unwrap());
    let bc = c.bind(&mut tape, false);
    let q = c.forward(&mut tape, &bc, h, a).unwrap();
    let v = tape.value(q).values();
    assert!((v[0] + 1.69).abs() < 1e-12);
    assert!(v[1].abs() < 1e-12);
    assert!((v[2] + 0.0625).abs() < 1e-12);
}

#[test]
fn actor_climbs_fixed_critic_to_its_argmax() {
    let spec = NetworkSpec {
        hidden_dim: 48,
        ..spec()
    };
    let cfg = AgentConfig {
        hidden_dim: 48,
        lr: 1e-3,
        pad: 0,
        ..config()
    };
    let mut a = Agent::<f64>::new(spec, cfg, 10).unwrap();
    a.critic1 = quadratic_critic(8, 48);
    a.critic2 = quadratic_critic(8, 48);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let obs = random_obs(&mut rng, 8);
    for _ in 0..1500 {
        a.actor_step(&obs, 0.0).unwrap();
    }
    let mu = a.policy().mean_action(&obs).unwrap();
    for &m in mu.values() {
        assert!((m - 0.3).abs() < 0.05, "policy output {m}");
    }
}

#[test]
fn zero_noise_actor_loss_is_deterministic() {
    let mut a = agent(11);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs = random_obs(&mut rng, 4);
    let actor = a.actor.clone();
    let first = a.actor_step(&obs, 0.0).unwrap();
    a.actor = actor;
    a.actor.zero_grad();
    assert_eq!(a.actor_step(&obs, 0.0).unwrap(), first);
}

#[test]
fn noise_is_clipped_over_many_draws() {
    let mut a = agent(12);
    let log = recording_hook(&mut a);
    let eps = a.clipped_noise(100_000, 1.0).unwrap();
    assert!(eps.iter().all(|e| e.abs() <= 0.3));
    assert!(eps.iter().any(|e| e.abs() == 0.3), "clip should be active at sigma 1");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        a.update_critic(&batch(&mut rng, 4, 0.5, 0.9), 5.0).unwrap();
        a.update_actor(&batch(&mut rng, 4, 0.5, 0.9), 5.0).unwrap();
    }
    for e in log.lock().unwrap().iter() {
        if let UpdateEvent::Noise { max_abs, clip, .. } = e {
            assert!(max_abs <= clip);
        }
    }
}

fn filled_buffer(steps: usize) -> ReplayBuffer {
    let mut rb = ReplayBuffer::new(BufferConfig {
        capacity: 10_000,
        nstep: 3,
        gamma: 0.99,
        frame_stack: 1,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ep = Episode::new(&Frame::blank(15), 1);
    for _ in 0..steps {
        let f = Frame::new(15, (0..675).map(|_| rng.random()).collect()).unwrap();
        ep.push(&f, &[rng.random_range(-1.0..1.0)], rng.random()).unwrap();
    }
    rb.insert_episode(ep).unwrap();
    rb
}

#[test]
fn no_updates_before_seed_frames() {
    let mut a = agent(13);
    let rb = filled_buffer(20);
    let digest = a.weights_digest(&ALL);
    for t in (2..4000).step_by(2) {
        assert!(a.train_step(t, &rb).unwrap().is_none());
    }
    assert_eq!(a.weights_digest(&ALL), digest);
    assert_eq!(a.updates(), 0);
}

#[test]
fn one_update_pair_per_actor_step_after_seeding() {
    let a = agent(14);
    // due_updates is pure arithmetic over (frames_seen, t]
    let mut prev = 0u64;
    let mut per_step = Vec::new();
    for step in 1..=2100u64 {
        let t = 2 * step;
        let mut probe = agent(14);
        probe.set_frames_seen(prev);
        per_step.push(probe.due_updates(t).count());
        prev = t;
    }
    assert!(per_step[..1999].iter().all(|&n| n == 0));
    assert!(per_step[1999..].iter().all(|&n| n == 1), "{:?}", &per_step[1995..2005]);
    drop(a);

    let mut a = agent(15);
    let rb = filled_buffer(30);
    let log = recording_hook(&mut a);
    a.set_frames_seen(3990);
    for t in (3992..=4010).step_by(2) {
        let stats = a.train_step(t, &rb).unwrap();
        assert_eq!(stats.is_some(), t >= 4000, "t={t}");
    }
    assert_eq!(a.updates(), 6);
    let kinds: Vec<u8> = log
        .lock()
        .unwrap()
        .iter()
        .map(|e| match e {
            UpdateEvent::Noise { .. } => b'n',
            UpdateEvent::Critic(_) => b'c',
            UpdateEvent::Actor(_) => b'a',
        })
        .collect();
    assert_eq!(kinds, b"ncna".repeat(6));
}

#[test]
fn larger_action_repeat_schedules_every_multiple() {
    let mut a = agent(16);
    a.set_frames_seen(4000);
    assert_eq!(a.due_updates(4008).collect::<Vec<_>>(), vec![4002, 4004, 4006, 4008]);
}

#[test]
fn identical_seeds_train_identically() {
    for pad in [0, 2] {
        let run = || {
            let mut a = Agent::<f64>::new(
                spec(),
                AgentConfig {
                    pad,
                    seed_frames: 0,
                    schedule: NoiseSchedule::fixed(0.0),
                    ..config()
                },
                17,
            )
            .unwrap();
            let rb = filled_buffer(30);
            for t in (2..=20).step_by(2) {
                a.train_step(t, &rb).unwrap();
            }
            a.weights_digest(&ALL)
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn checkpoint_roundtrip_restores_everything() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.ckpt");
    let mut a = agent(18);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    a.update_critic(&batch(&mut rng, 4, 0.5, 0.9), 0.2).unwrap();
    a.set_frames_seen(1234);
    a.save_checkpoint(&path).unwrap();
    let mut b = agent(99);
    assert_ne!(b.weights_digest(&ALL), a.weights_digest(&ALL));
    b.load_checkpoint(&path).unwrap();
    assert_eq!(b.weights_digest(&ALL), a.weights_digest(&ALL));
    assert_eq!(b.frames_seen(), 1234);
    for ((_, p), (_, q)) in a.named_params().iter().zip(b.named_params()) {
        assert_eq!(p.adam_m, q.adam_m);
        assert_eq!(p.step_count, q.step_count);
    }
    let mut other = Agent::<f64>::new(NetworkSpec { action_dim: 2, ..spec() }, config(), 0).unwrap();
    assert!(matches!(other.load_checkpoint(&path), Err(Error::Format { .. })));
}

#[test]
fn rng_state_roundtrip() {
    let mut a = agent(19);
    let obs = StackedObservation::from_frames([&Frame::blank(15)]);
    a.act(&obs, 0, ActMode::Seed).unwrap();
    let state = a.rng_state();
    let json = serde_json::to_string(&state).unwrap();
    let x = a.act(&obs, 0, ActMode::Seed).unwrap();
    a.set_rng_state(&serde_json::from_str(&json).unwrap()).unwrap();
    assert_eq!(a.act(&obs, 0, ActMode::Seed).unwrap(), x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn clipped_noise_respects_bound(seed in any::<u64>(), sigma in 0.0f64..20.0, clip in 0.01f64..2.0) {
        let mut a = Agent::<f64>::new(spec(), AgentConfig { noise_clip: clip, ..config() }, seed).unwrap();
        prop_assert!(a.clipped_noise(512, sigma).unwrap().iter().all(|e| e.abs() <= clip));
    }

    #[test]
    fn train_actions_stay_in_box(seed in any::<u64>(), t in 0u64..1_000_000) {
        let mut a = agent(seed);
        let obs = StackedObservation::from_frames([&Frame::blank(15)]);
        for mode in [ActMode::Train, ActMode::Eval, ActMode::Seed] {
            prop_assert!(a.act(&obs, t, mode).unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
