//! Encoder, actor and critic networks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::{adam_step, orthogonal, polyak_update, AdamConfig, Parameter};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CONV_CHANNELS: usize = 32;
pub const CONV_STRIDES: [usize; 4] = [2, 1, 1, 1];
pub const KERNEL: usize = 3;
const LAYERNORM_EPS: f64 = 1e-5;

/// Dimensions of the five networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Channels of a stacked observation (frame stack × 3).
    pub obs_channels: usize,
    /// Side length of the square observation.
    pub obs_size: usize,
    pub action_dim: usize,
    pub features_dim: usize,
    pub hidden_dim: usize,
}

impl NetworkSpec {
    /// Side length of the final convolution's output.
    pub fn conv_out_size(&self) -> usize {
        CONV_STRIDES
            .iter()
            .fold(self.obs_size, |s, &stride| (s - KERNEL) / stride + 1)
    }

    /// Flattened width of the convolutional trunk output.
    pub fn repr_dim(&self) -> usize {
        let s = self.conv_out_size();
        CONV_CHANNELS * s * s
    }

    pub fn validate(&self) -> Result<()> {
        let mut side = self.obs_size;
        for &stride in &CONV_STRIDES {
            if side < KERNEL {
                return Err(Error::config(format!(
                    "observation size {} too small for the encoder trunk",
                    self.obs_size
                )));
            }
            side = (side - KERNEL) / stride + 1;
        }
        if self.obs_channels == 0 || self.action_dim == 0 || self.features_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config(format!("network dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Anything holding named parameters in a fixed order.
pub trait Module<S: Scalar> {
    fn params(&self) -> Vec<(String, &Parameter<S>)>;
    fn params_mut(&mut self) -> Vec<&mut Parameter<S>>;

    /// Puts every parameter on `tape` as a leaf.
    fn bind(&self, tape: &mut Tape<S>, requires_grad: bool) -> Bound {
        Bound(
            self.params()
                .into_iter()
                .map(|(_, p)| tape.leaf(p.tensor.clone(), requires_grad))
                .collect(),
        )
    }

    /// Adds the gradients found on `tape` into the parameters' buffers.
    fn collect_grads(&mut self, tape: &Tape<S>, bound: &Bound) {
        for (p, &v) in self.params_mut().into_iter().zip(&bound.0) {
            match tape.grad(v) {
                Some(g) => p.tensor.accumulate_grad(g),
                None => {
                    let n = p.tensor.numel();
                    p.tensor.accumulate_grad(&vec![S::zero(); n]);
                }
            }
        }
    }

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    /// Adam step on every parameter, then clears the gradients.
    fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for p in self.params_mut() {
            adam_step(p, cfg)?;
            p.zero_grad();
        }
        Ok(())
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.tensor.numel()).sum()
    }
}

/// Parameters of a module as bound onto one tape.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Moves every parameter of `target` toward `online` at rate `tau`.
pub fn soft_update<S: Scalar, M: Module<S>>(target: &mut M, online: &M, tau: f64) -> Result<()> {
    let src = online.params();
    for (t, (_, o)) in target.params_mut().into_iter().zip(src) {
        polyak_update(&mut t.tensor, &o.tensor, tau)?;
    }
    Ok(())
}

fn param_from_f64<S: Scalar>(shape: &[usize], values: Vec<f64>) -> Parameter<S> {
    let t = Tensor::new(shape.to_vec(), values.into_iter().map(S::from_f64).collect())
        .expect("initializer produced a consistent shape");
    Parameter::new(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S: Scalar> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: param_from_f64(&[outputs, inputs], orthogonal(outputs, inputs, gain, rng)),
            bias: Parameter::new(Tensor::zeros(&[outputs])),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<S: Scalar> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
    pub stride: usize,
}

fn push_named<'a, S: Scalar>(
    out: &mut Vec<(String, &'a Parameter<S>)>,
    prefix: &str,
    weight: &'a Parameter<S>,
    bias: &'a Parameter<S>,
) {
    out.push((format!("{prefix}.weight"), weight));
    out.push((format!("{prefix}.bias"), bias));
}

/// Convolutional trunk followed by a projection to `features_dim`, layer
/// normalization and `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<S: Scalar> {
    pub convs: Vec<Conv<S>>,
    pub fc: Dense<S>,
    pub norm_gain: Parameter<S>,
    pub norm_shift: Parameter<S>,
}

impl<S: Scalar> Encoder<S> {
    pub fn new<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let relu_gain = 2f64.sqrt();
        let mut in_c = spec.obs_channels;
        let convs = CONV_STRIDES
            .iter()
            .map(|&stride| {
                let fan_in = in_c * KERNEL * KERNEL;
                let w = orthogonal(CONV_CHANNELS, fan_in, relu_gain, rng);
                let conv = Conv {
                    weight: param_from_f64(&[CONV_CHANNELS, in_c, KERNEL, KERNEL], w),
                    bias: Parameter::new(Tensor::zeros(&[CONV_CHANNELS])),
                    stride,
                };
                in_c = CONV_CHANNELS;
                conv
            })
            .collect();
        Self {
            convs,
            fc: Dense::new(spec.repr_dim(), spec.features_dim, relu_gain, rng),
            norm_gain: Parameter::new(Tensor::full(&[spec.features_dim], S::one())),
            norm_shift: Parameter::new(Tensor::zeros(&[spec.features_dim])),
        }
    }

    /// Encodes `[B,C,H,W]` observations with values in `[0,1]`.
    ///
    /// Pixels are centered to `[-0.5, 0.5]` before the first convolution.
    pub fn forward(&self, tape: &mut Tape<S>, bound: &Bound, obs: &Tensor<S>) -> Result<Var> {
        let half = S::from_f64(0.5);
        let centered = Tensor::from_fn(obs.shape(), |i| obs.values()[i] - half);
        let mut x = tape.constant(centered);
        let mut vars = bound.vars().iter().copied();
        let mut next = || vars.next().expect("bound parameter count");
        for conv in &self.convs {
            let (w, b) = (next(), next());
            x = tape.conv2d(x, w, b, conv.stride)?;
            x = tape.relu(x);
        }
        x = tape.flatten(x)?;
        let (w, b) = (next(), next());
        x = tape.linear(x, w, b)?;
        let (g, s) = (next(), next());
        x = tape.layernorm(x, g, s, S::from_f64(LAYERNORM_EPS))?;
        Ok(tape.tanh(x))
    }
}

impl<S: Scalar> Module<S> for Encoder<S> {
    fn params(&self) -> Vec<(String, &Parameter<S>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            push_named(&mut out, &format!("conv{i}"), &c.weight, &c.bias);
        }
        push_named(&mut out, "fc", &self.fc.weight, &self.fc.bias);
        out.push(("norm.gain".into(), &self.norm_gain));
        out.push(("norm.shift".into(), &self.norm_shift));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.fc.weight);
        out.push(&mut self.fc.bias);
        out.push(&mut self.norm_gain);
        out.push(&mut self.norm_shift);
        out
    }
}

/// Three-layer perceptron with ReLU hidden activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S: Scalar> {
    pub layers: [Dense<S>; 3],
}

impl<S: Scalar> Mlp<S> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        let g = 2f64.sqrt();
        Self {
            layers: [
                Dense::new(inputs, hidden, g, rng),
                Dense::new(hidden, hidden, g, rng),
                Dense::new(hidden, outputs, 1.0, rng),
            ],
        }
    }

    fn forward(&self, tape: &mut Tape<S>, bound: &Bound, input: Var) -> Result<Var> {
        let v = bound.vars();
        let mut x = tape.linear(input, v[0], v[1])?;
        x = tape.relu(x);
        x = tape.linear(x, v[2], v[3])?;
        x = tape.relu(x);
        tape.linear(x, v[4], v[5])
    }
}

impl<S: Scalar> Module<S> for Mlp<S> {
    fn params(&self) -> Vec<(String, &Parameter<S>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            push_named(&mut out, &format!("l{i}"), &l.weight, &l.bias);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Deterministic policy: features → action in (−1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Actor<S: Scalar> {
    pub mlp: Mlp<S>,
}

impl<S: Scalar> Actor<S> {
    pub fn new<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(spec.features_dim, spec.hidden_dim, spec.action_dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, bound: &Bound, features: Var) -> Result<Var> {
        let x = self.mlp.forward(tape, bound, features)?;
        Ok(tape.tanh(x))
    }
}

impl<S: Scalar> Module<S> for Actor<S> {
    fn params(&self) -> Vec<(String, &Parameter<S>)> {
        self.mlp.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        self.mlp.params_mut()
    }
}

/// Action-value function: (features, action) → scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic<S: Scalar> {
    pub mlp: Mlp<S>,
}

impl<S: Scalar> Critic<S> {
    pub fn new<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(spec.features_dim + spec.action_dim, spec.hidden_dim, 1, rng),
        }
    }

    /// Returns `[B,1]` action values.
    pub fn forward(&self, tape: &mut Tape<S>, bound: &Bound, features: Var, action: Var) -> Result<Var> {
        let x = tape.concat_cols(features, action)?;
        self.mlp.forward(tape, bound, x)
    }
}

impl<S: Scalar> Module<S> for Critic<S> {
    fn params(&self) -> Vec<(String, &Parameter<S>)> {
        self.mlp.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        self.mlp.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> NetworkSpec {
        NetworkSpec {
            obs_channels: 9,
            obs_size: 84,
            action_dim: 2,
            features_dim: 50,
            hidden_dim: 32,
        }
    }

    #[test]
    fn trunk_geometry_matches_stride_schedule() {
        let s = spec();
        assert_eq!(s.conv_out_size(), 35);
        assert_eq!(s.repr_dim(), 32 * 35 * 35);
        assert!(NetworkSpec { obs_size: 10, ..s }.validate().is_err());
        assert!(NetworkSpec { obs_size: 15, ..s }.validate().is_ok());
    }

    #[test]
    fn forward_shapes_and_bounds() {
        let s = NetworkSpec {
            obs_size: 24,
            ..spec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::<f32>::new(&s, &mut rng);
        let actor = Actor::<f32>::new(&s, &mut rng);
        let critic = Critic::<f32>::new(&s, &mut rng);
        let obs = Tensor::from_fn(&[3, 9, 24, 24], |_| rng.random::<f32>());
        let mut tape = Tape::new();
        let eb = enc.bind(&mut tape, false);
        let ab = actor.bind(&mut tape, false);
        let cb = critic.bind(&mut tape, false);
        let h = enc.forward(&mut tape, &eb, &obs).unwrap();
        assert_eq!(tape.shape(h), &[3, 50]);
        let a = actor.forward(&mut tape, &ab, h).unwrap();
        assert_eq!(tape.shape(a), &[3, 2]);
        assert!(tape.value(a).values().iter().all(|v| v.abs() < 1.0));
        let q = critic.forward(&mut tape, &cb, h, a).unwrap();
        assert_eq!(tape.shape(q), &[3, 1]);
    }

    #[test]
    fn param_names_are_unique_and_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::<f64>::new(&NetworkSpec { obs_size: 16, ..spec() }, &mut rng);
        let names: Vec<_> = enc.params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "conv0.weight");
        assert_eq!(names.last().unwrap(), "norm.shift");
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }

    #[test]
    fn critics_do_not_share_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = spec();
        let c1 = Critic::<f32>::new(&s, &mut rng);
        let c2 = Critic::<f32>::new(&s, &mut rng);
        assert_ne!(c1.mlp.layers[0].weight.values(), c2.mlp.layers[0].weight.values());
    }
}
