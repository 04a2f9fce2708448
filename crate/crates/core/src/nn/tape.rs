//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and
//! [`Tape::backward`] simply walks it in reverse. A node takes part in the
//! backward pass only if one of its inputs requires a gradient; leaves
//! registered with `requires_grad = false` therefore act as stop-gradients.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor, Trans};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        shift: Var,
        normalized: Vec<S>,
        rstd: Vec<S>,
    },
    Relu(Var),
    Tanh(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    AddConst(Var),
    Clamp {
        input: Var,
        lo: S,
        hi: S,
    },
    Add(Var, Var),
    Minimum(Var, Var),
    Scale(Var, S),
    Sum(Var),
    Mean(Var),
    Mse {
        input: Var,
        target: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Activation kinds supported by [`Tape::activation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        let mut value = value;
        value.zero_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// First element of a node's value; convenient for scalar losses.
    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value.values()[0]
    }

    /// Gradient of the last `backward` root with respect to `v`, if any
    /// flowed there.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Valid cross-correlation (no padding) of `[B,C,H,W]` input with
    /// `[O,C,K,K]` weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::contract(format!(
                "conv2d expects 4-d input and weight, got input {xs:?} weight {ws:?}"
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::contract(format!("conv2d stride {stride} not in {{1,2}}")));
        }
        let geo = ConvGeometry::new(&xs, &ws, stride)?;
        if bs != [geo.out_c] {
            return Err(Error::contract(format!(
                "conv2d bias shape {bs:?} does not match {} output channels",
                geo.out_c
            )));
        }
        let x = self.value(input).values();
        let w = self.value(weight).values();
        let b = self.value(bias).values();
        let mut out = vec![S::zero(); geo.batch * geo.out_c * geo.out_plane()];
        let mut cols = vec![S::zero(); geo.col_rows() * geo.out_plane()];
        for (xb, ob) in x
            .chunks_exact(geo.in_plane_all())
            .zip(out.chunks_exact_mut(geo.out_c * geo.out_plane()))
        {
            geo.im2col(xb, &mut cols);
            gemm(
                geo.out_c,
                geo.col_rows(),
                geo.out_plane(),
                S::one(),
                w,
                Trans::No,
                &cols,
                Trans::No,
                S::zero(),
                ob,
            );
            for (row, &bo) in ob.chunks_exact_mut(geo.out_plane()).zip(b) {
                row.iter_mut().for_each(|v| *v += bo);
            }
        }
        let value = Tensor::new(vec![geo.batch, geo.out_c, geo.out_h, geo.out_w], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
            rg,
        ))
    }

    /// `input · weightᵀ + bias` for `[B,I]` input and `[O,I]` weight.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::contract(format!(
                "linear shape mismatch: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (batch, inp, outp) = (xs[0], xs[1], ws[0]);
        let mut out = vec![S::zero(); batch * outp];
        gemm(
            batch,
            inp,
            outp,
            S::one(),
            self.value(input).values(),
            Trans::No,
            self.value(weight).values(),
            Trans::Yes,
            S::zero(),
            &mut out,
        );
        let b = self.value(bias).values();
        for row in out.chunks_exact_mut(outp) {
            row.iter_mut().zip(b).for_each(|(v, &bo)| *v += bo);
        }
        let value = Tensor::new(vec![batch, outp], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// affine map.
    pub fn layernorm(&mut self, input: Var, gain: Var, shift: Var, eps: S) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 2 {
            return Err(Error::contract(format!("layernorm expects [B,F], got {xs:?}")));
        }
        let f = xs[1];
        if self.shape(gain) != [f] || self.shape(shift) != [f] {
            return Err(Error::contract(format!(
                "layernorm affine shapes {:?}/{:?} do not match feature dim {f}",
                self.shape(gain),
                self.shape(shift)
            )));
        }
        let fs = S::from_f64(f as f64);
        let g = self.value(gain).values();
        let s = self.value(shift).values();
        let mut normalized = vec![S::zero(); xs[0] * f];
        let mut out = vec![S::zero(); xs[0] * f];
        let mut rstd = Vec::with_capacity(xs[0]);
        for ((row, nrow), orow) in self
            .value(input)
            .values()
            .chunks_exact(f)
            .zip(normalized.chunks_exact_mut(f))
            .zip(out.chunks_exact_mut(f))
        {
            let mean = row.iter().copied().sum::<S>() / fs;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / fs;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..f {
                nrow[j] = (row[j] - mean) * r;
                orow[j] = nrow[j] * g[j] + s[j];
            }
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(input) || self.rg(gain) || self.rg(shift);
        Ok(self.push(
            value,
            Op::LayerNorm {
                input,
                gain,
                shift,
                normalized,
                rstd,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(input),
            Activation::Tanh => self.tanh(input),
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::from_fn(x.shape(), |i| x.values()[i].max(S::zero()));
        let rg = self.rg(input);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::from_fn(x.shape(), |i| x.values()[i].tanh());
        let rg = self.rg(input);
        self.push(value, Op::Tanh(input), rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Flattens everything but the leading (batch) dimension.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let batch = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(input, &[batch, rest])
    }

    /// Concatenates two `[B,·]` matrices along the feature axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::contract(format!(
                "concat_cols needs equal batch: {sa:?} vs {sb:?}"
            )));
        }
        let (fa, fb) = (sa[1], sb[1]);
        let mut out = Vec::with_capacity(sa[0] * (fa + fb));
        for (ra, rb) in self
            .value(a)
            .values()
            .chunks_exact(fa)
            .zip(self.value(b).values().chunks_exact(fb))
        {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let value = Tensor::new(vec![sa[0], fa + fb], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Adds a constant tensor of identical shape; gradient passes through.
    pub fn add_const(&mut self, input: Var, c: &[S]) -> Result<Var> {
        let x = self.value(input);
        if x.numel() != c.len() {
            return Err(Error::contract(format!(
                "add_const length {} does not match {:?}",
                c.len(),
                x.shape()
            )));
        }
        let value = Tensor::from_fn(x.shape(), |i| x.values()[i] + c[i]);
        let rg = self.rg(input);
        Ok(self.push(value, Op::AddConst(input), rg))
    }

    /// Element-wise clamp; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, input: Var, lo: S, hi: S) -> Var {
        let x = self.value(input);
        let value = Tensor::from_fn(x.shape(), |i| x.values()[i].max(lo).min(hi));
        let rg = self.rg(input);
        self.push(value, Op::Clamp { input, lo, hi }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(x.shape(), |i| x.values()[i] + y.values()[i]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Element-wise minimum. Ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "minimum")?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(x.shape(), |i| x.values()[i].min(y.values()[i]));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Minimum(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, c: S) -> Var {
        let x = self.value(input);
        let value = Tensor::from_fn(x.shape(), |i| x.values()[i] * c);
        let rg = self.rg(input);
        self.push(value, Op::Scale(input, c), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).values().iter().copied().sum::<S>();
        let rg = self.rg(input);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let total = x.values().iter().copied().sum::<S>() / S::from_f64(x.numel() as f64);
        let rg = self.rg(input);
        self.push(Tensor::scalar(total), Op::Mean(input), rg)
    }

    /// Mean squared error against a constant target with the same number of
    /// elements.
    pub fn mse(&mut self, input: Var, target: &[S]) -> Result<Var> {
        let x = self.value(input);
        if x.numel() != target.len() {
            return Err(Error::contract(format!(
                "mse target has {} entries, input {:?}",
                target.len(),
                x.shape()
            )));
        }
        let n = S::from_f64(x.numel() as f64);
        let loss = x
            .values()
            .iter()
            .zip(target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<S>()
            / n;
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                input,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(format!(
                "{what} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Back-propagates from a single-element `root`, seeding its gradient
    /// with one. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be a scalar, got {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => buf.iter_mut().zip(contrib).for_each(|(b, x)| *b += x),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&mut [S])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
        f(buf);
    }

    fn backprop_node(&mut self, i: usize, g: &[S]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => self.conv2d_backward(input, weight, bias, stride, g),
            &Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(input).to_vec();
                let outp = self.shape(weight)[0];
                let (batch, inp) = (xs[0], xs[1]);
                if self.rg(input) {
                    let mut dx = vec![S::zero(); batch * inp];
                    gemm(
                        batch,
                        outp,
                        inp,
                        S::one(),
                        g,
                        Trans::No,
                        self.value(weight).values(),
                        Trans::No,
                        S::zero(),
                        &mut dx,
                    );
                    self.accumulate(input, dx);
                }
                if self.rg(weight) {
                    let x = std::mem::take(&mut self.nodes[input.0].value);
                    self.accumulate_with(weight, |dw| {
                        gemm(
                            outp,
                            batch,
                            inp,
                            S::one(),
                            g,
                            Trans::Yes,
                            x.values(),
                            Trans::No,
                            S::one(),
                            dw,
                        )
                    });
                    self.nodes[input.0].value = x;
                }
                if self.rg(bias) {
                    self.accumulate_with(bias, |db| {
                        for row in g.chunks_exact(outp) {
                            db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                        }
                    });
                }
            }
            Op::LayerNorm {
                input,
                gain,
                shift,
                normalized,
                rstd,
            } => {
                let (input, gain, shift) = (*input, *gain, *shift);
                let f = self.shape(input)[1];
                let fs = S::from_f64(f as f64);
                let gv = self.value(gain).values();
                let mut dx = if self.rg(input) {
                    Some(vec![S::zero(); normalized.len()])
                } else {
                    None
                };
                let mut dgain = vec![S::zero(); f];
                let mut dshift = vec![S::zero(); f];
                for (r, (grow, nrow)) in g.chunks_exact(f).zip(normalized.chunks_exact(f)).enumerate() {
                    let mut sum_dn = S::zero();
                    let mut sum_dn_n = S::zero();
                    for j in 0..f {
                        dgain[j] += grow[j] * nrow[j];
                        dshift[j] += grow[j];
                        let dn = grow[j] * gv[j];
                        sum_dn += dn;
                        sum_dn_n += dn * nrow[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let drow = &mut dx[r * f..(r + 1) * f];
                        let scale = rstd[r] / fs;
                        for j in 0..f {
                            let dn = grow[j] * gv[j];
                            drow[j] = scale * (fs * dn - sum_dn - nrow[j] * sum_dn_n);
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(input, dx);
                }
                self.accumulate(gain, dgain);
                self.accumulate(shift, dshift);
            }
            &Op::Relu(x) => {
                let y = self.nodes[i].value.values();
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| if yi > S::zero() { gi } else { S::zero() })
                    .collect();
                self.accumulate(x, d);
            }
            &Op::Tanh(x) => {
                let y = self.nodes[i].value.values();
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi * (S::one() - yi * yi))
                    .collect();
                self.accumulate(x, d);
            }
            &Op::Reshape(x) | &Op::AddConst(x) => self.accumulate(x, g.to_vec()),
            &Op::ConcatCols(a, b) => {
                let fa = self.shape(a)[1];
                let fb = self.shape(b)[1];
                let mut da = Vec::with_capacity(g.len() / (fa + fb) * fa);
                let mut db = Vec::with_capacity(g.len() / (fa + fb) * fb);
                for row in g.chunks_exact(fa + fb) {
                    da.extend_from_slice(&row[..fa]);
                    db.extend_from_slice(&row[fa..]);
                }
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            &Op::Clamp { input, lo, hi } => {
                let x = self.value(input).values();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi >= lo && xi <= hi { gi } else { S::zero() })
                    .collect();
                self.accumulate(input, d);
            }
            &Op::Add(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            &Op::Minimum(a, b) => {
                let (x, y) = (self.value(a).values(), self.value(b).values());
                let mut da = vec![S::zero(); g.len()];
                let mut db = vec![S::zero(); g.len()];
                for k in 0..g.len() {
                    if x[k] <= y[k] {
                        da[k] = g[k];
                    } else {
                        db[k] = g[k];
                    }
                }
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            &Op::Scale(x, c) => {
                let d = g.iter().map(|&gi| gi * c).collect();
                self.accumulate(x, d);
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                self.accumulate(x, vec![g[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                let d = g[0] / S::from_f64(n as f64);
                self.accumulate(x, vec![d; n]);
            }
            Op::Mse { input, target } => {
                let input = *input;
                let x = self.value(input).values();
                let c = S::from_f64(2.0) * g[0] / S::from_f64(x.len() as f64);
                let d = x.iter().zip(target).map(|(&a, &b)| c * (a - b)).collect();
                self.accumulate(input, d);
            }
        }
        self.nodes[i].op = op;
    }

    fn conv2d_backward(&mut self, input: Var, weight: Var, bias: Var, stride: usize, g: &[S]) {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let geo = ConvGeometry::new(&xs, &ws, stride).expect("validated in forward");
        let (need_x, need_w, need_b) = (self.rg(input), self.rg(weight), self.rg(bias));
        let plane = geo.out_c * geo.out_plane();

        if need_b {
            self.accumulate_with(bias, |db| {
                for gb in g.chunks_exact(plane) {
                    for (d, row) in db.iter_mut().zip(gb.chunks_exact(geo.out_plane())) {
                        *d += row.iter().copied().sum::<S>();
                    }
                }
            });
        }
        if need_w {
            let x = std::mem::take(&mut self.nodes[input.0].value);
            let mut cols = vec![S::zero(); geo.col_rows() * geo.out_plane()];
            self.accumulate_with(weight, |dw| {
                for (xb, gb) in x.values().chunks_exact(geo.in_plane_all()).zip(g.chunks_exact(plane)) {
                    geo.im2col(xb, &mut cols);
                    gemm(
                        geo.out_c,
                        geo.out_plane(),
                        geo.col_rows(),
                        S::one(),
                        gb,
                        Trans::No,
                        &cols,
                        Trans::Yes,
                        S::one(),
                        dw,
                    );
                }
            });
            self.nodes[input.0].value = x;
        }
        if need_x {
            let w = std::mem::take(&mut self.nodes[weight.0].value);
            let mut dcols = vec![S::zero(); geo.col_rows() * geo.out_plane()];
            self.accumulate_with(input, |dx| {
                for (dxb, gb) in dx.chunks_exact_mut(geo.in_plane_all()).zip(g.chunks_exact(plane)) {
                    gemm(
                        geo.col_rows(),
                        geo.out_c,
                        geo.out_plane(),
                        S::one(),
                        w.values(),
                        Trans::Yes,
                        gb,
                        Trans::No,
                        S::zero(),
                        &mut dcols,
                    );
                    geo.col2im_add(&dcols, dxb);
                }
            });
            self.nodes[weight.0].value = w;
        }
    }
}

/// Shape bookkeeping for a square-kernel valid convolution.
#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize) -> Result<Self> {
        let (batch, in_c, in_h, in_w) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_c, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != in_c {
            return Err(Error::contract(format!(
                "conv2d weight expects {wc} input channels but input has {in_c} (input {xs:?}, weight {ws:?})"
            )));
        }
        if kh != kw {
            return Err(Error::contract(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if in_h < kh || in_w < kw {
            return Err(Error::contract(format!(
                "conv2d input {in_h}x{in_w} smaller than kernel {kh}x{kw}"
            )));
        }
        Ok(Self {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            k: kh,
            stride,
            out_h: (in_h - kh) / stride + 1,
            out_w: (in_w - kw) / stride + 1,
        })
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn in_plane_all(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    /// Unfolds one image into `[C·K·K, H'·W']`.
    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [S]) {
        let p = self.out_plane();
        let mut row = 0;
        for c in 0..self.in_c {
            let chan = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let src_row = &chan[(oy * self.stride + ki) * self.in_w..];
                        let d = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if self.stride == 1 {
                            d.copy_from_slice(&src_row[kj..kj + self.out_w]);
                        } else {
                            for (ox, v) in d.iter_mut().enumerate() {
                                *v = src_row[ox * self.stride + kj];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Folds `[C·K·K, H'·W']` column gradients back onto one image, adding.
    fn col2im_add<S: Scalar>(&self, cols: &[S], dx: &mut [S]) {
        let p = self.out_plane();
        let mut row = 0;
        for c in 0..self.in_c {
            let chan = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let base = (oy * self.stride + ki) * self.in_w + kj;
                        let s = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        if self.stride == 1 {
                            chan[base..base + self.out_w]
                                .iter_mut()
                                .zip(s)
                                .for_each(|(d, &v)| *d += v);
                        } else {
                            for (ox, &v) in s.iter().enumerate() {
                                chan[base + ox * self.stride] += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.item(y), 9.0);
    }

    #[test]
    fn zero_kernel_outputs_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 7, 9], |i| (i as f64).cos()));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let b = tape.constant(t(&[4], &[0.5, -1.0, 2.0, 3.5]));
        let y = tape.conv2d(x, w, b, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 3, 4]);
        for (i, v) in tape.value(y).values().iter().enumerate() {
            let o = (i / 12) % 4;
            assert_eq!(*v, [0.5, -1.0, 2.0, 3.5][o]);
        }
    }

    #[test]
    fn conv_output_extent_follows_stride() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 9, 84, 84]));
        let w = tape.constant(Tensor::zeros(&[32, 9, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[32]));
        let y = tape.conv2d(x, w, b, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 32, 41, 41]);
    }

    #[test]
    fn conv_shape_errors_name_dimensions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let err = tape.conv2d(x, w, b, 1).unwrap_err().to_string();
        assert!(err.contains("3 input channels") && err.contains("has 2"), "{err}");
        assert!(tape.conv2d(x, w, b, 3).is_err());
        let small = tape.constant(Tensor::zeros(&[1, 3, 2, 5]));
        assert!(tape.conv2d(small, w, b, 1).is_err());
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -4.0, 5.0, 6.5]));
        let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zero_b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.linear(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(y).values(), tape.value(x).values());

        let z = tape.constant(Tensor::zeros(&[4, 3]));
        let w = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = tape.constant(t(&[2], &[0.25, -7.0]));
        let y = tape.linear(z, w, b).unwrap();
        assert_eq!(tape.value(y).values(), &[0.25, -7.0, 0.25, -7.0, 0.25, -7.0, 0.25, -7.0]);

        let bad = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(tape.linear(x, bad, b).is_err());
    }

    #[test]
    fn layernorm_edge_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[3.0, 3.0, -1.0, 1.0]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let s = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layernorm(x, g, s, 1e-12).unwrap();
        let v = tape.value(y).values();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] + 1.0).abs() < 1e-9 && (v[3] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn activations_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-2.0, 0.0, 3.0]));
        let r = tape.activation(x, Activation::Relu);
        assert_eq!(tape.value(r).values(), &[0.0, 0.0, 3.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let th = tape.activation(z, Activation::Tanh);
        assert_eq!(tape.item(th), 0.0);
    }

    #[test]
    fn stop_gradient_leaves_get_nothing() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let b = tape.constant(t(&[2], &[3.0, 0.5]));
        let m = tape.minimum(a, b).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 0.0]);
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn mse_gradient_is_two_residual_over_n() {
        let mut tape = Tape::new();
        let q = tape.leaf(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]), true);
        let loss = tape.mse(q, &[0.0, 2.0, 5.0, 4.5]).unwrap();
        assert!((tape.item(loss) - (1.0 + 0.0 + 4.0 + 0.25) / 4.0).abs() < 1e-12);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(q).unwrap(), &[0.5, 0.0, -1.0, -0.25]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-2.0, 0.5, 1.5]), true);
        let c = tape.clamp(x, -1.0, 1.0);
        assert_eq!(tape.value(c).values(), &[-1.0, 0.5, 1.0]);
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn inputs_are_not_mutated() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[2, 2, 5, 5], |i| (i as f64 * 0.37).sin());
        let x = tape.leaf(xv.clone(), true);
        let wv = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.11).cos());
        let w = tape.leaf(wv.clone(), true);
        let b = tape.leaf(Tensor::zeros(&[3]), true);
        let y = tape.conv2d(x, w, b, 1).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.value(x).values(), xv.values());
        assert_eq!(tape.value(w).values(), wv.values());
    }
}
