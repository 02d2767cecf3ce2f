//! Reverse-mode automatic differentiation over [`Tensor`] ops.
//!
//! A [`Tape`] records the forward graph of one training step; `backward`
//! walks it in reverse and accumulates gradients for the requested leaves.
//! Nodes whose subtree contains no requested leaf are skipped, which is how
//! detached branches (e.g. the discriminator step's fake input) stay cheap.

use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Log-variance is clamped to this symmetric range before exponentiation.
pub const LOG_VAR_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    /// Convolution with the weight divided by its spectrally-estimated norm.
    /// `u` (len cout) and `v` (len k*k*cin) are treated as constants.
    Conv2dSn {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    MaxPool2 {
        x: Var,
        idx: Vec<u8>,
    },
    UpsampleNn {
        x: Var,
        factor: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    ConcatC {
        a: Var,
        b: Var,
    },
    /// c = eps * exp(clamp(log_var)/2) + mu
    Reparam {
        mu: Var,
        log_var: Var,
        eps: Tensor<T>,
    },
    /// scalar: mean |a - b|
    MeanAbsDiff {
        a: Var,
        b: Var,
    },
    /// scalar: mean 0.5 (mu^2 + exp(clamp(lv)) - 1 - clamp(lv))
    KlGauss {
        mu: Var,
        log_var: Var,
    },
    /// scalar: mean softplus(x) or mean softplus(-x)
    SoftplusMean {
        x: Var,
        negate: bool,
    },
    /// (n, h, w, 1) -> (n, 1, 1, 1): per-sample spatial mean
    SpatialMean {
        x: Var,
    },
    /// scalar: mean_i |x_i - target_i| over per-sample values
    AbsDiffTargetMean {
        x: Var,
        target: Vec<T>,
    },
    /// scalar: sum_i coeff_i * term_i
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients by `Var`; leaves not on a path to the root stay `None`.
pub struct Grads<T> {
    inner: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.inner[v.0].as_ref()
    }
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.inner[v.0].take()
    }
}

fn stable_softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (T::one() + (-z.abs()).exp()).ln()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// sigma = v^T A u for the weight unrolled as a (k*k*cin) x cout matrix.
pub fn sn_sigma<T: Scalar>(w: &Tensor<T>, u: &[T], v: &[T]) -> T {
    let cout = w.shape[3];
    let kk = w.numel() / cout;
    assert_eq!(u.len(), cout);
    assert_eq!(v.len(), kk);
    let mut sigma = T::zero();
    for r in 0..kk {
        let row = &w.data[r * cout..(r + 1) * cout];
        let mut acc = T::zero();
        for (wi, ui) in row.iter().zip(u.iter()) {
            acc = acc + *wi * *ui;
        }
        sigma = sigma + v[r] * acc;
    }
    sigma.abs().max(T::from_f64(1e-12))
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let y = kernels::conv2d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        );
        self.push(y, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn conv2d_sn(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        u: &[T],
        v: &[T],
    ) -> Var {
        let sigma = sn_sigma(&self.nodes[w.0].value, u, v);
        let w_norm = self.nodes[w.0].value.map(|e| e / sigma);
        let y = kernels::conv2d_fwd(
            &self.nodes[x.0].value,
            &w_norm,
            &self.nodes[b.0].value,
            stride,
            pad,
        );
        self.push(
            y,
            Op::Conv2dSn {
                x,
                w,
                b,
                stride,
                pad,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.map(|v| v.max(T::zero()));
        self.push(y, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let y = self.nodes[x.0].value.map(|v| if v > T::zero() { v } else { v * s });
        self.push(y, Op::LeakyRelu { x, slope: s })
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (y, idx) = kernels::maxpool2_fwd(&self.nodes[x.0].value);
        self.push(y, Op::MaxPool2 { x, idx })
    }

    pub fn upsample_nn(&mut self, x: Var, factor: usize) -> Var {
        let y = kernels::upsample_nn_fwd(&self.nodes[x.0].value, factor);
        self.push(y, Op::UpsampleNn { x, factor })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "add: shape mismatch");
        let data = va.data.iter().zip(vb.data.iter()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::from_vec(va.shape, data);
        self.push(y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "sub: shape mismatch");
        let data = va.data.iter().zip(vb.data.iter()).map(|(&x, &y)| x - y).collect();
        let y = Tensor::from_vec(va.shape, data);
        self.push(y, Op::Sub { a, b })
    }

    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let y = kernels::concat_c(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(y, Op::ConcatC { a, b })
    }

    pub fn reparam(&mut self, mu: Var, log_var: Var, eps: Tensor<T>) -> Var {
        let (vm, vl) = (&self.nodes[mu.0].value, &self.nodes[log_var.0].value);
        assert_eq!(vm.shape, vl.shape);
        assert_eq!(vm.shape, eps.shape);
        let clamp = T::from_f64(LOG_VAR_CLAMP);
        let half = T::from_f64(0.5);
        let data = vm
            .data
            .iter()
            .zip(vl.data.iter())
            .zip(eps.data.iter())
            .map(|((&m, &lv), &e)| {
                let lv = lv.max(-clamp).min(clamp);
                e * (lv * half).exp() + m
            })
            .collect();
        let y = Tensor::from_vec(vm.shape, data);
        self.push(y, Op::Reparam { mu, log_var, eps })
    }

    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "mean_abs_diff: shape mismatch");
        let n = T::from_f64(va.numel() as f64);
        let s: T = va.data.iter().zip(vb.data.iter()).map(|(&x, &y)| (x - y).abs()).sum();
        self.push(Tensor::scalar(s / n), Op::MeanAbsDiff { a, b })
    }

    pub fn kl_gauss(&mut self, mu: Var, log_var: Var) -> Var {
        let (vm, vl) = (&self.nodes[mu.0].value, &self.nodes[log_var.0].value);
        assert_eq!(vm.shape, vl.shape);
        let clamp = T::from_f64(LOG_VAR_CLAMP);
        let half = T::from_f64(0.5);
        let n = T::from_f64(vm.numel() as f64);
        let s: T = vm
            .data
            .iter()
            .zip(vl.data.iter())
            .map(|(&m, &lv)| {
                let lv = lv.max(-clamp).min(clamp);
                half * (m * m + lv.exp() - T::one() - lv)
            })
            .sum();
        self.push(Tensor::scalar(s / n), Op::KlGauss { mu, log_var })
    }

    pub fn softplus_mean(&mut self, x: Var, negate: bool) -> Var {
        let vx = &self.nodes[x.0].value;
        let n = T::from_f64(vx.numel() as f64);
        let s: T = vx
            .data
            .iter()
            .map(|&z| stable_softplus(if negate { -z } else { z }))
            .sum();
        self.push(Tensor::scalar(s / n), Op::SoftplusMean { x, negate })
    }

    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let [n, h, w, c] = vx.shape;
        assert_eq!(c, 1, "spatial_mean expects a single channel");
        let m = T::from_f64((h * w) as f64);
        let mut out = Tensor::zeros([n, 1, 1, 1]);
        for s in 0..n {
            let sl = &vx.data[s * h * w..(s + 1) * h * w];
            let sum: T = sl.iter().copied().sum();
            out.data[s] = sum / m;
        }
        self.push(out, Op::SpatialMean { x })
    }

    pub fn abs_diff_target_mean(&mut self, x: Var, target: Vec<T>) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.numel(), target.len());
        let n = T::from_f64(target.len() as f64);
        let s: T = vx.data.iter().zip(target.iter()).map(|(&a, &t)| (a - t).abs()).sum();
        self.push(Tensor::scalar(s / n), Op::AbsDiffTargetMean { x, target })
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut s = T::zero();
        for &(v, c) in terms {
            s = s + self.nodes[v.0].value.item() * c;
        }
        self.push(Tensor::scalar(s), Op::WeightedSum { terms: terms.to_vec() })
    }

    fn inputs(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Conv2dSn { x, w, b, .. } => vec![*x, *w, *b],
            Op::Relu { x }
            | Op::LeakyRelu { x, .. }
            | Op::MaxPool2 { x, .. }
            | Op::UpsampleNn { x, .. }
            | Op::SoftplusMean { x, .. }
            | Op::SpatialMean { x }
            | Op::AbsDiffTargetMean { x, .. } => vec![*x],
            Op::Add { a, b } | Op::Sub { a, b } | Op::ConcatC { a, b } | Op::MeanAbsDiff { a, b } => {
                vec![*a, *b]
            }
            Op::Reparam { mu, log_var, .. } | Op::KlGauss { mu, log_var } => vec![*mu, *log_var],
            Op::WeightedSum { terms } => terms.iter().map(|&(v, _)| v).collect(),
        }
    }

    /// Backpropagate from a scalar `root`, computing gradients only for the
    /// `wanted` leaves (and the intermediates needed to reach them).
    pub fn backward(&self, root: Var, wanted: &[Var]) -> Grads<T> {
        let n = self.nodes.len();
        assert_eq!(self.nodes[root.0].value.numel(), 1, "backward root must be scalar");

        // does the subtree under node i contain a wanted leaf?
        let mut relevant = vec![false; n];
        for v in wanted {
            relevant[v.0] = true;
        }
        for i in 0..n {
            if !relevant[i] {
                relevant[i] = self.inputs(i).iter().any(|p| relevant[p.0]);
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !relevant[i] {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &relevant, &mut grads);
            // keep the root/leaf grads accessible after the walk
            if wanted.contains(&Var(i)) || i == root.0 {
                grads[i] = Some(g);
            }
        }
        Grads { inner: grads }
    }

    fn accum(grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        match &mut grads[v.0] {
            Some(t) => {
                debug_assert_eq!(t.shape, delta.shape);
                for (a, b) in t.data.iter_mut().zip(delta.data.iter()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        relevant: &[bool],
        grads: &mut [Option<Tensor<T>>],
    ) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let need_dx = relevant[x.0];
                let need_dw = relevant[w.0] || relevant[b.0];
                let (dx, dw, db) = kernels::conv2d_bwd(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    g,
                    *stride,
                    *pad,
                    need_dx,
                    need_dw,
                );
                if let Some(dx) = dx {
                    Self::accum(grads, *x, dx);
                }
                if need_dw {
                    if relevant[w.0] {
                        Self::accum(grads, *w, dw.unwrap());
                    }
                    if relevant[b.0] {
                        Self::accum(grads, *b, db.unwrap());
                    }
                }
            }
            Op::Conv2dSn { x, w, b, stride, pad, u, v, sigma } => {
                let need_dx = relevant[x.0];
                let need_dw = relevant[w.0] || relevant[b.0];
                let w_norm = self.nodes[w.0].value.map(|e| e / *sigma);
                let (dx, dwn, db) = kernels::conv2d_bwd(
                    &self.nodes[x.0].value,
                    &w_norm,
                    g,
                    *stride,
                    *pad,
                    need_dx,
                    need_dw,
                );
                if let Some(dx) = dx {
                    Self::accum(grads, *x, dx);
                }
                if need_dw {
                    if relevant[w.0] {
                        // dA = (G - <G, W_norm> v u^T) / sigma, u,v constant
                        let dwn = dwn.unwrap();
                        let dot: T = dwn
                            .data
                            .iter()
                            .zip(w_norm.data.iter())
                            .map(|(&a, &b)| a * b)
                            .sum();
                        let cout = w_norm.shape[3];
                        let kk = w_norm.numel() / cout;
                        let mut dw = Tensor::zeros(w_norm.shape);
                        for r in 0..kk {
                            for c in 0..cout {
                                let e = dwn.data[r * cout + c] - dot * v[r] * u[c];
                                dw.data[r * cout + c] = e / *sigma;
                            }
                        }
                        Self::accum(grads, *w, dw);
                    }
                    if relevant[b.0] {
                        Self::accum(grads, *b, db.unwrap());
                    }
                }
            }
            Op::Relu { x } => {
                let y = &self.nodes[i].value;
                let data = g
                    .data
                    .iter()
                    .zip(y.data.iter())
                    .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                    .collect();
                Self::accum(grads, *x, Tensor::from_vec(g.shape, data));
            }
            Op::LeakyRelu { x, slope } => {
                let xin = &self.nodes[x.0].value;
                let data = g
                    .data
                    .iter()
                    .zip(xin.data.iter())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * *slope })
                    .collect();
                Self::accum(grads, *x, Tensor::from_vec(g.shape, data));
            }
            Op::MaxPool2 { x, idx } => {
                let dx = kernels::maxpool2_bwd(self.nodes[x.0].value.shape, idx, g);
                Self::accum(grads, *x, dx);
            }
            Op::UpsampleNn { x, factor } => {
                Self::accum(grads, *x, kernels::upsample_nn_bwd(g, *factor));
            }
            Op::Add { a, b } => {
                if relevant[a.0] {
                    Self::accum(grads, *a, g.clone());
                }
                if relevant[b.0] {
                    Self::accum(grads, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if relevant[a.0] {
                    Self::accum(grads, *a, g.clone());
                }
                if relevant[b.0] {
                    Self::accum(grads, *b, g.map(|v| -v));
                }
            }
            Op::ConcatC { a, b } => {
                let ca = self.nodes[a.0].value.shape[3];
                let (da, db) = kernels::split_c(g, ca);
                if relevant[a.0] {
                    Self::accum(grads, *a, da);
                }
                if relevant[b.0] {
                    Self::accum(grads, *b, db);
                }
            }
            Op::Reparam { mu, log_var, eps } => {
                if relevant[mu.0] {
                    Self::accum(grads, *mu, g.clone());
                }
                if relevant[log_var.0] {
                    let clamp = T::from_f64(LOG_VAR_CLAMP);
                    let half = T::from_f64(0.5);
                    let lv = &self.nodes[log_var.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(lv.data.iter())
                        .zip(eps.data.iter())
                        .map(|((&gv, &l), &e)| {
                            if l.abs() >= clamp {
                                T::zero()
                            } else {
                                gv * e * (l * half).exp() * half
                            }
                        })
                        .collect();
                    Self::accum(grads, *log_var, Tensor::from_vec(g.shape, data));
                }
            }
            Op::MeanAbsDiff { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let scale = g.item() / T::from_f64(va.numel() as f64);
                let sign = |x: T, y: T| {
                    if x > y {
                        scale
                    } else if x < y {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                if relevant[a.0] {
                    let data = va.data.iter().zip(vb.data.iter()).map(|(&x, &y)| sign(x, y)).collect();
                    Self::accum(grads, *a, Tensor::from_vec(va.shape, data));
                }
                if relevant[b.0] {
                    let data = va.data.iter().zip(vb.data.iter()).map(|(&x, &y)| -sign(x, y)).collect();
                    Self::accum(grads, *b, Tensor::from_vec(va.shape, data));
                }
            }
            Op::KlGauss { mu, log_var } => {
                let (vm, vl) = (&self.nodes[mu.0].value, &self.nodes[log_var.0].value);
                let clamp = T::from_f64(LOG_VAR_CLAMP);
                let half = T::from_f64(0.5);
                let scale = g.item() / T::from_f64(vm.numel() as f64);
                if relevant[mu.0] {
                    let data = vm.data.iter().map(|&m| scale * m).collect();
                    Self::accum(grads, *mu, Tensor::from_vec(vm.shape, data));
                }
                if relevant[log_var.0] {
                    let data = vl
                        .data
                        .iter()
                        .map(|&l| {
                            if l.abs() >= clamp {
                                T::zero()
                            } else {
                                scale * half * (l.exp() - T::one())
                            }
                        })
                        .collect();
                    Self::accum(grads, *log_var, Tensor::from_vec(vl.shape, data));
                }
            }
            Op::SoftplusMean { x, negate } => {
                let vx = &self.nodes[x.0].value;
                let scale = g.item() / T::from_f64(vx.numel() as f64);
                let data = vx
                    .data
                    .iter()
                    .map(|&z| {
                        if *negate {
                            -scale * sigmoid(-z)
                        } else {
                            scale * sigmoid(z)
                        }
                    })
                    .collect();
                Self::accum(grads, *x, Tensor::from_vec(vx.shape, data));
            }
            Op::SpatialMean { x } => {
                let vx = &self.nodes[x.0].value;
                let [n, h, w, _] = vx.shape;
                let m = T::from_f64((h * w) as f64);
                let mut dx = Tensor::zeros(vx.shape);
                for s in 0..n {
                    let gv = g.data[s] / m;
                    for e in dx.data[s * h * w..(s + 1) * h * w].iter_mut() {
                        *e = gv;
                    }
                }
                Self::accum(grads, *x, dx);
            }
            Op::AbsDiffTargetMean { x, target } => {
                let vx = &self.nodes[x.0].value;
                let scale = g.item() / T::from_f64(target.len() as f64);
                let data = vx
                    .data
                    .iter()
                    .zip(target.iter())
                    .map(|(&a, &t)| {
                        if a > t {
                            scale
                        } else if a < t {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                Self::accum(grads, *x, Tensor::from_vec(vx.shape, data));
            }
            Op::WeightedSum { terms } => {
                let gv = g.item();
                for &(v, c) in terms {
                    if relevant[v.0] {
                        Self::accum(grads, v, Tensor::scalar(gv * c));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central finite differences on every element of every input tensor.
    fn check_grads(
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root, &vars);

        let eps = 1e-6;
        for (ti, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[ti]);
            for ei in 0..t.numel() {
                let eval = |delta: f64| -> f64 {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == ti {
                                t.data[ei] += delta;
                            }
                            tape.leaf(t)
                        })
                        .collect();
                    let root = build(&mut tape, &vars);
                    tape.value(root).item()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = analytic.map(|g| g.data[ei]).unwrap_or(0.0);
                let denom = fd.abs().max(an.abs()).max(1e-4);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "input {ti} elem {ei}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn conv_relu_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor([1, 4, 4, 2], &mut rng);
        let w = rand_tensor([3, 3, 2, 3], &mut rng);
        let b = rand_tensor([1, 1, 1, 3], &mut rng);
        let target = rand_tensor([1, 2, 2, 3], &mut rng);
        check_grads(&[x, w, b], |tape, v| {
            let c = tape.conv2d(v[0], v[1], v[2], 1, 1);
            let r = tape.relu(c);
            let p = tape.maxpool2(r);
            let t = tape.leaf(target.clone());
            tape.mean_abs_diff(p, t)
        }, 1e-5);
    }

    #[test]
    fn strided_sn_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor([2, 4, 4, 2], &mut rng);
        let w = rand_tensor([3, 3, 2, 4], &mut rng);
        let b = rand_tensor([1, 1, 1, 4], &mut rng);
        // fixed, normalized u/v as the SN state would hold
        let mut u: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut v: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= nu);
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        check_grads(&[x, w, b], |tape, vars| {
            let c = tape.conv2d_sn(vars[0], vars[1], vars[2], 2, 1, &u, &v);
            let l = tape.leaky_relu(c, 0.2);
            tape.softplus_mean(l, true)
        }, 1e-5);
    }

    #[test]
    fn reparam_and_kl_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = rand_tensor([1, 2, 2, 4], &mut rng);
        let lv = rand_tensor([1, 2, 2, 4], &mut rng);
        let eps = rand_tensor([1, 2, 2, 4], &mut rng);
        let target = rand_tensor([1, 2, 2, 4], &mut rng);
        check_grads(&[mu, lv], |tape, v| {
            let c = tape.reparam(v[0], v[1], eps.clone());
            let t = tape.leaf(target.clone());
            let mad = tape.mean_abs_diff(c, t);
            let kl = tape.kl_gauss(v[0], v[1]);
            tape.weighted_sum(&[(mad, 1.0), (kl, 0.01)])
        }, 1e-5);
    }

    #[test]
    fn reparam_partials_are_exact() {
        // d(sample)/d(mu) == 1 and d(sample)/d(log_var) == eps * sigma / 2
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mu = rand_tensor([1, 2, 2, 1], &mut rng);
        let lv = rand_tensor([1, 2, 2, 1], &mut rng);
        let eps = rand_tensor([1, 2, 2, 1], &mut rng);
        for ei in 0..4 {
            let mut tape = Tape::new();
            let vmu = tape.leaf(mu.clone());
            let vlv = tape.leaf(lv.clone());
            let c = tape.reparam(vmu, vlv, eps.clone());
            // pick out element ei via an abs-diff against a target equal to
            // c everywhere except a large offset at ei (sign fixed)
            let mut target = tape.value(c).clone();
            target.data[ei] -= 10.0;
            let t = tape.leaf(target);
            let root = tape.mean_abs_diff(c, t);
            let grads = tape.backward(root, &[vmu, vlv]);
            let scale = 4.0; // numel; mean-abs contributes sign/numel
            let dmu = grads.get(vmu).unwrap().data[ei] * scale;
            let dlv = grads.get(vlv).unwrap().data[ei] * scale;
            assert!((dmu - 1.0).abs() < 1e-12);
            let sigma = (lv.data[ei] / 2.0).exp();
            assert!((dlv - eps.data[ei] * sigma / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_concat_spatial_mean_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor([1, 2, 2, 2], &mut rng);
        let b = rand_tensor([1, 4, 4, 1], &mut rng);
        check_grads(&[a, b], |tape, v| {
            let up = tape.upsample_nn(v[0], 2);
            let cat = tape.concat_c(up, v[1]);
            let w = tape.leaf(Tensor::from_vec(
                [1, 1, 3, 1],
                vec![0.3, -0.7, 0.2],
            ));
            let bias = tape.leaf(Tensor::zeros([1, 1, 1, 1]));
            let c = tape.conv2d(cat, w, bias, 1, 0);
            let sm = tape.spatial_mean(c);
            tape.abs_diff_target_mean(sm, vec![0.5])
        }, 1e-5);
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor([1, 2, 2, 1], &mut rng);
        let b = rand_tensor([1, 2, 2, 1], &mut rng);
        let mut tape = Tape::new();
        let va = tape.leaf(a);
        let vb = tape.leaf(b);
        let s = tape.add(va, vb);
        let t = tape.leaf(Tensor::zeros([1, 2, 2, 1]));
        let root = tape.mean_abs_diff(s, t);
        let grads = tape.backward(root, &[va]);
        assert!(grads.get(va).is_some());
        assert!(grads.get(vb).is_none(), "unwanted leaf must not be materialized");
    }

    #[test]
    fn softplus_is_stable_at_extreme_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec([1, 1, 2, 1], vec![50.0, -50.0]));
        let sp = tape.softplus_mean(x, false);
        let v = tape.value(sp).item();
        // softplus(50) = 50, softplus(-50) ~ 2e-22
        assert!((v - 25.0).abs() < 1e-9);
        assert!(v.is_finite());
    }
}
