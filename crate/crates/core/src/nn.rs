//! Dense numeric core: a small tanh MLP with a policy head and a value head,
//! exact reverse-mode gradients, and RMSProp / Adam optimizers.
//!
//! Everything is `f64` and single-threaded. The network never builds a graph;
//! `forward` caches the per-layer activations and `backprop` consumes them
//! together with output-side gradient signals supplied by the loss functions.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} elements ({rows}x{cols})", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer; `weight` is `inputs x outputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    /// `out = x W + b` for every row of `x`. Zero inputs are skipped, which makes
    /// one-hot observations cheap.
    fn apply(&self, x: &Matrix) -> Matrix {
        let n_out = self.outputs();
        let mut out = Matrix::zeros(x.rows(), n_out);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let o = out.row_mut(r);
            o.copy_from_slice(&self.bias);
            for (k, &xk) in xr.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let wk = self.weight.row(k);
                for (oj, &wkj) in o.iter_mut().zip(wk) {
                    *oj += xk * wkj;
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients for `delta` (dL/d pre-activation) and
    /// optionally returns dL/dx.
    fn backward(&self, x: &Matrix, delta: &Matrix, grad: &mut Dense, want_input_grad: bool) -> Option<Matrix> {
        let n_in = self.inputs();
        for r in 0..x.rows() {
            let xr = x.row(r);
            let dr = delta.row(r);
            for (b, &d) in grad.bias.iter_mut().zip(dr) {
                *b += d;
            }
            for (k, &xk) in xr.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let gk = grad.weight.row_mut(k);
                for (g, &d) in gk.iter_mut().zip(dr) {
                    *g += xk * d;
                }
            }
        }
        if !want_input_grad {
            return None;
        }
        let mut dx = Matrix::zeros(x.rows(), n_in);
        for r in 0..x.rows() {
            let dr = delta.row(r);
            let dxr = dx.row_mut(r);
            for (k, dxk) in dxr.iter_mut().enumerate() {
                *dxk = self.weight.row(k).iter().zip(dr).map(|(w, d)| w * d).sum();
            }
        }
        Some(dx)
    }

    fn slices(&self) -> [&[f64]; 2] {
        [self.weight.as_slice(), &self.bias]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weight.as_mut_slice(), &mut self.bias]
    }
}

/// Parameters of the shared-trunk actor-critic network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub trunk: Vec<Dense>,
    pub policy: Dense,
    pub value: Dense,
    pub activation: Activation,
}

/// Gradients share the exact layout of the parameters they update.
pub type Gradients = MlpParams;

impl MlpParams {
    /// All-zero network. `hidden` lists the trunk widths (possibly empty).
    pub fn zeros(input_dim: usize, hidden: &[usize], n_actions: usize, activation: Activation) -> Self {
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut width = input_dim;
        for &h in hidden {
            trunk.push(Dense::zeros(width, h));
            width = h;
        }
        Self {
            trunk,
            policy: Dense::zeros(width, n_actions),
            value: Dense::zeros(width, 1),
            activation,
        }
    }

    /// Orthogonal initialization: gain sqrt(2) on hidden layers, 0.01 on the
    /// policy head and 1.0 on the value head; biases start at zero.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], n_actions: usize, rng: &mut R) -> Self {
        let mut params = Self::zeros(input_dim, hidden, n_actions, Activation::Tanh);
        for layer in &mut params.trunk {
            orthogonal_fill(&mut layer.weight, 2f64.sqrt(), rng);
        }
        orthogonal_fill(&mut params.policy.weight, 0.01, rng);
        orthogonal_fill(&mut params.value.weight, 1.0, rng);
        params
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_slice_mut(|s| s.fill(0.0));
        z
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.first().unwrap_or(&self.policy).inputs()
    }

    pub fn n_actions(&self) -> usize {
        self.policy.outputs()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.trunk.iter().map(Dense::outputs).collect()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain([&self.policy, &self.value])
    }

    /// Parameter slices in a fixed canonical order (trunk, policy, value;
    /// weight before bias).
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers().flat_map(Dense::slices).collect()
    }

    pub fn for_each_slice_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for layer in self.trunk.iter_mut().chain([&mut self.policy, &mut self.value]) {
            for s in layer.slices_mut() {
                f(s);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape("MlpParams::assign_flat", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        self.for_each_slice_mut(|s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.for_each_slice_mut(|s| s.iter_mut().for_each(|x| *x *= k));
    }

    /// Element-wise `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.num_params() != other.num_params() || self.hidden_sizes() != other.hidden_sizes() {
            return Err(Error::shape("MlpParams::add_assign", self.num_params(), other.num_params()));
        }
        let src = other.to_flat();
        let mut offset = 0;
        self.for_each_slice_mut(|s| {
            for x in s.iter_mut() {
                *x += src[offset];
                offset += 1;
            }
        });
        Ok(())
    }
}

fn orthogonal_fill<R: Rng + ?Sized>(m: &mut Matrix, gain: f64, rng: &mut R) {
    let (rows, cols) = (m.rows(), m.cols());
    // Orthonormalize along the shorter dimension with modified Gram-Schmidt.
    let (n_vec, dim) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n_vec);
    while basis.len() < n_vec {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            let v = if rows >= cols { basis[c][r] } else { basis[r][c] };
            m.set(r, c, gain * v);
        }
    }
}

/// Outputs for a single observation.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput<'a> {
    pub logits: &'a [f64],
    pub value: f64,
}

#[derive(Clone, Debug)]
struct ForwardCache {
    input: Matrix,
    /// Post-activation output of every trunk layer.
    hidden: Vec<Matrix>,
}

/// Forward pass over a batch of observations.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub logits: Matrix,
    pub values: Vec<f64>,
    cache: Option<ForwardCache>,
}

impl BatchOutput {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> NetOutput<'_> {
        NetOutput {
            logits: self.logits.row(i),
            value: self.values[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = NetOutput<'_>> {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Drops the activation cache; later `backprop` calls fail with a usage error.
    pub fn discard_cache(&mut self) {
        self.cache = None;
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

pub fn forward(params: &MlpParams, obs: &Matrix) -> Result<BatchOutput> {
    if obs.cols() != params.input_dim() {
        return Err(Error::shape("forward", format!("{} observation columns", params.input_dim()), obs.cols()));
    }
    let mut hidden = Vec::with_capacity(params.trunk.len());
    for layer in &params.trunk {
        let x = hidden.last().unwrap_or(obs);
        let mut h = layer.apply(x);
        h.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = params.activation.apply(*v));
        hidden.push(h);
    }
    let features = hidden.last().unwrap_or(obs);
    let logits = params.policy.apply(features);
    let values = params.value.apply(features).into_vec();
    Ok(BatchOutput {
        logits,
        values,
        cache: Some(ForwardCache {
            input: obs.clone(),
            hidden,
        }),
    })
}

/// Vector-Jacobian product: gradient of
/// `sum_i <dlogits_i, logits_i> + dvalue_i * value_i` w.r.t. every parameter.
pub fn backprop(params: &MlpParams, out: &BatchOutput, dlogits: &Matrix, dvalue: &[f64]) -> Result<Gradients> {
    let cache = out
        .cache
        .as_ref()
        .ok_or_else(|| Error::Usage("backprop called on an output without activation cache".into()))?;
    let n = out.len();
    if dlogits.rows() != n || dlogits.cols() != params.n_actions() {
        return Err(Error::shape(
            "backprop dlogits",
            format!("{n}x{}", params.n_actions()),
            format!("{}x{}", dlogits.rows(), dlogits.cols()),
        ));
    }
    if dvalue.len() != n {
        return Err(Error::shape("backprop dvalue", n, dvalue.len()));
    }

    let mut grads = params.zeros_like();
    let features = cache.hidden.last().unwrap_or(&cache.input);
    let has_trunk = !params.trunk.is_empty();
    let dvalue = Matrix::new(n, 1, dvalue.to_vec())?;
    let d_feat_p = params.policy.backward(features, dlogits, &mut grads.policy, has_trunk);
    let d_feat_v = params.value.backward(features, &dvalue, &mut grads.value, has_trunk);

    if let (Some(mut upstream), Some(dv)) = (d_feat_p, d_feat_v) {
        upstream
            .as_mut_slice()
            .iter_mut()
            .zip(dv.as_slice())
            .for_each(|(a, b)| *a += b);
        for l in (0..params.trunk.len()).rev() {
            let out_l = &cache.hidden[l];
            // dL/d pre-activation
            upstream
                .as_mut_slice()
                .iter_mut()
                .zip(out_l.as_slice())
                .for_each(|(d, &y)| *d *= params.activation.derivative_from_output(y));
            let input = if l == 0 { &cache.input } else { &cache.hidden[l - 1] };
            match params.trunk[l].backward(input, &upstream, &mut grads.trunk[l], l > 0) {
                Some(next) => upstream = next,
                None => break,
            }
        }
    }
    Ok(grads)
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    RmsProp,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// RMSProp decay.
    pub rho: f64,
    pub eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Global gradient-norm clip applied before the update; `None` disables it.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::RmsProp,
            lr: 7e-4,
            rho: 0.99,
            eps: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            max_grad_norm: Some(0.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    acc: Vec<f64>,
    momentum: Vec<f64>,
    steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &MlpParams) -> Self {
        let n = params.num_params();
        Self {
            config,
            acc: vec![0.0; n],
            momentum: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update in place. Non-finite gradients abort the step and
    /// leave both the parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut MlpParams, grads: &Gradients) -> Result<StepStats> {
        if grads.num_params() != self.acc.len() || params.num_params() != self.acc.len() {
            return Err(Error::shape("Optimizer::step", self.acc.len(), grads.num_params()));
        }
        let mut g = grads.to_flat();
        if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
            let n_bad = g.iter().filter(|x| !x.is_finite()).count();
            return Err(Error::NonFinite {
                context: "gradients",
                diagnostics: format!("{n_bad} of {} entries non-finite, first at flat index {bad} ({})", g.len(), g[bad]),
            });
        }
        let grad_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut clipped = false;
        if let Some(max_norm) = self.config.max_grad_norm {
            if grad_norm > max_norm {
                let k = max_norm / grad_norm;
                g.iter_mut().for_each(|x| *x *= k);
                clipped = true;
            }
        }
        self.steps += 1;
        let cfg = &self.config;
        let mut update = vec![0.0; g.len()];
        match cfg.kind {
            OptimizerKind::RmsProp => {
                for ((u, a), &gi) in update.iter_mut().zip(self.acc.iter_mut()).zip(&g) {
                    *a = cfg.rho * *a + (1.0 - cfg.rho) * gi * gi;
                    *u = cfg.lr * gi / (*a + cfg.eps).sqrt();
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - cfg.adam_beta1.powi(t);
                let c2 = 1.0 - cfg.adam_beta2.powi(t);
                for (((u, v), m), &gi) in update
                    .iter_mut()
                    .zip(self.acc.iter_mut())
                    .zip(self.momentum.iter_mut())
                    .zip(&g)
                {
                    *m = cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * gi;
                    *v = cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * gi * gi;
                    *u = cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                }
            }
        }
        let mut offset = 0;
        params.for_each_slice_mut(|s| {
            for x in s.iter_mut() {
                *x -= update[offset];
                offset += 1;
            }
        });
        Ok(StepStats { grad_norm, clipped })
    }
}
