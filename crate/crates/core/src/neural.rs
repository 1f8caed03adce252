//! Dense networks with exact GELU, squashed Gaussian and categorical heads,
//! MoE gating and Adam. Gradients are hand-derived and checked against
//! finite differences in the tests.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

pub fn gelu<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + (x * T::FRAC_1_SQRT_2()).erf())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::FRAC_1_SQRT_2()).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() / (T::lit(2.0) * T::PI()).sqrt();
    cdf + x * pdf
}

/// Fully connected network, GELU on hidden layers and a linear output.
///
/// Parameters live in one flat vector; layer `l` stores its weights as an
/// `n_in × n_out` row-major block followed by `n_out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    dims: Vec<usize>,
    params: Vec<T>,
}

/// Activations kept by a batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    batch: usize,
    /// Input of each layer (`acts[0]` is the network input).
    acts: Vec<Vec<T>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Uniform `±1/√fan_in` initialization.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut net = Mlp::zeros(dims);
        let mut off = 0;
        for l in 0..dims.len() - 1 {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            let bound = 1.0 / (n_in as f64).sqrt();
            for p in &mut net.params[off..off + n_in * n_out + n_out] {
                *p = T::lit(rng.random_range(-bound..=bound));
            }
            off += n_in * n_out + n_out;
        }
        net
    }

    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2 && dims.iter().all(|&d| d > 0), "mlp needs >= 2 positive dims");
        let n = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Mlp {
            dims: dims.to_vec(),
            params: vec![T::zero(); n],
        }
    }

    pub fn from_params(dims: &[usize], params: Vec<T>) -> Result<Self> {
        let net = Mlp::<T>::zeros(dims);
        if params.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for dims {dims:?}, got {}",
                net.params.len(),
                params.len()
            )));
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grads(&self) -> Vec<T> {
        vec![T::zero(); self.params.len()]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.dims.len());
        let mut off = 0;
        for w in self.dims.windows(2) {
            offs.push(off);
            off += w[0] * w[1] + w[1];
        }
        offs
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        self.forward_batch(x, 1).0
    }

    /// Forward pass over `batch` row-major inputs.
    pub fn forward_batch(&self, x: &[T], batch: usize) -> (Vec<T>, Tape<T>) {
        assert_eq!(x.len(), batch * self.in_dim(), "input length");
        let offs = self.layer_offsets();
        let n_layers = self.dims.len() - 1;
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut out = Vec::new();
        for l in 0..n_layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[offs[l]..offs[l] + n_in * n_out];
            let b = &self.params[offs[l] + n_in * n_out..offs[l] + n_in * n_out + n_out];
            let input = acts.last().unwrap();
            let mut y = Vec::with_capacity(batch * n_out);
            for _ in 0..batch {
                y.extend_from_slice(b);
            }
            gemm_acc(input, w, &mut y, batch, n_in, n_out);
            if l + 1 < n_layers {
                let a = y.iter().map(|&v| gelu(v)).collect();
                pre.push(y);
                acts.push(a);
            } else {
                out = y;
            }
        }
        (out, Tape { batch, acts, pre })
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂out` and returns `∂L/∂x`.
    pub fn backward(&self, tape: &Tape<T>, upstream: &[T], grads: &mut [T]) -> Vec<T> {
        assert_eq!(grads.len(), self.params.len(), "gradient length");
        self.backprop(tape, upstream, Some(grads))
    }

    /// `∂L/∂x` only.
    pub fn input_grad(&self, tape: &Tape<T>, upstream: &[T]) -> Vec<T> {
        self.backprop(tape, upstream, None)
    }

    fn backprop(&self, tape: &Tape<T>, upstream: &[T], mut grads: Option<&mut [T]>) -> Vec<T> {
        let batch = tape.batch;
        assert_eq!(upstream.len(), batch * self.out_dim(), "upstream length");
        let offs = self.layer_offsets();
        let mut g = upstream.to_vec();
        for l in (0..self.dims.len() - 1).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[offs[l]..offs[l] + n_in * n_out];
            let x = &tape.acts[l];
            if let Some(grads) = grads.as_deref_mut() {
                let (gw, gb) = grads[offs[l]..offs[l] + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                outer_acc(x, &g, gw, batch, n_in, n_out);
                for r in 0..batch {
                    for (d, &go) in gb.iter_mut().zip(&g[r * n_out..(r + 1) * n_out]) {
                        *d += go;
                    }
                }
            }
            let mut dx = vec![T::zero(); batch * n_in];
            gemm_t(&g, w, &mut dx, batch, n_in, n_out);
            if l > 0 {
                for (d, &p) in dx.iter_mut().zip(&tape.pre[l - 1]) {
                    *d *= gelu_grad(p);
                }
            }
            g = dx;
        }
        g
    }

    /// Polyak averaging `θ ← τ θ_src + (1 − τ) θ`.
    pub fn soft_update_from(&mut self, src: &Mlp<T>, tau: T) {
        assert_eq!(self.dims, src.dims, "soft update between different shapes");
        for (t, &s) in self.params.iter_mut().zip(&src.params) {
            *t = tau * s + (T::one() - tau) * *t;
        }
    }

    /// Named tensors `l{k}.weight` (`[n_in, n_out]`) and `l{k}.bias`.
    pub fn tensors(&self, prefix: &str) -> Vec<Tensor> {
        let offs = self.layer_offsets();
        let mut out = Vec::new();
        for l in 0..self.dims.len() - 1 {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[offs[l]..offs[l] + n_in * n_out];
            let b = &self.params[offs[l] + n_in * n_out..offs[l] + n_in * n_out + n_out];
            out.push(Tensor::new(format!("{prefix}l{l}.weight"), vec![n_in, n_out], w));
            out.push(Tensor::new(format!("{prefix}l{l}.bias"), vec![n_out], b));
        }
        out
    }

    /// Rebuilds a network of shape `dims` from tensors written by
    /// [`Mlp::tensors`].
    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str, dims: &[usize]) -> Result<Self> {
        let mut params = Vec::new();
        for l in 0..dims.len() - 1 {
            let w = ck.tensor(&format!("{prefix}l{l}.weight"), &[dims[l], dims[l + 1]])?;
            let b = ck.tensor(&format!("{prefix}l{l}.bias"), &[dims[l + 1]])?;
            params.extend(w.iter().chain(b).map(|&v| T::lit(v)));
        }
        Mlp::from_params(dims, params)
    }
}

/// `y (b×n_out) += x (b×n_in) · w (n_in×n_out)`, four rows at a time.
fn gemm_acc<T: Scalar>(x: &[T], w: &[T], y: &mut [T], batch: usize, n_in: usize, n_out: usize) {
    let mut r = 0;
    while r + 4 <= batch {
        let (y0, rest) = y[r * n_out..(r + 4) * n_out].split_at_mut(n_out);
        let (y1, rest) = rest.split_at_mut(n_out);
        let (y2, y3) = rest.split_at_mut(n_out);
        for i in 0..n_in {
            let (a0, a1, a2, a3) = (
                x[r * n_in + i],
                x[(r + 1) * n_in + i],
                x[(r + 2) * n_in + i],
                x[(r + 3) * n_in + i],
            );
            let wr = &w[i * n_out..(i + 1) * n_out];
            for o in 0..n_out {
                let wo = wr[o];
                y0[o] += a0 * wo;
                y1[o] += a1 * wo;
                y2[o] += a2 * wo;
                y3[o] += a3 * wo;
            }
        }
        r += 4;
    }
    for r in r..batch {
        let yr = &mut y[r * n_out..(r + 1) * n_out];
        for i in 0..n_in {
            let a = x[r * n_in + i];
            for (yo, &wo) in yr.iter_mut().zip(&w[i * n_out..(i + 1) * n_out]) {
                *yo += a * wo;
            }
        }
    }
}

/// `gw (n_in×n_out) += xᵀ (n_in×b) · g (b×n_out)`.
fn outer_acc<T: Scalar>(x: &[T], g: &[T], gw: &mut [T], batch: usize, n_in: usize, n_out: usize) {
    let mut r = 0;
    while r + 4 <= batch {
        let g0 = &g[r * n_out..(r + 1) * n_out];
        let g1 = &g[(r + 1) * n_out..(r + 2) * n_out];
        let g2 = &g[(r + 2) * n_out..(r + 3) * n_out];
        let g3 = &g[(r + 3) * n_out..(r + 4) * n_out];
        for i in 0..n_in {
            let (a0, a1, a2, a3) = (
                x[r * n_in + i],
                x[(r + 1) * n_in + i],
                x[(r + 2) * n_in + i],
                x[(r + 3) * n_in + i],
            );
            let row = &mut gw[i * n_out..(i + 1) * n_out];
            for o in 0..n_out {
                row[o] += a0 * g0[o] + a1 * g1[o] + a2 * g2[o] + a3 * g3[o];
            }
        }
        r += 4;
    }
    for r in r..batch {
        let gr = &g[r * n_out..(r + 1) * n_out];
        for i in 0..n_in {
            let a = x[r * n_in + i];
            for (d, &go) in gw[i * n_out..(i + 1) * n_out].iter_mut().zip(gr) {
                *d += a * go;
            }
        }
    }
}

/// `dx (b×n_in) = g (b×n_out) · wᵀ`.
fn gemm_t<T: Scalar>(g: &[T], w: &[T], dx: &mut [T], batch: usize, n_in: usize, n_out: usize) {
    let mut wt = vec![T::zero(); n_in * n_out];
    for i in 0..n_in {
        for o in 0..n_out {
            wt[o * n_in + i] = w[i * n_out + o];
        }
    }
    gemm_acc(g, &wt, dx, batch, n_out, n_in);
}

pub const CHECKPOINT_FORMAT: &str = "meshdse-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new<T: Scalar>(name: String, shape: Vec<usize>, data: &[T]) -> Self {
        Tensor {
            name,
            shape,
            data: data.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn scalar(name: &str, v: f64) -> Self {
        Tensor {
            name: name.to_string(),
            shape: vec![],
            data: vec![v],
        }
    }
}

/// Versioned JSON checkpoint of named parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            tensors,
        }
    }

    /// Data of tensor `name`, checked against `shape`.
    pub fn tensor(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(&t.data)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        Ok(ck)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, lr: T) -> Self {
        Adam {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.m.len(), "adam parameter count");
        self.t += 1;
        let t = self.t.min(i32::MAX as u64) as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Shape of a multi-discrete plus continuous action head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionDims {
    pub heads: usize,
    pub choices: usize,
    pub cont: usize,
}

impl ActionDims {
    pub const DSE: ActionDims = ActionDims {
        heads: 4,
        choices: 5,
        cont: 30,
    };

    pub fn n_logits(&self) -> usize {
        self.heads * self.choices
    }

    /// Raw actor output width: logits, means, log-stds.
    pub fn raw_dim(&self) -> usize {
        self.n_logits() + 2 * self.cont
    }
}

/// Split actor output; log-stds are clamped to `[−20, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput<T> {
    pub logits: Vec<T>,
    pub means: Vec<T>,
    pub log_stds: Vec<T>,
}

impl<T: Scalar> PolicyOutput<T> {
    pub fn from_raw(raw: &[T], dims: ActionDims) -> Self {
        assert_eq!(raw.len(), dims.raw_dim(), "policy output width");
        let nl = dims.n_logits();
        PolicyOutput {
            logits: raw[..nl].to_vec(),
            means: raw[nl..nl + dims.cont].to_vec(),
            log_stds: raw[nl + dims.cont..]
                .iter()
                .map(|&v| v.max(T::lit(LOG_STD_MIN)).min(T::lit(LOG_STD_MAX)))
                .collect(),
        }
    }

    /// Softmax probabilities of head `h`.
    pub fn head_probs(&self, h: usize, choices: usize) -> Vec<T> {
        softmax(&self.logits[h * choices..(h + 1) * choices])
    }
}

/// `log(1 − tanh²(u))` without cancellation.
pub fn log1m_tanh_sq<T: Scalar>(u: T) -> T {
    let two = T::lit(2.0);
    two * (T::LN_2() - u - softplus(-two * u))
}

pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// One reparameterized draw from a tanh-squashed diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct TanhSample<T> {
    pub action: Vec<T>,
    pub pre_tanh: Vec<T>,
    pub noise: Vec<T>,
    pub stds: Vec<T>,
    pub log_prob: T,
}

/// `a = tanh(μ + σ ε)` with the change-of-variables corrected log-density.
/// Log-stds are clamped to `[−20, 2]` before use.
pub fn gaussian_tanh_sample<T: Scalar>(means: &[T], log_stds: &[T], noise: &[T]) -> TanhSample<T> {
    assert!(means.len() == log_stds.len() && means.len() == noise.len(), "head widths");
    let half_ln_2pi = T::lit(0.5) * (T::lit(2.0) * T::PI()).ln();
    let mut s = TanhSample {
        action: Vec::with_capacity(means.len()),
        pre_tanh: Vec::with_capacity(means.len()),
        noise: noise.to_vec(),
        stds: Vec::with_capacity(means.len()),
        log_prob: T::zero(),
    };
    for i in 0..means.len() {
        let ls = log_stds[i].max(T::lit(LOG_STD_MIN)).min(T::lit(LOG_STD_MAX));
        let sd = ls.exp();
        let u = means[i] + sd * noise[i];
        s.log_prob += -T::lit(0.5) * noise[i] * noise[i] - ls - half_ln_2pi - log1m_tanh_sq(u);
        s.action.push(u.tanh());
        s.pre_tanh.push(u);
        s.stds.push(sd);
    }
    s
}

impl<T: Scalar> TanhSample<T> {
    /// Gradients w.r.t. `(means, log_stds)` of `Σ da_i · a_i + dlogp · log π`
    /// with the noise held fixed. Log-std components at a clamp bound get
    /// zero gradient.
    pub fn backward(&self, log_stds: &[T], d_action: &[T], d_logp: T) -> (Vec<T>, Vec<T>) {
        let n = self.action.len();
        let mut dm = Vec::with_capacity(n);
        let mut dls = Vec::with_capacity(n);
        let two = T::lit(2.0);
        for i in 0..n {
            let a = self.action[i];
            let du = d_action[i] * (T::one() - a * a) + d_logp * two * a;
            dm.push(du);
            let ls = log_stds[i];
            let inside = ls > T::lit(LOG_STD_MIN) && ls < T::lit(LOG_STD_MAX);
            dls.push(if inside {
                du * self.stds[i] * self.noise[i] - d_logp
            } else {
                T::zero()
            });
        }
        (dm, dls)
    }
}

/// Density of `a = tanh(u)`, `u ~ N(μ, σ²)`, at `a ∈ (−1, 1)` (1-dim).
pub fn tanh_gaussian_log_density<T: Scalar>(a: T, mean: T, log_std: T) -> T {
    let u = a.atanh();
    let ls = log_std.max(T::lit(LOG_STD_MIN)).min(T::lit(LOG_STD_MAX));
    let z = (u - mean) / ls.exp();
    -T::lit(0.5) * z * z - ls - T::lit(0.5) * (T::lit(2.0) * T::PI()).ln() - log1m_tanh_sq(u)
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: T = e.iter().fold(T::zero(), |a, &b| a + b);
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = m + logits.iter().fold(T::zero(), |a, &l| a + (l - m).exp()).ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Inverse-CDF draw from `softmax(logits)` with `u ∈ [0, 1)`.
pub fn categorical_sample<T: Scalar>(logits: &[T], u: T) -> (usize, T) {
    let p = softmax(logits);
    let mut acc = T::zero();
    let mut idx = p.len() - 1;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            idx = i;
            break;
        }
    }
    (idx, log_softmax(logits)[idx])
}

pub fn standard_normals<T: Scalar>(rng: &mut impl Rng, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
        .collect()
}

/// Softmax gating `g_k(s) = exp(u_kᵀ s) / Σ_j exp(u_jᵀ s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeGate<T> {
    pub k: usize,
    pub dim: usize,
    /// `k × dim` row-major.
    pub u: Vec<T>,
}

pub const MOE_EXPERTS: usize = 4;
pub const MOE_LAMBDA_LB: f64 = 0.01;

impl<T: Scalar> MoeGate<T> {
    pub fn new(k: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        MoeGate {
            k,
            dim,
            u: (0..k * dim).map(|_| T::lit(rng.random_range(-bound..=bound))).collect(),
        }
    }

    pub fn gate(&self, s: &[T]) -> Vec<T> {
        moe_gate(&self.u, self.k, s)
    }
}

pub fn moe_gate<T: Scalar>(u: &[T], k: usize, s: &[T]) -> Vec<T> {
    let dim = s.len();
    assert_eq!(u.len(), k * dim, "gate parameter shape");
    let z: Vec<T> = (0..k)
        .map(|j| u[j * dim..(j + 1) * dim].iter().zip(s).fold(T::zero(), |a, (&w, &x)| a + w * x))
        .collect();
    softmax(&z)
}

/// `λ K Σ_k ḡ_k²` over a batch of gate vectors; equals `λ` at uniform
/// gating and `K λ` when one expert takes everything.
pub fn moe_balance_loss<T: Scalar>(gates: &[Vec<T>], lambda: T) -> T {
    let k = gates[0].len();
    let b = T::count(gates.len());
    let mut total = T::zero();
    for j in 0..k {
        let mean = gates.iter().fold(T::zero(), |a, g| a + g[j]) / b;
        total += mean * mean;
    }
    lambda * T::count(k) * total
}

/// Mixture of `K` expert networks under a softmax gate.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeMlp<T> {
    pub gate: MoeGate<T>,
    pub experts: Vec<Mlp<T>>,
}

/// Activations kept by [`MoeMlp::forward_batch`].
#[derive(Debug, Clone)]
pub struct MoeTape<T> {
    batch: usize,
    input: Vec<T>,
    gates: Vec<Vec<T>>,
    outs: Vec<Vec<T>>,
    tapes: Vec<Tape<T>>,
}

impl<T: Scalar> MoeMlp<T> {
    pub fn new(dims: &[usize], k: usize, rng: &mut impl Rng) -> Self {
        let gate = MoeGate::new(k, dims[0], rng);
        MoeMlp {
            gate,
            experts: (0..k).map(|_| Mlp::new(dims, rng)).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.gate.u.len() + self.experts.iter().map(Mlp::n_params).sum::<usize>()
    }

    /// Gate parameters followed by each expert's parameters.
    pub fn flat_params(&self) -> Vec<T> {
        let mut v = self.gate.u.clone();
        for e in &self.experts {
            v.extend_from_slice(e.params());
        }
        v
    }

    pub fn set_flat_params(&mut self, p: &[T]) {
        let mut off = self.gate.u.len();
        self.gate.u.copy_from_slice(&p[..off]);
        for e in &mut self.experts {
            let n = e.n_params();
            e.params_mut().copy_from_slice(&p[off..off + n]);
            off += n;
        }
    }

    pub fn forward_batch(&self, x: &[T], batch: usize) -> (Vec<T>, MoeTape<T>) {
        let d = self.gate.dim;
        let gates: Vec<Vec<T>> = (0..batch).map(|r| self.gate.gate(&x[r * d..(r + 1) * d])).collect();
        let mut outs = Vec::new();
        let mut tapes = Vec::new();
        for e in &self.experts {
            let (o, t) = e.forward_batch(x, batch);
            outs.push(o);
            tapes.push(t);
        }
        let od = self.experts[0].out_dim();
        let mut y = vec![T::zero(); batch * od];
        for r in 0..batch {
            for (k, o) in outs.iter().enumerate() {
                for j in 0..od {
                    y[r * od + j] += gates[r][k] * o[r * od + j];
                }
            }
        }
        let tape = MoeTape {
            batch,
            input: x.to_vec(),
            gates,
            outs,
            tapes,
        };
        (y, tape)
    }

    /// Batch gate vectors of the last forward pass.
    pub fn gates<'a>(&self, tape: &'a MoeTape<T>) -> &'a [Vec<T>] {
        &tape.gates
    }

    /// Accumulates gradients of `⟨upstream, y⟩ + balance_loss(λ)` into
    /// `grads` (layout of [`MoeMlp::flat_params`]).
    pub fn backward(&self, tape: &MoeTape<T>, upstream: &[T], lambda_lb: T, grads: &mut [T]) {
        let (batch, d, k) = (tape.batch, self.gate.dim, self.gate.k);
        let od = self.experts[0].out_dim();
        let bf = T::count(batch);
        let gbar: Vec<T> = (0..k)
            .map(|j| tape.gates.iter().fold(T::zero(), |a, g| a + g[j]) / bf)
            .collect();
        let (gu, rest) = grads.split_at_mut(self.gate.u.len());
        for r in 0..batch {
            let g = &tape.gates[r];
            let dg: Vec<T> = (0..k)
                .map(|j| {
                    let dot = (0..od).fold(T::zero(), |a, o| a + upstream[r * od + o] * tape.outs[j][r * od + o]);
                    dot + T::lit(2.0) * lambda_lb * T::count(k) * gbar[j] / bf
                })
                .collect();
            let mix = (0..k).fold(T::zero(), |a, j| a + g[j] * dg[j]);
            for j in 0..k {
                let dz = g[j] * (dg[j] - mix);
                for i in 0..d {
                    gu[j * d + i] += dz * tape.input[r * d + i];
                }
            }
        }
        let mut off = 0;
        for (j, e) in self.experts.iter().enumerate() {
            let n = e.n_params();
            let mut up = vec![T::zero(); batch * od];
            for r in 0..batch {
                for o in 0..od {
                    up[r * od + o] = tape.gates[r][j] * upstream[r * od + o];
                }
            }
            e.backward(&tape.tapes[j], &up, &mut rest[off..off + n]);
            off += n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::<f64>::zeros(&[3, 4, 2]);
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let mut net = Mlp::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            net.params_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::<f64>::new(&[4, 5, 3], &mut rng);
        let x = [0.3, -1.2, 0.7, 2.0];
        let p = net.params();
        let mut h = [0.0; 5];
        for (o, ho) in h.iter_mut().enumerate() {
            let mut s = p[20 + o];
            for (i, xi) in x.iter().enumerate() {
                s += xi * p[i * 5 + o];
            }
            *ho = 0.5 * s * (1.0 + libm::erf(s / 2f64.sqrt()));
        }
        let off = 25;
        for o in 0..3 {
            let mut s = p[off + 15 + o];
            for (i, hi) in h.iter().enumerate() {
                s += hi * p[off + i * 3 + o];
            }
            assert!((net.forward(&x)[o] - s).abs() < 1e-14);
        }
    }

    #[test]
    fn gelu_derivative_at_zero() {
        assert_eq!(gelu_grad(0.0f64), 0.5);
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let net = Mlp::<f64>::zeros(&[2, 3]);
        let x = [2.0, -1.0];
        let up = [1.0, 0.5, -3.0];
        let (_, tape) = net.forward_batch(&x, 1);
        let mut g = net.zero_grads();
        net.backward(&tape, &up, &mut g);
        for i in 0..2 {
            for o in 0..3 {
                assert_eq!(g[i * 3 + o], up[o] * x[i]);
            }
        }
        assert_eq!(&g[6..], &up);
    }

    #[test]
    fn batch_equals_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::<f64>::new(&[3, 8, 2], &mut rng);
        let x = [0.1, 0.2, 0.3, -1.0, 0.0, 4.0];
        let (y, _) = net.forward_batch(&x, 2);
        assert_eq!(&y[..2], &net.forward(&x[..3])[..]);
        assert_eq!(&y[2..], &net.forward(&x[3..])[..]);
    }

    #[test]
    fn soft_update_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mlp::<f64>::new(&[2, 2], &mut rng);
        let mut b = Mlp::<f64>::new(&[2, 2], &mut rng);
        let b0 = b.clone();
        b.soft_update_from(&a, 0.0);
        assert_eq!(b, b0);
        b.soft_update_from(&a, 1.0);
        assert_eq!(b, a);
    }

    #[test]
    fn adam_cases() {
        let mut p = vec![1.0f64, -2.0];
        let mut opt = Adam::new(2, 0.01);
        opt.step(&mut p, &[0.0, 0.0]);
        assert_eq!(p, vec![1.0, -2.0]);
        let mut p = vec![0.0f64];
        let mut opt = Adam::new(1, 0.01);
        opt.step(&mut p, &[3.0]);
        assert!((p[0] + 0.01 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        for _ in 0..2000 {
            let before = p[0];
            opt.step(&mut p, &[3.0]);
            if opt.t > 1000 {
                assert!(((before - p[0]) - 0.01).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn log_std_clamp_and_degenerate_sigma() {
        let s = gaussian_tanh_sample(&[0.3f64], &[5.0], &[1.0]);
        assert!((s.stds[0] - 2f64.exp()).abs() < 1e-12);
        let s = gaussian_tanh_sample(&[0.3f64], &[-20.0], &[1.5]);
        assert!((s.action[0] - 0.3f64.tanh()).abs() < 1e-8);
        let raw: Vec<f64> = (0..8).map(|i| if i >= 5 { 7.0 } else { 0.0 }).collect();
        let out = PolicyOutput::from_raw(
            &raw,
            ActionDims {
                heads: 1,
                choices: 2,
                cont: 3,
            },
        );
        assert_eq!(out.log_stds, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn sample_log_prob_matches_density() {
        let s = gaussian_tanh_sample(&[0.2f64], &[-0.3], &[0.7]);
        let d = tanh_gaussian_log_density(s.action[0], 0.2, -0.3);
        assert!((s.log_prob - d).abs() < 1e-10);
    }

    #[test]
    fn categorical_cases() {
        let logits = [0.0, 1e9, 0.0, 0.0, 0.0f64];
        for u in [0.0, 0.3, 0.99] {
            assert_eq!(categorical_sample(&logits, u).0, 1);
        }
        let p = softmax(&[0.0f64; 5]);
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert_eq!(categorical_sample(&[0.0f64; 5], 0.5).0, 2);
    }

    #[test]
    fn moe_examples() {
        let g = moe_gate(&[0.3f64, -0.2], 1, &[1.0, 2.0]);
        assert_eq!(g, vec![1.0]);
        assert!((moe_balance_loss(&[g], 0.01) - 0.01).abs() < 1e-15);
        let uni = vec![vec![0.25f64; 4]; 3];
        assert!((moe_balance_loss(&uni, 0.01) - 0.01).abs() < 1e-15);
        let col = vec![vec![1.0f64, 0.0, 0.0, 0.0]; 3];
        assert!((moe_balance_loss(&col, 0.01) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::<f32>::new(&[3, 4, 2], &mut rng);
        let ck = Checkpoint::new(net.tensors("actor."));
        let back = Checkpoint::from_json_str(&ck.to_json_string()).unwrap();
        assert_eq!(Mlp::<f32>::from_checkpoint(&back, "actor.", &[3, 4, 2]).unwrap(), net);
        assert!(Mlp::<f32>::from_checkpoint(&back, "actor.", &[3, 5, 2]).is_err());
        let mut bad = ck.clone();
        bad.version = 99;
        assert!(Checkpoint::from_json_str(&bad.to_json_string()).is_err());
    }
}
