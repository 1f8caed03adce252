//! Node-conditioned PPA regression heads used to pre-filter candidates.
//!
//! Targets are range-normalized `(power, perf, area)` from the analytical
//! model. The acceptance gate keeps a rolling residual per node and trusts
//! the surrogate only while that residual stays below `τ_sur`.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;

use crate::neural::{Adam, Mlp};
use crate::scalar::Scalar;

pub const NODE_ONE_HOT: usize = 7;
pub const SUR_HIDDEN: [usize; 2] = [128, 64];
pub const SUR_LR: f64 = 1e-3;
pub const TAU_SUR: f64 = 0.05;
/// Head order of predictions and targets.
pub const HEADS: [&str; 3] = ["power", "perf", "area"];

#[derive(Debug, Clone)]
pub struct SurrogateModel<T> {
    /// Shared trunk; the last layer holds the three linear heads.
    pub net: Mlp<T>,
    opt: Adam<T>,
    pub head_weights: [T; 3],
    pub state_dim: usize,
    pub action_dim: usize,
}

impl<T: Scalar> SurrogateModel<T> {
    pub fn new(state_dim: usize, action_dim: usize, rng: &mut impl Rng) -> Self {
        let dims = [
            state_dim + action_dim + NODE_ONE_HOT,
            SUR_HIDDEN[0],
            SUR_HIDDEN[1],
            3,
        ];
        SurrogateModel::from_net(Mlp::new(&dims, rng), state_dim, action_dim)
    }

    pub fn from_net(net: Mlp<T>, state_dim: usize, action_dim: usize) -> Self {
        assert_eq!(net.in_dim(), state_dim + action_dim + NODE_ONE_HOT, "surrogate input width");
        assert_eq!(net.out_dim(), 3, "surrogate heads");
        SurrogateModel {
            opt: Adam::new(net.n_params(), T::lit(SUR_LR)),
            net,
            head_weights: [T::one(); 3],
            state_dim,
            action_dim,
        }
    }

    pub fn input(&self, s: &[T], a: &[T], node: &[f64; NODE_ONE_HOT]) -> Vec<T> {
        let mut x = Vec::with_capacity(self.net.in_dim());
        x.extend_from_slice(s);
        x.extend_from_slice(a);
        x.extend(node.iter().map(|&v| T::lit(v)));
        x
    }

    /// `(p̂_power, p̂_perf, p̂_area)`.
    pub fn predict(&self, s: &[T], a: &[T], node: &[f64; NODE_ONE_HOT]) -> [T; 3] {
        let y = self.net.forward(&self.input(s, a, node));
        [y[0], y[1], y[2]]
    }

    /// `Σ_q w_q · mean_i (m_q − m̂_q)²` and its gradient over row-major
    /// inputs built with [`SurrogateModel::input`].
    pub fn loss_grad(&self, x: &[T], targets: &[[T; 3]]) -> (T, Vec<T>) {
        let n = targets.len();
        let (y, tape) = self.net.forward_batch(x, n);
        let nf = T::count(n);
        let mut loss = T::zero();
        let mut up = Vec::with_capacity(3 * n);
        for i in 0..n {
            for q in 0..3 {
                let e = y[i * 3 + q] - targets[i][q];
                loss += self.head_weights[q] * e * e / nf;
                up.push(T::lit(2.0) * self.head_weights[q] * e / nf);
            }
        }
        let mut g = self.net.zero_grads();
        self.net.backward(&tape, &up, &mut g);
        (loss, g)
    }

    pub fn train_step(&mut self, x: &[T], targets: &[[T; 3]]) -> T {
        let (loss, g) = self.loss_grad(x, targets);
        if g.iter().all(|v| v.is_finite()) {
            self.opt.step(self.net.params_mut(), &g);
        }
        loss
    }
}

/// `σ² = (1/3) Σ_q (m_q − m̂_q)²`.
pub fn sur_uncertainty<T: Scalar>(pred: &[T; 3], truth: &[T; 3]) -> T {
    (0..3).fold(T::zero(), |a, q| a + (truth[q] - pred[q]) * (truth[q] - pred[q])) / T::lit(3.0)
}

/// `σ² < τ_sur`.
pub fn accept<T: Scalar>(sigma2: T, tau: T) -> bool {
    sigma2 < tau
}

/// Rolling per-node residual used to decide when predictions are trusted.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateGate {
    pub tau: f64,
    pub window: usize,
    residuals: BTreeMap<u32, VecDeque<f64>>,
}

impl SurrogateGate {
    pub fn new(tau: f64, window: usize) -> Self {
        SurrogateGate {
            tau,
            window: window.max(1),
            residuals: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, node_nm: u32, sigma2: f64) {
        let q = self.residuals.entry(node_nm).or_default();
        q.push_back(sigma2);
        while q.len() > self.window {
            q.pop_front();
        }
    }

    /// Mean residual over the window; `None` until the window is full.
    pub fn rolling(&self, node_nm: u32) -> Option<f64> {
        let q = self.residuals.get(&node_nm)?;
        (q.len() == self.window).then(|| q.iter().sum::<f64>() / q.len() as f64)
    }

    pub fn trusted(&self, node_nm: u32) -> bool {
        self.rolling(node_nm).is_some_and(|r| accept(r, self.tau))
    }
}
