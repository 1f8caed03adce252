//! Residual world model over state deltas and short-horizon action
//! refinement blended with the policy.

use rand::Rng;

use crate::neural::{standard_normals, Adam, Mlp};
use crate::scalar::Scalar;

pub const WM_HIDDEN: [usize; 2] = [128, 64];
pub const WM_LR: f64 = 1.5e-4;
pub const MPC_BLEND: f64 = 0.7;
/// ε below which planning refines policy actions.
pub const MPC_EPSILON: f64 = 0.15;

/// `ŝ' = s + f([s; a])`.
#[derive(Debug, Clone)]
pub struct WorldModel<T> {
    pub net: Mlp<T>,
    opt: Adam<T>,
    pub state_dim: usize,
    pub action_dim: usize,
    pub train_steps: u64,
}

impl<T: Scalar> WorldModel<T> {
    pub fn new(state_dim: usize, action_dim: usize, rng: &mut impl Rng) -> Self {
        let dims = [state_dim + action_dim, WM_HIDDEN[0], WM_HIDDEN[1], state_dim];
        WorldModel::from_net(Mlp::new(&dims, rng), state_dim, action_dim)
    }

    pub fn from_net(net: Mlp<T>, state_dim: usize, action_dim: usize) -> Self {
        assert_eq!(net.in_dim(), state_dim + action_dim, "world model input width");
        assert_eq!(net.out_dim(), state_dim, "world model output width");
        WorldModel {
            opt: Adam::new(net.n_params(), T::lit(WM_LR)),
            net,
            state_dim,
            action_dim,
            train_steps: 0,
        }
    }

    pub fn set_lr(&mut self, lr: T) {
        self.opt.lr = lr;
    }

    pub fn is_trained(&self) -> bool {
        self.train_steps > 0
    }

    fn inputs(&self, s: &[T], a: &[T], n: usize) -> Vec<T> {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let mut x = Vec::with_capacity(n * (sd + ad));
        for i in 0..n {
            x.extend_from_slice(&s[i * sd..(i + 1) * sd]);
            x.extend_from_slice(&a[i * ad..(i + 1) * ad]);
        }
        x
    }

    pub fn predict(&self, s: &[T], a: &[T]) -> Vec<T> {
        self.predict_batch(s, a, 1)
    }

    pub fn predict_batch(&self, s: &[T], a: &[T], n: usize) -> Vec<T> {
        let (d, _) = self.net.forward_batch(&self.inputs(s, a, n), n);
        s.iter().zip(d).map(|(&x, dx)| x + dx).collect()
    }

    /// Mean squared error on `Δs` and its parameter gradient.
    pub fn loss_grad(&self, s: &[T], a: &[T], s2: &[T]) -> (T, Vec<T>) {
        let n = s.len() / self.state_dim;
        let (d, tape) = self.net.forward_batch(&self.inputs(s, a, n), n);
        let scale = T::count(n * self.state_dim);
        let mut loss = T::zero();
        let mut up = Vec::with_capacity(d.len());
        for k in 0..d.len() {
            let e = d[k] - (s2[k] - s[k]);
            loss += e * e / scale;
            up.push(T::lit(2.0) * e / scale);
        }
        let mut g = self.net.zero_grads();
        self.net.backward(&tape, &up, &mut g);
        (loss, g)
    }

    /// One Adam step on a batch of row-major transitions.
    pub fn train_step(&mut self, s: &[T], a: &[T], s2: &[T]) -> T {
        let (loss, g) = self.loss_grad(s, a, s2);
        if g.iter().all(|v| v.is_finite()) {
            self.opt.step(self.net.params_mut(), &g);
            self.train_steps += 1;
        }
        loss
    }
}

/// `P̂_perf − 0.3 P̂_pwr − 0.2 P̂_area`.
pub fn surrogate_reward<T: Scalar>(perf: T, power: T, area: T) -> T {
    perf - T::lit(0.3) * power - T::lit(0.2) * area
}

/// Surrogate reward read from a state's PPA-observation slice at the given
/// `(power, perf, area)` positions.
pub fn state_reward<T: Scalar>(s: &[T], ppa_pos: [usize; 3]) -> T {
    surrogate_reward(s[ppa_pos[1]], s[ppa_pos[0]], s[ppa_pos[2]])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcConfig {
    pub candidates: usize,
    pub horizon: usize,
    pub sigma: f64,
    pub gamma: f64,
    /// Rolled-out states are clamped to `[lo, hi]`.
    pub state_lo: f64,
    pub state_hi: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            candidates: 64,
            horizon: 5,
            sigma: 0.3,
            gamma: 0.99,
            state_lo: 0.0,
            state_hi: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcResult<T> {
    pub action: Vec<T>,
    pub best_index: usize,
    pub returns: Vec<T>,
    pub wm_forwards: usize,
}

/// Random-shooting refinement: `K` noised copies of the policy action are
/// rolled out `H` steps through the world model, later steps following
/// `policy`. Returns the first action of the best rollout, lowest index on
/// ties.
pub fn mpc_plan<T: Scalar>(
    policy: &dyn Fn(&[T], usize) -> Vec<T>,
    wm: &WorldModel<T>,
    s: &[T],
    cfg: &MpcConfig,
    reward: &dyn Fn(&[T]) -> T,
    rng: &mut impl Rng,
) -> MpcResult<T> {
    let (k, sd, ad) = (cfg.candidates.max(1), wm.state_dim, wm.action_dim);
    let base = policy(s, 1);
    let noise: Vec<T> = standard_normals(rng, k * ad);
    let sigma = T::lit(cfg.sigma);
    let mut a0 = Vec::with_capacity(k * ad);
    for i in 0..k {
        for j in 0..ad {
            a0.push((base[j] + sigma * noise[i * ad + j]).max(-T::one()).min(T::one()));
        }
    }
    let mut states: Vec<T> = (0..k).flat_map(|_| s.iter().copied()).collect();
    let mut returns = vec![T::zero(); k];
    let mut actions = a0.clone();
    let mut discount = T::one();
    let (lo, hi) = (T::lit(cfg.state_lo), T::lit(cfg.state_hi));
    let mut forwards = 0;
    for step in 0..cfg.horizon {
        if step > 0 {
            actions = policy(&states, k);
        }
        states = wm.predict_batch(&states, &actions, k);
        forwards += k;
        for v in &mut states {
            *v = v.max(lo).min(hi);
        }
        for i in 0..k {
            returns[i] += discount * reward(&states[i * sd..(i + 1) * sd]);
        }
        discount *= T::lit(cfg.gamma);
    }
    let best = (0..k).fold(0, |b, i| if returns[i] > returns[b] { i } else { b });
    MpcResult {
        action: a0[best * ad..(best + 1) * ad].to_vec(),
        best_index: best,
        returns,
        wm_forwards: forwards,
    }
}

/// `0.7 a_mpc + 0.3 a_sac` on `range`, `a_sac` elsewhere.
pub fn blend<T: Scalar>(a_mpc: &[T], a_sac: &[T], range: std::ops::Range<usize>) -> Vec<T> {
    let w = T::lit(MPC_BLEND);
    a_sac
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if range.contains(&i) {
                (w * a_mpc[i] + (T::one() - w) * s).max(-T::one()).min(T::one())
            } else {
                s
            }
        })
        .collect()
}
