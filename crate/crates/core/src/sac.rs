//! Soft actor-critic with twin critics, prioritized replay, automatic
//! temperature tuning and an ε-greedy overlay.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{
    categorical_sample, gaussian_tanh_sample, log_softmax, moe_balance_loss, softmax, standard_normals, ActionDims,
    Adam, Checkpoint, Mlp, MoeMlp, MoeTape, PolicyOutput, Tape, Tensor, MOE_EXPERTS, MOE_LAMBDA_LB,
};
use crate::scalar::Scalar;

pub const LOG_ALPHA_MIN: f64 = -10.0;
pub const LOG_ALPHA_MAX: f64 = 10.0;
pub const PRIORITY_EPS: f64 = 1e-6;

/// `(|δ| + 1e-6)^α`.
pub fn priority_from_td(td: f64, alpha: f64) -> f64 {
    (td.abs() + PRIORITY_EPS).powf(alpha)
}

/// Binary sum tree over leaf priorities.
#[derive(Debug, Clone, PartialEq)]
pub struct SumTree {
    size: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let size = capacity.max(1).next_power_of_two();
        SumTree {
            size,
            nodes: vec![0.0; 2 * size],
        }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.size + i]
    }

    pub fn set(&mut self, i: usize, p: f64) {
        let mut idx = self.size + i;
        self.nodes[idx] = p;
        while idx > 1 {
            idx /= 2;
            self.nodes[idx] = self.nodes[2 * idx] + self.nodes[2 * idx + 1];
        }
    }

    /// Leaf whose cumulative range contains `u ∈ [0, total)`; never returns a
    /// zero-priority leaf when `total > 0`.
    pub fn find(&self, u: f64) -> usize {
        let mut u = u.clamp(0.0, self.total());
        let mut idx = 1;
        while idx < self.size {
            let left = 2 * idx;
            if u < self.nodes[left] || self.nodes[left + 1] <= 0.0 {
                idx = left;
            } else {
                u -= self.nodes[left];
                idx = left + 1;
            }
        }
        idx - self.size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T> {
    pub s: Vec<T>,
    pub a: Vec<T>,
    pub disc: Vec<usize>,
    pub r: T,
    pub s2: Vec<T>,
    pub done: bool,
}

/// Proportional prioritized replay with FIFO eviction.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    data: Vec<Transition<T>>,
    next: usize,
    tree: SumTree,
    max_priority: f64,
    pub alpha: f64,
    pub beta: f64,
    pub beta_increment: f64,
}

/// Indices drawn by [`ReplayBuffer::sample`] with their IS weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize, alpha: f64, beta0: f64, beta_increment: f64) -> Self {
        assert!(capacity > 0, "replay capacity must be > 0");
        ReplayBuffer {
            capacity,
            data: Vec::new(),
            next: 0,
            tree: SumTree::new(capacity),
            max_priority: 1.0,
            alpha,
            beta: beta0,
            beta_increment,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition<T> {
        &self.data[i]
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.tree.get(i)
    }

    /// Slot written by the most recent `store`.
    pub fn last_index(&self) -> Option<usize> {
        (!self.data.is_empty()).then(|| (self.next + self.capacity - 1) % self.capacity)
    }

    /// Inserts at the current maximum priority (1.0 on an empty buffer),
    /// overwriting the oldest transition when full.
    pub fn store(&mut self, t: Transition<T>) -> usize {
        let slot = self.next;
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[slot] = t;
        }
        self.tree.set(slot, self.max_priority);
        self.next = (self.next + 1) % self.capacity;
        slot
    }

    /// `batch` independent draws with `P(i) = p_i / Σ p`; IS weights
    /// `(N P(i))^−β` divided by the batch maximum. β then grows by its
    /// increment, capped at 1.
    pub fn sample(&mut self, batch: usize, rng: &mut impl Rng) -> Sampled {
        assert!(!self.data.is_empty(), "sampling from an empty buffer");
        let total = self.tree.total();
        let n = self.data.len() as f64;
        let mut indices = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for _ in 0..batch {
            let u = rng.random::<f64>() * total;
            let i = self.tree.find(u).min(self.data.len() - 1);
            indices.push(i);
            weights.push((n * self.tree.get(i) / total).powf(-self.beta));
        }
        let wmax = weights.iter().cloned().fold(0.0, f64::max);
        for w in &mut weights {
            *w /= wmax;
        }
        self.beta = (self.beta + self.beta_increment).min(1.0);
        Sampled { indices, weights }
    }

    pub fn update_priorities(&mut self, indices: &[usize], td: &[f64]) {
        for (&i, &d) in indices.iter().zip(td) {
            let p = priority_from_td(if d.is_finite() { d } else { 0.0 }, self.alpha);
            self.tree.set(i, p);
            self.max_priority = self.max_priority.max(p);
        }
    }
}

/// Discount-weighted λ-returns minus values; `λ = 1` gives the Monte-Carlo
/// return minus the baseline.
pub fn gae_advantages(rewards: &[f64], values: &[f64], next_values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let nonterminal = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * nonterminal * next_values[t] - values[t];
        acc = delta + gamma * lambda * nonterminal * acc;
        adv[t] = acc;
    }
    adv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub state_dim: usize,
    pub dims: ActionDims,
    pub hidden: Vec<usize>,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub alpha0: f64,
    pub target_entropy: f64,
    pub batch: usize,
    pub warmup: usize,
    pub buffer_capacity: usize,
    pub per_alpha: f64,
    pub per_beta0: f64,
    pub per_beta_increment: f64,
    pub eps0: f64,
    pub eps_min: f64,
    /// Steps over which ε decays from `eps0` to `eps_min`.
    pub eps_horizon: usize,
    pub stuck_factor: f64,
    /// Entropy bonus on the discrete heads.
    pub disc_entropy: f64,
    pub moe: bool,
    /// Discrete-head advantages from λ-returns over the latest transitions
    /// instead of TD errors of the replay batch.
    pub gae_lambda: Option<f64>,
    pub gae_window: usize,
}

impl SacConfig {
    /// Full-size agent for the design-space search.
    pub fn dse() -> Self {
        SacConfig {
            state_dim: crate::rlenv::SUBSET_DIM,
            dims: ActionDims::DSE,
            hidden: vec![256, 256],
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_alpha: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            alpha0: 0.2,
            target_entropy: -30.0,
            batch: 256,
            warmup: 1000,
            buffer_capacity: 100_000,
            per_alpha: 0.6,
            per_beta0: 0.4,
            per_beta_increment: 0.001,
            eps0: 0.5,
            eps_min: 0.1,
            eps_horizon: 4000,
            stuck_factor: 0.1,
            disc_entropy: 0.01,
            moe: false,
            gae_lambda: None,
            gae_window: 64,
        }
    }

    /// `(ε_min / ε_0)^(1/T)`.
    pub fn base_decay(&self) -> f64 {
        if self.eps0 <= 0.0 || self.eps_horizon == 0 {
            return 1.0;
        }
        (self.eps_min / self.eps0).powf(1.0 / self.eps_horizon as f64)
    }

    /// `1 − (1 − d)·0.1`, the slowed decay used before anything feasible
    /// has been found.
    pub fn stuck_decay(&self) -> f64 {
        1.0 - (1.0 - self.base_decay()) * self.stuck_factor
    }

    pub fn actor_dims(&self) -> Vec<usize> {
        let mut d = vec![self.state_dim];
        d.extend(&self.hidden);
        d.push(self.dims.raw_dim());
        d
    }

    pub fn critic_dims(&self) -> Vec<usize> {
        let mut d = vec![self.state_dim + self.dims.cont];
        d.extend(&self.hidden);
        d.push(1);
        d
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if self.state_dim == 0 || self.dims.cont == 0 {
            return bad("state and continuous action dims must be > 0");
        }
        if self.batch == 0 || self.buffer_capacity == 0 {
            return bad("batch and buffer capacity must be > 0");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return bad("gamma and tau must lie in [0, 1]");
        }
        if self.alpha0 <= 0.0 {
            return bad("alpha0 must be > 0");
        }
        if !(0.0..=1.0).contains(&self.eps0) || !(0.0..=1.0).contains(&self.eps_min) {
            return bad("epsilon bounds must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Sampled action; `disc` holds choice indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Action<T> {
    pub cont: Vec<T>,
    pub disc: Vec<usize>,
    pub from_policy: bool,
}

#[derive(Debug, Clone)]
pub enum PolicyNet<T> {
    Plain(Mlp<T>),
    Moe(MoeMlp<T>),
}

enum PolicyTape<T> {
    Plain(Tape<T>),
    Moe(MoeTape<T>),
}

impl<T: Scalar> PolicyNet<T> {
    pub fn n_params(&self) -> usize {
        match self {
            PolicyNet::Plain(m) => m.n_params(),
            PolicyNet::Moe(m) => m.n_params(),
        }
    }

    pub fn forward(&self, s: &[T]) -> Vec<T> {
        self.forward_batch(s, 1).0
    }

    fn forward_batch(&self, x: &[T], batch: usize) -> (Vec<T>, PolicyTape<T>) {
        match self {
            PolicyNet::Plain(m) => {
                let (y, t) = m.forward_batch(x, batch);
                (y, PolicyTape::Plain(t))
            }
            PolicyNet::Moe(m) => {
                let (y, t) = m.forward_batch(x, batch);
                (y, PolicyTape::Moe(t))
            }
        }
    }

    fn backward(&self, tape: &PolicyTape<T>, upstream: &[T], grads: &mut [T]) {
        match (self, tape) {
            (PolicyNet::Plain(m), PolicyTape::Plain(t)) => {
                m.backward(t, upstream, grads);
            }
            (PolicyNet::Moe(m), PolicyTape::Moe(t)) => m.backward(t, upstream, T::lit(MOE_LAMBDA_LB), grads),
            _ => unreachable!("tape from a different policy kind"),
        }
    }

    pub fn flat_params(&self) -> Vec<T> {
        match self {
            PolicyNet::Plain(m) => m.params().to_vec(),
            PolicyNet::Moe(m) => m.flat_params(),
        }
    }

    pub fn set_flat_params(&mut self, p: &[T]) {
        match self {
            PolicyNet::Plain(m) => m.params_mut().copy_from_slice(p),
            PolicyNet::Moe(m) => m.set_flat_params(p),
        }
    }

    fn is_finite(&self) -> bool {
        self.flat_params().iter().all(|v| v.is_finite())
    }
}

/// Losses and temperature after one update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub mean_log_prob: f64,
    /// Gradient steps dropped because of non-finite values.
    pub skipped: u32,
}

#[derive(Debug, Clone)]
pub struct Sac<T> {
    pub cfg: SacConfig,
    pub actor: PolicyNet<T>,
    pub q1: Mlp<T>,
    pub q2: Mlp<T>,
    pub q1_target: Mlp<T>,
    pub q2_target: Mlp<T>,
    opt_actor: Adam<T>,
    opt_q1: Adam<T>,
    opt_q2: Adam<T>,
    opt_alpha: Adam<T>,
    pub log_alpha: T,
    pub epsilon: f64,
    pub steps: u64,
    pub updates: u64,
    pub buffer: ReplayBuffer<T>,
}

impl<T: Scalar> Sac<T> {
    pub fn new(cfg: SacConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let adims = cfg.actor_dims();
        let cdims = cfg.critic_dims();
        let actor = if cfg.moe {
            PolicyNet::Moe(MoeMlp::new(&adims, MOE_EXPERTS, rng))
        } else {
            PolicyNet::Plain(Mlp::new(&adims, rng))
        };
        let q1 = Mlp::new(&cdims, rng);
        let q2 = Mlp::new(&cdims, rng);
        Ok(Sac {
            opt_actor: Adam::new(actor.n_params(), T::lit(cfg.lr_actor)),
            opt_q1: Adam::new(q1.n_params(), T::lit(cfg.lr_critic)),
            opt_q2: Adam::new(q2.n_params(), T::lit(cfg.lr_critic)),
            opt_alpha: Adam::new(1, T::lit(cfg.lr_alpha)),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            log_alpha: T::lit(cfg.alpha0.ln()),
            epsilon: cfg.eps0,
            steps: 0,
            updates: 0,
            buffer: ReplayBuffer::new(cfg.buffer_capacity, cfg.per_alpha, cfg.per_beta0, cfg.per_beta_increment),
            cfg,
        })
    }

    pub fn alpha(&self) -> T {
        self.log_alpha.exp()
    }

    pub fn policy_output(&self, s: &[T]) -> PolicyOutput<T> {
        PolicyOutput::from_raw(&self.actor.forward(s), self.cfg.dims)
    }

    /// Noise-free action: `tanh(μ)` and the most likely discrete choices.
    pub fn deterministic_action(&self, s: &[T]) -> Action<T> {
        let out = self.policy_output(s);
        let d = self.cfg.dims;
        Action {
            cont: out.means.iter().map(|m| m.tanh()).collect(),
            disc: (0..d.heads)
                .map(|h| {
                    let p = &out.logits[h * d.choices..(h + 1) * d.choices];
                    (0..d.choices).fold(0, |best, j| if p[j] > p[best] { j } else { best })
                })
                .collect(),
            from_policy: true,
        }
    }

    pub fn uniform_action(&self, rng: &mut impl Rng) -> Action<T> {
        let d = self.cfg.dims;
        Action {
            cont: (0..d.cont).map(|_| T::lit(rng.random_range(-1.0..=1.0))).collect(),
            disc: (0..d.heads).map(|_| rng.random_range(0..d.choices)).collect(),
            from_policy: false,
        }
    }

    /// Stochastic policy draw.
    pub fn sample_action(&self, s: &[T], rng: &mut impl Rng) -> Action<T> {
        let out = self.policy_output(s);
        let d = self.cfg.dims;
        let disc = (0..d.heads)
            .map(|h| categorical_sample(&out.logits[h * d.choices..(h + 1) * d.choices], T::lit(rng.random::<f64>())).0)
            .collect();
        let noise = standard_normals(rng, d.cont);
        let smp = gaussian_tanh_sample(&out.means, &out.log_stds, &noise);
        Action {
            cont: smp.action,
            disc,
            from_policy: true,
        }
    }

    /// Uniform during warmup or with probability ε, otherwise a policy draw.
    /// Advances the step counter.
    pub fn select_action(&mut self, s: &[T], rng: &mut impl Rng) -> Action<T> {
        let explore = rng.random::<f64>() < self.epsilon;
        let a = if (self.steps as usize) < self.cfg.warmup || explore {
            self.uniform_action(rng)
        } else {
            self.sample_action(s, rng)
        };
        self.steps += 1;
        a
    }

    /// One ε step: base decay once something feasible has been found,
    /// the slowed decay otherwise; never below `ε_min`.
    pub fn decay_epsilon(&mut self, feasible_found: bool) {
        let d = if feasible_found {
            self.cfg.base_decay()
        } else {
            self.cfg.stuck_decay()
        };
        self.epsilon = (self.epsilon * d).max(self.cfg.eps_min.min(self.epsilon));
    }

    pub fn store(&mut self, t: Transition<T>) -> usize {
        self.buffer.store(t)
    }

    pub fn ready(&self) -> bool {
        self.steps as usize >= self.cfg.warmup && self.buffer.len() >= self.cfg.batch.min(self.cfg.warmup).max(1)
    }

    fn gather(&self, idx: &[usize]) -> Batch<T> {
        let mut b = Batch::default();
        for &i in idx {
            let t = self.buffer.get(i);
            b.s.extend_from_slice(&t.s);
            b.a.extend_from_slice(&t.a);
            b.s2.extend_from_slice(&t.s2);
            b.r.push(t.r);
            b.done.push(t.done);
            b.disc.push(t.disc.clone());
        }
        b
    }

    fn critic_input(&self, s: &[T], a: &[T], n: usize) -> Vec<T> {
        let (sd, ad) = (self.cfg.state_dim, self.cfg.dims.cont);
        let mut x = Vec::with_capacity(n * (sd + ad));
        for i in 0..n {
            x.extend_from_slice(&s[i * sd..(i + 1) * sd]);
            x.extend_from_slice(&a[i * ad..(i + 1) * ad]);
        }
        x
    }

    /// Reparameterized continuous draws for a batch of states.
    fn batch_policy(&self, s: &[T], n: usize, noise: &[T]) -> (Vec<PolicyOutput<T>>, Vec<crate::neural::TanhSample<T>>, PolicyTape<T>) {
        let d = self.cfg.dims;
        let (raw, tape) = self.actor.forward_batch(s, n);
        let rd = d.raw_dim();
        let mut outs = Vec::with_capacity(n);
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let o = PolicyOutput::from_raw(&raw[i * rd..(i + 1) * rd], d);
            samples.push(gaussian_tanh_sample(&o.means, &o.log_stds, &noise[i * d.cont..(i + 1) * d.cont]));
            outs.push(o);
        }
        (outs, samples, tape)
    }

    /// Clipped double-Q targets `y = r + γ(1 − done)(min Q̄(s', a') − α log π(a'|s'))`.
    pub fn td_targets(&self, s2: &[T], r: &[T], done: &[bool], noise: &[T]) -> Vec<T> {
        let n = r.len();
        let (_, samples, _) = self.batch_policy(s2, n, noise);
        let a2: Vec<T> = samples.iter().flat_map(|s| s.action.iter().copied()).collect();
        let x = self.critic_input(s2, &a2, n);
        let (t1, _) = self.q1_target.forward_batch(&x, n);
        let (t2, _) = self.q2_target.forward_batch(&x, n);
        let gamma = T::lit(self.cfg.gamma);
        let alpha = self.alpha();
        (0..n)
            .map(|i| {
                if done[i] {
                    r[i]
                } else {
                    r[i] + gamma * (t1[i].min(t2[i]) - alpha * samples[i].log_prob)
                }
            })
            .collect()
    }

    /// IS-weighted squared Bellman residual `mean w·((Q1 − y)² + (Q2 − y)²)`
    /// with gradients for both critics and `δ = y − min(Q1, Q2)`.
    pub fn critic_loss_grad(&self, s: &[T], a: &[T], y: &[T], weights: &[f64]) -> (f64, Vec<T>, Vec<T>, Vec<f64>) {
        let n = y.len();
        let x = self.critic_input(s, a, n);
        let (q1, tape1) = self.q1.forward_batch(&x, n);
        let (q2, tape2) = self.q2.forward_batch(&x, n);
        let nf = T::count(n);
        let mut up1 = Vec::with_capacity(n);
        let mut up2 = Vec::with_capacity(n);
        let mut loss = 0.0;
        let mut td = Vec::with_capacity(n);
        for i in 0..n {
            let w = T::lit(weights[i]);
            let (e1, e2) = (q1[i] - y[i], q2[i] - y[i]);
            loss += (w * (e1 * e1 + e2 * e2)).as_f64() / n as f64;
            up1.push(T::lit(2.0) * w * e1 / nf);
            up2.push(T::lit(2.0) * w * e2 / nf);
            td.push((y[i] - q1[i].min(q2[i])).as_f64());
        }
        let mut g1 = self.q1.zero_grads();
        self.q1.backward(&tape1, &up1, &mut g1);
        let mut g2 = self.q2.zero_grads();
        self.q2.backward(&tape2, &up2, &mut g2);
        (loss, g1, g2, td)
    }

    /// Steps both critics on [`Sac::critic_loss_grad`]; returns `(loss, δ)`.
    pub fn critic_update(&mut self, s: &[T], a: &[T], y: &[T], weights: &[f64], skipped: &mut u32) -> (f64, Vec<f64>) {
        let (loss, g1, g2, td) = self.critic_loss_grad(s, a, y, weights);
        if finite(&g1) && finite(&g2) {
            self.opt_q1.step(self.q1.params_mut(), &g1);
            self.opt_q2.step(self.q2.params_mut(), &g2);
        } else {
            *skipped += 1;
        }
        (loss, td)
    }

    /// Gradient of `mean[α log π(a|s) − min(Q1, Q2)(s, a)]` plus the
    /// discrete-head loss with respect to the actor parameters. Returns
    /// `(loss, mean log π, grads)`.
    pub fn actor_loss_grad(&self, s: &[T], noise: &[T], disc: Option<(&[Vec<usize>], &[f64])>) -> (f64, f64, Vec<T>) {
        let d = self.cfg.dims;
        let n = s.len() / self.cfg.state_dim;
        let (outs, samples, tape) = self.batch_policy(s, n, noise);
        let a: Vec<T> = samples.iter().flat_map(|x| x.action.iter().copied()).collect();
        let x = self.critic_input(s, &a, n);
        let (q1, t1) = self.q1.forward_batch(&x, n);
        let (q2, t2) = self.q2.forward_batch(&x, n);
        let nf = T::count(n);
        let alpha = self.alpha();
        let mut up1 = vec![T::zero(); n];
        let mut up2 = vec![T::zero(); n];
        let mut loss = 0.0;
        let mut mean_lp = 0.0;
        for i in 0..n {
            let lp = samples[i].log_prob;
            let qmin = q1[i].min(q2[i]);
            loss += (alpha * lp - qmin).as_f64() / n as f64;
            mean_lp += lp.as_f64() / n as f64;
            if q1[i] <= q2[i] {
                up1[i] = -T::one() / nf;
            } else {
                up2[i] = -T::one() / nf;
            }
        }
        let dx1 = self.q1.input_grad(&t1, &up1);
        let dx2 = self.q2.input_grad(&t2, &up2);
        let (sd, ad) = (self.cfg.state_dim, d.cont);
        let cd = sd + ad;
        let rd = d.raw_dim();
        let nl = d.n_logits();
        let mut upstream = vec![T::zero(); n * rd];
        for i in 0..n {
            let da: Vec<T> = (0..ad).map(|j| dx1[i * cd + sd + j] + dx2[i * cd + sd + j]).collect();
            let (dm, dls) = samples[i].backward(&outs[i].log_stds, &da, alpha / nf);
            upstream[i * rd + nl..i * rd + nl + ad].copy_from_slice(&dm);
            upstream[i * rd + nl + ad..(i + 1) * rd].copy_from_slice(&dls);
        }
        if let Some((chosen, adv)) = disc {
            loss += self.disc_loss_grad(&outs, chosen, adv, &mut upstream);
        }
        let mut g = vec![T::zero(); self.actor.n_params()];
        self.actor.backward(&tape, &upstream, &mut g);
        if let PolicyTape::Moe(t) = &tape {
            if let PolicyNet::Moe(m) = &self.actor {
                loss += moe_balance_loss(m.gates(t), T::lit(MOE_LAMBDA_LB)).as_f64();
            }
        }
        (loss, mean_lp, g)
    }

    /// Advantage-weighted log-likelihood of the stored discrete choices with
    /// an entropy bonus; adds `∂/∂logits` into `upstream`.
    fn disc_loss_grad(&self, outs: &[PolicyOutput<T>], chosen: &[Vec<usize>], adv: &[f64], upstream: &mut [T]) -> f64 {
        let d = self.cfg.dims;
        if d.heads == 0 {
            return 0.0;
        }
        let n = outs.len();
        let rd = d.raw_dim();
        let c = T::lit(self.cfg.disc_entropy);
        let nf = T::count(n);
        let mut loss = 0.0;
        for i in 0..n {
            let a = T::lit(adv[i]);
            for h in 0..d.heads {
                let z = &outs[i].logits[h * d.choices..(h + 1) * d.choices];
                let p = softmax(z);
                let lp = log_softmax(z);
                let k = chosen[i][h];
                let neg_h = p.iter().zip(&lp).fold(T::zero(), |acc, (&pi, &li)| acc + pi * li);
                loss += (-a * lp[k] + c * neg_h).as_f64() / n as f64;
                for j in 0..d.choices {
                    let onehot = if j == k { T::one() } else { T::zero() };
                    let g = -a * (onehot - p[j]) + c * p[j] * (lp[j] - neg_h);
                    upstream[i * rd + h * d.choices + j] += g / nf;
                }
            }
        }
        loss
    }

    /// One temperature step on `−log α (E[log π] + H_target)` with the
    /// gradient clipped to `[−1, 1]` and log α kept in `[−10, 10]`.
    pub fn alpha_update(&mut self, mean_log_prob: f64) -> f64 {
        let g = (-(mean_log_prob + self.cfg.target_entropy)).clamp(-1.0, 1.0);
        let mut p = [self.log_alpha];
        self.opt_alpha.step(&mut p, &[T::lit(g)]);
        self.log_alpha = p[0].max(T::lit(LOG_ALPHA_MIN)).min(T::lit(LOG_ALPHA_MAX));
        self.alpha().as_f64()
    }

    pub fn soft_update(&mut self) {
        let tau = T::lit(self.cfg.tau);
        self.q1_target.soft_update_from(&self.q1, tau);
        self.q2_target.soft_update_from(&self.q2, tau);
    }

    /// Critic, actor, temperature and target updates on one PER batch.
    pub fn update(&mut self, rng: &mut impl Rng) -> UpdateStats {
        let n = self.cfg.batch;
        let smp = self.buffer.sample(n, rng);
        let b = self.gather(&smp.indices);
        let noise2: Vec<T> = standard_normals(rng, n * self.cfg.dims.cont);
        let y = self.td_targets(&b.s2, &b.r, &b.done, &noise2);
        let mut stats = UpdateStats::default();
        let (closs, td) = self.critic_update(&b.s, &b.a, &y, &smp.weights, &mut stats.skipped);
        self.buffer.update_priorities(&smp.indices, &td);

        let (disc_states, disc_choices, disc_adv) = match self.cfg.gae_lambda {
            Some(lambda) if self.cfg.dims.heads > 0 => self.gae_batch(lambda),
            _ => {
                let adv: Vec<f64> = td.iter().zip(&smp.weights).map(|(d, w)| d * w).collect();
                (b.s.clone(), b.disc.clone(), adv)
            }
        };
        let noise: Vec<T> = standard_normals(rng, n * self.cfg.dims.cont);
        let (aloss, mean_lp, g) = if disc_states.len() == b.s.len() {
            self.actor_loss_grad(&b.s, &noise, Some((&disc_choices, &disc_adv)))
        } else {
            let (l, m, mut g) = self.actor_loss_grad(&b.s, &noise, None);
            let dn = disc_choices.len();
            let dnoise: Vec<T> = vec![T::zero(); dn * self.cfg.dims.cont];
            let (outs, _, tape) = self.batch_policy(&disc_states, dn, &dnoise);
            let mut up = vec![T::zero(); dn * self.cfg.dims.raw_dim()];
            let dl = self.disc_loss_grad(&outs, &disc_choices, &disc_adv, &mut up);
            self.actor.backward(&tape, &up, &mut g);
            (l + dl, m, g)
        };
        if finite(&g) {
            let mut p = self.actor.flat_params();
            self.opt_actor.step(&mut p, &g);
            self.actor.set_flat_params(&p);
        } else {
            stats.skipped += 1;
        }
        stats.alpha = self.alpha_update(mean_lp);
        self.soft_update();
        self.updates += 1;
        stats.critic_loss = closs;
        stats.actor_loss = aloss;
        stats.mean_log_prob = mean_lp;
        debug_assert!(self.actor.is_finite() && self.q1.is_finite() && self.q2.is_finite());
        stats
    }

    /// States, choices and λ-return advantages of the most recent
    /// transitions in insertion order.
    fn gae_batch(&self, lambda: f64) -> (Vec<T>, Vec<Vec<usize>>, Vec<f64>) {
        let len = self.buffer.len().min(self.cfg.gae_window);
        let last = self.buffer.last_index().expect("non-empty buffer");
        let cap = self.buffer.capacity();
        let idx: Vec<usize> = (0..len).rev().map(|k| (last + cap - k) % cap).collect();
        let b = self.gather(&idx);
        let value = |s: &[T]| -> Vec<f64> {
            let n = s.len() / self.cfg.state_dim;
            let zero = vec![T::zero(); n * self.cfg.dims.cont];
            let (outs, _, _) = self.batch_policy(s, n, &zero);
            let a: Vec<T> = outs.iter().flat_map(|o| o.means.iter().map(|m| m.tanh())).collect();
            let x = self.critic_input(s, &a, n);
            let (q1, _) = self.q1.forward_batch(&x, n);
            let (q2, _) = self.q2.forward_batch(&x, n);
            q1.iter().zip(&q2).map(|(a, b)| a.min(*b).as_f64()).collect()
        };
        let v = value(&b.s);
        let v2 = value(&b.s2);
        let r: Vec<f64> = b.r.iter().map(|x| x.as_f64()).collect();
        let adv = gae_advantages(&r, &v, &v2, &b.done, self.cfg.gamma, lambda);
        (b.s, b.disc, adv)
    }

    pub fn params_finite(&self) -> bool {
        self.actor.is_finite() && self.q1.is_finite() && self.q2.is_finite() && self.log_alpha.is_finite()
    }

    /// Networks, temperature, ε and counters. Optimizer moments and the
    /// replay buffer are not included.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut t = Vec::new();
        match &self.actor {
            PolicyNet::Plain(m) => t.extend(m.tensors("actor.")),
            PolicyNet::Moe(m) => {
                t.push(Tensor::new("actor.gate".into(), vec![m.gate.k, m.gate.dim], &m.gate.u));
                for (k, e) in m.experts.iter().enumerate() {
                    t.extend(e.tensors(&format!("actor.expert{k}.")));
                }
            }
        }
        t.extend(self.q1.tensors("q1."));
        t.extend(self.q2.tensors("q2."));
        t.extend(self.q1_target.tensors("q1_target."));
        t.extend(self.q2_target.tensors("q2_target."));
        t.push(Tensor::scalar("log_alpha", self.log_alpha.as_f64()));
        t.push(Tensor::scalar("epsilon", self.epsilon));
        t.push(Tensor::scalar("steps", self.steps as f64));
        t.push(Tensor::scalar("updates", self.updates as f64));
        Checkpoint::new(t)
    }

    pub fn from_checkpoint(cfg: SacConfig, ck: &Checkpoint) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut sac = Sac::new(cfg, &mut rng)?;
        let adims = sac.cfg.actor_dims();
        let cdims = sac.cfg.critic_dims();
        sac.actor = match &sac.actor {
            PolicyNet::Plain(_) => PolicyNet::Plain(Mlp::from_checkpoint(ck, "actor.", &adims)?),
            PolicyNet::Moe(m) => {
                let mut m = m.clone();
                m.gate.u = ck
                    .tensor("actor.gate", &[m.gate.k, m.gate.dim])?
                    .iter()
                    .map(|&v| T::lit(v))
                    .collect();
                for k in 0..m.experts.len() {
                    m.experts[k] = Mlp::from_checkpoint(ck, &format!("actor.expert{k}."), &adims)?;
                }
                PolicyNet::Moe(m)
            }
        };
        sac.q1 = Mlp::from_checkpoint(ck, "q1.", &cdims)?;
        sac.q2 = Mlp::from_checkpoint(ck, "q2.", &cdims)?;
        sac.q1_target = Mlp::from_checkpoint(ck, "q1_target.", &cdims)?;
        sac.q2_target = Mlp::from_checkpoint(ck, "q2_target.", &cdims)?;
        sac.log_alpha = T::lit(ck.tensor("log_alpha", &[])?[0]);
        sac.epsilon = ck.tensor("epsilon", &[])?[0];
        sac.steps = ck.tensor("steps", &[])?[0] as u64;
        sac.updates = ck.tensor("updates", &[])?[0] as u64;
        Ok(sac)
    }
}

#[derive(Debug, Clone, Default)]
struct Batch<T> {
    s: Vec<T>,
    a: Vec<T>,
    s2: Vec<T>,
    r: Vec<T>,
    done: Vec<bool>,
    disc: Vec<Vec<usize>>,
}

fn finite<T: Scalar>(g: &[T]) -> bool {
    g.iter().all(|v| v.is_finite())
}
