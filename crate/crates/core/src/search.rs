//! Per-node exploration loop, Pareto archive with scalarized selection,
//! baselines, convergence detection and result files.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{evaluate, ChipConfig, EvalParams, PpaEstimate, PpaWeights, TccConfig, Workload, PPA_CSV_HEADER};
use crate::error::{invalid, Error, Result};
use crate::partition::{derive_heterogeneous, place_or_spread, region_stats, tile_records};
use crate::planner::{blend, mpc_plan, state_reward, MpcConfig, WorldModel, MPC_EPSILON};
use crate::procnode::ProcessNode;
use crate::rlenv::{
    bind_wmem, decode_action, encode_state, initial_config, node_one_hot, project_action, reward, subset_ppa_positions,
    wmem_floor_kb, ActionVector, Constraints, StateInputs, CONT_DIM, DISC_HEADS, SUBSET_DIM, TCC_RANGE,
};
use crate::sac::{Sac, SacConfig, Transition};
use crate::surrogate::{sur_uncertainty, SurrogateGate, SurrogateModel, TAU_SUR};

/// Scalar type of the networks trained during exploration.
pub type Real = f32;

/// Reward assigned when a decoded configuration cannot be evaluated.
pub const EVAL_FAILURE_REWARD: f64 = -5.0;

/// Rewards stored for training are clipped to this range; logs keep the
/// raw value.
pub const TRAIN_REWARD_RANGE: (f64, f64) = (-5.0, 3.0);

/// `a` dominates `b`: no worse in perf (higher), power and area (lower),
/// strictly better in at least one.
pub fn dominates(a: [f64; 3], b: [f64; 3]) -> bool {
    let no_worse = a[0] >= b[0] && a[1] <= b[1] && a[2] <= b[2];
    let better = a[0] > b[0] || a[1] < b[1] || a[2] < b[2];
    no_worse && better
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoEntry {
    pub episode: usize,
    pub cfg: ChipConfig,
    pub ppa: PpaEstimate,
}

impl ParetoEntry {
    /// `(perf, power, area)`.
    pub fn objectives(&self) -> [f64; 3] {
        [self.ppa.perf_gops, self.ppa.power_mw, self.ppa.area_mm2]
    }
}

/// Non-dominated set over (perf↑, power↓, area↓). Points with objectives
/// identical to a member are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoArchive {
    entries: Vec<ParetoEntry>,
}

impl ParetoArchive {
    pub fn new() -> Self {
        ParetoArchive::default()
    }

    pub fn entries(&self) -> &[ParetoEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, e: ParetoEntry) -> bool {
        let o = e.objectives();
        if self.entries.iter().any(|x| {
            let xo = x.objectives();
            xo == o || dominates(xo, o)
        }) {
            return false;
        }
        self.entries.retain(|x| !dominates(o, x.objectives()));
        self.entries.push(e);
        true
    }

    /// No member dominates another.
    pub fn is_consistent(&self) -> bool {
        self.entries.iter().all(|a| {
            self.entries
                .iter()
                .all(|b| !dominates(a.objectives(), b.objectives()))
        })
    }
}

/// Index of the frontier point minimizing `β·power_n + γ·area_n +
/// α·(1 − perf_n)` with each objective min-max normalized over the
/// frontier; ties go to lower power, then lower area.
pub fn select_final(objectives: &[[f64; 3]], weights: &PpaWeights) -> Result<Option<usize>> {
    if objectives.is_empty() {
        return Ok(None);
    }
    let (alpha, beta, gamma) = weights.normalized::<f64>()?;
    let span = |k: usize| {
        let lo = objectives.iter().map(|o| o[k]).fold(f64::INFINITY, f64::min);
        let hi = objectives.iter().map(|o| o[k]).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let norm = |v: f64, (lo, hi): (f64, f64)| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    let (sp, sw, sa) = (span(0), span(1), span(2));
    let score = |o: &[f64; 3]| beta * norm(o[1], sw) + gamma * norm(o[2], sa) + alpha * (1.0 - norm(o[0], sp));
    let mut best = 0;
    for i in 1..objectives.len() {
        let (a, b) = (&objectives[i], &objectives[best]);
        let key = |o: &[f64; 3]| (score(o), o[1], o[2]);
        if key(a) < key(b) {
            best = i;
        }
    }
    Ok(Some(best))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Sac,
    Random,
    Grid,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Sac, Strategy::Random, Strategy::Grid];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sac => "sac",
            Strategy::Random => "random",
            Strategy::Grid => "grid",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| invalid(format!("unknown strategy {s:?} (valid: sac, random, grid)")))
    }
}

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Policy = 2,
    Buffer = 3,
    Mpc = 4,
    WorldModel = 5,
    Surrogate = 6,
    Baseline = 7,
}

pub fn stream_rng(seed: u64, node_nm: u32, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((node_nm as u64) << 32));
    rng.set_stream(stream as u64);
    rng
}

/// Actor and critic learning rate for search runs of a few hundred episodes.
pub const SEARCH_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub budget: usize,
    pub seed: u64,
    /// Uniform-action steps before training; defaults to
    /// `min(1000, budget / 5)`.
    pub warmup: Option<usize>,
    pub mpc: bool,
    pub surrogate_gate: bool,
    /// Gradient steps per evaluation once the agent is ready.
    pub updates_per_step: usize,
    pub sac: SacConfig,
    pub mpc_cfg: MpcSettings,
    pub params: EvalParams,
}

/// Serializable mirror of [`MpcConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcSettings {
    pub candidates: usize,
    pub horizon: usize,
    pub sigma: f64,
    pub gamma: f64,
}

impl Default for MpcSettings {
    fn default() -> Self {
        let d = MpcConfig::default();
        MpcSettings {
            candidates: d.candidates,
            horizon: d.horizon,
            sigma: d.sigma,
            gamma: d.gamma,
        }
    }
}

impl RunConfig {
    pub fn new(budget: usize, seed: u64) -> Self {
        let sac = SacConfig {
            lr_actor: SEARCH_LR,
            lr_critic: SEARCH_LR,
            ..SacConfig::dse()
        };
        RunConfig {
            budget,
            seed,
            warmup: None,
            mpc: true,
            surrogate_gate: false,
            updates_per_step: 1,
            sac,
            mpc_cfg: MpcSettings::default(),
            params: EvalParams::default(),
        }
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup.unwrap_or((self.budget / 5).min(1000))
    }

    /// Agent settings for this run: warmup and ε horizon follow the budget.
    pub fn agent_config(&self) -> SacConfig {
        SacConfig {
            warmup: self.warmup_steps(),
            eps_horizon: self.budget.max(1),
            ..self.sac.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(invalid("budget must be >= 1"));
        }
        if self.budget < self.warmup_steps() {
            return Err(invalid("budget must be >= warmup"));
        }
        self.sac.validate()
    }
}

/// One evaluated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub epsilon: f64,
    pub reward: f64,
    pub ppa_score: f64,
    pub feasible: bool,
    pub alpha: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub buffer_size: usize,
    /// Best feasible score so far (`inf` before the first).
    pub best_score: f64,
    pub power_mw: f64,
    pub perf_gops: f64,
    pub area_mm2: f64,
    pub tok_s: f64,
    pub mesh_w: u32,
    pub mesh_h: u32,
    pub new_config: bool,
    /// Offered to the archive (every feasible evaluation).
    pub archive_attempt: bool,
    pub full_eval: bool,
    pub mpc: bool,
}

pub const TRAINING_CSV_HEADER: [&str; 9] = [
    "episode",
    "epsilon",
    "reward",
    "ppa_score",
    "feasible",
    "alpha",
    "critic_loss",
    "actor_loss",
    "buffer_size",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chosen {
    pub episode: usize,
    pub cfg: ChipConfig,
    pub ppa: PpaEstimate,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeResult {
    pub node_nm: u32,
    pub strategy: Strategy,
    pub seed: u64,
    pub log: Vec<EpisodeLog>,
    pub archive: ParetoArchive,
    /// Lowest-score feasible configuration.
    pub best: Option<Chosen>,
    /// Highest-reward configuration, kept for runs that find nothing
    /// feasible.
    pub best_effort: Option<Chosen>,
    /// Scalarized pick from the frontier.
    pub selected: Option<Chosen>,
    pub feasible_count: usize,
    pub unique_configs: usize,
    pub full_evals: usize,
    pub mpc_calls: usize,
}

impl NodeResult {
    pub fn best_score(&self) -> f64 {
        self.best.as_ref().map_or(f64::INFINITY, |b| b.ppa.score)
    }

    pub fn infeasible(&self) -> bool {
        self.best.is_none()
    }

    /// Selected frontier point, or the best-effort configuration.
    pub fn final_choice(&self) -> Option<&Chosen> {
        self.selected.as_ref().or(self.best_effort.as_ref())
    }

    /// Unique configurations first seen in each third of the run.
    pub fn discovery_by_third(&self) -> [usize; 3] {
        let n = self.log.len().max(1);
        let mut out = [0; 3];
        for e in &self.log {
            if e.new_config {
                out[((e.episode * 3) / n).min(2)] += 1;
            }
        }
        out
    }
}

/// Running bookkeeping shared by all strategies.
struct Tracker {
    archive: ParetoArchive,
    best: Option<Chosen>,
    best_effort: Option<Chosen>,
    seen: HashSet<u64>,
    feasible_count: usize,
    full_evals: usize,
}

impl Tracker {
    fn new() -> Self {
        Tracker {
            archive: ParetoArchive::new(),
            best: None,
            best_effort: None,
            seen: HashSet::new(),
            feasible_count: 0,
            full_evals: 0,
        }
    }

    /// Records an evaluated configuration; returns `(new_config, attempted)`.
    fn record(&mut self, episode: usize, cfg: &ChipConfig, ppa: &PpaEstimate, r: f64) -> (bool, bool) {
        let new = self.seen.insert(config_hash(cfg));
        self.full_evals += 1;
        if self.best_effort.as_ref().is_none_or(|b| r > b.reward) {
            self.best_effort = Some(Chosen {
                episode,
                cfg: cfg.clone(),
                ppa: ppa.clone(),
                reward: r,
            });
        }
        if !ppa.feasible {
            return (new, false);
        }
        self.feasible_count += 1;
        if self.best.as_ref().is_none_or(|b| ppa.score < b.ppa.score) {
            self.best = Some(Chosen {
                episode,
                cfg: cfg.clone(),
                ppa: ppa.clone(),
                reward: r,
            });
        }
        self.archive.insert(ParetoEntry {
            episode,
            cfg: cfg.clone(),
            ppa: ppa.clone(),
        });
        (new, true)
    }

    fn best_score(&self) -> f64 {
        self.best.as_ref().map_or(f64::INFINITY, |b| b.ppa.score)
    }

    fn finish(self, node: u32, strategy: Strategy, seed: u64, log: Vec<EpisodeLog>, weights: &PpaWeights, mpc_calls: usize) -> Result<NodeResult> {
        let objs: Vec<[f64; 3]> = self.archive.entries().iter().map(|e| e.objectives()).collect();
        let selected = select_final(&objs, weights)?.map(|i| {
            let e = &self.archive.entries()[i];
            Chosen {
                episode: e.episode,
                cfg: e.cfg.clone(),
                ppa: e.ppa.clone(),
                reward: f64::NAN,
            }
        });
        let selected = selected.map(|mut c| {
            c.reward = log.iter().find(|l| l.episode == c.episode).map_or(f64::NAN, |l| l.reward);
            c
        });
        Ok(NodeResult {
            node_nm: node,
            strategy,
            seed,
            log,
            unique_configs: self.seen.len(),
            archive: self.archive,
            best: self.best,
            best_effort: self.best_effort,
            selected,
            feasible_count: self.feasible_count,
            full_evals: self.full_evals,
            mpc_calls,
        })
    }
}

/// Stable hash of a configuration's canonical JSON.
pub fn config_hash(cfg: &ChipConfig) -> u64 {
    let mut h = DefaultHasher::new();
    cfg.to_json_string().hash(&mut h);
    h.finish()
}

fn to_action(cont: &[Real], disc: &[usize]) -> ActionVector {
    let mut a = ActionVector::zero();
    for (d, &c) in a.cont.iter_mut().zip(cont) {
        *d = c as f64;
    }
    for (d, &k) in a.disc.iter_mut().zip(disc) {
        *d = k as i32 - 2;
    }
    a
}

fn to_real(v: &[f64]) -> Vec<Real> {
    v.iter().map(|&x| x as Real).collect()
}

/// Exploration of one node with the actor-critic agent.
pub fn run_node(node: &ProcessNode, wl: &Workload, constraints: &Constraints, run: &RunConfig) -> Result<NodeResult> {
    run.validate()?;
    constraints.validate()?;
    let scfg = run.agent_config();
    if scfg.state_dim != SUBSET_DIM || scfg.dims.cont != CONT_DIM || scfg.dims.heads != DISC_HEADS {
        return Err(invalid("agent dimensions must match the state subset and action layout"));
    }
    let nm = node.node_nm;
    let mut rng_init = stream_rng(run.seed, nm, Stream::Init);
    let mut rng_pol = stream_rng(run.seed, nm, Stream::Policy);
    let mut rng_buf = stream_rng(run.seed, nm, Stream::Buffer);
    let mut rng_mpc = stream_rng(run.seed, nm, Stream::Mpc);
    let mut rng_wm = stream_rng(run.seed, nm, Stream::WorldModel);
    let mut rng_sur = stream_rng(run.seed, nm, Stream::Surrogate);

    let mut agent = Sac::<Real>::new(scfg, &mut rng_init)?;
    let mut wm = WorldModel::<Real>::new(SUBSET_DIM, CONT_DIM, &mut rng_init);
    let mut sur = SurrogateModel::<Real>::new(SUBSET_DIM, CONT_DIM, &mut rng_init);
    let mut gate = SurrogateGate::new(TAU_SUR, 32);
    let mut sur_data: Vec<(Vec<Real>, [Real; 3])> = Vec::new();
    let one_hot = node_one_hot(nm);
    let ppa_pos = subset_ppa_positions();
    let reward_pos = [ppa_pos[0], ppa_pos[1], ppa_pos[2]];
    let mpc_cfg = MpcConfig {
        candidates: run.mpc_cfg.candidates,
        horizon: run.mpc_cfg.horizon,
        sigma: run.mpc_cfg.sigma,
        gamma: run.mpc_cfg.gamma,
        ..MpcConfig::default()
    };

    let mut cfg = initial_config(node, wl.w_total());
    let pl = place_or_spread(&wl.graph, &cfg, &run.params.placement);
    let mut state = encode_state(&StateInputs {
        workload: wl,
        cfg: &cfg,
        placement: &pl,
        node,
        constraints,
        prev: None,
    })
    .subset();

    let mut tr = Tracker::new();
    let mut log = Vec::with_capacity(run.budget);
    let mut mpc_calls = 0;
    let mut last_stats = crate::sac::UpdateStats {
        alpha: agent.alpha() as f64,
        ..Default::default()
    };

    for ep in 0..run.budget {
        let s = to_real(&state);
        let mut act = agent.select_action(&s, &mut rng_pol);
        let mut used_mpc = false;
        if run.mpc && act.from_policy && wm.is_trained() && agent.epsilon < MPC_EPSILON {
            let policy = |x: &[Real], n: usize| -> Vec<Real> {
                let mut out = Vec::with_capacity(n * CONT_DIM);
                for i in 0..n {
                    out.extend(agent.deterministic_action(&x[i * SUBSET_DIM..(i + 1) * SUBSET_DIM]).cont);
                }
                out
            };
            let plan = mpc_plan(&policy, &wm, &s, &mpc_cfg, &|x| state_reward(x, reward_pos), &mut rng_mpc);
            act.cont = blend(&plan.action, &act.cont, TCC_RANGE);
            used_mpc = true;
            mpc_calls += 1;
        }
        let action = project_action(&to_action(&act.cont, &act.disc));
        let cand = decode_action(&action, &cfg, node, wl.w_total());

        let sur_x = sur.input(&s, &act.cont, &one_hot);
        let skip = run.surrogate_gate && gate.trusted(nm) && {
            let p = sur.net.forward(&sur_x);
            predicts_violation(&[p[0] as f64, p[1] as f64, p[2] as f64], constraints)
        };

        let (r, ppa, next_state, feasible, full_eval) = if skip {
            let p = sur.net.forward(&sur_x);
            let est = predicted_estimate(&[p[0] as f64, p[1] as f64, p[2] as f64], constraints, &cand, nm);
            let r = reward(&est, constraints)?.total;
            (r, Some(est), state.clone(), false, false)
        } else {
            match evaluate(&cand, node, wl, &run.params, constraints) {
                Ok((ppa, pl)) => {
                    let r = reward(&ppa, constraints)?.total;
                    let ns = encode_state(&StateInputs {
                        workload: wl,
                        cfg: &cand,
                        placement: &pl,
                        node,
                        constraints,
                        prev: Some(&ppa),
                    })
                    .subset();
                    let truth = normalized_truth(&ppa, constraints);
                    if run.surrogate_gate {
                        let p = sur.net.forward(&sur_x);
                        let pred = [p[0] as f64, p[1] as f64, p[2] as f64];
                        gate.record(nm, sur_uncertainty(&pred, &truth));
                        sur_data.push((sur_x.clone(), truth.map(|v| v as Real)));
                    }
                    let f = ppa.feasible;
                    (r, Some(ppa), ns, f, true)
                }
                Err(_) => (EVAL_FAILURE_REWARD, None, state.clone(), false, true),
            }
        };

        let done = ep + 1 == run.budget;
        agent.store(Transition {
            s: s.clone(),
            a: act.cont.clone(),
            disc: act.disc.clone(),
            r: r.clamp(TRAIN_REWARD_RANGE.0, TRAIN_REWARD_RANGE.1) as Real,
            s2: to_real(&next_state),
            done,
        });

        let (mut new_config, mut attempted) = (false, false);
        if let (Some(p), true) = (&ppa, full_eval) {
            (new_config, attempted) = tr.record(ep, &cand, p, r);
        }
        if full_eval && ppa.is_some() {
            cfg = cand;
            state = next_state;
        } else if !full_eval {
            tr.full_evals += 0;
        }

        for _ in 0..if agent.ready() { run.updates_per_step } else { 0 } {
            last_stats = agent.update(&mut rng_buf);
            let n = agent.cfg.batch.min(agent.buffer.len());
            let (mut bs, mut ba, mut bs2) = (Vec::new(), Vec::new(), Vec::new());
            for _ in 0..n {
                let t = agent.buffer.get(rng_wm.random_range(0..agent.buffer.len()));
                bs.extend_from_slice(&t.s);
                ba.extend_from_slice(&t.a);
                bs2.extend_from_slice(&t.s2);
            }
            wm.train_step(&bs, &ba, &bs2);
        }
        if run.surrogate_gate && !sur_data.is_empty() {
            let n = sur_data.len().min(64);
            let mut x = Vec::new();
            let mut y = Vec::new();
            for _ in 0..n {
                let (xi, yi) = &sur_data[rng_sur.random_range(0..sur_data.len())];
                x.extend_from_slice(xi);
                y.push(*yi);
            }
            sur.train_step(&x, &y);
        }
        agent.decay_epsilon(tr.feasible_count > 0);

        let p = ppa.as_ref();
        log.push(EpisodeLog {
            episode: ep,
            epsilon: agent.epsilon,
            reward: r,
            ppa_score: p.map_or(f64::NAN, |p| p.score),
            feasible,
            alpha: last_stats.alpha,
            critic_loss: last_stats.critic_loss,
            actor_loss: last_stats.actor_loss,
            buffer_size: agent.buffer.len(),
            best_score: tr.best_score(),
            power_mw: p.map_or(f64::NAN, |p| p.power_mw),
            perf_gops: p.map_or(f64::NAN, |p| p.perf_gops),
            area_mm2: p.map_or(f64::NAN, |p| p.area_mm2),
            tok_s: p.map_or(f64::NAN, |p| p.tok_s),
            mesh_w: p.map_or(0, |p| p.mesh_w),
            mesh_h: p.map_or(0, |p| p.mesh_h),
            new_config,
            archive_attempt: attempted,
            full_eval,
            mpc: used_mpc,
        });
    }
    tr.finish(nm, Strategy::Sac, run.seed, log, &constraints.weights, mpc_calls)
}

/// Range-normalized `(power, perf, area)`.
pub fn normalized_truth(p: &PpaEstimate, c: &Constraints) -> [f64; 3] {
    [
        c.ranges.power.normalize(p.power_mw),
        c.ranges.perf.normalize(p.perf_gops),
        c.ranges.area.normalize(p.area_mm2),
    ]
}

fn denorm(v: f64, r: &crate::arch::Range) -> f64 {
    r.min + v.clamp(0.0, 1.0) * (r.max - r.min)
}

/// Surrogate prediction above the power or area budget.
pub fn predicts_violation(pred: &[f64; 3], c: &Constraints) -> bool {
    denorm(pred[0], &c.ranges.power) > c.p_max_mw || denorm(pred[2], &c.ranges.area) > c.a_max_mm2
}

fn predicted_estimate(pred: &[f64; 3], c: &Constraints, cfg: &ChipConfig, nm: u32) -> PpaEstimate {
    let power = denorm(pred[0], &c.ranges.power);
    let perf = denorm(pred[1], &c.ranges.perf);
    let area = denorm(pred[2], &c.ranges.area);
    PpaEstimate {
        node_nm: nm,
        mesh_w: cfg.mesh_w,
        mesh_h: cfg.mesh_h,
        cores: cfg.n_cores(),
        freq_mhz: cfg.f_clk / 1e6,
        power: crate::arch::PowerBreakdown {
            compute: power,
            ..Default::default()
        },
        power_mw: power,
        perf_gops: perf,
        area_mm2: area,
        tok_s: f64::NAN,
        ceilings: crate::arch::Ceilings {
            compute: f64::NAN,
            memory: f64::NAN,
            noc: f64::NAN,
        },
        binding: crate::arch::Binding::Compute,
        eta_par: f64::NAN,
        memory_used: cfg.total_memory_bytes(),
        hazard_score: 0.0,
        kv_spill_bytes: 0,
        cross_bytes_per_token: 0.0,
        placement_ok: true,
        score: crate::arch::ppa_score(perf, power, area, &c.ranges, &c.weights).unwrap_or(f64::NAN),
        feasible: false,
    }
}

fn eval_episode(
    tr: &mut Tracker,
    log: &mut Vec<EpisodeLog>,
    ep: usize,
    cand: &ChipConfig,
    node: &ProcessNode,
    wl: &Workload,
    c: &Constraints,
    params: &EvalParams,
) -> Result<bool> {
    let (r, ppa) = match evaluate(cand, node, wl, params, c) {
        Ok((ppa, _)) => (reward(&ppa, c)?.total, Some(ppa)),
        Err(_) => (EVAL_FAILURE_REWARD, None),
    };
    let (mut new_config, mut attempted) = (false, false);
    if let Some(p) = &ppa {
        (new_config, attempted) = tr.record(ep, cand, p, r);
    } else {
        tr.full_evals += 1;
    }
    let p = ppa.as_ref();
    log.push(EpisodeLog {
        episode: ep,
        epsilon: 1.0,
        reward: r,
        ppa_score: p.map_or(f64::NAN, |p| p.score),
        feasible: p.is_some_and(|p| p.feasible),
        alpha: 0.0,
        critic_loss: 0.0,
        actor_loss: 0.0,
        buffer_size: 0,
        best_score: tr.best_score(),
        power_mw: p.map_or(f64::NAN, |p| p.power_mw),
        perf_gops: p.map_or(f64::NAN, |p| p.perf_gops),
        area_mm2: p.map_or(f64::NAN, |p| p.area_mm2),
        tok_s: p.map_or(f64::NAN, |p| p.tok_s),
        mesh_w: cand.mesh_w,
        mesh_h: cand.mesh_h,
        new_config,
        archive_attempt: attempted,
        full_eval: true,
        mpc: false,
    });
    Ok(ppa.is_some())
}

/// Uniform action draws applied to the current configuration.
pub fn random_search(node: &ProcessNode, wl: &Workload, constraints: &Constraints, run: &RunConfig) -> Result<NodeResult> {
    if run.budget == 0 {
        return Err(invalid("budget must be >= 1"));
    }
    constraints.validate()?;
    let mut rng = stream_rng(run.seed, node.node_nm, Stream::Baseline);
    let mut cfg = initial_config(node, wl.w_total());
    let mut tr = Tracker::new();
    let mut log = Vec::with_capacity(run.budget);
    for ep in 0..run.budget {
        let a = ActionVector::uniform(&mut rng);
        let cand = decode_action(&a, &cfg, node, wl.w_total());
        if eval_episode(&mut tr, &mut log, ep, &cand, node, wl, constraints, &run.params)? {
            cfg = cand;
        }
    }
    tr.finish(node.node_nm, Strategy::Random, run.seed, log, &constraints.weights, 0)
}

fn levels(lo: f64, hi: f64, k: usize, log2: bool) -> Vec<f64> {
    if k == 1 {
        let mid = if log2 { (lo.log2() + hi.log2()) / 2.0 } else { (lo + hi) / 2.0 };
        return vec![if log2 { 2f64.powf(mid.round()) } else { mid.round() }];
    }
    (0..k)
        .map(|i| {
            let t = i as f64 / (k - 1) as f64;
            if log2 {
                2f64.powf((lo.log2() + t * (hi.log2() - lo.log2())).round())
            } else {
                (lo + t * (hi - lo)).round()
            }
        })
        .collect()
}

/// Lattice configurations over mesh width × height × vlen × dmem × fetch
/// with other parameters at range midpoints. The lattice uses the fewest
/// levels per axis covering `budget` points and is thinned to `budget`
/// evenly spaced entries of its lexicographic order.
pub fn grid_configs(node: &ProcessNode, w_total: u64, budget: usize) -> Vec<ChipConfig> {
    let mut k = 1usize;
    while k.pow(5) < budget {
        k += 1;
    }
    let mesh = levels(1.0, 64.0, k, true);
    let vlen = levels(128.0, 2048.0, k, true);
    let dmem = levels(16.0, 512.0, k, false);
    let fetch = levels(1.0, 16.0, k, false);
    let mid = TccConfig {
        fetch: 8,
        stanum: 16,
        vlen_bits: 512,
        dmem_kb: 256,
        wmem_kb: TccConfig::WMEM_KB.0,
        imem_kb: 64,
        xr_wp: 8,
        vr_wp: 8,
        xdpnum: 8,
        vdpnum: 8,
    };
    let mut out = Vec::new();
    for &mw in &mesh {
        for &mh in &mesh {
            for &v in &vlen {
                for &d in &dmem {
                    for &f in &fetch {
                        let tile = TccConfig {
                            fetch: f as u32,
                            vlen_bits: v as u32,
                            dmem_kb: ((d as u32).div_ceil(crate::arch::BANK_KB) * crate::arch::BANK_KB).max(16),
                            ..mid
                        };
                        let mut c = ChipConfig::uniform(mw as u32, mh as u32, tile, node.f_clk_max / 2.0);
                        c.f_clk = (c.f_clk / 1e6).round() * 1e6;
                        c.dflit_bits = 1024;
                        c = bind_wmem(c, w_total);
                        debug_assert!(c.tiles[0].wmem_kb >= wmem_floor_kb(w_total, c.n_cores()));
                        out.push(c);
                    }
                }
            }
        }
    }
    let n = out.len();
    if n <= budget {
        return out;
    }
    (0..budget).map(|i| out[i * n / budget].clone()).collect()
}

pub fn grid_search(node: &ProcessNode, wl: &Workload, constraints: &Constraints, run: &RunConfig) -> Result<NodeResult> {
    if run.budget == 0 {
        return Err(invalid("budget must be >= 1"));
    }
    constraints.validate()?;
    let mut tr = Tracker::new();
    let mut log = Vec::new();
    for (ep, cand) in grid_configs(node, wl.w_total(), run.budget).iter().enumerate() {
        eval_episode(&mut tr, &mut log, ep, cand, node, wl, constraints, &run.params)?;
    }
    tr.finish(node.node_nm, Strategy::Grid, run.seed, log, &constraints.weights, 0)
}

pub fn run_strategy(strategy: Strategy, node: &ProcessNode, wl: &Workload, c: &Constraints, run: &RunConfig) -> Result<NodeResult> {
    match strategy {
        Strategy::Sac => run_node(node, wl, c, run),
        Strategy::Random => random_search(node, wl, c, run),
        Strategy::Grid => grid_search(node, wl, c, run),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAll {
    pub results: Vec<NodeResult>,
    /// Index into `results` of the lowest best score.
    pub global_best: Option<usize>,
}

/// Runs every node, `jobs` at a time; results keep the order of `nodes`.
pub fn run_all(nodes: &[ProcessNode], wl: &Workload, constraints: &Constraints, run: &RunConfig, jobs: usize) -> Result<RunAll> {
    let jobs = jobs.max(1);
    let mut results: Vec<Option<Result<NodeResult>>> = (0..nodes.len()).map(|_| None).collect();
    for chunk in (0..nodes.len()).collect::<Vec<_>>().chunks(jobs) {
        let out: Vec<(usize, Result<NodeResult>)> = std::thread::scope(|sc| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| (i, sc.spawn(move || run_node(&nodes[i], wl, constraints, run))))
                .collect();
            handles
                .into_iter()
                .map(|(i, h)| (i, h.join().unwrap_or_else(|_| Err(invalid("node worker panicked")))))
                .collect()
        });
        for (i, r) in out {
            results[i] = Some(r);
        }
    }
    let results = results.into_iter().map(|r| r.expect("every node ran")).collect::<Result<Vec<_>>>()?;
    let global_best = (0..results.len())
        .filter(|&i| !results[i].infeasible())
        .fold(None, |b: Option<usize>, i| match b {
            Some(j) if results[j].best_score() <= results[i].best_score() => Some(j),
            _ => Some(i),
        });
    Ok(RunAll { results, global_best })
}

/// Best score improved by less than `tol` over the last `window` entries
/// of a best-so-far trace.
pub fn convergence_check(best: &[f64], window: usize, tol: f64) -> bool {
    if window == 0 || best.len() <= window {
        return false;
    }
    let last = best[best.len() - 1];
    let then = best[best.len() - 1 - window];
    if !(last.is_finite() && then.is_finite()) {
        return false;
    }
    then - last < tol
}

/// Best-so-far never increases.
pub fn best_is_monotone(log: &[EpisodeLog]) -> bool {
    log.windows(2).all(|w| w[1].best_score <= w[0].best_score)
}

fn csv_f(v: f64) -> String {
    v.to_string()
}

pub fn write_training_csv(path: &Path, log: &[EpisodeLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRAINING_CSV_HEADER)?;
    for e in log {
        w.write_record([
            e.episode.to_string(),
            csv_f(e.epsilon),
            csv_f(e.reward),
            csv_f(e.ppa_score),
            e.feasible.to_string(),
            csv_f(e.alpha),
            csv_f(e.critic_loss),
            csv_f(e.actor_loss),
            e.buffer_size.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_training_csv(path: &Path) -> Result<Vec<EpisodeLog>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    let mut best = f64::INFINITY;
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| invalid(format!("{}: column {i}: {e}", path.display())))
        };
        let feasible = &rec[4] == "true";
        let score = f(3)?;
        if feasible && score < best {
            best = score;
        }
        out.push(EpisodeLog {
            episode: f(0)? as usize,
            epsilon: f(1)?,
            reward: f(2)?,
            ppa_score: score,
            feasible,
            alpha: f(5)?,
            critic_loss: f(6)?,
            actor_loss: f(7)?,
            buffer_size: f(8)? as usize,
            best_score: best,
            power_mw: f64::NAN,
            perf_gops: f64::NAN,
            area_mm2: f64::NAN,
            tok_s: f64::NAN,
            mesh_w: 0,
            mesh_h: 0,
            new_config: false,
            archive_attempt: feasible,
            full_eval: true,
            mpc: false,
        });
    }
    Ok(out)
}

pub const MESH_SCALING_HEADER: [&str; 8] = [
    "process_node",
    "mesh_w",
    "mesh_h",
    "cores",
    "tok_s",
    "power_mw",
    "area_mm2",
    "binding",
];

pub const PARETO_HEADER: [&str; 7] = ["episode", "mesh_config", "perf_gops", "power_mw", "area_mm2", "ppa_score", "tok_s"];

pub const COMPARISON_HEADER: [&str; 9] = [
    "strategy",
    "seed",
    "best_score",
    "feasible_count",
    "unique_configs",
    "best_perf_gops",
    "best_power_mw",
    "best_area_mm2",
    "best_tok_s",
];

/// Writes `<dir>/<node>nm/`: the selected configuration, its derived
/// per-tile layout, the frontier, the training log and region statistics.
pub fn write_node_artifacts(dir: &Path, res: &NodeResult, wl: &Workload, params: &EvalParams) -> Result<()> {
    let nd = dir.join(format!("{}nm", res.node_nm));
    std::fs::create_dir_all(&nd)?;
    write_training_csv(&nd.join("training_stats.csv"), &res.log)?;
    let mut w = csv::Writer::from_path(nd.join("pareto.csv"))?;
    w.write_record(PARETO_HEADER)?;
    for e in res.archive.entries() {
        w.write_record([
            e.episode.to_string(),
            e.ppa.mesh_label(),
            csv_f(e.ppa.perf_gops),
            csv_f(e.ppa.power_mw),
            csv_f(e.ppa.area_mm2),
            csv_f(e.ppa.score),
            csv_f(e.ppa.tok_s),
        ])?;
    }
    w.flush()?;
    let summary = serde_json::json!({
        "node_nm": res.node_nm,
        "strategy": res.strategy.name(),
        "seed": res.seed,
        "infeasible": res.infeasible(),
        "best_score": if res.infeasible() { serde_json::Value::Null } else { res.best_score().into() },
        "feasible_count": res.feasible_count,
        "unique_configs": res.unique_configs,
        "full_evals": res.full_evals,
        "mpc_calls": res.mpc_calls,
        "archive_size": res.archive.len(),
        "discovery_by_third": res.discovery_by_third(),
        "selected": res.final_choice().map(|c| serde_json::json!({
            "episode": c.episode,
            "ppa": c.ppa,
        })),
    });
    std::fs::write(nd.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let tiles_dir = nd.join("tiles");
    if tiles_dir.exists() {
        std::fs::remove_dir_all(&tiles_dir)?;
    }
    if let Some(c) = res.final_choice() {
        std::fs::write(nd.join("config.json"), c.cfg.to_json_string())?;
        let pl = place_or_spread(&wl.graph, &c.cfg, &params.placement);
        let het = derive_heterogeneous(&c.cfg, &pl);
        std::fs::write(nd.join("config_heterogeneous.json"), het.to_json_string())?;
        std::fs::create_dir_all(&tiles_dir)?;
        for t in tile_records(&het) {
            std::fs::write(
                tiles_dir.join(format!("tile_{:02}_{:02}.json", t.y, t.x)),
                serde_json::to_string_pretty(&t)? + "\n",
            )?;
        }
        let rs = region_stats(&het, &pl);
        std::fs::write(nd.join("regions.json"), serde_json::to_string_pretty(&rs)? + "\n")?;
    }
    Ok(())
}

/// `ppa_by_node.csv` and `mesh_scaling.csv` over the selected
/// configurations, one row per node with a result.
pub fn write_run_tables(dir: &Path, results: &[NodeResult]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut ppa = csv::Writer::from_path(dir.join("ppa_by_node.csv"))?;
    ppa.write_record(PPA_CSV_HEADER)?;
    let mut mesh = csv::Writer::from_path(dir.join("mesh_scaling.csv"))?;
    mesh.write_record(MESH_SCALING_HEADER)?;
    for r in results {
        if let Some(c) = r.final_choice() {
            ppa.write_record(c.ppa.csv_record())?;
            mesh.write_record([
                format!("{}nm", r.node_nm),
                c.ppa.mesh_w.to_string(),
                c.ppa.mesh_h.to_string(),
                c.ppa.cores.to_string(),
                csv_f(c.ppa.tok_s),
                csv_f(c.ppa.power_mw),
                csv_f(c.ppa.area_mm2),
                c.ppa.binding.name().to_string(),
            ])?;
        }
    }
    ppa.flush()?;
    mesh.flush()?;
    Ok(())
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        let (a, b) = (s[n / 2 - 1], s[n / 2]);
        if a == b {
            a
        } else {
            (a + b) / 2.0
        }
    }
}

/// Per-run rows then one median row per strategy.
pub fn write_comparison_csv(path: &Path, results: &[NodeResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COMPARISON_HEADER)?;
    let row = |r: &NodeResult| -> Vec<String> {
        let b = r.best.as_ref();
        vec![
            r.strategy.name().to_string(),
            r.seed.to_string(),
            csv_f(r.best_score()),
            r.feasible_count.to_string(),
            r.unique_configs.to_string(),
            csv_f(b.map_or(f64::NAN, |b| b.ppa.perf_gops)),
            csv_f(b.map_or(f64::NAN, |b| b.ppa.power_mw)),
            csv_f(b.map_or(f64::NAN, |b| b.ppa.area_mm2)),
            csv_f(b.map_or(f64::NAN, |b| b.ppa.tok_s)),
        ]
    };
    for r in results {
        w.write_record(row(r))?;
    }
    for s in Strategy::ALL {
        let rs: Vec<&NodeResult> = results.iter().filter(|r| r.strategy == s).collect();
        if rs.is_empty() {
            continue;
        }
        let med = |f: &dyn Fn(&NodeResult) -> f64| median(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
        let b = |f: fn(&PpaEstimate) -> f64| move |r: &NodeResult| r.best.as_ref().map_or(f64::NAN, |b| f(&b.ppa));
        w.write_record([
            s.name().to_string(),
            "median".to_string(),
            csv_f(med(&|r| r.best_score())),
            csv_f(med(&|r| r.feasible_count as f64)),
            csv_f(med(&|r| r.unique_configs as f64)),
            csv_f(med(&b(|p| p.perf_gops))),
            csv_f(med(&b(|p| p.power_mw))),
            csv_f(med(&b(|p| p.area_mm2))),
            csv_f(med(&b(|p| p.tok_s))),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TransformerSpec;
    use crate::procnode::builtin_table;

    fn entry(perf: f64, power: f64, area: f64) -> ParetoEntry {
        let table = builtin_table();
        let cfg = ChipConfig::uniform(1, 1, TccConfig::default(), table[0].f_clk_max);
        let mut ppa = crate::rlenv::tests::ppa(perf, power, area);
        ppa.feasible = true;
        ParetoEntry { episode: 0, cfg, ppa }
    }

    #[test]
    fn archive_basics() {
        let mut a = ParetoArchive::new();
        assert!(a.insert(entry(10.0, 5.0, 5.0)));
        assert!(!a.insert(entry(9.0, 6.0, 5.0)));
        assert_eq!(a.len(), 1);
        assert!(a.insert(entry(12.0, 6.0, 5.0)));
        assert!(a.insert(entry(13.0, 4.0, 4.0)));
        assert_eq!(a.len(), 1);
        assert!(a.is_consistent());
    }

    #[test]
    fn select_final_cases() {
        let hp = PpaWeights::HIGH_PERF;
        assert_eq!(select_final(&[[1.0, 2.0, 3.0]], &hp).unwrap(), Some(0));
        let pts = [[10.0, 5.0, 1.0], [20.0, 9.0, 2.0], [15.0, 1.0, 3.0]];
        let perf_only = PpaWeights {
            perf: 1.0,
            power: 0.0,
            area: 0.0,
        };
        assert_eq!(select_final(&pts, &perf_only).unwrap(), Some(1));
        assert_eq!(select_final(&[], &hp).unwrap(), None);
        let tie = [[10.0, 5.0, 2.0], [10.0, 5.0, 1.0]];
        let power_only = PpaWeights {
            perf: 0.0,
            power: 1.0,
            area: 0.0,
        };
        assert_eq!(select_final(&tie, &power_only).unwrap(), Some(1));
    }

    #[test]
    fn convergence_cases() {
        assert!(convergence_check(&[1.0; 10], 5, 1e-9));
        let improving: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
        assert!(!convergence_check(&improving, 5, 1e-9));
        let mut log = vec![5.0, 4.0, 3.0];
        log.extend([2.0; 10]);
        let onset = 3;
        let first = (1..=log.len()).find(|&t| convergence_check(&log[..t], 4, 1e-9)).unwrap() - 1;
        assert_eq!(first, onset + 4);
    }

    #[test]
    fn grid_respects_budget() {
        let t = builtin_table();
        let g = grid_configs(&t[0], 1 << 20, 50);
        assert_eq!(g.len(), 50);
        for c in &g {
            c.validate(&t[0], Some(1 << 20)).unwrap();
        }
        assert_eq!(grid_configs(&t[0], 1 << 20, 1).len(), 1);
    }

    #[test]
    fn random_search_budget_one() {
        let t = builtin_table();
        let wl = Workload::from_spec(&TransformerSpec::toy()).unwrap();
        let c = Constraints::for_workload(&t, &wl, &EvalParams::default()).unwrap();
        let r = random_search(&t[0], &wl, &c, &RunConfig::new(1, 3)).unwrap();
        assert_eq!(r.log.len(), 1);
        assert_eq!(r.full_evals, 1);
    }

    #[test]
    fn strategy_parse() {
        assert_eq!("grid".parse::<Strategy>().unwrap(), Strategy::Grid);
        assert!("rnd".parse::<Strategy>().is_err());
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, f64::INFINITY, f64::INFINITY]), f64::INFINITY);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
    }
}
