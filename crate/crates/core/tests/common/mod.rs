#![allow(dead_code)]

use meshdse::arch::{Binding, Ceilings, PowerBreakdown, PpaEstimate};
use meshdse::neural::ActionDims;
use meshdse::sac::{Sac, SacConfig, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn ppa(perf: f64, power: f64, area: f64) -> PpaEstimate {
    PpaEstimate {
        node_nm: 7,
        mesh_w: 1,
        mesh_h: 1,
        cores: 1,
        freq_mhz: 1.0,
        power: PowerBreakdown {
            compute: power,
            ..Default::default()
        },
        power_mw: power,
        perf_gops: perf,
        area_mm2: area,
        tok_s: 1.0,
        ceilings: Ceilings {
            compute: 1.0,
            memory: 1.0,
            noc: 1.0,
        },
        binding: Binding::Compute,
        eta_par: 1.0,
        memory_used: 0,
        hazard_score: 0.0,
        kv_spill_bytes: 0,
        cross_bytes_per_token: 0.0,
        placement_ok: true,
        score: 0.0,
        feasible: true,
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between `grad` and central differences of `f`
/// around `x`.
pub fn fd_max_rel_err(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], grad: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), grad.len());
    let mut p = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        p[i] = x[i];
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(fd, grad[i], 1e-3));
    }
    worst
}

/// Small agent: 6-dim state, 3 continuous dims, two 5-way heads.
pub fn small_sac_config(moe: bool) -> SacConfig {
    SacConfig {
        state_dim: 6,
        dims: ActionDims {
            heads: 2,
            choices: 5,
            cont: 3,
        },
        hidden: vec![16, 16],
        batch: 8,
        warmup: 8,
        buffer_capacity: 256,
        target_entropy: -3.0,
        moe,
        ..SacConfig::dse()
    }
}

/// One-state continuous bandit with reward `−(a − 0.3)²`; returns the
/// deterministic policy mean after `steps` interactions.
pub fn bandit_mean(seed: u64, steps: usize) -> f64 {
    let cfg = SacConfig {
        state_dim: 1,
        dims: ActionDims {
            heads: 0,
            choices: 0,
            cont: 1,
        },
        hidden: vec![32, 32],
        target_entropy: -1.0,
        batch: 64,
        warmup: 200,
        buffer_capacity: 10_000,
        eps0: 0.0,
        eps_min: 0.0,
        ..SacConfig::dse()
    };
    let mut r = rng(seed);
    let mut sac = Sac::<f64>::new(cfg, &mut r).unwrap();
    let s = vec![1.0];
    for _ in 0..steps {
        let a = sac.select_action(&s, &mut r);
        let reward = -(a.cont[0] - 0.3).powi(2);
        sac.store(Transition {
            s: s.clone(),
            a: a.cont,
            disc: vec![],
            r: reward,
            s2: s.clone(),
            done: true,
        });
        if sac.ready() {
            sac.update(&mut r);
        }
    }
    sac.deterministic_action(&s).cont[0]
}

pub fn normals(r: &mut impl Rng, n: usize) -> Vec<f64> {
    meshdse::neural::standard_normals(r, n)
}

const FD_STEP: f64 = 1e-5;

/// Actor objective (entropy term, clipped double-Q, discrete heads and, for
/// the mixture policy, the balance loss) against central differences.
pub fn actor_fd(seed: u64, moe: bool, with_disc: bool) -> f64 {
    let mut r = rng(seed);
    let mut sac = Sac::<f64>::new(small_sac_config(moe), &mut r).unwrap();
    sac.log_alpha = uniform(&mut r, -3.0, 0.5);
    let (n, sd, cd, heads) = (4, 6, 3, 2);
    let s = normals(&mut r, n * sd);
    let noise = normals(&mut r, n * cd);
    let chosen: Vec<Vec<usize>> = (0..n).map(|_| (0..heads).map(|_| r.random_range(0..5)).collect()).collect();
    let adv: Vec<f64> = (0..n).map(|_| uniform(&mut r, -1.0, 1.0)).collect();
    let disc = with_disc.then_some((chosen.as_slice(), adv.as_slice()));
    let (_, _, g) = sac.actor_loss_grad(&s, &noise, disc);
    let x = sac.actor.flat_params();
    let mut probe = sac.clone();
    fd_max_rel_err(
        &mut |p| {
            probe.actor.set_flat_params(p);
            probe.actor_loss_grad(&s, &noise, disc).0
        },
        &x,
        &g,
        FD_STEP,
    )
}

/// Both critics' IS-weighted Bellman loss.
pub fn critic_fd(seed: u64) -> f64 {
    let mut r = rng(seed);
    let sac = Sac::<f64>::new(small_sac_config(false), &mut r).unwrap();
    let n = 5;
    let s = normals(&mut r, n * 6);
    let a: Vec<f64> = (0..n * 3).map(|_| uniform(&mut r, -1.0, 1.0)).collect();
    let y = normals(&mut r, n);
    let w: Vec<f64> = (0..n).map(|_| uniform(&mut r, 0.1, 1.0)).collect();
    let (_, g1, g2, _) = sac.critic_loss_grad(&s, &a, &y, &w);
    let mut probe = sac.clone();
    let e1 = fd_max_rel_err(
        &mut |p| {
            probe.q1.params_mut().copy_from_slice(p);
            probe.critic_loss_grad(&s, &a, &y, &w).0
        },
        sac.q1.params(),
        &g1,
        FD_STEP,
    );
    let mut probe = sac.clone();
    let e2 = fd_max_rel_err(
        &mut |p| {
            probe.q2.params_mut().copy_from_slice(p);
            probe.critic_loss_grad(&s, &a, &y, &w).0
        },
        sac.q2.params(),
        &g2,
        FD_STEP,
    );
    e1.max(e2)
}

pub fn world_model_fd(seed: u64) -> f64 {
    use meshdse::neural::Mlp;
    use meshdse::planner::WorldModel;
    let mut r = rng(seed);
    let (sd, ad, n) = (6, 3, 5);
    let wm = WorldModel::from_net(Mlp::<f64>::new(&[sd + ad, 16, 12, sd], &mut r), sd, ad);
    let s = normals(&mut r, n * sd);
    let a = normals(&mut r, n * ad);
    let s2 = normals(&mut r, n * sd);
    let (_, g) = wm.loss_grad(&s, &a, &s2);
    let mut probe = wm.clone();
    fd_max_rel_err(
        &mut |p| {
            probe.net.params_mut().copy_from_slice(p);
            probe.loss_grad(&s, &a, &s2).0
        },
        wm.net.params(),
        &g,
        FD_STEP,
    )
}

pub fn surrogate_fd(seed: u64) -> f64 {
    use meshdse::neural::Mlp;
    use meshdse::surrogate::{SurrogateModel, NODE_ONE_HOT};
    let mut r = rng(seed);
    let (sd, ad, n) = (6, 3, 5);
    let mut sur = SurrogateModel::from_net(Mlp::<f64>::new(&[sd + ad + NODE_ONE_HOT, 16, 12, 3], &mut r), sd, ad);
    sur.head_weights = [uniform(&mut r, 0.2, 2.0), uniform(&mut r, 0.2, 2.0), uniform(&mut r, 0.2, 2.0)];
    let mut x = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..n {
        let mut node = [0.0; NODE_ONE_HOT];
        node[r.random_range(0..NODE_ONE_HOT)] = 1.0;
        x.extend(sur.input(&normals(&mut r, sd), &normals(&mut r, ad), &node));
        targets.push([r.random::<f64>(), r.random::<f64>(), r.random::<f64>()]);
    }
    let (_, g) = sur.loss_grad(&x, &targets);
    let mut probe = sur.clone();
    fd_max_rel_err(
        &mut |p| {
            probe.net.params_mut().copy_from_slice(p);
            probe.loss_grad(&x, &targets).0
        },
        sur.net.params(),
        &g,
        FD_STEP,
    )
}
