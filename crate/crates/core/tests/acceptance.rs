//! Acceptance suite. Every criterion runs in sequence inside one test so the
//! wall-clock figures are not skewed by parallel tests, and prints one
//! PASS/FAIL line on stderr.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use meshdse::analysis::powerlaw_fit;
use meshdse::arch::{
    avg_hops, bisection_bw, dmem_split, evaluate, mem_pressure, Binding, ChipConfig, EvalParams, PpaWeights, TccConfig, Workload,
};
use meshdse::graph::TransformerSpec;
use meshdse::kvcache::{adjusted_bytes_per_token, compaction_factor, kv_bytes_per_token, kv_total, page_count, KvSpec, QuantBits};
use meshdse::neural::{categorical_sample, softmax, tanh_gaussian_log_density};
use meshdse::procnode::{builtin_table, find_node};
use meshdse::rlenv::{bind_wmem, reward, violation_magnitude, Constraints};
use meshdse::sac::{priority_from_td, ReplayBuffer, Transition};
use meshdse::search::{best_is_monotone, median, run_strategy, select_final, write_node_artifacts, ParetoArchive, ParetoEntry, RunConfig, Strategy};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("{:.1}s of {}s", e.as_secs_f64(), limit.as_secs()))
}

fn rel(a: f64, b: f64) -> f64 {
    rel_err(a, b, f64::MIN_POSITIVE)
}

fn kv_arithmetic() -> Outcome {
    let t = Instant::now();
    let spec = KvSpec::new(32, 8, 128, 2, 2048);
    let bt = kv_bytes_per_token(&spec);
    let total = kv_total(bt, 2048);
    let kappa: f64 = compaction_factor(16.0, 8.0, 2048.0, 1024.0);
    let compacted = total as f64 / kappa;
    let q = KvSpec {
        quant_bits: QuantBits::B8,
        windows: Some(vec![1024; 32]),
        ..spec.clone()
    };
    let ok = bt == 131_072
        && total == 256 << 20
        && kappa == 4.0
        && compacted == (64u64 << 20) as f64
        && q.compaction() == 4.0
        && q.compacted_total() == (64 << 20) + q.scale_overhead_bytes();
    let (fast, time) = within(t, Duration::from_secs(1));
    outcome(ok && fast, format!("{bt} B/token, {total} B total, kappa {kappa}, {compacted} B compacted; {time}"))
}

fn formula_oracles() -> Outcome {
    let t = Instant::now();
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (m, n) = (r.random_range(1..=64u32), r.random_range(1..=64u32));
        let hops_oracle = (m as f64 + n as f64) / 3.0;
        worst = worst.max(rel(avg_hops(m as f64, n as f64), hops_oracle));

        let (w, f) = (r.random_range(64..=8192u32) as f64, uniform(&mut r, 1e8, 4e9));
        let mut vertical = 0u32;
        let mut horizontal = 0u32;
        for y in 0..n {
            for x in 0..m {
                if x + 1 < m && x + 1 == m / 2 {
                    vertical += 1;
                }
                if y + 1 < n && y + 1 == n / 2 {
                    horizontal += 1;
                }
            }
        }
        let cut = match (m > 1, n > 1) {
            (true, true) => vertical.min(horizontal),
            (true, false) => vertical,
            (false, true) => horizontal,
            (false, false) => 1,
        };
        worst = worst.max(rel(bisection_bw(m as f64, n as f64, w, f), cut as f64 * w * f));

        let d = uniform(&mut r, 1e3, 1e7);
        let fi = uniform(&mut r, 0.0, 0.45);
        let fo = uniform(&mut r, 0.0, 0.45);
        let (i, o, s) = dmem_split(d, fi, fo).unwrap();
        worst = worst.max(rel(i, d * fi)).max(rel(o, d * fo)).max(rel(s, d * (1.0 - fi - fo)));

        let (wu, wa, du, da) = (uniform(&mut r, 0.0, 1e6), uniform(&mut r, 1.0, 1e6), uniform(&mut r, 0.0, 1e6), uniform(&mut r, 1.0, 1e6));
        worst = worst.max(rel(mem_pressure(wu, wa, du, da), wu / wa + 0.5 * du / da));

        let (total, page) = (r.random_range(0..2_000_000u64), r.random_range(2_000..=1_000_000u64));
        let mut pages = 0u64;
        let mut left = total as i64;
        while left > 0 {
            left -= page as i64;
            pages += 1;
        }
        if page_count(total, page).unwrap() != pages {
            worst = f64::INFINITY;
        }

        let (b, share, k) = (uniform(&mut r, 1.0, 1e9), uniform(&mut r, 0.0, 1.0), uniform(&mut r, 1.0, 64.0));
        let kv = b * share;
        worst = worst.max(rel(adjusted_bytes_per_token(b, kv, k), b - kv + kv / k));
    }
    let (fast, time) = within(t, Duration::from_secs(10));
    outcome(worst <= 1e-12 && fast, format!("max relative error {worst:.2e} over 1000 draws; {time}"))
}

fn reward_identities() -> Outcome {
    let t = Instant::now();
    let mut r = rng(7);
    let c = Constraints::new(100.0, 10.0, 1e6, 50.0, 10.0);
    let (mut sum_err, mut scale_err, mut cubic_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let mut e = ppa(uniform(&mut r, 0.0, 50.0), uniform(&mut r, 0.0, 200.0), uniform(&mut r, 0.0, 10.0));
        e.hazard_score = uniform(&mut r, 0.0, 1.0);
        e.memory_used = r.random_range(0..1_500_000);
        let w = PpaWeights::new(uniform(&mut r, 0.05, 1.0), uniform(&mut r, 0.05, 1.0), uniform(&mut r, 0.05, 1.0));
        let cw = c.clone().with_weights(w);
        let p = reward(&e, &cw).unwrap();
        let parts = p.perf + p.power + p.area + p.feasible_bonus + p.violation + p.memory + p.hazard;
        sum_err = sum_err.max((parts - p.total).abs());
        let scaled = reward(&e, &c.clone().with_weights(w.scaled(uniform(&mut r, 0.01, 100.0)))).unwrap();
        scale_err = scale_err.max((scaled.total - p.total).abs());
        let v = (e.power_mw - 100.0).max(0.0) / 100.0;
        assert_eq!(violation_magnitude(e.power_mw, 100.0), v);
        cubic_err = cubic_err.max((p.violation + c.s_mag * (1.0 + v) * v * v).abs());
        if v <= 1.0 {
            lo = lo.min(p.total);
            hi = hi.max(p.total);
        }
    }
    let ok = sum_err <= 1e-12 && scale_err <= 1e-12 && cubic_err <= 1e-12 && lo >= -5.0 && hi <= 3.0;
    let (fast, time) = within(t, Duration::from_secs(5));
    outcome(
        ok && fast,
        format!("sum {sum_err:.1e}, scale {scale_err:.1e}, cubic {cubic_err:.1e}, range [{lo:.3}, {hi:.3}]; {time}"),
    )
}

fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let mut worst = [0.0f64; 5];
    for seed in 0..20 {
        worst[0] = worst[0].max(actor_fd(seed, false, true));
        worst[1] = worst[1].max(actor_fd(seed, true, true));
        worst[2] = worst[2].max(critic_fd(seed));
        worst[3] = worst[3].max(world_model_fd(seed));
        worst[4] = worst[4].max(surrogate_fd(seed));
    }
    let ok = worst.iter().all(|&e| e < 1e-4);
    let (fast, time) = within(t, Duration::from_secs(60));
    outcome(
        ok && fast,
        format!(
            "max rel error actor {:.1e}, mixture actor {:.1e}, critics {:.1e}, world model {:.1e}, surrogate {:.1e} (20 seeds); {time}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

/// Composite Simpson rule on `(−1, 1)` with the endpoints dropped.
fn tanh_density_mass(mean: f64, log_std: f64) -> f64 {
    let n = 400_000;
    let (a, b) = (-1.0 + 1e-12, 1.0 - 1e-12);
    let h = (b - a) / n as f64;
    let f = |x: f64| tanh_gaussian_log_density(x, mean, log_std).exp();
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn distributions() -> Outcome {
    let t = Instant::now();
    let masses: Vec<f64> = [(0.0, 0.0), (0.7, -0.5), (-1.0, 0.3), (0.2, -1.5)]
        .iter()
        .map(|&(m, s)| tanh_density_mass(m, s))
        .collect();
    let density_ok = masses.iter().all(|m| (m - 1.0).abs() <= 1e-3);

    let draws = 100_000usize;
    let within_3sigma = |counts: &[usize], p: &[f64]| {
        counts.iter().zip(p).all(|(&c, &pi)| {
            let mu = draws as f64 * pi;
            (c as f64 - mu).abs() <= 3.0 * (mu * (1.0 - pi)).sqrt()
        })
    };

    let mut r = rng(99);
    let logits = [0.3, -1.2, 2.0, 0.0, 0.7];
    let p = softmax(&logits);
    let mut counts = vec![0usize; logits.len()];
    for _ in 0..draws {
        counts[categorical_sample(&logits, r.random::<f64>()).0] += 1;
    }
    let cat_ok = within_3sigma(&counts, &p);

    let mut buf = ReplayBuffer::<f64>::new(16, 0.6, 0.4, 0.0);
    let td = [0.1, 2.0, 0.5, 0.0, 3.0, 1.0, 0.05, 0.7];
    for _ in 0..td.len() {
        buf.store(Transition {
            s: vec![0.0],
            a: vec![0.0],
            disc: vec![],
            r: 0.0,
            s2: vec![0.0],
            done: true,
        });
    }
    let idx: Vec<usize> = (0..td.len()).collect();
    buf.update_priorities(&idx, &td);
    let pr: Vec<f64> = td.iter().map(|&d| priority_from_td(d, 0.6)).collect();
    let total: f64 = pr.iter().sum();
    let want: Vec<f64> = pr.iter().map(|x| x / total).collect();
    let mut pc = vec![0usize; td.len()];
    for _ in 0..draws / 1000 {
        for i in buf.sample(1000, &mut r).indices {
            pc[i] += 1;
        }
    }
    let per_ok = within_3sigma(&pc, &want);
    let (fast, time) = within(t, Duration::from_secs(30));
    outcome(
        density_ok && cat_ok && per_ok && fast,
        format!("density masses {masses:.6?}, categorical within 3σ: {cat_ok}, PER within 3σ: {per_ok}; {time}"),
    )
}

fn bandit() -> Outcome {
    let t = Instant::now();
    let means: Vec<f64> = (0..5).map(|s| bandit_mean(s, 5000)).collect();
    let hits = means.iter().filter(|m| (*m - 0.3).abs() <= 0.05).count();
    let (fast, time) = within(t, Duration::from_secs(120));
    outcome(hits >= 4 && fast, format!("policy means {means:.3?}, {hits}/5 within 0.05 of 0.3; {time}"))
}

fn brute_front(pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let dom = |a: &[f64; 3], b: &[f64; 3]| {
        a[0] >= b[0] && a[1] <= b[1] && a[2] <= b[2] && (a[0] > b[0] || a[1] < b[1] || a[2] < b[2])
    };
    let mut out: Vec<[f64; 3]> = Vec::new();
    for (i, p) in pts.iter().enumerate() {
        let dominated = pts.iter().enumerate().any(|(j, q)| j != i && dom(q, p));
        if !dominated && !out.contains(p) {
            out.push(*p);
        }
    }
    out
}

fn brute_select(pts: &[[f64; 3]], w: &PpaWeights) -> usize {
    let s = w.perf + w.power + w.area;
    let (a, b, g) = (w.perf / s, w.power / s, w.area / s);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let n = |k: usize, v: f64| if hi[k] > lo[k] { (v - lo[k]) / (hi[k] - lo[k]) } else { 0.0 };
    let score = |p: &[f64; 3]| a * (1.0 - n(0, p[0])) + b * n(1, p[1]) + g * n(2, p[2]);
    let mut best = 0;
    for i in 1..pts.len() {
        let (si, sb) = (score(&pts[i]), score(&pts[best]));
        if si < sb || (si == sb && (pts[i][1], pts[i][2]) < (pts[best][1], pts[best][2])) {
            best = i;
        }
    }
    best
}

fn pareto_oracle() -> Outcome {
    let t = Instant::now();
    let mut r = rng(5);
    let cfg = ChipConfig::uniform(1, 1, TccConfig::default(), 1e9);
    let (mut archive_ok, mut select_ok) = (true, true);
    for trial in 0..100 {
        // coarse grid so ties and duplicates occur
        let pts: Vec<[f64; 3]> = (0..100)
            .map(|_| {
                if trial % 2 == 0 {
                    [r.random_range(0..8) as f64, r.random_range(0..8) as f64, r.random_range(0..8) as f64]
                } else {
                    [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()]
                }
            })
            .collect();
        let mut arch = ParetoArchive::new();
        for (i, p) in pts.iter().enumerate() {
            arch.insert(ParetoEntry {
                episode: i,
                cfg: cfg.clone(),
                ppa: ppa(p[0], p[1], p[2]),
            });
        }
        let mut got: Vec<[f64; 3]> = arch.entries().iter().map(|e| e.objectives()).collect();
        let mut want = brute_front(&pts);
        let key = |a: &[f64; 3], b: &[f64; 3]| a.partial_cmp(b).unwrap();
        got.sort_by(key);
        want.sort_by(key);
        archive_ok &= got == want;
        for w in [PpaWeights::HIGH_PERF, PpaWeights::LOW_POWER, PpaWeights::new(r.random(), r.random(), r.random())] {
            select_ok &= select_final(&pts, &w).unwrap() == Some(brute_select(&pts, &w));
            select_ok &= select_final(&want, &w).unwrap() == Some(brute_select(&want, &w));
        }
    }
    let (fast, time) = within(t, Duration::from_secs(10));
    outcome(archive_ok && select_ok && fast, format!("archive == brute force: {archive_ok}, select_final == exhaustive argmin: {select_ok}; {time}"))
}

struct SearchRuns {
    sac: Vec<meshdse::search::NodeResult>,
    random: Vec<meshdse::search::NodeResult>,
    elapsed: Duration,
}

const SEARCH_NODE: u32 = 7;

fn search_runs() -> SearchRuns {
    let t = Instant::now();
    let table = builtin_table();
    let node = find_node(&table, SEARCH_NODE).unwrap();
    let wl = Workload::from_spec(&TransformerSpec::toy()).unwrap();
    let c = Constraints::for_workload(&table, &wl, &EvalParams::default()).unwrap();
    let runs = |s: Strategy| (0..5).map(|seed| run_strategy(s, node, &wl, &c, &RunConfig::new(500, seed)).unwrap()).collect();
    let sac = runs(Strategy::Sac);
    let random = runs(Strategy::Random);
    SearchRuns {
        sac,
        random,
        elapsed: t.elapsed(),
    }
}

fn strategy_ordering(runs: &SearchRuns) -> Outcome {
    let stat = |v: &[meshdse::search::NodeResult]| {
        let best: Vec<f64> = v.iter().map(|r| r.best_score()).collect();
        let feas: Vec<f64> = v.iter().map(|r| r.feasible_count as f64).collect();
        (median(&best), median(&feas))
    };
    let (sb, sf) = stat(&runs.sac);
    let (rb, rf) = stat(&runs.random);
    let fast = runs.elapsed < Duration::from_secs(15 * 60);
    outcome(
        sb <= rb && sf > rf && fast,
        format!(
            "toy at {SEARCH_NODE} nm, budget 500, 5 seeds: median best SAC {sb:.4} vs random {rb:.4}; median feasible SAC {sf} vs random {rf}; {:.1}s of 900s",
            runs.elapsed.as_secs_f64()
        ),
    )
}

fn monotone_and_deterministic(runs: &SearchRuns) -> Outcome {
    let monotone = runs.sac.iter().chain(&runs.random).all(|r| best_is_monotone(&r.log));
    let table = builtin_table();
    let node = find_node(&table, SEARCH_NODE).unwrap();
    let wl = Workload::from_spec(&TransformerSpec::toy()).unwrap();
    let c = Constraints::for_workload(&table, &wl, &EvalParams::default()).unwrap();
    let again = run_strategy(Strategy::Sac, node, &wl, &c, &RunConfig::new(500, 0)).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    write_node_artifacts(dirs[0].path(), &runs.sac[0], &wl, &EvalParams::default()).unwrap();
    write_node_artifacts(dirs[1].path(), &again, &wl, &EvalParams::default()).unwrap();
    let files = |d: &std::path::Path| {
        let nd = d.join(format!("{SEARCH_NODE}nm"));
        let mut names: Vec<_> = std::fs::read_dir(&nd).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        names.sort();
        names.iter().map(|p| (p.file_name().unwrap().to_owned(), std::fs::read(p).unwrap())).collect::<Vec<_>>()
    };
    let (a, b) = (files(dirs[0].path()), files(dirs[1].path()));
    let identical = !a.is_empty() && a == b;
    outcome(monotone && identical, format!("best-so-far monotone in all 10 runs: {monotone}; rerun of SAC seed 0 byte-identical over {} files: {identical}", a.len()))
}

fn powerlaw() -> Outcome {
    let t = Instant::now();
    let x = [3.0f64, 5.0, 7.0, 10.0, 14.0, 22.0, 28.0];
    let mut r = rng(13);
    let mut clean_err: f64 = 0.0;
    let mut noisy_err: f64 = 0.0;
    for _ in 0..100 {
        let (k, c) = (uniform(&mut r, -3.0, 3.0), uniform(&mut r, 0.01, 1e4));
        let y: Vec<f64> = x.iter().map(|v| c * v.powf(k)).collect();
        let f = powerlaw_fit(&x, &y).unwrap();
        clean_err = clean_err.max((f.k - k).abs()).max(rel(f.c, c)).max((f.r2 - 1.0).abs());

        let yn: Vec<f64> = y.iter().map(|v| v * uniform(&mut r, -0.3, 0.3).exp()).collect();
        let f = powerlaw_fit(&x, &yn).unwrap();
        // normal equations of ln y = ln c + k ln x
        let (mut s1, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (xi, yi) in x.iter().zip(&yn) {
            let (lx, ly) = (xi.ln(), yi.ln());
            s1 += 1.0;
            sx += lx;
            sy += ly;
            sxx += lx * lx;
            sxy += lx * ly;
        }
        let det = s1 * sxx - sx * sx;
        let k_ols = (s1 * sxy - sx * sy) / det;
        let lnc_ols = (sxx * sy - sx * sxy) / det;
        let mean = sy / s1;
        let (mut res, mut tot) = (0.0, 0.0);
        for (xi, yi) in x.iter().zip(&yn) {
            res += (yi.ln() - lnc_ols - k_ols * xi.ln()).powi(2);
            tot += (yi.ln() - mean).powi(2);
        }
        noisy_err = noisy_err.max((f.k - k_ols).abs()).max(rel(f.c, lnc_ols.exp())).max((f.r2 - (1.0 - res / tot)).abs());
    }
    let (fast, time) = within(t, Duration::from_secs(1));
    outcome(clean_err <= 1e-10 && noisy_err <= 1e-10 && fast, format!("clean max error {clean_err:.1e}, OLS agreement {noisy_err:.1e}; {time}"))
}

/// For each node, the largest square mesh of default tiles at full clock
/// that meets the default budgets of the llama8b-toy preset.
fn structural_scaling() -> Outcome {
    let table = builtin_table();
    let wl = Workload::from_spec(&TransformerSpec::preset("llama8b-toy").unwrap()).unwrap();
    let params = EvalParams::default();
    let c = Constraints::for_workload(&table, &wl, &params).unwrap();
    let mut cores = Vec::new();
    let mut compute = true;
    for node in &table {
        let mut best = None;
        for m in 1..=64u32 {
            let cfg = bind_wmem(ChipConfig::uniform(m, m, TccConfig::default(), node.f_clk_max), wl.w_total());
            if let Ok((e, _)) = evaluate(&cfg, node, &wl, &params, &c) {
                if c.feasible(&e) {
                    best = Some(e);
                }
            }
        }
        match best {
            Some(e) => {
                compute &= e.binding == Binding::Compute;
                cores.push(e.cores);
            }
            None => {
                compute = false;
                cores.push(0);
            }
        }
    }
    let non_increasing = cores.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        compute && non_increasing && cores[0] > 0,
        format!("cores 3→28 nm {cores:?}, compute-bound everywhere: {compute}"),
    )
}

#[test]
fn acceptance_criteria() {
    let mut failed = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let line = format!("[{tag}] criterion {n:>2} {name}: {}\n", o.detail);
        std::io::stderr().write_all(line.as_bytes()).unwrap();
        if !o.pass {
            failed.push(n);
        }
    };
    report(1, "kv-cache arithmetic", kv_arithmetic());
    report(2, "analytical-model oracles", formula_oracles());
    report(3, "reward correctness", reward_identities());
    report(4, "gradient checks", gradient_checks());
    report(5, "distributional correctness", distributions());
    report(6, "bandit", bandit());
    report(7, "pareto oracle", pareto_oracle());
    let runs = search_runs();
    report(8, "search-strategy ordering", strategy_ordering(&runs));
    report(9, "monotone best and determinism", monotone_and_deterministic(&runs));
    report(10, "power-law fitter", powerlaw());
    report(11, "structural scaling", structural_scaling());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
