//! Operator partitioning across tiles, communication-aware placement, load
//! statistics and per-tile heterogeneous derivation.

use serde::{Deserialize, Serialize};

use crate::arch::{ChipConfig, PartitionKnobs, TccConfig, BANK_KB};
use crate::error::{Error, Result};
use crate::graph::{OpKind, OperatorGraph};
use crate::scalar::Scalar;

/// Base weights of the placement score terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementWeights {
    pub load: f64,
    pub hop: f64,
    pub imbalance: f64,
    pub centrality: f64,
}

impl Default for PlacementWeights {
    fn default() -> Self {
        PlacementWeights {
            load: 1.0,
            hop: 0.5,
            imbalance: 0.5,
            centrality: 0.25,
        }
    }
}

impl PlacementWeights {
    /// Base weights scaled by the configuration's knobs.
    pub fn scaled(&self, k: &PartitionKnobs) -> Self {
        PlacementWeights {
            load: self.load * k.load_weight_scale,
            hop: self.hop * k.hop_weight_scale,
            imbalance: self.imbalance * k.imbalance_weight_scale,
            centrality: self.centrality * k.centrality_weight_scale,
        }
    }
}

/// `clip(base + delta, 0, 1)`.
pub fn partition_ratio<T: Scalar>(base: T, delta: T) -> T {
    (base + delta).max(T::zero()).min(T::one())
}

/// `⌈ρ · N_total⌉`, at least 1 and at most `n_total`.
pub fn target_cores(rho: f64, n_total: usize) -> usize {
    // absorb representation error such as 0.3 · 10 = 3.0000000000000004
    let k = (rho * n_total as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n_total.max(1))
}

/// Partition ratio applied to an operator kind; kinds other than MatMul
/// and Conv use the general ratio.
pub fn rho_for(kind: OpKind, knobs: &PartitionKnobs) -> f64 {
    match kind {
        OpKind::MatMul => knobs.rho_matmul,
        OpKind::Conv => knobs.rho_conv,
        _ => knobs.rho_general,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    /// Variance of `load / mean`.
    pub variance: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// `mean / max`; 1 when every tile is idle.
    pub balance: f64,
}

impl LoadStats {
    /// `max / min`; `None` when some tile is idle.
    pub fn max_min_ratio(&self) -> Option<f64> {
        (self.min > 0.0).then(|| self.max / self.min)
    }
}

pub fn load_stats(loads: &[f64]) -> LoadStats {
    let n = loads.len().max(1) as f64;
    let mean = loads.iter().sum::<f64>() / n;
    let min = loads.iter().copied().fold(f64::INFINITY, f64::min);
    let max = loads.iter().copied().fold(0.0, f64::max);
    let min = if min.is_finite() { min } else { 0.0 };
    if max <= 0.0 {
        return LoadStats {
            variance: 0.0,
            mean,
            min,
            max,
            balance: 1.0,
        };
    }
    let variance = loads.iter().map(|l| (l / mean - 1.0).powi(2)).sum::<f64>() / n;
    LoadStats {
        variance,
        mean,
        min,
        max,
        balance: mean / max,
    }
}

/// Dependence-hazard proxies derived from a placement, all in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HazardStats {
    /// Share of producer-consumer traffic resolved on the same tile.
    pub raw: f64,
    /// Excess fan-in: `Σ max(0, in−1) / Σ in`.
    pub war: f64,
    /// Excess fan-out: `Σ max(0, out−1) / Σ out`.
    pub waw: f64,
    pub global: f64,
    pub tile_max: f64,
    pub tile_mean: f64,
    pub tile_std: f64,
    /// Fraction of tiles with density above 0.5.
    pub tile_hot: f64,
}

impl HazardStats {
    /// Aggregate hazard score used by the reward.
    pub fn total(&self) -> f64 {
        self.global
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    /// Per node index: `(tile, fraction)` pairs summing to 1.
    pub assignments: Vec<Vec<(usize, f64)>>,
    /// FLOPs per tile.
    pub tile_load: Vec<f64>,
    pub tile_wmem_used: Vec<u64>,
    /// Per-token activation working set per tile, bytes.
    pub tile_dmem_used: Vec<f64>,
    pub stats: LoadStats,
    pub hazards: HazardStats,
    pub cross_bytes_per_token: f64,
    /// True when the greedy placement failed and ops were spread evenly.
    pub fallback: bool,
}

impl Placement {
    /// Tiles with non-zero load.
    pub fn active_tiles(&self) -> Vec<usize> {
        (0..self.tile_load.len()).filter(|&t| self.tile_load[t] > 0.0).collect()
    }
}

fn manhattan(cfg_w: u32, a: usize, b: usize) -> f64 {
    let (ax, ay) = (a as u32 % cfg_w, a as u32 / cfg_w);
    let (bx, by) = (b as u32 % cfg_w, b as u32 / cfg_w);
    (ax.abs_diff(bx) + ay.abs_diff(by)) as f64
}

/// Inputs of one placement-score evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ScoreInputs<'a> {
    pub mesh_w: u32,
    pub mesh_h: u32,
    pub loads: &'a [f64],
    /// FLOPs the candidate tile would receive.
    pub share_flops: f64,
    /// Total FLOPs added by this operator across all its tiles.
    pub added_flops: f64,
    /// `(tile, weight)` of producer fragments.
    pub producers: &'a [(usize, f64)],
}

/// Lower is better: weighted load, hop distance to producers, imbalance and
/// distance from the mesh center.
pub fn placement_score(tile: usize, inp: &ScoreInputs<'_>, w: &PlacementWeights) -> f64 {
    let total: f64 = inp.loads.iter().sum();
    let n = inp.loads.len() as f64;
    let load_norm = if total > 0.0 { inp.loads[tile] / total } else { 0.0 };

    let pw: f64 = inp.producers.iter().map(|p| p.1).sum();
    let hops = if pw > 0.0 {
        inp.producers
            .iter()
            .map(|&(t, f)| f * manhattan(inp.mesh_w, tile, t))
            .sum::<f64>()
            / pw
    } else {
        0.0
    };

    let total_after = total + inp.added_flops;
    let imbalance = if total_after > 0.0 {
        ((inp.loads[tile] + inp.share_flops - total_after / n).max(0.0)) / total_after
    } else {
        0.0
    };

    let cx = (inp.mesh_w as f64 - 1.0) / 2.0;
    let cy = (inp.mesh_h as f64 - 1.0) / 2.0;
    let centrality = if cx + cy > 0.0 {
        let x = (tile as u32 % inp.mesh_w) as f64;
        let y = (tile as u32 / inp.mesh_w) as f64;
        ((x - cx).abs() + (y - cy).abs()) / (cx + cy)
    } else {
        0.0
    };

    w.load * load_norm + w.hop * hops + w.imbalance * imbalance + w.centrality * centrality
}

/// Greedy communication-aware placement in topological order.
pub fn place(g: &OperatorGraph, cfg: &ChipConfig, weights: &PlacementWeights) -> Result<Placement> {
    let n_tiles = cfg.n_cores();
    let w = weights.scaled(&cfg.knobs);
    let order = g.topo_order()?;
    let preds = g.predecessors();
    let mut loads = vec![0.0; n_tiles];
    let mut wmem_used = vec![0u64; n_tiles];
    let mut assignments: Vec<Vec<(usize, f64)>> = vec![Vec::new(); g.nodes().len()];
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(n_tiles);

    for &i in &order {
        let node = &g.nodes()[i];
        let mut k = target_cores(rho_for(node.kind, &cfg.knobs), n_tiles);
        let producers: Vec<(usize, f64)> = preds[i]
            .iter()
            .flat_map(|&p| assignments[p].iter().copied())
            .collect();

        let chosen = loop {
            let share_bytes = node.weight_bytes.div_ceil(k as u64);
            let inp = ScoreInputs {
                mesh_w: cfg.mesh_w,
                mesh_h: cfg.mesh_h,
                loads: &loads,
                share_flops: node.flops as f64 / k as f64,
                added_flops: node.flops as f64,
                producers: &producers,
            };
            scored.clear();
            for t in 0..n_tiles {
                if cfg.tiles[t].wmem_bytes() - wmem_used[t] >= share_bytes {
                    scored.push((placement_score(t, &inp, &w), t));
                }
            }
            if scored.is_empty() {
                return Err(Error::InfeasiblePlacement {
                    op: node.id,
                    weight_bytes: node.weight_bytes,
                });
            }
            if scored.len() >= k {
                scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                break scored[..k].iter().map(|s| s.1).collect::<Vec<_>>();
            }
            k = scored.len();
        };

        let frac = 1.0 / chosen.len() as f64;
        let share_bytes = node.weight_bytes.div_ceil(chosen.len() as u64);
        let mut remaining = node.weight_bytes;
        for &t in &chosen {
            loads[t] += node.flops as f64 * frac;
            let b = share_bytes.min(remaining);
            wmem_used[t] += b;
            remaining -= b;
            assignments[i].push((t, frac));
        }
    }
    Ok(finish(g, cfg, assignments, loads, wmem_used, false))
}

/// Every op split evenly over all tiles; used when greedy placement fails.
pub fn place_spread(g: &OperatorGraph, cfg: &ChipConfig) -> Placement {
    let n = cfg.n_cores();
    let frac = 1.0 / n as f64;
    let mut loads = vec![0.0; n];
    let mut wmem_used = vec![0u64; n];
    let mut assignments = Vec::with_capacity(g.nodes().len());
    for node in g.nodes() {
        let share = node.weight_bytes.div_ceil(n as u64);
        let mut remaining = node.weight_bytes;
        for t in 0..n {
            loads[t] += node.flops as f64 * frac;
            let b = share.min(remaining);
            wmem_used[t] += b;
            remaining -= b;
        }
        assignments.push((0..n).map(|t| (t, frac)).collect());
    }
    finish(g, cfg, assignments, loads, wmem_used, true)
}

/// Placement with greedy-then-spread fallback.
pub fn place_or_spread(g: &OperatorGraph, cfg: &ChipConfig, weights: &PlacementWeights) -> Placement {
    match place(g, cfg, weights) {
        Ok(p) => p,
        Err(_) => place_spread(g, cfg),
    }
}

fn overlap(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let mut s = 0.0;
    for &(ta, fa) in a {
        for &(tb, fb) in b {
            if ta == tb {
                s += fa * fb;
            }
        }
    }
    s
}

fn finish(
    g: &OperatorGraph,
    cfg: &ChipConfig,
    assignments: Vec<Vec<(usize, f64)>>,
    loads: Vec<f64>,
    wmem_used: Vec<u64>,
    fallback: bool,
) -> Placement {
    let n_tiles = cfg.n_cores();
    let k = &cfg.knobs;
    let seq = sequence_length(g);
    let stream = k.stream_in + k.stream_out;

    let mut dmem_used = vec![0.0; n_tiles];
    for (i, node) in g.nodes().iter().enumerate() {
        let act = (node.input_bytes + node.output_bytes) as f64 / seq;
        for &(t, f) in &assignments[i] {
            dmem_used[t] += f * act * (1.0 - 0.25 * stream);
        }
    }

    let mut cross = 0.0;
    let mut intra_total = 0.0;
    let mut tile_intra = vec![0.0; n_tiles];
    let mut tile_frags = vec![0.0; n_tiles];
    for a in &assignments {
        for &(t, _) in a {
            tile_frags[t] += 1.0;
        }
    }
    for e in g.edges() {
        let (s, d) = (g.index_of(e.src).unwrap(), g.index_of(e.dst).unwrap());
        let ov = overlap(&assignments[s], &assignments[d]);
        intra_total += ov;
        cross += e.bytes as f64 * (1.0 - ov) * (1.0 + 0.125 * stream);
        for &(ta, fa) in &assignments[s] {
            for &(tb, fb) in &assignments[d] {
                if ta == tb {
                    tile_intra[ta] += fa * fb;
                }
            }
        }
    }
    for (i, node) in g.nodes().iter().enumerate() {
        let parts = assignments[i].len();
        if parts > 1 {
            let split = 1.0 - 1.0 / parts as f64;
            cross += node.output_bytes as f64 * split * k.sub_matmul * (1.0 - 0.5 * k.allreduce_frac);
        }
    }

    let n_edges = g.edges().len();
    let mut indeg = vec![0usize; g.nodes().len()];
    let mut outdeg = vec![0usize; g.nodes().len()];
    for e in g.edges() {
        indeg[g.index_of(e.dst).unwrap()] += 1;
        outdeg[g.index_of(e.src).unwrap()] += 1;
    }
    let excess = |d: &[usize]| {
        let sum: usize = d.iter().sum();
        if sum == 0 {
            0.0
        } else {
            d.iter().map(|&x| x.saturating_sub(1)).sum::<usize>() as f64 / sum as f64
        }
    };
    let raw = if n_edges > 0 { intra_total / n_edges as f64 } else { 0.0 };
    let war = excess(&indeg);
    let waw = excess(&outdeg);
    let density: Vec<f64> = (0..n_tiles)
        .map(|t| {
            if tile_frags[t] > 0.0 {
                (tile_intra[t] / tile_frags[t]).min(1.0)
            } else {
                0.0
            }
        })
        .collect();
    let nt = n_tiles.max(1) as f64;
    let tile_mean = density.iter().sum::<f64>() / nt;
    let tile_std = (density.iter().map(|d| (d - tile_mean).powi(2)).sum::<f64>() / nt).sqrt();
    let hazards = HazardStats {
        raw,
        war,
        waw,
        global: (raw + war + waw) / 3.0,
        tile_max: density.iter().copied().fold(0.0, f64::max),
        tile_mean,
        tile_std,
        tile_hot: density.iter().filter(|&&d| d > 0.5).count() as f64 / nt,
    };

    Placement {
        stats: load_stats(&loads),
        assignments,
        tile_load: loads,
        tile_wmem_used: wmem_used,
        tile_dmem_used: dmem_used,
        hazards,
        cross_bytes_per_token: cross / seq,
        fallback,
    }
}

/// Tokens processed by a graph: the int32 token input of its Embed node,
/// else 1.
pub fn sequence_length(g: &OperatorGraph) -> f64 {
    g.nodes()
        .iter()
        .find(|n| n.kind == OpKind::Embed && n.input_bytes > 0)
        .map(|n| (n.input_bytes / 4).max(1) as f64)
        .unwrap_or(1.0)
}

/// Parallel efficiency `balance · (1 − 0.02·h̄)`, clamped to `[0.1, 1]`.
pub fn eta_par(balance: f64, avg_hops: f64) -> f64 {
    (balance * (1.0 - 0.02 * avg_hops)).clamp(0.1, 1.0)
}

fn round_bank_up(bytes: u64) -> u32 {
    let kb = bytes.div_ceil(1024) as u32;
    kb.div_ceil(BANK_KB) * BANK_KB
}

fn nearest_pow2(v: f64, lo: u32, hi: u32) -> u32 {
    if v <= lo as f64 {
        return lo;
    }
    let p = 1u32 << (v.log2().round().clamp(0.0, 31.0) as u32);
    p.clamp(lo, hi)
}

/// Per-tile values scaled by each tile's load relative to the mean, on top
/// of the configuration's mean tile. WMEM follows the tile's weight bytes
/// with a 256 KB floor; STANUM, ports and the flit width stay uniform.
pub fn derive_heterogeneous(cfg: &ChipConfig, p: &Placement) -> ChipConfig {
    let base = cfg.mean_tile();
    let mean_load = p.stats.mean;
    let n = p.tile_dmem_used.len().max(1) as f64;
    let mean_dmem = p.tile_dmem_used.iter().sum::<f64>() / n;
    let mut out = cfg.clone();
    for (t, tile) in out.tiles.iter_mut().enumerate() {
        let r = if mean_load > 0.0 { p.tile_load[t] / mean_load } else { 1.0 };
        let rd = if mean_dmem > 0.0 { p.tile_dmem_used[t] / mean_dmem } else { 1.0 };
        let scale = |v: u32, (lo, hi): (u32, u32), f: f64| ((v as f64 * f).round() as u32).clamp(lo, hi);
        let dmem = (((base.dmem_kb as f64 * rd) / BANK_KB as f64).round() as u32 * BANK_KB)
            .clamp(TccConfig::DMEM_KB.0, TccConfig::DMEM_KB.1);
        *tile = TccConfig {
            fetch: scale(base.fetch, TccConfig::FETCH, r),
            vlen_bits: nearest_pow2(base.vlen_bits as f64 * r, TccConfig::VLEN.0, TccConfig::VLEN.1),
            dmem_kb: dmem,
            imem_kb: scale(base.imem_kb, TccConfig::IMEM_KB, r),
            wmem_kb: round_bank_up(p.tile_wmem_used[t]).max(TccConfig::WMEM_KB.0),
            ..base
        };
    }
    out
}

/// `(max − min) / max` of a per-tile field.
pub fn variation(values: &[u32]) -> f64 {
    let max = values.iter().copied().max().unwrap_or(0);
    let min = values.iter().copied().min().unwrap_or(0);
    if max == 0 {
        0.0
    } else {
        (max - min) as f64 / max as f64
    }
}

/// Gini coefficient from the sorted Lorenz curve.
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len();
    let total: f64 = values.iter().sum();
    if n == 0 || total <= 0.0 {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let weighted: f64 = v.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x).sum();
    2.0 * weighted / (n as f64 * total) - (n as f64 + 1.0) / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub rx: u32,
    pub ry: u32,
    pub tiles: usize,
    pub wmem_mean_kb: f64,
    pub wmem_std_kb: f64,
    pub dflit_mean: f64,
    pub dflit_std: f64,
    pub fetch_mean: f64,
    pub fetch_std: f64,
    pub load_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub regions: Vec<RegionSummary>,
    /// `(wmem_kb, tile count)` in ascending size.
    pub wmem_histogram: Vec<(u32, usize)>,
    /// `(wmem_kb, cumulative fraction)`.
    pub wmem_cdf: Vec<(u32, f64)>,
    pub gini: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Statistics over a 3×3 partition of the mesh into regions.
pub fn region_stats(cfg: &ChipConfig, p: &Placement) -> RegionStats {
    let band = |i: u32, len: u32| (i * 3 / len).min(2);
    let total_load: f64 = p.tile_load.iter().sum();
    let mut regions = Vec::new();
    for ry in 0..3 {
        for rx in 0..3 {
            let members: Vec<usize> = (0..cfg.n_cores())
                .filter(|&t| {
                    let (x, y) = cfg.tile_xy(t);
                    band(x, cfg.mesh_w) == rx && band(y, cfg.mesh_h) == ry
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let wm: Vec<f64> = members.iter().map(|&t| cfg.tiles[t].wmem_kb as f64).collect();
            let fe: Vec<f64> = members.iter().map(|&t| cfg.tiles[t].fetch as f64).collect();
            let (wmem_mean_kb, wmem_std_kb) = mean_std(&wm);
            let (fetch_mean, fetch_std) = mean_std(&fe);
            let load: f64 = members.iter().map(|&t| p.tile_load.get(t).copied().unwrap_or(0.0)).sum();
            regions.push(RegionSummary {
                rx,
                ry,
                tiles: members.len(),
                wmem_mean_kb,
                wmem_std_kb,
                dflit_mean: cfg.dflit_bits as f64,
                dflit_std: 0.0,
                fetch_mean,
                fetch_std,
                load_share: if total_load > 0.0 { load / total_load } else { 0.0 },
            });
        }
    }
    let mut sizes: Vec<u32> = cfg.tiles.iter().map(|t| t.wmem_kb).collect();
    sizes.sort_unstable();
    let mut wmem_histogram: Vec<(u32, usize)> = Vec::new();
    for s in &sizes {
        match wmem_histogram.last_mut() {
            Some((v, c)) if v == s => *c += 1,
            _ => wmem_histogram.push((*s, 1)),
        }
    }
    let n = sizes.len().max(1) as f64;
    let mut acc = 0usize;
    let wmem_cdf = wmem_histogram
        .iter()
        .map(|&(v, c)| {
            acc += c;
            (v, acc as f64 / n)
        })
        .collect();
    let gini = gini(&cfg.tiles.iter().map(|t| t.wmem_kb as f64).collect::<Vec<_>>());
    RegionStats {
        regions,
        wmem_histogram,
        wmem_cdf,
        gini,
    }
}

/// One entry of the per-tile configuration artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRecord {
    pub x: u32,
    pub y: u32,
    pub fetch: u32,
    pub stanum: u32,
    pub vlen: u32,
    pub dmem_kb: u32,
    pub wmem_kb: u32,
    pub imem_kb: u32,
}

pub fn tile_records(cfg: &ChipConfig) -> Vec<TileRecord> {
    cfg.tiles
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (x, y) = cfg.tile_xy(i);
            TileRecord {
                x,
                y,
                fetch: t.fetch,
                stanum: t.stanum,
                vlen: t.vlen_bits,
                dmem_kb: t.dmem_kb,
                wmem_kb: t.wmem_kb,
                imem_kb: t.imem_kb,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, OperatorNode, Precision};

    fn op(id: u64, kind: OpKind, flops: u64, weight_bytes: u64) -> OperatorNode {
        OperatorNode {
            id,
            kind,
            flops,
            weight_bytes,
            input_bytes: 64,
            output_bytes: 64,
            precision: Precision::Fp16,
        }
    }

    fn mesh(w: u32, h: u32) -> ChipConfig {
        let mut cfg = ChipConfig::uniform(w, h, TccConfig::default(), 1e8);
        cfg.knobs.rho_general = 0.0;
        cfg
    }

    #[test]
    fn ratio_and_cores() {
        assert_eq!(partition_ratio(0.3, 0.0), 0.3);
        assert_eq!(partition_ratio(0.3, 0.9), 1.0);
        assert_eq!(partition_ratio(0.3, -0.5), 0.0);
        assert_eq!(target_cores(0.3, 10), 3);
        assert_eq!(target_cores(0.0, 10), 1);
        assert_eq!(target_cores(1.0, 7), 7);
    }

    #[test]
    fn score_prefers_center_when_empty() {
        let loads = vec![0.0; 9];
        let inp = ScoreInputs {
            mesh_w: 3,
            mesh_h: 3,
            loads: &loads,
            share_flops: 0.0,
            added_flops: 0.0,
            producers: &[],
        };
        let w = PlacementWeights::default();
        let best = (0..9)
            .min_by(|&a, &b| placement_score(a, &inp, &w).total_cmp(&placement_score(b, &inp, &w)))
            .unwrap();
        assert_eq!(best, 4);
    }

    #[test]
    fn score_prefers_producer_tile() {
        let loads = vec![0.0; 9];
        let prod = [(0usize, 1.0)];
        let inp = ScoreInputs {
            mesh_w: 3,
            mesh_h: 3,
            loads: &loads,
            share_flops: 0.0,
            added_flops: 0.0,
            producers: &prod,
        };
        let w = PlacementWeights::default();
        let s0 = placement_score(0, &inp, &w);
        assert!((1..9).all(|t| placement_score(t, &inp, &w) > s0));
    }

    #[test]
    fn score_prefers_empty_neighbor() {
        let mut loads = vec![0.0; 4];
        loads[0] = 100.0;
        let inp = ScoreInputs {
            mesh_w: 2,
            mesh_h: 2,
            loads: &loads,
            share_flops: 10.0,
            added_flops: 10.0,
            producers: &[],
        };
        let w = PlacementWeights::default();
        let full = placement_score(0, &inp, &w);
        let empty = placement_score(1, &inp, &w);
        // oracle: load 1.0·1 + imbalance 0.5·(110−27.5)/110; neighbor has neither
        let c = 0.25;
        assert!((full - (1.0 + 0.5 * (110.0 - 27.5) / 110.0 + c)).abs() < 1e-12);
        assert!((empty - c).abs() < 1e-12);
        assert!(empty < full);
    }

    #[test]
    fn trivial_placement() {
        let g = OperatorGraph::new(vec![op(0, OpKind::MatMul, 100, 10)], vec![], 5).unwrap();
        let p = place(&g, &mesh(1, 1), &PlacementWeights::default()).unwrap();
        assert_eq!(p.assignments[0], vec![(0, 1.0)]);
        assert_eq!(p.stats.balance, 1.0);
        assert_eq!(p.cross_bytes_per_token, 0.0);
    }

    #[test]
    fn identical_matmuls_balance() {
        let nodes = (0..4).map(|i| op(i, OpKind::MatMul, 1000, 100)).collect();
        let g = OperatorGraph::new(nodes, vec![], 200).unwrap();
        let mut cfg = mesh(2, 2);
        cfg.knobs.rho_matmul = 1.0;
        let p = place(&g, &cfg, &PlacementWeights::default()).unwrap();
        for a in &p.assignments {
            let mut tiles: Vec<usize> = a.iter().map(|x| x.0).collect();
            tiles.sort_unstable();
            assert_eq!(tiles, vec![0, 1, 2, 3]);
            assert!((a.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.stats.variance, 0.0);
        assert_eq!(p.tile_load, vec![1000.0; 4]);
    }

    #[test]
    fn chain_colocates_under_heavy_hop_weight() {
        let nodes = (0..3).map(|i| op(i, OpKind::MatMul, 100, 10)).collect();
        let edges = vec![Edge { src: 0, dst: 1, bytes: 64 }, Edge { src: 1, dst: 2, bytes: 64 }];
        let g = OperatorGraph::new(nodes, edges, 15).unwrap();
        let mut cfg = mesh(3, 3);
        cfg.knobs.rho_matmul = 0.0;
        cfg.knobs.hop_weight_scale = 1e6;
        let p = place(&g, &cfg, &PlacementWeights::default()).unwrap();
        let t0 = p.assignments[0][0].0;
        assert!(p.assignments.iter().all(|a| a == &vec![(t0, 1.0)]));
        assert_eq!(p.cross_bytes_per_token, 0.0);
    }

    #[test]
    fn wmem_overflow_is_reported() {
        let g = OperatorGraph::new(vec![op(0, OpKind::Softmax, 1, 300 * 1024)], vec![], 1).unwrap();
        let err = place(&g, &mesh(2, 2), &PlacementWeights::default()).unwrap_err();
        assert!(matches!(err, Error::InfeasiblePlacement { op: 0, .. }));
        let p = place_or_spread(&g, &mesh(2, 2), &PlacementWeights::default());
        assert!(p.fallback);
        assert_eq!(p.tile_wmem_used.iter().sum::<u64>(), 300 * 1024);
    }

    #[test]
    fn partitioned_op_shrinks_to_fitting_tiles() {
        let g = OperatorGraph::new(vec![op(0, OpKind::MatMul, 100, 400 * 1024)], vec![], 1).unwrap();
        let mut cfg = mesh(2, 2);
        cfg.knobs.rho_matmul = 1.0;
        cfg.tiles[0].wmem_kb = 1024;
        let p = place(&g, &cfg, &PlacementWeights::default()).unwrap();
        assert!(p.tile_wmem_used.iter().zip(&cfg.tiles).all(|(u, t)| *u <= t.wmem_bytes()));
    }

    #[test]
    fn heterogeneous_uniform_and_skewed() {
        let nodes = (0..4).map(|i| op(i, OpKind::MatMul, 1000, 100)).collect();
        let g = OperatorGraph::new(nodes, vec![], 200).unwrap();
        let mut cfg = mesh(2, 2);
        cfg.knobs.rho_matmul = 1.0;
        let p = place(&g, &cfg, &PlacementWeights::default()).unwrap();
        let h = derive_heterogeneous(&cfg, &p);
        assert!(h.tiles.iter().all(|t| *t == h.tiles[0]));

        let g = OperatorGraph::new(vec![op(0, OpKind::Softmax, 1000, 600 * 1024)], vec![], 1).unwrap();
        let mut cfg = mesh(2, 2);
        cfg.tiles[3].wmem_kb = 1024;
        let p = place(&g, &cfg, &PlacementWeights::default()).unwrap();
        let h = derive_heterogeneous(&cfg, &p);
        let host = p.assignments[0][0].0;
        assert_eq!(h.tiles[host].wmem_kb, 608);
        for (t, tile) in h.tiles.iter().enumerate() {
            tile.validate().unwrap();
            if t != host {
                assert_eq!(tile.wmem_kb, 256);
                assert_eq!(tile.fetch, 1);
            }
        }
        assert_eq!(h.tiles[host].fetch, 16);
        let fetch: Vec<u32> = h.tiles.iter().map(|t| t.fetch).collect();
        assert_eq!(variation(&fetch), 15.0 / 16.0);
        assert!(h.total_wmem_bytes() >= g.w_total());
    }

    #[test]
    fn gini_cases() {
        assert_eq!(gini(&[5.0; 6]), 0.0);
        let mut v = vec![0.0; 10];
        v[3] = 7.0;
        assert!((gini(&v) - 0.9).abs() < 1e-12);
        let x = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let mut pair = 0.0;
        for a in x {
            for b in x {
                pair += f64::abs(a - b);
            }
        }
        assert!((gini(&x) - pair / (2.0 * n * n * mean)).abs() < 1e-12);
    }

    #[test]
    fn regions_cover_all_tiles() {
        let cfg = mesh(5, 4);
        let g = OperatorGraph::new(vec![op(0, OpKind::MatMul, 10, 10)], vec![], 5).unwrap();
        let p = place(&g, &cfg, &PlacementWeights::default()).unwrap();
        let r = region_stats(&cfg, &p);
        assert_eq!(r.regions.iter().map(|x| x.tiles).sum::<usize>(), 20);
        assert_eq!(r.gini, 0.0);
        assert_eq!(r.wmem_cdf.last().unwrap().1, 1.0);
        assert_eq!(tile_records(&cfg).len(), 20);
    }

    #[test]
    fn eta_par_bounds() {
        assert_eq!(eta_par(1.0, 0.0), 1.0);
        assert_eq!(eta_par(0.01, 3.0), 0.1);
        assert!((eta_par(0.8, 3.0) - 0.8 * 0.94).abs() < 1e-15);
    }
}
