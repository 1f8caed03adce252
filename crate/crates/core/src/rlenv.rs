//! The MDP surface: constraints, reward, state encoding and action decoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{
    avg_hops, evaluate, mem_pressure, noc_latency, ChipConfig, EvalParams, NormRanges, PpaEstimate, PpaWeights,
    Range, TccConfig, Workload, BANK_KB, MESH_MAX, SC_MAX,
};
use crate::error::{invalid, Result};
use crate::graph::Precision;
use crate::kvcache::QuantBits;
use crate::partition::{partition_ratio, Placement};
use crate::procnode::{find_node, ProcessNode, NODES_NM};

pub const STATE_DIM: usize = 73;
pub const SUBSET_DIM: usize = 52;
pub const CONT_DIM: usize = 30;
pub const DISC_HEADS: usize = 4;
pub const DISC_CHOICES: usize = 5;
/// Continuous indices of the TCC parameter group.
pub const TCC_RANGE: std::ops::Range<usize> = 0..15;
/// Full-state indices dropped from the actor's subset.
pub const DROPPED: [usize; 21] = [
    33, 34, 35, 36, 41, 42, 43, 44, 46, 47, 48, 49, 59, 60, 61, 62, 63, 64, 67, 68, 69,
];
/// Full-state indices of the PPA observation (power, perf, area, tok/s,
/// efficiency).
pub const PPA_OBS: std::ops::Range<usize> = 50..55;

/// Node whose reference design sets the default budgets.
pub const BUDGET_NODE_NM: u32 = 7;

/// Budgets, reward weights and penalty constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    pub p_max_mw: f64,
    pub a_max_mm2: f64,
    pub m_budget_bytes: f64,
    pub weights: PpaWeights,
    pub ranges: NormRanges,
    /// Normalization of the tokens/s observation.
    pub tok_range: Range,
    pub lambda_mem: f64,
    pub lambda_hazard: f64,
    pub s_mag: f64,
}

impl Constraints {
    /// Budgets with ranges defaulting to `[0, 2 × budget]`.
    pub fn new(p_max_mw: f64, a_max_mm2: f64, m_budget_bytes: f64, perf_max: f64, tok_max: f64) -> Self {
        Constraints {
            p_max_mw,
            a_max_mm2,
            m_budget_bytes,
            weights: PpaWeights::HIGH_PERF,
            ranges: NormRanges {
                perf: Range::new(0.0, perf_max),
                power: Range::new(0.0, 2.0 * p_max_mw),
                area: Range::new(0.0, 2.0 * a_max_mm2),
            },
            tok_range: Range::new(0.0, tok_max),
            lambda_mem: 1.0,
            lambda_hazard: 0.5,
            s_mag: 1.0,
        }
    }

    /// Budgets from a reference design: the initial mesh with both sides
    /// doubled (at least 8×8), default tiles, at 7 nm and full clock. Perf
    /// and tok/s ranges are twice the reference values.
    pub fn for_workload(table: &[ProcessNode], wl: &Workload, params: &EvalParams) -> Result<Self> {
        let node = find_node(table, BUDGET_NODE_NM)?;
        let (m, n) = initial_mesh(wl.w_total());
        let (m, n) = ((2 * m).clamp(8, MESH_MAX), (2 * n).clamp(8, MESH_MAX));
        let cfg = bind_wmem(ChipConfig::uniform(m, n, TccConfig::default(), node.f_clk_max), wl.w_total());
        let probe = Constraints::new(1.0, 1.0, 1.0, 1.0, 1.0);
        let (ppa, _) = evaluate(&cfg, node, wl, params, &probe)?;
        let tok = if ppa.tok_s.is_finite() && ppa.tok_s > 0.0 { ppa.tok_s } else { 1.0 };
        Ok(Constraints::new(
            ppa.power_mw,
            ppa.area_mm2,
            cfg.total_memory_bytes() as f64,
            2.0 * ppa.perf_gops,
            2.0 * tok,
        ))
    }

    pub fn with_weights(mut self, w: PpaWeights) -> Self {
        self.weights = w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_max_mw > 0.0 && self.a_max_mm2 > 0.0 && self.m_budget_bytes > 0.0) {
            return Err(invalid("budgets must be > 0"));
        }
        self.weights.normalized::<f64>()?;
        if !(self.ranges.perf.is_valid() && self.ranges.power.is_valid() && self.ranges.area.is_valid()) {
            return Err(invalid("normalization ranges need max > min"));
        }
        if !self.tok_range.is_valid() {
            return Err(invalid("tok/s range needs max > min"));
        }
        if self.lambda_mem < 0.0 || self.lambda_hazard < 0.0 || self.s_mag < 0.0 {
            return Err(invalid("penalty constants must be >= 0"));
        }
        Ok(())
    }

    /// Power, area and memory within budget, and a successful placement.
    pub fn feasible(&self, p: &PpaEstimate) -> bool {
        p.power_mw <= self.p_max_mw
            && p.area_mm2 <= self.a_max_mm2
            && p.memory_used as f64 <= self.m_budget_bytes
            && p.placement_ok
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("constraints serialize") + "\n"
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let c: Constraints = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

/// Signed reward components; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardParts {
    /// `+α · P_perf,norm`.
    pub perf: f64,
    /// `−β · P_power,norm`.
    pub power: f64,
    /// `−γ · A_norm`.
    pub area: f64,
    pub feasible_bonus: f64,
    /// `−P_violation`.
    pub violation: f64,
    /// `−P_memory`.
    pub memory: f64,
    /// `−P_hazard`.
    pub hazard: f64,
    pub total: f64,
}

/// Relative power overshoot `max(0, (P − P_max) / P_max)`.
pub fn violation_magnitude(power_mw: f64, p_max_mw: f64) -> f64 {
    ((power_mw - p_max_mw) / p_max_mw).max(0.0)
}

/// `s_mag · (1 + v) · v²`.
pub fn violation_penalty(v: f64, s_mag: f64) -> f64 {
    s_mag * (1.0 + v) * v * v
}

pub fn reward(p: &PpaEstimate, c: &Constraints) -> Result<RewardParts> {
    let (alpha, beta, gamma) = c.weights.normalized::<f64>()?;
    let perf = alpha * c.ranges.perf.normalize(p.perf_gops);
    let power = -beta * c.ranges.power.normalize(p.power_mw);
    let area = -gamma * c.ranges.area.normalize(p.area_mm2);
    let margin = ((c.p_max_mw - p.power_mw) / c.p_max_mw).clamp(0.0, 1.0);
    let feasible_bonus = if c.feasible(p) { c.s_mag * (1.0 + margin) } else { 0.0 };
    let v = violation_magnitude(p.power_mw, c.p_max_mw);
    let violation = -violation_penalty(v, c.s_mag);
    let memory = -c.lambda_mem * ((p.memory_used as f64 - c.m_budget_bytes).max(0.0) / c.m_budget_bytes);
    let hazard = -c.lambda_hazard * p.hazard_score;
    Ok(RewardParts {
        perf,
        power,
        area,
        feasible_bonus,
        violation,
        memory,
        hazard,
        total: perf + power + area + feasible_bonus + violation + memory + hazard,
    })
}

/// Smallest square-ish mesh whose 256 KB-per-tile WMEM floor holds
/// `w_total`, clamped to 64×64.
pub fn initial_mesh(w_total: u64) -> (u32, u32) {
    let per = TccConfig::WMEM_KB.0 as u64 * 1024;
    let tiles = w_total.div_ceil(per).max(1);
    let m = ((tiles as f64).sqrt().ceil() as u64).clamp(1, MESH_MAX as u64);
    let n = tiles.div_ceil(m).clamp(1, MESH_MAX as u64);
    (m as u32, n as u32)
}

/// Smallest bank-aligned per-tile WMEM so that uniform tiles hold `w_total`.
pub fn wmem_floor_kb(w_total: u64, n_tiles: usize) -> u32 {
    let kb = w_total.div_ceil(1024).div_ceil(n_tiles.max(1) as u64) as u32;
    (kb.div_ceil(BANK_KB) * BANK_KB).max(TccConfig::WMEM_KB.0)
}

/// Raises uniform WMEM to cover `w_total` when needed.
pub fn bind_wmem(mut cfg: ChipConfig, w_total: u64) -> ChipConfig {
    let floor = wmem_floor_kb(w_total, cfg.n_cores());
    for t in &mut cfg.tiles {
        t.wmem_kb = t.wmem_kb.max(floor);
    }
    cfg
}

/// Starting configuration of a node run.
pub fn initial_config(node: &ProcessNode, w_total: u64) -> ChipConfig {
    let (m, n) = initial_mesh(w_total);
    bind_wmem(ChipConfig::uniform(m, n, TccConfig::default(), node.f_clk_max), w_total)
}

/// 73-dim observation; `subset()` gives the actor's 52 dims.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub full: [f64; STATE_DIM],
}

impl StateVector {
    pub fn subset(&self) -> Vec<f64> {
        subset_indices().iter().map(|&i| self.full[i]).collect()
    }
}

/// Full-state indices kept in the subset, ascending.
pub fn subset_indices() -> Vec<usize> {
    (0..STATE_DIM).filter(|i| !DROPPED.contains(i)).collect()
}

/// Subset positions of the PPA observation slice.
pub fn subset_ppa_positions() -> [usize; 5] {
    let idx = subset_indices();
    let pos = |full: usize| idx.iter().position(|&i| i == full).expect("kept index");
    [pos(50), pos(51), pos(52), pos(53), pos(54)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateEntry {
    pub index: usize,
    pub group: &'static str,
    pub name: &'static str,
    pub scheme: &'static str,
    pub in_subset: bool,
}

const STATE_TABLE: [(&str, &str, &str); STATE_DIM] = [
    ("workload", "instruction_count", "log10(1+count)/12, clip [0,1]"),
    ("workload", "ilp", "1 - longest path/nodes"),
    ("workload", "memory_intensity", "bytes/FLOP clipped at 4, /4"),
    ("workload", "vector_util", "vectorizable FLOP share"),
    ("workload", "matmul_ratio", "MatMul FLOP share"),
    ("config", "mesh_w", "M/64"),
    ("config", "mesh_h", "N/64"),
    ("config", "cores", "M*N/4096"),
    ("config", "fetch", "mean fetch/16"),
    ("config", "stanum", "mean stanum/32"),
    ("config", "vlen", "(log2 vlen - 7)/4"),
    ("config", "dmem", "mean dmem_kb/512"),
    ("config", "wmem", "log2(wmem_kb/256)/8, clip [0,1]"),
    ("config", "imem", "mean imem_kb/128"),
    ("config", "dflit", "(log2 dflit - 6)/7"),
    ("config", "xr_wp", "/16"),
    ("config", "vr_wp", "/16"),
    ("config", "xdpnum", "/16"),
    ("config", "vdpnum", "/16"),
    ("config", "node", "node index/6 (3nm = 0)"),
    ("config", "sc_x", "/8"),
    ("config", "sc_y", "/8"),
    ("config", "precision_mode", "index/5 (FP32 = 0)"),
    ("config", "alpha_spec", "alpha_spec - 1"),
    ("config", "wmem_utilization", "W_total / sum wmem"),
    ("config", "mem_pressure", "mean tile pressure/1.5, clip [0,1]"),
    ("partitioning", "dmem_in_frac", "ratio"),
    ("partitioning", "dmem_out_frac", "ratio"),
    ("partitioning", "dmem_scratch_frac", "1 - in - out"),
    ("load", "load_variance", "v/(1+v) of load/mean"),
    ("load", "min_max_ratio", "min/max load"),
    ("load", "balance", "mean/max load"),
    ("load", "active_fraction", "tiles with load / tiles"),
    ("op_partition", "rho_matmul", "ratio"),
    ("op_partition", "rho_conv", "ratio"),
    ("op_partition", "rho_general", "ratio"),
    ("op_partition", "hop_weight_scale", "/4"),
    ("hazards", "raw", "same-tile producer-consumer share"),
    ("hazards", "war", "excess fan-in share"),
    ("hazards", "waw", "excess fan-out share"),
    ("hazards", "global", "mean of raw, war, waw"),
    ("tile_hazards", "tile_max", "max per-tile density"),
    ("tile_hazards", "tile_mean", "mean per-tile density"),
    ("tile_hazards", "tile_std", "std of per-tile density"),
    ("tile_hazards", "tile_hot", "share of tiles with density > 0.5"),
    ("frequency", "f_clk", "f_clk / f_clk_max"),
    ("streaming", "stream_in", "ratio"),
    ("streaming", "stream_out", "ratio"),
    ("streaming", "noc_latency", "L/(L+100) cycles"),
    ("streaming", "cross_fraction", "cross-tile bytes / edge bytes, clip [0,1]"),
    ("ppa_obs", "power", "previous power, range-normalized (0 on first step)"),
    ("ppa_obs", "perf", "previous perf, range-normalized"),
    ("ppa_obs", "area", "previous area, range-normalized"),
    ("ppa_obs", "tok_s", "previous tok/s, range-normalized"),
    ("ppa_obs", "efficiency", "perf_n * (1 - power_n)"),
    ("workload_partition", "sub_matmul", "ratio"),
    ("workload_partition", "allreduce_frac", "ratio"),
    ("workload_partition", "max_tile_share", "max tile load / total"),
    ("workload_partition", "wmem_fill", "sum wmem used / sum wmem"),
    ("precision", "fp32", "node fraction"),
    ("precision", "fp16", "node fraction"),
    ("precision", "bf16", "node fraction"),
    ("precision", "fp8", "node fraction"),
    ("precision", "int8", "node fraction"),
    ("precision", "mixed", "node fraction"),
    ("instruction_type", "scalar", "node fraction"),
    ("instruction_type", "vector", "node fraction"),
    ("sc_topology", "effective_tccs", "log2(1+active)/12"),
    ("sc_topology", "avg_hops", "h/42.67"),
    ("sc_topology", "sc_latency", "supercluster latency/50, clip [0,1]"),
    ("llm", "batch", "log2(batch)/8, clip [0,1]"),
    ("llm", "kv_quant", "index/2 (16-bit = 0)"),
    ("llm", "kv_compression", "1 - 1/kappa"),
];

pub fn state_table() -> Vec<StateEntry> {
    STATE_TABLE
        .iter()
        .enumerate()
        .map(|(index, &(group, name, scheme))| StateEntry {
            index,
            group,
            name,
            scheme,
            in_subset: !DROPPED.contains(&index),
        })
        .collect()
}

fn clip01(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// Range-normalized `(power, perf, area, tok/s, efficiency)`.
pub fn ppa_observation(p: &PpaEstimate, c: &Constraints) -> [f64; 5] {
    let power = c.ranges.power.normalize(p.power_mw);
    let perf = c.ranges.perf.normalize(p.perf_gops);
    let area = c.ranges.area.normalize(p.area_mm2);
    let tok = c.tok_range.normalize(if p.tok_s.is_finite() { p.tok_s } else { c.tok_range.max });
    [power, perf, area, tok, perf * (1.0 - power)]
}

/// Everything the encoder reads.
#[derive(Debug, Clone, Copy)]
pub struct StateInputs<'a> {
    pub workload: &'a Workload,
    pub cfg: &'a ChipConfig,
    pub placement: &'a Placement,
    pub node: &'a ProcessNode,
    pub constraints: &'a Constraints,
    /// Estimate of the previous step; `None` on the first step.
    pub prev: Option<&'a PpaEstimate>,
}

pub fn encode_state(inp: &StateInputs<'_>) -> StateVector {
    let (wl, cfg, p) = (inp.workload, inp.cfg, inp.placement);
    let f = &wl.features;
    let mt = cfg.mean_tile();
    let n = cfg.n_cores().max(1) as f64;
    let mut s = [0.0; STATE_DIM];

    s[0] = clip01((1.0 + f.instruction_count as f64).log10() / 12.0);
    s[1] = f.ilp;
    s[2] = f.memory_intensity;
    s[3] = f.vector_util;
    s[4] = f.matmul_ratio;

    s[5] = cfg.mesh_w as f64 / 64.0;
    s[6] = cfg.mesh_h as f64 / 64.0;
    s[7] = n / 4096.0;
    s[8] = mt.fetch as f64 / 16.0;
    s[9] = mt.stanum as f64 / 32.0;
    s[10] = ((mt.vlen_bits as f64).log2() - 7.0) / 4.0;
    s[11] = mt.dmem_kb as f64 / 512.0;
    s[12] = clip01((mt.wmem_kb as f64 / 256.0).log2() / 8.0);
    s[13] = mt.imem_kb as f64 / 128.0;
    s[14] = ((cfg.dflit_bits as f64).log2() - 6.0) / 7.0;
    s[15] = mt.xr_wp as f64 / 16.0;
    s[16] = mt.vr_wp as f64 / 16.0;
    s[17] = mt.xdpnum as f64 / 16.0;
    s[18] = mt.vdpnum as f64 / 16.0;
    s[19] = inp.node.index() as f64 / (NODES_NM.len() - 1) as f64;
    s[20] = cfg.sc_x as f64 / SC_MAX as f64;
    s[21] = cfg.sc_y as f64 / SC_MAX as f64;
    s[22] = cfg.precision_mode.index() as f64 / 5.0;
    s[23] = cfg.alpha_spec - 1.0;
    let wmem_total = cfg.total_wmem_bytes() as f64;
    s[24] = clip01(wl.w_total() as f64 / wmem_total);
    let pressure: f64 = (0..cfg.n_cores())
        .map(|t| {
            mem_pressure(
                p.tile_wmem_used[t] as f64,
                cfg.tiles[t].wmem_bytes() as f64,
                p.tile_dmem_used[t],
                cfg.tiles[t].dmem_bytes() as f64,
            )
        })
        .sum::<f64>()
        / n;
    s[25] = clip01(pressure / 1.5);

    let k = &cfg.knobs;
    s[26] = k.dmem_in_frac;
    s[27] = k.dmem_out_frac;
    s[28] = (1.0 - k.dmem_in_frac - k.dmem_out_frac).max(0.0);

    let st = &p.stats;
    s[29] = st.variance / (1.0 + st.variance);
    s[30] = if st.max > 0.0 { st.min / st.max } else { 1.0 };
    s[31] = st.balance;
    s[32] = p.active_tiles().len() as f64 / n;

    s[33] = k.rho_matmul;
    s[34] = k.rho_conv;
    s[35] = k.rho_general;
    s[36] = k.hop_weight_scale / crate::arch::PartitionKnobs::SCALE_MAX;

    let h = &p.hazards;
    s[37] = h.raw;
    s[38] = h.war;
    s[39] = h.waw;
    s[40] = h.global;
    s[41] = h.tile_max;
    s[42] = h.tile_mean;
    s[43] = h.tile_std;
    s[44] = h.tile_hot;

    s[45] = cfg.f_clk / inp.node.f_clk_max;

    s[46] = k.stream_in;
    s[47] = k.stream_out;
    let lat = noc_latency(
        cfg.mesh_w as f64,
        cfg.mesh_h as f64,
        inp.node.hop_latency,
        inp.node.setup_latency,
    );
    s[48] = lat / (lat + 100.0);
    let edge_bytes = wl.graph.total_edge_bytes() as f64;
    s[49] = if edge_bytes > 0.0 {
        clip01(p.cross_bytes_per_token * wl.seq_len as f64 / edge_bytes)
    } else {
        0.0
    };

    if let Some(prev) = inp.prev {
        s[PPA_OBS].copy_from_slice(&ppa_observation(prev, inp.constraints));
    }

    s[55] = k.sub_matmul;
    s[56] = k.allreduce_frac;
    let total_load: f64 = p.tile_load.iter().sum();
    s[57] = if total_load > 0.0 { st.max / total_load } else { 0.0 };
    s[58] = clip01(p.tile_wmem_used.iter().sum::<u64>() as f64 / wmem_total);

    s[59..65].copy_from_slice(&f.precision_dist);
    s[65..67].copy_from_slice(&f.scalar_vector_ratio);

    let active = p.active_tiles().len() as f64;
    s[67] = clip01((1.0 + active).log2() / 12.0);
    s[68] = avg_hops(cfg.mesh_w as f64, cfg.mesh_h as f64) / (128.0 / 3.0);
    s[69] = clip01(
        noc_latency(
            cfg.sc_x as f64,
            cfg.sc_y as f64,
            inp.node.hop_latency,
            inp.node.setup_latency,
        ) / 50.0,
    );

    s[70] = clip01((cfg.batch as f64).log2() / 8.0);
    s[71] = cfg.kv.quant.index() as f64 / 2.0;
    s[72] = wl.kv_spec(&cfg.kv).map(|k| 1.0 - 1.0 / k.compaction()).unwrap_or(0.0);

    for v in &mut s {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    StateVector { full: s }
}

/// 30 continuous dims in `[-1, 1]` and 4 discrete deltas in `{-2..2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    pub cont: [f64; CONT_DIM],
    pub disc: [i32; DISC_HEADS],
}

impl ActionVector {
    pub fn zero() -> Self {
        ActionVector {
            cont: [0.0; CONT_DIM],
            disc: [0; DISC_HEADS],
        }
    }

    pub fn uniform(rng: &mut impl Rng) -> Self {
        let mut a = ActionVector::zero();
        for v in &mut a.cont {
            *v = rng.random_range(-1.0..=1.0);
        }
        for d in &mut a.disc {
            *d = rng.random_range(-2..=2);
        }
        a
    }

    /// Discrete choice index `0..5` of head `h`.
    pub fn disc_index(&self, h: usize) -> usize {
        (self.disc[h] + 2) as usize
    }

    pub fn in_bounds(&self) -> bool {
        self.cont.iter().all(|v| (-1.0..=1.0).contains(v)) && self.disc.iter().all(|d| (-2..=2).contains(d))
    }
}

/// Componentwise clamp onto the action box; NaN maps to 0.
pub fn project_action(a: &ActionVector) -> ActionVector {
    let mut out = a.clone();
    for v in &mut out.cont {
        *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    }
    for d in &mut out.disc {
        *d = (*d).clamp(-2, 2);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ActionEntry {
    pub index: usize,
    pub group: &'static str,
    pub name: &'static str,
    pub mapping: &'static str,
}

const ACTION_TABLE: [(&str, &str, &str); CONT_DIM] = [
    ("tcc", "fetch", "+v*15, round, [1,16]"),
    ("tcc", "stanum", "+v*31, round, [1,32]"),
    ("tcc", "vlen", "log2 +v*4, round, [128,2048]"),
    ("tcc", "dmem", "+v*496 KB, 16 KB banks, [16,512]"),
    ("tcc", "wmem", "log2 KB +v*8, 16 KB banks, >= W_total/tiles"),
    ("tcc", "imem", "+v*127 KB, round, [1,128]"),
    ("tcc", "dflit", "log2 +v*7, round, [64,8192]"),
    ("tcc", "xr_wp", "+v*15, round, [1,16]"),
    ("tcc", "vr_wp", "+v*15, round, [1,16]"),
    ("tcc", "xdpnum", "+v*15, round, [1,16]"),
    ("tcc", "vdpnum", "+v*15, round, [1,16]"),
    ("tcc", "clock", "+v*f_max, 1 MHz grid, [0.01 f_max, f_max]"),
    ("tcc", "precision", "index +v*5, round"),
    ("tcc", "kv_quant", "index +v*2, round (16/8/4 bits)"),
    ("tcc", "kv_window", "log2 fraction +v*6, round, [1/64,1]"),
    ("memory_load", "dmem_in_frac", "+v, [0,1], in+out <= 1"),
    ("memory_load", "dmem_out_frac", "+v, [0,1], in+out <= 1"),
    ("memory_load", "load_weight_scale", "+v*4, [0,4]"),
    ("memory_load", "imbalance_weight_scale", "+v*4, [0,4]"),
    ("memory_load", "centrality_weight_scale", "+v*4, [0,4]"),
    ("op_partition", "rho_matmul", "clip(rho + v, 0, 1)"),
    ("op_partition", "rho_conv", "clip(rho + v, 0, 1)"),
    ("op_partition", "rho_general", "clip(rho + v, 0, 1)"),
    ("op_partition", "hop_weight_scale", "+v*4, [0,4]"),
    ("streaming", "stream_in", "+v, [0,1]"),
    ("streaming", "stream_out", "+v, [0,1]"),
    ("streaming", "reserved", "no effect"),
    ("workload_partition", "sub_matmul", "+v, [0,1]"),
    ("workload_partition", "allreduce_frac", "+v, [0,1]"),
    ("workload_partition", "reserved", "no effect"),
];

pub const DISC_TABLE: [&str; DISC_HEADS] = ["mesh_w", "mesh_h", "sc_x", "sc_y"];

pub fn action_table() -> Vec<ActionEntry> {
    ACTION_TABLE
        .iter()
        .enumerate()
        .map(|(index, &(group, name, mapping))| ActionEntry {
            index,
            group,
            name,
            mapping,
        })
        .collect()
}

fn step_int(old: u32, v: f64, (lo, hi): (u32, u32)) -> u32 {
    ((old as f64 + v * (hi - lo) as f64).round() as i64).clamp(lo as i64, hi as i64) as u32
}

fn step_log2(old: u32, v: f64, lo_exp: f64, hi_exp: f64) -> u32 {
    let e = ((old as f64).log2() + v * (hi_exp - lo_exp)).clamp(lo_exp, hi_exp).round();
    2f64.powf(e) as u32
}

fn step_unit(old: f64, v: f64, lo: f64, hi: f64) -> f64 {
    (old + v * (hi - lo)).clamp(lo, hi)
}

fn step_bank(old_kb: u32, delta_kb: f64, lo: u32, hi: u32) -> u32 {
    let banks = ((old_kb as f64 + delta_kb) / BANK_KB as f64).round() as i64;
    (banks * BANK_KB as i64).clamp(lo as i64, hi as i64) as u32
}

/// Applies an action as deltas on the current configuration. Continuous
/// value `v` moves a field by `v` times its range width before clamping
/// and quantization, so `v = 0` keeps an on-grid configuration and `±1`
/// reaches the range ends. Tiles come out uniform (the mean tile), with
/// WMEM raised to cover `w_total`.
pub fn decode_action(a: &ActionVector, cfg: &ChipConfig, node: &ProcessNode, w_total: u64) -> ChipConfig {
    let a = project_action(a);
    let c = &a.cont;
    let mut out = cfg.clone();

    out.mesh_w = (cfg.mesh_w as i64 + a.disc[0] as i64).clamp(1, MESH_MAX as i64) as u32;
    out.mesh_h = (cfg.mesh_h as i64 + a.disc[1] as i64).clamp(1, MESH_MAX as i64) as u32;
    out.sc_x = (cfg.sc_x as i64 + a.disc[2] as i64).clamp(1, out.mesh_w.min(SC_MAX) as i64) as u32;
    out.sc_y = (cfg.sc_y as i64 + a.disc[3] as i64).clamp(1, out.mesh_h.min(SC_MAX) as i64) as u32;
    let n = (out.mesh_w * out.mesh_h) as usize;

    let m = cfg.mean_tile();
    let floor = wmem_floor_kb(w_total, n);
    let wmem_hi_exp = 16f64.max((floor as f64).log2().ceil());
    let wmem_log = ((m.wmem_kb as f64).log2() + c[4] * 8.0).clamp(8.0, wmem_hi_exp);
    let wmem = if c[4] == 0.0 {
        m.wmem_kb
    } else {
        (((2f64.powf(wmem_log) / BANK_KB as f64).round() as u32) * BANK_KB).max(TccConfig::WMEM_KB.0)
    };
    let tile = TccConfig {
        fetch: step_int(m.fetch, c[0], TccConfig::FETCH),
        stanum: step_int(m.stanum, c[1], TccConfig::STANUM),
        vlen_bits: step_log2(m.vlen_bits, c[2], 7.0, 11.0),
        dmem_kb: step_bank(
            m.dmem_kb,
            c[3] * (TccConfig::DMEM_KB.1 - TccConfig::DMEM_KB.0) as f64,
            TccConfig::DMEM_KB.0,
            TccConfig::DMEM_KB.1,
        ),
        wmem_kb: wmem.max(floor),
        imem_kb: step_int(m.imem_kb, c[5], TccConfig::IMEM_KB),
        xr_wp: step_int(m.xr_wp, c[7], TccConfig::PORT),
        vr_wp: step_int(m.vr_wp, c[8], TccConfig::PORT),
        xdpnum: step_int(m.xdpnum, c[9], TccConfig::PORT),
        vdpnum: step_int(m.vdpnum, c[10], TccConfig::PORT),
    };
    out.tiles = vec![tile; n];
    out.dflit_bits = step_log2(cfg.dflit_bits, c[6], 6.0, 13.0);

    let f = (cfg.f_clk + c[11] * node.f_clk_max).clamp(0.01 * node.f_clk_max, node.f_clk_max);
    out.f_clk = if f >= node.f_clk_max - 0.5e6 {
        node.f_clk_max
    } else {
        (f / 1e6).round() * 1e6
    };

    let step_index = |idx: usize, v: f64, max: usize| ((idx as f64 + v * max as f64).round() as i64).clamp(0, max as i64) as usize;
    out.precision_mode = Precision::ALL[step_index(cfg.precision_mode.index(), c[12], 5)];
    out.kv.quant = QuantBits::ALL[step_index(cfg.kv.quant.index(), c[13], 2)];
    let wexp = (cfg.kv.window_frac.log2() + c[14] * 6.0).clamp(-6.0, 0.0).round();
    out.kv.window_frac = if c[14] == 0.0 { cfg.kv.window_frac } else { 2f64.powf(wexp) };

    let k = &mut out.knobs;
    let ok = &cfg.knobs;
    let smax = crate::arch::PartitionKnobs::SCALE_MAX;
    k.dmem_in_frac = step_unit(ok.dmem_in_frac, c[15], 0.0, 1.0);
    k.dmem_out_frac = step_unit(ok.dmem_out_frac, c[16], 0.0, 1.0).min(1.0 - k.dmem_in_frac);
    k.load_weight_scale = step_unit(ok.load_weight_scale, c[17], 0.0, smax);
    k.imbalance_weight_scale = step_unit(ok.imbalance_weight_scale, c[18], 0.0, smax);
    k.centrality_weight_scale = step_unit(ok.centrality_weight_scale, c[19], 0.0, smax);
    k.rho_matmul = partition_ratio(ok.rho_matmul, c[20]);
    k.rho_conv = partition_ratio(ok.rho_conv, c[21]);
    k.rho_general = partition_ratio(ok.rho_general, c[22]);
    k.hop_weight_scale = step_unit(ok.hop_weight_scale, c[23], 0.0, smax);
    k.stream_in = step_unit(ok.stream_in, c[24], 0.0, 1.0);
    k.stream_out = step_unit(ok.stream_out, c[25], 0.0, 1.0);
    k.sub_matmul = step_unit(ok.sub_matmul, c[27], 0.0, 1.0);
    k.allreduce_frac = step_unit(ok.allreduce_frac, c[28], 0.0, 1.0);
    out
}

/// Index of a node in the one-hot encoding used by the surrogate.
pub fn node_one_hot(node_nm: u32) -> [f64; 7] {
    let mut v = [0.0; 7];
    if let Some(i) = NODES_NM.iter().position(|&n| n == node_nm) {
        v[i] = 1.0;
    }
    v
}
