//! Full configuration evaluation: placement, throughput ceilings, power
//! breakdown, area and composite score.

use serde::{Deserialize, Serialize};

use super::formulas::{
    avg_hops, bisection_bw, bw_eff, compute_ceiling, memory_ceiling, noc_ceiling, ppa_score, tensor_multipliers,
    throughput, Binding,
};
use super::{precision_cost, precision_rate, ChipConfig, Workload, TM_FP16_DEFAULT};
use crate::error::Result;
use crate::graph::{flops_per_token, PHI_DECODE_GQA};
use crate::kvcache::{adjusted_bytes_per_token, kv_dmem_check, DmemBytes};
use crate::partition::{eta_par, place_or_spread, Placement, PlacementWeights};
use crate::procnode::{ProcessNode, F_REF_HZ};
use crate::rlenv::Constraints;

const MB: f64 = 1024.0 * 1024.0;
/// SRAM energy relative to ROM read energy per MB.
const SRAM_ENERGY_RATIO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub tm_fp16: f64,
    pub phi_decode: f64,
    pub placement: PlacementWeights,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            tm_fp16: TM_FP16_DEFAULT,
            phi_decode: PHI_DECODE_GQA,
            placement: PlacementWeights::default(),
        }
    }
}

/// Power breakdown, mW.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerBreakdown {
    pub compute: f64,
    pub sram: f64,
    pub rom_read: f64,
    pub noc: f64,
    pub leakage: f64,
}

impl PowerBreakdown {
    pub fn total(&self) -> f64 {
        self.compute + self.sram + self.rom_read + self.noc + self.leakage
    }

    /// Shares in percent, in field order.
    pub fn percentages(&self) -> [f64; 5] {
        let t = self.total();
        let parts = [self.compute, self.sram, self.rom_read, self.noc, self.leakage];
        if t <= 0.0 {
            return [0.0; 5];
        }
        parts.map(|p| 100.0 * p / t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ceilings {
    pub compute: f64,
    pub memory: f64,
    pub noc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpaEstimate {
    pub node_nm: u32,
    pub mesh_w: u32,
    pub mesh_h: u32,
    pub cores: usize,
    pub freq_mhz: f64,
    pub power: PowerBreakdown,
    pub power_mw: f64,
    pub perf_gops: f64,
    pub area_mm2: f64,
    pub tok_s: f64,
    pub ceilings: Ceilings,
    pub binding: Binding,
    pub eta_par: f64,
    /// On-chip memory allocated, bytes.
    pub memory_used: u64,
    pub hazard_score: f64,
    pub kv_spill_bytes: u64,
    pub cross_bytes_per_token: f64,
    pub placement_ok: bool,
    pub score: f64,
    pub feasible: bool,
}

/// Columns of the per-node result row.
pub const PPA_CSV_HEADER: [&str; 9] = [
    "process_node",
    "mesh_config",
    "cores",
    "freq_mhz",
    "power_mw",
    "perf_gops",
    "area_mm2",
    "ppa_score",
    "tok_s",
];

impl PpaEstimate {
    pub fn mesh_label(&self) -> String {
        format!("{}x{}", self.mesh_w, self.mesh_h)
    }

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            format!("{}nm", self.node_nm),
            self.mesh_label(),
            self.cores.to_string(),
            self.freq_mhz.to_string(),
            self.power_mw.to_string(),
            self.perf_gops.to_string(),
            self.area_mm2.to_string(),
            self.score.to_string(),
            self.tok_s.to_string(),
        ]
    }
}

/// Σ over tiles of logic factor times the precision-mode cost: the number
/// of reference-core equivalents.
pub fn logic_units(cfg: &ChipConfig) -> f64 {
    let pc = precision_cost(cfg.precision_mode);
    cfg.tiles.iter().map(|t| t.logic_factor(cfg.dflit_bits) * pc).sum()
}

/// `units · a_logic_base · a_scale + wmem_MB · a_rom + sram_MB · a_sram`.
pub fn area_from_parts(logic_units: f64, wmem_mb: f64, sram_mb: f64, node: &ProcessNode) -> f64 {
    logic_units * node.a_logic_base * node.a_scale + wmem_mb * node.a_rom_per_mb + sram_mb * node.a_sram_per_mb
}

pub fn area_model(cfg: &ChipConfig, node: &ProcessNode) -> f64 {
    let wmem: f64 = cfg.tiles.iter().map(|t| t.wmem_bytes() as f64).sum::<f64>() / MB;
    let sram: f64 = cfg
        .tiles
        .iter()
        .map(|t| (t.dmem_bytes() + t.imem_bytes()) as f64)
        .sum::<f64>()
        / MB;
    area_from_parts(logic_units(cfg), wmem, sram, node)
}

/// Power breakdown at a realized token rate.
pub fn power_model(
    cfg: &ChipConfig,
    node: &ProcessNode,
    wl: &Workload,
    tok_s: f64,
    cross_bytes_per_token: f64,
) -> PowerBreakdown {
    let fr = cfg.f_clk / F_REF_HZ;
    let fr_max = node.f_clk_max / F_REF_HZ;
    let logic = node.p_logic_base * node.power_scale() * logic_units(cfg);
    let sram_mb: f64 = cfg
        .tiles
        .iter()
        .map(|t| (t.dmem_bytes() + t.imem_bytes()) as f64)
        .sum::<f64>()
        / MB;
    let sram_unit = sram_mb * node.e_dyn_per_mb * SRAM_ENERGY_RATIO;
    let compute = logic * fr;
    let sram = sram_unit * fr;
    let rom_read = wl.w_total() as f64 / MB * node.e_dyn_per_mb * node.activity_alpha * fr;
    let hops = avg_hops(cfg.mesh_w as f64, cfg.mesh_h as f64);
    let tok = if tok_s.is_finite() { tok_s } else { 0.0 };
    // pJ/s → mW
    let noc = cross_bytes_per_token * 8.0 * tok * node.noc_pj_per_bit() * hops * 1e-9;
    // static power scales with the design, not the clock
    let leakage = node.leak_frac() * (logic + sram_unit) * fr_max;
    PowerBreakdown {
        compute,
        sram,
        rom_read,
        noc,
        leakage,
    }
}

/// Metrics of a configuration under a given placement.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub ceilings: Ceilings,
    pub tok_s: f64,
    pub binding: Binding,
    pub eta_par: f64,
    pub perf_gops: f64,
    pub power: PowerBreakdown,
    pub area_mm2: f64,
    pub kv_spill_bytes: u64,
}

pub fn model(cfg: &ChipConfig, node: &ProcessNode, wl: &Workload, p: &Placement, params: &EvalParams) -> Result<ModelOutput> {
    let f = cfg.f_clk;
    let hops = avg_hops(cfg.mesh_w as f64, cfg.mesh_h as f64);
    let eta = eta_par(p.stats.balance, hops);
    let rate = precision_rate(cfg.precision_mode, wl.precision);
    let mult: Vec<f64> = cfg
        .tiles
        .iter()
        .map(|t| tensor_multipliers(params.tm_fp16, t.vlen_bits as f64) * rate)
        .collect();
    let f_tok = flops_per_token(&wl.graph, params.phi_decode)?;
    let compute = if f_tok > 0.0 {
        compute_ceiling(&mult, f, eta, cfg.alpha_spec, f_tok)
    } else {
        f64::INFINITY
    };

    // KV traffic after compaction, plus a second pass over spilled bytes
    let (kv_bt, kappa, kv_total) = match wl.kv_spec(&cfg.kv) {
        Some(spec) => (
            crate::kvcache::kv_bytes_per_token(&spec) as f64,
            spec.compaction(),
            spec.compacted_total(),
        ),
        None => (0.0, 1.0, 0),
    };
    let active = p.active_tiles();
    let mut spill = 0u64;
    if kv_total > 0 && !active.is_empty() {
        let dmem: Vec<DmemBytes> = active
            .iter()
            .map(|&t| {
                let (i, o, s) = super::formulas::dmem_split_bytes(
                    cfg.tiles[t].dmem_bytes(),
                    cfg.knobs.dmem_in_frac,
                    cfg.knobs.dmem_out_frac,
                )
                .expect("validated fractions");
                DmemBytes {
                    input: i,
                    output: o,
                    scratch: s,
                }
            })
            .collect();
        spill = kv_dmem_check(kv_total, wl.act_input_bytes(), &dmem)?.total_spill;
    }
    let kv_adj = kv_bt / kappa;
    let spill_extra = if kv_total > 0 { kv_adj * spill as f64 / kv_total as f64 } else { 0.0 };
    let act = wl.act_bytes_per_token() as f64;
    let b_tok = adjusted_bytes_per_token(wl.w_total() as f64 + kv_bt + act, kv_bt, kappa) + spill_extra;

    let total_load: f64 = p.tile_load.iter().sum();
    let bw: Vec<f64> = (0..cfg.n_cores())
        .map(|t| {
            let share = if total_load > 0.0 { p.tile_load[t] / total_load } else { 0.0 };
            if share <= 0.0 || f <= 0.0 || mult[t] <= 0.0 {
                return 0.0;
            }
            let peak = 2.0 * cfg.tiles[t].vlen_bits as f64 / 8.0 * f;
            let volume = p.tile_wmem_used[t] as f64 + (kv_adj + act + spill_extra) * share;
            let cycles = (f_tok * share / (2.0 * mult[t])).max(1.0);
            bw_eff(peak, volume, cycles, f)
        })
        .collect();
    let memory = if b_tok > 0.0 { memory_ceiling(&bw, b_tok) } else { f64::INFINITY };
    let noc = noc_ceiling(
        bisection_bw(cfg.mesh_w as f64, cfg.mesh_h as f64, cfg.dflit_bits as f64, f),
        p.cross_bytes_per_token,
    );
    let (tok_s, binding) = throughput(compute, memory, noc);

    let perf_gops = cfg
        .tiles
        .iter()
        .map(|t| t.vlen_bits as f64 / 16.0 * rate * 2.0 * f * eta)
        .sum::<f64>()
        / 1e9;
    let power = power_model(cfg, node, wl, tok_s, p.cross_bytes_per_token);
    Ok(ModelOutput {
        ceilings: Ceilings { compute, memory, noc },
        tok_s,
        binding,
        eta_par: eta,
        perf_gops,
        power,
        area_mm2: area_model(cfg, node),
        kv_spill_bytes: spill,
    })
}

/// Places, models and scores a configuration.
pub fn evaluate(
    cfg: &ChipConfig,
    node: &ProcessNode,
    wl: &Workload,
    params: &EvalParams,
    constraints: &Constraints,
) -> Result<(PpaEstimate, Placement)> {
    cfg.validate(node, Some(wl.w_total()))?;
    let placement = place_or_spread(&wl.graph, cfg, &params.placement);
    let m = model(cfg, node, wl, &placement, params)?;
    let power_mw = m.power.total();
    let score = ppa_score(m.perf_gops, power_mw, m.area_mm2, &constraints.ranges, &constraints.weights)?;
    let mut est = PpaEstimate {
        node_nm: node.node_nm,
        mesh_w: cfg.mesh_w,
        mesh_h: cfg.mesh_h,
        cores: cfg.n_cores(),
        freq_mhz: cfg.f_clk / 1e6,
        power: m.power,
        power_mw,
        perf_gops: m.perf_gops,
        area_mm2: m.area_mm2,
        tok_s: m.tok_s,
        ceilings: m.ceilings,
        binding: m.binding,
        eta_par: m.eta_par,
        memory_used: cfg.total_memory_bytes(),
        hazard_score: placement.hazards.total(),
        kv_spill_bytes: m.kv_spill_bytes,
        cross_bytes_per_token: placement.cross_bytes_per_token,
        placement_ok: !placement.fallback,
        score,
        feasible: false,
    };
    est.feasible = constraints.feasible(&est);
    Ok((est, placement))
}
