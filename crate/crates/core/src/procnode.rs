//! Process-node parameter table (3–28 nm) and node-dependent scaling.
//!
//! Only the clock anchors (1 GHz at 3 nm, 820 MHz at 5 nm, 250 MHz at 28 nm)
//! are fixed; everything else is a documented default that can be replaced
//! with a CSV override. Downstream checks rely on monotonicity and ratios,
//! never on absolute calibrated values.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Supported nodes, smallest first.
pub const NODES_NM: [u32; 7] = [3, 5, 7, 10, 14, 22, 28];

/// Reference node for `a_scale` and the reference clock.
pub const REFERENCE_NODE_NM: u32 = 28;
/// Reference clock `f_ref` (the 28 nm anchor).
pub const F_REF_HZ: f64 = 250e6;
/// NoC link energy per bit per hop at the reference node.
pub const NOC_PJ_PER_BIT_REF: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessNode {
    pub node_nm: u32,
    /// Maximum clock, Hz.
    pub f_clk_max: f64,
    /// Logic area relative to 28 nm.
    pub a_scale: f64,
    pub v_dd: f64,
    /// ROM read power per MB of active weight memory at `f_ref`, mW/MB.
    pub e_dyn_per_mb: f64,
    pub activity_alpha: f64,
    pub a_rom_per_mb: f64,
    pub a_sram_per_mb: f64,
    /// Logic area per core at 28 nm, mm² (scaled by `a_scale`).
    pub a_logic_base: f64,
    /// Logic power per core at 28 nm and `f_ref`, mW.
    pub p_logic_base: f64,
    pub hop_latency: f64,
    pub setup_latency: f64,
}

impl ProcessNode {
    /// `κ_P(n) = √A_scale(n) · V_dd²(n)`.
    pub fn power_scale(&self) -> f64 {
        power_scale(self.a_scale, self.v_dd)
    }

    /// Static leakage as a fraction of SRAM + logic dynamic power. Grows
    /// toward smaller nodes; ROM leakage is excluded entirely.
    pub fn leak_frac(&self) -> f64 {
        0.03 + 0.03 * (1.0 - self.a_scale)
    }

    /// NoC energy per bit per hop in pJ, scaled like logic power.
    pub fn noc_pj_per_bit(&self) -> f64 {
        let reference = power_scale(1.0, 0.90);
        NOC_PJ_PER_BIT_REF * self.power_scale() / reference
    }

    pub fn f_clk_max_mhz(&self) -> f64 {
        self.f_clk_max / 1e6
    }

    pub fn index(&self) -> usize {
        NODES_NM
            .iter()
            .position(|&n| n == self.node_nm)
            .unwrap_or(NODES_NM.len() - 1)
    }

    fn check(&self) -> Result<()> {
        let vals = [
            self.f_clk_max,
            self.a_scale,
            self.v_dd,
            self.e_dyn_per_mb,
            self.activity_alpha,
            self.a_rom_per_mb,
            self.a_sram_per_mb,
            self.a_logic_base,
            self.p_logic_base,
            self.hop_latency,
            self.setup_latency,
        ];
        if vals.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid(format!(
                "process node {} nm has a non-positive parameter",
                self.node_nm
            )));
        }
        if self.activity_alpha > 1.0 {
            return Err(invalid(format!(
                "process node {} nm: activity_alpha must be <= 1",
                self.node_nm
            )));
        }
        Ok(())
    }
}

/// `√a_scale · v_dd²`, generic over the scalar type.
pub fn power_scale<T: Scalar>(a_scale: T, v_dd: T) -> T {
    a_scale.sqrt() * v_dd * v_dd
}

const A_SCALE: [f64; 7] = [0.04, 0.08, 0.13, 0.22, 0.36, 0.70, 1.0];
const V_DD: [f64; 7] = [0.55, 0.60, 0.65, 0.70, 0.75, 0.85, 0.90];
const E_DYN_PER_MB: [f64; 7] = [0.25, 0.40, 0.55, 0.80, 1.10, 1.60, 2.00];
const A_ROM_PER_MB: [f64; 7] = [0.05, 0.08, 0.11, 0.16, 0.24, 0.45, 0.60];
const A_SRAM_PER_MB: [f64; 7] = [0.15, 0.22, 0.30, 0.42, 0.62, 1.10, 1.50];
const HOP_LATENCY: [f64; 7] = [2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0];
const SETUP_LATENCY: [f64; 7] = [6.0, 6.0, 5.0, 5.0, 4.0, 4.0, 4.0];

/// Clock anchors (nm, Hz); other nodes are interpolated log-log between them.
const CLOCK_ANCHORS: [(f64, f64); 3] = [(3.0, 1.0e9), (5.0, 820e6), (28.0, 250e6)];

/// Max clock for any node size, log-log interpolation between anchors
/// (clamped outside the anchor range).
pub fn interpolated_clock(node_nm: f64) -> f64 {
    let (first, last) = (CLOCK_ANCHORS[0], CLOCK_ANCHORS[CLOCK_ANCHORS.len() - 1]);
    if node_nm <= first.0 {
        return first.1;
    }
    if node_nm >= last.0 {
        return last.1;
    }
    let seg = CLOCK_ANCHORS
        .windows(2)
        .find(|w| node_nm <= w[1].0)
        .expect("inside anchor range");
    let (n0, f0) = seg[0];
    let (n1, f1) = seg[1];
    let t = (node_nm / n0).ln() / (n1 / n0).ln();
    (f0.ln() + t * (f1 / f0).ln()).exp()
}

/// The built-in seven-node table.
pub fn builtin_table() -> Vec<ProcessNode> {
    NODES_NM
        .iter()
        .enumerate()
        .map(|(i, &nm)| {
            // anchors are exact; round interpolated clocks to 0.1 MHz
            let f = interpolated_clock(nm as f64);
            ProcessNode {
                node_nm: nm,
                f_clk_max: (f / 1e5).round() * 1e5,
                a_scale: A_SCALE[i],
                v_dd: V_DD[i],
                e_dyn_per_mb: E_DYN_PER_MB[i],
                activity_alpha: 0.1,
                a_rom_per_mb: A_ROM_PER_MB[i],
                a_sram_per_mb: A_SRAM_PER_MB[i],
                a_logic_base: 0.5,
                p_logic_base: 40.0,
                hop_latency: HOP_LATENCY[i],
                setup_latency: SETUP_LATENCY[i],
            }
        })
        .collect()
}

/// Looks up a node in a table.
pub fn find_node(table: &[ProcessNode], node_nm: u32) -> Result<&ProcessNode> {
    table
        .iter()
        .find(|n| n.node_nm == node_nm)
        .ok_or(Error::UnknownNode(node_nm))
}

/// Parameters at an arbitrary node size: log-log in `a_scale`, energies and
/// areas, linear in `log(nm)` for `v_dd` and latencies.
pub fn interpolate(table: &[ProcessNode], node_nm: f64) -> ProcessNode {
    let mut sorted: Vec<&ProcessNode> = table.iter().collect();
    sorted.sort_by_key(|n| n.node_nm);
    let lo_idx = sorted
        .iter()
        .rposition(|n| (n.node_nm as f64) <= node_nm)
        .unwrap_or(0);
    let hi_idx = (lo_idx + 1).min(sorted.len() - 1);
    let (lo, hi) = (sorted[lo_idx], sorted[hi_idx]);
    let t = if lo.node_nm == hi.node_nm {
        0.0
    } else {
        ((node_nm / lo.node_nm as f64).ln() / (hi.node_nm as f64 / lo.node_nm as f64).ln())
            .clamp(0.0, 1.0)
    };
    let geo = |a: f64, b: f64| (a.ln() + t * (b / a).ln()).exp();
    let lin = |a: f64, b: f64| a + t * (b - a);
    ProcessNode {
        node_nm: node_nm.round() as u32,
        f_clk_max: interpolated_clock(node_nm),
        a_scale: geo(lo.a_scale, hi.a_scale),
        v_dd: lin(lo.v_dd, hi.v_dd),
        e_dyn_per_mb: geo(lo.e_dyn_per_mb, hi.e_dyn_per_mb),
        activity_alpha: lin(lo.activity_alpha, hi.activity_alpha),
        a_rom_per_mb: geo(lo.a_rom_per_mb, hi.a_rom_per_mb),
        a_sram_per_mb: geo(lo.a_sram_per_mb, hi.a_sram_per_mb),
        a_logic_base: geo(lo.a_logic_base, hi.a_logic_base),
        p_logic_base: geo(lo.p_logic_base, hi.p_logic_base),
        hop_latency: lin(lo.hop_latency, hi.hop_latency),
        setup_latency: lin(lo.setup_latency, hi.setup_latency),
    }
}

pub const CSV_HEADER: [&str; 12] = [
    "node_nm",
    "f_clk_max_mhz",
    "a_scale",
    "v_dd",
    "e_dyn_per_mb",
    "activity_alpha",
    "a_rom_per_mb",
    "a_sram_per_mb",
    "a_logic_base",
    "p_logic_base",
    "hop_latency",
    "setup_latency",
];

#[derive(Deserialize)]
struct CsvRow {
    node_nm: u32,
    f_clk_max_mhz: f64,
    a_scale: f64,
    v_dd: f64,
    e_dyn_per_mb: f64,
    activity_alpha: f64,
    a_rom_per_mb: f64,
    a_sram_per_mb: f64,
    a_logic_base: f64,
    p_logic_base: f64,
    hop_latency: f64,
    setup_latency: f64,
}

/// Reads an override table. Rows replace built-in entries with the same
/// `node_nm`; the header must match [`CSV_HEADER`] exactly.
pub fn read_table_csv(reader: impl Read) -> Result<Vec<ProcessNode>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_HEADER {
        return Err(invalid(format!(
            "process table header must be `{}`",
            CSV_HEADER.join(",")
        )));
    }
    let mut table = builtin_table();
    for row in rdr.deserialize::<CsvRow>() {
        let r = row?;
        let node = ProcessNode {
            node_nm: r.node_nm,
            f_clk_max: r.f_clk_max_mhz * 1e6,
            a_scale: r.a_scale,
            v_dd: r.v_dd,
            e_dyn_per_mb: r.e_dyn_per_mb,
            activity_alpha: r.activity_alpha,
            a_rom_per_mb: r.a_rom_per_mb,
            a_sram_per_mb: r.a_sram_per_mb,
            a_logic_base: r.a_logic_base,
            p_logic_base: r.p_logic_base,
            hop_latency: r.hop_latency,
            setup_latency: r.setup_latency,
        };
        node.check()?;
        match table.iter_mut().find(|n| n.node_nm == node.node_nm) {
            Some(slot) => *slot = node,
            None => return Err(Error::UnknownNode(node.node_nm)),
        }
    }
    Ok(table)
}

pub fn load_table(path: impl AsRef<Path>) -> Result<Vec<ProcessNode>> {
    read_table_csv(std::fs::File::open(path)?)
}

pub fn write_table_csv(table: &[ProcessNode], w: impl std::io::Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(CSV_HEADER)?;
    for n in table {
        wtr.write_record([
            n.node_nm.to_string(),
            n.f_clk_max_mhz().to_string(),
            n.a_scale.to_string(),
            n.v_dd.to_string(),
            n.e_dyn_per_mb.to_string(),
            n.activity_alpha.to_string(),
            n.a_rom_per_mb.to_string(),
            n.a_sram_per_mb.to_string(),
            n.a_logic_base.to_string(),
            n.p_logic_base.to_string(),
            n.hop_latency.to_string(),
            n.setup_latency.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
