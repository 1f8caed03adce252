//! Chip configuration types and the analytical PPA model.

mod eval;
mod formulas;

pub use eval::*;
pub use formulas::*;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{workload_features, OpKind, OperatorGraph, Precision, TransformerSpec, WorkloadFeatures};
use crate::kvcache::{kv_bytes_per_token, KvSpec, QuantBits};
use crate::procnode::ProcessNode;

/// Memory bank granularity, KB.
pub const BANK_KB: u32 = 16;
/// Default tensor multipliers per tile at FP16.
pub const TM_FP16_DEFAULT: f64 = 64.0;
pub const MESH_MAX: u32 = 64;
pub const SC_MAX: u32 = 8;

/// Per-tile microarchitecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TccConfig {
    pub fetch: u32,
    pub stanum: u32,
    pub vlen_bits: u32,
    pub dmem_kb: u32,
    pub wmem_kb: u32,
    pub imem_kb: u32,
    pub xr_wp: u32,
    pub vr_wp: u32,
    pub xdpnum: u32,
    pub vdpnum: u32,
}

impl TccConfig {
    pub const FETCH: (u32, u32) = (1, 16);
    pub const STANUM: (u32, u32) = (1, 32);
    pub const VLEN: (u32, u32) = (128, 2048);
    pub const DMEM_KB: (u32, u32) = (16, 512);
    /// Lower bound and default upper bound; the upper bound widens when a
    /// workload needs more weight storage per tile.
    pub const WMEM_KB: (u32, u32) = (256, 65536);
    pub const IMEM_KB: (u32, u32) = (1, 128);
    pub const PORT: (u32, u32) = (1, 16);

    pub fn ports(&self) -> [u32; 4] {
        [self.xr_wp, self.vr_wp, self.xdpnum, self.vdpnum]
    }

    pub fn port_sum(&self) -> u32 {
        self.ports().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: u32, (lo, hi): (u32, u32)| {
            if v < lo || v > hi {
                Err(invalid(format!("{name} = {v} outside [{lo}, {hi}]")))
            } else {
                Ok(())
            }
        };
        check("fetch", self.fetch, Self::FETCH)?;
        check("stanum", self.stanum, Self::STANUM)?;
        check("vlen_bits", self.vlen_bits, Self::VLEN)?;
        if !self.vlen_bits.is_power_of_two() {
            return Err(invalid(format!("vlen_bits = {} is not a power of two", self.vlen_bits)));
        }
        check("dmem_kb", self.dmem_kb, Self::DMEM_KB)?;
        check("imem_kb", self.imem_kb, Self::IMEM_KB)?;
        if self.wmem_kb < Self::WMEM_KB.0 {
            return Err(invalid(format!("wmem_kb = {} below {}", self.wmem_kb, Self::WMEM_KB.0)));
        }
        for (name, v) in [("dmem_kb", self.dmem_kb), ("wmem_kb", self.wmem_kb)] {
            if v % BANK_KB != 0 {
                return Err(invalid(format!("{name} = {v} is not a multiple of the {BANK_KB} KB bank")));
            }
        }
        for (name, v) in ["xr_wp", "vr_wp", "xdpnum", "vdpnum"].iter().zip(self.ports()) {
            check(name, v, Self::PORT)?;
        }
        Ok(())
    }

    /// Relative logic complexity of the tile in `(0, 1]`; 1.0 is the
    /// largest configuration with the widest flit.
    pub fn logic_factor(&self, dflit_bits: u32) -> f64 {
        0.25 + 0.40 * (self.vlen_bits as f64 / 2048.0)
            + 0.10 * (self.fetch as f64 / 16.0)
            + 0.10 * (self.stanum as f64 / 32.0)
            + 0.05 * (self.port_sum() as f64 / 64.0)
            + 0.10 * (dflit_bits as f64 / 8192.0)
    }

    pub fn wmem_bytes(&self) -> u64 {
        self.wmem_kb as u64 * 1024
    }

    pub fn dmem_bytes(&self) -> u64 {
        self.dmem_kb as u64 * 1024
    }

    pub fn imem_bytes(&self) -> u64 {
        self.imem_kb as u64 * 1024
    }
}

impl Default for TccConfig {
    fn default() -> Self {
        TccConfig {
            fetch: 4,
            stanum: 8,
            vlen_bits: 512,
            dmem_kb: 64,
            wmem_kb: 256,
            imem_kb: 16,
            xr_wp: 2,
            vr_wp: 2,
            xdpnum: 2,
            vdpnum: 2,
        }
    }
}

/// KV-cache handling: quantization width and sliding window as a fraction of
/// the sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvStrategy {
    pub quant: QuantBits,
    pub window_frac: f64,
}

impl KvStrategy {
    /// Window fraction floor.
    pub const MIN_WINDOW_FRAC: f64 = 1.0 / 64.0;
}

impl Default for KvStrategy {
    fn default() -> Self {
        KvStrategy {
            quant: QuantBits::B16,
            window_frac: 1.0,
        }
    }
}

/// Partitioning and placement controls driven by the non-TCC action groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionKnobs {
    pub dmem_in_frac: f64,
    pub dmem_out_frac: f64,
    pub load_weight_scale: f64,
    pub imbalance_weight_scale: f64,
    pub centrality_weight_scale: f64,
    pub rho_matmul: f64,
    pub rho_conv: f64,
    pub rho_general: f64,
    pub hop_weight_scale: f64,
    pub stream_in: f64,
    pub stream_out: f64,
    pub sub_matmul: f64,
    pub allreduce_frac: f64,
}

impl PartitionKnobs {
    /// Range of the placement weight scales.
    pub const SCALE_MAX: f64 = 4.0;
    /// Default partition ratio ρ_base.
    pub const RHO_BASE: f64 = 0.3;
}

impl Default for PartitionKnobs {
    fn default() -> Self {
        PartitionKnobs {
            dmem_in_frac: 0.3,
            dmem_out_frac: 0.3,
            load_weight_scale: 1.0,
            imbalance_weight_scale: 1.0,
            centrality_weight_scale: 1.0,
            rho_matmul: Self::RHO_BASE,
            rho_conv: Self::RHO_BASE,
            rho_general: Self::RHO_BASE,
            hop_weight_scale: 1.0,
            stream_in: 0.0,
            stream_out: 0.0,
            sub_matmul: 0.0,
            allreduce_frac: 0.5,
        }
    }
}

/// Full chip configuration; tiles are stored row-major (`y · M + x`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipConfig {
    pub mesh_w: u32,
    pub mesh_h: u32,
    pub sc_x: u32,
    pub sc_y: u32,
    pub dflit_bits: u32,
    /// Clock, Hz.
    pub f_clk: f64,
    pub tiles: Vec<TccConfig>,
    pub precision_mode: Precision,
    pub batch: u32,
    pub kv: KvStrategy,
    pub alpha_spec: f64,
    pub knobs: PartitionKnobs,
}

impl ChipConfig {
    pub const DFLIT: (u32, u32) = (64, 8192);
    pub const ALPHA_SPEC: (f64, f64) = (1.0, 2.0);

    /// Homogeneous mesh with default chip-level settings.
    pub fn uniform(mesh_w: u32, mesh_h: u32, tile: TccConfig, f_clk: f64) -> Self {
        ChipConfig {
            mesh_w,
            mesh_h,
            sc_x: mesh_w.clamp(1, SC_MAX).min(2),
            sc_y: mesh_h.clamp(1, SC_MAX).min(2),
            dflit_bits: 512,
            f_clk,
            tiles: vec![tile; (mesh_w * mesh_h) as usize],
            precision_mode: Precision::Fp16,
            batch: 1,
            kv: KvStrategy::default(),
            alpha_spec: 1.0,
            knobs: PartitionKnobs::default(),
        }
    }

    pub fn n_cores(&self) -> usize {
        self.tiles.len()
    }

    pub fn tile_xy(&self, i: usize) -> (u32, u32) {
        (i as u32 % self.mesh_w, i as u32 / self.mesh_w)
    }

    pub fn total_wmem_bytes(&self) -> u64 {
        self.tiles.iter().map(TccConfig::wmem_bytes).sum()
    }

    /// All on-chip memory allocated (WMEM + DMEM + IMEM), bytes.
    pub fn total_memory_bytes(&self) -> u64 {
        self.tiles
            .iter()
            .map(|t| t.wmem_bytes() + t.dmem_bytes() + t.imem_bytes())
            .sum()
    }

    /// Arithmetic mean tile, quantized back onto the allowed grid.
    pub fn mean_tile(&self) -> TccConfig {
        let n = self.tiles.len().max(1) as f64;
        let mean = |f: fn(&TccConfig) -> u32| self.tiles.iter().map(|t| f(t) as f64).sum::<f64>() / n;
        let round = |v: f64, (lo, hi): (u32, u32)| (v.round() as u32).clamp(lo, hi);
        let bank = |v: f64, lo: u32, hi: u32| {
            (((v / BANK_KB as f64).round() as u32) * BANK_KB).clamp(lo, hi)
        };
        let vlen_log = self.tiles.iter().map(|t| (t.vlen_bits as f64).log2()).sum::<f64>() / n;
        TccConfig {
            fetch: round(mean(|t| t.fetch), TccConfig::FETCH),
            stanum: round(mean(|t| t.stanum), TccConfig::STANUM),
            vlen_bits: (1u32 << vlen_log.round() as u32).clamp(TccConfig::VLEN.0, TccConfig::VLEN.1),
            dmem_kb: bank(mean(|t| t.dmem_kb), TccConfig::DMEM_KB.0, TccConfig::DMEM_KB.1),
            wmem_kb: bank(mean(|t| t.wmem_kb).ceil(), TccConfig::WMEM_KB.0, u32::MAX - BANK_KB),
            imem_kb: round(mean(|t| t.imem_kb), TccConfig::IMEM_KB),
            xr_wp: round(mean(|t| t.xr_wp), TccConfig::PORT),
            vr_wp: round(mean(|t| t.vr_wp), TccConfig::PORT),
            xdpnum: round(mean(|t| t.xdpnum), TccConfig::PORT),
            vdpnum: round(mean(|t| t.vdpnum), TccConfig::PORT),
        }
    }

    /// Structural validation against a node and, optionally, a workload's
    /// weight footprint.
    pub fn validate(&self, node: &ProcessNode, w_total: Option<u64>) -> Result<()> {
        if !(1..=MESH_MAX).contains(&self.mesh_w) || !(1..=MESH_MAX).contains(&self.mesh_h) {
            return Err(invalid(format!(
                "mesh {}x{} outside [1, {MESH_MAX}]",
                self.mesh_w, self.mesh_h
            )));
        }
        if self.tiles.len() != (self.mesh_w * self.mesh_h) as usize {
            return Err(invalid(format!(
                "expected {} tiles for a {}x{} mesh, got {}",
                self.mesh_w * self.mesh_h,
                self.mesh_w,
                self.mesh_h,
                self.tiles.len()
            )));
        }
        if self.sc_x < 1 || self.sc_y < 1 || self.sc_x > self.mesh_w.min(SC_MAX) || self.sc_y > self.mesh_h.min(SC_MAX) {
            return Err(invalid(format!("supercluster {}x{} does not fit the mesh", self.sc_x, self.sc_y)));
        }
        if !(Self::DFLIT.0..=Self::DFLIT.1).contains(&self.dflit_bits) {
            return Err(invalid(format!("dflit_bits = {} outside [64, 8192]", self.dflit_bits)));
        }
        if !(self.f_clk >= 0.0 && self.f_clk <= node.f_clk_max) {
            return Err(invalid(format!(
                "f_clk = {} Hz outside [0, {}] for {} nm",
                self.f_clk, node.f_clk_max, node.node_nm
            )));
        }
        if !(Self::ALPHA_SPEC.0..=Self::ALPHA_SPEC.1).contains(&self.alpha_spec) {
            return Err(invalid("alpha_spec outside [1, 2]"));
        }
        if self.batch == 0 {
            return Err(invalid("batch must be >= 1"));
        }
        let k = &self.knobs;
        if k.dmem_in_frac < 0.0 || k.dmem_out_frac < 0.0 || k.dmem_in_frac + k.dmem_out_frac > 1.0 + 1e-12 {
            return Err(invalid("DMEM fractions must be >= 0 with f_in + f_out <= 1"));
        }
        if !(KvStrategy::MIN_WINDOW_FRAC..=1.0).contains(&self.kv.window_frac) {
            return Err(invalid("KV window fraction outside [1/64, 1]"));
        }
        for (i, t) in self.tiles.iter().enumerate() {
            t.validate().map_err(|e| invalid(format!("tile {i}: {e}")))?;
        }
        if let Some(w) = w_total {
            let have = self.total_wmem_bytes();
            if have < w {
                return Err(invalid(format!("total WMEM {have} B below workload weights {w} B")));
            }
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Datapath throughput multiplier when running `workload` precision on a
/// `mode` datapath: native support runs at full rate, narrower datapaths
/// emulate at half rate.
pub fn precision_rate(mode: Precision, workload: Precision) -> f64 {
    if mode == Precision::Mixed || precision_bits(mode) >= precision_bits(workload) {
        1.0
    } else {
        0.5
    }
}

/// Logic power and area multiplier of a datapath precision mode.
pub fn precision_cost(mode: Precision) -> f64 {
    match mode {
        Precision::Fp32 => 1.5,
        Precision::Fp16 | Precision::Bf16 => 1.0,
        Precision::Fp8 | Precision::Int8 => 0.75,
        Precision::Mixed => 1.25,
    }
}

fn precision_bits(p: Precision) -> u32 {
    match p {
        Precision::Fp32 | Precision::Mixed => 32,
        Precision::Fp16 | Precision::Bf16 => 16,
        Precision::Fp8 | Precision::Int8 => 8,
    }
}

/// A graph bound to the decoder shape needed for per-token accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub graph: OperatorGraph,
    pub seq_len: usize,
    pub layers: usize,
    pub hidden: usize,
    /// `n_kv_heads · d_head`.
    pub kv_dim: usize,
    pub elem_bytes: usize,
    /// Most frequent node precision.
    pub precision: Precision,
    pub features: WorkloadFeatures,
}

impl Workload {
    pub fn from_spec(spec: &TransformerSpec) -> Result<Self> {
        let graph = crate::graph::gen_transformer(spec)?;
        let features = workload_features(&graph);
        Ok(Workload {
            graph,
            seq_len: spec.seq_len,
            layers: spec.layers,
            hidden: spec.hidden,
            kv_dim: spec.kv_dim(),
            elem_bytes: spec.precision.elem_bytes() as usize,
            precision: spec.precision,
            features,
        })
    }

    /// Recovers the decoder shape from a graph. The sequence length comes
    /// from `seq_len`, else from the int32 token input of an Embed node,
    /// else 1. Layers are Attention nodes; hidden and KV widths come from
    /// the attention output and its second and third inputs.
    pub fn from_graph(graph: OperatorGraph, seq_len: Option<usize>) -> Self {
        let features = workload_features(&graph);
        let precision = Precision::ALL
            .into_iter()
            .max_by(|a, b| {
                features.precision_dist[a.index()]
                    .partial_cmp(&features.precision_dist[b.index()])
                    .unwrap()
                    .then(b.index().cmp(&a.index()))
            })
            .unwrap_or_default();
        let elem = precision.elem_bytes().max(1) as usize;
        let seq = seq_len
            .or_else(|| {
                graph
                    .nodes()
                    .iter()
                    .find(|n| n.kind == OpKind::Embed && n.input_bytes > 0)
                    .map(|n| (n.input_bytes / 4) as usize)
            })
            .unwrap_or(1)
            .max(1);
        let attn: Vec<usize> = graph
            .nodes()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == OpKind::Attention)
            .map(|(i, _)| i)
            .collect();
        let (mut hidden, mut kv_dim) = (0, 0);
        if let Some(&a) = attn.first() {
            let id = graph.nodes()[a].id;
            hidden = graph.nodes()[a].output_bytes as usize / (seq * elem);
            let ins: Vec<u64> = graph.edges().iter().filter(|e| e.dst == id).map(|e| e.bytes).collect();
            if ins.len() >= 3 {
                kv_dim = ins[1] as usize / (seq * elem);
            }
        }
        Workload {
            graph,
            seq_len: seq,
            layers: attn.len(),
            hidden,
            kv_dim,
            elem_bytes: elem,
            precision,
            features,
        }
    }

    pub fn w_total(&self) -> u64 {
        self.graph.w_total()
    }

    /// KV-cache description under a strategy; `None` without attention.
    pub fn kv_spec(&self, kv: &KvStrategy) -> Option<KvSpec> {
        if self.layers == 0 || self.kv_dim == 0 {
            return None;
        }
        let mut spec = KvSpec::new(self.layers, 1, self.kv_dim, self.elem_bytes, self.seq_len);
        spec.quant_bits = kv.quant;
        let w = ((kv.window_frac * self.seq_len as f64).round() as usize).clamp(1, self.seq_len);
        spec.windows = Some(vec![w; self.layers]);
        Some(spec)
    }

    /// Uncompressed per-token KV bytes.
    pub fn kv_bytes_per_token(&self) -> u64 {
        self.kv_spec(&KvStrategy::default())
            .map(|s| kv_bytes_per_token(&s))
            .unwrap_or(0)
    }

    /// `2 · hidden · layers · elem_bytes`.
    pub fn act_bytes_per_token(&self) -> u64 {
        (2 * self.hidden * self.layers * self.elem_bytes) as u64
    }

    /// Activation input per hosting tile, `2 · hidden · elem_bytes`.
    pub fn act_input_bytes(&self) -> u64 {
        (2 * self.hidden * self.elem_bytes) as u64
    }

    /// `W_total + KV_b/t + activation bytes`, before compaction.
    pub fn bytes_per_token(&self) -> u64 {
        self.w_total() + self.kv_bytes_per_token() + self.act_bytes_per_token()
    }
}

/// `Σ edge bytes / Σ FLOPs`; zero without edges or FLOPs.
pub fn comm_ratio(g: &OperatorGraph) -> f64 {
    let flops = g.total_flops();
    if flops == 0 {
        return 0.0;
    }
    g.total_edge_bytes() as f64 / flops as f64
}
