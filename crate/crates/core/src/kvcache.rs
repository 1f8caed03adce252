//! KV-cache footprint, compaction (quantization, sliding windows, paging) and
//! the resulting memory-traffic adjustment.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum QuantBits {
    #[default]
    B16,
    B8,
    B4,
}

impl QuantBits {
    pub const ALL: [QuantBits; 3] = [QuantBits::B16, QuantBits::B8, QuantBits::B4];

    pub fn bits(self) -> u32 {
        match self {
            QuantBits::B16 => 16,
            QuantBits::B8 => 8,
            QuantBits::B4 => 4,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            16 => Ok(QuantBits::B16),
            8 => Ok(QuantBits::B8),
            4 => Ok(QuantBits::B4),
            b => Err(invalid(format!("KV quantization must be 16, 8 or 4 bits, got {b}"))),
        }
    }

    pub fn index(self) -> usize {
        QuantBits::ALL.iter().position(|q| *q == self).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvSpec {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    /// Bytes per element before quantization.
    pub elem_bytes: usize,
    pub seq_len: usize,
    pub quant_bits: QuantBits,
    /// Per-layer sliding windows; `None` keeps the full context everywhere.
    pub windows: Option<Vec<usize>>,
    pub page_bytes: Option<u64>,
}

impl KvSpec {
    pub fn new(n_layers: usize, n_kv_heads: usize, d_head: usize, elem_bytes: usize, seq_len: usize) -> Self {
        KvSpec {
            n_layers,
            n_kv_heads,
            d_head,
            elem_bytes,
            seq_len,
            quant_bits: QuantBits::B16,
            windows: None,
            page_bytes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_kv_heads == 0 || self.d_head == 0 || self.elem_bytes == 0 || self.seq_len == 0 {
            return Err(invalid("KV spec counts must be >= 1"));
        }
        if let Some(w) = &self.windows {
            if w.len() != self.n_layers {
                return Err(invalid(format!(
                    "expected {} per-layer windows, got {}",
                    self.n_layers,
                    w.len()
                )));
            }
            if w.contains(&0) {
                return Err(invalid("window sizes must be >= 1"));
            }
        }
        if self.page_bytes == Some(0) {
            return Err(invalid("page size must be >= 1 byte"));
        }
        Ok(())
    }

    /// Per-token bytes of one layer (keys and values).
    pub fn layer_bytes_per_token(&self) -> u64 {
        2 * (self.n_kv_heads * self.d_head * self.elem_bytes) as u64
    }

    /// Effective windows: the configured list or the full sequence.
    pub fn window_list(&self) -> Vec<usize> {
        self.windows
            .clone()
            .unwrap_or_else(|| vec![self.seq_len; self.n_layers])
    }

    pub fn mean_window(&self) -> f64 {
        let w = self.window_list();
        w.iter().map(|&x| x.min(self.seq_len) as f64).sum::<f64>() / w.len() as f64
    }

    /// Per-head `s_K`, `s_V` scale storage (fp32) when quantized.
    pub fn scale_overhead_bytes(&self) -> u64 {
        if self.quant_bits == QuantBits::B16 {
            0
        } else {
            (self.n_layers * self.n_kv_heads * 2 * 4) as u64
        }
    }

    /// `κ` for this spec against a 16-bit baseline.
    pub fn compaction(&self) -> f64 {
        compaction_factor(16.0, self.quant_bits.bits() as f64, self.seq_len as f64, self.mean_window())
    }

    /// Footprint after windowing and quantization, including scale storage.
    pub fn compacted_total(&self) -> u64 {
        let windowed = windowed_bytes(self, self.seq_len, &self.window_list());
        // elem_bytes is the 16-bit baseline width
        let q = self.quant_bits.bits() as u64;
        (windowed * q).div_ceil(16) + self.scale_overhead_bytes()
    }
}

/// `2 · n_layers · n_kv_heads · d_head · elem_bytes`.
pub fn kv_bytes_per_token(spec: &KvSpec) -> u64 {
    spec.n_layers as u64 * spec.layer_bytes_per_token()
}

/// `L · KV_b/t`.
pub fn kv_total(bytes_per_token: u64, seq_len: u64) -> u64 {
    seq_len * bytes_per_token
}

/// `Σ_ℓ min(L, W_ℓ) · KV_b/t^(ℓ)`.
pub fn windowed_bytes(spec: &KvSpec, seq_len: usize, windows: &[usize]) -> u64 {
    let per_layer = spec.layer_bytes_per_token();
    windows
        .iter()
        .map(|&w| seq_len.min(w) as u64 * per_layer)
        .sum()
}

/// `⌈total / page_bytes⌉`.
pub fn page_count(total: u64, page_bytes: u64) -> Result<u64> {
    if page_bytes == 0 {
        return Err(invalid("page size must be >= 1 byte"));
    }
    Ok(total.div_ceil(page_bytes))
}

/// `κ = (b_orig / b_quant) · (L / W̄)`.
pub fn compaction_factor<T: Scalar>(b_orig: T, b_quant: T, seq_len: T, mean_window: T) -> T {
    (b_orig / b_quant) * (seq_len / mean_window)
}

/// `B'_tok = B_tok − (1 − 1/κ) · KV_b/t`.
pub fn adjusted_bytes_per_token<T: Scalar>(b_tok: T, kv_bt: T, kappa: T) -> T {
    b_tok - (T::one() - kappa.recip()) * kv_bt
}

/// DMEM split of one tile in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DmemBytes {
    pub input: u64,
    pub output: u64,
    pub scratch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileKvStatus {
    pub required: u64,
    pub available: u64,
    /// Bytes that must live in WMEM instead.
    pub spill: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvDmemReport {
    pub tiles: Vec<TileKvStatus>,
    pub feasible: bool,
    pub total_spill: u64,
}

/// Checks `DMEM_in ≥ KV_total / N_active + ActInput` on every hosting tile.
pub fn kv_dmem_check(kv_total_bytes: u64, act_input: u64, tiles: &[DmemBytes]) -> Result<KvDmemReport> {
    if tiles.is_empty() {
        return Err(invalid("KV cache needs at least one active tile"));
    }
    let share = kv_total_bytes.div_ceil(tiles.len() as u64);
    let required = share + act_input;
    let statuses: Vec<TileKvStatus> = tiles
        .iter()
        .map(|t| TileKvStatus {
            required,
            available: t.input,
            spill: required.saturating_sub(t.input).min(share),
        })
        .collect();
    let total_spill = statuses.iter().map(|s| s.spill).sum();
    let feasible = statuses.iter().all(|s| s.available >= s.required);
    Ok(KvDmemReport {
        tiles: statuses,
        feasible,
        total_spill,
    })
}
