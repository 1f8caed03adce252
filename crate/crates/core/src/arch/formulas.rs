//! Closed-form memory, NoC and throughput relations, generic over the scalar
//! type.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Data-memory weight in the pressure score.
pub const LAMBDA_DMEM: f64 = 0.5;

/// Splits a DMEM budget into input, output and scratch buffers. The scratch
/// buffer takes the remainder so the parts always add up to `d_total`.
pub fn dmem_split<T: Scalar>(d_total: T, f_in: T, f_out: T) -> Result<(T, T, T)> {
    if f_in < T::zero() || f_out < T::zero() || f_in + f_out > T::one() {
        return Err(invalid("DMEM fractions must be >= 0 with f_in + f_out <= 1"));
    }
    let input = f_in * d_total;
    let output = f_out * d_total;
    let scratch = d_total - input - output;
    Ok((input, output, scratch))
}

/// Integer variant in bytes; rounding error lands in scratch.
pub fn dmem_split_bytes(d_total: u64, f_in: f64, f_out: f64) -> Result<(u64, u64, u64)> {
    let (i, o, _) = dmem_split(d_total as f64, f_in, f_out)?;
    let input = (i.floor() as u64).min(d_total);
    let output = (o.floor() as u64).min(d_total - input);
    Ok((input, output, d_total - input - output))
}

/// `min(BW_peak, V / (C / f))`.
pub fn bw_eff<T: Scalar>(bw_peak: T, volume: T, cycles: T, f_clk: T) -> T {
    bw_peak.min(volume / (cycles / f_clk))
}

/// `W_used/W_alloc + λ_d · D_used/D_alloc`.
pub fn mem_pressure<T: Scalar>(w_used: T, w_alloc: T, d_used: T, d_alloc: T) -> T {
    w_used / w_alloc + T::lit(LAMBDA_DMEM) * d_used / d_alloc
}

/// `min(M, N) · W_DFLIT · f` in bits/s.
pub fn bisection_bw<T: Scalar>(mesh_w: T, mesh_h: T, dflit_bits: T, f_clk: T) -> T {
    mesh_w.min(mesh_h) * dflit_bits * f_clk
}

/// `h̄ = (M + N) / 3`.
pub fn avg_hops<T: Scalar>(mesh_w: T, mesh_h: T) -> T {
    (mesh_w + mesh_h) / T::lit(3.0)
}

/// `h̄ · L_hop + L_setup` cycles.
pub fn noc_latency<T: Scalar>(mesh_w: T, mesh_h: T, hop_lat: T, setup_lat: T) -> T {
    avg_hops(mesh_w, mesh_h) * hop_lat + setup_lat
}

/// Effective tensor multipliers of one tile, `min(TM_FP16, VLEN/16)`.
pub fn tensor_multipliers<T: Scalar>(tm_fp16: T, vlen_bits: T) -> T {
    tm_fp16.min(vlen_bits / T::lit(16.0))
}

/// `Σ_i M_i · 2 · f · η_∥ · α_spec / FLOPs_per_token` given per-tile `M_i`.
pub fn compute_ceiling<T: Scalar>(multipliers: &[T], f_clk: T, eta_par: T, alpha_spec: T, flops_per_token: T) -> T {
    let total: T = multipliers.iter().fold(T::zero(), |acc, &m| acc + m);
    total * T::lit(2.0) * f_clk * eta_par * alpha_spec / flops_per_token
}

/// `Σ_i BW_eff,i / Bytes_per_token`.
pub fn memory_ceiling<T: Scalar>(bw_eff_per_tile: &[T], bytes_per_token: T) -> T {
    let total: T = bw_eff_per_tile.iter().fold(T::zero(), |acc, &b| acc + b);
    total / bytes_per_token
}

/// `(BW_bisect / 8) / CrossTileBytes_per_token`; unbounded without
/// cross-tile traffic.
pub fn noc_ceiling<T: Scalar>(bisection_bits_per_s: T, cross_tile_bytes_per_token: T) -> T {
    if cross_tile_bytes_per_token <= T::zero() {
        return T::infinity();
    }
    bisection_bits_per_s / T::lit(8.0) / cross_tile_bytes_per_token
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Binding {
    Compute,
    Memory,
    NoC,
}

impl Binding {
    pub fn name(self) -> &'static str {
        match self {
            Binding::Compute => "compute",
            Binding::Memory => "memory",
            Binding::NoC => "noc",
        }
    }
}

/// Realized throughput: the smallest ceiling, ties broken
/// Compute < Memory < NoC.
pub fn throughput<T: Scalar>(compute: T, memory: T, noc: T) -> (T, Binding) {
    let mut best = (compute, Binding::Compute);
    for cand in [(memory, Binding::Memory), (noc, Binding::NoC)] {
        if cand.0 < best.0 {
            best = cand;
        }
    }
    best
}

/// Min-max bounds of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    /// `(x - min) / (max - min)`, clipped to `[0, 1]`.
    pub fn normalize<T: Scalar>(&self, x: T) -> T {
        let (lo, hi) = (T::lit(self.min), T::lit(self.max));
        ((x - lo) / (hi - lo)).max(T::zero()).min(T::one())
    }

    pub fn is_valid(&self) -> bool {
        self.max > self.min && self.min.is_finite() && self.max.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRanges {
    pub perf: Range,
    pub power: Range,
    pub area: Range,
}

/// User PPA weights `(w_perf, w_power, w_area)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpaWeights {
    pub perf: f64,
    pub power: f64,
    pub area: f64,
}

impl PpaWeights {
    /// High-performance profile.
    pub const HIGH_PERF: PpaWeights = PpaWeights {
        perf: 0.4,
        power: 0.4,
        area: 0.2,
    };
    /// Low-power profile.
    pub const LOW_POWER: PpaWeights = PpaWeights {
        perf: 0.2,
        power: 0.6,
        area: 0.2,
    };

    pub fn new(perf: f64, power: f64, area: f64) -> Self {
        PpaWeights { perf, power, area }
    }

    /// `(α, β, γ)`: the weights normalized to sum to one.
    pub fn normalized<T: Scalar>(&self) -> Result<(T, T, T)> {
        let (p, w, a) = (T::lit(self.perf), T::lit(self.power), T::lit(self.area));
        if p < T::zero() || w < T::zero() || a < T::zero() {
            return Err(invalid("PPA weights must be >= 0"));
        }
        let sum = p + w + a;
        if sum <= T::zero() {
            return Err(invalid("PPA weights must not all be zero"));
        }
        Ok((p / sum, w / sum, a / sum))
    }

    pub fn scaled(&self, c: f64) -> Self {
        PpaWeights::new(self.perf * c, self.power * c, self.area * c)
    }
}

impl Default for PpaWeights {
    fn default() -> Self {
        PpaWeights::HIGH_PERF
    }
}

/// Lower-is-better composite: `β·P_power + γ·A_norm + α·(1 − P_perf)`.
pub fn ppa_score<T: Scalar>(perf: T, power: T, area: T, ranges: &NormRanges, weights: &PpaWeights) -> Result<T> {
    if !(ranges.perf.is_valid() && ranges.power.is_valid() && ranges.area.is_valid()) {
        return Err(invalid("normalization ranges need max > min"));
    }
    let (alpha, beta, gamma) = weights.normalized::<T>()?;
    let perf_n = ranges.perf.normalize(perf);
    let power_n = ranges.power.normalize(power);
    let area_n = ranges.area.normalize(area);
    Ok(beta * power_n + gamma * area_n + alpha * (T::one() - perf_n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dmem_split_examples() {
        assert_eq!(dmem_split(100.0, 0.3, 0.3).unwrap(), (30.0, 30.0, 40.0));
        assert_eq!(dmem_split(100.0, 0.0, 0.0).unwrap(), (0.0, 0.0, 100.0));
        assert_eq!(dmem_split(64.0f32, 0.5, 0.25).unwrap(), (32.0, 16.0, 16.0));
        assert!(dmem_split(1.0, 0.7, 0.7).is_err());
        assert!(dmem_split(1.0, -0.1, 0.2).is_err());
        let (i, o, s) = dmem_split_bytes(1000, 1.0 / 3.0, 1.0 / 3.0).unwrap();
        assert_eq!(i + o + s, 1000);
    }

    #[test]
    fn bw_examples() {
        assert_eq!(bw_eff(100.0, 1000.0, 100.0, 1.0), 10.0);
        assert_eq!(bw_eff(5.0, 1000.0, 1.0, 1.0), 5.0);
        assert!((bw_eff(1e12, 2.56e8, 1e6, 1e9) - 2.56e11f64).abs() < 1.0);
    }

    #[test]
    fn pressure_examples() {
        assert_eq!(mem_pressure(1.0, 1.0, 1.0, 1.0), 1.5);
        assert_eq!(mem_pressure(0.0, 1.0, 0.0, 1.0), 0.0);
        assert_eq!(mem_pressure(3.0, 4.0, 1.0, 2.0), 1.0);
    }

    #[test]
    fn noc_examples() {
        assert_eq!(bisection_bw(4.0, 5.0, 2048.0, 1e9), 8.192e12);
        assert_eq!(bisection_bw(1.0, 1.0, 64.0, 1.0), 64.0);
        assert!((bisection_bw(41.0, 42.0, 2048.0, 1e9) - 8.3968e13f64).abs() < 1.0);
        assert_eq!(avg_hops(4.0, 5.0), 3.0);
        assert_eq!(avg_hops(1.0, 2.0), 1.0);
        assert!((avg_hops(41.0, 42.0) - 27.666_666_666_666_668f64).abs() < 1e-12);
        assert_eq!(noc_latency(4.0, 5.0, 2.0, 4.0), 10.0);
    }

    #[test]
    fn ceilings() {
        let m = [tensor_multipliers(64.0f64, 2048.0)];
        assert_eq!(compute_ceiling(&m, 1e9, 1.0, 1.0, 1e9), 128.0);
        assert_eq!(tensor_multipliers(64.0, 128.0), 8.0);
        let base = compute_ceiling(&m, 1e9, 0.8, 1.0, 1e9);
        let spec = compute_ceiling(&m, 1e9, 0.8, 1.56, 1e9);
        assert!((spec / base - 1.56).abs() < 1e-12);
        assert_eq!(memory_ceiling(&[4e11, 6e11], 1e9), 1000.0);
        assert_eq!(noc_ceiling(8e12, 1e9), 1000.0);
        assert_eq!(noc_ceiling(8e12, 0.0), f64::INFINITY);
        assert_eq!(noc_ceiling(2.0 * 8e12, 1e9), 2000.0);
    }

    #[test]
    fn binding_rule() {
        assert_eq!(throughput(100.0, 200.0, 300.0), (100.0, Binding::Compute));
        assert_eq!(throughput(5.0, 2.0, 9.0), (2.0, Binding::Memory));
        assert_eq!(throughput(7.0, 7.0, 7.0), (7.0, Binding::Compute));
        assert_eq!(throughput(9.0, 7.0, 7.0), (7.0, Binding::Memory));
        assert_eq!(throughput(9.0, 8.0, 7.0), (7.0, Binding::NoC));
    }

    #[test]
    fn score_corners() {
        let r = NormRanges {
            perf: Range::new(0.0, 10.0),
            power: Range::new(0.0, 10.0),
            area: Range::new(0.0, 10.0),
        };
        let w = PpaWeights::HIGH_PERF;
        assert_eq!(w.normalized::<f64>().unwrap(), (0.4, 0.4, 0.2));
        assert_eq!(ppa_score(10.0, 0.0, 0.0, &r, &w).unwrap(), 0.0);
        assert!((ppa_score(0.0, 10.0, 10.0, &r, &w).unwrap() - 1.0f64).abs() < 1e-15);
        let s1: f64 = ppa_score(3.0, 4.0, 5.0, &r, &w).unwrap();
        let s2: f64 = ppa_score(3.0, 4.0, 5.0, &r, &w.scaled(7.5)).unwrap();
        assert!((s1 - s2).abs() < 1e-15);
        assert!(ppa_score(1.0, 1.0, 1.0, &r, &PpaWeights::new(0.0, 0.0, 0.0)).is_err());
        let bad = NormRanges { perf: Range::new(1.0, 1.0), ..r };
        assert!(ppa_score(1.0, 1.0, 1.0, &bad, &w).is_err());
    }
}
