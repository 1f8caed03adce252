//! Node-level statistics over exploration results: log-log power-law
//! fits, Pearson correlations, efficiency ratios and best/worst
//! comparison.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::PpaEstimate;
use crate::error::{invalid, Error, Result};

/// `y = c·x^k` fitted by least squares on `(ln x, ln y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub k: f64,
    pub c: f64,
    pub r2: f64,
    /// `y` has zero variance in log space; `r2` is reported as 1.
    pub degenerate: bool,
}

pub fn powerlaw_fit(x: &[f64], y: &[f64]) -> Result<PowerLawFit> {
    if x.len() != y.len() {
        return Err(invalid(format!("powerlaw_fit: {} x values but {} y values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(invalid("powerlaw_fit needs at least 3 points"));
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(invalid("powerlaw_fit needs finite positive x and y"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(invalid("powerlaw_fit: all x values are equal"));
    }
    let k = sxy / sxx;
    let ln_c = my - k * mx;
    let ss_res: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - (ln_c + k * a)).powi(2)).sum();
    let ss_tot: f64 = ly.iter().map(|b| (b - my).powi(2)).sum();
    let degenerate = ss_tot == 0.0;
    Ok(PowerLawFit {
        k,
        c: ln_c.exp(),
        r2: if degenerate { 1.0 } else { 1.0 - ss_res / ss_tot },
        degenerate,
    })
}

/// Sample correlation; zero when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let nf = n as f64;
    let mx = x[..n].iter().sum::<f64>() / nf;
    let my = y[..n].iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

pub const METRICS: [&str; 5] = ["power", "perf", "area", "score", "tok_s"];

/// Best configuration at one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node_nm: u32,
    pub power_mw: f64,
    pub perf_gops: f64,
    pub area_mm2: f64,
    pub score: f64,
    pub tok_s: f64,
}

impl NodeMetrics {
    /// Values in [`METRICS`] order.
    pub fn values(&self) -> [f64; 5] {
        [self.power_mw, self.perf_gops, self.area_mm2, self.score, self.tok_s]
    }
}

impl From<&PpaEstimate> for NodeMetrics {
    fn from(p: &PpaEstimate) -> Self {
        NodeMetrics {
            node_nm: p.node_nm,
            power_mw: p.power_mw,
            perf_gops: p.perf_gops,
            area_mm2: p.area_mm2,
            score: p.score,
            tok_s: p.tok_s,
        }
    }
}

/// Symmetric with unit diagonal.
pub fn pearson_matrix(rows: &[NodeMetrics]) -> [[f64; 5]; 5] {
    let cols: Vec<Vec<f64>> = (0..5).map(|j| rows.iter().map(|r| r.values()[j]).collect()).collect();
    let mut m = [[0.0; 5]; 5];
    for i in 0..5 {
        m[i][i] = 1.0;
        for j in i + 1..5 {
            let r = pearson(&cols[i], &cols[j]);
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub perf_per_mw: f64,
    pub tok_per_mw: f64,
    pub perf_per_area: f64,
}

pub fn efficiency(m: &NodeMetrics) -> Result<Efficiency> {
    if m.power_mw == 0.0 {
        return Err(Error::ZeroDivisor("power_mw"));
    }
    if m.area_mm2 == 0.0 {
        return Err(Error::ZeroDivisor("area_mm2"));
    }
    Ok(Efficiency {
        perf_per_mw: m.perf_gops / m.power_mw,
        tok_per_mw: m.tok_s / m.power_mw,
        perf_per_area: m.perf_gops / m.area_mm2,
    })
}

/// Lowest-score node against highest-score node. Ratios are oriented so
/// that values above 1 favour the best node, except `power_ratio`
/// (best / worst draw).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossNodeReport {
    pub best: NodeMetrics,
    pub worst: NodeMetrics,
    pub perf_ratio: f64,
    pub area_ratio: f64,
    pub score_ratio: f64,
    pub power_ratio: f64,
    pub tok_ratio: f64,
}

pub fn cross_node_report(rows: &[NodeMetrics]) -> Result<CrossNodeReport> {
    if rows.is_empty() {
        return Err(invalid("cross_node_report needs at least one node"));
    }
    let mut best = rows[0];
    let mut worst = rows[0];
    for r in &rows[1..] {
        if r.score < best.score {
            best = *r;
        }
        if r.score > worst.score {
            worst = *r;
        }
    }
    let ratio = |a: f64, b: f64, what: &'static str| {
        if b == 0.0 {
            Err(Error::ZeroDivisor(what))
        } else {
            Ok(a / b)
        }
    };
    Ok(CrossNodeReport {
        best,
        worst,
        perf_ratio: ratio(best.perf_gops, worst.perf_gops, "perf_gops")?,
        area_ratio: ratio(worst.area_mm2, best.area_mm2, "area_mm2")?,
        score_ratio: ratio(worst.score, best.score, "score")?,
        power_ratio: ratio(best.power_mw, worst.power_mw, "power_mw")?,
        tok_ratio: ratio(best.tok_s, worst.tok_s, "tok_s")?,
    })
}

fn parse_node(s: &str) -> Result<u32> {
    s.trim_end_matches("nm")
        .parse()
        .map_err(|_| invalid(format!("bad process node {s:?}")))
}

fn parse_f(s: &str, col: &str) -> Result<f64> {
    s.parse().map_err(|_| invalid(format!("bad {col} value {s:?}")))
}

/// Rows of a `ppa_by_node.csv`, sorted by node.
pub fn read_ppa_by_node(path: &Path) -> Result<Vec<NodeMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| invalid(format!("{}: missing column {name}", path.display())))
    };
    let (cn, cp, cf, ca, cs, ct) = (
        col("process_node")?,
        col("power_mw")?,
        col("perf_gops")?,
        col("area_mm2")?,
        col("ppa_score")?,
        col("tok_s")?,
    );
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(NodeMetrics {
            node_nm: parse_node(&rec[cn])?,
            power_mw: parse_f(&rec[cp], "power_mw")?,
            perf_gops: parse_f(&rec[cf], "perf_gops")?,
            area_mm2: parse_f(&rec[ca], "area_mm2")?,
            score: parse_f(&rec[cs], "ppa_score")?,
            tok_s: parse_f(&rec[ct], "tok_s")?,
        });
    }
    rows.sort_by_key(|r| r.node_nm);
    Ok(rows)
}

pub const STATISTICAL_HEADER: [&str; 5] = ["analysis", "metric", "slope_or_corr", "intercept_or_const", "r2_or_note"];
pub const EFFICIENCY_HEADER: [&str; 5] = ["node", "perf_per_mw", "tok_per_mw", "perf_per_area", "ppa_score"];
pub const BASELINE_HEADER: [&str; 5] = ["node", "power_mw", "perf_gops", "area_mm2", "ppa_score"];

pub const STATISTICAL_FILE: &str = "statistical_analysis.csv";
pub const EFFICIENCY_FILE: &str = "efficiency_metrics.csv";
pub const BASELINE_FILE: &str = "baseline_comparison.csv";
pub const CORRELATION_FILE: &str = "correlation_matrix.csv";
pub const CROSS_NODE_FILE: &str = "cross_node_report.json";

/// Writes the analysis tables for `rows` into `dir` and returns their paths.
pub fn write_analysis(dir: &Path, rows: &[NodeMetrics]) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(invalid("no node results to analyze"));
    }
    std::fs::create_dir_all(dir)?;
    let nodes: Vec<f64> = rows.iter().map(|r| r.node_nm as f64).collect();
    let corr = pearson_matrix(rows);

    let stat = dir.join(STATISTICAL_FILE);
    let mut w = csv::Writer::from_path(&stat)?;
    w.write_record(STATISTICAL_HEADER)?;
    for (j, name) in METRICS.iter().enumerate() {
        let y: Vec<f64> = rows.iter().map(|r| r.values()[j]).collect();
        match powerlaw_fit(&nodes, &y) {
            Ok(f) => w.write_record([
                "powerlaw".to_string(),
                name.to_string(),
                f.k.to_string(),
                f.c.to_string(),
                if f.degenerate {
                    "1 (constant)".to_string()
                } else {
                    f.r2.to_string()
                },
            ])?,
            Err(e) => w.write_record(["powerlaw", name, "", "", &e.to_string()])?,
        }
    }
    for i in 0..5 {
        for j in i + 1..5 {
            w.write_record([
                "pearson".to_string(),
                format!("{}~{}", METRICS[i], METRICS[j]),
                corr[i][j].to_string(),
                String::new(),
                format!("n={}", rows.len()),
            ])?;
        }
    }
    w.flush()?;

    let cm = dir.join(CORRELATION_FILE);
    let mut w = csv::Writer::from_path(&cm)?;
    let mut head = vec!["metric"];
    head.extend(METRICS);
    w.write_record(&head)?;
    for i in 0..5 {
        let mut rec = vec![METRICS[i].to_string()];
        rec.extend(corr[i].iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let eff = dir.join(EFFICIENCY_FILE);
    let mut w = csv::Writer::from_path(&eff)?;
    w.write_record(EFFICIENCY_HEADER)?;
    for r in rows {
        let e = efficiency(r)?;
        w.write_record([
            format!("{}nm", r.node_nm),
            e.perf_per_mw.to_string(),
            e.tok_per_mw.to_string(),
            e.perf_per_area.to_string(),
            r.score.to_string(),
        ])?;
    }
    w.flush()?;

    let base = dir.join(BASELINE_FILE);
    let mut w = csv::Writer::from_path(&base)?;
    w.write_record(BASELINE_HEADER)?;
    for r in rows {
        w.write_record([
            format!("{}nm", r.node_nm),
            r.power_mw.to_string(),
            r.perf_gops.to_string(),
            r.area_mm2.to_string(),
            r.score.to_string(),
        ])?;
    }
    w.flush()?;

    let cross = dir.join(CROSS_NODE_FILE);
    let rep = cross_node_report(rows)?;
    std::fs::write(&cross, serde_json::to_string_pretty(&rep)? + "\n")?;
    Ok(vec![stat, cm, eff, base, cross])
}
