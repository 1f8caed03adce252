//! Run configuration: built-in defaults, optional JSON file, command-line
//! overrides, and the resolved echo written next to the artifacts.

use std::path::Path;

use meshdse::arch::{PpaWeights, Workload};
use meshdse::graph::{load_graph, TransformerSpec};
use meshdse::procnode::{find_node, ProcessNode, NODES_NM};
use meshdse::rlenv::Constraints;
use meshdse::search::RunConfig;
use meshdse::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Hp,
    Lp,
}

impl Mode {
    pub fn weights(self) -> PpaWeights {
        match self {
            Mode::Hp => PpaWeights::HIGH_PERF,
            Mode::Lp => PpaWeights::LOW_POWER,
        }
    }
}

/// Every field optional so a file can set any subset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub workload: Option<String>,
    pub nodes: Option<Vec<u32>>,
    pub budget: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub constraints: Option<String>,
    pub jobs: Option<usize>,
    pub warmup: Option<usize>,
    pub mpc: Option<bool>,
    pub surrogate_gate: Option<bool>,
    pub hidden: Option<Vec<usize>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Fields set in `over` replace those in `self`.
    pub fn overlay(self, over: FileConfig) -> FileConfig {
        FileConfig {
            workload: over.workload.or(self.workload),
            nodes: over.nodes.or(self.nodes),
            budget: over.budget.or(self.budget),
            seed: over.seed.or(self.seed),
            mode: over.mode.or(self.mode),
            constraints: over.constraints.or(self.constraints),
            jobs: over.jobs.or(self.jobs),
            warmup: over.warmup.or(self.warmup),
            mpc: over.mpc.or(self.mpc),
            surrogate_gate: over.surrogate_gate.or(self.surrogate_gate),
            hidden: over.hidden.or(self.hidden),
        }
    }
}

/// Fully resolved settings. `jobs` only affects scheduling and is left out
/// of the run id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub workload: String,
    pub nodes: Vec<u32>,
    pub budget: usize,
    pub seed: u64,
    pub mode: Mode,
    pub weights: PpaWeights,
    pub constraints: Constraints,
    pub run: RunConfig,
    #[serde(skip)]
    pub jobs: usize,
}

pub const DEFAULT_WORKLOAD: &str = "toy";
pub const DEFAULT_BUDGET: usize = 500;

pub fn load_workload(name: &str) -> Result<Workload> {
    let p = Path::new(name);
    if p.is_file() {
        return Ok(Workload::from_graph(load_graph(p)?, None));
    }
    match TransformerSpec::preset(name) {
        Some(spec) => Workload::from_spec(&spec),
        None => Err(Error::Validation(format!(
            "workload {name:?} is neither a graph file nor a preset (toy, llama8b-toy, llama8b)"
        ))),
    }
}

pub fn resolve_nodes(table: &[ProcessNode], nodes: &[u32]) -> Result<Vec<ProcessNode>> {
    nodes.iter().map(|&n| find_node(table, n).cloned()).collect()
}

impl Resolved {
    pub fn build(cfg: FileConfig, table: &[ProcessNode], wl: &Workload) -> Result<Self> {
        let mode = cfg.mode.unwrap_or(Mode::Hp);
        let weights = mode.weights();
        let base = match &cfg.constraints {
            Some(path) => Constraints::from_json_str(&std::fs::read_to_string(path)?)?,
            None => {
                let params = meshdse::arch::EvalParams::default();
                Constraints::for_workload(table, wl, &params)?
            }
        };
        let constraints = base.with_weights(weights);
        let nodes = cfg.nodes.unwrap_or_else(|| NODES_NM.to_vec());
        resolve_nodes(table, &nodes)?;
        let budget = cfg.budget.unwrap_or(DEFAULT_BUDGET);
        let seed = cfg.seed.unwrap_or(0);
        let mut run = RunConfig::new(budget, seed);
        run.warmup = cfg.warmup;
        run.mpc = cfg.mpc.unwrap_or(true);
        run.surrogate_gate = cfg.surrogate_gate.unwrap_or(false);
        if let Some(h) = cfg.hidden {
            run.sac.hidden = h;
        }
        run.validate()?;
        Ok(Resolved {
            workload: cfg.workload.unwrap_or_else(|| DEFAULT_WORKLOAD.to_string()),
            nodes,
            budget,
            seed,
            mode,
            weights,
            constraints,
            run,
            jobs: cfg.jobs.unwrap_or(1).max(1),
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("resolved config serializes") + "\n"
    }

    /// `s<seed>-<first 12 hex digits of SHA-256 of the resolved config>`.
    pub fn run_id(&self) -> String {
        let digest = Sha256::digest(self.to_json_string().as_bytes());
        let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        format!("s{}-{hex}", self.seed)
    }
}
