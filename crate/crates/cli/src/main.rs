//! `meshdse` command-line front end.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use meshdse::analysis::{read_ppa_by_node, write_analysis};
use meshdse::graph::{gen_transformer, save_graph, Precision, TransformerSpec};
use meshdse::procnode::{builtin_table, find_node};
use meshdse::rlenv::{action_table, state_table, DISC_CHOICES, DISC_TABLE};
use meshdse::search::{
    convergence_check, read_training_csv, run_all, run_strategy, write_comparison_csv, write_node_artifacts,
    write_run_tables, Strategy,
};
use meshdse::{Error, Result};

use config::{load_workload, FileConfig, Mode, Resolved};

#[derive(Parser)]
#[command(name = "meshdse", version, about = "Design-space exploration for 2D-mesh AI accelerators")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a transformer operator graph as JSON.
    GenWorkload(GenArgs),
    /// Search accelerator configurations at one or more process nodes.
    Explore(ExploreArgs),
    /// Compare search strategies at one node over several seeds.
    Baseline(BaselineArgs),
    /// Fit scaling laws and correlations over an explore run.
    Analyze(AnalyzeArgs),
    /// Print the state-vector layout.
    DescribeState,
    /// Print the action-vector layout.
    DescribeActions,
}

#[derive(Args)]
struct GenArgs {
    /// toy, llama8b-toy or llama8b.
    #[arg(long, conflicts_with_all = ["layers", "hidden", "heads", "kv_heads", "vocab", "seq_len"])]
    preset: Option<String>,
    #[arg(long, required_unless_present = "preset")]
    layers: Option<usize>,
    #[arg(long, required_unless_present = "preset")]
    hidden: Option<usize>,
    #[arg(long, required_unless_present = "preset")]
    heads: Option<usize>,
    #[arg(long, required_unless_present = "preset")]
    kv_heads: Option<usize>,
    #[arg(long, required_unless_present = "preset")]
    vocab: Option<usize>,
    #[arg(long, required_unless_present = "preset")]
    seq_len: Option<usize>,
    /// MLP width; defaults to round(8/3 · hidden).
    #[arg(long)]
    intermediate: Option<usize>,
    #[arg(long, value_enum, default_value = "fp16")]
    precision: PrecisionArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Fp32,
    Fp16,
    Bf16,
    Fp8,
    Int8,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Fp32 => Precision::Fp32,
            PrecisionArg::Fp16 => Precision::Fp16,
            PrecisionArg::Bf16 => Precision::Bf16,
            PrecisionArg::Fp8 => Precision::Fp8,
            PrecisionArg::Int8 => Precision::Int8,
        }
    }
}

#[derive(Args)]
struct ExploreArgs {
    /// Preset name or graph JSON path.
    #[arg(long)]
    workload: Option<String>,
    /// Comma-separated process nodes in nm.
    #[arg(long, value_delimiter = ',')]
    nodes: Option<Vec<u32>>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Constraints JSON; derived from the workload when absent.
    #[arg(long)]
    constraints: Option<String>,
    /// Run configuration JSON; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Disable world-model planning.
    #[arg(long)]
    no_mpc: bool,
    /// Skip candidates the surrogate predicts as over budget.
    #[arg(long)]
    surrogate_gate: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Hp,
    Lp,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Hp => Mode::Hp,
            ModeArg::Lp => Mode::Lp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Random,
    Grid,
    Sac,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Random => Strategy::Random,
            StrategyArg::Grid => Strategy::Grid,
            StrategyArg::Sac => Strategy::Sac,
        }
    }
}

#[derive(Args)]
struct BaselineArgs {
    /// Comma-separated strategies; all three when absent.
    #[arg(long, value_enum, value_delimiter = ',')]
    strategy: Option<Vec<StrategyArg>>,
    #[arg(long, default_value = "toy")]
    workload: String,
    #[arg(long, default_value_t = 3)]
    node: u32,
    #[arg(long, default_value_t = 500)]
    budget: usize,
    /// First seed; runs use `seed..seed + seeds`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, value_enum, default_value = "hp")]
    mode: ModeArg,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run directory written by `explore`.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory; `<in>/analysis` when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::GenWorkload(a) => gen_workload(a).map(|_| ExitCode::SUCCESS),
        Cmd::Explore(a) => explore(a),
        Cmd::Baseline(a) => baseline(a).map(|_| ExitCode::SUCCESS),
        Cmd::Analyze(a) => analyze(a).map(|_| ExitCode::SUCCESS),
        Cmd::DescribeState => {
            describe_state();
            Ok(ExitCode::SUCCESS)
        }
        Cmd::DescribeActions => {
            describe_actions();
            Ok(ExitCode::SUCCESS)
        }
    };
    res.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}

fn gen_workload(a: GenArgs) -> Result<()> {
    let spec = match &a.preset {
        Some(name) => TransformerSpec::preset(name)
            .ok_or_else(|| Error::Validation(format!("unknown preset {name:?} (valid: toy, llama8b-toy, llama8b)")))?,
        None => {
            let need = |v: Option<usize>| v.expect("required by the argument parser");
            TransformerSpec {
                intermediate: a.intermediate,
                ..TransformerSpec::new(
                    need(a.layers),
                    need(a.hidden),
                    need(a.heads),
                    need(a.kv_heads),
                    need(a.vocab),
                    need(a.seq_len),
                    a.precision.into(),
                )
            }
        }
    };
    spec.validate()?;
    let g = gen_transformer(&spec)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_graph(&g, &a.out)?;
    println!(
        "{}: {} operators, {} edges, {} parameters",
        a.out.display(),
        g.nodes().len(),
        g.edges().len(),
        g.p_total()
    );
    Ok(())
}

fn explore(a: ExploreArgs) -> Result<ExitCode> {
    let file = match &a.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let flags = FileConfig {
        workload: a.workload,
        nodes: a.nodes,
        budget: a.budget,
        seed: a.seed,
        mode: a.mode.map(Mode::from),
        constraints: a.constraints,
        jobs: a.jobs,
        warmup: a.warmup,
        mpc: a.no_mpc.then_some(false),
        surrogate_gate: a.surrogate_gate.then_some(true),
        hidden: None,
    };
    let merged = file.overlay(flags);
    let table = builtin_table();
    let wl = load_workload(merged.workload.as_deref().unwrap_or(config::DEFAULT_WORKLOAD))?;
    let resolved = Resolved::build(merged, &table, &wl)?;
    let nodes = config::resolve_nodes(&table, &resolved.nodes)?;

    let dir = a.out.join(resolved.run_id());
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("resolved_config.json"), resolved.to_json_string())?;
    std::fs::write(dir.join("constraints.json"), resolved.constraints.to_json_string())?;

    let all = run_all(&nodes, &wl, &resolved.constraints, &resolved.run, resolved.jobs)?;
    for r in &all.results {
        write_node_artifacts(&dir, r, &wl, &resolved.run.params)?;
    }
    write_run_tables(&dir, &all.results)?;

    for r in &all.results {
        match r.final_choice() {
            Some(c) if !r.infeasible() => println!(
                "{:>2}nm  mesh {:<7} score {:.4}  perf {:.1} GOps/s  power {:.2} mW  area {:.3} mm2  {:.1} tok/s  ({} feasible / {})",
                r.node_nm,
                c.ppa.mesh_label(),
                c.ppa.score,
                c.ppa.perf_gops,
                c.ppa.power_mw,
                c.ppa.area_mm2,
                c.ppa.tok_s,
                r.feasible_count,
                r.full_evals
            ),
            _ => println!("{:>2}nm  no feasible configuration in {} evaluations", r.node_nm, r.full_evals),
        }
    }
    match all.global_best {
        Some(i) => {
            println!("best node: {}nm", all.results[i].node_nm);
            println!("artifacts: {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        None => {
            println!("no feasible configuration found; artifacts: {}", dir.display());
            Ok(ExitCode::from(1))
        }
    }
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let table = builtin_table();
    let node = find_node(&table, a.node)?;
    let wl = load_workload(&a.workload)?;
    let params = meshdse::arch::EvalParams::default();
    let c = meshdse::rlenv::Constraints::for_workload(&table, &wl, &params)?.with_weights(Mode::from(a.mode).weights());
    let strategies: Vec<Strategy> = match a.strategy {
        Some(v) => v.into_iter().map(Strategy::from).collect(),
        None => Strategy::ALL.to_vec(),
    };
    let mut results = Vec::new();
    for s in strategies {
        for seed in a.seed..a.seed + a.seeds.max(1) {
            let run = meshdse::search::RunConfig::new(a.budget, seed);
            let r = run_strategy(s, node, &wl, &c, &run)?;
            println!(
                "{:<6} seed {:<3} best {:.4}  feasible {}  unique {}",
                s.name(),
                seed,
                r.best_score(),
                r.feasible_count,
                r.unique_configs
            );
            results.push(r);
        }
    }
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("search_comparison.csv");
    write_comparison_csv(&path, &results)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Convergence window and tolerance applied to each node's best-so-far
/// trace.
const CONVERGENCE_WINDOW: usize = 50;
const CONVERGENCE_TOL: f64 = 1e-4;

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let src = a.input.join("ppa_by_node.csv");
    if !src.is_file() {
        return Err(Error::Validation(format!(
            "{} has no ppa_by_node.csv; pass a run directory written by explore",
            a.input.display()
        )));
    }
    let rows = read_ppa_by_node(&src)?;
    let out = a.out.unwrap_or_else(|| a.input.join("analysis"));
    let mut written = write_analysis(&out, &rows)?;
    written.push(write_convergence(&a.input, &out, &rows)?);
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn write_convergence(run_dir: &Path, out: &Path, rows: &[meshdse::analysis::NodeMetrics]) -> Result<PathBuf> {
    let path = out.join("convergence.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["node", "episodes", "feasible", "final_best", "converged_at"])?;
    for r in rows {
        let log = read_training_csv(&run_dir.join(format!("{}nm", r.node_nm)).join("training_stats.csv"))?;
        let best: Vec<f64> = log.iter().map(|e| e.best_score).collect();
        let at = (1..=best.len()).find(|&t| convergence_check(&best[..t], CONVERGENCE_WINDOW, CONVERGENCE_TOL));
        w.write_record([
            format!("{}nm", r.node_nm),
            log.len().to_string(),
            log.iter().filter(|e| e.feasible).count().to_string(),
            best.last().copied().unwrap_or(f64::INFINITY).to_string(),
            at.map_or_else(String::new, |t| (t - 1).to_string()),
        ])?;
    }
    w.flush()?;
    Ok(path)
}

fn describe_state() {
    println!("index\tgroup\tname\tscheme\tpolicy_input");
    for e in state_table() {
        println!("{}\t{}\t{}\t{}\t{}", e.index, e.group, e.name, e.scheme, e.in_subset);
    }
}

fn describe_actions() {
    println!("index\tgroup\tname\tmapping");
    for e in action_table() {
        println!("{}\t{}\t{}\t{}", e.index, e.group, e.name, e.mapping);
    }
    for (i, name) in DISC_TABLE.iter().enumerate() {
        println!("d{i}\tmesh\t{name}\tdelta in -{}..={}", DISC_CHOICES / 2, DISC_CHOICES / 2);
    }
}
