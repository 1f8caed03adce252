use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use meshdse::graph::load_graph;

fn meshdse(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshdse")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn only_run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

#[test]
fn gen_workload_preset_writes_loadable_graph() {
    let tmp = tempfile::tempdir().unwrap();
    let o = meshdse(&["gen-workload", "--preset", "toy", "--out", "g/toy.json"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let g = load_graph(tmp.path().join("g/toy.json")).unwrap();
    assert!(stdout(&o).contains(&format!("{} parameters", g.p_total())));
    assert!(!g.nodes().is_empty());
}

#[test]
fn gen_workload_custom_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "gen-workload", "--layers", "3", "--hidden", "128", "--heads", "4", "--kv-heads", "2", "--vocab", "1000",
        "--seq-len", "64", "--precision", "int8", "--out", "c.json",
    ];
    let o = meshdse(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let one = load_graph(tmp.path().join("c.json")).unwrap();
    let mut deeper = args.to_vec();
    deeper[2] = "6";
    *deeper.last_mut().unwrap() = "d.json";
    assert!(meshdse(&deeper, tmp.path()).status.success());
    let two = load_graph(tmp.path().join("d.json")).unwrap();
    assert!(two.nodes().len() > one.nodes().len());
    assert!(two.p_total() > one.p_total());
}

#[test]
fn gen_workload_missing_flags_and_conflicts_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = meshdse(&["gen-workload", "--layers", "2", "--out", "x.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--hidden"));
    let o = meshdse(&["gen-workload", "--preset", "toy", "--layers", "2", "--out", "x.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = meshdse(&["gen-workload", "--preset", "nope", "--out", "x.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("valid"));
    assert!(!tmp.path().join("x.json").exists());
}

#[test]
fn explore_is_deterministic_and_echoes_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let o = meshdse(
            &["explore", "--workload", "toy", "--nodes", "7", "--budget", "30", "--seed", "1", "--mode", "lp", "--out", out],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("artifacts:"));
        only_run_dir(&tmp.path().join(out))
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a.file_name(), b.file_name());
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    for f in ["resolved_config.json", "constraints.json", "ppa_by_node.csv", "mesh_scaling.csv", "7nm/training_stats.csv"] {
        assert!(ta.contains_key(f), "missing {f}");
    }
    assert_eq!(ta, tb);
    let cfg: serde_json::Value = serde_json::from_slice(&ta["resolved_config.json"]).unwrap();
    assert_eq!(cfg["mode"], "lp");
    assert_eq!(cfg["weights"]["power"], 0.6);
    assert_eq!(cfg["budget"], 30);
}

#[test]
fn explore_config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("run.json"), r#"{"workload": "toy", "nodes": [10], "budget": 25, "seed": 3}"#).unwrap();
    let o = meshdse(&["explore", "--config", "run.json", "--budget", "20", "--out", "o"], tmp.path());
    assert!(o.status.code() == Some(0) || o.status.code() == Some(1), "{}", stderr(&o));
    let dir = only_run_dir(&tmp.path().join("o"));
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["budget"], 20);
    assert_eq!(cfg["seed"], 3);
    assert_eq!(cfg["nodes"], serde_json::json!([10]));
    assert!(dir.join("10nm").is_dir());
}

#[test]
fn explore_rejects_unknown_node_and_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let o = meshdse(&["explore", "--nodes", "4", "--budget", "5", "--out", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("3, 5, 7, 10, 14, 22, 28"), "{err}");
    std::fs::write(tmp.path().join("bad.json"), r#"{"budgett": 5}"#).unwrap();
    let o = meshdse(&["explore", "--config", "bad.json", "--out", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn baseline_writes_median_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let o = meshdse(
        &["baseline", "--strategy", "random,grid", "--node", "7", "--budget", "20", "--seeds", "2", "--out", "b"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(tmp.path().join("b/search_comparison.csv")).unwrap();
    for s in ["random", "grid"] {
        assert!(text.lines().any(|l| l.contains(s) && l.contains("median")), "{s}\n{text}");
    }
    assert!(!text.contains("sac"));
}

#[test]
fn analyze_requires_run_dir_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let o = meshdse(&["analyze", "--in", "."], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ppa_by_node.csv"));

    let o = meshdse(&["explore", "--workload", "toy", "--nodes", "7,14", "--budget", "20", "--out", "o"], tmp.path());
    assert!(o.status.code() == Some(0) || o.status.code() == Some(1), "{}", stderr(&o));
    let run = only_run_dir(&tmp.path().join("o"));
    let arg = run.to_str().unwrap();
    assert!(meshdse(&["analyze", "--in", arg], tmp.path()).status.success());
    let first = read_tree(&run.join("analysis"));
    for f in ["statistical_analysis.csv", "correlation_matrix.csv", "cross_node_report.json", "convergence.csv"] {
        assert!(first.contains_key(f), "missing {f}");
    }
    assert!(meshdse(&["analyze", "--in", arg], tmp.path()).status.success());
    assert_eq!(first, read_tree(&run.join("analysis")));
}

#[test]
fn describe_commands_list_layouts() {
    let tmp = tempfile::tempdir().unwrap();
    let s = meshdse(&["describe-state"], tmp.path());
    assert!(s.status.success());
    let lines: Vec<String> = stdout(&s).lines().map(str::to_owned).collect();
    assert!(lines[0].starts_with("index\t"));
    assert_eq!(lines.iter().filter(|l| l.ends_with("\ttrue")).count(), 52);
    let a = meshdse(&["describe-actions"], tmp.path());
    assert!(a.status.success());
    let text = stdout(&a);
    assert!(text.lines().any(|l| l.starts_with("d0\tmesh")));
    assert_eq!(text.lines().skip(1).filter(|l| !l.starts_with('d')).count(), 30);
}
