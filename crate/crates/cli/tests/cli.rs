use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_pessim-share");

const SMALL: &str = r#"
[env]
width = 3
height = 3
goals = ["0,0", "2,2"]
slip = 0.2

[data]
flavors = ["random"]
shared_flavor = "replay"
main_episodes = 5
shared_episodes = 5
seeds = [0]

[sweep]
methods = ["single", "direct", "utds"]
coverage_probes = 20
"#;

fn setup(config: &str) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, config).unwrap();
    (dir, path)
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("PESSIM_SHARE_OUT", dir.join("out"))
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn machine_json(o: &Output) -> serde_json::Value {
    let stdout = String::from_utf8(o.stdout.clone()).unwrap();
    let (_, json) = stdout.split_once("\n---\n").expect("stdout has a --- delimiter");
    serde_json::from_str(json).unwrap()
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_counts_and_determinism() {
    let (dir, cfg) = setup(SMALL);
    let o = run(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // 2 tasks x (random + replay) x 1 seed
    let json = machine_json(&o);
    assert_eq!(json["files"].as_array().unwrap().len(), 4);
    let first: Vec<_> = files_under(&dir.path().join("out"))
        .into_iter()
        .map(|p| std::fs::read(p).unwrap())
        .collect();
    assert_eq!(first.len(), 5);
    let o = run(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let second: Vec<_> = files_under(&dir.path().join("out"))
        .into_iter()
        .map(|p| std::fs::read(p).unwrap())
        .collect();
    assert_eq!(first, second);
}

#[test]
fn gen_data_one_task_one_flavor() {
    let (dir, cfg) = setup(
        "[env]\nwidth = 3\nheight = 3\ngoals = [\"2,2\"]\n[data]\nflavors = [\"expert\"]\nseeds = [3]\n",
    );
    let o = run(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(machine_json(&o)["files"].as_array().unwrap().len(), 1);
}

#[test]
fn gen_data_default_grid() {
    let (dir, cfg) = setup("[data]\nshared_episodes = 10\nseeds = [0]\n");
    let o = run(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // replay sharing at the main episode count lands on the same files
    assert_eq!(machine_json(&o)["files"].as_array().unwrap().len(), 20);
}

#[test]
fn exit_codes() {
    let (dir, cfg) = setup("[data]\nflavors = [\"expert-ish\"]\n");
    let o = run(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    let o = run(dir.path(), &["gen-data", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code(&o), 3);

    let (dir, cfg) = setup(SMALL);
    let c = cfg.to_str().unwrap();
    let o = run(dir.path(), &["solve", "--config", c, "--method", "utds", "--main-task", "0", "--share", "1"]);
    assert_eq!(code(&o), 4);

    assert_eq!(code(&run(dir.path(), &["gen-data", "--config", c])), 0);
    let o = run(dir.path(), &["solve", "--config", c, "--method", "single", "--main-task", "0", "--share", "1"]);
    assert_eq!(code(&o), 2);
    let o = run(dir.path(), &["solve", "--config", c, "--method", "bogus", "--main-task", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn solve_shares_dataset_hash_and_select_k1_matches_direct() {
    let (dir, cfg) = setup(SMALL);
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&run(dir.path(), &["gen-data", "--config", c])), 0);
    let solve = |method: &str, extra: &[&str]| {
        let mut args = vec!["solve", "--config", c, "--method", method, "--main-task", "0", "--share", "1"];
        args.extend_from_slice(extra);
        let o = run(dir.path(), &args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        machine_json(&o)
    };
    let direct = solve("direct", &[]);
    let utds = solve("utds", &[]);
    let select = solve("select", &["--k", "1.0"]);
    assert_eq!(direct["dataset_hash"], utds["dataset_hash"]);
    assert_eq!(direct["config_hash"], utds["config_hash"]);
    let read = |v: &serde_json::Value| std::fs::read(v["solution"].as_str().unwrap()).unwrap();
    assert_eq!(read(&direct), read(&select));
    assert_ne!(read(&direct), read(&utds));
    let csv = std::fs::read_to_string(direct["csv"].as_str().unwrap()).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn verify_lemma1_passes() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["verify", "--suite", "lemma1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(machine_json(&o)["passed"], true);
    assert_eq!(code(&run(dir.path(), &["verify", "--suite", "nope"])), 2);
}

#[test]
fn sweep_rerun_is_byte_identical() {
    let (dir, cfg) = setup(SMALL);
    let c = cfg.to_str().unwrap();
    let csv = dir.path().join("out/sweep/results.csv");
    let summary = dir.path().join("out/sweep/summary.json");
    let o = run(dir.path(), &["sweep", "--config", c, "--threads", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let json = machine_json(&o);
    // 2 tasks: single + 2 methods x 1 shared task, 1 seed
    assert_eq!(json["runs"], 6);
    let (a, s1) = (std::fs::read(&csv).unwrap(), std::fs::read(&summary).unwrap());
    let o = run(dir.path(), &["sweep", "--config", c, "--threads", "1"]);
    assert_eq!(code(&o), 0);
    assert_eq!(a, std::fs::read(&csv).unwrap());
    assert_eq!(s1, std::fs::read(&summary).unwrap());
}
