//! Subcommand bodies.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use pessim_share::bench::aggregate::{aggregate, aggregate_by_method};
use pessim_share::bench::{run_cell, run_sharing_grid, shared_label, write_csv, ExperimentResult, Job, Method};
use pessim_share::datasets::{build_dataset, merge, read_dataset, relabel, DatasetFile, Flavor, TaskDataset};
use pessim_share::mdp::TaskFamily;
use pessim_share::verify::{run_suite, Suite};

use crate::config::RunConfig;
use crate::CliError;

const SELECTION_NOTE: &str = "select keeps the top-k shared transitions ranked by a pessimistic LSVI Q \
fit on main data, then fits plain ridge LSVI; no conservative-Q Lagrange weight is used";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn machine(value: &Value) {
    println!("---");
    println!("{}", serde_json::to_string_pretty(value).expect("JSON value serializes"));
}

fn dataset_path(root: &Path, family: &TaskFamily, task: usize, flavor: Flavor, episodes: usize, seed: u64) -> PathBuf {
    root.join("datasets")
        .join(&family.task_names()[task])
        .join(format!("{flavor}-e{episodes}-s{seed}.txt"))
}

fn result_json(family: &TaskFamily, r: &ExperimentResult) -> Value {
    json!({
        "main_task": family.task_names()[r.main_task],
        "main_flavor": r.main_flavor.name(),
        "shared_task": shared_label(family, &r.shared_tasks),
        "method": r.method.name(),
        "seed": r.seed,
        "subopt": r.subopt,
        "return_mean": r.return_mean,
        "expected_uncertainty": r.expected_uncertainty,
        "xi_coverage": r.xi_coverage,
        "wall_ms": r.wall_ms,
        "error": r.error,
    })
}

pub fn gen_data(config_path: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    let hash = cfg.hash();
    let family = cfg.family()?;
    let root = cfg.output_root();
    let mut extra = BTreeMap::new();
    extra.insert("config_hash".to_string(), hash.clone());

    let family_path = root.join("family.txt");
    write_file(&family_path, family.to_record_with(&extra).as_bytes())?;
    println!("wrote {} ({} tasks)", family_path.display(), family.n_tasks());

    let mut wanted = BTreeSet::new();
    for task in 0..family.n_tasks() {
        for &seed in &cfg.data.seeds {
            for flavor in cfg.flavors()? {
                wanted.insert((task, flavor, cfg.data.main_episodes, seed));
            }
            if family.n_tasks() > 1 {
                wanted.insert((task, cfg.shared_flavor()?, cfg.data.shared_episodes, seed));
            }
        }
    }
    let mut files = Vec::new();
    let mut total = 0;
    for (task, flavor, episodes, seed) in wanted {
        let data = build_dataset(&family, task, flavor, episodes, seed)?;
        let path = dataset_path(&root, &family, task, flavor, episodes, seed);
        write_file(&path, DatasetFile::Task(data.clone()).to_record(&extra)?.as_bytes())?;
        println!("wrote {} ({} transitions)", path.display(), data.len());
        total += data.len();
        files.push(json!({
            "path": path.display().to_string(),
            "task": family.task_names()[task],
            "flavor": flavor.name(),
            "episodes": episodes,
            "seed": seed,
            "transitions": data.len(),
        }));
    }
    println!("{} dataset files, {total} transitions", files.len());
    machine(&json!({
        "config_hash": hash,
        "family": family_path.display().to_string(),
        "files": files,
        "total_transitions": total,
    }));
    Ok(())
}

pub struct SolveArgs {
    pub config: PathBuf,
    pub method: String,
    pub main_task: String,
    pub share: String,
    pub flavor: Option<String>,
    pub seed: Option<u64>,
    pub k: Option<f64>,
    pub reselect_rounds: Option<usize>,
    pub per_timestep: bool,
}

fn task_index(family: &TaskFamily, s: &str) -> Result<usize, CliError> {
    let s = s.trim();
    if let Ok(i) = s.parse::<usize>() {
        if i < family.n_tasks() {
            return Ok(i);
        }
    }
    family
        .task_names()
        .iter()
        .position(|n| n == s)
        .ok_or_else(|| CliError::Config(format!("unknown task {s:?}")))
}

fn load_task_dataset(
    path: &Path,
    task: usize,
    flavor: Flavor,
    seed: u64,
) -> Result<(TaskDataset, Vec<u8>), CliError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CliError::MissingDataset(format!(
                "{} (run gen-data first)",
                path.display()
            )))
        }
        Err(e) => return Err(io_err(path, e)),
    };
    let text = String::from_utf8(bytes.clone()).map_err(|e| io_err(path, e))?;
    let (file, _) = read_dataset(&text).map_err(|e| io_err(path, e))?;
    match file {
        DatasetFile::Task(d) if d.task == task && d.flavor == flavor && d.seed == seed => Ok((d, bytes)),
        _ => Err(CliError::MissingDataset(format!(
            "{} does not hold task {task}, flavor {flavor}, seed {seed}",
            path.display()
        ))),
    }
}

pub fn solve(args: &SolveArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let hash = cfg.hash();
    let family = cfg.family()?;
    let root = cfg.output_root();
    let mut plan = cfg.plan(&family)?;
    if let Some(k) = args.k {
        plan.selection.quantile_k = k;
    }
    if let Some(r) = args.reselect_rounds {
        plan.selection.reselect_rounds = r;
    }
    if args.per_timestep {
        plan.lsvi.per_timestep = true;
    }
    plan.selection
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let method: Method = args.method.parse().map_err(|e: pessim_share::Error| CliError::Config(e.to_string()))?;
    let task = task_index(&family, &args.main_task)?;
    let flavor: Flavor = match &args.flavor {
        Some(f) => f.parse().map_err(|e: pessim_share::Error| CliError::Config(e.to_string()))?,
        None => cfg.flavors()?[0],
    };
    let seed = args.seed.unwrap_or(cfg.data.seeds[0]);
    let shared: Vec<usize> = match args.share.trim() {
        "none" => Vec::new(),
        "all" => (0..family.n_tasks()).filter(|&j| j != task).collect(),
        list => list
            .split(',')
            .map(|s| task_index(&family, s))
            .collect::<Result<_, _>>()?,
    };
    if shared.contains(&task) {
        return Err(CliError::Config("the main task cannot share with itself".into()));
    }
    if method == Method::Single && !shared.is_empty() {
        return Err(CliError::Config("--method single takes --share none".into()));
    }

    let main_path = dataset_path(&root, &family, task, flavor, cfg.data.main_episodes, seed);
    let (main, main_bytes) = load_task_dataset(&main_path, task, flavor, seed)?;
    let mut hasher = Sha256::new();
    hasher.update(&main_bytes);
    let mut parts = Vec::new();
    let shared_flavor = cfg.shared_flavor()?;
    for &j in &shared {
        let path = dataset_path(&root, &family, j, shared_flavor, cfg.data.shared_episodes, seed);
        let (d, bytes) = load_task_dataset(&path, j, shared_flavor, seed)?;
        hasher.update(&bytes);
        parts.push(relabel(&d, &family, task)?);
    }
    let dataset_hash = hex::encode(hasher.finalize())[..16].to_string();
    let data = merge(&main, &parts)?;
    println!(
        "task {} flavor {flavor} seed {seed}: {} transitions ({} shared)",
        family.task_names()[task],
        data.len(),
        data.shared_transitions().len()
    );

    let job = Job {
        main_task: task,
        main_flavor: flavor,
        shared_tasks: shared.clone(),
        method,
        seed,
    };
    let outcome = run_cell(&family, &plan, &job, data)?;
    let label = shared_label(&family, &shared);
    let stem = format!(
        "{}-{flavor}-{}-{label}-s{seed}",
        family.task_names()[task],
        method.name()
    );
    let mut extra = BTreeMap::new();
    extra.insert("config_hash".to_string(), hash.clone());
    extra.insert("dataset_hash".to_string(), dataset_hash.clone());
    extra.insert("seed".to_string(), seed.to_string());
    extra.insert("task".to_string(), family.task_names()[task].clone());
    extra.insert("flavor".to_string(), flavor.name().to_string());
    extra.insert("share".to_string(), label);
    let solution_path = root.join("solutions").join(format!("{stem}.txt"));
    write_file(&solution_path, outcome.solution.to_record(&extra).as_bytes())?;
    let csv_path = root.join("results").join(format!("{stem}.csv"));
    let mut csv = Vec::new();
    write_csv(&family, std::slice::from_ref(&outcome.result), &mut csv)?;
    write_file(&csv_path, &csv)?;
    let r = &outcome.result;
    println!(
        "{}: subopt {:.6}, return {:.6}, expected uncertainty {:.6}, coverage {:.4}",
        method.name(),
        r.subopt,
        r.return_mean,
        r.expected_uncertainty,
        r.xi_coverage
    );
    println!("wrote {} and {}", solution_path.display(), csv_path.display());
    machine(&json!({
        "config_hash": hash,
        "dataset_hash": dataset_hash,
        "solution": solution_path.display().to_string(),
        "csv": csv_path.display().to_string(),
        "fit_transitions": outcome.used.len(),
        "result": result_json(&family, r),
    }));
    Ok(())
}

pub fn verify(suite: &str) -> Result<(), CliError> {
    let suites = Suite::parse_list(suite).map_err(|e| CliError::Config(e.to_string()))?;
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for s in suites {
        let report = run_suite(s)?;
        for c in &report.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            println!("{tag} {}/{}: {}", report.suite, c.name, c.detail);
            if !c.passed {
                failed.push(format!("{}/{}", report.suite, c.name));
            }
        }
        reports.push(report);
    }
    println!("{} suites, {} failed checks", reports.len(), failed.len());
    machine(&json!({
        "passed": failed.is_empty(),
        "suites": reports,
    }));
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::VerifyFailed(failed.join(", ")))
    }
}

pub fn sweep(config_path: &Path, threads: Option<usize>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    let hash = cfg.hash();
    let family = cfg.family()?;
    let mut plan = cfg.plan(&family)?;
    if threads.is_some() {
        plan.threads = threads;
    }
    let jobs = plan.jobs(&family).len();
    println!("config {hash}: {jobs} runs over {} tasks", family.n_tasks());
    let rows = run_sharing_grid(&family, &plan)?;

    let root = cfg.output_root().join("sweep");
    let csv_path = root.join("results.csv");
    let mut csv = Vec::new();
    write_csv(&family, &rows, &mut csv)?;
    write_file(&csv_path, &csv)?;

    let failures: Vec<&ExperimentResult> = rows.iter().filter(|r| r.error.is_some()).collect();
    for r in &failures {
        println!(
            "failed: task {} flavor {} share {} method {} seed {}: {}",
            family.task_names()[r.main_task],
            r.main_flavor,
            shared_label(&family, &r.shared_tasks),
            r.method,
            r.seed,
            r.error.as_deref().unwrap_or_default()
        );
    }
    let eta = cfg.sweep.eta;
    let overall = if failures.len() < rows.len() {
        Some(aggregate(&rows, eta)?)
    } else {
        None
    };
    let by_method = if failures.len() < rows.len() {
        aggregate_by_method(&rows, eta)?
    } else {
        BTreeMap::new()
    };
    for (m, s) in &by_method {
        println!(
            "{m}: runs {}, mean score {:.4}, median {:.4}, iqm {:.4}, gap fraction {:.3}",
            s.runs, s.mean, s.median, s.iqm, s.optimality_gap_fraction
        );
    }
    let summary = json!({
        "config_hash": hash,
        "seeds": plan.seeds,
        "eta": eta,
        "runs": rows.len(),
        "failed": failures.len(),
        "score": "return / optimal return",
        "overall": overall,
        "by_method": by_method,
        "selection": SELECTION_NOTE,
        "csv": csv_path.display().to_string(),
    });
    let summary_path = root.join("summary.json");
    write_file(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("JSON value serializes").as_bytes(),
    )?;
    println!("wrote {} and {}", csv_path.display(), summary_path.display());
    machine(&summary);
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::CellFailures(failures.len()))
    }
}
