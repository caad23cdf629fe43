//! The data-sharing experiment grid.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use super::baselines::{baseline_direct, baseline_select, SelectionConfig};
use super::metrics::{data_penalties, expected_uncertainty, policy_return, suboptimality, xi_coverage};
use crate::datasets::{build_dataset, merge, relabel, Flavor, SharedDataset, TaskDataset};
use crate::error::{Error, Result};
use crate::mdp::{build_tabular_gridworld, exact_optimal_policy, GridworldSpec, TaskFamily};
use crate::pevi::{lsvi_pessimistic, LsviOptions, LsviSolution};
use crate::seeds;
use crate::uncertainty::PessimismConfig;

pub const CSV_HEADER: [&str; 10] = [
    "main_task",
    "main_flavor",
    "shared_task",
    "method",
    "seed",
    "subopt",
    "return_mean",
    "expected_uncertainty",
    "xi_coverage",
    "wall_ms",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    /// Pessimistic LSVI on the main task's data alone.
    Single,
    /// Plain ridge LSVI on all shared data.
    Direct,
    /// Quantile selection of shared data, then plain ridge LSVI.
    Select,
    /// Pessimistic LSVI with OOD rows on all shared data.
    Utds,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Single, Method::Direct, Method::Select, Method::Utds];

    pub fn name(self) -> &'static str {
        match self {
            Method::Single => "single",
            Method::Direct => "direct",
            Method::Select => "select",
            Method::Utds => "utds",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Method::Single),
            "direct" => Ok(Method::Direct),
            "select" => Ok(Method::Select),
            "utds" => Ok(Method::Utds),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Which other tasks feed each main task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShareMode {
    /// One cell per other task.
    Pairwise,
    /// One cell sharing every other task at once.
    AllOthers,
}

impl FromStr for ShareMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise" => Ok(ShareMode::Pairwise),
            "all" | "all-others" => Ok(ShareMode::AllOthers),
            other => Err(Error::invalid(format!("unknown share mode {other:?}"))),
        }
    }
}

/// 5x5 gridworld, one reach task per corner, start at the center, slip 0.3.
pub fn desk_family() -> Result<TaskFamily> {
    build_tabular_gridworld(&GridworldSpec::new(
        5,
        5,
        vec![(0, 0), (4, 0), (0, 4), (4, 4)],
        0.3,
    ))
}

/// Penalty scales for tabular gridworld values in `[0, T]`: `beta1 = 0.2`,
/// `beta2` from 0.3 to 0.03, `lambda = 0.01`; the rest as the default.
pub fn desk_pessimism() -> PessimismConfig {
    PessimismConfig {
        beta1: 0.2,
        beta2_init: 0.3,
        beta2_end: 0.03,
        lambda: 0.01,
        ..PessimismConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPlan {
    pub main_tasks: Vec<usize>,
    pub main_flavors: Vec<Flavor>,
    pub shared_flavor: Flavor,
    pub main_episodes: usize,
    pub shared_episodes: usize,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub share_mode: ShareMode,
    pub pessimism: PessimismConfig,
    pub lsvi: LsviOptions,
    pub selection: SelectionConfig,
    /// Multiplier on `Gamma` in the coverage metric.
    pub coverage_beta: f64,
    pub coverage_probes: usize,
    /// Measure wall-clock time; off by default so reruns are byte-identical.
    pub record_wall_clock: bool,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl SweepPlan {
    /// Every task as main task, the five generated flavors, replay sharing,
    /// all methods, seeds `0..5`, and [`desk_pessimism`].
    pub fn for_family(family: &TaskFamily) -> Self {
        SweepPlan {
            main_tasks: (0..family.n_tasks()).collect(),
            main_flavors: Flavor::GENERATED.to_vec(),
            shared_flavor: Flavor::Replay,
            main_episodes: 10,
            shared_episodes: 40,
            seeds: (0..5).collect(),
            methods: Method::ALL.to_vec(),
            share_mode: ShareMode::Pairwise,
            pessimism: desk_pessimism(),
            lsvi: LsviOptions::default(),
            selection: SelectionConfig::default(),
            coverage_beta: family.horizon() as f64,
            coverage_probes: 1000,
            record_wall_clock: false,
            threads: None,
        }
    }

    pub fn validate(&self, family: &TaskFamily) -> Result<()> {
        for &t in &self.main_tasks {
            family.check_task(t)?;
        }
        if self.main_episodes == 0 || self.shared_episodes == 0 {
            return Err(Error::invalid("episode counts must be positive"));
        }
        if self.coverage_probes == 0 {
            return Err(Error::invalid("coverage_probes must be positive"));
        }
        self.pessimism.validate()?;
        self.selection.validate()
    }

    /// Shared-task sets for a main task under the plan's share mode.
    pub fn shared_sets(&self, family: &TaskFamily, main: usize) -> Vec<Vec<usize>> {
        let others: Vec<usize> = (0..family.n_tasks()).filter(|&j| j != main).collect();
        if others.is_empty() {
            return Vec::new();
        }
        match self.share_mode {
            ShareMode::Pairwise => others.into_iter().map(|j| vec![j]).collect(),
            ShareMode::AllOthers => vec![others],
        }
    }

    /// Main dataset and its merge with the relabeled shared tasks.
    pub fn cell_data(
        &self,
        family: &TaskFamily,
        seed: u64,
        main: usize,
        flavor: Flavor,
        shared: &[usize],
    ) -> Result<(TaskDataset, SharedDataset)> {
        let main_data = build_dataset(family, main, flavor, self.main_episodes, seed)?;
        let parts = shared
            .iter()
            .map(|&j| {
                let d = build_dataset(family, j, self.shared_flavor, self.shared_episodes, seed)?;
                relabel(&d, family, main)
            })
            .collect::<Result<Vec<_>>>()?;
        let merged = merge(&main_data, &parts)?;
        Ok((main_data, merged))
    }

    /// Jobs in output order.
    pub fn jobs(&self, family: &TaskFamily) -> Vec<Job> {
        let mut jobs = Vec::new();
        for &main in &self.main_tasks {
            for &flavor in &self.main_flavors {
                let mut cells: Vec<(Vec<usize>, Method)> = Vec::new();
                if self.methods.contains(&Method::Single) {
                    cells.push((Vec::new(), Method::Single));
                }
                for shared in self.shared_sets(family, main) {
                    for &m in &self.methods {
                        if m != Method::Single {
                            cells.push((shared.clone(), m));
                        }
                    }
                }
                for (shared, method) in cells {
                    for &seed in &self.seeds {
                        jobs.push(Job {
                            main_task: main,
                            main_flavor: flavor,
                            shared_tasks: shared.clone(),
                            method,
                            seed,
                        });
                    }
                }
            }
        }
        jobs
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Job {
    pub main_task: usize,
    pub main_flavor: Flavor,
    pub shared_tasks: Vec<usize>,
    pub method: Method,
    pub seed: u64,
}

/// One row of the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub main_task: usize,
    pub main_flavor: Flavor,
    pub shared_tasks: Vec<usize>,
    pub method: Method,
    pub seed: u64,
    pub subopt: f64,
    pub return_mean: f64,
    pub expected_uncertainty: f64,
    pub xi_coverage: f64,
    pub wall_ms: u64,
    /// Set when the cell failed; metrics are then NaN.
    pub error: Option<String>,
}

/// `none`, a task name, or task names joined by `+`.
pub fn shared_label(family: &TaskFamily, shared: &[usize]) -> String {
    if shared.is_empty() {
        "none".to_string()
    } else {
        shared
            .iter()
            .map(|&j| family.task_names()[j].as_str())
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Solution, the data it was fit on, and the evaluated row of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellOutcome {
    pub solution: LsviSolution,
    pub used: SharedDataset,
    pub result: ExperimentResult,
}

/// Solves and evaluates one job on already assembled data.
pub fn run_cell(
    family: &TaskFamily,
    plan: &SweepPlan,
    job: &Job,
    data: SharedDataset,
) -> Result<CellOutcome> {
    let start = Instant::now();
    let task = job.main_task;
    let solve_seed = seeds::derive(job.seed, "solve", &[task as u64]);
    let lambda = plan.pessimism.lambda;
    let (solution, used) = match job.method {
        Method::Single | Method::Utds => (
            lsvi_pessimistic(&data, family, task, &plan.pessimism, &plan.lsvi, solve_seed)?,
            data,
        ),
        Method::Direct => (baseline_direct(&data, family, task, lambda, solve_seed)?, data),
        Method::Select => {
            let sel = baseline_select(
                &data,
                family,
                task,
                &plan.pessimism,
                &plan.lsvi,
                &plan.selection,
                solve_seed,
            )?;
            (sel.solution, sel.selected)
        }
    };
    let (optimal, _) = exact_optimal_policy(family, task)?;
    let penalties = data_penalties(family, &used.transitions, lambda)?;
    let result = ExperimentResult {
        main_task: task,
        main_flavor: job.main_flavor,
        shared_tasks: job.shared_tasks.clone(),
        method: job.method,
        seed: job.seed,
        subopt: suboptimality(family, task, &solution.policy)?,
        return_mean: policy_return(family, task, &solution.policy)?,
        expected_uncertainty: expected_uncertainty(family, &[penalties], &optimal)?,
        xi_coverage: xi_coverage(
            family,
            task,
            &solution,
            plan.coverage_beta,
            plan.coverage_probes,
            seeds::derive(job.seed, "coverage", &[task as u64]),
        )?,
        wall_ms: if plan.record_wall_clock {
            start.elapsed().as_millis() as u64
        } else {
            0
        },
        error: None,
    };
    Ok(CellOutcome {
        solution,
        used,
        result,
    })
}

fn run_job(family: &TaskFamily, plan: &SweepPlan, job: &Job) -> Result<ExperimentResult> {
    let (_, data) = plan.cell_data(family, job.seed, job.main_task, job.main_flavor, &job.shared_tasks)?;
    Ok(run_cell(family, plan, job, data)?.result)
}

/// Runs every job of the plan; rows come back in job order regardless of
/// scheduling. Failed cells yield rows with `error` set.
pub fn run_sharing_grid(family: &TaskFamily, plan: &SweepPlan) -> Result<Vec<ExperimentResult>> {
    plan.validate(family)?;
    let jobs = plan.jobs(family);
    let work = || {
        jobs.par_iter()
            .map(|job| {
                run_job(family, plan, job).unwrap_or_else(|e| ExperimentResult {
                    main_task: job.main_task,
                    main_flavor: job.main_flavor,
                    shared_tasks: job.shared_tasks.clone(),
                    method: job.method,
                    seed: job.seed,
                    subopt: f64::NAN,
                    return_mean: f64::NAN,
                    expected_uncertainty: f64::NAN,
                    xi_coverage: f64::NAN,
                    wall_ms: 0,
                    error: Some(e.to_string()),
                })
            })
            .collect::<Vec<_>>()
    };
    match plan.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(work))
        }
        None => Ok(work()),
    }
}

fn float(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.9e}")
    }
}

/// Writes rows as CSV with the fixed header and 10 significant digits.
pub fn write_csv<W: Write>(
    family: &TaskFamily,
    results: &[ExperimentResult],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in results {
        w.write_record([
            family.task_names()[r.main_task].clone(),
            r.main_flavor.to_string(),
            shared_label(family, &r.shared_tasks),
            r.method.to_string(),
            r.seed.to_string(),
            float(r.subopt),
            float(r.return_mean),
            float(r.expected_uncertainty),
            float(r.xi_coverage),
            r.wall_ms.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
