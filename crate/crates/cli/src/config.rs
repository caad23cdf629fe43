//! Run configuration: a TOML file of flat sections.
//!
//! ```toml
//! [env]
//! kind = "gridworld"
//! width = 5
//! height = 5
//! goals = ["0,0", "4,0", "0,4", "4,4"]
//! slip = 0.3
//!
//! [data]
//! flavors = ["random", "medium"]
//! seeds = [0, 1, 2]
//! ```
//!
//! Every key is optional; missing keys take the desk defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pessim_share::bench::{desk_pessimism, Method, SelectionConfig, ShareMode, SweepPlan};
use pessim_share::datasets::Flavor;
use pessim_share::mdp::{
    build_random_linear_mdp, build_tabular_gridworld, GridworldSpec, RandomLinearSpec, TaskFamily,
};
use pessim_share::pevi::{LsviOptions, OodTarget, PenaltySource};
use pessim_share::uncertainty::{OodSource, PessimismConfig};

use crate::CliError;

pub const OUT_ENV: &str = "PESSIM_SHARE_OUT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSection,
    pub data: DataSection,
    pub pessimism: PessimismSection,
    pub solver: SolverSection,
    pub selection: SelectionSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    /// `gridworld` or `random-linear`.
    pub kind: String,
    pub width: usize,
    pub height: usize,
    /// Goal cells as `"x,y"`, one task each.
    pub goals: Vec<String>,
    pub slip: f64,
    /// Start cell as `"x,y"`; the center when absent.
    pub start: Option<String>,
    pub horizon: Option<usize>,
    pub discount: Option<f64>,
    pub dim: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub tasks: usize,
    pub seed: u64,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            kind: "gridworld".into(),
            width: 5,
            height: 5,
            goals: ["0,0", "4,0", "0,4", "4,4"].map(String::from).to_vec(),
            slip: 0.3,
            start: None,
            horizon: None,
            discount: None,
            dim: 4,
            n_states: 6,
            n_actions: 3,
            tasks: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub flavors: Vec<String>,
    pub shared_flavor: String,
    pub main_episodes: usize,
    pub shared_episodes: usize,
    pub seeds: Vec<u64>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            flavors: Flavor::GENERATED.iter().map(|f| f.name().to_string()).collect(),
            shared_flavor: "replay".into(),
            main_episodes: 10,
            shared_episodes: 40,
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PessimismSection {
    pub beta1: f64,
    pub beta2_init: f64,
    pub beta2_end: f64,
    pub decay: f64,
    pub lambda: f64,
    pub ensemble_n: usize,
    pub ood_actions_per_state: usize,
    pub ood_source: String,
}

impl Default for PessimismSection {
    fn default() -> Self {
        let p = desk_pessimism();
        PessimismSection {
            beta1: p.beta1,
            beta2_init: p.beta2_init,
            beta2_end: p.beta2_end,
            decay: p.decay,
            lambda: p.lambda,
            ensemble_n: p.ensemble_n,
            ood_actions_per_state: p.ood_actions_per_state,
            ood_source: p.ood_source.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub penalty_source: String,
    pub per_timestep: bool,
    pub outer_iterations: usize,
    pub ood_target: String,
    pub use_ood: bool,
    pub warm_start: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        let o = LsviOptions::default();
        SolverSection {
            penalty_source: o.penalty_source.to_string(),
            per_timestep: o.per_timestep,
            outer_iterations: o.outer_iterations,
            ood_target: o.ood_target.to_string(),
            use_ood: o.use_ood,
            warm_start: o.warm_start,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub quantile_k: f64,
    pub reselect_rounds: usize,
}

impl Default for SelectionSection {
    fn default() -> Self {
        let s = SelectionConfig::default();
        SelectionSection {
            quantile_k: s.quantile_k,
            reselect_rounds: s.reselect_rounds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub methods: Vec<String>,
    /// `pairwise` or `all-others`.
    pub share_mode: String,
    /// Main task indices; every task when absent.
    pub main_tasks: Option<Vec<usize>>,
    /// Coverage multiplier; the horizon when absent.
    pub coverage_beta: Option<f64>,
    pub coverage_probes: usize,
    pub record_wall_clock: bool,
    pub threads: Option<usize>,
    /// Optimality-gap threshold as a fraction of the optimal return.
    pub eta: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            methods: Method::ALL.iter().map(|m| m.name().to_string()).collect(),
            share_mode: "pairwise".into(),
            main_tasks: None,
            coverage_beta: None,
            coverage_probes: 1000,
            record_wall_clock: false,
            threads: None,
            eta: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub root: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            root: "pessim-share-out".into(),
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn parse_with<T: std::str::FromStr>(s: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| bad(e.to_string()))
}

fn parse_cell(s: &str) -> Result<(usize, usize), CliError> {
    let (x, y) = s
        .split_once(',')
        .ok_or_else(|| bad(format!("cell {s:?} is not \"x,y\"")))?;
    let coord = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| bad(format!("cell {s:?} is not \"x,y\"")))
    };
    Ok((coord(x)?, coord(y)?))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds every derived object once so errors surface at load time.
    fn validate(&self) -> Result<(), CliError> {
        let family = self.family()?;
        self.plan(&family)?
            .validate(&family)
            .map_err(|e| bad(e.to_string()))?;
        if self.data.seeds.is_empty() {
            return Err(bad("data.seeds must list at least one seed"));
        }
        if !(0.0..=1.0).contains(&self.sweep.eta) {
            return Err(bad(format!("sweep.eta {} outside [0, 1]", self.sweep.eta)));
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
    }

    /// `PESSIM_SHARE_OUT` when set, else `output.root`.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(&self.output.root),
        }
    }

    pub fn family(&self) -> Result<TaskFamily, CliError> {
        let e = &self.env;
        let family = match e.kind.as_str() {
            "gridworld" => {
                let goals = e.goals.iter().map(|g| parse_cell(g)).collect::<Result<Vec<_>, _>>()?;
                let mut spec = GridworldSpec::new(e.width, e.height, goals, e.slip);
                if let Some(start) = &e.start {
                    let (x, y) = parse_cell(start)?;
                    spec = spec.with_start(x, y);
                }
                if let Some(h) = e.horizon {
                    spec = spec.with_horizon(h);
                }
                if let Some(g) = e.discount {
                    spec = spec.with_discount(g);
                }
                build_tabular_gridworld(&spec)
            }
            "random-linear" => {
                let mut spec = RandomLinearSpec::new(
                    e.dim,
                    e.n_states,
                    e.n_actions,
                    e.horizon.unwrap_or(5),
                    e.tasks,
                    e.seed,
                );
                if let Some(g) = e.discount {
                    spec.discount = g;
                }
                build_random_linear_mdp(&spec)
            }
            other => return Err(bad(format!("unknown env.kind {other:?}"))),
        };
        family.map_err(|err| bad(err.to_string()))
    }

    pub fn flavors(&self) -> Result<Vec<Flavor>, CliError> {
        self.data.flavors.iter().map(|f| parse_with(f)).collect()
    }

    pub fn shared_flavor(&self) -> Result<Flavor, CliError> {
        parse_with(&self.data.shared_flavor)
    }

    pub fn pessimism(&self) -> Result<PessimismConfig, CliError> {
        let p = &self.pessimism;
        let cfg = PessimismConfig {
            beta1: p.beta1,
            beta2_init: p.beta2_init,
            beta2_end: p.beta2_end,
            decay: p.decay,
            lambda: p.lambda,
            ensemble_n: p.ensemble_n,
            ood_actions_per_state: p.ood_actions_per_state,
            ood_source: parse_with::<OodSource>(&p.ood_source)?,
        };
        cfg.validate().map_err(|e| bad(e.to_string()))?;
        Ok(cfg)
    }

    pub fn lsvi(&self) -> Result<LsviOptions, CliError> {
        let s = &self.solver;
        Ok(LsviOptions {
            penalty_source: parse_with::<PenaltySource>(&s.penalty_source)?,
            per_timestep: s.per_timestep,
            outer_iterations: s.outer_iterations,
            ood_target: parse_with::<OodTarget>(&s.ood_target)?,
            use_ood: s.use_ood,
            warm_start: s.warm_start,
        })
    }

    pub fn plan(&self, family: &TaskFamily) -> Result<SweepPlan, CliError> {
        let w = &self.sweep;
        let defaults = SweepPlan::for_family(family);
        Ok(SweepPlan {
            main_tasks: w.main_tasks.clone().unwrap_or(defaults.main_tasks),
            main_flavors: self.flavors()?,
            shared_flavor: self.shared_flavor()?,
            main_episodes: self.data.main_episodes,
            shared_episodes: self.data.shared_episodes,
            seeds: self.data.seeds.clone(),
            methods: w.methods.iter().map(|m| parse_with(m)).collect::<Result<_, _>>()?,
            share_mode: parse_with::<ShareMode>(&w.share_mode)?,
            pessimism: self.pessimism()?,
            lsvi: self.lsvi()?,
            selection: SelectionConfig {
                quantile_k: self.selection.quantile_k,
                reselect_rounds: self.selection.reselect_rounds,
            },
            coverage_beta: w.coverage_beta.unwrap_or(defaults.coverage_beta),
            coverage_probes: w.coverage_probes,
            record_wall_clock: w.record_wall_clock,
            threads: w.threads,
        })
    }
}
