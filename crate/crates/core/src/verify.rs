//! Self-contained numerical checks of the theory, grouped into suites.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::bench::metrics::{calibrate_beta, data_penalties, expected_uncertainty, xi_coverage};
use crate::bench::sweep::{desk_family, desk_pessimism, run_sharing_grid, Method, SweepPlan};
use crate::datasets::{count_table, generate_dataset, merge, relabel, Flavor, Part, SharedDataset, Transition};
use crate::error::{Error, Result};
use crate::mdp::{build_tabular_gridworld, exact_optimal_policy, GridworldSpec, TaskFamily};
use crate::pevi::{
    apply_utds_operator, lsvi_pessimistic, ood_fixed_point, ood_pseudo_target, LsviOptions,
    NextAction, OodTarget,
};
use crate::seeds;
use crate::uncertainty::{
    beta2_at, ensemble_std, sample_ensemble, Covariance, PessimismConfig, PosteriorQ,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Lemma1,
    Thm1,
    Thm2,
    Corollary1,
    Contraction,
    FixedPoint,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Lemma1,
        Suite::Thm1,
        Suite::Thm2,
        Suite::Corollary1,
        Suite::Contraction,
        Suite::FixedPoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Lemma1 => "lemma1",
            Suite::Thm1 => "thm1",
            Suite::Thm2 => "thm2",
            Suite::Corollary1 => "corollary1",
            Suite::Contraction => "contraction",
            Suite::FixedPoint => "fixedpoint",
        }
    }

    /// `all` expands to every suite.
    pub fn parse_list(s: &str) -> Result<Vec<Suite>> {
        if s == "all" {
            Ok(Suite::ALL.to_vec())
        } else {
            Ok(vec![s.parse()?])
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Lemma1 => vec![lemma1_identity()?, claim1_ensemble()?],
        Suite::Thm1 => vec![thm1_random_chains()?, thm1_gridworld_cells()?, tabular_penalty_identity()?],
        Suite::Thm2 => vec![thm2_coverage()?],
        Suite::Corollary1 => vec![corollary1_bound()?],
        Suite::Contraction => vec![contraction()?],
        Suite::FixedPoint => vec![ood_fixed_point_check()?, dense_oracle_equivalence()?],
    };
    Ok(SuiteReport {
        suite: suite.name().to_string(),
        checks,
    })
}

/// Random feature with norm at most 1.
fn random_feature(dim: usize, rng: &mut impl Rng) -> DVector<f64> {
    let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = v.norm();
    if norm == 0.0 {
        v
    } else {
        v * (rng.random_range(0.0..1.0) / norm)
    }
}

fn random_covariance(dim: usize, lambda: f64, n: usize, rng: &mut impl Rng) -> Result<Covariance> {
    let phis: Vec<DVector<f64>> = (0..n).map(|_| random_feature(dim, rng)).collect();
    Covariance::new(dim, lambda)?.accumulate(&phis)
}

/// Posterior variance through the eigendecomposition equals the Cholesky
/// quadratic form: 20 covariances, 25 probes each.
pub fn lemma1_identity() -> Result<Check> {
    let mut rng = seeds::rng(seeds::derive(0, "verify-lemma1", &[]));
    let mut worst = 0.0f64;
    let mut probes = 0;
    for _ in 0..20 {
        let dim = rng.random_range(2..9);
        let lambda = rng.random_range(0.1..2.0);
        let n = rng.random_range(0..40);
        let cov = random_covariance(dim, lambda, n, &mut rng)?;
        let phi_y = DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0));
        let post = PosteriorQ::from_moments(cov.clone(), &phi_y)?;
        for _ in 0..25 {
            let phi = random_feature(dim, &mut rng);
            worst = worst.max((post.variance_at(&phi) - cov.quadratic_form(&phi)?).abs());
            probes += 1;
        }
    }
    Ok(Check::new(
        "posterior-variance-identity",
        worst <= 1e-10,
        format!("{probes} probes, max |var - phi^T Lambda^-1 phi| = {worst:.3e} (tol 1e-10)"),
    ))
}

/// Ensemble std with `N = 10^4` sampled members against the LCB penalty on
/// 100 probes with penalty at least `1e-3`.
pub fn claim1_ensemble() -> Result<Check> {
    let mut rng = seeds::rng(seeds::derive(0, "verify-claim1", &[]));
    let dim = 6;
    let cov = random_covariance(dim, 1.0, 30, &mut rng)?;
    let phi_y = DVector::from_fn(dim, |_, _| rng.random_range(-3.0..3.0));
    let post = PosteriorQ::from_moments(cov.clone(), &phi_y)?;
    let ens = sample_ensemble(&post, 10_000, seeds::derive(0, "verify-claim1-ensemble", &[]))?;
    let mut worst = 0.0f64;
    let mut probes = 0;
    while probes < 100 {
        let phi = random_feature(dim, &mut rng);
        let pen = cov.lcb_penalty(&phi)?;
        if pen < 1e-3 {
            continue;
        }
        worst = worst.max((ensemble_std(&ens, &phi) - pen).abs() / pen);
        probes += 1;
    }
    Ok(Check::new(
        "ensemble-std-converges",
        worst < 0.05,
        format!("N = 10000, {probes} probes, max relative error {worst:.4} (tol 0.05)"),
    ))
}

/// `Gamma(A) >= Gamma(A+B) >= Gamma(A+B+C)` on 1000 random instances.
pub fn thm1_random_chains() -> Result<Check> {
    let mut rng = seeds::rng(seeds::derive(0, "verify-thm1", &[]));
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let dim = rng.random_range(1..7);
        let lambda = rng.random_range(0.05..2.0);
        let a = random_covariance(dim, lambda, rng.random_range(0..12), &mut rng)?;
        let b = random_covariance(dim, lambda, rng.random_range(0..12), &mut rng)?;
        let c = random_covariance(dim, lambda, rng.random_range(0..12), &mut rng)?;
        let ab = a.merge(&b)?;
        let abc = ab.merge(&c)?;
        let phi = random_feature(dim, &mut rng);
        let (ga, gab, gabc) = (a.lcb_penalty(&phi)?, ab.lcb_penalty(&phi)?, abc.lcb_penalty(&phi)?);
        worst = worst.max(gab - ga).max(gabc - gab);
    }
    Ok(Check::new(
        "merge-never-increases-penalty",
        worst <= 1e-10,
        format!("1000 random chains, max increase {worst:.3e} (tol 1e-10)"),
    ))
}

/// Pointwise penalty and expected-uncertainty monotonicity on every cell of
/// the default desk sweep, plus the chain with two shared tasks.
pub fn thm1_gridworld_cells() -> Result<Check> {
    let family = desk_family()?;
    let plan = SweepPlan::for_family(&family);
    let lambda = plan.pessimism.lambda;
    let mut worst = f64::NEG_INFINITY;
    let mut worst_expected = f64::NEG_INFINITY;
    let mut cells = 0;
    for &seed in &plan.seeds {
        for &main in &plan.main_tasks {
            let (optimal, _) = exact_optimal_policy(&family, main)?;
            for &flavor in &plan.main_flavors {
                let sets = plan.shared_sets(&family, main);
                let (main_data, _) = plan.cell_data(&family, seed, main, flavor, &[])?;
                let base = data_penalties(&family, &main_data.transitions, lambda)?;
                let base_expected = expected_uncertainty(&family, &[base.clone()], &optimal)?;
                for shared in &sets {
                    let (_, merged) = plan.cell_data(&family, seed, main, flavor, shared)?;
                    let pen = data_penalties(&family, &merged.transitions, lambda)?;
                    for (p, b) in pen.iter().zip(&base) {
                        worst = worst.max(p - b);
                    }
                    let e = expected_uncertainty(&family, &[pen], &optimal)?;
                    worst_expected = worst_expected.max(e - base_expected);
                    cells += 1;
                }
                // Chain D_i, D_i + D_j, D_i + D_j + D_k.
                let others: Vec<usize> = sets.into_iter().flatten().collect();
                if others.len() >= 2 {
                    let (_, one) = plan.cell_data(&family, seed, main, flavor, &others[..1])?;
                    let (_, two) = plan.cell_data(&family, seed, main, flavor, &others[..2])?;
                    let p1 = data_penalties(&family, &one.transitions, lambda)?;
                    let p2 = data_penalties(&family, &two.transitions, lambda)?;
                    for ((a, b), c) in base.iter().zip(&p1).zip(&p2) {
                        worst = worst.max(b - a).max(c - b);
                    }
                }
            }
        }
    }
    Ok(Check::new(
        "merge-monotone-on-sweep-cells",
        worst <= 1e-10 && worst_expected <= 1e-9,
        format!(
            "{cells} cells, max pointwise increase {worst:.3e} (tol 1e-10), \
             max expected-uncertainty increase {worst_expected:.3e} (tol 1e-9)"
        ),
    ))
}

/// One-hot features with `lambda = 1`: `Gamma(s,a) = 1 / sqrt(N(s,a) + 1)`.
pub fn tabular_penalty_identity() -> Result<Check> {
    let family = desk_family()?;
    let mut worst = 0.0f64;
    let mut counted = 0;
    for seed in 0..5 {
        let data = generate_dataset(&family, 0, Flavor::Random, 20, seed)?;
        let counts = count_table(&data.transitions, &family);
        let pen = data_penalties(&family, &data.transitions, 1.0)?;
        for (n, g) in counts.iter().zip(&pen) {
            if *n > 0 {
                worst = worst.max((g - 1.0 / ((*n as f64) + 1.0).sqrt()).abs());
                counted += 1;
            }
        }
    }
    Ok(Check::new(
        "tabular-pseudo-count",
        worst <= 4.0 * f64::EPSILON,
        format!("{counted} counted pairs, max deviation {worst:.3e} (tol 4 ulp)"),
    ))
}

/// The 3x3 gridworld suite: four corner tasks, slip 0.2, start at the center.
pub fn small_suite_family() -> Result<TaskFamily> {
    build_tabular_gridworld(&GridworldSpec::new(
        3,
        3,
        vec![(0, 0), (2, 2), (2, 0), (0, 2)],
        0.2,
    ))
}

fn small_suite_solution(family: &TaskFamily, main: usize, seed: u64) -> Result<crate::pevi::LsviSolution> {
    let shared = (main + 1) % family.n_tasks();
    let d = generate_dataset(family, main, Flavor::Random, 20, seed)?;
    let s = generate_dataset(family, shared, Flavor::Replay, 20, seed)?;
    let data = merge(&d, &[relabel(&s, family, main)?])?;
    let opts = LsviOptions {
        ood_target: OodTarget::Oracle,
        ..LsviOptions::default()
    };
    let cfg = PessimismConfig {
        lambda: 1.0,
        ..desk_pessimism()
    };
    lsvi_pessimistic(&data, family, main, &cfg, &opts, seed)
}

/// Oracle OOD targets, `lambda = 1`, `beta` calibrated at `xi = 0.05` on a holdout seed,
/// coverage at least 0.90 on five fresh seeds, for every main task.
pub fn thm2_coverage() -> Result<Check> {
    let family = small_suite_family()?;
    let holdout = 1_000;
    let mut worst = f64::INFINITY;
    let mut betas = Vec::new();
    for main in 0..family.n_tasks() {
        let beta = calibrate_beta(&family, main, &small_suite_solution(&family, main, holdout)?, 0.05)?;
        betas.push(beta);
        for seed in 0..5 {
            let sol = small_suite_solution(&family, main, seed)?;
            let cov = xi_coverage(
                &family,
                main,
                &sol,
                beta,
                10_000,
                seeds::derive(seed, "verify-thm2", &[main as u64]),
            )?;
            worst = worst.min(cov);
        }
    }
    let betas: Vec<String> = betas.iter().map(|b| format!("{b:.3}")).collect();
    Ok(Check::new(
        "xi-quantifier-coverage",
        worst >= 0.90,
        format!(
            "calibrated beta per task [{}], min coverage over 4 tasks x 5 seeds {worst:.4} (tol 0.90)",
            betas.join(", ")
        ),
    ))
}

/// `T sqrt(d) ln(T / xi)`: the order of the quantifier scale with unit
/// constant.
pub fn theory_beta(horizon: usize, dim: usize, xi: f64) -> f64 {
    let t = horizon as f64;
    t * (dim as f64).sqrt() * (t / xi).ln()
}

/// Every cell of the default desk sweep satisfies
/// `subOpt <= beta sum_t E_pi*[Gamma(D_hat)] + 1e-6` with the theory scale at
/// `xi = 0.05`, and the bound under the shared data is at most the bound
/// under the main data alone.
pub fn corollary1_bound() -> Result<Check> {
    let family = desk_family()?;
    let plan = SweepPlan {
        coverage_probes: 10,
        ..SweepPlan::for_family(&family)
    };
    let beta = theory_beta(family.horizon(), family.features().dim(), 0.05);
    let rows = run_sharing_grid(&family, &plan)?;
    if let Some(bad) = rows.iter().find(|r| r.error.is_some()) {
        return Err(Error::invalid(format!(
            "sweep cell failed: {}",
            bad.error.as_deref().unwrap_or_default()
        )));
    }
    let mut violations = 0;
    let mut order_violations = 0;
    let mut tightest = f64::INFINITY;
    for r in &rows {
        let bound = beta * r.expected_uncertainty;
        if r.subopt > bound + 1e-6 {
            violations += 1;
        }
        tightest = tightest.min(bound - r.subopt);
        let single = rows.iter().find(|s| {
            s.method == Method::Single
                && s.main_task == r.main_task
                && s.main_flavor == r.main_flavor
                && s.seed == r.seed
        });
        if let Some(s) = single {
            if bound > beta * s.expected_uncertainty {
                order_violations += 1;
            }
        }
    }
    Ok(Check::new(
        "suboptimality-bound",
        violations == 0 && order_violations == 0,
        format!(
            "{} cells, beta = {beta:.1}, bound violations {violations}, \
             shared-above-single violations {order_violations}, min slack {tightest:.4}",
            rows.len()
        ),
    ))
}

/// `||T Q1 - T Q2||_inf / ||Q1 - Q2||_inf <= gamma + 1e-9` over 200 random
/// pairs per discount.
pub fn contraction() -> Result<Check> {
    let family = desk_family()?;
    let n = family.features().n_pairs();
    let data = generate_dataset(&family, 0, Flavor::Random, 10, 0)?;
    let pen: Vec<f64> = data_penalties(&family, &data.transitions, 1.0)?
        .into_iter()
        .map(|g| 0.2 * g)
        .collect();
    let mut rng = seeds::rng(seeds::derive(0, "verify-contraction", &[]));
    let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let mut details = Vec::new();
    let mut passed = true;
    for gamma in [0.5, 0.9, 0.99] {
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let q1: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let q2: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let t1 = apply_utds_operator(&q1, &family, 0, &pen, gamma, &NextAction::Greedy)?;
            let t2 = apply_utds_operator(&q2, &family, 0, &pen, gamma, &NextAction::Greedy)?;
            worst = worst.max(sup(&t1, &t2) / sup(&q1, &q2));
        }
        passed &= worst <= gamma + 1e-9;
        details.push(format!("gamma {gamma}: max ratio {worst:.6}"));
    }
    Ok(Check::new("operator-contraction", passed, details.join("; ")))
}

/// `10^4` pseudo-target applications with `beta2 = 3 * 0.99^k` against the
/// closed form `q - beta2 / (1 - alpha) Gamma`.
pub fn ood_fixed_point_check() -> Result<Check> {
    let cfg = PessimismConfig {
        beta2_init: 3.0,
        beta2_end: 0.0,
        decay: 0.99,
        ..PessimismConfig::default()
    };
    let mut rng = seeds::rng(seeds::derive(0, "verify-fixedpoint", &[]));
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let q0 = rng.random_range(-5.0..5.0);
        let gamma = rng.random_range(0.0..1.0);
        let mut q = q0;
        for k in 0..10_000u64 {
            q = ood_pseudo_target(q, beta2_at(&cfg, k), gamma);
        }
        worst = worst.max((q - ood_fixed_point(q0, &cfg, gamma)).abs());
    }
    Ok(Check::new(
        "ood-geometric-fixed-point",
        worst <= 1e-9,
        format!("100 starts, alpha = 0.99, max deviation {worst:.3e} (tol 1e-9)"),
    ))
}

/// Deterministic 2-state MDP: action 0 stays, action 1 switches; reward 1
/// for staying in state 1 and 0.5 for switching out of state 0.
pub fn two_state_family() -> Result<TaskFamily> {
    TaskFamily::tabular(
        2,
        2,
        4,
        1.0,
        0,
        &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]],
        &[vec![0.0, 0.5, 1.0, 0.0]],
        vec!["chain".into()],
    )
}

/// Every `(t, s, a)` of a deterministic family visited `reps` times.
pub fn dense_dataset(family: &TaskFamily, reps: usize) -> SharedDataset {
    let dynamics = family.dynamics();
    let mut transitions = Vec::new();
    for _ in 0..reps {
        for t in 0..family.horizon() {
            for s in 0..family.n_states() {
                for a in 0..family.n_actions() {
                    let s_next = dynamics
                        .transition(s, a)
                        .iter()
                        .position(|&p| p == 1.0)
                        .unwrap_or(s);
                    transitions.push(Transition {
                        t,
                        s,
                        a,
                        r: family.reward(0, s, a),
                        s_next,
                        source_task: 0,
                        relabeled_for: None,
                    });
                }
            }
        }
    }
    SharedDataset {
        main_task: 0,
        parts: vec![Part {
            source_task: 0,
            flavor: Flavor::Random,
            seed: 0,
            len: transitions.len(),
        }],
        transitions,
    }
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `beta1 = 0` on dense data reproduces backward induction within `1e-2`:
/// plain ridge LSVI at 100 visits per `(t, s, a)`, and the full solver with
/// the default OOD schedule at `10^5` visits.
pub fn dense_oracle_equivalence() -> Result<Check> {
    let family = two_state_family()?;
    let (_, oracle) = exact_optimal_policy(&family, 0)?;
    let plain_cfg = PessimismConfig {
        beta1: 0.0,
        beta2_init: 0.0,
        beta2_end: 0.0,
        lambda: 1e-6,
        ..PessimismConfig::default()
    };
    let plain = lsvi_pessimistic(&dense_dataset(&family, 100), &family, 0, &plain_cfg, &LsviOptions::without_ood(), 0)?;
    let plain_gap = max_gap(plain.values.q_all(), oracle.q_all());
    let full_cfg = PessimismConfig {
        beta1: 0.0,
        lambda: 1e-6,
        ..PessimismConfig::default()
    };
    let full = lsvi_pessimistic(&dense_dataset(&family, 100_000), &family, 0, &full_cfg, &LsviOptions::default(), 0)?;
    let full_gap = max_gap(full.values.q_all(), oracle.q_all());
    Ok(Check::new(
        "dense-data-matches-backward-induction",
        plain_gap < 1e-2 && full_gap < 1e-2,
        format!(
            "max |Q - Q*|: ridge at 100 visits {plain_gap:.3e}, with OOD rows at 1e5 visits {full_gap:.3e} (tol 1e-2)"
        ),
    ))
}
