//! Closed-form pessimistic least-squares value iteration.
//!
//! Each backup solves a ridge regression of `r + gamma V_{t+1}(s')` on
//! `phi(s, a)`, augmented with OOD rows at dataset states whose targets are
//! pessimistic pseudo-targets. The resulting Q is penalized by `beta1 Gamma`,
//! clipped to `[0, T - t]`, and read greedily.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use crate::datasets::SharedDataset;
use crate::error::{Error, Result};
use crate::fmt::join_exact;
use crate::mdp::{argmax, Policy, TaskFamily, ValueTable};
use crate::seeds;
use crate::uncertainty::{
    beta2_at, ensemble_std, sample_ensemble, sample_ood, Covariance, EnsembleQ, OodSample,
    PessimismConfig, PosteriorQ,
};

/// How `Gamma` is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltySource {
    /// Exact `sqrt(phi^T Lambda^-1 phi)`.
    Lcb,
    /// Standard deviation of an ensemble sampled from the posterior.
    Ensemble,
}

impl FromStr for PenaltySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lcb" => Ok(PenaltySource::Lcb),
            "ensemble" => Ok(PenaltySource::Ensemble),
            other => Err(Error::invalid(format!("unknown penalty source {other:?}"))),
        }
    }
}

impl fmt::Display for PenaltySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltySource::Lcb => "lcb",
            PenaltySource::Ensemble => "ensemble",
        })
    }
}

/// Regression targets attached to OOD rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OodTarget {
    /// `q_prev(s, a) - beta2 Gamma(s, a)` from the previous outer iterate.
    Pseudo,
    /// The exact backup `r + gamma E[V_{t+1}]`; needs the true dynamics.
    Oracle,
}

impl FromStr for OodTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo" => Ok(OodTarget::Pseudo),
            "oracle" => Ok(OodTarget::Oracle),
            other => Err(Error::invalid(format!("unknown OOD target {other:?}"))),
        }
    }
}

impl fmt::Display for OodTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OodTarget::Pseudo => "pseudo",
            OodTarget::Oracle => "oracle",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LsviOptions {
    pub penalty_source: PenaltySource,
    /// Fit each timestep on its own slice instead of pooling all data.
    pub per_timestep: bool,
    pub outer_iterations: usize,
    pub ood_target: OodTarget,
    pub use_ood: bool,
    /// Bootstrap the first pseudo-targets from a fit without OOD rows rather
    /// than from zero weights.
    pub warm_start: bool,
}

impl Default for LsviOptions {
    fn default() -> Self {
        LsviOptions {
            penalty_source: PenaltySource::Lcb,
            per_timestep: false,
            outer_iterations: 3,
            ood_target: OodTarget::Pseudo,
            use_ood: true,
            warm_start: true,
        }
    }
}

impl LsviOptions {
    /// No OOD rows; with zero betas this is plain ridge LSVI.
    pub fn without_ood() -> Self {
        LsviOptions {
            use_ood: false,
            ..LsviOptions::default()
        }
    }
}

/// Output of [`lsvi_pessimistic`].
#[derive(Clone, Debug, PartialEq)]
pub struct LsviSolution {
    /// Ridge weights per timestep.
    pub weights: Vec<DVector<f64>>,
    /// Penalized, clipped Q and its greedy V.
    pub values: ValueTable,
    pub policy: Policy,
    /// `Gamma_t` over pairs `s * n_actions + a`.
    pub penalties: Vec<Vec<f64>>,
}

impl LsviSolution {
    pub fn penalty(&self, t: usize, pair: usize) -> f64 {
        self.penalties[t][pair]
    }

    /// Record file: header, then `w`, `policy`, `gamma`, `q` and `v` lines.
    pub fn to_record(&self, extra: &BTreeMap<String, String>) -> String {
        let v = &self.values;
        let mut out = format!(
            "pessim-share-solution v=1 horizon={} n_states={} n_actions={} dim={}",
            v.horizon(),
            v.n_states(),
            v.n_actions(),
            self.weights.first().map_or(0, |w| w.len())
        );
        for (k, val) in extra {
            out.push_str(&format!(" {k}={val}"));
        }
        out.push('\n');
        for (t, w) in self.weights.iter().enumerate() {
            out.push_str(&format!("w,{t},{}\n", join_exact(w.iter().copied())));
        }
        for t in 0..v.horizon() {
            let actions: Vec<String> = (0..v.n_states())
                .map(|s| self.policy.action(t, s).to_string())
                .collect();
            out.push_str(&format!("policy,{t},{}\n", actions.join(",")));
        }
        for (t, g) in self.penalties.iter().enumerate() {
            out.push_str(&format!("gamma,{t},{}\n", join_exact(g.iter().copied())));
        }
        for t in 0..v.horizon() {
            out.push_str(&format!("q,{t},{}\n", join_exact(v.q_row(t).iter().copied())));
        }
        for t in 0..=v.horizon() {
            out.push_str(&format!("v,{t},{}\n", join_exact(v.v_row(t).iter().copied())));
        }
        out
    }
}

/// `r + gamma (v_next - beta1 Gamma)`: the backup with the next pair penalized.
pub fn utds_target(r: f64, v_next: f64, gamma: f64, beta1: f64, penalty: f64) -> f64 {
    r + gamma * (v_next - beta1 * penalty)
}

/// `q - beta2 Gamma`; uses neither reward nor transition.
pub fn ood_pseudo_target(q: f64, beta2: f64, penalty: f64) -> f64 {
    q - beta2 * penalty
}

/// Limit of repeatedly applying the pseudo-target with `beta2_init * decay^k`.
pub fn ood_fixed_point(q: f64, cfg: &PessimismConfig, penalty: f64) -> f64 {
    q - cfg.beta2_init / (1.0 - cfg.decay) * penalty
}

/// Next-state action used by [`apply_utds_operator`].
#[derive(Clone, Debug, PartialEq)]
pub enum NextAction {
    /// `argmax_a' Q(s', a') - penalty(s', a')`.
    Greedy,
    /// One action per state.
    Fixed(Vec<usize>),
}

/// One exact application of the penalized Bellman operator to a stationary Q
/// table over pairs:
/// `r(s,a) + gamma E_{s'}[Q(s', a') - penalty(s', a')]`.
///
/// `penalties` are already scaled, i.e. `beta1 Gamma`.
pub fn apply_utds_operator(
    q: &[f64],
    family: &TaskFamily,
    task: usize,
    penalties: &[f64],
    gamma: f64,
    next: &NextAction,
) -> Result<Vec<f64>> {
    family.check_task(task)?;
    let (ns, na) = (family.n_states(), family.n_actions());
    if q.len() != ns * na || penalties.len() != ns * na {
        return Err(Error::invalid("Q and penalty tables must cover every pair"));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(format!("discount {gamma} must lie in [0, 1)")));
    }
    let next_values: Vec<f64> = (0..ns)
        .map(|s| {
            let row = |a: usize| q[s * na + a] - penalties[s * na + a];
            match next {
                NextAction::Greedy => argmax((0..na).map(row)).1,
                NextAction::Fixed(actions) => row(actions[s]),
            }
        })
        .collect();
    if let NextAction::Fixed(actions) = next {
        if actions.len() != ns || actions.iter().any(|&a| a >= na) {
            return Err(Error::invalid("fixed next actions must give one valid action per state"));
        }
    }
    let dynamics = family.dynamics();
    let mut out = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            out.push(family.reward(task, s, a) + gamma * dynamics.expected(s, a, &next_values));
        }
    }
    Ok(out)
}

/// Per-pair sufficient statistics of one regression slice.
struct Slice {
    counts: Vec<f64>,
    reward_sums: Vec<f64>,
    /// Sorted `(s', count)` per pair.
    next_counts: Vec<Vec<(usize, f64)>>,
    covariance: Covariance,
}

impl Slice {
    fn new(n_pairs: usize, covariance: Covariance) -> Self {
        Slice {
            counts: vec![0.0; n_pairs],
            reward_sums: vec![0.0; n_pairs],
            next_counts: vec![Vec::new(); n_pairs],
            covariance,
        }
    }

    fn push(&mut self, pair: usize, r: f64, s_next: usize) {
        self.counts[pair] += 1.0;
        self.reward_sums[pair] += r;
        let list = &mut self.next_counts[pair];
        match list.binary_search_by_key(&s_next, |&(s, _)| s) {
            Ok(i) => list[i].1 += 1.0,
            Err(i) => list.insert(i, (s_next, 1.0)),
        }
    }
}

struct Problem<'a> {
    family: &'a TaskFamily,
    task: usize,
    cfg: &'a PessimismConfig,
    opts: &'a LsviOptions,
    seed: u64,
    slices: Vec<Slice>,
}

impl Problem<'_> {
    fn slice_of(&self, t: usize) -> usize {
        if self.opts.per_timestep {
            t
        } else {
            0
        }
    }

    /// Covariances including OOD rows, one per slice.
    fn augmented(&self, ood: &[OodSample]) -> Result<(Vec<Covariance>, Vec<Vec<f64>>)> {
        let f = self.family.features();
        let mut ood_counts = vec![vec![0.0; f.n_pairs()]; self.slices.len()];
        for o in ood {
            ood_counts[self.slice_of(o.t)][f.pair(o.s, o.a)] += 1.0;
        }
        let mut covs = Vec::with_capacity(self.slices.len());
        for (slice, counts) in self.slices.iter().zip(&ood_counts) {
            let mut cov = slice.covariance.clone();
            for (pair, &c) in counts.iter().enumerate() {
                if c > 0.0 {
                    cov.add_weighted(f.phi_pair(pair), c)?;
                }
            }
            covs.push(cov);
        }
        Ok((covs, ood_counts))
    }

    /// Penalties on every pair, plus ensemble deviations in ensemble mode.
    fn penalties(
        &self,
        cov: &Covariance,
        stream: &[u64],
    ) -> Result<(Vec<f64>, Option<EnsembleQ>)> {
        let f = self.family.features();
        match self.opts.penalty_source {
            PenaltySource::Lcb => {
                let g = (0..f.n_pairs())
                    .map(|p| cov.lcb_penalty(f.phi_pair(p)))
                    .collect::<Result<Vec<_>>>()?;
                Ok((g, None))
            }
            PenaltySource::Ensemble => {
                let post = PosteriorQ::from_moments(cov.clone(), &DVector::zeros(cov.dim()))?;
                let ens = sample_ensemble(
                    &post,
                    self.cfg.ensemble_n,
                    seeds::derive(self.seed, "ensemble", stream),
                )?;
                let g = (0..f.n_pairs())
                    .map(|p| ensemble_std(&ens, f.phi_pair(p)))
                    .collect();
                Ok((g, Some(ens)))
            }
        }
    }

    /// One backward pass. `ood` carries OOD counts per slice, the previous
    /// weights and `beta2` when OOD rows are active.
    fn backward(
        &self,
        covs: &[Covariance],
        ood: Option<(&[Vec<f64>], &[DVector<f64>], f64)>,
        iteration: u64,
    ) -> Result<LsviSolution> {
        let family = self.family;
        let f = family.features();
        let (horizon, ns, na) = (family.horizon(), family.n_states(), family.n_actions());
        let gamma = family.discount();
        let dynamics = family.dynamics();
        let mut values = ValueTable::zeros(horizon, ns, na);
        let mut policy = Policy::constant(horizon, ns, na, 0);
        let mut weights = vec![DVector::zeros(f.dim()); horizon];
        let mut penalties = vec![Vec::new(); horizon];

        // Pooled lcb penalties are identical across t; compute them once.
        let mut shared_penalty: Option<Vec<f64>> = None;

        for t in (0..horizon).rev() {
            let g = self.slice_of(t);
            let cov = &covs[g];
            let (gamma_t, ens) = match (&shared_penalty, self.opts.penalty_source) {
                (Some(p), PenaltySource::Lcb) => (p.clone(), None),
                _ => {
                    let (p, e) = self.penalties(cov, &[iteration, t as u64])?;
                    if self.opts.penalty_source == PenaltySource::Lcb && !self.opts.per_timestep {
                        shared_penalty = Some(p.clone());
                    }
                    (p, e)
                }
            };

            let v_next = values.v_row(t + 1).to_vec();
            let slice = &self.slices[g];
            let mut rhs = DVector::zeros(f.dim());
            for pair in 0..f.n_pairs() {
                let mut target = 0.0;
                if slice.counts[pair] > 0.0 {
                    target += slice.reward_sums[pair];
                    for &(sp, c) in &slice.next_counts[pair] {
                        target += gamma * c * v_next[sp];
                    }
                }
                if let Some((ood_counts, prev, beta2)) = ood {
                    let c = ood_counts[g][pair];
                    if c > 0.0 {
                        let y = match self.opts.ood_target {
                            OodTarget::Pseudo => ood_pseudo_target(
                                prev[t].dot(f.phi_pair(pair)),
                                beta2,
                                gamma_t[pair],
                            ),
                            OodTarget::Oracle => {
                                let (s, a) = (pair / na, pair % na);
                                family.reward(self.task, s, a)
                                    + gamma * dynamics.expected(s, a, &v_next)
                            }
                        };
                        target += c * y;
                    }
                }
                if target != 0.0 {
                    rhs.axpy(target, f.phi_pair(pair), 1.0);
                }
            }
            let w = cov.solve(&rhs)?;

            let cap = (horizon - t) as f64;
            for s in 0..ns {
                let row: Vec<f64> = (0..na)
                    .map(|a| {
                        let pair = f.pair(s, a);
                        let phi = f.phi_pair(pair);
                        let fit = match &ens {
                            Some(e) => w.dot(phi) + e.min_at(phi),
                            None => w.dot(phi),
                        };
                        (fit - self.cfg.beta1 * gamma_t[pair]).clamp(0.0, cap)
                    })
                    .collect();
                for (a, &q) in row.iter().enumerate() {
                    values.set_q(t, s, a, q);
                }
                let (best, v) = argmax(row);
                values.set_v(t, s, v);
                policy.set(t, s, best);
            }
            weights[t] = w;
            penalties[t] = gamma_t;
        }
        Ok(LsviSolution {
            weights,
            values,
            policy,
            penalties,
        })
    }
}

/// Pessimistic LSVI on a (possibly shared) dataset for `task`.
pub fn lsvi_pessimistic(
    dataset: &SharedDataset,
    family: &TaskFamily,
    task: usize,
    cfg: &PessimismConfig,
    opts: &LsviOptions,
    seed: u64,
) -> Result<LsviSolution> {
    family.check_task(task)?;
    cfg.validate()?;
    if dataset.main_task != task {
        return Err(Error::invalid(format!(
            "dataset belongs to task {}, solving task {task}",
            dataset.main_task
        )));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("cannot fit on an empty dataset"));
    }
    let f = family.features();
    let horizon = family.horizon();
    let n_slices = if opts.per_timestep { horizon } else { 1 };
    let mut slices = Vec::with_capacity(n_slices);
    for _ in 0..n_slices {
        slices.push(Slice::new(f.n_pairs(), Covariance::new(f.dim(), cfg.lambda)?));
    }
    for tr in &dataset.transitions {
        if tr.reward_task() != task {
            return Err(Error::invalid(format!(
                "transition from task {} is not labeled for task {task}",
                tr.source_task
            )));
        }
        if tr.t >= horizon || tr.s >= f.n_states() || tr.a >= f.n_actions() || tr.s_next >= f.n_states() {
            return Err(Error::invalid(format!(
                "transition (t={}, s={}, a={}, s'={}) outside the family",
                tr.t, tr.s, tr.a, tr.s_next
            )));
        }
        let g = if opts.per_timestep { tr.t } else { 0 };
        slices[g].push(f.pair(tr.s, tr.a), tr.r, tr.s_next);
    }
    for (g, slice) in slices.iter_mut().enumerate() {
        if slice.counts.iter().all(|&c| c == 0.0) {
            return Err(Error::UnderDetermined { timestep: g });
        }
        for pair in 0..f.n_pairs() {
            if slice.counts[pair] > 0.0 {
                slice.covariance.add_weighted(f.phi_pair(pair), slice.counts[pair])?;
            }
        }
    }
    let problem = Problem {
        family,
        task,
        cfg,
        opts,
        seed,
        slices,
    };

    let data_covs: Vec<Covariance> = problem.slices.iter().map(|s| s.covariance.clone()).collect();
    let initial = problem.backward(&data_covs, None, u64::MAX)?;
    if !opts.use_ood || opts.outer_iterations == 0 {
        return Ok(initial);
    }

    let mut prev_weights = if opts.warm_start {
        initial.weights.clone()
    } else {
        vec![DVector::zeros(f.dim()); horizon]
    };
    let mut current = initial;
    for k in 0..opts.outer_iterations {
        let ood = sample_ood(
            dataset,
            &current.policy,
            cfg,
            seeds::derive(seed, "ood", &[k as u64]),
        )?;
        let (covs, ood_counts) = problem.augmented(&ood)?;
        let beta2 = beta2_at(cfg, k as u64);
        current = problem.backward(&covs, Some((&ood_counts, &prev_weights, beta2)), k as u64)?;
        prev_weights = current.weights.clone();
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_dataset, merge, relabel, Flavor, Transition};
    use crate::mdp::{
        build_random_linear_mdp, build_tabular_gridworld, exact_optimal_policy, GridworldSpec,
        RandomLinearSpec,
    };
    use crate::uncertainty::OodSource;
    use proptest::prelude::*;
    use rand::Rng;

    /// Deterministic 2-state MDP: action 0 stays, action 1 switches; reward
    /// 1 for staying in state 1, 0.5 for switching out of state 0.
    fn two_state() -> TaskFamily {
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
        .unwrap()
    }

    /// Every (t, s, a) visited `reps` times.
    fn dense(family: &TaskFamily, reps: usize) -> SharedDataset {
        let mut transitions = Vec::new();
        for _ in 0..reps {
            for t in 0..family.horizon() {
                for s in 0..family.n_states() {
                    for a in 0..family.n_actions() {
                        let s_next = family.dynamics().transition(s, a).iter().position(|&p| p == 1.0).unwrap();
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
            parts: vec![crate::datasets::Part {
                source_task: 0,
                flavor: Flavor::Random,
                seed: 0,
                len: transitions.len(),
            }],
            transitions,
        }
    }

    fn zero_beta(lambda: f64) -> PessimismConfig {
        PessimismConfig {
            beta1: 0.0,
            beta2_init: 0.0,
            beta2_end: 0.0,
            lambda,
            ..PessimismConfig::default()
        }
    }

    fn max_gap(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn dense_data_recovers_oracle_q() {
        let family = two_state();
        let data = dense(&family, 100);
        let (_, oracle) = exact_optimal_policy(&family, 0).unwrap();
        let plain = lsvi_pessimistic(&data, &family, 0, &zero_beta(1e-6), &LsviOptions::without_ood(), 1)
            .unwrap();
        assert!(max_gap(plain.values.q_all(), oracle.q_all()) < 1e-2);

        // With OOD rows the pseudo-target offset shrinks like 1/sqrt(count).
        let cfg = PessimismConfig {
            beta1: 0.0,
            lambda: 1e-6,
            ..PessimismConfig::default()
        };
        let gaps: Vec<f64> = [100, 1000, 10_000]
            .iter()
            .map(|&reps| {
                let sol = lsvi_pessimistic(&dense(&family, reps), &family, 0, &cfg, &LsviOptions::default(), 1)
                    .unwrap();
                max_gap(sol.values.q_all(), oracle.q_all())
            })
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
        assert!(gaps[2] < 0.05);
    }

    #[test]
    fn single_task_merge_is_transparent() {
        let family =
            build_tabular_gridworld(&GridworldSpec::new(3, 3, vec![(0, 0), (2, 2)], 0.1)).unwrap();
        let d = generate_dataset(&family, 0, Flavor::Medium, 10, 2).unwrap();
        let cfg = PessimismConfig::default();
        let a = lsvi_pessimistic(&merge(&d, &[]).unwrap(), &family, 0, &cfg, &LsviOptions::default(), 5)
            .unwrap();
        let b = lsvi_pessimistic(&SharedDataset::single(&d), &family, 0, &cfg, &LsviOptions::default(), 5)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn solution_contracts_hold() {
        let family =
            build_tabular_gridworld(&GridworldSpec::new(3, 3, vec![(0, 0), (2, 2)], 0.2)).unwrap();
        let main = generate_dataset(&family, 0, Flavor::Random, 5, 1).unwrap();
        let other = generate_dataset(&family, 1, Flavor::Replay, 5, 2).unwrap();
        let shared = merge(&main, &[relabel(&other, &family, 0).unwrap()]).unwrap();
        for source in [PenaltySource::Lcb, PenaltySource::Ensemble] {
            let opts = LsviOptions {
                penalty_source: source,
                ..LsviOptions::default()
            };
            let cfg = PessimismConfig {
                beta1: 1.0,
                ..PessimismConfig::default()
            };
            let sol = lsvi_pessimistic(&shared, &family, 0, &cfg, &opts, 3).unwrap();
            let horizon = family.horizon();
            for t in 0..horizon {
                for s in 0..family.n_states() {
                    let row: Vec<f64> = (0..5).map(|a| sol.values.q(t, s, a)).collect();
                    assert!(row.iter().all(|&q| (0.0..=(horizon - t) as f64).contains(&q)));
                    let (best, v) = argmax(row.iter().copied());
                    assert_eq!(sol.policy.action(t, s), best);
                    assert_eq!(sol.values.v(t, s), v);
                }
            }
            assert!(sol.values.v_row(horizon).iter().all(|&v| v == 0.0));
            let again = lsvi_pessimistic(&shared, &family, 0, &cfg, &opts, 3).unwrap();
            assert_eq!(sol, again);
        }
    }

    #[test]
    fn per_timestep_needs_every_slice() {
        let family = two_state();
        let mut data = dense(&family, 2);
        data.transitions.retain(|tr| tr.t != 2);
        data.parts[0].len = data.transitions.len();
        let opts = LsviOptions {
            per_timestep: true,
            ..LsviOptions::default()
        };
        let err = lsvi_pessimistic(&data, &family, 0, &PessimismConfig::default(), &opts, 0);
        assert!(matches!(err, Err(Error::UnderDetermined { timestep: 2 })));
        assert!(lsvi_pessimistic(&data, &family, 0, &PessimismConfig::default(), &LsviOptions::default(), 0).is_ok());
    }

    #[test]
    fn rejects_foreign_and_empty_data() {
        let family =
            build_tabular_gridworld(&GridworldSpec::new(3, 3, vec![(0, 0), (2, 2)], 0.0)).unwrap();
        let d = generate_dataset(&family, 1, Flavor::Random, 1, 0).unwrap();
        let cfg = PessimismConfig::default();
        let opts = LsviOptions::default();
        assert!(lsvi_pessimistic(&SharedDataset::single(&d), &family, 0, &cfg, &opts, 0).is_err());
        let empty = SharedDataset {
            main_task: 0,
            parts: vec![],
            transitions: vec![],
        };
        assert!(lsvi_pessimistic(&empty, &family, 0, &cfg, &opts, 0).is_err());
    }

    #[test]
    fn target_helpers() {
        assert!((utds_target(1.0, 10.0, 0.99, 0.001, 2.0) - 10.89802).abs() < 1e-12);
        assert_eq!(utds_target(0.3, 2.0, 0.9, 0.0, 5.0), 0.3 + 0.9 * 2.0);
        assert_eq!(utds_target(0.3, 2.0, 0.9, 0.7, 0.0), 0.3 + 0.9 * 2.0);
        assert_eq!(ood_pseudo_target(5.0, 3.0, 1.0), 2.0);
        assert_eq!(ood_pseudo_target(5.0, 3.0, 0.0), 5.0);
        let cfg = PessimismConfig {
            beta2_init: 0.1,
            beta2_end: 0.0,
            decay: 0.5,
            ..PessimismConfig::default()
        };
        assert!((ood_fixed_point(0.0, &cfg, 1.0) + 0.2).abs() < 1e-15);
        assert_eq!(ood_fixed_point(1.5, &cfg, 0.0), 1.5);
    }

    #[test]
    fn iterated_pseudo_targets_reach_fixed_point() {
        let cfg = PessimismConfig {
            beta2_init: 0.1,
            beta2_end: 0.0,
            decay: 0.5,
            ..PessimismConfig::default()
        };
        let mut q = 0.7;
        for k in 0..10_000u64 {
            q = ood_pseudo_target(q, beta2_at(&cfg, k), 1.0);
        }
        assert!((q - ood_fixed_point(0.7, &cfg, 1.0)).abs() < 1e-9);
    }

    #[test]
    fn operator_examples() {
        let family =
            build_tabular_gridworld(&GridworldSpec::new(3, 2, vec![(0, 0)], 0.2)).unwrap();
        let n = family.features().n_pairs();
        let mut rng = seeds::rng(0);
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let pen: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.5)).collect();
        let a = apply_utds_operator(&q, &family, 0, &pen, 0.9, &NextAction::Greedy).unwrap();
        let b = apply_utds_operator(&q, &family, 0, &pen, 0.9, &NextAction::Greedy).unwrap();
        assert_eq!(a, b);
        let q2: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let c = apply_utds_operator(&q, &family, 0, &pen, 0.0, &NextAction::Greedy).unwrap();
        let d = apply_utds_operator(&q2, &family, 0, &pen, 0.0, &NextAction::Greedy).unwrap();
        assert_eq!(c, d);
        assert!(apply_utds_operator(&q, &family, 0, &pen, 1.0, &NextAction::Greedy).is_err());
    }

    fn sup(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn operator_contracts(seed in any::<u64>(), gi in 0usize..3, greedy in any::<bool>()) {
            let gamma = [0.5, 0.9, 0.99][gi];
            let family = build_random_linear_mdp(&RandomLinearSpec::new(3, 5, 3, 2, 1, seed)).unwrap();
            let n = 15;
            let mut rng = seeds::rng(seed);
            let q1: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let q2: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let pen: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.1)).collect();
            let next = if greedy {
                NextAction::Greedy
            } else {
                NextAction::Fixed((0..5).map(|_| rng.random_range(0..3)).collect())
            };
            let t1 = apply_utds_operator(&q1, &family, 0, &pen, gamma, &next).unwrap();
            let t2 = apply_utds_operator(&q2, &family, 0, &pen, gamma, &next).unwrap();
            prop_assert!(sup(&t1, &t2) <= gamma * sup(&q1, &q2) + 1e-9);
        }

        #[test]
        fn larger_beta1_never_raises_q(seed in any::<u64>(), b in 0.0f64..2.0, extra in 0.0f64..2.0) {
            let family = build_tabular_gridworld(&GridworldSpec::new(3, 3, vec![(0, 0)], 0.2)).unwrap();
            let d = generate_dataset(&family, 0, Flavor::Random, 4, seed).unwrap();
            let data = SharedDataset::single(&d);
            let opts = LsviOptions::default();
            let base = PessimismConfig { ood_source: OodSource::Uniform, ..PessimismConfig::default() };
            let lo = lsvi_pessimistic(&data, &family, 0, &PessimismConfig { beta1: b, ..base.clone() }, &opts, seed).unwrap();
            let hi = lsvi_pessimistic(&data, &family, 0, &PessimismConfig { beta1: b + extra, ..base }, &opts, seed).unwrap();
            for (h, l) in hi.values.q_all().iter().zip(lo.values.q_all()) {
                prop_assert!(*h <= *l + 1e-12);
            }
        }
    }
}
