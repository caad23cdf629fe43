//! Evaluation against exact oracles.

use rand::Rng;

use crate::datasets::Transition;
use crate::error::{Error, Result};
use crate::mdp::{exact_optimal_policy, policy_value, Policy, TaskFamily};
use crate::pevi::LsviSolution;
use crate::seeds;
use crate::uncertainty::Covariance;

/// Exact `V^pi_0(s_0)`.
pub fn policy_return(family: &TaskFamily, task: usize, policy: &Policy) -> Result<f64> {
    let table = policy_value(family, task, policy)?;
    Ok(table.v(0, family.dynamics().initial_state()))
}

/// `V*_0(s_0) - V^pi_0(s_0)`.
pub fn suboptimality(family: &TaskFamily, task: usize, policy: &Policy) -> Result<f64> {
    let (_, optimal) = exact_optimal_policy(family, task)?;
    let s0 = family.dynamics().initial_state();
    Ok(optimal.v(0, s0) - policy_return(family, task, policy)?)
}

/// State distribution of `policy` at each `t` in `0..T`, starting from `s_0`.
pub fn state_occupancy(family: &TaskFamily, policy: &Policy) -> Vec<Vec<f64>> {
    let ns = family.n_states();
    let dynamics = family.dynamics();
    let mut dist = vec![0.0; ns];
    dist[dynamics.initial_state()] = 1.0;
    let mut out = Vec::with_capacity(family.horizon());
    for t in 0..family.horizon() {
        let mut next = vec![0.0; ns];
        for (s, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (sp, &q) in dynamics.transition(s, policy.action(t, s)).iter().enumerate() {
                next[sp] += p * q;
            }
        }
        out.push(std::mem::replace(&mut dist, next));
    }
    out
}

/// `sum_t E_{pi}[Gamma_t(s_t, a_t)]` over the `T` steps of an episode.
///
/// `penalties` holds one row over pairs per timestep, or a single row used at
/// every timestep.
pub fn expected_uncertainty(
    family: &TaskFamily,
    penalties: &[Vec<f64>],
    policy: &Policy,
) -> Result<f64> {
    let horizon = family.horizon();
    let n_pairs = family.features().n_pairs();
    if !(penalties.len() == horizon || penalties.len() == 1)
        || penalties.iter().any(|row| row.len() != n_pairs)
    {
        return Err(Error::invalid(
            "penalties must give one row over all pairs per timestep (or one shared row)",
        ));
    }
    let f = family.features();
    let mut total = 0.0;
    for (t, dist) in state_occupancy(family, policy).iter().enumerate() {
        let row = &penalties[if penalties.len() == 1 { 0 } else { t }];
        for (s, &p) in dist.iter().enumerate() {
            total += p * row[f.pair(s, policy.action(t, s))];
        }
    }
    Ok(total)
}

/// LCB penalties of the data-only covariance of `transitions`, one per pair.
pub fn data_penalties(
    family: &TaskFamily,
    transitions: &[Transition],
    lambda: f64,
) -> Result<Vec<f64>> {
    let f = family.features();
    let mut counts = vec![0.0; f.n_pairs()];
    for tr in transitions {
        counts[f.pair(tr.s, tr.a)] += 1.0;
    }
    let mut cov = Covariance::new(f.dim(), lambda)?;
    for (pair, &c) in counts.iter().enumerate() {
        if c > 0.0 {
            cov.add_weighted(f.phi_pair(pair), c)?;
        }
    }
    (0..f.n_pairs())
        .map(|p| cov.lcb_penalty(f.phi_pair(p)))
        .collect()
}

/// `|w_t . phi(s,a) - (r + gamma E[V_{t+1}])|` for the solution's own `V`.
pub fn bellman_error(
    family: &TaskFamily,
    task: usize,
    sol: &LsviSolution,
    t: usize,
    s: usize,
    a: usize,
) -> f64 {
    let f = family.features();
    let exact = family.reward(task, s, a)
        + family.discount() * family.dynamics().expected(s, a, sol.values.v_row(t + 1));
    (sol.weights[t].dot(f.phi(s, a)) - exact).abs()
}

/// Fraction of uniform `(t, s, a)` probes with Bellman error within
/// `beta * Gamma_t(s, a)`.
pub fn xi_coverage(
    family: &TaskFamily,
    task: usize,
    sol: &LsviSolution,
    beta: f64,
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    family.check_task(task)?;
    if n_probes == 0 {
        return Err(Error::invalid("n_probes must be at least 1"));
    }
    let mut rng = seeds::rng(seed);
    let f = family.features();
    let mut hits = 0usize;
    for _ in 0..n_probes {
        let t = rng.random_range(0..family.horizon());
        let s = rng.random_range(0..family.n_states());
        let a = rng.random_range(0..family.n_actions());
        if bellman_error(family, task, sol, t, s, a) <= beta * sol.penalty(t, f.pair(s, a)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_probes as f64)
}

/// Smallest `beta` under which at least `1 - xi` of all `(t, s, a)` satisfy
/// the coverage inequality.
pub fn calibrate_beta(family: &TaskFamily, task: usize, sol: &LsviSolution, xi: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&xi) {
        return Err(Error::invalid(format!("xi {xi} outside [0, 1)")));
    }
    let f = family.features();
    let mut ratios = Vec::new();
    for t in 0..family.horizon() {
        for s in 0..family.n_states() {
            for a in 0..family.n_actions() {
                let err = bellman_error(family, task, sol, t, s, a);
                let g = sol.penalty(t, f.pair(s, a));
                ratios.push(if err == 0.0 { 0.0 } else { err / g });
            }
        }
    }
    ratios.sort_by(f64::total_cmp);
    let need = ((1.0 - xi) * ratios.len() as f64).ceil() as usize;
    Ok(ratios[need.clamp(1, ratios.len()) - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_dataset, Flavor, SharedDataset};
    use crate::mdp::{build_tabular_gridworld, GridworldSpec};
    use crate::pevi::{lsvi_pessimistic, LsviOptions};
    use crate::uncertainty::PessimismConfig;

    fn grid(slip: f64) -> TaskFamily {
        build_tabular_gridworld(&GridworldSpec::new(3, 3, vec![(2, 2)], slip).with_start(0, 0))
            .unwrap()
    }

    #[test]
    fn suboptimality_examples() {
        let family = grid(0.0);
        let (opt, table) = exact_optimal_policy(&family, 0).unwrap();
        assert_eq!(suboptimality(&family, 0, &opt).unwrap(), 0.0);
        // Staying forever at the corner never reaches the goal.
        let stay = Policy::constant(family.horizon(), 9, 5, crate::mdp::grid_action::STAY);
        assert_eq!(suboptimality(&family, 0, &stay).unwrap(), table.v(0, 0));
        assert!(table.v(0, 0) > 0.0);

        let zero = TaskFamily::tabular(
            1,
            2,
            3,
            1.0,
            0,
            &[vec![1.0], vec![1.0]],
            &[vec![0.0, 0.0]],
            vec!["z".into()],
        )
        .unwrap();
        assert_eq!(suboptimality(&zero, 0, &Policy::constant(3, 1, 2, 1)).unwrap(), 0.0);
    }

    #[test]
    fn expected_uncertainty_examples() {
        let family = grid(0.2);
        let (opt, _) = exact_optimal_policy(&family, 0).unwrap();
        let n = family.features().n_pairs();
        assert_eq!(expected_uncertainty(&family, &[vec![0.0; n]], &opt).unwrap(), 0.0);
        let c = expected_uncertainty(&family, &[vec![0.3; n]], &opt).unwrap();
        assert!((c - 0.3 * family.horizon() as f64).abs() < 1e-12);
        assert!(expected_uncertainty(&family, &[vec![0.0; n - 1]], &opt).is_err());
    }

    #[test]
    fn expected_uncertainty_matches_monte_carlo() {
        let family = grid(0.3);
        let (opt, _) = exact_optimal_policy(&family, 0).unwrap();
        let data = generate_dataset(&family, 0, Flavor::Random, 5, 4).unwrap();
        let pen = data_penalties(&family, &data.transitions, 1.0).unwrap();
        let exact = expected_uncertainty(&family, &[pen.clone()], &opt).unwrap();

        let f = family.features();
        let mut rng = seeds::rng(11);
        let rollouts = 100_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..rollouts {
            let mut s = family.dynamics().initial_state();
            let mut total = 0.0;
            for t in 0..family.horizon() {
                let a = opt.action(t, s);
                total += pen[f.pair(s, a)];
                s = family.dynamics().sample_next(s, a, &mut rng);
            }
            sum += total;
            sum_sq += total * total;
        }
        let mean = sum / rollouts as f64;
        let sd = (sum_sq / rollouts as f64 - mean * mean).sqrt();
        assert!((mean - exact).abs() <= 3.0 * sd / (rollouts as f64).sqrt());
    }

    #[test]
    fn coverage_extremes_and_calibration() {
        let family = grid(0.2);
        let data = generate_dataset(&family, 0, Flavor::Random, 30, 2).unwrap();
        let sol = lsvi_pessimistic(
            &SharedDataset::single(&data),
            &family,
            0,
            &PessimismConfig::default(),
            &LsviOptions::default(),
            0,
        )
        .unwrap();
        assert_eq!(xi_coverage(&family, 0, &sol, f64::INFINITY, 500, 1).unwrap(), 1.0);
        assert!(xi_coverage(&family, 0, &sol, 0.0, 500, 1).unwrap() < 1.0);
        let beta = calibrate_beta(&family, 0, &sol, 0.05).unwrap();
        let cov = xi_coverage(&family, 0, &sol, beta, 5000, 3).unwrap();
        assert!(cov >= 0.93, "{cov}");
        assert!(xi_coverage(&family, 0, &sol, 1.0, 0, 1).is_err());
    }

    #[test]
    fn zero_beta_gives_zero_coverage_when_every_error_is_nonzero() {
        let family = TaskFamily::tabular(
            1,
            1,
            2,
            1.0,
            0,
            &[vec![1.0]],
            &[vec![1.0]],
            vec!["one".into()],
        )
        .unwrap();
        let data = generate_dataset(&family, 0, Flavor::Random, 3, 0).unwrap();
        let sol = lsvi_pessimistic(
            &SharedDataset::single(&data),
            &family,
            0,
            &PessimismConfig::default(),
            &LsviOptions::without_ood(),
            0,
        )
        .unwrap();
        // Ridge shrinkage leaves a nonzero Bellman error at the only pair.
        assert_eq!(xi_coverage(&family, 0, &sol, 0.0, 50, 0).unwrap(), 0.0);
    }
}
