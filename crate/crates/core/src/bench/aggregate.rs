//! Summary statistics over runs.

use std::collections::BTreeMap;

use serde::Serialize;

use super::sweep::ExperimentResult;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub runs: usize,
    pub mean: f64,
    pub median: f64,
    pub iqm: f64,
    /// Fraction of runs whose normalized score falls below `eta`.
    pub optimality_gap_fraction: f64,
    pub eta: f64,
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let v = sorted(values);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Mean after dropping `floor(n / 4)` values from each end.
pub fn iqm(values: &[f64]) -> f64 {
    let v = sorted(values);
    let cut = v.len() / 4;
    mean(&v[cut..v.len() - cut])
}

/// Sample standard deviation (denominator `n - 1`); zero for one value.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// `sqrt(s_a^2 / n_a + s_b^2 / n_b)`.
pub fn pooled_standard_error(a: &[f64], b: &[f64]) -> f64 {
    (sample_std(a).powi(2) / a.len() as f64 + sample_std(b).powi(2) / b.len() as f64).sqrt()
}

/// `return / optimal return`, or 1 when the optimum is zero.
pub fn normalized_score(result: &ExperimentResult) -> f64 {
    let optimal = result.return_mean + result.subopt;
    if optimal.abs() < 1e-12 {
        1.0
    } else {
        result.return_mean / optimal
    }
}

/// Statistics of raw values, with the gap fraction counted against `eta`.
pub fn summarize(values: &[f64], eta: f64) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::invalid("cannot summarize zero runs"));
    }
    Ok(Summary {
        runs: values.len(),
        mean: mean(values),
        median: median(values),
        iqm: iqm(values),
        optimality_gap_fraction: values.iter().filter(|&&x| x < eta).count() as f64
            / values.len() as f64,
        eta,
    })
}

/// Summary of normalized scores; `eta` is a fraction of the optimal return.
pub fn aggregate(results: &[ExperimentResult], eta: f64) -> Result<Summary> {
    let scores: Vec<f64> = results
        .iter()
        .filter(|r| r.error.is_none())
        .map(normalized_score)
        .collect();
    summarize(&scores, eta)
}

/// [`aggregate`] per method name.
pub fn aggregate_by_method(
    results: &[ExperimentResult],
    eta: f64,
) -> Result<BTreeMap<String, Summary>> {
    let mut groups: BTreeMap<String, Vec<ExperimentResult>> = BTreeMap::new();
    for r in results {
        groups.entry(r.method.name().to_string()).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(k, v)| aggregate(&v, eta).map(|s| (k, s)))
        .collect()
}
