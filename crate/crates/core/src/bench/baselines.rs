//! Direct sharing and quantile-based data selection.

use crate::datasets::{Part, SharedDataset, Transition};
use crate::error::{Error, Result};
use crate::mdp::TaskFamily;
use crate::pevi::{lsvi_pessimistic, LsviOptions, LsviSolution};
use crate::uncertainty::PessimismConfig;

/// Plain ridge LSVI: no penalties, no OOD rows.
pub fn baseline_direct(
    dataset: &SharedDataset,
    family: &TaskFamily,
    task: usize,
    lambda: f64,
    seed: u64,
) -> Result<LsviSolution> {
    let cfg = PessimismConfig {
        beta1: 0.0,
        beta2_init: 0.0,
        beta2_end: 0.0,
        lambda,
        ..PessimismConfig::default()
    };
    lsvi_pessimistic(dataset, family, task, &cfg, &LsviOptions::without_ood(), seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionConfig {
    /// Fraction of shared transitions kept, in `(0, 1]`.
    pub quantile_k: f64,
    /// Extra rounds of rescoring with the current selection.
    pub reselect_rounds: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            quantile_k: 0.1,
            reselect_rounds: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.quantile_k > 0.0 && self.quantile_k <= 1.0) {
            return Err(Error::invalid(format!(
                "quantile_k {} outside (0, 1]",
                self.quantile_k
            )));
        }
        Ok(())
    }
}

/// Number of shared transitions kept for `n` candidates.
pub fn selection_size(quantile_k: f64, n: usize) -> usize {
    ((quantile_k * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Main data plus the shared transitions whose pessimistic Q ranks in the top
/// `k` fraction; original order and part provenance are kept.
fn select(dataset: &SharedDataset, sol: &LsviSolution, k: f64) -> SharedDataset {
    let shared = dataset.shared_transitions();
    let keep = selection_size(k, shared.len());
    let mut order: Vec<usize> = (0..shared.len()).collect();
    let score = |tr: &Transition| sol.values.q(tr.t, tr.s, tr.a);
    order.sort_by(|&i, &j| score(&shared[j]).total_cmp(&score(&shared[i])).then(i.cmp(&j)));
    let mut chosen = vec![false; shared.len()];
    for &i in &order[..keep] {
        chosen[i] = true;
    }

    let mut parts = vec![dataset.parts[0].clone()];
    let mut transitions = dataset.main_transitions().to_vec();
    let mut offset = 0;
    for part in &dataset.parts[1..] {
        let mut len = 0;
        for (i, tr) in shared[offset..offset + part.len].iter().enumerate() {
            if chosen[offset + i] {
                transitions.push(tr.clone());
                len += 1;
            }
        }
        offset += part.len;
        parts.push(Part { len, ..part.clone() });
    }
    SharedDataset {
        main_task: dataset.main_task,
        parts,
        transitions,
    }
}

/// Output of [`baseline_select`].
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub solution: LsviSolution,
    pub selected: SharedDataset,
}

/// Scores shared transitions with a pessimistic Q fit on main data only,
/// keeps the top `k` fraction, then runs plain ridge LSVI on the union.
pub fn baseline_select(
    dataset: &SharedDataset,
    family: &TaskFamily,
    task: usize,
    cfg: &PessimismConfig,
    opts: &LsviOptions,
    selection: &SelectionConfig,
    seed: u64,
) -> Result<Selection> {
    selection.validate()?;
    if dataset.parts.is_empty() {
        return Err(Error::invalid("shared dataset has no main part"));
    }
    let main_only = SharedDataset {
        main_task: dataset.main_task,
        parts: vec![dataset.parts[0].clone()],
        transitions: dataset.main_transitions().to_vec(),
    };
    let mut scorer = lsvi_pessimistic(&main_only, family, task, cfg, opts, seed)?;
    let mut selected = select(dataset, &scorer, selection.quantile_k);
    for _ in 0..selection.reselect_rounds {
        scorer = lsvi_pessimistic(&selected, family, task, cfg, opts, seed)?;
        selected = select(dataset, &scorer, selection.quantile_k);
    }
    let solution = baseline_direct(&selected, family, task, cfg.lambda, seed)?;
    Ok(Selection { solution, selected })
}
