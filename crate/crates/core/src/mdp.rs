//! Finite-horizon linear MDPs, task families and exact oracles.
//!
//! A linear MDP exposes a feature map `phi(s, a)` in `R^d` such that
//! `P(s'|s,a) = psi(s') . phi(s,a)` and `r(s,a) = theta . phi(s,a)`. Tabular
//! MDPs are the one-hot special case with `d = n_states * n_actions`.
//!
//! A [`TaskFamily`] shares one set of dynamics across `m` tasks that differ
//! only in their reward weights.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::fmt::{exact, header_field, join_exact, parse, parse_header};
use crate::seeds;

/// Largest feature dimension the builders will allocate unless told otherwise.
pub const DEFAULT_DIM_CAP: usize = 4096;

const TRANSITION_NEG_TOL: f64 = 1e-12;
const TRANSITION_SUM_TOL: f64 = 1e-9;
const REWARD_TOL: f64 = 1e-12;
const NORM_TOL: f64 = 1e-12;

/// Deterministic state-action feature map over finite spaces.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    dim: usize,
    n_states: usize,
    n_actions: usize,
    vectors: Vec<DVector<f64>>,
}

impl FeatureMap {
    /// One-hot features over `(s, a)` pairs.
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let dim = n_states * n_actions;
        let vectors = (0..dim)
            .map(|k| {
                let mut v = DVector::zeros(dim);
                v[k] = 1.0;
                v
            })
            .collect();
        FeatureMap {
            dim,
            n_states,
            n_actions,
            vectors,
        }
    }

    /// Builds a feature map from explicit vectors indexed by `s * n_actions + a`.
    pub fn from_vectors(
        n_states: usize,
        n_actions: usize,
        vectors: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("feature map needs at least one state and action"));
        }
        if vectors.len() != n_states * n_actions {
            return Err(Error::invalid(format!(
                "expected {} feature vectors, got {}",
                n_states * n_actions,
                vectors.len()
            )));
        }
        let dim = vectors[0].len();
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        for (k, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::invalid(format!("feature {k} has dimension {}", v.len())));
            }
            if v.norm() > 1.0 + NORM_TOL {
                return Err(Error::invalid(format!(
                    "feature {k} has norm {} > 1",
                    v.norm()
                )));
            }
        }
        Ok(FeatureMap {
            dim,
            n_states,
            n_actions,
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    #[inline]
    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    #[inline]
    pub fn phi(&self, s: usize, a: usize) -> &DVector<f64> {
        &self.vectors[self.pair(s, a)]
    }

    #[inline]
    pub fn phi_pair(&self, pair: usize) -> &DVector<f64> {
        &self.vectors[pair]
    }
}

/// Shared dynamics of a task family: everything in a linear MDP except the
/// reward weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Dynamics {
    horizon: usize,
    discount: f64,
    initial_state: usize,
    features: FeatureMap,
    /// `n_states x d`; row `s'` is `psi(s')`.
    next_state_weights: DMatrix<f64>,
    /// Flattened `P(s'|s,a)`, one row of length `n_states` per pair.
    transitions: Vec<f64>,
}

impl Dynamics {
    pub fn new(
        features: FeatureMap,
        next_state_weights: DMatrix<f64>,
        horizon: usize,
        discount: f64,
        initial_state: usize,
    ) -> Result<Self> {
        let n_states = features.n_states();
        if horizon == 0 {
            return Err(Error::invalid("horizon must be positive"));
        }
        if !(0.0..=1.0).contains(&discount) {
            return Err(Error::invalid(format!("discount {discount} outside [0, 1]")));
        }
        if initial_state >= n_states {
            return Err(Error::invalid(format!(
                "initial state {initial_state} out of range"
            )));
        }
        if next_state_weights.nrows() != n_states || next_state_weights.ncols() != features.dim() {
            return Err(Error::invalid(format!(
                "psi has shape {}x{}, expected {}x{}",
                next_state_weights.nrows(),
                next_state_weights.ncols(),
                n_states,
                features.dim()
            )));
        }
        let mut transitions = Vec::with_capacity(features.n_pairs() * n_states);
        for pair in 0..features.n_pairs() {
            let row = &next_state_weights * features.phi_pair(pair);
            let mut sum = 0.0;
            for (sp, &p) in row.iter().enumerate() {
                if p < -TRANSITION_NEG_TOL {
                    return Err(Error::invalid(format!(
                        "P(s'={sp}|pair {pair}) = {p} is negative"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > TRANSITION_SUM_TOL {
                return Err(Error::invalid(format!(
                    "transition row for pair {pair} sums to {sum}"
                )));
            }
            transitions.extend(row.iter().map(|&p| p.max(0.0)));
        }
        Ok(Dynamics {
            horizon,
            discount,
            initial_state,
            features,
            next_state_weights,
            transitions,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn next_state_weights(&self) -> &DMatrix<f64> {
        &self.next_state_weights
    }

    pub fn n_states(&self) -> usize {
        self.features.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.features.n_actions()
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    /// `P(.|s,a)` as a slice over next states.
    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        let n = self.n_states();
        let pair = self.features.pair(s, a);
        &self.transitions[pair * n..(pair + 1) * n]
    }

    /// `sum_{s'} P(s'|s,a) * values[s']`.
    pub fn expected(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        self.transition(s, a)
            .iter()
            .zip(values)
            .map(|(p, v)| p * v)
            .sum()
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let row = self.transition(s, a);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (sp, &p) in row.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = sp;
            if u < acc {
                return sp;
            }
        }
        last
    }
}

/// A single-task linear MDP.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMdp {
    pub dynamics: Dynamics,
    pub reward_weights: DVector<f64>,
}

impl LinearMdp {
    pub fn new(dynamics: Dynamics, reward_weights: DVector<f64>) -> Result<Self> {
        check_reward_weights(&dynamics, &reward_weights, 0)?;
        Ok(LinearMdp {
            dynamics,
            reward_weights,
        })
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward_weights.dot(self.dynamics.features.phi(s, a))
    }
}

fn check_reward_weights(dynamics: &Dynamics, theta: &DVector<f64>, task: usize) -> Result<()> {
    if theta.len() != dynamics.dim() {
        return Err(Error::invalid(format!(
            "task {task}: reward weights have dimension {}, expected {}",
            theta.len(),
            dynamics.dim()
        )));
    }
    for pair in 0..dynamics.features.n_pairs() {
        let r = theta.dot(dynamics.features.phi_pair(pair));
        if !(-REWARD_TOL..=1.0 + REWARD_TOL).contains(&r) {
            return Err(Error::invalid(format!(
                "task {task}: reward {r} at pair {pair} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Tasks sharing states, actions and dynamics, differing in reward weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskFamily {
    dynamics: Dynamics,
    task_rewards: Vec<DVector<f64>>,
    task_names: Vec<String>,
    /// Cached `r_i(s,a)`, one row of `n_pairs` per task.
    rewards: Vec<Vec<f64>>,
}

impl TaskFamily {
    pub fn new(
        dynamics: Dynamics,
        task_rewards: Vec<DVector<f64>>,
        task_names: Vec<String>,
    ) -> Result<Self> {
        if task_rewards.is_empty() {
            return Err(Error::invalid("a task family needs at least one task"));
        }
        if task_names.len() != task_rewards.len() {
            return Err(Error::invalid("one name per task is required"));
        }
        for name in &task_names {
            if name.is_empty() || name.contains(|c: char| c.is_whitespace() || c == ',') {
                return Err(Error::invalid(format!("invalid task name {name:?}")));
            }
        }
        let mut rewards = Vec::with_capacity(task_rewards.len());
        for (i, theta) in task_rewards.iter().enumerate() {
            check_reward_weights(&dynamics, theta, i)?;
            let f = &dynamics.features;
            rewards.push(
                (0..f.n_pairs())
                    .map(|p| theta.dot(f.phi_pair(p)).clamp(0.0, 1.0))
                    .collect(),
            );
        }
        Ok(TaskFamily {
            dynamics,
            task_rewards,
            task_names,
            rewards,
        })
    }

    /// Builds a tabular family with one-hot features.
    ///
    /// `transitions[pair]` is `P(.|s,a)` and `rewards[task][pair]` is `r_i(s,a)`
    /// with `pair = s * n_actions + a`.
    pub fn tabular(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        discount: f64,
        initial_state: usize,
        transitions: &[Vec<f64>],
        rewards: &[Vec<f64>],
        names: Vec<String>,
    ) -> Result<Self> {
        let features = FeatureMap::one_hot(n_states, n_actions);
        let d = features.dim();
        if transitions.len() != d {
            return Err(Error::invalid(format!(
                "expected {d} transition rows, got {}",
                transitions.len()
            )));
        }
        let mut psi = DMatrix::zeros(n_states, d);
        for (pair, row) in transitions.iter().enumerate() {
            if row.len() != n_states {
                return Err(Error::invalid(format!("transition row {pair} has wrong length")));
            }
            for (sp, &p) in row.iter().enumerate() {
                psi[(sp, pair)] = p;
            }
        }
        let dynamics = Dynamics::new(features, psi, horizon, discount, initial_state)?;
        let thetas = rewards
            .iter()
            .map(|r| {
                if r.len() != d {
                    Err(Error::invalid("reward row has wrong length"))
                } else {
                    Ok(DVector::from_column_slice(r))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        TaskFamily::new(dynamics, thetas, names)
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn features(&self) -> &FeatureMap {
        &self.dynamics.features
    }

    pub fn n_tasks(&self) -> usize {
        self.task_rewards.len()
    }

    pub fn n_states(&self) -> usize {
        self.dynamics.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.dynamics.n_actions()
    }

    pub fn horizon(&self) -> usize {
        self.dynamics.horizon
    }

    pub fn discount(&self) -> f64 {
        self.dynamics.discount
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn reward_weights(&self, task: usize) -> &DVector<f64> {
        &self.task_rewards[task]
    }

    #[inline]
    pub fn reward(&self, task: usize, s: usize, a: usize) -> f64 {
        self.rewards[task][self.dynamics.features.pair(s, a)]
    }

    /// Unclamped `theta_i . phi(s,a)`, the value relabeling writes.
    pub fn linear_reward(&self, task: usize, s: usize, a: usize) -> f64 {
        self.task_rewards[task].dot(self.dynamics.features.phi(s, a))
    }

    pub fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.n_tasks() {
            return Err(Error::invalid(format!(
                "task index {task} out of range (family has {} tasks)",
                self.n_tasks()
            )));
        }
        Ok(())
    }

    pub fn task_mdp(&self, task: usize) -> Result<LinearMdp> {
        self.check_task(task)?;
        LinearMdp::new(self.dynamics.clone(), self.task_rewards[task].clone())
    }

    /// Serializes the family as a header line followed by `phi`, `psi` and
    /// `theta` records with exact decimal floats.
    pub fn to_record(&self) -> String {
        self.to_record_with(&BTreeMap::new())
    }

    /// [`TaskFamily::to_record`] with extra `key=value` header fields, which
    /// are ignored on read.
    pub fn to_record_with(&self, extra: &BTreeMap<String, String>) -> String {
        let d = &self.dynamics;
        let f = &d.features;
        let mut out = format!(
            "pessim-share-family v=1 n_states={} n_actions={} dim={} horizon={} discount={} initial_state={} tasks={}",
            f.n_states,
            f.n_actions,
            f.dim,
            d.horizon,
            exact(d.discount),
            d.initial_state,
            self.n_tasks()
        );
        for (k, v) in extra {
            out.push_str(&format!(" {k}={v}"));
        }
        out.push('\n');
        for pair in 0..f.n_pairs() {
            out.push_str(&format!(
                "phi,{pair},{}\n",
                join_exact(f.phi_pair(pair).iter().copied())
            ));
        }
        for sp in 0..f.n_states {
            out.push_str(&format!(
                "psi,{sp},{}\n",
                join_exact(d.next_state_weights.row(sp).iter().copied())
            ));
        }
        for (i, theta) in self.task_rewards.iter().enumerate() {
            out.push_str(&format!(
                "theta,{i},{},{}\n",
                self.task_names[i],
                join_exact(theta.iter().copied())
            ));
        }
        out
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = parse_header(
            lines.next().ok_or_else(|| Error::format(1, "empty family file"))?,
            "pessim-share-family",
            "1",
        )?;
        let n_states: usize = header_field(&header, "n_states")?;
        let n_actions: usize = header_field(&header, "n_actions")?;
        let dim: usize = header_field(&header, "dim")?;
        let horizon: usize = header_field(&header, "horizon")?;
        let discount: f64 = header_field(&header, "discount")?;
        let initial_state: usize = header_field(&header, "initial_state")?;
        let tasks: usize = header_field(&header, "tasks")?;

        let mut phis = vec![None; n_states * n_actions];
        let mut psi = DMatrix::zeros(n_states, dim);
        let mut psi_seen = vec![false; n_states];
        let mut thetas = vec![None; tasks];
        let mut names = vec![String::new(); tasks];

        let parse_vec = |fields: &[&str], line: usize| -> Result<DVector<f64>> {
            if fields.len() != dim {
                return Err(Error::format(
                    line,
                    format!("expected {dim} values, found {}", fields.len()),
                ));
            }
            let vals = fields
                .iter()
                .map(|f| parse::<f64>(f, line, "value"))
                .collect::<Result<Vec<_>>>()?;
            Ok(DVector::from_vec(vals))
        };

        for (idx, raw) in lines.enumerate() {
            let line = idx + 2;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split(',').collect();
            match fields[0] {
                "phi" if fields.len() >= 2 => {
                    let pair: usize = parse(fields[1], line, "pair index")?;
                    if pair >= phis.len() {
                        return Err(Error::format(line, "pair index out of range"));
                    }
                    phis[pair] = Some(parse_vec(&fields[2..], line)?);
                }
                "psi" if fields.len() >= 2 => {
                    let sp: usize = parse(fields[1], line, "state index")?;
                    if sp >= n_states {
                        return Err(Error::format(line, "state index out of range"));
                    }
                    let v = parse_vec(&fields[2..], line)?;
                    psi.set_row(sp, &v.transpose());
                    psi_seen[sp] = true;
                }
                "theta" if fields.len() >= 3 => {
                    let i: usize = parse(fields[1], line, "task index")?;
                    if i >= tasks {
                        return Err(Error::format(line, "task index out of range"));
                    }
                    names[i] = fields[2].to_string();
                    thetas[i] = Some(parse_vec(&fields[3..], line)?);
                }
                other => {
                    return Err(Error::format(line, format!("unknown record kind {other:?}")))
                }
            }
        }
        let total = text.lines().count();
        let phis = phis
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::format(total, "truncated stream: missing phi records"))?;
        if psi_seen.iter().any(|s| !s) {
            return Err(Error::format(total, "truncated stream: missing psi records"));
        }
        let thetas = thetas
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::format(total, "truncated stream: missing theta records"))?;
        let features = FeatureMap::from_vectors(n_states, n_actions, phis)?;
        let dynamics = Dynamics::new(features, psi, horizon, discount, initial_state)?;
        TaskFamily::new(dynamics, thetas, names)
    }
}

/// Gridworld actions. Indices are stable and used as feature offsets.
pub mod grid_action {
    pub const UP: usize = 0;
    pub const RIGHT: usize = 1;
    pub const DOWN: usize = 2;
    pub const LEFT: usize = 3;
    pub const STAY: usize = 4;
    pub const COUNT: usize = 5;
}

/// Parameters of the tabular gridworld family.
#[derive(Clone, Debug, PartialEq)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    /// One goal cell `(x, y)` per task.
    pub goals: Vec<(usize, usize)>,
    pub slip: f64,
    pub start: (usize, usize),
    pub horizon: usize,
    pub discount: f64,
    pub dim_cap: usize,
}

impl GridworldSpec {
    /// Start at the center cell, horizon `width + height`, undiscounted.
    pub fn new(width: usize, height: usize, goals: Vec<(usize, usize)>, slip: f64) -> Self {
        GridworldSpec {
            width,
            height,
            goals,
            slip,
            start: (width.saturating_sub(1) / 2, height.saturating_sub(1) / 2),
            horizon: width + height,
            discount: 1.0,
            dim_cap: DEFAULT_DIM_CAP,
        }
    }

    pub fn with_start(mut self, x: usize, y: usize) -> Self {
        self.start = (x, y);
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_discount(mut self, discount: f64) -> Self {
        self.discount = discount;
        self
    }

    pub fn with_dim_cap(mut self, cap: usize) -> Self {
        self.dim_cap = cap;
        self
    }

    pub fn cell(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// Builds the gridworld task family: one task per goal, reward 1 at the goal
/// cell under any action, four moves plus stay, perpendicular slips.
pub fn build_tabular_gridworld(spec: &GridworldSpec) -> Result<TaskFamily> {
    use grid_action::*;

    let (w, h) = (spec.width, spec.height);
    if w * h < 2 {
        return Err(Error::invalid("gridworld needs at least two cells"));
    }
    if !(0.0..1.0).contains(&spec.slip) {
        return Err(Error::invalid(format!("slip {} outside [0, 1)", spec.slip)));
    }
    if spec.goals.is_empty() {
        return Err(Error::invalid("at least one goal is required"));
    }
    for &(x, y) in spec.goals.iter().chain(std::iter::once(&spec.start)) {
        if x >= w || y >= h {
            return Err(Error::invalid(format!("cell ({x},{y}) outside {w}x{h} grid")));
        }
    }
    let n_states = w * h;
    let dim = n_states * COUNT;
    if dim > spec.dim_cap {
        return Err(Error::Capacity {
            what: "gridworld feature dimension",
            required: dim,
            cap: spec.dim_cap,
        });
    }

    let step = |x: usize, y: usize, dir: usize| -> usize {
        let (nx, ny) = match dir {
            UP if y > 0 => (x, y - 1),
            RIGHT if x + 1 < w => (x + 1, y),
            DOWN if y + 1 < h => (x, y + 1),
            LEFT if x > 0 => (x - 1, y),
            _ => (x, y),
        };
        ny * w + nx
    };

    let mut transitions = Vec::with_capacity(dim);
    for s in 0..n_states {
        let (x, y) = (s % w, s / w);
        for a in 0..COUNT {
            let mut row = vec![0.0; n_states];
            if a == STAY {
                row[s] = 1.0;
            } else {
                let (p1, p2) = match a {
                    UP | DOWN => (LEFT, RIGHT),
                    _ => (UP, DOWN),
                };
                row[step(x, y, a)] += 1.0 - spec.slip;
                row[step(x, y, p1)] += spec.slip / 2.0;
                row[step(x, y, p2)] += spec.slip / 2.0;
            }
            transitions.push(row);
        }
    }

    let mut rewards = Vec::with_capacity(spec.goals.len());
    let mut names = Vec::with_capacity(spec.goals.len());
    for &(gx, gy) in &spec.goals {
        let goal = spec.cell(gx, gy);
        let mut r = vec![0.0; dim];
        for a in 0..COUNT {
            r[goal * COUNT + a] = 1.0;
        }
        rewards.push(r);
        names.push(format!("reach-{gx}-{gy}"));
    }
    TaskFamily::tabular(
        n_states,
        COUNT,
        spec.horizon,
        spec.discount,
        spec.cell(spec.start.0, spec.start.1),
        &transitions,
        &rewards,
        names,
    )
}

/// Parameters of a random linear MDP family.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomLinearSpec {
    pub dim: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub n_tasks: usize,
    pub discount: f64,
    pub seed: u64,
}

impl RandomLinearSpec {
    pub fn new(
        dim: usize,
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        n_tasks: usize,
        seed: u64,
    ) -> Self {
        RandomLinearSpec {
            dim,
            n_states,
            n_actions,
            horizon,
            n_tasks,
            discount: 1.0,
            seed,
        }
    }
}

const MAX_DRAWS: usize = 100;

/// Draws a nonnegative vector normalized to sum one.
fn draw_simplex<R: Rng>(len: usize, rng: &mut R, what: &str) -> Result<Vec<f64>> {
    for _ in 0..MAX_DRAWS {
        let v: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let total: f64 = v.iter().sum();
        if total > 1e-12 {
            return Ok(v.into_iter().map(|x| x / total).collect());
        }
    }
    Err(Error::Construction(format!(
        "{what}: {MAX_DRAWS} consecutive all-zero draws"
    )))
}

/// Random linear MDP family.
///
/// Features live on the probability simplex (so `||phi||_2 <= 1`) and every
/// column of `psi` is a distribution over next states, which makes each
/// `psi . phi(s,a)` a mixture of distributions. Reward weights are drawn in
/// `[0, 1]^d`, so `theta . phi` stays in `[0, 1]`.
pub fn build_random_linear_mdp(spec: &RandomLinearSpec) -> Result<TaskFamily> {
    if spec.dim == 0 || spec.n_tasks == 0 || spec.n_states == 0 || spec.n_actions == 0 {
        return Err(Error::invalid(
            "dim, n_states, n_actions and n_tasks must be positive",
        ));
    }
    let mut rng = seeds::rng(spec.seed);
    let n_pairs = spec.n_states * spec.n_actions;
    let mut phis = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        phis.push(DVector::from_vec(draw_simplex(spec.dim, &mut rng, "feature")?));
    }
    let mut psi = DMatrix::zeros(spec.n_states, spec.dim);
    for k in 0..spec.dim {
        let col = draw_simplex(spec.n_states, &mut rng, "next-state weights")?;
        for (sp, p) in col.into_iter().enumerate() {
            psi[(sp, k)] = p;
        }
    }
    let thetas = (0..spec.n_tasks)
        .map(|_| DVector::from_fn(spec.dim, |_, _| rng.random::<f64>()))
        .collect();
    let features = FeatureMap::from_vectors(spec.n_states, spec.n_actions, phis)?;
    let dynamics = Dynamics::new(features, psi, spec.horizon, spec.discount, 0)?;
    let names = (0..spec.n_tasks).map(|i| format!("task-{i}")).collect();
    TaskFamily::new(dynamics, thetas, names)
}

/// Deterministic non-stationary policy: one action per `(t, s)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Policy {
    horizon: usize,
    n_states: usize,
    n_actions: usize,
    actions: Vec<usize>,
}

impl Policy {
    pub fn constant(horizon: usize, n_states: usize, n_actions: usize, action: usize) -> Self {
        assert!(action < n_actions);
        Policy {
            horizon,
            n_states,
            n_actions,
            actions: vec![action; horizon * n_states],
        }
    }

    pub fn from_actions(
        horizon: usize,
        n_states: usize,
        n_actions: usize,
        actions: Vec<usize>,
    ) -> Result<Self> {
        if actions.len() != horizon * n_states {
            return Err(Error::invalid(format!(
                "policy has {} entries, expected {}",
                actions.len(),
                horizon * n_states
            )));
        }
        if let Some(bad) = actions.iter().find(|&&a| a >= n_actions) {
            return Err(Error::invalid(format!("action {bad} out of range")));
        }
        Ok(Policy {
            horizon,
            n_states,
            n_actions,
            actions,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn action(&self, t: usize, s: usize) -> usize {
        self.actions[t * self.n_states + s]
    }

    pub fn set(&mut self, t: usize, s: usize, a: usize) {
        assert!(a < self.n_actions);
        self.actions[t * self.n_states + s] = a;
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    fn check_shape(&self, family: &TaskFamily) -> Result<()> {
        if self.horizon != family.horizon()
            || self.n_states != family.n_states()
            || self.n_actions != family.n_actions()
        {
            return Err(Error::invalid(format!(
                "policy shape (T={}, S={}, A={}) does not match family (T={}, S={}, A={})",
                self.horizon,
                self.n_states,
                self.n_actions,
                family.horizon(),
                family.n_states(),
                family.n_actions()
            )));
        }
        Ok(())
    }
}

/// `V` over `(T + 1) x S` and `Q` over `T x S x A`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    horizon: usize,
    n_states: usize,
    n_actions: usize,
    v: Vec<f64>,
    q: Vec<f64>,
}

impl ValueTable {
    pub fn zeros(horizon: usize, n_states: usize, n_actions: usize) -> Self {
        ValueTable {
            horizon,
            n_states,
            n_actions,
            v: vec![0.0; (horizon + 1) * n_states],
            q: vec![0.0; horizon * n_states * n_actions],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn v(&self, t: usize, s: usize) -> f64 {
        self.v[t * self.n_states + s]
    }

    #[inline]
    pub fn q(&self, t: usize, s: usize, a: usize) -> f64 {
        self.q[(t * self.n_states + s) * self.n_actions + a]
    }

    pub fn set_v(&mut self, t: usize, s: usize, value: f64) {
        self.v[t * self.n_states + s] = value;
    }

    pub fn set_q(&mut self, t: usize, s: usize, a: usize, value: f64) {
        self.q[(t * self.n_states + s) * self.n_actions + a] = value;
    }

    /// `V_t` as a slice over states.
    pub fn v_row(&self, t: usize) -> &[f64] {
        &self.v[t * self.n_states..(t + 1) * self.n_states]
    }

    /// `Q_t` as a flat slice over pairs.
    pub fn q_row(&self, t: usize) -> &[f64] {
        let n = self.n_states * self.n_actions;
        &self.q[t * n..(t + 1) * n]
    }

    pub fn v_all(&self) -> &[f64] {
        &self.v
    }

    pub fn q_all(&self) -> &[f64] {
        &self.q
    }
}

/// Index of the largest entry, ties to the lowest index.
pub(crate) fn argmax(values: impl IntoIterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Finite-horizon backward induction with exact dynamics.
pub fn exact_optimal_policy(family: &TaskFamily, task: usize) -> Result<(Policy, ValueTable)> {
    family.check_task(task)?;
    let (horizon, ns, na) = (family.horizon(), family.n_states(), family.n_actions());
    let gamma = family.discount();
    let dynamics = family.dynamics();
    let mut table = ValueTable::zeros(horizon, ns, na);
    let mut policy = Policy::constant(horizon, ns, na, 0);
    for t in (0..horizon).rev() {
        let v_next = table.v_row(t + 1).to_vec();
        for s in 0..ns {
            let qs: Vec<f64> = (0..na)
                .map(|a| family.reward(task, s, a) + gamma * dynamics.expected(s, a, &v_next))
                .collect();
            for (a, &q) in qs.iter().enumerate() {
                table.set_q(t, s, a, q);
            }
            let (best, value) = argmax(qs);
            table.set_v(t, s, value);
            policy.set(t, s, best);
        }
    }
    Ok((policy, table))
}

/// Exact evaluation of a fixed policy.
pub fn policy_value(family: &TaskFamily, task: usize, policy: &Policy) -> Result<ValueTable> {
    family.check_task(task)?;
    policy.check_shape(family)?;
    let (horizon, ns, na) = (family.horizon(), family.n_states(), family.n_actions());
    let gamma = family.discount();
    let dynamics = family.dynamics();
    let mut table = ValueTable::zeros(horizon, ns, na);
    for t in (0..horizon).rev() {
        let v_next = table.v_row(t + 1).to_vec();
        for s in 0..ns {
            for a in 0..na {
                let q = family.reward(task, s, a) + gamma * dynamics.expected(s, a, &v_next);
                table.set_q(t, s, a, q);
            }
            let value = table.q(t, s, policy.action(t, s));
            table.set_v(t, s, value);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Two states, two actions: 0 stays, 1 switches. Reward 1 in state 1
    /// under "stay" only.
    fn two_state_chain(gamma: f64, horizon: usize, start: usize) -> TaskFamily {
        let transitions = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ];
        let rewards = vec![vec![0.0, 0.0, 1.0, 0.0]];
        TaskFamily::tabular(2, 2, horizon, gamma, start, &transitions, &rewards, vec!["goal".into()])
            .unwrap()
    }

    /// Enumerates every action sequence of a deterministic family from s0.
    fn brute_force_best(family: &TaskFamily, task: usize) -> f64 {
        let na = family.n_actions();
        let horizon = family.horizon();
        let total = na.pow(horizon as u32);
        let mut best = f64::NEG_INFINITY;
        for code in 0..total {
            let mut c = code;
            let mut s = family.dynamics().initial_state();
            let mut ret = 0.0;
            let mut disc = 1.0;
            for _ in 0..horizon {
                let a = c % na;
                c /= na;
                ret += disc * family.reward(task, s, a);
                disc *= family.discount();
                let row = family.dynamics().transition(s, a);
                s = row.iter().position(|&p| p > 0.5).unwrap();
            }
            best = best.max(ret);
        }
        best
    }

    #[test]
    fn gridworld_two_cells_is_deterministic_one_hot() {
        let family = build_tabular_gridworld(&GridworldSpec::new(2, 1, vec![(1, 0)], 0.0)).unwrap();
        assert_eq!(family.n_states(), 2);
        assert_eq!(family.n_actions(), 5);
        assert_eq!(family.features().dim(), 10);
        for s in 0..2 {
            for a in 0..5 {
                let row = family.dynamics().transition(s, a);
                assert_eq!(row.iter().filter(|&&p| p == 1.0).count(), 1);
                assert_eq!(row.iter().filter(|&&p| p == 0.0).count(), 1);
            }
        }
    }

    #[test]
    fn gridworld_slip_splits_perpendicular() {
        let spec = GridworldSpec::new(3, 3, vec![(0, 0), (2, 2)], 0.1);
        let family = build_tabular_gridworld(&spec).unwrap();
        assert_eq!(family.n_tasks(), 2);
        let center = spec.cell(1, 1);
        let row = family.dynamics().transition(center, grid_action::RIGHT);
        assert!((row[spec.cell(2, 1)] - 0.9).abs() < 1e-15);
        assert!((row[spec.cell(1, 0)] - 0.05).abs() < 1e-15);
        assert!((row[spec.cell(1, 2)] - 0.05).abs() < 1e-15);
        assert_eq!(family.dynamics().transition(center, grid_action::STAY)[center], 1.0);
    }

    #[test]
    fn gridworld_rows_sum_to_one() {
        let family =
            build_tabular_gridworld(&GridworldSpec::new(2, 2, vec![(0, 0)], 0.2)).unwrap();
        for s in 0..4 {
            for a in 0..5 {
                let sum: f64 = family.dynamics().transition(s, a).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gridworld_errors() {
        let err = build_tabular_gridworld(&GridworldSpec::new(2, 2, vec![(2, 0)], 0.0));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let err = build_tabular_gridworld(
            &GridworldSpec::new(4, 4, vec![(0, 0)], 0.0).with_dim_cap(50),
        );
        assert!(matches!(err, Err(Error::Capacity { required: 80, .. })));
        let err = build_tabular_gridworld(&GridworldSpec::new(1, 1, vec![(0, 0)], 0.0));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn random_linear_family_is_valid_and_deterministic() {
        let spec = RandomLinearSpec::new(4, 3, 2, 5, 2, 7);
        let a = build_random_linear_mdp(&spec).unwrap();
        let b = build_random_linear_mdp(&spec).unwrap();
        assert_eq!(a, b);
        for s in 0..3 {
            for act in 0..2 {
                let row = a.dynamics().transition(s, act);
                assert!(row.iter().all(|&p| p >= -1e-12));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(a.features().phi(s, act).norm() <= 1.0 + 1e-12);
                for task in 0..2 {
                    let r = a.reward(task, s, act);
                    assert!((0.0..=1.0).contains(&r));
                }
            }
        }
    }

    #[test]
    fn single_state_random_family() {
        let family = build_random_linear_mdp(&RandomLinearSpec::new(1, 1, 1, 1, 1, 0)).unwrap();
        assert_eq!(family.dynamics().transition(0, 0), &[1.0]);
    }

    #[test]
    fn stay_at_goal_collects_one_per_step() {
        let family = two_state_chain(1.0, 3, 1);
        let (_, table) = exact_optimal_policy(&family, 0).unwrap();
        assert_eq!(table.v(0, 1), 3.0);
    }

    #[test]
    fn zero_reward_gives_zero_values_and_action_zero() {
        let transitions = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let family = TaskFamily::tabular(
            2,
            2,
            4,
            1.0,
            0,
            &transitions,
            &[vec![0.0; 4]],
            vec!["zero".into()],
        )
        .unwrap();
        let (policy, table) = exact_optimal_policy(&family, 0).unwrap();
        assert!(table.v_all().iter().all(|&v| v == 0.0));
        assert!(policy.actions().iter().all(|&a| a == 0));
        let value = policy_value(&family, 0, &Policy::constant(4, 2, 2, 1)).unwrap();
        assert!(value.v_all().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gridworld_corner_to_corner_matches_enumeration() {
        let spec = GridworldSpec::new(3, 3, vec![(2, 2)], 0.0)
            .with_start(0, 0)
            .with_horizon(6);
        let family = build_tabular_gridworld(&spec).unwrap();
        let (_, table) = exact_optimal_policy(&family, 0).unwrap();
        let brute = brute_force_best(&family, 0);
        assert_eq!(brute, 2.0);
        assert!((table.v(0, family.dynamics().initial_state()) - brute).abs() < 1e-12);
    }

    #[test]
    fn greedy_policy_reproduces_its_own_table() {
        let family = build_tabular_gridworld(
            &GridworldSpec::new(3, 3, vec![(0, 0), (2, 2)], 0.2).with_discount(0.9),
        )
        .unwrap();
        for task in 0..2 {
            let (policy, table) = exact_optimal_policy(&family, task).unwrap();
            let eval = policy_value(&family, task, &policy).unwrap();
            for (a, b) in eval.v_all().iter().zip(table.v_all()) {
                assert!((a - b).abs() < 1e-12);
            }
            for t in 0..family.horizon() {
                for s in 0..family.n_states() {
                    let best = (0..5).map(|a| table.q(t, s, a)).fold(f64::MIN, f64::max);
                    assert!((table.v(t, s) - best).abs() < 1e-9);
                }
            }
            assert!(table.v_row(family.horizon()).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn leaving_goal_matches_trajectory_sum() {
        // From the goal, "always switch" alternates 1 -> 0 -> 1 ... and never
        // stays, so it earns nothing; "switch then stay" earns T - 2 from t=2.
        let family = two_state_chain(1.0, 5, 1);
        let leave = Policy::constant(5, 2, 2, 1);
        let value = policy_value(&family, 0, &leave).unwrap();
        assert_eq!(value.v(0, 1), 0.0);

        let mut actions = vec![0; 10];
        // t=0 at state 1: switch; t=1 at state 0: switch back; then stay.
        actions[1] = 1;
        actions[2] = 1;
        let policy = Policy::from_actions(5, 2, 2, actions).unwrap();
        let value = policy_value(&family, 0, &policy).unwrap();
        // Trajectory: s=1 (switch, r=0), s=0 (switch, r=0), s=1 stay x3.
        assert_eq!(value.v(0, 1), 3.0);
    }

    #[test]
    fn policy_shape_mismatch_is_rejected() {
        let family = two_state_chain(1.0, 3, 0);
        let err = policy_value(&family, 0, &Policy::constant(4, 2, 2, 0));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        assert!(exact_optimal_policy(&family, 1).is_err());
    }

    #[test]
    fn family_record_round_trips() {
        let family = build_random_linear_mdp(&RandomLinearSpec::new(3, 4, 2, 3, 2, 11)).unwrap();
        let text = family.to_record();
        let back = TaskFamily::from_record(&text).unwrap();
        assert_eq!(family, back);

        let grid =
            build_tabular_gridworld(&GridworldSpec::new(2, 2, vec![(0, 0), (1, 1)], 0.1)).unwrap();
        assert_eq!(TaskFamily::from_record(&grid.to_record()).unwrap(), grid);
    }

    #[test]
    fn family_record_rejects_truncation() {
        let family = build_random_linear_mdp(&RandomLinearSpec::new(2, 2, 2, 3, 1, 1)).unwrap();
        let text = family.to_record();
        let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            TaskFamily::from_record(&truncated),
            Err(Error::Format { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn random_families_have_valid_transitions(
            dim in 1usize..6, ns in 1usize..5, na in 1usize..4, seed in any::<u64>()
        ) {
            let family = build_random_linear_mdp(&RandomLinearSpec::new(dim, ns, na, 2, 1, seed)).unwrap();
            for s in 0..ns {
                for a in 0..na {
                    let row = family.dynamics().transition(s, a);
                    prop_assert!(row.iter().all(|&p| p >= -1e-12));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn optimal_value_dominates_random_policies(seed in any::<u64>()) {
            let family = build_random_linear_mdp(&RandomLinearSpec::new(3, 4, 3, 4, 1, seed)).unwrap();
            let (_, opt) = exact_optimal_policy(&family, 0).unwrap();
            let s0 = family.dynamics().initial_state();
            let mut rng = seeds::rng(seed ^ 0x5eed);
            for _ in 0..100 {
                let actions = (0..4 * 4).map(|_| rng.random_range(0..3)).collect();
                let policy = Policy::from_actions(4, 4, 3, actions).unwrap();
                let value = policy_value(&family, 0, &policy).unwrap();
                prop_assert!(value.v(0, s0) <= opt.v(0, s0) + 1e-9);
            }
        }
    }
}
