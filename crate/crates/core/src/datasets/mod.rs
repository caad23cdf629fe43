//! Behavior datasets, reward relabeling across tasks and shared datasets.

mod format;

pub use format::{read_dataset, DatasetFile};

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::{exact_optimal_policy, Policy, TaskFamily};
use crate::seeds;

/// One logged step `(t, s, a, r, s')` with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub t: usize,
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub source_task: usize,
    pub relabeled_for: Option<usize>,
}

impl Transition {
    /// The task whose reward `r` measures.
    pub fn reward_task(&self) -> usize {
        self.relabeled_for.unwrap_or(self.source_task)
    }
}

/// Quality of the behavior policy that produced a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Flavor {
    Random,
    Medium,
    MediumReplay,
    Replay,
    Expert,
    /// Equal mix of expert and medium data, built by [`compose_medium_expert`].
    MediumExpert,
}

impl Flavor {
    /// Flavors produced directly by [`generate_dataset`].
    pub const GENERATED: [Flavor; 5] = [
        Flavor::Random,
        Flavor::Medium,
        Flavor::MediumReplay,
        Flavor::Replay,
        Flavor::Expert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Flavor::Random => "random",
            Flavor::Medium => "medium",
            Flavor::MediumReplay => "medium-replay",
            Flavor::Replay => "replay",
            Flavor::Expert => "expert",
            Flavor::MediumExpert => "medium-expert",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Flavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Flavor::Random),
            "medium" => Ok(Flavor::Medium),
            "medium-replay" => Ok(Flavor::MediumReplay),
            "replay" => Ok(Flavor::Replay),
            "expert" => Ok(Flavor::Expert),
            "medium-expert" => Ok(Flavor::MediumExpert),
            other => Err(Error::invalid(format!("unknown flavor {other:?}"))),
        }
    }
}

/// Exploration rate of the ε-greedy behavior policy for episode `k` of `n`.
pub fn behavior_epsilon(flavor: Flavor, k: usize, n: usize) -> Result<f64> {
    let frac = if n <= 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
    match flavor {
        Flavor::Random => Ok(1.0),
        Flavor::Expert => Ok(0.0),
        Flavor::Medium => Ok(0.5),
        Flavor::Replay => Ok(1.0 - frac),
        Flavor::MediumReplay => Ok(1.0 - 0.5 * frac),
        Flavor::MediumExpert => Err(Error::invalid(
            "medium-expert is composed from expert and medium datasets, not generated",
        )),
    }
}

/// Data logged on a task's own behavior policy.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task: usize,
    pub flavor: Flavor,
    pub seed: u64,
    pub episodes: usize,
    pub transitions: Vec<Transition>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Undiscounted return of each consecutive `horizon`-step episode.
    pub fn episode_returns(&self, horizon: usize) -> Vec<f64> {
        self.transitions
            .chunks(horizon)
            .map(|ep| ep.iter().map(|tr| tr.r).sum())
            .collect()
    }
}

/// Another task's data with rewards rewritten for `target_task`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelabeledDataset {
    pub source_task: usize,
    pub target_task: usize,
    pub flavor: Flavor,
    pub seed: u64,
    pub episodes: usize,
    pub transitions: Vec<Transition>,
}

/// Provenance of one block of a shared dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Part {
    pub source_task: usize,
    pub flavor: Flavor,
    pub seed: u64,
    pub len: usize,
}

/// Main-task data followed by relabeled data from other tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedDataset {
    pub main_task: usize,
    pub parts: Vec<Part>,
    pub transitions: Vec<Transition>,
}

impl SharedDataset {
    /// Wraps a single task's data with nothing shared.
    pub fn single(main: &TaskDataset) -> Self {
        SharedDataset {
            main_task: main.task,
            parts: vec![Part {
                source_task: main.task,
                flavor: main.flavor,
                seed: main.seed,
                len: main.len(),
            }],
            transitions: main.transitions.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// The first part's transitions, always the main task's own data.
    pub fn main_transitions(&self) -> &[Transition] {
        let n = self.parts.first().map_or(0, |p| p.len);
        &self.transitions[..n]
    }

    /// Everything after the main part.
    pub fn shared_transitions(&self) -> &[Transition] {
        let n = self.parts.first().map_or(0, |p| p.len);
        &self.transitions[n..]
    }
}

/// Rolls out `n_episodes` behavior episodes of length `T` from the initial state.
pub fn generate_dataset(
    family: &TaskFamily,
    task: usize,
    flavor: Flavor,
    n_episodes: usize,
    seed: u64,
) -> Result<TaskDataset> {
    family.check_task(task)?;
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be at least 1"));
    }
    behavior_epsilon(flavor, 0, n_episodes)?;
    let (optimal, _) = exact_optimal_policy(family, task)?;
    let horizon = family.horizon();
    let na = family.n_actions();
    let dynamics = family.dynamics();
    let mut rng = seeds::rng(seeds::derive(
        seed,
        "dataset",
        &[task as u64, flavor.code()],
    ));
    let mut transitions = Vec::with_capacity(n_episodes * horizon);
    for k in 0..n_episodes {
        let eps = behavior_epsilon(flavor, k, n_episodes)?;
        let mut s = dynamics.initial_state();
        for t in 0..horizon {
            let a = epsilon_greedy(&optimal, t, s, na, eps, &mut rng);
            let s_next = dynamics.sample_next(s, a, &mut rng);
            transitions.push(Transition {
                t,
                s,
                a,
                r: family.reward(task, s, a),
                s_next,
                source_task: task,
                relabeled_for: None,
            });
            s = s_next;
        }
    }
    Ok(TaskDataset {
        task,
        flavor,
        seed,
        episodes: n_episodes,
        transitions,
    })
}

fn epsilon_greedy<R: Rng>(
    greedy: &Policy,
    t: usize,
    s: usize,
    n_actions: usize,
    eps: f64,
    rng: &mut R,
) -> usize {
    if eps >= 1.0 {
        rng.random_range(0..n_actions)
    } else if eps <= 0.0 {
        greedy.action(t, s)
    } else if rng.random::<f64>() < eps {
        rng.random_range(0..n_actions)
    } else {
        greedy.action(t, s)
    }
}

/// Concatenates expert and medium data of one task into a medium-expert set.
pub fn compose_medium_expert(expert: &TaskDataset, medium: &TaskDataset) -> Result<TaskDataset> {
    if expert.flavor != Flavor::Expert || medium.flavor != Flavor::Medium {
        return Err(Error::invalid(
            "medium-expert needs an expert and a medium dataset",
        ));
    }
    if expert.task != medium.task {
        return Err(Error::invalid("medium-expert parts come from different tasks"));
    }
    let mut transitions = expert.transitions.clone();
    transitions.extend(medium.transitions.iter().cloned());
    Ok(TaskDataset {
        task: expert.task,
        flavor: Flavor::MediumExpert,
        seed: expert.seed,
        episodes: expert.episodes + medium.episodes,
        transitions,
    })
}

/// [`generate_dataset`] for generated flavors; medium-expert is composed
/// from `n_episodes` expert and `n_episodes` medium episodes.
pub fn build_dataset(
    family: &TaskFamily,
    task: usize,
    flavor: Flavor,
    n_episodes: usize,
    seed: u64,
) -> Result<TaskDataset> {
    if flavor == Flavor::MediumExpert {
        let expert = generate_dataset(family, task, Flavor::Expert, n_episodes, seed)?;
        let medium = generate_dataset(family, task, Flavor::Medium, n_episodes, seed)?;
        compose_medium_expert(&expert, &medium)
    } else {
        generate_dataset(family, task, flavor, n_episodes, seed)
    }
}

/// Rewrites every reward with the target task's reward function.
pub fn relabel(
    dataset: &TaskDataset,
    family: &TaskFamily,
    target_task: usize,
) -> Result<RelabeledDataset> {
    family.check_task(target_task)?;
    if target_task == dataset.task {
        return Err(Error::invalid(format!(
            "relabeling task {target_task} onto itself"
        )));
    }
    let transitions = dataset
        .transitions
        .iter()
        .map(|tr| Transition {
            r: family.reward(target_task, tr.s, tr.a),
            relabeled_for: Some(target_task),
            ..tr.clone()
        })
        .collect();
    Ok(RelabeledDataset {
        source_task: dataset.task,
        target_task,
        flavor: dataset.flavor,
        seed: dataset.seed,
        episodes: dataset.episodes,
        transitions,
    })
}

/// Main data first, then the shared parts in argument order.
pub fn merge(main: &TaskDataset, shared: &[RelabeledDataset]) -> Result<SharedDataset> {
    let mut out = SharedDataset::single(main);
    for part in shared {
        let consistent = part.target_task == main.task
            && part
                .transitions
                .iter()
                .all(|tr| tr.relabeled_for == Some(main.task));
        if !consistent {
            return Err(Error::invalid(format!(
                "shared part from task {} is not relabeled for task {}",
                part.source_task, main.task
            )));
        }
        out.parts.push(Part {
            source_task: part.source_task,
            flavor: part.flavor,
            seed: part.seed,
            len: part.transitions.len(),
        });
        out.transitions.extend(part.transitions.iter().cloned());
    }
    Ok(out)
}

/// Visitation counts `N(s, a)` indexed by `s * n_actions + a`.
pub fn count_table(transitions: &[Transition], family: &TaskFamily) -> Vec<u64> {
    let f = family.features();
    let mut counts = vec![0u64; f.n_pairs()];
    for tr in transitions {
        counts[f.pair(tr.s, tr.a)] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_tabular_gridworld, GridworldSpec};
    use proptest::prelude::*;

    fn grid(slip: f64) -> TaskFamily {
        build_tabular_gridworld(&GridworldSpec::new(3, 3, vec![(0, 0), (2, 2)], slip)).unwrap()
    }

    #[test]
    fn expert_on_deterministic_grid_follows_oracle() {
        let family = grid(0.0);
        let data = generate_dataset(&family, 0, Flavor::Expert, 1, 3).unwrap();
        let (policy, _) = exact_optimal_policy(&family, 0).unwrap();
        let mut s = family.dynamics().initial_state();
        assert_eq!(data.len(), family.horizon());
        for (t, tr) in data.transitions.iter().enumerate() {
            let a = policy.action(t, s);
            let next = family.dynamics().transition(s, a).iter().position(|&p| p == 1.0).unwrap();
            assert_eq!((tr.t, tr.s, tr.a, tr.s_next), (t, s, a, next));
            s = next;
        }
    }

    #[test]
    fn random_flavor_actions_are_uniform() {
        let family = grid(0.1);
        let data = generate_dataset(&family, 0, Flavor::Random, 10, 5).unwrap();
        let n = data.len();
        assert_eq!(n, 10 * family.horizon());
        let mut freq = [0usize; 5];
        for tr in &data.transitions {
            freq[tr.a] += 1;
        }
        let p = 0.2;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in freq {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{freq:?}");
        }
    }

    #[test]
    fn replay_sweeps_epsilon() {
        assert_eq!(behavior_epsilon(Flavor::Replay, 0, 4).unwrap(), 1.0);
        assert_eq!(behavior_epsilon(Flavor::Replay, 3, 4).unwrap(), 0.0);
        assert_eq!(behavior_epsilon(Flavor::MediumReplay, 3, 4).unwrap(), 0.5);
        assert_eq!(behavior_epsilon(Flavor::Replay, 0, 1).unwrap(), 1.0);
        // The last replay episode is pure expert on deterministic dynamics.
        let family = grid(0.0);
        let data = generate_dataset(&family, 1, Flavor::Replay, 4, 9).unwrap();
        let expert = generate_dataset(&family, 1, Flavor::Expert, 1, 0).unwrap();
        let last = &data.transitions[3 * family.horizon()..];
        assert_eq!(last, &expert.transitions[..]);
    }

    #[test]
    fn medium_expert_is_rejected_by_generator_and_composes() {
        let family = grid(0.0);
        let err = generate_dataset(&family, 0, Flavor::MediumExpert, 1, 0);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let e = generate_dataset(&family, 0, Flavor::Expert, 2, 0).unwrap();
        let m = generate_dataset(&family, 0, Flavor::Medium, 2, 0).unwrap();
        let me = compose_medium_expert(&e, &m).unwrap();
        assert_eq!(me.len(), e.len() + m.len());
        assert_eq!(me.flavor, Flavor::MediumExpert);
    }

    #[test]
    fn relabel_rewrites_rewards_only() {
        let family = grid(0.2);
        let data = generate_dataset(&family, 1, Flavor::Random, 20, 1).unwrap();
        let moved = relabel(&data, &family, 0).unwrap();
        let goal0 = 0;
        for (a, b) in data.transitions.iter().zip(&moved.transitions) {
            assert_eq!((a.t, a.s, a.a, a.s_next), (b.t, b.s, b.a, b.s_next));
            let expected = if a.s == goal0 { 1.0 } else { 0.0 };
            assert_eq!(b.r, expected);
            assert_eq!(b.relabeled_for, Some(0));
            assert_eq!(b.source_task, 1);
        }
        assert!(relabel(&data, &family, 1).is_err());
    }

    #[test]
    fn relabel_to_zero_reward_task() {
        let family = TaskFamily::tabular(
            2,
            1,
            2,
            1.0,
            0,
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
            &[vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0, 1.0]],
            vec!["a".into(), "zero".into(), "a2".into()],
        )
        .unwrap();
        let data = generate_dataset(&family, 0, Flavor::Random, 5, 2).unwrap();
        let zero = relabel(&data, &family, 1).unwrap();
        assert!(zero.transitions.iter().all(|tr| tr.r == 0.0));
        // Task 2 has the same reward weights as task 0.
        let same = relabel(&data, &family, 2).unwrap();
        for (a, b) in data.transitions.iter().zip(&same.transitions) {
            assert!((a.r - b.r).abs() <= 1e-12);
        }
    }

    #[test]
    fn merge_keeps_order_and_provenance() {
        let family = grid(0.1);
        let main = generate_dataset(&family, 0, Flavor::Random, 3, 1).unwrap();
        let single = merge(&main, &[]).unwrap();
        assert_eq!(single.transitions, main.transitions);
        assert_eq!(single, SharedDataset::single(&main));

        let other = generate_dataset(&family, 1, Flavor::Replay, 3, 2).unwrap();
        let shared = merge(&main, &[relabel(&other, &family, 0).unwrap()]).unwrap();
        assert_eq!(shared.len(), main.len() + other.len());
        assert_eq!(shared.main_transitions(), &main.transitions[..]);
        assert!(shared.shared_transitions().iter().all(|tr| tr.source_task == 1));
        assert!(shared.transitions.iter().all(|tr| tr.reward_task() == 0));

        let wrong = relabel(&main, &family, 1).unwrap();
        assert!(merge(&other, &[wrong.clone()]).is_ok());
        assert!(merge(&main, &[wrong]).is_err());
        let mut tampered = relabel(&other, &family, 0).unwrap();
        tampered.transitions[0].relabeled_for = None;
        assert!(merge(&main, &[tampered]).is_err());
    }

    #[test]
    fn counts() {
        let family = grid(0.1);
        assert!(count_table(&[], &family).iter().all(|&c| c == 0));
        let one = [Transition {
            t: 0,
            s: 4,
            a: 2,
            r: 0.0,
            s_next: 4,
            source_task: 0,
            relabeled_for: None,
        }];
        let table = count_table(&one, &family);
        assert_eq!(table[4 * 5 + 2], 1);
        assert_eq!(table.iter().sum::<u64>(), 1);
        let data = generate_dataset(&family, 0, Flavor::Random, 10, 3).unwrap();
        assert_eq!(
            count_table(&data.transitions, &family).iter().sum::<u64>(),
            10 * family.horizon() as u64
        );
    }

    #[test]
    fn flavor_quality_ordering() {
        let family = build_tabular_gridworld(&GridworldSpec::new(3, 3, vec![(0, 0)], 0.0)).unwrap();
        let mean = |flavor| {
            let mut total = 0.0;
            for seed in 0..5 {
                let d = generate_dataset(&family, 0, flavor, 20, seed).unwrap();
                let r = d.episode_returns(family.horizon());
                total += r.iter().sum::<f64>() / r.len() as f64;
            }
            total / 5.0
        };
        let (e, m, r) = (mean(Flavor::Expert), mean(Flavor::Medium), mean(Flavor::Random));
        assert!(e >= m && m >= r, "expert {e} medium {m} random {r}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn relabel_preserves_dynamics_fields(seed in any::<u64>(), episodes in 1usize..6) {
            let family = grid(0.3);
            let data = generate_dataset(&family, 0, Flavor::Random, episodes, seed).unwrap();
            let moved = relabel(&data, &family, 1).unwrap();
            for (a, b) in data.transitions.iter().zip(&moved.transitions) {
                prop_assert_eq!((a.t, a.s, a.a, a.s_next), (b.t, b.s, b.a, b.s_next));
                prop_assert!((b.r - family.reward_weights(1).dot(family.features().phi(b.s, b.a))).abs() < 1e-9);
            }
            let shared = merge(&data, &[]).unwrap();
            prop_assert_eq!(shared.len(), data.len());
        }
    }

    #[test]
    fn build_dataset_composes_medium_expert() {
        let family =
            build_tabular_gridworld(&GridworldSpec::new(3, 3, vec![(0, 0), (2, 2)], 0.1)).unwrap();
        let me = build_dataset(&family, 1, Flavor::MediumExpert, 3, 4).unwrap();
        assert_eq!(me.flavor, Flavor::MediumExpert);
        assert_eq!(me.episodes, 6);
        assert_eq!(me.len(), 6 * family.horizon());
        let r = build_dataset(&family, 1, Flavor::Random, 3, 4).unwrap();
        assert_eq!(r, generate_dataset(&family, 1, Flavor::Random, 3, 4).unwrap());
    }
}
