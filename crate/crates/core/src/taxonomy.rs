//! Boundary profiling and Easy/Hard/Intractable classification.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::decode::{run_episode, PolicySpec};
use crate::env::{Task, Trajectory};
use crate::error::{Error, Result};
use crate::seeding;

pub const DEFAULT_TRIALS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DifficultyLabel {
    Easy,
    Hard,
    Intractable,
}

impl DifficultyLabel {
    pub const ALL: [DifficultyLabel; 3] = [
        DifficultyLabel::Easy,
        DifficultyLabel::Hard,
        DifficultyLabel::Intractable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DifficultyLabel::Easy => "easy",
            DifficultyLabel::Hard => "hard",
            DifficultyLabel::Intractable => "intractable",
        }
    }
}

impl fmt::Display for DifficultyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DifficultyLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(DifficultyLabel::Easy),
            "hard" => Ok(DifficultyLabel::Hard),
            "intractable" => Ok(DifficultyLabel::Intractable),
            other => Err(Error::Parse {
                what: "difficulty label",
                detail: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyProfile {
    pub task_id: u64,
    pub trials_k: usize,
    pub small_successes: usize,
    pub large_successes: usize,
    pub small_trajectories: Vec<Trajectory>,
    pub large_trajectories: Vec<Trajectory>,
}

/// Seed of the `trial`-th boundary run of `task_id`.
pub fn profile_seed(master: u64, large: bool, task_id: u64, trial: usize) -> u64 {
    let stage = if large { "profile-large" } else { "profile-small" };
    seeding::stream_seed(master, stage, &[task_id, trial as u64])
}

/// Runs both boundary policies `trials` times on independent streams.
pub fn profile_task(task: &Task, trials: usize, costs: &CostModel, master_seed: u64) -> Result<DifficultyProfile> {
    if trials == 0 {
        return Err(Error::InvalidConfig("taxonomy trials K must be at least 1".into()));
    }
    let runs = |spec: &PolicySpec, large: bool| -> Result<Vec<Trajectory>> {
        (0..trials)
            .map(|k| run_episode(spec, task, costs, profile_seed(master_seed, large, task.task_id, k)))
            .collect()
    };
    let small_trajectories = runs(&PolicySpec::AlwaysSmall, false)?;
    let large_trajectories = runs(&PolicySpec::AlwaysLarge, true)?;
    Ok(DifficultyProfile {
        task_id: task.task_id,
        trials_k: trials,
        small_successes: small_trajectories.iter().filter(|t| t.success).count(),
        large_successes: large_trajectories.iter().filter(|t| t.success).count(),
        small_trajectories,
        large_trajectories,
    })
}

/// Easy iff the small pass rate is at least 0.8; Intractable iff both
/// boundary policies never succeeded; Hard otherwise.
pub fn classify_counts(trials: usize, small_successes: usize, large_successes: usize) -> DifficultyLabel {
    if 5 * small_successes >= 4 * trials {
        DifficultyLabel::Easy
    } else if small_successes == 0 && large_successes == 0 {
        DifficultyLabel::Intractable
    } else {
        DifficultyLabel::Hard
    }
}

pub fn classify(profile: &DifficultyProfile) -> DifficultyLabel {
    classify_counts(
        profile.trials_k,
        profile.small_successes,
        profile.large_successes,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyEntry {
    pub task_id: u64,
    pub trials_k: usize,
    pub small_successes: usize,
    pub large_successes: usize,
    pub label: DifficultyLabel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelSummary {
    pub label: DifficultyLabel,
    pub count: usize,
    pub share: f64,
}

/// Disjoint, exhaustive labelling of a profiled task set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Taxonomy {
    pub entries: BTreeMap<u64, TaxonomyEntry>,
}

impl Taxonomy {
    pub fn label(&self, task_id: u64) -> Option<DifficultyLabel> {
        self.entries.get(&task_id).map(|e| e.label)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn summary(&self) -> Vec<LabelSummary> {
        let n = self.entries.len();
        DifficultyLabel::ALL
            .iter()
            .map(|&label| {
                let count = self.entries.values().filter(|e| e.label == label).count();
                LabelSummary {
                    label,
                    count,
                    share: if n == 0 { 0.0 } else { count as f64 / n as f64 },
                }
            })
            .collect()
    }

    pub fn insert(&mut self, entry: TaxonomyEntry) -> Result<()> {
        if self.entries.contains_key(&entry.task_id) {
            return Err(Error::DuplicateTask(entry.task_id));
        }
        self.entries.insert(entry.task_id, entry);
        Ok(())
    }
}

pub fn partition_dataset<'a>(profiles: impl IntoIterator<Item = &'a DifficultyProfile>) -> Result<Taxonomy> {
    let mut taxonomy = Taxonomy::default();
    for p in profiles {
        taxonomy.insert(TaxonomyEntry {
            task_id: p.task_id,
            trials_k: p.trials_k,
            small_successes: p.small_successes,
            large_successes: p.large_successes,
            label: classify(p),
        })?;
    }
    Ok(taxonomy)
}
