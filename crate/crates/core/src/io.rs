//! On-disk formats: trajectory lines, taxonomy and boundary tables,
//! checkpoints, training logs and report CSVs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::CostBoundaries;
use crate::env::{Task, Trajectory};
use crate::error::{Error, Result};
use crate::harness::{AllocationRow, FrontierPoint, HardBudgetResult};
use crate::policy::{RouterAction, RouterParams};
use crate::synth::{ExpertRecord, ExpertSource};
use crate::taxonomy::{DifficultyLabel, Taxonomy, TaxonomyEntry};
use crate::train::TrainLogRecord;
use crate::decode::replay;
use crate::cost::CostModel;

/// One trajectory per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLine {
    pub task_id: u64,
    pub seed: u64,
    pub actions: String,
    pub costs: Vec<f64>,
    pub success: bool,
    pub total_cost: f64,
    pub large_calls: usize,
}

impl From<&Trajectory> for TrajectoryLine {
    fn from(t: &Trajectory) -> Self {
        TrajectoryLine {
            task_id: t.task_id,
            seed: t.seed,
            actions: t.action_string(),
            costs: t.records.iter().map(|r| r.cost).collect(),
            success: t.success,
            total_cost: t.total_cost,
            large_calls: t.large_calls,
        }
    }
}

impl TrajectoryLine {
    pub fn parse_actions(&self) -> Result<Vec<RouterAction>> {
        self.actions
            .chars()
            .map(|c| {
                RouterAction::from_char(c).ok_or_else(|| Error::Parse {
                    what: "trajectory actions",
                    detail: format!("unexpected character {c:?}"),
                })
            })
            .collect()
    }

    /// Rebuilds the full trajectory by replaying its seed, checking that
    /// the stored summary agrees.
    pub fn restore(&self, task: &Task, costs: &CostModel) -> Result<Trajectory> {
        let actions = self.parse_actions()?;
        let (traj, _) = replay(task, costs, self.seed, &actions);
        if traj.len() != actions.len() || traj.success != self.success || traj.large_calls != self.large_calls {
            return Err(Error::Parse {
                what: "trajectory line",
                detail: format!("task {} does not replay to the stored outcome", self.task_id),
            });
        }
        Ok(traj)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertLine {
    #[serde(flatten)]
    pub trajectory: TrajectoryLine,
    pub label: DifficultyLabel,
    pub source: ExpertSource,
}

impl From<&ExpertRecord> for ExpertLine {
    fn from(r: &ExpertRecord) -> Self {
        ExpertLine {
            trajectory: TrajectoryLine::from(&r.expert),
            label: r.label,
            source: r.source,
        }
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path, what: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput {
            what,
            path: path.to_path_buf(),
        });
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn to_jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(&row).expect("serializable row"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str, what: &'static str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                what,
                detail: e.to_string(),
            })
        })
        .collect()
}

fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Parse {
            what: "csv row",
            detail: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse {
        what: "csv",
        detail: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_rows<T: for<'de> Deserialize<'de>>(text: &str, what: &'static str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| {
            r.map_err(|e| Error::Parse {
                what,
                detail: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TaxonomyRow {
    task_id: u64,
    #[serde(rename = "K")]
    k: usize,
    small_successes: usize,
    large_successes: usize,
    label: String,
}

pub fn taxonomy_csv(tax: &Taxonomy) -> Result<String> {
    csv_string(tax.entries.values().map(|e| TaxonomyRow {
        task_id: e.task_id,
        k: e.trials_k,
        small_successes: e.small_successes,
        large_successes: e.large_successes,
        label: e.label.to_string(),
    }))
}

pub fn parse_taxonomy_csv(text: &str) -> Result<Taxonomy> {
    let mut tax = Taxonomy::default();
    for row in csv_rows::<TaxonomyRow>(text, "taxonomy table")? {
        tax.insert(TaxonomyEntry {
            task_id: row.task_id,
            trials_k: row.k,
            small_successes: row.small_successes,
            large_successes: row.large_successes,
            label: row.label.parse()?,
        })?;
    }
    Ok(tax)
}

#[derive(Debug, Serialize, Deserialize)]
struct BoundaryRow {
    task_id: u64,
    c_small: f64,
    c_large: f64,
    c_min: f64,
    c_max: f64,
}

pub fn boundaries_csv(bounds: &BTreeMap<u64, CostBoundaries>) -> Result<String> {
    csv_string(bounds.iter().map(|(&task_id, b)| BoundaryRow {
        task_id,
        c_small: b.c_small,
        c_large: b.c_large,
        c_min: b.c_min,
        c_max: b.c_max,
    }))
}

pub fn parse_boundaries_csv(text: &str) -> Result<BTreeMap<u64, CostBoundaries>> {
    Ok(csv_rows::<BoundaryRow>(text, "boundary table")?
        .into_iter()
        .map(|r| (r.task_id, CostBoundaries::from_boundary_costs(r.c_small, r.c_large)))
        .collect())
}

pub fn frontier_csv(points: &[FrontierPoint]) -> Result<String> {
    csv_string(points)
}

#[derive(Serialize)]
struct HardBudgetRow<'a> {
    method: &'a str,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "SR")]
    sr: f64,
    use_pct: f64,
}

pub fn hard_budget_csv(rows: &[HardBudgetResult]) -> Result<String> {
    csv_string(rows.iter().map(|r| HardBudgetRow {
        method: &r.method,
        k: r.k,
        sr: r.sr,
        use_pct: r.use_pct,
    }))
}

#[derive(Serialize)]
struct AllocationCsvRow {
    label: String,
    count_share: f64,
    cost_share: f64,
}

pub fn allocation_csv(rows: &[AllocationRow]) -> Result<String> {
    csv_string(rows.iter().map(|r| AllocationCsvRow {
        label: r.label.to_string(),
        count_share: r.count_share,
        cost_share: r.cost_share,
    }))
}

pub fn train_log_jsonl(records: &[TrainLogRecord]) -> String {
    to_jsonl(records)
}

/// Checkpoint text with an extra `# iteration:` header for resumption.
pub fn checkpoint_with_iteration(params: &RouterParams, iteration: usize) -> String {
    let text = params.to_checkpoint();
    let mut lines: Vec<&str> = text.lines().collect();
    let header = format!("# iteration: {iteration}");
    lines.insert(1, &header);
    lines.join("\n") + "\n"
}

pub fn checkpoint_iteration(text: &str) -> Option<usize> {
    text.lines()
        .filter_map(|l| l.strip_prefix("# iteration:"))
        .find_map(|v| v.trim().parse().ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::{run_episode, PolicySpec};
    use crate::env::{generate_task, EnvConfig};
    use proptest::prelude::*;

    #[test]
    fn trajectory_line_restores() {
        let cfg = EnvConfig::default();
        let costs = CostModel::default();
        for id in 0..30 {
            let task = generate_task(&cfg, 1, id).unwrap();
            let t = run_episode(&PolicySpec::RandomP { p: 0.5 }, &task, &costs, id * 7).unwrap();
            let line = TrajectoryLine::from(&t);
            let text = to_jsonl([&line]);
            let back: Vec<TrajectoryLine> = from_jsonl(&text, "trajectory").unwrap();
            assert_eq!(back[0], line);
            assert_eq!(back[0].restore(&task, &costs).unwrap(), t);
        }
    }

    #[test]
    fn corrupted_line_is_detected() {
        let cfg = EnvConfig::default();
        let costs = CostModel::default();
        let task = generate_task(&cfg, 1, 3).unwrap();
        let t = run_episode(&PolicySpec::AlwaysLarge, &task, &costs, 1).unwrap();
        let mut line = TrajectoryLine::from(&t);
        line.actions = line.actions.replace('L', "X");
        assert!(line.restore(&task, &costs).is_err());
    }

    #[test]
    fn checkpoint_iteration_header() {
        let p = RouterParams::from_weights(vec![0.5; 7]);
        let text = checkpoint_with_iteration(&p, 42);
        assert_eq!(checkpoint_iteration(&text), Some(42));
        assert_eq!(RouterParams::from_checkpoint(&text).unwrap(), p);
        assert_eq!(checkpoint_iteration(&p.to_checkpoint()), None);
    }

    proptest! {
        #[test]
        fn taxonomy_table_round_trips(rows in prop::collection::btree_map(0u64..10_000, (1usize..12, 0usize..12, 0usize..12), 0..40)) {
            let mut tax = Taxonomy::default();
            for (id, (k, s, l)) in rows {
                let (s, l) = (s.min(k), l.min(k));
                tax.insert(TaxonomyEntry {
                    task_id: id, trials_k: k, small_successes: s, large_successes: l,
                    label: crate::taxonomy::classify_counts(k, s, l),
                }).unwrap();
            }
            let text = taxonomy_csv(&tax).unwrap();
            prop_assert_eq!(parse_taxonomy_csv(&text).unwrap(), tax);
        }
    }
}
