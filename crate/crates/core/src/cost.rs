//! Cost accounting and boundary-normalized cost.

use serde::{Deserialize, Serialize};

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::policy::RouterAction;
use crate::taxonomy::DifficultyProfile;

pub const DEFAULT_NORM_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub small: f64,
    pub large: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            small: 1.0,
            large: 5.0,
        }
    }
}

impl CostModel {
    pub fn new(small: f64, large: f64) -> Result<Self> {
        let model = CostModel { small, large };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.small > 0.0 && self.small.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "cost.small must be positive, got {}",
                self.small
            )));
        }
        if !(self.large > self.small && self.large.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "cost.large ({}) must exceed cost.small ({})",
                self.large, self.small
            )));
        }
        Ok(())
    }

    pub fn price(&self, action: RouterAction) -> f64 {
        match action {
            RouterAction::Small => self.small,
            RouterAction::Large => self.large,
        }
    }
}

/// Per-task cost anchors from the two boundary policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBoundaries {
    pub c_min: f64,
    pub c_max: f64,
    /// Mean cost of the always-small profiling runs.
    pub c_small: f64,
    /// Mean cost of the always-large profiling runs.
    pub c_large: f64,
}

impl CostBoundaries {
    pub fn from_boundary_costs(c_small: f64, c_large: f64) -> Self {
        CostBoundaries {
            c_min: c_small.min(c_large),
            c_max: c_small.max(c_large),
            c_small,
            c_large,
        }
    }
}

pub fn trajectory_cost(traj: &Trajectory) -> f64 {
    traj.records.iter().map(|r| r.cost).sum()
}

fn mean_cost(trajs: &[Trajectory]) -> Option<f64> {
    if trajs.is_empty() {
        return None;
    }
    Some(trajs.iter().map(trajectory_cost).sum::<f64>() / trajs.len() as f64)
}

pub fn boundary_costs(profile: &DifficultyProfile) -> Result<CostBoundaries> {
    let c_small =
        mean_cost(&profile.small_trajectories).ok_or(Error::MissingBoundaryRuns(profile.task_id))?;
    let c_large =
        mean_cost(&profile.large_trajectories).ok_or(Error::MissingBoundaryRuns(profile.task_id))?;
    Ok(CostBoundaries::from_boundary_costs(c_small, c_large))
}

/// `clip((C - C_min) / (C_max - C_min + eps), 0, 1)`.
///
/// Panics when the denominator is zero (`eps = 0` and `C_max = C_min`).
pub fn normalized_cost(cost: f64, bounds: &CostBoundaries, epsilon: f64) -> f64 {
    assert!(epsilon >= 0.0, "epsilon must be non-negative");
    let denom = bounds.c_max - bounds.c_min + epsilon;
    assert!(
        denom > 0.0,
        "normalized cost undefined: C_max == C_min with epsilon = 0"
    );
    ((cost - bounds.c_min) / denom).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{StepOutcome, StepRecord};
    use proptest::prelude::*;

    fn traj(actions: &[RouterAction], model: &CostModel) -> Trajectory {
        let records = actions
            .iter()
            .enumerate()
            .map(|(i, &a)| StepRecord {
                step_index: i,
                action: a,
                cost: model.price(a),
                outcome: StepOutcome::NonCritical,
                struggle_emitted: false,
            })
            .collect();
        Trajectory::from_records(0, 0, records, true)
    }

    #[test]
    fn trajectory_cost_sums() {
        use RouterAction::*;
        let m = CostModel::new(0.4, 2.0).unwrap();
        assert_eq!(trajectory_cost(&traj(&[], &m)), 0.0);
        assert!((trajectory_cost(&traj(&[Small, Small, Small], &m)) - 1.2).abs() < 1e-12);
        assert!((trajectory_cost(&traj(&[Small, Large, Small], &m)) - 2.8).abs() < 1e-12);
    }

    #[test]
    fn cost_model_validation() {
        assert!(CostModel::new(1.0, 1.0).is_err());
        assert!(CostModel::new(0.0, 1.0).is_err());
        assert!(CostModel::new(1.0, 5.0).is_ok());
    }

    #[test]
    fn boundaries_handle_inversion() {
        let b = CostBoundaries::from_boundary_costs(2.0, 6.0);
        assert_eq!((b.c_min, b.c_max), (2.0, 6.0));
        let b = CostBoundaries::from_boundary_costs(7.0, 6.0);
        assert_eq!((b.c_min, b.c_max), (6.0, 7.0));
        let b = CostBoundaries::from_boundary_costs(3.0, 3.0);
        assert_eq!(b.c_min, b.c_max);
    }

    #[test]
    fn normalized_cost_examples() {
        let b = CostBoundaries::from_boundary_costs(2.0, 6.0);
        assert_eq!(normalized_cost(2.0, &b, 0.0), 0.0);
        assert_eq!(normalized_cost(40.0, &b, 0.0), 1.0);
        assert!((normalized_cost(3.0, &b, 0.0) - 0.25).abs() < 1e-15);
        let flat = CostBoundaries::from_boundary_costs(3.0, 3.0);
        assert_eq!(normalized_cost(3.0, &flat, DEFAULT_NORM_EPSILON), 0.0);
        assert_eq!(normalized_cost(3.5, &flat, DEFAULT_NORM_EPSILON), 1.0);
    }

    #[test]
    #[should_panic]
    fn zero_epsilon_on_flat_boundaries_panics() {
        let flat = CostBoundaries::from_boundary_costs(3.0, 3.0);
        normalized_cost(3.0, &flat, 0.0);
    }

    proptest! {
        #[test]
        fn range_and_monotonicity(
            a in 0.0f64..100.0, b in 0.0f64..100.0,
            c1 in -10.0f64..200.0, c2 in -10.0f64..200.0,
            eps in 1e-9f64..1.0,
        ) {
            let bounds = CostBoundaries::from_boundary_costs(a, b);
            let n1 = normalized_cost(c1, &bounds, eps);
            let n2 = normalized_cost(c2, &bounds, eps);
            prop_assert!((0.0..=1.0).contains(&n1));
            if c1 <= c2 {
                prop_assert!(n1 <= n2);
            }
        }

        #[test]
        fn scale_covariance(
            a in 0.1f64..100.0, gap in 0.1f64..100.0,
            c in 0.0f64..300.0, k in 0.01f64..100.0, eps in 0.0f64..0.01,
        ) {
            let bounds = CostBoundaries::from_boundary_costs(a, a + gap);
            let scaled = CostBoundaries::from_boundary_costs(k * a, k * (a + gap));
            let base0 = normalized_cost(c, &bounds, 0.0);
            prop_assert!((base0 - normalized_cost(k * c, &scaled, 0.0)).abs() < 1e-9);
            let with_eps = normalized_cost(k * c, &scaled, eps);
            prop_assert!((base0 - with_eps).abs() <= eps / (k * gap) + 1e-9);
        }
    }
}
