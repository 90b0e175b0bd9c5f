//! Pose reliability evaluation and execution-level gating.
//!
//! A pose estimate is *reliable* when none of three triggers fire:
//!
//! * reprojection: `e_rep > tau_rep`
//! * optimizer stability: `r_gn > tau_r`, or the last relative residual
//!   decrease `Δr < tau_dr` while `r_gn > tau_r_floor`
//! * proximity: `γ = d / s > tau_gamma`
//!
//! Triggers use strict `>`/`<`, so values sitting exactly on a threshold are
//! reliable. An unreliable estimate is either rejected (the previous target is
//! held) or its step from the previously executed pose is scaled by `alpha`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::TargetModel;
use crate::error::{invalid_param, Error, Result};
use crate::pnp::{residual_decrease, ResidualTrace};
use crate::se3::{apply_delta, pose_diff, scale_delta, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingStrategy {
    /// Hold the previous target.
    Reject,
    /// Execute `alpha` of the step from the previously executed pose.
    ScaleStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatingThresholds {
    /// Mean reprojection error limit, px.
    pub tau_rep: f64,
    /// Final optimizer residual limit, px.
    pub tau_r: f64,
    /// Minimum relative residual decrease over the last iteration.
    pub tau_dr: f64,
    /// Residual (px) above which a small decrease counts as a stall.
    pub tau_r_floor: f64,
    /// Proximity risk limit, dimensionless.
    pub tau_gamma: f64,
    pub alpha: f64,
    pub strategy: GatingStrategy,
}

impl Default for GatingThresholds {
    fn default() -> Self {
        Self {
            tau_rep: 2.0,
            tau_r: 1.5,
            tau_dr: 0.01,
            tau_r_floor: 1.5,
            tau_gamma: 6.0,
            alpha: 0.5,
            strategy: GatingStrategy::ScaleStep,
        }
    }
}

impl GatingThresholds {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("tau_rep", self.tau_rep),
            ("tau_r", self.tau_r),
            ("tau_dr", self.tau_dr),
            ("tau_r_floor", self.tau_r_floor),
            ("tau_gamma", self.tau_gamma),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid_param(name, format!("{v} must be finite and >= 0")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(invalid_param("alpha", format!("{} is outside (0, 1]", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub e_rep: f64,
    pub r_gn: f64,
    /// Absent for single-entry (closed-form) traces.
    pub delta_r: Option<f64>,
    pub gamma: f64,
    pub rep_trigger: bool,
    pub gn_trigger: bool,
    pub prox_trigger: bool,
    pub reliable: bool,
}

impl ReliabilityReport {
    pub fn any_trigger(&self) -> bool {
        self.rep_trigger || self.gn_trigger || self.prox_trigger
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GatingDecision {
    ExecuteFull,
    Rejected,
    Scaled { alpha: f64 },
}

impl GatingDecision {
    pub fn is_gated(&self) -> bool {
        !matches!(self, GatingDecision::ExecuteFull)
    }
}

/// Maximum pairwise distance among the target points (mm).
pub fn effective_scale(target: &TargetModel) -> Result<f64> {
    effective_scale_points(target.points())
}

pub fn effective_scale_points(points: &[Vector3<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InsufficientPoints {
            required: 2,
            got: points.len(),
        });
    }
    let mut best: f64 = 0.0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm());
        }
    }
    Ok(best)
}

/// `γ = d / s`.
pub fn proximity_risk(distance: f64, scale: f64) -> Result<f64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid_param("s", format!("{scale} must be positive")));
    }
    if distance.is_nan() || distance < 0.0 {
        return Err(invalid_param("d", format!("{distance} must be >= 0")));
    }
    Ok(distance / scale)
}

pub fn evaluate(e_rep: f64, trace: &ResidualTrace, gamma: f64, th: &GatingThresholds) -> Result<ReliabilityReport> {
    if e_rep.is_nan() || e_rep < 0.0 {
        return Err(invalid_param("e_rep", format!("{e_rep} must be >= 0")));
    }
    if gamma.is_nan() || gamma < 0.0 {
        return Err(invalid_param("gamma", format!("{gamma} must be >= 0")));
    }
    let r_gn = trace.last();
    let delta_r = if trace.len() >= 2 {
        Some(residual_decrease(trace)?)
    } else {
        None
    };
    let rep_trigger = e_rep > th.tau_rep;
    let stalled = delta_r.is_some_and(|dr| dr < th.tau_dr && r_gn > th.tau_r_floor);
    let gn_trigger = r_gn > th.tau_r || stalled;
    let prox_trigger = gamma > th.tau_gamma;
    Ok(ReliabilityReport {
        e_rep,
        r_gn,
        delta_r,
        gamma,
        rep_trigger,
        gn_trigger,
        prox_trigger,
        reliable: !(rep_trigger || gn_trigger || prox_trigger),
    })
}

/// Chooses the pose to execute for this step.
///
/// `prev_target` is held on rejection; scaling starts from `prev_executed`.
pub fn gate(
    report: &ReliabilityReport,
    prev_executed: &Pose,
    prev_target: &Pose,
    new_target: &Pose,
    th: &GatingThresholds,
) -> Result<(Pose, GatingDecision)> {
    if report.reliable {
        return Ok((*new_target, GatingDecision::ExecuteFull));
    }
    match th.strategy {
        GatingStrategy::Reject => Ok((*prev_target, GatingDecision::Rejected)),
        GatingStrategy::ScaleStep => {
            let step = pose_diff(new_target, prev_executed)?;
            let scaled = scale_delta(&step, th.alpha)?;
            Ok((
                apply_delta(prev_executed, &scaled),
                GatingDecision::Scaled { alpha: th.alpha },
            ))
        }
    }
}

/// Per-criterion and union trigger counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerStats {
    pub rep_count: u64,
    pub gn_count: u64,
    pub prox_count: u64,
    pub gated_union_count: u64,
    pub total_trials: u64,
}

impl TriggerStats {
    pub fn accumulate(mut self, report: &ReliabilityReport) -> Self {
        self.total_trials += 1;
        self.rep_count += u64::from(report.rep_trigger);
        self.gn_count += u64::from(report.gn_trigger);
        self.prox_count += u64::from(report.prox_trigger);
        self.gated_union_count += u64::from(report.any_trigger());
        self
    }

    /// Counts a trial that produced no report (estimator failure).
    pub fn accumulate_missing(mut self) -> Self {
        self.total_trials += 1;
        self
    }

    pub fn merge(self, other: TriggerStats) -> Self {
        Self {
            rep_count: self.rep_count + other.rep_count,
            gn_count: self.gn_count + other.gn_count,
            prox_count: self.prox_count + other.prox_count,
            gated_union_count: self.gated_union_count + other.gated_union_count,
            total_trials: self.total_trials + other.total_trials,
        }
    }

    pub fn bounds_hold(&self) -> bool {
        let max = self.rep_count.max(self.gn_count).max(self.prox_count);
        let sum = self.rep_count + self.gn_count + self.prox_count;
        max <= self.gated_union_count
            && self.gated_union_count <= sum
            && sum <= 3 * self.total_trials
            && self.gated_union_count <= self.total_trials
    }
}

/// Free-function form of [`TriggerStats::accumulate`].
pub fn accumulate(stats: TriggerStats, report: &ReliabilityReport) -> TriggerStats {
    stats.accumulate(report)
}
