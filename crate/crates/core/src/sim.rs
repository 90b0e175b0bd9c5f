//! Single-step visual alignment, simulated.
//!
//! Frames: robot base `{B}`, end-effector `{E}`, camera `{C}`, target `{T}`.
//! The robot starts at a fixed end-effector pose, the camera observes the
//! target once, the estimator returns `ᶜT̂_T`, and the end-effector is
//! commanded to the pose that would put the camera at the goal
//! camera-from-target configuration. Motion is exact unless actuation noise
//! is configured. Errors are measured in end-effector space against the
//! command computed from the true `ᶜT_T` and the true hand–eye transform.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{add_pixel_noise, project, Intrinsics, TargetModel, MIN_DEPTH_MM};
use crate::error::{invalid_param, Error, Result};
use crate::gating::{
    effective_scale, evaluate, gate, proximity_risk, GatingDecision, GatingThresholds, ReliabilityReport,
};
use crate::pnp::{Correspondences, PoseEstimator};
use crate::se3::{exp_rotation, rotation_angle_deg, Pose, Rotation};

/// Whether the gate is applied to the command.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    Off,
    On,
}

impl GatingMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GatingMode::Off => "off",
            GatingMode::On => "on",
        }
    }
}

impl std::str::FromStr for GatingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "off" => Ok(GatingMode::Off),
            "on" => Ok(GatingMode::On),
            other => Err(invalid_param(
                "modes",
                format!("unknown mode `{other}` (expected on/off)"),
            )),
        }
    }
}

/// Camera–target distance used for the proximity risk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceSource {
    /// True centroid distance (known only to the simulator).
    #[default]
    True,
    /// Centroid distance under the estimated pose.
    Estimated,
}

/// Rotation (deg) and translation (mm) magnitudes of a perturbation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub deg: f64,
    pub mm: f64,
}

impl Perturbation {
    pub fn is_zero(&self) -> bool {
        self.deg == 0.0 && self.mm == 0.0
    }

    fn validate(&self, name: &'static str) -> Result<()> {
        if !(self.deg >= 0.0 && self.deg.is_finite() && self.mm >= 0.0 && self.mm.is_finite()) {
            return Err(invalid_param(name, "deg and mm must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessThresholds {
    pub pos_mm: f64,
    pub ori_deg: f64,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        Self {
            pos_mm: 5.0,
            ori_deg: 5.0,
        }
    }
}

/// Fixed geometry shared by every trial.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rig {
    /// Initial end-effector pose `ᴮT_E`.
    pub base_from_ee: Pose,
    /// Hand–eye transform `ᴱT_C`.
    pub ee_from_cam: Pose,
    /// Desired camera-from-target configuration.
    pub goal: Pose,
}

impl Default for Rig {
    fn default() -> Self {
        Self {
            base_from_ee: Pose::from_translation(Vector3::new(0.0, 0.0, 500.0)),
            ee_from_cam: Pose::new(Rotation::rz(std::f64::consts::FRAC_PI_2), Vector3::new(50.0, 0.0, 0.0)),
            goal: Pose::from_translation(Vector3::new(0.0, 0.0, 150.0)),
        }
    }
}

/// One cell of the experimental grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub depth: f64,
    pub off_axis: f64,
    pub orientation_bound_deg: f64,
    pub pixel_sigma: f64,
    pub handeye_perturb: Perturbation,
    pub actuation_noise: Perturbation,
    pub success: SuccessThresholds,
    pub distance_source: DistanceSource,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            depth: 600.0,
            off_axis: 0.0,
            orientation_bound_deg: 20.0,
            pixel_sigma: 1.0,
            handeye_perturb: Perturbation::default(),
            actuation_noise: Perturbation::default(),
            success: SuccessThresholds::default(),
            distance_source: DistanceSource::True,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth > 0.0 && self.depth.is_finite()) {
            return Err(invalid_param("depth", "must be positive"));
        }
        if !(self.off_axis >= 0.0 && self.off_axis.is_finite()) {
            return Err(invalid_param("off_axis", "must be >= 0"));
        }
        if !(self.orientation_bound_deg >= 0.0 && self.orientation_bound_deg < 180.0) {
            return Err(invalid_param("orientation_bound_deg", "must be in [0, 180)"));
        }
        if !(self.pixel_sigma >= 0.0 && self.pixel_sigma.is_finite()) {
            return Err(invalid_param("pixel_sigma", "must be >= 0"));
        }
        if !(self.success.pos_mm > 0.0 && self.success.ori_deg > 0.0) {
            return Err(invalid_param("success", "thresholds must be positive"));
        }
        self.handeye_perturb.validate("handeye_perturb")?;
        self.actuation_noise.validate("actuation_noise")?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameChain {
    pub base_from_ee: Pose,
    pub ee_from_cam: Pose,
    pub base_from_target: Pose,
    pub goal: Pose,
    /// Sampled target roll/pitch/yaw relative to the camera, degrees.
    pub target_euler_deg: [f64; 3],
}

impl FrameChain {
    pub fn base_from_cam(&self) -> Pose {
        self.base_from_ee.compose(&self.ee_from_cam)
    }

    /// `ᶜT_T = (ᴮT_E·ᴱT_C)⁻¹·ᴮT_T`.
    pub fn cam_from_target(&self) -> Pose {
        self.base_from_cam().inverse().compose(&self.base_from_target)
    }
}

fn uniform_symmetric<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    bound * (2.0 * rng.random::<f64>() - 1.0)
}

/// Places the target in front of the camera per the scenario.
///
/// Consumes four uniform draws: the lateral direction, then roll, pitch, yaw.
pub fn build_chain<R: Rng + ?Sized>(s: &Scenario, rig: &Rig, target: &TargetModel, rng: &mut R) -> Result<FrameChain> {
    s.validate()?;
    let phi = std::f64::consts::TAU * rng.random::<f64>();
    let b = s.orientation_bound_deg;
    let euler = [
        uniform_symmetric(rng, b),
        uniform_symmetric(rng, b),
        uniform_symmetric(rng, b),
    ];
    let rot = Rotation::from_euler(euler[0].to_radians(), euler[1].to_radians(), euler[2].to_radians());
    let centroid_cam = Vector3::new(s.off_axis * phi.cos(), s.off_axis * phi.sin(), s.depth);
    let cam_from_target = Pose::new(rot, centroid_cam - rot.rotate(&target.centroid()));
    for (i, p) in target.points().iter().enumerate() {
        let z = cam_from_target.transform_point(p).z;
        if z.is_nan() || z <= MIN_DEPTH_MM {
            return Err(Error::ScenarioInfeasible(format!(
                "target point {i} at depth {z:.3} mm (depth {}, off-axis {})",
                s.depth, s.off_axis
            )));
        }
    }
    let base_from_cam = rig.base_from_ee.compose(&rig.ee_from_cam);
    Ok(FrameChain {
        base_from_ee: rig.base_from_ee,
        ee_from_cam: rig.ee_from_cam,
        base_from_target: base_from_cam.compose(&cam_from_target),
        goal: rig.goal,
        target_euler_deg: euler,
    })
}

/// Synthesizes noisy pixel observations of the target from the true pose.
pub fn observe<R: Rng + ?Sized>(
    chain: &FrameChain,
    target: &TargetModel,
    k: &Intrinsics,
    sigma: f64,
    rng: &mut R,
) -> Result<Correspondences> {
    let clean = project(k, &chain.cam_from_target(), target)?;
    let pixels = add_pixel_noise(&clean, sigma, rng)?;
    Correspondences::new(target.clone(), pixels, *k)
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Right-multiplies `pose` by a rotation of `p.deg` about a random axis and a
/// translation of `p.mm` in a random direction. No draws when `p` is zero.
pub fn perturb_pose<R: Rng + ?Sized>(pose: &Pose, p: &Perturbation, rng: &mut R) -> Pose {
    if p.is_zero() {
        return *pose;
    }
    let axis = random_unit(rng);
    let dir = random_unit(rng);
    pose.compose(&Pose::new(exp_rotation(&(axis * p.deg.to_radians())), dir * p.mm))
}

fn actuate<R: Rng + ?Sized>(cmd: &Pose, p: &Perturbation, rng: &mut R) -> Pose {
    if p.is_zero() {
        return *cmd;
    }
    let w = Vector3::from_fn(|_, _| StandardNormal.sample(rng)) * p.deg.to_radians();
    let t = Vector3::from_fn(|_, _| StandardNormal.sample(rng)) * p.mm;
    cmd.compose(&Pose::new(exp_rotation(&w), t))
}

/// `ᴮT_E* = ᴮT_E · ᴱT_C · ᶜT̂_T · D⁻¹ · ᴱT_C⁻¹`.
pub fn desired_ee_pose(base_from_ee: &Pose, ee_from_cam: &Pose, est_cam_from_target: &Pose, goal: &Pose) -> Pose {
    let base_from_cam = base_from_ee.compose(ee_from_cam);
    let base_from_target = base_from_cam.compose(est_cam_from_target);
    let base_from_cam_star = base_from_target.compose(&goal.inverse());
    base_from_cam_star.compose(&ee_from_cam.inverse())
}

/// Non-finite values are written as the strings `"inf"`, `"-inf"`, `"nan"`.
pub mod sentinel_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("unexpected number string `{other}`"))),
            },
        }
    }
}

/// Result of one simulated alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub scenario_id: usize,
    pub repeat_id: usize,
    pub mode: GatingMode,
    pub seed: u64,
    pub depth_mm: f64,
    pub off_axis_mm: f64,
    /// End-effector position error, mm (`inf` when the trial failed).
    #[serde(with = "sentinel_f64")]
    pub pos_err_mm: f64,
    /// End-effector orientation error, deg (`inf` when the trial failed).
    #[serde(with = "sentinel_f64")]
    pub ori_err_deg: f64,
    pub success: bool,
    pub decision: Option<GatingDecision>,
    pub report: Option<ReliabilityReport>,
    pub true_cam_from_target: Option<Pose>,
    pub est_cam_from_target: Option<Pose>,
    pub executed_ee: Option<Pose>,
    /// Translation length of the executed step from the initial pose, mm.
    pub step_mm: Option<f64>,
    pub failure: Option<String>,
}

impl TrialOutcome {
    pub fn gated(&self) -> bool {
        self.decision.is_some_and(|d| d.is_gated())
    }

    pub fn is_failure(&self) -> bool {
        self.failure.is_some()
    }

    fn failed(ids: TrialIds, s: &Scenario, true_pose: Option<Pose>, reason: String) -> Self {
        Self {
            scenario_id: ids.scenario_id,
            repeat_id: ids.repeat_id,
            mode: ids.mode,
            seed: ids.seed,
            depth_mm: s.depth,
            off_axis_mm: s.off_axis,
            pos_err_mm: f64::INFINITY,
            ori_err_deg: f64::INFINITY,
            success: false,
            decision: None,
            report: None,
            true_cam_from_target: true_pose,
            est_cam_from_target: None,
            executed_ee: None,
            step_mm: None,
            failure: Some(reason),
        }
    }
}

/// Bookkeeping attached to each outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrialIds {
    pub scenario_id: usize,
    pub repeat_id: usize,
    pub mode: GatingMode,
    pub seed: u64,
}

/// Everything a trial needs besides the scenario and the random stream.
pub struct TrialContext<'a> {
    pub estimator: &'a dyn PoseEstimator,
    pub thresholds: GatingThresholds,
    pub target: &'a TargetModel,
    pub intrinsics: Intrinsics,
    pub rig: Rig,
}

/// Intermediate values of one trial, for tracing.
#[derive(Clone, Debug)]
pub struct TrialTrace {
    pub chain: FrameChain,
    pub observations: Correspondences,
    pub hand_eye_used: Pose,
    pub estimate: crate::pnp::PnPEstimate,
    pub distance_mm: f64,
    pub effective_scale_mm: f64,
    pub report: ReliabilityReport,
    pub desired_ee: Pose,
    pub commanded_ee: Pose,
    pub executed_ee: Pose,
    pub oracle_ee: Pose,
    pub outcome: TrialOutcome,
}

/// Runs the pipeline: build chain, observe, estimate, score reliability,
/// gate (in [`GatingMode::On`]), execute, and compare with the oracle command.
///
/// Only an infeasible scenario is an error; estimator and gating failures
/// become failed outcomes with infinite errors.
pub fn run_trial<R: Rng + ?Sized>(
    s: &Scenario,
    ctx: &TrialContext<'_>,
    ids: TrialIds,
    rng: &mut R,
) -> Result<TrialOutcome> {
    match run_trial_traced(s, ctx, ids, rng)? {
        Ok(trace) => Ok(trace.outcome),
        Err(outcome) => Ok(*outcome),
    }
}

/// Like [`run_trial`], but returns every intermediate value on success.
#[allow(clippy::type_complexity)]
pub fn run_trial_traced<R: Rng + ?Sized>(
    s: &Scenario,
    ctx: &TrialContext<'_>,
    ids: TrialIds,
    rng: &mut R,
) -> Result<std::result::Result<TrialTrace, Box<TrialOutcome>>> {
    let chain = build_chain(s, &ctx.rig, ctx.target, rng)?;
    let true_pose = chain.cam_from_target();
    let fail = |reason: String| Box::new(TrialOutcome::failed(ids, s, Some(true_pose), reason));

    let corr = observe(&chain, ctx.target, &ctx.intrinsics, s.pixel_sigma, rng)?;
    let hand_eye_used = perturb_pose(&chain.ee_from_cam, &s.handeye_perturb, rng);

    let estimate = match ctx.estimator.estimate(&corr) {
        Ok(e) => e,
        Err(e) => return Ok(Err(fail(format!("estimator: {e}")))),
    };
    let est_pose = estimate.cam_from_target;
    let e_rep = match corr.reprojection_error(&est_pose) {
        Ok(e) => e,
        Err(e) => return Ok(Err(fail(format!("reprojection: {e}")))),
    };
    let centroid = ctx.target.centroid();
    let distance = match s.distance_source {
        DistanceSource::True => true_pose.transform_point(&centroid).norm(),
        DistanceSource::Estimated => est_pose.transform_point(&centroid).norm(),
    };
    let scale = effective_scale(ctx.target)?;
    let gamma = proximity_risk(distance, scale)?;
    let report = evaluate(e_rep, &estimate.trace, gamma, &ctx.thresholds)?;

    let initial = chain.base_from_ee;
    let desired = desired_ee_pose(&initial, &hand_eye_used, &est_pose, &chain.goal);
    let (commanded, decision) = match ids.mode {
        GatingMode::Off => (desired, GatingDecision::ExecuteFull),
        GatingMode::On => match gate(&report, &initial, &initial, &desired, &ctx.thresholds) {
            Ok(v) => v,
            Err(e) => return Ok(Err(fail(format!("gating: {e}")))),
        },
    };
    let executed = actuate(&commanded, &s.actuation_noise, rng);
    let oracle = desired_ee_pose(&initial, &chain.ee_from_cam, &true_pose, &chain.goal);

    let pos_err = (executed.translation - oracle.translation).norm();
    let ori_err = rotation_angle_deg(&executed.rotation, &oracle.rotation);
    let success = pos_err <= s.success.pos_mm && ori_err <= s.success.ori_deg;

    let outcome = TrialOutcome {
        scenario_id: ids.scenario_id,
        repeat_id: ids.repeat_id,
        mode: ids.mode,
        seed: ids.seed,
        depth_mm: s.depth,
        off_axis_mm: s.off_axis,
        pos_err_mm: pos_err,
        ori_err_deg: ori_err,
        success,
        decision: Some(decision),
        report: Some(report),
        true_cam_from_target: Some(true_pose),
        est_cam_from_target: Some(est_pose),
        executed_ee: Some(executed),
        step_mm: Some((executed.translation - initial.translation).norm()),
        failure: None,
    };
    Ok(Ok(TrialTrace {
        chain,
        observations: corr,
        hand_eye_used,
        estimate,
        distance_mm: distance,
        effective_scale_mm: scale,
        report,
        desired_ee: desired,
        commanded_ee: commanded,
        executed_ee: executed,
        oracle_ee: oracle,
        outcome,
    }))
}

/// SplitMix64 output function applied to `x + 0x9E3779B97F4A7C15`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(splitmix64(splitmix64(base) ^ scenario) ^ repeat)`.
pub fn trial_seed(base_seed: u64, scenario_index: usize, repeat_index: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(base_seed) ^ scenario_index as u64) ^ repeat_index as u64)
}

/// The random stream for a trial: ChaCha8 seeded from the trial seed.
pub fn trial_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Runs every (scenario, repeat, mode) combination.
///
/// Both modes of a (scenario, repeat) pair replay the same seed, so they see
/// identical scenes and noise. Output is ordered by scenario, repeat, then
/// mode (`off` before `on`) regardless of thread scheduling.
pub fn run_sweep(
    grid: &[Scenario],
    repeats: usize,
    base_seed: u64,
    modes: &[GatingMode],
    ctx: &TrialContext<'_>,
) -> Result<Vec<TrialOutcome>> {
    if repeats == 0 {
        return Err(invalid_param("repeats", "must be >= 1"));
    }
    let mut modes: Vec<GatingMode> = modes.to_vec();
    modes.sort();
    modes.dedup();
    if modes.is_empty() {
        return Err(invalid_param("modes", "at least one mode is required"));
    }
    let cells: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|s| (0..repeats).map(move |r| (s, r)))
        .collect();
    let nested: Vec<Vec<TrialOutcome>> = cells
        .par_iter()
        .map(|&(si, ri)| {
            let scenario = &grid[si];
            let seed = trial_seed(base_seed, si, ri);
            modes
                .iter()
                .map(|&mode| {
                    let ids = TrialIds {
                        scenario_id: si,
                        repeat_id: ri,
                        mode,
                        seed,
                    };
                    let mut rng = trial_rng(seed);
                    run_trial(scenario, ctx, ids, &mut rng)
                        .unwrap_or_else(|e| TrialOutcome::failed(ids, scenario, None, e.to_string()))
                })
                .collect()
        })
        .collect();
    Ok(nested.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::GatingStrategy;
    use crate::pnp::EpnpGaussNewton;

    fn ctx<'a>(est: &'a EpnpGaussNewton, target: &'a TargetModel, th: GatingThresholds) -> TrialContext<'a> {
        TrialContext {
            estimator: est,
            thresholds: th,
            target,
            intrinsics: Intrinsics::default(),
            rig: Rig::default(),
        }
    }

    fn ids(mode: GatingMode) -> TrialIds {
        TrialIds {
            scenario_id: 0,
            repeat_id: 0,
            mode,
            seed: 42,
        }
    }

    #[test]
    fn chain_on_axis_no_rotation() {
        let s = Scenario {
            depth: 200.0,
            off_axis: 0.0,
            orientation_bound_deg: 0.0,
            ..Default::default()
        };
        let chain = build_chain(&s, &Rig::default(), &TargetModel::default_box(), &mut trial_rng(1)).unwrap();
        let p = chain.cam_from_target();
        assert!((p.translation - Vector3::new(0.0, 0.0, 200.0)).norm() < 1e-9);
        assert!(p.rotation.angle() < 1e-9);
    }

    #[test]
    fn chain_off_axis_lateral_norm() {
        let s = Scenario {
            off_axis: 100.0,
            ..Default::default()
        };
        let target = TargetModel::default_box();
        for seed in 0..20 {
            let chain = build_chain(&s, &Rig::default(), &target, &mut trial_rng(seed)).unwrap();
            let c = chain.cam_from_target().transform_point(&target.centroid());
            assert!((c.xy().norm() - 100.0).abs() < 1e-9);
            assert!((c.z - s.depth).abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_orientation_within_bounds() {
        let s = Scenario {
            orientation_bound_deg: 20.0,
            ..Default::default()
        };
        let target = TargetModel::default_box();
        let mut rng = trial_rng(5);
        let mut extreme: f64 = 0.0;
        for _ in 0..10_000 {
            let chain = build_chain(&s, &Rig::default(), &target, &mut rng).unwrap();
            for a in chain.target_euler_deg {
                assert!(a.abs() <= 20.0);
                extreme = extreme.max(a.abs());
            }
        }
        assert!(extreme > 19.9);
    }

    #[test]
    fn infeasible_scenario() {
        let s = Scenario {
            depth: 10.0,
            orientation_bound_deg: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            build_chain(&s, &Rig::default(), &TargetModel::default_box(), &mut trial_rng(0)),
            Err(Error::ScenarioInfeasible(_))
        ));
    }

    #[test]
    fn desired_pose_with_true_estimate_reaches_goal() {
        let rig = Rig::default();
        let s = Scenario::default();
        let chain = build_chain(&s, &rig, &TargetModel::default_box(), &mut trial_rng(9)).unwrap();
        let ee = desired_ee_pose(
            &chain.base_from_ee,
            &chain.ee_from_cam,
            &chain.cam_from_target(),
            &chain.goal,
        );
        let achieved = ee
            .compose(&chain.ee_from_cam)
            .inverse()
            .compose(&chain.base_from_target);
        assert!(achieved.rotation.inverse().compose(&rig.goal.rotation).angle() < 1e-9);
        assert!((achieved.translation - rig.goal.translation).norm() < 1e-6);
    }

    #[test]
    fn desired_pose_identity_hand_eye_closed_form() {
        // ᴮT_E = t(0,0,500), ᴱT_C = I, ᶜT_T = t(10,20,600), D = t(0,0,150)
        // ⇒ ᴮT_E* = t(10, 20, 500 + 600 − 150)
        let ee = desired_ee_pose(
            &Pose::from_translation(Vector3::new(0.0, 0.0, 500.0)),
            &Pose::identity(),
            &Pose::from_translation(Vector3::new(10.0, 20.0, 600.0)),
            &Pose::from_translation(Vector3::new(0.0, 0.0, 150.0)),
        );
        assert!((ee.translation - Vector3::new(10.0, 20.0, 950.0)).norm() < 1e-12);
        assert!(ee.rotation.angle() < 1e-12);
    }

    #[test]
    fn translation_error_propagates_rigidly() {
        let base = Pose::from_translation(Vector3::new(0.0, 0.0, 500.0));
        let he = Pose::from_translation(Vector3::new(0.0, 30.0, 0.0));
        let goal = Pose::from_translation(Vector3::new(0.0, 0.0, 150.0));
        let truth = Pose::new(Rotation::identity(), Vector3::new(5.0, 5.0, 700.0));
        let e = Vector3::new(1.0, -2.0, 3.0);
        let est = Pose::new(truth.rotation, truth.translation + e);
        let a = desired_ee_pose(&base, &he, &truth, &goal);
        let b = desired_ee_pose(&base, &he, &est, &goal);
        assert!(((a.translation - b.translation).norm() - e.norm()).abs() < 1e-9);
    }

    #[test]
    fn noiseless_trial_is_exact() {
        let est = EpnpGaussNewton::default();
        let target = TargetModel::default_box();
        let c = ctx(&est, &target, GatingThresholds::default());
        let s = Scenario {
            pixel_sigma: 0.0,
            depth: 400.0,
            off_axis: 50.0,
            ..Default::default()
        };
        let o = run_trial(&s, &c, ids(GatingMode::Off), &mut trial_rng(42)).unwrap();
        assert!(o.success && o.pos_err_mm < 1e-3, "{o:?}");
    }

    #[test]
    fn reliable_trial_is_identical_with_and_without_gate() {
        let est = EpnpGaussNewton::default();
        let target = TargetModel::default_box();
        let c = ctx(&est, &target, GatingThresholds::default());
        let s = Scenario {
            depth: 300.0,
            ..Default::default()
        };
        let off = run_trial(&s, &c, ids(GatingMode::Off), &mut trial_rng(42)).unwrap();
        let on = run_trial(&s, &c, ids(GatingMode::On), &mut trial_rng(42)).unwrap();
        assert!(on.report.unwrap().reliable);
        assert_eq!(off.pos_err_mm, on.pos_err_mm);
        assert_eq!(off.executed_ee, on.executed_ee);
    }

    #[test]
    fn forced_rejection_holds_initial_pose() {
        let est = EpnpGaussNewton::default();
        let target = TargetModel::default_box();
        let th = GatingThresholds {
            tau_rep: 0.0,
            strategy: GatingStrategy::Reject,
            ..Default::default()
        };
        let c = ctx(&est, &target, th);
        let s = Scenario::default();
        let o = run_trial(&s, &c, ids(GatingMode::On), &mut trial_rng(42)).unwrap();
        assert_eq!(o.decision, Some(GatingDecision::Rejected));
        let rig = Rig::default();
        assert_eq!(o.executed_ee, Some(rig.base_from_ee));
        let chain = build_chain(&s, &rig, &target, &mut trial_rng(42)).unwrap();
        let oracle = desired_ee_pose(&rig.base_from_ee, &rig.ee_from_cam, &chain.cam_from_target(), &rig.goal);
        assert!((o.pos_err_mm - (oracle.translation - rig.base_from_ee.translation).norm()).abs() < 1e-9);
    }

    #[test]
    fn seeds_are_mixed_per_cell() {
        assert_ne!(trial_seed(1, 0, 1), trial_seed(1, 1, 0));
        assert_eq!(trial_seed(7, 3, 4), trial_seed(7, 3, 4));
        // SplitMix64 reference value for seed 0: first output 0xE220A8397B1DCDAF
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn sentinel_roundtrip() {
        #[derive(Serialize, Deserialize)]
        struct W(#[serde(with = "sentinel_f64")] f64);
        assert_eq!(serde_json::to_string(&W(f64::INFINITY)).unwrap(), "\"inf\"");
        let w: W = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(w.0, f64::INFINITY);
        let w: W = serde_json::from_str("1.5").unwrap();
        assert_eq!(w.0, 1.5);
    }
}
