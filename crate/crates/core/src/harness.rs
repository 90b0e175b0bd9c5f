//! Operator entry points behind the `execgate` binary: configured sweeps,
//! reports, single-trial traces and paired comparisons.
//!
//! Record files are newline-delimited JSON. The first line is a header
//! (`"kind": "header"`) carrying the crate version, the fully expanded
//! config, the base seed, the modes that were run, and the seed-mixing rule.
//! Every following line is one trial (`"kind": "trial"`).
//!
//! Trial seeds are `splitmix64(splitmix64(splitmix64(base) ^ scenario) ^ repeat)`,
//! where `splitmix64(x)` is the SplitMix64 finalizer applied to
//! `x + 0x9E3779B97F4A7C15`; each trial stream is `ChaCha8` seeded from that
//! value with `seed_from_u64`. Scenario indices enumerate depths in the outer
//! loop and off-axis offsets in the inner loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, TargetModel};
use crate::error::Error;
use crate::gating::{GatingDecision, GatingThresholds};
use crate::metrics::{self, Format, GroupKey, Report, Sections};
use crate::pnp::{EpnpGaussNewton, EpnpOnly, GaussNewtonConfig, PoseEstimator};
use crate::se3::Pose;
use crate::sim::{
    self, DistanceSource, GatingMode, Perturbation, Rig, Scenario, SuccessThresholds, TrialContext, TrialIds,
    TrialOutcome,
};

/// Published JSON schema for [`RunConfig`].
pub const CONFIG_SCHEMA: &str = include_str!("../schema/config.schema.json");

/// Published JSON schema for `report --format json`.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

pub const RECORD_FORMAT: &str = "execgate-records";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SEED_MIXING: &str = "splitmix64(splitmix64(splitmix64(base_seed) ^ scenario_index) ^ repeat_index); \
splitmix64(x): z = x + 0x9E3779B97F4A7C15; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9; \
z = (z ^ z>>27) * 0x94D049BB133111EB; z ^ z>>31; rng = ChaCha8Rng::seed_from_u64(seed)";

/// Failure of a harness command, split by exit code.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    /// Bad config, arguments or records (exit code 2).
    #[error("{0}")]
    Input(String),
    /// Output could not be written (exit code 3).
    #[error("{0}")]
    Environment(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Environment(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Input(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Writes command output; a closed downstream pipe is not an error.
pub fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(CliError::Environment(format!("cannot write output: {e}")))
        }
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    /// Built-in model; only `box` (100 × 100 × 40 mm cuboid) is defined.
    Builtin(String),
    /// Point file, resolved relative to the config file.
    File(PathBuf),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    EpnpGn,
    Epnp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub depths: Vec<f64>,
    pub off_axes: Vec<f64>,
    pub orientation_bound_deg: f64,
    pub repeats: usize,
    pub pixel_sigma: f64,
    pub thresholds: GatingThresholds,
    pub success: SuccessThresholds,
    pub intrinsics: Intrinsics,
    pub target: TargetSpec,
    pub base_seed: u64,
    pub handeye_perturb: Perturbation,
    pub actuation_noise: Perturbation,
    pub distance_source: DistanceSource,
    pub estimator: EstimatorKind,
    pub gauss_newton: GaussNewtonConfig,
    pub rig: Rig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = Scenario::default();
        Self {
            depths: vec![200.0, 400.0, 600.0, 800.0, 1000.0],
            off_axes: vec![0.0, 50.0, 100.0],
            orientation_bound_deg: s.orientation_bound_deg,
            repeats: 20,
            pixel_sigma: s.pixel_sigma,
            thresholds: GatingThresholds::default(),
            success: s.success,
            intrinsics: Intrinsics::default(),
            target: TargetSpec::Builtin("box".into()),
            base_seed: 0,
            handeye_perturb: Perturbation::default(),
            actuation_noise: Perturbation::default(),
            distance_source: DistanceSource::default(),
            estimator: EstimatorKind::default(),
            gauss_newton: GaussNewtonConfig::default(),
            rig: Rig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Input(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; relative target files are resolved
    /// against the config's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let TargetSpec::File(p) = &cfg.target {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.target = TargetSpec::File(dir.join(p));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |field: &str, why: String| Err(CliError::Input(format!("invalid config field `{field}`: {why}")));
        if self.depths.is_empty() {
            return bad("depths", "must not be empty".into());
        }
        if self.off_axes.is_empty() {
            return bad("off_axes", "must not be empty".into());
        }
        if self.repeats < 1 {
            return bad("repeats", "must be >= 1".into());
        }
        let nested = |field: &str, r: crate::Result<()>| match r {
            Ok(()) => Ok(()),
            Err(e) => Err(CliError::Input(format!("invalid config field `{field}`: {e}"))),
        };
        nested("thresholds", self.thresholds.validate())?;
        nested("intrinsics", self.intrinsics.validate())?;
        if self.gauss_newton.max_iter == 0 {
            return bad("gauss_newton.max_iter", "must be >= 1".into());
        }
        if !(self.gauss_newton.tol >= 0.0 && self.gauss_newton.tol.is_finite()) {
            return bad("gauss_newton.tol", "must be finite and >= 0".into());
        }
        if let TargetSpec::Builtin(name) = &self.target {
            if name != "box" {
                return bad("target", format!("unknown builtin `{name}` (expected `box`)"));
            }
        }
        for (i, s) in self.scenarios().iter().enumerate() {
            nested(&format!("scenario {i}"), s.validate())?;
        }
        Ok(())
    }

    /// The scenario grid: depth-major, off-axis minor.
    pub fn scenarios(&self) -> Vec<Scenario> {
        self.depths
            .iter()
            .flat_map(|&depth| {
                self.off_axes.iter().map(move |&off_axis| Scenario {
                    depth,
                    off_axis,
                    orientation_bound_deg: self.orientation_bound_deg,
                    pixel_sigma: self.pixel_sigma,
                    handeye_perturb: self.handeye_perturb,
                    actuation_noise: self.actuation_noise,
                    success: self.success,
                    distance_source: self.distance_source,
                })
            })
            .collect()
    }

    pub fn load_target(&self) -> CliResult<TargetModel> {
        match &self.target {
            TargetSpec::Builtin(name) if name == "box" => Ok(TargetModel::default_box()),
            TargetSpec::Builtin(name) => Err(CliError::Input(format!("unknown builtin target `{name}`"))),
            TargetSpec::File(p) => TargetModel::load(p)
                .map_err(|e| CliError::Input(format!("invalid config field `target`: {}: {e}", p.display()))),
        }
    }

    pub fn estimator(&self) -> Box<dyn PoseEstimator> {
        match self.estimator {
            EstimatorKind::EpnpGn => Box::new(EpnpGaussNewton {
                config: self.gauss_newton,
            }),
            EstimatorKind::Epnp => Box::new(EpnpOnly),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordHeader {
    pub format: String,
    pub version: String,
    pub base_seed: u64,
    pub modes: Vec<GatingMode>,
    pub seed_mixing: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header(RecordHeader),
    Trial(TrialOutcome),
}

/// A parsed record file.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordSet {
    pub header: RecordHeader,
    pub trials: Vec<TrialOutcome>,
}

impl RecordSet {
    pub fn to_ndjson(&self) -> String {
        let mut out = serde_json::to_string(&Record::Header(self.header.clone())).expect("header serializes");
        out.push('\n');
        for t in &self.trials {
            out.push_str(&serde_json::to_string(&Record::Trial(t.clone())).expect("trial serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses NDJSON records; errors carry the 1-based line number.
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        let mut header = None;
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line)
                .map_err(|e| CliError::Input(format!("{origin}:{lineno}: corrupt record: {e}")))?;
            match (rec, &header) {
                (Record::Header(h), None) => header = Some(h),
                (Record::Header(_), Some(_)) => {
                    return Err(CliError::Input(format!("{origin}:{lineno}: unexpected second header")))
                }
                (Record::Trial(_), None) => {
                    return Err(CliError::Input(format!(
                        "{origin}:{lineno}: trial record before header"
                    )))
                }
                (Record::Trial(t), Some(_)) => trials.push(t),
            }
        }
        let header = header.ok_or_else(|| CliError::Input(format!("{origin}: no header record")))?;
        if header.format != RECORD_FORMAT {
            return Err(CliError::Input(format!(
                "{origin}:1: unknown record format `{}`",
                header.format
            )));
        }
        Ok(Self { header, trials })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read records {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Runs the configured grid in every requested mode.
pub fn run_config(cfg: &RunConfig, modes: &[GatingMode]) -> CliResult<RecordSet> {
    let target = cfg.load_target()?;
    let estimator = cfg.estimator();
    let ctx = TrialContext {
        estimator: estimator.as_ref(),
        thresholds: cfg.thresholds,
        target: &target,
        intrinsics: cfg.intrinsics,
        rig: cfg.rig,
    };
    let trials = sim::run_sweep(&cfg.scenarios(), cfg.repeats, cfg.base_seed, modes, &ctx)?;
    let mut modes = modes.to_vec();
    modes.sort();
    modes.dedup();
    Ok(RecordSet {
        header: RecordHeader {
            format: RECORD_FORMAT.into(),
            version: VERSION.into(),
            base_seed: cfg.base_seed,
            modes,
            seed_mixing: SEED_MIXING.into(),
            config: cfg.clone(),
        },
        trials,
    })
}

/// Parses a `--modes` list such as `on,off`.
pub fn parse_modes(s: &str) -> CliResult<Vec<GatingMode>> {
    let modes = s
        .split(',')
        .filter(|m| !m.trim().is_empty())
        .map(|m| m.parse::<GatingMode>())
        .collect::<crate::Result<Vec<_>>>()?;
    if modes.is_empty() {
        return Err(CliError::Input("--modes: at least one of on,off is required".into()));
    }
    Ok(modes)
}

/// `sweep`: runs the grid and writes the record file. Returns the trial count.
pub fn cmd_sweep(
    config_path: &Path,
    out_path: &Path,
    modes: &[GatingMode],
    seed_override: Option<u64>,
) -> CliResult<usize> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = seed_override {
        cfg.base_seed = seed;
    }
    let records = run_config(&cfg, modes)?;
    std::fs::write(out_path, records.to_ndjson())
        .map_err(|e| CliError::Environment(format!("cannot write {}: {e}", out_path.display())))?;
    Ok(records.trials.len())
}

/// `report`: summary tables (md/json), per-trial rows (csv), or grouped
/// summary rows (csv with a group key).
pub fn cmd_report(records_path: &Path, format: Format, group: Option<GroupKey>, out: &mut dyn Write) -> CliResult<()> {
    let records = RecordSet::load(records_path)?;
    let text = render_records(&records.trials, format, group)?;
    emit(out, &text)
}

pub fn render_records(trials: &[TrialOutcome], format: Format, group: Option<GroupKey>) -> CliResult<String> {
    if trials.is_empty() {
        return Err(CliError::Input("record file contains no trials".into()));
    }
    if format == Format::Csv && group.is_none() {
        return Ok(metrics::render_trials_csv(trials));
    }
    let report = Report::build(trials)?;
    let sections = group.map_or(Sections::All, Sections::Only);
    Ok(metrics::render(&report, format, sections))
}

fn fmt_pose(p: &Pose) -> String {
    let [w, x, y, z] = p.rotation.wxyz();
    let t = p.translation;
    format!(
        "q(w,x,y,z) = [{w:.6}, {x:.6}, {y:.6}, {z:.6}]  t = [{:.4}, {:.4}, {:.4}] mm",
        t.x, t.y, t.z
    )
}

fn fmt_decision(d: &GatingDecision) -> String {
    match d {
        GatingDecision::ExecuteFull => "ExecuteFull".into(),
        GatingDecision::Rejected => "Rejected (hold previous target)".into(),
        GatingDecision::Scaled { alpha } => format!("Scaled (alpha = {alpha})"),
    }
}

/// `trial`: replays one (scenario, repeat) cell and returns a labeled trace.
pub fn trial_trace(
    cfg: &RunConfig,
    scenario_index: usize,
    repeat_index: usize,
    mode: GatingMode,
    verbose: bool,
) -> CliResult<String> {
    let grid = cfg.scenarios();
    let scenario = grid
        .get(scenario_index)
        .ok_or_else(|| CliError::Input(format!("--scenario {scenario_index} out of range (0..{})", grid.len())))?;
    if repeat_index >= cfg.repeats {
        return Err(CliError::Input(format!(
            "--repeat {repeat_index} out of range (0..{})",
            cfg.repeats
        )));
    }
    let target = cfg.load_target()?;
    let estimator = cfg.estimator();
    let ctx = TrialContext {
        estimator: estimator.as_ref(),
        thresholds: cfg.thresholds,
        target: &target,
        intrinsics: cfg.intrinsics,
        rig: cfg.rig,
    };
    let seed = sim::trial_seed(cfg.base_seed, scenario_index, repeat_index);
    let ids = TrialIds {
        scenario_id: scenario_index,
        repeat_id: repeat_index,
        mode,
        seed,
    };
    let mut rng = sim::trial_rng(seed);
    let traced = sim::run_trial_traced(scenario, &ctx, ids, &mut rng)?;

    let mut o = String::new();
    let _ = writeln!(
        o,
        "trial scenario={scenario_index} repeat={repeat_index} mode={} seed={seed}",
        mode.as_str()
    );
    let _ = writeln!(
        o,
        "scene: depth={} mm off_axis={} mm sigma={} px estimator={}",
        scenario.depth,
        scenario.off_axis,
        scenario.pixel_sigma,
        estimator.name()
    );
    let t = match traced {
        Ok(t) => t,
        Err(failed) => {
            let _ = writeln!(
                o,
                "[1] estimate target pose: FAILED ({})",
                failed.failure.unwrap_or_default()
            );
            let _ = writeln!(o, "result: failure, success=false");
            return Ok(o);
        }
    };
    let th = &cfg.thresholds;
    let r = &t.report;
    let _ = writeln!(o, "true cam_from_target: {}", fmt_pose(&t.chain.cam_from_target()));
    let [roll, pitch, yaw] = t.chain.target_euler_deg;
    let _ = writeln!(
        o,
        "target orientation (roll, pitch, yaw) = ({roll:.3}, {pitch:.3}, {yaw:.3}) deg"
    );
    let _ = writeln!(o, "observations: {} points", t.observations.len());
    if verbose {
        for (i, (p, px)) in target.points().iter().zip(&t.observations.pixels.pixels).enumerate() {
            let _ = writeln!(
                o,
                "  #{i}: X = [{:.3}, {:.3}, {:.3}] -> u = [{:.4}, {:.4}]",
                p.x, p.y, p.z, px.x, px.y
            );
        }
    }

    let _ = writeln!(o, "[1] estimate target pose");
    let _ = writeln!(o, "    cam_from_target: {}", fmt_pose(&t.estimate.cam_from_target));
    let _ = writeln!(o, "    iterations recorded: {}", t.estimate.trace.len());
    if verbose {
        let rs: Vec<String> = t
            .estimate
            .trace
            .residuals()
            .iter()
            .map(|v| format!("{v:.6e}"))
            .collect();
        let _ = writeln!(o, "    residual trace (px): [{}]", rs.join(", "));
    }

    let _ = writeln!(o, "[2] compute reliability cues");
    let _ = writeln!(o, "    e_rep = {:.6} px", r.e_rep);
    let _ = writeln!(o, "    r_GN  = {:.6} px", r.r_gn);
    match r.delta_r {
        Some(d) => {
            let _ = writeln!(o, "    dr    = {d:.6}");
        }
        None => {
            let _ = writeln!(o, "    dr    = n/a (single-entry trace)");
        }
    }
    let _ = writeln!(
        o,
        "    gamma = {:.6} (d = {:.3} mm, s = {:.3} mm)",
        r.gamma, t.distance_mm, t.effective_scale_mm
    );

    let _ = writeln!(o, "[3] evaluate reliability");
    let _ = writeln!(o, "    rep_trigger  = {} (tau_rep = {})", r.rep_trigger, th.tau_rep);
    let _ = writeln!(
        o,
        "    gn_trigger   = {} (tau_r = {}, tau_dr = {}, tau_r_floor = {})",
        r.gn_trigger, th.tau_r, th.tau_dr, th.tau_r_floor
    );
    let _ = writeln!(
        o,
        "    prox_trigger = {} (tau_gamma = {})",
        r.prox_trigger, th.tau_gamma
    );
    let _ = writeln!(o, "    reliable     = {}", r.reliable);

    let decision = t.outcome.decision.unwrap_or(GatingDecision::ExecuteFull);
    let _ = writeln!(o, "[4] desired end-effector pose");
    let _ = writeln!(o, "    base_from_ee*: {}", fmt_pose(&t.desired_ee));
    let _ = writeln!(o, "[5] gating action");
    if mode == GatingMode::Off {
        let _ = writeln!(o, "    gate disabled; decision = {}", fmt_decision(&decision));
    } else if r.reliable {
        let _ = writeln!(o, "    reliable; decision = {}", fmt_decision(&decision));
    } else {
        let _ = writeln!(o, "    unreliable; decision = {}", fmt_decision(&decision));
    }
    let _ = writeln!(o, "    commanded: {}", fmt_pose(&t.commanded_ee));

    let _ = writeln!(o, "[6] execute final command");
    let _ = writeln!(o, "    executed: {}", fmt_pose(&t.executed_ee));
    let _ = writeln!(o, "    oracle:   {}", fmt_pose(&t.oracle_ee));
    let _ = writeln!(
        o,
        "    pos_err = {:.6} mm, ori_err = {:.6} deg, success = {}",
        t.outcome.pos_err_mm, t.outcome.ori_err_deg, t.outcome.success
    );
    Ok(o)
}

pub fn cmd_trial(
    config_path: &Path,
    scenario_index: usize,
    repeat_index: usize,
    mode: GatingMode,
    verbose: bool,
    out: &mut dyn Write,
) -> CliResult<()> {
    let cfg = RunConfig::load(config_path)?;
    let text = trial_trace(&cfg, scenario_index, repeat_index, mode, verbose)?;
    emit(out, &text)
}

/// Pairing key for [`compare`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairKey {
    pub scenario_id: usize,
    pub repeat_id: usize,
    pub seed: u64,
    /// Present only when either side holds more than one mode.
    pub mode: Option<GatingMode>,
}

impl std::fmt::Display for PairKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(scenario {}, repeat {}, seed {}",
            self.scenario_id, self.repeat_id, self.seed
        )?;
        if let Some(m) = self.mode {
            write!(f, ", mode {}", m.as_str())?;
        }
        write!(f, ")")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDelta {
    pub key: PairKey,
    /// `b − a` for each error.
    pub pos_delta_mm: f64,
    pub ori_delta_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub pairs: Vec<PairDelta>,
    pub a: metrics::MetricsSummary,
    pub b: metrics::MetricsSummary,
}

impl Comparison {
    pub fn success_rate_delta(&self) -> f64 {
        self.b.success_rate - self.a.success_rate
    }

    pub fn p95_delta(&self) -> f64 {
        self.b.pos_p95 - self.a.pos_p95
    }

    pub fn max_delta(&self) -> f64 {
        self.b.pos_max - self.a.pos_max
    }
}

fn keyed(trials: &[TrialOutcome], with_mode: bool) -> CliResult<BTreeMap<PairKey, &TrialOutcome>> {
    let mut map = BTreeMap::new();
    for t in trials {
        let key = PairKey {
            scenario_id: t.scenario_id,
            repeat_id: t.repeat_id,
            seed: t.seed,
            mode: with_mode.then_some(t.mode),
        };
        if map.insert(key, t).is_some() {
            return Err(CliError::Input(format!("duplicate record for key {key}")));
        }
    }
    Ok(map)
}

fn distinct_modes(trials: &[TrialOutcome]) -> usize {
    trials.iter().map(|t| t.mode).collect::<BTreeSet<_>>().len()
}

/// Pairs two record sets by (scenario, repeat, seed), adding mode to the key
/// when either side holds more than one mode.
pub fn compare(a: &[TrialOutcome], b: &[TrialOutcome]) -> CliResult<Comparison> {
    if a.is_empty() || b.is_empty() {
        return Err(CliError::Input("record file contains no trials".into()));
    }
    let with_mode = distinct_modes(a) > 1 || distinct_modes(b) > 1;
    let ka = keyed(a, with_mode)?;
    let kb = keyed(b, with_mode)?;
    let only_a: Vec<String> = ka
        .keys()
        .filter(|k| !kb.contains_key(k))
        .map(|k| k.to_string())
        .collect();
    let only_b: Vec<String> = kb
        .keys()
        .filter(|k| !ka.contains_key(k))
        .map(|k| k.to_string())
        .collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        let mut msg = String::from("record keys differ");
        let list = |v: &[String]| {
            let shown: Vec<&str> = v.iter().take(20).map(String::as_str).collect();
            let more = if v.len() > 20 {
                format!(" ... and {} more", v.len() - 20)
            } else {
                String::new()
            };
            format!("{}{more}", shown.join(", "))
        };
        if !only_a.is_empty() {
            let _ = write!(msg, "\n  missing from B ({}): {}", only_a.len(), list(&only_a));
        }
        if !only_b.is_empty() {
            let _ = write!(msg, "\n  missing from A ({}): {}", only_b.len(), list(&only_b));
        }
        return Err(CliError::Input(msg));
    }
    let pairs = ka
        .iter()
        .map(|(k, ta)| {
            let tb = kb[k];
            PairDelta {
                key: *k,
                pos_delta_mm: tb.pos_err_mm - ta.pos_err_mm,
                ori_delta_deg: tb.ori_err_deg - ta.ori_err_deg,
            }
        })
        .collect();
    Ok(Comparison {
        pairs,
        a: metrics::summarize(a)?,
        b: metrics::summarize(b)?,
    })
}

fn delta_nan_safe(x: f64) -> f64 {
    // inf - inf for two failed trials is no change
    if x.is_nan() {
        0.0
    } else {
        x
    }
}

fn sign_word(x: f64) -> &'static str {
    if x < 0.0 {
        "B lower"
    } else if x > 0.0 {
        "B higher"
    } else {
        "equal"
    }
}

pub fn render_comparison(c: &Comparison) -> String {
    let mut o = String::new();
    let _ = writeln!(o, "key,pos_delta_mm,ori_delta_deg");
    for p in &c.pairs {
        let mode = p.key.mode.map(|m| format!(":{}", m.as_str())).unwrap_or_default();
        let _ = writeln!(
            o,
            "{}:{}:{}{mode},{:.6},{:.6}",
            p.key.scenario_id,
            p.key.repeat_id,
            p.key.seed,
            delta_nan_safe(p.pos_delta_mm),
            delta_nan_safe(p.ori_delta_deg)
        );
    }
    let _ = writeln!(o);
    let _ = writeln!(o, "| Metric | A | B | B - A | Sign |");
    let _ = writeln!(o, "|:--|--:|--:|--:|:--|");
    let rows = [
        ("Success rate (%)", c.a.success_rate, c.b.success_rate, 1usize),
        ("P95 position error (mm)", c.a.pos_p95, c.b.pos_p95, 2),
        ("Max position error (mm)", c.a.pos_max, c.b.pos_max, 2),
    ];
    for (name, a, b, dp) in rows {
        let d = delta_nan_safe(b - a);
        // sign from the rounded delta so "equal" matches the printed zero
        let shown = format!("{d:.dp$}");
        let rounded: f64 = shown.parse().unwrap_or(d);
        let _ = writeln!(
            o,
            "| {name} | {a:.dp$} | {b:.dp$} | {} | {} |",
            if rounded == 0.0 { format!("{:.dp$}", 0.0) } else { shown },
            sign_word(rounded)
        );
    }
    o
}

pub fn cmd_compare(a_path: &Path, b_path: &Path, out: &mut dyn Write) -> CliResult<()> {
    let a = RecordSet::load(a_path)?;
    let b = RecordSet::load(b_path)?;
    let c = compare(&a.trials, &b.trials)?;
    emit(out, &render_comparison(&c))
}

/// `defaults`: the default config as pretty JSON.
pub fn defaults_json() -> String {
    let mut s = serde_json::to_string_pretty(&RunConfig::default()).expect("config serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            depths: vec![300.0, 700.0],
            off_axes: vec![0.0, 80.0],
            repeats: 3,
            base_seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_parse_back() {
        let cfg = RunConfig::parse(&defaults_json()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.scenarios().len(), 15);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::parse(r#"{"repeats": 2, "depths": [500]}"#).unwrap();
        assert_eq!(cfg.repeats, 2);
        assert_eq!(cfg.off_axes, vec![0.0, 50.0, 100.0]);
    }

    #[test]
    fn validation_names_field() {
        let e = RunConfig::parse(r#"{"repeats": 0}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("repeats"), "{e}");
        let e = RunConfig::parse(r#"{"depths": []}"#).unwrap_err();
        assert!(e.to_string().contains("depths"), "{e}");
        let e = RunConfig::parse(r#"{"thresholds": {"tau_rep": 2, "tau_r": 1.5, "tau_dr": 0.01, "tau_r_floor": 1.5, "tau_gamma": 6, "alpha": 0, "strategy": "scale_step"}}"#).unwrap_err();
        assert!(e.to_string().contains("alpha"), "{e}");
        let e = RunConfig::parse(r#"{"bogus": 1}"#).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = RunConfig::parse(r#"{"target": {"builtin": "sphere"}}"#).unwrap_err();
        assert!(e.to_string().contains("target"), "{e}");
    }

    #[test]
    fn grid_order_is_depth_major() {
        let s = tiny().scenarios();
        let cells: Vec<_> = s.iter().map(|s| (s.depth, s.off_axis)).collect();
        assert_eq!(cells, [(300.0, 0.0), (300.0, 80.0), (700.0, 0.0), (700.0, 80.0)]);
    }

    #[test]
    fn records_roundtrip() {
        let rs = run_config(&tiny(), &[GatingMode::On, GatingMode::Off]).unwrap();
        assert_eq!(rs.trials.len(), 2 * 2 * 3 * 2);
        assert_eq!(rs.header.modes, [GatingMode::Off, GatingMode::On]);
        let text = rs.to_ndjson();
        let back = RecordSet::parse(&text, "mem").unwrap();
        assert_eq!(back, rs);
        assert_eq!(back.to_ndjson(), text);
    }

    #[test]
    fn corrupt_records_report_line() {
        let rs = run_config(&tiny(), &[GatingMode::Off]).unwrap();
        let mut lines: Vec<String> = rs.to_ndjson().lines().map(String::from).collect();
        lines[3] = lines[3][..lines[3].len() / 2].to_string();
        let e = RecordSet::parse(&lines.join("\n"), "r.ndjson").unwrap_err();
        assert!(e.to_string().starts_with("r.ndjson:4:"), "{e}");
        let e = RecordSet::parse("", "r.ndjson").unwrap_err();
        assert!(e.to_string().contains("no header"), "{e}");
        let e = RecordSet::parse(&lines[1..].join("\n"), "r.ndjson").unwrap_err();
        assert!(e.to_string().contains(":1:"), "{e}");
    }

    #[test]
    fn compare_self_is_zero() {
        let rs = run_config(&tiny(), &[GatingMode::Off, GatingMode::On]).unwrap();
        let c = compare(&rs.trials, &rs.trials).unwrap();
        assert_eq!(c.pairs.len(), rs.trials.len());
        assert!(c.pairs.iter().all(|p| p.pos_delta_mm == 0.0 && p.ori_delta_deg == 0.0));
        assert_eq!((c.success_rate_delta(), c.p95_delta(), c.max_delta()), (0.0, 0.0, 0.0));
        assert!(c.pairs.iter().all(|p| p.key.mode.is_some()));
    }

    #[test]
    fn compare_single_mode_files_pairs_by_seed() {
        let off = run_config(&tiny(), &[GatingMode::Off]).unwrap();
        let on = run_config(&tiny(), &[GatingMode::On]).unwrap();
        let c = compare(&off.trials, &on.trials).unwrap();
        assert_eq!(c.pairs.len(), off.trials.len());
        assert!(c.pairs.iter().all(|p| p.key.mode.is_none()));
    }

    #[test]
    fn compare_disjoint_lists_keys() {
        let a = run_config(&tiny(), &[GatingMode::Off]).unwrap();
        let b = run_config(
            &RunConfig {
                base_seed: 12,
                ..tiny()
            },
            &[GatingMode::Off],
        )
        .unwrap();
        let e = compare(&a.trials, &b.trials).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("missing from B (12)"), "{e}");
        assert!(e.to_string().contains("missing from A (12)"), "{e}");
    }

    #[test]
    fn trial_indices_checked() {
        let cfg = tiny();
        assert!(trial_trace(&cfg, 4, 0, GatingMode::On, false).is_err());
        assert!(trial_trace(&cfg, 0, 3, GatingMode::On, false).is_err());
        assert!(trial_trace(&cfg, 3, 2, GatingMode::On, true).is_ok());
    }

    #[test]
    fn modes_list_parses() {
        assert_eq!(parse_modes("on,off").unwrap(), [GatingMode::On, GatingMode::Off]);
        assert!(parse_modes("").is_err());
        assert!(parse_modes("on,maybe").is_err());
    }
}
