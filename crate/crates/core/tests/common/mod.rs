#![allow(dead_code)]

use execgate::camera::{Intrinsics, PixelObservations, TargetModel};
use execgate::pnp::Correspondences;
use execgate::se3::{Pose, Rotation};
use execgate::sim::{self, FrameChain, Rig, Scenario, TrialOutcome};
use nalgebra::{Matrix4, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rotation<R: Rng>(rng: &mut R) -> Rotation {
    // rejection-sample the unit 4-ball, then normalize: uniform on the 3-sphere
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if n2 > 1e-3 && n2 <= 1.0 {
            return Rotation::from_wxyz(q[0], q[1], q[2], q[3]).unwrap();
        }
    }
}

pub fn random_pose<R: Rng>(rng: &mut R, t_range: f64) -> Pose {
    let t = Vector3::from_fn(|_, _| rng.random_range(-t_range..t_range));
    Pose::new(random_rotation(rng), t)
}

/// A scene drawn from the simulator's placement model at a random depth
/// and off-axis offset.
pub fn random_scene<R: Rng>(rng: &mut R, sigma: f64) -> (FrameChain, Correspondences) {
    let target = TargetModel::default_box();
    let s = Scenario {
        depth: rng.random_range(200.0..1000.0),
        off_axis: rng.random_range(0.0..100.0),
        pixel_sigma: sigma,
        ..Default::default()
    };
    let chain = sim::build_chain(&s, &Rig::default(), &target, rng).unwrap();
    let corr = sim::observe(&chain, &target, &Intrinsics::default(), sigma, rng).unwrap();
    (chain, corr)
}

/// Mean pixel distance via explicit homogeneous matrix products and scalar loops.
pub fn brute_reprojection(k: &Intrinsics, pose: &Pose, points: &[Vector3<f64>], observed: &[Vector2<f64>]) -> f64 {
    let m: Matrix4<f64> = pose.to_homogeneous();
    let mut total = 0.0;
    for (p, o) in points.iter().zip(observed) {
        let h = m * Vector4::new(p.x, p.y, p.z, 1.0);
        let mut cam = [0.0; 3];
        for (i, c) in cam.iter_mut().enumerate() {
            *c = h[i] / h[3];
        }
        let u = k.fx * cam[0] / cam[2] + k.cx;
        let v = k.fy * cam[1] / cam[2] + k.cy;
        let du = u - o.x;
        let dv = v - o.y;
        total += (du * du + dv * dv).sqrt();
    }
    total / points.len() as f64
}

pub fn random_pixels<R: Rng>(rng: &mut R, n: usize) -> PixelObservations {
    PixelObservations::new(
        (0..n)
            .map(|_| Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..640.0)))
            .collect(),
    )
}

/// Straightforward statistics used as an oracle for `metrics::summarize`.
pub struct BruteStats {
    pub success_rate: f64,
    pub pos_mean: f64,
    pub pos_std: f64,
    pub ori_mean: f64,
    pub ori_std: f64,
    pub pos_p95: f64,
    pub pos_max: f64,
}

pub fn brute_stats(outcomes: &[TrialOutcome]) -> BruteStats {
    let n = outcomes.len() as f64;
    let mut ok = 0.0;
    for o in outcomes {
        if o.success {
            ok += 1.0;
        }
    }
    let pos: Vec<f64> = outcomes
        .iter()
        .map(|o| o.pos_err_mm)
        .filter(|v| v.is_finite())
        .collect();
    let ori: Vec<f64> = outcomes
        .iter()
        .map(|o| o.ori_err_deg)
        .filter(|v| v.is_finite())
        .collect();
    let ms = |v: &[f64]| {
        let mut s = 0.0;
        for x in v {
            s += x;
        }
        let mean = s / v.len() as f64;
        let mut ss = 0.0;
        for x in v {
            ss += (x - mean) * (x - mean);
        }
        let std = if v.len() > 1 {
            (ss / (v.len() as f64 - 1.0)).sqrt()
        } else {
            0.0
        };
        (mean, std)
    };
    let (pos_mean, pos_std) = ms(&pos);
    let (ori_mean, ori_std) = ms(&ori);
    // P95 by counting: smallest value with at least 95% of samples at or below it
    let mut p95 = f64::NAN;
    let mut best = f64::INFINITY;
    for &c in &pos {
        let at_or_below = pos.iter().filter(|&&x| x <= c).count() as f64;
        if at_or_below * 100.0 >= 95.0 * pos.len() as f64 && c < best {
            best = c;
            p95 = c;
        }
    }
    let mut max = f64::NEG_INFINITY;
    for &x in &pos {
        if x > max {
            max = x;
        }
    }
    BruteStats {
        success_rate: 100.0 * ok / n,
        pos_mean,
        pos_std,
        ori_mean,
        ori_std,
        pos_p95: p95,
        pos_max: max,
    }
}

pub fn synthetic_outcome<R: Rng>(rng: &mut R, id: usize) -> TrialOutcome {
    let pos = if rng.random_bool(0.03) {
        f64::INFINITY
    } else {
        rng.random_range(0.0..20.0)
    };
    let ori = if pos.is_infinite() {
        f64::INFINITY
    } else {
        rng.random_range(0.0..8.0)
    };
    TrialOutcome {
        scenario_id: id % 7,
        repeat_id: id,
        mode: if rng.random_bool(0.5) {
            sim::GatingMode::On
        } else {
            sim::GatingMode::Off
        },
        seed: rng.random(),
        depth_mm: [200.0, 600.0, 1000.0][id % 3],
        off_axis_mm: [0.0, 50.0][id % 2],
        pos_err_mm: pos,
        ori_err_deg: ori,
        success: pos <= 5.0 && ori <= 5.0,
        decision: None,
        report: None,
        true_cam_from_target: None,
        est_cam_from_target: None,
        executed_ee: None,
        step_mm: None,
        failure: pos.is_infinite().then(|| "estimator: synthetic".to_string()),
    }
}

/// Checks `value` against the subset of JSON Schema used by the published
/// schemas: type (single or list), enum, required, properties, additionalProperties=false,
/// items, minItems, maxItems, minimum, exclusiveMinimum, maximum, oneOf, $ref.
pub fn schema_errors(schema: &Value, root: &Value, value: &Value, path: &str, errs: &mut Vec<String>) {
    if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
        let mut node = root;
        for part in r.trim_start_matches("#/").split('/') {
            node = &node[part];
        }
        return schema_errors(node, root, value, path, errs);
    }
    if let Some(options) = schema.get("oneOf").and_then(Value::as_array) {
        let matches = options
            .iter()
            .filter(|o| {
                let mut e = Vec::new();
                schema_errors(o, root, value, path, &mut e);
                e.is_empty()
            })
            .count();
        if matches != 1 {
            errs.push(format!("{path}: matches {matches} oneOf branches"));
        }
    }
    let types: Vec<&str> = match schema.get("type") {
        Some(Value::String(t)) => vec![t.as_str()],
        Some(Value::Array(ts)) => ts.iter().filter_map(Value::as_str).collect(),
        _ => Vec::new(),
    };
    if !types.is_empty() {
        let ok = types.iter().any(|t| match *t {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "number" => value.is_number(),
            "integer" => value.is_u64() || value.is_i64(),
            "string" => value.is_string(),
            "boolean" => value.is_boolean(),
            "null" => value.is_null(),
            _ => false,
        });
        if !ok {
            errs.push(format!("{path}: expected {types:?}"));
            return;
        }
    }
    if let Some(e) = schema.get("enum").and_then(Value::as_array) {
        if !e.contains(value) {
            errs.push(format!("{path}: {value} not in enum"));
        }
    }
    if let Some(n) = value.as_f64() {
        if let Some(m) = schema.get("minimum").and_then(Value::as_f64) {
            if n < m {
                errs.push(format!("{path}: {n} < {m}"));
            }
        }
        if let Some(m) = schema.get("exclusiveMinimum").and_then(Value::as_f64) {
            if n <= m {
                errs.push(format!("{path}: {n} <= {m}"));
            }
        }
        if let Some(m) = schema.get("maximum").and_then(Value::as_f64) {
            if n > m {
                errs.push(format!("{path}: {n} > {m}"));
            }
        }
    }
    if let Some(obj) = value.as_object() {
        let props = schema.get("properties").and_then(Value::as_object);
        if let Some(req) = schema.get("required").and_then(Value::as_array) {
            for r in req.iter().filter_map(Value::as_str) {
                if !obj.contains_key(r) {
                    errs.push(format!("{path}: missing {r}"));
                }
            }
        }
        for (k, v) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(s) => schema_errors(s, root, v, &format!("{path}.{k}"), errs),
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    errs.push(format!("{path}: unexpected property {k}"))
                }
                None => {}
            }
        }
    }
    if let Some(arr) = value.as_array() {
        if let Some(m) = schema.get("minItems").and_then(Value::as_u64) {
            if (arr.len() as u64) < m {
                errs.push(format!("{path}: fewer than {m} items"));
            }
        }
        if let Some(m) = schema.get("maxItems").and_then(Value::as_u64) {
            if (arr.len() as u64) > m {
                errs.push(format!("{path}: more than {m} items"));
            }
        }
        if let Some(items) = schema.get("items") {
            for (i, v) in arr.iter().enumerate() {
                schema_errors(items, root, v, &format!("{path}[{i}]"), errs);
            }
        }
    }
}

pub fn validate_schema(schema: &Value, value: &Value) -> Vec<String> {
    let mut errs = Vec::new();
    schema_errors(schema, schema, value, "$", &mut errs);
    errs
}
