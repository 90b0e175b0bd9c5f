//! Perspective-n-point estimation.
//!
//! The default estimator runs EPnP for a closed-form initial pose, then
//! refines it with Gauss–Newton on the reprojection residual. Each accepted
//! refinement iteration appends the mean per-point pixel error to a
//! [`ResidualTrace`], which the gating layer inspects.
//!
//! EPnP follows the usual four-control-point construction: the points are
//! written as barycentric combinations of control points placed on the
//! principal axes of the point cloud, the camera-frame control points are
//! recovered from the (approximate) null space of a 2N×12 linear system, the
//! null-space weights are solved from inter-control-point distances under
//! three approximations (each polished by a few Gauss–Newton steps), and the
//! candidate with the lowest reprojection error wins.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, SymmetricEigen, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::camera::{project_points, reprojection_error, Intrinsics, PixelObservations, TargetModel};
use crate::error::{Error, Result};
use crate::se3::{apply_delta, Pose, PoseDelta, Rotation};

/// Upper bound on the condition number of the control-point basis.
pub const MAX_CONTROL_CONDITION: f64 = 1e12;

/// Matched 3D target points and 2D pixels with the camera intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondences {
    pub target: TargetModel,
    pub pixels: PixelObservations,
    pub intrinsics: Intrinsics,
}

impl Correspondences {
    pub fn new(target: TargetModel, pixels: PixelObservations, intrinsics: Intrinsics) -> Result<Self> {
        if target.len() != pixels.len() {
            return Err(Error::InvalidInput(format!(
                "{} target points but {} pixels",
                target.len(),
                pixels.len()
            )));
        }
        intrinsics.validate()?;
        Ok(Self {
            target,
            pixels,
            intrinsics,
        })
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    /// Mean reprojection error of `cam_from_target` against the observations.
    pub fn reprojection_error(&self, cam_from_target: &Pose) -> Result<f64> {
        let predicted = project_points(&self.intrinsics, cam_from_target, self.target.points())?;
        reprojection_error(&self.pixels, &predicted)
    }
}

/// Per-iteration mean reprojection residuals `r_0 … r_K` (px).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ResidualTrace(Vec<f64>);

impl ResidualTrace {
    pub fn new(residuals: Vec<f64>) -> Result<Self> {
        if residuals.is_empty() {
            return Err(Error::InvalidInput("residual trace is empty".into()));
        }
        if residuals.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidInput("residuals must be finite and non-negative".into()));
        }
        Ok(Self(residuals))
    }

    pub fn single(residual: f64) -> Result<Self> {
        Self::new(vec![residual])
    }

    pub fn residuals(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `r_GN`, the last residual.
    pub fn last(&self) -> f64 {
        *self.0.last().expect("trace is non-empty")
    }

    pub fn is_non_increasing(&self) -> bool {
        self.0.windows(2).all(|w| w[1] <= w[0])
    }
}

impl TryFrom<Vec<f64>> for ResidualTrace {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ResidualTrace> for Vec<f64> {
    fn from(t: ResidualTrace) -> Self {
        t.0
    }
}

/// Relative decrease over the final step: `(r_{K−1} − r_K) / r_{K−1}`.
///
/// Returns 0 when `r_{K−1}` is already 0.
pub fn residual_decrease(trace: &ResidualTrace) -> Result<f64> {
    let r = trace.residuals();
    if r.len() < 2 {
        return Err(Error::InsufficientTrace(r.len()));
    }
    let prev = r[r.len() - 2];
    let last = r[r.len() - 1];
    if prev == 0.0 {
        return Ok(0.0);
    }
    Ok((prev - last) / prev)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PnPEstimate {
    pub cam_from_target: Pose,
    pub trace: ResidualTrace,
}

/// Any camera-from-target estimator usable by the gating pipeline.
///
/// Closed-form estimators return a single-entry trace, which disables the
/// residual-decrease criterion downstream.
pub trait PoseEstimator: Send + Sync {
    fn name(&self) -> &str;

    fn estimate(&self, c: &Correspondences) -> Result<PnPEstimate>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussNewtonConfig {
    pub max_iter: usize,
    /// Stop once an iteration improves the mean residual by less than this (px).
    pub tol: f64,
}

impl Default for GaussNewtonConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-8,
        }
    }
}

/// EPnP initialization followed by Gauss–Newton refinement.
#[derive(Clone, Copy, Debug, Default)]
pub struct EpnpGaussNewton {
    pub config: GaussNewtonConfig,
}

impl PoseEstimator for EpnpGaussNewton {
    fn name(&self) -> &str {
        "epnp+gn"
    }

    fn estimate(&self, c: &Correspondences) -> Result<PnPEstimate> {
        let init = solve_epnp(c)?;
        refine_gauss_newton(&init, c, self.config.max_iter, self.config.tol)
    }
}

/// Raw EPnP with a single-entry trace.
#[derive(Clone, Copy, Debug, Default)]
pub struct EpnpOnly;

impl PoseEstimator for EpnpOnly {
    fn name(&self) -> &str {
        "epnp"
    }

    fn estimate(&self, c: &Correspondences) -> Result<PnPEstimate> {
        let pose = solve_epnp(c)?;
        let r = c.reprojection_error(&pose)?;
        Ok(PnPEstimate {
            cam_from_target: pose,
            trace: ResidualTrace::single(r)?,
        })
    }
}

pub fn solve_epnp(c: &Correspondences) -> Result<Pose> {
    solve_epnp_points(c.target.points(), &c.pixels.pixels, &c.intrinsics)
}

/// EPnP on raw slices; see [`solve_epnp`].
pub fn solve_epnp_points(points: &[Vector3<f64>], pixels: &[Vector2<f64>], k: &Intrinsics) -> Result<Pose> {
    let n = points.len();
    if n < 4 {
        return Err(Error::InsufficientPoints { required: 4, got: n });
    }
    if pixels.len() != n {
        return Err(Error::InvalidInput(format!("{n} points but {} pixels", pixels.len())));
    }

    let ctrl = control_points(points);
    let alphas = barycentric(points, &ctrl)?;

    let normalized: Vec<Vector2<f64>> = pixels
        .iter()
        .map(|p| Vector2::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy))
        .collect();

    let null = null_space(&alphas, &normalized);
    let l = distance_system(&null);
    let rho = control_distances(&ctrl);

    let mut best: Option<(f64, Pose)> = None;
    for betas in [
        betas_approx_1(&l, &rho),
        betas_approx_2(&l, &rho),
        betas_approx_3(&l, &rho),
    ] {
        let betas = refine_betas(&l, &rho, betas);
        let Some(pose) = pose_from_betas(&null, &betas, &alphas, points) else {
            continue;
        };
        let err = match project_points(k, &pose, points) {
            Ok(pred) => pred.pixels.iter().zip(pixels).map(|(a, b)| (a - b).norm()).sum::<f64>() / n as f64,
            Err(_) => f64::INFINITY,
        };
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::DegenerateConfiguration("no EPnP candidate produced a valid pose".into()))
}

fn control_points(points: &[Vector3<f64>]) -> [Vector3<f64>; 4] {
    let n = points.len() as f64;
    let c0 = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c0;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut ctrl = [c0; 4];
    for (slot, &i) in order.iter().enumerate() {
        let scale = (eig.eigenvalues[i].max(0.0) / n).sqrt();
        ctrl[slot + 1] = c0 + eig.eigenvectors.column(i) * scale;
    }
    ctrl
}

fn barycentric(points: &[Vector3<f64>], ctrl: &[Vector3<f64>; 4]) -> Result<Vec<Vector4<f64>>> {
    let basis = Matrix3::from_columns(&[ctrl[1] - ctrl[0], ctrl[2] - ctrl[0], ctrl[3] - ctrl[0]]);
    let sv = basis.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 0.0 && smax / smin <= MAX_CONTROL_CONDITION) {
        return Err(Error::DegenerateConfiguration(format!(
            "control-point basis condition number {:.3e} exceeds {:.0e}",
            smax / smin,
            MAX_CONTROL_CONDITION
        )));
    }
    let inv = basis
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("singular control-point basis".into()))?;
    Ok(points
        .iter()
        .map(|p| {
            let a = inv * (p - ctrl[0]);
            Vector4::new(1.0 - a.x - a.y - a.z, a.x, a.y, a.z)
        })
        .collect())
}

/// The four right singular vectors of the projection system with the
/// smallest singular values, smallest first.
fn null_space(alphas: &[Vector4<f64>], normalized: &[Vector2<f64>]) -> [SVector<f64, 12>; 4] {
    let n = alphas.len();
    // pad to at least 12 rows so the SVD yields a full 12×12 V
    let rows = (2 * n).max(12);
    let mut m = DMatrix::<f64>::zeros(rows, 12);
    for (i, (a, p)) in alphas.iter().zip(normalized).enumerate() {
        for j in 0..4 {
            m[(2 * i, 3 * j)] = a[j];
            m[(2 * i, 3 * j + 2)] = -a[j] * p.x;
            m[(2 * i + 1, 3 * j + 1)] = a[j];
            m[(2 * i + 1, 3 * j + 2)] = -a[j] * p.y;
        }
    }
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let mut out = [SVector::<f64, 12>::zeros(); 4];
    for (slot, &i) in order.iter().take(4).enumerate() {
        out[slot] = v_t.row(i).transpose().fixed_rows::<12>(0).into_owned();
    }
    out
}

const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

fn control_distances(ctrl: &[Vector3<f64>; 4]) -> SVector<f64, 6> {
    SVector::<f64, 6>::from_iterator(PAIRS.iter().map(|&(a, b)| (ctrl[a] - ctrl[b]).norm_squared()))
}

/// Rows map the 10 quadratic beta monomials
/// `[b1², b1b2, b2², b1b3, b2b3, b3², b1b4, b2b4, b3b4, b4²]`
/// to squared control-point distances.
fn distance_system(null: &[SVector<f64, 12>; 4]) -> SMatrix<f64, 6, 10> {
    let mut l = SMatrix::<f64, 6, 10>::zeros();
    for (row, &(a, b)) in PAIRS.iter().enumerate() {
        let dv: Vec<Vector3<f64>> = null
            .iter()
            .map(|v| v.fixed_rows::<3>(3 * a) - v.fixed_rows::<3>(3 * b))
            .collect();
        let d = |i: usize, j: usize| dv[i].dot(&dv[j]);
        let vals = [
            d(0, 0),
            2.0 * d(0, 1),
            d(1, 1),
            2.0 * d(0, 2),
            2.0 * d(1, 2),
            d(2, 2),
            2.0 * d(0, 3),
            2.0 * d(1, 3),
            2.0 * d(2, 3),
            d(3, 3),
        ];
        for (col, v) in vals.iter().enumerate() {
            l[(row, col)] = *v;
        }
    }
    l
}

fn lstsq<const C: usize>(a: &SMatrix<f64, 6, C>, b: &SVector<f64, 6>) -> SVector<f64, C> {
    let da = DMatrix::from_column_slice(6, C, a.as_slice());
    let db = DVector::from_column_slice(b.as_slice());
    let x = da
        .svd(true, true)
        .solve(&db, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(C));
    SVector::<f64, C>::from_column_slice(x.as_slice())
}

fn select_columns<const C: usize>(l: &SMatrix<f64, 6, 10>, cols: [usize; C]) -> SMatrix<f64, 6, C> {
    let mut out = SMatrix::<f64, 6, C>::zeros();
    for (k, &c) in cols.iter().enumerate() {
        out.set_column(k, &l.column(c));
    }
    out
}

fn betas_approx_1(l: &SMatrix<f64, 6, 10>, rho: &SVector<f64, 6>) -> Vector4<f64> {
    let b = lstsq(&select_columns(l, [0, 1, 3, 6]), rho);
    if b[0].abs() < f64::MIN_POSITIVE {
        return Vector4::zeros();
    }
    let s = b[0].abs().sqrt();
    let sign = if b[0] < 0.0 { -1.0 } else { 1.0 };
    Vector4::new(s, sign * b[1] / s, sign * b[2] / s, sign * b[3] / s)
}

fn betas_approx_2(l: &SMatrix<f64, 6, 10>, rho: &SVector<f64, 6>) -> Vector4<f64> {
    let b = lstsq(&select_columns(l, [0, 1, 2]), rho);
    let (b0, b1) = leading_betas(b[0], b[1], b[2]);
    Vector4::new(b0, b1, 0.0, 0.0)
}

fn betas_approx_3(l: &SMatrix<f64, 6, 10>, rho: &SVector<f64, 6>) -> Vector4<f64> {
    let b = lstsq(&select_columns(l, [0, 1, 2, 3, 4]), rho);
    let (b0, b1) = leading_betas(b[0], b[1], b[2]);
    let b2 = if b0.abs() > f64::MIN_POSITIVE { b[3] / b0 } else { 0.0 };
    Vector4::new(b0, b1, b2, 0.0)
}

fn leading_betas(b11: f64, b12: f64, b22: f64) -> (f64, f64) {
    let (mut b0, b1) = if b11 < 0.0 {
        ((-b11).sqrt(), if b22 < 0.0 { (-b22).sqrt() } else { 0.0 })
    } else {
        (b11.sqrt(), if b22 > 0.0 { b22.sqrt() } else { 0.0 })
    };
    if b12 < 0.0 {
        b0 = -b0;
    }
    (b0, b1)
}

fn beta_monomials(b: &Vector4<f64>) -> SVector<f64, 10> {
    SVector::<f64, 10>::from([
        b[0] * b[0],
        b[0] * b[1],
        b[1] * b[1],
        b[0] * b[2],
        b[1] * b[2],
        b[2] * b[2],
        b[0] * b[3],
        b[1] * b[3],
        b[2] * b[3],
        b[3] * b[3],
    ])
}

fn refine_betas(l: &SMatrix<f64, 6, 10>, rho: &SVector<f64, 6>, mut betas: Vector4<f64>) -> Vector4<f64> {
    const ITERATIONS: usize = 5;
    for _ in 0..ITERATIONS {
        let mut jac = SMatrix::<f64, 6, 4>::zeros();
        for r in 0..6 {
            let li = |c: usize| l[(r, c)];
            jac[(r, 0)] = 2.0 * li(0) * betas[0] + li(1) * betas[1] + li(3) * betas[2] + li(6) * betas[3];
            jac[(r, 1)] = li(1) * betas[0] + 2.0 * li(2) * betas[1] + li(4) * betas[2] + li(7) * betas[3];
            jac[(r, 2)] = li(3) * betas[0] + li(4) * betas[1] + 2.0 * li(5) * betas[2] + li(8) * betas[3];
            jac[(r, 3)] = li(6) * betas[0] + li(7) * betas[1] + li(8) * betas[2] + 2.0 * li(9) * betas[3];
        }
        let resid = rho - l * beta_monomials(&betas);
        betas += lstsq(&jac, &resid);
    }
    betas
}

fn pose_from_betas(
    null: &[SVector<f64, 12>; 4],
    betas: &Vector4<f64>,
    alphas: &[Vector4<f64>],
    points: &[Vector3<f64>],
) -> Option<Pose> {
    if !betas.iter().all(|b| b.is_finite()) {
        return None;
    }
    let x: SVector<f64, 12> = (0..4).map(|i| null[i] * betas[i]).sum();
    let ctrl_cam: [Vector3<f64>; 4] = std::array::from_fn(|j| x.fixed_rows::<3>(3 * j).into_owned());
    let mut cam: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| (0..4).map(|j| ctrl_cam[j] * a[j]).sum())
        .collect();
    let mean_z = cam.iter().map(|p| p.z).sum::<f64>() / cam.len() as f64;
    if mean_z < 0.0 {
        cam.iter_mut().for_each(|p| *p = -*p);
    }
    absolute_orientation(points, &cam)
}

/// Least-squares rigid transform mapping `from` onto `to` (Kabsch).
pub(crate) fn absolute_orientation(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Option<Pose> {
    let n = from.len() as f64;
    let cf = from.iter().sum::<Vector3<f64>>() / n;
    let ct = to.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (f, t) in from.iter().zip(to) {
        h += (t - ct) * (f - cf).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    if !r.iter().all(|x| x.is_finite()) {
        return None;
    }
    let rot = Rotation::from_matrix(&r);
    Some(Pose::new(rot, ct - rot.rotate(&cf)))
}

/// Stacked residuals `projected − observed` (2N) and their Jacobian (2N×6)
/// with respect to a body-frame delta `(ω, v)` applied as
/// `pose ∘ (exp(ω), v)`, evaluated at zero delta.
pub fn reprojection_jacobian(pose: &Pose, c: &Correspondences) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = c.len();
    let k = &c.intrinsics;
    let rmat = pose.rotation.matrix();
    let mut resid = DVector::zeros(2 * n);
    let mut jac = DMatrix::zeros(2 * n, 6);
    for (i, (p, obs)) in c.target.points().iter().zip(&c.pixels.pixels).enumerate() {
        let pc = pose.transform_point(p);
        if pc.z.is_nan() || pc.z <= crate::camera::MIN_DEPTH_MM {
            return Err(Error::BehindCamera { index: i, depth: pc.z });
        }
        let proj = k.project_point(&pc);
        resid[2 * i] = proj.x - obs.x;
        resid[2 * i + 1] = proj.y - obs.y;

        let iz = 1.0 / pc.z;
        let d_proj = nalgebra::Matrix2x3::new(
            k.fx * iz,
            0.0,
            -k.fx * pc.x * iz * iz,
            0.0,
            k.fy * iz,
            -k.fy * pc.y * iz * iz,
        );
        // ∂X_c/∂ω = −R[p]×, ∂X_c/∂v = R
        let d_rot = -rmat * p.cross_matrix();
        let j_rot = d_proj * d_rot;
        let j_trans = d_proj * rmat;
        jac.fixed_view_mut::<2, 3>(2 * i, 0).copy_from(&j_rot);
        jac.fixed_view_mut::<2, 3>(2 * i, 3).copy_from(&j_trans);
    }
    Ok((resid, jac))
}

/// Gauss–Newton refinement with step halving.
///
/// The trace starts with the residual at `init` and gains one entry per
/// accepted iteration, so it never increases. Iteration stops when the
/// improvement drops below `tol`, after `max_iter` iterations, or when ten
/// halvings fail to decrease the residual. Singular normal equations end the
/// run with the last residual repeated (a zero decrease).
pub fn refine_gauss_newton(init: &Pose, c: &Correspondences, max_iter: usize, tol: f64) -> Result<PnPEstimate> {
    const MAX_HALVINGS: usize = 10;

    let mut pose = *init;
    let mut current = c.reprojection_error(&pose)?;
    let mut trace = vec![current];

    for _ in 0..max_iter {
        let (resid, jac) = reprojection_jacobian(&pose, c)?;
        let jt = jac.transpose();
        let normal = &jt * &jac;
        let rhs = -(&jt * &resid);
        let step = match normal.cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                trace.push(current);
                break;
            }
        };
        if !step.iter().all(|s| s.is_finite()) {
            trace.push(current);
            break;
        }

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let delta = PoseDelta::new(
                Vector3::new(step[0], step[1], step[2]) * scale,
                Vector3::new(step[3], step[4], step[5]) * scale,
            );
            let candidate = apply_delta(&pose, &delta);
            if let Ok(r) = c.reprojection_error(&candidate) {
                if r < current {
                    accepted = Some((candidate, r));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((candidate, r)) = accepted else {
            break;
        };
        if current - r < tol {
            break;
        }
        pose = candidate;
        current = r;
        trace.push(current);
    }

    Ok(PnPEstimate {
        cam_from_target: pose,
        trace: ResidualTrace::new(trace)?,
    })
}
