//! Pinhole camera, target point sets, and the mean reprojection score.

use std::path::Path;

use nalgebra::{Matrix3xX, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Error, Result};
use crate::se3::Pose;

/// Minimum camera-frame depth (mm) accepted by [`project`].
pub const MIN_DEPTH_MM: f64 = 1e-6;

/// Distortion-free pinhole intrinsics, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    /// 640×640 nominal sensor with an 800 px focal length.
    fn default() -> Self {
        Self {
            fx: 800.0,
            fy: 800.0,
            cx: 320.0,
            cy: 320.0,
        }
    }
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fx.is_finite()) {
            return Err(invalid_param("fx", "must be positive and finite"));
        }
        if !(self.fy > 0.0 && self.fy.is_finite()) {
            return Err(invalid_param("fy", "must be positive and finite"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(invalid_param("cx/cy", "must be finite"));
        }
        Ok(())
    }

    /// Projects a camera-frame point, without a depth check.
    #[inline]
    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Known 3D feature points of the target, in the target frame (mm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 3]>", into = "Vec<[f64; 3]>")]
pub struct TargetModel {
    points: Vec<Vector3<f64>>,
}

impl TargetModel {
    /// Validates N ≥ 4 and non-collinearity.
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::InsufficientPoints {
                required: 4,
                got: points.len(),
            });
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput("target point is not finite".into()));
        }
        let m = Self { points };
        let sv = m.centered_singular_values();
        if sv[0] <= 0.0 || sv[1] <= 1e-9 * sv[0] {
            return Err(Error::DegenerateConfiguration("target points are collinear".into()));
        }
        Ok(m)
    }

    /// Vertices of an axis-aligned box centred on the origin.
    pub fn cuboid(size_x: f64, size_y: f64, size_z: f64) -> Result<Self> {
        let (hx, hy, hz) = (size_x / 2.0, size_y / 2.0, size_z / 2.0);
        let mut pts = Vec::with_capacity(8);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    pts.push(Vector3::new(sx * hx, sy * hy, sz * hz));
                }
            }
        }
        Self::new(pts)
    }

    /// The default 100 × 100 × 40 mm box.
    pub fn default_box() -> Self {
        Self::cuboid(100.0, 100.0, 40.0).expect("default box is valid")
    }

    /// Parses one `x y z` point per line (mm); `#` starts a comment.
    /// Commas are accepted as separators.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pts = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: std::result::Result<Vec<f64>, _> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(str::parse::<f64>)
                .collect();
            match vals {
                Ok(v) if v.len() == 3 => pts.push(Vector3::new(v[0], v[1], v[2])),
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "line {}: expected three numeric coordinates, got `{}`",
                        lineno + 1,
                        raw.trim()
                    )))
                }
            }
        }
        Self::new(pts)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read target file {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }

    fn centered_singular_values(&self) -> Vector3<f64> {
        let c = self.centroid();
        let m = Matrix3xX::from_columns(&self.points.iter().map(|p| p - c).collect::<Vec<_>>());
        let mut sv = (m.clone() * m.transpose()).symmetric_eigenvalues();
        sv.iter_mut().for_each(|v| *v = v.max(0.0).sqrt());
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        Vector3::new(s[0], s[1], s[2])
    }
}

impl TryFrom<Vec<[f64; 3]>> for TargetModel {
    type Error = Error;

    fn try_from(v: Vec<[f64; 3]>) -> Result<Self> {
        Self::new(v.into_iter().map(Vector3::from).collect())
    }
}

impl From<TargetModel> for Vec<[f64; 3]> {
    fn from(m: TargetModel) -> Self {
        m.points.iter().map(|p| [p.x, p.y, p.z]).collect()
    }
}

/// Observed (or predicted) pixel locations, index-matched to a [`TargetModel`].
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PixelObservations {
    pub pixels: Vec<Vector2<f64>>,
}

impl PixelObservations {
    pub fn new(pixels: Vec<Vector2<f64>>) -> Self {
        Self { pixels }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Projects every target point through `cam_from_target` and `k`.
pub fn project(k: &Intrinsics, cam_from_target: &Pose, target: &TargetModel) -> Result<PixelObservations> {
    project_points(k, cam_from_target, target.points())
}

pub(crate) fn project_points(
    k: &Intrinsics,
    cam_from_target: &Pose,
    points: &[Vector3<f64>],
) -> Result<PixelObservations> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let pc = cam_from_target.transform_point(p);
            if pc.z.is_nan() || pc.z <= MIN_DEPTH_MM {
                return Err(Error::BehindCamera { index, depth: pc.z });
            }
            Ok(k.project_point(&pc))
        })
        .collect::<Result<Vec<_>>>()
        .map(PixelObservations::new)
}

/// Mean Euclidean pixel distance between index-matched observations.
pub fn reprojection_error(observed: &PixelObservations, reprojected: &PixelObservations) -> Result<f64> {
    if observed.len() != reprojected.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} observed vs {} reprojected",
            observed.len(),
            reprojected.len()
        )));
    }
    if observed.is_empty() {
        return Err(Error::InvalidInput("no observations".into()));
    }
    let sum: f64 = observed
        .pixels
        .iter()
        .zip(&reprojected.pixels)
        .map(|(p, q)| (p - q).norm())
        .sum();
    Ok(sum / observed.len() as f64)
}

/// Adds i.i.d. zero-mean Gaussian noise (std `sigma` px) to each coordinate.
pub fn add_pixel_noise<R: Rng + ?Sized>(obs: &PixelObservations, sigma: f64, rng: &mut R) -> Result<PixelObservations> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid_param("sigma", format!("{sigma} must be finite and >= 0")));
    }
    if sigma == 0.0 {
        return Ok(obs.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid_param("sigma", e.to_string()))?;
    Ok(PixelObservations::new(
        obs.pixels
            .iter()
            .map(|p| {
                let dx = normal.sample(rng);
                let dy = normal.sample(rng);
                Vector2::new(p.x + dx, p.y + dy)
            })
            .collect(),
    ))
}
