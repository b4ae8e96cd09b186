//! Camera pose from planar marker correspondences.
//!
//! The markers sit on the `z = 0` plane of the array, so the projection of
//! a marker reduces to a homography `H = K [r₁ r₂ t]`. `H` is estimated with
//! a normalised DLT, then split into a rotation and translation and projected
//! back onto the rotation group.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, GeometryError, Mat3, PinholeCamera, Pose, Vec3};

/// Ratio of largest to second-smallest DLT singular value beyond which the
/// point configuration is declared degenerate.
pub const DEGENERATE_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("need at least 4 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("world point {index} is not on the z = 0 plane (z = {z})")]
    NonPlanar { index: usize, z: f64 },
    #[error("degenerate correspondence configuration (DLT condition number {condition:.3e})")]
    Degenerate { condition: f64 },
    #[error("first column of K⁻¹H is near zero (norm {norm:.3e})")]
    ZeroColumn { norm: f64 },
    #[error("matrix is singular (smallest singular value {sigma_min:.3e})")]
    Singular { sigma_min: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A marker with known plane coordinates and its observed pixel position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub world: [f64; 3],
    pub image: [f64; 2],
}

impl Correspondence {
    pub fn new(world: [f64; 3], image: [f64; 2]) -> Self {
        Self { world, image }
    }
}

/// File form of a correspondence set: the intrinsics plus the marker pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrespondenceFile {
    pub intrinsics: CameraIntrinsics,
    pub points: Vec<Correspondence>,
}

/// A plane-to-image homography, Frobenius-normalised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Mat3);

impl Homography {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.0 * Vector3::new(x, y, 1.0);
        (p.x / p.z, p.y / p.z)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }
}

/// Similarity transform taking points to zero centroid and mean distance √2.
fn hartley_normalization(points: impl Iterator<Item = (f64, f64)> + Clone) -> Mat3 {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / n, sy / n);
    let mean_dist = points
        .map(|(x, y)| ((x - mx).powi(2) + (y - my).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Mat3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

fn check_planar(pairs: &[Correspondence]) -> Result<(), CalibrationError> {
    if pairs.len() < 4 {
        return Err(CalibrationError::TooFewPoints(pairs.len()));
    }
    for (index, p) in pairs.iter().enumerate() {
        if p.world[2] != 0.0 {
            return Err(CalibrationError::NonPlanar { index, z: p.world[2] });
        }
    }
    Ok(())
}

/// Normalised DLT. With more than four pairs the algebraic error is
/// minimised in the least-squares sense.
pub fn estimate_homography(pairs: &[Correspondence]) -> Result<Homography, CalibrationError> {
    check_planar(pairs)?;
    let tw = hartley_normalization(pairs.iter().map(|p| (p.world[0], p.world[1])));
    let ti = hartley_normalization(pairs.iter().map(|p| (p.image[0], p.image[1])));

    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, p) in pairs.iter().enumerate() {
        let w = tw * Vector3::new(p.world[0], p.world[1], 1.0);
        let m = ti * Vector3::new(p.image[0], p.image[1], 1.0);
        let (x, y) = (w.x / w.z, w.y / w.z);
        let (u, v) = (m.x / m.z, m.y / m.z);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let second_smallest = svd.singular_values[order[7]];
    let condition = largest / second_smallest;
    if !(condition < DEGENERATE_CONDITION) {
        return Err(CalibrationError::Degenerate { condition });
    }
    let h = v_t.row(order[8]);
    let hn = Mat3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let ti_inv = ti.try_inverse().expect("similarity is invertible");
    let mut full = ti_inv * hn * tw;
    full /= full.norm();
    if full[(2, 2)] < 0.0 {
        full = -full;
    }
    Ok(Homography(full))
}

/// Nearest rotation in the Frobenius sense: `U Vᵀ` from `R' = U Σ Vᵀ`,
/// with the axis of the smallest singular value flipped when needed so that
/// the determinant is `+1`.
pub fn orthogonalize(r_prime: &Mat3) -> Result<Mat3, CalibrationError> {
    let svd = r_prime.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V");
    let s = svd.singular_values;
    let (imin, smin) = s.argmin();
    if !(smin > 1e-12 * s.max()) {
        return Err(CalibrationError::Singular { sigma_min: smin });
    }
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        let col = -u.column(imin);
        u.set_column(imin, &col);
        r = u * v_t;
    }
    Ok(r)
}

/// Calibrated camera: intrinsics, recovered pose and reprojection error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraCalibration {
    pub camera: PinholeCamera,
    /// Reprojection RMSE in pixels, when correspondences were available.
    pub rmse_px: Option<f64>,
}

impl CameraCalibration {
    pub fn new(intrinsics: CameraIntrinsics, pose: Pose) -> Self {
        Self {
            camera: PinholeCamera::new(intrinsics, pose),
            rmse_px: None,
        }
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.camera.intrinsics
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.camera.pose.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.camera.pose.translation
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CalibrationJson::from(self)).expect("plain data")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let j: CalibrationJson = serde_json::from_str(text)?;
        Ok(j.into())
    }
}

/// `{K, R (row-major), t, rmse_px}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationJson {
    #[serde(rename = "K")]
    k: CameraIntrinsics,
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    rmse_px: Option<f64>,
}

impl From<&CameraCalibration> for CalibrationJson {
    fn from(c: &CameraCalibration) -> Self {
        let r = c.rotation();
        let mut rows = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rows[3 * i + j] = r[(i, j)];
            }
        }
        Self {
            k: *c.intrinsics(),
            r: rows,
            t: (*c.translation()).into(),
            rmse_px: c.rmse_px,
        }
    }
}

impl From<CalibrationJson> for CameraCalibration {
    fn from(j: CalibrationJson) -> Self {
        let r = Mat3::from_row_slice(&j.r);
        Self {
            camera: PinholeCamera::new(j.k, Pose::new(r, Vec3::from(j.t))),
            rmse_px: j.rmse_px,
        }
    }
}

/// Splits `H` into `[R | t]` given the intrinsics. The global sign of
/// `K⁻¹H` is chosen so the pattern origin lies in front of the camera.
pub fn decompose_homography(h: &Homography, k: &CameraIntrinsics) -> Result<CameraCalibration, CalibrationError> {
    decompose_with_reference(h, k, &[0.0, 0.0])
}

fn decompose_with_reference(
    h: &Homography,
    k: &CameraIntrinsics,
    centroid: &[f64; 2],
) -> Result<CameraCalibration, CalibrationError> {
    k.validate()?;
    let mut m = k.inverse_matrix() * h.0;
    let norm = m.column(0).norm();
    if !(norm >= 1e-9) {
        return Err(CalibrationError::ZeroColumn { norm });
    }
    m /= norm;
    // depth of the reference point is the third row applied to (x, y, 1)
    let depth = m[(2, 0)] * centroid[0] + m[(2, 1)] * centroid[1] + m[(2, 2)];
    if depth < 0.0 {
        m = -m;
    }
    let r1: Vec3 = m.column(0).into();
    let r2: Vec3 = m.column(1).into();
    let t: Vec3 = m.column(2).into();
    let r_prime = Mat3::from_columns(&[r1, r2, r1.cross(&r2)]);
    let rotation = orthogonalize(&r_prime)?;
    Ok(CameraCalibration::new(*k, Pose::new(rotation, t)))
}

/// Root-mean-square pixel distance between observed and reprojected markers.
pub fn reprojection_rmse(camera: &PinholeCamera, pairs: &[Correspondence]) -> Result<f64, CalibrationError> {
    let mut sum = 0.0;
    for p in pairs {
        let (u, v) = camera.project(&Vec3::from(p.world))?;
        sum += (u - p.image[0]).powi(2) + (v - p.image[1]).powi(2);
    }
    Ok((sum / pairs.len() as f64).sqrt())
}

/// Full pipeline: DLT, decomposition, Procrustes and RMSE.
pub fn calibrate(pairs: &[Correspondence], k: &CameraIntrinsics) -> Result<CameraCalibration, CalibrationError> {
    let h = estimate_homography(pairs)?;
    let n = pairs.len() as f64;
    let centroid = pairs
        .iter()
        .fold([0.0, 0.0], |a, p| [a[0] + p.world[0] / n, a[1] + p.world[1] / n]);
    let mut calib = decompose_with_reference(&h, k, &centroid)?;
    calib.rmse_px = Some(reprojection_rmse(&calib.camera, pairs)?);
    Ok(calib)
}
