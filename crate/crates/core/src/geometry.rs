//! Vectors, rotations, rays, sphere mirrors and the pinhole camera.
//!
//! Everything here works in double precision and millimetres. Poses are
//! world-to-camera: a world point `X` maps to `R X + t` in the camera frame.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance used to validate unit-length inputs.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Discriminants at or below this value are treated as misses (tangent rays).
pub const TANGENT_DISCRIMINANT: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("{what} is not unit length (norm {norm})")]
    NotUnit { what: &'static str, norm: f64 },
    #[error("point is at or behind the camera plane (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid mirror: {0}")]
    InvalidMirror(String),
}

fn check_unit(what: &'static str, v: &Vec3) -> Result<(), GeometryError> {
    let norm = v.norm();
    if (norm - 1.0).abs() > UNIT_TOLERANCE || !norm.is_finite() {
        return Err(GeometryError::NotUnit { what, norm });
    }
    Ok(())
}

/// Pinhole intrinsics with zero skew. Pixel coordinates follow the convention
/// that pixel `(i, j)` is centred on `(u, v) = (i, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the image centre.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx={} outside (0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy={} outside (0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        Mat3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `K⁻¹ [u v 1]ᵀ`, the un-normalised camera-frame direction of a pixel.
    pub fn unproject(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// World-to-camera rigid transform `[R | t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    /// Camera looking from `eye` towards `target`. The camera y axis points
    /// roughly along `-up` (image rows grow downwards).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Self { rotation, translation }
    }

    /// Optical centre in world coordinates, `-Rᵀ t`.
    pub fn camera_center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }
}

/// Intrinsics plus extrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

impl PinholeCamera {
    pub fn new(intrinsics: CameraIntrinsics, pose: Pose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn center(&self) -> Vec3 {
        self.pose.camera_center()
    }

    /// World-frame unit direction through pixel `(u, v)`:
    /// `Rᵀ K⁻¹ [u v 1]ᵀ / ‖K⁻¹ [u v 1]ᵀ‖`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let local = self.intrinsics.unproject(u, v);
        let norm = local.norm();
        self.pose.rotation.transpose() * local / norm
    }

    pub fn ray(&self, u: f64, v: f64) -> Ray {
        Ray {
            origin: self.center(),
            direction: self.ray_direction(u, v),
        }
    }

    pub fn project(&self, x: &Vec3) -> Result<(f64, f64), GeometryError> {
        project(&self.intrinsics, &self.pose, x)
    }
}

/// Dehomogenised `K [R | t] [X; 1]`.
pub fn project(k: &CameraIntrinsics, pose: &Pose, x: &Vec3) -> Result<(f64, f64), GeometryError> {
    let xc = pose.transform(x);
    if !(xc.z > 0.0) {
        return Err(GeometryError::BehindCamera { depth: xc.z });
    }
    let h = k.matrix() * xc;
    Ok((h.x / h.z, h.y / h.z))
}

/// Mirror reflection `d - 2 (nᵀd) n` of a unit direction about a unit normal.
pub fn reflect(d_in: &Vec3, n: &Vec3) -> Result<Vec3, GeometryError> {
    check_unit("incident direction", d_in)?;
    check_unit("normal", n)?;
    Ok(reflect_unchecked(d_in, n))
}

#[inline]
pub fn reflect_unchecked(d_in: &Vec3, n: &Vec3) -> Vec3 {
    d_in - n * (2.0 * n.dot(d_in))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Builds a ray, rejecting directions that are not unit length to 1e-12.
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self, GeometryError> {
        let norm = direction.norm();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(GeometryError::NotUnit {
                what: "ray direction",
                norm,
            });
        }
        Ok(Self { origin, direction })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// A convex spherical reflector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereMirror {
    pub center: [f64; 3],
    pub radius: f64,
    pub index: usize,
}

impl SphereMirror {
    pub fn new(center: Vec3, radius: f64, index: usize) -> Result<Self, GeometryError> {
        if !(radius > 0.0) {
            return Err(GeometryError::InvalidMirror(format!(
                "radius must be positive, got {radius}"
            )));
        }
        Ok(Self {
            center: center.into(),
            radius,
            index,
        })
    }

    pub fn center(&self) -> Vec3 {
        Vec3::from(self.center)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
}

/// Nearest front-facing intersection with `t > 0`. Rays starting inside the
/// sphere, tangent rays and misses yield `None`.
pub fn intersect_ray_sphere(ray: &Ray, mirror: &SphereMirror) -> Option<Hit> {
    let center = mirror.center();
    let oc = ray.origin - center;
    let b = oc.dot(&ray.direction);
    let c = oc.norm_squared() - mirror.radius * mirror.radius;
    if c <= 0.0 {
        return None;
    }
    let disc = b * b - c;
    if disc <= TANGENT_DISCRIMINANT {
        return None;
    }
    // Stable root of the quadratic; the entry point is the smaller root.
    let sq = disc.sqrt();
    let t = if b < 0.0 { c / (-b + sq) } else { -b - sq };
    if !(t > 0.0) {
        return None;
    }
    let point = ray.at(t);
    let normal = (point - center) / mirror.radius;
    Some(Hit { t, point, normal })
}

/// Rotation angle of `a⁻¹ b`.
pub fn rotation_geodesic(a: &Mat3, b: &Mat3) -> f64 {
    let rel = a.transpose() * b;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // acos loses precision near zero; use the skew part instead.
    let skew = Vec3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = skew.norm() / 2.0;
    sin.atan2(cos)
}

/// `RᵀR = I` and `det R = 1` within `tol`.
pub fn is_rotation(r: &Mat3, tol: f64) -> bool {
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    err <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Rotation about a unit axis (Rodrigues).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let k = axis.normalize();
    let kx = Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Mat3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn reflect_normal_incidence() {
        let d = reflect(&Vec3::new(0.0, 0.0, -1.0), &Vec3::z()).unwrap();
        assert_eq!(d, Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn reflect_45_degrees() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let d = reflect(&Vec3::new(s, 0.0, -s), &Vec3::z()).unwrap();
        assert_abs_diff_eq!(d, Vec3::new(s, 0.0, s), epsilon = 1e-15);
    }

    #[test]
    fn reflect_matches_householder() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let d = random_unit(&mut rng);
            let n = random_unit(&mut rng);
            let householder = Mat3::identity() - n * n.transpose() * 2.0;
            let expected = householder * d;
            let got = reflect(&d, &n).unwrap();
            assert!((got - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn reflect_rejects_non_unit() {
        assert!(matches!(
            reflect(&Vec3::new(0.0, 0.0, -2.0), &Vec3::z()),
            Err(GeometryError::NotUnit { .. })
        ));
        assert!(reflect(&Vec3::z(), &Vec3::new(0.0, 1e-3, 1.0)).is_err());
    }

    proptest! {
        #[test]
        fn reflect_preserves_norm_and_plane(
            a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0,
            p in -1.0f64..1.0, q in -1.0f64..1.0, r in -1.0f64..1.0,
        ) {
            let d = Vec3::new(a, b, c);
            let n = Vec3::new(p, q, r);
            prop_assume!(d.norm() > 1e-3 && n.norm() > 1e-3);
            let d = d.normalize();
            let n = n.normalize();
            let out = reflect(&d, &n).unwrap();
            prop_assert!((out.norm() - 1.0).abs() < 1e-12);
            prop_assert!((n.dot(&out) + n.dot(&d)).abs() < 1e-12);
            // coplanar: triple product vanishes
            prop_assert!(d.cross(&n).dot(&out).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_axial_hit() {
        let ray = Ray::new(Vec3::new(0.0, 0.0, -2.0), Vec3::z()).unwrap();
        let mirror = SphereMirror::new(Vec3::zeros(), 1.0, 0).unwrap();
        let hit = intersect_ray_sphere(&ray, &mirror).unwrap();
        assert_abs_diff_eq!(hit.t, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(hit.point, Vec3::new(0.0, 0.0, -1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(hit.normal, Vec3::new(0.0, 0.0, -1.0), epsilon = 1e-15);
    }

    #[test]
    fn sphere_offset_miss_and_tangent() {
        let mirror = SphereMirror::new(Vec3::zeros(), 1.0, 0).unwrap();
        let ray = Ray::new(Vec3::new(0.0, 3.0, -2.0), Vec3::z()).unwrap();
        assert!(intersect_ray_sphere(&ray, &mirror).is_none());
        let tangent = Ray::new(Vec3::new(0.0, 1.0, -2.0), Vec3::z()).unwrap();
        assert!(intersect_ray_sphere(&tangent, &mirror).is_none());
        let behind = Ray::new(Vec3::new(0.0, 0.0, 2.0), Vec3::z()).unwrap();
        assert!(intersect_ray_sphere(&behind, &mirror).is_none());
    }

    #[test]
    fn sphere_hit_matches_ray_march() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mirror = SphereMirror::new(Vec3::new(0.3, -0.2, 0.1), 1.0, 0).unwrap();
        let step = 1e-4;
        let mut hits = 0;
        for _ in 0..200 {
            let origin = mirror.center() + random_unit(&mut rng) * 3.0;
            let target = mirror.center() + random_unit(&mut rng) * 0.9;
            let ray = Ray::new(origin, (target - origin).normalize()).unwrap();
            let analytic = intersect_ray_sphere(&ray, &mirror);
            // march until inside
            let mut t = 0.0;
            let mut marched = None;
            while t < 6.0 {
                if (ray.at(t) - mirror.center()).norm() <= mirror.radius {
                    marched = Some(t);
                    break;
                }
                t += step;
            }
            let (a, m) = (analytic.expect("target inside sphere"), marched.unwrap());
            assert!(m >= a.t - 1e-12 && m - a.t <= step, "{} vs {}", a.t, m);
            assert!(((a.point - mirror.center()).norm() - 1.0).abs() < 1e-9);
            hits += 1;
        }
        assert_eq!(hits, 200);
    }

    #[test]
    fn reflected_ray_traced_back_hits_same_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mirror = SphereMirror::new(Vec3::zeros(), 25.0, 0).unwrap();
        for _ in 0..200 {
            let origin = Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 300.0);
            let target = Vec3::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0), 0.0);
            let ray = Ray::new(origin, (target - origin).normalize()).unwrap();
            let hit = intersect_ray_sphere(&ray, &mirror).unwrap();
            let out = reflect(&ray.direction, &hit.normal).unwrap();
            let far = hit.point + out * 100.0;
            let back = Ray::new(far, -out).unwrap();
            let again = intersect_ray_sphere(&back, &mirror).unwrap();
            assert!((again.point - hit.point).norm() < 1e-9);
        }
    }

    #[test]
    fn project_principal_axis() {
        let k = CameraIntrinsics::new(500.0, 520.0, 320.0, 240.0, 640, 480).unwrap();
        let (u, v) = project(&k, &Pose::identity(), &Vec3::new(0.0, 0.0, 7.0)).unwrap();
        assert_eq!((u, v), (320.0, 240.0));
    }

    #[test]
    fn project_rejects_behind() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        assert!(project(&k, &Pose::identity(), &Vec3::new(0.0, 0.0, 0.0)).is_err());
        assert!(project(&k, &Pose::identity(), &Vec3::new(1.0, 0.0, -3.0)).is_err());
    }

    #[test]
    fn project_planar_points_factor_through_homography() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = CameraIntrinsics::new(800.0, 780.0, 300.0, 250.0, 640, 480).unwrap();
        let r = axis_angle(&Vec3::new(0.3, -0.5, 0.2), 0.4);
        let t = Vec3::new(10.0, -20.0, 600.0);
        let pose = Pose::new(r, t);
        let mut rt = Mat3::zeros();
        rt.set_column(0, &r.column(0));
        rt.set_column(1, &r.column(1));
        rt.set_column(2, &t);
        let h = k.matrix() * rt;
        for _ in 0..50 {
            let x = Vec3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), 0.0);
            let (u, v) = project(&k, &pose, &x).unwrap();
            let hx = h * Vec3::new(x.x, x.y, 1.0);
            assert!((u - hx.x / hx.z).abs() < 1e-9);
            assert!((v - hx.y / hx.z).abs() < 1e-9);
        }
    }

    #[test]
    fn translating_camera_shifts_pixels() {
        let k = CameraIntrinsics::new(800.0, 800.0, 320.0, 240.0, 640, 480).unwrap();
        let x = Vec3::new(12.0, -5.0, 400.0);
        let (u0, v0) = project(&k, &Pose::identity(), &x).unwrap();
        let dx = 3.5;
        // camera moves +x in the world, so points move -x in the camera frame
        let moved = Pose::new(Mat3::identity(), Vec3::new(-dx, 0.0, 0.0));
        let (u1, v1) = project(&k, &moved, &x).unwrap();
        assert!((u1 - u0 - (-k.fx * dx / x.z)).abs() < 1e-9);
        assert_eq!(v0, v1);
    }

    #[test]
    fn ray_direction_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = CameraIntrinsics::new(900.0, 880.0, 330.0, 250.0, 640, 480).unwrap();
        let cam = PinholeCamera::new(
            k,
            Pose::look_at(Vec3::new(20.0, -80.0, 600.0), Vec3::zeros(), Vec3::y()),
        );
        for _ in 0..100 {
            let x = Vec3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-30.0..30.0),
            );
            let (u, v) = cam.project(&x).unwrap();
            let d = cam.ray_direction(u, v);
            let expected = (x - cam.center()).normalize();
            assert!(d.cross(&expected).norm() < 1e-9 && d.dot(&expected) > 0.0);
        }
    }

    #[test]
    fn look_at_is_rotation() {
        let pose = Pose::look_at(Vec3::new(5.0, -80.0, 600.0), Vec3::zeros(), Vec3::y());
        assert!(is_rotation(&pose.rotation, 1e-12));
        assert!((pose.camera_center() - Vec3::new(5.0, -80.0, 600.0)).norm() < 1e-9);
        let k = CameraIntrinsics::centered(500.0, 101, 101).unwrap();
        let (u, v) = project(&k, &pose, &Vec3::zeros()).unwrap();
        assert!((u - 50.0).abs() < 1e-9 && (v - 50.0).abs() < 1e-9);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 5.0, 5.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 10.0, 5.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 5.0, 0.0, 10, 10).is_err());
    }

    #[test]
    fn geodesic_small_angles() {
        let r = axis_angle(&Vec3::new(1.0, 2.0, 3.0), 1e-9);
        let g = rotation_geodesic(&Mat3::identity(), &r);
        assert!((g - 1e-9).abs() < 1e-15);
    }
}
