//! Pinhole intrinsics, rigid poses and unit rays.
//!
//! Angles are radians, distances meters, and depth is measured along +z of
//! the camera frame. Rotations are kept as matrices; quaternions only appear
//! at the file boundary.

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector2, Vector3};

use crate::{Error, Result};

/// Tolerance on `RᵀR = I` and `det R = 1` accepted by [`RelativePose::new`].
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let finite = [fx, fy, cx, cy].iter().all(|v| v.is_finite());
        if !finite || fx <= 0.0 || fy <= 0.0 {
            return Err(Error::input(format!(
                "focal lengths must be finite and positive (fx={fx}, fy={fy})"
            )));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(Error::input(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Intrinsics with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }

    pub fn fy(&self) -> f64 {
        self.fy
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// True when `u` lies on the pixel grid `[0, w-1] x [0, h-1]`.
    pub fn contains(&self, u: &Vector2<f64>) -> bool {
        u.x >= 0.0
            && u.y >= 0.0
            && u.x <= (self.width - 1) as f64
            && u.y <= (self.height - 1) as f64
    }

    /// Maps a pixel to normalized camera coordinates `[x', y', 1]`.
    pub fn pixel_to_normalized(&self, u: &Vector2<f64>) -> Result<Vector3<f64>> {
        if !self.contains(u) {
            return Err(Error::Bounds {
                x: u.x,
                y: u.y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.normalize(u))
    }

    /// Same as [`pixel_to_normalized`](Self::pixel_to_normalized) without the
    /// bounds check. Flow targets may legitimately leave the image.
    pub fn normalize(&self, u: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point; `None` when it is not in front of the
    /// camera by more than `z_eps`.
    pub fn project(&self, p: &Vector3<f64>, z_eps: f64) -> Option<Vector2<f64>> {
        if !(p.z > z_eps) {
            return None;
        }
        Some(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }
}

/// Unit-length viewing direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray(Unit<Vector3<f64>>);

impl Ray {
    /// Normalizes `v`; `None` for a zero or non-finite vector.
    pub fn new(v: Vector3<f64>) -> Option<Self> {
        if !v.iter().all(|c| c.is_finite()) {
            return None;
        }
        Unit::try_new(v, f64::MIN_POSITIVE).map(Ray)
    }

    pub fn direction(&self) -> &Vector3<f64> {
        self.0.as_ref()
    }
}

/// Rigid transform `x -> R x + p`.
///
/// For triangulation the pose maps keyframe coordinates into frame `k`
/// coordinates. Trajectory entries map camera coordinates into the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RelativePose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RelativePose {
    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant +1 within [`ORTHONORMAL_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::input("pose contains non-finite values"));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if ortho > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::input(format!(
                "rotation is not a proper orthonormal matrix (|RtR - I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = match Unit::try_new(*axis, f64::MIN_POSITIVE) {
            Some(axis) => Rotation3::from_axis_angle(&axis, angle).into_inner(),
            None => Matrix3::identity(),
        };
        Self {
            rotation,
            translation,
        }
    }

    /// Rotation from a unit quaternion (Hamilton convention, scalar last in
    /// the argument order used by trajectory files).
    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// The transform applying `self` first and `next` second.
    pub fn then(&self, next: &RelativePose) -> Self {
        compose(self, next)
    }
}

/// Transforms points by `a` then `b`: `R = R_b R_a`, `p = R_b p_a + p_b`.
pub fn compose(a: &RelativePose, b: &RelativePose) -> RelativePose {
    RelativePose {
        rotation: b.rotation * a.rotation,
        translation: b.rotation * a.translation + b.translation,
    }
}

/// Rotation angle of a rotation matrix, in `[0, pi]`.
///
/// Uses `atan2(|axis| , trace - 1)`, which stays accurate near 0 and pi where
/// the plain arccos of the trace loses precision.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    axis.norm().atan2(trace - 1.0)
}

/// Angle and distance between two poses of a trajectory.
///
/// The angle is that of `R_a R_bᵀ`; the distance is the translation norm of
/// the relative pose `b⁻¹ ∘ a`, which for camera-to-world poses equals the
/// distance between the two camera centers. Both are symmetric in `a, b`.
pub fn relative_angle_translation(a: &RelativePose, b: &RelativePose) -> (f64, f64) {
    let rel = compose(a, &b.inverse());
    let angle = rotation_angle(&(a.rotation * b.rotation.transpose()));
    (angle, rel.translation.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Quaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_pose(rng: &mut ChaCha8Rng) -> RelativePose {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        let t = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        RelativePose::from_quaternion(q, t)
    }

    fn homogeneous(p: &RelativePose) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(p.rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(p.translation());
        m
    }

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 1000, 480).unwrap()
    }

    #[test]
    fn principal_point_maps_to_axis() {
        let k = k();
        let n = k.pixel_to_normalized(&Vector2::new(k.cx(), k.cy())).unwrap();
        assert_eq!(n, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn one_focal_length_off_axis() {
        let n = k().pixel_to_normalized(&Vector2::new(820.0, 240.0)).unwrap();
        assert_eq!(n, Vector3::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn normalization_matches_direct_division() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let w = rng.random_range(16..2000usize);
            let h = rng.random_range(16..2000usize);
            let fx = rng.random_range(50.0..3000.0);
            let fy = rng.random_range(50.0..3000.0);
            let cx = rng.random_range(1.0..(w as f64 - 1.0));
            let cy = rng.random_range(1.0..(h as f64 - 1.0));
            let k = Intrinsics::new(fx, fy, cx, cy, w, h).unwrap();
            let u = Vector2::new(
                rng.random_range(0.0..(w - 1) as f64),
                rng.random_range(0.0..(h - 1) as f64),
            );
            let n = k.pixel_to_normalized(&u).unwrap();
            assert_eq!(n.x, (u.x - cx) / fx);
            assert_eq!(n.y, (u.y - cy) / fy);
            assert_eq!(n.z, 1.0);
        }
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let k = k();
        assert!(matches!(
            k.pixel_to_normalized(&Vector2::new(-0.5, 3.0)),
            Err(Error::Bounds { .. })
        ));
        assert!(matches!(
            k.pixel_to_normalized(&Vector2::new(3.0, 480.0)),
            Err(Error::Bounds { .. })
        ));
    }

    #[test]
    fn invalid_intrinsics_are_rejected() {
        assert!(Intrinsics::new(0.0, 1.0, 5.0, 5.0, 10, 10).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 10.0, 5.0, 10, 10).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 5.0, 0.0, 10, 10).is_err());
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.0 + 1e-6;
        assert!(RelativePose::new(r, Vector3::zeros()).is_err());
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RelativePose::new(reflection, Vector3::zeros()).is_err());
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng);
        assert_eq!(compose(&RelativePose::identity(), &p), p);
        let e = compose(&p, &p.inverse());
        assert!((e.rotation() - Matrix3::identity()).amax() < 1e-9);
        assert!(e.translation().amax() < 1e-9);
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let expected = homogeneous(&b) * homogeneous(&a);
            let got = homogeneous(&compose(&a, &b));
            assert!((expected - got).amax() < 1e-12);
        }
    }

    #[test]
    fn compose_is_associative_and_keeps_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            let left = compose(&compose(&a, &b), &c);
            let right = compose(&a, &compose(&b, &c));
            assert!((left.rotation() - right.rotation()).amax() < 1e-9);
            assert!((left.translation() - right.translation()).amax() < 1e-9);
            assert!(RelativePose::new(*left.rotation(), *left.translation()).is_ok());
        }
    }

    #[test]
    fn identical_poses_have_zero_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_pose(&mut rng);
        let (angle, dist) = relative_angle_translation(&a, &a);
        assert!(angle.abs() < 1e-7, "{angle}");
        assert!(dist < 1e-12);
    }

    #[test]
    fn quarter_turn_yaw() {
        let a = RelativePose::identity();
        let b = RelativePose::from_axis_angle(&Vector3::y(), FRAC_PI_2, Vector3::zeros());
        let (angle, dist) = relative_angle_translation(&a, &b);
        assert!((angle - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(dist, 0.0);
    }

    #[test]
    fn half_turn_is_accurate() {
        let b = RelativePose::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0), PI, Vector3::zeros());
        let (angle, _) = relative_angle_translation(&RelativePose::identity(), &b);
        assert!((angle - PI).abs() < 1e-12);
    }

    #[test]
    fn relative_motion_matches_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let qa = a.quaternion();
            let qb = b.quaternion();
            let dq = qa * qb.inverse();
            let oracle_angle = 2.0 * dq.imag().norm().atan2(dq.w.abs());
            let oracle_dist = (a.translation() - b.translation()).norm();
            let (angle, dist) = relative_angle_translation(&a, &b);
            assert!((angle - oracle_angle).abs() < 1e-9, "{angle} vs {oracle_angle}");
            assert!((dist - oracle_dist).abs() < 1e-9);
            let (angle_ba, dist_ba) = relative_angle_translation(&b, &a);
            assert!((angle - angle_ba).abs() < 1e-12);
            assert!((dist - dist_ba).abs() < 1e-12);
        }
    }

    #[test]
    fn ray_is_unit() {
        let r = Ray::new(Vector3::new(3.0, 4.0, 12.0)).unwrap();
        assert!((r.direction().norm() - 1.0).abs() < 1e-12);
        assert!(Ray::new(Vector3::zeros()).is_none());
    }

    #[test]
    fn project_inverts_normalize() {
        let k = k();
        let u = Vector2::new(100.25, 17.5);
        let p = k.pixel_to_normalized(&u).unwrap() * 3.5;
        let back = k.project(&p, 1e-9).unwrap();
        assert!((back - u).norm() < 1e-12);
        assert!(k.project(&Vector3::new(0.0, 0.0, -1.0), 1e-9).is_none());
    }
}
