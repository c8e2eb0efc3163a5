//! Rigid transforms, pinhole intrinsics and the projection/back-projection pair
//! every other module is built on.
//!
//! Poses of frames and key-frames are stored world-to-camera: `pose.transform_point(p_world)`
//! yields the point in camera coordinates. A relative pose `T_t^k` maps key-frame
//! coordinates into frame `t`, so `world_pose(t) = T_t^k ∘ pose(k)`.

use core::fmt;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};

/// 6-vector tangent coordinates: translation part first, rotation part last.
pub type Twist = Vector6<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum GeometryError {
    #[error("point has non-positive depth")]
    NonPositiveDepth,
    #[error("pixel falls outside the image domain")]
    OutOfBounds,
    #[error("invalid camera intrinsics")]
    InvalidIntrinsics,
    #[error("rotation matrix is not orthonormal with determinant +1")]
    InvalidRotation,
}

/// Element of SE(3).
#[derive(Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl fmt::Debug for RigidPose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.quaternion();
        write!(
            f,
            "RigidPose {{ t: [{:.6}, {:.6}, {:.6}], q(xyzw): [{:.6}, {:.6}, {:.6}, {:.6}] }}",
            self.translation.x, self.translation.y, self.translation.z, q[0], q[1], q[2], q[3]
        )
    }
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if !(err < 1e-9) || rotation.determinant() <= 0.0 {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation given as axis * angle (radians).
    pub fn from_scaled_axis(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    /// Quaternion in `[qx, qy, qz, qw]` order (TUM convention). Normalized on input.
    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Self {
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]));
        Self {
            rotation: uq.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `[qx, qy, qz, qw]` with `qw >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let uq =
            UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        let q = uq.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Origin of this transform's source frame expressed in its target frame's inverse,
    /// i.e. the camera centre in world coordinates for a world-to-camera pose.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Re-orthonormalizes the rotation block (SVD projection onto SO(3)).
    pub fn orthonormalized(&self) -> RigidPose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        RigidPose {
            rotation: r,
            translation: self.translation,
        }
    }

    /// SE(3) exponential map of `xi = (ρ, ω)`.
    pub fn exp(xi: &Twist) -> RigidPose {
        let rho = Vector3::new(xi[0], xi[1], xi[2]);
        let omega = Vector3::new(xi[3], xi[4], xi[5]);
        let theta = omega.norm();
        let rotation = Rotation3::new(omega).into_inner();
        let w = omega.cross_matrix();
        let v = if theta < 1e-8 {
            Matrix3::identity() + w * 0.5 + w * w * (1.0 / 6.0)
        } else {
            let t2 = theta * theta;
            Matrix3::identity()
                + w * ((1.0 - theta.cos()) / t2)
                + w * w * ((theta - theta.sin()) / (t2 * theta))
        };
        RigidPose {
            rotation,
            translation: v * rho,
        }
    }

    /// SE(3) logarithm; inverse of [`RigidPose::exp`] away from rotation angle π.
    pub fn log(&self) -> Twist {
        let omega = so3_log(&self.rotation);
        let theta = omega.norm();
        let w = omega.cross_matrix();
        let v_inv = if theta < 1e-8 {
            Matrix3::identity() - w * 0.5 + w * w * (1.0 / 12.0)
        } else {
            let half = 0.5 * theta;
            let coef = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
            Matrix3::identity() - w * 0.5 + w * w * coef
        };
        let rho = v_inv * self.translation;
        Twist::new(rho.x, rho.y, rho.z, omega.x, omega.y, omega.z)
    }

    /// Largest absolute entry difference, rotation and translation combined.
    pub fn max_abs_diff(&self, other: &RigidPose) -> f64 {
        let dr = (self.rotation - other.rotation).amax();
        let dt = (self.translation - other.translation).amax();
        dr.max(dt)
    }
}

fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if theta < 1e-8 {
        return skew * 0.5;
    }
    if core::f64::consts::PI - theta < 1e-6 {
        // Near π the skew part vanishes; recover the axis from the symmetric part.
        return Rotation3::from_matrix_unchecked(*r).scaled_axis();
    }
    skew * (theta / (2.0 * theta.sin()))
}

/// Continuous image coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
}

impl PixelCoord {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Homogeneous lift `(x, y, 1)`.
    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, 1.0)
    }
}

/// Pinhole intrinsics for rectified images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        let ok = fx > 0.0
            && fy > 0.0
            && cx >= 0.0
            && cy >= 0.0
            && cx < width as f64
            && cy < height as f64
            && fx.is_finite()
            && fy.is_finite();
        if ok {
            Ok(k)
        } else {
            Err(GeometryError::InvalidIntrinsics)
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Intrinsics of an image resampled to `width x height` with pixel centres aligned.
    pub fn resized(&self, width: usize, height: usize) -> CameraIntrinsics {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        CameraIntrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }

    /// Intrinsics for one level down a 2x2-averaging pyramid.
    pub fn half(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx * 0.5,
            fy: self.fy * 0.5,
            cx: (self.cx - 0.5) * 0.5,
            cy: (self.cy - 0.5) * 0.5,
            width: self.width / 2,
            height: self.height / 2,
        }
    }

    /// Inside `[0, width) x [0, height)`.
    pub fn contains(&self, u: &PixelCoord) -> bool {
        u.x >= 0.0 && u.y >= 0.0 && u.x < self.width as f64 && u.y < self.height as f64
    }

    /// Inside the region where bilinear sampling needs no extrapolation.
    pub fn contains_interpolable(&self, u: &PixelCoord) -> bool {
        u.x >= 0.0
            && u.y >= 0.0
            && u.x <= (self.width - 1) as f64
            && u.y <= (self.height - 1) as f64
    }

    /// Perspective projection `π(K p)`.
    pub fn project(&self, p: &Vector3<f64>) -> Result<PixelCoord, GeometryError> {
        if !(p.z > 0.0) {
            return Err(GeometryError::NonPositiveDepth);
        }
        Ok(PixelCoord::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Back-projects `u` at `depth`: `K⁻¹ u̇ · depth`.
    pub fn vertex(&self, u: &PixelCoord, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if !(depth > 0.0) {
            return Err(GeometryError::NonPositiveDepth);
        }
        Ok(self.ray(u) * depth)
    }

    /// `K⁻¹ u̇` (the ray with unit z).
    pub fn ray(&self, u: &PixelCoord) -> Vector3<f64> {
        Vector3::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy, 1.0)
    }

    /// `π(K T V(u))`. Leaving the image or landing behind the camera is reported as
    /// `OutOfBounds`; callers skip such pixels.
    pub fn warp(
        &self,
        u: &PixelCoord,
        depth: f64,
        pose: &RigidPose,
    ) -> Result<PixelCoord, GeometryError> {
        let v = self.vertex(u, depth)?;
        let q = pose.transform_point(&v);
        let w = self.project(&q).map_err(|_| GeometryError::OutOfBounds)?;
        if self.contains(&w) {
            Ok(w)
        } else {
            Err(GeometryError::OutOfBounds)
        }
    }
}

/// `‖Δt‖ + λ·angle(ΔR)` between two poses of the same convention.
pub fn pose_distance(a: &RigidPose, b: &RigidPose, meters_per_radian: f64) -> f64 {
    let rel = a.compose(&b.inverse());
    (a.center() - b.center()).norm() + meters_per_radian * rel.rotation_angle()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_k() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 10,
            height: 10,
        }
    }

    #[test]
    fn project_examples() {
        let k = identity_k();
        let p = k.project(&Vector3::new(2.0, 4.0, 2.0)).unwrap();
        assert_eq!((p.x, p.y), (1.0, 2.0));
        let p = k.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((p.x, p.y), (0.0, 0.0));
        assert_eq!(
            k.project(&Vector3::new(1.0, 1.0, 0.0)),
            Err(GeometryError::NonPositiveDepth)
        );
        assert_eq!(
            k.project(&Vector3::new(1.0, 1.0, -1.0)),
            Err(GeometryError::NonPositiveDepth)
        );
    }

    #[test]
    fn vertex_examples() {
        let k = CameraIntrinsics::new(525.0, 525.0, 160.0, 120.0, 320, 240).unwrap();
        let v = k.vertex(&PixelCoord::new(160.0, 120.0), 3.0).unwrap();
        assert_eq!(v, Vector3::new(0.0, 0.0, 3.0));
        let v = k.vertex(&PixelCoord::new(212.5, 120.0), 2.0).unwrap();
        assert!((v.x - 0.2).abs() < 1e-15);
        assert_eq!(
            k.vertex(&PixelCoord::new(1.0, 1.0), 0.0),
            Err(GeometryError::NonPositiveDepth)
        );
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.9, 1.0, 4, 4).is_ok());
    }

    #[test]
    fn warp_identity_and_behind_camera() {
        let k = CameraIntrinsics::new(262.5, 262.5, 159.5, 119.5, 320, 240).unwrap();
        let u = PixelCoord::new(37.25, 201.5);
        let w = k.warp(&u, 2.3, &RigidPose::identity()).unwrap();
        assert!((w.x - u.x).abs() < 1e-12 && (w.y - u.y).abs() < 1e-12);
        let back = RigidPose::from_translation(Vector3::new(0.0, 0.0, -5.0));
        assert_eq!(k.warp(&u, 2.0, &back), Err(GeometryError::OutOfBounds));
    }

    #[test]
    fn warp_forward_translation_halving_depth() {
        let k = CameraIntrinsics::new(262.5, 262.5, 159.5, 119.5, 320, 240).unwrap();
        let u = PixelCoord::new(179.5, 129.5);
        let d = 2.0;
        // Oracle: move the vertex directly and project.
        let t = Vector3::new(0.0, 0.0, -1.0);
        let expected = k.project(&(k.vertex(&u, d).unwrap() + t)).unwrap();
        let w = k.warp(&u, d, &RigidPose::from_translation(t)).unwrap();
        assert!((w.x - expected.x).abs() < 1e-12 && (w.y - expected.y).abs() < 1e-12);
        assert!((w.x - k.cx - 2.0 * (u.x - k.cx)).abs() < 1e-9);
        assert!((w.y - k.cy - 2.0 * (u.y - k.cy)).abs() < 1e-9);
    }

    #[test]
    fn exp_examples() {
        assert_eq!(
            RigidPose::exp(&Twist::zeros()).max_abs_diff(&RigidPose::identity()),
            0.0
        );
        let t = RigidPose::exp(&Twist::new(0.3, -1.0, 2.0, 0.0, 0.0, 0.0));
        assert_eq!(*t.rotation(), Matrix3::identity());
        assert!((t.translation() - Vector3::new(0.3, -1.0, 2.0)).norm() < 1e-15);
    }

    #[test]
    fn log_near_pi() {
        let t = RigidPose::from_scaled_axis(
            Vector3::new(0.0, core::f64::consts::PI - 1e-9, 0.0),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let back = RigidPose::exp(&t.log());
        assert!(back.max_abs_diff(&t) < 1e-6);
    }

    #[test]
    fn quaternion_round_trip() {
        let t =
            RigidPose::from_scaled_axis(Vector3::new(0.1, -0.4, 0.25), Vector3::new(1.0, 2.0, 3.0));
        let q = t.quaternion();
        assert!(q[3] >= 0.0);
        let back = RigidPose::from_quaternion(q, *t.translation());
        assert!(back.max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn rotation_validation() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = -1.0;
        assert_eq!(
            RigidPose::new(m, Vector3::zeros()),
            Err(GeometryError::InvalidRotation)
        );
        assert!(RigidPose::new(Matrix3::identity() * 1.01, Vector3::zeros()).is_err());
    }

    #[test]
    fn pyramid_intrinsics_align_centres() {
        let k = CameraIntrinsics::new(262.5, 262.5, 159.5, 119.5, 320, 240).unwrap();
        let h = k.half();
        // Fine pixel centres 2i and 2i+1 average to coarse pixel i.
        assert!((h.cx - 79.5).abs() < 1e-12);
        assert_eq!((h.width, h.height), (160, 120));
        let r = CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480)
            .unwrap()
            .resized(320, 240);
        assert!((r.fx - 262.5).abs() < 1e-12 && (r.cx - 159.5).abs() < 1e-12);
    }
}
