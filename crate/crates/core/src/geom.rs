//! Camera geometry primitives shared across the workspace: 3-vectors,
//! unit quaternions, world-to-camera poses and pinhole intrinsics.
//!
//! Conventions: poses are world-to-camera (`x_cam = R * x_world + t`),
//! the camera frame is right-handed with x right, y down, z forward,
//! and stored depth is z-depth (not ray length).

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const QUAT_UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            self
        }
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Hamilton quaternion `(w, x, y, z)`; unit-norm when used as a rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Quat {
        let n = self.norm();
        Quat::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product; `a * b` applies `b` first, then `a`.
    pub fn mul(self, b: Quat) -> Quat {
        let a = self;
        Quat::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        // q v q* expanded via the cross-product form.
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    pub fn from_axis_angle(axis: Vec3, angle_rad: f64) -> Quat {
        let a = axis.normalized();
        let half = angle_rad * 0.5;
        let s = half.sin();
        Quat::new(half.cos(), a.x * s, a.y * s, a.z * s)
    }

    /// Rotation matrix (row-major rows) to quaternion, Shepperd's method.
    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Quat {
        let trace = r0.x + r1.y + r2.z;
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quat::new(
                0.25 * s,
                (r2.y - r1.z) / s,
                (r0.z - r2.x) / s,
                (r1.x - r0.y) / s,
            )
        } else if r0.x > r1.y && r0.x > r2.z {
            let s = (1.0 + r0.x - r1.y - r2.z).sqrt() * 2.0;
            Quat::new(
                (r2.y - r1.z) / s,
                0.25 * s,
                (r0.y + r1.x) / s,
                (r0.z + r2.x) / s,
            )
        } else if r1.y > r2.z {
            let s = (1.0 + r1.y - r0.x - r2.z).sqrt() * 2.0;
            Quat::new(
                (r0.z - r2.x) / s,
                (r0.y + r1.x) / s,
                0.25 * s,
                (r1.z + r2.y) / s,
            )
        } else {
            let s = (1.0 + r2.z - r0.x - r1.y).sqrt() * 2.0;
            Quat::new(
                (r1.x - r0.y) / s,
                (r0.z + r2.x) / s,
                (r1.z + r2.y) / s,
                0.25 * s,
            )
        };
        q.normalized()
    }

    /// Geodesic angle in radians between two unit quaternions, sign-invariant.
    pub fn angle_to(self, other: Quat) -> f64 {
        let dot = (self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z)
            .abs()
            .min(1.0);
        2.0 * dot.acos()
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl CameraPose {
    pub const IDENTITY: CameraPose = CameraPose {
        rotation: Quat::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        CameraPose {
            rotation,
            translation,
        }
    }

    pub fn validate_unit(&self) -> Result<()> {
        let n = self.rotation.norm();
        if (n - 1.0).abs() > QUAT_UNIT_TOL {
            return Err(CoreError::Degenerate(format!(
                "quaternion norm {n} outside unit tolerance"
            )));
        }
        Ok(())
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn inverse(&self) -> CameraPose {
        let rinv = self.rotation.conjugate();
        CameraPose::new(rinv, -rinv.rotate(self.translation))
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose::new(
            self.rotation.mul(other.rotation).normalized(),
            self.rotation.rotate(other.translation) + self.translation,
        )
    }

    /// Pose of `self` expressed relative to `reference`: `self ∘ reference⁻¹`.
    pub fn relative_to(&self, reference: &CameraPose) -> CameraPose {
        self.compose(&reference.inverse())
    }

    /// Round each component through f32 so the pose survives f32 storage
    /// bit-exactly.
    pub fn quantize_f32(&self) -> CameraPose {
        let q = self.rotation;
        let t = self.translation;
        CameraPose::new(
            Quat::new(
                q.w as f32 as f64,
                q.x as f32 as f64,
                q.y as f32 as f64,
                q.z as f32 as f64,
            ),
            Vec3::new(t.x as f32 as f64, t.y as f32 as f64, t.z as f32 as f64),
        )
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.rotation.w,
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> CameraPose {
        CameraPose::new(Quat::new(a[0], a[1], a[2], a[3]), Vec3::new(a[4], a[5], a[6]))
    }
}

/// Builds a world-to-camera pose for a camera at `eye` looking at `target`.
/// World y points down (image convention); `down` resolves the roll.
pub fn look_at(eye: Vec3, target: Vec3) -> CameraPose {
    let forward = (target - eye).normalized();
    let down = Vec3::new(0.0, 1.0, 0.0);
    let mut right = down.cross(forward);
    if right.norm() < 1e-9 {
        // Camera looking straight up/down; pick an arbitrary roll.
        right = Vec3::new(1.0, 0.0, 0.0);
    }
    let right = right.normalized();
    let down_cam = forward.cross(right);
    let rotation = Quat::from_rows(right, down_cam, forward);
    let translation = -rotation.rotate(eye);
    CameraPose::new(rotation, translation)
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
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

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(CoreError::Config("image dimensions must be positive".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(CoreError::Config("focal lengths must be positive".into()));
        }
        if self.cx < 0.0 || self.cx >= self.width as f64 {
            return Err(CoreError::Config(format!(
                "principal point cx={} outside [0,{})",
                self.cx, self.width
            )));
        }
        if self.cy < 0.0 || self.cy >= self.height as f64 {
            return Err(CoreError::Config(format!(
                "principal point cy={} outside [0,{})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Camera-frame ray direction through the center of pixel (col, row),
    /// normalized to unit length.
    pub fn pixel_ray(&self, col: usize, row: usize) -> Vec3 {
        Vec3::new(
            (col as f64 + 0.5 - self.cx) / self.fx,
            (row as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
        .normalized()
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    /// Returns None when the point is at or behind the camera plane.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Unprojects pixel-center (col, row) at z-depth `depth` to camera frame.
    pub fn unproject(&self, col: usize, row: usize, depth: f64) -> Vec3 {
        Vec3::new(
            (col as f64 + 0.5 - self.cx) / self.fx * depth,
            (row as f64 + 0.5 - self.cy) / self.fy * depth,
            depth,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn quat_rotation_matches_axis_angle() {
        let q = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
        let v = q.rotate(Vec3::new(1.0, 0.0, 0.0));
        assert_close(v.x, 0.0, 1e-12);
        assert_close(v.y, 1.0, 1e-12);
        assert_close(v.z, 0.0, 1e-12);
    }

    #[test]
    fn compose_then_invert_is_identity() {
        let a = CameraPose::new(
            Quat::from_axis_angle(Vec3::new(0.3, 1.0, -0.2), 0.7),
            Vec3::new(0.5, -1.0, 2.0),
        );
        let p = Vec3::new(0.1, 0.2, 0.3);
        let round = a.inverse().apply(a.apply(p));
        assert_close(round.x, p.x, 1e-12);
        assert_close(round.y, p.y, 1e-12);
        assert_close(round.z, p.z, 1e-12);
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let a = CameraPose::new(
            Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 0.4),
            Vec3::new(1.0, 0.0, 0.0),
        );
        let b = CameraPose::new(
            Quat::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), -0.9),
            Vec3::new(0.0, 2.0, 0.5),
        );
        let p = Vec3::new(0.3, -0.4, 1.7);
        let via_compose = a.compose(&b).apply(p);
        let stepwise = a.apply(b.apply(p));
        assert_close(via_compose.x, stepwise.x, 1e-12);
        assert_close(via_compose.y, stepwise.y, 1e-12);
        assert_close(via_compose.z, stepwise.z, 1e-12);
    }

    #[test]
    fn from_rows_round_trips_rotation() {
        let q = Quat::from_axis_angle(Vec3::new(0.2, -0.5, 0.8), 1.9);
        // Columns of R are the rotated basis vectors.
        let c0 = q.rotate(Vec3::new(1.0, 0.0, 0.0));
        let c1 = q.rotate(Vec3::new(0.0, 1.0, 0.0));
        let c2 = q.rotate(Vec3::new(0.0, 0.0, 1.0));
        let rt = Quat::from_rows(
            Vec3::new(c0.x, c1.x, c2.x),
            Vec3::new(c0.y, c1.y, c2.y),
            Vec3::new(c0.z, c1.z, c2.z),
        );
        assert!(q.angle_to(rt) < 1e-9);
    }

    #[test]
    fn look_at_points_camera_z_at_target() {
        let eye = Vec3::new(2.0, -1.0, -3.0);
        let target = Vec3::new(0.0, 0.0, 8.0);
        let pose = look_at(eye, target);
        let cam = pose.apply(target);
        assert_close(cam.x, 0.0, 1e-9);
        assert_close(cam.y, 0.0, 1e-9);
        assert!(cam.z > 0.0);
        // The eye maps to the origin.
        let origin = pose.apply(eye);
        assert!(origin.norm() < 1e-9);
    }

    #[test]
    fn project_unproject_round_trip() {
        let k = Intrinsics::new(64.0, 64.0, 32.0, 32.0, 64, 64).unwrap();
        let p = k.unproject(10, 20, 5.0);
        let (u, v) = k.project(p).unwrap();
        assert_close(u, 10.5, 1e-9);
        assert_close(v, 20.5, 1e-9);
    }

    #[test]
    fn intrinsics_rejects_bad_dims() {
        assert!(Intrinsics::new(64.0, 64.0, 32.0, 32.0, 0, 64).is_err());
        assert!(Intrinsics::new(-1.0, 64.0, 32.0, 32.0, 64, 64).is_err());
        assert!(Intrinsics::new(64.0, 64.0, 64.0, 32.0, 64, 64).is_err());
    }
}
