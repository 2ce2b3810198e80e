//! Camera poses and the pinhole model.
//!
//! Conventions: camera axes are x right, y down, z forward. A pose maps camera
//! coordinates to world coordinates (`p_world = R · p_cam + t`), and the world
//! frame is the first camera of a sequence. Pixel `(u, v)` addresses the
//! centre of column `u`, row `v`; depth is the camera-frame z coordinate.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Translation (3), rotation quaternion `(x, y, z, w)` (4), field of view
/// `(horizontal, vertical)` in radians (2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub translation: [f64; 3],
    pub rotation: [f64; 4],
    pub fov: [f64; 2],
}

pub const POSE_DIMS: usize = 9;

impl CameraPose {
    pub fn identity(fov: [f64; 2]) -> Self {
        Self {
            translation: [0.0; 3],
            rotation: [0.0, 0.0, 0.0, 1.0],
            fov,
        }
    }

    /// Builds a pose from a rotation matrix; the quaternion is canonicalised
    /// to `w ≥ 0`.
    pub fn from_rt(rotation: &Matrix3<f64>, translation: &Vector3<f64>, fov: [f64; 2]) -> Self {
        let q = UnitQuaternion::from_matrix(rotation);
        let mut pose = Self {
            translation: [translation.x, translation.y, translation.z],
            rotation: [q.i, q.j, q.k, q.w],
            fov,
        };
        pose.canonicalize();
        pose
    }

    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.len() != POSE_DIMS {
            return Err(Error::shape("pose", &[v.len()], &[POSE_DIMS]));
        }
        Ok(Self {
            translation: [v[0], v[1], v[2]],
            rotation: [v[3], v[4], v[5], v[6]],
            fov: [v[7], v[8]],
        })
    }

    pub fn to_vec(&self) -> [f64; POSE_DIMS] {
        let (t, q, f) = (self.translation, self.rotation, self.fov);
        [t[0], t[1], t[2], q[0], q[1], q[2], q[3], f[0], f[1]]
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        let [x, y, z, w] = self.rotation;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.quaternion().to_rotation_matrix().into_inner()
    }

    pub fn translation_vec(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// Flips the quaternion sign so that `w ≥ 0`.
    pub fn canonicalize(&mut self) {
        if self.rotation[3] < 0.0 {
            self.rotation.iter_mut().for_each(|c| *c = -*c);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rotation.iter().map(|c| c * c).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("quaternion norm {n} is not 1")));
        }
        if self.rotation[3] < 0.0 {
            return Err(Error::Contract("quaternion w component is negative".into()));
        }
        if self.fov.iter().any(|&f| !(f > 0.0 && f < std::f64::consts::PI)) {
            return Err(Error::Contract(format!("field of view {:?} outside (0, pi)", self.fov)));
        }
        Ok(())
    }

    /// World point to camera coordinates.
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix().transpose() * (p - self.translation_vec())
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation_vec()
    }

    /// Pose with `other` as the reference frame: `other⁻¹ ∘ self`.
    pub fn relative_to(&self, other: &CameraPose) -> CameraPose {
        let r_o = other.rotation_matrix();
        let r = r_o.transpose() * self.rotation_matrix();
        let t = r_o.transpose() * (self.translation_vec() - other.translation_vec());
        CameraPose::from_rt(&r, &t, self.fov)
    }
}

/// Pinhole intrinsics derived from the field of view and image size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn from_fov(fov: [f64; 2], width: usize, height: usize) -> Self {
        Self {
            fx: width as f64 / (2.0 * (fov[0] / 2.0).tan()),
            fy: height as f64 / (2.0 * (fov[1] / 2.0).tan()),
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    /// Camera-frame ray through pixel `(u, v)` with unit z.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// Projects a world point; returns `(u, v, depth)` for points in front of the
/// camera.
pub fn project(p: &Vector3<f64>, pose: &CameraPose, k: &Intrinsics) -> Option<(f64, f64, f64)> {
    let c = pose.world_to_camera(p);
    if c.z <= 0.0 {
        return None;
    }
    Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
}

pub fn unproject_pixel(u: f64, v: f64, depth: f64, pose: &CameraPose, k: &Intrinsics) -> Vector3<f64> {
    pose.camera_to_world(&(k.ray(u, v) * depth))
}

/// Lifts an `H×W` depth map to a `3×H×W` world-space point map.
pub fn unproject<T: Real>(depth: &Tensor<T>, pose: &CameraPose) -> Result<Tensor<T>> {
    let &[h, w] = depth.shape() else {
        return Err(Error::shape("unproject", depth.shape(), &[0, 0]));
    };
    pose.validate()?;
    let k = Intrinsics::from_fov(pose.fov, w, h);
    let mut out = Tensor::zeros(vec![3, h, w]);
    let hw = h * w;
    for v in 0..h {
        for u in 0..w {
            let d = depth.data()[v * w + u].as_f64();
            let p = unproject_pixel(u as f64, v as f64, d, pose, &k);
            for c in 0..3 {
                out.data_mut()[c * hw + v * w + u] = T::lit(p[c]);
            }
        }
    }
    Ok(out)
}

/// Angle between two rotations in degrees.
pub fn rotation_angle_deg(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    a.angle_to(b).to_degrees()
}
