//! Pinhole cameras, rectified stereo rigs, plane-induced homographies and the
//! disparity/depth relation.
//!
//! Conventions used everywhere in the crate:
//! - poses are camera-to-world, right-handed;
//! - the camera looks down its +z axis, +x points right and +y points down
//!   in the image;
//! - pixel `(x, y)` has its center at continuous coordinates `(x + 0.5, y + 0.5)`;
//! - "depth" means camera-frame z, not distance along the ray.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels.
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
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy)));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics for the same camera at `1/factor` resolution (e.g. a pyramid
    /// level). Exact under the pixel-center convention.
    pub fn downscaled(&self, factor: usize) -> Self {
        let s = 1.0 / factor as f64;
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(1.0 / self.fx, 0.0, -self.cx / self.fx, 0.0, 1.0 / self.fy, -self.cy / self.fy, 0.0, 0.0, 1.0)
    }

    #[inline]
    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= self.width as f64 && px.y <= self.height as f64
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    /// Camera center in world coordinates (meters).
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        let det = self.rotation.determinant();
        if !(ortho < 1e-9 && (det - 1.0).abs() < 1e-9) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!("pose rotation is not a proper rotation (|RᵀR−I|∞={ortho:.3e}, det={det})")));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with image-up roughly along
    /// `world_up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, world_up: Vector3<f64>) -> Result<Self> {
        let z = target - eye;
        if z.norm() < 1e-12 {
            return Err(Error::InvalidInput("look_at target coincides with eye".into()));
        }
        let z = z.normalize();
        let x = z.cross(&world_up);
        if x.norm() < 1e-9 {
            return Err(Error::InvalidInput("look_at direction parallel to up vector".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Self::new(rotation, eye)
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    #[inline]
    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn right(&self) -> Vector3<f64> {
        self.rotation.column(0).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn downscaled(&self, factor: usize) -> Self {
        Self { intrinsics: self.intrinsics.downscaled(factor), pose: self.pose }
    }

    /// Ray through continuous pixel coordinates `px`.
    pub fn pixel_ray(&self, px: &Vector2<f64>) -> Ray {
        let d_cam = self.intrinsics.inverse_matrix() * Vector3::new(px.x, px.y, 1.0);
        Ray::new(self.pose.translation, self.pose.rotation * d_cam)
    }

    /// Ray through the center of integer pixel `(x, y)`.
    pub fn pixel_center_ray(&self, x: usize, y: usize) -> Ray {
        self.pixel_ray(&Vector2::new(x as f64 + 0.5, y as f64 + 0.5))
    }
}

/// Result of projecting a world point. `depth <= 0` flags a point at or
/// behind the camera plane; `pixel` is then meaningless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

impl Projection {
    #[inline]
    pub fn in_front(&self) -> bool {
        self.depth > 0.0
    }
}

#[inline]
pub fn project(point: &Vector3<f64>, cam: &Camera) -> Projection {
    let pc = cam.pose.world_to_camera(point);
    let k = &cam.intrinsics;
    if pc.z <= 0.0 {
        return Projection { pixel: Vector2::new(f64::NAN, f64::NAN), depth: pc.z };
    }
    Projection { pixel: Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy), depth: pc.z }
}

pub fn backproject(pixel: &Vector2<f64>, depth: f64, cam: &Camera) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidInput(format!("backproject needs positive depth, got {depth}")));
    }
    let k = &cam.intrinsics;
    let pc = Vector3::new((pixel.x - k.cx) / k.fx * depth, (pixel.y - k.cy) / k.fy * depth, depth);
    Ok(cam.pose.camera_to_world(&pc))
}

/// A plane `n·X = offset` in world coordinates (`n` unit length).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    /// The plane `z_cam = depth` in `cam`'s frame.
    pub fn fronto_parallel(cam: &Camera, depth: f64) -> Self {
        let n = cam.pose.forward();
        Self { normal: n, offset: n.dot(&cam.pose.translation) + depth }
    }
}

/// Homography taking `dst` pixels to `src` pixels for points on `plane`,
/// normalized so that `H[2][2] = 1`.
pub fn homography_for_plane(src: &Camera, dst: &Camera, plane: &Plane) -> Matrix3<f64> {
    // X_w = R_d X_d + t_d; plane in dst frame: n_dᵀ X_d = e.
    let n_d = dst.pose.rotation.transpose() * plane.normal;
    let e = plane.offset - plane.normal.dot(&dst.pose.translation);
    // X_s = R_sᵀ (R_d X_d + t_d − t_s) = R X_d + t, with X_d on the plane.
    let r = src.pose.rotation.transpose() * dst.pose.rotation;
    let t = src.pose.rotation.transpose() * (dst.pose.translation - src.pose.translation);
    let h = src.intrinsics.matrix() * (r + t * n_d.transpose() / e) * dst.intrinsics.inverse_matrix();
    h / h[(2, 2)]
}

/// Homography for the fronto-parallel plane at `depth` in `dst`'s frame,
/// mapping `dst` pixels to `src` pixels.
pub fn plane_homography(src: &Camera, dst: &Camera, depth: f64) -> Result<Matrix3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::InvalidInput(format!("plane depth must be positive, got {depth}")));
    }
    src.intrinsics.validate()?;
    dst.intrinsics.validate()?;
    Ok(homography_for_plane(src, dst, &Plane::fronto_parallel(dst, depth)))
}

/// Applies a homography to continuous pixel coordinates.
pub fn apply_homography(h: &Matrix3<f64>, px: &Vector2<f64>) -> Vector2<f64> {
    let p = h * Vector3::new(px.x, px.y, 1.0);
    Vector2::new(p.x / p.z, p.y / p.z)
}

/// Rectified stereo pair: both eyes share intrinsics and rotation; the right
/// eye sits `baseline` meters along the left camera's +x axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoRig {
    pub intrinsics: Intrinsics,
    pub left_pose: Pose,
    pub baseline: f64,
}

impl StereoRig {
    pub fn new(intrinsics: Intrinsics, left_pose: Pose, baseline: f64) -> Result<Self> {
        if !(baseline > 0.0) {
            return Err(Error::InvalidInput(format!("baseline must be positive, got {baseline}")));
        }
        intrinsics.validate()?;
        left_pose.validate()?;
        Ok(Self { intrinsics, left_pose, baseline })
    }

    pub fn left(&self) -> Camera {
        Camera::new(self.intrinsics, self.left_pose)
    }

    pub fn right_pose(&self) -> Pose {
        Pose { rotation: self.left_pose.rotation, translation: self.left_pose.translation + self.left_pose.right() * self.baseline }
    }

    pub fn right(&self) -> Camera {
        Camera::new(self.intrinsics, self.right_pose())
    }

    pub fn eye(&self, eye: Eye) -> Camera {
        match eye {
            Eye::Left => self.left(),
            Eye::Right => self.right(),
        }
    }

    /// `baseline × focal` in meter-pixels.
    #[inline]
    pub fn bf(&self) -> f64 {
        self.baseline * self.intrinsics.fx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Eye {
    Left,
    Right,
}

impl Eye {
    pub const BOTH: [Eye; 2] = [Eye::Left, Eye::Right];

    pub fn tag(self) -> char {
        match self {
            Eye::Left => 'L',
            Eye::Right => 'R',
        }
    }
}

/// `depth = baseline · focal / disparity`.
#[inline]
pub fn disparity_to_depth(disp: f64, rig: &StereoRig) -> Result<f64> {
    if !(disp > 0.0) {
        return Err(Error::InvalidDisparity(disp));
    }
    Ok(rig.bf() / disp)
}

#[inline]
pub fn depth_to_disparity(depth: f64, rig: &StereoRig) -> Result<f64> {
    if !(depth > 0.0) {
        return Err(Error::InvalidInput(format!("depth must be positive, got {depth}")));
    }
    Ok(rig.bf() / depth)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self { origin, direction: direction.normalize() }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}
