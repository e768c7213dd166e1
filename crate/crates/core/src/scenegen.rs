//! Deterministic ray-cast renderer for small procedural scenes, used to
//! synthesize multi-view stereo datasets with exact depth.

use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::dataset::{DatasetManifest, ViewRecord};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Eye, Intrinsics, Pose, Ray, StereoRig};
use crate::image::{RgbImage, ScalarMap};

/// Largest image side `render_view` is meant for.
pub const MAX_RESOLUTION: usize = 512;

/// Procedural surface color.
#[derive(Debug, Clone, PartialEq)]
pub enum Albedo {
    Flat([f64; 3]),
    /// 3-D checkerboard of cube side `size` meters.
    Checker {
        a: [f64; 3],
        b: [f64; 3],
        size: f64,
    },
    /// Bands perpendicular to `axis` with full period `period` meters.
    Stripes {
        a: [f64; 3],
        b: [f64; 3],
        period: f64,
        axis: Vector3<f64>,
    },
    /// Smooth three-octave value noise blending `a` and `b`; the middle octave
    /// has cell side `scale`, the others are about 4× coarser and 2× finer.
    Noise {
        a: [f64; 3],
        b: [f64; 3],
        scale: f64,
        seed: u64,
    },
}

impl Albedo {
    pub fn at(&self, p: &Vector3<f64>) -> [f64; 3] {
        match self {
            Albedo::Flat(c) => *c,
            Albedo::Checker { a, b, size } => {
                let s = (p.x / size).floor() + (p.y / size).floor() + (p.z / size).floor();
                if (s as i64).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Albedo::Stripes { a, b, period, axis } => {
                let phase = (p.dot(axis) / period).rem_euclid(1.0);
                if phase < 0.5 {
                    *a
                } else {
                    *b
                }
            }
            Albedo::Noise { a, b, scale, seed } => {
                let q = p / *scale;
                let n = 0.4 * value_noise(&(q * 0.26), seed.wrapping_add(104_729))
                    + 0.4 * value_noise(&q, *seed)
                    + 0.2 * value_noise(&(q * 2.03), seed.wrapping_add(7919));
                lerp3(a, b, n)
            }
        }
    }
}

fn lerp3(a: &[f64; 3], b: &[f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let h = splitmix64(
        seed ^ splitmix64(
            (ix as u64).wrapping_mul(73_856_093) ^ (iy as u64).wrapping_mul(19_349_663) ^ (iz as u64).wrapping_mul(83_492_791),
        ),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise with smoothstep fade, in `[0, 1]`.
fn value_noise(p: &Vector3<f64>, seed: u64) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let fade = |t: f64| t * t * (3.0 - 2.0 * t);
    let (u, v, w) = (fade(p.x - fx), fade(p.y - fy), fade(p.z - fz));
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - w), (1, w)] {
        for (dy, wy) in [(0, 1.0 - v), (1, v)] {
            for (dx, wx) in [(0, 1.0 - u), (1, u)] {
                acc += wx * wy * wz * lattice(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    AxisBox {
        min: Vector3<f64>,
        max: Vector3<f64>,
    },
    /// Infinite plane through `point` with unit `normal`.
    Plane {
        point: Vector3<f64>,
        normal: Vector3<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: Albedo,
}

/// Closest intersection along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Distance along the (unit) ray direction.
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub primitive: usize,
}

const HIT_EPS: f64 = 1e-9;

impl Shape {
    fn intersect(&self, ray: &Ray) -> Option<(f64, Vector3<f64>)> {
        match self {
            Shape::Sphere { center, radius } => {
                let oc = ray.origin - center;
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > HIT_EPS { -b - sq } else { -b + sq };
                (t > HIT_EPS).then(|| (t, (ray.at(t) - center) / *radius))
            }
            Shape::AxisBox { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis_near = 0;
                let mut axis_far = 0;
                for a in 0..3 {
                    let d = ray.direction[a];
                    let o = ray.origin[a];
                    if d.abs() < 1e-15 {
                        if o < min[a] || o > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((min[a] - o) / d, (max[a] - o) / d);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        axis_near = a;
                    }
                    if t1 < t_far {
                        t_far = t1;
                        axis_far = a;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, axis) = if t_near > HIT_EPS {
                    (t_near, axis_near)
                } else if t_far > HIT_EPS {
                    (t_far, axis_far)
                } else {
                    return None;
                };
                let mut n = Vector3::zeros();
                n[axis] = -ray.direction[axis].signum();
                Some((t, n))
            }
            Shape::Plane { point, normal } => {
                let denom = normal.dot(&ray.direction);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (point - ray.origin).dot(normal) / denom;
                (t > HIT_EPS).then_some((t, *normal))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    /// Direction towards the light (unit).
    pub light_dir: Vector3<f64>,
    pub ambient: f64,
    pub background: [f64; 3],
    /// Depth bounds (meters) shared by every view.
    pub near: f64,
    pub far: f64,
}

impl Scene {
    pub fn empty(near: f64, far: f64) -> Self {
        Self {
            primitives: Vec::new(),
            light_dir: Vector3::new(0.3, 0.8, 0.5).normalize(),
            ambient: 0.35,
            background: [0.55, 0.7, 0.9],
            near,
            far,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::InvalidInput(format!("scene bounds must satisfy 0 < near < far (near={}, far={})", self.near, self.far)));
        }
        Ok(())
    }

    /// Closest hit; ties go to the earlier primitive.
    pub fn trace(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, prim) in self.primitives.iter().enumerate() {
            if let Some((t, mut n)) = prim.shape.intersect(ray) {
                if best.is_none_or(|b| t < b.t) {
                    if n.dot(&ray.direction) > 0.0 {
                        n = -n;
                    }
                    best = Some(Hit { t, point: ray.at(t), normal: n, primitive: i });
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit) -> [f64; 3] {
        let albedo = self.primitives[hit.primitive].albedo.at(&hit.point);
        let lambert = hit.normal.dot(&self.light_dir).max(0.0);
        let k = self.ambient + (1.0 - self.ambient) * lambert;
        albedo.map(|c| (c * k).clamp(0.0, 1.0))
    }

    /// Color and z-depth seen along the ray through continuous pixel `px`.
    pub fn render_pixel(&self, cam: &Camera, px: &Vector2<f64>) -> ([f64; 3], f64, Option<usize>) {
        let ray = cam.pixel_ray(px);
        match self.trace(&ray) {
            Some(hit) => {
                let z = hit.t * ray.direction.dot(&cam.pose.forward());
                (self.shade(&hit), z, Some(hit.primitive))
            }
            None => (self.background, 0.0, None),
        }
    }

    /// Every primitive must reach the `[near, far]` depth slab of at least
    /// one of the given cameras (checked by ray-casting their pixels).
    pub fn check_visibility(&self, cams: &[Camera]) -> Result<()> {
        let mut seen = vec![false; self.primitives.len()];
        for cam in cams {
            let k = &cam.intrinsics;
            for y in (0..k.height).step_by(2) {
                for x in (0..k.width).step_by(2) {
                    let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    if let (_, z, Some(p)) = self.render_pixel(cam, &px) {
                        if z >= self.near && z <= self.far {
                            seen[p] = true;
                        }
                    }
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!(
                "primitive {i} never appears within [{}, {}] m from any viewpoint",
                self.near, self.far
            )));
        }
        Ok(())
    }
}

/// Renders one view at the camera's resolution: RGB and z-depth (0 where
/// the ray escapes). One ray per pixel through the pixel center.
pub fn render_view(scene: &Scene, cam: &Camera) -> (RgbImage, ScalarMap) {
    let k = &cam.intrinsics;
    let mut img = RgbImage::new(k.width, k.height, scene.background);
    let mut depth = ScalarMap::new(k.width, k.height, 0.0);
    for y in 0..k.height {
        for x in 0..k.width {
            let (c, z, _) = scene.render_pixel(cam, &Vector2::new(x as f64 + 0.5, y as f64 + 0.5));
            img.set(x, y, c);
            depth.set(x, y, z);
        }
    }
    (img, depth)
}

/// Rig parameters shared by every viewpoint of a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigParams {
    pub intrinsics: Intrinsics,
    pub baseline: f64,
}

/// Reference focal length (pixels) at the reference width below.
pub const REFERENCE_FOCAL: f64 = 711.0;
pub const REFERENCE_WIDTH: f64 = 864.0;
pub const DEFAULT_BASELINE: f64 = 0.08;

impl RigParams {
    /// Baseline 8 cm; focal scaled from 711 px at 864 px width to `width`;
    /// principal point at the image center.
    pub fn scaled_default(width: usize, height: usize) -> Result<Self> {
        let f = REFERENCE_FOCAL * width as f64 / REFERENCE_WIDTH;
        Ok(Self { intrinsics: Intrinsics::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)?, baseline: DEFAULT_BASELINE })
    }
}

pub const DEMO_WIDTH: usize = 96;
pub const DEMO_HEIGHT: usize = 64;
pub const DEMO_NEAR: f64 = 1.0;
pub const DEMO_FAR: f64 = 4.0;

/// Demo scene: textured ground, textured sphere, flat-colored box and a
/// striped back wall, all within 1–4 m of the demo trajectory.
pub fn demo_scene(seed: u64) -> Scene {
    let mut scene = Scene::empty(DEMO_NEAR, DEMO_FAR);
    scene.primitives = vec![
        Primitive {
            shape: Shape::Plane { point: Vector3::zeros(), normal: Vector3::new(0.0, 1.0, 0.0) },
            albedo: Albedo::Noise { a: [0.25, 0.2, 0.12], b: [0.9, 0.8, 0.55], scale: 0.06, seed },
        },
        Primitive {
            shape: Shape::Sphere { center: Vector3::new(-0.45, 0.32, 0.15), radius: 0.32 },
            albedo: Albedo::Noise { a: [0.1, 0.25, 0.7], b: [0.95, 0.6, 0.3], scale: 0.05, seed: seed.wrapping_add(1) },
        },
        Primitive {
            shape: Shape::AxisBox { min: Vector3::new(0.2, 0.0, -0.45), max: Vector3::new(0.7, 0.55, 0.05) },
            albedo: Albedo::Flat([0.8, 0.25, 0.2]),
        },
        Primitive {
            shape: Shape::Plane { point: Vector3::new(0.0, 0.0, -1.0), normal: Vector3::new(0.0, 0.0, 1.0) },
            albedo: Albedo::Noise { a: [0.3, 0.45, 0.3], b: [0.85, 0.9, 0.75], scale: 0.07, seed: seed.wrapping_add(2) },
        },
    ];
    scene
}

/// Left-eye poses on a horizontal arc looking at the demo scene's center.
/// `views` viewpoints spread evenly over ±15°.
pub fn demo_trajectory(views: usize) -> Result<Vec<Pose>> {
    if views == 0 {
        return Err(Error::InvalidInput("trajectory needs at least one view".into()));
    }
    let target = Vector3::new(0.0, 0.35, 0.0);
    let radius = 2.2;
    let height = 0.8;
    let span = 15f64.to_radians();
    (0..views)
        .map(|i| {
            let s = if views == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (views - 1) as f64 };
            let th = s * span;
            let eye = Vector3::new(radius * th.sin(), height, radius * th.cos());
            Pose::look_at(eye, target, Vector3::new(0.0, 1.0, 0.0))
        })
        .collect()
}

/// Minimum number of viewpoints a dataset needs (three source pairs plus a
/// held-out target).
pub const MIN_VIEWS: usize = 4;

/// Renders both eyes of every viewpoint and writes images, depths and the
/// manifest into `out`. Byte-identical for identical inputs.
pub fn generate_dataset(scene: &Scene, trajectory: &[Pose], rig: &RigParams, seed: u64, out: &Path) -> Result<DatasetManifest> {
    scene.validate()?;
    if trajectory.len() < MIN_VIEWS {
        return Err(Error::InvalidInput(format!("need at least {MIN_VIEWS} viewpoints, got {}", trajectory.len())));
    }
    let k = &rig.intrinsics;
    if k.width > MAX_RESOLUTION || k.height > MAX_RESOLUTION {
        return Err(Error::InvalidInput(format!("resolution {}x{} exceeds {MAX_RESOLUTION}x{MAX_RESOLUTION}", k.width, k.height)));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut views = Vec::with_capacity(trajectory.len());
    for (id, pose) in trajectory.iter().enumerate() {
        let stereo = StereoRig::new(rig.intrinsics, *pose, rig.baseline)?;
        let record = ViewRecord::with_default_names(id, *pose);
        for eye in Eye::BOTH {
            let (img, depth) = render_view(scene, &stereo.eye(eye));
            img.write_ppm(&out.join(record.image_name(eye)))?;
            depth.write_pfm(&out.join(record.depth_name(eye)))?;
        }
        views.push(record);
    }
    let manifest = DatasetManifest { baseline: rig.baseline, intrinsics: rig.intrinsics, near: scene.near, far: scene.far, seed, views };
    manifest.save(out)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(w: usize, h: usize) -> Camera {
        let f = 50.0;
        Camera::new(Intrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(), Pose::identity())
    }

    #[test]
    fn empty_scene_is_all_background() {
        let scene = Scene::empty(1.0, 4.0);
        let (img, depth) = render_view(&scene, &cam(16, 12));
        assert!(img.data.iter().all(|p| *p == scene.background));
        assert!(depth.data.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn fronto_parallel_plane_gives_constant_depth() {
        let mut scene = Scene::empty(1.0, 4.0);
        scene.primitives.push(Primitive {
            shape: Shape::Plane { point: Vector3::new(0.0, 0.0, 2.0), normal: Vector3::new(0.0, 0.0, -1.0) },
            albedo: Albedo::Checker { a: [1.0; 3], b: [0.0; 3], size: 0.1 },
        });
        let (_, depth) = render_view(&scene, &cam(16, 12));
        assert!(depth.data.iter().all(|&d| (d - 2.0).abs() < 1e-12));
    }

    #[test]
    fn sphere_center_pixel_depth() {
        let mut scene = Scene::empty(1.0, 4.0);
        scene
            .primitives
            .push(Primitive { shape: Shape::Sphere { center: Vector3::new(0.0, 0.0, 3.0), radius: 0.5 }, albedo: Albedo::Flat([0.5; 3]) });
        let c = cam(16, 12);
        let (_, z, p) = scene.render_pixel(&c, &Vector2::new(8.0, 6.0));
        assert_eq!(p, Some(0));
        assert!((z - 2.5).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_the_first_primitive() {
        let mut scene = Scene::empty(1.0, 4.0);
        for color in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] {
            scene.primitives.push(Primitive {
                shape: Shape::Plane { point: Vector3::new(0.0, 0.0, 2.0), normal: Vector3::new(0.0, 0.0, -1.0) },
                albedo: Albedo::Flat(color),
            });
        }
        let (_, _, p) = scene.render_pixel(&cam(8, 8), &Vector2::new(4.0, 4.0));
        assert_eq!(p, Some(0));
    }

    #[test]
    fn box_faces_and_inside_hits() {
        let shape = Shape::AxisBox { min: Vector3::new(-1.0, -1.0, 2.0), max: Vector3::new(1.0, 1.0, 3.0) };
        let (t, n) = shape.intersect(&Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0))).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
        assert_eq!(n, Vector3::new(0.0, 0.0, -1.0));
        let (t, _) = shape.intersect(&Ray::new(Vector3::new(0.0, 0.0, 2.5), Vector3::new(0.0, 0.0, 1.0))).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
        assert!(shape.intersect(&Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, -1.0))).is_none());
    }

    #[test]
    fn value_noise_is_bounded_and_continuous() {
        for i in 0..200 {
            let p = Vector3::new(i as f64 * 0.137, i as f64 * -0.071, 0.3);
            let v = value_noise(&p, 3);
            assert!((0.0..=1.0).contains(&v));
            let dv = (value_noise(&(p + Vector3::new(1e-7, 0.0, 0.0)), 3) - v).abs();
            assert!(dv < 1e-5);
        }
    }

    #[test]
    fn demo_scene_is_visible_from_the_demo_arc() {
        let rig = RigParams::scaled_default(DEMO_WIDTH, DEMO_HEIGHT).unwrap();
        assert!((rig.intrinsics.fx - 79.0).abs() < 1e-12);
        let cams: Vec<_> = demo_trajectory(7).unwrap().into_iter().map(|p| Camera::new(rig.intrinsics, p)).collect();
        demo_scene(0).check_visibility(&cams).unwrap();
    }

    #[test]
    fn dataset_needs_enough_views() {
        let dir = tempfile::tempdir().unwrap();
        let rig = RigParams::scaled_default(32, 16).unwrap();
        let poses = demo_trajectory(3).unwrap();
        assert!(generate_dataset(&demo_scene(0), &poses, &rig, 0, dir.path()).is_err());
    }
}
