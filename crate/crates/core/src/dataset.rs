//! Dataset directory layout: `manifest.json` plus `view_{n:03}_{L|R}.ppm` and
//! `depth_{n:03}_{L|R}.pfm` per viewpoint.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Eye, Intrinsics, Pose, StereoRig};
use crate::image::{RgbImage, ScalarMap};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Pose as stored on disk: row-major rotation and camera center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<Pose> for PoseRecord {
    fn from(p: Pose) -> Self {
        let r = &p.rotation;
        Self {
            rotation: [[r[(0, 0)], r[(0, 1)], r[(0, 2)]], [r[(1, 0)], r[(1, 1)], r[(1, 2)]], [r[(2, 0)], r[(2, 1)], r[(2, 2)]]],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<Pose> {
        let r = &self.rotation;
        let rot = Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]);
        let t = &self.translation;
        Pose::new(rot, Vector3::new(t[0], t[1], t[2]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    pub id: usize,
    pub left_image: String,
    pub right_image: String,
    pub left_depth: String,
    pub right_depth: String,
    /// Left-eye pose; the right eye follows from the shared baseline.
    pub pose: PoseRecord,
}

impl ViewRecord {
    pub fn with_default_names(id: usize, pose: Pose) -> Self {
        Self {
            id,
            left_image: format!("view_{id:03}_L.ppm"),
            right_image: format!("view_{id:03}_R.ppm"),
            left_depth: format!("depth_{id:03}_L.pfm"),
            right_depth: format!("depth_{id:03}_R.pfm"),
            pose: pose.into(),
        }
    }

    pub fn image_name(&self, eye: Eye) -> &str {
        match eye {
            Eye::Left => &self.left_image,
            Eye::Right => &self.right_image,
        }
    }

    pub fn depth_name(&self, eye: Eye) -> &str {
        match eye {
            Eye::Left => &self.left_depth,
            Eye::Right => &self.right_depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub baseline: f64,
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
    pub seed: u64,
    pub views: Vec<ViewRecord>,
}

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate(dir)?;
        Ok(m)
    }

    fn validate(&self, dir: &Path) -> Result<()> {
        self.intrinsics.validate()?;
        if !(self.baseline > 0.0) || !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::InvalidInput("manifest has invalid baseline or depth bounds".into()));
        }
        for (i, v) in self.views.iter().enumerate() {
            if v.id != i {
                return Err(Error::InvalidInput(format!("view {i} has id {}", v.id)));
            }
            v.pose.to_pose()?;
            for name in [&v.left_image, &v.right_image, &v.left_depth, &v.right_depth] {
                if !dir.join(name).is_file() {
                    return Err(Error::InvalidInput(format!("manifest references missing file {name}")));
                }
            }
        }
        Ok(())
    }

    pub fn rig(&self, view: usize) -> Result<StereoRig> {
        StereoRig::new(self.intrinsics, self.views[view].pose.to_pose()?, self.baseline)
    }
}

/// One viewpoint loaded into memory.
#[derive(Debug, Clone)]
pub struct StereoView {
    pub id: usize,
    pub rig: StereoRig,
    pub images: [RgbImage; 2],
    pub depths: [ScalarMap; 2],
}

impl StereoView {
    pub fn image(&self, eye: Eye) -> &RgbImage {
        &self.images[eye_index(eye)]
    }

    pub fn depth(&self, eye: Eye) -> &ScalarMap {
        &self.depths[eye_index(eye)]
    }

    pub fn camera(&self, eye: Eye) -> Camera {
        self.rig.eye(eye)
    }
}

#[inline]
pub fn eye_index(eye: Eye) -> usize {
    match eye {
        Eye::Left => 0,
        Eye::Right => 1,
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub views: Vec<StereoView>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let k = manifest.intrinsics;
        let mut views = Vec::with_capacity(manifest.views.len());
        for (i, rec) in manifest.views.iter().enumerate() {
            let load_img = |name: &str| -> Result<RgbImage> {
                let img = RgbImage::read_ppm(&dir.join(name))?;
                check_size(name, img.width, img.height, &k)?;
                Ok(img)
            };
            let load_depth = |name: &str| -> Result<ScalarMap> {
                let d = ScalarMap::read_pfm(&dir.join(name))?;
                check_size(name, d.width, d.height, &k)?;
                Ok(d)
            };
            views.push(StereoView {
                id: i,
                rig: manifest.rig(i)?,
                images: [load_img(&rec.left_image)?, load_img(&rec.right_image)?],
                depths: [load_depth(&rec.left_depth)?, load_depth(&rec.right_depth)?],
            });
        }
        Ok(Self { root: dir.to_path_buf(), manifest, views })
    }

    pub fn near(&self) -> f64 {
        self.manifest.near
    }

    pub fn far(&self) -> f64 {
        self.manifest.far
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.manifest.intrinsics
    }
}

fn check_size(name: &str, w: usize, h: usize, k: &Intrinsics) -> Result<()> {
    if w != k.width || h != k.height {
        return Err(Error::InvalidInput(format!("{name} is {w}x{h}, manifest intrinsics say {}x{}", k.width, k.height)));
    }
    Ok(())
}
