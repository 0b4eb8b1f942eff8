//! On-disk formats for templates, poses, cameras and frame sequences.
//!
//! A dataset directory holds `dataset.json` (camera table, frame records
//! and the template path), the template JSON, one pose JSON per frame and
//! PPM images with PGM masks.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{read_json, write_json};
use crate::kinematics::{Pose, SkinnedTemplate};
use crate::train::TrainFrame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TemplateFile {
    /// Parent joint index, −1 for the root.
    parents: Vec<i64>,
    joints: Vec<[f64; 3]>,
    vertices: Vec<[f64; 3]>,
    /// Nonzero (joint, weight) entries per vertex.
    weights: Vec<Vec<(usize, f64)>>,
}

pub fn template_to_json_value(t: &SkinnedTemplate) -> serde_json::Value {
    let file = TemplateFile {
        parents: t.parents().iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
        joints: t.rest_joints().iter().map(|v| (*v).into()).collect(),
        vertices: t.vertices().iter().map(|v| (*v).into()).collect(),
        weights: t
            .weights()
            .iter()
            .map(|row| row.iter().copied().enumerate().filter(|(_, w)| *w != 0.0).collect())
            .collect(),
    };
    serde_json::to_value(file).expect("template serializes")
}

pub fn save_template(path: &Path, t: &SkinnedTemplate) -> Result<()> {
    write_json(path, &template_to_json_value(t))
}

pub fn load_template(path: &Path) -> Result<SkinnedTemplate> {
    let file: TemplateFile = read_json(path)?;
    let k = file.parents.len();
    let parents = file
        .parents
        .iter()
        .map(|&p| match p {
            -1 => Ok(None),
            p if p >= 0 && (p as usize) < k => Ok(Some(p as usize)),
            p => Err(Error::format(path, format!("parent index {p} out of range"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut weights = Vec::with_capacity(file.weights.len());
    for (v, row) in file.weights.iter().enumerate() {
        let mut dense = vec![0.0; k];
        for &(j, w) in row {
            if j >= k {
                return Err(Error::format(path, format!("vertex {v}: joint {j} out of range")));
            }
            dense[j] = w;
        }
        weights.push(dense);
    }
    SkinnedTemplate::new(
        parents,
        file.joints.iter().map(|v| Vector3::from(*v)).collect(),
        file.vertices.iter().map(|v| Vector3::from(*v)).collect(),
        weights,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoseFile {
    rotations: Vec<[f64; 3]>,
    translation: [f64; 3],
}

pub fn save_pose(path: &Path, pose: &Pose) -> Result<()> {
    let file = PoseFile {
        rotations: pose.joint_rotations.iter().map(|v| (*v).into()).collect(),
        translation: pose.root_translation.into(),
    };
    write_json(path, &file)
}

pub fn load_pose(path: &Path) -> Result<Pose> {
    let file: PoseFile = read_json(path)?;
    let pose = Pose {
        joint_rotations: file.rotations.iter().map(|v| Vector3::from(*v)).collect(),
        root_translation: Vector3::from(file.translation),
    };
    pose.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(pose)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraRecord {
    pub fn from_camera(id: usize, c: &Camera) -> Self {
        Self {
            id,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: [0, 1, 2].map(|r| [0, 1, 2].map(|k| c.rotation[(r, k)])),
            translation: c.translation.into(),
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let cam = Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            rotation: Matrix3::from_fn(|r, k| self.rotation[r][k]),
            translation: Vector3::from(self.translation),
            near_clip: 0.01,
        };
        cam.validate()?;
        Ok(cam)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    /// Paths relative to the dataset directory.
    pub image: String,
    pub mask: String,
    pub camera: usize,
    pub pose: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub template: String,
    pub cameras: Vec<CameraRecord>,
    pub frames: Vec<FrameRecord>,
}

pub const DATASET_FILE: &str = "dataset.json";

/// Frame indices listed in a split file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub frames: Vec<usize>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let ds: Self = read_json(&dir.join(DATASET_FILE))?;
        let path = dir.join(DATASET_FILE);
        for (i, c) in ds.cameras.iter().enumerate() {
            if ds.cameras[..i].iter().any(|o| o.id == c.id) {
                return Err(Error::format(&path, format!("duplicate camera id {}", c.id)));
            }
        }
        for (i, f) in ds.frames.iter().enumerate() {
            if ds.camera(f.camera).is_none() {
                return Err(Error::format(
                    &path,
                    format!("frame {i} refers to unknown camera {}", f.camera),
                ));
            }
        }
        Ok(ds)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(DATASET_FILE), self)
    }

    pub fn camera(&self, id: usize) -> Option<&CameraRecord> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn load_template(&self, dir: &Path) -> Result<SkinnedTemplate> {
        load_template(&dir.join(&self.template))
    }

    /// Reads frame `index` and checks the image and mask against its camera.
    pub fn load_frame(&self, dir: &Path, index: usize) -> Result<TrainFrame> {
        let rec = self
            .frames
            .get(index)
            .ok_or_else(|| Error::Config(format!("frame {index} out of range")))?;
        let cam = self.camera(rec.camera).expect("validated on load").to_camera()?;
        let image_path = dir.join(&rec.image);
        let mask_path = dir.join(&rec.mask);
        let image = Image::read_ppm(&image_path)?;
        let mask = Image::read_pgm(&mask_path)?;
        for (img, path) in [(&image, &image_path), (&mask, &mask_path)] {
            if img.width != cam.width || img.height != cam.height {
                return Err(Error::format(
                    path,
                    format!(
                        "{}x{} does not match camera {} resolution {}x{}",
                        img.width, img.height, rec.camera, cam.width, cam.height
                    ),
                ));
            }
        }
        Ok(TrainFrame {
            image,
            mask,
            camera: cam,
            pose: load_pose(&dir.join(&rec.pose))?,
        })
    }

    pub fn load_frames(&self, dir: &Path, indices: &[usize]) -> Result<Vec<TrainFrame>> {
        indices.iter().map(|&i| self.load_frame(dir, i)).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.frames.len()).collect()
    }
}

pub fn load_split(path: &Path) -> Result<Split> {
    read_json(path)
}

pub fn save_split(path: &Path, split: &Split) -> Result<()> {
    write_json(path, split)
}

/// `dir/name` when it exists.
pub fn optional_file(dir: &Path, name: &str) -> Option<PathBuf> {
    let p = dir.join(name);
    p.exists().then_some(p)
}
