//! Pinhole camera: x right, y down, looking along +z in camera space.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation W.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation d, so q = W p + d.
    pub translation: Vector3<f64>,
    pub near_clip: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    /// `fov_x` is the horizontal field of view in radians.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_x: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("camera eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("camera up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        let cam = Self {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            rotation,
            translation: -(rotation * eye),
            near_clip: 0.01,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.near_clip]
            .iter()
            .chain(self.rotation.iter())
            .chain(self.translation.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("camera parameters".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 || self.near_clip <= 0.0 {
            return Err(Error::Config(
                "camera focal lengths and near clip must be positive".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera resolution must be nonzero".into()));
        }
        let orth = (self.rotation * self.rotation.transpose() - Matrix3::identity())
            .abs()
            .max();
        if orth > 1e-6 || self.rotation.determinant() < 0.0 {
            return Err(Error::Config("camera rotation is not a proper rotation".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates, −Wᵀd.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}
