//! Weak-perspective and pinhole projection.
//!
//! Weak-perspective output lives in normalized image coordinates where
//! `[-1, 1]` spans the crop; pixels are only produced at the raster and
//! file boundaries.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotmath::{Mat3, RotationValue, Vec3};

pub type Vec2 = Vector2<f64>;

pub const DEFAULT_FOCAL: f64 = 5000.0;
pub const DEFAULT_IMAGE_SIZE: usize = 224;

/// Scaled orthographic camera `(s, tx, ty)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakPerspectiveCamera {
    pub scale: f64,
    pub translation: [f64; 2],
    pub focal: f64,
    pub image_size: usize,
}

impl Default for WeakPerspectiveCamera {
    fn default() -> Self {
        Self {
            scale: 1.0,
            translation: [0.0, 0.0],
            focal: DEFAULT_FOCAL,
            image_size: DEFAULT_IMAGE_SIZE,
        }
    }
}

impl WeakPerspectiveCamera {
    pub fn new(scale: f64, translation: [f64; 2]) -> Result<Self> {
        let cam = Self {
            scale,
            translation,
            ..Self::default()
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidCamera(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.focal > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal must be positive, got {}",
                self.focal
            )));
        }
        Ok(())
    }

    pub fn project_point(&self, p: &Vec3) -> Vec2 {
        Vec2::new(
            self.scale * p.x + self.translation[0],
            self.scale * p.y + self.translation[1],
        )
    }

    /// Camera-space translation of the equivalent pinhole camera, with depth
    /// chosen so the focal length reproduces the scale on the pixel lattice.
    pub fn perspective_translation(&self) -> Vec3 {
        Vec3::new(
            self.translation[0] / self.scale,
            self.translation[1] / self.scale,
            2.0 * self.focal / ((self.image_size as f64 - 1.0) * self.scale),
        )
    }
}

/// `(x, y, z) -> s (x, y) + t`; depth is ignored.
pub fn project_weak(points: &[Vec3], cam: &WeakPerspectiveCamera) -> Vec<Vec2> {
    points.iter().map(|p| cam.project_point(p)).collect()
}

/// Normalized coordinate to pixel position with `-1 -> 0` and `1 -> size - 1`.
pub fn normalized_to_pixel(x: f64, size: usize) -> f64 {
    (x + 1.0) * 0.5 * (size as f64 - 1.0)
}

pub fn pixel_to_normalized(p: f64, size: usize) -> f64 {
    2.0 * p / (size as f64 - 1.0) - 1.0
}

/// Shifts a projected point set so its centroid lands on `center`.
pub fn recenter(points: &[Vec2], center: Vec2) -> Vec<Vec2> {
    if points.is_empty() {
        return Vec::new();
    }
    let c = points.iter().fold(Vec2::zeros(), |a, p| a + p) / points.len() as f64;
    points.iter().map(|p| p - c + center).collect()
}

/// Pinhole camera with extrinsics `x_cam = R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveCamera {
    pub focal: [f64; 2],
    pub principal_point: [f64; 2],
    pub rotation: RotationValue,
    pub translation: [f64; 3],
}

impl PerspectiveCamera {
    pub fn new(
        focal: [f64; 2],
        principal_point: [f64; 2],
        rotation: RotationValue,
        translation: [f64; 3],
    ) -> Result<Self> {
        if !(focal[0] > 0.0 && focal[1] > 0.0) {
            return Err(Error::InvalidCamera("focal components must be positive".into()));
        }
        rotation.to_matrix()?;
        Ok(Self {
            focal,
            principal_point,
            rotation,
            translation,
        })
    }

    pub fn to_camera(&self, p: &Vec3) -> Result<Vec3> {
        let r: Mat3 = self.rotation.to_matrix()?;
        Ok(r * p + Vec3::from(self.translation))
    }

    fn divide(&self, c: &Vec3) -> Result<Vec2> {
        if c.z <= 1e-9 {
            return Err(Error::BehindCamera(c.z));
        }
        Ok(Vec2::new(
            self.focal[0] * c.x / c.z + self.principal_point[0],
            self.focal[1] * c.y / c.z + self.principal_point[1],
        ))
    }
}

/// Pinhole projection to pixels. Fails if any point is at or behind the camera plane.
pub fn project_persp(points: &[Vec3], cam: &PerspectiveCamera) -> Result<Vec<Vec2>> {
    let r = cam.rotation.to_matrix()?;
    let t = Vec3::from(cam.translation);
    points.iter().map(|p| cam.divide(&(r * p + t))).collect()
}
