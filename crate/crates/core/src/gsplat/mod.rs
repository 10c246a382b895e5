//! 3D Gaussian primitives and a differentiable tile rasterizer.
//!
//! Scenes are stored as structure-of-arrays. Spherical-harmonic coefficients
//! are laid out coefficient-major per Gaussian (`sh[k * 3 + c]`), and colors
//! are evaluated along the canonical-frame direction from the camera center
//! to the Gaussian center.

pub mod io;
mod op;
pub mod ply;
mod raster;
pub mod sh;

pub use op::render_on_tape;
pub use raster::{
    render, render_backward, render_naive, Camera, GaussianGrads, PoseGrads, RenderOutput,
    RenderSettings, RenderState,
};

use crate::geometry::{Mat3, PoseSE3, Vec3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GsplatError {
    #[error("gaussian {index}: non-finite {field}")]
    NonFinite { index: usize, field: &'static str },
    #[error("inconsistent scene: {0}")]
    Shape(String),
    #[error("render state does not match this scene or camera")]
    StateMismatch,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("ply: {0}")]
    Ply(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, GsplatError>;

/// One activated Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: [f64; 3],
    /// `(w, x, y, z)`.
    pub quat: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub sh: Vec<f64>,
}

/// A set of Gaussians sharing one SH degree.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    pub sh_degree: usize,
    pub mu: Vec<[f64; 3]>,
    pub quat: Vec<[f64; 4]>,
    pub scale: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub sh: Vec<f64>,
}

impl GaussianScene {
    pub fn new(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            mu: Vec::new(),
            quat: Vec::new(),
            scale: Vec::new(),
            opacity: Vec::new(),
            sh: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// SH values per Gaussian (`3·(deg+1)²`).
    pub fn sh_dim(&self) -> usize {
        3 * sh::num_coeffs(self.sh_degree)
    }

    pub fn push(&mut self, g: GaussianPrimitive) -> Result<()> {
        if g.sh.len() != self.sh_dim() {
            return Err(GsplatError::Shape(format!(
                "expected {} SH values, got {}",
                self.sh_dim(),
                g.sh.len()
            )));
        }
        self.mu.push(g.mu);
        self.quat.push(g.quat);
        self.scale.push(g.scale);
        self.opacity.push(g.opacity);
        self.sh.extend_from_slice(&g.sh);
        Ok(())
    }

    pub fn get(&self, i: usize) -> GaussianPrimitive {
        let d = self.sh_dim();
        GaussianPrimitive {
            mu: self.mu[i],
            quat: self.quat[i],
            scale: self.scale[i],
            opacity: self.opacity[i],
            sh: self.sh[i * d..(i + 1) * d].to_vec(),
        }
    }

    pub fn extend(&mut self, other: &GaussianScene) -> Result<()> {
        if other.sh_degree != self.sh_degree {
            return Err(GsplatError::Shape("SH degree differs".into()));
        }
        self.mu.extend_from_slice(&other.mu);
        self.quat.extend_from_slice(&other.quat);
        self.scale.extend_from_slice(&other.scale);
        self.opacity.extend_from_slice(&other.opacity);
        self.sh.extend_from_slice(&other.sh);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.quat.len() != n
            || self.scale.len() != n
            || self.opacity.len() != n
            || self.sh.len() != n * self.sh_dim()
        {
            return Err(GsplatError::Shape("field lengths differ".into()));
        }
        if self.sh_degree > sh::MAX_DEGREE {
            return Err(GsplatError::Unsupported(format!(
                "SH degree {}",
                self.sh_degree
            )));
        }
        let d = self.sh_dim();
        for i in 0..n {
            let checks: [(&'static str, bool); 5] = [
                ("mu", self.mu[i].iter().all(|v| v.is_finite())),
                ("quat", self.quat[i].iter().all(|v| v.is_finite())),
                ("scale", self.scale[i].iter().all(|v| v.is_finite())),
                ("opacity", self.opacity[i].is_finite()),
                (
                    "sh",
                    self.sh[i * d..(i + 1) * d].iter().all(|v| v.is_finite()),
                ),
            ];
            if let Some((field, _)) = checks.iter().find(|(_, ok)| !ok) {
                return Err(GsplatError::NonFinite { index: i, field });
            }
        }
        Ok(())
    }

    /// Apply a rigid transform `q` to every Gaussian. Degree ≤ 1 only, since
    /// higher SH bands are not rotated.
    pub fn transformed(&self, q: &PoseSE3) -> Result<Self> {
        if self.sh_degree > 1 {
            return Err(GsplatError::Unsupported(
                "rigid transform of SH degree > 1".into(),
            ));
        }
        let mut out = self.clone();
        let qr = nalgebra::UnitQuaternion::from_matrix(&q.rot);
        for i in 0..self.len() {
            let m = q.transform_point(&Vec3::from(self.mu[i]));
            out.mu[i] = [m.x, m.y, m.z];
            let [w, x, y, z] = self.quat[i];
            let g =
                nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
            let r = qr * g;
            out.quat[i] = [r.w, r.i, r.j, r.k];
            if self.sh_degree == 1 {
                let d = self.sh_dim();
                sh::rotate_band1(&mut out.sh[i * d..(i + 1) * d], &q.rot);
            }
        }
        Ok(out)
    }
}

/// Pixel-aligned Gaussians of several context views, view-major then
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMap {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub scene: GaussianScene,
}

impl GaussianMap {
    pub fn new(views: usize, height: usize, width: usize, scene: GaussianScene) -> Result<Self> {
        if scene.len() != views * height * width {
            return Err(GsplatError::Shape(format!(
                "{} gaussians for {views} views of {height}x{width}",
                scene.len()
            )));
        }
        Ok(Self {
            views,
            height,
            width,
            scene,
        })
    }

    pub fn index(&self, view: usize, y: usize, x: usize) -> usize {
        (view * self.height + y) * self.width + x
    }

    /// Centers of one view as an `H·W` list.
    pub fn view_centers(&self, view: usize) -> &[[f64; 3]] {
        let n = self.height * self.width;
        &self.scene.mu[view * n..(view + 1) * n]
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_mat(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

#[cfg(test)]
mod tests;
