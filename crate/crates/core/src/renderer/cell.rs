use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::attenuation::AttenuationField;
use crate::error::{invalid_param, Result};
use crate::geometry::{Quaternion, Vec3};
use crate::kernels::{KernelSpec, SeparableKernel, ViewTransform};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CellKernel {
    /// `lateral(‖(x, y)‖) · depth(z)` in the cell frame.
    Separable(SeparableKernel),
    /// `k(‖(x, y, z)‖)` in the elongated cell frame.
    Radial(KernelSpec),
}

impl CellKernel {
    pub fn validate(&self) -> Result<()> {
        match self {
            CellKernel::Separable(k) => k.validate(),
            CellKernel::Radial(k) => k.validate(),
        }
    }

    /// Bound on the in-plane offset of any point with nonzero response.
    pub fn lateral_support(&self) -> Option<f64> {
        match self {
            CellKernel::Separable(k) => k.lateral.support_radius(),
            CellKernel::Radial(k) => k.support_radius(),
        }
    }

    pub fn lateral_spec(&self) -> &KernelSpec {
        match self {
            CellKernel::Separable(k) => &k.lateral,
            CellKernel::Radial(k) => k,
        }
    }

    pub fn depth_spec(&self) -> Option<&KernelSpec> {
        match self {
            CellKernel::Separable(k) => Some(&k.depth),
            CellKernel::Radial(_) => None,
        }
    }
}

/// One pixel's sampling function.
///
/// A point `c` is seen in the cell frame as `v = Rot·(c − position)`. The
/// lateral offset is `(v.x − shift.x, v.y − shift.y)` and the kernel depth
/// is `z = s·v.z`, so depth grows along the view direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorCell {
    pub position: Vec3,
    pub view: ViewTransform,
    #[serde(default)]
    pub shift: [f64; 2],
    pub kernel: CellKernel,
    #[serde(default)]
    pub attenuation: Option<AttenuationField>,
    #[serde(default = "one")]
    pub sensitivity: f64,
}

fn one() -> f64 {
    1.0
}

impl SensorCell {
    pub fn new(position: Vec3, kernel: CellKernel) -> Self {
        Self {
            position,
            view: ViewTransform::default(),
            shift: [0.0; 2],
            kernel,
            attenuation: None,
            sensitivity: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.position.iter().chain(&self.shift).all(|v| v.is_finite()) {
            return Err(invalid_param("cell position/shift must be finite"));
        }
        self.view.validate()?;
        self.kernel.validate()?;
        if let Some(a) = &self.attenuation {
            a.validate()?;
        }
        if !(self.sensitivity.is_finite() && self.sensitivity > 0.0) {
            return Err(invalid_param(format!("sensitivity must be > 0, got {}", self.sensitivity)));
        }
        Ok(())
    }

    /// Unit view direction in world coordinates.
    pub fn view_direction(&self) -> Vec3 {
        self.view.rotation.to_matrix().transpose() * Vec3::z()
    }
}

/// Rotation taking world coordinates into a frame looking along `dir`, with
/// the frame's y axis as close to world `up` as possible.
pub fn look_rotation(dir: Vec3, up: Vec3) -> Result<Quaternion> {
    let n = dir.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(invalid_param("view direction must be nonzero"));
    }
    let z = dir / n;
    let mut x = up.cross(&z);
    if x.norm() < 1e-12 {
        x = Vec3::z().cross(&z);
        if x.norm() < 1e-12 {
            x = Vec3::x();
        }
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let m = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Ok(Quaternion::from_rotation_matrix(&m))
}
