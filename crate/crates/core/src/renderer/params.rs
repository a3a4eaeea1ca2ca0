use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::cell::{CellKernel, SensorCell};
use super::grid::SensorGrid;
use crate::error::{invalid_param, Result};
use crate::geometry::{quat_rotate, PointCloud, Quaternion, TpsBasis, TpsWarp};

/// Transformation applied to the cloud before rendering.
#[derive(Debug, Clone, Default)]
pub enum GeometricTransform {
    #[default]
    Identity,
    Rotation(Quaternion),
    Tps(TpsWarp),
}

impl GeometricTransform {
    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        match self {
            GeometricTransform::Identity => Ok(cloud.clone()),
            GeometricTransform::Rotation(q) => quat_rotate(*q, cloud),
            GeometricTransform::Tps(w) => Ok(w.apply(cloud)),
        }
    }

    fn kind(&self) -> GeometricKind {
        match self {
            GeometricTransform::Identity => GeometricKind::Identity,
            GeometricTransform::Rotation(_) => GeometricKind::Rotation,
            GeometricTransform::Tps(w) => GeometricKind::Tps(w.basis().clone()),
        }
    }

    fn params(&self) -> Vec<f64> {
        match self {
            GeometricTransform::Identity => vec![],
            GeometricTransform::Rotation(q) => q.to_array().to_vec(),
            GeometricTransform::Tps(w) => w.displacements().iter().flatten().copied().collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum GeometricKind {
    Identity,
    Rotation,
    Tps(Arc<TpsBasis>),
}

impl GeometricKind {
    fn len(&self) -> usize {
        match self {
            GeometricKind::Identity => 0,
            GeometricKind::Rotation => 4,
            GeometricKind::Tps(b) => 2 * b.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Position,
    Rotation,
    Elongation,
    Shift,
    Sensitivity,
    LateralKernel,
    DepthKernel,
    Attenuation,
    GeometricRotation,
    GeometricTps,
}

impl ParamClass {
    pub const CELL: [ParamClass; 8] = [
        ParamClass::Position,
        ParamClass::Rotation,
        ParamClass::Elongation,
        ParamClass::Shift,
        ParamClass::Sensitivity,
        ParamClass::LateralKernel,
        ParamClass::DepthKernel,
        ParamClass::Attenuation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamClass::Position => "position",
            ParamClass::Rotation => "rotation",
            ParamClass::Elongation => "elongation",
            ParamClass::Shift => "shift",
            ParamClass::Sensitivity => "sensitivity",
            ParamClass::LateralKernel => "lateral_kernel",
            ParamClass::DepthKernel => "depth_kernel",
            ParamClass::Attenuation => "attenuation",
            ParamClass::GeometricRotation => "geometric_rotation",
            ParamClass::GeometricTps => "geometric_tps",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::CELL
            .into_iter()
            .chain([ParamClass::GeometricRotation, ParamClass::GeometricTps])
            .find(|c| c.name() == s)
    }
}

/// Offsets inside one cell's parameter block.
pub(crate) mod slot {
    pub const POSITION: usize = 0;
    pub const ROTATION: usize = 3;
    pub const ELONGATION: usize = 7;
    pub const SHIFT: usize = 8;
    pub const SENSITIVITY: usize = 10;
    pub const KERNEL: usize = 11;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct CellSlots {
    pub lateral: usize,
    pub depth: usize,
    pub attenuation: usize,
}

impl CellSlots {
    pub fn len(&self) -> usize {
        slot::KERNEL + self.lateral + self.depth + self.attenuation
    }
}

/// Where each parameter of a grid (and its geometric transform) lives in
/// the flat vector: cells in row-major order, then the transform.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    cells: Vec<CellSlots>,
    offsets: Vec<usize>,
    geometric: GeometricKind,
}

impl ParamLayout {
    pub fn new(grid: &SensorGrid, transform: &GeometricTransform) -> Self {
        let cells: Vec<CellSlots> = grid
            .cells
            .iter()
            .map(|c| {
                let (lateral, depth) = match &c.kernel {
                    CellKernel::Separable(k) => (k.lateral.param_count(), k.depth.param_count()),
                    CellKernel::Radial(k) => (k.param_count(), 0),
                };
                CellSlots { lateral, depth, attenuation: c.attenuation.as_ref().map_or(0, |a| a.param_count()) }
            })
            .collect();
        let mut offsets = Vec::with_capacity(cells.len() + 1);
        let mut o = 0;
        for s in &cells {
            offsets.push(o);
            o += s.len();
        }
        offsets.push(o);
        Self { cells, offsets, geometric: transform.kind() }
    }

    pub fn len(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0) + self.geometric.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_range(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub(crate) fn cell_slots(&self, k: usize) -> CellSlots {
        self.cells[k]
    }

    pub fn geometric_range(&self) -> Range<usize> {
        let start = self.offsets.last().copied().unwrap_or(0);
        start..start + self.geometric.len()
    }

    pub fn class_of(&self, index: usize) -> Option<ParamClass> {
        let g = self.geometric_range();
        if g.contains(&index) {
            return Some(match self.geometric {
                GeometricKind::Rotation => ParamClass::GeometricRotation,
                _ => ParamClass::GeometricTps,
            });
        }
        let k = self.offsets.partition_point(|&o| o <= index).checked_sub(1)?;
        if k >= self.cells.len() {
            return None;
        }
        let s = self.cells[k];
        let r = index - self.offsets[k];
        Some(match r {
            _ if r < slot::ROTATION => ParamClass::Position,
            _ if r < slot::ELONGATION => ParamClass::Rotation,
            slot::ELONGATION => ParamClass::Elongation,
            _ if r < slot::SENSITIVITY => ParamClass::Shift,
            slot::SENSITIVITY => ParamClass::Sensitivity,
            _ if r < slot::KERNEL + s.lateral => ParamClass::LateralKernel,
            _ if r < slot::KERNEL + s.lateral + s.depth => ParamClass::DepthKernel,
            _ => ParamClass::Attenuation,
        })
    }

    /// Indices whose class is in `classes`, ascending.
    pub fn indices_of(&self, classes: &[ParamClass]) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.class_of(i).is_some_and(|c| classes.contains(&c))).collect()
    }

    fn compatible(&self, grid: &SensorGrid) -> Result<()> {
        let other = ParamLayout::new(grid, &GeometricTransform::Identity);
        if other.cells != self.cells {
            return Err(invalid_param(format!(
                "parameter layout ({} cells, {} values) does not match grid ({} cells, {} values)",
                self.cells.len(),
                self.offsets.last().unwrap_or(&0),
                other.cells.len(),
                other.offsets.last().unwrap_or(&0)
            )));
        }
        Ok(())
    }
}

/// Flat parameter vector over every cell parameter (θ_R) followed by the
/// geometric transform (θ_G). Quaternions are stored raw and normalized when
/// applied, so their gradients are tangent to the unit sphere.
#[derive(Debug, Clone)]
pub struct RenderParams {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl RenderParams {
    pub fn from_grid(grid: &SensorGrid, transform: &GeometricTransform) -> Self {
        let layout = ParamLayout::new(grid, transform);
        let mut values = Vec::with_capacity(layout.len());
        for c in &grid.cells {
            values.extend(c.position.iter());
            values.extend(c.view.rotation.to_array());
            values.push(c.view.elongation);
            values.extend(c.shift);
            values.push(c.sensitivity);
            match &c.kernel {
                CellKernel::Separable(k) => {
                    values.extend(k.lateral.params());
                    values.extend(k.depth.params());
                }
                CellKernel::Radial(k) => values.extend(k.params()),
            }
            if let Some(a) = &c.attenuation {
                values.extend(a.params());
            }
        }
        values.extend(transform.params());
        Self { values, layout: Arc::new(layout) }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(invalid_param(format!("expected {} parameters, got {}", self.values.len(), values.len())));
        }
        Ok(Self { values, layout: self.layout.clone() })
    }

    /// Writes the cell parameters into a copy of `grid` and validates it.
    pub fn apply(&self, grid: &SensorGrid) -> Result<SensorGrid> {
        self.layout.compatible(grid)?;
        let mut out = grid.clone();
        for (k, cell) in out.cells.iter_mut().enumerate() {
            self.write_cell(k, cell)?;
        }
        out.validate()?;
        Ok(out)
    }

    /// Cells of `grid` whose parameters would be rejected by [`apply`](Self::apply).
    pub fn invalid_cells(&self, grid: &SensorGrid) -> Result<Vec<usize>> {
        self.layout.compatible(grid)?;
        Ok((0..grid.cells.len())
            .filter(|&k| {
                let mut cell = grid.cells[k].clone();
                self.write_cell(k, &mut cell).and_then(|_| cell.validate()).is_err()
            })
            .collect())
    }

    fn write_cell(&self, k: usize, cell: &mut SensorCell) -> Result<()> {
        let p = &self.values[self.layout.cell_range(k)];
        let s = self.layout.cells[k];
        cell.position = nalgebra::Vector3::new(p[0], p[1], p[2]);
        cell.view.rotation = Quaternion::new(p[3], p[4], p[5], p[6]);
        cell.view.elongation = p[slot::ELONGATION];
        cell.shift = [p[slot::SHIFT], p[slot::SHIFT + 1]];
        cell.sensitivity = p[slot::SENSITIVITY];
        let lat = &p[slot::KERNEL..slot::KERNEL + s.lateral];
        let dep = &p[slot::KERNEL + s.lateral..slot::KERNEL + s.lateral + s.depth];
        match &mut cell.kernel {
            CellKernel::Separable(k) => {
                k.lateral = k.lateral.with_params(lat)?;
                k.depth = k.depth.with_params(dep)?;
            }
            CellKernel::Radial(k) => *k = k.with_params(lat)?,
        }
        if let Some(a) = &mut cell.attenuation {
            a.set_params(&p[slot::KERNEL + s.lateral + s.depth..])?;
        }
        Ok(())
    }

    pub fn geometric(&self) -> Result<GeometricTransform> {
        let p = &self.values[self.layout.geometric_range()];
        Ok(match &self.layout.geometric {
            GeometricKind::Identity => GeometricTransform::Identity,
            GeometricKind::Rotation => GeometricTransform::Rotation(Quaternion::new(p[0], p[1], p[2], p[3])),
            GeometricKind::Tps(b) => {
                GeometricTransform::Tps(TpsWarp::new(b.clone(), p.chunks_exact(2).map(|c| [c[0], c[1]]).collect())?)
            }
        })
    }

    /// Rescales every stored quaternion to unit norm.
    pub fn normalize_quaternions(&mut self) -> Result<()> {
        for k in 0..self.layout.cell_count() {
            let o = self.layout.offsets[k] + slot::ROTATION;
            normalize_in_place(&mut self.values[o..o + 4])?;
        }
        if let GeometricKind::Rotation = self.layout.geometric {
            let r = self.layout.geometric_range();
            normalize_in_place(&mut self.values[r])?;
        }
        Ok(())
    }
}

fn normalize_in_place(q: &mut [f64]) -> Result<()> {
    let n = Quaternion::new(q[0], q[1], q[2], q[3]).normalized()?;
    q.copy_from_slice(&n.to_array());
    Ok(())
}
