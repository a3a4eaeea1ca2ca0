use serde::{Deserialize, Serialize};

use super::cell::{look_rotation, CellKernel, SensorCell};
use crate::attenuation::AttenuationField;
use crate::error::{invalid_param, Result};
use crate::geometry::{cylinder_map, CylindricalGrid, Vec3};
use crate::kernels::{KernelSpec, ViewTransform};

/// Depth factor a density channel multiplies into the lateral response.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthWeight {
    /// The cell's own depth kernel (1 for radial kernels).
    #[default]
    Cell,
    /// No depth weighting.
    Unit,
    Kernel(KernelSpec),
}

/// One output channel of a render.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Channel {
    /// Max of the cell kernel response over the cloud.
    Range,
    /// Cell-frame depth of the point selected by the range reduction;
    /// `far` where no point responds.
    Depth {
        #[serde(default)]
        far: f64,
    },
    /// Sum of responses, optionally compressed by `log(1 + β·x)`.
    Density {
        #[serde(default)]
        depth: DepthWeight,
        #[serde(default)]
        log_beta: Option<f64>,
    },
}

impl Channel {
    pub const DENSITY: Channel = Channel::Density { depth: DepthWeight::Cell, log_beta: None };

    pub fn validate(&self) -> Result<()> {
        match self {
            Channel::Density { depth, log_beta } => {
                if let DepthWeight::Kernel(k) = depth {
                    k.validate()?;
                }
                if let Some(b) = log_beta {
                    if !(b.is_finite() && *b > 0.0) {
                        return Err(invalid_param(format!("log_beta must be > 0, got {b}")));
                    }
                }
                Ok(())
            }
            Channel::Depth { far } if !far.is_finite() => Err(invalid_param("far value must be finite")),
            _ => Ok(()),
        }
    }

    pub fn is_sum(&self) -> bool {
        matches!(self, Channel::Density { .. })
    }

    /// The four summation channels of the adaptive depth renderer: plain
    /// density plus the three exp-band depth bands, each log-compressed
    /// with β = 0.2.
    pub fn density_bands() -> Vec<Channel> {
        let beta = Some(0.2);
        std::iter::once(Channel::Density { depth: DepthWeight::Unit, log_beta: beta })
            .chain(KernelSpec::exp_band_presets().map(|k| Channel::Density { depth: DepthWeight::Kernel(k), log_beta: beta }))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Topology {
    Planar { rows: usize, cols: usize },
    Cylindrical(CylindricalGrid),
}

impl Topology {
    pub fn rows(&self) -> usize {
        match *self {
            Topology::Planar { rows, .. } => rows,
            Topology::Cylindrical(g) => g.rows,
        }
    }

    pub fn cols(&self) -> usize {
        match *self {
            Topology::Planar { cols, .. } => cols,
            Topology::Cylindrical(g) => g.cols,
        }
    }
}

/// Per-cell settings shared by every cell of a freshly built grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellTemplate {
    pub kernel: CellKernel,
    #[serde(default = "unit")]
    pub elongation: f64,
    #[serde(default = "unit")]
    pub sensitivity: f64,
    #[serde(default)]
    pub attenuation: Option<AttenuationField>,
}

fn unit() -> f64 {
    1.0
}

impl CellTemplate {
    pub fn new(kernel: CellKernel) -> Self {
        Self { kernel, elongation: 1.0, sensitivity: 1.0, attenuation: None }
    }

    fn cell(&self, position: Vec3, view: ViewTransform) -> SensorCell {
        SensorCell {
            position,
            view,
            shift: [0.0; 2],
            kernel: self.kernel,
            attenuation: self.attenuation.clone(),
            sensitivity: self.sensitivity,
        }
    }
}

/// Placement of a planar grid: cell centers tile `[-half_extent, half_extent]²`
/// in the plane `z = plane_z`, all looking along +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanarLayout {
    #[serde(default = "unit")]
    pub half_extent: f64,
    #[serde(default = "default_plane")]
    pub plane_z: f64,
}

fn default_plane() -> f64 {
    -1.2
}

impl Default for PlanarLayout {
    fn default() -> Self {
        Self { half_extent: 1.0, plane_z: default_plane() }
    }
}

/// Row-major array of sensor cells plus the channels rendered from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorGrid {
    pub topology: Topology,
    pub cells: Vec<SensorCell>,
    pub channels: Vec<Channel>,
}

impl SensorGrid {
    pub const INITIAL_PLANAR: (usize, usize) = (40, 40);
    pub const OUTPUT_PLANAR: (usize, usize) = (20, 20);
    pub const DEPTH_PLANAR: (usize, usize) = (64, 64);
    /// `(rows, cols)` of the input and output panoramic grids.
    pub const PANORAMIC_INPUT: (usize, usize) = (32, 96);
    pub const PANORAMIC_OUTPUT: (usize, usize) = (64, 192);

    pub fn planar(
        rows: usize,
        cols: usize,
        layout: PlanarLayout,
        template: &CellTemplate,
        channels: Vec<Channel>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid_param("planar grid needs at least one row and column"));
        }
        if !(layout.half_extent > 0.0 && layout.half_extent.is_finite() && layout.plane_z.is_finite()) {
            return Err(invalid_param("planar layout must have positive finite extent"));
        }
        let e = layout.half_extent;
        let (px, py) = (2.0 * e / cols as f64, 2.0 * e / rows as f64);
        let view = ViewTransform { elongation: template.elongation, ..ViewTransform::default() };
        let cells = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| {
                let pos = Vec3::new(-e + (j as f64 + 0.5) * px, -e + (i as f64 + 0.5) * py, layout.plane_z);
                template.cell(pos, view)
            })
            .collect();
        let grid = Self { topology: Topology::Planar { rows, cols }, cells, channels };
        grid.validate()?;
        Ok(grid)
    }

    /// Cells on the cylinder, each looking horizontally at the y axis.
    pub fn cylindrical(grid: CylindricalGrid, template: &CellTemplate, channels: Vec<Channel>) -> Result<Self> {
        let grid = grid.validated()?;
        let mut cells = Vec::with_capacity(grid.rows * grid.cols);
        for i in 0..grid.rows {
            for j in 0..grid.cols {
                let pos = cylinder_map(i, j, &grid)?;
                let rotation = look_rotation(Vec3::new(-pos.x, 0.0, -pos.z), Vec3::y())?;
                cells.push(template.cell(pos, ViewTransform { rotation, elongation: template.elongation }));
            }
        }
        let out = Self { topology: Topology::Cylindrical(grid), cells, channels };
        out.validate()?;
        Ok(out)
    }

    pub fn rows(&self) -> usize {
        self.topology.rows()
    }

    pub fn cols(&self) -> usize {
        self.topology.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.rows() * self.cols();
        if self.cells.len() != expected {
            return Err(invalid_param(format!("{} cells for a {} pixel grid", self.cells.len(), expected)));
        }
        if let Topology::Cylindrical(g) = self.topology {
            g.validated()?;
        }
        for (k, cell) in self.cells.iter().enumerate() {
            cell.validate().map_err(|e| invalid_param(format!("cell {k}: {e}")))?;
        }
        for c in &self.channels {
            c.validate()?;
        }
        Ok(())
    }

    pub fn cell(&self, i: usize, j: usize) -> &SensorCell {
        &self.cells[i * self.cols() + j]
    }

    pub fn set_attenuation(&mut self, field: Option<AttenuationField>) {
        for c in &mut self.cells {
            c.attenuation = field.clone();
        }
    }
}
