use serde::{Deserialize, Serialize};

use super::cell::look_rotation;
use super::grid::{CellTemplate, Channel, SensorGrid};
use super::RenderedImage;
use crate::error::{invalid_param, Result};
use crate::geometry::{CylindricalGrid, Quaternion, Vec3};
use crate::kernels::ViewTransform;

/// Radius, height offset and vertical view offset at one end of a column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnEnd {
    pub radius: f64,
    /// Added to the default row height.
    pub height: f64,
    /// Vertical displacement of the view target on the y axis.
    pub vertical: f64,
}

impl Default for ColumnEnd {
    fn default() -> Self {
        Self { radius: CylindricalGrid::RADIUS, height: 0.0, vertical: 0.0 }
    }
}

/// Eight placement parameters of one cylindrical-grid column.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ColumnParams {
    /// Rotation of the column about the y axis, in units of column spacing.
    pub angle_shift: f64,
    /// Horizontal displacement of the view target, along the column tangent.
    pub view_shift: f64,
    pub top: ColumnEnd,
    pub bottom: ColumnEnd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellPlacement {
    pub position: Vec3,
    pub rotation: Quaternion,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Cell placements for every cell (row-major) of `grid` from per-column
/// parameters. Row 0 uses the bottom triple and the last row the top one;
/// rows in between interpolate linearly.
pub fn interpolate_column_params(columns: &[ColumnParams], grid: &CylindricalGrid) -> Result<Vec<CellPlacement>> {
    let grid = grid.validated()?;
    if columns.len() != grid.cols {
        return Err(invalid_param(format!("{} column parameter sets for {} columns", columns.len(), grid.cols)));
    }
    let mut out = Vec::with_capacity(grid.rows * grid.cols);
    for i in 0..grid.rows {
        let t = i as f64 / (grid.rows - 1) as f64;
        for (j, cp) in columns.iter().enumerate() {
            let r = lerp(cp.bottom.radius, cp.top.radius, t);
            if !(r.is_finite() && r > 0.0) {
                return Err(invalid_param(format!("cell ({i}, {j}): interpolated radius {r} must be > 0")));
            }
            let mut col = j as f64 + cp.angle_shift;
            if grid.full_circle {
                col = col.rem_euclid(grid.cols as f64);
            }
            let theta = grid.column_angle(col);
            let (sin, cos) = (theta.sin(), theta.cos());
            let y = grid.row_height(i as f64);
            let position = Vec3::new(-r * sin, y + lerp(cp.bottom.height, cp.top.height, t), r * cos);
            let tangent = Vec3::new(-cos, 0.0, -sin);
            let target = Vec3::new(0.0, y + lerp(cp.bottom.vertical, cp.top.vertical, t), 0.0) + cp.view_shift * tangent;
            out.push(CellPlacement { position, rotation: look_rotation(target - position, Vec3::y())? });
        }
    }
    Ok(out)
}

/// Cylindrical sensor grid placed by per-column parameters.
pub fn panoramic_grid(
    columns: &[ColumnParams],
    grid: CylindricalGrid,
    template: &CellTemplate,
    channels: Vec<Channel>,
) -> Result<SensorGrid> {
    let mut out = SensorGrid::cylindrical(grid, template, channels)?;
    for (cell, p) in out.cells.iter_mut().zip(interpolate_column_params(columns, &grid)?) {
        cell.position = p.position;
        cell.view = ViewTransform { rotation: p.rotation, elongation: template.elongation };
    }
    out.validate()?;
    Ok(out)
}

/// Dense `(2·half_rows + 1) × (2·half_cols + 1)` convolution kernel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub half_rows: usize,
    pub half_cols: usize,
    pub data: Vec<f64>,
}

impl ConvKernel {
    pub fn new(half_rows: usize, half_cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != (2 * half_rows + 1) * (2 * half_cols + 1) {
            return Err(invalid_param("convolution kernel data does not match its size"));
        }
        Ok(Self { half_rows, half_cols, data })
    }

    /// `K(dx, dy)` for column offset `dx` and row offset `dy`.
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let w = 2 * self.half_cols + 1;
        let r = (dy + self.half_rows as isize) as usize;
        let c = (dx + self.half_cols as isize) as usize;
        self.data[r * w + c]
    }
}

/// `Î(x, y) = Σ_j Σ_i I((x + j) mod width, y + i) · K(−j, −i)` per channel,
/// wrapping across columns and zero-padding across rows.
pub fn cyclic_convolve(image: &RenderedImage, kernel: &ConvKernel) -> Result<RenderedImage> {
    let (kh, kw) = (kernel.half_rows as isize, kernel.half_cols as isize);
    if 2 * kernel.half_cols + 1 > image.width || 2 * kernel.half_rows + 1 > image.height {
        return Err(invalid_param(format!(
            "{}×{} kernel larger than {}×{} image",
            2 * kernel.half_rows + 1,
            2 * kernel.half_cols + 1,
            image.height,
            image.width
        )));
    }
    let (w, h) = (image.width as isize, image.height as isize);
    let mut out = RenderedImage::zeros(image.width, image.height, image.channels);
    for k in 0..image.channels {
        let src = image.channel(k);
        let dst = out.channel_mut(k);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in -kh..=kh {
                    let yy = y + i;
                    if yy < 0 || yy >= h {
                        continue;
                    }
                    for j in -kw..=kw {
                        let xx = (x + j).rem_euclid(w);
                        acc += src[(yy * w + xx) as usize] * kernel.at(-j, -i);
                    }
                }
                dst[(y * w + x) as usize] = acc;
            }
        }
    }
    Ok(out)
}
