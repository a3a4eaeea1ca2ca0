//! Single-pass scatter of points into a regular planar grid of cells.

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::renderer::eval::{Accum, CellEval};
use crate::renderer::{finalize, RenderedImage, Scene, SensorGrid, Topology};

/// Points per scatter chunk. Fixed so results do not depend on the thread count.
const CHUNK: usize = 2048;

/// Regular lattice of cell centers in the shared cell frame.
#[derive(Debug, Clone)]
pub struct BinLayout {
    rot: Matrix3<f64>,
    rows: usize,
    cols: usize,
    origin: [f64; 2],
    pitch: [f64; 2],
    /// Reach of a point in cells along each axis.
    reach: [f64; 2],
}

fn precondition(msg: impl Into<String>) -> Error {
    Error::Precondition(msg.into())
}

impl BinLayout {
    /// Checks that all cells share one orientation and sit on a regular
    /// lattice in their frame, with bounded lateral kernels.
    pub fn detect(grid: &SensorGrid) -> Result<Self> {
        let Topology::Planar { rows, cols } = grid.topology else {
            return Err(precondition("binning needs a planar grid"));
        };
        if grid.cells.len() != rows * cols || grid.cells.is_empty() {
            return Err(precondition("grid cell count does not match its topology"));
        }
        let rot = grid.cells[0].view.rotation.to_matrix();
        let mut rho: f64 = 0.0;
        let mut shift = [0.0f64; 2];
        let mut lateral = Vec::with_capacity(grid.cells.len());
        for (k, c) in grid.cells.iter().enumerate() {
            if (c.view.rotation.to_matrix() - rot).abs().max() > 1e-12 {
                return Err(precondition(format!("cell {k} is not oriented like cell 0")));
            }
            let r = c.kernel.lateral_support().ok_or_else(|| precondition("binning needs bounded lateral kernels"))?;
            rho = rho.max(r);
            shift[0] = shift[0].max(c.shift[0].abs());
            shift[1] = shift[1].max(c.shift[1].abs());
            let v = rot * c.position;
            lateral.push([v.x, v.y]);
        }
        let origin = lateral[0];
        let span = |a: [f64; 2], b: [f64; 2], n: usize| [(b[0] - a[0]) / n as f64, (b[1] - a[1]) / n as f64];
        let ex = if cols > 1 { span(origin, lateral[cols - 1], cols - 1) } else { [0.0; 2] };
        let ey = if rows > 1 { span(origin, lateral[(rows - 1) * cols], rows - 1) } else { [0.0; 2] };
        let mut pitch = [ex[0], ey[1]];
        if cols == 1 {
            pitch[0] = if rows > 1 { pitch[1] } else { 1.0 };
        }
        if rows == 1 {
            pitch[1] = pitch[0];
        }
        if pitch.iter().any(|p| !(p.abs() > 0.0 && p.is_finite())) {
            return Err(precondition("cells do not span a lattice"));
        }
        let tol = 1e-6 * pitch[0].abs().min(pitch[1].abs());
        let mut dev = [0.0f64; 2];
        for i in 0..rows {
            for j in 0..cols {
                let a = lateral[i * cols + j];
                for d in 0..2 {
                    let ideal = origin[d] + if d == 0 { j as f64 * pitch[0] } else { i as f64 * pitch[1] };
                    dev[d] = dev[d].max((a[d] - ideal).abs());
                }
            }
        }
        if dev[0] > tol || dev[1] > tol {
            return Err(precondition("cell positions are not on a regular axis-aligned lattice"));
        }
        // Slack covers the lattice deviation, rotation roundoff and shifts.
        let slack = 1e-9 * (1.0 + origin[0].abs().max(origin[1].abs()));
        let reach = [
            (rho + shift[0] + dev[0] + slack) / pitch[0].abs() * (1.0 + 1e-9),
            (rho + shift[1] + dev[1] + slack) / pitch[1].abs() * (1.0 + 1e-9),
        ];
        Ok(Self { rot, rows, cols, origin, pitch, reach })
    }

    /// Smallest neighborhood radius (in cells) that loses no responses.
    pub fn neighborhood_radius(&self) -> usize {
        self.reach[0].max(self.reach[1]).ceil() as usize
    }

    /// Inclusive candidate index range along one axis, clipped to the grid.
    #[inline]
    fn range(&self, t: f64, d: usize, fixed: Option<usize>, n: usize) -> Option<(usize, usize)> {
        let u = (t - self.origin[d]) / self.pitch[d];
        let (lo, hi) = match fixed {
            Some(r) => {
                let c = (u + 0.5).floor();
                (c - r as f64, c + r as f64)
            }
            None => ((u - self.reach[d]).ceil(), (u + self.reach[d]).floor()),
        };
        let lo = lo.max(0.0);
        let hi = hi.min(n as f64 - 1.0);
        (lo <= hi).then_some((lo as usize, hi as usize))
    }
}

/// Per-cell reductions by scattering each point into the cells around it.
/// Chunks of points scatter into private images merged in chunk order.
pub(crate) fn accumulate(grid: &SensorGrid, scene: &Scene, layout: &BinLayout, radius: Option<usize>) -> Vec<Accum> {
    let evals: Vec<CellEval> = grid.cells.iter().map(|c| CellEval::new(c, &grid.channels)).collect();
    let ns = evals.first().map_or(0, |e| e.n_sums());
    let ncell = grid.cells.len();
    let partials: Vec<(Vec<f64>, Vec<f64>, Vec<Option<u32>>)> = scene
        .points
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut sums = vec![0.0; ncell * ns];
            let mut best = vec![0.0; ncell];
            let mut arg = vec![None; ncell];
            for (k, p) in chunk.iter().enumerate() {
                let idx = scene.original[ci * CHUNK + k];
                let t = layout.rot * p;
                let Some((j0, j1)) = layout.range(t.x, 0, radius, layout.cols) else { continue };
                let Some((i0, i1)) = layout.range(t.y, 1, radius, layout.rows) else { continue };
                for i in i0..=i1 {
                    for j in j0..=j1 {
                        let c = i * layout.cols + j;
                        evals[c].accumulate(idx, p, &mut sums[c * ns..(c + 1) * ns], &mut best[c], &mut arg[c]);
                    }
                }
            }
            (sums, best, arg)
        })
        .collect();
    let mut out: Vec<Accum> = (0..ncell).map(|_| Accum::new(ns)).collect();
    for (sums, best, arg) in &partials {
        for (c, acc) in out.iter_mut().enumerate() {
            for (a, b) in acc.sums.iter_mut().zip(&sums[c * ns..(c + 1) * ns]) {
                *a += b;
            }
            if let Some(idx) = arg[c] {
                Accum::offer(&mut acc.best, &mut acc.argmax, best[c], idx);
            }
        }
    }
    out
}

/// Renders a regular planar grid by orthographic binning. `radius` fixes
/// the neighborhood (in cells) instead of deriving it from kernel support.
pub fn orthographic_binning(cloud: &PointCloud, grid: &SensorGrid, radius: Option<usize>) -> Result<RenderedImage> {
    grid.validate()?;
    let layout = BinLayout::detect(grid)?;
    let scene = Scene::new(cloud)?;
    let accums = accumulate(grid, &scene, &layout, radius);
    Ok(finalize(grid, cloud, &accums))
}

/// Neighborhood radius in cells that [`orthographic_binning`] derives.
pub fn binning_neighborhood(grid: &SensorGrid) -> Result<usize> {
    Ok(BinLayout::detect(grid)?.neighborhood_radius())
}
