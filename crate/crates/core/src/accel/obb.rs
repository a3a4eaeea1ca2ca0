use nalgebra::Matrix3;

use crate::error::{invalid_param, Error, Result};
use crate::geometry::Vec3;
use crate::renderer::{CellKernel, SensorCell};

/// Oriented box. Rows of `axes` are the box axes in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub center: Vec3,
    pub half: Vec3,
    pub axes: Matrix3<f64>,
}

impl Obb {
    pub fn new(center: Vec3, half: Vec3, axes: Matrix3<f64>) -> Result<Self> {
        if !half.iter().all(|h| h.is_finite() && *h > 0.0) {
            return Err(invalid_param(format!("OBB half-extents must be > 0, got {half:?}")));
        }
        if !(center.iter().all(|v| v.is_finite()) && axes.iter().all(|v| v.is_finite())) {
            return Err(invalid_param("OBB must be finite"));
        }
        Ok(Self { center, half, axes })
    }

    #[inline]
    pub fn contains(&self, p: &Vec3) -> bool {
        let d = self.axes * (p - self.center);
        d.x.abs() <= self.half.x && d.y.abs() <= self.half.y && d.z.abs() <= self.half.z
    }

    /// Separating-axis test against the box `[lo, hi]`. Conservative: may
    /// report an intersection for nearly touching boxes, never misses one.
    pub fn intersects_aabb(&self, lo: &Vec3, hi: &Vec3) -> bool {
        let a_half = (hi - lo) * 0.5;
        // Translation and rotation expressed in the AABB frame; columns of
        // `r` are the OBB axes.
        let t = self.center - (lo + hi) * 0.5;
        let r = self.axes.transpose();
        let abs_r = r.map(|v| v.abs() + 1e-12);
        let b = &self.half;
        for i in 0..3 {
            let rb = b.x * abs_r[(i, 0)] + b.y * abs_r[(i, 1)] + b.z * abs_r[(i, 2)];
            if t[i].abs() > a_half[i] + rb {
                return false;
            }
        }
        for j in 0..3 {
            let ra = a_half.x * abs_r[(0, j)] + a_half.y * abs_r[(1, j)] + a_half.z * abs_r[(2, j)];
            let tb = t.x * r[(0, j)] + t.y * r[(1, j)] + t.z * r[(2, j)];
            if tb.abs() > ra + b[j] {
                return false;
            }
        }
        for i in 0..3 {
            let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
            for j in 0..3 {
                let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
                let ra = a_half[i1] * abs_r[(i2, j)] + a_half[i2] * abs_r[(i1, j)];
                let rb = b[j1] * abs_r[(i, j2)] + b[j2] * abs_r[(i, j1)];
                let tt = t[i2] * r[(i1, j)] - t[i1] * r[(i2, j)];
                if tt.abs() > ra + rb {
                    return false;
                }
            }
        }
        true
    }

    /// Whether every corner of `[lo, hi]` lies inside the box.
    pub fn contains_aabb(&self, lo: &Vec3, hi: &Vec3) -> bool {
        (0..8).all(|m| {
            let c = Vec3::new(
                if m & 1 == 0 { lo.x } else { hi.x },
                if m & 2 == 0 { lo.y } else { hi.y },
                if m & 4 == 0 { lo.z } else { hi.z },
            );
            self.contains(&c)
        })
    }
}

fn inflate(h: f64) -> f64 {
    (h * (1.0 + 1e-9) + 1e-12).max(1e-12)
}

/// Box in the cell frame enclosing every point the cell can respond to.
///
/// Separable kernels bound only the lateral offset, so the box spans the
/// scene's extent along the view axis (`scene` is its axis-aligned bounds).
/// Radial kernels bound the elongated distance, giving `ρ/s` along the view.
pub fn support_obb(cell: &SensorCell, scene: (Vec3, Vec3)) -> Result<Obb> {
    let rho = cell
        .kernel
        .lateral_support()
        .ok_or_else(|| Error::Unsupported(format!("{} kernel has unbounded support", cell.kernel.lateral_spec().family_name())))?;
    let m = cell.view.rotation.to_matrix();
    let (zc, zh) = match cell.kernel {
        CellKernel::Separable(_) => {
            let dir = Vec3::new(m[(2, 0)], m[(2, 1)], m[(2, 2)]);
            let (lo, hi) = scene;
            let c = (lo + hi) * 0.5;
            let h = (hi - lo) * 0.5;
            let mid = dir.dot(&(c - cell.position));
            let ext = dir.x.abs() * h.x + dir.y.abs() * h.y + dir.z.abs() * h.z;
            (mid, ext)
        }
        CellKernel::Radial(_) => (0.0, rho / cell.view.elongation),
    };
    let local = Vec3::new(cell.shift[0], cell.shift[1], zc);
    let center = cell.position + m.transpose() * local;
    Obb::new(center, Vec3::new(inflate(rho), inflate(rho), inflate(zh)), m)
}
