use std::sync::Arc;

use nalgebra::{DMatrix, Matrix2};

use super::{PointCloud, Vec3};
use crate::error::{invalid_param, Error, Result};

/// TPS radial basis `U(r) = r² log r`, written in terms of `r²`.
fn radial(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// `dU/dp` divided by `(p - c)`: `2 log r + 1`.
fn radial_grad_factor(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2.ln() + 1.0
    }
}

/// Control points of a planar thin-plate spline and the inverse of its
/// interpolation system. Shared by every warp over the same control layout.
#[derive(Debug, Clone)]
pub struct TpsBasis {
    control: Vec<[f64; 2]>,
    /// Inverse of the `(n+3)×(n+3)` system `[[K, P], [Pᵀ, 0]]`.
    inverse: DMatrix<f64>,
}

impl TpsBasis {
    pub fn new(control: Vec<[f64; 2]>) -> Result<Self> {
        let n = control.len();
        if n < 3 {
            return Err(invalid_param("TPS needs at least 3 control points"));
        }
        if control.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid_param("non-finite TPS control point"));
        }
        let m = n + 3;
        let mut sys = DMatrix::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let dx = control[i][0] - control[j][0];
                let dy = control[i][1] - control[j][1];
                sys[(i, j)] = radial(dx * dx + dy * dy);
            }
            sys[(i, n)] = 1.0;
            sys[(i, n + 1)] = control[i][0];
            sys[(i, n + 2)] = control[i][1];
            sys[(n, i)] = 1.0;
            sys[(n + 1, i)] = control[i][0];
            sys[(n + 2, i)] = control[i][1];
        }
        let inverse = sys
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular TPS system (degenerate control points)".into()))?;
        // Collinear layouts can slip through LU with a huge but finite inverse.
        let residual = (&sys * &inverse - DMatrix::identity(m, m)).abs().max();
        if !residual.is_finite() || residual > 1e-6 {
            return Err(Error::Numerical(format!(
                "ill-conditioned TPS system (residual {residual:.3e})"
            )));
        }
        Ok(Self { control, inverse })
    }

    /// `side × side` control grid spanning `[-extent, extent]²` in the z = 0 plane.
    pub fn grid(side: usize, extent: f64) -> Result<Self> {
        if side < 2 || !(extent > 0.0) {
            return Err(invalid_param("TPS grid needs side ≥ 2 and positive extent"));
        }
        let step = 2.0 * extent / (side - 1) as f64;
        let control = (0..side)
            .flat_map(|i| (0..side).map(move |j| [-extent + j as f64 * step, -extent + i as f64 * step]))
            .collect();
        Self::new(control)
    }

    pub fn control_points(&self) -> &[[f64; 2]] {
        &self.control
    }

    pub fn len(&self) -> usize {
        self.control.len()
    }

    pub fn is_empty(&self) -> bool {
        self.control.is_empty()
    }

    /// Per-control-point weights β_k(p): the warped position is
    /// `p + Σ_k β_k(p)·d_k` for displacements `d_k`.
    pub fn weights(&self, x: f64, y: f64) -> Vec<f64> {
        let n = self.control.len();
        let phi = self.features(x, y);
        (0..n)
            .map(|k| (0..n + 3).map(|j| phi[j] * self.inverse[(j, k)]).sum())
            .collect()
    }

    fn features(&self, x: f64, y: f64) -> Vec<f64> {
        let mut phi: Vec<f64> = self
            .control
            .iter()
            .map(|c| {
                let (dx, dy) = (x - c[0], y - c[1]);
                radial(dx * dx + dy * dy)
            })
            .collect();
        phi.extend_from_slice(&[1.0, x, y]);
        phi
    }
}

/// Thin-plate spline warp acting in the z = 0 plane; z passes through.
///
/// `coefficients` hold the solved radial and affine terms of the
/// displacement field (row `k < n` radial weight of control point `k`, rows
/// `n..n+3` the constant, x and y terms), one column per planar axis.
#[derive(Debug, Clone)]
pub struct TpsWarp {
    basis: Arc<TpsBasis>,
    displacements: Vec<[f64; 2]>,
    coefficients: Vec<[f64; 2]>,
}

impl TpsWarp {
    pub fn new(basis: Arc<TpsBasis>, displacements: Vec<[f64; 2]>) -> Result<Self> {
        let n = basis.len();
        if displacements.len() != n {
            return Err(invalid_param(format!(
                "expected {n} TPS displacements, got {}",
                displacements.len()
            )));
        }
        if displacements.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid_param("non-finite TPS displacement"));
        }
        let coefficients = (0..n + 3)
            .map(|j| {
                let mut c = [0.0; 2];
                for (k, d) in displacements.iter().enumerate() {
                    c[0] += basis.inverse[(j, k)] * d[0];
                    c[1] += basis.inverse[(j, k)] * d[1];
                }
                c
            })
            .collect();
        Ok(Self { basis, displacements, coefficients })
    }

    pub fn identity(basis: Arc<TpsBasis>) -> Self {
        let n = basis.len();
        Self { basis, displacements: vec![[0.0; 2]; n], coefficients: vec![[0.0; 2]; n + 3] }
    }

    /// The 4×4 grid over `[-1, 1]²` with the given displacements.
    pub fn grid4(displacements: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(Arc::new(TpsBasis::grid(4, 1.0)?), displacements)
    }

    pub fn basis(&self) -> &Arc<TpsBasis> {
        &self.basis
    }

    pub fn displacements(&self) -> &[[f64; 2]] {
        &self.displacements
    }

    pub fn coefficients(&self) -> &[[f64; 2]] {
        &self.coefficients
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        let (dx, dy) = self.displacement_at(p.x, p.y);
        Vec3::new(p.x + dx, p.y + dy, p.z)
    }

    fn displacement_at(&self, x: f64, y: f64) -> (f64, f64) {
        let n = self.basis.len();
        let c = &self.coefficients;
        let mut d = [
            c[n][0] + c[n + 1][0] * x + c[n + 2][0] * y,
            c[n][1] + c[n + 1][1] * x + c[n + 2][1] * y,
        ];
        for (k, cp) in self.basis.control.iter().enumerate() {
            let (ex, ey) = (x - cp[0], y - cp[1]);
            let u = radial(ex * ex + ey * ey);
            d[0] += c[k][0] * u;
            d[1] += c[k][1] * u;
        }
        (d[0], d[1])
    }

    /// Planar Jacobian of the warped position w.r.t. the input (x, y).
    pub fn planar_jacobian(&self, p: Vec3) -> Matrix2<f64> {
        let n = self.basis.len();
        let c = &self.coefficients;
        let mut j = Matrix2::new(
            1.0 + c[n + 1][0],
            c[n + 2][0],
            c[n + 1][1],
            1.0 + c[n + 2][1],
        );
        for (k, cp) in self.basis.control.iter().enumerate() {
            let (ex, ey) = (p.x - cp[0], p.y - cp[1]);
            let f = radial_grad_factor(ex * ex + ey * ey);
            j[(0, 0)] += c[k][0] * f * ex;
            j[(0, 1)] += c[k][0] * f * ey;
            j[(1, 0)] += c[k][1] * f * ex;
            j[(1, 1)] += c[k][1] * f * ey;
        }
        j
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        cloud.map_points(|p| self.apply_point(p))
    }
}

pub fn tps_apply(warp: &TpsWarp, cloud: &PointCloud) -> PointCloud {
    warp.apply(cloud)
}
