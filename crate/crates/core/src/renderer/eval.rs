//! Per-cell evaluation shared by every backend: forward accumulation of one
//! point into a cell's reductions, and the adjoint of that accumulation.

use nalgebra::Matrix3;

use super::cell::{CellKernel, SensorCell};
use super::grid::{Channel, DepthWeight};
use crate::geometry::Vec3;
use crate::kernels::KernelSpec;

#[derive(Debug, Clone, Copy)]
enum DepthFactor {
    Cell,
    Unit,
    Kernel(KernelSpec),
}

/// Reduction state of one cell. `best`/`argmax` track the maximum of the
/// cell kernel response; `sums` the density channels in channel order.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Accum {
    pub sums: Vec<f64>,
    pub best: f64,
    pub argmax: Option<u32>,
}

impl Accum {
    pub fn new(n_sums: usize) -> Self {
        Self { sums: vec![0.0; n_sums], best: 0.0, argmax: None }
    }

    /// Max update with lowest-index tie-breaking.
    #[inline]
    pub fn offer(best: &mut f64, argmax: &mut Option<u32>, value: f64, idx: u32) {
        if value > 0.0 && (value > *best || (value == *best && argmax.is_none_or(|a| idx < a))) {
            *best = value;
            *argmax = Some(idx);
        }
    }

}

/// Adjoint weights for one point: `density[k]` is `∂L/∂(raw sum k)`, and
/// `range`/`depth` apply when the point is the cell's argmax.
pub(crate) struct PointWeights<'a> {
    pub density: &'a [f64],
    pub range: f64,
    pub depth: f64,
}

/// Gradient of a loss w.r.t. one cell's parameters, in raw form (the
/// rotation as a matrix gradient, pulled back onto the quaternion later).
#[derive(Debug, Clone)]
pub(crate) struct CellGrad {
    pub position: Vec3,
    pub rotation: Matrix3<f64>,
    pub elongation: f64,
    pub shift: [f64; 2],
    pub sensitivity: f64,
    pub lateral: [f64; 2],
    pub depth: [f64; 2],
    pub attenuation: Vec<f64>,
}

impl CellGrad {
    pub fn zeros(cell: &SensorCell) -> Self {
        Self {
            position: Vec3::zeros(),
            rotation: Matrix3::zeros(),
            elongation: 0.0,
            shift: [0.0; 2],
            sensitivity: 0.0,
            lateral: [0.0; 2],
            depth: [0.0; 2],
            attenuation: vec![0.0; cell.attenuation.as_ref().map_or(0, |a| a.param_count())],
        }
    }
}

/// Quantities of one (cell, point) pair in the cell frame.
struct Local {
    u: Vec3,
    v: Vec3,
    lx: f64,
    ly: f64,
    z: f64,
}

/// Number of kinks of `k` below `x`.
fn piece(k: &KernelSpec, x: f64) -> u64 {
    k.kinks().iter().filter(|&&t| t < x).count() as u64
}

pub(crate) struct CellEval<'a> {
    pub cell: &'a SensorCell,
    pub rot: Matrix3<f64>,
    density: Vec<DepthFactor>,
}

impl<'a> CellEval<'a> {
    pub fn new(cell: &'a SensorCell, channels: &[Channel]) -> Self {
        let density = channels
            .iter()
            .filter_map(|c| match c {
                Channel::Density { depth, .. } => Some(match depth {
                    DepthWeight::Cell => DepthFactor::Cell,
                    DepthWeight::Unit => DepthFactor::Unit,
                    DepthWeight::Kernel(k) => DepthFactor::Kernel(*k),
                }),
                _ => None,
            })
            .collect();
        Self { cell, rot: cell.view.rotation.to_matrix(), density }
    }

    pub fn n_sums(&self) -> usize {
        self.density.len()
    }

    #[inline]
    fn local(&self, c: &Vec3) -> Local {
        let u = c - self.cell.position;
        let v = self.rot * u;
        Local {
            u,
            v,
            lx: v.x - self.cell.shift[0],
            ly: v.y - self.cell.shift[1],
            z: self.cell.view.elongation * v.z,
        }
    }

    /// Geometric depth along the view axis (the depth channel's value).
    pub fn view_depth(&self, c: &Vec3) -> f64 {
        self.local(c).v.z
    }

    /// `(lateral·ω·κ, cell depth factor)`; `None` when the point lies outside
    /// the lateral support.
    #[inline]
    fn base(&self, l: &Local) -> Option<(f64, f64)> {
        let (f, dcell) = match &self.cell.kernel {
            CellKernel::Separable(k) => {
                let f = k.lateral.value((l.lx * l.lx + l.ly * l.ly).sqrt());
                if f == 0.0 {
                    return None;
                }
                (f, k.depth.value(l.z))
            }
            CellKernel::Radial(k) => {
                let f = k.value((l.lx * l.lx + l.ly * l.ly + l.z * l.z).sqrt());
                if f == 0.0 {
                    return None;
                }
                (f, 1.0)
            }
        };
        let omega = self.cell.attenuation.as_ref().map_or(1.0, |a| a.omega(l.z));
        Some((self.cell.sensitivity * f * omega, dcell))
    }

    /// Code of the smooth piece `c` falls in for every kernel of this cell:
    /// 0 outside the lateral support, otherwise a bit set identifying the
    /// side of each kink.
    pub fn regime(&self, c: &Vec3) -> u64 {
        let l = self.local(c);
        let mut code = match &self.cell.kernel {
            CellKernel::Separable(k) => {
                if k.lateral.value((l.lx * l.lx + l.ly * l.ly).sqrt()) == 0.0 {
                    return 0;
                }
                1 | piece(&k.depth, l.z) << 1
            }
            CellKernel::Radial(k) => {
                if k.value((l.lx * l.lx + l.ly * l.ly + l.z * l.z).sqrt()) == 0.0 {
                    return 0;
                }
                1
            }
        };
        for (i, f) in self.density.iter().enumerate() {
            if let DepthFactor::Kernel(k) = f {
                code |= piece(k, l.z) << (3 + 2 * i);
            }
        }
        code
    }

    #[inline]
    pub fn accumulate(&self, idx: u32, c: &Vec3, sums: &mut [f64], best: &mut f64, argmax: &mut Option<u32>) {
        let l = self.local(c);
        let Some((b, dcell)) = self.base(&l) else { return };
        Accum::offer(best, argmax, b * dcell, idx);
        for (s, f) in sums.iter_mut().zip(&self.density) {
            *s += b * match f {
                DepthFactor::Cell => dcell,
                DepthFactor::Unit => 1.0,
                DepthFactor::Kernel(k) => k.value(l.z),
            };
        }
    }

    /// Adds the adjoint of this point's contributions into `g` and returns
    /// the gradient w.r.t. the point's position.
    pub fn backward(&self, c: &Vec3, w: &PointWeights<'_>, g: &mut CellGrad) -> Vec3 {
        let l = self.local(c);
        let cell = self.cell;
        let kappa = cell.sensitivity;
        let s = cell.view.elongation;

        // Aggregate depth factor S(z) = Σ_k w_k D_k(z), its derivative, and the
        // total weight on the cell's own depth kernel.
        let mut agg = 0.0;
        let mut agg_dz = 0.0;
        let mut w_cell = w.range;
        let (cell_depth, cell_depth_dz) = match &cell.kernel {
            CellKernel::Separable(k) => {
                let d = k.depth.eval(l.z);
                (d.value, d.d_dx)
            }
            CellKernel::Radial(_) => (1.0, 0.0),
        };
        agg += w.range * cell_depth;
        agg_dz += w.range * cell_depth_dz;
        for (wk, f) in w.density.iter().zip(&self.density) {
            match f {
                DepthFactor::Cell => {
                    agg += wk * cell_depth;
                    agg_dz += wk * cell_depth_dz;
                    w_cell += wk;
                }
                DepthFactor::Unit => agg += wk,
                DepthFactor::Kernel(k) => {
                    let d = k.eval(l.z);
                    agg += wk * d.value;
                    agg_dz += wk * d.d_dx;
                }
            }
        }

        let (omega, omega_dz) = cell.attenuation.as_ref().map_or((1.0, 0.0), |a| a.eval(l.z));
        let (f, d_lx, d_ly, mut d_z);
        match &cell.kernel {
            CellKernel::Separable(k) => {
                let rho = (l.lx * l.lx + l.ly * l.ly).sqrt();
                let kv = k.lateral.eval(rho);
                f = kv.value;
                if f == 0.0 && w.depth == 0.0 {
                    return Vec3::zeros();
                }
                let d_f = kappa * omega * agg;
                let d_rho = d_f * kv.d_dx;
                (d_lx, d_ly) = if rho > 0.0 { (d_rho * l.lx / rho, d_rho * l.ly / rho) } else { (0.0, 0.0) };
                d_z = 0.0;
                for p in 0..k.lateral.param_count() {
                    g.lateral[p] += d_f * kv.d_dparams[p];
                }
                if w_cell != 0.0 {
                    let dv = k.depth.eval(l.z);
                    for p in 0..k.depth.param_count() {
                        g.depth[p] += kappa * f * omega * w_cell * dv.d_dparams[p];
                    }
                }
            }
            CellKernel::Radial(k) => {
                let r = (l.lx * l.lx + l.ly * l.ly + l.z * l.z).sqrt();
                let kv = k.eval(r);
                f = kv.value;
                if f == 0.0 && w.depth == 0.0 {
                    return Vec3::zeros();
                }
                let d_f = kappa * omega * agg;
                let d_r = d_f * kv.d_dx;
                (d_lx, d_ly, d_z) = if r > 0.0 {
                    (d_r * l.lx / r, d_r * l.ly / r, d_r * l.z / r)
                } else {
                    (0.0, 0.0, 0.0)
                };
                for p in 0..k.param_count() {
                    g.lateral[p] += d_f * kv.d_dparams[p];
                }
            }
        }
        d_z += kappa * f * (omega * agg_dz + omega_dz * agg);
        g.sensitivity += f * omega * agg;
        if let Some(a) = &cell.attenuation {
            a.accumulate_param_grads(l.z, kappa * f * agg, &mut g.attenuation);
        }
        if d_lx == 0.0 && d_ly == 0.0 && d_z == 0.0 && w.depth == 0.0 {
            return Vec3::zeros();
        }
        g.shift[0] -= d_lx;
        g.shift[1] -= d_ly;
        g.elongation += l.v.z * d_z;
        let dv = Vec3::new(d_lx, d_ly, s * d_z + w.depth);
        let du = self.rot.transpose() * dv;
        g.position -= du;
        g.rotation += dv * l.u.transpose();
        du
    }
}
