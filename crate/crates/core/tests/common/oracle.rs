//! Naive all-pairs renderer written directly from the cell model, used as
//! the reference for every backend.

use cellrender::attenuation::{AttenuationField, Squash};
use cellrender::geometry::PointCloud;
use cellrender::kernels::KernelSpec;
use cellrender::renderer::{CellKernel, Channel, DepthWeight, SensorCell, SensorGrid};

pub struct Naive {
    pub data: Vec<f64>,
    pub argmax: Vec<Option<u32>>,
}

fn kernel(k: &KernelSpec, x: f64) -> f64 {
    match *k {
        KernelSpec::Cauchy { alpha } => 1.0 / (1.0 + (x / alpha).powi(2)),
        KernelSpec::EpanechnikovPow { exponent, radius } => {
            let t = 1.0 - (x / radius).powi(2);
            if t > 0.0 {
                t.powf(exponent)
            } else {
                0.0
            }
        }
        KernelSpec::TriangularDepth => (1.0 - x.abs()).max(0.0),
        KernelSpec::ExpBand { mu, sigma } => (-(x - mu).abs() / sigma).exp(),
        KernelSpec::Gaussian { sigma } => (-x * x / (2.0 * sigma * sigma)).exp(),
    }
}

fn omega(a: &AttenuationField, z: f64) -> f64 {
    let chi: f64 = a.components.iter().map(|c| c.amplitude * (-((z - c.center) / c.width).powi(2)).exp()).sum();
    let h = match a.squash {
        Squash::Tanh => chi.tanh(),
        Squash::Softsign => chi / (1.0 + chi.abs()),
    };
    let w = 1.0 - h;
    if a.clamp {
        w.clamp(0.0, 1.0)
    } else {
        w
    }
}

fn rotation(cell: &SensorCell) -> [[f64; 3]; 3] {
    let [w, x, y, z] = cell.view.rotation.to_array();
    let n = (w * w + x * x + y * y + z * z).sqrt();
    let (w, x, y, z) = (w / n, x / n, y / n, z / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// `(cell response, cell depth factor, local z, view depth)`.
fn respond(cell: &SensorCell, p: [f64; 3]) -> (f64, f64, f64, f64) {
    let r = rotation(cell);
    let u = [p[0] - cell.position.x, p[1] - cell.position.y, p[2] - cell.position.z];
    let v: Vec<f64> = (0..3).map(|i| r[i][0] * u[0] + r[i][1] * u[1] + r[i][2] * u[2]).collect();
    let lx = v[0] - cell.shift[0];
    let ly = v[1] - cell.shift[1];
    let z = cell.view.elongation * v[2];
    let (f, d) = match &cell.kernel {
        CellKernel::Separable(k) => (kernel(&k.lateral, (lx * lx + ly * ly).sqrt()), kernel(&k.depth, z)),
        CellKernel::Radial(k) => (kernel(k, (lx * lx + ly * ly + z * z).sqrt()), 1.0),
    };
    let w = cell.attenuation.as_ref().map_or(1.0, |a| omega(a, z));
    (cell.sensitivity * f * w, d, z, v[2])
}

pub fn naive_render(grid: &SensorGrid, cloud: &PointCloud) -> Naive {
    let n = grid.cells.len();
    let mut data = vec![0.0; n * grid.channels.len()];
    let mut argmax = vec![None; n];
    for (pix, cell) in grid.cells.iter().enumerate() {
        let mut best = 0.0;
        let mut best_depth = 0.0;
        let mut sums = vec![0.0; grid.channels.len()];
        for (i, p) in cloud.points().iter().enumerate() {
            let (b, d, z, depth) = respond(cell, [p.x, p.y, p.z]);
            if b == 0.0 {
                continue;
            }
            let psi = b * d;
            if psi > 0.0 && psi > best {
                best = psi;
                best_depth = depth;
                argmax[pix] = Some(i as u32);
            }
            for (k, ch) in grid.channels.iter().enumerate() {
                if let Channel::Density { depth, .. } = ch {
                    sums[k] += b * match depth {
                        DepthWeight::Cell => d,
                        DepthWeight::Unit => 1.0,
                        DepthWeight::Kernel(k) => kernel(k, z),
                    };
                }
            }
        }
        for (k, ch) in grid.channels.iter().enumerate() {
            data[k * n + pix] = match ch {
                Channel::Range => best,
                Channel::Depth { far } => argmax[pix].map_or(*far, |_| best_depth),
                Channel::Density { log_beta: Some(beta), .. } => (beta * sums[k]).ln_1p(),
                Channel::Density { log_beta: None, .. } => sums[k],
            };
        }
    }
    Naive { data, argmax }
}
