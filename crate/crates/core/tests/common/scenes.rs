//! Random grids and clouds shared by the integration tests.

use cellrender::attenuation::{AttenuationField, GaussianBump, Squash};
use cellrender::geometry::{CylindricalGrid, PointCloud, Vec3};
use cellrender::kernels::{KernelSpec, SeparableKernel};
use cellrender::renderer::{CellKernel, CellTemplate, Channel, DepthWeight, GeometricTransform, PlanarLayout, RenderParams, SensorGrid};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_kernel(rng: &mut ChaCha8Rng) -> CellKernel {
    let radius = rng.random_range(0.05..0.4);
    match rng.random_range(0..4) {
        0 => CellKernel::Separable(SeparableKernel {
            lateral: KernelSpec::EpanechnikovPow { exponent: rng.random_range(1.0..3.0), radius },
            depth: KernelSpec::TriangularDepth,
        }),
        1 => CellKernel::Separable(SeparableKernel {
            lateral: KernelSpec::EpanechnikovPow { exponent: 1.65, radius },
            depth: KernelSpec::Gaussian { sigma: rng.random_range(0.2..1.0) },
        }),
        2 => CellKernel::Radial(KernelSpec::EpanechnikovPow { exponent: 2.0, radius }),
        _ => CellKernel::Radial(KernelSpec::Gaussian { sigma: radius / 2.0 }),
    }
}

pub fn random_channels(rng: &mut ChaCha8Rng) -> Vec<Channel> {
    let mut c = vec![Channel::Range, Channel::Depth { far: -1.0 }, Channel::DENSITY];
    if rng.random_bool(0.5) {
        c.push(Channel::Density { depth: DepthWeight::Unit, log_beta: Some(0.2) });
    }
    if rng.random_bool(0.5) {
        c.push(Channel::Density { depth: DepthWeight::Kernel(KernelSpec::ExpBand { mu: 1.0, sigma: 0.5 }), log_beta: None });
    }
    c
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Jitter {
    None,
    /// Shift, elongation and sensitivity: the lattice stays binnable.
    Lateral,
    /// Also cell positions and orientations.
    Full,
}

pub fn random_jitter(rng: &mut ChaCha8Rng) -> Jitter {
    [Jitter::None, Jitter::Lateral, Jitter::Full][rng.random_range(0..3)]
}

/// A random grid and whether the binning backend accepts it.
pub fn random_grid(rng: &mut ChaCha8Rng, max_side: usize, jitter: Jitter) -> (SensorGrid, bool) {
    let mut t = CellTemplate::new(random_kernel(rng));
    t.elongation = rng.random_range(0.3..1.5);
    if rng.random_bool(0.5) {
        t.attenuation = Some(AttenuationField {
            components: (0..2)
                .map(|_| GaussianBump {
                    amplitude: rng.random_range(-1.0..1.0),
                    center: rng.random_range(0.0..2.0),
                    width: rng.random_range(0.2..1.0),
                })
                .collect(),
            squash: if rng.random_bool(0.5) { Squash::Tanh } else { Squash::Softsign },
            clamp: rng.random_bool(0.3),
        });
    }
    let rows = rng.random_range(2..=max_side);
    let cols = rng.random_range(2..=max_side);
    let planar = rng.random_bool(0.75);
    let binnable = planar && jitter != Jitter::Full && t.kernel.lateral_support().is_some();
    let grid = if planar {
        SensorGrid::planar(rows, cols, PlanarLayout { half_extent: 1.0, plane_z: -1.2 }, &t, random_channels(rng))
    } else {
        SensorGrid::cylindrical(CylindricalGrid { rows, cols, full_circle: rng.random_bool(0.5) }, &t, random_channels(rng))
    }
    .unwrap();
    if jitter == Jitter::None {
        return (grid, binnable);
    }
    let mut p = RenderParams::from_grid(&grid, &GeometricTransform::Identity);
    let layout = p.layout().clone();
    for k in 0..grid.cells.len() {
        let r = layout.cell_range(k);
        let v = &mut p.values_mut()[r];
        if jitter == Jitter::Full {
            for x in &mut v[0..7] {
                *x += rng.random_range(-0.03..0.03);
            }
        }
        for x in &mut v[7..11] {
            *x += rng.random_range(-0.02..0.02);
        }
    }
    p.normalize_quaternions().unwrap();
    (p.apply(&grid).unwrap(), binnable)
}

pub fn random_cloud(rng: &mut ChaCha8Rng, max_points: usize) -> PointCloud {
    let n = rng.random_range(1..=max_points);
    let mut pts: Vec<Vec3> = (0..n)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    // Exact duplicates exercise the tie rule.
    for _ in 0..rng.random_range(0..3) {
        let p = pts[rng.random_range(0..pts.len())];
        pts.push(p);
    }
    PointCloud::new(pts).unwrap()
}

