//! Reverse-mode gradients of renders and a finite-difference checker.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rayon::prelude::*;

use crate::error::{invalid_param, Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::kernels::log_compress;
use crate::renderer::eval::{CellEval, CellGrad, PointWeights};
use crate::renderer::{
    forward_accums, resolve_backend, slot, Channel, Culler, GeometricTransform, RenderOptions, RenderParams,
    RenderedImage, Scene, SensorGrid,
};

/// Gradient of a scalar loss w.r.t. a [`RenderParams`] vector and the
/// coordinates of the input cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub params: Vec<f64>,
    pub points: Vec<Vec3>,
}

impl ParamGradients {
    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite()) && self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Per-cell adjoint weights derived from the upstream image.
struct CellWeights {
    density: Vec<f64>,
    range: f64,
    depth: f64,
}

impl CellWeights {
    fn is_zero(&self) -> bool {
        self.range == 0.0 && self.depth == 0.0 && self.density.iter().all(|&w| w == 0.0)
    }
}

fn cell_weights(channels: &[Channel], upstream: &RenderedImage, pixel: usize, sums: &[f64]) -> CellWeights {
    let n = upstream.pixels();
    let mut w = CellWeights { density: Vec::with_capacity(sums.len()), range: 0.0, depth: 0.0 };
    for (k, ch) in channels.iter().enumerate() {
        let up = upstream.data[k * n + pixel];
        match ch {
            Channel::Range => w.range += up,
            Channel::Depth { .. } => w.depth += up,
            Channel::Density { log_beta, .. } => {
                let s = sums[w.density.len()];
                w.density.push(match log_beta {
                    Some(b) => up * log_compress(s, *b).map_or(0.0, |v| v.1),
                    None => up,
                });
            }
        }
    }
    w
}

/// Gradients of `Σ upstream ⊙ render(grid, cloud, params)`.
///
/// Max reductions pass their gradient to the selected point only. Point
/// gradients refer to the cloud before the geometric transform; the
/// transform's own parameters receive the chained gradient.
pub fn render_backward(
    grid: &SensorGrid,
    cloud: &PointCloud,
    params: &RenderParams,
    upstream: &RenderedImage,
    opts: &RenderOptions,
) -> Result<ParamGradients> {
    let configured = params.apply(grid)?;
    let transform = params.geometric()?;
    let moved = transform.apply(cloud)?;
    if upstream.width != configured.cols() || upstream.height != configured.rows() || upstream.channels != configured.channels.len() {
        return Err(invalid_param(format!(
            "upstream is {}×{}×{}, render is {}×{}×{}",
            upstream.width,
            upstream.height,
            upstream.channels,
            configured.cols(),
            configured.rows(),
            configured.channels.len()
        )));
    }
    let scene = Scene::new(&moved)?;
    let accums = forward_accums(&configured, &scene, opts)?;
    let culler = Culler::new(&scene, resolve_backend(&configured, opts)?, opts.leaf_size.max(1))?;
    let mut canonical = vec![0u32; scene.points.len()];
    for (k, &o) in scene.original.iter().enumerate() {
        canonical[o as usize] = k as u32;
    }

    let per_cell: Vec<Option<(CellGrad, Vec<(u32, Vec3)>)>> = configured
        .cells
        .par_iter()
        .enumerate()
        .map_init(Vec::new, |buf, (p, cell)| {
            let acc = &accums[p];
            let w = cell_weights(&configured.channels, upstream, p, &acc.sums);
            if w.is_zero() {
                return None;
            }
            let ev = CellEval::new(cell, &configured.channels);
            let mut g = CellGrad::zeros(cell);
            let mut pts = Vec::new();
            let sums_active = w.density.iter().any(|&v| v != 0.0);
            let zeros = vec![0.0; w.density.len()];
            if sums_active {
                culler.candidates(cell, buf, scene.points.len());
            } else {
                buf.clear();
                if let Some(a) = acc.argmax {
                    buf.push(canonical[a as usize]);
                }
            }
            for &k in buf.iter() {
                let k = k as usize;
                let orig = scene.original[k];
                let is_max = acc.argmax == Some(orig);
                let pw = PointWeights {
                    density: if sums_active { &w.density } else { &zeros },
                    range: if is_max { w.range } else { 0.0 },
                    depth: if is_max { w.depth } else { 0.0 },
                };
                let d = ev.backward(&scene.points[k], &pw, &mut g);
                if d != Vec3::zeros() {
                    pts.push((orig, d));
                }
            }
            Some((g, pts))
        })
        .collect();

    let layout = params.layout();
    let mut out = vec![0.0; layout.len()];
    let mut moved_grads = vec![Vec3::zeros(); cloud.len()];
    let values = params.values();
    for (k, entry) in per_cell.into_iter().enumerate() {
        let Some((g, pts)) = entry else { continue };
        for (idx, d) in pts {
            moved_grads[idx as usize] += d;
        }
        let base = layout.cell_range(k).start;
        let s = layout.cell_slots(k);
        let o = &mut out[base..base + s.len()];
        o[slot::POSITION..slot::POSITION + 3].copy_from_slice(g.position.as_slice());
        let q = crate::geometry::Quaternion::new(values[base + 3], values[base + 4], values[base + 5], values[base + 6]);
        o[slot::ROTATION..slot::ROTATION + 4].copy_from_slice(&q.pullback_matrix_grad(&g.rotation));
        o[slot::ELONGATION] = g.elongation;
        o[slot::SHIFT..slot::SHIFT + 2].copy_from_slice(&g.shift);
        o[slot::SENSITIVITY] = g.sensitivity;
        let lat = slot::KERNEL;
        o[lat..lat + s.lateral].copy_from_slice(&g.lateral[..s.lateral]);
        o[lat + s.lateral..lat + s.lateral + s.depth].copy_from_slice(&g.depth[..s.depth]);
        o[lat + s.lateral + s.depth..].copy_from_slice(&g.attenuation);
    }

    let geo = layout.geometric_range();
    let points = match &transform {
        GeometricTransform::Identity => moved_grads,
        GeometricTransform::Rotation(q) => {
            let m = q.to_matrix();
            let mut gm = nalgebra::Matrix3::zeros();
            for (g, p) in moved_grads.iter().zip(cloud.points()) {
                gm += g * p.transpose();
            }
            let raw = crate::geometry::Quaternion::from_array(values[geo.clone()].try_into().expect("4 values"));
            out[geo].copy_from_slice(&raw.pullback_matrix_grad(&gm));
            moved_grads.iter().map(|g| m.transpose() * g).collect()
        }
        GeometricTransform::Tps(warp) => {
            let basis = warp.basis();
            let mut dd = vec![0.0; 2 * basis.len()];
            let grads = moved_grads
                .iter()
                .zip(cloud.points())
                .map(|(g, p)| {
                    if g.x == 0.0 && g.y == 0.0 {
                        return *g;
                    }
                    for (k, b) in basis.weights(p.x, p.y).into_iter().enumerate() {
                        dd[2 * k] += b * g.x;
                        dd[2 * k + 1] += b * g.y;
                    }
                    let j = warp.planar_jacobian(*p);
                    let gxy = j.transpose() * nalgebra::Vector2::new(g.x, g.y);
                    Vec3::new(gxy.x, gxy.y, g.z)
                })
                .collect();
            out[geo].copy_from_slice(&dd);
            grads
        }
    };
    let grads = ParamGradients { params: out, points };
    if !grads.is_finite() {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    Ok(grads)
}

/// Hash of which smooth piece every (cell, point) pair is in, plus each
/// cell's argmax. Equal hashes at two parameter vectors mean no kink or
/// max switch was detected between them.
pub fn regime_signature(grid: &SensorGrid, cloud: &PointCloud, params: &RenderParams) -> Result<u64> {
    let configured = params.apply(grid)?;
    let moved = params.geometric()?.apply(cloud)?;
    let scene = Scene::new(&moved)?;
    let accums = forward_accums(&configured, &scene, &RenderOptions::with_backend(crate::renderer::Backend::Brute))?;
    let per_cell: Vec<u64> = configured
        .cells
        .par_iter()
        .enumerate()
        .map(|(p, cell)| {
            let ev = CellEval::new(cell, &configured.channels);
            let mut h = DefaultHasher::new();
            accums[p].argmax.hash(&mut h);
            for (k, c) in moved.points().iter().enumerate() {
                let code = ev.regime(c);
                if code != 0 {
                    (k, code).hash(&mut h);
                }
            }
            h.finish()
        })
        .collect();
    let mut h = DefaultHasher::new();
    per_cell.hash(&mut h);
    Ok(h.finish())
}

/// Smallest relative distance `|ρ − R| / R` between any point's lateral
/// offset and the boundary of a bounded lateral support, over all cells.
/// Infinite when no cell has a bounded kernel.
pub fn support_clearance(grid: &SensorGrid, cloud: &PointCloud, params: &RenderParams) -> Result<f64> {
    let configured = params.apply(grid)?;
    let moved = params.geometric()?.apply(cloud)?;
    let per_cell: Vec<f64> = configured
        .cells
        .par_iter()
        .map(|cell| {
            let Some(r) = cell.kernel.lateral_support() else { return f64::INFINITY };
            let ev = CellEval::new(cell, &[]);
            moved
                .points()
                .iter()
                .map(|c| {
                    let v = ev.rot * (c - cell.position);
                    let (lx, ly) = (v.x - cell.shift[0], v.y - cell.shift[1]);
                    let rho = match cell.kernel {
                        crate::renderer::CellKernel::Separable(_) => (lx * lx + ly * ly).sqrt(),
                        crate::renderer::CellKernel::Radial(_) => {
                            let z = cell.view.elongation * v.z;
                            (lx * lx + ly * ly + z * z).sqrt()
                        }
                    };
                    (rho - r).abs() / r
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(per_cell.into_iter().fold(f64::INFINITY, f64::min))
}

/// Scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective: Sync {
    /// Value and a signature of the smooth piece the parameters lie in.
    fn eval(&self, p: &[f64]) -> Result<(f64, u64)>;
    fn gradient(&self, p: &[f64]) -> Result<Vec<f64>>;
}

/// Objective built from closures; the regime is constant.
pub struct FnObjective<F, G> {
    pub value: F,
    pub gradient: G,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn eval(&self, p: &[f64]) -> Result<(f64, u64)> {
        Ok(((self.value)(p), 0))
    }

    fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok((self.gradient)(p))
    }
}

/// `Σ upstream ⊙ render` as a function of the render parameters, optionally
/// followed by the flattened cloud coordinates.
pub struct RenderObjective<'a> {
    pub grid: &'a SensorGrid,
    pub cloud: &'a PointCloud,
    pub params: RenderParams,
    pub upstream: RenderedImage,
    pub opts: RenderOptions,
    pub include_points: bool,
}

impl RenderObjective<'_> {
    /// The starting vector: parameters, then coordinates when included.
    pub fn initial(&self) -> Vec<f64> {
        let mut v = self.params.values().to_vec();
        if self.include_points {
            v.extend(self.cloud.points().iter().flat_map(|p| [p.x, p.y, p.z]));
        }
        v
    }

    fn split(&self, p: &[f64]) -> Result<(RenderParams, PointCloud)> {
        let n = self.params.len();
        let params = self.params.with_values(p[..n].to_vec())?;
        let cloud = if self.include_points {
            let pts = p[n..].chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            match self.cloud.labels() {
                Some(l) => PointCloud::with_labels(pts, l.to_vec())?,
                None => PointCloud::new(pts)?,
            }
        } else {
            self.cloud.clone()
        };
        Ok((params, cloud))
    }
}

impl Objective for RenderObjective<'_> {
    fn eval(&self, p: &[f64]) -> Result<(f64, u64)> {
        let (params, cloud) = self.split(p)?;
        let img = crate::renderer::render(self.grid, &cloud, &params, &self.opts)?;
        let v = img.data.iter().zip(&self.upstream.data).map(|(a, b)| a * b).sum();
        Ok((v, regime_signature(self.grid, &cloud, &params)?))
    }

    fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        let (params, cloud) = self.split(p)?;
        let g = render_backward(self.grid, &cloud, &params, &self.upstream, &self.opts)?;
        let mut v = g.params;
        if self.include_points {
            v.extend(g.points.iter().flat_map(|p| [p.x, p.y, p.z]));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub step: f64,
    pub tol: f64,
    pub max_rel_error: f64,
    /// Every compared coordinate.
    pub entries: Vec<FdEntry>,
    /// Compared coordinates whose error exceeds `tol`.
    pub offending: Vec<FdEntry>,
    /// Coordinates skipped because a kink or max switch lies within
    /// `10·step` of the evaluation point.
    pub excluded: Vec<usize>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.offending.is_empty()
    }

    /// One line per compared coordinate, then the excluded ones.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# step {:e} tol {:e} max_rel_error {:e} checked {} excluded {} offending {}\n",
            self.step,
            self.tol,
            self.max_rel_error,
            self.entries.len(),
            self.excluded.len(),
            self.offending.len()
        );
        s.push_str("coordinate\tanalytic\tnumeric\trel_error\n");
        for e in &self.entries {
            s.push_str(&format!("{}\t{:.12e}\t{:.12e}\t{:.3e}\n", e.index, e.analytic, e.numeric, e.rel_error));
        }
        for i in &self.excluded {
            s.push_str(&format!("{i}\texcluded\n"));
        }
        s
    }
}

/// Absolute floor of the relative-error denominator.
pub const FD_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, FD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Central differences on every coordinate.
pub fn finite_diff_check(obj: &impl Objective, params: &[f64], step: f64, tol: f64) -> Result<FdReport> {
    let all: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_coords(obj, params, &all, step, tol)
}

/// Central differences `(f(p + h) − f(p − h)) / 2h` on the listed
/// coordinates, compared against `obj.gradient(params)`.
pub fn finite_diff_check_coords(obj: &impl Objective, params: &[f64], coords: &[usize], step: f64, tol: f64) -> Result<FdReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid_param(format!("finite-difference step must be > 0, got {step}")));
    }
    let analytic = obj.gradient(params)?;
    let (_, base) = obj.eval(params)?;
    let results: Vec<Result<std::result::Result<FdEntry, usize>>> = coords
        .par_iter()
        .map(|&i| {
            let at = |d: f64| {
                let mut p = params.to_vec();
                p[i] += d;
                obj.eval(&p)
            };
            let (fp, rp) = at(step)?;
            let (fm, rm) = at(-step)?;
            let (_, rfp) = at(10.0 * step)?;
            let (_, rfm) = at(-10.0 * step)?;
            if [rp, rm, rfp, rfm].iter().any(|&r| r != base) {
                return Ok(Err(i));
            }
            let numeric = (fp - fm) / (2.0 * step);
            Ok(Ok(FdEntry { index: i, analytic: analytic[i], numeric, rel_error: relative_error(analytic[i], numeric) }))
        })
        .collect();
    let mut report = FdReport { step, tol, max_rel_error: 0.0, entries: vec![], offending: vec![], excluded: vec![] };
    for r in results {
        match r? {
            Ok(e) => {
                report.max_rel_error = report.max_rel_error.max(e.rel_error);
                if !(e.rel_error < tol) {
                    report.offending.push(e.clone());
                }
                report.entries.push(e);
            }
            Err(i) => report.excluded.push(i),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let obj = FnObjective {
            value: |p: &[f64]| p.iter().map(|v| v * v).sum(),
            gradient: |p: &[f64]| p.iter().map(|v| 2.0 * v).collect(),
        };
        let p = [0.3, -1.7, 2.5, 0.01];
        let r = finite_diff_check(&obj, &p, 1e-4, 1e-8).unwrap();
        assert!(r.passed(), "{:?}", r.offending);
        assert!(r.max_rel_error < 1e-8);
        assert!(finite_diff_check(&obj, &p, 0.0, 1e-8).is_err());
    }

    #[test]
    fn kinks_are_excluded_not_failed() {
        struct Abs;
        impl Objective for Abs {
            fn eval(&self, p: &[f64]) -> Result<(f64, u64)> {
                Ok((p[0].abs() + p[1] * p[1], (p[0] > 0.0) as u64))
            }
            fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![p[0].signum(), 2.0 * p[1]])
            }
        }
        let r = finite_diff_check(&Abs, &[5e-4, 1.0], 1e-4, 1e-6).unwrap();
        assert_eq!(r.excluded, vec![0]);
        assert!(r.passed());
    }

    use crate::attenuation::{AttenuationField, GaussianBump, Squash};
    use crate::geometry::{Quaternion, TpsWarp};
    use crate::kernels::{KernelSpec, SeparableKernel};
    use crate::renderer::{render, Backend, CellKernel, CellTemplate, DepthWeight, PlanarLayout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn radial_grid(rows: usize, cols: usize, sigma: f64, channels: Vec<Channel>) -> SensorGrid {
        let t = CellTemplate::new(CellKernel::Radial(KernelSpec::Gaussian { sigma }));
        SensorGrid::planar(rows, cols, PlanarLayout { half_extent: 1.0, plane_z: -1.2 }, &t, channels).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, like: &RenderedImage) -> RenderedImage {
        let data = (0..like.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        RenderedImage::from_data(like.width, like.height, like.channels, data).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.8..0.8))).collect()).unwrap()
    }

    fn opts() -> RenderOptions {
        RenderOptions::with_backend(Backend::Brute)
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = radial_grid(3, 4, 0.4, vec![Channel::Range, Channel::DENSITY, Channel::Depth { far: 0.0 }]);
        let cloud = random_cloud(&mut rng, 20);
        let params = RenderParams::from_grid(&grid, &GeometricTransform::Rotation(Quaternion::new(0.9, 0.1, 0.2, 0.0)));
        let up = RenderedImage::zeros(4, 3, 3);
        let g = render_backward(&grid, &cloud, &params, &up, &opts()).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.points.iter().all(|p| *p == Vec3::zeros()));
        let bad = RenderedImage::zeros(3, 3, 3);
        assert!(render_backward(&grid, &cloud, &params, &bad, &opts()).is_err());
    }

    #[test]
    fn single_gaussian_point_matches_closed_form() {
        let sigma = 0.3;
        let cell_pos = Vec3::new(0.1, -0.2, -0.5);
        let mut grid = radial_grid(1, 1, sigma, vec![Channel::DENSITY]);
        grid.cells[0].position = cell_pos;
        let c = Vec3::new(0.25, -0.1, -0.3);
        let cloud = PointCloud::new(vec![c]).unwrap();
        let params = RenderParams::from_grid(&grid, &GeometricTransform::Identity);
        let up = RenderedImage::from_data(1, 1, 1, vec![1.0]).unwrap();
        let g = render_backward(&grid, &cloud, &params, &up, &opts()).unwrap();
        let d = c - cell_pos;
        let psi = (-d.norm_squared() / (2.0 * sigma * sigma)).exp();
        let expected = -psi * d / (sigma * sigma);
        assert!((g.points[0] - expected).norm() < 1e-14, "{:?} vs {:?}", g.points[0], expected);
        assert!((Vec3::from_column_slice(&g.params[0..3]) + expected).norm() < 1e-14);
        let d_sigma = psi * d.norm_squared() / (sigma * sigma * sigma);
        assert!((g.params[slot::KERNEL] - d_sigma).abs() < 1e-14);
    }

    #[test]
    fn scaling_upstream_scales_gradients_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = radial_grid(4, 4, 0.35, vec![Channel::Range, Channel::DENSITY, Channel::Depth { far: 1.0 }]);
        let cloud = random_cloud(&mut rng, 30);
        let params = RenderParams::from_grid(&grid, &GeometricTransform::Identity);
        let img = render(&grid, &cloud, &params, &opts()).unwrap();
        let up = random_image(&mut rng, &img);
        let mut up2 = up.clone();
        up2.data.iter_mut().for_each(|v| *v *= 2.0);
        let a = render_backward(&grid, &cloud, &params, &up, &opts()).unwrap();
        let b = render_backward(&grid, &cloud, &params, &up2, &opts()).unwrap();
        for (x, y) in a.params.iter().zip(&b.params) {
            assert_eq!(2.0 * x, *y);
        }
        for (x, y) in a.points.iter().zip(&b.points) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn sum_backward_is_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = radial_grid(5, 3, 0.3, vec![Channel::DENSITY, Channel::DENSITY]);
        let cloud = random_cloud(&mut rng, 25);
        let params = RenderParams::from_grid(&grid, &GeometricTransform::Identity);
        let img = render(&grid, &cloud, &params, &opts()).unwrap();
        for _ in 0..10 {
            let u = random_image(&mut rng, &img);
            let v = random_image(&mut rng, &img);
            let mut w = u.clone();
            w.data.iter_mut().zip(&v.data).for_each(|(a, b)| *a += b);
            let gu = render_backward(&grid, &cloud, &params, &u, &opts()).unwrap();
            let gv = render_backward(&grid, &cloud, &params, &v, &opts()).unwrap();
            let gw = render_backward(&grid, &cloud, &params, &w, &opts()).unwrap();
            for i in 0..gw.params.len() {
                let s = gu.params[i] + gv.params[i];
                assert!((gw.params[i] - s).abs() <= 1e-12 * (1.0 + s.abs()));
            }
            for i in 0..cloud.len() {
                assert!((gw.points[i] - gu.points[i] - gv.points[i]).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn max_pixel_gradient_touches_one_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = radial_grid(3, 3, 0.5, vec![Channel::Range]);
        let cloud = random_cloud(&mut rng, 40);
        let params = RenderParams::from_grid(&grid, &GeometricTransform::Identity);
        let img = render(&grid, &cloud, &params, &opts()).unwrap();
        for p in 0..9 {
            let mut up = RenderedImage::zeros(3, 3, 1);
            up.data[p] = 1.0;
            let g = render_backward(&grid, &cloud, &params, &up, &opts()).unwrap();
            let touched: Vec<usize> = (0..cloud.len()).filter(|&k| g.points[k] != Vec3::zeros()).collect();
            assert_eq!(touched, vec![img.argmax[p].unwrap() as usize]);
        }
    }

    fn separable_config(rng: &mut ChaCha8Rng, transform: GeometricTransform) -> (SensorGrid, PointCloud, RenderParams) {
        let field = AttenuationField {
            components: vec![
                GaussianBump { amplitude: 0.6, center: 0.9, width: 0.5 },
                GaussianBump { amplitude: -0.3, center: 1.5, width: 0.4 },
            ],
            squash: Squash::Softsign,
            clamp: false,
        };
        let kernel = SeparableKernel {
            lateral: KernelSpec::EpanechnikovPow { exponent: 1.65, radius: 0.9 },
            depth: KernelSpec::Gaussian { sigma: 1.2 },
        };
        let mut t = CellTemplate::new(CellKernel::Separable(kernel));
        t.attenuation = Some(field);
        t.elongation = 0.8;
        let channels = vec![
            Channel::Range,
            Channel::Depth { far: 0.0 },
            Channel::DENSITY,
            Channel::Density { depth: DepthWeight::Kernel(KernelSpec::Gaussian { sigma: 0.7 }), log_beta: Some(0.2) },
        ];
        let grid = SensorGrid::planar(3, 3, PlanarLayout::default(), &t, channels).unwrap();
        let cloud = random_cloud(rng, 8);
        let mut params = RenderParams::from_grid(&grid, &transform);
        let layout = params.layout().clone();
        for k in 0..layout.cell_count() {
            let r = layout.cell_range(k);
            let v = &mut params.values_mut()[r];
            for i in 0..3 {
                v[i] += rng.random_range(-0.05..0.05);
            }
            for i in 4..7 {
                v[i] = rng.random_range(-0.1..0.1);
            }
            v[slot::SHIFT] = rng.random_range(-0.05..0.05);
            v[slot::SHIFT + 1] = rng.random_range(-0.05..0.05);
        }
        (grid, cloud, params)
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let transforms = [
            GeometricTransform::Identity,
            GeometricTransform::Rotation(Quaternion::new(0.95, 0.1, -0.2, 0.05)),
            GeometricTransform::Tps(
                TpsWarp::grid4((0..16).map(|_| [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)]).collect()).unwrap(),
            ),
        ];
        for transform in transforms {
            let (grid, cloud, params) = loop {
                let c = separable_config(&mut rng, transform.clone());
                if support_clearance(&c.0, &c.1, &c.2).unwrap() > 0.01 {
                    break c;
                }
            };
            let img = render(&grid, &cloud, &params, &opts()).unwrap();
            let obj = RenderObjective {
                grid: &grid,
                cloud: &cloud,
                params,
                upstream: random_image(&mut rng, &img),
                opts: opts(),
                include_points: true,
            };
            let p = obj.initial();
            let r = finite_diff_check(&obj, &p, 1e-4, 1e-4).unwrap();
            assert!(r.passed(), "{}", r.to_text());
            assert!(r.entries.len() > p.len() / 2, "too many exclusions: {}", r.excluded.len());
        }
    }
}
