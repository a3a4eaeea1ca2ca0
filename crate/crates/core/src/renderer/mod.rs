//! Forward rendering of point clouds through grids of sensor cells.

mod cell;
pub(crate) mod eval;
mod grid;
pub mod io;
mod panoramic;
mod params;
mod relaxation;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cell::{look_rotation, CellKernel, SensorCell};
pub use grid::{CellTemplate, Channel, DepthWeight, PlanarLayout, SensorGrid, Topology};
pub use panoramic::{cyclic_convolve, interpolate_column_params, panoramic_grid, CellPlacement, ColumnParams, ConvKernel};
pub use params::{GeometricTransform, ParamClass, ParamLayout, RenderParams};
pub use relaxation::range_relaxation;

pub(crate) use params::slot;

use crate::accel::{binning, kdtree::KdTree, obb::support_obb};
use crate::error::{invalid_param, Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::kernels::log_compress;
use eval::{Accum, CellEval};

/// Multi-channel image, channel-major: `data[(k·height + i)·width + j]` is
/// channel `k` at row `i`, column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    /// Per pixel, the cloud index selected by the range reduction.
    pub argmax: Vec<Option<u32>>,
}

impl RenderedImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            argmax: vec![None; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(invalid_param(format!(
                "{} values for a {width}×{height}×{channels} image",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data, argmax: vec![None; width * height] })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.height + i) * self.width + j
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(k, i, j)]
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[k * n..(k + 1) * n]
    }

    /// Pixels where at least one point responded.
    pub fn coverage(&self) -> Vec<bool> {
        self.argmax.iter().map(Option::is_some).collect()
    }

    pub fn same_shape(&self, other: &RenderedImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn max_abs_diff(&self, other: &RenderedImage) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Brute,
    KdTree,
    Binning,
    #[default]
    Auto,
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Brute => "brute",
            Backend::KdTree => "kdtree",
            Backend::Binning => "binning",
            Backend::Auto => "auto",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brute" => Ok(Backend::Brute),
            "kdtree" | "kd_tree" => Ok(Backend::KdTree),
            "binning" => Ok(Backend::Binning),
            "auto" => Ok(Backend::Auto),
            _ => Err(invalid_param(format!("unknown backend `{s}` (brute, kdtree, binning, auto)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderOptions {
    #[serde(default)]
    pub backend: Backend,
    #[serde(default = "default_leaf")]
    pub leaf_size: usize,
    /// Fixed binning neighborhood radius in cells; derived from the kernel
    /// support when unset.
    #[serde(default)]
    pub binning_radius: Option<usize>,
}

fn default_leaf() -> usize {
    16
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { backend: Backend::Auto, leaf_size: default_leaf(), binning_radius: None }
    }
}

impl RenderOptions {
    pub fn with_backend(backend: Backend) -> Self {
        Self { backend, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Max,
    Sum,
}

/// A cloud reordered canonically (lexicographic in x, y, z), so sums do
/// not depend on the caller's point order. `original[k]` is the caller's
/// index of canonical point `k`.
pub(crate) struct Scene {
    pub points: Vec<Vec3>,
    pub original: Vec<u32>,
}

impl Scene {
    pub fn new(cloud: &PointCloud) -> Result<Self> {
        cloud.ensure_nonempty()?;
        if cloud.len() > u32::MAX as usize {
            return Err(invalid_param("point cloud too large"));
        }
        let pts = cloud.points();
        let mut order: Vec<u32> = (0..pts.len() as u32).collect();
        order.sort_by(|&a, &b| {
            let (p, q) = (&pts[a as usize], &pts[b as usize]);
            p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y)).then(p.z.total_cmp(&q.z)).then(a.cmp(&b))
        });
        Ok(Self { points: order.iter().map(|&k| pts[k as usize]).collect(), original: order })
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let first = self.points[0];
        self.points.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)))
    }
}

/// Which backend actually runs for `grid` under `opts`.
pub(crate) fn resolve_backend(grid: &SensorGrid, opts: &RenderOptions) -> Result<Backend> {
    let bounded = grid.cells.iter().all(|c| c.kernel.lateral_support().is_some());
    Ok(match opts.backend {
        Backend::Brute => Backend::Brute,
        Backend::KdTree if bounded => Backend::KdTree,
        Backend::KdTree => Backend::Brute,
        Backend::Binning => {
            binning::BinLayout::detect(grid)?;
            Backend::Binning
        }
        Backend::Auto => {
            if binning::BinLayout::detect(grid).is_ok() {
                Backend::Binning
            } else if bounded {
                Backend::KdTree
            } else {
                Backend::Brute
            }
        }
    })
}

/// Candidate points of each cell for a culling backend; `None` means all.
pub(crate) struct Culler {
    tree: Option<KdTree>,
    bounds: (Vec3, Vec3),
}

impl Culler {
    pub fn new(scene: &Scene, backend: Backend, leaf_size: usize) -> Result<Self> {
        let tree = match backend {
            Backend::Brute => None,
            _ => Some(KdTree::build(&scene.points, leaf_size)?),
        };
        Ok(Self { tree, bounds: scene.bounds() })
    }

    /// Canonical indices of every point that can respond to `cell`, ascending.
    pub fn candidates(&self, cell: &SensorCell, out: &mut Vec<u32>, n: usize) {
        out.clear();
        match &self.tree {
            Some(tree) => match support_obb(cell, self.bounds) {
                Ok(obb) => tree.query_obb_into(&obb, out),
                Err(_) => out.extend(0..n as u32),
            },
            None => out.extend(0..n as u32),
        }
    }
}

fn accumulate_cells(grid: &SensorGrid, scene: &Scene, culler: &Culler) -> Vec<Accum> {
    grid.cells
        .par_iter()
        .map_init(Vec::new, |buf, cell| {
            let ev = CellEval::new(cell, &grid.channels);
            let mut acc = Accum::new(ev.n_sums());
            culler.candidates(cell, buf, scene.points.len());
            for &k in buf.iter() {
                let k = k as usize;
                ev.accumulate(scene.original[k], &scene.points[k], &mut acc.sums, &mut acc.best, &mut acc.argmax);
            }
            acc
        })
        .collect()
}

/// Raw per-cell reductions of a validated grid over a prepared scene.
pub(crate) fn forward_accums(grid: &SensorGrid, scene: &Scene, opts: &RenderOptions) -> Result<Vec<Accum>> {
    if opts.leaf_size == 0 {
        return Err(invalid_param("leaf size must be ≥ 1"));
    }
    match resolve_backend(grid, opts)? {
        Backend::Binning => {
            let layout = binning::BinLayout::detect(grid)?;
            Ok(binning::accumulate(grid, scene, &layout, opts.binning_radius))
        }
        b => Ok(accumulate_cells(grid, scene, &Culler::new(scene, b, opts.leaf_size)?)),
    }
}

/// Turns per-cell reductions into channel values.
pub(crate) fn finalize(grid: &SensorGrid, cloud: &PointCloud, accums: &[Accum]) -> RenderedImage {
    let (h, w) = (grid.rows(), grid.cols());
    let mut img = RenderedImage::zeros(w, h, grid.channels.len());
    let n = w * h;
    for (p, (acc, cell)) in accums.iter().zip(&grid.cells).enumerate() {
        img.argmax[p] = acc.argmax;
        let mut sum_k = 0;
        for (k, ch) in grid.channels.iter().enumerate() {
            img.data[k * n + p] = match ch {
                Channel::Range => acc.best,
                Channel::Depth { far } => match acc.argmax {
                    Some(idx) => CellEval::new(cell, &[]).view_depth(&cloud.points()[idx as usize]),
                    None => *far,
                },
                Channel::Density { log_beta, .. } => {
                    let s = acc.sums[sum_k];
                    sum_k += 1;
                    match log_beta {
                        Some(b) => log_compress(s, *b).map_or(0.0, |v| v.0),
                        None => s,
                    }
                }
            };
        }
    }
    img
}

/// Renders `cloud` through an already-configured grid.
pub fn render_grid(grid: &SensorGrid, cloud: &PointCloud, opts: &RenderOptions) -> Result<RenderedImage> {
    grid.validate()?;
    let scene = Scene::new(cloud)?;
    let accums = forward_accums(grid, &scene, opts)?;
    Ok(finalize(grid, cloud, &accums))
}

/// Renders `cloud` after writing `params` into `grid` and applying the
/// geometric transform they carry.
pub fn render(grid: &SensorGrid, cloud: &PointCloud, params: &RenderParams, opts: &RenderOptions) -> Result<RenderedImage> {
    let configured = params.apply(grid)?;
    let moved = params.geometric()?.apply(cloud)?;
    render_grid(&configured, &moved, opts)
}

/// One cell's response over the cloud under the given reduction.
pub fn cell_response(cell: &SensorCell, cloud: &PointCloud, reduction: Reduction) -> Result<f64> {
    cell.validate()?;
    let scene = Scene::new(cloud)?;
    let ev = CellEval::new(cell, &[Channel::DENSITY]);
    let mut acc = Accum::new(1);
    for (k, p) in scene.points.iter().enumerate() {
        ev.accumulate(scene.original[k], p, &mut acc.sums, &mut acc.best, &mut acc.argmax);
    }
    Ok(match reduction {
        Reduction::Max => acc.best,
        Reduction::Sum => acc.sums[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelSpec, SeparableKernel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sep(lateral: KernelSpec) -> CellKernel {
        CellKernel::Separable(SeparableKernel { lateral, depth: KernelSpec::TriangularDepth })
    }

    #[test]
    fn duplicated_cloud_doubles_sum_and_keeps_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..50).map(|_| Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.0..0.8))).collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let twice = PointCloud::new([pts.clone(), pts].concat()).unwrap();
        let cell = SensorCell::new(Vec3::zeros(), sep(KernelSpec::EpanechnikovPow { exponent: 1.65, radius: 0.5 }));
        let s1 = cell_response(&cell, &cloud, Reduction::Sum).unwrap();
        let s2 = cell_response(&cell, &twice, Reduction::Sum).unwrap();
        assert!(s1 > 0.0);
        assert!((s2 - 2.0 * s1).abs() <= 4.0 * f64::EPSILON * s1, "{s2} vs {}", 2.0 * s1);
        assert_eq!(cell_response(&cell, &cloud, Reduction::Max).unwrap(), cell_response(&cell, &twice, Reduction::Max).unwrap());
    }

    #[test]
    fn point_at_cell_center_gives_peak() {
        let cell = SensorCell::new(Vec3::new(0.2, -0.1, 0.3), sep(KernelSpec::EpanechnikovPow { exponent: 1.65, radius: 1.0 / 32.0 }));
        let cloud = PointCloud::new(vec![Vec3::new(0.2, -0.1, 0.3)]).unwrap();
        assert_eq!(cell_response(&cell, &cloud, Reduction::Max).unwrap(), 1.0);
        assert!(cell_response(&cell, &PointCloud::new(vec![]).unwrap(), Reduction::Sum).is_err());
    }

    #[test]
    fn empty_channel_list_gives_zero_channel_image() {
        let t = CellTemplate::new(sep(KernelSpec::EpanechnikovPow { exponent: 2.0, radius: 0.2 }));
        let grid = SensorGrid::planar(3, 5, PlanarLayout::default(), &t, vec![]).unwrap();
        let img = render_grid(&grid, &PointCloud::new(vec![Vec3::zeros()]).unwrap(), &RenderOptions::default()).unwrap();
        assert_eq!((img.width, img.height, img.channels, img.data.len()), (5, 3, 0, 0));
    }

    #[test]
    fn depth_channel_reports_far_without_response() {
        let t = CellTemplate::new(sep(KernelSpec::EpanechnikovPow { exponent: 1.65, radius: 0.1 }));
        let grid = SensorGrid::planar(2, 2, PlanarLayout::default(), &t, vec![Channel::Range, Channel::Depth { far: -7.0 }]).unwrap();
        let cloud = PointCloud::new(vec![Vec3::new(-0.5, -0.5, -0.8)]).unwrap();
        let img = render_grid(&grid, &cloud, &RenderOptions::with_backend(Backend::Brute)).unwrap();
        assert_eq!(img.argmax[0], Some(0));
        assert!((img.get(1, 0, 0) - 0.4).abs() < 1e-12);
        assert_eq!(img.get(1, 1, 1), -7.0);
        assert_eq!(img.coverage(), vec![true, false, false, false]);
    }
}
