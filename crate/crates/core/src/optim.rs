//! First-order optimization of render parameters against image losses.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::geometry::{quat_compose, quat_rotate, Label, PointCloud, Quaternion, TpsBasis, TpsWarp};
use crate::gradients::render_backward;
use crate::renderer::{
    render, GeometricTransform, ParamClass, RenderOptions, RenderParams, RenderedImage, SensorGrid,
};

#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    /// Mean squared difference to a target image.
    ImageMse { target: RenderedImage },
    /// Mean squared difference to a render of the object points alone.
    ClutterSuppression { clean: RenderedImage },
    /// Mean of `mask · value²` per channel; `mask` has one entry per pixel.
    ChannelEnergy { mask: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// One weight per channel.
    pub channel_weights: Vec<f64>,
}

impl LossSpec {
    pub fn image_mse(target: RenderedImage) -> Self {
        let channel_weights = vec![1.0; target.channels];
        Self { kind: LossKind::ImageMse { target }, channel_weights }
    }

    /// Target is the render of the cloud's object-labeled points under
    /// `params`. Labels are only used to build the target.
    pub fn clutter_suppression(
        cloud: &PointCloud,
        grid: &SensorGrid,
        params: &RenderParams,
        opts: &RenderOptions,
    ) -> Result<Self> {
        let object = cloud
            .select(Label::Object)
            .ok_or_else(|| invalid_input("clutter suppression needs a labeled cloud with object points"))?;
        let clean = render(grid, &object, params, opts)?;
        let channel_weights = vec![1.0; clean.channels];
        Ok(Self { kind: LossKind::ClutterSuppression { clean }, channel_weights })
    }

    pub fn channel_energy(mask: Vec<f64>, channels: usize) -> Self {
        Self { kind: LossKind::ChannelEnergy { mask }, channel_weights: vec![1.0; channels] }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.channel_weights = weights;
        self
    }

    pub fn validate(&self, grid: &SensorGrid) -> Result<()> {
        let (w, h, c) = (grid.cols(), grid.rows(), grid.channels.len());
        if self.channel_weights.len() != c {
            return Err(invalid_param(format!("{} channel weights for {c} channels", self.channel_weights.len())));
        }
        if self.channel_weights.iter().any(|v| !v.is_finite()) {
            return Err(invalid_param("channel weights must be finite"));
        }
        match &self.kind {
            LossKind::ImageMse { target: t } | LossKind::ClutterSuppression { clean: t } => {
                if (t.width, t.height, t.channels) != (w, h, c) {
                    return Err(invalid_param(format!(
                        "target is {}×{}×{}, grid renders {w}×{h}×{c}",
                        t.width, t.height, t.channels
                    )));
                }
            }
            LossKind::ChannelEnergy { mask } => {
                if mask.len() != w * h {
                    return Err(invalid_param(format!("mask has {} entries for {} pixels", mask.len(), w * h)));
                }
            }
        }
        Ok(())
    }

    /// Loss value and its gradient w.r.t. the image.
    pub fn eval(&self, image: &RenderedImage) -> Result<(f64, RenderedImage)> {
        let n = image.pixels();
        let mut grad = RenderedImage::zeros(image.width, image.height, image.channels);
        let mut total = 0.0;
        for k in 0..image.channels {
            let wk = self.channel_weights[k] / n as f64;
            let x = image.channel(k);
            let g = grad.channel_mut(k);
            match &self.kind {
                LossKind::ImageMse { target: t } | LossKind::ClutterSuppression { clean: t } => {
                    for ((gi, xi), ti) in g.iter_mut().zip(x).zip(t.channel(k)) {
                        let d = xi - ti;
                        total += wk * d * d;
                        *gi = 2.0 * wk * d;
                    }
                }
                LossKind::ChannelEnergy { mask } => {
                    for ((gi, xi), m) in g.iter_mut().zip(x).zip(mask) {
                        total += wk * m * xi * xi;
                        *gi = 2.0 * wk * m * xi;
                    }
                }
            }
        }
        Ok((total, grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    /// Plain gradient steps. With `backtracking`, a step that would raise
    /// the loss is retried at half the rate, and the rate stays halved.
    Sgd {
        lr: f64,
        #[serde(default)]
        backtracking: bool,
    },
    Adam {
        #[serde(default = "adam_lr")]
        lr: f64,
        #[serde(default = "adam_beta1")]
        beta1: f64,
        #[serde(default = "adam_beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn adam_lr() -> f64 {
    2e-4
}
fn adam_beta1() -> f64 {
    0.9
}
fn adam_beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam { lr, beta1: adam_beta1(), beta2: adam_beta2(), eps: adam_eps() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Sgd { lr, .. } => lr.is_finite() && lr >= 0.0,
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                lr.is_finite() && lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid_param(format!("invalid optimizer settings {self:?}")))
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam(adam_lr())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSettings {
    pub steps: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Parameter classes that move; everything when absent.
    #[serde(default)]
    pub trainable: Option<Vec<ParamClass>>,
    /// Further restricts training to these flat indices.
    #[serde(default)]
    pub indices: Option<Vec<usize>>,
    /// Keep a parameter snapshot every n steps (0: never).
    #[serde(default)]
    pub snapshot_every: usize,
    /// Keep the rendered frame every n steps (0: never).
    #[serde(default)]
    pub frame_every: usize,
    #[serde(default)]
    pub render: RenderOptions,
}

impl OptimizeSettings {
    pub fn new(steps: usize, optimizer: Optimizer) -> Self {
        Self { steps, optimizer, trainable: None, indices: None, snapshot_every: 0, frame_every: 0, render: RenderOptions::default() }
    }

    pub fn trainable(mut self, classes: &[ParamClass]) -> Self {
        self.trainable = Some(classes.to_vec());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Loss at the parameters entering this step.
    pub loss: f64,
    pub grad_norm: f64,
    /// Rate in effect when the step was taken.
    pub lr: f64,
    /// Index into [`Trajectory::snapshots`].
    pub snapshot: Option<usize>,
    pub frame: Option<RenderedImage>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// One record per step plus a final one for the end point.
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<Vec<f64>>,
    pub final_params: RenderParams,
    /// Parameters with the lowest recorded loss.
    pub best_params: RenderParams,
    pub best_loss: f64,
    /// Why the run stopped early, if it did.
    pub abort: Option<String>,
}

impl Trajectory {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Tab-separated log: step, loss, gradient norm, rate.
    pub fn to_log(&self) -> String {
        let mut s = String::from("step\tloss\tgrad_norm\tlr\n");
        for r in &self.records {
            s.push_str(&format!("{}\t{:.17e}\t{:.17e}\t{:e}\n", r.step, r.loss, r.grad_norm, r.lr));
        }
        if let Some(a) = &self.abort {
            s.push_str(&format!("# aborted: {a}\n"));
        }
        s
    }
}

struct Evaluator<'a> {
    cloud: &'a PointCloud,
    grid: &'a SensorGrid,
    loss: &'a LossSpec,
    opts: &'a RenderOptions,
}

impl Evaluator<'_> {
    fn value(&self, p: &RenderParams) -> Result<(f64, RenderedImage)> {
        let img = render(self.grid, self.cloud, p, self.opts)?;
        let (l, _) = self.loss.eval(&img)?;
        Ok((l, img))
    }

    /// Parameters after moving along `dir` by `t`, renormalized; `None`
    /// when they do not form a valid configuration.
    fn candidate(&self, p: &RenderParams, dir: &[f64], t: f64) -> Option<RenderParams> {
        let mut v = p.values().to_vec();
        for (a, d) in v.iter_mut().zip(dir) {
            *a += t * d;
        }
        let mut c = p.with_values(v).ok()?;
        c.normalize_quaternions().ok()?;
        (c.apply(self.grid).is_ok() && c.geometric().is_ok()).then_some(c)
    }

    /// Like [`candidate`](Self::candidate), but a cell (or the transform)
    /// whose block would become invalid has only its own step halved, and
    /// is left in place once the step becomes negligible.
    fn feasible(&self, p: &RenderParams, dir: &[f64], t: f64) -> Option<RenderParams> {
        let layout = p.layout();
        let cells = layout.cell_count();
        let mut scale = vec![t; cells + 1];
        for _ in 0..60 {
            let mut v = p.values().to_vec();
            for (k, &sk) in scale.iter().enumerate() {
                let r = if k < cells { layout.cell_range(k) } else { layout.geometric_range() };
                for i in r {
                    v[i] += sk * dir[i];
                }
            }
            let mut c = p.with_values(v).ok()?;
            let quats = c.normalize_quaternions();
            let bad = c.invalid_cells(self.grid).ok()?;
            let geo_bad = quats.is_err() || c.geometric().is_err();
            if bad.is_empty() && !geo_bad {
                return c.apply(self.grid).is_ok().then_some(c);
            }
            if quats.is_err() {
                return None;
            }
            // Blocks that cannot move at all sit this step out.
            let shrink = |x: f64| if x.abs() < t.abs() * 1e-12 { 0.0 } else { x * 0.5 };
            for k in bad {
                scale[k] = shrink(scale[k]);
            }
            if geo_bad {
                scale[cells] = shrink(scale[cells]);
            }
        }
        None
    }
}

/// Runs `settings.steps` updates of render → loss → backward → step.
/// Quaternions are renormalized after every step. A non-finite loss or a
/// failed render stops the run and is reported in [`Trajectory::abort`].
pub fn optimize(
    cloud: &PointCloud,
    grid: &SensorGrid,
    params0: &RenderParams,
    loss: &LossSpec,
    settings: &OptimizeSettings,
) -> Result<Trajectory> {
    if settings.steps == 0 {
        return Err(invalid_param("steps must be ≥ 1"));
    }
    settings.optimizer.validate()?;
    loss.validate(grid)?;
    cloud.ensure_nonempty()?;
    params0.apply(grid)?;
    let mut mask: Vec<bool> = match &settings.trainable {
        None => vec![true; params0.len()],
        Some(classes) => {
            let idx = params0.layout().indices_of(classes);
            let mut m = vec![false; params0.len()];
            idx.into_iter().for_each(|i| m[i] = true);
            m
        }
    };
    if let Some(only) = &settings.indices {
        if let Some(&i) = only.iter().find(|&&i| i >= mask.len()) {
            return Err(invalid_param(format!("parameter index {i} out of range")));
        }
        for (i, m) in mask.iter_mut().enumerate() {
            *m &= only.contains(&i);
        }
    }
    let ev = Evaluator { cloud, grid, loss, opts: &settings.render };
    let mut p = params0.clone();
    let mut lr = match settings.optimizer {
        Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => lr,
    };
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    let mut traj = Trajectory {
        records: Vec::with_capacity(settings.steps + 1),
        snapshots: Vec::new(),
        final_params: p.clone(),
        best_params: p.clone(),
        best_loss: f64::INFINITY,
        abort: None,
    };
    let mut cached: Option<(f64, RenderedImage)> = None;

    for step in 0..=settings.steps {
        let (l, img) = match cached.take() {
            Some(c) => c,
            None => match ev.value(&p) {
                Ok(c) => c,
                Err(e) => {
                    traj.abort = Some(format!("step {step}: {e}"));
                    break;
                }
            },
        };
        if !l.is_finite() {
            traj.abort = Some(format!("step {step}: non-finite loss {l}"));
            break;
        }
        if l < traj.best_loss {
            traj.best_loss = l;
            traj.best_params = p.clone();
        }
        let snapshot = (settings.snapshot_every > 0 && step % settings.snapshot_every == 0).then(|| {
            traj.snapshots.push(p.values().to_vec());
            traj.snapshots.len() - 1
        });
        let frame = (settings.frame_every > 0 && step % settings.frame_every == 0).then(|| img.clone());
        if step == settings.steps {
            traj.records.push(StepRecord { step, loss: l, grad_norm: 0.0, lr, snapshot, frame });
            break;
        }

        let (_, up) = loss.eval(&img)?;
        let mut g = match render_backward(grid, cloud, &p, &up, &settings.render) {
            Ok(g) => g.params,
            Err(e) => {
                traj.abort = Some(format!("step {step}: {e}"));
                break;
            }
        };
        g.iter_mut().zip(&mask).filter(|(_, &m)| !m).for_each(|(x, _)| *x = 0.0);
        let grad_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        traj.records.push(StepRecord { step, loss: l, grad_norm, lr, snapshot, frame });

        match settings.optimizer {
            Optimizer::Sgd { backtracking: false, .. } => {
                let dir: Vec<f64> = g.iter().map(|x| -x).collect();
                match ev.feasible(&p, &dir, lr) {
                    Some(c) => p = c,
                    None => {
                        traj.abort = Some(format!("step {step}: update left the valid parameter range"));
                        break;
                    }
                }
            }
            Optimizer::Sgd { backtracking: true, .. } => {
                let dir: Vec<f64> = g.iter().map(|x| -x).collect();
                for _ in 0..40 {
                    if let Some(c) = ev.candidate(&p, &dir, lr) {
                        if let Ok((lc, img)) = ev.value(&c) {
                            if lc <= l {
                                p = c;
                                cached = Some((lc, img));
                                break;
                            }
                        }
                    }
                    lr *= 0.5;
                }
            }
            Optimizer::Adam { beta1, beta2, eps, .. } => {
                let t = (step + 1) as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                let dir: Vec<f64> = (0..g.len())
                    .map(|i| {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        if mask[i] {
                            -(m[i] / c1) / ((v[i] / c2).sqrt() + eps)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                match ev.feasible(&p, &dir, lr) {
                    Some(c) => p = c,
                    None => {
                        traj.abort = Some(format!("step {step}: update left the valid parameter range"));
                        break;
                    }
                }
            }
        }
    }
    traj.final_params = p;
    Ok(traj)
}

/// Settings of the compose-and-re-render pose loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFitSettings {
    #[serde(default = "pose_outer")]
    pub outer_iters: usize,
    #[serde(default = "pose_inner")]
    pub inner_steps: usize,
    #[serde(default = "pose_optimizer")]
    pub optimizer: Optimizer,
    /// Stop once an outer update rotates by less than this (radians).
    #[serde(default = "pose_tol")]
    pub tol: f64,
    #[serde(default)]
    pub render: RenderOptions,
}

fn pose_outer() -> usize {
    8
}
fn pose_inner() -> usize {
    20
}
fn pose_optimizer() -> Optimizer {
    Optimizer::Sgd { lr: 1.0, backtracking: true }
}
fn pose_tol() -> f64 {
    1e-5
}

impl Default for PoseFitSettings {
    fn default() -> Self {
        Self {
            outer_iters: pose_outer(),
            inner_steps: pose_inner(),
            optimizer: pose_optimizer(),
            tol: pose_tol(),
            render: RenderOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoseFit {
    /// Accumulated rotation mapping the input cloud onto the target pose.
    pub rotation: Quaternion,
    /// Angle of each outer update.
    pub updates: Vec<f64>,
    /// Image loss after each outer iteration.
    pub losses: Vec<f64>,
}

/// Estimates the rotation that brings `cloud` to the pose rendered in
/// `target`. Each outer iteration fits a rotation to the current cloud,
/// composes it with the accumulated one and re-renders the rotated cloud.
pub fn pose_fit(
    cloud: &PointCloud,
    target: &RenderedImage,
    grid: &SensorGrid,
    settings: &PoseFitSettings,
) -> Result<PoseFit> {
    let loss = LossSpec::image_mse(target.clone());
    let inner = OptimizeSettings {
        steps: settings.inner_steps.max(1),
        optimizer: settings.optimizer,
        trainable: Some(vec![ParamClass::GeometricRotation]),
        indices: None,
        snapshot_every: 0,
        frame_every: 0,
        render: settings.render.clone(),
    };
    let params = RenderParams::from_grid(grid, &GeometricTransform::Rotation(Quaternion::IDENTITY));
    let mut acc = Quaternion::IDENTITY;
    let mut fit = PoseFit { rotation: acc, updates: Vec::new(), losses: Vec::new() };
    for _ in 0..settings.outer_iters {
        let current = quat_rotate(acc, cloud)?;
        let traj = optimize(&current, grid, &params, &loss, &inner)?;
        if let Some(a) = &traj.abort {
            return Err(Error::Numerical(format!("pose fit: {a}")));
        }
        let GeometricTransform::Rotation(q) = traj.best_params.geometric()? else { unreachable!() };
        let q = q.normalized()?;
        acc = quat_compose(q, acc)?;
        fit.updates.push(q.angle());
        fit.losses.push(traj.best_loss);
        if q.angle() < settings.tol {
            break;
        }
    }
    fit.rotation = acc.canonical();
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectifySettings {
    #[serde(default = "rectify_iters")]
    pub iters: usize,
    #[serde(default = "rectify_optimizer")]
    pub optimizer: Optimizer,
    /// Control points per side of the square TPS grid.
    #[serde(default = "rectify_side")]
    pub control_side: usize,
    /// Half width of the control grid.
    #[serde(default = "rectify_extent")]
    pub extent: f64,
    #[serde(default)]
    pub render: RenderOptions,
}

fn rectify_iters() -> usize {
    100
}
fn rectify_optimizer() -> Optimizer {
    Optimizer::Sgd { lr: 1.0, backtracking: true }
}
fn rectify_side() -> usize {
    4
}
fn rectify_extent() -> f64 {
    1.0
}

impl Default for RectifySettings {
    fn default() -> Self {
        Self {
            iters: rectify_iters(),
            optimizer: rectify_optimizer(),
            control_side: rectify_side(),
            extent: rectify_extent(),
            render: RenderOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RectifyFit {
    /// Warp with the lowest image loss.
    pub warp: TpsWarp,
    pub losses: Vec<f64>,
    /// Correspondence RMSE per iteration when a reference was given.
    pub rmse: Vec<f64>,
}

/// Root mean squared distance between corresponding points.
pub fn correspondence_rmse(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid_input(format!("cannot pair {} with {} points", a.len(), b.len())));
    }
    let s: f64 = a.points().iter().zip(b.points()).map(|(p, q)| (p - q).norm_squared()).sum();
    Ok((s / a.len() as f64).sqrt())
}

/// Fits planar TPS displacements that warp `cloud` so its render matches
/// `target`. With `reference` (the undeformed cloud, point for point) the
/// correspondence RMSE of every iterate is reported.
pub fn rectify_fit(
    cloud: &PointCloud,
    target: &RenderedImage,
    grid: &SensorGrid,
    settings: &RectifySettings,
    reference: Option<&PointCloud>,
) -> Result<RectifyFit> {
    let basis = std::sync::Arc::new(TpsBasis::grid(settings.control_side, settings.extent)?);
    let params = RenderParams::from_grid(grid, &GeometricTransform::Tps(TpsWarp::identity(basis)));
    let loss = LossSpec::image_mse(target.clone());
    let opt = OptimizeSettings {
        steps: settings.iters.max(1),
        optimizer: settings.optimizer,
        trainable: Some(vec![ParamClass::GeometricTps]),
        indices: None,
        snapshot_every: if reference.is_some() { 1 } else { 0 },
        frame_every: 0,
        render: settings.render.clone(),
    };
    let traj = optimize(cloud, grid, &params, &loss, &opt)?;
    if let Some(a) = &traj.abort {
        return Err(Error::Numerical(format!("rectify fit: {a}")));
    }
    let warp_of = |p: &RenderParams| match p.geometric() {
        Ok(GeometricTransform::Tps(w)) => Ok(w),
        Ok(_) => unreachable!(),
        Err(e) => Err(e),
    };
    let mut rmse = Vec::new();
    if let Some(r) = reference {
        for snap in &traj.snapshots {
            let w = warp_of(&params.with_values(snap.clone())?)?;
            rmse.push(correspondence_rmse(&w.apply(cloud), r)?);
        }
    }
    Ok(RectifyFit { warp: warp_of(&traj.best_params)?, losses: traj.losses(), rmse })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClutterReport {
    /// Clutter fraction over all responding pixels.
    pub ratio: f64,
    pub responding: usize,
    /// `(depth lo, depth hi, ratio, pixel count)` per depth quantile of the
    /// selected points.
    pub by_quantile: Vec<(f64, f64, f64, usize)>,
}

/// Fraction of responding pixels whose range-selected point is clutter.
/// `image` must be a render of `scene` on `grid`.
pub fn clutter_ratio(image: &RenderedImage, scene: &PointCloud, grid: &SensorGrid) -> Result<f64> {
    Ok(clutter_report(image, scene, grid, 4)?.ratio)
}

pub fn clutter_report(image: &RenderedImage, scene: &PointCloud, grid: &SensorGrid, quantiles: usize) -> Result<ClutterReport> {
    let labels = scene.labels().ok_or_else(|| invalid_input("clutter ratio needs a labeled scene"))?;
    if image.pixels() != grid.cells.len() {
        return Err(invalid_param("image does not match the grid"));
    }
    let mut hits: Vec<(f64, bool)> = Vec::new();
    for (p, a) in image.argmax.iter().enumerate() {
        let Some(a) = *a else { continue };
        let a = a as usize;
        if a >= scene.len() {
            return Err(invalid_input("image was not rendered from this scene"));
        }
        let cell = &grid.cells[p];
        let depth = (cell.view.rotation.to_matrix() * (scene.points()[a] - cell.position)).z;
        hits.push((depth, labels[a] == Label::Clutter));
    }
    let n = hits.len();
    let ratio = if n == 0 { 0.0 } else { hits.iter().filter(|h| h.1).count() as f64 / n as f64 };
    hits.sort_by(|a, b| a.0.total_cmp(&b.0));
    let q = quantiles.max(1);
    let by_quantile = (0..q)
        .filter_map(|i| {
            let part = &hits[i * n / q..(i + 1) * n / q];
            let first = part.first()?;
            let c = part.iter().filter(|h| h.1).count();
            Some((first.0, part.last()?.0, c as f64 / part.len() as f64, part.len()))
        })
        .collect();
    Ok(ClutterReport { ratio, responding: n, by_quantile })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use crate::geometry::Vec3;
    use crate::renderer::{Backend, CellKernel, CellTemplate, Channel, PlanarLayout};

    fn grid(rows: usize, cols: usize, sigma: f64) -> SensorGrid {
        let t = CellTemplate::new(CellKernel::Radial(KernelSpec::Gaussian { sigma }));
        SensorGrid::planar(rows, cols, PlanarLayout::default(), &t, vec![Channel::DENSITY]).unwrap()
    }

    fn opts() -> RenderOptions {
        RenderOptions::with_backend(Backend::Brute)
    }

    fn cloud() -> PointCloud {
        PointCloud::new(vec![Vec3::new(0.1, 0.2, 0.0), Vec3::new(-0.4, 0.3, 0.2), Vec3::new(0.3, -0.5, -0.1)]).unwrap()
    }

    #[test]
    fn starting_at_the_target_stays_put() {
        let g = grid(4, 4, 0.4);
        let params = RenderParams::from_grid(&g, &GeometricTransform::Identity);
        let target = render(&g, &cloud(), &params, &opts()).unwrap();
        for opt in [Optimizer::adam(0.01), Optimizer::Sgd { lr: 0.1, backtracking: true }] {
            let mut s = OptimizeSettings::new(3, opt);
            s.render = opts();
            let t = optimize(&cloud(), &g, &params, &LossSpec::image_mse(target.clone()), &s).unwrap();
            assert_eq!(t.records[0].loss, 0.0);
            assert_eq!(t.records[0].grad_norm, 0.0);
            assert_eq!(t.final_params.values(), params.values());
        }
    }

    #[test]
    fn zero_rate_keeps_parameters() {
        let g = grid(3, 3, 0.4);
        let params = RenderParams::from_grid(&g, &GeometricTransform::Identity);
        let mut s = OptimizeSettings::new(4, Optimizer::Sgd { lr: 0.0, backtracking: false });
        s.render = opts();
        let t = optimize(&cloud(), &g, &params, &LossSpec::channel_energy(vec![1.0; 9], 1), &s).unwrap();
        assert_eq!(t.final_params.values(), params.values());
        let l = t.losses();
        assert!(l.iter().all(|&x| x == l[0]));
        assert_eq!(l.len(), 5);
    }

    #[test]
    fn backtracking_never_increases_loss() {
        let g = grid(4, 4, 0.4);
        let params = RenderParams::from_grid(&g, &GeometricTransform::Identity);
        let mut s = OptimizeSettings::new(15, Optimizer::Sgd { lr: 5.0, backtracking: true });
        s.render = opts();
        let t = optimize(&cloud(), &g, &params, &LossSpec::channel_energy(vec![1.0; 16], 1), &s).unwrap();
        assert!(t.abort.is_none());
        let l = t.losses();
        assert!(l.windows(2).all(|w| w[1] <= w[0]), "{l:?}");
        assert!(l.last() < l.first());
    }

    #[test]
    fn steps_into_a_bound_hold_that_cell_back() {
        let g = grid(3, 3, 0.4);
        let params = RenderParams::from_grid(&g, &GeometricTransform::Identity);
        let loss = LossSpec::channel_energy(vec![1.0; 9], 1);
        for opt in [Optimizer::adam(1.0), Optimizer::Sgd { lr: 1e3, backtracking: false }] {
            let mut s = OptimizeSettings::new(30, opt).trainable(&[ParamClass::LateralKernel]);
            s.render = opts();
            let t = optimize(&cloud(), &g, &params, &loss, &s).unwrap();
            assert!(t.abort.is_none(), "{:?}", t.abort);
            t.final_params.apply(&g).unwrap();
            assert!(t.best_loss < t.records[0].loss);
        }
    }

    #[test]
    fn single_position_matches_grid_search() {
        let g = grid(1, 1, 0.5);
        let pt = PointCloud::new(vec![Vec3::new(0.2, 0.0, 0.0)]).unwrap();
        let params = RenderParams::from_grid(&g, &GeometricTransform::Identity);
        let loss = LossSpec::image_mse(RenderedImage::from_data(1, 1, 1, vec![0.04]).unwrap());
        let f = |x: f64| {
            let mut v = params.values().to_vec();
            v[0] = x;
            let p = params.with_values(v).unwrap();
            loss.eval(&render(&g, &pt, &p, &opts()).unwrap()).unwrap().0
        };
        // The loss has two minima mirrored about x = 0.2; the start at 0 lies
        // in the basin of the left one.
        let best = (0..=70000).map(|i| -0.5 + i as f64 * 1e-5).min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap();
        let mut s = OptimizeSettings::new(200, Optimizer::Sgd { lr: 50.0, backtracking: true });
        s.indices = Some(vec![0]);
        s.render = opts();
        let t = optimize(&pt, &g, &params, &loss, &s).unwrap();
        let x = t.best_params.values()[0];
        assert!((x - best).abs() < 1e-3, "{x} vs {best}");
        assert_eq!(&t.best_params.values()[1..], &params.values()[1..]);
    }

    #[test]
    fn clutter_ratio_extremes() {
        let g = grid(3, 3, 0.4);
        let p = RenderParams::from_grid(&g, &GeometricTransform::Identity);
        let pts = cloud().points().to_vec();
        let mut g2 = g.clone();
        g2.channels = vec![Channel::Range];
        let obj = PointCloud::with_labels(pts.clone(), vec![Label::Object; 3]).unwrap();
        let img = render(&g2, &obj, &p, &opts()).unwrap();
        assert_eq!(clutter_ratio(&img, &obj, &g2).unwrap(), 0.0);
        let clu = PointCloud::with_labels(pts.clone(), vec![Label::Clutter; 3]).unwrap();
        assert_eq!(clutter_ratio(&img, &clu, &g2).unwrap(), 1.0);
        assert!(clutter_ratio(&img, &cloud(), &g2).is_err());
        let r = clutter_report(&img, &clu, &g2, 3).unwrap();
        assert_eq!(r.by_quantile.iter().map(|q| q.3).sum::<usize>(), r.responding);
    }

    #[test]
    fn pose_fit_at_canonical_pose_is_identity() {
        let g = grid(6, 6, 0.3);
        let params = RenderParams::from_grid(&g, &GeometricTransform::Identity);
        let target = render(&g, &cloud(), &params, &opts()).unwrap();
        let s = PoseFitSettings { render: opts(), ..Default::default() };
        let fit = pose_fit(&cloud(), &target, &g, &s).unwrap();
        assert!(fit.rotation.angle() < 1e-3);
        assert!((fit.rotation.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rectify_without_deformation_keeps_identity() {
        let g = grid(6, 6, 0.3);
        let params = RenderParams::from_grid(&g, &GeometricTransform::Identity);
        let target = render(&g, &cloud(), &params, &opts()).unwrap();
        let s = RectifySettings { iters: 5, render: opts(), ..Default::default() };
        let fit = rectify_fit(&cloud(), &target, &g, &s, Some(&cloud())).unwrap();
        let n: f64 = fit.warp.displacements().iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n < 1e-3);
        assert!(fit.rmse.iter().all(|&r| r < 1e-9));
    }
}
