use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use cellrender::attenuation::{AttenuationField, Squash};
use cellrender::geometry::{normalize_cloud, PointCloud, Quaternion, TpsBasis, TpsWarp, Vec3};
use cellrender::gradients::{finite_diff_check, RenderObjective};
use cellrender::kernels::{KernelSpec, SeparableKernel};
use cellrender::optim::{clutter_report, optimize, LossSpec, OptimizeSettings};
use cellrender::renderer::{
    io, render, render_grid, Backend, CellKernel, CellTemplate, Channel, GeometricTransform, PlanarLayout,
    RenderOptions, RenderParams, RenderedImage, SensorGrid,
};
use cellrender::scene::{
    load_points, perturb_rotation, perturb_tps, rng_from_seed, save_points, synth_scene, Primitive, SceneRng,
    SceneTruth,
};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{LossConfig, RunConfig, TransformKind};

#[derive(Debug)]
pub enum Failure {
    /// Exit 2.
    Config(String),
    /// Exit 3.
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

trait Context<T> {
    fn context(self, what: &str) -> std::result::Result<T, Failure>;
}

impl<T> Context<T> for cellrender::Result<T> {
    fn context(self, what: &str) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(format!("{what}: {e}")))
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn context(self, what: &str) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(format!("{what}: {e}")))
    }
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).context(&path.display().to_string())
}

/// The object before perturbation, and the scene that is rendered.
pub struct BuiltScene {
    pub clean: PointCloud,
    pub cloud: PointCloud,
    pub truth: Option<SceneTruth>,
    pub rotation: Option<Quaternion>,
    pub warp: Option<TpsWarp>,
}

/// Mixes the run seed into a per-purpose seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const CLUTTER_STREAM: u64 = 1;
const GRADCHECK_STREAM: u64 = 2;
const BENCH_STREAM: u64 = 3;

pub fn build_scene(cfg: &RunConfig) -> std::result::Result<BuiltScene, Failure> {
    let sc = &cfg.scene;
    let mut rng = rng_from_seed(cfg.seed);
    let mut object = match &sc.input {
        Some(p) => load_points(p).context(&p.display().to_string())?,
        None => sc.primitive.sample(sc.points, &mut rng).context("sampling scene.primitive")?,
    };
    if sc.normalize {
        object = normalize_cloud(&object).context("normalizing scene")?;
    }
    let clean = object.without_labels();
    let mut rotation = None;
    let mut warp = None;
    if let Some(angle) = sc.rotation_angle {
        let (c, q) = perturb_rotation(&object, angle, &mut rng).context("rotating scene")?;
        object = c;
        rotation = Some(q);
    }
    if let Some(sigma) = sc.tps_sigma {
        let (c, w) = perturb_tps(&object, sigma, &mut rng).context("deforming scene")?;
        object = c;
        warp = Some(w);
    }
    let (cloud, truth) = match &sc.clutter {
        Some(spec) => {
            let mut spec = spec.clone();
            spec.seed = derive_seed(cfg.seed, CLUTTER_STREAM ^ (spec.seed << 8));
            if spec.primitives.is_empty() {
                spec.primitives = default_pool();
            }
            let s = synth_scene(&object, &[], &spec).context("synthesizing clutter")?;
            (s.cloud, Some(s.truth))
        }
        None => (object, None),
    };
    Ok(BuiltScene { clean, cloud, truth, rotation, warp })
}

fn default_pool() -> Vec<Primitive> {
    vec![
        Primitive::Sphere { radius: 1.0 },
        Primitive::Box { half: [0.8, 0.5, 0.3] },
        Primitive::Torus { major: 0.7, minor: 0.25 },
    ]
}

pub fn synth(cfg: &RunConfig) -> Outcome {
    let out = &cfg.output.dir;
    let s = build_scene(cfg)?;
    save_points(&s.cloud, out.join("scene.txt")).context("writing scene.txt")?;
    save_points(&s.cloud, out.join("scene.cpts")).context("writing scene.cpts")?;
    let mut t = String::new();
    let _ = writeln!(t, "points {}", s.cloud.len());
    if let Some(q) = s.rotation {
        let [w, x, y, z] = q.to_array();
        let _ = writeln!(t, "rotation {w:.17e} {x:.17e} {y:.17e} {z:.17e}");
    }
    if let Some(w) = &s.warp {
        for (c, d) in w.basis().control_points().iter().zip(w.displacements()) {
            let _ = writeln!(t, "tps {:.17e} {:.17e} {:.17e} {:.17e}", c[0], c[1], d[0], d[1]);
        }
    }
    if let Some(truth) = &s.truth {
        let _ = writeln!(t, "object_points {}", truth.object_points);
        for f in &truth.fragments {
            let _ = writeln!(
                t,
                "fragment source {} points {}..{} crop {:?} placed {:?} scale {}",
                f.source, f.range.0, f.range.1, f.crop_center, f.placed_center, f.scale
            );
        }
        if let Some((a, b)) = truth.occluder {
            let _ = writeln!(t, "occluder points {a}..{b}");
        }
    }
    write_file(&out.join("truth.txt"), &t)?;
    println!("synth: {} points written to {}", s.cloud.len(), out.display());
    Ok(())
}

fn save_image(img: &RenderedImage, out: &Path, stem: &str) -> Outcome {
    io::save_crnd(img, out.join(format!("{stem}.crnd"))).context("writing image")?;
    for k in 0..img.channels {
        io::save_pgm(img, k, out.join(format!("{stem}_c{k}.pgm"))).context("writing image")?;
    }
    Ok(())
}

pub fn render_cmd(cfg: &RunConfig) -> Outcome {
    let grid = cfg.grid.build().context("grid")?;
    let s = build_scene(cfg)?;
    let img = render_grid(&grid, &s.cloud, &cfg.render).context("render")?;
    save_image(&img, &cfg.output.dir, "render")?;
    let covered = img.coverage().iter().filter(|c| **c).count();
    println!(
        "render: {}×{}×{} image, {covered} responding pixels, written to {}",
        img.width,
        img.height,
        img.channels,
        cfg.output.dir.display()
    );
    Ok(())
}

fn transform_of(kind: TransformKind) -> std::result::Result<GeometricTransform, Failure> {
    Ok(match kind {
        TransformKind::None => GeometricTransform::Identity,
        TransformKind::Rotation => GeometricTransform::Rotation(Quaternion::IDENTITY),
        TransformKind::Tps => {
            let basis = TpsBasis::grid(4, 1.0).context("tps basis")?;
            GeometricTransform::Tps(TpsWarp::identity(std::sync::Arc::new(basis)))
        }
    })
}

/// Smooth grid used by `grad-check`: radial Gaussian cells with an active
/// attenuation field.
fn gradcheck_grid(rows: usize, cols: usize) -> cellrender::Result<SensorGrid> {
    let mut cell = CellTemplate::new(CellKernel::Radial(KernelSpec::Gaussian { sigma: 0.6 }));
    cell.elongation = 0.8;
    cell.attenuation = Some(AttenuationField::neutral(2, 0.5, 2.0, Squash::Softsign));
    SensorGrid::planar(
        rows,
        cols,
        PlanarLayout { half_extent: 1.0, plane_z: -1.2 },
        &cell,
        vec![Channel::Range, Channel::Depth { far: 0.0 }, Channel::DENSITY],
    )
}

fn jitter(params: &mut RenderParams, scale: f64, rng: &mut SceneRng) -> cellrender::Result<()> {
    for v in params.values_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += scale * n;
    }
    params.normalize_quaternions()
}

pub fn grad_check(cfg: &RunConfig) -> Outcome {
    let gc = &cfg.grad_check;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, GRADCHECK_STREAM));
    let (grid, cloud) = if gc.use_run_setup {
        (cfg.grid.build().context("grid")?, build_scene(cfg)?.cloud)
    } else {
        let grid = gradcheck_grid(gc.rows, gc.cols).context("grad-check grid")?;
        let pts = (0..gc.points)
            .map(|_| Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.4..0.4)))
            .collect();
        (grid, PointCloud::new(pts).context("grad-check cloud")?)
    };
    let mut params = RenderParams::from_grid(&grid, &transform_of(gc.transform)?);
    if !gc.use_run_setup {
        jitter(&mut params, 0.05, &mut rng).context("grad-check parameters")?;
    }
    let n = grid.rows() * grid.cols() * grid.channels.len();
    let upstream: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let upstream = RenderedImage::from_data(grid.cols(), grid.rows(), grid.channels.len(), upstream).context("upstream")?;
    let obj = RenderObjective {
        grid: &grid,
        cloud: &cloud,
        params,
        upstream,
        opts: cfg.render,
        include_points: gc.include_points,
    };
    let x0 = obj.initial();
    let report = finite_diff_check(&obj, &x0, gc.step, gc.tol).context("finite differences")?;
    write_file(&cfg.output.dir.join("gradcheck.txt"), &report.to_text())?;
    println!(
        "grad-check: {} coordinates checked, {} excluded, max relative error {:.3e} (tol {:e})",
        report.entries.len(),
        report.excluded.len(),
        report.max_rel_error,
        gc.tol
    );
    if report.passed() {
        Ok(())
    } else {
        let worst: Vec<String> = report.offending.iter().take(5).map(|e| format!("#{} ({:.2e})", e.index, e.rel_error)).collect();
        Err(Failure::Runtime(format!(
            "{} coordinates exceed tolerance, worst: {}",
            report.offending.len(),
            worst.join(", ")
        )))
    }
}

pub fn optimize_cmd(cfg: &RunConfig) -> Outcome {
    let oc = &cfg.optimize;
    let out = &cfg.output.dir;
    let grid = cfg.grid.build().context("grid")?;
    let s = build_scene(cfg)?;
    let params0 = RenderParams::from_grid(&grid, &transform_of(oc.transform)?);
    let mut loss = match &oc.loss {
        LossConfig::ImageMse { target: Some(p) } => {
            LossSpec::image_mse(io::load_crnd(p).context(&p.display().to_string())?)
        }
        LossConfig::ImageMse { target: None } => {
            let base = RenderParams::from_grid(&grid, &GeometricTransform::Identity);
            LossSpec::image_mse(render(&grid, &s.clean, &base, &cfg.render).context("rendering target")?)
        }
        LossConfig::ClutterSuppression => {
            if s.cloud.labels().is_none() {
                return Err(Failure::Config("optimize.loss clutter_suppression needs scene.clutter or a labeled input".into()));
            }
            LossSpec::clutter_suppression(&s.cloud, &grid, &params0, &cfg.render).context("clutter target")?
        }
        LossConfig::ChannelEnergy { mask } => {
            let pixels = grid.rows() * grid.cols();
            LossSpec::channel_energy(mask.clone().unwrap_or_else(|| vec![1.0; pixels]), grid.channels.len())
        }
    };
    if let Some(w) = &oc.channel_weights {
        loss = loss.with_weights(w.clone());
    }
    loss.validate(&grid).map_err(|e| Failure::Config(format!("optimize.loss: {e}")))?;
    let settings = OptimizeSettings {
        steps: oc.steps,
        optimizer: oc.optimizer,
        trainable: oc.trainable.clone(),
        indices: None,
        snapshot_every: oc.snapshot_every,
        frame_every: oc.frame_every,
        render: cfg.render,
    };
    let traj = optimize(&s.cloud, &grid, &params0, &loss, &settings).context("optimize")?;
    write_file(&out.join("trajectory.tsv"), &traj.to_log())?;
    for r in &traj.records {
        if let Some(f) = &r.frame {
            save_image(f, out, &format!("frame_{:05}", r.step))?;
        }
    }
    let mut snaps = String::new();
    for (i, v) in traj.snapshots.iter().enumerate() {
        let vals: Vec<String> = v.iter().map(|x| format!("{x:.17e}")).collect();
        let _ = writeln!(snaps, "{i}\t{}", vals.join(" "));
    }
    if !snaps.is_empty() {
        write_file(&out.join("snapshots.tsv"), &snaps)?;
    }
    let fin: Vec<String> = traj.final_params.values().iter().map(|x| format!("{x:.17e}")).collect();
    write_file(&out.join("final_params.txt"), &(fin.join("\n") + "\n"))?;
    let losses = traj.losses();
    println!(
        "optimize: {} steps, loss {:.6e} -> {:.6e} (best {:.6e})",
        losses.len().saturating_sub(1),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        traj.best_loss
    );
    if s.cloud.labels().is_some() {
        let before = render(&grid, &s.cloud, &params0, &cfg.render).context("render")?;
        let after = render(&grid, &s.cloud, &traj.best_params, &cfg.render).context("render")?;
        let rb = clutter_report(&before, &s.cloud, &grid, 4).context("clutter ratio")?;
        let ra = clutter_report(&after, &s.cloud, &grid, 4).context("clutter ratio")?;
        println!("clutter ratio: {:.4} -> {:.4}", rb.ratio, ra.ratio);
        let mut t = format!("before\t{:.17e}\nafter\t{:.17e}\n", rb.ratio, ra.ratio);
        for (lo, hi, r, n) in &ra.by_quantile {
            let _ = writeln!(t, "quantile\t{lo:.6}\t{hi:.6}\t{r:.6}\t{n}");
        }
        write_file(&out.join("clutter.tsv"), &t)?;
    }
    match traj.abort {
        Some(a) => Err(Failure::Runtime(format!("optimization stopped: {a}"))),
        None => Ok(()),
    }
}

pub struct BenchRow {
    pub backend: Backend,
    pub median_ms: f64,
    pub speedup: f64,
    pub max_diff: f64,
}

pub fn bench(cfg: &RunConfig) -> Outcome {
    let b = &cfg.bench;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, BENCH_STREAM));
    let pts = (0..b.points)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)))
        .collect();
    let cloud = PointCloud::new(pts).context("bench cloud")?;
    let cell = CellTemplate::new(CellKernel::Separable(SeparableKernel {
        lateral: KernelSpec::EpanechnikovPow { exponent: 1.65, radius: b.radius },
        depth: KernelSpec::TriangularDepth,
    }));
    let grid = SensorGrid::planar(
        b.rows,
        b.cols,
        PlanarLayout { half_extent: 1.0, plane_z: -1.2 },
        &cell,
        vec![Channel::Range, Channel::DENSITY],
    )
    .context("bench grid")?;
    let mut rows: Vec<BenchRow> = Vec::new();
    let mut reference: Option<RenderedImage> = None;
    for backend in [Backend::Brute, Backend::KdTree, Backend::Binning] {
        let opts = RenderOptions { backend, ..cfg.render };
        let mut times = Vec::with_capacity(b.repeats);
        let mut img = None;
        for _ in 0..b.repeats {
            let t = Instant::now();
            let r = render_grid(&grid, &cloud, &opts).context(backend.name())?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
            img = Some(r);
        }
        times.sort_by(f64::total_cmp);
        let median_ms = times[times.len() / 2];
        let img = img.expect("repeats ≥ 1");
        let max_diff = reference.as_ref().map_or(0.0, |r| r.max_abs_diff(&img));
        if reference.is_none() {
            reference = Some(img);
        }
        let speedup = rows.first().map_or(1.0, |r| r.median_ms / median_ms);
        rows.push(BenchRow { backend, median_ms, speedup, max_diff });
    }
    let mut t = String::from("backend\tmedian_ms\tspeedup\tmax_abs_diff\n");
    for r in &rows {
        let _ = writeln!(t, "{}\t{:.3}\t{:.2}\t{:.3e}", r.backend.name(), r.median_ms, r.speedup, r.max_diff);
    }
    print!("bench: {} points, {}×{} grid, radius {}\n{t}", b.points, b.rows, b.cols, b.radius);
    write_file(&cfg.output.dir.join("bench.tsv"), &t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }

    #[test]
    fn scenes_follow_the_seed() {
        let mut cfg: RunConfig = toml::from_str("seed = 3\n[scene]\npoints = 50\nrotation_angle = 0.3\n[scene.clutter]\n").unwrap();
        let a = build_scene(&cfg).unwrap();
        let b = build_scene(&cfg).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert!(a.cloud.len() > 50);
        cfg.seed = 4;
        assert_ne!(build_scene(&cfg).unwrap().cloud, a.cloud);
    }
}
