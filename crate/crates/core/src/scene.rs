//! Synthetic scenes: primitive samplers, clutter insertion, perturbations
//! with ground truth, and point-cloud file formats.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::geometry::{normalize_cloud, quat_rotate, Label, PointCloud, Quaternion, TpsBasis, TpsWarp, Vec3};

/// The generator behind every seeded operation here.
pub type SceneRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SceneRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Analytic shapes sampled uniformly over their surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere { radius: f64 },
    Box { half: [f64; 3] },
    Torus { major: f64, minor: f64 },
    /// Two unequal slabs joined at a corner; has no rotational symmetry.
    LBracket { length: f64, height: f64, depth: f64, thickness: f64 },
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let ok = match *self {
            Primitive::Sphere { radius } => pos(radius),
            Primitive::Box { half } => half.iter().all(|&h| pos(h)),
            Primitive::Torus { major, minor } => pos(major) && pos(minor) && minor < major,
            Primitive::LBracket { length, height, depth, thickness } => {
                pos(length) && pos(height) && pos(depth) && pos(thickness) && thickness < length.min(height)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid_param(format!("invalid primitive {self:?}")))
        }
    }

    /// `n` surface samples centered on the shape's own origin.
    pub fn sample(&self, n: usize, rng: &mut SceneRng) -> Result<PointCloud> {
        self.validate()?;
        let pts = (0..n).map(|_| self.sample_one(rng)).collect();
        PointCloud::new(pts)
    }

    fn sample_one(&self, rng: &mut SceneRng) -> Vec3 {
        match *self {
            Primitive::Sphere { radius } => unit_vector(rng) * radius,
            Primitive::Box { half } => box_surface(rng, Vec3::from(half), Vec3::zeros()),
            Primitive::Torus { major, minor } => loop {
                // Rejection on the tube angle makes the density uniform in area.
                let u = rng.random_range(0.0..2.0 * PI);
                let v = rng.random_range(0.0..2.0 * PI);
                let w: f64 = rng.random_range(0.0..1.0);
                if w <= (major + minor * v.cos()) / (major + minor) {
                    let r = major + minor * v.cos();
                    break Vec3::new(r * u.cos(), minor * v.sin(), r * u.sin());
                }
            },
            Primitive::LBracket { length, height, depth, thickness } => {
                let foot = (Vec3::new(length, thickness, depth) * 0.5, Vec3::new(length * 0.5, thickness * 0.5, 0.0));
                let wall = (Vec3::new(thickness, height, depth) * 0.5, Vec3::new(thickness * 0.5, height * 0.5, 0.0));
                let area = |h: Vec3| 8.0 * (h.x * h.y + h.y * h.z + h.x * h.z);
                let (a, b) = (area(foot.0), area(wall.0));
                let (half, center) = if rng.random_range(0.0..a + b) < a { foot } else { wall };
                // Shift so the bracket is roughly centered.
                box_surface(rng, half, center) - Vec3::new(length * 0.35, height * 0.35, 0.0)
            }
        }
    }
}

fn unit_vector(rng: &mut SceneRng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn box_surface(rng: &mut SceneRng, half: Vec3, center: Vec3) -> Vec3 {
    let faces = [half.y * half.z, half.x * half.z, half.x * half.y];
    let total = 2.0 * (faces[0] + faces[1] + faces[2]);
    let mut t = rng.random_range(0.0..total);
    let mut axis = 0;
    while axis < 2 && t >= 2.0 * faces[axis] {
        t -= 2.0 * faces[axis];
        axis += 1;
    }
    let mut p = Vec3::new(
        rng.random_range(-half.x..=half.x),
        rng.random_range(-half.y..=half.y),
        rng.random_range(-half.z..=half.z),
    );
    p[axis] = if rng.random_bool(0.5) { half[axis] } else { -half[axis] };
    p + center
}

/// Uniformly distributed axis with the given angle.
pub fn random_rotation(angle: f64, rng: &mut SceneRng) -> Quaternion {
    Quaternion::from_axis_angle(unit_vector(rng), angle).expect("unit axis")
}

/// A sphere of clutter points placed in the scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occluder {
    pub center: [f64; 3],
    pub radius: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClutterSpec {
    /// Inclusive range of fragment counts.
    #[serde(default = "default_count")]
    pub fragment_count: (usize, usize),
    #[serde(default = "default_crop")]
    pub crop_radius: f64,
    /// Scale applied to fragments when placed.
    #[serde(default = "one")]
    pub clutter_scale: f64,
    /// Fragment centers are uniform in `[-region, region]³`.
    #[serde(default = "one")]
    pub region: f64,
    /// Primitives sampled (normalized to the unit ball) into the fragment pool.
    #[serde(default)]
    pub primitives: Vec<Primitive>,
    #[serde(default = "default_pool_points")]
    pub primitive_points: usize,
    #[serde(default)]
    pub occluder: Option<Occluder>,
    #[serde(default)]
    pub seed: u64,
}

fn default_count() -> (usize, usize) {
    (4, 6)
}
fn default_crop() -> f64 {
    0.3
}
fn one() -> f64 {
    1.0
}
fn default_pool_points() -> usize {
    1000
}

impl Default for ClutterSpec {
    fn default() -> Self {
        Self {
            fragment_count: default_count(),
            crop_radius: default_crop(),
            clutter_scale: 1.0,
            region: 1.0,
            primitives: Vec::new(),
            primitive_points: default_pool_points(),
            occluder: None,
            seed: 0,
        }
    }
}

impl ClutterSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_radius.is_finite() && self.crop_radius > 0.0) {
            return Err(invalid_param(format!("crop_radius must be > 0, got {}", self.crop_radius)));
        }
        if self.fragment_count.0 > self.fragment_count.1 {
            return Err(invalid_param("fragment_count range is empty"));
        }
        if !(self.clutter_scale.is_finite() && self.clutter_scale > 0.0 && self.region.is_finite() && self.region >= 0.0) {
            return Err(invalid_param("clutter_scale must be > 0 and region ≥ 0"));
        }
        for p in &self.primitives {
            p.validate()?;
        }
        if let Some(o) = &self.occluder {
            if !(o.radius.is_finite() && o.radius > 0.0 && o.center.iter().all(|v| v.is_finite())) {
                return Err(invalid_param("occluder needs a finite center and positive radius"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentPlacement {
    /// Index into the fragment pool (supplied clouds first, then primitives).
    pub source: usize,
    pub crop_center: [f64; 3],
    pub placed_center: [f64; 3],
    pub rotation: Quaternion,
    pub scale: f64,
    /// Range of the fragment's points in the output cloud.
    pub range: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub fragments: Vec<FragmentPlacement>,
    /// Points of the occluder in the output cloud.
    pub occluder: Option<(usize, usize)>,
    pub object_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub cloud: PointCloud,
    pub truth: SceneTruth,
}

/// Base object followed by cropped, moved fragments and an optional sphere
/// occluder. Object points are copied unchanged and labeled object; all
/// others are clutter. Deterministic in `spec.seed`.
pub fn synth_scene(base: &PointCloud, pool: &[PointCloud], spec: &ClutterSpec) -> Result<SynthScene> {
    spec.validate()?;
    base.ensure_nonempty()?;
    let mut rng = rng_from_seed(spec.seed);
    let mut sources: Vec<PointCloud> = pool.iter().filter(|c| !c.is_empty()).cloned().collect();
    for p in &spec.primitives {
        sources.push(normalize_cloud(&p.sample(spec.primitive_points, &mut rng)?)?);
    }
    let count = rng.random_range(spec.fragment_count.0..=spec.fragment_count.1);
    if count > 0 && sources.is_empty() {
        return Err(invalid_input("fragments requested but the pool is empty and no primitives are given"));
    }

    let mut points = base.points().to_vec();
    let mut labels = vec![Label::Object; points.len()];
    let mut fragments = Vec::with_capacity(count);
    for _ in 0..count {
        let source = rng.random_range(0..sources.len());
        let src = sources[source].points();
        let crop_center = src[rng.random_range(0..src.len())];
        let placed = Vec3::from_fn(|_, _| rng.random_range(-spec.region..=spec.region));
        let rotation = Quaternion::from_axis_angle(unit_vector(&mut rng), rng.random_range(0.0..PI)).expect("unit axis");
        let m = rotation.to_matrix();
        let start = points.len();
        for p in src {
            let d = p - crop_center;
            if d.norm() <= spec.crop_radius {
                points.push(placed + spec.clutter_scale * (m * d));
                labels.push(Label::Clutter);
            }
        }
        fragments.push(FragmentPlacement {
            source,
            crop_center: crop_center.into(),
            placed_center: placed.into(),
            rotation,
            scale: spec.clutter_scale,
            range: (start, points.len()),
        });
    }
    let occluder = spec.occluder.map(|o| {
        let start = points.len();
        let c = Vec3::from(o.center);
        for _ in 0..o.points {
            points.push(c + unit_vector(&mut rng) * o.radius);
            labels.push(Label::Clutter);
        }
        (start, points.len())
    });
    Ok(SynthScene {
        cloud: PointCloud::with_labels(points, labels)?,
        truth: SceneTruth { fragments, occluder, object_points: base.len() },
    })
}

/// Deforms the cloud with a 4×4 planar TPS grid over `[-1, 1]²` whose
/// displacements are drawn from `N(0, σ²)`. Returns the deformed cloud and
/// the warp that produced it.
pub fn perturb_tps(cloud: &PointCloud, sigma: f64, rng: &mut SceneRng) -> Result<(PointCloud, TpsWarp)> {
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid_param(format!("sigma: {e}")))?;
    let basis = Arc::new(TpsBasis::grid(4, 1.0)?);
    let d = (0..basis.len()).map(|_| [normal.sample(rng), normal.sample(rng)]).collect();
    let warp = TpsWarp::new(basis, d)?;
    Ok((warp.apply(cloud), warp))
}

/// Rotates the cloud by `angle` about a uniformly random axis.
pub fn perturb_rotation(cloud: &PointCloud, angle: f64, rng: &mut SceneRng) -> Result<(PointCloud, Quaternion)> {
    let q = random_rotation(angle, rng);
    Ok((quat_rotate(q, cloud)?, q))
}

/// Draws `n` points in the `z = 0` plane with probability proportional to
/// pixel intensity. Row 0 maps to `y = 1`; the image spans `[-1, 1]²` and
/// points are jittered uniformly within their pixel.
pub fn sample_intensity(intensity: &[f64], width: usize, height: usize, n: usize, rng: &mut SceneRng) -> Result<PointCloud> {
    if intensity.len() != width * height || width == 0 || height == 0 {
        return Err(invalid_input(format!("{} intensities for a {width}×{height} image", intensity.len())));
    }
    if intensity.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid_input("intensities must be finite and non-negative"));
    }
    let dist = WeightedIndex::new(intensity).map_err(|e| invalid_input(format!("intensity image: {e}")))?;
    let (pw, ph) = (2.0 / width as f64, 2.0 / height as f64);
    let pts = (0..n)
        .map(|_| {
            let k = dist.sample(rng);
            let (i, j) = (k / width, k % width);
            let x = -1.0 + (j as f64 + rng.random_range(0.0..1.0)) * pw;
            let y = 1.0 - (i as f64 + rng.random_range(0.0..1.0)) * ph;
            Vec3::new(x, y, 0.0)
        })
        .collect();
    PointCloud::new(pts)
}

fn label_name(l: Label) -> &'static str {
    match l {
        Label::Object => "object",
        Label::Clutter => "clutter",
    }
}

/// One `x y z [label]` line per point.
pub fn write_points_text(cloud: &PointCloud, mut out: impl Write) -> Result<()> {
    for (k, p) in cloud.points().iter().enumerate() {
        match cloud.labels() {
            Some(l) => writeln!(out, "{:?} {:?} {:?} {}", p.x, p.y, p.z, label_name(l[k]))?,
            None => writeln!(out, "{:?} {:?} {:?}", p.x, p.y, p.z)?,
        }
    }
    Ok(())
}

pub fn read_points_text(input: impl Read) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        if f.len() != 3 && f.len() != 4 {
            return Err(Error::Format(format!("line {}: expected `x y z [label]`", n + 1)));
        }
        let mut p = Vec3::zeros();
        for a in 0..3 {
            p[a] = f[a].parse().map_err(|_| Error::Format(format!("line {}: bad number {:?}", n + 1, f[a])))?;
        }
        points.push(p);
        if let Some(l) = f.get(3) {
            labels.push(match *l {
                "object" | "0" => Label::Object,
                "clutter" | "1" => Label::Clutter,
                _ => return Err(Error::Format(format!("line {}: unknown label {l:?}", n + 1))),
            });
        }
    }
    if labels.is_empty() {
        PointCloud::new(points)
    } else if labels.len() == points.len() {
        PointCloud::with_labels(points, labels)
    } else {
        Err(Error::Format("labels must be given for every point or none".into()))
    }
}

const CPTS_MAGIC: &[u8; 4] = b"CPTS";

/// `CPTS`, u32 count, u8 has_labels, then little-endian f32 triples and one
/// label byte per point (0 object, 1 clutter).
pub fn write_cpts(cloud: &PointCloud, mut out: impl Write) -> Result<()> {
    let n = u32::try_from(cloud.len()).map_err(|_| invalid_input("too many points for CPTS"))?;
    out.write_all(CPTS_MAGIC)?;
    out.write_all(&n.to_le_bytes())?;
    out.write_all(&[cloud.labels().is_some() as u8])?;
    let mut buf = Vec::with_capacity(cloud.len() * 12);
    for p in cloud.points() {
        for v in p.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(l) = cloud.labels() {
        buf.extend(l.iter().map(|&l| (l == Label::Clutter) as u8));
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_cpts(mut input: impl Read) -> Result<PointCloud> {
    let mut head = [0u8; 9];
    input.read_exact(&mut head).map_err(|_| Error::Format("truncated CPTS header".into()))?;
    if &head[..4] != CPTS_MAGIC {
        return Err(Error::Format("not a CPTS file".into()));
    }
    let n = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
    let labeled = match head[8] {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("bad label flag {b}"))),
    };
    let mut body = vec![0u8; n * 12 + if labeled { n } else { 0 }];
    input.read_exact(&mut body).map_err(|_| Error::Format("truncated CPTS body".into()))?;
    let points = body[..n * 12]
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64;
            Vec3::new(f(0), f(1), f(2))
        })
        .collect();
    if !labeled {
        return PointCloud::new(points);
    }
    let labels = body[n * 12..]
        .iter()
        .map(|&b| match b {
            0 => Ok(Label::Object),
            1 => Ok(Label::Clutter),
            _ => Err(Error::Format(format!("bad label byte {b}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    PointCloud::with_labels(points, labels)
}

/// Writes CPTS for a `.cpts` extension and text otherwise.
pub fn save_points(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    if path.extension().is_some_and(|e| e == "cpts") {
        write_cpts(cloud, f)
    } else {
        write_points_text(cloud, f)
    }
}

pub fn load_points(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let f = BufReader::new(std::fs::File::open(path)?);
    if path.extension().is_some_and(|e| e == "cpts") {
        read_cpts(f)
    } else {
        read_points_text(f)
    }
}
