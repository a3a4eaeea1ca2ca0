#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cellrender::geometry::{PointCloud, Vec3};
use cellrender::kernels::{KernelSpec, SeparableKernel};
use cellrender::renderer::{io, CellKernel, CellTemplate, Channel, PlanarLayout, SensorGrid};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cellrender"))
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("cellrender-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).env_remove("CELLRENDER_THREADS").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn render_of_three_points_matches_naive_evaluation() {
    let dir = scratch("render3");
    let pts = [Vec3::new(0.1, 0.2, -0.3), Vec3::new(-0.4, 0.35, 0.1), Vec3::new(0.5, -0.5, 0.4)];
    let text: String = pts.iter().map(|p| format!("{} {} {}\n", p.x, p.y, p.z)).collect();
    std::fs::write(dir.join("pts.txt"), text).unwrap();
    let cfg = format!(
        r#"
[scene]
input = "{}"
normalize = false

[grid]
channels = [{{ kind = "range" }}, {{ kind = "depth", far = 0.0 }}, {{ kind = "density" }}]

[grid.topology]
type = "planar"
rows = 4
cols = 4

[grid.cell]
elongation = 0.5
kernel = {{ type = "separable", lateral = {{ family = "epanechnikov_pow", exponent = 1.65, radius = 0.6 }}, depth = {{ family = "triangular_depth" }} }}
"#,
        dir.join("pts.txt").display()
    );
    std::fs::write(dir.join("c.toml"), cfg).unwrap();
    let o = run(&["render", "--config", dir.join("c.toml").to_str().unwrap(), "--backend", "brute"], &dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = io::load_crnd(dir.join("render.crnd")).unwrap();
    for k in 0..3 {
        assert!(dir.join(format!("render_c{k}.pgm")).is_file());
    }

    let mut cell = CellTemplate::new(CellKernel::Separable(SeparableKernel {
        lateral: KernelSpec::EpanechnikovPow { exponent: 1.65, radius: 0.6 },
        depth: KernelSpec::TriangularDepth,
    }));
    cell.elongation = 0.5;
    let grid = SensorGrid::planar(4, 4, PlanarLayout { half_extent: 1.0, plane_z: -1.2 }, &cell, vec![
        Channel::Range,
        Channel::Depth { far: 0.0 },
        Channel::DENSITY,
    ])
    .unwrap();
    let naive = common::oracle::naive_render(&grid, &PointCloud::new(pts.to_vec()).unwrap());
    assert!(naive.data.iter().any(|v| *v > 0.0));
    assert_eq!(img.argmax.len(), naive.argmax.len());
    // CRND stores f32.
    for (a, b) in img.data.iter().zip(&naive.data) {
        assert_eq!(*a, *b as f32 as f64, "{a} vs {b}");
    }
}

#[test]
fn default_grad_check_passes() {
    let dir = scratch("gc");
    let o = run(&["grad-check"], &dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.join("gradcheck.txt")).unwrap();
    let first = report.lines().next().unwrap();
    let max: f64 = first.split_whitespace().skip_while(|w| *w != "max_rel_error").nth(1).unwrap().parse().unwrap();
    assert!(max < 1e-4, "{first}");
    assert!(first.contains("offending 0"));
}

#[test]
fn failed_grad_check_exits_3() {
    let dir = scratch("gcfail");
    let o = run(&["grad-check", "--set", "grad_check.tol=1e-30"], &dir);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn unknown_keys_exit_2_and_are_named() {
    let dir = scratch("unknown");
    let o = run(&["render", "--set", "render.no_such_option=1"], &dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_option"), "{}", stderr(&o));

    std::fs::write(dir.join("c.toml"), "seed = 1\n\n[scene]\npointz = 4\n").unwrap();
    let o = run(&["synth", "--config", dir.join("c.toml").to_str().unwrap()], &dir);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("pointz") && e.contains("line 4"), "{e}");
}

#[test]
fn invalid_values_exit_2() {
    let dir = scratch("invalid");
    for set in ["grid.topology.rows=0", "optimize.steps=0", "grid.cell.elongation=-1", "threads=0"] {
        let o = run(&["render", "--set", set], &dir);
        assert_eq!(o.status.code(), Some(2), "{set}: {}", stderr(&o));
    }
    let o = run(&["render", "--backend", "fastest"], &dir);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flags_and_config_entries_agree() {
    let a = scratch("flags");
    let b = scratch("file");
    let common = ["--set", "scene.points=200", "--set", "grid.topology.rows=8", "--set", "grid.topology.cols=8"];
    let mut args = vec!["optimize", "--seed", "9", "--steps", "4"];
    args.extend(common);
    let o = run(&args, &a);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::write(b.join("c.toml"), "seed = 9\n[optimize]\nsteps = 4\n").unwrap();
    let cfg = b.join("c.toml");
    let mut args = vec!["optimize", "--config", cfg.to_str().unwrap()];
    args.extend(common);
    let o = run(&args, &b);
    assert!(o.status.success(), "{}", stderr(&o));
    let ta = std::fs::read_to_string(a.join("trajectory.tsv")).unwrap();
    let tb = std::fs::read_to_string(b.join("trajectory.tsv")).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(ta.lines().count(), 6);
}

#[test]
fn synth_writes_both_formats() {
    let dir = scratch("synth");
    let o = run(&["synth", "--set", "scene.points=100", "--set", "scene.clutter.fragment_count=[2,2]"], &dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = cellrender::scene::load_points(dir.join("scene.txt")).unwrap();
    let c = cellrender::scene::load_points(dir.join("scene.cpts")).unwrap();
    assert_eq!(t.len(), c.len());
    assert!(t.len() > 100);
    assert_eq!(t.labels().unwrap(), c.labels().unwrap());
    let truth = std::fs::read_to_string(dir.join("truth.txt")).unwrap();
    assert_eq!(truth.lines().filter(|l| l.starts_with("fragment")).count(), 2);
    assert!(dir.join("config.toml").is_file());
}
