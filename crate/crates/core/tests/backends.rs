mod common;

use cellrender::geometry::{PointCloud, Vec3};
use cellrender::renderer::{render, render_grid, Backend, GeometricTransform, RenderOptions, RenderParams, RenderedImage, SensorGrid};
use common::oracle::naive_render;
use common::scenes::{random_cloud, random_grid, random_jitter, Jitter};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn assert_close(grid: &SensorGrid, a: &RenderedImage, b: &[f64], tol: f64, what: &str) {
    let n = grid.cells.len();
    for (i, (x, y)) in a.data.iter().zip(b).enumerate() {
        let ch = grid.channels[i / n];
        if ch.is_sum() {
            assert!((x - y).abs() <= tol * y.abs().max(1.0), "{what}: pixel {i} ({ch:?}) {x} vs {y}");
        } else {
            assert_eq!(x, y, "{what}: pixel {i} ({ch:?})");
        }
    }
}

#[test]
fn brute_force_matches_naive_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let jitter = random_jitter(&mut rng);
        let (grid, _) = random_grid(&mut rng, 12, jitter);
        let cloud = random_cloud(&mut rng, 300);
        let img = render_grid(&grid, &cloud, &RenderOptions::with_backend(Backend::Brute)).unwrap();
        let naive = naive_render(&grid, &cloud);
        assert_eq!(img.argmax, naive.argmax);
        // Range and depth agree to rounding of the rotation product.
        for (x, y) in img.data.iter().zip(&naive.data) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{x} vs {y}");
        }
    }
}

#[test]
fn accelerated_backends_equal_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut binned = 0;
    for _ in 0..60 {
        let jitter = random_jitter(&mut rng);
        let (grid, binnable) = random_grid(&mut rng, 24, jitter);
        let cloud = random_cloud(&mut rng, 800);
        let brute = render_grid(&grid, &cloud, &RenderOptions::with_backend(Backend::Brute)).unwrap();
        for backend in [Backend::KdTree, Backend::Binning, Backend::Auto] {
            let r = render_grid(&grid, &cloud, &RenderOptions::with_backend(backend));
            if backend == Backend::Binning {
                assert_eq!(r.is_ok(), binnable, "binning accepted a grid it should not, or the reverse");
                if !binnable {
                    continue;
                }
                binned += 1;
            }
            let img = r.unwrap();
            assert_eq!(img.argmax, brute.argmax, "{backend:?}");
            assert_close(&grid, &img, &brute.data, 1e-12, backend.name());
        }
    }
    assert!(binned >= 15, "only {binned} binnable scenes");
}

#[test]
fn shuffled_clouds_render_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..25 {
        let (grid, binnable) = random_grid(&mut rng, 16, Jitter::Lateral);
        let cloud = random_cloud(&mut rng, 500);
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled = PointCloud::new(perm.iter().map(|&i| cloud.points()[i]).collect()).unwrap();
        for backend in [Backend::Brute, Backend::KdTree, Backend::Binning] {
            if backend == Backend::Binning && !binnable {
                continue;
            }
            let opts = RenderOptions::with_backend(backend);
            let a = render_grid(&grid, &cloud, &opts).unwrap();
            let b = render_grid(&grid, &shuffled, &opts).unwrap();
            assert_eq!(a.data, b.data, "{backend:?}");
            // The selected points coincide, up to duplicates at equal response.
            for (x, y) in a.argmax.iter().zip(&b.argmax) {
                match (x, y) {
                    (Some(x), Some(y)) => assert_eq!(cloud.points()[*x as usize], shuffled.points()[*y as usize]),
                    _ => assert_eq!(x.is_none(), y.is_none()),
                }
            }
        }
    }
}

#[test]
fn geometric_transform_equals_transforming_the_cloud() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (grid, _) = random_grid(&mut rng, 8, Jitter::Full);
    let cloud = random_cloud(&mut rng, 200);
    let q = cellrender::geometry::Quaternion::from_axis_angle(Vec3::new(0.3, 1.0, -0.2).normalize(), 0.4).unwrap();
    let params = RenderParams::from_grid(&grid, &GeometricTransform::Rotation(q));
    let opts = RenderOptions::with_backend(Backend::Brute);
    let a = render(&grid, &cloud, &params, &opts).unwrap();
    let b = render_grid(&grid, &cellrender::geometry::quat_rotate(q, &cloud).unwrap(), &opts).unwrap();
    assert_eq!(a.data, b.data);
}
