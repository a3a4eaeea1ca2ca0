use crate::error::{invalid_param, Result};
use crate::geometry::{PointCloud, Point3};

/// `(1/s)·min_c ‖diag(1, 1, s)·(x_p − c)‖`, the elongated-metric relaxation
/// of the range along +z. Evaluated as `√(lateral²/s² + dz²)`, which is
/// monotone in `s` under rounding and exact for points on the ray.
pub fn range_relaxation(x_p: Point3, s: f64, cloud: &PointCloud) -> Result<f64> {
    cloud.ensure_nonempty()?;
    if !(s.is_finite() && s > 0.0) {
        return Err(invalid_param(format!("elongation must be > 0, got {s}")));
    }
    if !x_p.iter().all(|v| v.is_finite()) {
        return Err(invalid_param("cell position must be finite"));
    }
    let best = cloud
        .points()
        .iter()
        .map(|c| {
            let d = x_p - c;
            let lateral = d.x * d.x + d.y * d.y;
            if lateral == 0.0 {
                d.z.abs()
            } else {
                (lateral / (s * s) + d.z * d.z).sqrt()
            }
        })
        .fold(f64::INFINITY, f64::min);
    Ok(best)
}
