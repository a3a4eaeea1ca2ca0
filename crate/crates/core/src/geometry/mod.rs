//! Points, clouds and the shape transformations applied to them.

mod quaternion;
mod tps;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, Result};

pub use quaternion::{quat_compose, quat_rotate, Quaternion};
pub use tps::{tps_apply, TpsBasis, TpsWarp};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Point3 = Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Object,
    Clutter,
}

/// Ordered storage of finite 3D points with optional per-point labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    labels: Option<Vec<Label>>,
}

impl PointCloud {
    /// Builds a cloud; every coordinate must be finite. Empty clouds are
    /// allowed here and rejected by the operations that need points.
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(invalid_input(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points, labels: None })
    }

    pub fn with_labels(points: Vec<Vec3>, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != points.len() {
            return Err(invalid_input(format!(
                "{} labels for {} points",
                labels.len(),
                points.len()
            )));
        }
        let mut c = Self::new(points)?;
        c.labels = Some(labels);
        Ok(c)
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.points.is_empty() {
            Err(invalid_input("point cloud is empty"))
        } else {
            Ok(())
        }
    }

    /// Same labels, points replaced by `f(p)`.
    pub fn map_points(&self, f: impl Fn(Vec3) -> Vec3) -> Self {
        Self { points: self.points.iter().map(|&p| f(p)).collect(), labels: self.labels.clone() }
    }

    /// Points whose label matches, in order.
    pub fn select(&self, label: Label) -> Option<PointCloud> {
        let labels = self.labels.as_ref()?;
        let points = self
            .points
            .iter()
            .zip(labels)
            .filter(|(_, l)| **l == label)
            .map(|(p, _)| *p)
            .collect();
        Some(Self { points, labels: None })
    }

    pub fn without_labels(&self) -> Self {
        Self { points: self.points.clone(), labels: None }
    }

    /// Axis-aligned bounds `(min, max)`; `None` when empty.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vec3::zeros(), |a, p| a + p);
        Some(sum / self.points.len() as f64)
    }
}

/// Translates the centroid to the origin and scales so the farthest point
/// has norm 1. A cloud whose points all coincide is only translated.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    cloud.ensure_nonempty()?;
    let centroid = cloud.centroid().expect("nonempty");
    let centered: Vec<Vec3> = cloud.points.iter().map(|p| p - centroid).collect();
    let radius = centered.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };
    Ok(PointCloud {
        points: centered.into_iter().map(|p| p * scale).collect(),
        labels: cloud.labels.clone(),
    })
}

/// Sensor grid wrapped on a radius-0.5 cylinder around the y axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CylindricalGrid {
    pub rows: usize,
    pub cols: usize,
    /// Columns span `θ ∈ [0, 2π)` instead of the default `[0, π)`.
    #[serde(default)]
    pub full_circle: bool,
}

impl CylindricalGrid {
    pub const RADIUS: f64 = 0.5;

    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        Self { rows, cols, full_circle: false }.validated()
    }

    pub fn full_circle(rows: usize, cols: usize) -> Result<Self> {
        Self { rows, cols, full_circle: true }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.rows < 2 || self.cols < 2 {
            return Err(invalid_param(format!(
                "cylindrical grid must be at least 2×2, got {}×{}",
                self.rows, self.cols
            )));
        }
        Ok(self)
    }

    /// Angle spanned by the columns.
    pub fn span(&self) -> f64 {
        if self.full_circle {
            std::f64::consts::TAU
        } else {
            std::f64::consts::PI
        }
    }

    pub fn column_angle(&self, j: f64) -> f64 {
        j / self.cols as f64 * self.span()
    }

    pub fn row_height(&self, i: f64) -> f64 {
        i / (self.rows - 1) as f64 - 0.5
    }
}

/// `(i, j) → (−0.5·sin θ_j, i/(h−1) − 0.5, 0.5·cos θ_j)` with `θ_j = (j/w)·span`.
pub fn cylinder_map(i: usize, j: usize, grid: &CylindricalGrid) -> Result<Point3> {
    if i >= grid.rows || j >= grid.cols {
        return Err(invalid_param(format!(
            "cell ({i}, {j}) outside {}×{} cylindrical grid",
            grid.rows, grid.cols
        )));
    }
    let theta = grid.column_angle(j as f64);
    Ok(Vec3::new(
        -CylindricalGrid::RADIUS * theta.sin(),
        grid.row_height(i as f64),
        CylindricalGrid::RADIUS * theta.cos(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cylinder_examples() {
        let g = CylindricalGrid::new(2, 4).unwrap();
        assert_eq!(cylinder_map(0, 0, &g).unwrap(), Vec3::new(0.0, -0.5, 0.5));
        let p = cylinder_map(1, 2, &g).unwrap();
        assert!((p - Vec3::new(-0.5, 0.5, 0.0)).norm() < 1e-15);
        assert!(cylinder_map(2, 0, &g).is_err());
        assert!(CylindricalGrid::new(1, 4).is_err());
    }

    #[test]
    fn cylinder_cells_distinct_and_on_radius() {
        for g in [CylindricalGrid::new(3, 7).unwrap(), CylindricalGrid::full_circle(3, 7).unwrap()] {
            let pts: Vec<_> = (0..g.cols).map(|j| cylinder_map(1, j, &g).unwrap()).collect();
            for (a, p) in pts.iter().enumerate() {
                assert!((p.x * p.x + p.z * p.z - 0.25).abs() < 1e-15);
                for q in &pts[a + 1..] {
                    assert!((p - q).norm() > 1e-3);
                }
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let single = PointCloud::new(vec![Vec3::new(3.0, -2.0, 7.0)]).unwrap();
        assert_eq!(normalize_cloud(&single).unwrap().points(), &[Vec3::zeros()]);
        let pair = PointCloud::new(vec![Vec3::zeros(), Vec3::new(4.0, 0.0, 0.0)]).unwrap();
        let n = normalize_cloud(&pair).unwrap();
        assert_eq!(n.points(), &[Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)]);
        assert!(normalize_cloud(&PointCloud::new(vec![]).unwrap()).is_err());
    }

    #[test]
    fn labels_must_match_points() {
        assert!(PointCloud::with_labels(vec![Vec3::zeros()], vec![]).is_err());
        assert!(PointCloud::new(vec![Vec3::new(f64::INFINITY, 0.0, 0.0)]).is_err());
    }

    fn arb_cloud() -> impl Strategy<Value = PointCloud> {
        prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), 1..40)
            .prop_map(|v| PointCloud::new(v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect()).unwrap())
    }

    fn arb_quat() -> impl Strategy<Value = Quaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| Quaternion::new(w, x, y, z).normalized().unwrap())
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(cloud in arb_cloud()) {
            let once = normalize_cloud(&cloud).unwrap();
            let twice = normalize_cloud(&once).unwrap();
            for (a, b) in once.points().iter().zip(twice.points()) {
                prop_assert!((a - b).norm() < 1e-12);
            }
            let r = once.points().iter().map(|p| p.norm()).fold(0.0, f64::max);
            prop_assert!(r == 0.0 || (r - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rotation_preserves_distances(cloud in arb_cloud(), q in arb_quat()) {
            let r = quat_rotate(q, &cloud).unwrap();
            let p = cloud.points();
            let s = r.points();
            for i in 0..p.len() {
                for j in i + 1..p.len() {
                    prop_assert!(((p[i] - p[j]).norm() - (s[i] - s[j]).norm()).abs() < 1e-12);
                }
            }
            let back = quat_rotate(q.conjugate(), &r).unwrap();
            for (a, b) in back.points().iter().zip(p) {
                prop_assert!((a - b).norm() < 1e-12);
            }
        }

        #[test]
        fn compose_is_associative(a in arb_quat(), b in arb_quat(), c in arb_quat()) {
            let l = quat_compose(quat_compose(a, b).unwrap(), c).unwrap();
            let r = quat_compose(a, quat_compose(b, c).unwrap()).unwrap();
            prop_assert!((l.to_matrix() - r.to_matrix()).abs().max() < 1e-9);
            prop_assert!((l.norm() - 1.0).abs() < 1e-12);
        }
    }
}
