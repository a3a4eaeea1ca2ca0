//! Kernel functions with analytic first derivatives, and the cell view metric.
//!
//! Bounded families are non-differentiable on their support boundary (and
//! the triangular/exp-band families at their cusp). There the derivative is
//! the one-sided value taken from the interior side, which for every family
//! here means the expression evaluated at the point itself.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Error, Result};
use crate::geometry::{Quaternion, Vec3};

/// Radially symmetric profile `k(x)` of one real argument.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `1 / (1 + (x/α)²)`.
    Cauchy { alpha: f64 },
    /// `max(0, 1 − (x/radius)²)^exponent`.
    EpanechnikovPow { exponent: f64, radius: f64 },
    /// `max(0, 1 − |x|)`.
    TriangularDepth,
    /// `exp(−|x − μ| / σ)`.
    ExpBand { mu: f64, sigma: f64 },
    /// `exp(−x² / 2σ²)`.
    Gaussian { sigma: f64 },
}

/// Value and first derivatives of a kernel at one argument.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelValue {
    pub value: f64,
    pub d_dx: f64,
    /// Derivatives w.r.t. [`KernelSpec::params`], padded with zeros.
    pub d_dparams: [f64; 2],
}

impl KernelSpec {
    /// Lateral kernel of the depth renderer: exponent 1.65, support 1/32.
    pub const DEPTH_LATERAL: KernelSpec = KernelSpec::EpanechnikovPow { exponent: 1.65, radius: 1.0 / 32.0 };
    pub const EXP_BAND_SIGMA: f64 = 0.15;
    pub const EXP_BAND_CENTERS: [f64; 3] = [0.0, 0.5, 1.0];

    /// The three exp-band depth presets (μ ∈ {0, 0.5, 1}, σ = 0.15).
    pub fn exp_band_presets() -> [KernelSpec; 3] {
        Self::EXP_BAND_CENTERS.map(|mu| KernelSpec::ExpBand { mu, sigma: Self::EXP_BAND_SIGMA })
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            KernelSpec::Cauchy { .. } => "cauchy",
            KernelSpec::EpanechnikovPow { .. } => "epanechnikov_pow",
            KernelSpec::TriangularDepth => "triangular_depth",
            KernelSpec::ExpBand { .. } => "exp_band",
            KernelSpec::Gaussian { .. } => "gaussian",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid_param(format!("{}: {name} must be finite and > 0, got {v}", self.family_name())))
            }
        };
        match *self {
            KernelSpec::Cauchy { alpha } => positive("alpha", alpha),
            KernelSpec::EpanechnikovPow { exponent, radius } => {
                positive("radius", radius)?;
                if exponent.is_finite() && exponent >= 1.0 {
                    Ok(())
                } else {
                    Err(invalid_param(format!("epanechnikov_pow: exponent must be ≥ 1, got {exponent}")))
                }
            }
            KernelSpec::TriangularDepth => Ok(()),
            KernelSpec::ExpBand { mu, sigma } => {
                if !mu.is_finite() {
                    return Err(invalid_param("exp_band: mu must be finite"));
                }
                positive("sigma", sigma)
            }
            KernelSpec::Gaussian { sigma } => positive("sigma", sigma),
        }
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<f64> {
        match *self {
            KernelSpec::Cauchy { alpha } => vec![alpha],
            KernelSpec::EpanechnikovPow { exponent, radius } => vec![exponent, radius],
            KernelSpec::TriangularDepth => vec![],
            KernelSpec::ExpBand { mu, sigma } => vec![mu, sigma],
            KernelSpec::Gaussian { sigma } => vec![sigma],
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            KernelSpec::TriangularDepth => 0,
            KernelSpec::Cauchy { .. } | KernelSpec::Gaussian { .. } => 1,
            KernelSpec::EpanechnikovPow { .. } | KernelSpec::ExpBand { .. } => 2,
        }
    }

    /// Same family with parameters replaced; the caller validates.
    pub fn with_params(&self, p: &[f64]) -> Result<KernelSpec> {
        if p.len() != self.param_count() {
            return Err(invalid_param(format!(
                "{} takes {} parameters, got {}",
                self.family_name(),
                self.param_count(),
                p.len()
            )));
        }
        Ok(match self {
            KernelSpec::Cauchy { .. } => KernelSpec::Cauchy { alpha: p[0] },
            KernelSpec::EpanechnikovPow { .. } => KernelSpec::EpanechnikovPow { exponent: p[0], radius: p[1] },
            KernelSpec::TriangularDepth => KernelSpec::TriangularDepth,
            KernelSpec::ExpBand { .. } => KernelSpec::ExpBand { mu: p[0], sigma: p[1] },
            KernelSpec::Gaussian { .. } => KernelSpec::Gaussian { sigma: p[0] },
        })
    }

    /// Point of maximum response.
    pub fn center(&self) -> f64 {
        match *self {
            KernelSpec::ExpBand { mu, .. } => mu,
            _ => 0.0,
        }
    }

    /// Arguments where the kernel is not differentiable (support boundary, cusps).
    pub fn kinks(&self) -> Vec<f64> {
        match *self {
            KernelSpec::EpanechnikovPow { radius, .. } => vec![-radius, radius],
            KernelSpec::TriangularDepth => vec![-1.0, 0.0, 1.0],
            KernelSpec::ExpBand { mu, .. } => vec![mu],
            _ => vec![],
        }
    }

    /// Unchecked evaluation; specs are validated when cells are built.
    #[inline]
    pub fn eval(&self, x: f64) -> KernelValue {
        match *self {
            KernelSpec::Cauchy { alpha } => {
                let t = x / alpha;
                let k = 1.0 / (1.0 + t * t);
                let k2 = k * k;
                KernelValue {
                    value: k,
                    d_dx: -2.0 * t / alpha * k2,
                    d_dparams: [2.0 * t * t / alpha * k2, 0.0],
                }
            }
            KernelSpec::EpanechnikovPow { exponent, radius } => {
                let t = x / radius;
                let base = 1.0 - t * t;
                if base <= 0.0 {
                    return KernelValue { value: 0.0, d_dx: 0.0, d_dparams: [0.0; 2] };
                }
                let k = base.powf(exponent);
                let dk_dbase = exponent * k / base;
                KernelValue {
                    value: k,
                    d_dx: dk_dbase * (-2.0 * t / radius),
                    d_dparams: [k * base.ln(), dk_dbase * (2.0 * t * t / radius)],
                }
            }
            KernelSpec::TriangularDepth => {
                let a = x.abs();
                if a >= 1.0 {
                    KernelValue { value: 0.0, d_dx: 0.0, d_dparams: [0.0; 2] }
                } else {
                    KernelValue { value: 1.0 - a, d_dx: if x > 0.0 { -1.0 } else { 1.0 }, d_dparams: [0.0; 2] }
                }
            }
            KernelSpec::ExpBand { mu, sigma } => {
                let e = x - mu;
                let k = (-e.abs() / sigma).exp();
                let sgn = if e > 0.0 { 1.0 } else { -1.0 };
                KernelValue {
                    value: k,
                    d_dx: -sgn / sigma * k,
                    d_dparams: [sgn / sigma * k, e.abs() / (sigma * sigma) * k],
                }
            }
            KernelSpec::Gaussian { sigma } => {
                let s2 = sigma * sigma;
                let k = (-0.5 * x * x / s2).exp();
                KernelValue { value: k, d_dx: -x / s2 * k, d_dparams: [x * x / (s2 * sigma) * k, 0.0] }
            }
        }
    }

    /// Value only; bitwise equal to `eval(x).value`.
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            KernelSpec::Cauchy { alpha } => {
                let t = x / alpha;
                1.0 / (1.0 + t * t)
            }
            KernelSpec::EpanechnikovPow { exponent, radius } => {
                let t = x / radius;
                let base = 1.0 - t * t;
                if base <= 0.0 {
                    0.0
                } else {
                    base.powf(exponent)
                }
            }
            KernelSpec::TriangularDepth => {
                let a = x.abs();
                if a >= 1.0 {
                    0.0
                } else {
                    1.0 - a
                }
            }
            KernelSpec::ExpBand { mu, sigma } => (-(x - mu).abs() / sigma).exp(),
            KernelSpec::Gaussian { sigma } => (-0.5 * x * x / (sigma * sigma)).exp(),
        }
    }

    /// Support radius around [`Self::center`]; `None` when the kernel is
    /// positive everywhere.
    pub fn support_radius(&self) -> Option<f64> {
        match *self {
            KernelSpec::EpanechnikovPow { radius, .. } => Some(radius),
            KernelSpec::TriangularDepth => Some(1.0),
            _ => None,
        }
    }
}

/// Checked evaluation of a kernel at `x`.
pub fn kernel_eval(spec: &KernelSpec, x: f64) -> Result<KernelValue> {
    spec.validate()?;
    if !x.is_finite() {
        return Err(invalid_param("kernel argument must be finite"));
    }
    Ok(spec.eval(x))
}

pub fn support_radius(spec: &KernelSpec) -> Option<f64> {
    spec.support_radius()
}

/// `f(x, y, z) = lateral(‖(x, y)‖) · depth(z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparableKernel {
    pub lateral: KernelSpec,
    pub depth: KernelSpec,
}

impl SeparableKernel {
    pub fn validate(&self) -> Result<()> {
        self.lateral.validate()?;
        self.depth.validate()?;
        if self.lateral.support_radius().is_none() {
            return Err(invalid_param(format!(
                "separable lateral kernel must have bounded support, got {}",
                self.lateral.family_name()
            )));
        }
        Ok(())
    }
}

/// `A = diag(1, 1, s) · Rot`: rotation into the cell frame followed by
/// elongation along the view axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    pub rotation: Quaternion,
    pub elongation: f64,
}

impl Default for ViewTransform {
    fn default() -> Self {
        Self { rotation: Quaternion::IDENTITY, elongation: 1.0 }
    }
}

impl ViewTransform {
    pub fn validate(&self) -> Result<()> {
        if !(self.elongation.is_finite() && self.elongation > 0.0) {
            return Err(invalid_param(format!("elongation must be > 0, got {}", self.elongation)));
        }
        self.rotation.normalized().map(|_| ())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let mut m = self.rotation.to_matrix();
        for c in 0..3 {
            m[(2, c)] *= self.elongation;
        }
        m
    }
}

/// Mahalanobis length `‖A d‖` and its gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MahalanobisValue {
    pub value: f64,
    pub d_offset: Vec3,
    pub d_elongation: f64,
    /// W.r.t. the raw quaternion components (tangent to the unit sphere).
    pub d_rotation: [f64; 4],
}

/// `‖diag(1,1,s)·Rot·d‖`; at `d = 0` all gradients are zero by convention.
pub fn mahalanobis(view: &ViewTransform, d: Vec3) -> Result<MahalanobisValue> {
    view.validate()?;
    if !d.iter().all(|v| v.is_finite()) {
        return Err(invalid_param("offset must be finite"));
    }
    let rot = view.rotation.to_matrix();
    let v = rot * d;
    let s = view.elongation;
    let r = Vec3::new(v.x, v.y, s * v.z);
    let value = r.norm();
    if value == 0.0 {
        return Ok(MahalanobisValue { value, d_offset: Vec3::zeros(), d_elongation: 0.0, d_rotation: [0.0; 4] });
    }
    let dr = r / value;
    let dv = Vec3::new(dr.x, dr.y, s * dr.z);
    Ok(MahalanobisValue {
        value,
        d_offset: rot.transpose() * dv,
        d_elongation: dr.z * v.z,
        d_rotation: view.rotation.pullback_matrix_grad(&(dv * d.transpose())),
    })
}

/// `log(1 + β·x)` and its derivative, for `x ≥ 0`, `β > 0`.
pub fn log_compress(x: f64, beta: f64) -> Result<(f64, f64)> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(invalid_param(format!("beta must be > 0, got {beta}")));
    }
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("log_compress requires finite x ≥ 0, got {x}")));
    }
    Ok(((beta * x).ln_1p(), beta / (1.0 + beta * x)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spec(rng: &mut ChaCha8Rng, family: usize) -> KernelSpec {
        match family {
            0 => KernelSpec::Cauchy { alpha: rng.random_range(0.05..2.0) },
            1 => KernelSpec::EpanechnikovPow { exponent: rng.random_range(1.0..4.0), radius: rng.random_range(0.05..2.0) },
            2 => KernelSpec::TriangularDepth,
            3 => KernelSpec::ExpBand { mu: rng.random_range(-1.0..1.0), sigma: rng.random_range(0.05..1.0) },
            _ => KernelSpec::Gaussian { sigma: rng.random_range(0.05..2.0) },
        }
    }

    #[test]
    fn examples() {
        assert_eq!(kernel_eval(&KernelSpec::Cauchy { alpha: 1.0 }, 0.0).unwrap().value, 1.0);
        let e = kernel_eval(&KernelSpec::EpanechnikovPow { exponent: 1.65, radius: 1.0 }, 0.5).unwrap();
        // 0.75^1.65, evaluated at 30 digits with mpmath
        assert!((e.value - 0.622_086_940_961_440_9).abs() < 1e-15, "{}", e.value);
        assert!((e.value - (1.65 * 0.75f64.ln()).exp()).abs() < 1e-15);
        let t = KernelSpec::TriangularDepth;
        assert_eq!(t.eval(1.0).value, 0.0);
        assert_eq!(t.eval(0.0).value, 1.0);
        assert!(kernel_eval(&KernelSpec::Gaussian { sigma: 0.0 }, 0.0).is_err());
        assert!(kernel_eval(&KernelSpec::EpanechnikovPow { exponent: 0.5, radius: 1.0 }, 0.0).is_err());
    }

    #[test]
    fn support_radii() {
        assert_eq!(KernelSpec::DEPTH_LATERAL.support_radius(), Some(1.0 / 32.0));
        assert_eq!(KernelSpec::TriangularDepth.support_radius(), Some(1.0));
        assert_eq!(KernelSpec::Cauchy { alpha: 0.3 }.support_radius(), None);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        for family in 0..5 {
            let mut checked = 0;
            while checked < 1000 {
                let spec = random_spec(&mut rng, family);
                let x = rng.random_range(-2.5..2.5);
                // keep the whole stencil well inside one smooth piece
                let margin = spec.support_radius().unwrap_or(1.0).min(1.0) * 0.05;
                if spec.kinks().iter().any(|k| (x - k).abs() < margin.max(1e3 * h)) {
                    continue;
                }
                if spec.eval(x).value < 1e-8 {
                    continue;
                }
                checked += 1;
                let kv = spec.eval(x);
                let num = (spec.eval(x + h).value - spec.eval(x - h).value) / (2.0 * h);
                let rel = (num - kv.d_dx).abs() / num.abs().max(kv.d_dx.abs()).max(1e-6);
                assert!(rel < 1e-5, "{spec:?} x={x}: {num} vs {}", kv.d_dx);
                let p = spec.params();
                for k in 0..p.len() {
                    let mut a = p.clone();
                    let mut b = p.clone();
                    a[k] += h;
                    b[k] -= h;
                    let num = (spec.with_params(&a).unwrap().eval(x).value
                        - spec.with_params(&b).unwrap().eval(x).value)
                        / (2.0 * h);
                    let an = kv.d_dparams[k];
                    let rel = (num - an).abs() / num.abs().max(an.abs()).max(1e-6);
                    assert!(rel < 1e-5, "{spec:?} x={x} param {k}: {num} vs {an}");
                }
            }
        }
    }

    #[test]
    fn nonnegative_with_peak_at_center_and_zero_outside_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let family = rng.random_range(0..5);
            let spec = random_spec(&mut rng, family);
            let x = rng.random_range(-4.0..4.0);
            let v = spec.eval(x).value;
            assert!(v >= 0.0);
            assert!(v <= spec.eval(spec.center()).value);
            if let Some(r) = spec.support_radius() {
                if (x - spec.center()).abs() > r {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn mahalanobis_examples() {
        let id = ViewTransform::default();
        assert_eq!(mahalanobis(&id, Vec3::new(3.0, 4.0, 0.0)).unwrap().value, 5.0);
        let squashed = ViewTransform { rotation: Quaternion::IDENTITY, elongation: 0.5 };
        assert_eq!(mahalanobis(&squashed, Vec3::new(0.0, 0.0, 2.0)).unwrap().value, 1.0);
        let any = ViewTransform { rotation: Quaternion::new(0.3, 0.1, -0.7, 0.2), elongation: 3.0 };
        let z = mahalanobis(&any, Vec3::zeros()).unwrap();
        assert_eq!(z.value, 0.0);
        assert_eq!(z.d_offset, Vec3::zeros());
        assert!(mahalanobis(&ViewTransform { elongation: -1.0, ..id }, Vec3::x()).is_err());
    }

    #[test]
    fn mahalanobis_identity_is_euclidean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let d = Vec3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0));
            let m = mahalanobis(&ViewTransform::default(), d).unwrap().value;
            assert!((m - d.norm()).abs() < 1e-14);
        }
    }

    #[test]
    fn mahalanobis_gradients() {
        let view = ViewTransform { rotation: Quaternion::new(0.9, -0.2, 0.4, 0.1), elongation: 0.3 };
        let d = Vec3::new(0.4, -1.1, 0.7);
        let g = mahalanobis(&view, d).unwrap();
        let h = 1e-6;
        let f = |v: &ViewTransform, d: Vec3| mahalanobis(v, d).unwrap().value;
        for k in 0..3 {
            let e = Vec3::ith(k, h);
            let num = (f(&view, d + e) - f(&view, d - e)) / (2.0 * h);
            assert!((num - g.d_offset[k]).abs() < 1e-8);
        }
        let num = (f(&ViewTransform { elongation: 0.3 + h, ..view }, d) - f(&ViewTransform { elongation: 0.3 - h, ..view }, d)) / (2.0 * h);
        assert!((num - g.d_elongation).abs() < 1e-8);
        for k in 0..4 {
            let mut a = view.rotation.to_array();
            let mut b = a;
            a[k] += h;
            b[k] -= h;
            let va = ViewTransform { rotation: Quaternion::from_array(a), ..view };
            let vb = ViewTransform { rotation: Quaternion::from_array(b), ..view };
            let num = (f(&va, d) - f(&vb, d)) / (2.0 * h);
            assert!((num - g.d_rotation[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn log_compress_examples() {
        assert_eq!(log_compress(0.0, 0.2).unwrap(), (0.0, 0.2));
        let (v, _) = log_compress(5.0, 0.2).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(log_compress(-1.0, 0.2), Err(Error::Domain(_))));
        let mut prev = -1.0;
        for i in 0..100 {
            let (v, d) = log_compress(i as f64 * 0.3, 0.2).unwrap();
            assert!(v > prev && d > 0.0);
            prev = v;
        }
    }
}
