//! Depth attenuation `ω(z) = 1 − h(χ(z))` with `χ` a sum of Gaussian bumps.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Squash {
    Tanh,
    #[default]
    Softsign,
}

impl Squash {
    /// `(h(x), h'(x))`.
    #[inline]
    pub fn eval(self, x: f64) -> (f64, f64) {
        match self {
            Squash::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
            Squash::Softsign => {
                let d = 1.0 + x.abs();
                (x / d, 1.0 / (d * d))
            }
        }
    }
}

pub fn softsign(x: f64) -> f64 {
    Squash::Softsign.eval(x).0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianBump {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttenuationField {
    pub components: Vec<GaussianBump>,
    #[serde(default)]
    pub squash: Squash,
    /// Clamp ω to `[0, 1]` (suppression only).
    #[serde(default)]
    pub clamp: bool,
}

/// ω and its gradients at one depth.
#[derive(Debug, Clone, PartialEq)]
pub struct AttenuationValue {
    pub omega: f64,
    pub d_dz: f64,
    /// Per component `(∂/∂a, ∂/∂c, ∂/∂σ)`, flattened.
    pub d_dparams: Vec<f64>,
}

impl AttenuationField {
    pub const DEFAULT_COMPONENTS: usize = 3;

    /// `n` zero-amplitude bumps spread evenly over `[lo, hi]`. Evaluates to ω ≡ 1.
    pub fn neutral(n: usize, lo: f64, hi: f64, squash: Squash) -> Self {
        let span = hi - lo;
        let width = span / n.max(1) as f64;
        let components = (0..n)
            .map(|i| GaussianBump { amplitude: 0.0, center: lo + (i as f64 + 0.5) * width, width })
            .collect();
        Self { components, squash, clamp: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(invalid_param("attenuation field needs at least one component"));
        }
        for (i, c) in self.components.iter().enumerate() {
            if !(c.amplitude.is_finite() && c.center.is_finite()) {
                return Err(invalid_param(format!("attenuation component {i} is not finite")));
            }
            if !(c.width.is_finite() && c.width > 0.0) {
                return Err(invalid_param(format!("attenuation component {i}: width must be > 0, got {}", c.width)));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        3 * self.components.len()
    }

    pub fn params(&self) -> Vec<f64> {
        self.components.iter().flat_map(|c| [c.amplitude, c.center, c.width]).collect()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(invalid_param(format!("attenuation takes {} parameters, got {}", self.param_count(), p.len())));
        }
        for (c, v) in self.components.iter_mut().zip(p.chunks_exact(3)) {
            *c = GaussianBump { amplitude: v[0], center: v[1], width: v[2] };
        }
        Ok(())
    }

    pub fn mixture(&self, z: f64) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let t = (z - c.center) / c.width;
                c.amplitude * (-t * t).exp()
            })
            .sum()
    }

    /// `(ω, ∂ω/∂χ)` for the squash/clamp configuration.
    #[inline]
    fn squash_mixture(&self, chi: f64) -> (f64, f64) {
        let (h, dh) = self.squash.eval(chi);
        let omega = 1.0 - h;
        if self.clamp && !(0.0..=1.0).contains(&omega) {
            (omega.clamp(0.0, 1.0), 0.0)
        } else {
            (omega, -dh)
        }
    }

    /// ω(z) alone; bitwise equal to `eval(z).0`.
    #[inline]
    pub fn omega(&self, z: f64) -> f64 {
        let mut chi = 0.0;
        for c in &self.components {
            let t = (z - c.center) / c.width;
            chi += c.amplitude * (-t * t).exp();
        }
        self.squash_mixture(chi).0
    }

    /// `(ω(z), ∂ω/∂z)`.
    #[inline]
    pub fn eval(&self, z: f64) -> (f64, f64) {
        let mut chi = 0.0;
        let mut dchi = 0.0;
        for c in &self.components {
            let t = (z - c.center) / c.width;
            let e = c.amplitude * (-t * t).exp();
            chi += e;
            dchi -= e * 2.0 * t / c.width;
        }
        let (omega, domega) = self.squash_mixture(chi);
        (omega, domega * dchi)
    }

    /// Adds `scale · ∂ω/∂θ` into `out` (layout of [`Self::params`]).
    pub fn accumulate_param_grads(&self, z: f64, scale: f64, out: &mut [f64]) {
        let (_, domega) = self.squash_mixture(self.mixture(z));
        let s = scale * domega;
        if s == 0.0 {
            return;
        }
        for (c, g) in self.components.iter().zip(out.chunks_exact_mut(3)) {
            let t = (z - c.center) / c.width;
            let e = (-t * t).exp();
            let ae = c.amplitude * e;
            g[0] += s * e;
            g[1] += s * ae * 2.0 * t / c.width;
            g[2] += s * ae * 2.0 * t * t / c.width;
        }
    }
}

/// Checked evaluation with every gradient.
pub fn attenuation_eval(field: &AttenuationField, z: f64) -> Result<AttenuationValue> {
    field.validate()?;
    if !z.is_finite() {
        return Err(invalid_param("depth must be finite"));
    }
    let (omega, d_dz) = field.eval(z);
    let mut d_dparams = vec![0.0; field.param_count()];
    field.accumulate_param_grads(z, 1.0, &mut d_dparams);
    Ok(AttenuationValue { omega, d_dz, d_dparams })
}
