//! Task-adapted linear forward SDEs.
//!
//! All three processes share the form
//!
//! ```text
//! dx = γ F(t) (y - x) dt + g(t) dw,      g(t) = ν (σ_max / σ_min)^(2t)
//! ```
//!
//! with `F(t) = 1` (OUVE), `F(t) = t` (TSDVE) or `F(t) = 1 - cos(πt)` (CosVE).
//! The perturbation kernel is Gaussian, `N(w(t) x0 + (1 - w(t)) y, σ²(t) I)`,
//! where `w(t) = exp(-γ ∫₀ᵗ F)` and
//!
//! ```text
//! σ²(t) = ∫₀ᵗ exp(-2γ ∫ₛᵗ F(u) du) g(s)² ds.
//! ```
//!
//! OUVE has a closed-form variance. TSDVE and CosVE are served from a cubic
//! spline through 1000 quadrature evaluations on `[t_eps, T]`.

pub mod quadrature;
pub mod spline;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ImageField;

use self::quadrature::{integrate, QuadratureOptions};
use self::spline::CubicSpline;

/// Number of equidistant grid points of the variance table.
pub const VARIANCE_GRID_POINTS: usize = 1000;

// Slack for grid times that land a rounding error outside [t_eps, T].
const TIME_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdeKind {
    Ouve,
    Tsdve,
    Cosve,
}

impl SdeKind {
    pub const ALL: [SdeKind; 3] = [SdeKind::Ouve, SdeKind::Tsdve, SdeKind::Cosve];

    /// Drift shape `F(t)`.
    pub fn shape(self, t: f64) -> f64 {
        match self {
            SdeKind::Ouve => 1.0,
            SdeKind::Tsdve => t,
            SdeKind::Cosve => 1.0 - (PI * t).cos(),
        }
    }

    /// `∫ₛᵗ F(u) du`, analytic for every kind.
    pub fn shape_integral(self, s: f64, t: f64) -> f64 {
        match self {
            SdeKind::Ouve => t - s,
            SdeKind::Tsdve => 0.5 * (t * t - s * s),
            SdeKind::Cosve => (t - s) - ((PI * t).sin() - (PI * s).sin()) / PI,
        }
    }

    /// Stiffness used for this kind in the reference process table.
    pub fn default_gamma(self) -> f64 {
        match self {
            SdeKind::Ouve | SdeKind::Cosve => 1.0,
            SdeKind::Tsdve => 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SdeKind::Ouve => "ouve",
            SdeKind::Tsdve => "tsdve",
            SdeKind::Cosve => "cosve",
        }
    }
}

impl std::str::FromStr for SdeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ouve" => Ok(SdeKind::Ouve),
            "tsdve" => Ok(SdeKind::Tsdve),
            "cosve" => Ok(SdeKind::Cosve),
            other => Err(Error::Config(format!("unknown SDE kind `{other}`"))),
        }
    }
}

/// Read-only view of a forward SDE as needed by the reverse-time samplers.
///
/// The forward drift is `drift_rate(t) * (y - x)`.
pub trait ForwardSde: Sync {
    fn t_eps(&self) -> f64;
    fn t_max(&self) -> f64;
    fn drift_rate(&self, t: f64) -> f64;
    fn diffusion(&self, t: f64) -> f64;
    fn std(&self, t: f64) -> Result<f64>;
}

/// Tabulated `σ²(t)` on 1000 equidistant points of `[t_eps, T]` with a
/// natural cubic spline between them.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceInterpolator {
    spline: CubicSpline,
}

impl VarianceInterpolator {
    pub fn grid(&self) -> &[f64] {
        self.spline.knots()
    }

    pub fn values(&self) -> &[f64] {
        self.spline.values()
    }

    pub fn variance(&self, t: f64) -> f64 {
        self.spline.eval(t).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeConfig {
    kind: SdeKind,
    gamma: f64,
    sigma_min: f64,
    sigma_max: f64,
    t_eps: f64,
    t_max: f64,
    nu: f64,
    variance_table: VarianceInterpolator,
}

impl SdeConfig {
    /// Validated, ν-normalized configuration with its variance table built.
    pub fn new(kind: SdeKind, gamma: f64, sigma_min: f64, sigma_max: f64, t_eps: f64, t_max: f64) -> Result<Self> {
        Self::with_nu(kind, gamma, sigma_min, sigma_max, t_eps, t_max, 1.0)?.normalize_nu()
    }

    /// Process parameters of the reference table: σ_max = 1, σ_min = 0.01,
    /// t_eps = 0.03, T = 1 and γ = 1 / 2 / 1 for OUVE / TSDVE / CosVE.
    pub fn reference(kind: SdeKind) -> Result<Self> {
        Self::new(kind, kind.default_gamma(), 0.01, 1.0, 0.03, 1.0)
    }

    /// Configuration with an explicit diffusion scale `ν` (no normalization).
    pub fn with_nu(
        kind: SdeKind,
        gamma: f64,
        sigma_min: f64,
        sigma_max: f64,
        t_eps: f64,
        t_max: f64,
        nu: f64,
    ) -> Result<Self> {
        let positive = [gamma, sigma_min, sigma_max, nu, t_max];
        if positive.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config(
                "gamma, sigma_min, sigma_max, nu and T must be positive and finite".into(),
            ));
        }
        if sigma_min >= sigma_max {
            return Err(Error::Config(format!(
                "sigma_min ({sigma_min}) must be below sigma_max ({sigma_max})"
            )));
        }
        if !(t_eps > 0.0 && t_eps < t_max) {
            return Err(Error::Config(format!("t_eps ({t_eps}) must lie in (0, T = {t_max})")));
        }
        let mut cfg = Self {
            kind,
            gamma,
            sigma_min,
            sigma_max,
            t_eps,
            t_max,
            nu,
            variance_table: VarianceInterpolator {
                spline: CubicSpline::natural(vec![0.0, 0.5, 1.0], vec![0.0; 3])?,
            },
        };
        cfg.variance_table = cfg.build_variance_interpolator()?;
        Ok(cfg)
    }

    pub fn kind(&self) -> SdeKind {
        self.kind
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn t_eps(&self) -> f64 {
        self.t_eps
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn variance_table(&self) -> &VarianceInterpolator {
        &self.variance_table
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    /// `γ F(t)`.
    pub fn drift_rate(&self, t: f64) -> f64 {
        self.gamma * self.kind.shape(t)
    }

    /// `f(x_t, y, t) = γ F(t) (y - x_t)`.
    pub fn drift(&self, x_t: &ImageField, y: &ImageField, t: f64) -> Result<ImageField> {
        let rate = self.drift_rate(t);
        x_t.zip_map(y, |x, y| rate * (y - x))
    }

    /// `g(t) = ν (σ_max / σ_min)^(2t)`.
    pub fn diffusion(&self, t: f64) -> f64 {
        self.nu * (2.0 * t * self.log_ratio()).exp()
    }

    /// Weight of `x0` in the kernel mean.
    pub fn mean_weight(&self, t: f64) -> f64 {
        (-self.gamma * self.kind.shape_integral(0.0, t)).exp()
    }

    /// `μ_t = w(t) x0 + (1 - w(t)) y`.
    pub fn mean(&self, x0: &ImageField, y: &ImageField, t: f64) -> Result<ImageField> {
        let w = self.mean_weight(t);
        x0.zip_map(y, |a, b| w * a + (1.0 - w) * b)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= self.t_eps - TIME_SLACK && t <= self.t_max + TIME_SLACK) {
            return Err(Error::TimeRange {
                t,
                lo: self.t_eps,
                hi: self.t_max,
            });
        }
        Ok(())
    }

    /// Kernel variance `σ²(t)` for `t ∈ [t_eps, T]`.
    pub fn variance(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(match self.kind {
            SdeKind::Ouve => self.ouve_variance(t),
            SdeKind::Tsdve | SdeKind::Cosve => self.variance_table.variance(t),
        })
    }

    pub fn std(&self, t: f64) -> Result<f64> {
        Ok(self.variance(t)?.sqrt())
    }

    /// Closed-form variance of the constant-drift (OUVE) process for any `t ≥ 0`:
    /// `ν² e^{-2γt} (e^{(2γ + 4 ln r) t} - 1) / (2γ + 4 ln r)` with `r = σ_max/σ_min`.
    pub fn ouve_variance(&self, t: f64) -> f64 {
        let k = 2.0 * self.gamma + 4.0 * self.log_ratio();
        // exp_m1 keeps precision for small t
        self.nu * self.nu * (-2.0 * self.gamma * t).exp() * (k * t).exp_m1() / k
    }

    /// `σ²(t)` by adaptive quadrature of the integrating-factor integral.
    pub fn variance_by_quadrature(&self, t: f64) -> Result<f64> {
        let two_gamma = 2.0 * self.gamma;
        let four_log_r = 4.0 * self.log_ratio();
        let nu2 = self.nu * self.nu;
        let kind = self.kind;
        let integrand = move |s: f64| nu2 * (four_log_r * s - two_gamma * kind.shape_integral(s, t)).exp();
        Ok(integrate(integrand, 0.0, t, QuadratureOptions::default())?.value)
    }

    /// Terminal standard deviation the process would have with `ν = 1`.
    fn unit_terminal_std(&self) -> Result<f64> {
        let unit = Self {
            nu: 1.0,
            ..self.clone()
        };
        let var = match self.kind {
            SdeKind::Ouve => unit.ouve_variance(self.t_max),
            _ => unit.variance_by_quadrature(self.t_max)?,
        };
        Ok(var.sqrt())
    }

    /// Rescale `ν` so that `σ(T) = σ_max`. `σ(T)` is linear in `ν`, so the
    /// factor follows directly from the unit-`ν` terminal deviation.
    pub fn normalize_nu(&self) -> Result<Self> {
        let unit = self.unit_terminal_std()?;
        if !(unit.is_finite() && unit > 0.0) {
            return Err(Error::Degenerate(format!("terminal std with nu = 1 is {unit}")));
        }
        let mut cfg = Self {
            nu: self.sigma_max / unit,
            ..self.clone()
        };
        cfg.variance_table = cfg.build_variance_interpolator()?;
        Ok(cfg)
    }

    /// Quadrature values of `σ²` on the grid, joined by a natural cubic spline.
    pub fn build_variance_interpolator(&self) -> Result<VarianceInterpolator> {
        let n = VARIANCE_GRID_POINTS;
        let step = (self.t_max - self.t_eps) / (n - 1) as f64;
        let grid: Vec<f64> = (0..n)
            .map(|i| if i == n - 1 { self.t_max } else { self.t_eps + step * i as f64 })
            .collect();
        let values = grid
            .iter()
            .map(|&t| self.variance_by_quadrature(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(VarianceInterpolator {
            spline: CubicSpline::natural(grid, values)?,
        })
    }

    /// Rows `(t, mean_weight, sigma)` on `n` equidistant times of `[t_eps, T]`.
    pub fn profile(&self, n: usize) -> Result<Vec<(f64, f64, f64)>> {
        let n = n.max(2);
        let step = (self.t_max - self.t_eps) / (n - 1) as f64;
        (0..n)
            .map(|i| {
                let t = if i == n - 1 { self.t_max } else { self.t_eps + step * i as f64 };
                Ok((t, self.mean_weight(t), self.std(t)?))
            })
            .collect()
    }
}

/// Serializable process parameters; [`SdeSettings::build`] normalizes `ν`
/// and tabulates the variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSettings {
    pub kind: SdeKind,
    /// Defaults to the kind's reference stiffness when omitted.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default = "default_sigma_max")]
    pub sigma_max: f64,
    #[serde(default = "default_t_eps")]
    pub t_eps: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
}

fn default_sigma_min() -> f64 {
    0.01
}

fn default_sigma_max() -> f64 {
    1.0
}

fn default_t_eps() -> f64 {
    0.03
}

fn default_t_max() -> f64 {
    1.0
}

impl SdeSettings {
    pub fn reference(kind: SdeKind) -> Self {
        Self {
            kind,
            gamma: None,
            sigma_min: default_sigma_min(),
            sigma_max: default_sigma_max(),
            t_eps: default_t_eps(),
            t_max: default_t_max(),
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or_else(|| self.kind.default_gamma())
    }

    pub fn build(&self) -> Result<SdeConfig> {
        SdeConfig::new(self.kind, self.gamma(), self.sigma_min, self.sigma_max, self.t_eps, self.t_max)
    }
}

impl Default for SdeSettings {
    fn default() -> Self {
        Self::reference(SdeKind::Ouve)
    }
}

impl SdeConfig {
    pub fn settings(&self) -> SdeSettings {
        SdeSettings {
            kind: self.kind,
            gamma: Some(self.gamma),
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            t_eps: self.t_eps,
            t_max: self.t_max,
        }
    }
}

impl ForwardSde for SdeConfig {
    fn t_eps(&self) -> f64 {
        self.t_eps
    }

    fn t_max(&self) -> f64 {
        self.t_max
    }

    fn drift_rate(&self, t: f64) -> f64 {
        SdeConfig::drift_rate(self, t)
    }

    fn diffusion(&self, t: f64) -> f64 {
        SdeConfig::diffusion(self, t)
    }

    fn std(&self, t: f64) -> Result<f64> {
        SdeConfig::std(self, t)
    }
}
