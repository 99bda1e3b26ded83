//! Linear-Gaussian restoration world with exact posteriors and scores.
//!
//! `x0 ~ N(m0, diag Σ0)` and `y = x0 + n`, `n ~ N(0, σ_obs² I)`. Everything
//! is diagonal, so each coordinate is an independent scalar problem. Under
//! the forward SDE, `x_t | y ~ N(w μ_post + (1 - w) y, w² P + σ_t²)` where
//! `w` is the mean weight and `(μ_post, P)` the conjugate posterior.

use crate::error::{Error, Result};
use crate::field::ImageField;
use crate::forward::TrainingPair;
use crate::rng::{normal_like, standard_normal, Rng};
use crate::score::ScoreModel;
use crate::sde::quadrature::{integrate, QuadratureOptions};
use crate::sde::SdeConfig;

pub const MAX_WORLD_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWorld {
    shape: (usize, usize, usize),
    prior_mean: Vec<f64>,
    prior_var: Vec<f64>,
    obs_std: f64,
}

impl GaussianWorld {
    pub fn new(shape: (usize, usize, usize), prior_mean: Vec<f64>, prior_var: Vec<f64>, obs_std: f64) -> Result<Self> {
        let dim = shape.0 * shape.1 * shape.2;
        if dim == 0 || dim > MAX_WORLD_DIM {
            return Err(Error::Config(format!("world dimension must be in 1..={MAX_WORLD_DIM}, got {dim}")));
        }
        if prior_mean.len() != dim || prior_var.len() != dim {
            return Err(Error::Config(format!(
                "prior has {} means and {} variances for dimension {dim}",
                prior_mean.len(),
                prior_var.len()
            )));
        }
        if prior_var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("prior variances must be positive".into()));
        }
        if !(obs_std.is_finite() && obs_std > 0.0) {
            return Err(Error::Config(format!("observation noise must be positive, got {obs_std}")));
        }
        Ok(Self {
            shape,
            prior_mean,
            prior_var,
            obs_std,
        })
    }

    /// Scalar world, handy for closed-form checks.
    pub fn scalar(prior_mean: f64, prior_var: f64, obs_std: f64) -> Result<Self> {
        Self::new((1, 1, 1), vec![prior_mean], vec![prior_var], obs_std)
    }

    /// Eight-dimensional world laid out as a 2×2×2 field. The observation
    /// noise is small next to the prior spread, which keeps the mismatch
    /// between `y + σ_T z` and the true terminal law negligible.
    pub fn eight_dim() -> Self {
        let mean = (0..8).map(|d| -0.35 + 0.1 * d as f64).collect();
        let var = (0..8).map(|d| 0.6 + 0.1 * d as f64).collect();
        Self::new((2, 2, 2), mean, var, 0.05).expect("valid world")
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    pub fn prior_mean(&self) -> &[f64] {
        &self.prior_mean
    }

    pub fn prior_var(&self) -> &[f64] {
        &self.prior_var
    }

    pub fn obs_std(&self) -> f64 {
        self.obs_std
    }

    fn field(&self, data: Vec<f64>) -> ImageField {
        let (c, h, w) = self.shape;
        ImageField::from_vec(c, h, w, data).expect("world-sized data")
    }

    fn check(&self, x: &ImageField) -> Result<()> {
        if x.shape() != self.shape {
            return Err(Error::Shape {
                expected: self.shape,
                actual: x.shape(),
            });
        }
        Ok(())
    }

    /// Posterior variance per coordinate; it does not depend on `y`.
    pub fn posterior_var(&self) -> Vec<f64> {
        let inv_obs = self.obs_std.powi(-2);
        self.prior_var.iter().map(|s0| 1.0 / (1.0 / s0 + inv_obs)).collect()
    }

    /// Conjugate posterior `(mean, variance)` of `x0` given `y`.
    pub fn posterior(&self, y: &ImageField) -> Result<(ImageField, ImageField)> {
        self.check(y)?;
        let inv_obs = self.obs_std.powi(-2);
        let var = self.posterior_var();
        let mean = (0..self.dim())
            .map(|d| var[d] * (self.prior_mean[d] / self.prior_var[d] + y.as_slice()[d] * inv_obs))
            .collect();
        Ok((self.field(mean), self.field(var)))
    }

    pub fn sample_x0(&self, rng: &mut Rng) -> ImageField {
        let data = (0..self.dim())
            .map(|d| self.prior_mean[d] + self.prior_var[d].sqrt() * standard_normal(rng))
            .collect();
        self.field(data)
    }

    pub fn observe(&self, x0: &ImageField, rng: &mut Rng) -> Result<ImageField> {
        self.check(x0)?;
        let mut y = x0.clone();
        y.axpy(self.obs_std, &normal_like(x0, rng))?;
        Ok(y)
    }

    /// A `(x0, y)` draw from the joint law.
    pub fn sample_pair(&self, rng: &mut Rng) -> TrainingPair {
        let x0 = self.sample_x0(rng);
        let y = self.observe(&x0, rng).expect("world-shaped draw");
        TrainingPair { x0, y }
    }

    /// Mean and variance of `x_t | y` under the forward process.
    pub fn marginal(&self, y: &ImageField, t: f64, sde: &SdeConfig) -> Result<(ImageField, ImageField)> {
        let (mu, p) = self.posterior(y)?;
        let w = sde.mean_weight(t);
        let sigma2 = sde.variance(t)?;
        let mean = mu.zip_map(y, |m, y| w * m + (1.0 - w) * y)?;
        let var = p.map(|p| w * w * p + sigma2);
        Ok((mean, var))
    }

    /// Exact `∇_x log p_t(x_t | y)`.
    pub fn oracle_score(&self, x_t: &ImageField, y: &ImageField, t: f64, sde: &SdeConfig) -> Result<ImageField> {
        self.check(x_t)?;
        let (mean, var) = self.marginal(y, t, sde)?;
        let diff = x_t.zip_map(&mean, |x, m| x - m)?;
        diff.zip_map(&var, |d, v| -d / v)
    }

    /// `log p_t(x_t | y)`, used for finite-difference checks of the score.
    pub fn log_density(&self, x_t: &ImageField, y: &ImageField, t: f64, sde: &SdeConfig) -> Result<f64> {
        self.check(x_t)?;
        let (mean, var) = self.marginal(y, t, sde)?;
        Ok((0..self.dim())
            .map(|d| {
                let v = var.as_slice()[d];
                let r = x_t.as_slice()[d] - mean.as_slice()[d];
                -0.5 * (r * r / v + (2.0 * std::f64::consts::PI * v).ln())
            })
            .sum())
    }

    /// Brute-force score: the Gaussian-mixture score over `n` posterior draws
    /// of `x0`, each contributing `N(x_t; w x0 + (1 - w) y, σ_t²)`.
    pub fn monte_carlo_score(
        &self,
        x_t: &ImageField,
        y: &ImageField,
        t: f64,
        sde: &SdeConfig,
        n: usize,
        rng: &mut Rng,
    ) -> Result<ImageField> {
        self.check(x_t)?;
        if n == 0 {
            return Err(Error::Empty("Monte-Carlo draws".into()));
        }
        let (mu, p) = self.posterior(y)?;
        let w = sde.mean_weight(t);
        let sigma2 = sde.variance(t)?;
        // coordinates are independent, so the mixture factorizes per coordinate
        let out = (0..self.dim())
            .map(|d| {
                let (xd, yd) = (x_t.as_slice()[d], y.as_slice()[d]);
                let (md, sd) = (mu.as_slice()[d], p.as_slice()[d].sqrt());
                let comps: Vec<(f64, f64)> = (0..n)
                    .map(|_| {
                        let x0 = md + sd * standard_normal(rng);
                        let r = xd - (w * x0 + (1.0 - w) * yd);
                        (-0.5 * r * r / sigma2, -r / sigma2)
                    })
                    .collect();
                let max_log = comps.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
                let (num, den) = comps.iter().fold((0.0, 0.0), |(num, den), (lw, s)| {
                    let weight = (lw - max_log).exp();
                    (num + weight * s, den + weight)
                });
                num / den
            })
            .collect();
        Ok(self.field(out))
    }

    /// Smallest achievable scaled score-matching loss, averaged over
    /// `t ~ U[t_eps, T]` and coordinates: `E_t mean_d w²P_d / (w²P_d + σ_t²)`.
    pub fn bayes_floor(&self, sde: &SdeConfig) -> Result<f64> {
        let p = self.posterior_var();
        let integrand = |t: f64| {
            let w2 = sde.mean_weight(t).powi(2);
            let s2 = sde.variance(t).unwrap_or(f64::NAN);
            p.iter().map(|pd| w2 * pd / (w2 * pd + s2)).sum::<f64>() / p.len() as f64
        };
        let (a, b) = (sde.t_eps(), sde.t_max());
        let r = integrate(integrand, a, b, QuadratureOptions::default())?;
        if !r.value.is_finite() {
            return Err(Error::Degenerate("Bayes floor integrand left the variance table".into()));
        }
        Ok(r.value / (b - a))
    }
}

/// The exact score of a [`GaussianWorld`] presented as a score model
/// (σ-scaled, like the network).
#[derive(Debug, Clone)]
pub struct OracleModel<'a> {
    pub world: &'a GaussianWorld,
    pub sde: &'a SdeConfig,
}

impl ScoreModel for OracleModel<'_> {
    fn scaled_score(&self, x_t: &ImageField, y: &ImageField, t: f64) -> Result<ImageField> {
        let mut s = self.world.oracle_score(x_t, y, t, self.sde)?;
        s.scale(self.sde.std(t)?);
        Ok(s)
    }
}
