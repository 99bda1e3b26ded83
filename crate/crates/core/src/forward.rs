//! Perturbation kernel, conditional score and score-matching objectives.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::field::ImageField;
use crate::rng::{normal_like, Rng};
use crate::score::ScoreModel;
use crate::sde::SdeConfig;

/// A clean/corrupted image pair. Deliberately carries no corruption metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x0: ImageField,
    pub y: ImageField,
}

impl TrainingPair {
    pub fn new(x0: ImageField, y: ImageField) -> Result<Self> {
        x0.check_same_shape(&y)?;
        Ok(Self { x0, y })
    }
}

/// `x_t = μ_t + σ_t z` together with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedSample {
    pub x_t: ImageField,
    pub z: ImageField,
    pub t: f64,
}

/// Deterministic half of the kernel: `μ_t + σ_t z` for a given `z`.
pub fn perturb_with_noise(sde: &SdeConfig, pair: &TrainingPair, t: f64, z: ImageField) -> Result<PerturbedSample> {
    let sigma = sde.std(t)?;
    let mut x_t = sde.mean(&pair.x0, &pair.y, t)?;
    x_t.axpy(sigma, &z)?;
    Ok(PerturbedSample { x_t, z, t })
}

/// Draw `x_t ~ N(μ_t, σ_t² I)`.
pub fn sample_perturbation(sde: &SdeConfig, pair: &TrainingPair, t: f64, rng: &mut Rng) -> Result<PerturbedSample> {
    let z = normal_like(&pair.x0, rng);
    perturb_with_noise(sde, pair, t, z)
}

/// `∇ log p_0t(x_t | x0, y) = -(x_t - μ_t) / σ_t²`.
pub fn analytic_score(sde: &SdeConfig, x_t: &ImageField, pair: &TrainingPair, t: f64) -> Result<ImageField> {
    let var = sde.variance(t)?;
    let mu = sde.mean(&pair.x0, &pair.y, t)?;
    x_t.zip_map(&mu, |x, m| -(x - m) / var)
}

/// One score-matching draw: the perturbed state, its conditioning image and
/// the noise target.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmSample {
    pub x_t: ImageField,
    pub y: ImageField,
    pub z: ImageField,
    pub t: f64,
    pub sigma: f64,
}

/// Draw one `t ~ U[t_eps, T]` and one perturbation per pair.
pub fn draw_dsm_samples(sde: &SdeConfig, batch: &[TrainingPair], rng: &mut Rng) -> Result<Vec<DsmSample>> {
    if batch.is_empty() {
        return Err(Error::Empty("score-matching batch".into()));
    }
    batch
        .iter()
        .map(|pair| {
            let t = rng.random_range(sde.t_eps()..=sde.t_max());
            let p = sample_perturbation(sde, pair, t, rng)?;
            Ok(DsmSample {
                x_t: p.x_t,
                y: pair.y.clone(),
                z: p.z,
                t,
                sigma: sde.std(t)?,
            })
        })
        .collect()
}

fn check_output(out: &ImageField, target: &ImageField) -> Result<()> {
    if out.shape() != target.shape() {
        return Err(Error::Shape {
            expected: target.shape(),
            actual: out.shape(),
        });
    }
    Ok(())
}

/// Scaled objective: mean over all elements of `(S̃(x_t, y, t) + z)²`.
pub fn dsm_loss_from_samples<M: ScoreModel + ?Sized>(model: &M, samples: &[DsmSample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let out = model.scaled_score(&s.x_t, &s.y, s.t)?;
        check_output(&out, &s.z)?;
        total += out.as_slice().iter().zip(s.z.as_slice()).map(|(a, z)| (a + z).powi(2)).sum::<f64>();
        count += s.z.len();
    }
    Ok(total / count as f64)
}

/// Unscaled objective `(S + z/σ)²` with `S = S̃/σ`; kept as a diagnostic.
pub fn unscaled_dsm_loss_from_samples<M: ScoreModel + ?Sized>(model: &M, samples: &[DsmSample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let out = model.scaled_score(&s.x_t, &s.y, s.t)?;
        check_output(&out, &s.z)?;
        let inv = 1.0 / s.sigma;
        total += out
            .as_slice()
            .iter()
            .zip(s.z.as_slice())
            .map(|(a, z)| (a * inv + z * inv).powi(2))
            .sum::<f64>();
        count += s.z.len();
    }
    Ok(total / count as f64)
}

/// Denoising score-matching loss on a freshly drawn perturbation of `batch`.
pub fn dsm_loss<M: ScoreModel + ?Sized>(
    model: &M,
    sde: &SdeConfig,
    batch: &[TrainingPair],
    rng: &mut Rng,
) -> Result<f64> {
    let samples = draw_dsm_samples(sde, batch, rng)?;
    dsm_loss_from_samples(model, &samples)
}

/// Training objective: score matching, or the direct L2 regression baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    Score,
    Regression,
}

/// Process time handed to the network in regression mode.
pub const REGRESSION_TIME: f64 = 1.0;

/// L2 regression baseline: the same network sees `(y, y)` at `t = 1` and is
/// asked for `x0` directly.
pub fn regression_loss<M: ScoreModel + ?Sized>(model: &M, batch: &[TrainingPair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("regression batch".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for pair in batch {
        let out = model.scaled_score(&pair.y, &pair.y, REGRESSION_TIME)?;
        check_output(&out, &pair.x0)?;
        total += out.as_slice().iter().zip(pair.x0.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += pair.x0.len();
    }
    Ok(total / count as f64)
}
