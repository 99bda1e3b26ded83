//! Restoration: averaged reverse-process samples with optional global colour
//! correction.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::ImageField;
use crate::forward::{TrainingMode, REGRESSION_TIME};
use crate::io::Checkpoint;
use crate::net::{ScoreModelParams, ScoreNet};
use crate::rng::derive_seed;
use crate::samplers::sample;
use crate::score::ScoreModel;
use crate::sde::{ForwardSde, SdeConfig};

use super::{RestorationConfig, SamplingConfig};

/// Shift each channel of `img` so its mean equals the matching channel mean
/// of `target`.
pub fn color_correct(img: &ImageField, target: &ImageField) -> Result<ImageField> {
    img.check_same_shape(target)?;
    let mut out = img.clone();
    for c in 0..img.channels() {
        let shift = target.channel_mean(c) - img.channel_mean(c);
        out.plane_mut(c).iter_mut().for_each(|v| *v += shift);
    }
    Ok(out)
}

/// Extend `img` by edge replication on the bottom and right so both spatial
/// sizes are multiples of `multiple`.
pub fn pad_to_multiple(img: &ImageField, multiple: usize) -> ImageField {
    let (c, h, w) = img.shape();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    ImageField::from_fn(c, ph, pw, |ch, y, x| img.get(ch, y.min(h - 1), x.min(w - 1)))
}

/// Draw `n_average` reverse-process samples for `y`, average them pixelwise,
/// optionally colour-correct towards `y`, and clamp to `[0, 1]`.
///
/// Draw `k` uses the sampler seed `derive_seed(seed, "average", k)`, so the
/// first draws are shared between runs with different `n_average`.
pub fn restore_with_model<M, S>(
    y: &ImageField,
    model: &M,
    sde: &S,
    sampling: &SamplingConfig,
    opts: &RestorationConfig,
    seed: u64,
) -> Result<ImageField>
where
    M: ScoreModel + ?Sized,
    S: ForwardSde + ?Sized,
{
    let draws = sample_draws(y, model, sde, sampling, opts.n_average, seed)?;
    finish(average(&draws)?, y, opts.color_correct)
}

/// The `n` raw reverse-process draws that [`restore_with_model`] averages,
/// in draw order.
pub fn sample_draws<M, S>(y: &ImageField, model: &M, sde: &S, sampling: &SamplingConfig, n: usize, seed: u64) -> Result<Vec<ImageField>>
where
    M: ScoreModel + ?Sized,
    S: ForwardSde + ?Sized,
{
    if n == 0 {
        return Err(Error::Config("n_average must be at least 1".into()));
    }
    (0..n as u64)
        .into_par_iter()
        .map(|k| sample(y, model, sde, &sampling.with_seed(derive_seed(seed, "average", k))).map(|r| r.x_hat))
        .collect()
}

/// Pixelwise mean of equally shaped images, summed in order.
pub fn average(images: &[ImageField]) -> Result<ImageField> {
    let first = images.first().ok_or_else(|| Error::Empty("images to average".into()))?;
    let mut mean = ImageField::zeros(first.channels(), first.height(), first.width());
    for d in images {
        mean.axpy(1.0, d)?;
    }
    mean.scale(1.0 / images.len() as f64);
    Ok(mean)
}

/// Optional colour correction towards `y`, then clamping to `[0, 1]`: the
/// last step of every restoration.
pub fn finish(img: ImageField, y: &ImageField, correct: bool) -> Result<ImageField> {
    let out = if correct { color_correct(&img, y)? } else { img };
    Ok(out.clamped(0.0, 1.0))
}

/// A trained network ready to restore images of any size.
#[derive(Debug, Clone)]
pub struct Restorer {
    net: ScoreNet,
    params: ScoreModelParams,
    sde: SdeConfig,
    mode: TrainingMode,
}

impl Restorer {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            net: ckpt.network()?,
            params: ckpt.params.clone(),
            sde: ckpt.meta.sde.build()?,
            mode: ckpt.meta.mode,
        })
    }

    pub fn mode(&self) -> TrainingMode {
        self.mode
    }

    pub fn sde(&self) -> &SdeConfig {
        &self.sde
    }

    /// Raw reverse-process draws for `y` with the EMA weights, before
    /// averaging, colour correction and clamping. `y`'s sides must be
    /// multiples of the network's pooling factor.
    pub fn draws(&self, y: &ImageField, sampling: &SamplingConfig, n: usize, seed: u64) -> Result<Vec<ImageField>> {
        if self.mode != TrainingMode::Score {
            return Err(Error::Config("only score models draw samples".into()));
        }
        sample_draws(y, &self.params.eval_model(&self.net), &self.sde, sampling, n, seed)
    }

    /// Restore `y` with the EMA weights. Inputs whose sides are not a
    /// multiple of the network's pooling factor are edge-padded and the
    /// result cropped back. The regression baseline is deterministic, so it
    /// ignores `n_average`.
    pub fn restore(&self, y: &ImageField, sampling: &SamplingConfig, opts: &RestorationConfig, seed: u64) -> Result<ImageField> {
        let (_, h, w) = y.shape();
        let padded = pad_to_multiple(y, self.net.spec().size_multiple());
        let model = self.params.eval_model(&self.net);
        let out = match self.mode {
            TrainingMode::Score => {
                let raw = restore_with_model(
                    &padded,
                    &model,
                    &self.sde,
                    sampling,
                    &RestorationConfig {
                        color_correct: false,
                        ..*opts
                    },
                    seed,
                )?;
                raw.crop(0, 0, h, w)?
            }
            TrainingMode::Regression => model.scaled_score(&padded, &padded, REGRESSION_TIME)?.crop(0, 0, h, w)?,
        };
        // Colour correction is applied after cropping so that the padded
        // border does not bias the channel means.
        finish(out, y, opts.color_correct)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::SamplerKind;
    use crate::score::{CountingModel, FnModel, ZeroModel};
    use crate::sde::SdeKind;

    fn texture() -> ImageField {
        ImageField::from_fn(3, 8, 8, |c, y, x| 0.3 + 0.05 * c as f64 + 0.2 * ((x + 2 * y) as f64 * 0.5).sin())
    }

    fn em(n: usize) -> SamplingConfig {
        SamplingConfig {
            kind: SamplerKind::EulerMaruyama,
            n_steps: n,
            ..SamplingConfig::default()
        }
    }

    #[test]
    fn single_draw_without_correction_is_the_raw_sample() {
        let sde = SdeConfig::reference(SdeKind::Ouve).unwrap();
        let y = texture();
        let opts = RestorationConfig {
            n_average: 1,
            color_correct: false,
        };
        let restored = restore_with_model(&y, &ZeroModel, &sde, &em(20), &opts, 9).unwrap();
        let raw = sample(&y, &ZeroModel, &sde, &em(20).with_seed(derive_seed(9, "average", 0))).unwrap();
        assert_eq!(restored, raw.x_hat);
    }

    #[test]
    fn averaging_uses_independent_draws() {
        let sde = SdeConfig::reference(SdeKind::Ouve).unwrap();
        let y = texture();
        let one = RestorationConfig {
            n_average: 1,
            color_correct: false,
        };
        let four = RestorationConfig { n_average: 4, ..one };
        let counting = CountingModel::new(ZeroModel);
        let a = restore_with_model(&y, &counting, &sde, &em(10), &four, 1).unwrap();
        assert_eq!(counting.calls(), 40);
        let b = restore_with_model(&y, &ZeroModel, &sde, &em(10), &one, 1).unwrap();
        // Averaging four draws reduces the spread around y.
        let spread = |img: &ImageField| img.zip_map(&y, |a, b| (a - b).powi(2)).unwrap().mean();
        assert!(spread(&a) < spread(&b));
    }

    #[test]
    fn color_correction_matches_channel_means() {
        let y = texture();
        let img = ImageField::from_fn(3, 8, 8, |c, yy, x| 0.4 + 0.02 * (c + yy + x) as f64 * 0.1);
        let corrected = color_correct(&img, &y).unwrap();
        for c in 0..3 {
            assert!((corrected.channel_mean(c) - y.channel_mean(c)).abs() < 1e-6);
        }

        // Through the full restore path, with the exact score for x0 = y
        // (x_t ~ N(y, σ²)), which keeps samples near y so nothing is clipped.
        let sde = SdeConfig::reference(SdeKind::Ouve).unwrap();
        let exact = FnModel(|x: &ImageField, y: &ImageField, t: f64| {
            let sigma = sde.std(t)?;
            x.zip_map(y, |a, b| -(a - b) / sigma)
        });
        let opts = RestorationConfig {
            n_average: 2,
            color_correct: true,
        };
        let uncorrected = restore_with_model(&y, &exact, &sde, &em(50), &RestorationConfig { color_correct: false, ..opts }, 3).unwrap();
        assert!((uncorrected.channel_mean(0) - y.channel_mean(0)).abs() > 1e-6);
        let out = restore_with_model(&y, &exact, &sde, &em(50), &opts, 3).unwrap();
        assert!(out.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        for c in 0..3 {
            assert!((out.channel_mean(c) - y.channel_mean(c)).abs() < 1e-6);
        }
    }

    #[test]
    fn padding_replicates_edges() {
        let img = ImageField::from_fn(1, 3, 5, |_, y, x| (y * 10 + x) as f64);
        let p = pad_to_multiple(&img, 4);
        assert_eq!(p.shape(), (1, 4, 8));
        assert_eq!(p.get(0, 3, 7), img.get(0, 2, 4));
        assert_eq!(p.crop(0, 0, 3, 5).unwrap(), img);
        assert_eq!(pad_to_multiple(&p, 4), p);
    }

    #[test]
    fn zero_draws_are_rejected() {
        let sde = SdeConfig::reference(SdeKind::Ouve).unwrap();
        let opts = RestorationConfig {
            n_average: 0,
            color_correct: false,
        };
        assert!(restore_with_model(&texture(), &ZeroModel, &sde, &em(5), &opts, 0).is_err());
    }
}
