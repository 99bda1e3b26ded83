//! The training loop: on-the-fly pairs, score matching (or the regression
//! baseline), AdamW, EMA, CSV logging and periodic checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{draw_dsm_samples, TrainingMode, TrainingPair};
use crate::io::{read_image, Checkpoint, CheckpointMeta};
use crate::jpeg::sample_degradation_in;
use crate::net::params::ParamSet;
use crate::net::{ScoreModelParams, ScoreNet};
use crate::oracle::GaussianWorld;
use crate::rng::{child_rng, derive_seed};

use super::data::{crop_patch, DatasetIndex, Split};
use super::{DataConfig, DataSource, ExperimentConfig};

use rand::seq::SliceRandom;

/// Where training pairs come from. `pair` must be a pure function of its
/// arguments so that batches can be assembled in parallel.
pub trait PairSource: Sync {
    /// Items per epoch.
    fn epoch_len(&self) -> usize;

    /// The `slot`-th pair of the epoch order, drawn with the stream `seed`.
    fn pair(&self, slot: usize, seed: u64) -> Result<TrainingPair>;
}

struct CorpusSource {
    images: Vec<crate::field::ImageField>,
    data: DataConfig,
}

impl PairSource for CorpusSource {
    fn epoch_len(&self) -> usize {
        self.images.len()
    }

    fn pair(&self, slot: usize, seed: u64) -> Result<TrainingPair> {
        let mut rng = crate::rng::rng_from_seed(seed);
        let x0 = crop_patch(&self.images[slot], self.data.patch_size, &mut rng)?;
        let (y, _qf) = sample_degradation_in(&x0, self.data.qf_min, self.data.qf_max, self.data.subsampling, &mut rng)?;
        TrainingPair::new(x0, y)
    }
}

struct WorldSource {
    world: GaussianWorld,
    epoch_size: usize,
}

impl PairSource for WorldSource {
    fn epoch_len(&self) -> usize {
        self.epoch_size
    }

    fn pair(&self, _slot: usize, seed: u64) -> Result<TrainingPair> {
        Ok(self.world.sample_pair(&mut crate::rng::rng_from_seed(seed)))
    }
}

fn build_source(cfg: &ExperimentConfig) -> Result<Box<dyn PairSource>> {
    match cfg.data.source {
        DataSource::Corpus => {
            let index = DatasetIndex::scan(&cfg.data.dir, cfg.seed)?;
            let images = index
                .records(Split::Train)
                .par_iter()
                .map(|r| read_image(&r.path))
                .collect::<Result<Vec<_>>>()?;
            if images.is_empty() {
                return Err(Error::Empty("training split".into()));
            }
            Ok(Box::new(CorpusSource {
                images,
                data: cfg.data.clone(),
            }))
        }
        DataSource::Gaussian => {
            let world = cfg.data.world.as_ref().ok_or_else(|| Error::Config("missing [data.world]".into()))?;
            Ok(Box::new(WorldSource {
                world: world.build()?,
                epoch_size: world.epoch_size,
            }))
        }
    }
}

/// Wall-clock and loss statistics of a finished run. Kept out of the
/// checkpoint so that checkpoints are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub wall_seconds: f64,
    /// Mean loss over the first and last tenth of the run.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl TrainSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub summary: TrainSummary,
    /// Per-step training loss.
    pub losses: Vec<f64>,
}

#[derive(Serialize)]
struct LogRecord {
    step: u64,
    loss: f64,
    wall_seconds: f64,
}

/// Loss and mean gradient over one batch. Per-item work runs in parallel;
/// the reduction is sequential in item order, so results do not depend on
/// the thread count.
fn batch_loss_and_grad(
    net: &ScoreNet,
    params: &ParamSet,
    cfg: &ExperimentConfig,
    sde: &crate::sde::SdeConfig,
    pairs: &[TrainingPair],
    seeds: &[u64],
) -> Result<(f64, ParamSet)> {
    let parts = pairs
        .par_iter()
        .zip(seeds)
        .map(|(pair, &seed)| match cfg.training.mode {
            TrainingMode::Score => {
                let mut rng = child_rng(seed, "dsm", 0);
                let samples = draw_dsm_samples(sde, std::slice::from_ref(pair), &mut rng)?;
                net.dsm_loss_and_grad(params, &samples)
            }
            TrainingMode::Regression => net.regression_loss_and_grad(params, std::slice::from_ref(pair)),
        })
        .collect::<Result<Vec<_>>>()?;
    let n = parts.len() as f64;
    let mut loss = 0.0;
    let mut grads = params.zeros_like();
    for (l, g) in &parts {
        loss += l;
        grads.add_assign(g);
    }
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// Train the score network described by `cfg`.
///
/// With `out_dir`, writes `train_log.csv` (step, loss, wall seconds),
/// `checkpoint.ckpt` every `checkpoint_every` steps and at the end, and
/// `train_summary.toml`. A non-finite loss or gradient aborts the run after
/// saving the last good state to `last_good.ckpt`.
pub fn train(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sde = cfg.sde.build()?;
    let net = ScoreNet::new(cfg.net)?;
    let source = build_source(cfg)?;
    let tc = &cfg.training;

    let steps_per_epoch = source.epoch_len().div_ceil(tc.batch_size);
    let total_steps = (steps_per_epoch * tc.epochs) as u64;
    let mut state = ScoreModelParams::new(net.init_params(derive_seed(cfg.seed, "init", 0)));
    let meta = |step_count| CheckpointMeta {
        net: cfg.net,
        sde: cfg.sde,
        mode: tc.mode,
        step_count,
        seed: cfg.seed,
    };

    let paths = out_dir.map(|d| -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        Ok((d.join("checkpoint.ckpt"), d.join("train_log.csv")))
    });
    let paths = paths.transpose()?;
    let mut log = match &paths {
        Some((_, log_path)) => Some(csv::Writer::from_path(log_path).map_err(|e| Error::format(log_path, e.to_string()))?),
        None => None,
    };

    log::info!(
        "training {} parameters for {total_steps} steps ({steps_per_epoch} per epoch, batch {})",
        state.weights.num_scalars(),
        tc.batch_size
    );
    let started = Instant::now();
    let mut losses = Vec::with_capacity(total_steps as usize);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..total_steps {
        let epoch = step as usize / steps_per_epoch;
        let within = step as usize % steps_per_epoch;
        if within == 0 {
            order = (0..source.epoch_len()).collect();
            order.shuffle(&mut child_rng(cfg.seed, "epoch", epoch as u64));
        }
        let seeds: Vec<u64> = (0..tc.batch_size)
            .map(|i| derive_seed(cfg.seed, "item", step * tc.batch_size as u64 + i as u64))
            .collect();
        let pairs = seeds
            .par_iter()
            .enumerate()
            .map(|(i, &seed)| source.pair(order[(within * tc.batch_size + i) % order.len()], seed))
            .collect::<Result<Vec<_>>>()?;

        let (loss, grads) = batch_loss_and_grad(&net, &state.weights, cfg, &sde, &pairs, &seeds)?;
        let last_good = state.clone();
        let mut finite = loss.is_finite() && grads.all_finite();
        if finite {
            state.adamw_step(&grads, tc.lr, tc.weight_decay)?;
            state.ema_update_with(tc.ema_decay);
            // An overflowing update is caught here rather than one step later.
            finite = state.weights.all_finite() && state.ema_shadow.all_finite();
        }
        if !finite {
            if let Some(dir) = out_dir {
                Checkpoint {
                    meta: meta(last_good.step_count),
                    params: last_good,
                }
                .save(&dir.join("last_good.ckpt"))?;
            }
            return Err(Error::NonFiniteLoss { step });
        }
        losses.push(loss);

        let done = step + 1;
        let wall = started.elapsed().as_secs_f64();
        if let Some(w) = log.as_mut() {
            w.serialize(LogRecord {
                step: done,
                loss,
                wall_seconds: wall,
            })
            .map_err(|e| Error::Config(format!("training log: {e}")))?;
        }
        if tc.log_every > 0 && done % tc.log_every == 0 {
            let recent = &losses[losses.len().saturating_sub(tc.log_every as usize)..];
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            log::info!("step {done}/{total_steps} epoch {epoch} loss {mean:.5} ({wall:.0} s)");
        }
        let periodic = tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0;
        if let (Some((ckpt_path, _)), true) = (&paths, periodic && done < total_steps) {
            if let Some(w) = log.as_mut() {
                w.flush().map_err(|e| Error::io(ckpt_path, e))?;
            }
            Checkpoint {
                meta: meta(state.step_count),
                params: state.clone(),
            }
            .save(ckpt_path)?;
        }
    }

    let wall_seconds = started.elapsed().as_secs_f64();
    let tenth = (losses.len() / 10).max(1);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    let summary = TrainSummary {
        steps: total_steps,
        epochs: tc.epochs,
        wall_seconds,
        initial_loss: mean(&losses[..tenth.min(losses.len())]),
        final_loss: mean(&losses[losses.len().saturating_sub(tenth)..]),
    };
    let checkpoint = Checkpoint {
        meta: meta(state.step_count),
        params: state,
    };
    if let (Some((ckpt_path, _)), Some(dir)) = (&paths, out_dir) {
        if let Some(mut w) = log.take() {
            w.flush().map_err(|e| Error::io(dir, e))?;
        }
        checkpoint.save(ckpt_path)?;
        summary.save(&dir.join("train_summary.toml"))?;
    }
    log::info!("finished {total_steps} steps in {wall_seconds:.0} s, final loss {:.5}", summary.final_loss);
    Ok(TrainOutcome {
        checkpoint,
        summary,
        losses,
    })
}
