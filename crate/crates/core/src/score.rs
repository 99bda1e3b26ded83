//! The score-model interface shared by training, sampling and the oracles.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::Result;
use crate::field::ImageField;
use crate::sde::ForwardSde;

/// A conditional score estimator.
///
/// Implementors return the σ-scaled score `S̃(x_t, y, t) = σ_t ∇ log p_t`,
/// which is trained to predict `-z`. The model sees only the state, the
/// corrupted image and the process time; no corruption parameters reach it.
pub trait ScoreModel: Sync {
    fn scaled_score(&self, x_t: &ImageField, y: &ImageField, t: f64) -> Result<ImageField>;
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn scaled_score(&self, x_t: &ImageField, y: &ImageField, t: f64) -> Result<ImageField> {
        (**self).scaled_score(x_t, y, t)
    }
}

/// Unscaled score `S = S̃ / σ_t`.
pub fn score<M: ScoreModel + ?Sized>(
    model: &M,
    sde: &(impl ForwardSde + ?Sized),
    x_t: &ImageField,
    y: &ImageField,
    t: f64,
) -> Result<ImageField> {
    let sigma = sde.std(t)?;
    let mut s = model.scaled_score(x_t, y, t)?;
    s.scale(1.0 / sigma);
    Ok(s)
}

/// Always returns zero: the untrained network with its zero-initialized head.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroModel;

impl ScoreModel for ZeroModel {
    fn scaled_score(&self, x_t: &ImageField, _y: &ImageField, _t: f64) -> Result<ImageField> {
        let (c, h, w) = x_t.shape();
        Ok(ImageField::zeros(c, h, w))
    }
}

/// Adapts a closure into a [`ScoreModel`].
pub struct FnModel<F>(pub F);

impl<F> ScoreModel for FnModel<F>
where
    F: Fn(&ImageField, &ImageField, f64) -> Result<ImageField> + Sync,
{
    fn scaled_score(&self, x_t: &ImageField, y: &ImageField, t: f64) -> Result<ImageField> {
        (self.0)(x_t, y, t)
    }
}

/// Counts every evaluation and records the requested process times.
pub struct CountingModel<M> {
    inner: M,
    calls: AtomicUsize,
    times: Mutex<Vec<f64>>,
}

impl<M: ScoreModel> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            times: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn times(&self) -> Vec<f64> {
        self.times.lock().expect("time log poisoned").clone()
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.times.lock().expect("time log poisoned").clear();
    }

    pub fn into_inner(self) -> M {
        self.inner
    }
}

impl<M: ScoreModel> ScoreModel for CountingModel<M> {
    fn scaled_score(&self, x_t: &ImageField, y: &ImageField, t: f64) -> Result<ImageField> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.times.lock().expect("time log poisoned").push(t);
        self.inner.scaled_score(x_t, y, t)
    }
}
