//! Reverse-time samplers: Euler-Maruyama, stochastic Heun and the
//! probability-flow ODE under adaptive Dormand-Prince 5(4).
//!
//! All three integrate from `T` down to `t_eps` starting at `y + σ_T z`.
//! Time is stored as a decreasing value and steps are positive magnitudes,
//! so one step moves `x` by `reverse_drift · dt + g √dt z`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ImageField;
use crate::rng::{normal_like, rng_from_seed, Rng};
use crate::score::ScoreModel;
use crate::sde::ForwardSde;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    #[serde(rename = "em")]
    EulerMaruyama,
    #[serde(rename = "heun")]
    EulerHeun,
    #[serde(rename = "ode")]
    ProbabilityFlowOde,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::EulerMaruyama => "em",
            SamplerKind::EulerHeun => "heun",
            SamplerKind::ProbabilityFlowOde => "ode",
        }
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "em" | "euler-maruyama" => Ok(SamplerKind::EulerMaruyama),
            "heun" | "euler-heun" => Ok(SamplerKind::EulerHeun),
            "ode" | "pf-ode" => Ok(SamplerKind::ProbabilityFlowOde),
            other => Err(Error::Config(format!("unknown sampler `{other}` (expected em, heun or ode)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Steps of the fixed-grid samplers.
    pub n_steps: usize,
    /// Absolute and relative tolerance of the ODE sampler.
    pub atol: f64,
    pub rtol: f64,
    pub seed: u64,
    /// Clamp the final state to `[0, 1]`. Switched off only by the
    /// moment tests, where the state is not an image.
    pub clamp_output: bool,
    pub record_trajectory: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::EulerMaruyama,
            n_steps: 100,
            atol: 1e-3,
            rtol: 1e-3,
            seed: 0,
            clamp_output: true,
            record_trajectory: false,
        }
    }
}

impl SamplerConfig {
    pub fn euler_maruyama(n_steps: usize, seed: u64) -> Self {
        Self {
            kind: SamplerKind::EulerMaruyama,
            n_steps,
            seed,
            ..Self::default()
        }
    }

    pub fn euler_heun(n_steps: usize, seed: u64) -> Self {
        Self {
            kind: SamplerKind::EulerHeun,
            n_steps,
            seed,
            ..Self::default()
        }
    }

    pub fn ode(tol: f64, seed: u64) -> Self {
        Self {
            kind: SamplerKind::ProbabilityFlowOde,
            atol: tol,
            rtol: tol,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if !(self.atol > 0.0 && self.rtol > 0.0) {
            return Err(Error::Config(format!(
                "ODE tolerances must be positive (atol {}, rtol {})",
                self.atol, self.rtol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub x_hat: ImageField,
    /// Number of score-model evaluations.
    pub nfe: usize,
    /// `(t, x_t)` after every accepted step, when requested.
    pub trajectory: Option<Vec<(f64, ImageField)>>,
}

/// `y + σ_T z`, the start of every reverse process.
pub fn init_reverse(y: &ImageField, sde: &(impl ForwardSde + ?Sized), rng: &mut Rng) -> Result<ImageField> {
    let sigma_t = sde.std(sde.t_max())?;
    let mut x = y.clone();
    x.axpy(sigma_t, &normal_like(y, rng))?;
    Ok(x)
}

/// `-f(x_t, y, t) + g(t)² · score` where `score` is the unscaled score.
pub fn reverse_drift(
    x_t: &ImageField,
    y: &ImageField,
    t: f64,
    score: &ImageField,
    sde: &(impl ForwardSde + ?Sized),
) -> Result<ImageField> {
    x_t.check_same_shape(y)?;
    x_t.check_same_shape(score)?;
    let rate = sde.drift_rate(t);
    let g2 = sde.diffusion(t).powi(2);
    let mut out = x_t.zip_map(y, |x, y| -rate * (y - x))?;
    out.axpy(g2, score)?;
    Ok(out)
}

/// Model evaluation plus bookkeeping shared by the samplers.
struct Evaluator<'a, M: ?Sized, S: ?Sized> {
    model: &'a M,
    sde: &'a S,
    y: &'a ImageField,
    nfe: usize,
}

impl<M: ScoreModel + ?Sized, S: ForwardSde + ?Sized> Evaluator<'_, M, S> {
    fn score(&mut self, x: &ImageField, t: f64) -> Result<ImageField> {
        let t = t.clamp(self.sde.t_eps(), self.sde.t_max());
        let sigma = self.sde.std(t)?;
        self.nfe += 1;
        let mut s = self.model.scaled_score(x, self.y, t)?;
        x.check_same_shape(&s)?;
        s.scale(1.0 / sigma);
        Ok(s)
    }

    /// Reverse-SDE drift `-f + g² S`.
    fn sde_drift(&mut self, x: &ImageField, t: f64) -> Result<ImageField> {
        let s = self.score(x, t)?;
        reverse_drift(x, self.y, t, &s, self.sde)
    }

    /// Probability-flow velocity `dx/dt = f - ½ g² S`.
    fn ode_velocity(&mut self, x: &ImageField, t: f64) -> Result<ImageField> {
        let s = self.score(x, t)?;
        let rate = self.sde.drift_rate(t);
        let half_g2 = 0.5 * self.sde.diffusion(t).powi(2);
        let mut v = x.zip_map(self.y, |x, y| rate * (y - x))?;
        v.axpy(-half_g2, &s)?;
        Ok(v)
    }
}

fn finish(mut x: ImageField, nfe: usize, trajectory: Option<Vec<(f64, ImageField)>>, cfg: &SamplerConfig) -> SampleResult {
    if cfg.clamp_output {
        x.clamp(0.0, 1.0);
    }
    SampleResult { x_hat: x, nfe, trajectory }
}

/// Uniform grid `T = t_0 > t_1 > … > t_n = t_eps`.
fn time_grid(sde: &(impl ForwardSde + ?Sized), n: usize) -> Vec<f64> {
    let (lo, hi) = (sde.t_eps(), sde.t_max());
    (0..=n)
        .map(|i| if i == n { lo } else { hi - (hi - lo) * i as f64 / n as f64 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FixedScheme {
    Euler,
    Heun,
}

/// Fixed-grid reverse SDE from an explicit start and noise stream.
/// `noise` supplies the standard normal increments, one per step.
fn fixed_step<M, S>(
    scheme: FixedScheme,
    x_init: ImageField,
    y: &ImageField,
    model: &M,
    sde: &S,
    n_steps: usize,
    record: bool,
    noise: &mut dyn FnMut(&ImageField) -> ImageField,
) -> Result<(ImageField, usize, Option<Vec<(f64, ImageField)>>)>
where
    M: ScoreModel + ?Sized,
    S: ForwardSde + ?Sized,
{
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be at least 1".into()));
    }
    x_init.check_same_shape(y)?;
    let grid = time_grid(sde, n_steps);
    let mut ev = Evaluator { model, sde, y, nfe: 0 };
    let mut x = x_init;
    let mut trajectory = record.then(Vec::new);
    for step in 0..n_steps {
        let (t, t_next) = (grid[step], grid[step + 1]);
        let dt = t - t_next;
        let z = noise(&x);
        let d0 = ev.sde_drift(&x, t)?;
        let g0 = sde.diffusion(t);
        let mut next = x.clone();
        next.axpy(dt, &d0)?;
        next.axpy(g0 * dt.sqrt(), &z)?;
        if scheme == FixedScheme::Heun {
            let d1 = ev.sde_drift(&next, t_next)?;
            let g_avg = 0.5 * (g0 + sde.diffusion(t_next));
            next = x.clone();
            next.axpy(0.5 * dt, &d0)?;
            next.axpy(0.5 * dt, &d1)?;
            next.axpy(g_avg * dt.sqrt(), &z)?;
        }
        if !next.is_finite() {
            return Err(Error::Divergence { step, t: t_next });
        }
        x = next;
        if let Some(tr) = trajectory.as_mut() {
            tr.push((t_next, x.clone()));
        }
    }
    Ok((x, ev.nfe, trajectory))
}

/// Noise-free reverse SDE run of a fixed-step scheme from a given start.
/// For score models linear in `x` this is exactly the scheme's mean.
pub fn fixed_step_mean<M, S>(
    kind: SamplerKind,
    x_init: ImageField,
    y: &ImageField,
    model: &M,
    sde: &S,
    n_steps: usize,
) -> Result<ImageField>
where
    M: ScoreModel + ?Sized,
    S: ForwardSde + ?Sized,
{
    let scheme = match kind {
        SamplerKind::EulerMaruyama => FixedScheme::Euler,
        SamplerKind::EulerHeun => FixedScheme::Heun,
        SamplerKind::ProbabilityFlowOde => {
            return Err(Error::Config("the ODE sampler has no fixed-step mean".into()));
        }
    };
    let mut zero = |x: &ImageField| ImageField::zeros(x.channels(), x.height(), x.width());
    Ok(fixed_step(scheme, x_init, y, model, sde, n_steps, false, &mut zero)?.0)
}

fn run_fixed<M, S>(scheme: FixedScheme, y: &ImageField, model: &M, sde: &S, cfg: &SamplerConfig) -> Result<SampleResult>
where
    M: ScoreModel + ?Sized,
    S: ForwardSde + ?Sized,
{
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let x0 = init_reverse(y, sde, &mut rng)?;
    let mut noise = |x: &ImageField| normal_like(x, &mut rng);
    let (x, nfe, trajectory) = fixed_step(scheme, x0, y, model, sde, cfg.n_steps, cfg.record_trajectory, &mut noise)?;
    Ok(finish(x, nfe, trajectory, cfg))
}

/// Euler-Maruyama on the reverse SDE: one model call per step.
pub fn euler_maruyama<M, S>(y: &ImageField, model: &M, sde: &S, cfg: &SamplerConfig) -> Result<SampleResult>
where
    M: ScoreModel + ?Sized,
    S: ForwardSde + ?Sized,
{
    run_fixed(FixedScheme::Euler, y, model, sde, cfg)
}

/// Stochastic Heun: Euler predictor, trapezoidal corrector on the drift, with
/// the same Brownian increment in both stages and `g` averaged over the step.
pub fn euler_heun<M, S>(y: &ImageField, model: &M, sde: &S, cfg: &SamplerConfig) -> Result<SampleResult>
where
    M: ScoreModel + ?Sized,
    S: ForwardSde + ?Sized,
{
    run_fixed(FixedScheme::Heun, y, model, sde, cfg)
}

// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus the embedded fourth-order ones.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const ODE_SAFETY: f64 = 0.9;
const ODE_MIN_STEP: f64 = 1e-5;
const ODE_MAX_STEP: f64 = 0.5;
const ODE_MIN_FACTOR: f64 = 0.2;
const ODE_MAX_FACTOR: f64 = 10.0;

/// Integrates the probability-flow ODE from an explicit start.
pub fn probability_flow_from<M, S>(
    x_init: ImageField,
    y: &ImageField,
    model: &M,
    sde: &S,
    cfg: &SamplerConfig,
) -> Result<SampleResult>
where
    M: ScoreModel + ?Sized,
    S: ForwardSde + ?Sized,
{
    cfg.validate()?;
    x_init.check_same_shape(y)?;
    let (t_end, t_start) = (sde.t_eps(), sde.t_max());
    let mut ev = Evaluator { model, sde, y, nfe: 0 };
    let mut trajectory = cfg.record_trajectory.then(Vec::new);

    let mut t = t_start;
    let mut x = x_init;
    let mut h = ((t_start - t_end) / 100.0).clamp(ODE_MIN_STEP, ODE_MAX_STEP);
    let mut k_first = ev.ode_velocity(&x, t)?;
    let mut step = 0usize;
    while t > t_end {
        let last = h >= t - t_end;
        let h_try = if last { t - t_end } else { h };
        // In decreasing time, x(t - h) = x(t) - h Σ b_i k_i.
        let mut k: Vec<ImageField> = Vec::with_capacity(7);
        k.push(k_first.clone());
        for i in 1..7 {
            let mut xi = x.clone();
            for (j, kj) in k.iter().enumerate() {
                if DP_A[i][j] != 0.0 {
                    xi.axpy(-h_try * DP_A[i][j], kj)?;
                }
            }
            let ti = if i >= 5 && last { t_end } else { t - DP_C[i] * h_try };
            if i == 6 {
                // the seventh stage point is the fifth-order solution
                if !xi.is_finite() {
                    return Err(Error::Divergence { step, t: ti });
                }
                let k7 = ev.ode_velocity(&xi, ti)?;
                k.push(k7);
                k.push(xi);
                break;
            }
            k.push(ev.ode_velocity(&xi, ti)?);
        }
        let x_new = k.pop().expect("solution stored last");

        // scipy-style RMS norm of the scaled error estimate
        let n = x.len() as f64;
        let mut acc = 0.0;
        for (idx, (&a, &b)) in x.as_slice().iter().zip(x_new.as_slice()).enumerate() {
            let e: f64 = h_try * k.iter().zip(DP_E).map(|(ki, w)| w * ki.as_slice()[idx]).sum::<f64>();
            let scale = cfg.atol + cfg.rtol * a.abs().max(b.abs());
            acc += (e / scale).powi(2);
        }
        let err = (acc / n).sqrt();

        if err <= 1.0 {
            t = if last { t_end } else { t - h_try };
            x = x_new;
            k_first = k.pop().expect("FSAL stage");
            step += 1;
            if let Some(tr) = trajectory.as_mut() {
                tr.push((t, x.clone()));
            }
            let factor = if err == 0.0 {
                ODE_MAX_FACTOR
            } else {
                (ODE_SAFETY * err.powf(-0.2)).clamp(ODE_MIN_FACTOR, ODE_MAX_FACTOR)
            };
            if !last {
                h = (h_try * factor).clamp(ODE_MIN_STEP, ODE_MAX_STEP);
            }
        } else {
            if h_try <= ODE_MIN_STEP {
                return Err(Error::StepUnderflow { t, h: h_try });
            }
            let factor = (ODE_SAFETY * err.powf(-0.2)).clamp(ODE_MIN_FACTOR, 1.0);
            h = (h_try * factor).max(ODE_MIN_STEP);
        }
    }
    Ok(finish(x, ev.nfe, trajectory, cfg))
}

/// Probability-flow ODE `dx/dt = f - ½ g² S` under adaptive Dormand-Prince
/// 5(4), starting from [`init_reverse`]. Every model evaluation counts toward
/// `nfe`, including those of rejected steps.
pub fn probability_flow_ode<M, S>(y: &ImageField, model: &M, sde: &S, cfg: &SamplerConfig) -> Result<SampleResult>
where
    M: ScoreModel + ?Sized,
    S: ForwardSde + ?Sized,
{
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let x0 = init_reverse(y, sde, &mut rng)?;
    probability_flow_from(x0, y, model, sde, cfg)
}

/// Dispatch on `cfg.kind`.
pub fn sample<M, S>(y: &ImageField, model: &M, sde: &S, cfg: &SamplerConfig) -> Result<SampleResult>
where
    M: ScoreModel + ?Sized,
    S: ForwardSde + ?Sized,
{
    match cfg.kind {
        SamplerKind::EulerMaruyama => euler_maruyama(y, model, sde, cfg),
        SamplerKind::EulerHeun => euler_heun(y, model, sde, cfg),
        SamplerKind::ProbabilityFlowOde => probability_flow_ode(y, model, sde, cfg),
    }
}
