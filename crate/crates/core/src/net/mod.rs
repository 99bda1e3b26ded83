//! Miniature conditional U-Net score model.
//!
//! Input is the state `x_t` and the corrupted image `y` stacked along the
//! channel axis (6 channels). The encoder has `depth` residual stages joined
//! by 2×2 average pooling; the decoder mirrors it with nearest-neighbour
//! upsampling and skip concatenation. A sinusoidal embedding of `t` passes
//! through a two-layer MLP and is added, after a per-block projection, inside
//! every residual block. The output head is zero-initialized, so an untrained
//! network predicts a zero score.
//!
//! Differentiation is a fixed-graph reverse pass over the [`Trace`] recorded
//! by [`ScoreNet::forward_trace`].

pub mod layers;
pub mod optim;
pub mod params;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ImageField;
use crate::forward::{DsmSample, TrainingPair, REGRESSION_TIME};
use crate::rng::rng_from_seed;
use crate::score::ScoreModel;

use self::layers::*;
use self::optim::{ema_update, AdamW, EMA_DECAY};
use self::params::{ParamSet, Tensor};

const MAX_EMBED_FREQ: f64 = 256.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSpec {
    pub input_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            input_channels: 6,
            base_width: 16,
            depth: 3,
            time_embed_dim: 32,
            norm_groups: 4,
        }
    }
}

impl NetSpec {
    pub fn output_channels(&self) -> usize {
        self.input_channels / 2
    }

    /// Channel width of each encoder stage.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| if i == 0 { self.base_width } else { 2 * self.base_width })
            .collect()
    }

    pub fn time_hidden(&self) -> usize {
        4 * self.base_width
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 6 {
            return Err(Error::Config(format!(
                "the score network takes x_t and y stacked (6 channels), got {}",
                self.input_channels
            )));
        }
        if self.depth == 0 || self.depth > 6 {
            return Err(Error::Config(format!("depth must be in 1..=6, got {}", self.depth)));
        }
        if self.norm_groups == 0 || !self.base_width.is_multiple_of(self.norm_groups) {
            return Err(Error::Config(format!(
                "base_width {} must be a multiple of norm_groups {}",
                self.base_width, self.norm_groups
            )));
        }
        if self.time_embed_dim < 4 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and at least 4, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlockIds {
    norm1: (usize, usize),
    conv1: (usize, usize),
    time: (usize, usize),
    norm2: (usize, usize),
    conv2: (usize, usize),
    skip: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct Layout {
    time0: (usize, usize),
    time1: (usize, usize),
    conv_in: (usize, usize),
    encoder: Vec<ResBlockIds>,
    decoder: Vec<ResBlockIds>,
    norm_out: (usize, usize),
    conv_out: (usize, usize),
}

#[derive(Debug, Clone)]
struct BlockTrace {
    x: ImageField,
    gn1: GroupNormCache,
    n1: ImageField,
    a1: ImageField,
    gn2: GroupNormCache,
    n2: ImageField,
    a2: ImageField,
}

/// Activations recorded by a forward pass, consumed by [`ScoreNet::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    input: ImageField,
    embed: Vec<f64>,
    u1: Vec<f64>,
    v1: Vec<f64>,
    u2: Vec<f64>,
    temb: Vec<f64>,
    encoder: Vec<BlockTrace>,
    decoder: Vec<BlockTrace>,
    gn_out: GroupNormCache,
    n_out: ImageField,
    a_out: ImageField,
    output_shape: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct ScoreNet {
    spec: NetSpec,
    layout: Layout,
    template: ParamSet,
}

fn pair_mut(set: &mut ParamSet, (a, b): (usize, usize)) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = set.tensors_mut().split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}

fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (MAX_EMBED_FREQ.ln() * k as f64 / (half - 1) as f64).exp();
        let arg = std::f64::consts::PI * freq * t;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

impl ScoreNet {
    pub fn new(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let mut set = ParamSet::default();
        let mut add = |name: String, shape: Vec<usize>| set.push(Tensor::zeros(name, shape));

        let e = spec.time_embed_dim;
        let th = spec.time_hidden();
        let time0 = (add("time.dense0.weight".into(), vec![th, e]), add("time.dense0.bias".into(), vec![th]));
        let time1 = (add("time.dense1.weight".into(), vec![th, th]), add("time.dense1.bias".into(), vec![th]));
        let widths = spec.widths();
        let conv_in = (
            add("conv_in.weight".into(), vec![widths[0], spec.input_channels, 3, 3]),
            add("conv_in.bias".into(), vec![widths[0]]),
        );

        let mut block = |prefix: String, cin: usize, cout: usize| ResBlockIds {
            norm1: (add(format!("{prefix}.norm1.scale"), vec![cin]), add(format!("{prefix}.norm1.shift"), vec![cin])),
            conv1: (
                add(format!("{prefix}.conv1.weight"), vec![cout, cin, 3, 3]),
                add(format!("{prefix}.conv1.bias"), vec![cout]),
            ),
            time: (
                add(format!("{prefix}.time.weight"), vec![cout, th]),
                add(format!("{prefix}.time.bias"), vec![cout]),
            ),
            norm2: (add(format!("{prefix}.norm2.scale"), vec![cout]), add(format!("{prefix}.norm2.shift"), vec![cout])),
            conv2: (
                add(format!("{prefix}.conv2.weight"), vec![cout, cout, 3, 3]),
                add(format!("{prefix}.conv2.bias"), vec![cout]),
            ),
            skip: (cin != cout).then(|| {
                (
                    add(format!("{prefix}.skip.weight"), vec![cout, cin]),
                    add(format!("{prefix}.skip.bias"), vec![cout]),
                )
            }),
        };

        let mut encoder = Vec::with_capacity(spec.depth);
        let mut cin = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            encoder.push(block(format!("enc{i}"), cin, w));
            cin = w;
        }
        let mut decoder = Vec::with_capacity(spec.depth - 1);
        for i in (0..spec.depth - 1).rev() {
            decoder.push(block(format!("dec{i}"), cin + widths[i], widths[i]));
            cin = widths[i];
        }
        let norm_out = (add("norm_out.scale".into(), vec![cin]), add("norm_out.shift".into(), vec![cin]));
        let conv_out = (
            add("conv_out.weight".into(), vec![spec.output_channels(), cin, 3, 3]),
            add("conv_out.bias".into(), vec![spec.output_channels()]),
        );

        Ok(Self {
            spec,
            layout: Layout {
                time0,
                time1,
                conv_in,
                encoder,
                decoder,
                norm_out,
                conv_out,
            },
            template: set,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    /// Zero-valued parameters with the network's layout.
    pub fn zero_params(&self) -> ParamSet {
        self.template.clone()
    }

    /// He-style fan-in initialization; normalization scales start at one,
    /// biases and the output head at zero.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = rng_from_seed(seed);
        let mut params = self.template.clone();
        let head = [self.layout.conv_out.0, self.layout.conv_out.1];
        for (id, t) in params.tensors_mut().iter_mut().enumerate() {
            if head.contains(&id) || t.name.ends_with(".bias") || t.name.ends_with(".shift") {
                continue;
            }
            if t.name.ends_with(".scale") {
                t.data.fill(1.0);
                continue;
            }
            let fan_in: usize = t.shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            t.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        params.round_to_f32();
        params
    }

    fn check_inputs(&self, x_t: &ImageField, y: &ImageField) -> Result<()> {
        x_t.check_same_shape(y)?;
        let (c, h, w) = x_t.shape();
        let m = self.spec.size_multiple();
        if 2 * c != self.spec.input_channels || h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape {
                expected: (self.spec.output_channels(), h.div_ceil(m) * m, w.div_ceil(m) * m),
                actual: x_t.shape(),
            });
        }
        Ok(())
    }

    fn check_params(&self, params: &ParamSet) -> Result<()> {
        if !params.same_layout(&self.template) {
            return Err(Error::Config("parameter set does not match the network layout".into()));
        }
        Ok(())
    }

    fn block_forward(&self, p: &ParamSet, ids: &ResBlockIds, x: &ImageField, temb: &[f64]) -> (ImageField, BlockTrace) {
        let g = self.spec.norm_groups;
        let (n1, gn1) = group_norm(x, p.data(ids.norm1.0), p.data(ids.norm1.1), g);
        let a1 = silu(&n1);
        let mut h = conv3x3(p.data(ids.conv1.0), p.data(ids.conv1.1), &a1);
        let proj = dense(p.data(ids.time.0), p.data(ids.time.1), temb);
        for (c, shift) in proj.iter().enumerate() {
            h.plane_mut(c).iter_mut().for_each(|v| *v += shift);
        }
        let (n2, gn2) = group_norm(&h, p.data(ids.norm2.0), p.data(ids.norm2.1), g);
        let a2 = silu(&n2);
        let mut out = conv3x3(p.data(ids.conv2.0), p.data(ids.conv2.1), &a2);
        let skip = match ids.skip {
            Some((w, b)) => conv1x1(p.data(w), p.data(b), x),
            None => x.clone(),
        };
        out.axpy(1.0, &skip).expect("block shapes agree");
        let trace = BlockTrace {
            x: x.clone(),
            gn1,
            n1,
            a1,
            gn2,
            n2,
            a2,
        };
        (out, trace)
    }

    /// Returns the input gradient and accumulates into `d_temb` and `grads`.
    fn block_backward(
        &self,
        p: &ParamSet,
        ids: &ResBlockIds,
        tr: &BlockTrace,
        temb: &[f64],
        dout: &ImageField,
        d_temb: &mut [f64],
        grads: &mut ParamSet,
    ) -> ImageField {
        let g = self.spec.norm_groups;
        let d_a2 = conv3x3_backward(p.data(ids.conv2.0), &tr.a2, dout, Some(pair_mut(grads, ids.conv2)));
        let d_n2 = silu_backward(&tr.n2, &d_a2);
        let d_h = group_norm_backward(&tr.gn2, p.data(ids.norm2.0), &d_n2, g, Some(pair_mut(grads, ids.norm2)));
        let d_proj: Vec<f64> = (0..d_h.channels()).map(|c| d_h.plane(c).iter().sum()).collect();
        let dt = dense_backward(p.data(ids.time.0), temb, &d_proj, Some(pair_mut(grads, ids.time)));
        d_temb.iter_mut().zip(&dt).for_each(|(a, b)| *a += b);
        let d_a1 = conv3x3_backward(p.data(ids.conv1.0), &tr.a1, &d_h, Some(pair_mut(grads, ids.conv1)));
        let d_n1 = silu_backward(&tr.n1, &d_a1);
        let mut dx = group_norm_backward(&tr.gn1, p.data(ids.norm1.0), &d_n1, g, Some(pair_mut(grads, ids.norm1)));
        match ids.skip {
            Some((w, b)) => {
                let ds = conv1x1_backward(p.data(w), &tr.x, dout, Some(pair_mut(grads, (w, b))));
                dx.axpy(1.0, &ds).expect("block shapes agree");
            }
            None => dx.axpy(1.0, dout).expect("block shapes agree"),
        }
        dx
    }

    /// Forward pass recording every activation needed for [`Self::backward`].
    pub fn forward_trace(&self, params: &ParamSet, x_t: &ImageField, y: &ImageField, t: f64) -> Result<(ImageField, Trace)> {
        self.check_params(params)?;
        self.check_inputs(x_t, y)?;
        let p = params;
        let l = &self.layout;
        let input = x_t.concat_channels(y)?;

        let embed = sinusoidal_embedding(t, self.spec.time_embed_dim);
        let u1 = dense(p.data(l.time0.0), p.data(l.time0.1), &embed);
        let v1 = silu_slice(&u1);
        let u2 = dense(p.data(l.time1.0), p.data(l.time1.1), &v1);
        let temb = silu_slice(&u2);

        let mut h = conv3x3(p.data(l.conv_in.0), p.data(l.conv_in.1), &input);
        let mut encoder = Vec::with_capacity(self.spec.depth);
        let mut skips = Vec::with_capacity(self.spec.depth);
        for (i, ids) in l.encoder.iter().enumerate() {
            let (out, tr) = self.block_forward(p, ids, &h, &temb);
            encoder.push(tr);
            h = if i + 1 < self.spec.depth { avg_pool2(&out) } else { out.clone() };
            skips.push(out);
        }
        let mut decoder = Vec::with_capacity(self.spec.depth - 1);
        for (ids, i) in l.decoder.iter().zip((0..self.spec.depth - 1).rev()) {
            let joined = upsample2(&h).concat_channels(&skips[i])?;
            let (out, tr) = self.block_forward(p, ids, &joined, &temb);
            decoder.push(tr);
            h = out;
        }
        let (n_out, gn_out) = group_norm(&h, p.data(l.norm_out.0), p.data(l.norm_out.1), self.spec.norm_groups);
        let a_out = silu(&n_out);
        let out = conv3x3(p.data(l.conv_out.0), p.data(l.conv_out.1), &a_out);
        let output_shape = out.shape();
        Ok((
            out,
            Trace {
                input,
                embed,
                u1,
                v1,
                u2,
                temb,
                encoder,
                decoder,
                gn_out,
                n_out,
                a_out,
                output_shape,
            },
        ))
    }

    pub fn forward(&self, params: &ParamSet, x_t: &ImageField, y: &ImageField, t: f64) -> Result<ImageField> {
        Ok(self.forward_trace(params, x_t, y, t)?.0)
    }

    /// Accumulate `∂L/∂θ` into `grads` given `upstream = ∂L/∂output`.
    /// Tensors marked non-trainable in `grads` come back exactly zero.
    pub fn backward(&self, params: &ParamSet, trace: &Trace, upstream: &ImageField, grads: &mut ParamSet) -> Result<()> {
        self.check_params(params)?;
        self.check_params(grads)?;
        if upstream.shape() != trace.output_shape {
            return Err(Error::Shape {
                expected: trace.output_shape,
                actual: upstream.shape(),
            });
        }
        let p = params;
        let l = &self.layout;
        let g = self.spec.norm_groups;
        let mut d_temb = vec![0.0; trace.temb.len()];

        let d_a = conv3x3_backward(p.data(l.conv_out.0), &trace.a_out, upstream, Some(pair_mut(grads, l.conv_out)));
        let d_n = silu_backward(&trace.n_out, &d_a);
        let mut dh = group_norm_backward(&trace.gn_out, p.data(l.norm_out.0), &d_n, g, Some(pair_mut(grads, l.norm_out)));

        let depth = self.spec.depth;
        let mut d_skips: Vec<Option<ImageField>> = vec![None; depth];
        for ((ids, tr), i) in l.decoder.iter().zip(&trace.decoder).zip((0..depth - 1).rev()).rev() {
            let d_joined = self.block_backward(p, ids, tr, &trace.temb, &dh, &mut d_temb, grads);
            let skip_width = self.spec.widths()[i];
            let up_width = d_joined.channels() - skip_width;
            d_skips[i] = Some(d_joined.channel_slice(up_width, skip_width));
            dh = upsample2_backward(&d_joined.channel_slice(0, up_width));
        }
        for (i, (ids, tr)) in l.encoder.iter().zip(&trace.encoder).enumerate().rev() {
            // gradient w.r.t. this block's output: from the pooled path plus its skip
            let mut d_out = if i + 1 < depth { avg_pool2_backward(&dh) } else { dh.clone() };
            if let Some(ds) = d_skips[i].take() {
                d_out.axpy(1.0, &ds)?;
            }
            dh = self.block_backward(p, ids, tr, &trace.temb, &d_out, &mut d_temb, grads);
        }
        conv3x3_backward(p.data(l.conv_in.0), &trace.input, &dh, Some(pair_mut(grads, l.conv_in)));

        let d_u2 = silu_backward_slice(&trace.u2, &d_temb);
        let d_v1 = dense_backward(p.data(l.time1.0), &trace.v1, &d_u2, Some(pair_mut(grads, l.time1)));
        let d_u1 = silu_backward_slice(&trace.u1, &d_v1);
        dense_backward(p.data(l.time0.0), &trace.embed, &d_u1, Some(pair_mut(grads, l.time0)));

        for t in grads.tensors_mut() {
            if !t.trainable {
                t.data.fill(0.0);
            }
        }
        Ok(())
    }

    /// Scaled score-matching loss over pre-drawn samples and its parameter gradient.
    pub fn dsm_loss_and_grad(&self, params: &ParamSet, samples: &[DsmSample]) -> Result<(f64, ParamSet)> {
        if samples.is_empty() {
            return Err(Error::Empty("score-matching batch".into()));
        }
        let count: usize = samples.iter().map(|s| s.z.len()).sum();
        let norm = 1.0 / count as f64;
        let mut grads = params.zeros_like();
        let mut loss = 0.0;
        for s in samples {
            let (out, trace) = self.forward_trace(params, &s.x_t, &s.y, s.t)?;
            let resid = out.zip_map(&s.z, |a, z| a + z)?;
            loss += resid.sum_sq() * norm;
            let upstream = resid.map(|r| 2.0 * r * norm);
            self.backward(params, &trace, &upstream, &mut grads)?;
        }
        Ok((loss, grads))
    }

    /// L2 regression loss (`(y, y)` input at `t = 1`) and its gradient.
    pub fn regression_loss_and_grad(&self, params: &ParamSet, batch: &[TrainingPair]) -> Result<(f64, ParamSet)> {
        if batch.is_empty() {
            return Err(Error::Empty("regression batch".into()));
        }
        let count: usize = batch.iter().map(|p| p.x0.len()).sum();
        let norm = 1.0 / count as f64;
        let mut grads = params.zeros_like();
        let mut loss = 0.0;
        for pair in batch {
            let (out, trace) = self.forward_trace(params, &pair.y, &pair.y, REGRESSION_TIME)?;
            let resid = out.zip_map(&pair.x0, |a, b| a - b)?;
            loss += resid.sum_sq() * norm;
            let upstream = resid.map(|r| 2.0 * r * norm);
            self.backward(params, &trace, &upstream, &mut grads)?;
        }
        Ok((loss, grads))
    }
}

/// A network bound to one parameter set, usable wherever a [`ScoreModel`] is.
#[derive(Debug, Clone, Copy)]
pub struct NetModel<'a> {
    pub net: &'a ScoreNet,
    pub params: &'a ParamSet,
}

impl ScoreModel for NetModel<'_> {
    fn scaled_score(&self, x_t: &ImageField, y: &ImageField, t: f64) -> Result<ImageField> {
        self.net.forward(self.params, x_t, y, t)
    }
}

/// Live weights, their exponential moving average and the optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModelParams {
    pub weights: ParamSet,
    pub ema_shadow: ParamSet,
    pub step_count: u64,
    optimizer: AdamW,
}

impl ScoreModelParams {
    /// Fresh parameters; the shadow starts equal to the weights.
    pub fn new(weights: ParamSet) -> Self {
        Self {
            ema_shadow: weights.clone(),
            optimizer: AdamW::new(&weights),
            weights,
            step_count: 0,
        }
    }

    pub fn from_parts(weights: ParamSet, ema_shadow: ParamSet, step_count: u64) -> Result<Self> {
        if !weights.same_layout(&ema_shadow) {
            return Err(Error::Config("EMA shadow layout differs from the weights".into()));
        }
        Ok(Self {
            optimizer: AdamW::new(&weights),
            weights,
            ema_shadow,
            step_count,
        })
    }

    pub fn adamw_step(&mut self, grads: &ParamSet, lr: f64, weight_decay: f64) -> Result<()> {
        self.optimizer.step(&mut self.weights, grads, lr, weight_decay)?;
        self.step_count += 1;
        Ok(())
    }

    pub fn ema_update(&mut self) {
        self.ema_update_with(EMA_DECAY);
    }

    pub fn ema_update_with(&mut self, decay: f64) {
        ema_update(&mut self.ema_shadow, &self.weights, decay);
    }

    /// The model used for evaluation: always the EMA weights.
    pub fn eval_model<'a>(&'a self, net: &'a ScoreNet) -> NetModel<'a> {
        NetModel {
            net,
            params: &self.ema_shadow,
        }
    }

    pub fn live_model<'a>(&'a self, net: &'a ScoreNet) -> NetModel<'a> {
        NetModel {
            net,
            params: &self.weights,
        }
    }
}
