//! Training loops for the texture and mask diffusion models.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmask::{bounding_sphere, sphere_channels, BoundingSphere};
use crate::diffusion::{
    background_mask_condition, forward_diffuse, region_noise_loss, DenoiserContract, LossMode,
};
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, volume_to_ncdhw, Adam, Denoiser, Ema, Tape};
use crate::rng::{normal_volume, seeded, SeededRng};
use crate::schedule::{DiffusionSchedule, ScheduleKind};
use crate::texture::{encode_conditions, extract_histogram, token_dim, HistogramCondition};
use crate::volume::{BinaryMask, MaskSet, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    None,
    /// Lesion histograms as cross-attention tokens.
    Histogram,
    /// Background-with-hole and lesion mask concatenated as input channels.
    ConcatBackgroundMask,
}

/// How a trained texture model is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Per-step splice with the forward-diffused real background.
    Inpaint,
    /// Unconstrained generation of the whole ROI.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Diffusion step count `T`.
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossMode,
    pub conditioning: Conditioning,
    pub sampler: SamplerKind,
    /// Image channels `n`: 1, or one per lesion class.
    pub channels: usize,
    pub seed: u64,
    pub base_width: usize,
    pub levels: usize,
    pub groups: usize,
    pub grad_clip: f32,
    pub ema_decay: Option<f32>,
    pub bins: usize,
    /// Histogram bins per context token.
    pub token_group: usize,
    /// Random flips along the in-plane axes.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            schedule: ScheduleKind::Cosine,
            learning_rate: 2e-3,
            batch_size: 4,
            epochs: 1,
            loss: LossMode::LesionFocused,
            conditioning: Conditioning::None,
            sampler: SamplerKind::Inpaint,
            channels: 1,
            seed: 0,
            base_width: 8,
            levels: 2,
            groups: 4,
            grad_clip: 1.0,
            ema_decay: None,
            bins: crate::texture::DEFAULT_BINS,
            token_group: crate::texture::DEFAULT_GROUP,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.channels == 0 {
            return bad("batch_size, epochs and channels must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.token_group == 0 || !self.bins.is_multiple_of(self.token_group) {
            return bad("token_group must divide bins");
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad("ema_decay must lie in [0, 1)");
            }
        }
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.schedule, self.steps)
    }

    /// Contract of a texture denoiser trained with this config.
    pub fn texture_contract(&self) -> DenoiserContract {
        DenoiserContract {
            image_channels: self.channels,
            concat_channels: match self.conditioning {
                Conditioning::ConcatBackgroundMask => 2,
                _ => 0,
            },
            time_embed_dim: self.base_width * 2,
            context_dim: match self.conditioning {
                Conditioning::Histogram => {
                    Some(token_dim(self.bins, self.token_group, self.channels))
                }
                _ => None,
            },
        }
    }

    /// Contract of a mask denoiser: one sphere channel per class.
    pub fn mask_contract(&self) -> DenoiserContract {
        DenoiserContract {
            image_channels: self.channels,
            concat_channels: self.channels,
            time_embed_dim: self.base_width * 2,
            context_dim: None,
        }
    }
}

/// A lesion ROI for texture training.
#[derive(Debug, Clone)]
pub struct TextureExample {
    /// Single-channel normalized intensities.
    pub image: Volume3D,
    pub masks: MaskSet,
}

/// A mask ROI for mask training.
#[derive(Debug, Clone)]
pub struct MaskExample {
    pub masks: MaskSet,
    pub boundary: BinaryMask,
}

/// Weights plus everything needed to sample from them.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub config: TrainConfig,
    /// Mean batch loss of every optimizer step.
    pub loss_trace: Vec<f64>,
}

/// Ground-truth histograms used as the training condition: one per class for
/// multi-channel models, otherwise one for the union of all classes.
pub fn condition_histograms(
    image: &Volume3D,
    masks: &MaskSet,
    channels: usize,
    bins: usize,
) -> Result<Vec<HistogramCondition>> {
    if channels == 1 {
        return Ok(vec![extract_histogram(
            image,
            &masks.foreground(),
            bins,
            (-1.0, 1.0),
        )?]);
    }
    if masks.n() != channels {
        return Err(Error::DimMismatch(format!(
            "{} classes for a {channels}-channel model",
            masks.n()
        )));
    }
    // An absent class borrows the union histogram so every channel has tokens.
    let union = extract_histogram(image, &masks.foreground(), bins, (-1.0, 1.0))?;
    masks
        .masks()
        .iter()
        .map(|m| {
            if m.is_empty() {
                Ok(union.clone())
            } else {
                extract_histogram(image, m, bins, (-1.0, 1.0))
            }
        })
        .collect()
}

/// Flips along `z`, `y`, `x` where the flag is set.
pub fn flip_volume(v: &Volume3D, flips: [bool; 3]) -> Volume3D {
    if flips == [false; 3] {
        return v.clone();
    }
    let [d, h, w, c] = v.dims();
    let mut out = v.clone();
    for z in 0..d {
        let sz = if flips[0] { d - 1 - z } else { z };
        for y in 0..h {
            let sy = if flips[1] { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if flips[2] { w - 1 - x } else { x };
                for ch in 0..c {
                    out.set(z, y, x, ch, v.get(sz, sy, sx, ch));
                }
            }
        }
    }
    out
}

pub fn flip_mask(m: &BinaryMask, flips: [bool; 3]) -> BinaryMask {
    let [d, h, w] = m.dims();
    BinaryMask::from_fn(m.dims(), |z, y, x| {
        m.get(
            if flips[0] { d - 1 - z } else { z },
            if flips[1] { h - 1 - y } else { y },
            if flips[2] { w - 1 - x } else { x },
        )
    })
}

fn flip_mask_set(m: &MaskSet, flips: [bool; 3]) -> Result<MaskSet> {
    MaskSet::new(
        m.masks().iter().map(|k| flip_mask(k, flips)).collect(),
        m.class_names().to_vec(),
    )
}

fn flip_sphere(s: &BoundingSphere, dims: [usize; 3], flips: [bool; 3]) -> BoundingSphere {
    let mut out = *s;
    for a in 0..3 {
        if flips[a] {
            out.center[a] = (dims[a] - 1) as f64 - s.center[a];
        }
    }
    out
}

/// One training sample ready for the network.
struct Sample {
    x_t: Volume3D,
    eps: Volume3D,
    t: usize,
    regions: Vec<BinaryMask>,
    channels: Option<Volume3D>,
    tokens: Option<Vec<f32>>,
    token_count: usize,
}

fn draw_flips(config: &TrainConfig, rng: &mut SeededRng) -> [bool; 3] {
    if config.augment {
        [false, rng.random(), rng.random()]
    } else {
        [false; 3]
    }
}

/// Shared optimisation loop. `make` builds the sample for example `i`.
fn fit(
    config: &TrainConfig,
    contract: DenoiserContract,
    count: usize,
    spatial: [usize; 3],
    mut make: impl FnMut(usize, &DiffusionSchedule, &mut SeededRng) -> Result<Sample>,
) -> Result<TrainedModel> {
    config.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    let schedule = config.build_schedule()?;
    let mut rng = seeded(config.seed);
    let mut denoiser = Denoiser::new(
        contract,
        config.base_width,
        config.levels,
        config.groups,
        &mut rng,
    )?;
    let m = denoiser.net.config().spatial_multiple();
    if spatial.iter().any(|s| s % m != 0) {
        return Err(Error::DimMismatch(format!(
            "training ROI {spatial:?} must be a multiple of {m}"
        )));
    }
    let mut adam = Adam::new(&denoiser.store, config.learning_rate);
    let mut ema = config.ema_decay.map(|d| Ema::new(&denoiser.store, d));
    let mut order: Vec<usize> = (0..count).collect();
    let mut loss_trace = Vec::new();
    let cin = contract.image_channels + contract.concat_channels;
    let n = contract.image_channels;
    let [d, h, w] = spatial;
    let voxels = d * h * w;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let samples = batch
                .iter()
                .map(|&i| make(i, &schedule, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let bn = samples.len();
            let mut input = Vec::with_capacity(bn * cin * voxels);
            let mut tokens = Vec::new();
            for s in &samples {
                volume_to_ncdhw(&s.x_t, &mut input);
                if let Some(c) = &s.channels {
                    volume_to_ncdhw(c, &mut input);
                }
                if let Some(t) = &s.tokens {
                    tokens.extend_from_slice(t);
                }
            }
            let steps: Vec<usize> = samples.iter().map(|s| s.t).collect();
            let (loss, grads) = {
                let mut tape = Tape::new(&denoiser.store);
                let x = tape.input(vec![bn, cin, d, h, w], input);
                let ctx = contract.context_dim.map(|dim| {
                    tape.input(
                        vec![bn, samples[0].token_count, dim],
                        core::mem::take(&mut tokens),
                    )
                });
                let out = denoiser.net.forward(&mut tape, x, &steps, ctx);
                let pred_all = tape.value(out);
                let mut seed = vec![0.0f32; pred_all.len()];
                let mut loss = 0.0;
                for (b, s) in samples.iter().enumerate() {
                    let chunk = &pred_all[b * n * voxels..(b + 1) * n * voxels];
                    let pred = crate::nn::ncdhw_to_volume(chunk, n, spatial, &s.eps)?;
                    let regions: Vec<&BinaryMask> = s.regions.iter().collect();
                    let lg = region_noise_loss(&pred, &s.eps, &regions)?;
                    loss += lg.loss / bn as f64;
                    let gv = Volume3D::new(pred.dims(), pred.spacing(), lg.grad)?;
                    let mut gbuf = Vec::with_capacity(n * voxels);
                    volume_to_ncdhw(&gv, &mut gbuf);
                    for (dst, g) in seed[b * n * voxels..].iter_mut().zip(gbuf) {
                        *dst = g / bn as f32;
                    }
                }
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "loss became {loss} at optimizer step {}",
                        loss_trace.len()
                    )));
                }
                let g = tape.backward(out, seed);
                (loss, g.params)
            };
            let mut grads = grads;
            if config.grad_clip > 0.0 {
                clip_global_norm(&mut grads, config.grad_clip);
            }
            adam.step(&mut denoiser.store, &grads);
            if let Some(e) = ema.as_mut() {
                e.update(&denoiser.store);
            }
            loss_trace.push(loss);
        }
    }
    if let Some(e) = &ema {
        e.copy_to(&mut denoiser.store);
    }
    Ok(TrainedModel {
        denoiser,
        schedule,
        config: config.clone(),
        loss_trace,
    })
}

fn common_spatial(dims: impl Iterator<Item = [usize; 3]>) -> Result<[usize; 3]> {
    let mut out = None;
    for d in dims {
        match out {
            None => out = Some(d),
            Some(o) if o != d => {
                return Err(Error::DimMismatch(format!(
                    "training ROIs differ in size: {o:?} vs {d:?}"
                )))
            }
            _ => {}
        }
    }
    out.ok_or_else(|| Error::InvalidArgument("no training examples".into()))
}

/// Trains a lesion texture denoiser on ROI crops.
pub fn train_texture(examples: &[TextureExample], config: &TrainConfig) -> Result<TrainedModel> {
    let spatial = common_spatial(examples.iter().map(|e| e.image.spatial()))?;
    let n = config.channels;
    for (i, e) in examples.iter().enumerate() {
        if e.image.channels() != 1 {
            return Err(Error::DimMismatch(format!(
                "example {i} image must have 1 channel"
            )));
        }
        if e.masks.dims() != spatial {
            return Err(Error::DimMismatch(format!(
                "example {i} masks differ from image"
            )));
        }
        if e.masks.is_empty() && config.loss == LossMode::LesionFocused {
            return Err(Error::EmptyMask);
        }
        if n > 1 && e.masks.n() != n {
            return Err(Error::DimMismatch(format!(
                "example {i} has {} classes, config has {n} channels",
                e.masks.n()
            )));
        }
    }
    let hists: Vec<Option<Vec<HistogramCondition>>> = examples
        .iter()
        .map(|e| match config.conditioning {
            Conditioning::Histogram => {
                condition_histograms(&e.image, &e.masks, n, config.bins).map(Some)
            }
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;
    let contract = config.texture_contract();
    let group = config.token_group;
    fit(
        config,
        contract,
        examples.len(),
        spatial,
        |i, schedule, rng| {
            let e = &examples[i];
            let flips = draw_flips(config, rng);
            let image = flip_volume(&e.image, flips);
            let masks = flip_mask_set(&e.masks, flips)?;
            let x0 = image.broadcast_channels(n)?;
            let t = rng.random_range(1..=schedule.steps());
            let eps = normal_volume(x0.dims(), rng);
            let x_t = forward_diffuse(&x0, t, &eps, schedule)?;
            let regions = match config.loss {
                LossMode::Global => vec![BinaryMask::full(spatial); n],
                LossMode::LesionFocused if n == 1 => vec![masks.foreground()],
                LossMode::LesionFocused => masks.masks().to_vec(),
            };
            let channels = match config.conditioning {
                Conditioning::ConcatBackgroundMask => {
                    Some(background_mask_condition(&image, &masks)?)
                }
                _ => None,
            };
            let (tokens, token_count) = match &hists[i] {
                Some(h) => {
                    let tok = encode_conditions(h, group)?;
                    (Some(tok.data().to_vec()), tok.count())
                }
                None => (None, 0),
            };
            Ok(Sample {
                x_t,
                eps,
                t,
                regions,
                channels,
                tokens,
                token_count,
            })
        },
    )
}

/// `+1` inside each class mask and `-1` elsewhere, one channel per class.
pub fn encode_mask_target(masks: &MaskSet) -> Result<Volume3D> {
    let chans: Vec<Volume3D> = masks.masks().iter().map(|m| m.to_signed_volume()).collect();
    Volume3D::stack(&chans)
}

/// Control spheres of a mask set; empty classes get no sphere.
pub fn control_spheres(masks: &MaskSet) -> Result<Vec<Option<BoundingSphere>>> {
    masks
        .masks()
        .iter()
        .map(|m| {
            if m.is_empty() {
                Ok(None)
            } else {
                bounding_sphere(m).map(Some)
            }
        })
        .collect()
}

/// Trains a mask denoiser whose loss is restricted to each case's boundary.
pub fn train_mask(examples: &[MaskExample], config: &TrainConfig) -> Result<TrainedModel> {
    let spatial = common_spatial(examples.iter().map(|e| e.masks.dims()))?;
    let n = config.channels;
    let mut spheres = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        if e.masks.n() != n {
            return Err(Error::DimMismatch(format!(
                "example {i} has {} classes, config has {n} channels",
                e.masks.n()
            )));
        }
        if e.boundary.dims() != spatial || e.boundary.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "example {i} needs a nonempty boundary of dims {spatial:?}"
            )));
        }
        if !e.masks.foreground().is_subset_of(&e.boundary)? {
            return Err(Error::InvalidArgument(format!(
                "example {i} has lesion voxels outside its boundary"
            )));
        }
        spheres.push(control_spheres(&e.masks)?);
    }
    let contract = config.mask_contract();
    fit(
        config,
        contract,
        examples.len(),
        spatial,
        |i, schedule, rng| {
            let e = &examples[i];
            let flips = draw_flips(config, rng);
            let masks = flip_mask_set(&e.masks, flips)?;
            let boundary = flip_mask(&e.boundary, flips);
            let sph: Vec<Option<BoundingSphere>> = spheres[i]
                .iter()
                .map(|s| s.as_ref().map(|s| flip_sphere(s, spatial, flips)))
                .collect();
            let x0 = encode_mask_target(&masks)?;
            let t = rng.random_range(1..=schedule.steps());
            let eps = normal_volume(x0.dims(), rng);
            let x_t = forward_diffuse(&x0, t, &eps, schedule)?;
            let regions = match config.loss {
                LossMode::Global => vec![BinaryMask::full(spatial); n],
                LossMode::LesionFocused => vec![boundary; n],
            };
            Ok(Sample {
                x_t,
                eps,
                t,
                regions,
                channels: Some(sphere_channels(&sph, spatial)?),
                tokens: None,
                token_count: 0,
            })
        },
    )
}

/// Mean of the first and last `window` entries of a loss trace.
pub fn loss_trend(trace: &[f64], window: usize) -> Option<(f64, f64)> {
    if window == 0 || trace.len() < 2 * window {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&trace[..window]), mean(&trace[trace.len() - window..])))
}
