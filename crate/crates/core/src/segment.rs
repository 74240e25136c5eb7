//! Compact 3D U-Net segmenter used for the downstream protocol.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, volume_to_ncdhw, Adam, ParamStore, Tape, UNet, UNetConfig};
use crate::rng::seeded;
use crate::train::{flip_mask, flip_volume};
use crate::volume::{BinaryMask, MaskSet, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub base_width: usize,
    pub levels: usize,
    pub groups: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Weight of the soft Dice term added to cross-entropy.
    pub dice_weight: f32,
    pub augment: bool,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            base_width: 8,
            levels: 2,
            groups: 4,
            epochs: 40,
            batch_size: 4,
            learning_rate: 3e-3,
            dice_weight: 1.0,
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegExample {
    pub image: Volume3D,
    pub masks: MaskSet,
}

#[derive(Debug, Clone)]
pub struct Segmenter {
    pub net: UNet,
    pub store: ParamStore,
    pub config: SegmenterConfig,
    pub class_names: Vec<String>,
    pub loss_trace: Vec<f64>,
}

/// Label map: 0 for background, `i + 1` for class `i`.
fn labels(masks: &MaskSet) -> Vec<usize> {
    let mut out = vec![0usize; masks.dims().iter().product()];
    for (i, m) in masks.masks().iter().enumerate() {
        for (v, _) in m.data().iter().enumerate().filter(|(_, &b)| b) {
            out[v] = i + 1;
        }
    }
    out
}

fn softmax_at(logits: &[f32], k: usize, s: usize, v: usize, probs: &mut [f32]) {
    let mut top = f32::NEG_INFINITY;
    for c in 0..k {
        top = top.max(logits[c * s + v]);
    }
    let mut z = 0.0;
    for c in 0..k {
        probs[c] = libm::expf(logits[c * s + v] - top);
        z += probs[c];
    }
    probs.iter_mut().for_each(|p| *p /= z);
}

/// Cross-entropy plus soft Dice over foreground classes for one sample.
///
/// `logits` is `[K, S]`; returns the loss and its gradient.
pub fn segmentation_loss(
    logits: &[f32],
    label: &[usize],
    k: usize,
    dice_weight: f32,
) -> (f64, Vec<f32>) {
    let s = label.len();
    let mut probs = vec![0.0f32; k * s];
    let mut p = vec![0.0f32; k];
    let mut ce = 0.0f64;
    for v in 0..s {
        softmax_at(logits, k, s, v, &mut p);
        for c in 0..k {
            probs[c * s + v] = p[c];
        }
        ce -= libm::log(p[label[v]].max(1e-12) as f64);
    }
    ce /= s as f64;
    // dL/dp for the Dice term, then chain through the softmax together with CE.
    let mut dp = vec![0.0f32; k * s];
    let mut dice_loss = 0.0f64;
    let fg = k - 1;
    if dice_weight > 0.0 && fg > 0 {
        for c in 1..k {
            let (mut inter, mut psum, mut gsum) = (0.0f64, 0.0f64, 0.0f64);
            for v in 0..s {
                let g = (label[v] == c) as u8 as f64;
                let pv = probs[c * s + v] as f64;
                inter += pv * g;
                psum += pv;
                gsum += g;
            }
            let den = psum + gsum + 1.0;
            let num = 2.0 * inter + 1.0;
            dice_loss += (1.0 - num / den) / fg as f64;
            for v in 0..s {
                let g = (label[v] == c) as u8 as f64;
                let d = -(2.0 * g * den - num) / (den * den) / fg as f64;
                dp[c * s + v] = (d * dice_weight as f64) as f32;
            }
        }
    }
    let mut grad = vec![0.0f32; k * s];
    for v in 0..s {
        let dot: f32 = (0..k).map(|c| probs[c * s + v] * dp[c * s + v]).sum();
        for c in 0..k {
            let pc = probs[c * s + v];
            let onehot = (label[v] == c) as u8 as f32;
            grad[c * s + v] = (pc - onehot) / s as f32 + pc * (dp[c * s + v] - dot);
        }
    }
    (ce + dice_weight as f64 * dice_loss, grad)
}

impl Segmenter {
    fn build(config: &SegmenterConfig, classes: usize) -> Result<(UNet, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = seeded(config.seed);
        let net = UNet::new(
            UNetConfig {
                in_channels: 1,
                out_channels: classes + 1,
                base_width: config.base_width,
                levels: config.levels,
                time_embedding: false,
                context_dim: None,
                attn_dim: 8,
                groups: config.groups,
                zero_init_output: false,
            },
            &mut store,
            &mut rng,
        )?;
        Ok((net, store))
    }

    /// Re-creates an untrained segmenter with the same layout, e.g. to load weights.
    pub fn untrained(config: &SegmenterConfig, class_names: Vec<String>) -> Result<Self> {
        let (net, store) = Self::build(config, class_names.len())?;
        Ok(Self {
            net,
            store,
            config: config.clone(),
            class_names,
            loss_trace: Vec::new(),
        })
    }

    pub fn train(examples: &[SegExample], config: &SegmenterConfig) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::InvalidArgument("no segmentation examples".into()))?;
        let spatial = first.image.spatial();
        let names = first.masks.class_names().to_vec();
        for (i, e) in examples.iter().enumerate() {
            if e.image.channels() != 1 || e.image.spatial() != spatial || e.masks.dims() != spatial
            {
                return Err(Error::DimMismatch(format!(
                    "example {i} does not match {spatial:?} single-channel input"
                )));
            }
            if e.masks.n() != names.len() {
                return Err(Error::DimMismatch(format!(
                    "example {i} has {} classes, expected {}",
                    e.masks.n(),
                    names.len()
                )));
            }
        }
        if config.batch_size == 0 || config.epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and epochs must be positive".into(),
            ));
        }
        let mut seg = Self::untrained(config, names)?;
        let m = seg.net.config().spatial_multiple();
        if spatial.iter().any(|s| s % m != 0) {
            return Err(Error::DimMismatch(format!(
                "dims {spatial:?} must be multiples of {m}"
            )));
        }
        let k = seg.class_names.len() + 1;
        let [d, h, w] = spatial;
        let s = d * h * w;
        let mut rng = seeded(crate::rng::derive_seed(config.seed, 1));
        let mut adam = Adam::new(&seg.store, config.learning_rate);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size) {
                let bn = batch.len();
                let mut input = Vec::with_capacity(bn * s);
                let mut labs = Vec::with_capacity(bn);
                for &i in batch {
                    let e = &examples[i];
                    let flips = if config.augment {
                        [
                            false,
                            rand::Rng::random(&mut rng),
                            rand::Rng::random(&mut rng),
                        ]
                    } else {
                        [false; 3]
                    };
                    volume_to_ncdhw(&flip_volume(&e.image, flips), &mut input);
                    let masks = MaskSet::new(
                        e.masks
                            .masks()
                            .iter()
                            .map(|m| flip_mask(m, flips))
                            .collect(),
                        e.masks.class_names().to_vec(),
                    )?;
                    labs.push(labels(&masks));
                }
                let (loss, mut grads) = {
                    let mut tape = Tape::new(&seg.store);
                    let x = tape.input(vec![bn, 1, d, h, w], input);
                    let out = seg.net.forward(&mut tape, x, &[], None);
                    let logits = tape.value(out);
                    let mut seed = vec![0.0f32; logits.len()];
                    let mut loss = 0.0;
                    for (b, lab) in labs.iter().enumerate() {
                        let (l, g) = segmentation_loss(
                            &logits[b * k * s..(b + 1) * k * s],
                            lab,
                            k,
                            config.dice_weight,
                        );
                        loss += l / bn as f64;
                        for (dst, gv) in seed[b * k * s..(b + 1) * k * s].iter_mut().zip(g) {
                            *dst = gv / bn as f32;
                        }
                    }
                    if !loss.is_finite() {
                        return Err(Error::Diverged(format!("segmenter loss became {loss}")));
                    }
                    (loss, tape.backward(out, seed).params)
                };
                clip_global_norm(&mut grads, 1.0);
                adam.step(&mut seg.store, &grads);
                seg.loss_trace.push(loss);
            }
        }
        Ok(seg)
    }

    /// Arg-max label prediction as one mask per class.
    pub fn predict(&self, image: &Volume3D) -> Result<MaskSet> {
        if image.channels() != 1 {
            return Err(Error::DimMismatch(
                "segmenter input must have 1 channel".into(),
            ));
        }
        let spatial = image.spatial();
        let m = self.net.config().spatial_multiple();
        if spatial.iter().any(|s| s % m != 0) {
            return Err(Error::DimMismatch(format!(
                "dims {spatial:?} must be multiples of {m}"
            )));
        }
        let k = self.class_names.len() + 1;
        let s: usize = spatial.iter().product();
        let mut input = Vec::with_capacity(s);
        volume_to_ncdhw(image, &mut input);
        let mut tape = Tape::new(&self.store);
        let x = tape.input(vec![1, 1, spatial[0], spatial[1], spatial[2]], input);
        let out = self.net.forward(&mut tape, x, &[], None);
        let logits = tape.value(out);
        let mut masks = vec![BinaryMask::empty(spatial); k - 1];
        for v in 0..s {
            let mut best = 0;
            for c in 1..k {
                if logits[c * s + v] > logits[best * s + v] {
                    best = c;
                }
            }
            if best > 0 {
                masks[best - 1].data_mut()[v] = true;
            }
        }
        MaskSet::new(masks, self.class_names.clone())
    }
}
