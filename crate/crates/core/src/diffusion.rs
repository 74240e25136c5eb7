//! Forward diffusion, the masked noise-prediction objective, reverse steps and
//! the background-preserving inpainting sampler.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::normal_volume;
use crate::schedule::DiffusionSchedule;
use crate::texture::{compose_channels, ContextTokens};
use crate::volume::{BinaryMask, MaskSet, Volume3D};

/// Input/output shape contract of a noise predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserContract {
    /// Image channels `n`; the output has the same count.
    pub image_channels: usize,
    /// Extra channels concatenated to the input (masks, spheres, background).
    pub concat_channels: usize,
    pub time_embed_dim: usize,
    /// Token width for cross-attention conditioning, if any.
    pub context_dim: Option<usize>,
}

/// Conditioning passed alongside `x_t`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Condition {
    pub tokens: Option<ContextTokens>,
    pub channels: Option<Volume3D>,
}

impl Condition {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn tokens(tokens: ContextTokens) -> Self {
        Self {
            tokens: Some(tokens),
            channels: None,
        }
    }

    pub fn channels(channels: Volume3D) -> Self {
        Self {
            tokens: None,
            channels: Some(channels),
        }
    }
}

/// A model predicting the noise component of `x_t`.
pub trait NoisePredictor {
    fn contract(&self) -> DenoiserContract;

    /// Predicted noise with `contract().image_channels` channels.
    fn predict_noise(&self, x_t: &Volume3D, t: usize, condition: &Condition) -> Result<Volume3D>;
}

/// Validates `x_t` and `condition` against `contract`.
pub fn check_contract(
    contract: &DenoiserContract,
    x_t: &Volume3D,
    condition: &Condition,
) -> Result<()> {
    if x_t.channels() != contract.image_channels {
        return Err(Error::Contract(format!(
            "input has {} channels, model expects {}",
            x_t.channels(),
            contract.image_channels
        )));
    }
    match (&condition.channels, contract.concat_channels) {
        (None, 0) => {}
        (Some(c), n) if n > 0 => {
            if c.channels() != n {
                return Err(Error::Contract(format!(
                    "condition has {} channels, model expects {n}",
                    c.channels()
                )));
            }
            c.same_spatial(x_t.spatial())?;
        }
        (None, n) => {
            return Err(Error::Contract(format!(
                "model expects {n} condition channels, none given"
            )))
        }
        (Some(_), _) => {
            return Err(Error::Contract(
                "condition channels given to a model without concat inputs".into(),
            ))
        }
    }
    match (&condition.tokens, contract.context_dim) {
        (None, None) => Ok(()),
        (Some(tok), Some(dim)) if tok.dim() == dim => Ok(()),
        (Some(tok), Some(dim)) => Err(Error::Contract(format!(
            "context tokens have width {}, model expects {dim}",
            tok.dim()
        ))),
        (None, Some(_)) => Err(Error::Contract(
            "histogram-conditioned model called without a histogram".into(),
        )),
        (Some(_), None) => Err(Error::Contract(
            "histogram given to an unconditioned model".into(),
        )),
    }
}

/// Validating wrapper around [`NoisePredictor::predict_noise`].
pub fn predict_noise<P: NoisePredictor + ?Sized>(
    model: &P,
    x_t: &Volume3D,
    t: usize,
    condition: &Condition,
) -> Result<Volume3D> {
    check_contract(&model.contract(), x_t, condition)?;
    let out = model.predict_noise(x_t, t, condition)?;
    if out.dims() != x_t.dims() {
        return Err(Error::Contract(format!(
            "prediction dims {:?} differ from input {:?}",
            out.dims(),
            x_t.dims()
        )));
    }
    Ok(out)
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`; returns `x0` unchanged at `t = 0`.
pub fn forward_diffuse(
    x0: &Volume3D,
    t: usize,
    eps: &Volume3D,
    schedule: &DiffusionSchedule,
) -> Result<Volume3D> {
    x0.same_dims(eps)?;
    if t > schedule.steps() {
        return Err(Error::StepOutOfRange {
            t,
            lo: 0,
            hi: schedule.steps(),
        });
    }
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab) as f32, libm::sqrt(1.0 - ab) as f32);
    let mut out = x0.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = a * *o + b * e;
    }
    Ok(out)
}

/// Which voxels the noise-prediction objective sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Only voxels inside the lesion masks.
    LesionFocused,
    /// Every voxel, as in unmasked DDPM training.
    Global,
}

/// Loss value and its gradient with respect to the prediction.
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Vec<f32>,
}

/// Squared-error noise loss, channel `c` restricted to `regions[c]`.
///
/// Each channel contributes the mean over its region, so the value does not
/// scale with lesion size; channels are summed. Empty regions contribute 0.
pub fn region_noise_loss(
    pred: &Volume3D,
    eps: &Volume3D,
    regions: &[&BinaryMask],
) -> Result<LossAndGrad> {
    pred.same_dims(eps)?;
    let nc = pred.channels();
    if regions.len() != nc {
        return Err(Error::DimMismatch(format!(
            "{} regions for {nc} channels",
            regions.len()
        )));
    }
    for r in regions {
        if r.dims() != pred.spatial() {
            return Err(Error::DimMismatch(format!(
                "region {:?} vs volume {:?}",
                r.dims(),
                pred.spatial()
            )));
        }
    }
    let mut grad = vec![0.0f32; pred.data().len()];
    let mut loss = 0.0f64;
    for (c, region) in regions.iter().enumerate() {
        let count = region.count();
        if count == 0 {
            continue;
        }
        let inv = 1.0 / count as f64;
        let mut acc = 0.0f64;
        for (v, _) in region.data().iter().enumerate().filter(|(_, &m)| m) {
            let i = v * nc + c;
            let r = (pred.data()[i] - eps.data()[i]) as f64;
            acc += r * r;
            grad[i] = (2.0 * r * inv) as f32;
        }
        loss += acc * inv;
    }
    Ok(LossAndGrad { loss, grad })
}

/// Lesion-focused objective: `sum_i mean_{M_f^(i)} (eps - pred)^2`.
///
/// With `channel_masks` channel `i` uses class mask `i`; otherwise every
/// channel uses the union of all classes.
pub fn lesion_focused_loss(
    pred: &Volume3D,
    eps: &Volume3D,
    masks: &MaskSet,
    channel_masks: bool,
) -> Result<f64> {
    lesion_focused_loss_and_grad(pred, eps, masks, channel_masks).map(|l| l.loss)
}

pub fn lesion_focused_loss_and_grad(
    pred: &Volume3D,
    eps: &Volume3D,
    masks: &MaskSet,
    channel_masks: bool,
) -> Result<LossAndGrad> {
    let nc = pred.channels();
    if channel_masks {
        if masks.n() != nc {
            return Err(Error::DimMismatch(format!(
                "{} masks for {nc} channels",
                masks.n()
            )));
        }
        let regions: Vec<&BinaryMask> = masks.masks().iter().collect();
        region_noise_loss(pred, eps, &regions)
    } else {
        let fg = masks.foreground();
        let regions = vec![&fg; nc];
        region_noise_loss(pred, eps, &regions)
    }
}

/// Unmasked objective over every voxel.
pub fn global_loss_and_grad(pred: &Volume3D, eps: &Volume3D) -> Result<LossAndGrad> {
    let full = BinaryMask::full(pred.spatial());
    let regions = vec![&full; pred.channels()];
    region_noise_loss(pred, eps, &regions)
}

/// Posterior mean of `x_{t-1}` given `x_t` and predicted noise. The implied
/// `x_0` estimate is clipped to `[-1, 1]`.
pub fn posterior_mean(
    x_t: &Volume3D,
    eps_hat: &Volume3D,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<Volume3D> {
    schedule.check_step(t)?;
    x_t.same_dims(eps_hat)?;
    let ab = schedule.alpha_bar(t);
    let (sa, sb) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    let (c0, ct) = schedule.posterior_mean_coefs(t);
    let mut out = x_t.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps_hat.data()) {
        let xt = *o as f64;
        let x0 = ((xt - sb * e as f64) / sa).clamp(-1.0, 1.0);
        *o = (c0 * x0 + ct * xt) as f32;
    }
    Ok(out)
}

/// One ancestral step `x_t -> o_{t-1}`; no noise is added at `t = 1`.
pub fn reverse_step<P: NoisePredictor + ?Sized>(
    model: &P,
    x_t: &Volume3D,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut impl rand::Rng,
    condition: &Condition,
) -> Result<Volume3D> {
    schedule.check_step(t)?;
    let eps_hat = predict_noise(model, x_t, t, condition)?;
    let mut out = posterior_mean(x_t, &eps_hat, t, schedule)?;
    if t > 1 {
        let sigma = libm::sqrt(schedule.posterior_variance(t)) as f32;
        let z = normal_volume(out.dims(), rng);
        for (o, &zv) in out.data_mut().iter_mut().zip(z.data()) {
            *o += sigma * zv;
        }
    }
    if !out.is_finite() {
        return Err(Error::Diverged(format!("non-finite sample at step {t}")));
    }
    Ok(out)
}

/// Splices the generated foreground with the forward-diffused known background:
/// `x_{t-1} = o_{t-1} * M_f + q(x0_hat, t-1) * M_b`.
///
/// `x0_hat` is either single-channel (shared by every channel) or has the same
/// channel count as `o_prev`; `eps_b` matches `o_prev`.
pub fn inpaint_step(
    o_prev: &Volume3D,
    x0_hat: &Volume3D,
    t: usize,
    eps_b: &Volume3D,
    masks: &MaskSet,
    schedule: &DiffusionSchedule,
) -> Result<Volume3D> {
    schedule.check_step(t)?;
    o_prev.same_dims(eps_b)?;
    x0_hat.same_spatial(o_prev.spatial())?;
    if masks.dims() != o_prev.spatial() {
        return Err(Error::DimMismatch(format!(
            "masks {:?} vs volume {:?}",
            masks.dims(),
            o_prev.spatial()
        )));
    }
    let nc = o_prev.channels();
    let x0 = match x0_hat.channels() {
        c if c == nc => x0_hat.clone(),
        1 => x0_hat.broadcast_channels(nc)?,
        c => {
            return Err(Error::DimMismatch(format!(
                "background has {c} channels, sample has {nc}"
            )))
        }
    };
    let background = forward_diffuse(&x0, t - 1, eps_b, schedule)?;
    let fg = masks.foreground();
    let mut out = background;
    for (v, _) in fg.data().iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..nc {
            *out.at_mut(v, c) = o_prev.at(v, c);
        }
    }
    Ok(out)
}

/// Options for the inpainting sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SamplerOptions {
    /// Extra resample passes per step (re-noise `x_{t-1}` back to `x_t`).
    pub resample_jumps: usize,
}

/// Full `T -> 0` inpainting loop. Background voxels of the result are copied
/// from `x0_hat`; foreground voxels are clamped to `[-1, 1]`.
pub fn sample_inpaint<P: NoisePredictor + ?Sized>(
    model: &P,
    x0_hat: &Volume3D,
    masks: &MaskSet,
    condition: &Condition,
    schedule: &DiffusionSchedule,
    rng: &mut impl rand::Rng,
    options: SamplerOptions,
) -> Result<Volume3D> {
    if x0_hat.channels() != 1 {
        return Err(Error::DimMismatch(format!(
            "inpainting input must have 1 channel, got {}",
            x0_hat.channels()
        )));
    }
    let n = model.contract().image_channels;
    if n > 1 && masks.n() != n {
        return Err(Error::DimMismatch(format!(
            "{n}-channel model needs {n} lesion classes, got {}",
            masks.n()
        )));
    }
    if masks.dims() != x0_hat.spatial() {
        return Err(Error::DimMismatch(format!(
            "masks {:?} vs volume {:?}",
            masks.dims(),
            x0_hat.spatial()
        )));
    }
    let fg = masks.foreground();
    if fg.is_empty() {
        return Ok(x0_hat.clone());
    }
    let steps = schedule.steps();
    let x0n = x0_hat.broadcast_channels(n)?;
    let mut x = {
        let noise = normal_volume(x0n.dims(), rng);
        let eps_b = normal_volume(x0n.dims(), rng);
        let mut x = forward_diffuse(&x0n, steps, &eps_b, schedule)?;
        for (v, _) in fg.data().iter().enumerate().filter(|(_, &m)| m) {
            for c in 0..n {
                *x.at_mut(v, c) = noise.at(v, c);
            }
        }
        x
    };
    for t in (1..=steps).rev() {
        let mut pass = 0;
        loop {
            let o = reverse_step(model, &x, t, schedule, rng, condition)?;
            let composed = if n > 1 {
                compose_channels(&o, masks)?.broadcast_channels(n)?
            } else {
                o
            };
            let eps_b = normal_volume(composed.dims(), rng);
            let next = inpaint_step(&composed, x0_hat, t, &eps_b, masks, schedule)?;
            if pass < options.resample_jumps && t > 1 {
                x = renoise_one_step(&next, t, schedule, rng);
                pass += 1;
                continue;
            }
            x = next;
            break;
        }
    }
    let mut out = x.channel(0)?;
    for (v, _) in fg.data().iter().enumerate().filter(|(_, &m)| m) {
        let val = out.at_mut(v, 0);
        *val = val.clamp(-1.0, 1.0);
    }
    out.set_intensity_range(x0_hat.intensity_range());
    Ok(out)
}

/// `q(x_t | x_{t-1})`: `sqrt(alpha_t) x + sqrt(beta_t) z`.
fn renoise_one_step(
    x: &Volume3D,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut impl rand::Rng,
) -> Volume3D {
    let (a, b) = (
        libm::sqrt(schedule.alpha(t)) as f32,
        libm::sqrt(schedule.beta(t)) as f32,
    );
    let z = normal_volume(x.dims(), rng);
    let mut out = x.clone();
    for (o, &zv) in out.data_mut().iter_mut().zip(z.data()) {
        *o = a * *o + b * zv;
    }
    out
}

/// Concatenated conditioning for image-space conditional diffusion: the
/// background with the lesion removed (zeros under `M_f`) and the `{0,1}`
/// lesion mask.
pub fn background_mask_condition(x0_hat: &Volume3D, masks: &MaskSet) -> Result<Volume3D> {
    let fg = masks.foreground();
    x0_hat.same_spatial(fg.dims())?;
    let mut bg = x0_hat.channel(0)?;
    for (v, _) in fg.data().iter().enumerate().filter(|(_, &m)| m) {
        *bg.at_mut(v, 0) = 0.0;
    }
    Volume3D::stack(&[bg, fg.to_volume()])
}

/// Unconstrained ancestral sampling of the whole volume from pure noise.
/// Nothing ties the output background to the input.
pub fn sample_plain<P: NoisePredictor + ?Sized>(
    model: &P,
    spatial: [usize; 3],
    condition: &Condition,
    schedule: &DiffusionSchedule,
    rng: &mut impl rand::Rng,
) -> Result<Volume3D> {
    let n = model.contract().image_channels;
    let [d, h, w] = spatial;
    let mut x = normal_volume([d, h, w, n], rng);
    for t in (1..=schedule.steps()).rev() {
        x = reverse_step(model, &x, t, schedule, rng, condition)?;
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::schedule::ScheduleKind;

    struct ZeroModel {
        channels: usize,
    }

    impl NoisePredictor for ZeroModel {
        fn contract(&self) -> DenoiserContract {
            DenoiserContract {
                image_channels: self.channels,
                concat_channels: 0,
                time_embed_dim: 0,
                context_dim: None,
            }
        }
        fn predict_noise(&self, x_t: &Volume3D, _t: usize, _c: &Condition) -> Result<Volume3D> {
            Ok(x_t.zeros_like(x_t.channels()))
        }
    }

    fn vol(vals: &[f32]) -> Volume3D {
        Volume3D::new([1, 1, vals.len(), 1], [1.0; 3], vals.to_vec()).unwrap()
    }

    fn mask(bits: &[bool]) -> MaskSet {
        MaskSet::single(BinaryMask::new([1, 1, bits.len()], bits.to_vec()).unwrap())
    }

    #[test]
    fn forward_zero_noise_and_zero_signal() {
        let s = DiffusionSchedule::new(ScheduleKind::Cosine, 100).unwrap();
        let x0 = vol(&[0.5, -0.25]);
        let zero = vol(&[0.0, 0.0]);
        let eps = vol(&[1.0, -2.0]);
        let t = 37;
        let a = libm::sqrt(s.alpha_bar(t)) as f32;
        let b = libm::sqrt(1.0 - s.alpha_bar(t)) as f32;
        let xt = forward_diffuse(&x0, t, &zero, &s).unwrap();
        assert_eq!(xt.data(), &[a * 0.5, a * -0.25]);
        let xt = forward_diffuse(&zero, t, &eps, &s).unwrap();
        assert_eq!(xt.data(), &[b * 1.0, b * -2.0]);
        assert!(forward_diffuse(&x0, t, &vol(&[0.0]), &s).is_err());
    }

    #[test]
    fn loss_hand_evaluated() {
        let pred = vol(&[0.0, 0.0]);
        let eps = vol(&[1.0, 3.0]);
        let l = lesion_focused_loss(&pred, &eps, &mask(&[true, false]), false).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(
            lesion_focused_loss(&pred, &eps, &mask(&[false, false]), false).unwrap(),
            0.0
        );
        assert_eq!(
            lesion_focused_loss(&eps, &eps, &mask(&[true, true]), false).unwrap(),
            0.0
        );
        let g = global_loss_and_grad(&pred, &eps).unwrap();
        assert_eq!(g.loss, 5.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let pred = vol(&[0.3, -0.2, 0.9, 0.1]);
        let eps = vol(&[1.0, 0.4, -0.5, 0.0]);
        let m = mask(&[true, false, true, false]);
        let lg = lesion_focused_loss_and_grad(&pred, &eps, &m, false).unwrap();
        let h = 1e-3f32;
        for i in 0..4 {
            let mut p = pred.clone();
            p.data_mut()[i] += h;
            let up = lesion_focused_loss(&p, &eps, &m, false).unwrap();
            p.data_mut()[i] -= 2.0 * h;
            let down = lesion_focused_loss(&p, &eps, &m, false).unwrap();
            let fd = (up - down) / (2.0 * h as f64);
            assert!((fd - lg.grad[i] as f64).abs() < 1e-3, "voxel {i}");
        }
        assert_eq!(lg.grad[1], 0.0);
        assert_eq!(lg.grad[3], 0.0);
    }

    #[test]
    fn inpaint_step_branches() {
        let s = DiffusionSchedule::new(ScheduleKind::Linear, 10).unwrap();
        let o = vol(&[0.7, 0.7]);
        let x0 = vol(&[-0.5, 0.25]);
        let eps = vol(&[0.3, -1.2]);
        let t = 4;
        let bg = forward_diffuse(&x0, t - 1, &eps, &s).unwrap();
        let none = inpaint_step(&o, &x0, t, &eps, &mask(&[false, false]), &s).unwrap();
        assert_eq!(none.data(), bg.data());
        let all = inpaint_step(&o, &x0, t, &eps, &mask(&[true, true]), &s).unwrap();
        assert_eq!(all.data(), o.data());
        let mixed = inpaint_step(&o, &x0, t, &eps, &mask(&[true, false]), &s).unwrap();
        assert_eq!(mixed.data(), &[0.7, bg.data()[1]]);
        let last = inpaint_step(&o, &x0, 1, &eps, &mask(&[true, false]), &s).unwrap();
        assert_eq!(last.data(), &[0.7, 0.25]);
    }

    #[test]
    fn reverse_step_last_is_deterministic() {
        let s = DiffusionSchedule::new(ScheduleKind::Cosine, 20).unwrap();
        let m = ZeroModel { channels: 1 };
        let x = vol(&[0.1, -0.3, 0.2]);
        let a = reverse_step(&m, &x, 1, &s, &mut seeded(1), &Condition::none()).unwrap();
        let b = reverse_step(&m, &x, 1, &s, &mut seeded(2), &Condition::none()).unwrap();
        assert_eq!(a, b);
        assert!(reverse_step(&m, &x, 0, &s, &mut seeded(1), &Condition::none()).is_err());
        assert!(reverse_step(&m, &x, 21, &s, &mut seeded(1), &Condition::none()).is_err());
    }

    #[test]
    fn sampler_keeps_background_and_is_seeded() {
        let s = DiffusionSchedule::new(ScheduleKind::Cosine, 15).unwrap();
        let m = ZeroModel { channels: 1 };
        let x0 = vol(&[0.1, -0.3, 0.2, 0.9]);
        let masks = mask(&[false, true, true, false]);
        let run = |seed| {
            sample_inpaint(
                &m,
                &x0,
                &masks,
                &Condition::none(),
                &s,
                &mut seeded(seed),
                SamplerOptions { resample_jumps: 1 },
            )
            .unwrap()
        };
        let a = run(3);
        assert_eq!(a, run(3));
        assert_eq!(a.data()[0], 0.1);
        assert_eq!(a.data()[3], 0.9);
        let empty = sample_inpaint(
            &m,
            &x0,
            &mask(&[false; 4]),
            &Condition::none(),
            &s,
            &mut seeded(0),
            SamplerOptions::default(),
        )
        .unwrap();
        assert_eq!(empty, x0);
    }

    #[test]
    fn contract_errors() {
        let m = ZeroModel { channels: 2 };
        let x = vol(&[0.0]);
        assert!(matches!(
            predict_noise(&m, &x, 1, &Condition::none()),
            Err(Error::Contract(_))
        ));
    }
}
