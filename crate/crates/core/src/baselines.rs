//! Comparison methods: copy-paste, hand-crafted masks and textures, and the
//! engine configurations that realise the diffusion baselines.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::LossMode;
use crate::error::{Error, Result};
use crate::rng::normal;
use crate::train::{Conditioning, SamplerKind, TrainConfig};
use crate::volume::{BinaryMask, MaskSet, Volume3D};

/// Diffusion method names accepted by [`baseline_recipe`].
pub const DIFFUSION_METHODS: [&str; 6] = [
    "repaint",
    "cond_diffusion",
    "lefusion",
    "lefusion_h",
    "lefusion_j",
    "lefusion_j_h",
];

/// Engine configuration implementing a named method.
///
/// The joint (`_j`) variants default to two lesion channels.
pub fn baseline_recipe(name: &str) -> Result<TrainConfig> {
    let base = TrainConfig::default();
    let (loss, conditioning, sampler, channels) = match name {
        "repaint" => (
            LossMode::Global,
            Conditioning::None,
            SamplerKind::Inpaint,
            1,
        ),
        "cond_diffusion" => (
            LossMode::Global,
            Conditioning::ConcatBackgroundMask,
            SamplerKind::Plain,
            1,
        ),
        "lefusion" => (
            LossMode::LesionFocused,
            Conditioning::None,
            SamplerKind::Inpaint,
            1,
        ),
        "lefusion_h" => (
            LossMode::LesionFocused,
            Conditioning::Histogram,
            SamplerKind::Inpaint,
            1,
        ),
        "lefusion_j" => (
            LossMode::LesionFocused,
            Conditioning::None,
            SamplerKind::Inpaint,
            2,
        ),
        "lefusion_j_h" => (
            LossMode::LesionFocused,
            Conditioning::Histogram,
            SamplerKind::Inpaint,
            2,
        ),
        _ => {
            return Err(Error::UnknownMethod {
                name: name.into(),
                valid: DIFFUSION_METHODS.join(", "),
            })
        }
    };
    Ok(TrainConfig {
        loss,
        conditioning,
        sampler,
        channels,
        ..base
    })
}

/// Pastes the donor lesion, shifted by `offset`, into `target`.
///
/// Returns the new volume and the translated masks. Off-mask voxels are
/// untouched.
pub fn copy_paste(
    donor: &Volume3D,
    donor_masks: &MaskSet,
    target: &Volume3D,
    offset: [i64; 3],
) -> Result<(Volume3D, MaskSet)> {
    donor.same_spatial(donor_masks.dims())?;
    if donor.channels() != target.channels() {
        return Err(Error::DimMismatch(format!(
            "donor has {} channels, target {}",
            donor.channels(),
            target.channels()
        )));
    }
    let tdims = target.spatial();
    let mut out = target.clone();
    let mut moved = vec![BinaryMask::empty(tdims); donor_masks.n()];
    for (ci, m) in donor_masks.masks().iter().enumerate() {
        for [z, y, x] in m.coords() {
            let t = [
                z as i64 + offset[0],
                y as i64 + offset[1],
                x as i64 + offset[2],
            ];
            if (0..3).any(|a| t[a] < 0 || t[a] >= tdims[a] as i64) {
                return Err(Error::InvalidArgument(format!(
                    "pasted voxel {t:?} falls outside target {tdims:?}"
                )));
            }
            let (tz, ty, tx) = (t[0] as usize, t[1] as usize, t[2] as usize);
            for c in 0..donor.channels() {
                out.set(tz, ty, tx, c, donor.get(z, y, x, c));
            }
            moved[ci].set(tz, ty, tx, true);
        }
    }
    let masks = MaskSet::new(moved, donor_masks.class_names().to_vec())?;
    Ok((out, masks))
}

/// Offset that moves the foreground centroid of `masks` onto `location`.
pub fn centroid_offset(masks: &MaskSet, location: [usize; 3]) -> Result<[i64; 3]> {
    let fg = masks.foreground();
    let n = fg.count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mut sum = [0usize; 3];
    for q in fg.coords() {
        for a in 0..3 {
            sum[a] += q[a];
        }
    }
    Ok(core::array::from_fn(|a| {
        location[a] as i64 - libm::round(sum[a] as f64 / n as f64) as i64
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HandcraftParams {
    /// Inclusive range of ellipsoids united into one mask.
    pub ellipsoid_count: (usize, usize),
    /// Inclusive range of ellipsoid semi-axes in voxels.
    pub axis_range: (f64, f64),
    /// Inclusive range of random dilate/erode operations.
    pub morphology_ops: (usize, usize),
    pub noise_mean: f32,
    pub noise_std: f32,
    pub blur_sigma: f64,
    /// Noise is drawn on a grid this many times coarser, then interpolated.
    pub interp_factor: usize,
    /// Soften the texture towards the original image at the mask edge.
    pub edge_blend: bool,
}

impl Default for HandcraftParams {
    fn default() -> Self {
        Self {
            ellipsoid_count: (1, 3),
            axis_range: (1.5, 3.0),
            morphology_ops: (0, 2),
            noise_mean: 0.3,
            noise_std: 0.2,
            blur_sigma: 0.8,
            interp_factor: 2,
            edge_blend: true,
        }
    }
}

impl HandcraftParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.ellipsoid_count.0 >= 1
            && self.ellipsoid_count.1 >= self.ellipsoid_count.0
            && self.axis_range.0 > 0.0
            && self.axis_range.1 >= self.axis_range.0
            && self.morphology_ops.1 >= self.morphology_ops.0
            && self.noise_std >= 0.0
            && self.blur_sigma >= 0.0
            && self.interp_factor >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "hand-crafted parameter ranges are invalid".into(),
            ))
        }
    }
}

const HANDCRAFT_TRIES: usize = 20;

/// Union of random ellipsoids followed by random dilations/erosions,
/// restricted to `region` when given.
pub fn handcrafted_mask(
    dims: [usize; 3],
    params: &HandcraftParams,
    region: Option<&BinaryMask>,
    rng: &mut impl Rng,
) -> Result<BinaryMask> {
    params.validate()?;
    if dims.contains(&0) {
        return Err(Error::InvalidArgument("dims must be positive".into()));
    }
    let region = match region {
        Some(r) if r.dims() != dims => {
            return Err(Error::DimMismatch(format!(
                "region {:?} vs {dims:?}",
                r.dims()
            )))
        }
        Some(r) => r.clone(),
        None => BinaryMask::full(dims),
    };
    let seeds: Vec<[usize; 3]> = region.coords().collect();
    if seeds.is_empty() {
        return Err(Error::EmptyMask);
    }
    for _ in 0..HANDCRAFT_TRIES {
        let anchor = seeds[rng.random_range(0..seeds.len())];
        let mask = handcrafted_mask_at(dims, anchor, params, rng)?.intersect(&region)?;
        if !mask.is_empty() {
            return Ok(mask);
        }
    }
    Err(Error::Degenerate(format!(
        "hand-crafted mask stayed empty after {HANDCRAFT_TRIES} tries"
    )))
}

/// One draw of [`handcrafted_mask`] with the first ellipsoid centred on `anchor`.
pub fn handcrafted_mask_at(
    dims: [usize; 3],
    anchor: [usize; 3],
    params: &HandcraftParams,
    rng: &mut impl Rng,
) -> Result<BinaryMask> {
    params.validate()?;
    let count = rng.random_range(params.ellipsoid_count.0..=params.ellipsoid_count.1);
    let mut mask = BinaryMask::empty(dims);
    for k in 0..count {
        let axes: [f64; 3] =
            core::array::from_fn(|_| rng.random_range(params.axis_range.0..=params.axis_range.1));
        let centre: [f64; 3] = core::array::from_fn(|a| {
            let jitter = if k == 0 {
                0.0
            } else {
                rng.random_range(-axes[a]..=axes[a])
            };
            anchor[a] as f64 + jitter
        });
        let e = BinaryMask::from_fn(dims, |z, y, x| {
            let q = [z as f64, y as f64, x as f64];
            (0..3)
                .map(|a| ((q[a] - centre[a]) / axes[a]).powi(2))
                .sum::<f64>()
                <= 1.0
        });
        mask = mask.union(&e)?;
    }
    let ops = rng.random_range(params.morphology_ops.0..=params.morphology_ops.1);
    for _ in 0..ops {
        mask = if rng.random_bool(0.5) {
            mask.dilate()
        } else {
            mask.erode()
        };
    }
    Ok(mask)
}

/// Separable Gaussian blur of a single channel; the kernel is renormalised
/// over in-bounds taps.
pub fn gaussian_blur(v: &Volume3D, sigma: f64) -> Result<Volume3D> {
    if v.channels() != 1 {
        return Err(Error::DimMismatch("gaussian_blur expects 1 channel".into()));
    }
    if sigma <= 0.0 {
        return Ok(v.clone());
    }
    let r = libm::ceil(3.0 * sigma) as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| libm::exp(-((k * k) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let dims = v.spatial();
    let mut cur: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let p = [z, y, x];
                    let (mut acc, mut wsum) = (0.0, 0.0);
                    for (ti, k) in (-r..=r).enumerate() {
                        let s = p[axis] as i64 + k;
                        if s < 0 || s >= dims[axis] as i64 {
                            continue;
                        }
                        let mut q = p;
                        q[axis] = s as usize;
                        acc += taps[ti] * cur[(q[0] * dims[1] + q[1]) * dims[2] + q[2]];
                        wsum += taps[ti];
                    }
                    next[(z * dims[1] + y) * dims[2] + x] = acc / wsum;
                }
            }
        }
        cur = next;
    }
    Volume3D::new(
        v.dims(),
        v.spacing(),
        cur.into_iter().map(|x| x as f32).collect(),
    )
}

/// Trilinear upsampling of a coarse grid onto `dims`, with the coarse grid
/// spaced `factor` voxels apart.
fn trilinear(coarse: &[f64], cdims: [usize; 3], dims: [usize; 3], factor: usize) -> Vec<f64> {
    let at = |z: usize, y: usize, x: usize| coarse[(z * cdims[1] + y) * cdims[2] + x];
    let mut out = vec![0.0; dims.iter().product()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z, y, x];
                let mut i0 = [0usize; 3];
                let mut f = [0.0f64; 3];
                for a in 0..3 {
                    let c = p[a] as f64 / factor as f64;
                    i0[a] = (libm::floor(c) as usize).min(cdims[a] - 1);
                    f[a] = c - i0[a] as f64;
                }
                let mut acc = 0.0;
                for corner in 0..8 {
                    let o = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
                    let mut w = 1.0;
                    let mut idx = [0usize; 3];
                    for a in 0..3 {
                        w *= if o[a] == 1 { f[a] } else { 1.0 - f[a] };
                        idx[a] = (i0[a] + o[a]).min(cdims[a] - 1);
                    }
                    acc += w * at(idx[0], idx[1], idx[2]);
                }
                out[(z * dims[1] + y) * dims[2] + x] = acc;
            }
        }
    }
    out
}

/// Fills `mask` with smoothed Gaussian noise around `params.noise_mean`.
pub fn handcrafted_texture(
    target: &Volume3D,
    mask: &BinaryMask,
    params: &HandcraftParams,
    rng: &mut impl Rng,
) -> Result<Volume3D> {
    params.validate()?;
    target.same_spatial(mask.dims())?;
    if target.channels() != 1 {
        return Err(Error::DimMismatch(
            "hand-crafted texture expects 1 channel".into(),
        ));
    }
    let dims = mask.dims();
    let f = params.interp_factor;
    let cdims: [usize; 3] = core::array::from_fn(|a| (dims[a] - 1) / f + 2);
    let coarse: Vec<f64> = (0..cdims.iter().product::<usize>())
        .map(|_| params.noise_mean as f64 + params.noise_std as f64 * normal(rng) as f64)
        .collect();
    let fine = trilinear(&coarse, cdims, dims, f);
    let tex = Volume3D::new(
        [dims[0], dims[1], dims[2], 1],
        target.spacing(),
        fine.into_iter().map(|x| x as f32).collect(),
    )?;
    let tex = gaussian_blur(&tex, params.blur_sigma)?;
    let weight = if params.edge_blend {
        Some(gaussian_blur(
            &mask.to_volume(),
            params.blur_sigma.max(0.5),
        )?)
    } else {
        None
    };
    let mut out = target.clone();
    for (v, _) in mask.data().iter().enumerate().filter(|(_, &b)| b) {
        let t = tex.at(v, 0);
        let val = match &weight {
            Some(w) => {
                let a = (2.0 * w.at(v, 0)).min(1.0);
                a * t + (1.0 - a) * target.at(v, 0)
            }
            None => t,
        };
        *out.at_mut(v, 0) = val.clamp(-1.0, 1.0);
    }
    Ok(out)
}
