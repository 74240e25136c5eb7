//! Synthetic case generation: P' (new textures on real pathological masks),
//! N' (lesions added to normal cases) and N'' (several per normal case).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use lesion_synth_core::baselines::{
    copy_paste, handcrafted_mask, handcrafted_texture, HandcraftParams, DIFFUSION_METHODS,
};
use lesion_synth_core::diffmask::{sample_mask, MaskPostProcess};
use lesion_synth_core::diffusion::{
    background_mask_condition, sample_inpaint, sample_plain, Condition, SamplerOptions,
};
use lesion_synth_core::phantom::CaseRole;
use lesion_synth_core::rng::{derive_seed, seeded};
use lesion_synth_core::texture::{
    compose_channels, encode_conditions, sample_inference_histogram, HistogramCondition,
    HistogramStrategy,
};
use lesion_synth_core::train::{control_spheres, Conditioning, SamplerKind, TrainedModel};
use lesion_synth_core::volume::{crop_mask, crop_mask_set, crop_pad_roi};
use lesion_synth_core::{BinaryMask, MaskSet, Volume3D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, HistogramSource};
use crate::dataset::{
    foreground_center, lesion_roi, paste_roi, roi_around, training_cases, uncrop_mask,
    HistogramBank, MANIFEST_FILE, PAD_VALUE,
};
use crate::error::{LabError, Result};
use crate::manifest::{write_case_files, CaseData, CaseRecord, Manifest, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SynthSet {
    /// New textures on real pathological masks.
    #[serde(rename = "P'")]
    PPrime,
    /// One synthetic lesion case per normal case.
    #[serde(rename = "N'")]
    NPrime,
    /// `multiplier` synthetic cases per normal case.
    #[serde(rename = "N''")]
    NDoublePrime,
}

impl SynthSet {
    pub fn label(self) -> &'static str {
        match self {
            SynthSet::PPrime => "P'",
            SynthSet::NPrime => "N'",
            SynthSet::NDoublePrime => "N''",
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            SynthSet::PPrime => "p_prime",
            SynthSet::NPrime => "n_prime",
            SynthSet::NDoublePrime => "n_double_prime",
        }
    }
}

impl fmt::Display for SynthSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SynthSet {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P'" | "p_prime" | "p-prime" => Ok(SynthSet::PPrime),
            "N'" | "n_prime" | "n-prime" => Ok(SynthSet::NPrime),
            "N''" | "n_double_prime" | "n-double-prime" => Ok(SynthSet::NDoublePrime),
            _ => Err(LabError::Invalid(format!(
                "unknown synthetic set {s:?}; expected P', N' or N''"
            ))),
        }
    }
}

/// Where lesion masks for normal cases come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// A real training mask, unchanged.
    Copy,
    HandCrafted,
    DiffMask,
}

impl FromStr for MaskSource {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(MaskSource::Copy),
            "hand_crafted" | "hand-crafted" => Ok(MaskSource::HandCrafted),
            "diffmask" => Ok(MaskSource::DiffMask),
            _ => Err(LabError::Invalid(format!(
                "unknown mask source {s:?}; expected copy, hand_crafted or diffmask"
            ))),
        }
    }
}

/// Texture synthesis methods accepted by [`synthesize`].
pub fn texture_methods() -> Vec<&'static str> {
    let mut m = vec!["copy_paste", "hand_crafted"];
    m.extend_from_slice(&DIFFUSION_METHODS);
    m
}

pub fn is_diffusion_method(method: &str) -> bool {
    DIFFUSION_METHODS.contains(&method)
}

#[derive(Debug, Clone)]
pub struct SynthRequest {
    pub method: String,
    pub set: SynthSet,
    pub mask_source: MaskSource,
    pub multiplier: usize,
}

/// Trained components a request may need.
#[derive(Default)]
pub struct SynthModels {
    pub texture: Option<TrainedModel>,
    pub mask: Option<TrainedModel>,
    pub bank: Option<HistogramBank>,
}

/// Picks the conditioning histograms for one generation: one for a
/// single-channel model, else one per class.
pub fn draw_histograms(
    model: &TrainedModel,
    bank: &HistogramBank,
    source: HistogramSource,
    centroid: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Vec<HistogramCondition>> {
    let strategy = match source {
        HistogramSource::ClusterCentroid => HistogramStrategy::ClusterCentroid(centroid),
        HistogramSource::DonorLesion => HistogramStrategy::DonorLesion,
    };
    let n = model.config.channels;
    if n == 1 {
        return Ok(vec![sample_inference_histogram(
            &strategy,
            Some(&bank.union),
            &bank.union_donors,
            rng,
        )?]);
    }
    if bank.classes.len() != n {
        return Err(LabError::Invalid(format!(
            "histogram bank has {} classes, model has {n} channels",
            bank.classes.len()
        )));
    }
    (0..n)
        .map(|i| {
            let (clusters, donors) = match &bank.classes[i] {
                Some(c) => (c, &bank.class_donors[i]),
                None => (&bank.union, &bank.union_donors),
            };
            let centroid = centroid.map(|c| c.min(clusters.centroids.len() - 1));
            let strategy = match source {
                HistogramSource::ClusterCentroid => HistogramStrategy::ClusterCentroid(centroid),
                HistogramSource::DonorLesion => HistogramStrategy::DonorLesion,
            };
            Ok(sample_inference_histogram(&strategy, Some(clusters), donors, rng)?)
        })
        .collect()
}

/// Regenerates the lesion region of an ROI crop with a texture model.
/// `histograms` is required for histogram-conditioned models.
pub fn generate_roi_texture(
    model: &TrainedModel,
    image: &Volume3D,
    masks: &MaskSet,
    histograms: Option<&[HistogramCondition]>,
    resample_jumps: usize,
    rng: &mut impl Rng,
) -> Result<Volume3D> {
    let cfg = &model.config;
    let condition = match cfg.conditioning {
        Conditioning::None => Condition::none(),
        Conditioning::Histogram => {
            let h = histograms.ok_or_else(|| {
                LabError::Invalid("histogram-conditioned model needs histograms".into())
            })?;
            Condition::tokens(encode_conditions(h, cfg.token_group)?)
        }
        Conditioning::ConcatBackgroundMask => {
            Condition::channels(background_mask_condition(image, masks)?)
        }
    };
    let n = cfg.channels;
    let masks = if n == 1 && masks.n() > 1 {
        masks.merged("lesion")
    } else {
        masks.clone()
    };
    let out = match cfg.sampler {
        SamplerKind::Inpaint => sample_inpaint(
            &model.denoiser,
            image,
            &masks,
            &condition,
            &model.schedule,
            rng,
            SamplerOptions { resample_jumps },
        )?,
        SamplerKind::Plain => {
            let raw = sample_plain(
                &model.denoiser,
                image.spatial(),
                &condition,
                &model.schedule,
                rng,
            )?;
            if n == 1 {
                raw
            } else {
                let fg = masks.foreground();
                let lesion = compose_channels(&raw, &masks)?;
                let mut out = raw.channel(0)?;
                for (v, _) in fg.data().iter().enumerate().filter(|(_, &m)| m) {
                    *out.at_mut(v, 0) = lesion.at(v, 0);
                }
                out
            }
        }
    };
    Ok(out.with_spacing(image.spacing())?)
}

/// Runs a texture model on a full case by cropping an ROI around the lesion
/// and pasting the result back.
pub fn diffusion_texture(
    model: &TrainedModel,
    volume: &Volume3D,
    masks: &MaskSet,
    roi_size: [usize; 3],
    histograms: Option<&[HistogramCondition]>,
    resample_jumps: usize,
    rng: &mut impl Rng,
) -> Result<Volume3D> {
    let roi = lesion_roi(masks, roi_size);
    let image = crop_pad_roi(volume, &roi, PAD_VALUE)?;
    let crop = crop_mask_set(masks, &roi);
    let patch = generate_roi_texture(model, &image, &crop, histograms, resample_jumps, rng)?;
    let mut out = volume.clone();
    paste_roi(&mut out, &roi, &patch)?;
    Ok(out)
}

const DIFFMASK_TRIES: usize = 8;

/// Samples masks inside `boundary` with control spheres taken from
/// `donor`'s lesions, in an ROI centred on the donor lesion. `None` when every
/// try came out empty.
pub fn diffmask_masks(
    model: &TrainedModel,
    post: &MaskPostProcess,
    boundary: &BinaryMask,
    donor: &MaskSet,
    roi_size: [usize; 3],
    rng: &mut impl Rng,
) -> Result<Option<MaskSet>> {
    let dims = boundary.dims();
    let roi = roi_around(dims, foreground_center(donor), roi_size);
    let spheres = control_spheres(&crop_mask_set(donor, &roi))?;
    let b = crop_mask(boundary, &roi);
    if b.is_empty() {
        return Err(LabError::Invalid(
            "boundary is empty around the donor lesion".into(),
        ));
    }
    for _ in 0..DIFFMASK_TRIES {
        let s = sample_mask(&model.denoiser, &b, &spheres, &model.schedule, post, rng)?;
        if s.masks.iter().all(BinaryMask::is_empty) {
            continue;
        }
        let full = s.masks.iter().map(|m| uncrop_mask(m, &roi, dims)).collect();
        return Ok(Some(MaskSet::new(full, donor.class_names().to_vec())?));
    }
    Ok(None)
}

/// One hand-crafted mask per class inside `boundary`; later classes are
/// drawn inside the previous class and carved out of it.
pub fn handcrafted_masks(
    boundary: &BinaryMask,
    class_names: &[String],
    params: &HandcraftParams,
    rng: &mut impl Rng,
) -> Result<MaskSet> {
    let dims = boundary.dims();
    let mut masks: Vec<BinaryMask> = Vec::with_capacity(class_names.len());
    for i in 0..class_names.len() {
        if i == 0 {
            masks.push(handcrafted_mask(dims, params, Some(boundary), rng)?);
            continue;
        }
        let parent = masks[i - 1].clone();
        let m = if parent.is_empty() {
            BinaryMask::empty(dims)
        } else {
            handcrafted_mask(dims, params, Some(&parent), rng).unwrap_or(BinaryMask::empty(dims))
        };
        if m.count() < parent.count() {
            masks[i - 1] = parent.difference(&m)?;
            masks.push(m);
        } else {
            masks.push(BinaryMask::empty(dims));
        }
    }
    Ok(MaskSet::new(masks, class_names.to_vec())?)
}

fn texture_for(
    cfg: &ExperimentConfig,
    req: &SynthRequest,
    models: &SynthModels,
    volume: &Volume3D,
    masks: &MaskSet,
    roi_size: [usize; 3],
    rng: &mut impl Rng,
) -> Result<Volume3D> {
    match req.method.as_str() {
        "hand_crafted" => {
            let mut out = volume.clone();
            for m in masks.masks().iter().filter(|m| !m.is_empty()) {
                out = handcrafted_texture(&out, m, &cfg.baselines.handcraft, rng)?;
            }
            Ok(out)
        }
        method if is_diffusion_method(method) => {
            let model = models
                .texture
                .as_ref()
                .ok_or_else(|| LabError::MissingCheckpoint(format!("texture_{method}").into()))?;
            let hist = match model.config.conditioning {
                Conditioning::Histogram => {
                    let bank = models.bank.as_ref().ok_or_else(|| {
                        LabError::MissingCheckpoint("histograms.json".into())
                    })?;
                    let tc = &cfg.texture_control;
                    Some(draw_histograms(model, bank, tc.strategy, tc.centroid, rng)?)
                }
                _ => None,
            };
            diffusion_texture(
                model,
                volume,
                masks,
                roi_size,
                hist.as_deref(),
                cfg.engine.resample_jumps,
                rng,
            )
        }
        other => Err(LabError::Invalid(format!(
            "unknown synthesis method {other:?}; valid methods: {}",
            texture_methods().join(", ")
        ))),
    }
}

/// Generates the requested synthetic set from `manifest` into `outdir`.
pub fn synthesize(
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    req: &SynthRequest,
    models: &SynthModels,
    outdir: &Path,
) -> Result<Manifest> {
    if !texture_methods().contains(&req.method.as_str()) {
        return Err(LabError::Invalid(format!(
            "unknown synthesis method {:?}; valid methods: {}",
            req.method,
            texture_methods().join(", ")
        )));
    }
    if req.multiplier == 0 {
        return Err(LabError::Invalid("multiplier must be positive".into()));
    }
    let copy = req.method == "copy_paste";
    if copy && req.set == SynthSet::PPrime {
        return Err(LabError::Invalid(
            "copy_paste needs donor lesions and cannot build P'".into(),
        ));
    }
    let roi_size = cfg.data.roi_size()?;
    let donors = training_cases(manifest)?;
    if donors.is_empty() {
        return Err(LabError::Invalid(
            "manifest has no training pathological cases".into(),
        ));
    }
    let (targets, per_target) = match req.set {
        SynthSet::PPrime => (manifest.select(Split::Train, CaseRole::Pathological), 1),
        SynthSet::NPrime => (manifest.select(Split::Train, CaseRole::Normal), 1),
        SynthSet::NDoublePrime => (
            manifest.select(Split::Train, CaseRole::Normal),
            req.multiplier,
        ),
    };
    if targets.is_empty() {
        return Err(LabError::Invalid(format!(
            "manifest has no source cases for {}",
            req.set
        )));
    }
    let mask_source = if copy { MaskSource::Copy } else { req.mask_source };
    if req.set != SynthSet::PPrime && mask_source == MaskSource::DiffMask && models.mask.is_none() {
        return Err(LabError::MissingCheckpoint("mask".into()));
    }
    let post = MaskPostProcess {
        kernel: cfg.diffmask.kernel,
        threshold: cfg.diffmask.threshold,
        priority: cfg.mask_priority(donors[0].1.masks.n()),
    };
    let stream = stream_id(&req.method, req.set);
    let mut out = Manifest::new(outdir);
    let mut index = 0usize;
    for target in targets {
        let data = manifest.load_case(target)?;
        for rep in 0..per_target {
            let seed = derive_seed(derive_seed(cfg.seed, stream), index as u64);
            let mut rng = seeded(seed);
            let mut notes = Vec::new();
            let (volume, masks) = match req.set {
                SynthSet::PPrime => {
                    let v = texture_for(cfg, req, models, &data.volume, &data.masks, roi_size, &mut rng)?;
                    (v, data.masks.clone())
                }
                _ => {
                    let d = rng.random_range(0..donors.len());
                    let (donor_rec, donor) = &donors[d];
                    notes.push(format!("donor={}", donor_rec.id));
                    let boundary = data
                        .boundary
                        .clone()
                        .unwrap_or_else(|| BinaryMask::full(data.volume.spatial()));
                    if copy {
                        let (v, m) = copy_paste(&donor.volume, &donor.masks, &data.volume, [0; 3])?;
                        (v, m)
                    } else {
                        let masks = new_masks(
                            cfg, models, &post, mask_source, &boundary, donor, roi_size, &mut notes,
                            &mut rng,
                        )?;
                        let v = texture_for(cfg, req, models, &data.volume, &masks, roi_size, &mut rng)?;
                        (v, masks)
                    }
                }
            };
            let id = if per_target > 1 {
                format!("{}_{}_{}", req.set.slug(), target.id, rep)
            } else {
                format!("{}_{}", req.set.slug(), target.id)
            };
            let (volume_path, mask_paths, boundary_path) = write_case_files(
                outdir,
                "cases",
                &id,
                &volume,
                &masks,
                data.boundary.as_ref(),
            )?;
            let mut provenance = format!("method={}; set={}; source={}", req.method, req.set, target.id);
            if req.set != SynthSet::PPrime {
                provenance.push_str(&format!("; masks={}", mask_source_name(mask_source)));
            }
            for n in notes {
                provenance.push_str("; ");
                provenance.push_str(&n);
            }
            out.cases.push(CaseRecord {
                id,
                volume_path,
                mask_paths,
                role: CaseRole::Synthetic,
                provenance,
                seed,
                split: Split::Train,
                method: Some(req.method.clone()),
                set: Some(req.set.label().to_string()),
                source_id: Some(target.id.clone()),
                peak_indices: Vec::new(),
                boundary_path,
            });
            index += 1;
        }
    }
    out.save(&outdir.join(MANIFEST_FILE))?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn new_masks(
    cfg: &ExperimentConfig,
    models: &SynthModels,
    post: &MaskPostProcess,
    source: MaskSource,
    boundary: &BinaryMask,
    donor: &CaseData,
    roi_size: [usize; 3],
    notes: &mut Vec<String>,
    rng: &mut impl Rng,
) -> Result<MaskSet> {
    match source {
        MaskSource::Copy => Ok(donor.masks.clone()),
        MaskSource::HandCrafted => handcrafted_masks(
            boundary,
            donor.masks.class_names(),
            &cfg.baselines.handcraft,
            rng,
        ),
        MaskSource::DiffMask => {
            let model = models
                .mask
                .as_ref()
                .ok_or_else(|| LabError::MissingCheckpoint("mask".into()))?;
            match diffmask_masks(model, post, boundary, &donor.masks, roi_size, rng)? {
                Some(m) => Ok(m),
                None => {
                    notes.push("mask_fallback=donor".into());
                    Ok(donor.masks.clone())
                }
            }
        }
    }
}

fn mask_source_name(s: MaskSource) -> &'static str {
    match s {
        MaskSource::Copy => "copy",
        MaskSource::HandCrafted => "hand_crafted",
        MaskSource::DiffMask => "diffmask",
    }
}

fn stream_id(method: &str, set: SynthSet) -> u64 {
    // FNV-1a over the request identity
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in method.bytes().chain(set.slug().bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_labels_parse() {
        for s in [SynthSet::PPrime, SynthSet::NPrime, SynthSet::NDoublePrime] {
            assert_eq!(s.label().parse::<SynthSet>().unwrap(), s);
            assert_eq!(s.slug().parse::<SynthSet>().unwrap(), s);
        }
        assert!("X".parse::<SynthSet>().is_err());
        assert!("bogus".parse::<MaskSource>().is_err());
    }

    #[test]
    fn handcrafted_masks_stay_in_boundary_and_disjoint() {
        let boundary = BinaryMask::from_fn([8, 16, 16], |z, y, x| {
            (1..7).contains(&z) && (2..14).contains(&y) && (2..14).contains(&x)
        });
        let names = vec!["mi".to_string(), "pmo".to_string()];
        let params = HandcraftParams::default();
        for s in 0..10 {
            let m = handcrafted_masks(&boundary, &names, &params, &mut seeded(s)).unwrap();
            assert!(!m.mask(0).is_empty());
            assert!(m.foreground().is_subset_of(&boundary).unwrap());
            assert!(m.mask(0).intersect(m.mask(1)).unwrap().is_empty());
        }
    }

    #[test]
    fn stream_ids_differ_by_request() {
        assert_ne!(stream_id("lefusion", SynthSet::NPrime), stream_id("lefusion", SynthSet::PPrime));
        assert_ne!(stream_id("repaint", SynthSet::NPrime), stream_id("lefusion", SynthSet::NPrime));
    }
}
