//! Downstream segmentation, image quality, diversity and histogram-shift
//! evaluation.

use std::collections::BTreeMap;

use lesion_synth_core::metrics::{
    diversity_report, histogram_shift_report, mean_std, per_class_scores, psnr, ssim,
    DiversityReport, SamplePair, ShiftCase, ShiftReport, DEFAULT_PEAK,
};
use lesion_synth_core::phantom::CaseRole;
use lesion_synth_core::rng::{derive_seed, seeded};
use lesion_synth_core::segment::{SegExample, Segmenter, SegmenterConfig};
use lesion_synth_core::texture::{
    extract_histogram, fit_histogram_params, HistControlParams, HistogramCondition, HistogramFit,
    HistogramObservation,
};
use lesion_synth_core::train::{Conditioning, TrainedModel};
use lesion_synth_core::{BinaryMask, MaskSet, Volume3D};
use serde::{Serialize, Serializer};

use crate::config::TextureControlConfig;
use crate::dataset::HistogramBank;
use crate::error::{LabError, Result};
use crate::manifest::{CaseRecord, Manifest, Split};
use crate::synth::{draw_histograms, generate_roi_texture, SynthSet};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One component of a training setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetToken {
    Real,
    Synthetic(SynthSet),
}

/// Parses `P`, `P+N'`, `P+P'+N''` and the like. Real data must come first.
pub fn parse_setting(s: &str) -> Result<Vec<SetToken>> {
    let mut out = Vec::new();
    for (i, part) in s.split('+').map(str::trim).enumerate() {
        let tok = match part {
            "P" => SetToken::Real,
            other => SetToken::Synthetic(other.parse()?),
        };
        if (i == 0) != (tok == SetToken::Real) || out.contains(&tok) {
            return Err(LabError::Invalid(format!(
                "setting {s:?} must start with P and list each set once"
            )));
        }
        out.push(tok);
    }
    Ok(out)
}

/// Writes infinite PSNR values as the string `"inf"`.
pub fn serialize_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn serialize_psnr_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        if x.is_infinite() && *x > 0.0 {
            seq.serialize_element("inf")?;
        } else {
            seq.serialize_element(x)?;
        }
    }
    seq.end()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub id: String,
    /// One entry per class.
    pub dice: Vec<f64>,
    pub nsd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAggregate {
    pub class: String,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub nsd_mean: f64,
    pub nsd_std: f64,
}

/// Scores of one segmenter on one test split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub method: String,
    pub setting: String,
    pub seed: u64,
    pub manifest_hash: String,
    pub class_names: Vec<String>,
    pub cases: Vec<CaseMetrics>,
    pub aggregate: Vec<ClassAggregate>,
    /// Mean over classes of the per-class mean Dice.
    pub mean_dice: f64,
    pub mean_nsd: f64,
}

/// Loads segmentation examples for `records` of `manifest`.
pub fn segmentation_examples(manifest: &Manifest, records: &[&CaseRecord]) -> Result<Vec<SegExample>> {
    records
        .iter()
        .map(|r| {
            let c = manifest.load_case(r)?;
            Ok(SegExample {
                image: c.volume,
                masks: c.masks,
            })
        })
        .collect()
}

pub fn train_segmenter(examples: &[SegExample], config: &SegmenterConfig) -> Result<Segmenter> {
    if examples.is_empty() {
        return Err(LabError::Invalid("no segmentation training cases".into()));
    }
    Ok(Segmenter::train(examples, config)?)
}

/// Scores `seg` on the test pathological cases of `manifest`.
pub fn eval_segmenter(
    seg: &Segmenter,
    manifest: &Manifest,
    split: Split,
    nsd_tau: f64,
    method: &str,
    setting: &str,
) -> Result<MetricReport> {
    let records = manifest.select(split, CaseRole::Pathological);
    if records.is_empty() {
        return Err(LabError::Invalid(format!(
            "manifest has no {split:?} pathological cases"
        )));
    }
    let mut cases = Vec::with_capacity(records.len());
    for r in &records {
        let c = manifest.load_case(r)?;
        if c.masks.class_names() != seg.class_names.as_slice() {
            return Err(LabError::Invalid(format!(
                "case {} classes {:?} differ from segmenter classes {:?}",
                r.id,
                c.masks.class_names(),
                seg.class_names
            )));
        }
        let pred = seg.predict(&c.volume)?;
        let scores = per_class_scores(c.masks.masks(), pred.masks(), nsd_tau, c.volume.spacing())?;
        cases.push(CaseMetrics {
            id: r.id.clone(),
            dice: scores.iter().map(|s| s.0).collect(),
            nsd: scores.iter().map(|s| s.1).collect(),
        });
    }
    let aggregate: Vec<ClassAggregate> = seg
        .class_names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let d: Vec<f64> = cases.iter().map(|c| c.dice[k]).collect();
            let n: Vec<f64> = cases.iter().map(|c| c.nsd[k]).collect();
            let (dm, ds) = mean_std(&d).unwrap_or((0.0, 0.0));
            let (nm, ns) = mean_std(&n).unwrap_or((0.0, 0.0));
            ClassAggregate {
                class: name.clone(),
                dice_mean: dm,
                dice_std: ds,
                nsd_mean: nm,
                nsd_std: ns,
            }
        })
        .collect();
    let k = aggregate.len().max(1) as f64;
    Ok(MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: method.to_string(),
        setting: setting.to_string(),
        seed: seg.config.seed,
        manifest_hash: manifest.hash(),
        class_names: seg.class_names.clone(),
        mean_dice: aggregate.iter().map(|a| a.dice_mean).sum::<f64>() / k,
        mean_nsd: aggregate.iter().map(|a| a.nsd_mean).sum::<f64>() / k,
        cases,
        aggregate,
    })
}

/// A training setting scored over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SettingRow {
    pub setting: String,
    pub method: String,
    pub training_cases: usize,
    pub seeds: Vec<u64>,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub mean_nsd: f64,
    pub std_nsd: f64,
    /// Per-class Dice averaged over seeds.
    pub class_dice: Vec<f64>,
    pub class_nsd: Vec<f64>,
    pub reports: Vec<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentationTable {
    pub schema_version: u32,
    pub manifest_hash: String,
    pub class_names: Vec<String>,
    pub rows: Vec<SettingRow>,
}

/// Synthetic manifests available to settings, keyed by set label.
pub type SyntheticPool<'a> = BTreeMap<SynthSet, &'a Manifest>;

/// Trains and scores one segmenter per seed for `setting`. Segmenters are
/// handed to `keep` as they finish.
pub fn run_setting(
    real: &Manifest,
    pool: &SyntheticPool<'_>,
    setting: &str,
    config: &SegmenterConfig,
    seeds: &[u64],
    nsd_tau: f64,
    mut keep: impl FnMut(u64, &Segmenter) -> Result<()>,
) -> Result<SettingRow> {
    let tokens = parse_setting(setting)?;
    if seeds.is_empty() {
        return Err(LabError::Invalid("evaluation needs at least one seed".into()));
    }
    if real.select(Split::Test, CaseRole::Pathological).is_empty() {
        return Err(LabError::Invalid("manifest has no test split".into()));
    }
    let mut examples =
        segmentation_examples(real, &real.select(Split::Train, CaseRole::Pathological))?;
    let mut methods = Vec::new();
    for t in &tokens {
        if let SetToken::Synthetic(set) = t {
            let m = pool.get(set).ok_or_else(|| {
                LabError::Invalid(format!("setting {setting:?} needs a {set} manifest"))
            })?;
            let recs: Vec<&CaseRecord> = m
                .cases
                .iter()
                .filter(|c| c.set.as_deref() == Some(set.label()))
                .collect();
            for r in &recs {
                if let Some(method) = &r.method {
                    if !methods.contains(method) {
                        methods.push(method.clone());
                    }
                }
            }
            examples.extend(segmentation_examples(m, &recs)?);
        }
    }
    let method = if methods.is_empty() {
        "real".to_string()
    } else {
        methods.join("+")
    };
    let training_cases = examples.len();
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = SegmenterConfig {
            seed,
            ..config.clone()
        };
        let seg = train_segmenter(&examples, &cfg)?;
        keep(seed, &seg)?;
        reports.push(eval_segmenter(&seg, real, Split::Test, nsd_tau, &method, setting)?);
    }
    let dice: Vec<f64> = reports.iter().map(|r| r.mean_dice).collect();
    let nsd: Vec<f64> = reports.iter().map(|r| r.mean_nsd).collect();
    let (mean_dice, std_dice) = mean_std(&dice).unwrap_or_default();
    let (mean_nsd, std_nsd) = mean_std(&nsd).unwrap_or_default();
    let k = reports[0].class_names.len();
    let class_avg = |f: &dyn Fn(&ClassAggregate) -> f64| -> Vec<f64> {
        (0..k)
            .map(|i| reports.iter().map(|r| f(&r.aggregate[i])).sum::<f64>() / reports.len() as f64)
            .collect()
    };
    Ok(SettingRow {
        setting: setting.to_string(),
        method,
        training_cases,
        seeds: seeds.to_vec(),
        mean_dice,
        std_dice,
        mean_nsd,
        std_nsd,
        class_dice: class_avg(&|a| a.dice_mean),
        class_nsd: class_avg(&|a| a.nsd_mean),
        reports,
    })
}

/// Similarity of synthetic P' cases to the real cases they were made from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityEntry {
    pub method: String,
    pub set: String,
    pub cases: usize,
    #[serde(serialize_with = "serialize_psnr")]
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    #[serde(serialize_with = "serialize_psnr_vec")]
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

/// Region compared for image quality: the lesion grown by `margin` voxels.
pub fn quality_region(masks: &MaskSet, margin: usize) -> BinaryMask {
    let mut r = masks.foreground();
    for _ in 0..margin {
        r = r.dilate();
    }
    r
}

pub const QUALITY_MARGIN: usize = 2;

/// PSNR and SSIM of each synthetic record against its source case, over
/// the grown lesion region.
pub fn quality_report(real: &Manifest, synth: &Manifest) -> Result<Vec<QualityEntry>> {
    let mut groups: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &synth.cases {
        let (Some(src), Some(method), Some(set)) = (&r.source_id, &r.method, &r.set) else {
            continue;
        };
        let Some(src_rec) = real.get(src) else {
            return Err(LabError::Invalid(format!(
                "synthetic case {} names unknown source {src}",
                r.id
            )));
        };
        let s = synth.load_case(r)?;
        let o = real.load_case(src_rec)?;
        let region = quality_region(&s.masks, QUALITY_MARGIN);
        if region.is_empty() {
            continue;
        }
        let e = groups.entry((method.clone(), set.clone())).or_default();
        e.0.push(psnr(&s.volume, &o.volume, Some(&region), DEFAULT_PEAK)?);
        e.1.push(ssim(&s.volume, &o.volume, Some(&region))?);
    }
    Ok(groups
        .into_iter()
        .map(|((method, set), (p, s))| QualityEntry {
            method,
            set,
            cases: p.len(),
            psnr_mean: mean_std(&p).map(|m| m.0).unwrap_or(0.0),
            ssim_mean: mean_std(&s).map(|m| m.0).unwrap_or(0.0),
            psnr: p,
            ssim: s,
        })
        .collect())
}

/// ROI crop plus the lesion masks to regenerate in it.
#[derive(Debug, Clone)]
pub struct GenerationInput {
    pub image: Volume3D,
    pub masks: MaskSet,
}

fn generate(
    model: &TrainedModel,
    input: &GenerationInput,
    hist: Option<&[HistogramCondition]>,
    resample_jumps: usize,
    seed: u64,
) -> Result<Volume3D> {
    generate_roi_texture(
        model,
        &input.image,
        &input.masks,
        hist,
        resample_jumps,
        &mut seeded(seed),
    )
}

/// Generates `samples` outputs per input and compares all pairs within an
/// input. Histogram-conditioned models draw a fresh histogram per
/// generation.
pub fn diversity_protocol(
    model: &TrainedModel,
    bank: Option<&HistogramBank>,
    tc: &TextureControlConfig,
    inputs: &[GenerationInput],
    samples: usize,
    seed: u64,
) -> Result<DiversityReport> {
    if samples < 2 {
        return Err(LabError::Invalid(
            "diversity needs at least 2 samples per input".into(),
        ));
    }
    let mut pairs = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let mut outs = Vec::with_capacity(samples);
        for j in 0..samples {
            let s = derive_seed(seed, (i * samples + j) as u64);
            let hist = match model.config.conditioning {
                Conditioning::Histogram => {
                    let bank = bank.ok_or_else(|| {
                        LabError::MissingCheckpoint("histograms.json".into())
                    })?;
                    let mut rng = seeded(derive_seed(s, 1));
                    Some(draw_histograms(model, bank, tc.strategy, tc.centroid, &mut rng)?)
                }
                _ => None,
            };
            outs.push(generate(model, input, hist.as_deref(), 0, s)?);
        }
        let region = input.masks.foreground();
        for a in 0..samples {
            for b in a + 1..samples {
                pairs.push(SamplePair {
                    first: outs[a].clone(),
                    second: outs[b].clone(),
                    region: region.clone(),
                });
            }
        }
    }
    Ok(diversity_report(&pairs)?)
}

/// Generated lesions under a sequence of control histograms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftAnalysis {
    pub report: ShiftReport,
    /// Same data scored with `r = s = 0.5`, `p = q = 0`.
    pub baseline: ShiftReport,
    pub fit: Option<HistogramFit>,
    /// Mean generated lesion intensity per control, from voxel values.
    pub mean_intensity: Vec<f64>,
    pub generations_per_control: usize,
}

/// Runs a histogram-conditioned single-channel model under each control in
/// turn, cycling through `inputs`.
pub fn histogram_shift_protocol(
    model: &TrainedModel,
    controls: &[HistogramCondition],
    inputs: &[GenerationInput],
    generations: usize,
    seed: u64,
) -> Result<ShiftAnalysis> {
    if model.config.conditioning != Conditioning::Histogram || model.config.channels != 1 {
        return Err(LabError::Invalid(
            "histogram shift needs a single-channel histogram-conditioned model".into(),
        ));
    }
    if inputs.is_empty() || controls.is_empty() || generations == 0 {
        return Err(LabError::Invalid(
            "histogram shift needs inputs, controls and generations".into(),
        ));
    }
    let bins = model.config.bins;
    let sources: Vec<HistogramCondition> = inputs
        .iter()
        .map(|i| extract_histogram(&i.image, &i.masks.foreground(), bins, (-1.0, 1.0)))
        .collect::<std::result::Result<_, _>>()?;
    let mut cases = Vec::with_capacity(controls.len());
    let mut observations = Vec::new();
    let mut mean_intensity = Vec::with_capacity(controls.len());
    for (c, control) in controls.iter().enumerate() {
        let mut generated = Vec::with_capacity(generations);
        let mut used = Vec::with_capacity(generations);
        let (mut sum, mut count) = (0.0f64, 0usize);
        for g in 0..generations {
            let k = g % inputs.len();
            let input = &inputs[k];
            let s = derive_seed(seed, (c * generations + g) as u64);
            let out = generate(model, input, Some(std::slice::from_ref(control)), 0, s)?;
            let fg = input.masks.foreground();
            for (v, _) in fg.data().iter().enumerate().filter(|(_, &m)| m) {
                sum += out.at(v, 0) as f64;
                count += 1;
            }
            let h = extract_histogram(&out, &fg, bins, (-1.0, 1.0))?;
            observations.push(HistogramObservation {
                source: sources[k].clone(),
                control: control.clone(),
                observed: h.bins.clone(),
            });
            generated.push(h);
            used.push(sources[k].clone());
        }
        mean_intensity.push(sum / count.max(1) as f64);
        cases.push(ShiftCase {
            source: HistogramCondition::average(&used)?,
            control: control.clone(),
            generated,
        });
    }
    let fit = fit_histogram_params(&observations).ok();
    let params = fit.map(|f| f.params).unwrap_or(HistControlParams::GEOMETRIC_MEAN);
    Ok(ShiftAnalysis {
        report: histogram_shift_report(&cases, &params)?,
        baseline: histogram_shift_report(&cases, &HistControlParams::GEOMETRIC_MEAN)?,
        fit,
        mean_intensity,
        generations_per_control: generations,
    })
}

/// Strictly increasing, as required of ordered controls.
pub fn strictly_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] > w[0])
}

/// Markdown table of a segmentation run.
pub fn render_table(table: &SegmentationTable) -> String {
    let mut s = String::from("| Setting | Method | Cases |");
    for c in &table.class_names {
        s.push_str(&format!(" Dice {c} | NSD {c} |"));
    }
    s.push_str(" Mean Dice |\n|---|---|---|");
    for _ in &table.class_names {
        s.push_str("---|---|");
    }
    s.push_str("---|\n");
    for r in &table.rows {
        s.push_str(&format!("| {} | {} | {} |", r.setting, r.method, r.training_cases));
        for k in 0..table.class_names.len() {
            s.push_str(&format!(" {:.2} | {:.2} |", r.class_dice[k], r.class_nsd[k]));
        }
        s.push_str(&format!(" {:.2} ± {:.2} |\n", r.mean_dice, r.std_dice));
    }
    s
}

pub fn render_quality(entries: &[QualityEntry]) -> String {
    let mut s = String::from("| Method | Set | Cases | PSNR | SSIM |\n|---|---|---|---|---|\n");
    for e in entries {
        let p = if e.psnr_mean.is_infinite() {
            "inf".to_string()
        } else {
            format!("{:.2}", e.psnr_mean)
        };
        s.push_str(&format!(
            "| {} | {} | {} | {} | {:.2} |\n",
            e.method, e.set, e.cases, p, e.ssim_mean
        ));
    }
    s
}
