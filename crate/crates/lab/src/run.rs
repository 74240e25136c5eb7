//! Commands operating on a run directory:
//!
//! ```text
//! <run>/config.lock      effective configuration
//! <run>/data/            phantom cases and manifest.json
//! <run>/checkpoints/     texture_<method>/, mask/, histograms.json, segmenter/
//! <run>/synth/           <method>_<set>/manifest.json
//! <run>/reports/         JSON reports and markdown tables
//! <run>/figures/         PNG figures
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lesion_synth_core::phantom::CaseRole;
use lesion_synth_core::train::{train_mask, train_texture, Conditioning};
use serde::Serialize;

use crate::checkpoint::{self, Domain};
use crate::config::ExperimentConfig;
use crate::dataset::{
    build_histogram_bank, crop_case, generate_phantom_dataset, lesion_roi, mask_examples,
    texture_examples, CaseCounts, HistogramBank, MANIFEST_FILE, PAD_VALUE,
};
use crate::error::{LabError, Result};
use crate::evaluate::{
    diversity_protocol, histogram_shift_protocol, quality_report, render_quality, render_table,
    run_setting, serialize_psnr, GenerationInput, QualityEntry, SegmentationTable, ShiftAnalysis,
    SyntheticPool, REPORT_SCHEMA_VERSION,
};
use crate::figures;
use crate::manifest::{Manifest, Split};
use crate::synth::{is_diffusion_method, synthesize, SynthModels, SynthRequest, SynthSet};

pub const LOCK_FILE: &str = "config.lock";
pub const BANK_FILE: &str = "histograms.json";

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join(LOCK_FILE)
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn synth(&self) -> PathBuf {
        self.root.join("synth")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }
    pub fn manifest(&self) -> PathBuf {
        self.data().join(MANIFEST_FILE)
    }
    pub fn texture_checkpoint(&self, method: &str) -> PathBuf {
        self.checkpoints().join(format!("texture_{method}"))
    }
    pub fn mask_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("mask")
    }
    pub fn bank(&self) -> PathBuf {
        self.checkpoints().join(BANK_FILE)
    }
    pub fn synth_dir(&self, method: &str, set: SynthSet) -> PathBuf {
        self.synth().join(format!("{method}_{}", set.slug()))
    }

    /// Creates the layout and records `cfg` in `config.lock`. An existing
    /// lock must match.
    pub fn prepare(&self, cfg: &ExperimentConfig) -> Result<()> {
        for d in [
            self.root.clone(),
            self.checkpoints(),
            self.synth(),
            self.reports(),
            self.figures(),
        ] {
            fs::create_dir_all(&d).map_err(|e| LabError::io(&d, e))?;
        }
        let text = cfg.to_toml();
        let lock = self.lock();
        match fs::read_to_string(&lock) {
            Ok(existing) => {
                let prev = ExperimentConfig::from_toml(&existing)?;
                if &prev != cfg {
                    return Err(LabError::Config(format!(
                        "{} was created with a different configuration",
                        self.root.display()
                    )));
                }
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                fs::write(&lock, text).map_err(|e| LabError::io(&lock, e))
            }
            Err(e) => Err(LabError::io(&lock, e)),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| LabError::io(p, e))?;
    }
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    fs::write(path, s).map_err(|e| LabError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

pub fn cmd_phantom_gen(cfg: &ExperimentConfig, run: &RunDir) -> Result<PathBuf> {
    run.prepare(cfg)?;
    let spec = cfg.data.phantom_spec()?;
    let counts = CaseCounts {
        pathological: cfg.data.pathological,
        normal: cfg.data.normal,
        test_pathological: cfg.data.test_pathological,
    };
    let label = if cfg.data.phantom.is_some() {
        "custom"
    } else {
        cfg.data.preset.as_str()
    };
    generate_phantom_dataset(&spec, counts, cfg.seed, label, &run.data())?;
    Ok(run.manifest())
}

pub fn cmd_hist_cluster(cfg: &ExperimentConfig, run: &RunDir, manifest: &Path) -> Result<PathBuf> {
    run.prepare(cfg)?;
    let m = Manifest::load(manifest)?;
    let tc = &cfg.texture_control;
    let bank = build_histogram_bank(&m, tc.bins, tc.clusters, cfg.seed)?;
    bank.save(&run.bank())?;
    Ok(run.bank())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainKind {
    Texture,
    Mask,
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    run: &RunDir,
    kind: TrainKind,
    method: &str,
    manifest: &Path,
) -> Result<PathBuf> {
    run.prepare(cfg)?;
    let m = Manifest::load(manifest)?;
    let roi = cfg.data.roi_size()?;
    let classes = m.class_names()?;
    match kind {
        TrainKind::Texture => {
            let tc = cfg.texture_train_config(method)?;
            let examples = texture_examples(&m, roi)?;
            let model = train_texture(&examples, &tc)?;
            let dir = run.texture_checkpoint(method);
            checkpoint::save_diffusion(&dir, &model, Domain::Texture, Some(method), &classes, roi)?;
            Ok(dir)
        }
        TrainKind::Mask => {
            let tc = cfg.mask_train_config(classes.len());
            let examples = mask_examples(&m, roi)?;
            let model = train_mask(&examples, &tc)?;
            let dir = run.mask_checkpoint();
            checkpoint::save_diffusion(&dir, &model, Domain::Mask, Some("diffmask"), &classes, roi)?;
            Ok(dir)
        }
    }
}

/// Loads whatever the request needs from the run's checkpoints.
pub fn load_synth_models(run: &RunDir, req: &SynthRequest) -> Result<SynthModels> {
    let mut models = SynthModels::default();
    if is_diffusion_method(&req.method) {
        let (model, _) =
            checkpoint::load_diffusion(&run.texture_checkpoint(&req.method), Domain::Texture)?;
        if model.config.conditioning == Conditioning::Histogram {
            models.bank = Some(HistogramBank::load(&run.bank())?);
        }
        models.texture = Some(model);
    }
    if req.set != SynthSet::PPrime
        && req.mask_source == crate::synth::MaskSource::DiffMask
        && req.method != "copy_paste"
    {
        models.mask = Some(checkpoint::load_diffusion(&run.mask_checkpoint(), Domain::Mask)?.0);
    }
    Ok(models)
}

pub fn cmd_synth(
    cfg: &ExperimentConfig,
    run: &RunDir,
    req: &SynthRequest,
    manifest: &Path,
) -> Result<PathBuf> {
    run.prepare(cfg)?;
    let m = Manifest::load(manifest)?;
    let models = load_synth_models(run, req)?;
    let dir = run.synth_dir(&req.method, req.set);
    synthesize(cfg, &m, req, &models, &dir)?;
    Ok(dir.join(MANIFEST_FILE))
}

/// Diversity of one texture model.
#[derive(Debug, Clone, Serialize)]
pub struct DiversityEntry {
    pub method: String,
    pub pairs: usize,
    #[serde(serialize_with = "serialize_psnr")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalInputs {
    /// Synthetic manifests; discovered under `synth/` when empty.
    pub synth: Vec<PathBuf>,
    /// Overrides the configured settings when nonempty.
    pub settings: Vec<String>,
    /// Texture checkpoints for diversity and histogram shift; discovered
    /// under `checkpoints/` when empty.
    pub texture_checkpoints: Vec<PathBuf>,
}

fn discover(dir: &Path, prefix: &str, file: Option<&str>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(out);
    };
    for e in entries {
        let e = e.map_err(|err| LabError::io(dir, err))?;
        let name = e.file_name().to_string_lossy().to_string();
        if !name.starts_with(prefix) || !e.path().is_dir() {
            continue;
        }
        let p = match file {
            Some(f) => e.path().join(f),
            None => e.path(),
        };
        if file.is_none() || p.exists() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Normal cases with donor lesion masks, cropped to the model ROI. Falls
/// back to test pathological cases when the manifest has no normals.
pub fn generation_inputs(
    manifest: &Manifest,
    roi: [usize; 3],
    count: usize,
) -> Result<Vec<GenerationInput>> {
    let donors = crate::dataset::training_cases(manifest)?;
    let normals = manifest.select(Split::Train, CaseRole::Normal);
    let mut out = Vec::with_capacity(count);
    if !normals.is_empty() && !donors.is_empty() {
        for i in 0..count {
            let n = manifest.load_case(normals[i % normals.len()])?;
            let (_, d) = &donors[i % donors.len()];
            let r = lesion_roi(&d.masks, roi);
            out.push(GenerationInput {
                image: lesion_synth_core::volume::crop_pad_roi(&n.volume, &r, PAD_VALUE)?,
                masks: lesion_synth_core::volume::crop_mask_set(&d.masks, &r),
            });
        }
        return Ok(out);
    }
    let tests = manifest.select(Split::Test, CaseRole::Pathological);
    if tests.is_empty() {
        return Err(LabError::Invalid("no cases to generate from".into()));
    }
    for i in 0..count {
        let c = manifest.load_case(tests[i % tests.len()])?;
        let (image, masks, _) = crop_case(&c, roi)?;
        out.push(GenerationInput { image, masks });
    }
    Ok(out)
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    run: &RunDir,
    manifest: &Path,
    inputs: &EvalInputs,
) -> Result<PathBuf> {
    run.prepare(cfg)?;
    let real = Manifest::load(manifest)?;
    if real.select(Split::Test, CaseRole::Pathological).is_empty() {
        return Err(LabError::Invalid(format!(
            "{} has no test split",
            manifest.display()
        )));
    }
    let synth_paths = if inputs.synth.is_empty() {
        discover(&run.synth(), "", Some(MANIFEST_FILE))?
    } else {
        inputs.synth.clone()
    };
    let synth: Vec<Manifest> = synth_paths
        .iter()
        .map(|p| Manifest::load(p))
        .collect::<Result<_>>()?;
    let mut pool: SyntheticPool<'_> = BTreeMap::new();
    for (m, p) in synth.iter().zip(&synth_paths) {
        let mut labels: Vec<SynthSet> = m
            .cases
            .iter()
            .filter_map(|c| c.set.as_deref().and_then(|s| s.parse().ok()))
            .collect();
        labels.dedup();
        for l in labels {
            if pool.insert(l, m).is_some() {
                return Err(LabError::Invalid(format!(
                    "several manifests provide {l} (e.g. {}); pass --synth explicitly",
                    p.display()
                )));
            }
        }
    }
    let settings = if inputs.settings.is_empty() {
        cfg.evaluation.settings.clone()
    } else {
        inputs.settings.clone()
    };
    let ev = &cfg.evaluation;
    let mut rows = Vec::with_capacity(settings.len());
    for setting in &settings {
        let slug: String = setting
            .chars()
            .map(|c| match c {
                '\'' => 'p',
                '+' => '_',
                c => c,
            })
            .collect();
        let seg_root = run.checkpoints().join("segmenter");
        let row = run_setting(
            &real,
            &pool,
            setting,
            &ev.segmenter,
            &ev.seeds,
            ev.nsd_tau,
            |seed, seg| {
                let dir = seg_root.join(format!("{slug}_seed{seed}"));
                checkpoint::save_segmenter(&dir, seg, real_dims(&real)?)?;
                Ok(())
            },
        )?;
        rows.push(row);
    }
    let table = SegmentationTable {
        schema_version: REPORT_SCHEMA_VERSION,
        manifest_hash: real.hash(),
        class_names: real.class_names()?,
        rows,
    };
    write_json(&run.reports().join("segmentation.json"), &table)?;
    write_text(&run.reports().join("segmentation.md"), &render_table(&table))?;

    let mut quality: Vec<QualityEntry> = Vec::new();
    for m in &synth {
        quality.extend(quality_report(&real, m)?);
    }
    write_json(&run.reports().join("quality.json"), &quality)?;
    write_text(&run.reports().join("quality.md"), &render_quality(&quality))?;

    let ckpts = if inputs.texture_checkpoints.is_empty() {
        discover(&run.checkpoints(), "texture_", None)?
    } else {
        inputs.texture_checkpoints.clone()
    };
    let mut diversity = Vec::new();
    let mut shifts: BTreeMap<String, ShiftAnalysis> = BTreeMap::new();
    for dir in &ckpts {
        let (model, meta) = checkpoint::load_diffusion(dir, Domain::Texture)?;
        let method = meta.method.clone().unwrap_or_else(|| "texture".into());
        let bank = if model.config.conditioning == Conditioning::Histogram {
            Some(HistogramBank::load(&run.bank())?)
        } else {
            None
        };
        if ev.diversity_inputs > 0 && ev.diversity_samples >= 2 {
            let gi = generation_inputs(&real, meta.roi, ev.diversity_inputs)?;
            let r = diversity_protocol(
                &model,
                bank.as_ref(),
                &cfg.texture_control,
                &gi,
                ev.diversity_samples,
                cfg.seed,
            )?;
            diversity.push(DiversityEntry {
                method: method.clone(),
                pairs: r.pairs,
                mean_psnr: r.mean_psnr,
                mean_ssim: r.mean_ssim,
            });
        }
        if let (Some(bank), true) = (&bank, ev.shift_generations > 0 && model.config.channels == 1)
        {
            let gi = generation_inputs(&real, meta.roi, ev.shift_generations)?;
            let a = histogram_shift_protocol(
                &model,
                &bank.union.centroids,
                &gi,
                ev.shift_generations,
                cfg.seed,
            )?;
            shifts.insert(method, a);
        }
    }
    write_json(&run.reports().join("diversity.json"), &diversity)?;
    write_json(&run.reports().join("histogram_shift.json"), &shifts)?;
    cmd_report(cfg, run, manifest)?;
    Ok(run.reports())
}

fn real_dims(m: &Manifest) -> Result<[usize; 3]> {
    let first = m
        .cases
        .first()
        .ok_or_else(|| LabError::Invalid("manifest is empty".into()))?;
    let h = crate::lvol::read_header(&m.resolve(&first.volume_path))?;
    Ok([h.dims[0], h.dims[1], h.dims[2]])
}

fn read_value(path: &Path) -> Result<Option<serde_json::Value>> {
    match fs::read_to_string(path) {
        Ok(t) => serde_json::from_str(&t)
            .map(Some)
            .map_err(|e| LabError::format(path, e.to_string())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(LabError::io(path, e)),
    }
}

fn fmt_num(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Number(n) => format!("{:.2}", n.as_f64().unwrap_or(f64::NAN)),
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Renders `reports/summary.md` from the JSON reports and draws figures
/// for every synthetic manifest and histogram-shift report.
pub fn cmd_report(cfg: &ExperimentConfig, run: &RunDir, manifest: &Path) -> Result<PathBuf> {
    run.prepare(cfg)?;
    let mut out = String::from("# Run summary\n\n");
    if let Some(v) = read_value(&run.reports().join("segmentation.json"))? {
        out.push_str("## Downstream segmentation\n\n| Setting | Method | Mean Dice | Std | Mean NSD |\n|---|---|---|---|---|\n");
        for r in v["rows"].as_array().into_iter().flatten() {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r["setting"].as_str().unwrap_or(""),
                r["method"].as_str().unwrap_or(""),
                fmt_num(&r["mean_dice"]),
                fmt_num(&r["std_dice"]),
                fmt_num(&r["mean_nsd"]),
            ));
        }
        out.push('\n');
    }
    if let Some(v) = read_value(&run.reports().join("quality.json"))? {
        out.push_str("## Image quality\n\n| Method | Set | PSNR | SSIM |\n|---|---|---|---|\n");
        for e in v.as_array().into_iter().flatten() {
            out.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                e["method"].as_str().unwrap_or(""),
                e["set"].as_str().unwrap_or(""),
                fmt_num(&e["psnr_mean"]),
                fmt_num(&e["ssim_mean"]),
            ));
        }
        out.push('\n');
    }
    if let Some(v) = read_value(&run.reports().join("diversity.json"))? {
        out.push_str("## Diversity (lower is more diverse)\n\n| Method | Pairs | PSNR | SSIM |\n|---|---|---|---|\n");
        for e in v.as_array().into_iter().flatten() {
            out.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                e["method"].as_str().unwrap_or(""),
                e["pairs"],
                fmt_num(&e["mean_psnr"]),
                fmt_num(&e["mean_ssim"]),
            ));
        }
        out.push('\n');
    }
    if let Some(v) = read_value(&run.reports().join("histogram_shift.json"))? {
        for (method, a) in v.as_object().into_iter().flatten() {
            out.push_str(&format!(
                "## Histogram control: {method}\n\nmonotone: {}\n\n| Control | Control mean | Generated mean | L1 gap |\n|---|---|---|---|\n",
                a["report"]["monotone"]
            ));
            for (i, e) in a["report"]["entries"].as_array().into_iter().flatten().enumerate() {
                out.push_str(&format!(
                    "| {i} | {} | {} | {} |\n",
                    fmt_num(&e["control_mean"]),
                    fmt_num(&e["generated_mean"]),
                    fmt_num(&e["l1_gap"]),
                ));
                let hist = |k: &str| -> Option<lesion_synth_core::texture::HistogramCondition> {
                    serde_json::from_value(e[k].clone()).ok()
                };
                if let (Some(g), Some(p)) = (hist("generated_mean_histogram"), hist("predicted")) {
                    figures::histogram_plot(
                        &[&g, &p],
                        &run.figures().join(format!("shift_{method}_{i}.png")),
                    )?;
                }
            }
            out.push('\n');
        }
    }
    let real = Manifest::load(manifest)?;
    for dir in discover(&run.synth(), "", Some(MANIFEST_FILE))? {
        let m = Manifest::load(&dir)?;
        let name = dir
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default();
        let mut tiles = Vec::new();
        for r in m.cases.iter().take(4) {
            let s = m.load_case(r)?;
            let src = match r.source_id.as_deref().and_then(|id| real.get(id)) {
                Some(rec) => Some(real.load_case(rec)?),
                None => None,
            };
            tiles.push((src, s));
        }
        let mut refs = Vec::new();
        let fgs: Vec<_> = tiles.iter().map(|(_, s)| s.masks.foreground()).collect();
        for ((src, s), fg) in tiles.iter().zip(&fgs) {
            if let Some(src) = src {
                refs.push((&src.volume, Some(fg)));
            }
            refs.push((&s.volume, Some(fg)));
        }
        if !refs.is_empty() {
            figures::slice_montage(&refs, &run.figures().join(format!("montage_{name}.png")))?;
        }
    }
    let path = run.reports().join("summary.md");
    write_text(&path, &out)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path().join("r"));
        let cfg = ExperimentConfig::default();
        run.prepare(&cfg).unwrap();
        run.prepare(&cfg).unwrap();
        let mut other = cfg.clone();
        other.seed = 9;
        assert!(matches!(run.prepare(&other), Err(LabError::Config(_))));
        for d in ["checkpoints", "synth", "reports", "figures"] {
            assert!(run.root.join(d).is_dir());
        }
    }
}
