//! Checkpoint directories: `weights.bin` (flat little-endian `f32`) plus a
//! `checkpoint.json` sidecar describing how to rebuild the network.

use std::fs;
use std::path::Path;

use lesion_synth_core::nn::Denoiser;
use lesion_synth_core::rng::seeded;
use lesion_synth_core::schedule::ScheduleKind;
use lesion_synth_core::segment::{Segmenter, SegmenterConfig};
use lesion_synth_core::train::{TrainConfig, TrainedModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const META_FILE: &str = "checkpoint.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Texture,
    Mask,
    Segmenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    pub kind: ScheduleKind,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmenter: Option<SegmenterConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleInfo>,
    pub class_names: Vec<String>,
    /// Spatial size the model was trained on.
    pub roi: [usize; 3],
    pub loss_trace: Vec<f64>,
    pub seed: u64,
    pub param_count: usize,
    pub weights_sha256: String,
}

fn write_weights(dir: &Path, flat: &[f32]) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut bytes = Vec::with_capacity(flat.len() * 4);
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join(WEIGHTS_FILE);
    fs::write(&path, &bytes).map_err(|e| LabError::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_meta(dir: &Path, meta: &CheckpointMeta) -> Result<()> {
    let mut s = serde_json::to_string_pretty(meta).expect("meta serializes");
    s.push('\n');
    let path = dir.join(META_FILE);
    fs::write(&path, s).map_err(|e| LabError::io(&path, e))
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LabError::MissingCheckpoint(dir.to_path_buf()),
        _ => LabError::io(&path, e),
    })?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| LabError::format(&path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(LabError::format(
            &path,
            format!("unsupported format_version {}", meta.format_version),
        ));
    }
    Ok(meta)
}

fn read_weights(dir: &Path, expected: usize) -> Result<Vec<f32>> {
    let path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LabError::MissingCheckpoint(dir.to_path_buf()),
        _ => LabError::io(&path, e),
    })?;
    if bytes.len() != expected * 4 {
        return Err(LabError::PayloadSize {
            path,
            expected: expected * 4,
            actual: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Saves a texture or mask diffusion model.
pub fn save_diffusion(
    dir: &Path,
    model: &TrainedModel,
    domain: Domain,
    method: Option<&str>,
    class_names: &[String],
    roi: [usize; 3],
) -> Result<CheckpointMeta> {
    if domain == Domain::Segmenter {
        return Err(LabError::Invalid("use save_segmenter for segmenters".into()));
    }
    let flat = model.denoiser.store.flatten();
    let sha = write_weights(dir, &flat)?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        domain,
        method: method.map(str::to_string),
        config: Some(model.config.clone()),
        segmenter: None,
        schedule: Some(ScheduleInfo {
            kind: model.schedule.kind(),
            steps: model.schedule.steps(),
        }),
        class_names: class_names.to_vec(),
        roi,
        loss_trace: model.loss_trace.clone(),
        seed: model.config.seed,
        param_count: flat.len(),
        weights_sha256: sha,
    };
    write_meta(dir, &meta)?;
    Ok(meta)
}

pub fn load_diffusion(dir: &Path, domain: Domain) -> Result<(TrainedModel, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    if meta.domain != domain {
        return Err(LabError::Invalid(format!(
            "{}: expected a {domain:?} checkpoint, found {:?}",
            dir.display(),
            meta.domain
        )));
    }
    let config = meta
        .config
        .clone()
        .ok_or_else(|| LabError::format(dir.join(META_FILE), "missing config"))?;
    let contract = match domain {
        Domain::Texture => config.texture_contract(),
        _ => config.mask_contract(),
    };
    // initial values are overwritten by the stored weights
    let mut denoiser = Denoiser::new(
        contract,
        config.base_width,
        config.levels,
        config.groups,
        &mut seeded(0),
    )?;
    let flat = read_weights(dir, denoiser.store.scalar_count())?;
    denoiser.store.load_flat(&flat)?;
    let schedule = config.build_schedule()?;
    if let Some(s) = &meta.schedule {
        if s.kind != schedule.kind() || s.steps != schedule.steps() {
            return Err(LabError::format(
                dir.join(META_FILE),
                "schedule disagrees with config",
            ));
        }
    }
    let model = TrainedModel {
        denoiser,
        schedule,
        config,
        loss_trace: meta.loss_trace.clone(),
    };
    Ok((model, meta))
}

pub fn save_segmenter(dir: &Path, seg: &Segmenter, roi: [usize; 3]) -> Result<CheckpointMeta> {
    let flat = seg.store.flatten();
    let sha = write_weights(dir, &flat)?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        domain: Domain::Segmenter,
        method: None,
        config: None,
        segmenter: Some(seg.config.clone()),
        schedule: None,
        class_names: seg.class_names.clone(),
        roi,
        loss_trace: seg.loss_trace.clone(),
        seed: seg.config.seed,
        param_count: flat.len(),
        weights_sha256: sha,
    };
    write_meta(dir, &meta)?;
    Ok(meta)
}

pub fn load_segmenter(dir: &Path) -> Result<(Segmenter, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let config = match (&meta.domain, &meta.segmenter) {
        (Domain::Segmenter, Some(c)) => c.clone(),
        _ => {
            return Err(LabError::Invalid(format!(
                "{} is not a segmenter checkpoint",
                dir.display()
            )))
        }
    };
    let mut seg = Segmenter::untrained(&config, meta.class_names.clone())?;
    let flat = read_weights(dir, seg.store.scalar_count())?;
    seg.store.load_flat(&flat)?;
    seg.loss_trace = meta.loss_trace.clone();
    Ok((seg, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lesion_synth_core::diffusion::{predict_noise, Condition};
    use lesion_synth_core::rng::normal_volume;

    fn tiny_model() -> TrainedModel {
        let config = TrainConfig {
            steps: 4,
            base_width: 4,
            levels: 1,
            groups: 2,
            ..TrainConfig::default()
        };
        let mut denoiser = Denoiser::new(
            config.texture_contract(),
            config.base_width,
            config.levels,
            config.groups,
            &mut seeded(3),
        )
        .unwrap();
        // perturb so the zero-initialised head gives nonzero output
        for (i, v) in denoiser.store.values_mut().iter_mut().flatten().enumerate() {
            *v += ((i % 7) as f32 - 3.0) * 0.01;
        }
        TrainedModel {
            denoiser,
            schedule: config.build_schedule().unwrap(),
            config,
            loss_trace: vec![1.0, 0.5],
        }
    }

    #[test]
    fn diffusion_round_trip_predicts_identically() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_model();
        let names = vec!["nodule".to_string()];
        save_diffusion(dir.path(), &m, Domain::Texture, Some("lefusion"), &names, [2, 2, 2]).unwrap();
        let (back, meta) = load_diffusion(dir.path(), Domain::Texture).unwrap();
        assert_eq!(meta.loss_trace, vec![1.0, 0.5]);
        assert_eq!(back.denoiser.store.flatten(), m.denoiser.store.flatten());
        let x = normal_volume([2, 2, 2, 1], &mut seeded(1));
        let a = predict_noise(&m.denoiser, &x, 2, &Condition::none()).unwrap();
        let b = predict_noise(&back.denoiser, &x, 2, &Condition::none()).unwrap();
        assert_eq!(a, b);
        assert!(load_diffusion(dir.path(), Domain::Mask).is_err());
    }

    #[test]
    fn missing_directory_is_missing_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_diffusion(&dir.path().join("none"), Domain::Texture),
            Err(LabError::MissingCheckpoint(_))
        ));
    }
}
