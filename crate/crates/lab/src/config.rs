//! Experiment configuration, read from TOML. Every section and key is
//! optional; unknown keys are rejected.

use std::fs;
use std::path::Path;

use lesion_synth_core::baselines::{baseline_recipe, HandcraftParams};
use lesion_synth_core::phantom::PhantomSpec;
use lesion_synth_core::segment::SegmenterConfig;
use lesion_synth_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: String,
    pub seed: u64,
    pub data: DataConfig,
    pub engine: EngineConfig,
    pub texture_control: TextureControlConfig,
    pub diffmask: DiffMaskConfig,
    pub baselines: BaselinesConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: "runs/default".into(),
            seed: 0,
            data: DataConfig::default(),
            engine: EngineConfig::default(),
            texture_control: TextureControlConfig::default(),
            diffmask: DiffMaskConfig::default(),
            baselines: BaselinesConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `lung` or `cardiac`.
    pub preset: String,
    /// Replaces the preset entirely when set.
    pub phantom: Option<PhantomSpec>,
    /// Pathological cases in total, test cases included.
    pub pathological: usize,
    pub normal: usize,
    /// Pathological cases held out for testing.
    pub test_pathological: usize,
    /// Crop size `(D, H, W)` for texture and mask models; the preset's
    /// default when unset.
    pub roi: Option<[usize; 3]>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: "lung".into(),
            phantom: None,
            pathological: 32,
            normal: 8,
            test_pathological: 8,
            roi: None,
        }
    }
}

impl DataConfig {
    pub fn phantom_spec(&self) -> Result<PhantomSpec> {
        let spec = match &self.phantom {
            Some(s) => s.clone(),
            None => PhantomSpec::preset(&self.preset)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Lung crops half the phantom extent around each lesion; other presets
    /// use the whole volume.
    pub fn roi_size(&self) -> Result<[usize; 3]> {
        if let Some(r) = self.roi {
            return Ok(r);
        }
        let dims = self.phantom_spec()?.dims;
        Ok(match self.preset.as_str() {
            "lung" => dims.map(|d| (d / 2).max(2)),
            _ => dims,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Texture method used when a command does not name one.
    pub method: String,
    /// Hyperparameters. The method recipe overrides `loss`, `conditioning`,
    /// `sampler` and `channels`.
    pub train: TrainConfig,
    pub resample_jumps: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            method: "lefusion".into(),
            train: TrainConfig {
                steps: 100,
                epochs: 200,
                ..TrainConfig::default()
            },
            resample_jumps: 0,
        }
    }
}

/// Which histogram a conditioned model receives at synthesis time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramSource {
    ClusterCentroid,
    DonorLesion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureControlConfig {
    pub bins: usize,
    pub token_group: usize,
    pub clusters: usize,
    pub strategy: HistogramSource,
    /// Fixed centroid index; a random centroid per generation when unset.
    pub centroid: Option<usize>,
}

impl Default for TextureControlConfig {
    fn default() -> Self {
        Self {
            bins: lesion_synth_core::texture::DEFAULT_BINS,
            token_group: lesion_synth_core::texture::DEFAULT_GROUP,
            clusters: 3,
            strategy: HistogramSource::ClusterCentroid,
            centroid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffMaskConfig {
    pub train: TrainConfig,
    pub kernel: usize,
    pub threshold: f32,
    /// Overlap priority, first wins; later classes first when unset.
    pub priority: Option<Vec<usize>>,
}

impl Default for DiffMaskConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                steps: 100,
                epochs: 40,
                ..TrainConfig::default()
            },
            kernel: 3,
            threshold: 0.0,
            priority: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselinesConfig {
    pub handcraft: HandcraftParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub segmenter: SegmenterConfig,
    /// Training-set rows such as `P`, `P+N'` or `P+P'+N''`.
    pub settings: Vec<String>,
    pub seeds: Vec<u64>,
    pub nsd_tau: f64,
    /// Inputs for the diversity protocol; zero disables it.
    pub diversity_inputs: usize,
    /// Generations per diversity input; pairs are all combinations.
    pub diversity_samples: usize,
    /// Generations per control for the histogram-shift report; zero disables it.
    pub shift_generations: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            segmenter: SegmenterConfig::default(),
            settings: vec!["P".into(), "P+N'".into()],
            seeds: vec![0, 1, 2],
            nsd_tau: lesion_synth_core::metrics::DEFAULT_NSD_TAU,
            diversity_inputs: 10,
            diversity_samples: 5,
            shift_generations: 20,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        self.data
            .phantom_spec()
            .map_err(|e| LabError::Config(e.to_string()))?;
        let roi = self.data.roi_size()?;
        if roi.contains(&0) {
            return bad(format!("roi {roi:?} must be positive"));
        }
        baseline_recipe(&self.engine.method).map_err(|e| LabError::Config(e.to_string()))?;
        self.engine
            .train
            .validate()
            .map_err(|e| LabError::Config(format!("engine.train: {e}")))?;
        self.diffmask
            .train
            .validate()
            .map_err(|e| LabError::Config(format!("diffmask.train: {e}")))?;
        self.baselines
            .handcraft
            .validate()
            .map_err(|e| LabError::Config(format!("baselines.handcraft: {e}")))?;
        let tc = &self.texture_control;
        if tc.token_group == 0 || tc.bins < 2 || !tc.bins.is_multiple_of(tc.token_group) {
            return bad("texture_control: token_group must divide bins".into());
        }
        if tc.clusters == 0 {
            return bad("texture_control.clusters must be positive".into());
        }
        if self.diffmask.kernel.is_multiple_of(2) {
            return bad("diffmask.kernel must be odd".into());
        }
        for s in &self.evaluation.settings {
            crate::evaluate::parse_setting(s).map_err(|e| LabError::Config(e.to_string()))?;
        }
        if self.data.test_pathological > self.data.pathological {
            return bad("data.test_pathological exceeds data.pathological".into());
        }
        if self.evaluation.nsd_tau.is_nan() || self.evaluation.nsd_tau < 0.0 {
            return bad("evaluation.nsd_tau must be non-negative".into());
        }
        Ok(())
    }

    /// Engine settings for `method`: the method recipe with this config's
    /// hyperparameters.
    pub fn texture_train_config(&self, method: &str) -> Result<TrainConfig> {
        let recipe = baseline_recipe(method)?;
        Ok(TrainConfig {
            loss: recipe.loss,
            conditioning: recipe.conditioning,
            sampler: recipe.sampler,
            channels: recipe.channels,
            bins: self.texture_control.bins,
            token_group: self.texture_control.token_group,
            seed: self.engine.train.seed ^ self.seed,
            ..self.engine.train.clone()
        })
    }

    pub fn mask_train_config(&self, classes: usize) -> TrainConfig {
        TrainConfig {
            channels: classes,
            seed: self.diffmask.train.seed ^ self.seed,
            ..self.diffmask.train.clone()
        }
    }

    /// Overlap priority for `classes` mask channels.
    pub fn mask_priority(&self, classes: usize) -> Vec<usize> {
        self.diffmask
            .priority
            .clone()
            .unwrap_or_else(|| (0..classes).rev().collect())
    }
}
