//! Case manifests: a JSON array of [`CaseRecord`]s whose paths are relative
//! to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use lesion_synth_core::phantom::CaseRole;
use lesion_synth_core::{BinaryMask, MaskSet, Volume3D};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::lvol;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub id: String,
    pub volume_path: String,
    /// One file per lesion class, in class order.
    pub mask_paths: Vec<String>,
    pub role: CaseRole,
    pub provenance: String,
    pub seed: u64,
    #[serde(default)]
    pub split: Split,
    /// Generating method; required for synthetic records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    /// Synthetic set label such as `P'`, `N'` or `N''`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set: Option<String>,
    /// Case the synthetic record was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    /// Texture peak drawn per class (phantoms only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub peak_indices: Vec<Option<usize>>,
    /// Region lesions may occupy, e.g. the organ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_path: Option<String>,
}

/// A loaded case.
#[derive(Debug, Clone)]
pub struct CaseData {
    pub volume: Volume3D,
    pub masks: MaskSet,
    pub boundary: Option<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub cases: Vec<CaseRecord>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            cases: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let cases: Vec<CaseRecord> =
            serde_json::from_str(&text).map_err(|e| LabError::format(path, e.to_string()))?;
        let m = Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            cases,
        };
        m.validate().map_err(|e| LabError::format(path, e.to_string()))?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.cases {
            if !ids.insert(c.id.as_str()) {
                return Err(LabError::Invalid(format!("duplicate case id {}", c.id)));
            }
            if c.role == CaseRole::Synthetic && c.method.is_none() {
                return Err(LabError::Invalid(format!(
                    "synthetic case {} has no method",
                    c.id
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.cases).expect("records serialize");
        s.push('\n');
        s
    }

    /// Writes the manifest and rebases it onto the file's directory.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.validate()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| LabError::io(path, e))?;
        self.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(())
    }

    /// SHA-256 of the serialized records.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn get(&self, id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn select(&self, split: Split, role: CaseRole) -> Vec<&CaseRecord> {
        self.cases
            .iter()
            .filter(|c| c.split == split && c.role == role)
            .collect()
    }

    pub fn load_case(&self, record: &CaseRecord) -> Result<CaseData> {
        let volume = lvol::load_volume(&self.resolve(&record.volume_path))?;
        let paths: Vec<PathBuf> = record.mask_paths.iter().map(|p| self.resolve(p)).collect();
        let masks = lvol::load_mask_set(&paths)?;
        if masks.dims() != volume.spatial() {
            return Err(LabError::Invalid(format!(
                "case {}: masks {:?} vs volume {:?}",
                record.id,
                masks.dims(),
                volume.spatial()
            )));
        }
        let boundary = match &record.boundary_path {
            Some(p) => Some(lvol::load_mask(&self.resolve(p))?.0),
            None => None,
        };
        Ok(CaseData {
            volume,
            masks,
            boundary,
        })
    }

    /// Class names of the first case; every case must agree.
    pub fn class_names(&self) -> Result<Vec<String>> {
        let first = self
            .cases
            .first()
            .ok_or_else(|| LabError::Invalid("manifest is empty".into()))?;
        let mut names = Vec::new();
        for p in &first.mask_paths {
            let h = lvol::read_header(&self.resolve(p))?;
            names.push(
                h.class_names
                    .and_then(|n| n.into_iter().next())
                    .unwrap_or_else(|| format!("class_{}", names.len())),
            );
        }
        Ok(names)
    }
}

/// Writes a case's files under `dir` and returns its record paths relative
/// to `root`.
pub fn write_case_files(
    root: &Path,
    dir: &str,
    id: &str,
    volume: &Volume3D,
    masks: &MaskSet,
    boundary: Option<&BinaryMask>,
) -> Result<(String, Vec<String>, Option<String>)> {
    let rel = |name: String| format!("{dir}/{name}");
    let vol = rel(format!("{id}_image"));
    lvol::save_volume(volume, &root.join(&vol))?;
    let mut masks_out = Vec::with_capacity(masks.n());
    for (i, m) in masks.masks().iter().enumerate() {
        let name = &masks.class_names()[i];
        let p = rel(format!("{id}_mask_{name}"));
        lvol::save_mask(m, name, volume.spacing(), &root.join(&p))?;
        masks_out.push(format!("{p}.json"));
    }
    let boundary = match boundary {
        Some(b) => {
            let p = rel(format!("{id}_boundary"));
            lvol::save_mask(b, "boundary", volume.spacing(), &root.join(&p))?;
            Some(format!("{p}.json"))
        }
        None => None,
    };
    Ok((format!("{vol}.json"), masks_out, boundary))
}
