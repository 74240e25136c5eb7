//! LVOL volumes: a JSON header `<name>.json` next to a raw little-endian
//! `f32` payload `<name>.raw`, voxels ordered `(z, y, x, channel)`.

use std::fs;
use std::path::{Path, PathBuf};

use lesion_synth_core::{BinaryMask, MaskSet, Volume3D};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LvolHeader {
    pub format_version: u32,
    /// `[D, H, W, C]`; a three-entry form implies `C = channels`.
    pub dims: Vec<usize>,
    pub spacing: [f64; 3],
    pub dtype: String,
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity_range: Option<(f32, f32)>,
}

impl LvolHeader {
    fn full_dims(&self, path: &Path) -> Result<[usize; 4]> {
        let d = &self.dims;
        let dims = match d.len() {
            3 => [d[0], d[1], d[2], self.channels],
            4 => [d[0], d[1], d[2], d[3]],
            n => {
                return Err(LabError::format(
                    path,
                    format!("dims needs 3 or 4 entries, got {n}"),
                ))
            }
        };
        if dims[3] != self.channels {
            return Err(LabError::format(
                path,
                format!("dims has {} channels, header says {}", dims[3], self.channels),
            ));
        }
        Ok(dims)
    }
}

/// `(header, payload)` paths for `path`, which may name either file or the
/// shared stem.
pub fn lvol_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut header = stem.clone().into_os_string();
    header.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (header.into(), raw.into())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn save_volume(volume: &Volume3D, path: &Path) -> Result<()> {
    save_with_classes(volume, None, path)
}

fn save_with_classes(volume: &Volume3D, class_names: Option<Vec<String>>, path: &Path) -> Result<()> {
    let (hpath, rpath) = lvol_paths(path);
    let header = LvolHeader {
        format_version: FORMAT_VERSION,
        dims: volume.dims().to_vec(),
        spacing: volume.spacing(),
        dtype: DTYPE.to_string(),
        channels: volume.channels(),
        class_names,
        intensity_range: Some(volume.intensity_range()),
    };
    let mut json = serde_json::to_vec_pretty(&header).expect("header serializes");
    json.push(b'\n');
    let mut payload = Vec::with_capacity(volume.data().len() * 4);
    for v in volume.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_file(&hpath, &json)?;
    write_file(&rpath, &payload)
}

pub fn read_header(path: &Path) -> Result<LvolHeader> {
    let (hpath, _) = lvol_paths(path);
    let text = fs::read_to_string(&hpath).map_err(|e| LabError::io(&hpath, e))?;
    let header: LvolHeader =
        serde_json::from_str(&text).map_err(|e| LabError::format(&hpath, e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(LabError::format(
            &hpath,
            format!("unsupported format_version {}", header.format_version),
        ));
    }
    if header.dtype != DTYPE {
        return Err(LabError::format(
            &hpath,
            format!("unsupported dtype {:?}", header.dtype),
        ));
    }
    Ok(header)
}

pub fn load_volume(path: &Path) -> Result<Volume3D> {
    load_with_header(path).map(|(v, _)| v)
}

fn load_with_header(path: &Path) -> Result<(Volume3D, LvolHeader)> {
    let header = read_header(path)?;
    let (hpath, rpath) = lvol_paths(path);
    let dims = header.full_dims(&hpath)?;
    let bytes = fs::read(&rpath).map_err(|e| LabError::io(&rpath, e))?;
    let expected = dims.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(LabError::PayloadSize {
            path: rpath,
            expected,
            actual: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(LabError::NonFinite { path: rpath, index });
    }
    let mut volume = Volume3D::new(dims, header.spacing, data)?;
    if let Some(range) = header.intensity_range {
        volume.set_intensity_range(range);
    }
    Ok((volume, header))
}

/// Saves one binary mask as a `{0, 1}` LVOL tagged with its class name.
pub fn save_mask(mask: &BinaryMask, class_name: &str, spacing: [f64; 3], path: &Path) -> Result<()> {
    let v = mask.to_volume().with_spacing(spacing)?;
    save_with_classes(&v, Some(vec![class_name.to_string()]), path)
}

/// Loads a single-class mask and its recorded class name.
pub fn load_mask(path: &Path) -> Result<(BinaryMask, Option<String>)> {
    let (v, header) = load_with_header(path)?;
    let mask = BinaryMask::from_volume(&v).map_err(|e| LabError::format(path, e.to_string()))?;
    let name = header.class_names.and_then(|n| n.into_iter().next());
    Ok((mask, name))
}

/// Loads one mask file per class. Overlapping classes are rejected.
pub fn load_mask_set(paths: &[PathBuf]) -> Result<MaskSet> {
    if paths.is_empty() {
        return Err(LabError::Invalid("a mask set needs at least one file".into()));
    }
    let mut masks = Vec::with_capacity(paths.len());
    let mut names = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let (m, name) = load_mask(p)?;
        masks.push(m);
        names.push(name.unwrap_or_else(|| format!("class_{i}")));
    }
    Ok(MaskSet::new(masks, names)?)
}
