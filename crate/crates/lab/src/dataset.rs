//! Phantom datasets, ROI extraction and the histogram bank.

use std::path::Path;

use lesion_synth_core::phantom::{case_seed, generate_phantom_case, CaseRole, PhantomSpec};
use lesion_synth_core::rng::seeded;
use lesion_synth_core::texture::{
    cluster_histograms, extract_histogram, HistogramClusterModel, HistogramCondition,
};
use lesion_synth_core::train::{MaskExample, TextureExample};
use lesion_synth_core::volume::{crop_mask, crop_mask_set, crop_pad_roi};
use lesion_synth_core::{BinaryMask, MaskSet, RoiSpec, Volume3D};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::manifest::{write_case_files, CaseData, CaseRecord, Manifest, Split};

pub const CASES_DIR: &str = "cases";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Value used outside the source extent when cropping normalized volumes.
pub const PAD_VALUE: f32 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaseCounts {
    /// Pathological cases in total.
    pub pathological: usize,
    pub normal: usize,
    /// Pathological cases placed in the test split.
    pub test_pathological: usize,
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

/// Writes `outdir/cases/*` and `outdir/manifest.json`. Pathological cases
/// come first and the last `test_pathological` of them form the test split.
pub fn generate_phantom_dataset(
    spec: &PhantomSpec,
    counts: CaseCounts,
    seed: u64,
    label: &str,
    outdir: &Path,
) -> Result<Manifest> {
    if counts.test_pathological > counts.pathological {
        return Err(LabError::Invalid(format!(
            "{} test cases out of {} pathological",
            counts.test_pathological, counts.pathological
        )));
    }
    spec.validate()?;
    let mut manifest = Manifest::new(outdir);
    let total = counts.pathological + counts.normal;
    for i in 0..total {
        let role = if i < counts.pathological {
            CaseRole::Pathological
        } else {
            CaseRole::Normal
        };
        let split = if role == CaseRole::Pathological
            && i >= counts.pathological - counts.test_pathological
        {
            Split::Test
        } else {
            Split::Train
        };
        let s = case_seed(seed, i);
        let case = generate_phantom_case(spec, role, &mut seeded(s))?;
        let id = case_id(i);
        let (volume_path, mask_paths, boundary_path) = write_case_files(
            outdir,
            CASES_DIR,
            &id,
            &case.volume,
            &case.masks,
            Some(&case.organ),
        )?;
        manifest.cases.push(CaseRecord {
            id,
            volume_path,
            mask_paths,
            role,
            provenance: format!("phantom:{label}"),
            seed: s,
            split,
            method: None,
            set: None,
            source_id: None,
            peak_indices: case.peaks,
            boundary_path,
        });
    }
    manifest.save(&outdir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Rounded centroid of the foreground, or the volume centre when empty.
pub fn foreground_center(masks: &MaskSet) -> [usize; 3] {
    let fg = masks.foreground();
    let n = fg.count();
    if n == 0 {
        return masks.dims().map(|d| d / 2);
    }
    let mut sum = [0usize; 3];
    for q in fg.coords() {
        for a in 0..3 {
            sum[a] += q[a];
        }
    }
    sum.map(|s| (s as f64 / n as f64).round() as usize)
}

/// ROI of `size` around `center`, shifted to lie inside `dims` where it fits.
pub fn roi_around(dims: [usize; 3], center: [usize; 3], size: [usize; 3]) -> RoiSpec {
    let c: [i64; 3] = std::array::from_fn(|a| {
        let half = (size[a] / 2) as i64;
        let lo = center[a] as i64 - half;
        let max_origin = dims[a] as i64 - size[a] as i64;
        let origin = if max_origin < 0 {
            lo
        } else {
            lo.clamp(0, max_origin)
        };
        origin + half
    });
    RoiSpec {
        center: c,
        size,
    }
}

pub fn lesion_roi(masks: &MaskSet, size: [usize; 3]) -> RoiSpec {
    roi_around(masks.dims(), foreground_center(masks), size)
}

/// Writes `patch` back into `target` at `roi`; out-of-bounds voxels are dropped.
pub fn paste_roi(target: &mut Volume3D, roi: &RoiSpec, patch: &Volume3D) -> Result<()> {
    if patch.spatial() != roi.size || patch.channels() != target.channels() {
        return Err(LabError::Invalid(format!(
            "patch {:?} does not match roi {:?}",
            patch.dims(),
            roi.size
        )));
    }
    let o = roi.origin();
    let dims = target.spatial();
    let [d, h, w] = roi.size;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let t = [o[0] + z as i64, o[1] + y as i64, o[2] + x as i64];
                if (0..3).any(|a| t[a] < 0 || t[a] >= dims[a] as i64) {
                    continue;
                }
                for c in 0..patch.channels() {
                    target.set(
                        t[0] as usize,
                        t[1] as usize,
                        t[2] as usize,
                        c,
                        patch.get(z, y, x, c),
                    );
                }
            }
        }
    }
    Ok(())
}

/// Places an ROI mask into an empty mask of `dims`.
pub fn uncrop_mask(mask: &BinaryMask, roi: &RoiSpec, dims: [usize; 3]) -> BinaryMask {
    let o = roi.origin();
    let mut out = BinaryMask::empty(dims);
    for [z, y, x] in mask.coords() {
        let t = [o[0] + z as i64, o[1] + y as i64, o[2] + x as i64];
        if (0..3).all(|a| t[a] >= 0 && t[a] < dims[a] as i64) {
            out.set(t[0] as usize, t[1] as usize, t[2] as usize, true);
        }
    }
    out
}

/// Image and masks cropped around the lesion.
pub fn crop_case(case: &CaseData, size: [usize; 3]) -> Result<(Volume3D, MaskSet, RoiSpec)> {
    let roi = lesion_roi(&case.masks, size);
    let image = crop_pad_roi(&case.volume, &roi, PAD_VALUE)?;
    Ok((image, crop_mask_set(&case.masks, &roi), roi))
}

/// Training pathological cases as they are loaded.
pub fn training_cases(manifest: &Manifest) -> Result<Vec<(CaseRecord, CaseData)>> {
    manifest
        .select(Split::Train, CaseRole::Pathological)
        .into_iter()
        .map(|r| Ok((r.clone(), manifest.load_case(r)?)))
        .collect()
}

pub fn texture_examples(manifest: &Manifest, size: [usize; 3]) -> Result<Vec<TextureExample>> {
    let cases = training_cases(manifest)?;
    if cases.is_empty() {
        return Err(LabError::Invalid(
            "manifest has no training pathological cases".into(),
        ));
    }
    cases
        .iter()
        .map(|(_, c)| {
            let (image, masks, _) = crop_case(c, size)?;
            Ok(TextureExample { image, masks })
        })
        .collect()
}

pub fn mask_examples(manifest: &Manifest, size: [usize; 3]) -> Result<Vec<MaskExample>> {
    let cases = training_cases(manifest)?;
    if cases.is_empty() {
        return Err(LabError::Invalid(
            "manifest has no training pathological cases".into(),
        ));
    }
    cases
        .iter()
        .map(|(r, c)| {
            let boundary = c.boundary.as_ref().ok_or_else(|| {
                LabError::Invalid(format!("case {} has no boundary mask", r.id))
            })?;
            let roi = lesion_roi(&c.masks, size);
            Ok(MaskExample {
                masks: crop_mask_set(&c.masks, &roi),
                boundary: crop_mask(boundary, &roi),
            })
        })
        .collect()
}

/// Lesion histograms of the training set and their clusters, for the union
/// of all classes and for each class separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBank {
    pub bins: usize,
    pub class_names: Vec<String>,
    pub union: HistogramClusterModel,
    pub union_donors: Vec<HistogramCondition>,
    /// `None` for classes with no training lesions.
    pub classes: Vec<Option<HistogramClusterModel>>,
    pub class_donors: Vec<Vec<HistogramCondition>>,
}

/// Clusters come out ordered by increasing mean intensity.
pub fn build_histogram_bank(
    manifest: &Manifest,
    bins: usize,
    k: usize,
    seed: u64,
) -> Result<HistogramBank> {
    let cases = training_cases(manifest)?;
    let (_, first) = cases.first().ok_or_else(|| {
        LabError::Invalid("manifest has no training pathological cases".into())
    })?;
    let n = first.masks.n();
    let class_names = first.masks.class_names().to_vec();
    let mut union_donors = Vec::new();
    let mut class_donors = vec![Vec::new(); n];
    for (_, c) in &cases {
        let fg = c.masks.foreground();
        if !fg.is_empty() {
            union_donors.push(extract_histogram(&c.volume, &fg, bins, (-1.0, 1.0))?);
        }
        for (i, m) in c.masks.masks().iter().enumerate() {
            if !m.is_empty() {
                class_donors[i].push(extract_histogram(&c.volume, m, bins, (-1.0, 1.0))?);
            }
        }
    }
    if union_donors.is_empty() {
        return Err(LabError::Invalid("no training lesions to cluster".into()));
    }
    let fit = |h: &[HistogramCondition], stream: u64| -> Result<HistogramClusterModel> {
        let k = k.min(h.len());
        let s = lesion_synth_core::rng::derive_seed(seed, stream);
        Ok(cluster_histograms(h, k, s)?.ordered_by_mean())
    };
    let union = fit(&union_donors, 0)?;
    let classes = class_donors
        .iter()
        .enumerate()
        .map(|(i, d)| {
            if d.is_empty() {
                Ok(None)
            } else {
                fit(d, 1 + i as u64).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    Ok(HistogramBank {
        bins,
        class_names,
        union,
        union_donors,
        classes,
        class_donors,
    })
}

impl HistogramBank {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p).map_err(|e| LabError::io(p, e))?;
        }
        let mut s = serde_json::to_string_pretty(self).expect("bank serializes");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LabError::MissingCheckpoint(path.to_path_buf()),
            _ => LabError::io(path, e),
        })?;
        serde_json::from_str(&text).map_err(|e| LabError::format(path, e.to_string()))
    }
}
