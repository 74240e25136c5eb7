//! Procedural phantom scans with ground-truth lesion masks.
//!
//! Two presets: a lung-style volume with one nodule class whose texture is
//! drawn from three intensity peaks, and a cardiac-style volume with a
//! myocardial ring carrying an infarct sector and a nested dark core.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmask::mean_filter;
use crate::error::{Error, Result};
use crate::rng::{normal, normal_volume};
use crate::volume::{BinaryMask, MaskSet, Volume3D};

/// One texture mode of a lesion class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub mean: f32,
    pub std: f32,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// Ellipsoidal nodule inside the organ.
    Blob,
    /// Wedge of a ring-shaped organ starting at its inner wall.
    Sector,
    /// Core carved out of the previous class's lesion.
    Nested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionClassSpec {
    pub name: String,
    pub peaks: Vec<Peak>,
    pub shape: ShapeFamily,
    /// Radius range in voxels for blobs, half-angle range in radians for
    /// sectors, fraction of the parent lesion for nested cores.
    pub size_range: (f64, f64),
    /// Probability that a pathological case carries this class.
    pub presence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OrganShape {
    /// Centred ellipsoid with the given semi-axes (voxels).
    Ellipsoid { radii: [f64; 3] },
    /// Centred annulus in every slice of `z_range`.
    Ring {
        inner: f64,
        outer: f64,
        z_range: (usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseRole {
    Pathological,
    Normal,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// `(D, H, W)`.
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub organ: OrganShape,
    pub organ_intensity: f32,
    pub background_intensity: f32,
    /// Intensity of the region enclosed by a ring organ (blood pool).
    pub cavity_intensity: f32,
    /// Standard deviation of the smooth background texture.
    pub noise_amplitude: f32,
    /// Box-filter passes used to smooth the background noise.
    pub noise_smoothing: usize,
    pub classes: Vec<LesionClassSpec>,
}

impl PhantomSpec {
    /// One nodule class with three texture peaks separated by 9 sigma.
    pub fn lung() -> Self {
        let peak = |mean| Peak {
            mean,
            std: 0.05,
            weight: 1.0,
        };
        Self {
            dims: [16, 32, 32],
            spacing: [1.0; 3],
            organ: OrganShape::Ellipsoid {
                radii: [7.0, 14.0, 14.0],
            },
            organ_intensity: -0.7,
            background_intensity: 0.0,
            cavity_intensity: 0.0,
            noise_amplitude: 0.04,
            noise_smoothing: 2,
            classes: vec![LesionClassSpec {
                name: String::from("nodule"),
                peaks: vec![peak(-0.25), peak(0.2), peak(0.65)],
                shape: ShapeFamily::Blob,
                size_range: (2.0, 3.5),
                presence: 1.0,
            }],
        }
    }

    /// Infarct sector plus a nested microvascular-obstruction core.
    pub fn cardiac() -> Self {
        Self {
            dims: [8, 16, 16],
            spacing: [1.0; 3],
            organ: OrganShape::Ring {
                inner: 3.2,
                outer: 6.8,
                z_range: (1, 7),
            },
            organ_intensity: -0.6,
            background_intensity: -0.1,
            cavity_intensity: 0.2,
            noise_amplitude: 0.04,
            noise_smoothing: 2,
            classes: vec![
                LesionClassSpec {
                    name: String::from("mi"),
                    peaks: vec![Peak {
                        mean: 0.65,
                        std: 0.05,
                        weight: 1.0,
                    }],
                    shape: ShapeFamily::Sector,
                    size_range: (0.5, 1.1),
                    presence: 1.0,
                },
                LesionClassSpec {
                    name: String::from("pmo"),
                    peaks: vec![Peak {
                        mean: -0.25,
                        std: 0.05,
                        weight: 1.0,
                    }],
                    shape: ShapeFamily::Nested,
                    size_range: (0.3, 0.5),
                    presence: 0.7,
                },
            ],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "lung" => Ok(Self::lung()),
            "cardiac" => Ok(Self::cardiac()),
            _ => Err(Error::UnknownMethod {
                name: name.into(),
                valid: "lung, cardiac".into(),
            }),
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "phantom dims must be positive".into(),
            ));
        }
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument(
                "phantom needs at least one lesion class".into(),
            ));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.peaks.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "class {} has no peaks",
                    c.name
                )));
            }
            if c.peaks
                .iter()
                .any(|p| !(-1.0..=1.0).contains(&p.mean) || p.std < 0.0)
            {
                return Err(Error::InvalidArgument(format!(
                    "class {} has a peak outside [-1, 1]",
                    c.name
                )));
            }
            if c.shape == ShapeFamily::Nested && i == 0 {
                return Err(Error::InvalidArgument(
                    "the first class cannot be nested".into(),
                ));
            }
            if c.shape == ShapeFamily::Sector && !matches!(self.organ, OrganShape::Ring { .. }) {
                return Err(Error::InvalidArgument(
                    "sector lesions need a ring organ".into(),
                ));
            }
            if !(c.size_range.0 > 0.0 && c.size_range.1 >= c.size_range.0) {
                return Err(Error::InvalidArgument(format!(
                    "class {} size range",
                    c.name
                )));
            }
        }
        Ok(())
    }
}

/// A generated scan.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub volume: Volume3D,
    pub masks: MaskSet,
    /// Region where lesions may appear; doubles as the mask-model boundary.
    pub organ: BinaryMask,
    /// Texture peak used by each class, `None` where the class is absent.
    pub peaks: Vec<Option<usize>>,
    pub role: CaseRole,
}

/// Draws a peak index from the class's peak weights.
pub fn multi_peak_assignment(class: &LesionClassSpec, rng: &mut impl Rng) -> Result<usize> {
    if class.peaks.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "class {} has no peaks",
            class.name
        )));
    }
    let dist = WeightedIndex::new(class.peaks.iter().map(|p| p.weight))
        .map_err(|e| Error::InvalidArgument(format!("peak weights: {e}")))?;
    Ok(dist.sample(rng))
}

fn centre(dims: [usize; 3]) -> [f64; 3] {
    [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ]
}

/// Polar coordinates `(radius, angle)` of the in-plane position.
fn polar(dims: [usize; 3], y: usize, x: usize) -> (f64, f64) {
    let c = centre(dims);
    let (dy, dx) = (y as f64 - c[1], x as f64 - c[2]);
    (libm::sqrt(dy * dy + dx * dx), libm::atan2(dy, dx))
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let tau = 2.0 * core::f64::consts::PI;
    let d = (a - b).rem_euclid(tau);
    if d > core::f64::consts::PI {
        tau - d
    } else {
        d
    }
}

pub fn organ_mask(spec: &PhantomSpec) -> BinaryMask {
    let dims = spec.dims;
    let c = centre(dims);
    match spec.organ {
        OrganShape::Ellipsoid { radii } => BinaryMask::from_fn(dims, |z, y, x| {
            let q = [z as f64, y as f64, x as f64];
            (0..3)
                .map(|a| ((q[a] - c[a]) / radii[a]).powi(2))
                .sum::<f64>()
                <= 1.0
        }),
        OrganShape::Ring {
            inner,
            outer,
            z_range,
        } => BinaryMask::from_fn(dims, |z, y, x| {
            let (r, _) = polar(dims, y, x);
            (z_range.0..z_range.1).contains(&z) && r >= inner && r <= outer
        }),
    }
}

fn cavity_mask(spec: &PhantomSpec) -> BinaryMask {
    match spec.organ {
        OrganShape::Ring { inner, z_range, .. } => BinaryMask::from_fn(spec.dims, |z, y, x| {
            (z_range.0..z_range.1).contains(&z) && polar(spec.dims, y, x).0 < inner
        }),
        OrganShape::Ellipsoid { .. } => BinaryMask::empty(spec.dims),
    }
}

fn ellipsoid(dims: [usize; 3], c: [f64; 3], radii: [f64; 3]) -> BinaryMask {
    BinaryMask::from_fn(dims, |z, y, x| {
        let q = [z as f64, y as f64, x as f64];
        (0..3)
            .map(|a| ((q[a] - c[a]) / radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    })
}

const PLACEMENT_TRIES: usize = 64;

fn place_blob(
    organ: &BinaryMask,
    taken: &BinaryMask,
    size: (f64, f64),
    rng: &mut impl Rng,
) -> Result<BinaryMask> {
    let dims = organ.dims();
    let allowed = organ.difference(taken)?;
    let candidates: Vec<[usize; 3]> = allowed.coords().collect();
    if candidates.is_empty() {
        return Err(Error::Degenerate("no room left in the organ".into()));
    }
    for _ in 0..PLACEMENT_TRIES {
        let r = rng.random_range(size.0..=size.1);
        let radii = [
            r * rng.random_range(0.8..=1.0),
            r * rng.random_range(0.8..=1.2),
            r * rng.random_range(0.8..=1.2),
        ];
        let c = candidates[rng.random_range(0..candidates.len())];
        let blob = ellipsoid(dims, [c[0] as f64, c[1] as f64, c[2] as f64], radii);
        if !blob.is_empty() && blob.is_subset_of(&allowed)? {
            return Ok(blob);
        }
    }
    Err(Error::Degenerate(format!(
        "lesion did not fit the organ after {PLACEMENT_TRIES} tries"
    )))
}

fn place_sector(
    spec: &PhantomSpec,
    organ: &BinaryMask,
    size: (f64, f64),
    rng: &mut impl Rng,
) -> Result<BinaryMask> {
    let OrganShape::Ring {
        inner,
        outer,
        z_range,
    } = spec.organ
    else {
        return Err(Error::InvalidArgument(
            "sector lesions need a ring organ".into(),
        ));
    };
    let theta = rng.random_range(-core::f64::consts::PI..core::f64::consts::PI);
    let half = rng.random_range(size.0..=size.1);
    let depth = inner + (outer - inner) * rng.random_range(0.55..=1.0);
    let span = z_range.1 - z_range.0;
    let len = rng.random_range((span / 2).max(1)..=span);
    let z0 = z_range.0 + rng.random_range(0..=span - len);
    let m = BinaryMask::from_fn(spec.dims, |z, y, x| {
        let (r, a) = polar(spec.dims, y, x);
        (z0..z0 + len).contains(&z) && r <= depth && angle_diff(a, theta) <= half
    })
    .intersect(organ)?;
    if m.is_empty() {
        return Err(Error::Degenerate("empty sector".into()));
    }
    Ok(m)
}

/// Core of `parent`: voxels closest to its inner wall and angular centre.
fn place_nested(
    spec: &PhantomSpec,
    parent: &BinaryMask,
    size: (f64, f64),
    rng: &mut impl Rng,
) -> Result<BinaryMask> {
    if parent.is_empty() {
        return Err(Error::Degenerate("nested lesion without a parent".into()));
    }
    let frac = rng.random_range(size.0..=size.1);
    // Erode once where possible so the core stays surrounded by the parent.
    let inner = parent.erode();
    let base = if inner.count() >= 2 {
        inner
    } else {
        parent.clone()
    };
    let coords: Vec<[usize; 3]> = base.coords().collect();
    let n = coords.len() as f64;
    let mut c = [0.0; 3];
    for q in &coords {
        for a in 0..3 {
            c[a] += q[a] as f64 / n;
        }
    }
    let mut scored: Vec<(f64, usize)> = coords
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let d: f64 = (0..3).map(|a| (q[a] as f64 - c[a]).powi(2)).sum();
            (d, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = ((parent.count() as f64 * frac).round() as usize).clamp(1, coords.len());
    let mut out = BinaryMask::empty(spec.dims);
    for &(_, i) in scored.iter().take(keep) {
        let [z, y, x] = coords[i];
        out.set(z, y, x, true);
    }
    Ok(out)
}

/// Band-limited noise with standard deviation close to `amplitude`.
fn smooth_noise(spec: &PhantomSpec, rng: &mut impl Rng) -> Result<Volume3D> {
    let [d, h, w] = spec.dims;
    let mut v = normal_volume([d, h, w, 1], rng);
    for _ in 0..spec.noise_smoothing {
        v = mean_filter(&v, 3)?;
    }
    let n = v.data().len() as f64;
    let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .data()
        .iter()
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let scale = if var > 0.0 {
        spec.noise_amplitude as f64 / libm::sqrt(var)
    } else {
        0.0
    };
    Ok(v.map(|x| ((x as f64 - mean) * scale) as f32))
}

/// Generates one case. Normal cases carry empty masks.
pub fn generate_phantom_case(
    spec: &PhantomSpec,
    role: CaseRole,
    rng: &mut impl Rng,
) -> Result<PhantomCase> {
    spec.validate()?;
    let dims = spec.dims;
    let organ = organ_mask(spec);
    let cavity = cavity_mask(spec);
    let noise = smooth_noise(spec, rng)?;
    let mut data = vec![0.0f32; dims.iter().product()];
    for (v, out) in data.iter_mut().enumerate() {
        let base = if organ.data()[v] {
            spec.organ_intensity
        } else if cavity.data()[v] {
            spec.cavity_intensity
        } else {
            spec.background_intensity
        };
        *out = base + noise.data()[v];
    }
    let mut masks = vec![BinaryMask::empty(dims); spec.classes.len()];
    let mut peaks = vec![None; spec.classes.len()];
    if role != CaseRole::Normal {
        let mut taken = BinaryMask::empty(dims);
        for (i, class) in spec.classes.iter().enumerate() {
            let present = i == 0 || rng.random_bool(class.presence.clamp(0.0, 1.0));
            if !present {
                continue;
            }
            let m = match class.shape {
                ShapeFamily::Blob => place_blob(&organ, &taken, class.size_range, rng)?,
                ShapeFamily::Sector => {
                    place_sector(spec, &organ, class.size_range, rng)?.difference(&taken)?
                }
                ShapeFamily::Nested => {
                    let parent = masks[i - 1].clone();
                    let core = place_nested(spec, &parent, class.size_range, rng)?;
                    masks[i - 1] = parent.difference(&core)?;
                    core
                }
            };
            taken = taken.union(&m)?;
            masks[i] = m;
            peaks[i] = Some(multi_peak_assignment(class, rng)?);
        }
        for (i, m) in masks.iter().enumerate() {
            let Some(p) = peaks[i] else { continue };
            let peak = spec.classes[i].peaks[p];
            for (v, _) in m.data().iter().enumerate().filter(|(_, &b)| b) {
                data[v] = peak.mean + peak.std * normal(rng);
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(-1.0, 1.0);
    }
    let volume = Volume3D::new([dims[0], dims[1], dims[2], 1], spec.spacing, data)?;
    let masks = MaskSet::new(masks, spec.class_names())?;
    Ok(PhantomCase {
        volume,
        masks,
        organ,
        peaks,
        role,
    })
}

/// Seed of case `index` in a dataset generated from `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    crate::rng::derive_seed(seed, index as u64)
}
