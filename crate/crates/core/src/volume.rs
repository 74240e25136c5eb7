//! Volume and mask containers.
//!
//! Voxel order is fixed as `(z, y, x, channel)` with the channel index
//! varying fastest.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense float volume of shape `D x H x W x C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume3D {
    dims: [usize; 4],
    spacing: [f64; 3],
    intensity_range: (f32, f32),
    data: Vec<f32>,
}

impl Volume3D {
    /// Builds a volume, checking extent and finiteness.
    pub fn new(dims: [usize; 4], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_dims(&dims)?;
        check_spacing(&spacing)?;
        let expected = dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::DimMismatch(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let intensity_range = value_range(&data);
        Ok(Self {
            dims,
            spacing,
            intensity_range,
            data,
        })
    }

    pub fn filled(dims: [usize; 4], value: f32) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            spacing: [1.0; 3],
            intensity_range: (value, value),
            data: vec![value; n],
        }
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, 0.0)
    }

    /// Same spatial grid and spacing, `channels` channels, all zeros.
    pub fn zeros_like(&self, channels: usize) -> Self {
        let [d, h, w, _] = self.dims;
        let mut v = Self::zeros([d, h, w, channels]);
        v.spacing = self.spacing;
        v
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_spacing(&spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    /// Intensity window the values were mapped from, or their observed range.
    pub fn intensity_range(&self) -> (f32, f32) {
        self.intensity_range
    }

    pub fn set_intensity_range(&mut self, range: (f32, f32)) {
        self.intensity_range = range;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize, c: usize) -> usize {
        ((z * self.dims[1] + y) * self.dims[2] + x) * self.dims[3] + c
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(z, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, c: usize, value: f32) {
        let i = self.index(z, y, x, c);
        self.data[i] = value;
    }

    /// Value of channel `c` at spatial voxel index `v`.
    #[inline]
    pub fn at(&self, v: usize, c: usize) -> f32 {
        self.data[v * self.dims[3] + c]
    }

    #[inline]
    pub fn at_mut(&mut self, v: usize, c: usize) -> &mut f32 {
        let nc = self.dims[3];
        &mut self.data[v * nc + c]
    }

    /// Extracts one channel as a single-channel volume.
    pub fn channel(&self, c: usize) -> Result<Self> {
        if c >= self.channels() {
            return Err(Error::InvalidArgument(format!(
                "channel {c} out of range for {} channels",
                self.channels()
            )));
        }
        let nc = self.channels();
        let data = self.data.iter().skip(c).step_by(nc).copied().collect();
        let [d, h, w, _] = self.dims;
        Ok(Self {
            dims: [d, h, w, 1],
            spacing: self.spacing,
            intensity_range: self.intensity_range,
            data,
        })
    }

    /// Stacks single-channel volumes along the channel axis.
    pub fn stack(channels: &[Volume3D]) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidArgument("no channels to stack".into()))?;
        let spatial = first.spatial();
        let mut total = 0;
        for v in channels {
            if v.spatial() != spatial {
                return Err(Error::DimMismatch(format!(
                    "cannot stack {:?} with {:?}",
                    v.spatial(),
                    spatial
                )));
            }
            total += v.channels();
        }
        let n = first.voxel_count();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for v in channels {
                let nc = v.channels();
                data.extend_from_slice(&v.data[i * nc..(i + 1) * nc]);
            }
        }
        Ok(Self {
            dims: [spatial[0], spatial[1], spatial[2], total],
            spacing: first.spacing,
            intensity_range: first.intensity_range,
            data,
        })
    }

    /// Repeats a single-channel volume `n` times along the channel axis.
    pub fn broadcast_channels(&self, n: usize) -> Result<Self> {
        if self.channels() != 1 {
            return Err(Error::DimMismatch(format!(
                "broadcast needs 1 channel, got {}",
                self.channels()
            )));
        }
        let data = self
            .data
            .iter()
            .flat_map(|&v| core::iter::repeat_n(v, n))
            .collect();
        let [d, h, w, _] = self.dims;
        Ok(Self {
            dims: [d, h, w, n],
            spacing: self.spacing,
            intensity_range: self.intensity_range,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    pub fn same_dims(&self, other: &Volume3D) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(format!(
                "{:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn same_spatial(&self, spatial: [usize; 3]) -> Result<()> {
        if self.spatial() != spatial {
            return Err(Error::DimMismatch(format!(
                "{:?} vs {:?}",
                self.spatial(),
                spatial
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_dims(dims: &[usize; 4]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "dims must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

fn check_spacing(spacing: &[f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "spacing must be positive, got {spacing:?}"
        )));
    }
    Ok(())
}

fn value_range(data: &[f32]) -> (f32, f32) {
    data.iter()
        .fold(None, |acc: Option<(f32, f32)>, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
        .unwrap_or((0.0, 0.0))
}

/// Binary volume over a `D x H x W` grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::DimMismatch(format!(
                "dims {dims:?} need {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![false; dims.iter().product()],
        }
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![true; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self { dims, data }
    }

    /// Reads channel 0 of a volume whose values are exactly 0 or 1.
    pub fn from_volume(volume: &Volume3D) -> Result<Self> {
        if volume.channels() != 1 {
            return Err(Error::DimMismatch(format!(
                "mask volume must have 1 channel, got {}",
                volume.channels()
            )));
        }
        let mut data = Vec::with_capacity(volume.voxel_count());
        for (i, &v) in volume.data().iter().enumerate() {
            if v == 0.0 {
                data.push(false);
            } else if v == 1.0 {
                data.push(true);
            } else {
                return Err(Error::InvalidArgument(format!(
                    "mask value {v} at voxel {i} is not binary"
                )));
            }
        }
        Ok(Self {
            dims: volume.spatial(),
            data,
        })
    }

    /// `{0, 1}` single-channel volume.
    pub fn to_volume(&self) -> Volume3D {
        let [d, h, w] = self.dims;
        let mut v = Volume3D::zeros([d, h, w, 1]);
        for (o, &m) in v.data_mut().iter_mut().zip(&self.data) {
            *o = if m { 1.0 } else { 0.0 };
        }
        v.set_intensity_range((0.0, 1.0));
        v
    }

    /// `+1` inside, `-1` outside.
    pub fn to_signed_volume(&self) -> Volume3D {
        let [d, h, w] = self.dims;
        let mut v = Volume3D::zeros([d, h, w, 1]);
        for (o, &m) in v.data_mut().iter_mut().zip(&self.data) {
            *o = if m { 1.0 } else { -1.0 };
        }
        v.set_intensity_range((-1.0, 1.0));
        v
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, value: bool) {
        let i = self.index(z, y, x);
        self.data[i] = value;
    }

    /// Like `get` but false outside the grid.
    pub fn get_signed(&self, z: i64, y: i64, x: i64) -> bool {
        if z < 0 || y < 0 || x < 0 {
            return false;
        }
        let (z, y, x) = (z as usize, y as usize, x as usize);
        if z >= self.dims[0] || y >= self.dims[1] || x >= self.dims[2] {
            return false;
        }
        self.get(z, y, x)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&m| m)
    }

    /// Coordinates `(z, y, x)` of set voxels in raster order.
    pub fn coords(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [_, h, w] = self.dims;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(i, _)| [i / (h * w), (i / w) % h, i % w])
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(format!(
                "{:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(self.zip_with(other, |a, b| a || b))
    }

    pub fn intersect(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(self.zip_with(other, |a, b| a && b))
    }

    pub fn difference(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(self.zip_with(other, |a, b| a && !b))
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            data: self.data.iter().map(|&m| !m).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool> {
        self.check_same(other)?;
        Ok(self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b))
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Voxels with at least one 6-neighbour outside the mask or the grid.
    pub fn surface(&self) -> BinaryMask {
        let [d, h, w] = self.dims;
        let mut out = BinaryMask::empty(self.dims);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !self.get(z, y, x) {
                        continue;
                    }
                    let (zi, yi, xi) = (z as i64, y as i64, x as i64);
                    let interior = NEIGHBOURS_6
                        .iter()
                        .all(|[dz, dy, dx]| self.get_signed(zi + dz, yi + dy, xi + dx));
                    if !interior {
                        out.set(z, y, x, true);
                    }
                }
            }
        }
        out
    }

    /// One step of 6-connected binary dilation.
    pub fn dilate(&self) -> BinaryMask {
        BinaryMask::from_fn(self.dims, |z, y, x| {
            if self.get(z, y, x) {
                return true;
            }
            let (zi, yi, xi) = (z as i64, y as i64, x as i64);
            NEIGHBOURS_6
                .iter()
                .any(|[dz, dy, dx]| self.get_signed(zi + dz, yi + dy, xi + dx))
        })
    }

    /// One step of 6-connected binary erosion; the grid border counts as outside.
    pub fn erode(&self) -> BinaryMask {
        BinaryMask::from_fn(self.dims, |z, y, x| {
            if !self.get(z, y, x) {
                return false;
            }
            let (zi, yi, xi) = (z as i64, y as i64, x as i64);
            NEIGHBOURS_6
                .iter()
                .all(|[dz, dy, dx]| self.get_signed(zi + dz, yi + dy, xi + dx))
        })
    }
}

pub(crate) const NEIGHBOURS_6: [[i64; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// Per-class lesion masks over a common grid. Classes are pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    masks: Vec<BinaryMask>,
    class_names: Vec<String>,
}

impl MaskSet {
    pub fn new(masks: Vec<BinaryMask>, class_names: Vec<String>) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::InvalidArgument("mask set needs at least one class".into()))?;
        if class_names.len() != masks.len() {
            return Err(Error::InvalidArgument(format!(
                "{} masks but {} class names",
                masks.len(),
                class_names.len()
            )));
        }
        let dims = first.dims();
        if let Some(m) = masks.iter().find(|m| m.dims() != dims) {
            return Err(Error::DimMismatch(format!(
                "mask dims {:?} vs {:?}",
                m.dims(),
                dims
            )));
        }
        for v in 0..first.data().len() {
            if masks.iter().filter(|m| m.data()[v]).count() > 1 {
                return Err(Error::OverlappingMasks(v));
            }
        }
        Ok(Self { masks, class_names })
    }

    /// Single-class set named `lesion`.
    pub fn single(mask: BinaryMask) -> Self {
        Self {
            masks: vec![mask],
            class_names: vec![String::from("lesion")],
        }
    }

    /// All-empty set with the given class names.
    pub fn empty(dims: [usize; 3], class_names: Vec<String>) -> Result<Self> {
        let masks = class_names
            .iter()
            .map(|_| BinaryMask::empty(dims))
            .collect();
        Self::new(masks, class_names)
    }

    pub fn n(&self) -> usize {
        self.masks.len()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.masks[0].dims()
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn mask(&self, i: usize) -> &BinaryMask {
        &self.masks[i]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Union of all lesion classes (`M_f`).
    pub fn foreground(&self) -> BinaryMask {
        let mut out = self.masks[0].clone();
        for m in &self.masks[1..] {
            for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
                *o |= v;
            }
        }
        out
    }

    /// Complement of the foreground (`M_b`).
    pub fn background(&self) -> BinaryMask {
        self.foreground().complement()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.iter().all(|m| m.is_empty())
    }

    /// Collapses all classes into one named class.
    pub fn merged(&self, name: &str) -> MaskSet {
        MaskSet {
            masks: vec![self.foreground()],
            class_names: vec![String::from(name)],
        }
    }

    /// Keeps only class `i`.
    pub fn select(&self, i: usize) -> Result<MaskSet> {
        let m = self.masks.get(i).ok_or_else(|| {
            Error::InvalidArgument(format!("class {i} out of range for {}", self.n()))
        })?;
        Ok(MaskSet {
            masks: vec![m.clone()],
            class_names: vec![self.class_names[i].clone()],
        })
    }
}

/// Region of interest: output voxel `o` reads source voxel `center - size/2 + o`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub center: [i64; 3],
    pub size: [usize; 3],
}

impl RoiSpec {
    /// Lung nodule ROI, 64 x 64 in-plane by 32 slices, in `(z, y, x)` order.
    pub const LUNG_DEFAULT_SIZE: [usize; 3] = [32, 64, 64];
    /// Cardiac ROI, 72 x 72 in-plane by 10 slices.
    pub const CARDIAC_DEFAULT_SIZE: [usize; 3] = [10, 72, 72];

    pub fn new(center: [i64; 3], size: [usize; 3]) -> Result<Self> {
        if size.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "roi size must be positive, got {size:?}"
            )));
        }
        Ok(Self { center, size })
    }

    pub fn origin(&self) -> [i64; 3] {
        [
            self.center[0] - (self.size[0] / 2) as i64,
            self.center[1] - (self.size[1] / 2) as i64,
            self.center[2] - (self.size[2] / 2) as i64,
        ]
    }

    fn source(&self, src: [usize; 3], o: [usize; 3]) -> Option<[usize; 3]> {
        let origin = self.origin();
        let mut out = [0; 3];
        for a in 0..3 {
            let s = origin[a] + o[a] as i64;
            if s < 0 || s >= src[a] as i64 {
                return None;
            }
            out[a] = s as usize;
        }
        Some(out)
    }
}

/// Crops `roi` out of `volume`, filling voxels outside the source with `pad_value`.
pub fn crop_pad_roi(volume: &Volume3D, roi: &RoiSpec, pad_value: f32) -> Result<Volume3D> {
    if roi.size.contains(&0) {
        return Err(Error::InvalidArgument("roi size must be positive".into()));
    }
    let nc = volume.channels();
    let [d, h, w] = roi.size;
    let mut out = Volume3D::filled([d, h, w, nc], pad_value);
    out.spacing = volume.spacing;
    let src = volume.spatial();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if let Some([sz, sy, sx]) = roi.source(src, [z, y, x]) {
                    for c in 0..nc {
                        out.set(z, y, x, c, volume.get(sz, sy, sx, c));
                    }
                }
            }
        }
    }
    out.intensity_range = volume.intensity_range;
    Ok(out)
}

/// Crops a mask with the same geometry as [`crop_pad_roi`]; outside voxels are unset.
pub fn crop_mask(mask: &BinaryMask, roi: &RoiSpec) -> BinaryMask {
    let src = mask.dims();
    BinaryMask::from_fn(roi.size, |z, y, x| {
        roi.source(src, [z, y, x])
            .map(|[sz, sy, sx]| mask.get(sz, sy, sx))
            .unwrap_or(false)
    })
}

pub fn crop_mask_set(masks: &MaskSet, roi: &RoiSpec) -> MaskSet {
    MaskSet {
        masks: masks.masks.iter().map(|m| crop_mask(m, roi)).collect(),
        class_names: masks.class_names.clone(),
    }
}

/// Clips to `window` and maps it affinely onto `[-1, 1]`.
pub fn normalize_intensity(volume: &Volume3D, window: (f32, f32)) -> Result<Volume3D> {
    let (lo, hi) = window;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::InvalidArgument(format!(
            "degenerate intensity window ({lo}, {hi})"
        )));
    }
    let (lo64, hi64) = (lo as f64, hi as f64);
    let sum = lo64 + hi64;
    let width = hi64 - lo64;
    let mut out = volume.map(|v| {
        let c = (v as f64).clamp(lo64, hi64);
        (((2.0 * c - sum) / width) as f32).clamp(-1.0, 1.0)
    });
    out.intensity_range = (-1.0, 1.0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 4]) -> Volume3D {
        let n = dims.iter().product();
        Volume3D::new(dims, [1.0; 3], (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn new_rejects_bad_extent_and_nan() {
        assert!(matches!(
            Volume3D::new([2, 2, 2, 1], [1.0; 3], vec![0.0; 7]),
            Err(Error::DimMismatch(_))
        ));
        let mut data = vec![0.0; 8];
        data[3] = f32::NAN;
        assert_eq!(
            Volume3D::new([2, 2, 2, 1], [1.0; 3], data),
            Err(Error::NonFinite(3))
        );
    }

    #[test]
    fn interior_roi_is_plain_copy() {
        let v = ramp([6, 6, 6, 1]);
        let roi = RoiSpec::new([3, 3, 3], [2, 2, 2]).unwrap();
        let out = crop_pad_roi(&v, &roi, -1.0).unwrap();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(out.get(z, y, x, 0), v.get(z + 2, y + 2, x + 2, 0));
                }
            }
        }
    }

    #[test]
    fn corner_roi_pads_seven_eighths() {
        let v = Volume3D::filled([5, 5, 5, 1], 0.25);
        for size in [2usize, 4, 6] {
            let roi = RoiSpec::new([0, 0, 0], [size; 3]).unwrap();
            let out = crop_pad_roi(&v, &roi, -1.0).unwrap();
            let padded = out.data().iter().filter(|&&x| x == -1.0).count();
            assert_eq!(padded * 8, out.data().len() * 7, "size {size}");
        }
    }

    #[test]
    fn full_extent_roi_is_identity() {
        let v = ramp([4, 6, 8, 2]);
        let roi = RoiSpec::new([2, 3, 4], [4, 6, 8]).unwrap();
        assert_eq!(crop_pad_roi(&v, &roi, 0.0).unwrap().data(), v.data());
    }

    #[test]
    fn lung_default_roi_accepted() {
        let roi = RoiSpec::new([0, 0, 0], RoiSpec::LUNG_DEFAULT_SIZE).unwrap();
        let out = crop_pad_roi(&Volume3D::zeros([2, 2, 2, 1]), &roi, -1.0).unwrap();
        assert_eq!(out.dims(), [32, 64, 64, 1]);
    }

    #[test]
    fn normalization_endpoints_and_clip() {
        let v = Volume3D::new([1, 1, 4, 1], [1.0; 3], vec![-1000.0, 400.0, -300.0, 500.0]).unwrap();
        let n = normalize_intensity(&v, (-1000.0, 400.0)).unwrap();
        assert_eq!(n.data(), &[-1.0, 1.0, 0.0, 1.0]);
        assert!(normalize_intensity(&v, (1.0, 1.0)).is_err());
    }

    #[test]
    fn normalization_is_idempotent() {
        let v = ramp([2, 3, 4, 1]).map(|x| x * 13.7 - 100.0);
        let once = normalize_intensity(&v, (-80.0, 120.0)).unwrap();
        let twice = normalize_intensity(&once, (-1.0, 1.0)).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn mask_set_rejects_overlap_and_derives_background() {
        let a = BinaryMask::new([1, 1, 3], vec![true, false, false]).unwrap();
        let b = BinaryMask::new([1, 1, 3], vec![false, true, false]).unwrap();
        let set = MaskSet::new(vec![a.clone(), b], vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(set.background().data(), &[false, false, true]);
        let err = MaskSet::new(vec![a.clone(), a], vec!["a".into(), "b".into()]);
        assert_eq!(err, Err(Error::OverlappingMasks(0)));
    }

    #[test]
    fn dilation_never_shrinks() {
        let m = BinaryMask::from_fn([5, 5, 5], |z, y, x| z == 2 && y == 2 && (1..=3).contains(&x));
        let d = m.dilate();
        assert!(m.is_subset_of(&d).unwrap());
        assert_eq!(d.count(), 3 + 4 * 3 + 2);
        assert_eq!(d.erode().count(), 3);
    }
}
