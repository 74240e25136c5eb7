//! Lesion-mask diffusion constrained to a boundary region and steered by
//! control spheres.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, reverse_step, Condition, NoisePredictor};
use crate::error::{Error, Result};
use crate::rng::{normal_volume, seeded};
use crate::schedule::DiffusionSchedule;
use crate::volume::{BinaryMask, Volume3D};

/// Encoding of "no lesion" in the mask domain.
pub const EMPTY_VALUE: f32 = -1.0;

/// Sphere in voxel coordinates `(z, y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingSphere {
    pub center: [f64; 3],
    pub radius: f64,
}

type P3 = [f64; 3];

fn sub(a: P3, b: P3) -> P3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: P3, b: P3) -> P3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: P3, s: f64) -> P3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: P3, b: P3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: P3, b: P3) -> P3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dist(a: P3, b: P3) -> f64 {
    libm::sqrt(dot(sub(a, b), sub(a, b)))
}

const CONTAIN_EPS: f64 = 1e-9;

impl BoundingSphere {
    pub fn contains(&self, p: P3) -> bool {
        dist(self.center, p) <= self.radius + CONTAIN_EPS * (1.0 + self.radius)
    }

    fn from_one(a: P3) -> Self {
        Self {
            center: a,
            radius: 0.0,
        }
    }

    fn from_two(a: P3, b: P3) -> Self {
        let center = scale(add(a, b), 0.5);
        Self {
            center,
            radius: dist(a, b) / 2.0,
        }
    }

    /// Smallest sphere with `a`, `b`, `c` on its surface (circumcircle), or
    /// the diameter sphere of the farthest pair when collinear.
    fn from_three(a: P3, b: P3, c: P3) -> Self {
        let ab = sub(b, a);
        let ac = sub(c, a);
        let n = cross(ab, ac);
        let nn = dot(n, n);
        if nn <= 1e-18 * dot(ab, ab).max(dot(ac, ac)).max(1.0) {
            return farthest_pair(&[a, b, c]);
        }
        // circumcenter = a + (|ac|^2 (n x ab) + |ab|^2 (ac x n)) / (2 |n|^2)
        let t1 = scale(cross(n, ab), dot(ac, ac));
        let t2 = scale(cross(ac, n), dot(ab, ab));
        let center = add(a, scale(add(t1, t2), 1.0 / (2.0 * nn)));
        let radius = dist(center, a).max(dist(center, b)).max(dist(center, c));
        Self { center, radius }
    }

    /// Circumsphere of four points; degenerate (coplanar) sets fall back to the
    /// smallest three-point sphere that contains the fourth point.
    fn from_four(a: P3, b: P3, c: P3, d: P3) -> Self {
        let u = sub(b, a);
        let v = sub(c, a);
        let w = sub(d, a);
        let det = dot(u, cross(v, w));
        let mag = libm::sqrt(dot(u, u) * dot(v, v) * dot(w, w)).max(1.0);
        if det.abs() > 1e-12 * mag {
            let num = add(
                add(scale(cross(v, w), dot(u, u)), scale(cross(w, u), dot(v, v))),
                scale(cross(u, v), dot(w, w)),
            );
            let center = add(a, scale(num, 1.0 / (2.0 * det)));
            let radius = [a, b, c, d]
                .iter()
                .map(|p| dist(center, *p))
                .fold(0.0, f64::max);
            return Self { center, radius };
        }
        let pts = [a, b, c, d];
        let mut best: Option<Self> = None;
        for skip in 0..4 {
            let tri: Vec<P3> = (0..4).filter(|&i| i != skip).map(|i| pts[i]).collect();
            let s = Self::from_three(tri[0], tri[1], tri[2]);
            if s.contains(pts[skip]) && best.is_none_or(|b| s.radius < b.radius) {
                best = Some(s);
            }
        }
        best.unwrap_or_else(|| farthest_pair(&pts))
    }
}

fn farthest_pair(pts: &[P3]) -> BoundingSphere {
    let mut best = BoundingSphere::from_one(pts[0]);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let s = BoundingSphere::from_two(pts[i], pts[j]);
            if s.radius > best.radius {
                best = s;
            }
        }
    }
    best
}

/// Minimal enclosing sphere of a point set (Welzl, move-to-front form).
pub fn minimal_enclosing_sphere(points: &[P3]) -> Result<BoundingSphere> {
    if points.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut pts = points.to_vec();
    // fixed-seed shuffle for expected linear time
    pts.shuffle(&mut seeded(0x5EED));
    let mut ball = BoundingSphere::from_one(pts[0]);
    for i in 1..pts.len() {
        if !ball.contains(pts[i]) {
            ball = with_one(&pts[..i], pts[i]);
        }
    }
    Ok(ball)
}

fn with_one(pts: &[P3], q1: P3) -> BoundingSphere {
    let mut ball = BoundingSphere::from_one(q1);
    for j in 0..pts.len() {
        if !ball.contains(pts[j]) {
            ball = with_two(&pts[..j], q1, pts[j]);
        }
    }
    ball
}

fn with_two(pts: &[P3], q1: P3, q2: P3) -> BoundingSphere {
    let mut ball = BoundingSphere::from_two(q1, q2);
    for k in 0..pts.len() {
        if !ball.contains(pts[k]) {
            ball = with_three(&pts[..k], q1, q2, pts[k]);
        }
    }
    ball
}

fn with_three(pts: &[P3], q1: P3, q2: P3, q3: P3) -> BoundingSphere {
    let mut ball = BoundingSphere::from_three(q1, q2, q3);
    for l in 0..pts.len() {
        if !ball.contains(pts[l]) {
            ball = BoundingSphere::from_four(q1, q2, q3, pts[l]);
        }
    }
    ball
}

/// Minimal sphere enclosing every foreground voxel centre of `mask`.
pub fn bounding_sphere(mask: &BinaryMask) -> Result<BoundingSphere> {
    // interior voxels never lie on the hull, so surface voxels suffice
    let points: Vec<P3> = mask
        .surface()
        .coords()
        .map(|[z, y, x]| [z as f64, y as f64, x as f64])
        .collect();
    minimal_enclosing_sphere(&points)
}

/// Voxels whose centre lies within `radius` of the sphere centre.
pub fn rasterize_sphere(sphere: &BoundingSphere, dims: [usize; 3]) -> BinaryMask {
    let r2 = sphere.radius * sphere.radius + 1e-9;
    BinaryMask::from_fn(dims, |z, y, x| {
        let d = sub([z as f64, y as f64, x as f64], sphere.center);
        dot(d, d) <= r2
    })
}

/// Rasterized spheres as `+1/-1` channels; `None` yields an all-empty channel.
pub fn sphere_channels(spheres: &[Option<BoundingSphere>], dims: [usize; 3]) -> Result<Volume3D> {
    if spheres.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one control sphere".into(),
        ));
    }
    let chans: Vec<Volume3D> = spheres
        .iter()
        .map(|s| match s {
            Some(s) => rasterize_sphere(s, dims).to_signed_volume(),
            None => BinaryMask::empty(dims).to_signed_volume(),
        })
        .collect();
    Volume3D::stack(&chans)
}

/// Mask-domain splice: inside `boundary` keep `o_prev`, outside use the
/// forward-diffused empty value at `t - 1` (exactly `-1` at `t = 1`).
pub fn constrained_mask_step(
    o_prev: &Volume3D,
    t: usize,
    boundary: &BinaryMask,
    schedule: &DiffusionSchedule,
    eps_b: &Volume3D,
) -> Result<Volume3D> {
    schedule.check_step(t)?;
    o_prev.same_dims(eps_b)?;
    o_prev.same_spatial(boundary.dims())?;
    let empty = Volume3D::filled(o_prev.dims(), EMPTY_VALUE);
    let mut out = forward_diffuse(&empty, t - 1, eps_b, schedule)?;
    let nc = o_prev.channels();
    for (v, _) in boundary.data().iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..nc {
            *out.at_mut(v, c) = o_prev.at(v, c);
        }
    }
    out.set_intensity_range(o_prev.intensity_range());
    Ok(out)
}

/// Mean filter over the in-bounds part of a `k x k x k` window.
pub fn mean_filter(volume: &Volume3D, kernel: usize) -> Result<Volume3D> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd, got {kernel}"
        )));
    }
    let r = (kernel / 2) as i64;
    let dims = volume.dims();
    let mut sums = volume.clone();
    let mut counts = volume.map(|_| 1.0);
    for axis in 0..3 {
        sums = box_sum_axis(&sums, axis, r, dims);
        counts = box_sum_axis(&counts, axis, r, dims);
    }
    let mut out = sums;
    for (o, c) in out.data_mut().iter_mut().zip(counts.data()) {
        *o /= c;
    }
    Ok(out)
}

fn box_sum_axis(v: &Volume3D, axis: usize, r: i64, dims: [usize; 4]) -> Volume3D {
    let mut out = v.clone();
    let [d, h, w, nc] = dims;
    let len = [d, h, w][axis] as i64;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let pos = [z, y, x][axis] as i64;
                for c in 0..nc {
                    let mut acc = 0.0f32;
                    for o in (pos - r).max(0)..=(pos + r).min(len - 1) {
                        let mut idx = [z, y, x];
                        idx[axis] = o as usize;
                        acc += v.get(idx[0], idx[1], idx[2], c);
                    }
                    out.set(z, y, x, c, acc);
                }
            }
        }
    }
    out
}

/// Mean-filters one raw channel, thresholds (`> threshold`), and intersects
/// with `boundary`.
pub fn smooth_binarize(
    raw_channel: &Volume3D,
    kernel: usize,
    threshold: f32,
    boundary: &BinaryMask,
) -> Result<BinaryMask> {
    if raw_channel.channels() != 1 {
        return Err(Error::DimMismatch(format!(
            "expected one channel, got {}",
            raw_channel.channels()
        )));
    }
    raw_channel.same_spatial(boundary.dims())?;
    let smooth = mean_filter(raw_channel, kernel)?;
    let data = smooth
        .data()
        .iter()
        .zip(boundary.data())
        .map(|(&v, &b)| b && v > threshold)
        .collect();
    BinaryMask::new(boundary.dims(), data)
}

/// Makes masks disjoint: classes earlier in `priority` claim shared voxels.
pub fn resolve_overlaps(masks: &[BinaryMask], priority: &[usize]) -> Result<Vec<BinaryMask>> {
    let mut order: Vec<usize> = priority.to_vec();
    let mut seen = vec![false; masks.len()];
    for &p in priority {
        if p >= masks.len() || seen[p] {
            return Err(Error::InvalidArgument(format!(
                "invalid class priority {priority:?} for {} classes",
                masks.len()
            )));
        }
        seen[p] = true;
    }
    order.extend((0..masks.len()).filter(|&i| !seen[i]));
    let dims = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no masks".into()))?
        .dims();
    let mut claimed = BinaryMask::empty(dims);
    let mut out: Vec<BinaryMask> = masks.iter().map(|m| BinaryMask::empty(m.dims())).collect();
    for &c in &order {
        let own = masks[c].difference(&claimed)?;
        claimed = claimed.union(&own)?;
        out[c] = own;
    }
    Ok(out)
}

/// Post-processing of raw mask channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPostProcess {
    pub kernel: usize,
    pub threshold: f32,
    /// Class order for resolving overlaps; first wins.
    pub priority: Vec<usize>,
}

impl Default for MaskPostProcess {
    fn default() -> Self {
        Self {
            kernel: 3,
            threshold: 0.0,
            priority: Vec::new(),
        }
    }
}

/// Raw channels plus their binarized, disjoint masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    pub raw: Volume3D,
    pub masks: Vec<BinaryMask>,
}

/// Reverse loop in the mask domain with the boundary constraint applied
/// after every step. Returns the raw channels, with `-1` outside `boundary`.
pub fn sample_mask_raw<P: NoisePredictor + ?Sized>(
    model: &P,
    boundary: &BinaryMask,
    spheres: &[Option<BoundingSphere>],
    schedule: &DiffusionSchedule,
    rng: &mut impl rand::Rng,
) -> Result<Volume3D> {
    let n = model.contract().image_channels;
    if spheres.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} control spheres for a {n}-channel mask model",
            spheres.len()
        )));
    }
    if boundary.is_empty() {
        return Err(Error::EmptyMask);
    }
    let dims = boundary.dims();
    let condition = Condition::channels(sphere_channels(spheres, dims)?);
    let steps = schedule.steps();
    let mut x = {
        let noise = normal_volume([dims[0], dims[1], dims[2], n], rng);
        let eps_b = normal_volume(noise.dims(), rng);
        let empty = Volume3D::filled(noise.dims(), EMPTY_VALUE);
        let mut x = forward_diffuse(&empty, steps, &eps_b, schedule)?;
        for (v, _) in boundary.data().iter().enumerate().filter(|(_, &m)| m) {
            for c in 0..n {
                *x.at_mut(v, c) = noise.at(v, c);
            }
        }
        x
    };
    for t in (1..=steps).rev() {
        let o = reverse_step(model, &x, t, schedule, rng, &condition)?;
        let eps_b = normal_volume(o.dims(), rng);
        x = constrained_mask_step(&o, t, boundary, schedule, &eps_b)?;
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

/// Samples raw channels and post-processes them into disjoint binary masks
/// contained in `boundary`.
pub fn sample_mask<P: NoisePredictor + ?Sized>(
    model: &P,
    boundary: &BinaryMask,
    spheres: &[Option<BoundingSphere>],
    schedule: &DiffusionSchedule,
    post: &MaskPostProcess,
    rng: &mut impl rand::Rng,
) -> Result<MaskSample> {
    let raw = sample_mask_raw(model, boundary, spheres, schedule, rng)?;
    let mut masks = Vec::with_capacity(raw.channels());
    for c in 0..raw.channels() {
        masks.push(smooth_binarize(
            &raw.channel(c)?,
            post.kernel,
            post.threshold,
            boundary,
        )?);
    }
    let masks = resolve_overlaps(&masks, &post.priority)?;
    Ok(MaskSample { raw, masks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_of(dims: [usize; 3], pts: &[[usize; 3]]) -> BinaryMask {
        let mut m = BinaryMask::empty(dims);
        for p in pts {
            m.set(p[0], p[1], p[2], true);
        }
        m
    }

    #[test]
    fn single_voxel_sphere() {
        let s = bounding_sphere(&mask_of([8, 8, 8], &[[4, 4, 4]])).unwrap();
        assert_eq!(s.center, [4.0, 4.0, 4.0]);
        assert_eq!(s.radius, 0.0);
        assert_eq!(
            bounding_sphere(&BinaryMask::empty([2, 2, 2])),
            Err(Error::EmptyMask)
        );
    }

    #[test]
    fn two_voxel_sphere() {
        let s = bounding_sphere(&mask_of([3, 3, 3], &[[0, 0, 0], [0, 0, 2]])).unwrap();
        assert_eq!(s.center, [0.0, 0.0, 1.0]);
        assert!((s.radius - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cube_corners_sphere() {
        let mut pts = Vec::new();
        for z in [0, 2] {
            for y in [0, 2] {
                for x in [0, 2] {
                    pts.push([z, y, x]);
                }
            }
        }
        let s = bounding_sphere(&mask_of([3, 3, 3], &pts)).unwrap();
        for c in s.center {
            assert!((c - 1.0).abs() < 1e-9);
        }
        assert!((s.radius - libm::sqrt(3.0)).abs() < 1e-9);
    }

    #[test]
    fn rasterized_point_and_ball() {
        let p = BoundingSphere {
            center: [2.0, 2.0, 2.0],
            radius: 0.0,
        };
        assert_eq!(rasterize_sphere(&p, [5, 5, 5]).count(), 1);
        let b = BoundingSphere {
            center: [8.0, 8.0, 8.0],
            radius: 3.0,
        };
        let count = rasterize_sphere(&b, [16, 16, 16]).count() as f64;
        let expect = 4.0 / 3.0 * core::f64::consts::PI * 27.0;
        assert!((count - expect).abs() <= 0.1 * expect, "{count}");
        let far = BoundingSphere {
            center: [-20.0, 0.0, 0.0],
            radius: 3.0,
        };
        assert!(rasterize_sphere(&far, [4, 4, 4]).is_empty());
    }

    #[test]
    fn smoothing_cases() {
        let b = BinaryMask::full([4, 4, 4]);
        let plus = Volume3D::filled([4, 4, 4, 1], 1.0);
        assert_eq!(smooth_binarize(&plus, 3, 0.0, &b).unwrap().count(), 64);
        let minus = Volume3D::filled([4, 4, 4, 1], -1.0);
        assert!(smooth_binarize(&minus, 3, 0.0, &b).unwrap().is_empty());
        let mut spot = Volume3D::filled([5, 5, 5, 1], -1.0);
        spot.set(2, 2, 2, 0, 1.0);
        assert!(smooth_binarize(&spot, 3, 0.0, &BinaryMask::full([5, 5, 5]))
            .unwrap()
            .is_empty());
        assert!(smooth_binarize(&spot, 2, 0.0, &BinaryMask::full([5, 5, 5])).is_err());
        let half = BinaryMask::from_fn([4, 4, 4], |z, _, _| z < 2);
        let m = smooth_binarize(&plus, 3, 0.0, &half).unwrap();
        assert_eq!(m, half);
    }

    #[test]
    fn constrained_step_cases() {
        let s = DiffusionSchedule::new(crate::schedule::ScheduleKind::Cosine, 10).unwrap();
        let o = Volume3D::filled([2, 2, 1, 1], 0.4);
        let eps = Volume3D::filled([2, 2, 1, 1], 0.5);
        let full = BinaryMask::full([2, 2, 1]);
        assert_eq!(
            constrained_mask_step(&o, 5, &full, &s, &eps)
                .unwrap()
                .data(),
            o.data()
        );
        let none = BinaryMask::empty([2, 2, 1]);
        let out = constrained_mask_step(&o, 5, &none, &s, &eps).unwrap();
        let expect = forward_diffuse(&Volume3D::filled([2, 2, 1, 1], -1.0), 4, &eps, &s).unwrap();
        assert_eq!(out.data(), expect.data());
        let last = constrained_mask_step(&o, 1, &none, &s, &eps).unwrap();
        assert!(last.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn overlap_priority() {
        let a = BinaryMask::new([1, 1, 3], vec![true, true, false]).unwrap();
        let b = BinaryMask::new([1, 1, 3], vec![false, true, true]).unwrap();
        let r = resolve_overlaps(&[a.clone(), b.clone()], &[1, 0]).unwrap();
        assert_eq!(r[0].data(), &[true, false, false]);
        assert_eq!(r[1].data(), &[false, true, true]);
        let r = resolve_overlaps(&[a, b], &[]).unwrap();
        assert_eq!(r[0].data(), &[true, true, false]);
        assert_eq!(r[1].data(), &[false, false, true]);
    }
}
