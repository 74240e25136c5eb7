//! Segmentation overlap, surface agreement and image similarity metrics.
//!
//! Scores are on a 0 to 100 scale. PSNR of identical inputs is `f64::INFINITY`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffmask::mean_filter;
use crate::error::{Error, Result};
use crate::texture::{predict_output_histogram, HistControlParams, HistogramCondition};
use crate::volume::{BinaryMask, Volume3D};

/// Peak of the normalized `[-1, 1]` range.
pub const DEFAULT_PEAK: f64 = 2.0;
pub const SSIM_WINDOW: usize = 7;
/// Default surface tolerance, in the units of the voxel spacing.
pub const DEFAULT_NSD_TAU: f64 = 1.0;

fn same_mask_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!(
            "{:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `100 * 2|A n B| / (|A| + |B|)`; two empty masks score 100.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    same_mask_dims(a, b)?;
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Ok(100.0);
    }
    let inter = a.intersect(b)?.count();
    Ok(100.0 * 2.0 * inter as f64 / (na + nb) as f64)
}

/// Normalized surface distance at tolerance `tau` (physical units).
///
/// Surface voxels of both masks are pooled: the score is the share of all
/// surface voxels lying within `tau` of the other mask's surface. Two empty
/// masks score 100, exactly one empty mask scores 0.
pub fn nsd(a: &BinaryMask, b: &BinaryMask, tau: f64, spacing: [f64; 3]) -> Result<f64> {
    same_mask_dims(a, b)?;
    if !(tau >= 0.0) || spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(
            "tau must be >= 0 and spacing positive".into(),
        ));
    }
    let (sa, sb) = (a.surface(), b.surface());
    let (na, nb) = (sa.count(), sb.count());
    match (na, nb) {
        (0, 0) => return Ok(100.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let offsets = ball_offsets(tau, spacing);
    let hits = |from: &BinaryMask, to: &BinaryMask| -> usize {
        from.coords()
            .filter(|&[z, y, x]| {
                offsets
                    .iter()
                    .any(|&[dz, dy, dx]| to.get_signed(z as i64 + dz, y as i64 + dy, x as i64 + dx))
            })
            .count()
    };
    let good = hits(&sa, &sb) + hits(&sb, &sa);
    Ok(100.0 * good as f64 / (na + nb) as f64)
}

/// Integer offsets whose physical length is at most `tau`.
fn ball_offsets(tau: f64, spacing: [f64; 3]) -> Vec<[i64; 3]> {
    let r: [i64; 3] = core::array::from_fn(|a| libm::floor(tau / spacing[a]) as i64);
    let mut out = Vec::new();
    for dz in -r[0]..=r[0] {
        for dy in -r[1]..=r[1] {
            for dx in -r[2]..=r[2] {
                if physical_sq([dz, dy, dx], spacing) <= tau * tau {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

fn physical_sq(d: [i64; 3], spacing: [f64; 3]) -> f64 {
    (0..3).map(|a| (d[a] as f64 * spacing[a]).powi(2)).sum()
}

fn region_or_full(a: &Volume3D, region: Option<&BinaryMask>) -> Result<BinaryMask> {
    match region {
        Some(r) => {
            a.same_spatial(r.dims())?;
            if r.is_empty() {
                return Err(Error::EmptyMask);
            }
            Ok(r.clone())
        }
        None => Ok(BinaryMask::full(a.spatial())),
    }
}

fn single_channel(a: &Volume3D, b: &Volume3D) -> Result<()> {
    a.same_dims(b)?;
    if a.channels() != 1 {
        return Err(Error::DimMismatch(format!(
            "image metrics expect 1 channel, got {}",
            a.channels()
        )));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)` over `region`; infinite when the inputs agree there.
pub fn psnr(a: &Volume3D, b: &Volume3D, region: Option<&BinaryMask>, peak: f64) -> Result<f64> {
    single_channel(a, b)?;
    let region = region_or_full(a, region)?;
    let (mut se, mut n) = (0.0f64, 0usize);
    for (v, _) in region.data().iter().enumerate().filter(|(_, &m)| m) {
        let d = a.at(v, 0) as f64 - b.at(v, 0) as f64;
        se += d * d;
        n += 1;
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(peak * peak / mse))
}

/// Mean local SSIM over `region` in `[-1, 1]`, using a cubic uniform window
/// truncated at the volume border.
pub fn ssim_raw(a: &Volume3D, b: &Volume3D, region: Option<&BinaryMask>, peak: f64) -> Result<f64> {
    single_channel(a, b)?;
    let region = region_or_full(a, region)?;
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let prod = |f: &dyn Fn(f32, f32) -> f32| -> Result<Volume3D> {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Volume3D::new(a.dims(), a.spacing(), data)
    };
    let mu_a = mean_filter(a, SSIM_WINDOW)?;
    let mu_b = mean_filter(b, SSIM_WINDOW)?;
    let aa = mean_filter(&prod(&|x, _| x * x)?, SSIM_WINDOW)?;
    let bb = mean_filter(&prod(&|_, y| y * y)?, SSIM_WINDOW)?;
    let ab = mean_filter(&prod(&|x, y| x * y)?, SSIM_WINDOW)?;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (v, _) in region.data().iter().enumerate().filter(|(_, &m)| m) {
        let (ma, mb) = (mu_a.at(v, 0) as f64, mu_b.at(v, 0) as f64);
        let va = (aa.at(v, 0) as f64 - ma * ma).max(0.0);
        let vb = (bb.at(v, 0) as f64 - mb * mb).max(0.0);
        let cov = ab.at(v, 0) as f64 - ma * mb;
        sum +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        n += 1;
    }
    Ok(sum / n as f64)
}

/// [`ssim_raw`] scaled to `[0, 100]`; negative structural agreement maps to 0.
pub fn ssim(a: &Volume3D, b: &Volume3D, region: Option<&BinaryMask>) -> Result<f64> {
    Ok(100.0 * ssim_raw(a, b, region, DEFAULT_PEAK)?.max(0.0))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, libm::sqrt(var)))
}

/// Two generations from the same input under different seeds, and the
/// lesion region they are compared on.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub first: Volume3D,
    pub second: Volume3D,
    pub region: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub pairs: usize,
    /// Infinite if any pair is identical on its region.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

/// Pairwise similarity of generations; lower means more diverse.
pub fn diversity_report(pairs: &[SamplePair]) -> Result<DiversityReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "diversity needs at least one pair".into(),
        ));
    }
    let mut p = Vec::with_capacity(pairs.len());
    let mut s = Vec::with_capacity(pairs.len());
    for pair in pairs {
        p.push(psnr(
            &pair.first,
            &pair.second,
            Some(&pair.region),
            DEFAULT_PEAK,
        )?);
        s.push(ssim(&pair.first, &pair.second, Some(&pair.region))?);
    }
    Ok(DiversityReport {
        pairs: pairs.len(),
        mean_psnr: mean_std(&p).unwrap().0,
        mean_ssim: mean_std(&s).unwrap().0,
        psnr: p,
        ssim: s,
    })
}

/// Generated lesions for one control histogram.
#[derive(Debug, Clone)]
pub struct ShiftCase {
    pub source: HistogramCondition,
    pub control: HistogramCondition,
    /// Histograms of the generated lesions.
    pub generated: Vec<HistogramCondition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftEntry {
    pub generated_mean_histogram: HistogramCondition,
    pub predicted: HistogramCondition,
    pub l1_gap: f64,
    /// Mean intensity implied by the averaged generated histogram.
    pub generated_mean: f64,
    pub control_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub entries: Vec<ShiftEntry>,
    /// Generated means strictly increase in the given control order.
    pub monotone: bool,
}

/// Compares generated lesion histograms with the prediction of `params`.
pub fn histogram_shift_report(
    cases: &[ShiftCase],
    params: &HistControlParams,
) -> Result<ShiftReport> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument(
            "histogram shift needs at least one control".into(),
        ));
    }
    let mut entries = Vec::with_capacity(cases.len());
    for c in cases {
        if c.generated.is_empty() {
            return Err(Error::InvalidArgument(
                "a control has no generated lesions".into(),
            ));
        }
        let mean_h = HistogramCondition::average(&c.generated)?;
        let predicted = predict_output_histogram(&c.source, &c.control, params)?;
        entries.push(ShiftEntry {
            l1_gap: mean_h.l1_distance(&predicted)?,
            generated_mean: mean_h.mean(),
            control_mean: c.control.mean(),
            generated_mean_histogram: mean_h,
            predicted,
        });
    }
    let monotone = entries
        .windows(2)
        .all(|w| w[1].generated_mean > w[0].generated_mean);
    Ok(ShiftReport { entries, monotone })
}

/// Per-class Dice and NSD of a prediction against ground truth.
pub fn per_class_scores(
    truth: &[BinaryMask],
    pred: &[BinaryMask],
    tau: f64,
    spacing: [f64; 3],
) -> Result<Vec<(f64, f64)>> {
    if truth.len() != pred.len() {
        return Err(Error::DimMismatch(format!(
            "{} truth classes vs {} predicted",
            truth.len(),
            pred.len()
        )));
    }
    truth
        .iter()
        .zip(pred)
        .map(|(t, p)| Ok((dice(t, p)?, nsd(t, p, tau, spacing)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_volume, seeded};
    use alloc::vec;
    use proptest::prelude::*;

    fn cube(dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> BinaryMask {
        BinaryMask::from_fn(dims, |z, y, x| {
            (lo[0]..hi[0]).contains(&z)
                && (lo[1]..hi[1]).contains(&y)
                && (lo[2]..hi[2]).contains(&x)
        })
    }

    #[test]
    fn dice_cases() {
        let a = cube([4, 4, 4], [0, 0, 0], [1, 1, 2]);
        let b = cube([4, 4, 4], [0, 0, 0], [1, 1, 1]);
        assert_eq!(dice(&a, &a).unwrap(), 100.0);
        assert!((dice(&a, &b).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        let c = cube([4, 4, 4], [3, 3, 3], [4, 4, 4]);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        let e = BinaryMask::empty([4, 4, 4]);
        assert_eq!(dice(&e, &e).unwrap(), 100.0);
        assert!(dice(&a, &BinaryMask::empty([4, 4, 3])).is_err());
    }

    #[test]
    fn nsd_cases() {
        let a = cube([8, 8, 8], [2, 2, 2], [5, 5, 5]);
        assert_eq!(nsd(&a, &a, 1.0, [1.0; 3]).unwrap(), 100.0);
        let shifted = cube([8, 8, 8], [2, 2, 3], [5, 5, 6]);
        assert_eq!(nsd(&a, &shifted, 1.0, [1.0; 3]).unwrap(), 100.0);
        let far = cube([16, 16, 16], [12, 12, 12], [15, 15, 15]);
        let near = cube([16, 16, 16], [0, 0, 0], [3, 3, 3]);
        assert_eq!(nsd(&near, &far, 1.0, [1.0; 3]).unwrap(), 0.0);
        // Spacing turns a one-voxel shift along z into 2 mm.
        let zs = cube([8, 8, 8], [3, 2, 2], [6, 5, 5]);
        assert!(nsd(&a, &zs, 1.0, [2.0, 1.0, 1.0]).unwrap() < 100.0);
        let e = BinaryMask::empty([8, 8, 8]);
        assert_eq!(nsd(&e, &e, 1.0, [1.0; 3]).unwrap(), 100.0);
        assert_eq!(nsd(&a, &e, 1.0, [1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn psnr_cases() {
        let mut rng = seeded(1);
        let a = normal_volume([4, 4, 4, 1], &mut rng).map(|v| v.clamp(-0.8, 0.8));
        assert_eq!(psnr(&a, &a, None, 2.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        let p = psnr(&a, &b, None, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-4, "{p}");
        let mut c = a.clone();
        *c.at_mut(0, 0) += 0.5;
        let region = BinaryMask::from_fn([4, 4, 4], |z, _, _| z > 0);
        assert_eq!(psnr(&a, &c, Some(&region), 2.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &c, Some(&BinaryMask::empty([4, 4, 4])), 2.0).is_err());
    }

    #[test]
    fn ssim_cases() {
        let mut rng = seeded(2);
        let a = normal_volume([8, 8, 8, 1], &mut rng).map(|v| 0.3 * v);
        assert!((ssim(&a, &a, None).unwrap() - 100.0).abs() < 1e-6);
        let mean = a.data().iter().sum::<f32>() / a.data().len() as f32;
        let z = a.map(|v| v - mean);
        let neg = z.map(|v| -v);
        assert!(ssim_raw(&z, &neg, None, 2.0).unwrap() < 0.0);
        assert_eq!(ssim(&z, &neg, None).unwrap(), 0.0);
        let mut total = 0.0;
        for s in 0..5 {
            let x = normal_volume([8, 8, 8, 1], &mut seeded(10 + s)).map(|v| 0.3 * v);
            let y = normal_volume([8, 8, 8, 1], &mut seeded(20 + s)).map(|v| 0.3 * v);
            total += ssim(&x, &y, None).unwrap() / 5.0;
        }
        assert!(total < 10.0, "{total}");
    }

    #[test]
    fn diversity_of_identical_pairs() {
        let a = normal_volume([8, 8, 8, 1], &mut seeded(3)).map(|v| 0.2 * v);
        let region = cube([8, 8, 8], [2, 2, 2], [6, 6, 6]);
        let r = diversity_report(&[SamplePair {
            first: a.clone(),
            second: a,
            region,
        }])
        .unwrap();
        assert_eq!(r.mean_psnr, f64::INFINITY);
        assert!((r.mean_ssim - 100.0).abs() < 1e-6);
        assert!(diversity_report(&[]).is_err());
    }

    #[test]
    fn diversity_falls_with_noise_scale() {
        let base = normal_volume([8, 8, 8, 1], &mut seeded(4)).map(|v| 0.3 * v);
        let region = cube([8, 8, 8], [1, 1, 1], [7, 7, 7]);
        let mut last = f64::INFINITY;
        for scale in [0.01f32, 0.1, 0.5] {
            let pairs: Vec<SamplePair> = (0..5)
                .map(|i| {
                    let n1 = normal_volume([8, 8, 8, 1], &mut seeded(100 + i));
                    let n2 = normal_volume([8, 8, 8, 1], &mut seeded(200 + i));
                    let mk = |n: &Volume3D| {
                        let d = base
                            .data()
                            .iter()
                            .zip(n.data())
                            .map(|(b, e)| b + scale * e)
                            .collect();
                        Volume3D::new(base.dims(), [1.0; 3], d).unwrap()
                    };
                    SamplePair {
                        first: mk(&n1),
                        second: mk(&n2),
                        region: region.clone(),
                    }
                })
                .collect();
            let s = diversity_report(&pairs).unwrap().mean_ssim;
            assert!(s < last);
            last = s;
        }
    }

    #[test]
    fn shift_report_identity() {
        let h = HistogramCondition::from_weights(vec![0.1, 0.6, 0.3, 0.0], (-1.0, 1.0)).unwrap();
        let r = histogram_shift_report(
            &[ShiftCase {
                source: h.clone(),
                control: h.clone(),
                generated: vec![h.clone()],
            }],
            &HistControlParams::IDENTITY_SOURCE,
        )
        .unwrap();
        let floor_gap = r.entries[0].predicted.l1_distance(&h).unwrap();
        assert!(floor_gap < 1e-6);
        assert!(r.monotone);
        assert!(histogram_shift_report(&[], &HistControlParams::IDENTITY_SOURCE).is_err());
    }

    fn brute_nsd(a: &BinaryMask, b: &BinaryMask, tau: f64) -> f64 {
        let sa: Vec<[usize; 3]> = a.surface().coords().collect();
        let sb: Vec<[usize; 3]> = b.surface().coords().collect();
        if sa.is_empty() && sb.is_empty() {
            return 100.0;
        }
        if sa.is_empty() || sb.is_empty() {
            return 0.0;
        }
        let close = |p: &[usize; 3], set: &[[usize; 3]]| {
            set.iter().any(|q| {
                let d: f64 = (0..3).map(|i| (p[i] as f64 - q[i] as f64).powi(2)).sum();
                libm::sqrt(d) <= tau
            })
        };
        let good = sa.iter().filter(|p| close(p, &sb)).count()
            + sb.iter().filter(|p| close(p, &sa)).count();
        100.0 * good as f64 / (sa.len() + sb.len()) as f64
    }

    fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(proptest::bool::weighted(0.35), 64)
            .prop_map(|bits| BinaryMask::new([4, 4, 4], bits).unwrap())
    }

    proptest! {
        #[test]
        fn dice_and_nsd_match_brute_force(a in mask_strategy(), b in mask_strategy(), tau in 0.0f64..2.5) {
            let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
            let (na, nb) = (a.count(), b.count());
            let want = if na + nb == 0 { 100.0 } else { 100.0 * 2.0 * inter as f64 / (na + nb) as f64 };
            prop_assert_eq!(dice(&a, &b).unwrap(), want);
            prop_assert!((nsd(&a, &b, tau, [1.0; 3]).unwrap() - brute_nsd(&a, &b, tau)).abs() < 1e-9);
        }

        #[test]
        fn metrics_are_symmetric(a in mask_strategy(), b in mask_strategy()) {
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            prop_assert_eq!(nsd(&a, &b, 1.0, [1.0; 3]).unwrap(), nsd(&b, &a, 1.0, [1.0; 3]).unwrap());
            prop_assert!((0.0..=100.0).contains(&dice(&a, &b).unwrap()));
        }

        #[test]
        fn image_metrics_are_symmetric(seed in 0u64..1000) {
            let a = normal_volume([4, 6, 6, 1], &mut seeded(seed)).map(|v| 0.3 * v);
            let b = normal_volume([4, 6, 6, 1], &mut seeded(seed + 1)).map(|v| 0.3 * v);
            prop_assert_eq!(psnr(&a, &b, None, 2.0).unwrap(), psnr(&b, &a, None, 2.0).unwrap());
            prop_assert!((ssim(&a, &b, None).unwrap() - ssim(&b, &a, None).unwrap()).abs() < 1e-9);
        }
    }
}
