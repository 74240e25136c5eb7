//! Lesion texture histograms, their clustering and encoding as cross-attention
//! context, the log-linear output-histogram model, and per-class channel
//! composition.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, MaskSet, Volume3D};

/// Default bin count over the normalized intensity range.
pub const DEFAULT_BINS: usize = 64;
/// Default number of bins folded into one context token.
pub const DEFAULT_GROUP: usize = 8;
/// Floor applied to bins before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-8;

/// Normalized intensity histogram of a lesion region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramCondition {
    pub bins: Vec<f64>,
    pub range: (f64, f64),
    pub bin_count: usize,
}

impl HistogramCondition {
    /// Builds a histogram from non-negative weights, normalizing them to sum 1.
    pub fn from_weights(weights: Vec<f64>, range: (f64, f64)) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::InvalidArgument(
                "histogram needs at least 2 bins".into(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "histogram weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("histogram weights sum to zero".into()));
        }
        let bin_count = weights.len();
        Ok(Self {
            bins: weights.into_iter().map(|w| w / total).collect(),
            range,
            bin_count,
        })
    }

    pub fn bin_width(&self) -> f64 {
        (self.range.1 - self.range.0) / self.bin_count as f64
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.range.0 + (i as f64 + 0.5) * self.bin_width()
    }

    /// Mean intensity implied by the bin centres.
    pub fn mean(&self) -> f64 {
        self.bins
            .iter()
            .enumerate()
            .map(|(i, p)| p * self.bin_center(i))
            .sum()
    }

    /// Sum of absolute bin differences.
    pub fn l1_distance(&self, other: &HistogramCondition) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .bins
            .iter()
            .zip(&other.bins)
            .map(|(a, b)| (a - b).abs())
            .sum())
    }

    fn check_compatible(&self, other: &HistogramCondition) -> Result<()> {
        if self.bin_count != other.bin_count {
            return Err(Error::DimMismatch(format!(
                "histograms with {} and {} bins",
                self.bin_count, other.bin_count
            )));
        }
        Ok(())
    }

    /// Element-wise mean of several histograms.
    pub fn average(hists: &[HistogramCondition]) -> Result<HistogramCondition> {
        let first = hists
            .first()
            .ok_or_else(|| Error::InvalidArgument("no histograms to average".into()))?;
        let mut acc = vec![0.0; first.bin_count];
        for h in hists {
            first.check_compatible(h)?;
            for (a, b) in acc.iter_mut().zip(&h.bins) {
                *a += b;
            }
        }
        HistogramCondition::from_weights(acc, first.range)
    }
}

/// Histogram of channel 0 of `volume` over the voxels of `mask`. Values at or
/// beyond the range edges land in the edge bins.
pub fn extract_histogram(
    volume: &Volume3D,
    mask: &BinaryMask,
    bin_count: usize,
    range: (f64, f64),
) -> Result<HistogramCondition> {
    if bin_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 bins, got {bin_count}"
        )));
    }
    if !(range.1 > range.0) {
        return Err(Error::InvalidArgument(format!(
            "degenerate range {range:?}"
        )));
    }
    volume.same_spatial(mask.dims())?;
    let mut counts = vec![0.0f64; bin_count];
    let scale = bin_count as f64 / (range.1 - range.0);
    let mut n = 0usize;
    for (v, _) in mask.data().iter().enumerate().filter(|(_, &m)| m) {
        let value = volume.at(v, 0) as f64;
        let b = libm::floor((value - range.0) * scale);
        let b = if b < 0.0 {
            0
        } else {
            (b as usize).min(bin_count - 1)
        };
        counts[b] += 1.0;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    HistogramCondition::from_weights(counts, range)
}

/// K-means model over histogram vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramClusterModel {
    pub centroids: Vec<HistogramCondition>,
    pub assignments: Vec<usize>,
    pub seed: u64,
    pub k: usize,
}

impl HistogramClusterModel {
    /// Reorders clusters by increasing centroid mean intensity.
    pub fn ordered_by_mean(&self) -> HistogramClusterModel {
        let mut order: Vec<usize> = (0..self.k).collect();
        order.sort_by(|&a, &b| {
            self.centroids[a]
                .mean()
                .partial_cmp(&self.centroids[b].mean())
                .unwrap_or(core::cmp::Ordering::Equal)
        });
        let mut rank = vec![0; self.k];
        for (new, &old) in order.iter().enumerate() {
            rank[old] = new;
        }
        HistogramClusterModel {
            centroids: order.iter().map(|&i| self.centroids[i].clone()).collect(),
            assignments: self.assignments.iter().map(|&a| rank[a]).collect(),
            seed: self.seed,
            k: self.k,
        }
    }
}

const KMEANS_MAX_ITERS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// K-means (k-means++ seeding, Lloyd iterations) over histogram bin vectors.
pub fn cluster_histograms(
    histograms: &[HistogramCondition],
    k: usize,
    seed: u64,
) -> Result<HistogramClusterModel> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if histograms.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} histograms for {k} clusters",
            histograms.len()
        )));
    }
    let first = &histograms[0];
    for h in histograms {
        first.check_compatible(h)?;
    }
    let mut rng = crate::rng::seeded(seed);
    let points: Vec<&[f64]> = histograms.iter().map(|h| h.bins.as_slice()).collect();

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].to_vec());
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        };
        centroids.push(points[pick].to_vec());
    }

    let mut assignments = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = nearest(p, &centroids);
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; first.bin_count]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster with the point farthest from its centroid
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        sq_dist(points[a], &centroids[assignments[a]])
                            .partial_cmp(&sq_dist(points[b], &centroids[assignments[b]]))
                            .unwrap_or(core::cmp::Ordering::Equal)
                    })
                    .unwrap_or(0);
                centroids[c] = points[far].to_vec();
                assignments[far] = c;
                changed = true;
            } else {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let centroids = centroids
        .into_iter()
        .map(|c| HistogramCondition::from_weights(c, first.range))
        .collect::<Result<Vec<_>>>()?;
    Ok(HistogramClusterModel {
        centroids,
        assignments,
        seed,
        k,
    })
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Cross-attention context: `count` tokens of width `dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextTokens {
    dim: usize,
    data: Vec<f32>,
}

impl ContextTokens {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimMismatch(format!(
                "{} values do not form tokens of width {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Token width produced by [`encode_conditions`].
pub fn token_dim(bin_count: usize, group: usize, histograms: usize) -> usize {
    group + bin_count / group + histograms
}

/// Encodes one histogram as context tokens; see [`encode_conditions`].
pub fn encode_condition(h: &HistogramCondition, group: usize) -> Result<ContextTokens> {
    encode_conditions(core::slice::from_ref(h), group)
}

/// Encodes one or more histograms (one per lesion class) as tokens.
///
/// Each token carries `group` consecutive bins scaled by the token count,
/// a one-hot of the group position, and a one-hot of the histogram index.
pub fn encode_conditions(hists: &[HistogramCondition], group: usize) -> Result<ContextTokens> {
    let first = hists
        .first()
        .ok_or_else(|| Error::InvalidArgument("no histogram to encode".into()))?;
    if group == 0 || first.bin_count % group != 0 {
        return Err(Error::InvalidArgument(format!(
            "group size {group} does not divide {} bins",
            first.bin_count
        )));
    }
    let groups = first.bin_count / group;
    let dim = token_dim(first.bin_count, group, hists.len());
    let mut data = Vec::with_capacity(dim * groups * hists.len());
    for (hi, h) in hists.iter().enumerate() {
        first.check_compatible(h)?;
        for g in 0..groups {
            for b in &h.bins[g * group..(g + 1) * group] {
                data.push((*b * groups as f64) as f32);
            }
            for j in 0..groups {
                data.push(if j == g { 1.0 } else { 0.0 });
            }
            for j in 0..hists.len() {
                data.push(if j == hi { 1.0 } else { 0.0 });
            }
        }
    }
    ContextTokens::new(dim, data)
}

/// How an inference-time histogram is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramStrategy {
    /// A cluster centroid; `None` draws one uniformly.
    ClusterCentroid(Option<usize>),
    /// A uniformly drawn real lesion histogram from the donor pool.
    DonorLesion,
    UserSupplied(HistogramCondition),
}

pub fn sample_inference_histogram(
    strategy: &HistogramStrategy,
    clusters: Option<&HistogramClusterModel>,
    donors: &[HistogramCondition],
    rng: &mut impl Rng,
) -> Result<HistogramCondition> {
    match strategy {
        HistogramStrategy::ClusterCentroid(index) => {
            let model = clusters
                .filter(|m| !m.centroids.is_empty())
                .ok_or_else(|| Error::InvalidArgument("no cluster model supplied".into()))?;
            let i = match index {
                Some(i) => *i,
                None => rng.random_range(0..model.centroids.len()),
            };
            model.centroids.get(i).cloned().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "centroid {i} out of range for k={}",
                    model.centroids.len()
                ))
            })
        }
        HistogramStrategy::DonorLesion => {
            if donors.is_empty() {
                return Err(Error::InvalidArgument("donor pool is empty".into()));
            }
            Ok(donors[rng.random_range(0..donors.len())].clone())
        }
        HistogramStrategy::UserSupplied(h) => {
            HistogramCondition::from_weights(h.bins.clone(), h.range)
        }
    }
}

/// Scale and offset terms of the log-linear histogram model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistControlParams {
    pub r: f64,
    pub s: f64,
    pub p: f64,
    pub q: f64,
}

impl HistControlParams {
    pub const IDENTITY_SOURCE: Self = Self {
        r: 1.0,
        s: 0.0,
        p: 0.0,
        q: 0.0,
    };
    pub const IDENTITY_CONTROL: Self = Self {
        r: 0.0,
        s: 1.0,
        p: 0.0,
        q: 0.0,
    };
    pub const GEOMETRIC_MEAN: Self = Self {
        r: 0.5,
        s: 0.5,
        p: 0.0,
        q: 0.0,
    };
}

/// Per-bin log-space response `r log l + p + s log h + q` (bins floored at
/// [`LOG_FLOOR`]), before exponentiation.
pub fn log_response(l: f64, h: f64, params: &HistControlParams) -> f64 {
    params.r * libm::log(l.max(LOG_FLOOR))
        + params.p
        + params.s * libm::log(h.max(LOG_FLOOR))
        + params.q
}

/// Predicted output histogram `exp(m)` for source `l` under control `h`,
/// re-normalized to a probability vector.
pub fn predict_output_histogram(
    l: &HistogramCondition,
    h: &HistogramCondition,
    params: &HistControlParams,
) -> Result<HistogramCondition> {
    l.check_compatible(h)?;
    let m: Vec<f64> = l
        .bins
        .iter()
        .zip(&h.bins)
        .map(|(&a, &b)| log_response(a, b, params))
        .collect();
    // shift by the max before exponentiating; the shift cancels in normalization
    let top = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights = m.iter().map(|v| libm::exp(v - top)).collect();
    HistogramCondition::from_weights(weights, l.range)
}

/// One observation for [`fit_histogram_params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramObservation {
    pub source: HistogramCondition,
    pub control: HistogramCondition,
    /// Observed output bins; need not be normalized.
    pub observed: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramFit {
    pub params: HistControlParams,
    /// Root-mean-square residual in log space.
    pub residual: f64,
}

/// Least-squares fit of `log O = r log l + s log h + c` over all bins of all
/// observations. Only the sum `p + q = c` is identifiable; it is split evenly.
pub fn fit_histogram_params(pairs: &[HistogramObservation]) -> Result<HistogramFit> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 observations, got {}",
            pairs.len()
        )));
    }
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    let mut rows = 0usize;
    for obs in pairs {
        obs.source.check_compatible(&obs.control)?;
        if obs.observed.len() != obs.source.bin_count {
            return Err(Error::DimMismatch(format!(
                "observed output has {} bins, expected {}",
                obs.observed.len(),
                obs.source.bin_count
            )));
        }
        for k in 0..obs.source.bin_count {
            let row = [
                libm::log(obs.source.bins[k].max(LOG_FLOOR)),
                libm::log(obs.control.bins[k].max(LOG_FLOOR)),
                1.0,
            ];
            let y = libm::log(obs.observed[k].max(LOG_FLOOR));
            for i in 0..3 {
                for j in 0..3 {
                    ata[i][j] += row[i] * row[j];
                }
                atb[i] += row[i] * y;
            }
            rows += 1;
        }
    }
    let coef = solve3(ata, atb)?;
    let mut sse = 0.0;
    for obs in pairs {
        for k in 0..obs.source.bin_count {
            let pred = coef[0] * libm::log(obs.source.bins[k].max(LOG_FLOOR))
                + coef[1] * libm::log(obs.control.bins[k].max(LOG_FLOOR))
                + coef[2];
            let y = libm::log(obs.observed[k].max(LOG_FLOOR));
            sse += (pred - y) * (pred - y);
        }
    }
    Ok(HistogramFit {
        params: HistControlParams {
            r: coef[0],
            s: coef[1],
            p: coef[2] / 2.0,
            q: coef[2] / 2.0,
        },
        residual: libm::sqrt(sse / rows as f64),
    })
}

/// Gaussian elimination with partial pivoting on a 3x3 system.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Result<[f64; 3]> {
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| {
                a[i][col]
                    .abs()
                    .partial_cmp(&a[j][col].abs())
                    .unwrap_or(core::cmp::Ordering::Equal)
            })
            .unwrap_or(col);
        if a[piv][col].abs() <= 1e-12 * scale {
            return Err(Error::Degenerate(
                "design matrix is singular (source and control not separable)".into(),
            ));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in row + 1..3 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// `sum_i M_f^(i) * o^(i)`: one output channel, zero outside every mask.
pub fn compose_channels(o: &Volume3D, masks: &MaskSet) -> Result<Volume3D> {
    let n = o.channels();
    if masks.n() != n {
        return Err(Error::DimMismatch(format!(
            "{n} channels but {} lesion classes",
            masks.n()
        )));
    }
    o.same_spatial(masks.dims())?;
    let mut out = o.zeros_like(1);
    for (c, m) in masks.masks().iter().enumerate() {
        for (v, _) in m.data().iter().enumerate().filter(|(_, &b)| b) {
            *out.at_mut(v, 0) += o.at(v, c);
        }
    }
    out.set_intensity_range(o.intensity_range());
    Ok(out)
}
