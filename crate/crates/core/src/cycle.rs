//! Gait-cycle estimation from lower-limb keypoint similarity.
//!
//! Each normalized frame's lower-limb joints are quantized into bins, encoded
//! as bits and compared with the first frame by Hamming distance. The
//! resulting waveform dips every half cycle; the median spacing of its
//! troughs gives the half-cycle length.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{
    KeypointFrame, PoseSequence, SkeletonError, SkeletonTopology, normalize_sequence,
};

/// Normalized coordinate range covered by the quantization bins.
pub const ENCODING_RANGE: (f64, f64) = (-2.0, 2.0);
/// Window used by callers when no periodicity is found.
pub const FALLBACK_WINDOW: usize = 48;

#[derive(Debug, Error)]
pub enum CycleError {
    #[error("sequence too short: {len} values, need at least {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("no periodicity detected ({troughs} trough(s) found)")]
    NoPeriodicity { troughs: usize },
    #[error("no cycle estimates to aggregate")]
    NoEstimates,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

pub type Result<T, E = CycleError> = std::result::Result<T, E>;

/// How left/right lower-limb joints are laid out in the code.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimbPairing {
    /// Each joint keeps its own slot.
    ByJoint,
    /// Within each left/right pair, per coordinate the smaller value goes to the
    /// first slot of the pair. The code then cannot tell the legs apart, as in
    /// a side-view silhouette, and repeats every half cycle.
    #[default]
    Unordered,
}

/// Bit pattern used for one quantized coordinate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinCoding {
    /// Only the coordinate's own bin is set.
    OneHot,
    /// Every bin up to and including the coordinate's bin is set, so the
    /// Hamming distance between two codes is the bin distance.
    #[default]
    Thermometer,
}

/// Everything that determines a frame's lower-limb code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LimbEncoding {
    pub bins: usize,
    pub pairing: LimbPairing,
    pub coding: BinCoding,
}

impl LimbEncoding {
    pub fn one_hot(bins: usize) -> Self {
        Self {
            bins,
            pairing: LimbPairing::Unordered,
            coding: BinCoding::OneHot,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleConfig {
    pub bins: usize,
    pub smoothing: usize,
    pub min_separation: usize,
    /// See [`TroughRule::max_level`].
    pub trough_level: f64,
    pub pairing: LimbPairing,
    pub coding: BinCoding,
}

impl CycleConfig {
    pub fn encoding(&self) -> LimbEncoding {
        LimbEncoding {
            bins: self.bins,
            pairing: self.pairing,
            coding: self.coding,
        }
    }

    pub fn trough_rule(&self) -> TroughRule {
        TroughRule {
            smoothing: self.smoothing,
            min_separation: self.min_separation,
            max_level: self.trough_level,
        }
    }
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            bins: 128,
            smoothing: 5,
            min_separation: 6,
            trough_level: 0.5,
            pairing: LimbPairing::Unordered,
            coding: BinCoding::Thermometer,
        }
    }
}

/// Fixed-length bit vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LimbCode {
    words: Vec<u64>,
    len: usize,
}

impl LimbCode {
    fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn is_set(&self, bit: usize) -> bool {
        bit < self.len && self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Number of differing bits. Codes must have equal length.
    pub fn hamming(&self, other: &LimbCode) -> u32 {
        assert_eq!(self.len, other.len, "codes of different length");
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

/// Bin of `v` among `bins` equal intervals over [`ENCODING_RANGE`]; out-of-range values clamp.
pub fn quantize(v: f64, bins: usize) -> usize {
    let (lo, hi) = ENCODING_RANGE;
    let pos = ((v - lo) / (hi - lo) * bins as f64).floor();
    if pos.is_nan() || pos < 0.0 {
        0
    } else {
        (pos as usize).min(bins - 1)
    }
}

/// Code of every lower-limb coordinate: `|lower_limbs| × 2 × bins` bits,
/// joint-major, then x before y.
pub fn encode_lower_limbs(
    frame: &KeypointFrame,
    topo: &SkeletonTopology,
    encoding: &LimbEncoding,
) -> Result<LimbCode> {
    let LimbEncoding {
        bins,
        pairing,
        coding,
    } = *encoding;
    if bins < 2 {
        return Err(CycleError::InvalidParameter(format!(
            "bins must be ≥ 2, got {bins}"
        )));
    }
    let limbs = topo.lower_limbs();
    let mut coords: Vec<[f64; 2]> = limbs
        .iter()
        .map(|&j| [frame.joints[j].x, frame.joints[j].y])
        .collect();
    if pairing == LimbPairing::Unordered {
        for a in 0..limbs.len() {
            let partner = topo.mirror(limbs[a]);
            if let Some(b) = limbs.iter().position(|&j| j == partner).filter(|&b| b > a) {
                let (pa, pb) = (coords[a], coords[b]);
                coords[a] = std::array::from_fn(|c| pa[c].min(pb[c]));
                coords[b] = std::array::from_fn(|c| pa[c].max(pb[c]));
            }
        }
    }
    let mut code = LimbCode::zeros(limbs.len() * 2 * bins);
    for (slot, xy) in coords.iter().enumerate() {
        for (c, &v) in xy.iter().enumerate() {
            let base = (slot * 2 + c) * bins;
            let q = quantize(v, bins);
            match coding {
                BinCoding::OneHot => code.set(base + q),
                BinCoding::Thermometer => (0..=q).for_each(|k| code.set(base + k)),
            }
        }
    }
    Ok(code)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimilarityWaveform {
    /// Hamming distance of each frame to the reference frame.
    pub values: Vec<u32>,
    pub reference_index: usize,
}

/// Hamming distance of every frame's lower-limb code to frame 0. Expects a
/// normalized sequence.
pub fn similarity_waveform(
    seq: &PoseSequence,
    topo: &SkeletonTopology,
    encoding: &LimbEncoding,
) -> Result<SimilarityWaveform> {
    if seq.len() < 2 {
        return Err(CycleError::TooShort {
            len: seq.len(),
            needed: 2,
        });
    }
    let codes = seq
        .frames
        .iter()
        .map(|f| encode_lower_limbs(f, topo, encoding))
        .collect::<Result<Vec<_>>>()?;
    let reference = &codes[0];
    Ok(SimilarityWaveform {
        values: codes.iter().map(|c| reference.hamming(c)).collect(),
        reference_index: 0,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaitCycleEstimate {
    pub half_cycle_frames: usize,
    pub full_cycle_frames: usize,
    pub trough_indices: Vec<usize>,
}

/// Centred moving average; the window is truncated at the ends.
pub fn moving_average(values: &[u32], window: usize) -> Vec<f64> {
    let left = window.saturating_sub(1) / 2;
    let right = window / 2;
    let n = values.len();
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(left);
            let hi = (t + right).min(n - 1);
            let sum: u64 = values[lo..=hi].iter().map(|&v| u64::from(v)).sum();
            sum as f64 / (hi - lo + 1) as f64
        })
        .collect()
}

/// Interior local minima. A flat run counts once, at its (lower) middle, when
/// both neighbouring values are strictly larger.
fn local_minima(s: &[f64]) -> Vec<usize> {
    let mut minima = Vec::new();
    let mut i = 1;
    while i + 1 < s.len() {
        let mut j = i;
        while j + 1 < s.len() && s[j + 1] == s[i] {
            j += 1;
        }
        if j + 1 < s.len() && s[i - 1] > s[i] && s[j + 1] > s[i] {
            minima.push((i + j) / 2);
        }
        i = j + 1;
    }
    minima
}

/// Trough selection parameters for [`detect_cycle`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TroughRule {
    /// Moving-average window.
    pub smoothing: usize,
    /// Minimum distance between accepted troughs, frames.
    pub min_separation: usize,
    /// A minimum only counts as a trough when its smoothed value lies in the
    /// lowest `max_level` fraction of the smoothed range. `1.0` disables the
    /// filter.
    pub max_level: f64,
}

impl TroughRule {
    pub fn new(smoothing: usize, min_separation: usize) -> Self {
        Self {
            smoothing,
            min_separation,
            max_level: 1.0,
        }
    }
}

impl Default for TroughRule {
    fn default() -> Self {
        CycleConfig::default().trough_rule()
    }
}

/// Sub-frame position of the minimum near `c`, from a least-squares parabola
/// through the five surrounding samples. Falls back to `c` at the edges or
/// when the fit is not convex.
fn refine_trough(s: &[f64], c: usize) -> f64 {
    if c < 2 || c + 2 >= s.len() {
        return c as f64;
    }
    let y = &s[c - 2..=c + 2];
    let slope = (-2.0 * y[0] - y[1] + y[3] + 2.0 * y[4]) / 10.0;
    let curvature = (2.0 * y[0] - y[1] - 2.0 * y[2] - y[3] + 2.0 * y[4]) / 14.0;
    if curvature > 0.0 {
        c as f64 + (-slope / (2.0 * curvature)).clamp(-1.0, 1.0)
    } else {
        c as f64
    }
}

/// Troughs matched to the lattice `anchor + k·h`, one per index (the
/// closest within `h / 4`), as `k → position`.
fn lattice_matches(positions: &[f64], origin: f64, h: f64) -> BTreeMap<i64, (f64, f64)> {
    let mut best: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for &p in positions {
        let k = ((p - origin) / h).round();
        let residual = (p - origin - k * h).abs();
        if residual > h / 4.0 {
            continue;
        }
        let entry = best.entry(k as i64).or_insert((residual, p));
        if residual < entry.0 {
            *entry = (residual, p);
        }
    }
    best
}

/// Spacing of the regular lattice through the deepest trough that best
/// explains the trough positions.
///
/// Every integer spacing from `min_spacing` up to the span is scored by the
/// lattice points it matches, minus half a point for each lattice point
/// inside the span without a trough and for each trough off the lattice.
/// The winner is refined by a least-squares fit of position against index.
fn lattice_spacing(positions: &[f64], anchor: usize, min_spacing: usize) -> f64 {
    let origin = positions[anchor];
    let (first, last) = (positions[0], positions[positions.len() - 1]);
    let span = last - first;
    let mut best: Option<(f64, usize)> = None;
    for h in min_spacing.max(1)..=(span.floor() as usize).max(min_spacing.max(1)) {
        let hf = h as f64;
        let matched = lattice_matches(positions, origin, hf).len();
        let lo = ((first - origin) / hf - 0.25).ceil() as i64;
        let hi = ((last - origin) / hf + 0.25).floor() as i64;
        let points = (hi - lo + 1).max(0) as usize;
        let score = matched as f64
            - 0.5 * (points.saturating_sub(matched) + positions.len() - matched) as f64;
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, h));
        }
    }
    let h = best.map_or(span, |(_, h)| h as f64);
    let matches = lattice_matches(positions, origin, h);
    if matches.len() < 2 {
        return h;
    }
    let n = matches.len() as f64;
    let mean_k = matches.keys().map(|&k| k as f64).sum::<f64>() / n;
    let mean_p = matches.values().map(|&(_, p)| p).sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (&k, &(_, p)) in &matches {
        let dk = k as f64 - mean_k;
        num += dk * (p - mean_p);
        den += dk * dk;
    }
    num / den
}

/// Finds troughs of the smoothed waveform at least `min_separation` apart
/// (deepest first) and takes the rounded lattice spacing of their sub-frame
/// positions as the half cycle.
pub fn detect_cycle(waveform: &SimilarityWaveform, rule: &TroughRule) -> Result<GaitCycleEstimate> {
    let n = waveform.values.len();
    let TroughRule {
        smoothing,
        min_separation,
        max_level,
    } = *rule;
    if smoothing == 0 || min_separation == 0 {
        return Err(CycleError::InvalidParameter(
            "smoothing and min_separation must be positive".into(),
        ));
    }
    if !(max_level > 0.0 && max_level <= 1.0) {
        return Err(CycleError::InvalidParameter(format!(
            "trough level must lie in (0, 1], got {max_level}"
        )));
    }
    if n < 2 * min_separation || n < 3 {
        return Err(CycleError::TooShort {
            len: n,
            needed: (2 * min_separation).max(3),
        });
    }
    let smoothed = moving_average(&waveform.values, smoothing);
    let lo = smoothed.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smoothed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cutoff = lo + max_level * (hi - lo);
    let mut candidates: Vec<usize> = local_minima(&smoothed)
        .into_iter()
        .filter(|&c| smoothed[c] <= cutoff)
        .collect();
    candidates.sort_by(|&a, &b| smoothed[a].total_cmp(&smoothed[b]).then(a.cmp(&b)));
    let mut troughs: Vec<usize> = Vec::new();
    for c in candidates {
        if troughs.iter().all(|&t| t.abs_diff(c) >= min_separation) {
            troughs.push(c);
        }
    }
    troughs.sort_unstable();
    if troughs.len() < 2 {
        return Err(CycleError::NoPeriodicity {
            troughs: troughs.len(),
        });
    }
    let positions: Vec<f64> = troughs
        .iter()
        .map(|&c| refine_trough(&smoothed, c))
        .collect();
    let deepest = (0..troughs.len())
        .min_by(|&a, &b| {
            smoothed[troughs[a]]
                .total_cmp(&smoothed[troughs[b]])
                .then(a.cmp(&b))
        })
        .expect("at least two troughs");
    let half = (lattice_spacing(&positions, deepest, min_separation).round() as usize).max(1);
    Ok(GaitCycleEstimate {
        half_cycle_frames: half,
        full_cycle_frames: 2 * half,
        trough_indices: troughs,
    })
}

/// `round(2 × mean(full_cycle_frames))`
pub fn temporal_stride(estimates: &[GaitCycleEstimate]) -> Result<usize> {
    if estimates.is_empty() {
        return Err(CycleError::NoEstimates);
    }
    let mean = estimates
        .iter()
        .map(|e| e.full_cycle_frames as f64)
        .sum::<f64>()
        / estimates.len() as f64;
    Ok((2.0 * mean).round() as usize)
}

/// Normalizes a raw sequence, builds its waveform and detects the cycle.
pub fn estimate_cycle(
    seq: &PoseSequence,
    topo: &SkeletonTopology,
    config: &CycleConfig,
) -> Result<GaitCycleEstimate> {
    let normalized = normalize_sequence(seq, topo)?;
    let waveform = similarity_waveform(&normalized, topo, &config.encoding())?;
    detect_cycle(&waveform, &config.trough_rule())
}
