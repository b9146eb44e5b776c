//! Gallery/probe Rank-1 identification over mean global features.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{Checkpoint, CheckpointError};
use super::data::{DataError, FeatureScaler, WindowPlan, featurize_sequence};
use crate::model::{BranchBatch, GaitModel, ModelError};
use crate::scalar::Scalar;
use crate::skeleton::{Condition, PoseSequence, SkeletonTopology};
use crate::tensor::ParamStore;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("probe subject `{0}` has no gallery sequence")]
    UnknownSubject(String),
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("embedding lengths differ ({0} vs {1})")]
    Dimension(usize, usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 − cos(a, b)`
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub metric: Metric,
    /// Embedding workers; the report does not depend on it.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metric: Metric::Euclidean,
            threads: 1,
        }
    }
}

/// One embedded sequence with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedded {
    pub subject_id: String,
    pub condition: Condition,
    pub view_deg: u16,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1_by_condition: BTreeMap<Condition, f64>,
    /// view → condition → accuracy
    pub rank1_by_angle: BTreeMap<u16, BTreeMap<Condition, f64>>,
    /// Unweighted mean of the per-condition accuracies.
    pub overall: f64,
    pub probes: usize,
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

impl EvalReport {
    /// `view  condition  rank1` rows (fractions); view `all` holds the
    /// per-condition totals and the `overall` row closes the table.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("view\tcondition\trank1\n");
        for (view, row) in &self.rank1_by_angle {
            for (cond, acc) in row {
                let _ = writeln!(out, "{view}\t{cond}\t{acc:.6}");
            }
        }
        for (cond, acc) in &self.rank1_by_condition {
            let _ = writeln!(out, "all\t{cond}\t{acc:.6}");
        }
        let _ = writeln!(out, "all\toverall\t{:.6}", self.overall);
        out
    }

    /// Aligned text: a condition summary row (NM / BG / CL / Overall, in
    /// percent) followed by one row per probe view.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8}{:>8}{:>8}{:>8}{:>9}",
            "", "NM", "BG", "CL", "Overall"
        );
        let cell = |m: &BTreeMap<Condition, f64>, c: Condition| {
            m.get(&c).map_or("-".to_string(), |&v| pct(v))
        };
        let _ = writeln!(
            out,
            "{:<8}{:>8}{:>8}{:>8}{:>9}",
            "Rank-1",
            cell(&self.rank1_by_condition, Condition::Normal),
            cell(&self.rank1_by_condition, Condition::Bag),
            cell(&self.rank1_by_condition, Condition::Coat),
            pct(self.overall)
        );
        out.push('\n');
        let _ = writeln!(
            out,
            "{:<8}{:>8}{:>8}{:>8}{:>9}",
            "View", "NM", "BG", "CL", "Mean"
        );
        for (view, row) in &self.rank1_by_angle {
            let mean = row.values().sum::<f64>() / row.len().max(1) as f64;
            let _ = writeln!(
                out,
                "{:<8}{:>8}{:>8}{:>8}{:>9}",
                format!("{view:03}"),
                cell(row, Condition::Normal),
                cell(row, Condition::Bag),
                cell(row, Condition::Coat),
                pct(mean)
            );
        }
        out
    }
}

/// Index of the nearest gallery vector; ties go to the earlier entry.
pub fn nearest(gallery: &[Embedded], query: &[f64], metric: Metric) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, g) in gallery.iter().enumerate() {
        let d = metric.distance(&g.vector, query);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((k, d));
        }
    }
    best.map(|(k, _)| k)
}

/// Rank-1 accuracy of `probe` against `gallery`, split by condition and view.
pub fn rank1_from_embeddings(
    gallery: &[Embedded],
    probe: &[Embedded],
    metric: Metric,
) -> Result<EvalReport> {
    if gallery.is_empty() {
        return Err(EvalError::Empty("gallery"));
    }
    if probe.is_empty() {
        return Err(EvalError::Empty("probe"));
    }
    let enrolled: BTreeSet<&str> = gallery.iter().map(|g| g.subject_id.as_str()).collect();
    if let Some(p) = probe
        .iter()
        .find(|p| !enrolled.contains(p.subject_id.as_str()))
    {
        return Err(EvalError::UnknownSubject(p.subject_id.clone()));
    }
    let dim = gallery[0].vector.len();
    if let Some(e) = gallery.iter().chain(probe).find(|e| e.vector.len() != dim) {
        return Err(EvalError::Dimension(dim, e.vector.len()));
    }
    let mut by_condition: BTreeMap<Condition, (usize, usize)> = BTreeMap::new();
    let mut by_angle: BTreeMap<u16, BTreeMap<Condition, (usize, usize)>> = BTreeMap::new();
    for p in probe {
        let hit = nearest(gallery, &p.vector, metric)
            .is_some_and(|k| gallery[k].subject_id == p.subject_id);
        for cell in [
            by_condition.entry(p.condition).or_default(),
            by_angle
                .entry(p.view_deg)
                .or_default()
                .entry(p.condition)
                .or_default(),
        ] {
            cell.0 += usize::from(hit);
            cell.1 += 1;
        }
    }
    let ratio = |(hit, total): (usize, usize)| hit as f64 / total as f64;
    let rank1_by_condition: BTreeMap<Condition, f64> = by_condition
        .into_iter()
        .map(|(c, v)| (c, ratio(v)))
        .collect();
    let overall = rank1_by_condition.values().sum::<f64>() / rank1_by_condition.len() as f64;
    Ok(EvalReport {
        rank1_by_angle: by_angle
            .into_iter()
            .map(|(a, row)| (a, row.into_iter().map(|(c, v)| (c, ratio(v))).collect()))
            .collect(),
        rank1_by_condition,
        overall,
        probes: probe.len(),
    })
}

/// Mean global feature over the windows of each sequence. Work is split into
/// contiguous chunks across `threads` scoped workers; the output order always
/// follows `sequences`.
pub fn embed_sequences<T: Scalar>(
    model: &GaitModel,
    params: &ParamStore<T>,
    sequences: &[PoseSequence],
    plan: &WindowPlan,
    scaler: Option<&FeatureScaler>,
    threads: usize,
) -> Result<Vec<Embedded>> {
    let topo = SkeletonTopology::mpii();
    let embed_one = |seq: &PoseSequence| -> Result<Embedded> {
        let mut bundles = featurize_sequence::<T>(seq, plan, &topo)?;
        if let Some(sc) = scaler {
            bundles.iter_mut().for_each(|b| sc.apply(b));
        }
        let refs: Vec<_> = bundles.iter().collect();
        let features = model.embed(params, &BranchBatch::from_bundles(&refs)?)?;
        let [n, d] = [features.shape()[0], features.shape()[1]];
        let mut mean = vec![0.0; d];
        for row in features.data().chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        Ok(Embedded {
            subject_id: seq.subject_id.clone(),
            condition: seq.condition,
            view_deg: seq.view_deg,
            vector: mean,
        })
    };
    let threads = threads.clamp(1, sequences.len().max(1));
    if threads == 1 {
        return sequences.iter().map(embed_one).collect();
    }
    let chunk = sequences.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Embedded>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sequences
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(embed_one).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("embedding worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(sequences.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Embeds both sets with the checkpointed model and scores the probes.
pub fn rank1_eval(
    ckpt: &Checkpoint,
    gallery: &[PoseSequence],
    probe: &[PoseSequence],
    options: &EvalOptions,
) -> Result<EvalReport> {
    let enrolled: BTreeSet<&str> = gallery.iter().map(|g| g.subject_id.as_str()).collect();
    if let Some(p) = probe
        .iter()
        .find(|p| !enrolled.contains(p.subject_id.as_str()))
    {
        return Err(EvalError::UnknownSubject(p.subject_id.clone()));
    }
    let meta = ckpt.meta()?;
    let (model, params) = ckpt.instantiate::<f64>()?;
    let scaler = meta.scaler.as_ref();
    let g = embed_sequences(
        &model,
        &params,
        gallery,
        &meta.plan,
        scaler,
        options.threads,
    )?;
    let p = embed_sequences(&model, &params, probe, &meta.plan, scaler, options.threads)?;
    rank1_from_embeddings(&g, &p, options.metric)
}
