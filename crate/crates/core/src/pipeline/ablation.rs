//! Train-and-evaluate runs over branch combinations and seeds.

use std::fmt::Write as _;

use thiserror::Error;

use super::eval::{EvalError, EvalOptions, EvalReport, rank1_eval};
use super::train::{TrainConfig, TrainError, train};
use crate::model::BranchMask;
use crate::skeleton::{Condition, PoseSequence};

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("no seeds given")]
    NoSeeds,
    #[error("no branch combinations given")]
    NoMasks,
    #[error("seed {seed}: could not prepare the data: {source}")]
    Data {
        seed: u64,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("{mask}, seed {seed}: {source}")]
    Train {
        mask: BranchMask,
        seed: u64,
        #[source]
        source: TrainError,
    },
    #[error("{mask}, seed {seed}: {source}")]
    Eval {
        mask: BranchMask,
        seed: u64,
        #[source]
        source: EvalError,
    },
}

/// The five branch combinations of the ablation table, weakest first.
pub const TABLE_MASKS: [BranchMask; 5] = [
    BranchMask::new(false, true, false),
    BranchMask::new(true, false, true),
    BranchMask::new(true, true, false),
    BranchMask::new(false, true, true),
    BranchMask::new(true, true, true),
];

/// Mean and sample standard deviation over seeds (0 for a single seed).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellStats {
    pub mean: f64,
    pub spread: f64,
}

impl CellStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let spread = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, spread }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mask: BranchMask,
    /// One report per seed, in seed order.
    pub reports: Vec<EvalReport>,
}

impl AblationRow {
    pub fn condition(&self, c: Condition) -> CellStats {
        let v: Vec<f64> = self
            .reports
            .iter()
            .map(|r| r.rank1_by_condition.get(&c).copied().unwrap_or(f64::NAN))
            .collect();
        CellStats::of(&v)
    }

    pub fn overall(&self) -> CellStats {
        CellStats::of(&self.reports.iter().map(|r| r.overall).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, mask: BranchMask) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mask == mask)
    }

    /// One row per combination, `mean ± spread` in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8}{:>16}{:>16}{:>16}{:>16}",
            "Branches", "NM", "BG", "CL", "Overall"
        );
        let fmt = |s: CellStats| format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.spread);
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:<8}{:>16}{:>16}{:>16}{:>16}",
                row.mask.label(),
                fmt(row.condition(Condition::Normal)),
                fmt(row.condition(Condition::Bag)),
                fmt(row.condition(Condition::Coat)),
                fmt(row.overall())
            );
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("branches\tseed\tNM\tBG\tCL\toverall\n");
        for row in &self.rows {
            for (seed, r) in self.seeds.iter().zip(&row.reports) {
                let c = |c: Condition| {
                    r.rank1_by_condition
                        .get(&c)
                        .map_or(String::from("NA"), |v| format!("{v:.6}"))
                };
                let _ = writeln!(
                    out,
                    "{}\t{seed}\t{}\t{}\t{}\t{:.6}",
                    row.mask.label(),
                    c(Condition::Normal),
                    c(Condition::Bag),
                    c(Condition::Coat),
                    r.overall
                );
            }
        }
        out
    }
}

/// Training set plus the gallery and probe it is evaluated on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Protocol {
    pub train: Vec<PoseSequence>,
    pub gallery: Vec<PoseSequence>,
    pub probe: Vec<PoseSequence>,
}

/// What to run: every combination in `masks` under every seed in `seeds`.
/// Each seed replaces `config.seed`.
#[derive(Clone, Copy, Debug)]
pub struct AblationPlan<'a> {
    pub config: &'a TrainConfig,
    pub eval: &'a EvalOptions,
    pub masks: &'a [BranchMask],
    pub seeds: &'a [u64],
}

/// Runs the plan. `protocol(seed)` supplies the data for a seed and is called
/// once per seed; return the same protocol every time to vary only the
/// training seed. `on_run(mask, seed, report)` fires after each run.
pub fn ablation_suite<E>(
    plan: AblationPlan<'_>,
    mut protocol: impl FnMut(u64) -> Result<Protocol, E>,
    mut on_run: impl FnMut(BranchMask, u64, &EvalReport),
) -> Result<AblationTable, AblationError>
where
    E: Into<Box<dyn std::error::Error + Send + Sync>>,
{
    if plan.seeds.is_empty() {
        return Err(AblationError::NoSeeds);
    }
    if plan.masks.is_empty() {
        return Err(AblationError::NoMasks);
    }
    let mut rows: Vec<AblationRow> = plan
        .masks
        .iter()
        .map(|&mask| AblationRow {
            mask,
            reports: Vec::with_capacity(plan.seeds.len()),
        })
        .collect();
    for &seed in plan.seeds {
        let data = protocol(seed).map_err(|e| AblationError::Data {
            seed,
            source: e.into(),
        })?;
        let cfg = TrainConfig {
            seed,
            ..plan.config.clone()
        };
        for row in &mut rows {
            let mask = row.mask;
            let outcome = train(&data.train, &cfg, mask)
                .map_err(|source| AblationError::Train { mask, seed, source })?;
            let report = rank1_eval(&outcome.best, &data.gallery, &data.probe, plan.eval)
                .map_err(|source| AblationError::Eval { mask, seed, source })?;
            on_run(mask, seed, &report);
            row.reports.push(report);
        }
    }
    Ok(AblationTable {
        seeds: plan.seeds.to_vec(),
        rows,
    })
}
