//! The quality-control experiment: segment clean and corrupted volumes,
//! score decoder agreement, and compare it with the true overlap.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt_volume, CorruptionSpec, Method, Views};
use crate::error::{Error, Result};
use crate::model::TmsNet;
use crate::quality::{
    dice, jaccard, mae, pearson_r, report_from_pairs, roc_auc, ConsistencyReport, Decision, HIGH_QUALITY_JACCARD,
};
use crate::segment::{segment_volume, DEFAULT_BATCH};
use crate::volume::{Mask3D, ViewAxis, Volume3D};

pub const FGSM_EPS: [f64; 4] = [0.01, 0.02, 0.03, 0.04];
pub const RICIAN_SIGMA: [f64; 3] = [0.05, 0.15, 0.25];

/// One column of the experiment grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cell {
    Clean,
    Corrupt(CorruptionSpec),
}

impl Cell {
    pub fn method(&self) -> &'static str {
        match self {
            Cell::Clean => "clean",
            Cell::Corrupt(s) => match s.method {
                Method::Fgsm => "fgsm",
                Method::Bim => "bim",
                Method::Rician => "rician",
            },
        }
    }

    pub fn views(&self) -> &'static str {
        match self {
            Cell::Corrupt(s) if s.method != Method::Rician => match s.views {
                Views::Three => "three",
                Views::Single => "single",
            },
            _ => "none",
        }
    }

    pub fn magnitude(&self) -> f64 {
        match self {
            Cell::Clean => 0.0,
            Cell::Corrupt(s) => s.magnitude,
        }
    }
}

/// Clean; FGSM and BIM on three views and on the standard view at every
/// `FGSM_EPS`; Rician noise at every `RICIAN_SIGMA`.
pub fn default_grid(seed: u64) -> Vec<Cell> {
    let mut grid = vec![Cell::Clean];
    for views in [Views::Three, Views::Single] {
        for eps in FGSM_EPS {
            grid.push(Cell::Corrupt(CorruptionSpec::fgsm(eps, views)));
            grid.push(Cell::Corrupt(CorruptionSpec::bim(eps, views)));
        }
    }
    for (k, sigma) in RICIAN_SIGMA.into_iter().enumerate() {
        grid.push(Cell::Corrupt(CorruptionSpec::rician(sigma, seed.wrapping_add(k as u64))));
    }
    grid
}

/// A labelled volume.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub volume: Volume3D,
    pub mask: Mask3D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcRow {
    pub volume_id: String,
    pub method: String,
    pub views: String,
    pub eps_or_sigma: f64,
    pub c_sa: f64,
    pub c_sc: f64,
    pub c_ca: f64,
    pub max_c: f64,
    pub min_c: f64,
    pub dice: f64,
    pub jaccard: f64,
    pub decision: Decision,
}

pub const CSV_HEADER: &str = "volume_id,method,views,eps_or_sigma,c_SA,c_SC,c_CA,max_c,min_c,dice,jaccard,decision";

impl QcRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.volume_id,
            self.method,
            self.views,
            self.eps_or_sigma,
            self.c_sa,
            self.c_sc,
            self.c_ca,
            self.max_c,
            self.min_c,
            self.dice,
            self.jaccard,
            self.decision
        )
    }
}

pub fn to_csv(rows: &[QcRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Outcome of segmenting one (possibly corrupted) volume.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: ConsistencyReport,
    pub dice: f64,
    pub jaccard: f64,
}

/// Segments `input`, scores consistency and measures overlap with `mask`.
/// An all-zero decoder output has undefined similarity and is rejected
/// with zero scores.
pub fn evaluate_volume(net: &TmsNet<f32>, input: &Volume3D, mask: &Mask3D, tau: f64) -> Result<Evaluation> {
    let seg = segment_volume(net, input, DEFAULT_BATCH)?;
    let report = match seg.consistency(tau) {
        Ok(r) => r,
        Err(Error::ZeroVector) => {
            let mut r = report_from_pairs(0.0, 0.0, 0.0, tau);
            r.decision = Decision::Reject;
            r
        }
        Err(e) => return Err(e),
    };
    let pred = seg.threshold().mask;
    let truth = mask.reslice(ViewAxis::Axial);
    Ok(Evaluation {
        report,
        dice: dice(&pred, &truth)?,
        jaccard: jaccard(&pred, &truth)?,
    })
}

/// Runs every cell of `grid` on every case; one row per (case, cell).
pub fn qc_experiment(net: &TmsNet<f32>, cases: &[Case], grid: &[Cell], tau: f64) -> Result<Vec<QcRow>> {
    let mut rows = Vec::with_capacity(cases.len() * grid.len());
    for (k, case) in cases.iter().enumerate() {
        for cell in grid {
            let input = match cell {
                Cell::Clean => case.volume.clone(),
                Cell::Corrupt(spec) => {
                    let mut spec = *spec;
                    // distinct noise per volume, still fixed by the grid seed
                    spec.seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
                    corrupt_volume(net, &case.volume, &case.mask, &spec, DEFAULT_BATCH)?
                }
            };
            let e = evaluate_volume(net, &input, &case.mask, tau)?;
            rows.push(QcRow {
                volume_id: case.id.clone(),
                method: cell.method().to_string(),
                views: cell.views().to_string(),
                eps_or_sigma: cell.magnitude(),
                c_sa: e.report.c_sa,
                c_sc: e.report.c_sc,
                c_ca: e.report.c_ca,
                max_c: e.report.max_c,
                min_c: e.report.min_c,
                dice: e.dice,
                jaccard: e.jaccard,
                decision: e.report.decision,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcSummary {
    /// Pearson correlation between `max_c` and Jaccard; absent when either
    /// series is constant.
    pub r: Option<f64>,
    pub p: Option<f64>,
    /// Mean absolute error of `max_c` as a Jaccard prediction.
    pub mae: f64,
    /// ROC AUC of `max_c` for the label `jaccard >= 0.8`; absent when only
    /// one class occurs.
    pub auc: Option<f64>,
    pub n: usize,
    pub high_quality: usize,
}

pub fn summarize(rows: &[QcRow]) -> Result<QcSummary> {
    let scores: Vec<f64> = rows.iter().map(|r| r.max_c).collect();
    let jac: Vec<f64> = rows.iter().map(|r| r.jaccard).collect();
    let labels: Vec<bool> = jac.iter().map(|&j| j >= HIGH_QUALITY_JACCARD).collect();
    let (r, p) = match pearson_r(&scores, &jac) {
        Ok((r, p)) => (Some(r), Some(p)),
        Err(Error::MetricInput(_)) if rows.len() >= 3 => (None, None),
        Err(e) => return Err(e),
    };
    let high = labels.iter().filter(|&&l| l).count();
    let auc = if high == 0 || high == labels.len() {
        None
    } else {
        Some(roc_auc(&scores, &labels)?)
    };
    Ok(QcSummary {
        r,
        p,
        mae: mae(&scores, &jac)?,
        auc,
        n: rows.len(),
        high_quality: high,
    })
}
