//! Experiment pipelines shared by the command line and the acceptance
//! suite: training from a dataset directory, evaluation tables, corruption
//! sweeps, the encoder ablation and the QC scatter plot.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tmsnet_core::corruption::{corrupt_volume, CorruptionSpec, Method, Views};
use tmsnet_core::model::{ModelConfig, TmsNet, Variant};
use tmsnet_core::qc::{Case, QcRow};
use tmsnet_core::quality::{dice, jaccard, otsu_threshold, HIGH_QUALITY_JACCARD};
use tmsnet_core::segment::{segment_volume, DEFAULT_BATCH};
use tmsnet_core::trainer::{EpochReport, TrainConfig, Trainer};
use tmsnet_core::{Mask3D, Result, ViewAxis, Volume3D};

use crate::dataset::{load_split, Split};

/// Slice size the default augmentation ranges are expressed for.
pub const REFERENCE_SIZE: f64 = 128.0;

/// Default training configuration with the translation range scaled from
/// the reference slice size to `size`.
pub fn train_config(size: usize, epochs: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    cfg.augment.translate *= size as f64 / REFERENCE_SIZE;
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub variant: Variant,
    pub channels: usize,
    pub epochs: usize,
    pub seed: u64,
    pub standard_view: ViewAxis,
}

impl TrainSpec {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            variant: self.variant,
            standard_view: self.standard_view,
            seed: self.seed,
        }
    }
}

fn pairs(cases: Vec<Case>) -> Vec<(Volume3D, Mask3D)> {
    cases.into_iter().map(|c| (c.volume, c.mask)).collect()
}

/// Trains on the `train` split of a dataset directory, validating on `val`.
pub fn train_from_dir(data: &Path, spec: &TrainSpec, log: Option<&Path>) -> Result<(TmsNet<f32>, Vec<EpochReport>)> {
    let train = pairs(load_split(data, Split::Train)?);
    let val = pairs(load_split(data, Split::Val)?);
    train_on(&train, &val, spec, log)
}

pub fn train_on(
    train: &[(Volume3D, Mask3D)],
    val: &[(Volume3D, Mask3D)],
    spec: &TrainSpec,
    log: Option<&Path>,
) -> Result<(TmsNet<f32>, Vec<EpochReport>)> {
    let size = train.first().map_or(64, |(v, _)| v.dims()[1]);
    let mut net = TmsNet::new(spec.model_config())?;
    let mut trainer = Trainer::new(train_config(size, spec.epochs, spec.seed))?;
    let reports = trainer.fit(&mut net, train, val, log)?;
    Ok((net, reports))
}

/// Overlap of the aggregated and single-view segmentations with the truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub volume_id: String,
    pub dice: f64,
    pub jaccard: f64,
    /// Dice of each view's Otsu-thresholded output, axial/coronal/sagittal.
    pub view_dice: [f64; 3],
}

pub const EVAL_HEADER: &str = "volume_id,dice,jaccard,dice_axial,dice_coronal,dice_sagittal";

impl EvalRow {
    pub fn csv_row(&self) -> String {
        let [a, c, s] = self.view_dice;
        format!(
            "{},{:.6},{:.6},{a:.6},{c:.6},{s:.6}",
            self.volume_id, self.dice, self.jaccard
        )
    }
}

pub fn evaluate_case(net: &TmsNet<f32>, id: &str, input: &Volume3D, truth: &Mask3D) -> Result<EvalRow> {
    let seg = segment_volume(net, input, DEFAULT_BATCH)?;
    let truth = truth.reslice(ViewAxis::Axial);
    let pred = seg.threshold().mask;
    let mut view_dice = [0.0; 3];
    for (slot, probs) in view_dice.iter_mut().zip(&seg.probs) {
        let mask = otsu_threshold(&probs.reslice(ViewAxis::Axial)).mask;
        *slot = dice(&mask, &truth)?;
    }
    Ok(EvalRow {
        volume_id: id.to_string(),
        dice: dice(&pred, &truth)?,
        jaccard: jaccard(&pred, &truth)?,
        view_dice,
    })
}

pub fn evaluate(net: &TmsNet<f32>, cases: &[Case]) -> Result<Vec<EvalRow>> {
    cases
        .iter()
        .map(|c| evaluate_case(net, &c.id, &c.volume, &c.mask))
        .collect()
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Mean aggregated Dice over `cases` after applying `spec` (clean when
/// `None`). Rician seeds are offset per case.
pub fn mean_dice_under(net: &TmsNet<f32>, cases: &[Case], spec: Option<&CorruptionSpec>) -> Result<f64> {
    let mut total = 0.0;
    for (k, c) in cases.iter().enumerate() {
        let input = match spec {
            None => c.volume.clone(),
            Some(s) => {
                let mut s = *s;
                s.seed = s.seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
                corrupt_volume(net, &c.volume, &c.mask, &s, DEFAULT_BATCH)?
            }
        };
        total += evaluate_case(net, &c.id, &input, &c.mask)?.dice;
    }
    Ok(total / cases.len().max(1) as f64)
}

/// One point of the encoder ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: Method,
    pub views: Views,
    pub eps: f64,
    pub shared_dice: f64,
    pub independent3_dice: f64,
}

pub const ABLATION_HEADER: &str = "method,views,eps,shared_dice,independent3_dice";

pub const ABLATION_EPS: [f64; 5] = [0.0, 0.01, 0.02, 0.03, 0.04];

/// Mean Dice of both networks under FGSM and BIM, three-view and
/// single-view, at every `eps`.
pub fn ablation(shared: &TmsNet<f32>, independent: &TmsNet<f32>, cases: &[Case], eps: &[f64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for method in [Method::Fgsm, Method::Bim] {
        for views in [Views::Three, Views::Single] {
            for &e in eps {
                let spec = match method {
                    Method::Bim => CorruptionSpec::bim(e, views),
                    _ => CorruptionSpec::fgsm(e, views),
                };
                rows.push(AblationRow {
                    method,
                    views,
                    eps: e,
                    shared_dice: mean_dice_under(shared, cases, Some(&spec))?,
                    independent3_dice: mean_dice_under(independent, cases, Some(&spec))?,
                });
            }
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6}",
            r.method, r.views, r.eps, r.shared_dice, r.independent3_dice
        );
    }
    s
}

/// Scatter plot of `max_c` against Jaccard, coloured by method, with the
/// identity line and the high-quality threshold.
pub fn scatter_svg(rows: &[QcRow]) -> String {
    const W: f64 = 480.0;
    const M: f64 = 50.0;
    let plot = W - 2.0 * M;
    let px = |v: f64| M + v.clamp(0.0, 1.0) * plot;
    let py = |v: f64| W - M - v.clamp(0.0, 1.0) * plot;
    let colour = |m: &str| match m {
        "clean" => "#222222",
        "fgsm" => "#1f77b4",
        "bim" => "#d62728",
        _ => "#2ca02c",
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{W}" viewBox="0 0 {W} {W}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{W}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{M}" y="{M}" width="{plot}" height="{plot}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 3"/>"##,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#bbb"/>"##,
        px(0.0),
        py(HIGH_QUALITY_JACCARD),
        px(1.0),
        py(HIGH_QUALITY_JACCARD)
    );
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v:.1}</text>"#, px(v), W - M + 18.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, M - 6.0, py(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">max consistency</text>"#, W / 2.0, W - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">Jaccard</text>"#,
        W / 2.0,
        W / 2.0
    );
    for r in rows {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.7"><title>{} {} {} {}</title></circle>"#,
            px(r.max_c),
            py(r.jaccard),
            colour(&r.method),
            r.volume_id,
            r.method,
            r.views,
            r.eps_or_sigma
        );
    }
    for (k, m) in ["clean", "fgsm", "bim", "rician"].iter().enumerate() {
        let y = M + 14.0 + 16.0 * k as f64;
        let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="4" fill="{}"/>"#, M + 12.0, y - 4.0, colour(m));
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{m}</text>"#, M + 22.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translation_scales_with_size() {
        assert_eq!(train_config(128, 3, 1).augment.translate, 30.0);
        assert_eq!(train_config(64, 3, 1).augment.translate, 15.0);
        assert_eq!(train_config(64, 3, 1).epochs, 3);
    }

    #[test]
    fn eval_row_format() {
        let r = EvalRow {
            volume_id: "test_000".into(),
            dice: 0.9,
            jaccard: 0.9 / 1.1,
            view_dice: [0.8, 0.85, 0.875],
        };
        assert_eq!(r.csv_row(), "test_000,0.900000,0.818182,0.800000,0.850000,0.875000");
        assert_eq!(r.csv_row().split(',').count(), EVAL_HEADER.split(',').count());
    }

    #[test]
    fn svg_has_one_marker_per_row() {
        let row = QcRow {
            volume_id: "v".into(),
            method: "fgsm".into(),
            views: "three".into(),
            eps_or_sigma: 0.01,
            c_sa: 0.9,
            c_sc: 0.9,
            c_ca: 0.9,
            max_c: 0.9,
            min_c: 0.9,
            dice: 0.9,
            jaccard: 0.8,
            decision: tmsnet_core::quality::Decision::Accept,
        };
        let svg = scatter_svg(&[row.clone(), row]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<title>").count(), 2);
    }
}
