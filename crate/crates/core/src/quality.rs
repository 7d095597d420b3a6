//! Cross-decoder consistency scores, the accept/reject gate, and the
//! evaluation metrics used to validate them.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::volume::{Mask3D, ViewAxis, Volume3D};

/// Default acceptance threshold on `max_c`, equal to the Jaccard bar for a
/// high-quality mask.
pub const DEFAULT_TAU: f64 = 0.8;
pub const HIGH_QUALITY_JACCARD: f64 = 0.8;
pub const OTSU_BINS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::Accept => "accept",
            Decision::Reject => "reject",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub c_sa: f64,
    pub c_sc: f64,
    pub c_ca: f64,
    pub max_c: f64,
    pub min_c: f64,
    pub predicted_jaccard: f64,
    pub decision: Decision,
    pub worst_view: ViewAxis,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::MetricInput(format!("lengths {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// The view shared by the two lowest of the pairs `(S,A)`, `(S,C)`, `(C,A)`.
pub fn worst_view(c_sa: f64, c_sc: f64, c_ca: f64) -> ViewAxis {
    use ViewAxis::*;
    // The view left out of the highest pair belongs to both lower pairs.
    if c_ca >= c_sa && c_ca >= c_sc {
        Sagittal
    } else if c_sc >= c_sa {
        Axial
    } else {
        Coronal
    }
}

/// Builds a report from the three pairwise similarities.
pub fn report_from_pairs(c_sa: f64, c_sc: f64, c_ca: f64, tau: f64) -> ConsistencyReport {
    let max_c = c_sa.max(c_sc).max(c_ca);
    let min_c = c_sa.min(c_sc).min(c_ca);
    ConsistencyReport {
        c_sa,
        c_sc,
        c_ca,
        max_c,
        min_c,
        predicted_jaccard: max_c,
        decision: accept_reject(max_c, tau),
        worst_view: worst_view(c_sa, c_sc, c_ca),
    }
}

/// Pairwise cosine similarities of three standardized probability volumes.
pub fn consistency(a: &Volume3D, c: &Volume3D, s: &Volume3D, tau: f64) -> Result<ConsistencyReport> {
    for v in [c, s] {
        if v.dims() != a.dims() || v.orientation() != a.orientation() {
            return Err(Error::MetricInput("standardized volumes disagree in geometry".into()));
        }
    }
    let (va, vc, vs) = (a.vectorize(), c.vectorize(), s.vectorize());
    Ok(report_from_pairs(
        cosine_similarity(&vs, &va)?,
        cosine_similarity(&vs, &vc)?,
        cosine_similarity(&vc, &va)?,
        tau,
    ))
}

/// Accept iff `max_c >= tau`.
pub fn accept_reject(max_c: f64, tau: f64) -> Decision {
    if max_c >= tau {
        Decision::Accept
    } else {
        Decision::Reject
    }
}

/// Threshold maximizing Youden's J (sensitivity + specificity - 1) for
/// predicting `labels` with the rule `score >= tau`. Candidates are the
/// observed scores; ties in J keep the lowest threshold.
pub fn calibrate_tau(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricInput("calibration needs both classes".into()));
    }
    let mut candidates = scores.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for &tau in &candidates {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| l && s >= tau).count();
        let tn = scores.iter().zip(labels).filter(|(&s, &l)| !l && s < tau).count();
        let j = tp as f64 / pos as f64 + tn as f64 / neg as f64 - 1.0;
        if j > best.0 {
            best = (j, tau);
        }
    }
    Ok(best.1)
}

/// Result of Otsu thresholding.
#[derive(Clone, Debug, PartialEq)]
pub struct OtsuResult {
    pub mask: Mask3D,
    /// Last histogram bin assigned to the background class.
    pub bin: usize,
    /// Upper edge of `bin` in value units.
    pub threshold: f64,
    /// Set when no threshold separates two nonempty classes.
    pub degenerate: bool,
}

/// Histogram bin of a probability in `[0, 1]`.
pub fn otsu_bin(v: f64) -> usize {
    ((v * OTSU_BINS as f64).floor().max(0.0) as usize).min(OTSU_BINS - 1)
}

/// Between-class variance objective for a background class of bins `0..=k`.
fn otsu_objective(hist: &[u64; OTSU_BINS], total: u64, k: usize) -> Option<f64> {
    let centre = |b: usize| (b as f64 + 0.5) / OTSU_BINS as f64;
    let (mut w0, mut s0) = (0u64, 0.0);
    for (b, &h) in hist.iter().enumerate().take(k + 1) {
        w0 += h;
        s0 += h as f64 * centre(b);
    }
    let w1 = total - w0;
    if w0 == 0 || w1 == 0 {
        return None;
    }
    let s_all: f64 = hist.iter().enumerate().map(|(b, &h)| h as f64 * centre(b)).sum();
    let (m0, m1) = (s0 / w0 as f64, (s_all - s0) / w1 as f64);
    let (p0, p1) = (w0 as f64 / total as f64, w1 as f64 / total as f64);
    Some(p0 * p1 * (m0 - m1) * (m0 - m1))
}

/// Otsu's method over a fixed 256-bin histogram of `[0, 1]`. The foreground
/// is every voxel whose bin exceeds the selected bin; ties keep the lowest
/// bin. A volume with a single occupied bin yields an empty, flagged mask.
pub fn otsu_threshold(v: &Volume3D) -> OtsuResult {
    let mut hist = [0u64; OTSU_BINS];
    for &x in v.data() {
        hist[otsu_bin(x as f64)] += 1;
    }
    let total = v.len() as u64;
    let mut best: Option<(f64, usize)> = None;
    for k in 0..OTSU_BINS - 1 {
        if let Some(obj) = otsu_objective(&hist, total, k) {
            if best.map_or(true, |(b, _)| obj > b) {
                best = Some((obj, k));
            }
        }
    }
    match best {
        Some((_, k)) => OtsuResult {
            mask: v.map(|x| u8::from(otsu_bin(x as f64) > k)),
            bin: k,
            threshold: (k + 1) as f64 / OTSU_BINS as f64,
            degenerate: false,
        },
        None => OtsuResult {
            mask: v.map(|_| 0u8),
            bin: OTSU_BINS - 1,
            threshold: 1.0,
            degenerate: true,
        },
    }
}

fn overlap(a: &Mask3D, b: &Mask3D) -> Result<(usize, usize, usize)> {
    if a.dims() != b.dims() || a.orientation() != b.orientation() {
        return Err(Error::MetricInput(format!(
            "masks {:?}/{} and {:?}/{}",
            a.dims(),
            a.orientation(),
            b.dims(),
            b.orientation()
        )));
    }
    let (mut na, mut nb, mut inter) = (0, 0, 0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    Ok((na, nb, inter))
}

/// `2|A and B| / (|A| + |B|)`; 1 for two empty masks.
pub fn dice(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    let (na, nb, inter) = overlap(a, b)?;
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|A and B| / |A or B|`; 1 for two empty masks.
pub fn jaccard(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    let (na, nb, inter) = overlap(a, b)?;
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

fn check_pairs(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::MetricInput(format!("lengths {a} and {b}")));
    }
    if a == 0 {
        return Err(Error::MetricInput("empty input".into()));
    }
    Ok(())
}

/// Pearson correlation and its two-tailed p-value from the t statistic
/// with `n - 2` degrees of freedom.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    check_pairs(x.len(), y.len())?;
    let n = x.len();
    if n < 3 {
        return Err(Error::MetricInput("correlation needs at least 3 points".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::MetricInput("correlation of a constant series".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::MetricInput(e.to_string()))?;
        2.0 * dist.sf(t.abs())
    };
    Ok((r, p))
}

pub fn mae(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x.len(), y.len())?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

/// Rank-based ROC AUC (Mann-Whitney U) with midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricInput("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(v: &[u8]) -> Mask3D {
        Mask3D::new([1, 1, v.len()], [1.0; 3], v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[0.5, 1.5], &[3.0, 9.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn report_examples() {
        let r = report_from_pairs(0.9, 0.8, 0.7, DEFAULT_TAU);
        assert_eq!((r.max_c, r.min_c), (0.9, 0.7));
        assert_eq!(r.predicted_jaccard, 0.9);
        assert_eq!(r.decision, Decision::Accept);
        // lowest pairs (S,C) and (C,A) share the coronal view
        assert_eq!(r.worst_view, ViewAxis::Coronal);
    }

    #[test]
    fn gate_examples() {
        assert_eq!(accept_reject(0.95, 0.8), Decision::Accept);
        assert_eq!(accept_reject(0.5, 0.8), Decision::Reject);
        assert_eq!(accept_reject(0.8, 0.8), Decision::Accept);
    }

    #[test]
    fn overlap_examples() {
        let a = mask(&[1, 1, 0, 0]);
        let b = mask(&[0, 1, 1, 0]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let c = mask(&[0, 0, 1, 1]);
        assert_eq!((dice(&a, &c).unwrap(), jaccard(&a, &c).unwrap()), (0.0, 0.0));
        let e = mask(&[0, 0, 0, 0]);
        assert_eq!((dice(&e, &e).unwrap(), jaccard(&e, &e).unwrap()), (1.0, 1.0));
        assert_eq!((dice(&a, &e).unwrap(), jaccard(&e, &a).unwrap()), (0.0, 0.0));
    }

    #[test]
    fn otsu_degenerate_and_binary() {
        let v = Volume3D::filled([2, 2, 2], 0.4);
        let r = otsu_threshold(&v);
        assert!(r.degenerate);
        assert_eq!(r.mask.count(), 0);
        let v = Volume3D::new([1, 1, 4], [1.0; 3], vec![0.2, 0.2, 0.8, 0.8]).unwrap();
        let r = otsu_threshold(&v);
        assert!(!r.degenerate);
        assert_eq!(r.mask.data(), &[0, 0, 1, 1]);
        assert!(r.threshold > 0.2 && r.threshold <= 0.8);
    }

    #[test]
    fn correlation_examples() {
        let x = [0.1, 0.4, 0.5, 0.9];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let (r, p) = pearson_r(&x, &y).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert_eq!(p, 0.0);
        assert_eq!(mae(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
    }

    #[test]
    fn calibration_separates_classes() {
        let scores = [0.3, 0.5, 0.85, 0.9, 0.95];
        let labels = [false, false, true, true, true];
        assert_eq!(calibrate_tau(&scores, &labels).unwrap(), 0.85);
    }
}
