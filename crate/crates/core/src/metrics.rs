//! Detection metrics for alarm sequences against ground truth.

use crate::error::{Error, Result};

fn check_lengths(a: usize, labels: &[bool]) -> Result<()> {
    if a != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            got: a,
            context: "alarm or score vector",
        });
    }
    Ok(())
}

fn class_counts(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Input("rates are undefined with a single label class".into()));
    }
    Ok((neg, pos))
}

/// False-alarm rate on healthy samples and detection rate on faulty ones.
pub fn far_fdr(alarms: &[bool], labels: &[bool]) -> Result<(f64, f64)> {
    check_lengths(alarms.len(), labels)?;
    let (neg, pos) = class_counts(labels)?;
    let fa = alarms.iter().zip(labels).filter(|(a, l)| **a && !**l).count();
    let det = alarms.iter().zip(labels).filter(|(a, l)| **a && **l).count();
    Ok((fa as f64 / neg as f64, det as f64 / pos as f64))
}

/// Mean over the two charts of `((1 - FAR) + FDR) / 2`.
pub fn composite_indicator(far_t2: f64, fdr_t2: f64, far_spe: f64, fdr_spe: f64) -> f64 {
    let chart = |far: f64, fdr: f64| 0.5 * ((1.0 - far) + fdr);
    0.5 * (chart(far_t2, fdr_t2) + chart(far_spe, fdr_spe))
}

/// Probability that a random faulty sample outscores a random healthy one,
/// ties counted as one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels)?;
    let (neg, pos) = class_counts(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tied groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = 0.5 * ((i + 1) + (j + 1)) as f64;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// F1 score with faults as the positive class; 0 when nothing is detected.
pub fn f1(alarms: &[bool], labels: &[bool]) -> Result<f64> {
    check_lengths(alarms.len(), labels)?;
    let tp = alarms.iter().zip(labels).filter(|(a, l)| **a && **l).count() as f64;
    let fp = alarms.iter().zip(labels).filter(|(a, l)| **a && !**l).count() as f64;
    let fn_ = alarms.iter().zip(labels).filter(|(a, l)| !**a && **l).count() as f64;
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Which chart statistic scores the AUC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AucSource {
    #[default]
    Max,
    T2,
    Spe,
}

impl std::str::FromStr for AucSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "max" => Ok(Self::Max),
            "t2" => Ok(Self::T2),
            "spe" => Ok(Self::Spe),
            other => Err(Error::Input(format!("unknown AUC source '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub far_t2: f64,
    pub fdr_t2: f64,
    pub far_spe: f64,
    pub fdr_spe: f64,
    pub ci: f64,
    pub auc_t2: f64,
    pub auc_spe: f64,
    pub auc: f64,
    /// F1 of the alarm raised by either chart.
    pub f1: f64,
}

impl MetricsReport {
    /// Flat `(key, value)` pairs in a fixed order.
    pub fn entries(&self) -> [(&'static str, f64); 9] {
        [
            ("far_t2", self.far_t2),
            ("fdr_t2", self.fdr_t2),
            ("far_spe", self.far_spe),
            ("fdr_spe", self.fdr_spe),
            ("ci", self.ci),
            ("auc_t2", self.auc_t2),
            ("auc_spe", self.auc_spe),
            ("auc", self.auc),
            ("f1", self.f1),
        ]
    }
}

/// All metrics for a pair of charts with their limits.
pub fn evaluate_charts(
    t2: &[f64],
    t2_limit: f64,
    spe: &[f64],
    spe_limit: f64,
    labels: &[bool],
    source: AucSource,
) -> Result<MetricsReport> {
    check_lengths(t2.len(), labels)?;
    check_lengths(spe.len(), labels)?;
    let a_t2: Vec<bool> = t2.iter().map(|v| *v > t2_limit).collect();
    let a_spe: Vec<bool> = spe.iter().map(|v| *v > spe_limit).collect();
    let either: Vec<bool> = a_t2.iter().zip(&a_spe).map(|(a, b)| *a || *b).collect();
    let (far_t2, fdr_t2) = far_fdr(&a_t2, labels)?;
    let (far_spe, fdr_spe) = far_fdr(&a_spe, labels)?;
    let auc_t2 = auc(t2, labels)?;
    let auc_spe = auc(spe, labels)?;
    Ok(MetricsReport {
        far_t2,
        fdr_t2,
        far_spe,
        fdr_spe,
        ci: composite_indicator(far_t2, fdr_t2, far_spe, fdr_spe),
        auc_t2,
        auc_spe,
        auc: match source {
            AucSource::Max => auc_t2.max(auc_spe),
            AucSource::T2 => auc_t2,
            AucSource::Spe => auc_spe,
        },
        f1: f1(&either, labels)?,
    })
}
