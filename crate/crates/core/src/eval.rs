//! Ground-truth detection reports, binary classification metrics,
//! precision@k over adjudicated suspects and PCA projection export.

use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injection::InjectionReport;
use crate::pipeline::CleaningPlan;
use crate::review::Verdict;
use crate::util::{argmax, cmp_f64, fmt_f64};

/// Cleaning status of injected noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub noisy_total: usize,
    /// Flipped samples neither corrected to their true label nor filtered.
    pub missed: usize,
    /// Filtered samples whose label was never flipped.
    pub filtered_non_noisy: usize,
    /// Flipped samples corrected to their true label and/or filtered.
    pub detected: usize,
    /// Clean samples whose label the plan changed.
    pub corrected_non_noisy: usize,
}

impl DetectionReport {
    /// Builds a report from externally reported counts, checking
    /// `detected + missed = noisy_total`.
    pub fn from_counts(
        noisy_total: usize,
        missed: usize,
        filtered_non_noisy: usize,
        detected: usize,
    ) -> Result<Self> {
        let r = Self {
            noisy_total,
            missed,
            filtered_non_noisy,
            detected,
            corrected_non_noisy: 0,
        };
        r.check()?;
        Ok(r)
    }

    pub fn check(&self) -> Result<()> {
        if self.detected + self.missed != self.noisy_total {
            return Err(Error::Integrity(format!(
                "detected {} + missed {} != noisy total {}",
                self.detected, self.missed, self.noisy_total
            )));
        }
        Ok(())
    }

    pub fn recall(&self) -> f64 {
        if self.noisy_total == 0 {
            return 0.0;
        }
        self.detected as f64 / self.noisy_total as f64
    }
}

pub fn detection_report(plan: &CleaningPlan, report: &InjectionReport) -> DetectionReport {
    let truth = report.truth();
    let corrected: HashMap<&str, usize> = plan
        .corrections
        .iter()
        .map(|c| (c.sample_id.as_str(), c.new_label))
        .collect();
    let filtered: HashSet<&str> = plan.filters.iter().map(|f| f.sample_id.as_str()).collect();
    let detected = truth
        .iter()
        .filter(|(id, true_label)| {
            filtered.contains(*id) || corrected.get(*id) == Some(*true_label)
        })
        .count();
    DetectionReport {
        noisy_total: truth.len(),
        missed: truth.len() - detected,
        filtered_non_noisy: filtered.iter().filter(|id| !truth.contains_key(*id)).count(),
        detected,
        corrected_non_noisy: corrected.keys().filter(|id| !truth.contains_key(*id)).count(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub avg_max_confidence: f64,
    pub positive_class: usize,
    pub samples: usize,
}

/// Binary metrics with respect to `positive_class`; predictions are the
/// argmax of each distribution. F1 is 0 when precision and sensitivity are
/// both 0.
pub fn classification_metrics(
    preds: &[Vec<f64>],
    labels: &[usize],
    positive_class: usize,
) -> Result<ClassificationMetrics> {
    if preds.is_empty() {
        return Err(Error::Domain("no predictions".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Domain(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fnn, mut correct) = (0usize, 0usize, 0usize, 0usize);
    let mut conf = 0.0;
    for (p, &y) in preds.iter().zip(labels) {
        if y >= p.len() || positive_class >= p.len() {
            return Err(Error::Domain(format!("label {y} out of range")));
        }
        let yhat = argmax(p);
        conf += p.iter().copied().fold(0.0, f64::max);
        correct += usize::from(yhat == y);
        match (yhat == positive_class, y == positive_class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let sensitivity = ratio(tp, tp + fnn);
    let f1 = if precision + sensitivity == 0.0 {
        0.0
    } else {
        2.0 * precision * sensitivity / (precision + sensitivity)
    };
    let n = preds.len();
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / n as f64,
        f1,
        precision,
        sensitivity,
        avg_max_confidence: conf / n as f64,
        positive_class,
        samples: n,
    })
}

/// Percentage of the first `k` ranked suspects adjudicated as mislabeled.
pub fn precision_at_k(
    ranked_suspects: &[String],
    verdicts: &HashMap<String, Verdict>,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Domain("k must be >= 1".into()));
    }
    if ranked_suspects.len() < k {
        return Err(Error::Domain(format!(
            "k = {k} exceeds the {} ranked suspects",
            ranked_suspects.len()
        )));
    }
    let top = &ranked_suspects[..k];
    let missing: Vec<String> = top
        .iter()
        .filter(|id| !verdicts.contains_key(*id))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage { ids: missing });
    }
    let hits = top
        .iter()
        .filter(|id| verdicts[*id] == Verdict::Mislabel)
        .count();
    Ok(100.0 * hits as f64 / k as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// One row per input point.
    pub coords: Vec<Vec<f64>>,
    /// Variance along each returned component, descending.
    pub explained_variance: Vec<f64>,
    /// Unit loading vectors, one per returned component.
    pub components: Vec<Vec<f64>>,
}

/// Projects mean-centred points onto the leading principal components of
/// their covariance. `pre_dims` caps the intermediate reduction; the
/// returned coordinates are the first `out_dims` of those components.
/// Each component's largest-magnitude loading is made positive.
pub fn pca_projection(features: &[Vec<f64>], out_dims: usize, pre_dims: usize) -> Result<Projection> {
    if features.len() < 3 {
        return Err(Error::Domain(format!("need >= 3 points, got {}", features.len())));
    }
    let d = features[0].len();
    if d < 2 {
        return Err(Error::Domain(format!("need dimension >= 2, got {d}")));
    }
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Domain("ragged feature matrix".into()));
    }
    let keep = out_dims.min(pre_dims).min(d);
    if keep == 0 {
        return Err(Error::Domain("out_dims must be >= 1".into()));
    }
    let n = features.len();
    let mean: Vec<f64> = (0..d)
        .map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64)
        .collect();
    let centred = DMatrix::from_fn(n, d, |i, j| features[i][j] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let total: f64 = cov.diagonal().iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("zero variance in every direction".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| cmp_f64(eig.eigenvalues[b], eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(keep);
    let mut explained_variance = Vec::with_capacity(keep);
    for &k in order.iter().take(keep) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[k].max(0.0));
    }
    let coords = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|v| centred.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(Projection {
        coords,
        explained_variance,
        components,
    })
}

type Row = (&'static str, fn(&DetectionReport) -> usize);

/// Aligned-column detection table, one column per noise level.
pub fn detection_table(columns: &[(String, DetectionReport)]) -> String {
    let rows: [Row; 4] = [
        ("Amount of noisy samples", |r| r.noisy_total),
        ("Amount of not corrected or filtered samples", |r| r.missed),
        ("Amount of filtered non-noisy samples", |r| r.filtered_non_noisy),
        ("Amount of corrected and/or filtered samples", |r| r.detected),
    ];
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("Cleaning status".len());
    let col_w: Vec<usize> = columns
        .iter()
        .map(|(h, r)| {
            h.len()
                .max(r.noisy_total.to_string().len())
                .max(r.detected.to_string().len())
                .max(r.filtered_non_noisy.to_string().len())
        })
        .collect();
    let mut out = format!("{:<label_w$}", "Cleaning status");
    for ((h, _), w) in columns.iter().zip(&col_w) {
        out.push_str(&format!("  {h:>w$}"));
    }
    out.push('\n');
    for (label, get) in rows {
        out.push_str(&format!("{label:<label_w$}"));
        for ((_, r), w) in columns.iter().zip(&col_w) {
            out.push_str(&format!("  {:>w$}", get(r)));
        }
        out.push('\n');
    }
    out
}

/// Aligned-column metrics table; values shown as percentages.
pub fn metrics_table(rows: &[(String, ClassificationMetrics)]) -> String {
    let headers = ["Setting", "Accuracy", "F1-Score", "Precision", "Sensitivity", "Avg max confidence"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|(name, m)| {
            [
                name.clone(),
                format!("{:.2}", 100.0 * m.accuracy),
                format!("{:.2}", 100.0 * m.f1),
                format!("{:.2}", 100.0 * m.precision),
                format!("{:.2}", 100.0 * m.sensitivity),
                format!("{:.2}", 100.0 * m.avg_max_confidence),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..6)
        .map(|c| body.iter().map(|r| r[c].len()).max().unwrap_or(0).max(headers[c].len()))
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    out.push_str(&line(headers.to_vec()));
    out.push('\n');
    for r in &body {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleStatus {
    Kept,
    Corrected,
    Filtered,
}

impl SampleStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Kept => "kept",
            Self::Corrected => "corrected",
            Self::Filtered => "filtered",
        }
    }
}

/// `sample_id,pc1,pc2,given_label,status` rows. Filtering wins over
/// correction when a sample is both.
pub fn projection_csv(
    ids: &[String],
    labels: &[usize],
    projection: &Projection,
    plan: Option<&CleaningPlan>,
) -> String {
    let corrected: HashSet<&str> = plan
        .map(|p| p.corrections.iter().map(|c| c.sample_id.as_str()).collect())
        .unwrap_or_default();
    let filtered: HashSet<&str> = plan
        .map(|p| p.filters.iter().map(|f| f.sample_id.as_str()).collect())
        .unwrap_or_default();
    let mut out = String::from("sample_id,pc1,pc2,given_label,status\n");
    for ((id, label), c) in ids.iter().zip(labels).zip(&projection.coords) {
        let status = if filtered.contains(id.as_str()) {
            SampleStatus::Filtered
        } else if corrected.contains(id.as_str()) {
            SampleStatus::Corrected
        } else {
            SampleStatus::Kept
        };
        out.push_str(&format!(
            "{id},{},{},{label},{}\n",
            fmt_f64(c.first().copied().unwrap_or(0.0)),
            fmt_f64(c.get(1).copied().unwrap_or(0.0)),
            status.as_str()
        ));
    }
    out
}
