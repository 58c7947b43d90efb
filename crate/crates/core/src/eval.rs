//! Accuracy evaluation: q-error, nearest-rank quantiles, per-range
//! regression reports, and classification reports including the off-by-one
//! "mix" scoring.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Predictions at or below zero are clamped here before q-error.
pub const PREDICTION_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("q-error requires positive values, got {0}")]
    NonPositive(f64),
    #[error("quantile q must be in (0, 1], got {0}")]
    InvalidQuantile(f64),
    #[error("labels are constant; equal-frequency classes are degenerate")]
    DegenerateLabels,
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
}

/// Symmetric multiplicative error `max(pred, label) / min(pred, label)`.
/// Always >= 1, with equality iff the arguments match.
pub fn q_error(pred: f64, label: f64) -> Result<f64, EvalError> {
    if !(pred > 0.0) {
        return Err(EvalError::NonPositive(pred));
    }
    if !(label > 0.0) {
        return Err(EvalError::NonPositive(label));
    }
    Ok(pred.max(label) / pred.min(label))
}

/// Nearest-rank quantile: the `ceil(q * n)`-th smallest element. Always an
/// element of the input.
pub fn quantile(values: &[f64], q: f64) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(EvalError::InvalidQuantile(q));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank_index(q, sorted.len())])
}

/// 0-based index of the nearest-rank quantile in a sorted list of length `n`.
pub fn nearest_rank_index(q: f64, n: usize) -> usize {
    let k = (q * n as f64).ceil() as usize;
    k.clamp(1, n) - 1
}

// ---------------------------------------------------------------------------
// Regression reports
// ---------------------------------------------------------------------------

/// Bucket boundaries over the actual label, ascending. B boundaries define
/// B+1 buckets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RangeSpec {
    pub boundaries: Vec<f64>,
}

impl RangeSpec {
    pub fn new(boundaries: Vec<f64>) -> Self {
        assert!(
            boundaries.windows(2).all(|w| w[0] < w[1]),
            "range boundaries must be strictly ascending"
        );
        RangeSpec { boundaries }
    }

    pub fn n_buckets(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn bucket_of(&self, value: f64) -> usize {
        self.boundaries.partition_point(|&b| b <= value)
    }
}

/// Q-error quantiles of one sample set; `None` when the set is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QErrorQuantiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

fn qerror_quantiles(qerrors: &[f64]) -> Option<QErrorQuantiles> {
    if qerrors.is_empty() {
        return None;
    }
    Some(QErrorQuantiles {
        p50: quantile(qerrors, 0.50).expect("non-empty"),
        p90: quantile(qerrors, 0.90).expect("non-empty"),
        p99: quantile(qerrors, 0.99).expect("non-empty"),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketReport {
    /// Inclusive lower bound of the bucket on the actual label.
    pub lo: f64,
    /// Exclusive upper bound; infinity for the last bucket.
    pub hi: f64,
    pub count: usize,
    pub quantiles: Option<QErrorQuantiles>,
}

/// Per-range and overall q-error quantiles for one model run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub buckets: Vec<BucketReport>,
    pub overall: QErrorQuantiles,
}

/// Buckets (pred, actual) pairs by the actual label and reports q-error
/// quantiles per bucket and overall. Predictions must already be in natural
/// units; non-positive predictions are clamped to [`PREDICTION_EPSILON`].
pub fn regression_report(
    pairs: &[(f64, f64)],
    ranges: &RangeSpec,
) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut per_bucket: Vec<Vec<f64>> = vec![Vec::new(); ranges.n_buckets()];
    let mut all = Vec::with_capacity(pairs.len());
    for &(pred, actual) in pairs {
        let qe = q_error(pred.max(PREDICTION_EPSILON), actual)?;
        per_bucket[ranges.bucket_of(actual)].push(qe);
        all.push(qe);
    }
    let buckets = per_bucket
        .iter()
        .enumerate()
        .map(|(i, qerrors)| BucketReport {
            lo: if i == 0 { 0.0 } else { ranges.boundaries[i - 1] },
            hi: if i == ranges.boundaries.len() {
                f64::INFINITY
            } else {
                ranges.boundaries[i]
            },
            count: qerrors.len(),
            quantiles: qerror_quantiles(qerrors),
        })
        .collect();
    Ok(EvalReport {
        n: pairs.len(),
        buckets,
        overall: qerror_quantiles(&all).expect("non-empty"),
    })
}

impl EvalReport {
    /// Aligned-column markdown table, one row per latency range.
    pub fn to_markdown(&self) -> String {
        let mut rows = vec![vec![
            "range".to_string(),
            "count".to_string(),
            "P50".to_string(),
            "P90".to_string(),
            "P99".to_string(),
        ]];
        for bucket in &self.buckets {
            let label = if bucket.hi.is_infinite() {
                format!(">= {}", bucket.lo)
            } else {
                format!("{} - {}", bucket.lo, bucket.hi)
            };
            let (p50, p90, p99) = match bucket.quantiles {
                Some(q) => (
                    format!("{:.3}", q.p50),
                    format!("{:.3}", q.p90),
                    format!("{:.3}", q.p99),
                ),
                None => ("-".into(), "-".into(), "-".into()),
            };
            rows.push(vec![label, bucket.count.to_string(), p50, p90, p99]);
        }
        rows.push(vec![
            "overall".into(),
            self.n.to_string(),
            format!("{:.3}", self.overall.p50),
            format!("{:.3}", self.overall.p90),
            format!("{:.3}", self.overall.p99),
        ]);
        render_table(&rows)
    }
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

/// Ascending class boundaries; B boundaries define B+1 classes assigned by
/// half-open intervals `[b_{i-1}, b_i)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassBoundaries {
    pub boundaries: Vec<f64>,
}

impl ClassBoundaries {
    pub fn new(boundaries: Vec<f64>) -> Self {
        assert!(
            boundaries.windows(2).all(|w| w[0] < w[1]),
            "class boundaries must be strictly ascending"
        );
        ClassBoundaries { boundaries }
    }

    pub fn n_classes(&self) -> usize {
        self.boundaries.len() + 1
    }
}

/// Assigns `value` to its class: values below the first boundary get class
/// 0, values at or above the last boundary get class K-1.
pub fn class_assign(value: f64, boundaries: &ClassBoundaries) -> usize {
    boundaries.boundaries.partition_point(|&b| b <= value)
}

/// Boundaries at the i/K nearest-rank quantiles of `labels`, deduplicated.
/// Class populations then differ by at most the multiplicity of tied labels.
pub fn equal_frequency_boundaries(
    labels: &[f64],
    k: usize,
) -> Result<ClassBoundaries, EvalError> {
    if k < 2 {
        return Err(EvalError::TooFewClasses(k));
    }
    if labels.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sorted = labels.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(EvalError::DegenerateLabels);
    }
    let mut boundaries = Vec::new();
    for i in 1..k {
        let b = sorted[nearest_rank_index(i as f64 / k as f64, sorted.len())];
        if boundaries.last().is_none_or(|&last| b > last) {
            boundaries.push(b);
        }
    }
    if boundaries.is_empty() {
        return Err(EvalError::DegenerateLabels);
    }
    Ok(ClassBoundaries { boundaries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerClassMetrics {
    /// None when the class was never predicted.
    pub precision: Option<f64>,
    /// None when the class has no true members.
    pub recall: Option<f64>,
    /// None when precision + recall is 0 or either side is undefined.
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetricsSet {
    pub per_class: Vec<PerClassMetrics>,
    pub accuracy: f64,
}

/// Plain and off-by-one ("mix") classification metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub n: usize,
    pub plain: ClassMetricsSet,
    pub mix: ClassMetricsSet,
}

/// Standard per-class precision/recall/F1 plus the mix variant, which counts
/// a prediction one class away from the truth as correct for the predicted
/// class before recomputing all four metrics.
pub fn classification_report(pairs: &[(usize, usize)], k: usize) -> ClassReport {
    for &(pred, truth) in pairs {
        assert!(pred < k && truth < k, "class out of range: ({pred}, {truth}) with k={k}");
    }
    let plain = metrics_set(pairs, k);
    let mixed: Vec<(usize, usize)> = pairs
        .iter()
        .map(|&(pred, truth)| {
            if pred.abs_diff(truth) <= 1 {
                (pred, pred)
            } else {
                (pred, truth)
            }
        })
        .collect();
    let mix = metrics_set(&mixed, k);
    ClassReport {
        n: pairs.len(),
        plain,
        mix,
    }
}

fn metrics_set(pairs: &[(usize, usize)], k: usize) -> ClassMetricsSet {
    let mut confusion = vec![vec![0usize; k]; k]; // [pred][truth]
    let mut correct = 0;
    for &(pred, truth) in pairs {
        confusion[pred][truth] += 1;
        if pred == truth {
            correct += 1;
        }
    }
    let per_class = (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted: usize = confusion[c].iter().sum();
            let actual: usize = (0..k).map(|p| confusion[p][c]).sum();
            let precision = (predicted > 0).then(|| tp as f64 / predicted as f64);
            let recall = (actual > 0).then(|| tp as f64 / actual as f64);
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                _ => None,
            };
            PerClassMetrics {
                precision,
                recall,
                f1,
            }
        })
        .collect();
    ClassMetricsSet {
        per_class,
        accuracy: if pairs.is_empty() {
            0.0
        } else {
            correct as f64 / pairs.len() as f64
        },
    }
}

impl ClassReport {
    /// Aligned-column markdown table with plain and mix sections.
    pub fn to_markdown(&self) -> String {
        fn section(name: &str, set: &ClassMetricsSet) -> Vec<Vec<String>> {
            let fmt = |m: Option<f64>| m.map_or("-".to_string(), |v| format!("{v:.2}"));
            let mut rows = Vec::new();
            for (c, metrics) in set.per_class.iter().enumerate() {
                rows.push(vec![
                    name.to_string(),
                    (c + 1).to_string(),
                    fmt(metrics.precision),
                    fmt(metrics.recall),
                    fmt(metrics.f1),
                ]);
            }
            rows.push(vec![
                name.to_string(),
                "accuracy".to_string(),
                format!("{:.2}", set.accuracy),
                String::new(),
                String::new(),
            ]);
            rows
        }
        let mut rows = vec![vec![
            "variant".to_string(),
            "class".to_string(),
            "precision".to_string(),
            "recall".to_string(),
            "f1".to_string(),
        ]];
        rows.extend(section("plain", &self.plain));
        rows.extend(section("mix", &self.mix));
        render_table(&rows)
    }
}

fn render_table(rows: &[Vec<String>]) -> String {
    let cols = rows[0].len();
    let mut widths = vec![0usize; cols];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for (idx, row) in rows.iter().enumerate() {
        out.push('|');
        for (i, cell) in row.iter().enumerate() {
            out.push(' ');
            out.push_str(cell);
            out.push_str(&" ".repeat(widths[i] - cell.len() + 1));
            out.push('|');
        }
        out.push('\n');
        if idx == 0 {
            out.push('|');
            for width in &widths {
                out.push_str(&"-".repeat(width + 2));
                out.push('|');
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q_error_basics() {
        assert_eq!(q_error(3.0, 3.0).unwrap(), 1.0);
        assert_eq!(q_error(4.0, 2.0).unwrap(), 2.0);
        assert_eq!(q_error(1.0, 100.0).unwrap(), 100.0);
        assert!(q_error(0.0, 1.0).is_err());
        assert!(q_error(1.0, -2.0).is_err());
    }

    #[test]
    fn quantile_nearest_rank() {
        let values = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&values, 0.5).unwrap(), 2.0);
        assert_eq!(quantile(&values, 0.99).unwrap(), 4.0);
        assert_eq!(quantile(&[7.5], 0.01).unwrap(), 7.5);
        assert_eq!(quantile(&[7.5], 1.0).unwrap(), 7.5);
        assert!(quantile(&[], 0.5).is_err());
        assert!(quantile(&values, 0.0).is_err());
        assert!(quantile(&values, 1.5).is_err());
    }

    #[test]
    fn regression_report_perfect_predictions() {
        let pairs: Vec<(f64, f64)> = (1..=10).map(|i| (i as f64, i as f64)).collect();
        let report = regression_report(&pairs, &RangeSpec::new(vec![5.0])).unwrap();
        assert_eq!(report.overall.p50, 1.0);
        assert_eq!(report.overall.p99, 1.0);
        for bucket in &report.buckets {
            assert_eq!(bucket.quantiles.unwrap().p50, 1.0);
        }
    }

    #[test]
    fn regression_report_empty_bucket_has_no_quantiles() {
        let pairs = vec![(1.0, 1.0), (2.0, 1.5)];
        let report = regression_report(&pairs, &RangeSpec::new(vec![100.0])).unwrap();
        assert_eq!(report.buckets[1].count, 0);
        assert!(report.buckets[1].quantiles.is_none());
        assert_eq!(report.buckets[0].count, 2);
        let counts: usize = report.buckets.iter().map(|b| b.count).sum();
        assert_eq!(counts, report.n);
    }

    #[test]
    fn regression_report_matches_hand_computation() {
        // Two buckets split at 10; q-errors by hand.
        let pairs = vec![
            (2.0, 1.0),  // bucket 0, qe 2
            (1.0, 4.0),  // bucket 0, qe 4
            (3.0, 3.0),  // bucket 0, qe 1
            (20.0, 10.0), // bucket 1, qe 2
            (10.0, 40.0), // bucket 1, qe 4
            (80.0, 10.0), // bucket 1, qe 8
        ];
        let report = regression_report(&pairs, &RangeSpec::new(vec![10.0])).unwrap();
        // bucket 0 qerrors sorted: [1,2,4]; P50 = k=2 -> 2; P90 = k=3 -> 4.
        let b0 = report.buckets[0].quantiles.unwrap();
        assert_eq!(b0.p50, 2.0);
        assert_eq!(b0.p90, 4.0);
        // bucket 1 sorted: [2,4,8]; P50 -> 4.
        let b1 = report.buckets[1].quantiles.unwrap();
        assert_eq!(b1.p50, 4.0);
        // overall sorted: [1,2,2,4,4,8]; k=ceil(3)=3 -> 2; P99 k=6 -> 8.
        assert_eq!(report.overall.p50, 2.0);
        assert_eq!(report.overall.p99, 8.0);
    }

    #[test]
    fn class_assign_uses_half_open_intervals() {
        // Boundaries in seconds: 1 s, 1 min, 10 min, 1 h.
        let boundaries = ClassBoundaries::new(vec![1.0, 60.0, 600.0, 3600.0]);
        assert_eq!(class_assign(0.5, &boundaries), 0);
        assert_eq!(class_assign(30.0, &boundaries), 1);
        assert_eq!(class_assign(1.0, &boundaries), 1);
        assert_eq!(class_assign(7200.0, &boundaries), 4);
    }

    #[test]
    fn equal_frequency_boundaries_quartiles() {
        let labels: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let bounds = equal_frequency_boundaries(&labels, 4).unwrap();
        assert_eq!(bounds.boundaries, vec![25.0, 50.0, 75.0]);
        let bounds2 = equal_frequency_boundaries(
            &(1..=10).map(|i| i as f64).collect::<Vec<_>>(),
            2,
        )
        .unwrap();
        assert_eq!(bounds2.boundaries, vec![5.0]);
    }

    #[test]
    fn equal_frequency_boundaries_rejects_constant_labels() {
        let labels = vec![3.0; 50];
        assert!(matches!(
            equal_frequency_boundaries(&labels, 4),
            Err(EvalError::DegenerateLabels)
        ));
    }

    #[test]
    fn equal_frequency_population_balance() {
        let labels: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let bounds = equal_frequency_boundaries(&labels, 4).unwrap();
        let mut counts = vec![0usize; bounds.n_classes()];
        for &label in &labels {
            counts[class_assign(label, &bounds)] += 1;
        }
        for &count in &counts {
            assert!((count as i64 - 25).abs() <= 1, "counts={counts:?}");
        }
    }

    #[test]
    fn classification_report_perfect() {
        let pairs: Vec<(usize, usize)> = (0..3).cycle().take(30).map(|c| (c, c)).collect();
        let report = classification_report(&pairs, 3);
        assert_eq!(report.plain.accuracy, 1.0);
        assert_eq!(report.mix.accuracy, 1.0);
        for metrics in &report.plain.per_class {
            assert_eq!(metrics.precision, Some(1.0));
            assert_eq!(metrics.recall, Some(1.0));
            assert_eq!(metrics.f1, Some(1.0));
        }
    }

    #[test]
    fn mix_counts_off_by_one_as_correct() {
        let pairs = vec![(3usize, 4usize), (0, 2)];
        let report = classification_report(&pairs, 5);
        assert_eq!(report.plain.accuracy, 0.0);
        // (3,4) becomes correct for class 3; (0,2) stays wrong.
        assert_eq!(report.mix.accuracy, 0.5);
        assert_eq!(report.mix.per_class[3].precision, Some(1.0));
    }

    #[test]
    fn empty_class_metrics_are_absent() {
        let pairs = vec![(0usize, 0usize), (0, 1)];
        let report = classification_report(&pairs, 3);
        // Class 2 never predicted and never true.
        assert_eq!(report.plain.per_class[2].precision, None);
        assert_eq!(report.plain.per_class[2].recall, None);
        assert_eq!(report.plain.per_class[2].f1, None);
        // Class 1: never predicted, recall 0 -> F1 absent.
        assert_eq!(report.plain.per_class[1].recall, Some(0.0));
        assert_eq!(report.plain.per_class[1].f1, None);
    }

    #[test]
    fn markdown_tables_render() {
        let pairs = vec![(1.0, 1.0), (2.0, 1.0)];
        let report = regression_report(&pairs, &RangeSpec::new(vec![10.0])).unwrap();
        let md = report.to_markdown();
        assert!(md.contains("overall"));
        let cls = classification_report(&[(0, 0), (1, 1)], 2);
        assert!(cls.to_markdown().contains("accuracy"));
    }
}
