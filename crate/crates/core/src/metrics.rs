//! Per-epoch classification metrics with PD as the positive class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_eval, ModelParams};
use crate::signal_io::{Epoch, Label};
use crate::train::predicted_class;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Tallies predicted against true class indices (1 = PD).
pub fn confusion(predictions: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid(
            "cannot build a confusion matrix from no predictions",
        ));
    }
    let positive = Label::Pd.index();
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        if p > 1 || l > 1 {
            return Err(Error::invalid(format!(
                "class index out of range: {}",
                p.max(l)
            )));
        }
        match (p == positive, l == positive) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Set when some ratio was 0/0 and reported as 0.
    pub degenerate: bool,
}

pub fn scalar_metrics(cm: &ConfusionMatrix) -> Result<ScalarMetrics> {
    if cm.total() == 0 {
        return Err(Error::invalid("confusion matrix is empty"));
    }
    let mut degenerate = false;
    let mut ratio = |num: f64, den: f64| {
        if den == 0.0 {
            degenerate = true;
            0.0
        } else {
            num / den
        }
    };
    let (tp, fp, tn, fn_) = (cm.tp as f64, cm.fp as f64, cm.tn as f64, cm.fn_ as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    let accuracy = (tp + tn) / cm.total() as f64;
    Ok(ScalarMetrics {
        precision,
        recall,
        f1,
        accuracy,
        degenerate,
    })
}

/// Area under the ROC curve for PD-class scores.
///
/// The threshold sweep walks tied score groups as single steps, so the
/// trapezoid area equals the pair-counting statistic with ties worth ½.
/// Computed in integer half-units, so the two agree exactly.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let positive = Label::Pd.index();
    let n_pos = labels.iter().filter(|&&l| l == positive).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "need both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut tp_before: u64 = 0;
    let mut twice_area: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut p, mut n) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == positive {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        twice_area += 2 * n * tp_before + p * n;
        tp_before += p;
    }
    Ok(twice_area as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// `None` when the evaluated set holds a single class.
    pub auc: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub n_epochs: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricsReport {
    /// Report from PD probabilities, predicting PD when `s > 1 - s`.
    pub fn from_scores(scores: &[f64], labels: &[usize]) -> Result<MetricsReport> {
        let preds: Vec<usize> = scores.iter().map(|&s| usize::from(s > 1.0 - s)).collect();
        Self::from_predictions(&preds, scores, labels)
    }

    pub fn from_predictions(
        preds: &[usize],
        scores: &[f64],
        labels: &[usize],
    ) -> Result<MetricsReport> {
        let cm = confusion(preds, labels)?;
        let m = scalar_metrics(&cm)?;
        let mut warnings = Vec::new();
        if m.degenerate {
            warnings.push("a metric had a zero denominator and was reported as 0".into());
        }
        let auc = match roc_auc(scores, labels) {
            Ok(a) => Some(a),
            Err(e @ Error::UndefinedAuc(_)) => {
                warnings.push(e.to_string());
                None
            }
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            accuracy: m.accuracy,
            auc,
            confusion: cm,
            n_epochs: labels.len(),
            warnings,
        })
    }

    pub const CSV_HEADER: &'static str = "PRC,Recall,F1,AUC,ACC";

    /// Percentages for PRC, Recall and ACC; F1 and AUC as fractions.
    pub fn csv_row(&self) -> String {
        let auc = self
            .auc
            .map_or_else(|| "NA".to_string(), |a| format!("{a:.3}"));
        format!(
            "{:.1},{:.1},{:.2},{},{:.1}",
            100.0 * self.precision,
            100.0 * self.recall,
            self.f1,
            auc,
            100.0 * self.accuracy
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Eval-mode classification of every epoch. Each epoch counts once.
pub fn evaluate(params: &ModelParams, epochs: &[Epoch]) -> Result<MetricsReport> {
    if epochs.is_empty() {
        return Err(Error::invalid("no epochs to evaluate"));
    }
    let probs: Vec<[f64; 2]> = epochs
        .par_iter()
        .map(|e| {
            let p = forward_eval(params, e.data.view())?.probs;
            Ok([p[0], p[1]])
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = epochs.iter().map(|e| e.label.index()).collect();
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let preds: Vec<usize> = probs
        .iter()
        .map(|p| predicted_class(&ndarray::arr1(p)))
        .collect();
    MetricsReport::from_predictions(&preds, &scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(tp: u64, fp: u64, tn: u64, fn_: u64) -> ConfusionMatrix {
        ConfusionMatrix { tp, fp, tn, fn_ }
    }

    #[test]
    fn confusion_cases() {
        assert_eq!(
            confusion(&[1, 1, 0, 0], &[1, 1, 0, 0]).unwrap(),
            cm(2, 0, 2, 0)
        );
        assert_eq!(
            confusion(&[1, 1, 1, 1], &[1, 0, 1, 0]).unwrap(),
            cm(2, 2, 0, 0)
        );
        assert!(confusion(&[], &[]).is_err());
        assert!(confusion(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn scalar_cases() {
        let m = scalar_metrics(&cm(3, 1, 4, 2)).unwrap();
        assert!((m.precision - 0.75).abs() < 1e-15);
        assert!((m.recall - 0.6).abs() < 1e-15);
        assert!((m.accuracy - 0.7).abs() < 1e-15);
        assert!((m.f1 - 0.9 / 1.35).abs() < 1e-15);
        assert!(!m.degenerate);

        let m = scalar_metrics(&cm(0, 0, 5, 5)).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert_eq!(m.accuracy, 0.5);
        assert!(m.degenerate);

        assert!(scalar_metrics(&cm(0, 0, 0, 0)).is_err());
    }

    #[test]
    fn f1_of_reported_precision_and_recall() {
        // precision 1.00 with recall 0.977 rounds to an F1 of 0.99.
        let (p, r): (f64, f64) = (1.0, 0.977);
        let f1 = 2.0 * p * r / (p + r);
        assert!((f1 - 0.988).abs() < 5e-4);
        assert_eq!(format!("{f1:.2}"), "0.99");
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.3, 0.8, 0.2], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.5; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedAuc(_))
        ));
        assert!(roc_auc(&[f64::NAN, 0.2], &[1, 0]).is_err());
    }

    fn pair_count_auc(scores: &[f64], labels: &[usize]) -> f64 {
        let mut half_units = 0u64;
        let mut pairs = 0u64;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1;
                    half_units += if si > sj {
                        2
                    } else if si == sj {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        half_units as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auc_matches_pair_counting_exhaustively() {
        // Every labelling and every score pattern over 3 levels up to n = 7,
        // plus random longer inputs below.
        for n in 2..=7usize {
            let n_score_patterns = 3usize.pow(n as u32);
            for mask in 1..(1u32 << n) - 1 {
                let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
                for pat in 0..n_score_patterns {
                    let mut k = pat;
                    let scores: Vec<f64> = (0..n)
                        .map(|_| {
                            let s = (k % 3) as f64 / 2.0;
                            k /= 3;
                            s
                        })
                        .collect();
                    assert_eq!(
                        roc_auc(&scores, &labels).unwrap(),
                        pair_count_auc(&scores, &labels),
                        "{scores:?} {labels:?}"
                    );
                }
            }
        }
    }

    fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        (2usize..=12).prop_flat_map(|n| {
            (
                prop::collection::vec(
                    prop_oneof![(0u8..6).prop_map(|v| v as f64 / 5.0), 0.0..1.0],
                    n,
                ),
                prop::collection::vec(0usize..2, n),
            )
                .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
        })
    }

    proptest! {
        #[test]
        fn auc_equals_pair_counting((scores, labels) in scored_labels()) {
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), pair_count_auc(&scores, &labels));
        }

        #[test]
        fn auc_invariant_to_monotone_maps((scores, labels) in scored_labels()) {
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&mapped, &labels).unwrap());
        }

        #[test]
        fn auc_complement_without_ties(
            (scores, labels) in scored_labels()
                .prop_filter("distinct", |(s, _)| {
                    let mut v = s.clone();
                    v.sort_by(f64::total_cmp);
                    v.windows(2).all(|w| w[0] != w[1])
                })
        ) {
            let flipped: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
            let a = roc_auc(&scores, &labels).unwrap();
            let b = roc_auc(&scores, &flipped).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn metrics_bounded(tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50) {
            prop_assume!(tp + fp + tn + fn_ > 0);
            let m = scalar_metrics(&cm(tp, fp, tn, fn_)).unwrap();
            for v in [m.precision, m.recall, m.f1, m.accuracy] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if tp + fp > 0 && tp + fn_ > 0 && m.precision + m.recall > 0.0 {
                let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((m.f1 - h).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn report_row_and_single_class() {
        let r = MetricsReport::from_scores(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap();
        assert_eq!(r.csv_row(), "100.0,100.0,1.00,1.000,100.0");
        assert!(r.warnings.is_empty());

        let r = MetricsReport::from_scores(&[0.9, 0.2], &[1, 1]).unwrap();
        assert_eq!(r.auc, None);
        assert_eq!(r.recall, 0.5);
        assert!(r.csv_row().contains(",NA,"));
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_json().contains("\"fn\""));
    }

    #[test]
    fn zero_model_predicts_control() {
        use crate::model::ModelConfig;
        use ndarray::Array2;
        let p = ModelParams::zeros(ModelConfig::new(2, 2, 3, 2)).unwrap();
        let epochs: Vec<Epoch> = [Label::Pd, Label::Control, Label::Control]
            .into_iter()
            .enumerate()
            .map(|(i, label)| Epoch {
                data: Array2::from_elem((2, 10), i as f64 + 0.5),
                label,
                subject_id: format!("s{i}"),
                epoch_index: 0,
            })
            .collect();
        let r = evaluate(&p, &epochs).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.auc, Some(0.5));
        assert_eq!(r.confusion, cm(0, 0, 2, 1));
    }
}
