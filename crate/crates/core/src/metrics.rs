//! Attack and utility metrics: ROC AUC, attack advantage, generalization
//! gap and exclusion accuracy.

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::ensemble::Target;
use crate::error::{Error, Result};
use crate::par;

/// ROC points for every distinct score threshold, from (0, 0) to (1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` pairs, both non-decreasing.
    pub points: Vec<(f64, f64)>,
}

fn class_counts(members: &[bool]) -> Result<(usize, usize)> {
    let pos = members.iter().filter(|&&m| m).count();
    let neg = members.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("both members and non-members are required".into()));
    }
    Ok((pos, neg))
}

impl RocCurve {
    /// Sweeps thresholds from high to low; tied scores move together.
    pub fn new(scores: &[f64], members: &[bool]) -> Result<Self> {
        if scores.len() != members.len() {
            return Err(Error::UndefinedMetric("score and label counts differ".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::UndefinedMetric("non-finite score".into()));
        }
        let (pos, neg) = class_counts(members)?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut points = Vec::with_capacity(scores.len() + 1);
        points.push((0.0, 0.0));
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut i = 0;
        while i < order.len() {
            let s = scores[order[i]];
            while i < order.len() && scores[order[i]] == s {
                if members[order[i]] {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        }
        Ok(RocCurve { points })
    }

    /// Trapezoidal area.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    /// Largest `tpr - fpr` over the curve's points.
    pub fn max_gap(&self) -> f64 {
        self.points
            .iter()
            .map(|&(f, t)| t - f)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Area under the ROC curve; ties count one half.
pub fn roc_auc(scores: &[f64], members: &[bool]) -> Result<f64> {
    Ok(RocCurve::new(scores, members)?.area())
}

/// Maximum of `TPR - FPR` over every score threshold.
pub fn attack_advantage(scores: &[f64], members: &[bool]) -> Result<f64> {
    Ok(RocCurve::new(scores, members)?.max_gap())
}

/// Label accuracy of a target over `samples`.
pub fn target_accuracy(target: &dyn Target, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = par::try_map(samples, |s| target.predict_label(s).map(|l| (l == s.label) as usize))?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

/// Train accuracy minus test accuracy.
pub fn generalization_gap(target: &dyn Target, train: &[Sample], test: &[Sample]) -> Result<f64> {
    Ok(target_accuracy(target, train)? - target_accuracy(target, test)?)
}

/// Fraction of `(decision, truth)` pairs that agree. Members carry their
/// subset as truth, non-members carry `None`.
pub fn eo_accuracy_of<I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (Option<usize>, Option<usize>)>,
{
    let (mut hits, mut total) = (0usize, 0usize);
    for (decision, truth) in pairs {
        hits += (decision == truth) as usize;
        total += 1;
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("exclusion accuracy of an empty set".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Exclusion accuracy of `decide` over members (with their subset) and
/// non-members.
pub fn eo_accuracy<F>(decide: F, members: &[(&Sample, usize)], nonmembers: &[&Sample]) -> Result<f64>
where
    F: Fn(&Sample) -> Option<usize> + Sync + Send,
{
    let m = par::map(members, |(s, i)| (decide(s), Some(*i)));
    let n = par::map(nonmembers, |s| (decide(s), None));
    eo_accuracy_of(m.into_iter().chain(n))
}

/// The five evaluation quantities of one (arm, attack) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub attack_auc: f64,
    pub attack_advantage: f64,
    pub model_test_acc: f64,
    pub model_train_acc: f64,
    pub generalization_gap: f64,
    pub eo_accuracy: Option<f64>,
}

impl MetricsReport {
    pub fn new(
        attack_auc: f64,
        attack_advantage: f64,
        model_test_acc: f64,
        model_train_acc: f64,
        eo_accuracy: Option<f64>,
    ) -> Self {
        MetricsReport {
            attack_auc,
            attack_advantage,
            model_test_acc,
            model_train_acc,
            generalization_gap: model_train_acc - model_test_acc,
            eo_accuracy,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub const CSV_HEADER: [&'static str; 5] = ["eo_acc", "test_acc", "train_acc", "attack_auc", "attack_adv"];

    /// Table-style fields: accuracies as percentages with two decimals,
    /// AUC and advantage with two decimals and no leading zero, missing
    /// EO accuracy as an empty field.
    pub fn csv_fields(&self) -> [String; 5] {
        [
            self.eo_accuracy.map(format_percent).unwrap_or_default(),
            format_percent(self.model_test_acc),
            format_percent(self.model_train_acc),
            format_ratio(self.attack_auc),
            format_ratio(self.attack_advantage),
        ]
    }

    pub fn csv_row(&self) -> String {
        self.csv_fields().join(",")
    }
}

/// `0.6966` → `69.66`.
pub fn format_percent(fraction: f64) -> String {
    let s = format!("{:.2}", fraction * 100.0);
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// `0.69` → `.69`, `-0.02` → `-.02`, `1.0` → `1.00`.
pub fn format_ratio(value: f64) -> String {
    let s = format!("{value:.2}");
    let s = if s == "-0.00" { "0.00".to_string() } else { s };
    if let Some(rest) = s.strip_prefix("0.") {
        format!(".{rest}")
    } else if let Some(rest) = s.strip_prefix("-0.") {
        format!("-.{rest}")
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_and_constant_scores() {
        let members = [true, true, false, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &members).unwrap(), 1.0);
        assert_eq!(attack_advantage(&[0.9, 0.8, 0.2, 0.1], &members).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &members).unwrap(), 0.5);
        assert_eq!(attack_advantage(&[0.5; 4], &members).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
        assert!(attack_advantage(&[0.1], &[false]).is_err());
    }

    #[test]
    fn binary_scores_reduce_to_single_cut() {
        let scores = [1.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let members = [true, true, true, false, false, false];
        let (tpr, fpr) = (2.0 / 3.0, 1.0 / 3.0);
        assert!((attack_advantage(&scores, &members).unwrap() - (tpr - fpr)).abs() < 1e-15);
    }

    #[test]
    fn curve_is_monotone_with_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..200).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
        let members: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
        let roc = RocCurve::new(&scores, &members).unwrap();
        assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
        assert!(roc.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
    }

    #[test]
    fn eo_recount() {
        assert_eq!(eo_accuracy_of([(Some(1), Some(1)), (None, None), (Some(0), None), (None, Some(2))]).unwrap(), 0.5);
        assert!(eo_accuracy_of(std::iter::empty()).is_err());
        let s = crate::dataset::Sample::new(0, 0, crate::dataset::Shape::new(1, 1, 1).unwrap(), vec![0]).unwrap();
        assert_eq!(eo_accuracy(|_| None, &[(&s, 0), (&s, 1)], &[]).unwrap(), 0.0);
    }

    #[test]
    fn table_formatting() {
        let r = MetricsReport::new(0.69, 0.36, 0.6966, 0.9887, None);
        assert_eq!(r.csv_row(), ",69.66,98.87,.69,.36");
        assert!((r.generalization_gap - (0.9887 - 0.6966)).abs() < 1e-15);
        assert_eq!(format_ratio(-0.02), "-.02");
        assert_eq!(format_ratio(1.0), "1.00");
        assert_eq!(format_ratio(-0.001), ".00");
        assert_eq!(format_percent(1.0), "100.00");
        let back = MetricsReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
