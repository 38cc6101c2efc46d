//! Confusion matrices, per-client classification metrics and their
//! cross-client aggregation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("invalid input: {0}")]
    Input(String),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix { n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn from_labels(n_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self, MetricsError> {
        if truth.len() != predicted.len() {
            return Err(MetricsError::Input(format!(
                "{} true labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(n_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<(), MetricsError> {
        if truth >= self.n_classes || predicted >= self.n_classes {
            return Err(MetricsError::Input(format!(
                "label pair ({truth}, {predicted}) out of range for {} classes",
                self.n_classes
            )));
        }
        self.counts[truth * self.n_classes + predicted] += 1;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|c| self.get(c, c)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks_exact(self.n_classes).map(|r| r.to_vec()).collect()
    }
}

/// Runs `predict` over every test row.
pub fn confusion<E: From<MetricsError>>(
    mut predict: impl FnMut(&[f64]) -> Result<usize, E>,
    test_set: &Dataset,
) -> Result<ConfusionMatrix, E> {
    if test_set.n_rows() == 0 {
        return Err(MetricsError::Evaluation("test set is empty".into()).into());
    }
    let mut cm = ConfusionMatrix::new(test_set.n_classes());
    for (x, y) in test_set.rows() {
        cm.record(y, predict(x)?)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Precision, recall and F1 of class 1.
    BinaryPositive,
    /// Unweighted mean of per-class precision, recall and F1.
    MacroMulticlass,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    pub const METRIC_NAMES: [&'static str; 4] = ["accuracy", "precision", "recall", "f1"];

    pub fn as_array(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }
}

/// Zero denominators give zero precision or recall; F1 is zero when
/// precision and recall are both zero.
pub fn metrics_from_confusion(cm: &ConfusionMatrix, task: TaskKind) -> Result<Scores, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Evaluation("confusion matrix is empty".into()));
    }
    let accuracy = cm.trace() as f64 / total as f64;
    let per_class = |c: usize| {
        let tp = cm.get(c, c) as f64;
        let predicted: u64 = (0..cm.n_classes()).map(|t| cm.get(t, c)).sum();
        let actual: u64 = (0..cm.n_classes()).map(|p| cm.get(c, p)).sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
        (precision, recall, f1_of(precision, recall))
    };
    let (precision, recall, f1) = match task {
        TaskKind::BinaryPositive => {
            if cm.n_classes() != 2 {
                return Err(MetricsError::Input(format!(
                    "positive-class metrics need 2 classes, got {}",
                    cm.n_classes()
                )));
            }
            per_class(1)
        }
        TaskKind::MacroMulticlass => {
            let k = cm.n_classes() as f64;
            let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
            for c in 0..cm.n_classes() {
                let (pc, rc, fc) = per_class(c);
                p += pc;
                r += rc;
                f += fc;
            }
            (p / k, r / k, f / k)
        }
    };
    Ok(Scores { accuracy, precision, recall, f1 })
}

fn f1_of(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateScores {
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

impl AggregateScores {
    pub fn as_array(&self) -> [MeanStd; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }
}

/// Mean and population standard deviation of each metric.
pub fn aggregate_clients(reports: &[Scores]) -> AggregateScores {
    let stat = |pick: fn(&Scores) -> f64| {
        let values: Vec<f64> = reports.iter().map(pick).collect();
        let (mean, std) = crate::math::mean_std(&values);
        MeanStd { mean, std }
    };
    AggregateScores {
        accuracy: stat(|s| s.accuracy),
        precision: stat(|s| s.precision),
        recall: stat(|s| s.recall),
        f1: stat(|s| s.f1),
    }
}

/// Per-client scores for the untouched local model, the fused wrapper
/// output, and the federated model alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientScores {
    pub client_id: String,
    pub descriptor: String,
    pub local: Scores,
    pub wrapper: Scores,
    pub federated: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_client: Vec<ClientScores>,
    pub local: AggregateScores,
    pub wrapper: AggregateScores,
    pub federated: AggregateScores,
}

impl MetricsReport {
    pub fn from_clients(per_client: Vec<ClientScores>) -> Self {
        let pick = |f: fn(&ClientScores) -> Scores| per_client.iter().map(f).collect::<Vec<_>>();
        let local = aggregate_clients(&pick(|c| c.local));
        let wrapper = aggregate_clients(&pick(|c| c.wrapper));
        let federated = aggregate_clients(&pick(|c| c.federated));
        MetricsReport { per_client, local, wrapper, federated }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_matrix() {
        let cm = ConfusionMatrix::from_labels(2, &[0, 0, 1, 1, 1, 0], &[0, 1, 1, 1, 0, 0]).unwrap();
        assert_eq!(cm.rows(), vec![vec![2, 1], vec![1, 2]]);
        let s = metrics_from_confusion(&cm, TaskKind::BinaryPositive).unwrap();
        assert!((s.accuracy - 4.0 / 6.0).abs() < 1e-15);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_predictor_counts() {
        let data = Dataset::new(vec![0.0; 10], 1, vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1], 2).unwrap();
        let cm = confusion(|_| Ok::<_, MetricsError>(0), &data).unwrap();
        assert_eq!(cm.rows(), vec![vec![5, 0], vec![5, 0]]);
        let s = metrics_from_confusion(&cm, TaskKind::BinaryPositive).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn perfect_predictor_is_diagonal() {
        let truth = [0, 1, 2, 2, 1];
        let cm = ConfusionMatrix::from_labels(3, &truth, &truth).unwrap();
        assert_eq!(cm.trace(), 5);
        let s = metrics_from_confusion(&cm, TaskKind::MacroMulticlass).unwrap();
        assert_eq!(s.as_array(), [1.0; 4]);
    }

    #[test]
    fn binary_task_needs_two_classes() {
        let cm = ConfusionMatrix::from_labels(3, &[0], &[0]).unwrap();
        assert!(matches!(metrics_from_confusion(&cm, TaskKind::BinaryPositive), Err(MetricsError::Input(_))));
    }

    #[test]
    fn aggregation_uses_population_std() {
        let mk = |f1| Scores { f1, ..Default::default() };
        let agg = aggregate_clients(&[mk(0.2), mk(0.4)]);
        assert!((agg.f1.mean - 0.3).abs() < 1e-15);
        assert!((agg.f1.std - 0.1).abs() < 1e-15);
        let single = aggregate_clients(&[mk(0.7)]);
        assert_eq!((single.f1.mean, single.f1.std), (0.7, 0.0));
    }
}
