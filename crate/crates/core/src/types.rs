//! Shared domain types and elementary transforms.
//!
//! A [`Dataset`] holds precomputed model outputs: one embedding, one model
//! output (class probabilities, raw logits, or a scalar prediction) and one
//! ground-truth label per example. Example indices are the identity used by
//! splits and weight vectors; duplicated embeddings are legal.

use rand::Rng;

use crate::error::{Error, Result};
use crate::num::{cmp_real, sum, Real};

/// Tolerance for the probability-simplex invariant on ingested data.
pub const SIMPLEX_TOL: f64 = 1e-6;
/// Tolerance for weight normalization.
pub const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Regression,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
        }
    }
}

/// Model output attached to one example.
#[derive(Debug, Clone, PartialEq)]
pub enum Output<T> {
    /// Class probabilities (or raw logits when the dataset is marked as
    /// carrying logits; see [`Dataset::logits`]).
    Probs(Vec<T>),
    /// Scalar regression prediction.
    Prediction(T),
}

/// Ground-truth label.
#[derive(Debug, Clone, PartialEq)]
pub enum Label<T> {
    Class(usize),
    Target(T),
}

/// One sample: embedding, model output, ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample<T> {
    pub embedding: Vec<T>,
    pub output: Output<T>,
    pub label: Label<T>,
}

impl<T: Real> LabeledExample<T> {
    pub fn probs(&self) -> Result<&[T]> {
        match &self.output {
            Output::Probs(p) => Ok(p),
            Output::Prediction(_) => Err(Error::TaskMismatch(
                "expected class probabilities, found regression prediction".into(),
            )),
        }
    }

    pub fn prediction(&self) -> Result<T> {
        match &self.output {
            Output::Prediction(y) => Ok(*y),
            Output::Probs(_) => Err(Error::TaskMismatch(
                "expected regression prediction, found class probabilities".into(),
            )),
        }
    }

    pub fn class_label(&self) -> Result<usize> {
        match &self.label {
            Label::Class(c) => Ok(*c),
            Label::Target(_) => Err(Error::TaskMismatch(
                "expected class label, found regression target".into(),
            )),
        }
    }

    pub fn target(&self) -> Result<T> {
        match &self.label {
            Label::Target(y) => Ok(*y),
            Label::Class(_) => Err(Error::TaskMismatch(
                "expected regression target, found class label".into(),
            )),
        }
    }
}

/// An ordered, homogeneous collection of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    task: Task,
    /// When true, classification outputs are raw pre-softmax logits and the
    /// simplex invariant is not enforced; temperature scaling normalizes
    /// them downstream.
    logits: bool,
    classes: Option<usize>,
    dim: usize,
    examples: Vec<LabeledExample<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn new(
        task: Task,
        logits: bool,
        classes: Option<usize>,
        examples: Vec<LabeledExample<T>>,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        if logits && task != Task::Classification {
            return Err(Error::invalid("logits flag applies to classification only"));
        }
        let dim = examples[0].embedding.len();
        let c = match task {
            Task::Classification => match classes {
                Some(c) if c >= 1 => c,
                _ => return Err(Error::invalid("classification dataset requires C >= 1")),
            },
            Task::Regression => {
                if classes.is_some() {
                    return Err(Error::invalid("regression dataset must not declare C"));
                }
                0
            }
        };
        for (i, ex) in examples.iter().enumerate() {
            if ex.embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: ex.embedding.len(),
                });
            }
            if ex.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("non-finite embedding at example {i}")));
            }
            match (task, &ex.output, &ex.label) {
                (Task::Classification, Output::Probs(p), Label::Class(label)) => {
                    if p.len() != c {
                        return Err(Error::invalid(format!(
                            "example {i}: expected {c} class outputs, got {}",
                            p.len()
                        )));
                    }
                    if *label >= c {
                        return Err(Error::invalid(format!(
                            "example {i}: label {label} out of range for C={c}"
                        )));
                    }
                    if p.iter().any(|v| !v.is_finite()) {
                        return Err(Error::invalid(format!("example {i}: non-finite output")));
                    }
                    if !logits {
                        if p.iter().any(|v| *v < T::zero()) {
                            return Err(Error::invalid(format!(
                                "example {i}: negative probability"
                            )));
                        }
                        let total = sum(p.iter().copied()).as_f64();
                        if (total - 1.0).abs() > SIMPLEX_TOL {
                            return Err(Error::invalid(format!(
                                "example {i}: probabilities sum to {total}, not 1"
                            )));
                        }
                    }
                }
                (Task::Regression, Output::Prediction(y), Label::Target(t)) => {
                    if !y.is_finite() || !t.is_finite() {
                        return Err(Error::invalid(format!(
                            "example {i}: non-finite prediction or target"
                        )));
                    }
                }
                _ => {
                    return Err(Error::TaskMismatch(format!(
                        "example {i} does not match task kind {}",
                        task.as_str()
                    )))
                }
            }
        }
        Ok(Dataset {
            task,
            logits,
            classes: (task == Task::Classification).then_some(c),
            dim,
            examples,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn logits(&self) -> bool {
        self.logits
    }

    pub fn classes(&self) -> Option<usize> {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn example(&self, i: usize) -> &LabeledExample<T> {
        &self.examples[i]
    }

    pub fn examples(&self) -> &[LabeledExample<T>] {
        &self.examples
    }

    /// Borrows the examples at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Vec<&LabeledExample<T>> {
        indices.iter().map(|&i| &self.examples[i]).collect()
    }
}

/// Seeded partition request. Partition sizes are counts, applied after one
/// seeded shuffle, in the order calibration, scaling, validation, test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub seed: u64,
    pub calibration: usize,
    pub scaling: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.calibration + self.scaling + self.validation + self.test
    }
}

/// Disjoint index lists produced by [`crate::ingest::split`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub calibration: Vec<usize>,
    pub scaling: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Non-conformity scores aligned to a calibration slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector<T> {
    values: Vec<T>,
}

impl<T: Real> ScoreVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("empty score vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite non-conformity score"));
        }
        Ok(ScoreVector { values })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The point a weight vector is anchored at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    /// A calibration example, by index.
    Calibration(usize),
    /// A test input.
    Test,
}

/// Normalized localization weights over calibration indices, sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector<T> {
    pub anchor: Anchor,
    entries: Vec<(usize, T)>,
}

impl<T: Real> WeightVector<T> {
    /// Validates non-negativity and normalization; entries are stored sorted
    /// by calibration index.
    pub fn new(anchor: Anchor, mut entries: Vec<(usize, T)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("empty weight vector"));
        }
        entries.sort_by_key(|(i, _)| *i);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::invalid(format!("duplicate weight index {}", w[0].0)));
            }
        }
        if entries.iter().any(|(_, w)| !w.is_finite() || *w < T::zero()) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let total = sum(entries.iter().map(|(_, w)| *w)).as_f64();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(WeightVector { anchor, entries })
    }

    pub fn entries(&self) -> &[(usize, T)] {
        &self.entries
    }

    pub fn support_size(&self) -> usize {
        self.entries.len()
    }
}

/// Numerically stable softmax with a temperature divisor.
///
/// Temperature 1 is the plain softmax; output is invariant to adding a
/// constant to every logit.
pub fn softmax<T: Real>(logits: &[T], temperature: T) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of empty logit vector"));
    }
    if !temperature.is_finite() || temperature <= T::zero() {
        return Err(Error::invalid("temperature must be positive and finite"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    let max = logits
        .iter()
        .copied()
        .max_by(cmp_real)
        .expect("non-empty");
    let exps: Vec<T> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let total = sum(exps.iter().copied());
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Class indices sorted by descending probability; ties are broken by a
/// uniform random permutation drawn from `rng` (one draw per class, made
/// before any `U` draw so the two share a single randomness source).
pub fn sorted_class_order<T: Real>(probs: &[T], rng: &mut impl Rng) -> Vec<usize> {
    let keys: Vec<u64> = (0..probs.len()).map(|_| rng.random()).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        cmp_real(&probs[b], &probs[a]).then_with(|| keys[a].cmp(&keys[b]))
    });
    order
}

/// 1-based rank of `label` when classes are sorted by descending
/// probability, ties randomized via `rng`.
pub fn rank_of_label<T: Real>(probs: &[T], label: usize, rng: &mut impl Rng) -> Result<usize> {
    if label >= probs.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let order = sorted_class_order(probs, rng);
    Ok(order.iter().position(|&c| c == label).expect("label present") + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::{self, Domain};
    use proptest::prelude::*;

    fn rng(ix: u64) -> impl Rng {
        seeding::rng(42, Domain::Test, ix)
    }

    #[test]
    fn softmax_symmetric_logits() {
        let p = softmax(&[0.0f64, 0.0], 1.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_hand_computed() {
        let p = softmax(&[2.0f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_high_temperature_flattens() {
        let p = softmax(&[10.0f64, 0.0], 1e9).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-8);
        assert!((p[1] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[f64::NAN, 0.0], 1.0).is_err());
        assert!(softmax(&[0.0f64], 0.0).is_err());
        assert!(softmax(&[0.0f64], -1.0).is_err());
    }

    #[test]
    fn rank_of_label_examples() {
        let probs = [0.6f64, 0.3, 0.1];
        assert_eq!(rank_of_label(&probs, 0, &mut rng(0)).unwrap(), 1);
        assert_eq!(rank_of_label(&probs, 2, &mut rng(0)).unwrap(), 3);
        assert!(rank_of_label(&probs, 3, &mut rng(0)).is_err());
    }

    #[test]
    fn rank_ties_are_deterministic_per_seed() {
        let probs = [0.5f64, 0.5];
        let r1 = rank_of_label(&probs, 0, &mut rng(1)).unwrap();
        let r2 = rank_of_label(&probs, 0, &mut rng(1)).unwrap();
        assert_eq!(r1, r2);
        assert!(r1 == 1 || r1 == 2);
        // Both tied classes fill complementary ranks under the same draws.
        let other = rank_of_label(&probs, 1, &mut rng(1)).unwrap();
        assert_eq!(r1 + other, 3);
    }

    #[test]
    fn weight_vector_validates() {
        let ok = WeightVector::new(Anchor::Test, vec![(1, 0.5f64), (0, 0.5)]).unwrap();
        assert_eq!(ok.entries()[0].0, 0);
        assert!(WeightVector::new(Anchor::Test, vec![(0, 0.5f64), (1, 0.4)]).is_err());
        assert!(WeightVector::new(Anchor::Test, vec![(0, -0.5f64), (1, 1.5)]).is_err());
        assert!(WeightVector::<f64>::new(Anchor::Test, vec![]).is_err());
        assert!(WeightVector::new(Anchor::Test, vec![(0, 0.5f64), (0, 0.5)]).is_err());
    }

    #[test]
    fn dataset_rejects_bad_simplex() {
        let ex = LabeledExample {
            embedding: vec![0.0f64],
            output: Output::Probs(vec![0.9, 0.2]),
            label: Label::Class(0),
        };
        assert!(Dataset::new(Task::Classification, false, Some(2), vec![ex.clone()]).is_err());
        // Same vector is fine when declared as logits.
        assert!(Dataset::new(Task::Classification, true, Some(2), vec![ex]).is_ok());
    }

    #[test]
    fn dataset_rejects_mixed_dims_and_bad_labels() {
        let a = LabeledExample {
            embedding: vec![0.0f64, 1.0],
            output: Output::Probs(vec![1.0, 0.0]),
            label: Label::Class(0),
        };
        let b = LabeledExample {
            embedding: vec![0.0f64],
            output: Output::Probs(vec![1.0, 0.0]),
            label: Label::Class(0),
        };
        assert!(matches!(
            Dataset::new(Task::Classification, false, Some(2), vec![a.clone(), b]),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad_label = LabeledExample {
            embedding: vec![0.0f64, 1.0],
            output: Output::Probs(vec![1.0, 0.0]),
            label: Label::Class(2),
        };
        assert!(Dataset::new(Task::Classification, false, Some(2), vec![a, bad_label]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..20),
            shift in -30.0f64..30.0,
            temp in 0.05f64..20.0,
        ) {
            let p = softmax(&logits, temp).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let q = softmax(&shifted, temp).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn rank_is_permutation_consistent_without_ties(
            seed in 0u64..1000,
            n in 2usize..8,
        ) {
            // Distinct probabilities so tie randomness never fires.
            let weights: Vec<f64> = (0..n).map(|i| (i + 1) as f64).collect();
            let total: f64 = weights.iter().sum();
            let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let mut r = seeding::rng(seed, Domain::Test, 0);
            let perm = sorted_class_order(&probs, &mut r); // reuse as a permutation source
            for label in 0..n {
                let base = rank_of_label(&probs, label, &mut rng(seed)).unwrap();
                let permuted: Vec<f64> = perm.iter().map(|&i| probs[i]).collect();
                let new_label = perm.iter().position(|&i| i == label).unwrap();
                let after = rank_of_label(&permuted, new_label, &mut rng(seed)).unwrap();
                prop_assert_eq!(base, after);
            }
        }
    }
}
