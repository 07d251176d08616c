//! Non-conformity scores and the probability-calibration step.
//!
//! Classification scores follow the cumulative-sorted-probability family:
//! the adaptive prediction-set score randomized by `U`, and its
//! rank-regularized variant. Regression uses the absolute residual. The
//! naive baseline builds sets straight from cumulative probability without
//! conformal calibration.

use rand::Rng;

use crate::error::{Error, Result};
use crate::num::{cmp_real, Real};
use crate::seeding::{self, Domain};
use crate::types::{
    rank_of_label, softmax, sorted_class_order, Dataset, LabeledExample, Output, ScoreVector, Task,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Aps,
    Raps,
    AbsResidual,
}

impl ScoreKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreKind::Aps => "aps",
            ScoreKind::Raps => "raps",
            ScoreKind::AbsResidual => "absres",
        }
    }

    pub fn task(&self) -> Task {
        match self {
            ScoreKind::Aps | ScoreKind::Raps => Task::Classification,
            ScoreKind::AbsResidual => Task::Regression,
        }
    }
}

/// Shape of the rank-regularization penalty.
///
/// `Abs` penalizes `|k - k_reg|` with the candidate's own rank substituted
/// for the ground-truth rank (which is unknown at test time); `Hinge` is the
/// one-sided `max(0, k - k_reg)` variant. Both are exposed because published
/// definitions differ; `Abs` is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RapsPenalty {
    Abs,
    Hinge,
}

impl RapsPenalty {
    pub fn as_str(&self) -> &'static str {
        match self {
            RapsPenalty::Abs => "abs",
            RapsPenalty::Hinge => "hinge",
        }
    }
}

/// Score-function configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreConfig {
    pub kind: ScoreKind,
    /// Rank-regularization strength (ignored unless `kind` is `Raps`).
    pub lambda_r: f64,
    /// Reference rank for the regularizer, 1-based.
    pub k_reg: usize,
    pub penalty: RapsPenalty,
    /// Base seed for per-example tie-break/`U` streams during calibration.
    pub tie_seed: u64,
}

impl ScoreConfig {
    pub fn new(kind: ScoreKind, tie_seed: u64) -> Self {
        ScoreConfig {
            kind,
            lambda_r: 0.0,
            k_reg: 1,
            penalty: RapsPenalty::Abs,
            tie_seed,
        }
    }

    pub fn validate(&self, classes: Option<usize>) -> Result<()> {
        if self.lambda_r < 0.0 || !self.lambda_r.is_finite() {
            return Err(Error::invalid("lambda_r must be finite and >= 0"));
        }
        if self.k_reg == 0 {
            return Err(Error::invalid("k_reg must be >= 1"));
        }
        if let Some(c) = classes {
            if self.kind != ScoreKind::AbsResidual && self.k_reg > c {
                return Err(Error::invalid(format!("k_reg {} exceeds C={c}", self.k_reg)));
            }
        }
        Ok(())
    }
}

/// Result of the temperature fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureFit<T> {
    pub temperature: T,
    /// Mean negative log-likelihood at the fitted temperature.
    pub final_nll: f64,
    /// True when the optimum sits at an end of the search interval.
    pub at_bound: bool,
}

/// Cumulative-probability score at rank `k` (1-based): the mass of the
/// `k - 1` most probable classes plus `U` times the `k`-th mass.
///
/// Sorting is internal and descending; equal probabilities contribute the
/// same mass regardless of tie order, so no randomness is needed here.
pub fn aps_score<T: Real>(probs: &[T], k: usize, u: T) -> Result<T> {
    if k == 0 || k > probs.len() {
        return Err(Error::invalid(format!(
            "rank {k} out of range for {} classes",
            probs.len()
        )));
    }
    if !(u >= T::zero() && u <= T::one()) {
        return Err(Error::invalid("U must lie in [0, 1]"));
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| cmp_real(b, a));
    let mut prefix = T::zero();
    for &p in &sorted[..k - 1] {
        prefix = prefix + p;
    }
    Ok(prefix + u * sorted[k - 1])
}

/// Rank-regularized score: `aps_score` plus the configured penalty at `k`.
/// A zero regularization strength reduces exactly to `aps_score`.
pub fn raps_score<T: Real>(probs: &[T], k: usize, u: T, config: &ScoreConfig) -> Result<T> {
    let base = aps_score(probs, k, u)?;
    Ok(base + rank_penalty(k, config))
}

pub(crate) fn rank_penalty<T: Real>(k: usize, config: &ScoreConfig) -> T {
    let lambda = T::of(config.lambda_r);
    let k = k as f64;
    let k_reg = config.k_reg as f64;
    match config.penalty {
        RapsPenalty::Abs => lambda * T::of((k - k_reg).abs()),
        RapsPenalty::Hinge => lambda * T::of((k - k_reg).max(0.0)),
    }
}

/// Absolute residual `|y* - prediction|`.
pub fn abs_residual<T: Real>(y_star: T, prediction: T) -> Result<T> {
    if !y_star.is_finite() || !prediction.is_finite() {
        return Err(Error::invalid("non-finite residual input"));
    }
    Ok((y_star - prediction).abs())
}

/// Naive baseline: classes in descending-probability order until the
/// cumulative mass first reaches `1 - alpha`. Ties take the lower index.
pub fn naive_set<T: Real>(probs: &[T], alpha: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| cmp_real(&probs[b], &probs[a]).then(a.cmp(&b)));
    let target = T::of(1.0 - alpha);
    let mut out = Vec::new();
    let mut cum = T::zero();
    for c in order {
        out.push(c);
        cum = cum + probs[c];
        if cum >= target {
            break;
        }
    }
    out
}

/// Per-candidate scores for one input: entry `c` is the configured score of
/// class `c` at its own rank, all ranks sharing the tie order and the single
/// `U` drawn from `rng`.
///
/// Returns `(scores_by_class, rank_order)`.
pub fn class_scores<T: Real>(
    probs: &[T],
    config: &ScoreConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<T>, Vec<usize>)> {
    let order = sorted_class_order(probs, rng);
    let u = T::of(rng.random::<f64>());
    let mut scores = vec![T::zero(); probs.len()];
    let mut prefix = T::zero();
    for (pos, &class) in order.iter().enumerate() {
        let k = pos + 1;
        let mut v = prefix + u * probs[class];
        if config.kind == ScoreKind::Raps {
            v = v + rank_penalty(k, config);
        }
        scores[class] = v;
        prefix = prefix + probs[class];
    }
    Ok((scores, order))
}

/// Non-conformity scores over a calibration slice, aligned to slice order.
///
/// Classification scores are taken at the ground-truth label's rank with a
/// fresh `U` per example; randomness comes from a per-example stream derived
/// from `config.tie_seed`, so batch order and parallel scheduling cannot
/// change results.
pub fn calibration_scores<T: Real>(
    examples: &[&LabeledExample<T>],
    config: &ScoreConfig,
) -> Result<ScoreVector<T>> {
    if examples.is_empty() {
        return Err(Error::invalid("empty calibration slice"));
    }
    let mut values = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let v = match config.kind {
            ScoreKind::Aps | ScoreKind::Raps => {
                let probs = ex.probs()?;
                let label = ex.class_label()?;
                let mut rng = seeding::rng(config.tie_seed, Domain::CalibrationScore, i as u64);
                // scores[label] is the score at the label's own rank L.
                let (scores, _) = class_scores(probs, config, &mut rng)?;
                scores[label]
            }
            ScoreKind::AbsResidual => abs_residual(ex.target()?, ex.prediction()?)?,
        };
        values.push(v);
    }
    ScoreVector::new(values)
}

/// Reference rank chosen from ground-truth ranks on a validation slice: the
/// `ceil((1 - alpha) * m)`-th order statistic.
pub fn select_k_reg(ranks: &[usize], alpha: f64) -> Result<usize> {
    if ranks.is_empty() {
        return Err(Error::invalid("empty rank slice for k_reg selection"));
    }
    let m = ranks.len();
    let pos = ((1.0 - alpha) * m as f64).ceil().max(1.0) as usize;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    Ok(sorted[pos.min(m) - 1])
}

/// Ground-truth ranks over a classification slice, tie order drawn from the
/// same per-example streams as [`calibration_scores`].
pub fn ground_truth_ranks<T: Real>(
    examples: &[&LabeledExample<T>],
    tie_seed: u64,
) -> Result<Vec<usize>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = seeding::rng(tie_seed, Domain::CalibrationScore, i as u64);
            rank_of_label(ex.probs()?, ex.class_label()?, &mut rng)
        })
        .collect()
}

/// Fits a softmax temperature on a slice of raw logits and labels by
/// golden-section search on `ln T` over `[-3, 3]`, minimizing mean negative
/// log-likelihood; tolerance `1e-4` in `ln T`.
pub fn fit_temperature<T: Real>(examples: &[&LabeledExample<T>]) -> Result<TemperatureFit<T>> {
    if examples.is_empty() {
        return Err(Error::invalid("empty scaling slice"));
    }
    let mut logit_rows: Vec<Vec<f64>> = Vec::with_capacity(examples.len());
    let mut labels: Vec<usize> = Vec::with_capacity(examples.len());
    for ex in examples {
        logit_rows.push(ex.probs()?.iter().map(|v| v.as_f64()).collect());
        labels.push(ex.class_label()?);
    }
    let nll = |ln_t: f64| -> f64 {
        let t = ln_t.exp();
        let mut total = 0.0;
        for (row, &label) in logit_rows.iter().zip(labels.iter()) {
            let p = softmax(row, t).expect("finite logits");
            total -= p[label].max(f64::MIN_POSITIVE).ln();
        }
        total / logit_rows.len() as f64
    };

    const LO: f64 = -3.0;
    const HI: f64 = 3.0;
    const TOL: f64 = 1e-4;
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (LO, HI);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (nll(c), nll(d));
    // Ties (numerically flat regions) resolve toward the smaller
    // temperature so degenerate one-example fits land on a bound.
    while (b - a) > TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = nll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = nll(d);
        }
    }
    let ln_t = 0.5 * (a + b);
    let final_nll = nll(ln_t);
    let at_bound = (ln_t - LO) < 2.0 * TOL || (HI - ln_t) < 2.0 * TOL;
    Ok(TemperatureFit {
        temperature: T::of(ln_t.exp()),
        final_nll,
        at_bound,
    })
}

/// Replaces raw logits with `softmax(logits / T)` probabilities, clearing
/// the logits flag. Probability datasets pass through unchanged when `T` is
/// one.
pub fn apply_temperature<T: Real>(dataset: &Dataset<T>, temperature: T) -> Result<Dataset<T>> {
    if dataset.task() != Task::Classification {
        return Err(Error::TaskMismatch(
            "temperature scaling applies to classification datasets".into(),
        ));
    }
    if !dataset.logits() {
        return Ok(dataset.clone());
    }
    let examples = dataset
        .examples()
        .iter()
        .map(|ex| {
            let logits = match &ex.output {
                Output::Probs(z) => z,
                Output::Prediction(_) => unreachable!("validated classification dataset"),
            };
            Ok(LabeledExample {
                embedding: ex.embedding.clone(),
                output: Output::Probs(softmax(logits, temperature)?),
                label: ex.label.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(Task::Classification, false, dataset.classes(), examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Label;
    use proptest::prelude::*;

    fn test_rng(ix: u64) -> impl Rng {
        seeding::rng(11, Domain::Test, ix)
    }

    fn raps_config(lambda_r: f64, k_reg: usize, penalty: RapsPenalty) -> ScoreConfig {
        ScoreConfig {
            kind: ScoreKind::Raps,
            lambda_r,
            k_reg,
            penalty,
            tie_seed: 0,
        }
    }

    #[test]
    fn aps_frozen_examples() {
        let probs = [0.6f64, 0.3, 0.1];
        assert_eq!(aps_score(&probs, 1, 0.0).unwrap(), 0.0);
        assert!((aps_score(&probs, 2, 0.5).unwrap() - 0.75).abs() < 1e-15);
        assert!((aps_score(&probs, 3, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(aps_score(&probs, 0, 0.5).is_err());
        assert!(aps_score(&probs, 4, 0.5).is_err());
        assert!(aps_score(&probs, 1, 1.5).is_err());
    }

    #[test]
    fn aps_sorts_internally() {
        let shuffled = [0.1f64, 0.6, 0.3];
        assert!((aps_score(&shuffled, 2, 0.5).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn raps_frozen_examples() {
        let probs = [0.6f64, 0.3, 0.1];
        let abs = raps_config(0.1, 1, RapsPenalty::Abs);
        assert!((raps_score(&probs, 2, 0.5, &abs).unwrap() - 0.85).abs() < 1e-15);
        let hinge = raps_config(0.1, 1, RapsPenalty::Hinge);
        assert!((raps_score(&probs, 2, 0.5, &hinge).unwrap() - 0.85).abs() < 1e-15);
        // Below the reference rank the hinge contributes nothing, abs does.
        let abs2 = raps_config(0.1, 3, RapsPenalty::Abs);
        let hinge2 = raps_config(0.1, 3, RapsPenalty::Hinge);
        assert!((raps_score(&probs, 2, 0.5, &abs2).unwrap() - 0.85).abs() < 1e-15);
        assert!((raps_score(&probs, 2, 0.5, &hinge2).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn raps_zero_lambda_is_aps_bit_for_bit() {
        let probs = [0.35f64, 0.25, 0.2, 0.2];
        let config = raps_config(0.0, 2, RapsPenalty::Abs);
        for k in 1..=4 {
            for u in [0.0, 0.31, 1.0] {
                assert_eq!(
                    raps_score(&probs, k, u, &config).unwrap(),
                    aps_score(&probs, k, u).unwrap()
                );
            }
        }
    }

    #[test]
    fn abs_residual_examples() {
        assert_eq!(abs_residual(5.0f64, 3.0).unwrap(), 2.0);
        assert_eq!(abs_residual(4.5f64, 4.5).unwrap(), 0.0);
        assert_eq!(abs_residual(-1.0f64, 2.0).unwrap(), 3.0);
        assert!(abs_residual(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn naive_set_examples() {
        let probs = [0.5f64, 0.3, 0.2];
        assert_eq!(naive_set(&probs, 0.1), vec![0, 1, 2]);
        assert_eq!(naive_set(&probs, 0.6), vec![0]);
        let one_hot = [0.0f64, 1.0, 0.0];
        assert_eq!(naive_set(&one_hot, 0.37), vec![1]);
    }

    #[test]
    fn calibration_scores_regression() {
        let make = |y: f64, pred: f64| LabeledExample {
            embedding: vec![0.0f64],
            output: Output::Prediction(pred),
            label: Label::Target(y),
        };
        let a = make(5.0, 3.0);
        let b = make(2.0, 2.0);
        let config = ScoreConfig::new(ScoreKind::AbsResidual, 0);
        let scores = calibration_scores(&[&a, &b], &config).unwrap();
        assert_eq!(scores.values(), &[2.0, 0.0]);
    }

    #[test]
    fn calibration_score_degenerate_simplex_is_u() {
        let ex = LabeledExample {
            embedding: vec![0.0f64],
            output: Output::Probs(vec![1.0, 0.0]),
            label: Label::Class(0),
        };
        let config = ScoreConfig::new(ScoreKind::Aps, 5);
        let scores = calibration_scores(&[&ex], &config).unwrap();
        let v = scores.values()[0];
        assert!((0.0..=1.0).contains(&v));
        // Deterministic per seed.
        let again = calibration_scores(&[&ex], &config).unwrap();
        assert_eq!(v, again.values()[0]);
    }

    #[test]
    fn calibration_scores_reject_task_mismatch() {
        let ex = LabeledExample {
            embedding: vec![0.0f64],
            output: Output::Probs(vec![1.0, 0.0]),
            label: Label::Class(0),
        };
        let config = ScoreConfig::new(ScoreKind::AbsResidual, 0);
        assert!(calibration_scores(&[&ex], &config).is_err());
    }

    #[test]
    fn select_k_reg_order_statistic() {
        // m=10, alpha=0.1 -> ceil(9) = 9th smallest.
        let ranks = [1, 1, 1, 2, 2, 3, 3, 4, 5, 9];
        assert_eq!(select_k_reg(&ranks, 0.1).unwrap(), 5);
        assert_eq!(select_k_reg(&[2], 0.1).unwrap(), 2);
        assert!(select_k_reg(&[], 0.1).is_err());
    }

    #[test]
    fn temperature_fit_duplication_invariant() {
        let ex = |l0: f64, l1: f64, y: usize| LabeledExample {
            embedding: vec![0.0f64],
            output: Output::Probs(vec![l0, l1]),
            label: Label::Class(y),
        };
        let a = ex(2.0, -1.0, 0);
        let b = ex(-0.5, 1.5, 1);
        let c = ex(0.2, 0.1, 1);
        let once = fit_temperature(&[&a, &b, &c]).unwrap();
        let twice = fit_temperature(&[&a, &b, &c, &a, &b, &c]).unwrap();
        assert_eq!(once.temperature, twice.temperature);
    }

    #[test]
    fn temperature_fit_scales_with_logits() {
        let ex = |l: Vec<f64>, y: usize| LabeledExample {
            embedding: vec![0.0f64],
            output: Output::Probs(l),
            label: Label::Class(y),
        };
        let base = vec![
            ex(vec![1.2, -0.3, 0.1], 0),
            ex(vec![-0.8, 0.9, 0.0], 1),
            ex(vec![0.3, 0.2, 0.4], 2),
            ex(vec![2.0, 1.0, -1.0], 1),
        ];
        let scaled: Vec<_> = base
            .iter()
            .map(|e| {
                let logits = match &e.output {
                    Output::Probs(z) => z.iter().map(|v| v * 3.0).collect(),
                    _ => unreachable!(),
                };
                LabeledExample {
                    embedding: e.embedding.clone(),
                    output: Output::Probs(logits),
                    label: e.label.clone(),
                }
            })
            .collect();
        let f1 = fit_temperature::<f64>(&base.iter().collect::<Vec<_>>()).unwrap();
        let f3 = fit_temperature::<f64>(&scaled.iter().collect::<Vec<_>>()).unwrap();
        assert!(
            (f3.temperature / f1.temperature - 3.0).abs() < 3.0 * 1e-3,
            "T1={} T3={}",
            f1.temperature,
            f3.temperature
        );
    }

    #[test]
    fn temperature_fit_flags_bound_on_extreme_single_example() {
        // One extreme, argmax-correct example: NLL decreases monotonically
        // toward the sharp end of the interval, so the fit lands on a bound.
        let ex = LabeledExample {
            embedding: vec![0.0f64],
            output: Output::Probs(vec![30.0, -30.0]),
            label: Label::Class(0),
        };
        let fit = fit_temperature(&[&ex]).unwrap();
        assert!(fit.at_bound, "T={} nll={}", fit.temperature, fit.final_nll);
    }

    #[test]
    fn temperature_fit_never_beats_t1_nll_on_fitting_slice() {
        let ex = |l: Vec<f64>, y: usize| LabeledExample {
            embedding: vec![0.0f64],
            output: Output::Probs(l),
            label: Label::Class(y),
        };
        let slice = vec![
            ex(vec![3.0, 0.0, -1.0], 0),
            ex(vec![2.0, 2.5, 0.0], 0),
            ex(vec![-1.0, 4.0, 1.0], 1),
            ex(vec![0.5, 0.6, 0.7], 2),
            ex(vec![5.0, 4.0, 3.0], 2),
        ];
        let refs: Vec<_> = slice.iter().collect();
        let fit = fit_temperature::<f64>(&refs).unwrap();
        let nll_at = |t: f64| -> f64 {
            slice
                .iter()
                .map(|e| {
                    let z = match &e.output {
                        Output::Probs(z) => z.clone(),
                        _ => unreachable!(),
                    };
                    let label = match e.label {
                        Label::Class(c) => c,
                        _ => unreachable!(),
                    };
                    -softmax(&z, t).unwrap()[label].ln()
                })
                .sum::<f64>()
                / slice.len() as f64
        };
        assert!(fit.final_nll <= nll_at(1.0) + 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn aps_monotone_in_rank_and_u(
            seed in 0u64..5_000,
            c in 2usize..12,
        ) {
            let mut rng = seeding::rng(seed, Domain::Test, 9);
            let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-6).collect();
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
            let us = [0.0, 0.25, 0.5, 0.75, 1.0];
            for &u in &us {
                let mut last = -1.0f64;
                for k in 1..=c {
                    let v = aps_score(&probs, k, u).unwrap();
                    prop_assert!(v + 1e-12 >= last);
                    last = v;
                }
            }
            for k in 1..=c {
                let mut last = -1.0f64;
                for &u in &us {
                    let v = aps_score(&probs, k, u).unwrap();
                    prop_assert!(v + 1e-12 >= last);
                    last = v;
                }
            }
            // Full mass at the deepest rank with U = 1.
            let full = aps_score(&probs, c, 1.0).unwrap();
            prop_assert!((full - 1.0).abs() < 1e-9);
        }

        #[test]
        fn abs_residual_symmetric(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            prop_assert_eq!(
                abs_residual(a, b).unwrap(),
                abs_residual(b, a).unwrap()
            );
        }
    }

    #[test]
    fn class_scores_match_rank_scores() {
        let probs = [0.5f64, 0.2, 0.3];
        let config = ScoreConfig::new(ScoreKind::Aps, 0);
        let (scores, order) = class_scores(&probs, &config, &mut test_rng(3)).unwrap();
        // Recover U from the top-ranked class and check every rank.
        let u = scores[order[0]] / probs[order[0]];
        let mut prefix = 0.0;
        for (pos, &class) in order.iter().enumerate() {
            let expect = prefix + u * probs[class];
            assert!((scores[class] - expect).abs() < 1e-12, "rank {}", pos + 1);
            prefix += probs[class];
        }
    }
}
