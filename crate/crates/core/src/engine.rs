//! End-to-end calibration and prediction.
//!
//! `calibrate_*` freezes everything prediction needs (scores, thresholds or
//! the adjusted level, the neighbor index, the temperature) into a
//! [`CalibratedModel`]; `predict` then turns one test input into a
//! classification set or regression interval. Models serialize to a single
//! self-describing text file so calibration and prediction can run as
//! separate invocations.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ingest::format_real;
use crate::localizer::{
    build_index, weights_for_anchor, LocalizerConfig, LocalizerMode, LshParams, NeighborIndex,
    SearchBackend,
};
use crate::num::Real;
use crate::quantile::{cp_quantile, ncp_alpha_search, weighted_quantile, Threshold};
use crate::scoring::{calibration_scores, class_scores, naive_set, ScoreConfig, ScoreKind,
    RapsPenalty};
use crate::seeding::{self, Domain};
use crate::types::{Anchor, Dataset, Label, LabeledExample, ScoreVector, SplitSpec, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Cp,
    Ncp,
    Naive,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Cp => "cp",
            Method::Ncp => "ncp",
            Method::Naive => "naive",
        }
    }
}

/// Frozen output of calibration; immutable and safe to share across
/// concurrent predictions.
#[derive(Debug, Clone)]
pub struct CalibratedModel<T> {
    pub method: Method,
    pub task: Task,
    pub classes: Option<usize>,
    pub alpha: f64,
    pub score_config: ScoreConfig,
    pub localizer_config: Option<LocalizerConfig>,
    /// Temperature already applied to the calibration data; prediction
    /// applies the same value to logit inputs.
    pub temperature: f64,
    pub scores: Option<ScoreVector<T>>,
    pub cp_threshold: Option<Threshold<T>>,
    pub alpha_tilde: Option<f64>,
    pub index: Option<NeighborIndex<T>>,
    /// How many calibration anchors needed the empty-ball fallback.
    pub ball_fallbacks: usize,
    /// Split used to carve the calibration slice, recorded for provenance.
    pub split: Option<SplitSpec>,
}

/// One prediction: a class set or an interval, plus the threshold that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction<T> {
    /// Classes in descending-probability (rank) order.
    Set(Vec<usize>),
    Interval { lower: T, upper: T },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput<T> {
    pub prediction: Prediction<T>,
    pub threshold: Threshold<T>,
    /// Calibration points with nonzero weight (localized methods).
    pub neighbors_used: Option<usize>,
    /// True when the ball localizer fell back to the nearest neighbor.
    pub ball_fallback: bool,
    /// True when an empty set was replaced by the top-1 class.
    pub forced_nonempty: bool,
}

impl<T: Real> PredictionOutput<T> {
    /// Whether the true label/target is covered.
    pub fn covers(&self, label: &Label<T>) -> Result<bool> {
        match (&self.prediction, label) {
            (Prediction::Set(set), Label::Class(y)) => Ok(set.contains(y)),
            (Prediction::Interval { lower, upper }, Label::Target(y)) => {
                Ok(*y >= *lower && *y <= *upper)
            }
            _ => Err(Error::TaskMismatch(
                "prediction kind does not match label kind".into(),
            )),
        }
    }

    /// Set cardinality or interval length; infinite for the sentinel
    /// interval.
    pub fn size(&self) -> f64 {
        match &self.prediction {
            Prediction::Set(set) => set.len() as f64,
            Prediction::Interval { lower, upper } => (*upper - *lower).as_f64(),
        }
    }
}

fn validate_calibration_inputs<T: Real>(
    examples: &[&LabeledExample<T>],
    score_config: &ScoreConfig,
    classes: Option<usize>,
    alpha: f64,
) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::invalid("empty calibration slice"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha must lie in (0, 1)"));
    }
    score_config.validate(classes)?;
    Ok(())
}

/// Split conformal calibration: scores the slice and fixes the CP quantile.
pub fn calibrate_cp<T: Real>(
    examples: &[&LabeledExample<T>],
    score_config: ScoreConfig,
    classes: Option<usize>,
    alpha: f64,
    temperature: f64,
) -> Result<CalibratedModel<T>> {
    validate_calibration_inputs(examples, &score_config, classes, alpha)?;
    let scores = calibration_scores(examples, &score_config)?;
    let quantile = cp_quantile(&scores, alpha)?;
    Ok(CalibratedModel {
        method: Method::Cp,
        task: score_config.kind.task(),
        classes,
        alpha,
        score_config,
        localizer_config: None,
        temperature,
        scores: Some(scores),
        cp_threshold: Some(quantile.threshold),
        alpha_tilde: None,
        index: None,
        ball_fallbacks: 0,
        split: None,
    })
}

/// Neighborhood conformal calibration: builds the neighbor index over the
/// calibration embeddings, computes per-anchor localization weights, and
/// fixes the adjusted level by grid search.
pub fn calibrate_ncp<T: Real>(
    examples: &[&LabeledExample<T>],
    score_config: ScoreConfig,
    localizer_config: LocalizerConfig,
    classes: Option<usize>,
    alpha: f64,
    temperature: f64,
    leave_one_out: bool,
) -> Result<CalibratedModel<T>> {
    validate_calibration_inputs(examples, &score_config, classes, alpha)?;
    localizer_config.validate()?;
    let scores = calibration_scores(examples, &score_config)?;
    let embeddings: Vec<&[T]> = examples.iter().map(|e| e.embedding.as_slice()).collect();
    let index = build_index(&embeddings, &localizer_config)?;
    let mut fallbacks = 0usize;
    let weights = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let (w, fell_back) = weights_for_anchor(
                &index,
                ex.embedding.as_slice(),
                Anchor::Calibration(i),
                &localizer_config,
            )?;
            if fell_back {
                fallbacks += 1;
            }
            Ok(w)
        })
        .collect::<Result<Vec<_>>>()?;
    let search = ncp_alpha_search(&scores, &weights, alpha, leave_one_out)?;
    Ok(CalibratedModel {
        method: Method::Ncp,
        task: score_config.kind.task(),
        classes,
        alpha,
        score_config,
        localizer_config: Some(localizer_config),
        temperature,
        scores: Some(scores),
        cp_threshold: None,
        alpha_tilde: Some(search.alpha_tilde),
        index: Some(index),
        ball_fallbacks: fallbacks,
        split: None,
    })
}

/// The naive baseline needs no calibration; the model records the target
/// level only.
pub fn calibrate_naive<T: Real>(
    score_config: ScoreConfig,
    classes: Option<usize>,
    alpha: f64,
    temperature: f64,
) -> Result<CalibratedModel<T>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha must lie in (0, 1)"));
    }
    if score_config.kind.task() != Task::Classification {
        return Err(Error::TaskMismatch("naive baseline is classification-only".into()));
    }
    Ok(CalibratedModel {
        method: Method::Naive,
        task: Task::Classification,
        classes,
        alpha,
        score_config,
        localizer_config: None,
        temperature,
        scores: None,
        cp_threshold: None,
        alpha_tilde: None,
        index: None,
        ball_fallbacks: 0,
        split: None,
    })
}

/// Produces the prediction set or interval for one test input.
///
/// Classification draws one `U` from `rng`, shared across all candidate
/// ranks, so adaptive sets are rank-prefixes. Localized models compute
/// test-anchored weights over the calibration index and take the weighted
/// quantile at the frozen adjusted level; the test threshold is computed
/// over calibration scores only.
pub fn predict<T: Real>(
    model: &CalibratedModel<T>,
    example: &LabeledExample<T>,
    rng: &mut impl Rng,
    force_nonempty: bool,
) -> Result<PredictionOutput<T>> {
    let (threshold, neighbors_used, ball_fallback) = match model.method {
        Method::Cp => (
            model
                .cp_threshold
                .ok_or_else(|| Error::invalid("model missing CP threshold"))?,
            None,
            false,
        ),
        Method::Ncp => {
            let index = model
                .index
                .as_ref()
                .ok_or_else(|| Error::invalid("model missing neighbor index"))?;
            let scores = model
                .scores
                .as_ref()
                .ok_or_else(|| Error::invalid("model missing calibration scores"))?;
            let alpha_tilde = model
                .alpha_tilde
                .ok_or_else(|| Error::invalid("model missing adjusted level"))?;
            let config = model
                .localizer_config
                .as_ref()
                .ok_or_else(|| Error::invalid("model missing localizer config"))?;
            if example.embedding.len() != index.dim() {
                return Err(Error::DimensionMismatch {
                    expected: index.dim(),
                    got: example.embedding.len(),
                });
            }
            let (weights, fell_back) =
                weights_for_anchor(index, example.embedding.as_slice(), Anchor::Test, config)?;
            let q = weighted_quantile(scores, &weights, alpha_tilde)?;
            (q.threshold, Some(weights.support_size()), fell_back)
        }
        Method::Naive => (Threshold::Infinite, None, false),
    };

    match model.task {
        Task::Classification => {
            // Inputs must already be probabilities; logits datasets go
            // through `prepared_dataset` (one softmax, applied once) first.
            let probs = example.probs()?;
            if let Some(c) = model.classes {
                if probs.len() != c {
                    return Err(Error::invalid(format!(
                        "expected {c} class probabilities, got {}",
                        probs.len()
                    )));
                }
            }
            let (set, forced) = match model.method {
                Method::Naive => (naive_set(probs, model.alpha), false),
                _ => {
                    let (scores_by_class, order) =
                        class_scores(probs, &model.score_config, rng)?;
                    let t = threshold;
                    let mut set: Vec<usize> = order
                        .iter()
                        .copied()
                        .filter(|&c| match t {
                            Threshold::Finite(v) => scores_by_class[c] <= v,
                            Threshold::Infinite => true,
                        })
                        .collect();
                    let mut forced = false;
                    if set.is_empty() && force_nonempty {
                        set.push(order[0]);
                        forced = true;
                    }
                    (set, forced)
                }
            };
            Ok(PredictionOutput {
                prediction: Prediction::Set(set),
                threshold,
                neighbors_used,
                ball_fallback,
                forced_nonempty: forced,
            })
        }
        Task::Regression => {
            let center = example.prediction()?;
            let (lower, upper) = match threshold {
                Threshold::Finite(t) => (center - t, center + t),
                Threshold::Infinite => (T::neg_infinity(), T::infinity()),
            };
            Ok(PredictionOutput {
                prediction: Prediction::Interval { lower, upper },
                threshold,
                neighbors_used,
                ball_fallback,
                forced_nonempty: false,
            })
        }
    }
}

/// Predicts a whole slice with per-example derived randomness: example `i`
/// in the slice uses the stream `(seed, TestScore, i)`, so batch order and
/// parallel scheduling cannot change results.
pub fn predict_all<T: Real>(
    model: &CalibratedModel<T>,
    examples: &[&LabeledExample<T>],
    seed: u64,
    force_nonempty: bool,
) -> Result<Vec<PredictionOutput<T>>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = seeding::rng(seed, Domain::TestScore, i as u64);
            predict(model, ex, &mut rng, force_nonempty)
        })
        .collect()
}

/// Convenience wrapper that temperature-scales a logits dataset before
/// selecting a slice. Probability datasets pass through.
pub fn prepared_dataset<T: Real>(dataset: &Dataset<T>, temperature: f64) -> Result<Dataset<T>> {
    if dataset.task() == Task::Classification && dataset.logits() {
        crate::scoring::apply_temperature(dataset, T::of(temperature))
    } else {
        Ok(dataset.clone())
    }
}

// --- model file -----------------------------------------------------------

/// Writes the model as a self-describing text file: `key,value` header
/// lines, then the calibration scores, then (for localized models) the
/// calibration embeddings, in the dataset text conventions.
pub fn write_model<T: Real>(model: &CalibratedModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("method,{}\n", model.method.as_str()));
    out.push_str(&format!("task,{}\n", model.task.as_str()));
    out.push_str(&format!("classes,{}\n", model.classes.unwrap_or(0)));
    out.push_str(&format!("alpha,{}\n", format_real(model.alpha)));
    out.push_str(&format!("score,{}\n", model.score_config.kind.as_str()));
    out.push_str(&format!("lambda_r,{}\n", format_real(model.score_config.lambda_r)));
    out.push_str(&format!("k_reg,{}\n", model.score_config.k_reg));
    out.push_str(&format!("penalty,{}\n", model.score_config.penalty.as_str()));
    out.push_str(&format!("tie_seed,{}\n", model.score_config.tie_seed));
    out.push_str(&format!("temperature,{}\n", format_real(model.temperature)));
    match model.cp_threshold {
        Some(Threshold::Finite(t)) => out.push_str(&format!("threshold,{}\n", format_real(t))),
        Some(Threshold::Infinite) => out.push_str("threshold,inf\n"),
        None => {}
    }
    if let Some(alpha_tilde) = model.alpha_tilde {
        out.push_str(&format!("alpha_tilde,{}\n", format_real(alpha_tilde)));
    }
    if let Some(config) = &model.localizer_config {
        out.push_str(&format!("localizer,{}\n", config.mode.as_str()));
        out.push_str(&format!("radius,{}\n", format_real(config.radius)));
        out.push_str(&format!("k_frac,{}\n", format_real(config.k_frac)));
        out.push_str(&format!("lambda_l,{}\n", format_real(config.lambda_l)));
        out.push_str(&format!("search,{}\n", config.search.as_str()));
        out.push_str(&format!("lsh_tables,{}\n", config.lsh.tables));
        out.push_str(&format!("lsh_projections,{}\n", config.lsh.projections));
        out.push_str(&format!("lsh_width,{}\n", format_real(config.lsh.bucket_width)));
        out.push_str(&format!("localizer_seed,{}\n", config.seed));
    }
    if let Some(split) = &model.split {
        out.push_str(&format!(
            "split,{},{},{},{},{}\n",
            split.seed, split.calibration, split.scaling, split.validation, split.test
        ));
    }
    out.push_str(&format!("ball_fallbacks,{}\n", model.ball_fallbacks));
    if let Some(scores) = &model.scores {
        out.push_str(&format!("scores,{}\n", scores.len()));
        for v in scores.values() {
            out.push_str(&format_real(*v));
            out.push('\n');
        }
    } else {
        out.push_str("scores,0\n");
    }
    if let Some(index) = &model.index {
        out.push_str(&format!("embeddings,{},{}\n", index.len(), index.dim()));
        for i in 0..index.len() {
            let row: Vec<String> = index.point(i).iter().map(|v| format_real(*v)).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
    } else {
        out.push_str("embeddings,0,0\n");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a model written by [`write_model`], rebuilding the neighbor index
/// deterministically from the stored embeddings and localizer seed.
pub fn read_model<T: Real>(path: impl AsRef<Path>) -> Result<CalibratedModel<T>> {
    let text = fs::read_to_string(&path)?;
    let mut lines = text.lines().enumerate().peekable();
    let mut header: std::collections::HashMap<String, String> = std::collections::HashMap::new();
    let mut split = None;
    while let Some(&(i, raw)) = lines.peek() {
        let line_no = i + 1;
        let Some((key, value)) = raw.split_once(',') else {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected `key,value`, found `{raw}`"),
            });
        };
        if key == "scores" {
            break;
        }
        lines.next();
        if key == "split" {
            let parts: Vec<&str> = value.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "split needs seed and four sizes".into(),
                });
            }
            split = Some(SplitSpec {
                seed: parts[0].parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: "bad split seed".into(),
                })?,
                calibration: parse_count(parts[1], line_no)?,
                scaling: parse_count(parts[2], line_no)?,
                validation: parse_count(parts[3], line_no)?,
                test: parse_count(parts[4], line_no)?,
            });
        } else {
            header.insert(key.to_string(), value.to_string());
        }
    }
    let get = |key: &str| -> Result<&str> {
        header
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::invalid(format!("model file missing `{key}`")))
    };
    let method = match get("method")? {
        "cp" => Method::Cp,
        "ncp" => Method::Ncp,
        "naive" => Method::Naive,
        other => return Err(Error::invalid(format!("unknown method `{other}`"))),
    };
    let task = match get("task")? {
        "classification" => Task::Classification,
        "regression" => Task::Regression,
        other => return Err(Error::invalid(format!("unknown task `{other}`"))),
    };
    let classes = match get("classes")?.parse::<usize>().unwrap_or(0) {
        0 => None,
        c => Some(c),
    };
    let alpha: f64 = get("alpha")?
        .parse()
        .map_err(|_| Error::invalid("bad alpha in model file"))?;
    let kind = match get("score")? {
        "aps" => ScoreKind::Aps,
        "raps" => ScoreKind::Raps,
        "absres" => ScoreKind::AbsResidual,
        other => return Err(Error::invalid(format!("unknown score `{other}`"))),
    };
    let score_config = ScoreConfig {
        kind,
        lambda_r: get("lambda_r")?
            .parse()
            .map_err(|_| Error::invalid("bad lambda_r"))?,
        k_reg: get("k_reg")?
            .parse()
            .map_err(|_| Error::invalid("bad k_reg"))?,
        penalty: match get("penalty")? {
            "abs" => RapsPenalty::Abs,
            "hinge" => RapsPenalty::Hinge,
            other => return Err(Error::invalid(format!("unknown penalty `{other}`"))),
        },
        tie_seed: get("tie_seed")?
            .parse()
            .map_err(|_| Error::invalid("bad tie_seed"))?,
    };
    let temperature: f64 = get("temperature")?
        .parse()
        .map_err(|_| Error::invalid("bad temperature"))?;
    let cp_threshold = match header.get("threshold").map(|s| s.as_str()) {
        None => None,
        Some("inf") => Some(Threshold::Infinite),
        Some(v) => Some(Threshold::Finite(T::of(v.parse::<f64>().map_err(|_| {
            Error::invalid("bad threshold")
        })?))),
    };
    let alpha_tilde = match header.get("alpha_tilde") {
        None => None,
        Some(v) => Some(
            v.parse::<f64>()
                .map_err(|_| Error::invalid("bad alpha_tilde"))?,
        ),
    };
    let localizer_config = if let Some(mode) = header.get("localizer") {
        let mode = match mode.as_str() {
            "ball" => LocalizerMode::Ball,
            "knn" => LocalizerMode::KnnExp,
            "all" => LocalizerMode::AllExp,
            other => return Err(Error::invalid(format!("unknown localizer `{other}`"))),
        };
        Some(LocalizerConfig {
            mode,
            radius: get("radius")?.parse().map_err(|_| Error::invalid("bad radius"))?,
            k_frac: get("k_frac")?.parse().map_err(|_| Error::invalid("bad k_frac"))?,
            lambda_l: get("lambda_l")?
                .parse()
                .map_err(|_| Error::invalid("bad lambda_l"))?,
            search: match get("search")? {
                "exact" => SearchBackend::Exact,
                "lsh" => SearchBackend::Lsh,
                other => return Err(Error::invalid(format!("unknown search `{other}`"))),
            },
            lsh: LshParams {
                tables: get("lsh_tables")?
                    .parse()
                    .map_err(|_| Error::invalid("bad lsh_tables"))?,
                projections: get("lsh_projections")?
                    .parse()
                    .map_err(|_| Error::invalid("bad lsh_projections"))?,
                bucket_width: get("lsh_width")?
                    .parse()
                    .map_err(|_| Error::invalid("bad lsh_width"))?,
            },
            seed: get("localizer_seed")?
                .parse()
                .map_err(|_| Error::invalid("bad localizer_seed"))?,
        })
    } else {
        None
    };
    let ball_fallbacks: usize = header
        .get("ball_fallbacks")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);

    // Scores section.
    let (score_line_no, score_header) = lines
        .next()
        .ok_or_else(|| Error::invalid("model file missing scores section"))?;
    let n_scores: usize = score_header
        .strip_prefix("scores,")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse {
            line: score_line_no + 1,
            msg: "expected `scores,<n>`".into(),
        })?;
    let mut score_values = Vec::with_capacity(n_scores);
    for _ in 0..n_scores {
        let (i, raw) = lines.next().ok_or_else(|| Error::invalid("truncated scores"))?;
        score_values.push(parse_model_real::<T>(raw, i + 1)?);
    }
    let scores = if n_scores > 0 {
        Some(ScoreVector::new(score_values)?)
    } else {
        None
    };

    // Embeddings section.
    let (emb_line_no, emb_header) = lines
        .next()
        .ok_or_else(|| Error::invalid("model file missing embeddings section"))?;
    let dims: Vec<usize> = emb_header
        .strip_prefix("embeddings,")
        .map(|s| {
            s.split(',')
                .map(|v| v.parse::<usize>().unwrap_or(usize::MAX))
                .collect()
        })
        .ok_or_else(|| Error::Parse {
            line: emb_line_no + 1,
            msg: "expected `embeddings,<n>,<d>`".into(),
        })?;
    if dims.len() != 2 || dims.contains(&usize::MAX) {
        return Err(Error::Parse {
            line: emb_line_no + 1,
            msg: "expected `embeddings,<n>,<d>`".into(),
        });
    }
    let (n_emb, d_emb) = (dims[0], dims[1]);
    let mut rows: Vec<Vec<T>> = Vec::with_capacity(n_emb);
    for _ in 0..n_emb {
        let (i, raw) = lines
            .next()
            .ok_or_else(|| Error::invalid("truncated embeddings"))?;
        let row = raw
            .split(',')
            .map(|f| parse_model_real::<T>(f, i + 1))
            .collect::<Result<Vec<T>>>()?;
        if row.len() != d_emb {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {d_emb} embedding entries, found {}", row.len()),
            });
        }
        rows.push(row);
    }
    let index = if n_emb > 0 {
        let config = localizer_config
            .clone()
            .ok_or_else(|| Error::invalid("embeddings present but localizer config missing"))?;
        let refs: Vec<&[T]> = rows.iter().map(|r| r.as_slice()).collect();
        Some(build_index(&refs, &config)?)
    } else {
        None
    };

    Ok(CalibratedModel {
        method,
        task,
        classes,
        alpha,
        score_config,
        localizer_config,
        temperature,
        scores,
        cp_threshold,
        alpha_tilde,
        index,
        ball_fallbacks,
        split,
    })
}

fn parse_count(field: &str, line: usize) -> Result<usize> {
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("expected a count, found `{field}`"),
    })
}

fn parse_model_real<T: Real>(field: &str, line: usize) -> Result<T> {
    field
        .trim()
        .parse::<f64>()
        .map(T::of)
        .map_err(|_| Error::Parse {
            line,
            msg: format!("expected a real number, found `{field}`"),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{synth_gaussian_mixture, SynthConfig};
    use crate::types::Output;

    fn regression_examples(residuals: &[f64]) -> Vec<LabeledExample<f64>> {
        residuals
            .iter()
            .enumerate()
            .map(|(i, r)| LabeledExample {
                embedding: vec![i as f64],
                output: Output::Prediction(0.0),
                label: Label::Target(*r),
            })
            .collect()
    }

    fn absres_config() -> ScoreConfig {
        ScoreConfig::new(ScoreKind::AbsResidual, 9)
    }

    #[test]
    fn calibrate_cp_single_example() {
        let examples = regression_examples(&[2.5]);
        let refs: Vec<_> = examples.iter().collect();
        let model = calibrate_cp(&refs, absres_config(), None, 0.5, 1.0).unwrap();
        assert_eq!(model.cp_threshold, Some(Threshold::Finite(2.5)));
    }

    #[test]
    fn calibrate_cp_residual_ladder() {
        let examples = regression_examples(&[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let refs: Vec<_> = examples.iter().collect();
        let model = calibrate_cp(&refs, absres_config(), None, 0.1, 1.0).unwrap();
        assert_eq!(model.cp_threshold, Some(Threshold::Finite(9.0)));
    }

    #[test]
    fn calibrate_cp_infinite_sentinel_predicts_everything() {
        let examples = regression_examples(&[1., 2., 3.]);
        let refs: Vec<_> = examples.iter().collect();
        let model = calibrate_cp(&refs, absres_config(), None, 0.01, 1.0).unwrap();
        assert_eq!(model.cp_threshold, Some(Threshold::Infinite));
        let test = &examples[0];
        let mut rng = seeding::rng(1, Domain::Test, 0);
        let out = predict(&model, test, &mut rng, false).unwrap();
        match out.prediction {
            Prediction::Interval { lower, upper } => {
                assert!(lower.is_infinite() && upper.is_infinite());
            }
            _ => panic!("expected interval"),
        }
        assert!(out.size().is_infinite());
    }

    #[test]
    fn predict_regression_interval() {
        let examples = regression_examples(&[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let refs: Vec<_> = examples.iter().collect();
        let mut model = calibrate_cp(&refs, absres_config(), None, 0.1, 1.0).unwrap();
        model.cp_threshold = Some(Threshold::Finite(2.0));
        let test = LabeledExample {
            embedding: vec![0.0],
            output: Output::Prediction(3.0),
            label: Label::Target(3.5),
        };
        let mut rng = seeding::rng(1, Domain::Test, 0);
        let out = predict(&model, &test, &mut rng, false).unwrap();
        assert_eq!(
            out.prediction,
            Prediction::Interval {
                lower: 1.0,
                upper: 5.0
            }
        );
        assert!(out.covers(&Label::Target(5.0)).unwrap());
        assert!(!out.covers(&Label::Target(5.1)).unwrap());
    }

    fn small_classification() -> Dataset<f64> {
        synth_gaussian_mixture(&SynthConfig {
            classes: 3,
            dim: 4,
            per_class: 40,
            separation: 6.0,
            noise_temp: 16.0,
            seed: 100,
            logits: false,
        })
        .unwrap()
    }

    #[test]
    fn aps_sets_are_rank_prefixes() {
        let dataset = small_classification();
        let refs: Vec<_> = dataset.examples().iter().collect();
        let (cal, test) = refs.split_at(90);
        let model = calibrate_cp(
            &cal.to_vec(),
            ScoreConfig::new(ScoreKind::Aps, 4),
            dataset.classes(),
            0.2,
            1.0,
        )
        .unwrap();
        for (i, ex) in test.iter().enumerate() {
            let mut rng = seeding::rng(8, Domain::TestScore, i as u64);
            let out = predict(&model, ex, &mut rng, false).unwrap();
            let set = match out.prediction {
                Prediction::Set(s) => s,
                _ => panic!("expected set"),
            };
            // Rank-prefix: the set must equal the first `len` entries of the
            // rank order under the same draws.
            let mut rng2 = seeding::rng(8, Domain::TestScore, i as u64);
            let probs = ex.probs().unwrap();
            let (_, order) =
                class_scores(probs, &model.score_config, &mut rng2).unwrap();
            assert_eq!(set.as_slice(), &order[..set.len()]);
        }
    }

    #[test]
    fn increasing_alpha_never_grows_the_set() {
        let dataset = small_classification();
        let refs: Vec<_> = dataset.examples().iter().collect();
        let (cal, test) = refs.split_at(90);
        let mut last_sizes: Option<Vec<usize>> = None;
        for alpha in [0.05, 0.1, 0.2, 0.4] {
            let model = calibrate_cp(
                &cal.to_vec(),
                ScoreConfig::new(ScoreKind::Aps, 4),
                dataset.classes(),
                alpha,
                1.0,
            )
            .unwrap();
            let sizes: Vec<usize> = test
                .iter()
                .enumerate()
                .map(|(i, ex)| {
                    let mut rng = seeding::rng(8, Domain::TestScore, i as u64);
                    match predict(&model, ex, &mut rng, false).unwrap().prediction {
                        Prediction::Set(s) => s.len(),
                        _ => unreachable!(),
                    }
                })
                .collect();
            if let Some(prev) = &last_sizes {
                for (a, b) in prev.iter().zip(&sizes) {
                    assert!(b <= a, "set grew when alpha increased");
                }
            }
            last_sizes = Some(sizes);
        }
    }

    #[test]
    fn force_nonempty_inserts_argmax() {
        let dataset = small_classification();
        let refs: Vec<_> = dataset.examples().iter().collect();
        let (cal, test) = refs.split_at(90);
        let mut model = calibrate_cp(
            &cal.to_vec(),
            ScoreConfig::new(ScoreKind::Aps, 4),
            dataset.classes(),
            0.2,
            1.0,
        )
        .unwrap();
        // Force a threshold below any achievable score.
        model.cp_threshold = Some(Threshold::Finite(-1.0));
        let mut rng = seeding::rng(8, Domain::TestScore, 0);
        let out = predict(&model, test[0], &mut rng, true).unwrap();
        match out.prediction {
            Prediction::Set(s) => assert_eq!(s.len(), 1),
            _ => unreachable!(),
        }
        assert!(out.forced_nonempty);
        let mut rng = seeding::rng(8, Domain::TestScore, 0);
        let out = predict(&model, test[0], &mut rng, false).unwrap();
        match out.prediction {
            Prediction::Set(s) => assert!(s.is_empty()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn ncp_identity_like_localizer_lifts_quantile_example() {
        // k = 1: every anchor's weight is a point mass on itself.
        let dataset = small_classification();
        let refs: Vec<_> = dataset.examples().iter().collect();
        let cal = &refs[..60];
        let config = LocalizerConfig::knn(1e-9, 1.0); // k = ceil(eps * n) = 1
        let model = calibrate_ncp(
            &cal.to_vec(),
            ScoreConfig::new(ScoreKind::Aps, 4),
            config,
            dataset.classes(),
            0.1,
            1.0,
            false,
        )
        .unwrap();
        let n = cal.len() as f64;
        assert_eq!(model.alpha_tilde, Some((n - 1.0) / n));
    }

    #[test]
    fn ncp_flat_all_localizer_reproduces_cp_threshold() {
        let dataset = small_classification();
        let refs: Vec<_> = dataset.examples().iter().collect();
        let (cal, test) = refs.split_at(90);
        let score_config = ScoreConfig::new(ScoreKind::Aps, 4);
        let cp = calibrate_cp(&cal.to_vec(), score_config.clone(), dataset.classes(), 0.1, 1.0)
            .unwrap();
        let ncp = calibrate_ncp(
            &cal.to_vec(),
            score_config,
            LocalizerConfig::all(1e12),
            dataset.classes(),
            0.1,
            1.0,
            false,
        )
        .unwrap();
        let cp_t = match cp.cp_threshold.unwrap() {
            Threshold::Finite(t) => t,
            Threshold::Infinite => panic!("finite expected"),
        };
        let scores = ncp.scores.as_ref().unwrap();
        let mut sorted: Vec<f64> = scores.values().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (i, ex) in test.iter().take(10).enumerate() {
            let mut rng = seeding::rng(8, Domain::TestScore, i as u64);
            let out = predict(&ncp, ex, &mut rng, false).unwrap();
            let t = out.threshold.value();
            // Flat weights make every localized quantile a uniform quantile;
            // the adjusted level can sit one grid step off the CP rank.
            let pos_cp = sorted.iter().position(|&v| v == cp_t).unwrap();
            let pos_t = sorted.iter().position(|&v| v == t).unwrap();
            assert!(
                pos_cp.abs_diff(pos_t) <= 1,
                "cp rank {pos_cp}, ncp rank {pos_t}"
            );
        }
    }

    #[test]
    fn ncp_rejects_dimension_mismatch_at_predict() {
        let dataset = small_classification();
        let refs: Vec<_> = dataset.examples().iter().collect();
        let model = calibrate_ncp(
            &refs[..60].to_vec(),
            ScoreConfig::new(ScoreKind::Aps, 4),
            LocalizerConfig::knn(0.2, 1.0),
            dataset.classes(),
            0.1,
            1.0,
            false,
        )
        .unwrap();
        let bad = LabeledExample {
            embedding: vec![0.0; 3],
            output: Output::Probs(vec![0.4, 0.3, 0.3]),
            label: Label::Class(0),
        };
        assert!(matches!(
            predict(&model, &bad, &mut seeding::rng(0, Domain::Test, 0), false),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn model_file_round_trips_and_is_deterministic() {
        let dataset = small_classification();
        let refs: Vec<_> = dataset.examples().iter().collect();
        let (cal, test) = refs.split_at(90);
        let model = calibrate_ncp(
            &cal.to_vec(),
            ScoreConfig::new(ScoreKind::Aps, 4),
            LocalizerConfig::knn(0.2, 5.0),
            dataset.classes(),
            0.1,
            1.0,
            false,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("model1.txt");
        let p2 = dir.path().join("model2.txt");
        write_model(&model, &p1).unwrap();
        write_model(&model, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let back: CalibratedModel<f64> = read_model(&p1).unwrap();
        assert_eq!(back.alpha_tilde, model.alpha_tilde);
        assert_eq!(back.scores.as_ref().unwrap(), model.scores.as_ref().unwrap());
        // Predictions agree bit-for-bit after the round trip.
        let a = predict_all(&model, &test.to_vec(), 5, false).unwrap();
        let b = predict_all(&back, &test.to_vec(), 5, false).unwrap();
        assert_eq!(a, b);
        // And the re-serialized file is byte-identical.
        let p3 = dir.path().join("model3.txt");
        write_model(&back, &p3).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p3).unwrap());
    }

    #[test]
    fn naive_model_predicts_cumulative_sets() {
        let model: CalibratedModel<f64> = calibrate_naive(
            ScoreConfig::new(ScoreKind::Aps, 0),
            Some(3),
            0.1,
            1.0,
        )
        .unwrap();
        let ex = LabeledExample {
            embedding: vec![0.0],
            output: Output::Probs(vec![0.5, 0.3, 0.2]),
            label: Label::Class(0),
        };
        let mut rng = seeding::rng(0, Domain::Test, 0);
        let out = predict(&model, &ex, &mut rng, false).unwrap();
        assert_eq!(out.prediction, Prediction::Set(vec![0, 1, 2]));
    }
}
