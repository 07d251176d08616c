//! Dataset files, seeded splits, and the synthetic Gaussian-mixture
//! generator used for desk-scale experiments.
//!
//! The file format is line-oriented text with comma separators: a one-line
//! header `task,C,d` followed by one record per example. Records hold the
//! label first, then the model output (`C` probabilities or logits for
//! classification, one prediction for regression), then `d` embedding
//! entries. Reals are rendered with 17 significant digits so files
//! round-trip bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::num::Real;
use crate::seeding::{self, Domain};
use crate::types::{softmax, Dataset, Label, LabeledExample, Output, SplitSpec, Splits, Task};

/// Renders a scalar with 17 significant digits (bit-exact round trip).
pub fn format_real<T: Real>(x: T) -> String {
    format!("{:.16e}", x.as_f64())
}

fn parse_real<T: Real>(field: &str, line: usize) -> Result<T> {
    field
        .trim()
        .parse::<f64>()
        .map(T::of)
        .map_err(|_| Error::Parse {
            line,
            msg: format!("expected a real number, found `{field}`"),
        })
}

fn parse_usize(field: &str, line: usize, what: &str) -> Result<usize> {
    field.trim().parse::<usize>().map_err(|_| Error::Parse {
        line,
        msg: format!("expected {what}, found `{field}`"),
    })
}

/// Writes a dataset; see the module docs for the format.
pub fn write_dataset<T: Real>(dataset: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    let task_field = match (dataset.task(), dataset.logits()) {
        (Task::Classification, false) => "classification",
        (Task::Classification, true) => "classification_logits",
        (Task::Regression, _) => "regression",
    };
    let c = dataset.classes().unwrap_or(0);
    out.push_str(&format!("{task_field},{c},{}\n", dataset.dim()));
    for ex in dataset.examples() {
        let mut fields: Vec<String> = Vec::with_capacity(1 + c.max(1) + dataset.dim());
        match &ex.label {
            Label::Class(y) => fields.push(y.to_string()),
            Label::Target(y) => fields.push(format_real(*y)),
        }
        match &ex.output {
            Output::Probs(p) => fields.extend(p.iter().map(|v| format_real(*v))),
            Output::Prediction(y) => fields.push(format_real(*y)),
        }
        fields.extend(ex.embedding.iter().map(|v| format_real(*v)));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads a dataset, naming the offending line on malformed input.
pub fn read_dataset<T: Real>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let text = fs::read_to_string(&path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::invalid("empty dataset"))?;
    let parts: Vec<&str> = header.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must be `task,C,d`, found `{header}`"),
        });
    }
    let (task, logits) = match parts[0].trim() {
        "classification" => (Task::Classification, false),
        "classification_logits" => (Task::Classification, true),
        "regression" => (Task::Regression, false),
        other => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unknown task `{other}`"),
            })
        }
    };
    let c = parse_usize(parts[1], 1, "class count C")?;
    let dim = parse_usize(parts[2], 1, "embedding dimension d")?;
    if task == Task::Classification && c == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "classification header requires C >= 1".into(),
        });
    }
    let expected_fields = match task {
        Task::Classification => 1 + c + dim,
        Task::Regression => 1 + 1 + dim,
    };
    let mut examples = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != expected_fields {
            return Err(Error::Parse {
                line: line_no,
                msg: format!(
                    "expected {expected_fields} fields, found {}",
                    fields.len()
                ),
            });
        }
        let (label, output, rest) = match task {
            Task::Classification => {
                let y = parse_usize(fields[0], line_no, "class label")?;
                if y >= c {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("label {y} out of range for C={c}"),
                    });
                }
                let probs = fields[1..1 + c]
                    .iter()
                    .map(|f| parse_real::<T>(f, line_no))
                    .collect::<Result<Vec<T>>>()?;
                if !logits {
                    if probs.iter().any(|v| *v < T::zero()) {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: "negative probability".into(),
                        });
                    }
                    let total = crate::num::sum(probs.iter().copied()).as_f64();
                    if (total - 1.0).abs() > crate::types::SIMPLEX_TOL {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: format!("probabilities sum to {total}, not 1"),
                        });
                    }
                }
                (Label::Class(y), Output::Probs(probs), &fields[1 + c..])
            }
            Task::Regression => {
                let y = parse_real::<T>(fields[0], line_no)?;
                let pred = parse_real::<T>(fields[1], line_no)?;
                (Label::Target(y), Output::Prediction(pred), &fields[2..])
            }
        };
        let embedding = rest
            .iter()
            .map(|f| parse_real::<T>(f, line_no))
            .collect::<Result<Vec<T>>>()?;
        examples.push(LabeledExample {
            embedding,
            output,
            label,
        });
    }
    if examples.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    Dataset::new(
        task,
        logits,
        (task == Task::Classification).then_some(c),
        examples,
    )
}

/// Disjoint seeded partition in the order calibration, scaling, validation,
/// test. Identical seeds produce identical partitions.
pub fn split<T: Real>(dataset: &Dataset<T>, spec: &SplitSpec) -> Result<Splits> {
    let n = dataset.len();
    if spec.total() > n {
        return Err(Error::InvalidSplit(format!(
            "requested {} examples from a dataset of {n}",
            spec.total()
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = seeding::rng(spec.seed, Domain::Split, 0);
    indices.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut take = |count: usize| -> Vec<usize> {
        let part = indices[cursor..cursor + count].to_vec();
        cursor += count;
        part
    };
    Ok(Splits {
        calibration: take(spec.calibration),
        scaling: take(spec.scaling),
        validation: take(spec.validation),
        test: take(spec.test),
    })
}

/// Configuration for the synthetic Gaussian-mixture generator.
///
/// Embeddings are drawn from `classes` isotropic unit-variance Gaussians
/// whose centroids sit at pairwise distance `separation` (exact simplex
/// placement when `dim >= classes`, random directions otherwise). Class
/// probabilities are the softmax of negative squared centroid distances
/// scaled by `noise_temp`, so concentration of low scores near cluster
/// cores is directly tunable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Inter-centroid distance in units of the within-cluster standard
    /// deviation; zero collapses all centroids.
    pub separation: f64,
    /// Sharpness of the synthetic classifier; larger is softer.
    pub noise_temp: f64,
    pub seed: u64,
    /// Emit raw logits instead of probabilities (exercises the temperature
    /// scaling path).
    pub logits: bool,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.dim == 0 || self.per_class == 0 {
            return Err(Error::invalid("dim and per_class must be positive"));
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(Error::invalid("separation must be finite and >= 0"));
        }
        if !self.noise_temp.is_finite() || self.noise_temp <= 0.0 {
            return Err(Error::invalid("noise_temp must be positive and finite"));
        }
        Ok(())
    }
}

/// Generates a synthetic classification dataset; deterministic per seed.
pub fn synth_gaussian_mixture<T: Real>(config: &SynthConfig) -> Result<Dataset<T>> {
    config.validate()?;
    let c = config.classes;
    let d = config.dim;
    let mut rng = seeding::rng(config.seed, Domain::Synth, 0);

    let centroids: Vec<Vec<f64>> = if d >= c {
        // Scaled standard-basis simplex: pairwise distance is exactly
        // `separation`.
        let scale = config.separation / 2.0f64.sqrt();
        (0..c)
            .map(|i| {
                let mut v = vec![0.0; d];
                v[i] = scale;
                v
            })
            .collect()
    } else {
        // Random placement with the right mean-square pairwise distance.
        let scale = config.separation / (2.0 * d as f64).sqrt();
        (0..c)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        g * scale
                    })
                    .collect()
            })
            .collect()
    };

    let mut examples = Vec::with_capacity(c * config.per_class);
    for class in 0..c {
        for _ in 0..config.per_class {
            let embedding: Vec<f64> = centroids[class]
                .iter()
                .map(|&mu| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    mu + g
                })
                .collect();
            let logits: Vec<f64> = centroids
                .iter()
                .map(|mu| {
                    let d2: f64 = mu
                        .iter()
                        .zip(&embedding)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    -d2 / config.noise_temp
                })
                .collect();
            let output = if config.logits {
                logits
            } else {
                softmax(&logits, 1.0)?
            };
            examples.push(LabeledExample {
                embedding: embedding.into_iter().map(T::of).collect(),
                output: Output::Probs(output.into_iter().map(T::of).collect()),
                label: Label::Class(class),
            });
        }
    }
    Dataset::new(Task::Classification, config.logits, Some(c), examples)
}

/// Writes rows under the `metric,mean,std,trials` header.
pub fn write_metrics_csv(
    path: impl AsRef<Path>,
    rows: &[(String, f64, f64, usize)],
) -> Result<()> {
    let mut out = String::from("metric,mean,std,trials\n");
    for (metric, mean, std, trials) in rows {
        out.push_str(&format!("{metric},{mean:.6},{std:.6},{trials}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}
