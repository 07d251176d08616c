//! Metrics, the multi-trial experiment runner, and hyperparameter grid
//! tuning.
//!
//! A trial reshuffles the dataset with a derived seed, fits the temperature
//! when the data carries logits, calibrates each requested method, and
//! evaluates on the held-out test slice. Trials run in parallel; results
//! are collected by trial index before aggregation so scheduling cannot
//! change a report.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::engine::{
    calibrate_cp, calibrate_naive, calibrate_ncp, predict_all, CalibratedModel, Method,
    PredictionOutput,
};
use crate::error::{Error, Result};
use crate::ingest::split;
use crate::localizer::LocalizerConfig;
use crate::num::Real;
use crate::scoring::{fit_temperature, ground_truth_ranks, select_k_reg, ScoreConfig, ScoreKind};
use crate::types::{Dataset, Label, LabeledExample, SplitSpec, Task};

/// A named method under evaluation, using the conventional labels:
/// `naive`, `aps`, `raps` (split CP on classification scores), `cp`
/// (split CP on absolute residuals), and the localized variants `ncp-aps`,
/// `ncp-raps`, `ncp`, plus `-all` suffixed ablations that weight every
/// calibration point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodSpec {
    pub method: Method,
    pub score: ScoreKind,
    /// Use the all-neighbors localizer ablation.
    pub all_neighbors: bool,
}

impl MethodSpec {
    pub fn name(&self) -> String {
        match (self.method, self.score, self.all_neighbors) {
            (Method::Naive, _, _) => "naive".into(),
            (Method::Cp, ScoreKind::Aps, _) => "aps".into(),
            (Method::Cp, ScoreKind::Raps, _) => "raps".into(),
            (Method::Cp, ScoreKind::AbsResidual, _) => "cp".into(),
            (Method::Ncp, ScoreKind::Aps, false) => "ncp-aps".into(),
            (Method::Ncp, ScoreKind::Raps, false) => "ncp-raps".into(),
            (Method::Ncp, ScoreKind::AbsResidual, false) => "ncp".into(),
            (Method::Ncp, ScoreKind::Aps, true) => "ncp-all-aps".into(),
            (Method::Ncp, ScoreKind::Raps, true) => "ncp-all-raps".into(),
            (Method::Ncp, ScoreKind::AbsResidual, true) => "ncp-all".into(),
        }
    }

    pub fn task(&self) -> Task {
        self.score.task()
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let spec = match s {
            "naive" => MethodSpec {
                method: Method::Naive,
                score: ScoreKind::Aps,
                all_neighbors: false,
            },
            "aps" => MethodSpec {
                method: Method::Cp,
                score: ScoreKind::Aps,
                all_neighbors: false,
            },
            "raps" => MethodSpec {
                method: Method::Cp,
                score: ScoreKind::Raps,
                all_neighbors: false,
            },
            "cp" => MethodSpec {
                method: Method::Cp,
                score: ScoreKind::AbsResidual,
                all_neighbors: false,
            },
            "ncp-aps" => MethodSpec {
                method: Method::Ncp,
                score: ScoreKind::Aps,
                all_neighbors: false,
            },
            "ncp-raps" => MethodSpec {
                method: Method::Ncp,
                score: ScoreKind::Raps,
                all_neighbors: false,
            },
            "ncp" => MethodSpec {
                method: Method::Ncp,
                score: ScoreKind::AbsResidual,
                all_neighbors: false,
            },
            "ncp-all-aps" => MethodSpec {
                method: Method::Ncp,
                score: ScoreKind::Aps,
                all_neighbors: true,
            },
            "ncp-all-raps" => MethodSpec {
                method: Method::Ncp,
                score: ScoreKind::Raps,
                all_neighbors: true,
            },
            "ncp-all" => MethodSpec {
                method: Method::Ncp,
                score: ScoreKind::AbsResidual,
                all_neighbors: true,
            },
            other => {
                return Err(Error::invalid(format!(
                    "unknown method `{other}` (expected naive, aps, raps, cp, ncp-aps, \
                     ncp-raps, ncp, ncp-all-aps, ncp-all-raps, or ncp-all)"
                )))
            }
        };
        Ok(spec)
    }
}

/// One method plus (optionally) its own tuned hyperparameters; methods
/// without overrides use the runner defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodRun {
    pub spec: MethodSpec,
    pub params: Option<TunedParams>,
}

impl MethodRun {
    pub fn new(spec: MethodSpec) -> Self {
        MethodRun { spec, params: None }
    }

    pub fn tuned(spec: MethodSpec, params: TunedParams) -> Self {
        MethodRun {
            spec,
            params: Some(params),
        }
    }
}

/// Fraction of test examples whose set or interval contains the truth.
pub fn coverage<T: Real>(outputs: &[PredictionOutput<T>], labels: &[Label<T>]) -> Result<f64> {
    if outputs.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} outputs vs {} labels",
            outputs.len(),
            labels.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::invalid("empty output list"));
    }
    let mut covered = 0usize;
    for (out, label) in outputs.iter().zip(labels) {
        if out.covers(label)? {
            covered += 1;
        }
    }
    Ok(covered as f64 / outputs.len() as f64)
}

/// Mean set cardinality or mean interval length. An infinite-width interval
/// makes the mean infinite and sets the flag.
pub fn efficiency<T: Real>(outputs: &[PredictionOutput<T>]) -> Result<(f64, bool)> {
    if outputs.is_empty() {
        return Err(Error::invalid("empty output list"));
    }
    let mut total = 0.0;
    let mut infinite = false;
    for out in outputs {
        let s = out.size();
        if s.is_infinite() {
            infinite = true;
        }
        total += s;
    }
    let mean = if infinite {
        f64::INFINITY
    } else {
        total / outputs.len() as f64
    };
    Ok((mean, infinite))
}

/// Hyperparameters resolved by tuning (or supplied directly).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TunedParams {
    pub lambda_l: f64,
    pub k_frac: f64,
    pub lambda_r: f64,
    pub k_reg: usize,
}

/// One method's metrics on one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub method: String,
    pub seed: u64,
    pub coverage: f64,
    pub efficiency: f64,
    pub infinite: bool,
    /// Mean fraction of calibration examples carrying nonzero weight.
    pub neighbor_frac_used: f64,
}

/// Aggregated mean/std rows per method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    pub efficiency_mean: f64,
    pub efficiency_std: f64,
    /// Trials excluded from the efficiency mean due to infinite intervals.
    pub efficiency_excluded: usize,
    pub neighbor_frac_mean: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<MethodSummary>,
    pub per_trial: Vec<TrialReport>,
    pub trials: usize,
    /// Key=value snapshot of the configuration that produced the report.
    pub config_snapshot: String,
}

/// Everything `run_trials` needs besides the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub alpha: f64,
    pub trials: usize,
    pub base_seed: u64,
    /// Partition sizes; the seed field is replaced per trial.
    pub split: SplitSpec,
    pub params: TunedParams,
    pub penalty: crate::scoring::RapsPenalty,
    pub force_nonempty: bool,
    pub leave_one_out: bool,
    /// Select k_reg from validation ground-truth ranks instead of
    /// `params.k_reg` (classification RAPS only).
    pub auto_k_reg: bool,
}

impl EvalConfig {
    pub fn new(alpha: f64, trials: usize, base_seed: u64, split: SplitSpec) -> Self {
        EvalConfig {
            alpha,
            trials,
            base_seed,
            split,
            params: TunedParams {
                lambda_l: 100.0,
                k_frac: 0.1,
                lambda_r: 0.01,
                k_reg: 1,
            },
            penalty: crate::scoring::RapsPenalty::Abs,
            force_nonempty: false,
            leave_one_out: false,
            auto_k_reg: true,
        }
    }
}

fn score_config_for(spec: &MethodSpec, params: &TunedParams, cfg: &EvalConfig, seed: u64) -> ScoreConfig {
    ScoreConfig {
        kind: spec.score,
        lambda_r: params.lambda_r,
        k_reg: params.k_reg,
        penalty: cfg.penalty,
        tie_seed: seed,
    }
}

fn localizer_for(spec: &MethodSpec, params: &TunedParams, seed: u64) -> LocalizerConfig {
    let mut config = if spec.all_neighbors {
        LocalizerConfig::all(params.lambda_l)
    } else {
        LocalizerConfig::knn(params.k_frac, params.lambda_l)
    };
    config.seed = seed;
    config
}

/// Calibrates one method on prepared (probability-space) slices.
#[allow(clippy::too_many_arguments)]
fn calibrate_method<T: Real>(
    spec: &MethodSpec,
    cal: &[&LabeledExample<T>],
    val: &[&LabeledExample<T>],
    classes: Option<usize>,
    cfg: &EvalConfig,
    params: &TunedParams,
    temperature: f64,
    seed: u64,
) -> Result<CalibratedModel<T>> {
    let mut params = *params;
    if cfg.auto_k_reg && spec.score == ScoreKind::Raps && !val.is_empty() {
        let ranks = ground_truth_ranks(val, seed ^ 0x6b72)?;
        params.k_reg = select_k_reg(&ranks, cfg.alpha)?;
        if let Some(c) = classes {
            params.k_reg = params.k_reg.min(c);
        }
    }
    let score_config = score_config_for(spec, &params, cfg, seed);
    match spec.method {
        Method::Naive => calibrate_naive(score_config, classes, cfg.alpha, temperature),
        Method::Cp => calibrate_cp(cal, score_config, classes, cfg.alpha, temperature),
        Method::Ncp => calibrate_ncp(
            cal,
            score_config,
            localizer_for(spec, &params, seed),
            classes,
            cfg.alpha,
            temperature,
            cfg.leave_one_out,
        ),
    }
}

fn evaluate_outputs<T: Real>(
    method: String,
    seed: u64,
    outputs: &[PredictionOutput<T>],
    labels: &[Label<T>],
    n_cal: usize,
) -> Result<TrialReport> {
    let cov = coverage(outputs, labels)?;
    let (eff, infinite) = efficiency(outputs)?;
    let neighbor_frac = if n_cal == 0 {
        0.0
    } else {
        let used: f64 = outputs
            .iter()
            .map(|o| o.neighbors_used.unwrap_or(n_cal) as f64)
            .sum();
        used / (outputs.len() as f64 * n_cal as f64)
    };
    Ok(TrialReport {
        method,
        seed,
        coverage: cov,
        efficiency: eff,
        infinite,
        neighbor_frac_used: neighbor_frac,
    })
}

fn run_single_trial<T: Real>(
    dataset: &Dataset<T>,
    methods: &[MethodRun],
    cfg: &EvalConfig,
    trial: usize,
) -> Result<Vec<TrialReport>> {
    let seed = cfg.base_seed.wrapping_add(trial as u64);
    let spec = SplitSpec {
        seed,
        ..cfg.split
    };
    let splits = split(dataset, &spec)?;
    if splits.calibration.is_empty() || splits.test.is_empty() {
        return Err(Error::InvalidSplit(
            "trials need non-empty calibration and test partitions".into(),
        ));
    }
    let (prepared, temperature) = if dataset.logits() {
        if splits.scaling.is_empty() {
            return Err(Error::InvalidSplit(
                "logits dataset needs a non-empty scaling partition".into(),
            ));
        }
        let scaling = dataset.select(&splits.scaling);
        let fit = fit_temperature(&scaling)?;
        (
            crate::scoring::apply_temperature(dataset, fit.temperature)?,
            fit.temperature.as_f64(),
        )
    } else {
        (dataset.clone(), 1.0)
    };
    let cal = prepared.select(&splits.calibration);
    let val = prepared.select(&splits.validation);
    let test = prepared.select(&splits.test);
    let labels: Vec<Label<T>> = test.iter().map(|e| e.label.clone()).collect();
    let mut reports = Vec::with_capacity(methods.len());
    for run in methods {
        let m = &run.spec;
        if m.task() != dataset.task() {
            return Err(Error::TaskMismatch(format!(
                "method {} does not fit a {} dataset",
                m.name(),
                dataset.task().as_str()
            )));
        }
        let params = run.params.unwrap_or(cfg.params);
        let model = calibrate_method(
            m,
            &cal,
            &val,
            prepared.classes(),
            cfg,
            &params,
            temperature,
            seed,
        )?;
        let outputs = predict_all(&model, &test, seed, cfg.force_nonempty)?;
        reports.push(evaluate_outputs(
            m.name(),
            seed,
            &outputs,
            &labels,
            cal.len(),
        )?);
    }
    Ok(reports)
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    var.sqrt()
}

/// Runs `cfg.trials` reshuffled trials of each method with the runner's
/// default hyperparameters. See [`run_trial_set`] for per-method overrides.
pub fn run_trials<T: Real>(
    dataset: &Dataset<T>,
    methods: &[MethodSpec],
    cfg: &EvalConfig,
) -> Result<ExperimentReport> {
    let runs: Vec<MethodRun> = methods.iter().map(|m| MethodRun::new(*m)).collect();
    run_trial_set(dataset, &runs, cfg)
}

/// Runs `cfg.trials` reshuffled trials of each method and aggregates
/// mean and sample standard deviation per method.
///
/// A failed trial aborts the run with its seed identified. Infinite-interval
/// trials count toward coverage but are excluded from the efficiency mean,
/// with the exclusion count reported.
pub fn run_trial_set<T: Real>(
    dataset: &Dataset<T>,
    methods: &[MethodRun],
    cfg: &EvalConfig,
) -> Result<ExperimentReport> {
    if cfg.trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    if methods.is_empty() {
        return Err(Error::invalid("no methods requested"));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::invalid("alpha must lie in (0, 1)"));
    }
    let trial_results: Vec<Result<Vec<TrialReport>>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            run_single_trial(dataset, methods, cfg, trial).map_err(|e| {
                Error::InvalidInput(format!(
                    "trial with seed {} failed: {e}",
                    cfg.base_seed.wrapping_add(trial as u64)
                ))
            })
        })
        .collect();
    let mut per_trial = Vec::with_capacity(cfg.trials * methods.len());
    for result in trial_results {
        per_trial.extend(result?);
    }

    let mut rows = Vec::with_capacity(methods.len());
    for (j, run) in methods.iter().enumerate() {
        let name = run.spec.name();
        // Reports are trial-major; pick this method's position in each trial
        // so duplicate names aggregate separately.
        let mine: Vec<&TrialReport> = (0..cfg.trials)
            .map(|t| &per_trial[t * methods.len() + j])
            .collect();
        let coverages: Vec<f64> = mine.iter().map(|r| r.coverage).collect();
        let finite_effs: Vec<f64> = mine
            .iter()
            .filter(|r| !r.infinite)
            .map(|r| r.efficiency)
            .collect();
        let cov_mean = coverages.iter().sum::<f64>() / coverages.len() as f64;
        let eff_mean = if finite_effs.is_empty() {
            f64::INFINITY
        } else {
            finite_effs.iter().sum::<f64>() / finite_effs.len() as f64
        };
        let neighbor_mean =
            mine.iter().map(|r| r.neighbor_frac_used).sum::<f64>() / mine.len() as f64;
        rows.push(MethodSummary {
            method: name,
            coverage_mean: cov_mean,
            coverage_std: sample_std(&coverages, cov_mean),
            efficiency_mean: eff_mean,
            efficiency_std: if finite_effs.is_empty() {
                0.0
            } else {
                sample_std(&finite_effs, eff_mean)
            },
            efficiency_excluded: mine.len() - finite_effs.len(),
            neighbor_frac_mean: neighbor_mean,
            trials: mine.len(),
        });
    }

    let mut snapshot = String::new();
    let _ = writeln!(snapshot, "alpha={}", cfg.alpha);
    let _ = writeln!(snapshot, "trials={}", cfg.trials);
    let _ = writeln!(snapshot, "base_seed={}", cfg.base_seed);
    let _ = writeln!(
        snapshot,
        "split={},{},{},{}",
        cfg.split.calibration, cfg.split.scaling, cfg.split.validation, cfg.split.test
    );
    let _ = writeln!(snapshot, "lambda_l={}", cfg.params.lambda_l);
    let _ = writeln!(snapshot, "k_frac={}", cfg.params.k_frac);
    let _ = writeln!(snapshot, "lambda_r={}", cfg.params.lambda_r);
    let _ = writeln!(snapshot, "k_reg={}", cfg.params.k_reg);
    let _ = writeln!(snapshot, "penalty={}", cfg.penalty.as_str());
    let _ = writeln!(snapshot, "force_nonempty={}", cfg.force_nonempty);
    let _ = writeln!(snapshot, "leave_one_out={}", cfg.leave_one_out);
    let _ = writeln!(snapshot, "auto_k_reg={}", cfg.auto_k_reg);
    let _ = writeln!(
        snapshot,
        "methods={}",
        methods
            .iter()
            .map(|m| m.spec.name())
            .collect::<Vec<_>>()
            .join("+")
    );

    Ok(ExperimentReport {
        rows,
        per_trial,
        trials: cfg.trials,
        config_snapshot: snapshot,
    })
}

impl ExperimentReport {
    /// CSV rows under the `method,metric,mean,std,trials` header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,metric,mean,std,trials\n");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{},coverage,{:.6},{:.6},{}",
                row.method, row.coverage_mean, row.coverage_std, row.trials
            );
            let _ = writeln!(
                out,
                "{},efficiency,{:.6},{:.6},{}",
                row.method,
                row.efficiency_mean,
                row.efficiency_std,
                row.trials - row.efficiency_excluded
            );
            let _ = writeln!(
                out,
                "{},neighbor_frac,{:.6},0.000000,{}",
                row.method, row.neighbor_frac_mean, row.trials
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Human-readable aligned table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>18} {:>18} {:>10} {:>8}",
            "method", "coverage", "efficiency", "nb-frac", "trials"
        );
        for row in &self.rows {
            let eff = if row.efficiency_mean.is_finite() {
                format!("{:.4}({:.4})", row.efficiency_mean, row.efficiency_std)
            } else {
                "inf".to_string()
            };
            let _ = writeln!(
                out,
                "{:<14} {:>18} {:>18} {:>10.4} {:>8}",
                row.method,
                format!("{:.4}({:.4})", row.coverage_mean, row.coverage_std),
                eff,
                row.neighbor_frac_mean,
                row.trials
            );
        }
        out
    }
}

/// Grid-search spaces. The defaults are the conventional localization and
/// regularization grids plus the neighbor-fraction grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grids {
    pub lambda_l: Vec<f64>,
    pub lambda_r: Vec<f64>,
    pub k_frac: Vec<f64>,
}

impl Default for Grids {
    fn default() -> Self {
        Grids {
            lambda_l: vec![10.0, 50.0, 100.0, 500.0, 1000.0, 5000.0],
            lambda_r: vec![0.001, 0.005, 0.01, 0.05, 0.15, 0.2, 0.3, 0.4, 0.5, 1.0],
            k_frac: vec![0.05, 0.10, 0.20, 0.30, 0.50, 1.0],
        }
    }
}

/// One grid point's validation metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneRow {
    pub params: TunedParams,
    pub coverage: f64,
    pub efficiency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub best: TunedParams,
    pub table: Vec<TuneRow>,
    /// False when no grid point met the coverage constraint and the
    /// highest-coverage point was returned instead.
    pub satisfied: bool,
}

/// Exhaustive grid search on one seeded split: selects the configuration
/// minimizing validation efficiency subject to validation coverage at least
/// `1 - alpha`; ties prefer smaller `lambda_l`, then smaller `k_frac`, then
/// smaller `lambda_r`. Only the grids the method actually reads are swept.
pub fn grid_tune<T: Real>(
    dataset: &Dataset<T>,
    method: MethodSpec,
    grids: &Grids,
    cfg: &EvalConfig,
) -> Result<TuneResult> {
    let spec = SplitSpec {
        seed: cfg.base_seed,
        ..cfg.split
    };
    let splits = split(dataset, &spec)?;
    if splits.validation.is_empty() {
        return Err(Error::InvalidSplit("tuning needs a validation partition".into()));
    }
    if splits.calibration.is_empty() {
        return Err(Error::InvalidSplit("tuning needs a calibration partition".into()));
    }
    let (prepared, temperature) = if dataset.logits() {
        if splits.scaling.is_empty() {
            return Err(Error::InvalidSplit(
                "logits dataset needs a non-empty scaling partition".into(),
            ));
        }
        let fit = fit_temperature(&dataset.select(&splits.scaling))?;
        (
            crate::scoring::apply_temperature(dataset, fit.temperature)?,
            fit.temperature.as_f64(),
        )
    } else {
        (dataset.clone(), 1.0)
    };
    let cal = prepared.select(&splits.calibration);
    let val = prepared.select(&splits.validation);
    let labels: Vec<Label<T>> = val.iter().map(|e| e.label.clone()).collect();

    let lambda_ls: Vec<f64> = if method.method == Method::Ncp {
        grids.lambda_l.clone()
    } else {
        vec![cfg.params.lambda_l]
    };
    let k_fracs: Vec<f64> = if method.method == Method::Ncp && !method.all_neighbors {
        grids.k_frac.clone()
    } else {
        vec![cfg.params.k_frac]
    };
    let lambda_rs: Vec<f64> = if method.score == ScoreKind::Raps {
        grids.lambda_r.clone()
    } else {
        vec![cfg.params.lambda_r]
    };
    if lambda_ls.is_empty() || k_fracs.is_empty() || lambda_rs.is_empty() {
        return Err(Error::invalid("empty tuning grid"));
    }

    let mut points = Vec::new();
    for &lambda_l in &lambda_ls {
        for &k_frac in &k_fracs {
            for &lambda_r in &lambda_rs {
                points.push(TunedParams {
                    lambda_l,
                    k_frac,
                    lambda_r,
                    k_reg: cfg.params.k_reg,
                });
            }
        }
    }

    let table: Vec<TuneRow> = points
        .par_iter()
        .map(|params| -> Result<TuneRow> {
            let model = calibrate_method(
                &method,
                &cal,
                &val,
                prepared.classes(),
                cfg,
                params,
                temperature,
                cfg.base_seed,
            )?;
            let outputs = predict_all(&model, &val, cfg.base_seed, cfg.force_nonempty)?;
            Ok(TuneRow {
                params: *params,
                coverage: coverage(&outputs, &labels)?,
                efficiency: efficiency(&outputs)?.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let target = 1.0 - cfg.alpha;
    let better = |a: &TuneRow, b: &TuneRow| -> bool {
        // true when a is strictly better than b
        (a.efficiency, a.params.lambda_l, a.params.k_frac, a.params.lambda_r)
            < (b.efficiency, b.params.lambda_l, b.params.k_frac, b.params.lambda_r)
    };
    let mut best_valid: Option<&TuneRow> = None;
    let mut best_any: Option<&TuneRow> = None;
    for row in &table {
        if row.coverage >= target && best_valid.is_none_or(|b| better(row, b)) {
            best_valid = Some(row);
        }
        let more_coverage = best_any.is_none_or(|b| {
            row.coverage > b.coverage || (row.coverage == b.coverage && better(row, b))
        });
        if more_coverage {
            best_any = Some(row);
        }
    }
    let (best, satisfied) = match best_valid {
        Some(row) => (row.params, true),
        None => (best_any.expect("non-empty grid").params, false),
    };
    Ok(TuneResult {
        best,
        table,
        satisfied,
    })
}
