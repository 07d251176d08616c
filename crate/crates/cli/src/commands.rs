//! Subcommand definitions and dispatch.
//!
//! Every run writes a `run_config.txt` snapshot (flags, seed, version) into
//! its output directory, sufficient to reproduce the run exactly. The
//! `NCP_OUT_DIR` environment variable overrides the output directory; no
//! subcommand mutates its input files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use ncp::diagnostics::{theorem1_check, SILHOUETTE_SAMPLE_CAP};
use ncp::engine::{predict_all, read_model, write_model, Method, Prediction};
use ncp::error::Error;
use ncp::eval::{
    coverage, grid_tune, run_trial_set, EvalConfig, Grids, MethodRun, MethodSpec, TunedParams,
};
use ncp::ingest::{read_dataset, split, synth_gaussian_mixture, write_dataset, write_metrics_csv,
    SynthConfig};
use ncp::localizer::{LocalizerConfig, LocalizerMode, LshParams, SearchBackend};
use ncp::quantile::Threshold;
use ncp::scoring::{fit_temperature, RapsPenalty, ScoreConfig, ScoreKind};
use ncp::types::{Label, SplitSpec, Task};
use ncp::{Dataset64, Real};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type CmdResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser, Debug)]
#[command(
    name = "ncp",
    version,
    about = "Conformal and neighborhood-conformal prediction sets and intervals"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic Gaussian-mixture classification dataset.
    Synth(SynthArgs),
    /// Calibrate a model on a dataset and write the model file.
    Calibrate(CalibrateArgs),
    /// Predict with a calibrated model; writes per-example outputs CSV.
    Predict(PredictArgs),
    /// Run seeded multi-trial comparisons of several methods.
    Evaluate(EvaluateArgs),
    /// Grid-search hyperparameters on the validation split.
    Tune(TuneArgs),
    /// Estimate clustering/concentration diagnostics and compare localized
    /// vs split thresholds.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug)]
pub struct OutDirArg {
    /// Output directory (the NCP_OUT_DIR environment variable overrides
    /// this).
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

impl OutDirArg {
    fn resolve(&self) -> PathBuf {
        match std::env::var_os("NCP_OUT_DIR") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out_dir.clone(),
        }
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset file name, within the output directory.
    #[arg(long, default_value = "dataset.csv")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    /// Inter-centroid distance in within-cluster standard deviations.
    #[arg(long, default_value_t = 8.0)]
    pub separation: f64,
    /// Softness of the synthetic classifier (larger = softer probabilities).
    #[arg(long, default_value_t = 32.0)]
    pub noise_temp: f64,
    #[arg(long)]
    pub seed: u64,
    /// Emit raw logits instead of probabilities.
    #[arg(long)]
    pub logits: bool,
    #[command(flatten)]
    pub out_dir: OutDirArg,
}

#[derive(Args, Debug, Clone)]
pub struct ScoreArgs {
    /// Rank-regularization strength for raps scores.
    #[arg(long, default_value_t = 0.01)]
    pub lambda_r: f64,
    /// Reference rank for the raps penalty; 0 selects it from validation
    /// ground-truth ranks.
    #[arg(long, default_value_t = 0)]
    pub k_reg: usize,
    /// Penalty shape for raps scores.
    #[arg(long, value_enum, default_value_t = PenaltyArg::Abs)]
    pub penalty: PenaltyArg,
}

#[derive(Args, Debug, Clone)]
pub struct LocalizerArgs {
    /// Localizer weighting mode for localized methods.
    #[arg(long, value_enum)]
    pub localizer: Option<LocalizerArg>,
    /// Neighbor count as a fraction of the calibration size.
    #[arg(long, default_value_t = 0.1)]
    pub k_frac: f64,
    /// Exponential kernel length scale.
    #[arg(long, default_value_t = 100.0)]
    pub lambda_l: f64,
    /// Ball radius for the ball localizer.
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    /// Neighbor search backend.
    #[arg(long, value_enum, default_value_t = SearchArg::Exact)]
    pub search: SearchArg,
    #[arg(long, default_value_t = 8)]
    pub lsh_tables: usize,
    #[arg(long, default_value_t = 8)]
    pub lsh_projections: usize,
    /// LSH bucket width; 0 derives it from the median pairwise distance.
    #[arg(long, default_value_t = 0.0)]
    pub lsh_width: f64,
    /// Drop each anchor's own weight during the adjusted-level search.
    #[arg(long)]
    pub leave_one_out: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PenaltyArg {
    Abs,
    Hinge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LocalizerArg {
    Ball,
    Knn,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SearchArg {
    Exact,
    Lsh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SliceArg {
    All,
    Calibration,
    Scaling,
    Validation,
    Test,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Method name: naive, aps, raps, cp, ncp-aps, ncp-raps, ncp, or an
    /// ncp-all variant.
    #[arg(long)]
    pub method: String,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long)]
    pub seed: u64,
    /// Partition sizes `cal,scale,val,test`; absent means the whole file is
    /// the calibration set.
    #[arg(long)]
    pub split: Option<String>,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[command(flatten)]
    pub loc: LocalizerArgs,
    #[command(flatten)]
    pub out_dir: OutDirArg,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Which slice of the dataset to predict; non-`all` slices re-derive
    /// the split stored in the model file.
    #[arg(long, value_enum, default_value_t = SliceArg::All)]
    pub slice: SliceArg,
    /// Replace empty prediction sets with the top-1 class.
    #[arg(long)]
    pub force_nonempty: bool,
    #[command(flatten)]
    pub out_dir: OutDirArg,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated method names.
    #[arg(long, default_value = "aps")]
    pub methods: String,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    #[arg(long)]
    pub seed: u64,
    /// Partition sizes `cal,scale,val,test`.
    #[arg(long)]
    pub split: String,
    /// Grid-tune each localized/regularized method on the first validation
    /// split before running trials.
    #[arg(long)]
    pub tune: bool,
    /// Trial parallelism (0 = one thread per core).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub force_nonempty: bool,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[command(flatten)]
    pub loc: LocalizerArgs,
    #[command(flatten)]
    pub out_dir: OutDirArg,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub method: String,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long)]
    pub seed: u64,
    /// Partition sizes `cal,scale,val,test`; validation must be non-empty.
    #[arg(long)]
    pub split: String,
    #[arg(long)]
    pub force_nonempty: bool,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[command(flatten)]
    pub loc: LocalizerArgs,
    #[command(flatten)]
    pub out_dir: OutDirArg,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long)]
    pub seed: u64,
    /// Partition sizes `cal,scale,val,test`; calibration and test must be
    /// non-empty.
    #[arg(long)]
    pub split: String,
    /// Ball radius for the robust-set estimates; 0 uses the median
    /// nearest-neighbor distance.
    #[arg(long, default_value_t = 0.0)]
    pub ball_radius: f64,
    /// Threshold at which concentration is estimated; by default the split
    /// conformal threshold.
    #[arg(long)]
    pub threshold_t: Option<f64>,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[command(flatten)]
    pub loc: LocalizerArgs,
    #[command(flatten)]
    pub out_dir: OutDirArg,
}

pub fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Tune(args) => cmd_tune(args),
        Command::Diagnose(args) => cmd_diagnose(args),
    }
}

fn parse_split(text: &str, seed: u64) -> Result<SplitSpec, CliError> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 4 {
        return Err(usage(format!(
            "--split needs four comma-separated sizes `cal,scale,val,test`, got `{text}`"
        )));
    }
    let mut sizes = [0usize; 4];
    for (slot, part) in sizes.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| usage(format!("bad split size `{part}`")))?;
    }
    Ok(SplitSpec {
        seed,
        calibration: sizes[0],
        scaling: sizes[1],
        validation: sizes[2],
        test: sizes[3],
    })
}

fn parse_method(name: &str) -> Result<MethodSpec, CliError> {
    name.parse::<MethodSpec>()
        .map_err(|e| usage(e.to_string()))
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(Error::Io(e)))?;
    Ok(())
}

fn write_run_config(dir: &Path, subcommand: &str, entries: &[(&str, String)]) -> CmdResult {
    let mut out = String::new();
    let _ = writeln!(out, "subcommand={subcommand}");
    let _ = writeln!(out, "version={}", env!("CARGO_PKG_VERSION"));
    for (key, value) in entries {
        let _ = writeln!(out, "{key}={value}");
    }
    fs::write(dir.join("run_config.txt"), out).map_err(|e| CliError::Data(Error::Io(e)))?;
    Ok(())
}

fn score_config(args: &ScoreArgs, kind: ScoreKind, seed: u64) -> ScoreConfig {
    ScoreConfig {
        kind,
        lambda_r: args.lambda_r,
        k_reg: args.k_reg.max(1),
        penalty: match args.penalty {
            PenaltyArg::Abs => RapsPenalty::Abs,
            PenaltyArg::Hinge => RapsPenalty::Hinge,
        },
        tie_seed: seed,
    }
}

fn localizer_config(args: &LocalizerArgs, spec: &MethodSpec, seed: u64) -> LocalizerConfig {
    let mode = match args.localizer {
        Some(LocalizerArg::Ball) => LocalizerMode::Ball,
        Some(LocalizerArg::Knn) => LocalizerMode::KnnExp,
        Some(LocalizerArg::All) => LocalizerMode::AllExp,
        None if spec.all_neighbors => LocalizerMode::AllExp,
        None => LocalizerMode::KnnExp,
    };
    LocalizerConfig {
        mode,
        radius: args.radius,
        k_frac: args.k_frac,
        lambda_l: args.lambda_l,
        search: match args.search {
            SearchArg::Exact => SearchBackend::Exact,
            SearchArg::Lsh => SearchBackend::Lsh,
        },
        lsh: LshParams {
            tables: args.lsh_tables,
            projections: args.lsh_projections,
            bucket_width: args.lsh_width,
        },
        seed,
    }
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let dir = args.out_dir.resolve();
    ensure_out_dir(&dir)?;
    let config = SynthConfig {
        classes: args.classes,
        dim: args.dim,
        per_class: args.per_class,
        separation: args.separation,
        noise_temp: args.noise_temp,
        seed: args.seed,
        logits: args.logits,
    };
    let dataset: Dataset64 = synth_gaussian_mixture(&config)?;
    let out_path = if args.out.is_absolute() {
        args.out.clone()
    } else {
        dir.join(&args.out)
    };
    write_dataset(&dataset, &out_path)?;
    write_run_config(
        &dir,
        "synth",
        &[
            ("out", args.out.display().to_string()),
            ("classes", args.classes.to_string()),
            ("dim", args.dim.to_string()),
            ("per_class", args.per_class.to_string()),
            ("separation", args.separation.to_string()),
            ("noise_temp", args.noise_temp.to_string()),
            ("seed", args.seed.to_string()),
            ("logits", args.logits.to_string()),
        ],
    )?;
    println!(
        "wrote {} examples (C={}, d={}) to {}",
        dataset.len(),
        args.classes,
        args.dim,
        out_path.display()
    );
    Ok(())
}

/// Splits a dataset per the spec and temperature-scales logits datasets on
/// the scaling slice. Returns the prepared dataset, the fitted temperature,
/// and the splits.
fn prepare(
    dataset: &Dataset64,
    spec: &SplitSpec,
) -> Result<(Dataset64, f64, ncp::types::Splits), CliError> {
    let splits = split(dataset, spec)?;
    if dataset.logits() {
        if splits.scaling.is_empty() {
            return Err(usage(
                "logits dataset needs a non-empty scaling partition to fit the temperature"
                    .to_string(),
            ));
        }
        let fit = fit_temperature(&dataset.select(&splits.scaling))?;
        let prepared = ncp::scoring::apply_temperature(dataset, fit.temperature)?;
        Ok((prepared, fit.temperature.as_f64(), splits))
    } else {
        Ok((dataset.clone(), 1.0, splits))
    }
}

fn cmd_calibrate(args: CalibrateArgs) -> CmdResult {
    let dir = args.out_dir.resolve();
    ensure_out_dir(&dir)?;
    let spec = parse_method(&args.method)?;
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(usage("--alpha must lie in (0, 1)"));
    }
    let dataset: Dataset64 = read_dataset(&args.data)?;
    if spec.task() != dataset.task() {
        return Err(CliError::Data(Error::TaskMismatch(format!(
            "method {} does not fit a {} dataset",
            spec.name(),
            dataset.task().as_str()
        ))));
    }
    let split_spec = match &args.split {
        Some(text) => parse_split(text, args.seed)?,
        None => SplitSpec {
            seed: args.seed,
            calibration: dataset.len(),
            scaling: 0,
            validation: 0,
            test: 0,
        },
    };
    let (prepared, temperature, splits) = prepare(&dataset, &split_spec)?;
    let cal = prepared.select(&splits.calibration);
    let val = prepared.select(&splits.validation);

    let mut sc = score_config(&args.score, spec.score, args.seed);
    if spec.score == ScoreKind::Raps && args.score.k_reg == 0 {
        if val.is_empty() {
            return Err(usage(
                "raps with automatic k_reg needs a validation partition (or pass --k-reg)",
            ));
        }
        let ranks = ncp::scoring::ground_truth_ranks(&val, args.seed ^ 0x6b72)?;
        sc.k_reg = ncp::scoring::select_k_reg(&ranks, args.alpha)?;
    }
    let k_reg_used = sc.k_reg;

    let mut model = match spec.method {
        Method::Naive => ncp::engine::calibrate_naive::<f64>(
            sc,
            prepared.classes(),
            args.alpha,
            temperature,
        )?,
        Method::Cp => ncp::engine::calibrate_cp(
            &cal,
            sc,
            prepared.classes(),
            args.alpha,
            temperature,
        )?,
        Method::Ncp => ncp::engine::calibrate_ncp(
            &cal,
            sc,
            localizer_config(&args.loc, &spec, args.seed),
            prepared.classes(),
            args.alpha,
            temperature,
            args.loc.leave_one_out,
        )?,
    };
    model.split = Some(split_spec);
    let model_path = dir.join("model.txt");
    write_model(&model, &model_path)?;
    write_run_config(
        &dir,
        "calibrate",
        &[
            ("data", args.data.display().to_string()),
            ("method", spec.name()),
            ("alpha", args.alpha.to_string()),
            ("seed", args.seed.to_string()),
            ("split", args.split.clone().unwrap_or_else(|| "none".into())),
            ("lambda_r", args.score.lambda_r.to_string()),
            ("k_reg", k_reg_used.to_string()),
            ("penalty", format!("{:?}", args.score.penalty).to_lowercase()),
            ("localizer", format!("{:?}", args.loc.localizer).to_lowercase()),
            ("k_frac", args.loc.k_frac.to_string()),
            ("lambda_l", args.loc.lambda_l.to_string()),
            ("radius", args.loc.radius.to_string()),
            ("search", format!("{:?}", args.loc.search).to_lowercase()),
            ("leave_one_out", args.loc.leave_one_out.to_string()),
            ("temperature", temperature.to_string()),
        ],
    )?;
    println!("wrote model to {}", model_path.display());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> CmdResult {
    let dir = args.out_dir.resolve();
    ensure_out_dir(&dir)?;
    let model: ncp::CalibratedModel64 = read_model(&args.model)?;
    let dataset: Dataset64 = read_dataset(&args.data)?;
    if dataset.task() != model.task {
        return Err(CliError::Data(Error::TaskMismatch(format!(
            "model expects a {} dataset",
            model.task.as_str()
        ))));
    }
    let prepared = ncp::engine::prepared_dataset(&dataset, model.temperature)?;
    let indices: Vec<usize> = match args.slice {
        SliceArg::All => (0..prepared.len()).collect(),
        other => {
            let split_spec = model.split.ok_or_else(|| {
                usage("model has no stored split; predict with --slice all")
            })?;
            let splits = split(&prepared, &split_spec)?;
            match other {
                SliceArg::Calibration => splits.calibration,
                SliceArg::Scaling => splits.scaling,
                SliceArg::Validation => splits.validation,
                SliceArg::Test => splits.test,
                SliceArg::All => unreachable!(),
            }
        }
    };
    if indices.is_empty() {
        return Err(usage("requested slice is empty"));
    }
    let examples = prepared.select(&indices);
    let outputs = predict_all(&model, &examples, args.seed, args.force_nonempty)?;

    let mut csv = String::new();
    match model.task {
        Task::Classification => {
            csv.push_str("index,label,covered,set_size,threshold,set\n");
            for ((&idx, ex), out) in indices.iter().zip(&examples).zip(&outputs) {
                let label = ex.class_label()?;
                let covered = out.covers(&ex.label)? as u8;
                let set = match &out.prediction {
                    Prediction::Set(s) => s,
                    _ => unreachable!("classification model"),
                };
                let threshold = match out.threshold {
                    Threshold::Finite(t) => format!("{t:.6}"),
                    Threshold::Infinite => "inf".into(),
                };
                let joined: Vec<String> = set.iter().map(|c| c.to_string()).collect();
                let _ = writeln!(
                    csv,
                    "{idx},{label},{covered},{},{threshold},{}",
                    set.len(),
                    joined.join(";")
                );
            }
        }
        Task::Regression => {
            csv.push_str("index,label,covered,lower,upper,threshold\n");
            for ((&idx, ex), out) in indices.iter().zip(&examples).zip(&outputs) {
                let label = ex.target()?;
                let covered = out.covers(&ex.label)? as u8;
                let (lower, upper) = match out.prediction {
                    Prediction::Interval { lower, upper } => (lower, upper),
                    _ => unreachable!("regression model"),
                };
                let threshold = match out.threshold {
                    Threshold::Finite(t) => format!("{t:.6}"),
                    Threshold::Infinite => "inf".into(),
                };
                let _ = writeln!(csv, "{idx},{label},{covered},{lower:.6},{upper:.6},{threshold}");
            }
        }
    }
    let out_path = dir.join("predictions.csv");
    fs::write(&out_path, csv).map_err(|e| CliError::Data(Error::Io(e)))?;
    write_run_config(
        &dir,
        "predict",
        &[
            ("model", args.model.display().to_string()),
            ("data", args.data.display().to_string()),
            ("seed", args.seed.to_string()),
            ("slice", format!("{:?}", args.slice).to_lowercase()),
            ("force_nonempty", args.force_nonempty.to_string()),
        ],
    )?;
    let labels: Vec<Label<f64>> = examples.iter().map(|e| e.label.clone()).collect();
    let cov = coverage(&outputs, &labels)?;
    println!(
        "wrote {} predictions to {} (empirical coverage {:.4})",
        outputs.len(),
        out_path.display(),
        cov
    );
    Ok(())
}

fn eval_config_from(args: &EvaluateArgs, split_spec: SplitSpec) -> EvalConfig {
    let mut cfg = EvalConfig::new(args.alpha, args.trials, args.seed, split_spec);
    cfg.params = TunedParams {
        lambda_l: args.loc.lambda_l,
        k_frac: args.loc.k_frac,
        lambda_r: args.score.lambda_r,
        k_reg: args.score.k_reg.max(1),
    };
    cfg.penalty = match args.score.penalty {
        PenaltyArg::Abs => RapsPenalty::Abs,
        PenaltyArg::Hinge => RapsPenalty::Hinge,
    };
    cfg.force_nonempty = args.force_nonempty;
    cfg.leave_one_out = args.loc.leave_one_out;
    cfg.auto_k_reg = args.score.k_reg == 0;
    cfg
}

fn cmd_evaluate(args: EvaluateArgs) -> CmdResult {
    let dir = args.out_dir.resolve();
    ensure_out_dir(&dir)?;
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(usage("--alpha must lie in (0, 1)"));
    }
    if args.trials == 0 {
        return Err(usage("--trials must be >= 1"));
    }
    let specs: Vec<MethodSpec> = args
        .methods
        .split(',')
        .map(|m| parse_method(m.trim()))
        .collect::<Result<_, _>>()?;
    if specs.is_empty() {
        return Err(usage("--methods is empty"));
    }
    let dataset: Dataset64 = read_dataset(&args.data)?;
    let split_spec = parse_split(&args.split, args.seed)?;
    let cfg = eval_config_from(&args, split_spec);

    let body = || -> Result<ncp::eval::ExperimentReport, Error> {
        let runs: Vec<MethodRun> = if args.tune {
            specs
                .iter()
                .map(|spec| -> Result<MethodRun, Error> {
                    let tunable = spec.method == Method::Ncp || spec.score == ScoreKind::Raps;
                    if tunable {
                        let tuned = grid_tune(&dataset, *spec, &Grids::default(), &cfg)?;
                        Ok(MethodRun::tuned(*spec, tuned.best))
                    } else {
                        Ok(MethodRun::new(*spec))
                    }
                })
                .collect::<Result<_, _>>()?
        } else {
            specs.iter().map(|s| MethodRun::new(*s)).collect()
        };
        run_trial_set(&dataset, &runs, &cfg)
    };
    let report = if args.jobs > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build()
            .map_err(|e| usage(format!("cannot build thread pool: {e}")))?;
        pool.install(body)?
    } else {
        body()?
    };

    report.write_csv(dir.join("report.csv"))?;
    write_run_config(
        &dir,
        "evaluate",
        &[
            ("data", args.data.display().to_string()),
            ("methods", args.methods.clone()),
            ("alpha", args.alpha.to_string()),
            ("trials", args.trials.to_string()),
            ("seed", args.seed.to_string()),
            ("split", args.split.clone()),
            ("tune", args.tune.to_string()),
            ("force_nonempty", args.force_nonempty.to_string()),
            ("leave_one_out", args.loc.leave_one_out.to_string()),
            ("lambda_l", args.loc.lambda_l.to_string()),
            ("k_frac", args.loc.k_frac.to_string()),
            ("lambda_r", args.score.lambda_r.to_string()),
            ("k_reg", args.score.k_reg.to_string()),
        ],
    )?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_tune(args: TuneArgs) -> CmdResult {
    let dir = args.out_dir.resolve();
    ensure_out_dir(&dir)?;
    let spec = parse_method(&args.method)?;
    let dataset: Dataset64 = read_dataset(&args.data)?;
    let split_spec = parse_split(&args.split, args.seed)?;
    let mut cfg = EvalConfig::new(args.alpha, 1, args.seed, split_spec);
    cfg.params = TunedParams {
        lambda_l: args.loc.lambda_l,
        k_frac: args.loc.k_frac,
        lambda_r: args.score.lambda_r,
        k_reg: args.score.k_reg.max(1),
    };
    cfg.force_nonempty = args.force_nonempty;
    cfg.leave_one_out = args.loc.leave_one_out;
    cfg.auto_k_reg = args.score.k_reg == 0;
    let result = grid_tune(&dataset, spec, &Grids::default(), &cfg)?;

    let mut best = String::new();
    let _ = writeln!(best, "method={}", spec.name());
    let _ = writeln!(best, "lambda_l={}", result.best.lambda_l);
    let _ = writeln!(best, "k_frac={}", result.best.k_frac);
    let _ = writeln!(best, "lambda_r={}", result.best.lambda_r);
    let _ = writeln!(best, "k_reg={}", result.best.k_reg);
    let _ = writeln!(best, "coverage_satisfied={}", result.satisfied);
    fs::write(dir.join("best_config.txt"), &best).map_err(|e| CliError::Data(Error::Io(e)))?;

    let mut table = String::from("lambda_l,k_frac,lambda_r,coverage,efficiency\n");
    for row in &result.table {
        let _ = writeln!(
            table,
            "{},{},{},{:.6},{:.6}",
            row.params.lambda_l, row.params.k_frac, row.params.lambda_r, row.coverage,
            row.efficiency
        );
    }
    fs::write(dir.join("tuning_table.csv"), table).map_err(|e| CliError::Data(Error::Io(e)))?;
    write_run_config(
        &dir,
        "tune",
        &[
            ("data", args.data.display().to_string()),
            ("method", spec.name()),
            ("alpha", args.alpha.to_string()),
            ("seed", args.seed.to_string()),
            ("split", args.split.clone()),
        ],
    )?;
    print!("{best}");
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> CmdResult {
    let dir = args.out_dir.resolve();
    ensure_out_dir(&dir)?;
    let dataset: Dataset64 = read_dataset(&args.data)?;
    if dataset.task() != Task::Classification {
        return Err(CliError::Data(Error::TaskMismatch(
            "diagnose needs a classification dataset (silhouette and separation are \
             label-based)"
                .into(),
        )));
    }
    let split_spec = parse_split(&args.split, args.seed)?;
    let (prepared, temperature, splits) = prepare(&dataset, &split_spec)?;
    if splits.calibration.is_empty() || splits.test.is_empty() {
        return Err(usage("diagnose needs non-empty calibration and test partitions"));
    }
    let cal = prepared.select(&splits.calibration);
    let test = prepared.select(&splits.test);
    let spec: MethodSpec = "ncp-aps".parse().expect("known method");
    let sc = score_config(&args.score, ScoreKind::Aps, args.seed);
    let cp_model = ncp::engine::calibrate_cp(
        &cal,
        sc.clone(),
        prepared.classes(),
        args.alpha,
        temperature,
    )?;
    let ncp_model = ncp::engine::calibrate_ncp(
        &cal,
        sc,
        localizer_config(&args.loc, &spec, args.seed),
        prepared.classes(),
        args.alpha,
        temperature,
        args.loc.leave_one_out,
    )?;
    let radius = if args.ball_radius > 0.0 {
        Some(args.ball_radius)
    } else {
        None
    };
    let diag = theorem1_check(&cp_model, &ncp_model, &cal, &test, radius, args.threshold_t)?;
    write_metrics_csv(dir.join("diagnostics.csv"), &diag.to_metric_rows())?;
    write_run_config(
        &dir,
        "diagnose",
        &[
            ("data", args.data.display().to_string()),
            ("alpha", args.alpha.to_string()),
            ("seed", args.seed.to_string()),
            ("split", args.split.clone()),
            ("ball_radius", args.ball_radius.to_string()),
            (
                "threshold_t",
                args.threshold_t.map_or("cp".into(), |t| t.to_string()),
            ),
            ("silhouette_cap", SILHOUETTE_SAMPLE_CAP.to_string()),
        ],
    )?;
    print!("{}", diag.to_key_values());
    Ok(())
}
