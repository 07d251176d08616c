//! Fits the small regression network on a raw tabular CSV and emits a
//! dataset file for the conformal pipeline.
//!
//! The input CSV holds one row per example: feature columns first, the
//! target in the last column. A non-numeric first line is treated as a
//! header and skipped. Rows are shuffled with the given seed; the first
//! `train-frac` portion trains the network and the remaining pool is
//! written out with predictions and last-hidden-layer embeddings, ready for
//! `ncp evaluate`.

use std::path::PathBuf;
use std::process::exit;

use clap::Parser;
use ncp::ingest::write_dataset;
use ncp::seeding::{self, Domain};
use ncp_cli::mlp::{fit, parse_tabular_csv, to_dataset, MlpConfig};
use rand::seq::SliceRandom;

#[derive(Parser, Debug)]
#[command(name = "ncp-fit-mlp", version, about = "Train the tabular MLP and emit a dataset file")]
struct Args {
    /// Raw CSV with features and the target in the last column.
    #[arg(long)]
    raw: PathBuf,
    /// Fraction of rows used to train the network.
    #[arg(long, default_value_t = 0.5)]
    train_frac: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Output directory for `dataset.csv` and `mlp_info.txt`.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn main() {
    let args = Args::parse();
    if !(args.train_frac > 0.0 && args.train_frac < 1.0) {
        eprintln!("error: --train-frac must lie in (0, 1)");
        exit(1);
    }
    let text = match std::fs::read_to_string(&args.raw) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.raw.display());
            exit(2);
        }
    };
    let (features, targets) = match parse_tabular_csv(&text) {
        Ok(data) => data,
        Err(msg) => {
            eprintln!("error: {msg}");
            exit(2);
        }
    };
    let n = features.len();
    let n_train = ((args.train_frac * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeding::rng(args.seed, Domain::Split, 0);
    order.shuffle(&mut rng);
    let (train_idx, pool_idx) = order.split_at(n_train);

    let train_x: Vec<Vec<f64>> = train_idx.iter().map(|&i| features[i].clone()).collect();
    let train_y: Vec<f64> = train_idx.iter().map(|&i| targets[i]).collect();
    let pool_x: Vec<Vec<f64>> = pool_idx.iter().map(|&i| features[i].clone()).collect();
    let pool_y: Vec<f64> = pool_idx.iter().map(|&i| targets[i]).collect();

    let config = MlpConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        seed: args.seed,
        ..MlpConfig::default()
    };
    let mlp = fit(&train_x, &train_y, &config);
    let dataset = match to_dataset(&mlp, &pool_x, &pool_y) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            exit(2);
        }
    };
    if let Err(e) = std::fs::create_dir_all(&args.out_dir) {
        eprintln!("error: cannot create {}: {e}", args.out_dir.display());
        exit(2);
    }
    let out_path = args.out_dir.join("dataset.csv");
    if let Err(e) = write_dataset(&dataset, &out_path) {
        eprintln!("error: {e}");
        exit(2);
    }
    let info = format!(
        "rows={n}\ntrain_rows={}\npool_rows={}\ntrain_rmse={:.6}\npool_rmse={:.6}\nepochs={}\nlr={}\nseed={}\n",
        train_x.len(),
        pool_x.len(),
        mlp.rmse(&train_x, &train_y),
        mlp.rmse(&pool_x, &pool_y),
        args.epochs,
        args.lr,
        args.seed,
    );
    if let Err(e) = std::fs::write(args.out_dir.join("mlp_info.txt"), info) {
        eprintln!("error: {e}");
        exit(2);
    }
    println!(
        "trained on {} rows, wrote {} pool examples to {}",
        train_x.len(),
        dataset.len(),
        out_path.display()
    );
}
