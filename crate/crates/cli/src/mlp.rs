//! Small fully-connected regression network used to produce predictions and
//! embeddings for tabular datasets.
//!
//! Three ReLU hidden layers (15, 20, 30 units), mean-squared-error loss,
//! full-batch Adam, 500 epochs at learning rate 1e-3 by default. The last
//! hidden layer doubles as the learned representation emitted alongside the
//! prediction. Weights are seeded, so the whole pipeline is deterministic.

use ncp::seeding::{self, Domain};
use ncp::types::{Dataset, Label, LabeledExample, Output, Task};
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct MlpConfig {
    pub hidden: [usize; 3],
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: [15, 20, 30],
            epochs: 500,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

struct Layer {
    weights: Vec<f64>, // out x in, row-major
    biases: Vec<f64>,
    input: usize,
    output: usize,
}

impl Layer {
    fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        // He-style uniform fan-in scaling.
        let bound = (6.0 / input as f64).sqrt();
        let weights = (0..input * output)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        Layer {
            weights,
            biases: vec![0.0; output],
            input,
            output,
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.biases.clone();
        for (o, out_val) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.input..(o + 1) * self.input];
            *out_val += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }
}

/// Adam state for one parameter tensor.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: usize) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let t = t as f64;
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            let m_hat = self.m[i] / (1.0 - B1.powf(t));
            let v_hat = self.v[i] / (1.0 - B2.powf(t));
            params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

pub struct Mlp {
    layers: Vec<Layer>, // 3 hidden + 1 output head
}

impl Mlp {
    /// Prediction and the last hidden activation vector.
    pub fn forward(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut h = x.to_vec();
        for layer in &self.layers[..self.layers.len() - 1] {
            h = layer.forward(&h);
            for v in h.iter_mut() {
                *v = v.max(0.0);
            }
        }
        let out = self.layers.last().expect("layers").forward(&h);
        (out[0], h)
    }

    pub fn rmse(&self, features: &[Vec<f64>], targets: &[f64]) -> f64 {
        let mse: f64 = features
            .iter()
            .zip(targets)
            .map(|(x, y)| {
                let (pred, _) = self.forward(x);
                (pred - y) * (pred - y)
            })
            .sum::<f64>()
            / targets.len() as f64;
        mse.sqrt()
    }
}

/// Trains the network with full-batch Adam on mean-squared error.
pub fn fit(features: &[Vec<f64>], targets: &[f64], config: &MlpConfig) -> Mlp {
    assert_eq!(features.len(), targets.len());
    assert!(!features.is_empty());
    let input_dim = features[0].len();
    let mut rng = seeding::rng(config.seed, Domain::Synth, 1);
    let dims = [
        (input_dim, config.hidden[0]),
        (config.hidden[0], config.hidden[1]),
        (config.hidden[1], config.hidden[2]),
        (config.hidden[2], 1),
    ];
    let mut layers: Vec<Layer> = dims
        .iter()
        .map(|&(i, o)| Layer::new(i, o, &mut rng))
        .collect();
    let mut w_adam: Vec<Adam> = layers.iter().map(|l| Adam::new(l.weights.len())).collect();
    let mut b_adam: Vec<Adam> = layers.iter().map(|l| Adam::new(l.biases.len())).collect();

    let n = features.len() as f64;
    for epoch in 1..=config.epochs {
        let mut w_grads: Vec<Vec<f64>> =
            layers.iter().map(|l| vec![0.0; l.weights.len()]).collect();
        let mut b_grads: Vec<Vec<f64>> =
            layers.iter().map(|l| vec![0.0; l.biases.len()]).collect();

        for (x, &y) in features.iter().zip(targets) {
            // Forward pass, keeping pre- and post-activation values.
            let mut activations: Vec<Vec<f64>> = vec![x.clone()];
            for (li, layer) in layers.iter().enumerate() {
                let mut z = layer.forward(activations.last().expect("input"));
                if li + 1 < layers.len() {
                    for v in z.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
                activations.push(z);
            }
            let pred = activations.last().expect("output")[0];
            // d(MSE)/d(pred), averaged over the batch.
            let mut delta = vec![2.0 * (pred - y) / n];
            for li in (0..layers.len()).rev() {
                let input = &activations[li];
                let layer = &layers[li];
                for o in 0..layer.output {
                    b_grads[li][o] += delta[o];
                    let row = &mut w_grads[li][o * layer.input..(o + 1) * layer.input];
                    for (slot, inp) in row.iter_mut().zip(input) {
                        *slot += delta[o] * inp;
                    }
                }
                if li == 0 {
                    break;
                }
                let mut prev = vec![0.0; layer.input];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.input..(o + 1) * layer.input];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                // ReLU gate on the previous layer's activation.
                for (p, &a) in prev.iter_mut().zip(&activations[li]) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }

        for li in 0..layers.len() {
            w_adam[li].step(
                &mut layers[li].weights,
                &w_grads[li],
                config.learning_rate,
                epoch,
            );
            b_adam[li].step(
                &mut layers[li].biases,
                &b_grads[li],
                config.learning_rate,
                epoch,
            );
        }
    }
    Mlp { layers }
}

/// Parses a tabular CSV: feature columns first, target last. A non-numeric
/// first line is treated as a header and skipped.
pub fn parse_tabular_csv(text: &str) -> Result<(Vec<Vec<f64>>, Vec<f64>), String> {
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parsed: Result<Vec<f64>, _> = fields.iter().map(|f| f.trim().parse::<f64>()).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if i == 0 => continue, // header line
            Err(_) => return Err(format!("line {}: non-numeric field", i + 1)),
        };
        if row.len() < 2 {
            return Err(format!("line {}: need at least one feature and a target", i + 1));
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(format!("line {}: expected {w} fields, found {}", i + 1, row.len()))
            }
            _ => {}
        }
        let (x, y) = row.split_at(row.len() - 1);
        features.push(x.to_vec());
        targets.push(y[0]);
    }
    if features.is_empty() {
        return Err("no data rows".into());
    }
    Ok((features, targets))
}

/// Builds a regression dataset from fitted predictions: each example gets
/// the network's prediction as output and its last hidden activation as the
/// embedding.
pub fn to_dataset(
    mlp: &Mlp,
    features: &[Vec<f64>],
    targets: &[f64],
) -> ncp::Result<Dataset<f64>> {
    let examples = features
        .iter()
        .zip(targets)
        .map(|(x, &y)| {
            let (pred, hidden) = mlp.forward(x);
            LabeledExample {
                embedding: hidden,
                output: Output::Prediction(pred),
                label: Label::Target(y),
            }
        })
        .collect();
    Dataset::new(Task::Regression, false, None, examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_data(n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = seeding::rng(3, Domain::Test, 0);
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>()])
            .collect();
        let targets: Vec<f64> = features.iter().map(|x| 3.0 * x[0] - x[1] + 0.5).collect();
        (features, targets)
    }

    #[test]
    fn fits_a_linear_function() {
        let (features, targets) = line_data(200);
        let config = MlpConfig {
            epochs: 2000,
            seed: 5,
            ..MlpConfig::default()
        };
        let mlp = fit(&features, &targets, &config);
        let rmse = mlp.rmse(&features, &targets);
        let target_std = {
            let mean: f64 = targets.iter().sum::<f64>() / targets.len() as f64;
            (targets.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>()
                / targets.len() as f64)
                .sqrt()
        };
        assert!(rmse < 0.5 * target_std, "rmse {rmse} vs std {target_std}");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (features, targets) = line_data(50);
        let config = MlpConfig {
            epochs: 50,
            seed: 9,
            ..MlpConfig::default()
        };
        let a = fit(&features, &targets, &config);
        let b = fit(&features, &targets, &config);
        for (x, _) in features.iter().zip(&targets) {
            assert_eq!(a.forward(x).0, b.forward(x).0);
        }
    }

    #[test]
    fn dataset_embeddings_have_last_hidden_width() {
        let (features, targets) = line_data(30);
        let config = MlpConfig {
            epochs: 10,
            seed: 1,
            ..MlpConfig::default()
        };
        let mlp = fit(&features, &targets, &config);
        let dataset = to_dataset(&mlp, &features, &targets).unwrap();
        assert_eq!(dataset.dim(), 30);
        assert_eq!(dataset.len(), 30);
    }
}
