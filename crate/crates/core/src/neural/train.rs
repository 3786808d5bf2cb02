use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::network::{Network, Normalization, TargetMode};
use super::NetworkError;
use crate::dataset::Dataset;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine-anneal the learning rate to this value by the last epoch.
    pub final_learning_rate: Option<f64>,
    pub optimizer: Optimizer,
    /// Visit at most this many random training samples per epoch.
    pub samples_per_epoch: Option<usize>,
    /// Fraction of samples held out for validation and best-epoch selection.
    pub validation_fraction: f64,
    /// Recompute the input/output z-score statistics from `data` first.
    pub refresh_normalization: bool,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 256,
            learning_rate: 1e-3,
            final_learning_rate: None,
            optimizer: Optimizer::Adam,
            samples_per_epoch: None,
            validation_fraction: 0.1,
            refresh_normalization: true,
            seed: 0,
        }
    }
}

impl TrainSettings {
    /// Short warm-start fit that keeps the existing normalization.
    pub fn retrain_default() -> Self {
        Self {
            epochs: 20,
            refresh_normalization: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.epochs == 0 || self.batch_size == 0 || self.samples_per_epoch == Some(0) {
            return Err(NetworkError::InvalidSettings(
                "epochs, batch size and samples per epoch must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(NetworkError::InvalidSettings("learning rate must be positive".into()));
        }
        if self.final_learning_rate.is_some_and(|lr| !(lr.is_finite() && lr > 0.0)) {
            return Err(NetworkError::InvalidSettings(
                "final learning rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(NetworkError::InvalidSettings(
                "validation fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean normalized-target MSE over each epoch's mini-batches.
    pub train_loss: Vec<f64>,
    /// Held-out MSE after each epoch (empty without a validation split).
    pub validation_loss: Vec<f64>,
    /// Epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
    pub diverged: bool,
    pub wall_time: f64,
}

impl TrainSettings {
    /// Learning rate used during `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.final_learning_rate {
            Some(end) if self.epochs > 1 => {
                let progress = epoch as f64 / (self.epochs - 1) as f64;
                end + 0.5 * (self.learning_rate - end) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            _ => self.learning_rate,
        }
    }
}

impl TrainReport {
    /// Running minimum of the selection loss (validation if present).
    pub fn best_so_far(&self) -> Vec<f64> {
        let curve = if self.validation_loss.is_empty() {
            &self.train_loss
        } else {
            &self.validation_loss
        };
        curve
            .iter()
            .scan(f64::INFINITY, |best, &l| {
                *best = best.min(l);
                Some(*best)
            })
            .collect()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

fn gather(src: &Mat, idx: &[usize]) -> Mat {
    let mut out = Mat::zeros(idx.len(), src.cols);
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(src.row(i));
    }
    out
}

fn mse(pred: &Mat, target: &Mat) -> f64 {
    pred.data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.data.len() as f64
}

/// Fits `net` to `data` by mini-batch Adam on normalized targets, starting
/// from the given parameters. Returns the parameters of the best epoch.
pub fn train(net: &Network, data: &Dataset, settings: &TrainSettings) -> Result<(Network, TrainReport), NetworkError> {
    settings.validate()?;
    if data.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    let spec = net.spec();
    if data.state_dim() != spec.state_dim || data.action_dim() != spec.action_dim {
        return Err(NetworkError::ShapeMismatch {
            expected: (spec.state_dim, spec.action_dim),
            actual: (data.state_dim(), data.action_dim()),
        });
    }
    let start = Instant::now();
    let n_in = spec.input_dim();
    let n_out = spec.state_dim;

    let inputs: Vec<Vec<f64>> = data
        .samples()
        .iter()
        .map(|s| s.x.iter().chain(&s.u).copied().collect())
        .collect();
    let targets: Vec<Vec<f64>> = data
        .samples()
        .iter()
        .map(|s| match spec.target {
            TargetMode::NextState => s.x_next.iter().copied().collect(),
            TargetMode::Delta => (&s.x_next - &s.x).iter().copied().collect(),
        })
        .collect();

    let mut net = net.clone();
    if settings.refresh_normalization {
        let (input_mean, input_std) = Normalization::column_stats(&inputs, n_in);
        let (output_mean, output_std) = Normalization::column_stats(&targets, n_out);
        net.normalization = Normalization {
            input_mean,
            input_std,
            output_mean,
            output_std,
        };
    }
    let norm = net.normalization.clone();
    let z = Mat::from_vec(
        inputs.len(),
        n_in,
        inputs
            .iter()
            .flat_map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - norm.input_mean[j]) / norm.input_std[j])
            })
            .collect(),
    );
    let y = Mat::from_vec(
        targets.len(),
        n_out,
        targets
            .iter()
            .flat_map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - norm.output_mean[j]) / norm.output_std[j])
            })
            .collect(),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((data.len() as f64 * settings.validation_fraction) as usize).min(data.len().saturating_sub(2));
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let (val_z, val_y) = (gather(&z, val_idx), gather(&y, val_idx));

    let mut adam = Adam::new(net.parameter_count(), settings.learning_rate);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, Network)> = None;

    for epoch in 0..settings.epochs {
        adam.lr = settings.learning_rate_at(epoch);
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let visit = settings
            .samples_per_epoch
            .map_or(train_idx.len(), |n| n.min(train_idx.len()));
        for batch in train_idx[..visit].chunks(settings.batch_size) {
            // Batch statistics need at least two rows.
            if batch.len() < 2 {
                continue;
            }
            let bz = gather(&z, batch);
            let by = gather(&y, batch);
            let (pred, caches) = net.forward_train(bz);
            let loss = mse(&pred, &by);
            let scale = 2.0 / pred.data.len() as f64;
            let grad = Mat::from_vec(
                pred.rows,
                pred.cols,
                pred.data.iter().zip(&by.data).map(|(p, t)| scale * (p - t)).collect(),
            );
            let grads = net.backward(&caches, grad);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                report.diverged = true;
                break;
            }
            adam.step(net.parameters_mut(), &grads);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        if report.diverged {
            break;
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        report.train_loss.push(train_loss);
        let selection = if n_val > 0 {
            let val = mse(&net.forward_inference(val_z.clone()), &val_y);
            report.validation_loss.push(val);
            val
        } else {
            train_loss
        };
        if !selection.is_finite() {
            report.diverged = true;
            break;
        }
        if best.as_ref().is_none_or(|(l, _)| selection < *l) {
            best = Some((selection, net.clone()));
            report.best_epoch = Some(epoch);
        }
    }

    report.wall_time = start.elapsed().as_secs_f64();
    let out = match best {
        Some((_, b)) => b,
        None => net,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SampleTag, TransitionSample};
    use crate::neural::{Architecture, NetworkSpec};
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    fn linear_dataset(a: &DMatrix<f64>, b: &DMatrix<f64>, count: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Dataset::new(a.nrows(), b.ncols(), "linear", seed);
        for _ in 0..count {
            let x = DVector::from_fn(a.nrows(), |_, _| rng.random_range(-1.0..1.0));
            let u = DVector::from_fn(b.ncols(), |_, _| rng.random_range(-1.0..1.0));
            let x_next = a * &x + b * &u;
            data.push(TransitionSample {
                x,
                u,
                x_next,
                tag: SampleTag::RandomTrial,
            })
            .unwrap();
        }
        data
    }

    fn plant() -> (DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.05, 0.95]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
        )
    }

    #[test]
    fn learns_linear_dynamics() {
        let (a, b) = plant();
        let data = linear_dataset(&a, &b, 2000, 1);
        let net = Network::new(NetworkSpec::new(Architecture::SmallFcnn, 2, 1).with_seed(1)).unwrap();
        let settings = TrainSettings {
            epochs: 150,
            batch_size: 64,
            ..TrainSettings::default()
        };
        let (net, report) = train(&net, &data, &settings).unwrap();
        assert!(!report.diverged);
        assert!(
            *report.validation_loss.last().unwrap() < 1e-2,
            "{:?}",
            report.validation_loss.last()
        );

        let test = linear_dataset(&a, &b, 200, 2);
        let mse: f64 = test
            .samples()
            .iter()
            .map(|s| (net.predict(&s.x, &s.u).unwrap() - &s.x_next).norm_squared() / 2.0)
            .sum::<f64>()
            / 200.0;
        assert!(mse < 1e-4, "one-step mse {mse}");

        let (na, nb) = net
            .input_jacobians(&DVector::from_vec(vec![0.2, -0.3]), &DVector::from_vec(vec![0.1]))
            .unwrap();
        assert!((&na - &a).amax() <= 0.05 * a.amax(), "{na} vs {a}");
        assert!((&nb - &b).amax() <= 0.05 * a.amax(), "{nb} vs {b}");
    }

    #[test]
    fn loss_curve_and_best_epoch() {
        let (a, b) = plant();
        let data = linear_dataset(&a, &b, 300, 3);
        let net = Network::new(NetworkSpec::new(Architecture::SmallFcnn, 2, 1)).unwrap();
        let settings = TrainSettings {
            epochs: 15,
            batch_size: 32,
            ..TrainSettings::default()
        };
        let (_, report) = train(&net, &data, &settings).unwrap();
        assert_eq!(report.train_loss.len(), 15);
        assert_eq!(report.validation_loss.len(), 15);
        assert!(report.train_loss.last() < report.train_loss.first());
        let best = report.best_so_far();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
        let epoch = report.best_epoch.unwrap();
        assert_eq!(report.validation_loss[epoch], *best.last().unwrap());
        assert!(report.wall_time > 0.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let (a, b) = plant();
        let data = linear_dataset(&a, &b, 200, 4);
        let net = Network::new(NetworkSpec::new(Architecture::Residual, 2, 1)).unwrap();
        let mut settings = TrainSettings {
            epochs: 3,
            batch_size: 50,
            ..TrainSettings::default()
        };
        let (n1, r1) = train(&net, &data, &settings).unwrap();
        let (n2, r2) = train(&net, &data, &settings).unwrap();
        assert_eq!(n1, n2);
        assert_eq!(r1.train_loss, r2.train_loss);
        settings.seed = 1;
        let (n3, _) = train(&net, &data, &settings).unwrap();
        assert_ne!(n1.parameters(), n3.parameters());
    }

    #[test]
    fn rejects_bad_input() {
        let net = Network::new(NetworkSpec::new(Architecture::SmallFcnn, 2, 1)).unwrap();
        let empty = Dataset::new(2, 1, "linear", 0);
        assert_eq!(
            train(&net, &empty, &TrainSettings::default()).unwrap_err(),
            NetworkError::EmptyDataset
        );
        let wrong = Dataset::new(3, 1, "linear", 0);
        assert!(matches!(
            train(&net, &wrong, &TrainSettings::default()),
            Err(NetworkError::EmptyDataset | NetworkError::ShapeMismatch { .. })
        ));
        let (a, b) = plant();
        let data = linear_dataset(&a, &b, 10, 0);
        let bad = TrainSettings {
            learning_rate: -1.0,
            ..TrainSettings::default()
        };
        assert!(matches!(
            train(&net, &data, &bad),
            Err(NetworkError::InvalidSettings(_))
        ));
    }
}
