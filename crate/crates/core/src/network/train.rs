use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy, argmax_rows, NetworkError, NoErosion, Result, TrainedNetwork, TrainingMeta};
use crate::autodiff::{Reduction, Tape};
use crate::dataio::{Dataset, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// `v = momentum * v + g; w -= lr * v`
    SgdMomentum,
    /// Adam with the usual bias-corrected moments (beta1 = 0.9, beta2 = 0.999).
    Adam,
}

/// Mini-batch training with step learning-rate decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiply the learning rate by `decay_factor` every `decay_every`
    /// epochs; 0 disables decay.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.002,
            momentum: 0.9,
            decay_every: 0,
            decay_factor: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = epoch.checked_div(self.decay_every).unwrap_or(0);
        self.learning_rate * self.decay_factor.powi(steps as i32)
    }
}

/// Trains `net` on the train split of `data`, recording train and
/// validation accuracy.
pub fn train(net: TrainedNetwork, data: &Dataset, cfg: &TrainConfig) -> Result<TrainedNetwork> {
    let train_set = data.split(Split::Train);
    let val_set = data.split(Split::Val);
    if train_set.is_empty() {
        return Err(NetworkError::EmptySplit("train"));
    }
    if let Some(&label) = train_set.labels().iter().find(|&&l| l >= net.classes()) {
        return Err(crate::autodiff::AutodiffError::LabelOutOfRange {
            label,
            classes: net.classes(),
        }
        .into());
    }
    let mut weights: Vec<_> = net.params().iter().map(|p| p.value.clone()).collect();
    let mut first: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut second = first.clone();
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batch_size = cfg.batch_size.max(1);
    let mut last_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.learning_rate_at(epoch);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch = train_set.batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels()[i]).collect();
            let mut tape = Tape::new();
            let vars: Vec<_> = weights.iter().map(|w| tape.leaf(w.clone(), true)).collect();
            let x = net.input_on(&mut tape, &batch, false)?;
            let z = net.forward_on(&mut tape, x, &vars, &NoErosion)?;
            let loss = tape.cross_entropy(z, &labels, Reduction::Mean)?;
            let value = tape.value(loss).item().expect("scalar loss");
            if !value.is_finite() {
                return Err(NetworkError::Diverged { epoch });
            }
            epoch_loss += value * chunk.len() as f64;
            tape.backward(loss)?;
            step += 1;
            for (k, var) in vars.iter().enumerate() {
                let g = tape.grad(*var).expect("weights require grad");
                let w = weights[k].data_mut();
                match cfg.optimizer {
                    Optimizer::SgdMomentum => {
                        for ((wi, vi), gi) in w.iter_mut().zip(&mut first[k]).zip(g.data()) {
                            *vi = cfg.momentum * *vi + gi;
                            *wi -= lr * *vi;
                        }
                    }
                    Optimizer::Adam => {
                        let (b1, b2) = (0.9, 0.999);
                        let c1 = 1.0 - f64::powi(b1, step);
                        let c2 = 1.0 - f64::powi(b2, step);
                        for (((wi, mi), vi), gi) in
                            w.iter_mut().zip(&mut first[k]).zip(&mut second[k]).zip(g.data())
                        {
                            *mi = b1 * *mi + (1.0 - b1) * gi;
                            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                            *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + 1e-8);
                        }
                    }
                }
            }
        }
        last_loss = epoch_loss / train_set.len() as f64;
        if !last_loss.is_finite() {
            return Err(NetworkError::Diverged { epoch });
        }
    }

    let mut k = 0;
    let trained = net.map_params(|_, t| {
        *t = weights[k].clone();
        k += 1;
    })?;
    let train_accuracy = split_accuracy(&trained, &train_set)?;
    let val_accuracy = if val_set.is_empty() {
        train_accuracy
    } else {
        split_accuracy(&trained, &val_set)?
    };
    Ok(trained.with_meta(TrainingMeta {
        seed: cfg.seed,
        epochs: cfg.epochs,
        train_accuracy,
        val_accuracy,
        final_loss: last_loss,
    }))
}

fn split_accuracy(net: &TrainedNetwork, data: &Dataset) -> Result<f64> {
    let logits = net.forward_with(&data.all(), &NoErosion)?;
    Ok(accuracy(&argmax_rows(&logits), data.labels()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, Task};
    use crate::network::{build, Preset};

    #[test]
    fn learning_rate_steps_down() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            decay_every: 10,
            decay_factor: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 0.1);
        assert_eq!(cfg.learning_rate_at(9), 0.1);
        assert_eq!(cfg.learning_rate_at(10), 0.05);
        assert_eq!(cfg.learning_rate_at(25), 0.025);
    }

    #[test]
    fn identical_seeds_train_identical_weights() {
        let data = gen_synthetic(Task::BlobsKd, 200, 0.05, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 4,
            ..TrainConfig::default()
        };
        let spec = Preset::PlainMlp.spec("p", &data.sample_shape, data.classes);
        let a = train(build(spec.clone(), 1).unwrap(), &data, &cfg).unwrap();
        let b = train(build(spec.clone(), 1).unwrap(), &data, &cfg).unwrap();
        assert_eq!(a, b);
        let c = train(build(spec, 2).unwrap(), &data, &TrainConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let data = gen_synthetic(Task::BlobsKd, 200, 0.05, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let spec = Preset::PlainMlp.spec("p", &data.sample_shape, data.classes);
        let huge = build(spec, 1)
            .unwrap()
            .map_params(|_, t| t.data_mut().fill(1e300))
            .unwrap();
        match train(huge, &data, &cfg) {
            Err(NetworkError::Diverged { epoch }) => assert_eq!(epoch, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
