//! Adam with coupled weight decay, plus the epoch-level training driver.

use std::time::Instant;

use crate::data::{Label, LoadedDataset};
use crate::error::{Error, Result};
use crate::model::{predictions_from_logits, Model};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{stack, Tensor};

/// Adam state: first/second moments per parameter (model order), a step
/// counter, and the hyperparameters. Weight decay is coupled (classic):
/// the decay term is added to the gradient before the moment updates.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64, weight_decay: f64, param_shapes: &[Vec<usize>]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_model(lr: f64, weight_decay: f64, model: &Model<T>) -> Self {
        let shapes: Vec<Vec<usize>> = model
            .param_tensors()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        Self::new(lr, weight_decay, &shapes)
    }

    /// One update:
    /// `g += wd*theta; m = b1*m + (1-b1)*g; v = b2*v + (1-b2)*g^2;`
    /// `theta -= lr * mhat / (sqrt(vhat) + eps)` with bias-corrected
    /// moments. A non-finite gradient aborts the whole step before any
    /// parameter changes, naming the offending parameter.
    pub fn step(
        &mut self,
        names: &[String],
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::contract(
                "adam_step",
                format!(
                    "parameter/gradient/state counts disagree: {} / {} / {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(Error::NonFiniteGrad {
                    name: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
                });
            }
        }
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let wd = T::from_f64(self.weight_decay);
        let t_i32 = self.t.min(i32::MAX as u64) as i32;
        let corr1 = T::from_f64(1.0 - self.beta1.powi(t_i32));
        let corr2 = T::from_f64(1.0 - self.beta2.powi(t_i32));

        for ((theta, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let td = theta.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..td.len() {
                let g = grad.data()[i] + wd * td[i];
                md[i] = b1 * md[i] + (one - b1) * g;
                vd[i] = b2 * vd[i] + (one - b2) * g * g;
                let mhat = md[i] / corr1;
                let vhat = vd[i] / corr2;
                td[i] = td[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 32,
            lr: 1e-5,
            weight_decay: 0.01,
            epochs: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub wall_seconds: f64,
}

/// Shuffled mini-batch training with a constant learning rate. Batches
/// larger than the dataset degrade to one single smaller batch; the final
/// partial batch of each epoch is kept.
pub fn train_epochs<T: Scalar>(
    model: &mut Model<T>,
    data: &LoadedDataset<T>,
    cfg: &TrainConfig,
) -> Result<(Vec<EpochLog>, AdamState<T>)> {
    if data.is_empty() {
        return Err(Error::contract("train", "empty training set"));
    }
    if cfg.batch == 0 {
        return Err(Error::contract("train", "batch size must be positive"));
    }
    data.require_both_classes()?;

    let names = model.param_names();
    let mut adam = AdamState::for_model(cfg.lr, cfg.weight_decay, model);
    let mut shuffle_rng = Rng::derive(cfg.seed, 0xE90C);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let images: Vec<&Tensor<T>> = chunk.iter().map(|&i| &data.images[i]).collect();
            let labels: Vec<Label> = chunk.iter().map(|&i| data.labels[i]).collect();
            let x = stack(&images)?;

            let mut tape = Tape::new();
            let (loss, out, bound) = model.train_loss(&mut tape, &x, &labels)?;
            tape.backward(loss)?;
            let grads: Vec<Tensor<T>> = bound
                .ordered()
                .iter()
                .map(|&v| tape.grad(v).clone())
                .collect();
            loss_sum += tape.value(loss).item().to_f64_lossy() * chunk.len() as f64;
            for (pred, label) in predictions_from_logits(tape.value(out.logits))
                .iter()
                .zip(&labels)
            {
                if pred.label == *label {
                    correct += 1;
                }
            }

            let mut params = model.param_tensors_mut();
            adam.step(&names, &mut params, &grads)?;
        }

        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: 100.0 * correct as f64 / data.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((log, adam))
}

/// Serializes a training log as line CSV: epoch, mean loss, train accuracy,
/// wall seconds.
pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss,train_accuracy,wall_seconds\n");
    for row in log {
        out += &format!(
            "{},{},{},{:.3}\n",
            row.epoch, row.mean_loss, row.train_accuracy, row.wall_seconds
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let mut theta = Tensor::new(&[2], vec![1.5f64, -2.5]).unwrap();
        let grads = [Tensor::zeros(&[2])];
        let mut adam = AdamState::new(1e-3, 0.0, &[vec![2]]);
        let before = theta.clone();
        adam.step(&["p".into()], &mut [&mut theta], &grads).unwrap();
        assert_eq!(theta.data(), before.data());
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn golden_single_scalar_step() {
        // Frozen from an independent double-precision Adam script:
        // theta=1, g=1, lr=1e-5, wd=0.01, b1=0.9, b2=0.999, eps=1e-8.
        let mut theta = Tensor::new(&[1], vec![1.0f64]).unwrap();
        let grads = [Tensor::new(&[1], vec![1.0f64]).unwrap()];
        let mut adam = AdamState::new(1e-5, 0.01, &[vec![1]]);
        adam.step(&["p".into()], &mut [&mut theta], &grads).unwrap();
        let expect = 0.999990000000099_f64;
        assert!(
            (theta.data()[0] - expect).abs() < 1e-12,
            "got {}, want {expect}",
            theta.data()[0]
        );
    }

    #[test]
    fn identical_tensors_with_identical_grads_stay_identical() {
        let mut a = Tensor::new(&[3], vec![0.5f64, -0.25, 2.0]).unwrap();
        let mut b = a.clone();
        let g = Tensor::new(&[3], vec![0.1f64, 0.2, -0.3]).unwrap();
        let mut adam = AdamState::new(1e-3, 0.01, &[vec![3], vec![3]]);
        for _ in 0..25 {
            let grads = [g.clone(), g.clone()];
            adam.step(
                &["a".into(), "b".into()],
                &mut [&mut a, &mut b],
                &grads,
            )
            .unwrap();
        }
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn non_finite_gradient_aborts_naming_parameter() {
        let mut theta = Tensor::new(&[1], vec![1.0f64]).unwrap();
        let before = theta.clone();
        let grads = [Tensor::new(&[1], vec![f64::NAN]).unwrap()];
        let mut adam = AdamState::new(1e-3, 0.0, &[vec![1]]);
        let err = adam
            .step(&["conv1.weight".into()], &mut [&mut theta], &grads)
            .unwrap_err()
            .to_string();
        assert!(err.contains("conv1.weight"), "{err}");
        assert_eq!(theta.data(), before.data());
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn weight_decay_alone_shrinks_parameters_monotonically() {
        let mut theta = Tensor::new(&[1], vec![4.0f64]).unwrap();
        let mut adam = AdamState::new(1e-2, 0.1, &[vec![1]]);
        let mut prev = theta.data()[0].abs();
        for _ in 0..50 {
            let grads = [Tensor::zeros(&[1])];
            adam.step(&["p".into()], &mut [&mut theta], &grads).unwrap();
            let now = theta.data()[0].abs();
            assert!(now < prev, "norm should shrink: {now} !< {prev}");
            prev = now;
        }
    }
}
