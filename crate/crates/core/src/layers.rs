//! Parameterized layers: convolution, batch normalization, dropout, linear.
//!
//! Layers own their tensors and know how to initialize themselves; the
//! forward math lives on the tape. Standalone `forward` methods bind the
//! layer's parameters as constants, which is what evaluation and unit tests
//! want. Training binds them as gradient leaves instead (see the model),
//! so these structs stay free of tape state.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{BatchStats, Mode, Tape, VarId};
use crate::tensor::Tensor;

/// Kaiming-uniform bound for ReLU fan-in: `sqrt(6 / fan_in)`.
fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer<T: Scalar> {
    /// `[out_c, in_c, k, k]`
    pub weight: Tensor<T>,
    /// `[out_c]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    /// Kaiming-uniform weights over fan-in `in_c * k * k`, zero bias.
    pub fn kaiming(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = kaiming_bound(in_c * k * k);
        Conv2dLayer {
            weight: Tensor::uniform(&[out_c, in_c, k, k], -bound, bound, rng),
            bias: Tensor::zeros(&[out_c]),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer<T: Scalar> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn kaiming(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = kaiming_bound(in_dim);
        LinearLayer {
            weight: Tensor::uniform(&[out_dim, in_dim], -bound, bound, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    /// Unbiased running variance estimate.
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Folds one batch's statistics into the running estimates. The batch
    /// variance arrives biased (1/N); the running estimate stores the
    /// unbiased (1/(N-1)) version.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        let unbias = T::from_f64(stats.n as f64 / (stats.n - 1) as f64);
        for (rm, &bm) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *rm = keep * *rm + m * bm;
        }
        for (rv, &bv) in self.running_var.data_mut().iter_mut().zip(&stats.var_biased) {
            *rv = keep * *rv + m * (bv * unbias);
        }
    }

    /// Standalone forward; train mode updates the running statistics.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: VarId, mode: Mode) -> Result<VarId> {
        let gamma = tape.constant(self.gamma.clone());
        let beta = tape.constant(self.beta.clone());
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batchnorm_train(x, gamma, beta, self.eps)?;
                self.update_running(&stats);
                Ok(y)
            }
            Mode::Eval => tape.batchnorm_eval(
                x,
                gamma,
                beta,
                &self.running_mean,
                &self.running_var,
                self.eps,
            ),
        }
    }
}

/// Inverted dropout: kept units are scaled by `1/(1-rate)` at train time so
/// evaluation is the identity map. Each layer owns its mask stream.
#[derive(Debug, Clone)]
pub struct DropoutLayer {
    pub rate: f64,
    pub rng: Rng,
}

impl DropoutLayer {
    pub fn new(rate: f64, rng: Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(
                "dropout",
                format!("rate must lie in [0, 1), got {rate}"),
            ));
        }
        Ok(DropoutLayer { rate, rng })
    }

    /// Draws a fresh Bernoulli(1-rate) mask scaled by `1/(1-rate)`,
    /// advancing this layer's stream by one draw per element.
    pub fn draw_mask<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let keep = 1.0 - self.rate;
        let scale = T::from_f64(1.0 / keep);
        Tensor::from_fn(shape, |_| {
            if self.rng.bernoulli(keep) {
                scale
            } else {
                T::zero()
            }
        })
    }

    pub fn forward<T: Scalar>(&mut self, tape: &mut Tape<T>, x: VarId, mode: Mode) -> Result<VarId> {
        match mode {
            Mode::Eval => Ok(x),
            Mode::Train => {
                let mask = self.draw_mask(tape.shape(x).to_vec().as_slice());
                let m = tape.constant(mask);
                tape.mul(x, m)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;

    #[test]
    fn conv_identity_weights_pass_input_through() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::uniform(&[1, 1, 5, 5], 0.0, 1.0, &mut rng);
        let layer = Conv2dLayer {
            weight: Tensor::ones(&[1, 1, 1, 1]),
            bias: Tensor::zeros(&[1]),
            stride: 1,
            padding: 0,
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let y = layer.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    /// Direct six-level-loop convolution, independent of the tape kernel.
    fn naive_conv2d(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (bsz, cin, h, wd) = (
            x.shape()[0],
            x.shape()[1],
            x.shape()[2],
            x.shape()[3],
        );
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[bsz, cout, oh, ow]);
        for bi in 0..bsz {
            for oc in 0..cout {
                for orow in 0..oh {
                    for ocol in 0..ow {
                        let mut acc = b.data()[oc];
                        for ic in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ir = orow * stride + ki;
                                    let jc = ocol * stride + kj;
                                    if ir < pad || jc < pad {
                                        continue;
                                    }
                                    let (ir, jc) = (ir - pad, jc - pad);
                                    if ir >= h || jc >= wd {
                                        continue;
                                    }
                                    acc += x.data()[((bi * cin + ic) * h + ir) * wd + jc]
                                        * w.data()[((oc * cin + ic) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + oc) * oh + orow) * ow + ocol] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_loop_oracle() {
        let mut rng = Rng::new(77);
        let x = Tensor::uniform(&[2, 3, 9, 9], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[4, 3, 3, 3], -0.5, 0.5, &mut rng);
        let b = Tensor::uniform(&[4], -0.2, 0.2, &mut rng);
        let expect = naive_conv2d(&x, &w, &b, 1, 1);

        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let wv = tape.leaf(w, false);
        let bv = tape.leaf(b, false);
        let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
        assert_eq!(tape.shape(y), expect.shape());
        let delta = tape.value(y).max_abs_diff(&expect);
        assert!(delta < 1e-5, "max |delta| = {delta}");
    }

    #[test]
    fn maxpool_matches_scan_order_oracle_exactly() {
        // Distinct values so the argmax is unambiguous.
        let mut perm: Vec<usize> = (0..2 * 13 * 13).collect();
        Rng::new(41).shuffle(&mut perm);
        let x = Tensor::from_fn(&[1, 2, 13, 13], |i| perm[i] as f64 * 0.01);
        let (k, s) = (3, 2);
        let oh = (13 - k) / s + 1;

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let y = tape.maxpool2d(xv, k, s).unwrap();

        for c in 0..2 {
            for orow in 0..oh {
                for ocol in 0..ow_of(13, k, s) {
                    let mut best = f64::NEG_INFINITY;
                    for dr in 0..k {
                        for dc in 0..k {
                            let v = x.data()[(c * 13 + orow * s + dr) * 13 + ocol * s + dc];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    let got = tape.value(y).data()[(c * oh + orow) * ow_of(13, k, s) + ocol];
                    assert_eq!(got, best);
                }
            }
        }
    }

    fn ow_of(n: usize, k: usize, s: usize) -> usize {
        (n - k) / s + 1
    }

    #[test]
    fn linear_identity_weights() {
        let layer = LinearLayer {
            weight: Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }),
            bias: Tensor::zeros(&[3]),
        };
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let y = layer.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn linear_gradcheck_3x5_to_4() {
        let mut rng = Rng::new(8);
        let x = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
        let report = gradcheck(
            |tape, vars| {
                let y = tape.linear(vars[0], vars[1], vars[2])?;
                Ok(tape.sum_all(y))
            },
            &[x, w, b],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn linear_width_mismatch_errors() {
        let layer = LinearLayer::<f64>::kaiming(5, 4, &mut Rng::new(0));
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 6]), false);
        assert!(layer.forward(&mut tape, x).is_err());
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut layer = DropoutLayer::new(0.5, Rng::new(3)).unwrap();
        let x = Tensor::<f64>::uniform(&[4, 4], -1.0, 1.0, &mut Rng::new(4));
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let y = layer.forward(&mut tape, xv, Mode::Eval).unwrap();
        assert_eq!(y, xv);
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn dropout_rate_zero_train_is_identity() {
        let mut layer = DropoutLayer::new(0.0, Rng::new(3)).unwrap();
        let x = Tensor::<f64>::uniform(&[4, 4], -1.0, 1.0, &mut Rng::new(4));
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let y = layer.forward(&mut tape, xv, Mode::Train).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        assert!(DropoutLayer::new(1.0, Rng::new(0)).is_err());
        assert!(DropoutLayer::new(-0.1, Rng::new(0)).is_err());
    }

    #[test]
    fn dropout_keeps_half_and_rescales_by_two() {
        let mut layer = DropoutLayer::new(0.5, Rng::new(99)).unwrap();
        let n = 100_000;
        let mask: Tensor<f64> = layer.draw_mask(&[n]);
        let kept = mask.data().iter().filter(|&&v| v != 0.0).count();
        let frac = kept as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "kept fraction {frac}");
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_expectation_preserves_input() {
        // E[dropout(x)] = x, checked at 1e5 samples within 2%
        let mut layer = DropoutLayer::new(0.3, Rng::new(123)).unwrap();
        let n = 100_000;
        let mask: Tensor<f64> = layer.draw_mask(&[n]);
        let mean = mask.sum() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mask mean {mean}");
    }

    #[test]
    fn dropout_fixed_mask_gradcheck() {
        let mut layer = DropoutLayer::new(0.5, Rng::new(7)).unwrap();
        let mask: Tensor<f64> = layer.draw_mask(&[4, 6]);
        let x = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut Rng::new(8));
        let report = gradcheck(
            |tape, vars| {
                let m = tape.constant(mask.clone());
                let y = tape.mul(vars[0], m)?;
                Ok(tape.sum_all(y))
            },
            &[x],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed());
    }

    #[test]
    fn batchnorm_running_stats_update_matches_convention() {
        let mut bn = BatchNormLayer::<f64>::new(2);
        let stats = BatchStats {
            mean: vec![1.0, -1.0],
            var_biased: vec![4.0, 9.0],
            n: 4,
        };
        bn.update_running(&stats);
        // rm = 0.9*0 + 0.1*mean; rv = 0.9*1 + 0.1*(var*4/3)
        assert!((bn.running_mean.data()[0] - 0.1).abs() < 1e-12);
        assert!((bn.running_mean.data()[1] + 0.1).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 4.0 * 4.0 / 3.0)).abs() < 1e-12);
        assert!((bn.running_var.data()[1] - (0.9 + 0.1 * 9.0 * 4.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn kaiming_init_is_deterministic_and_centered() {
        let a = LinearLayer::<f64>::kaiming(256, 2048, &mut Rng::new(5));
        let b = LinearLayer::<f64>::kaiming(256, 2048, &mut Rng::new(5));
        assert_eq!(a.weight.data(), b.weight.data());

        let n = a.weight.numel() as f64;
        let sigma = kaiming_bound(256) / 3f64.sqrt();
        let mean = a.weight.sum() / n;
        assert!(
            mean.abs() < 3.0 * sigma / n.sqrt(),
            "mean {mean} vs bound {}",
            3.0 * sigma / n.sqrt()
        );
    }
}
