//! The two feed-forward heads: the batch-normalised classifier and the
//! platform discriminator.
//!
//! Both are two-layer networks over pooled encoder features with ReLU in the
//! middle and softmax on top. Only the classifier carries batch
//! normalisation; its running statistics are what adaptive batch
//! normalisation later replaces with target-stream moments.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{randn2, softmax_rows};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const INIT_STD: f64 = 0.02;

/// Hidden width of both heads: 512 reduces the pooled features, 3072 expands
/// them. Any positive width is accepted; these two are the supported modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub hidden: usize,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Classifier weights plus batch-normalisation state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    pub bn_mean: Array1<f64>,
    pub bn_var: Array1<f64>,
    pub momentum: f64,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Intermediates kept for the train-mode backward pass.
pub struct ClassifierCache {
    x: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    bn_out: Array2<f64>,
    relu_out: Array2<f64>,
}

/// Intermediates for eval-mode input gradients (the KLD path).
pub struct ClassifierEvalCache {
    bn_out: Array2<f64>,
}

/// Gradients on the trainable classifier tensors (running stats excluded).
#[derive(Debug, Clone)]
pub struct ClassifierGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ClassifierParams {
    pub fn init(cfg: HeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(ClassifierParams {
            w1: randn2(cfg.input_dim, cfg.hidden, INIT_STD, rng),
            b1: Array1::zeros(cfg.hidden),
            bn_gamma: Array1::ones(cfg.hidden),
            bn_beta: Array1::zeros(cfg.hidden),
            bn_mean: Array1::zeros(cfg.hidden),
            bn_var: Array1::ones(cfg.hidden),
            momentum: BN_MOMENTUM,
            w2: randn2(cfg.hidden, 2, INIT_STD, rng),
            b2: Array1::zeros(2),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    fn bn_input(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w1);
        z += &self.b1;
        z
    }

    /// Train-mode forward: batch statistics normalise the hidden layer and
    /// the running statistics are nudged by `momentum`.
    pub fn forward_train(&mut self, x: &Array2<f64>) -> Result<(Array2<f64>, ClassifierCache)> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::Numerical(
                "train-mode batch normalisation needs at least 2 rows".into(),
            ));
        }
        let z = self.bn_input(x);
        let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
        let mut var = Array1::<f64>::zeros(z.ncols());
        for row in z.axis_iter(Axis(0)) {
            for (j, &v) in row.iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        var.mapv_inplace(|v| (v / n as f64).max(BN_EPS));

        for j in 0..mean.len() {
            self.bn_mean[j] = (1.0 - self.momentum) * self.bn_mean[j] + self.momentum * mean[j];
            self.bn_var[j] =
                ((1.0 - self.momentum) * self.bn_var[j] + self.momentum * var[j]).max(BN_EPS);
        }

        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut xhat = z;
        for mut row in xhat.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let mut bn_out = xhat.clone();
        for mut row in bn_out.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.bn_gamma[j] * *v + self.bn_beta[j];
            }
        }
        let relu_out = bn_out.mapv(|v| v.max(0.0));
        let mut logits = relu_out.dot(&self.w2);
        logits += &self.b2;
        let probs = softmax_rows(&logits);
        Ok((
            probs,
            ClassifierCache { x: x.clone(), xhat, inv_std, bn_out, relu_out },
        ))
    }

    /// Eval-mode forward: running statistics, a pure per-row function.
    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_eval_cached(x).0
    }

    pub fn forward_eval_cached(&self, x: &Array2<f64>) -> (Array2<f64>, ClassifierEvalCache) {
        let mut z = self.bn_input(x);
        for mut row in z.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                let xh = (*v - self.bn_mean[j]) / (self.bn_var[j] + BN_EPS).sqrt();
                *v = self.bn_gamma[j] * xh + self.bn_beta[j];
            }
        }
        let bn_out = z;
        let relu_out = bn_out.mapv(|v| v.max(0.0));
        let mut logits = relu_out.dot(&self.w2);
        logits += &self.b2;
        (softmax_rows(&logits), ClassifierEvalCache { bn_out })
    }

    /// Train-mode backward from logit gradients. Returns parameter gradients
    /// and the gradient on the pooled input.
    pub fn backward_train(
        &self,
        cache: &ClassifierCache,
        d_logits: &Array2<f64>,
    ) -> (ClassifierGrads, Array2<f64>) {
        let n = cache.x.nrows() as f64;
        let w2_grad = cache.relu_out.t().dot(d_logits);
        let b2_grad = d_logits.sum_axis(Axis(0));
        let mut d_bn = d_logits.dot(&self.w2.t());
        ndarray::Zip::from(&mut d_bn).and(&cache.bn_out).for_each(|d, &o| {
            if o <= 0.0 {
                *d = 0.0;
            }
        });

        let bn_gamma_grad = (&d_bn * &cache.xhat).sum_axis(Axis(0));
        let bn_beta_grad = d_bn.sum_axis(Axis(0));

        // Batch-statistics backward.
        let mut d_xhat = d_bn;
        for mut row in d_xhat.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= self.bn_gamma[j];
            }
        }
        let sum_dxhat = d_xhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&d_xhat * &cache.xhat).sum_axis(Axis(0));
        let mut d_z = Array2::<f64>::zeros(d_xhat.raw_dim());
        for (i, row) in d_xhat.axis_iter(Axis(0)).enumerate() {
            for (j, &dxh) in row.iter().enumerate() {
                d_z[[i, j]] = cache.inv_std[j] / n
                    * (n * dxh - sum_dxhat[j] - cache.xhat[[i, j]] * sum_dxhat_xhat[j]);
            }
        }

        let w1_grad = cache.x.t().dot(&d_z);
        let b1_grad = d_z.sum_axis(Axis(0));
        let d_x = d_z.dot(&self.w1.t());
        (
            ClassifierGrads {
                w1: w1_grad,
                b1: b1_grad,
                bn_gamma: bn_gamma_grad,
                bn_beta: bn_beta_grad,
                w2: w2_grad,
                b2: b2_grad,
            },
            d_x,
        )
    }

    /// Eval-mode input gradient (classifier frozen). Used by the measurer
    /// path during adaptation.
    pub fn backward_eval_input(
        &self,
        cache: &ClassifierEvalCache,
        d_logits: &Array2<f64>,
    ) -> Array2<f64> {
        let mut d_bn = d_logits.dot(&self.w2.t());
        ndarray::Zip::from(&mut d_bn).and(&cache.bn_out).for_each(|d, &o| {
            if o <= 0.0 {
                *d = 0.0;
            }
        });
        let mut d_z = d_bn;
        for mut row in d_z.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= self.bn_gamma[j] / (self.bn_var[j] + BN_EPS).sqrt();
            }
        }
        d_z.dot(&self.w1.t())
    }

    /// Trainable parameters, flattened in a fixed order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.bn_gamma.iter());
        out.extend(self.bn_beta.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        let mut next = move || it.next().expect("flat vector long enough");
        for v in self.w1.iter_mut() {
            *v = next();
        }
        for v in self.b1.iter_mut() {
            *v = next();
        }
        for v in self.bn_gamma.iter_mut() {
            *v = next();
        }
        for v in self.bn_beta.iter_mut() {
            *v = next();
        }
        for v in self.w2.iter_mut() {
            *v = next();
        }
        for v in self.b2.iter_mut() {
            *v = next();
        }
    }
}

/// Spec-level entry point: forward in the requested mode.
pub fn classifier_forward(
    params: &mut ClassifierParams,
    pooled: &Array2<f64>,
    mode: BnMode,
) -> Result<Array2<f64>> {
    match mode {
        BnMode::Train => params.forward_train(pooled).map(|(p, _)| p),
        BnMode::Eval => Ok(params.forward_eval(pooled)),
    }
}

/// Replace the running batch-norm statistics with the aggregate moments of
/// the target pooled-feature stream at the BN input. Weights are untouched.
pub fn adapt_bn_statistics<I>(params: &mut ClassifierParams, stream: I) -> Result<()>
where
    I: IntoIterator<Item = Array2<f64>>,
{
    let h = params.hidden();
    let mut count = 0usize;
    let mut sum = Array1::<f64>::zeros(h);
    let mut sumsq = Array1::<f64>::zeros(h);
    for pooled in stream {
        let z = params.bn_input(&pooled);
        count += z.nrows();
        for row in z.axis_iter(Axis(0)) {
            for (j, &v) in row.iter().enumerate() {
                sum[j] += v;
                sumsq[j] += v * v;
            }
        }
    }
    if count == 0 {
        return Err(Error::Numerical("adapt_bn_statistics: empty feature stream".into()));
    }
    let n = count as f64;
    for j in 0..h {
        let mean = sum[j] / n;
        let var = (sumsq[j] / n - mean * mean).max(BN_EPS);
        params.bn_mean[j] = mean;
        params.bn_var[j] = var;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

/// Platform discriminator: index 0 = source, index 1 = target.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub struct DiscriminatorCache {
    x: Array2<f64>,
    z1: Array2<f64>,
    relu_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl DiscriminatorParams {
    pub fn init(cfg: HeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(DiscriminatorParams {
            w1: randn2(cfg.input_dim, cfg.hidden, INIT_STD, rng),
            b1: Array1::zeros(cfg.hidden),
            w2: randn2(cfg.hidden, 2, INIT_STD, rng),
            b2: Array1::zeros(2),
        })
    }

    pub fn forward(&self, pooled: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(pooled).0
    }

    pub fn forward_cached(&self, pooled: &Array2<f64>) -> (Array2<f64>, DiscriminatorCache) {
        let mut z1 = pooled.dot(&self.w1);
        z1 += &self.b1;
        let relu_out = z1.mapv(|v| v.max(0.0));
        let mut logits = relu_out.dot(&self.w2);
        logits += &self.b2;
        (
            softmax_rows(&logits),
            DiscriminatorCache { x: pooled.clone(), z1, relu_out },
        )
    }

    /// Backward from logit gradients; returns parameter gradients plus the
    /// gradient on the pooled input (the adversarial signal for the encoder).
    pub fn backward(
        &self,
        cache: &DiscriminatorCache,
        d_logits: &Array2<f64>,
    ) -> (DiscriminatorGrads, Array2<f64>) {
        let w2_grad = cache.relu_out.t().dot(d_logits);
        let b2_grad = d_logits.sum_axis(Axis(0));
        let mut d_relu = d_logits.dot(&self.w2.t());
        ndarray::Zip::from(&mut d_relu).and(&cache.z1).for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });
        let w1_grad = cache.x.t().dot(&d_relu);
        let b1_grad = d_relu.sum_axis(Axis(0));
        let d_x = d_relu.dot(&self.w1.t());
        (DiscriminatorGrads { w1: w1_grad, b1: b1_grad, w2: w2_grad, b2: b2_grad }, d_x)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        let mut next = move || it.next().expect("flat vector long enough");
        for v in self.w1.iter_mut() {
            *v = next();
        }
        for v in self.b1.iter_mut() {
            *v = next();
        }
        for v in self.w2.iter_mut() {
            *v = next();
        }
        for v in self.b2.iter_mut() {
            *v = next();
        }
    }
}

/// Spec-level entry point.
pub fn discriminator_forward(params: &DiscriminatorParams, pooled: &Array2<f64>) -> Array2<f64> {
    params.forward(pooled)
}
