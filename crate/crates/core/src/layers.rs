//! Trainable blocks: (binary) linear, batch normalization, softmax cross-entropy.
//!
//! Each block caches what its backward pass needs during `forward`, and
//! accumulates parameter gradients additively until `zero_grad`.

use crate::activations::sign;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// How batch normalization picks its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics, running statistics left untouched (audits, gradient checks).
    BatchStats,
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    /// Latent weights for binary layers.
    pub weight: Matrix,
    pub bias: Matrix,
    pub grad_weight: Matrix,
    pub grad_bias: Matrix,
    binary: bool,
    cache: Option<LinearCache>,
}

#[derive(Debug, Clone)]
struct LinearCache {
    x: Matrix,
    effective_weight: Matrix,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Matrix, binary: bool) -> Result<Self> {
        if bias.shape() != (weight.rows(), 1) {
            return Err(Error::shape("linear bias", weight.shape(), bias.shape()));
        }
        Ok(Self {
            grad_weight: Matrix::zeros(weight.rows(), weight.cols()),
            grad_bias: Matrix::zeros(bias.rows(), 1),
            weight,
            bias,
            binary,
            cache: None,
        })
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    /// The weights the forward pass multiplies with: `sign(W)` for binary layers.
    pub fn effective_weight(&self) -> Matrix {
        if self.binary {
            self.weight.map(sign)
        } else {
            self.weight.clone()
        }
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.in_features() {
            return Err(Error::shape(
                "linear_forward",
                self.weight.shape(),
                x.shape(),
            ));
        }
        let effective_weight = self.effective_weight();
        let out = effective_weight.matmul(x)?.add_col_broadcast(&self.bias)?;
        self.cache = Some(LinearCache {
            x: x.clone(),
            effective_weight,
        });
        Ok(out)
    }

    /// Accumulates `dW += g xᵀ`, `db += rowsum(g)` and returns `W_effᵀ g`.
    ///
    /// For binary layers the gradient with respect to `sign(W)` is routed to the
    /// latent weights unchanged.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::usage("linear_backward called before forward"))?;
        if upstream.rows() != self.out_features() || upstream.cols() != cache.x.cols() {
            return Err(Error::shape(
                "linear_backward",
                (self.out_features(), cache.x.cols()),
                upstream.shape(),
            ));
        }
        let dw = upstream.matmul(&cache.x.transpose())?;
        self.grad_weight.add_assign(&dw)?;
        self.grad_bias.add_assign(&upstream.rowsum())?;
        cache.effective_weight.transpose().matmul(upstream)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
    pub grad_gamma: Matrix,
    pub grad_beta: Matrix,
    epsilon: f64,
    momentum: f64,
    cache: Option<BatchNormCache>,
}

#[derive(Debug, Clone)]
struct BatchNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNormLayer {
    pub fn new(features: usize) -> Self {
        Self::with_params(features, BN_EPSILON, BN_MOMENTUM)
    }

    pub fn with_params(features: usize, epsilon: f64, momentum: f64) -> Self {
        assert!(epsilon > 0.0, "epsilon must be positive");
        assert!(
            momentum > 0.0 && momentum < 1.0,
            "momentum must be in (0, 1)"
        );
        Self {
            gamma: Matrix::filled(features, 1, 1.0),
            beta: Matrix::zeros(features, 1),
            running_mean: Matrix::zeros(features, 1),
            running_var: Matrix::filled(features, 1, 1.0),
            grad_gamma: Matrix::zeros(features, 1),
            grad_beta: Matrix::zeros(features, 1),
            epsilon,
            momentum,
            cache: None,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.rows()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Per-row batch mean and biased variance, in ascending sample order.
    pub fn batch_statistics(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
        let n = x.cols() as f64;
        (0..x.rows())
            .map(|i| {
                let row = x.row(i);
                let mean = row.iter().fold(0.0, |a, &v| a + v) / n;
                let var = row.iter().fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
                (mean, var)
            })
            .unzip()
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        let m = self.features();
        if x.rows() != m {
            return Err(Error::shape("batchnorm_forward", (m, 1), x.shape()));
        }
        let batch_stats = mode != Mode::Eval;
        if batch_stats && x.cols() < 2 {
            return Err(Error::usage(format!(
                "batch normalization needs a batch of at least 2 samples, got {}",
                x.cols()
            )));
        }
        let (mean, var) = if batch_stats {
            Self::batch_statistics(x)
        } else {
            (
                self.running_mean.as_slice().to_vec(),
                self.running_var.as_slice().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + self.epsilon).sqrt())
            .collect();
        let normalized = Matrix::from_fn(m, x.cols(), |i, k| (x.get(i, k) - mean[i]) * inv_std[i]);
        let out = Matrix::from_fn(m, x.cols(), |i, k| {
            self.gamma.get(i, 0) * normalized.get(i, k) + self.beta.get(i, 0)
        });

        if mode == Mode::Train {
            let n = x.cols() as f64;
            let mo = self.momentum;
            for i in 0..m {
                let rm = (1.0 - mo) * self.running_mean.get(i, 0) + mo * mean[i];
                let unbiased = var[i] * n / (n - 1.0);
                let rv = (1.0 - mo) * self.running_var.get(i, 0) + mo * unbiased;
                self.running_mean.set(i, 0, rm);
                self.running_var.set(i, 0, rv);
            }
        }
        self.cache = Some(BatchNormCache {
            normalized,
            inv_std,
            batch_stats,
        });
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::usage("batchnorm_backward called before forward"))?;
        if upstream.shape() != cache.normalized.shape() {
            return Err(Error::shape(
                "batchnorm_backward",
                cache.normalized.shape(),
                upstream.shape(),
            ));
        }
        let (m, n) = upstream.shape();
        let mut dx = Matrix::zeros(m, n);
        for i in 0..m {
            let g = upstream.row(i);
            let xhat = cache.normalized.row(i);
            let sum_g = g.iter().fold(0.0, |a, &v| a + v);
            let sum_g_xhat = g.iter().zip(xhat).fold(0.0, |a, (&gv, &xv)| a + gv * xv);
            self.grad_beta.set(i, 0, self.grad_beta.get(i, 0) + sum_g);
            self.grad_gamma
                .set(i, 0, self.grad_gamma.get(i, 0) + sum_g_xhat);

            let scale = self.gamma.get(i, 0) * cache.inv_std[i];
            if cache.batch_stats {
                let nf = n as f64;
                for (k, (gk, xk)) in g.iter().zip(xhat).enumerate() {
                    dx.set(i, k, scale * (gk - sum_g / nf - xk * sum_g_xhat / nf));
                }
            } else {
                for (k, gk) in g.iter().enumerate() {
                    dx.set(i, k, scale * gk);
                }
            }
        }
        Ok(dx)
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.fill(0.0);
        self.grad_beta.fill(0.0);
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Mean softmax cross-entropy over the batch (one sample per column).
#[derive(Debug, Clone, Default)]
pub struct SoftmaxCrossEntropy {
    cache: Option<(Matrix, Vec<usize>)>,
}

impl SoftmaxCrossEntropy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, logits: &Matrix, labels: &[usize]) -> Result<f64> {
        let (classes, batch) = logits.shape();
        if labels.len() != batch {
            return Err(Error::shape(
                "softmax_xent_forward",
                logits.shape(),
                (labels.len(), 1),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::usage(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = Matrix::zeros(classes, batch);
        let mut total = 0.0;
        for (k, &label) in labels.iter().enumerate() {
            let max = (0..classes).fold(f64::NEG_INFINITY, |m, c| m.max(logits.get(c, k)));
            let sum_exp = (0..classes).fold(0.0, |s, c| s + (logits.get(c, k) - max).exp());
            let log_z = max + sum_exp.ln();
            for c in 0..classes {
                probs.set(c, k, (logits.get(c, k) - log_z).exp());
            }
            total += log_z - logits.get(label, k);
        }
        self.cache = Some((probs, labels.to_vec()));
        Ok(total / batch as f64)
    }

    /// `(softmax - onehot) / batch`.
    pub fn backward(&self) -> Result<Matrix> {
        let (probs, labels) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::usage("softmax_xent_backward called before forward"))?;
        let batch = probs.cols() as f64;
        let mut grad = probs.scale(1.0 / batch);
        for (k, &label) in labels.iter().enumerate() {
            grad.set(label, k, grad.get(label, k) - 1.0 / batch);
        }
        Ok(grad)
    }
}

/// Index of the largest logit in each column; ties go to the lowest index.
pub fn argmax_columns(logits: &Matrix) -> Vec<usize> {
    (0..logits.cols())
        .map(|k| {
            let mut best = 0;
            for c in 1..logits.rows() {
                if logits.get(c, k) > logits.get(best, k) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn linear_forward_examples() {
        let mut id = LinearLayer::new(Matrix::identity(2), Matrix::zeros(2, 1), false).unwrap();
        let x = Matrix::column_vector(&[2.0, 3.0]);
        assert_eq!(id.forward(&x).unwrap(), x);

        let mut bias_only = LinearLayer::new(
            Matrix::identity(2),
            Matrix::column_vector(&[1.0, -1.0]),
            false,
        )
        .unwrap();
        assert_eq!(
            bias_only.forward(&Matrix::zeros(2, 1)).unwrap(),
            Matrix::column_vector(&[1.0, -1.0])
        );

        let mut bin = LinearLayer::new(
            Matrix::from_rows(&[&[0.3, -0.7]]),
            Matrix::zeros(1, 1),
            true,
        )
        .unwrap();
        let out = bin.forward(&Matrix::column_vector(&[1.0, 1.0])).unwrap();
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(bin.effective_weight(), Matrix::from_rows(&[&[1.0, -1.0]]));
    }

    #[test]
    fn linear_forward_shape_error() {
        let mut l = LinearLayer::new(Matrix::zeros(2, 3), Matrix::zeros(2, 1), false).unwrap();
        assert!(matches!(
            l.forward(&Matrix::zeros(2, 1)),
            Err(Error::Shape { .. })
        ));
        assert!(LinearLayer::new(Matrix::zeros(2, 3), Matrix::zeros(3, 1), false).is_err());
    }

    #[test]
    fn linear_backward_examples() {
        let mut l = LinearLayer::new(
            Matrix::from_rows(&[&[0.5, -1.0]]),
            Matrix::zeros(1, 1),
            false,
        )
        .unwrap();
        assert!(matches!(
            l.backward(&Matrix::zeros(1, 1)),
            Err(Error::Usage(_))
        ));

        l.forward(&Matrix::column_vector(&[2.0, 3.0])).unwrap();
        let dx = l.backward(&Matrix::zeros(1, 1)).unwrap();
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
        assert!(l.grad_weight.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(l.grad_bias.get(0, 0), 0.0);

        let dx = l.backward(&Matrix::column_vector(&[1.0])).unwrap();
        assert_eq!(l.grad_weight, Matrix::from_rows(&[&[2.0, 3.0]]));
        assert_eq!(l.grad_bias.get(0, 0), 1.0);
        assert_eq!(dx, Matrix::column_vector(&[0.5, -1.0]));
    }

    #[test]
    fn gradient_accumulation_is_additive() {
        let w = random_matrix(3, 4, 1);
        let mut l = LinearLayer::new(w, Matrix::zeros(3, 1), false).unwrap();
        let x = random_matrix(4, 5, 2);
        let g1 = random_matrix(3, 5, 3);
        let g2 = random_matrix(3, 5, 4);
        l.forward(&x).unwrap();
        l.backward(&g1).unwrap();
        let first = l.grad_weight.clone();
        l.zero_grad();
        l.backward(&g2).unwrap();
        let second = l.grad_weight.clone();
        l.zero_grad();
        l.backward(&g1).unwrap();
        l.backward(&g2).unwrap();
        let both = l.grad_weight.clone();
        let sum = first.add(&second).unwrap();
        for (a, b) in both.as_slice().iter().zip(sum.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_gradient_ignores_latent_magnitude() {
        let x = random_matrix(3, 6, 5);
        let g = random_matrix(2, 6, 6);
        let small = Matrix::from_rows(&[&[0.2, -0.1, 0.5], &[-0.9, 0.3, -0.4]]);
        let large = Matrix::from_rows(&[&[1.7, -3.0, 0.01], &[-1.2, 2.5, -0.4]]);
        let mut a = LinearLayer::new(small, Matrix::zeros(2, 1), true).unwrap();
        let mut b = LinearLayer::new(large, Matrix::zeros(2, 1), true).unwrap();
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
        assert_eq!(a.backward(&g).unwrap(), b.backward(&g).unwrap());
        assert_eq!(a.grad_weight, b.grad_weight);
        assert!(a
            .effective_weight()
            .as_slice()
            .iter()
            .all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn batchnorm_constant_row_outputs_beta() {
        let mut bn = BatchNormLayer::new(1);
        bn.beta.set(0, 0, 0.25);
        let out = bn.forward(&Matrix::filled(1, 4, 3.0), Mode::Train).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn batchnorm_normalizes_rows() {
        let x = random_matrix(3, 32, 7).map(|v| 4.0 * v + 2.0);
        let mut bn = BatchNormLayer::new(3);
        let out = bn.forward(&x, Mode::Train).unwrap();
        let (mean, var) = BatchNormLayer::batch_statistics(&out);
        for i in 0..3 {
            assert!(mean[i].abs() < 1e-10, "mean {}", mean[i]);
            assert!((var[i] - 1.0).abs() < 1e-6, "var {}", var[i]);
        }
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_identity() {
        let x = random_matrix(2, 5, 8);
        let mut bn = BatchNormLayer::new(2);
        let out = bn.forward(&x, Mode::Eval).unwrap();
        for (a, b) in out.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batchnorm_rejects_single_sample_in_training() {
        let mut bn = BatchNormLayer::new(2);
        assert!(matches!(
            bn.forward(&Matrix::zeros(2, 1), Mode::Train),
            Err(Error::Usage(_))
        ));
        assert!(bn.forward(&Matrix::zeros(2, 1), Mode::Eval).is_ok());
        assert!(matches!(
            BatchNormLayer::new(2).backward(&Matrix::zeros(2, 2)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn batchnorm_running_stats_track_batches() {
        let mut bn = BatchNormLayer::new(1);
        let x = Matrix::from_rows(&[&[1.0, 3.0]]);
        bn.forward(&x, Mode::Train).unwrap();
        // mean 2, unbiased var 2
        assert!((bn.running_mean.get(0, 0) - 0.2).abs() < 1e-15);
        assert!((bn.running_var.get(0, 0) - (0.9 + 0.2)).abs() < 1e-15);
        bn.forward(&x, Mode::BatchStats).unwrap();
        assert!((bn.running_mean.get(0, 0) - 0.2).abs() < 1e-15);
    }

    fn bn_loss(bn: &mut BatchNormLayer, x: &Matrix, weights: &Matrix) -> f64 {
        let out = bn.forward(x, Mode::BatchStats).unwrap();
        out.hadamard(weights).unwrap().as_slice().iter().sum()
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let x = random_matrix(3, 6, 9);
        let weights = random_matrix(3, 6, 10);
        let mut bn = BatchNormLayer::new(3);
        bn.gamma = Matrix::column_vector(&[1.5, 0.7, -0.3]);
        bn.beta = Matrix::column_vector(&[0.1, -0.2, 0.3]);
        bn.forward(&x, Mode::BatchStats).unwrap();
        let dx = bn.backward(&weights).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for k in 0..6 {
                let mut xp = x.clone();
                xp.set(i, k, x.get(i, k) + h);
                let mut xm = x.clone();
                xm.set(i, k, x.get(i, k) - h);
                let num =
                    (bn_loss(&mut bn, &xp, &weights) - bn_loss(&mut bn, &xm, &weights)) / (2.0 * h);
                let a = dx.get(i, k);
                assert!(
                    (a - num).abs() / a.abs().max(1.0) < 1e-5,
                    "dx[{i}][{k}] {a} vs {num}"
                );
            }
            let mut gp = bn.clone();
            gp.gamma.set(i, 0, bn.gamma.get(i, 0) + h);
            let mut gm = bn.clone();
            gm.gamma.set(i, 0, bn.gamma.get(i, 0) - h);
            let num = (bn_loss(&mut gp, &x, &weights) - bn_loss(&mut gm, &x, &weights)) / (2.0 * h);
            assert!((bn.grad_gamma.get(i, 0) - num).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_backward_projects_out_mean() {
        let x = random_matrix(4, 16, 11);
        let g = random_matrix(4, 16, 12);
        let mut bn = BatchNormLayer::new(4);
        bn.forward(&x, Mode::Train).unwrap();
        let dx = bn.backward(&g).unwrap();
        for s in dx.rowsum().as_slice() {
            assert!(s.abs() < 1e-10);
        }
        let mut bn0 = BatchNormLayer::new(4);
        bn0.forward(&x, Mode::Train).unwrap();
        let dx0 = bn0.backward(&Matrix::zeros(4, 16)).unwrap();
        assert!(dx0.as_slice().iter().all(|&v| v == 0.0));
        assert!(bn0.grad_gamma.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn xent_examples() {
        let mut loss = SoftmaxCrossEntropy::new();
        let uniform = Matrix::zeros(4, 3);
        let l = loss.forward(&uniform, &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let confident = Matrix::column_vector(&[200.0, 0.0]);
        assert!(loss.forward(&confident, &[0]).unwrap() < 1e-12);
        assert!(loss.backward().unwrap().max_abs() < 1e-12);

        let l = loss
            .forward(&Matrix::column_vector(&[1.0, 2.0]), &[1])
            .unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);

        assert!(matches!(
            loss.forward(&uniform, &[0, 1, 4]),
            Err(Error::Usage(_))
        ));
        assert!(SoftmaxCrossEntropy::new().backward().is_err());
    }

    #[test]
    fn xent_gradient() {
        let logits = random_matrix(5, 4, 13);
        let labels = [0, 4, 2, 2];
        let mut loss = SoftmaxCrossEntropy::new();
        loss.forward(&logits, &labels).unwrap();
        let g = loss.backward().unwrap();
        for k in 0..4 {
            let s: f64 = g.column(k).iter().sum();
            assert!(s.abs() < 1e-15);
        }
        let h = 1e-6;
        for c in 0..5 {
            for k in 0..4 {
                let mut p = logits.clone();
                p.set(c, k, logits.get(c, k) + h);
                let mut m = logits.clone();
                m.set(c, k, logits.get(c, k) - h);
                let num = (loss.forward(&p, &labels).unwrap() - loss.forward(&m, &labels).unwrap())
                    / (2.0 * h);
                let a = g.get(c, k);
                assert!((a - num).abs() / a.abs().max(1.0) < 1e-6);
            }
        }
    }

    #[test]
    fn argmax_ties_pick_first() {
        let m = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 2.0]]);
        assert_eq!(argmax_columns(&m), vec![0, 1]);
    }
}
