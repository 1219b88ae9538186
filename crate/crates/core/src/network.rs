//! Multilayer perceptrons assembled from hidden blocks
//! `linear -> [batch norm] -> activation`, followed by a linear output layer
//! and softmax cross-entropy.

use std::path::Path;

use crate::activations::ActivationKind;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::init::{self, BiasScope, BiasTarget, InitConfig};
use crate::layers::{BatchNormLayer, LinearLayer, Mode, SoftmaxCrossEntropy};
use crate::rng::Rng;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSpec {
    pub width: usize,
    pub activation: ActivationKind,
    pub binary: bool,
    pub batch_norm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub input: usize,
    pub hidden: Vec<HiddenSpec>,
    pub output: usize,
    pub binary_output: bool,
}

impl ArchSpec {
    /// Same activation / binary / batch-norm settings for every hidden layer.
    pub fn mlp(
        input: usize,
        widths: &[usize],
        output: usize,
        activation: ActivationKind,
        binary: bool,
        batch_norm: bool,
    ) -> Self {
        Self {
            input,
            hidden: widths
                .iter()
                .map(|&width| HiddenSpec {
                    width,
                    activation,
                    binary,
                    batch_norm,
                })
                .collect(),
            output,
            binary_output: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 || self.hidden.iter().any(|h| h.width == 0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        Ok(())
    }

    /// Whether any part of the network uses a straight-through estimator.
    pub fn uses_ste(&self) -> bool {
        self.binary_output
            || self
                .hidden
                .iter()
                .any(|h| h.binary || h.activation == ActivationKind::SignSTE)
    }

    pub fn has_binary_weights(&self) -> bool {
        self.binary_output || self.hidden.iter().any(|h| h.binary)
    }
}

#[derive(Debug, Clone)]
pub struct ActivationLayer {
    pub kind: ActivationKind,
    cache_z: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(LinearLayer),
    BatchNorm(BatchNormLayer),
    Activation(ActivationLayer),
}

/// Layer indices making up one hidden block.
#[derive(Debug, Clone, Copy)]
struct Block {
    linear: usize,
    batch_norm: Option<usize>,
    activation: usize,
}

/// A trainable parameter together with its accumulated gradient.
pub struct Param<'a> {
    pub name: String,
    pub value: &'a mut Matrix,
    pub grad: &'a Matrix,
    /// Latent weights of a binary layer, subject to clipping.
    pub binary_latent: bool,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    blocks: Vec<Block>,
    loss: SoftmaxCrossEntropy,
}

impl Network {
    /// Builds and initializes a network.
    ///
    /// Draws for each linear layer come from one stream seeded with `cfg.seed`:
    /// weights row-major, then the bias draws. In blocks with batch norm and
    /// [`BiasTarget::BatchNormShift`], the bias draws initialize `β` instead of
    /// the linear bias. Latent weights of binary layers are clipped to `[-1, 1]`.
    pub fn new(arch: &ArchSpec, cfg: &InitConfig) -> Result<Self> {
        arch.validate()?;
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let mut layers = Vec::new();
        let mut blocks = Vec::new();
        let mut fan_in = arch.input;

        for spec in &arch.hidden {
            let weight = init::init_weights(spec.width, fan_in, cfg.weight_scheme, &mut rng);
            let bias =
                init::scale_bias_draws(&init::bias_draws(spec.width, &mut rng), cfg.bias_lambda);
            let into_shift = spec.batch_norm && cfg.bias_target == BiasTarget::BatchNormShift;
            let (linear_bias, shift) = if into_shift {
                (Matrix::zeros(spec.width, 1), Some(bias))
            } else {
                (bias, None)
            };
            let linear = layers.len();
            layers.push(Layer::Linear(LinearLayer::new(
                clip_if(weight, spec.binary),
                linear_bias,
                spec.binary,
            )?));
            let batch_norm = if spec.batch_norm {
                let mut bn = BatchNormLayer::new(spec.width);
                if let Some(shift) = shift {
                    bn.beta = shift;
                }
                layers.push(Layer::BatchNorm(bn));
                Some(layers.len() - 1)
            } else {
                None
            };
            layers.push(Layer::Activation(ActivationLayer {
                kind: spec.activation,
                cache_z: None,
            }));
            blocks.push(Block {
                linear,
                batch_norm,
                activation: layers.len() - 1,
            });
            fan_in = spec.width;
        }

        let weight = init::init_weights(arch.output, fan_in, cfg.weight_scheme, &mut rng);
        let draws = init::bias_draws(arch.output, &mut rng);
        let lambda = match cfg.apply_bias_to {
            BiasScope::AllLayers => cfg.bias_lambda,
            BiasScope::AllHidden => 0.0,
        };
        layers.push(Layer::Linear(LinearLayer::new(
            clip_if(weight, arch.binary_output),
            init::scale_bias_draws(&draws, lambda),
            arch.binary_output,
        )?));

        Ok(Self {
            layers,
            blocks,
            loss: SoftmaxCrossEntropy::new(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn hidden_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = match layer {
                Layer::Linear(l) => l.forward(&h)?,
                Layer::BatchNorm(bn) => bn.forward(&h, mode)?,
                Layer::Activation(a) => {
                    let out = a.kind.forward(&h);
                    a.cache_z = Some(h);
                    out
                }
            };
        }
        Ok(h)
    }

    /// Forward + loss + backward. Gradients are accumulated, not reset.
    pub fn loss_and_backward(&mut self, x: &Matrix, labels: &[usize], mode: Mode) -> Result<f64> {
        let logits = self.forward(x, mode)?;
        let loss = self.loss.forward(&logits, labels)?;
        let mut g = self.loss.backward()?;
        for layer in self.layers.iter_mut().rev() {
            g = match layer {
                Layer::Linear(l) => l.backward(&g)?,
                Layer::BatchNorm(bn) => bn.backward(&g)?,
                Layer::Activation(a) => {
                    let z = a
                        .cache_z
                        .as_ref()
                        .ok_or_else(|| Error::usage("activation backward called before forward"))?;
                    a.kind.backward(z, &g)?
                }
            };
        }
        Ok(loss)
    }

    pub fn loss(&mut self, x: &Matrix, labels: &[usize], mode: Mode) -> Result<f64> {
        let logits = self.forward(x, mode)?;
        self.loss.forward(&logits, labels)
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => l.zero_grad(),
                Layer::BatchNorm(bn) => bn.zero_grad(),
                Layer::Activation(_) => {}
            }
        }
    }

    /// Pre-activations seen by each activation layer during the last forward.
    pub fn activation_inputs(&self) -> Vec<(ActivationKind, &Matrix)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Activation(a) => a.cache_z.as_ref().map(|z| (a.kind, z)),
                _ => None,
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<Param<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    let binary = l.is_binary();
                    let LinearLayer {
                        weight,
                        bias,
                        grad_weight,
                        grad_bias,
                        ..
                    } = l;
                    out.push(Param {
                        name: format!("{i}.linear.weight"),
                        value: weight,
                        grad: grad_weight,
                        binary_latent: binary,
                    });
                    out.push(Param {
                        name: format!("{i}.linear.bias"),
                        value: bias,
                        grad: grad_bias,
                        binary_latent: false,
                    });
                }
                Layer::BatchNorm(bn) => {
                    let BatchNormLayer {
                        gamma,
                        beta,
                        grad_gamma,
                        grad_beta,
                        ..
                    } = bn;
                    out.push(Param {
                        name: format!("{i}.bn.gamma"),
                        value: gamma,
                        grad: grad_gamma,
                        binary_latent: false,
                    });
                    out.push(Param {
                        name: format!("{i}.bn.beta"),
                        value: beta,
                        grad: grad_beta,
                        binary_latent: false,
                    });
                }
                Layer::Activation(_) => {}
            }
        }
        out
    }

    /// Every tensor needed to restore the network, including batch-norm running statistics.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    out.push((format!("{i}.linear.weight"), &l.weight));
                    out.push((format!("{i}.linear.bias"), &l.bias));
                }
                Layer::BatchNorm(bn) => {
                    out.push((format!("{i}.bn.gamma"), &bn.gamma));
                    out.push((format!("{i}.bn.beta"), &bn.beta));
                    out.push((format!("{i}.bn.running_mean"), &bn.running_mean));
                    out.push((format!("{i}.bn.running_var"), &bn.running_var));
                }
                Layer::Activation(_) => {}
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.named_tensors();
        checkpoint::save(path, tensors.iter().map(|(n, m)| (n.as_str(), *m)))
    }

    /// Restores tensors written by [`Network::save`] into a network of the same architecture.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let loaded = checkpoint::load(path)?;
        let mismatch = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let expected: Vec<(String, (usize, usize))> = self
            .named_tensors()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        if expected.len() != loaded.len() {
            return Err(mismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                loaded.len()
            )));
        }
        for ((name, shape), (lname, m)) in expected.iter().zip(&loaded) {
            if name != lname || *shape != m.shape() {
                return Err(mismatch(format!(
                    "expected `{name}` {shape:?}, found `{lname}` {:?}",
                    m.shape()
                )));
            }
        }
        let mut values = loaded.into_iter().map(|(_, m)| m);
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => {
                    l.weight = values.next().unwrap();
                    l.bias = values.next().unwrap();
                }
                Layer::BatchNorm(bn) => {
                    bn.gamma = values.next().unwrap();
                    bn.beta = values.next().unwrap();
                    bn.running_mean = values.next().unwrap();
                    bn.running_var = values.next().unwrap();
                }
                Layer::Activation(_) => {}
            }
        }
        Ok(())
    }

    /// Input-space hyperplanes `(W', b')` of hidden block `block`, evaluated on its input `x`.
    ///
    /// With batch norm the block computes `γ (W x + b - μ) / σ + β`; batch
    /// statistics over `x` are folded in so that `W' x + b'` equals the
    /// activation's pre-activation. Binary layers contribute `sign(W)`.
    pub fn block_hyperplanes(
        &self,
        block: usize,
        x: &Matrix,
    ) -> Result<(Matrix, Matrix, ActivationKind)> {
        let b = self
            .blocks
            .get(block)
            .ok_or_else(|| Error::usage(format!("no hidden block {block}")))?;
        let Layer::Linear(linear) = &self.layers[b.linear] else {
            unreachable!("block layout")
        };
        let Layer::Activation(act) = &self.layers[b.activation] else {
            unreachable!("block layout")
        };
        let w = linear.effective_weight();
        let bias = linear.bias.clone();
        let Some(bn_idx) = b.batch_norm else {
            return Ok((w, bias, act.kind));
        };
        let Layer::BatchNorm(bn) = &self.layers[bn_idx] else {
            unreachable!("block layout")
        };
        let z = w.matmul(x)?.add_col_broadcast(&bias)?;
        let (mean, var) = BatchNormLayer::batch_statistics(&z);
        let factor: Vec<f64> = (0..w.rows())
            .map(|j| bn.gamma.get(j, 0) / (var[j] + bn.epsilon()).sqrt())
            .collect();
        let folded_w = Matrix::from_fn(w.rows(), w.cols(), |j, k| factor[j] * w.get(j, k));
        let folded_b = Matrix::from_fn(w.rows(), 1, |j, _| {
            factor[j] * (bias.get(j, 0) - mean[j]) + bn.beta.get(j, 0)
        });
        Ok((folded_w, folded_b, act.kind))
    }

    /// Output of hidden block `block` (batch statistics, no running-stat updates).
    pub fn block_output(&mut self, block: usize, x: &Matrix) -> Result<Matrix> {
        let last = self
            .blocks
            .get(block)
            .ok_or_else(|| Error::usage(format!("no hidden block {block}")))?
            .activation;
        let mut h = x.clone();
        for layer in &mut self.layers[..=last] {
            h = match layer {
                Layer::Linear(l) => l.forward(&h)?,
                Layer::BatchNorm(bn) => bn.forward(&h, Mode::BatchStats)?,
                Layer::Activation(a) => a.kind.forward(&h),
            };
        }
        Ok(h)
    }
}

fn clip_if(weight: Matrix, binary: bool) -> Matrix {
    if binary {
        weight.map(|v| v.clamp(-1.0, 1.0))
    } else {
        weight
    }
}
