//! Seeded parameter initialization.
//!
//! Draw order per layer is fixed: all weight draws in row-major order, then one
//! uniform draw per bias entry, top-down. Bias draws are consumed even when
//! `λ = 0` or when the layer's bias is not randomized, so changing `λ` never
//! changes any weight.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    /// Normal, std `sqrt(2 / fan_in)`.
    He,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    /// He draws, each row rescaled to Euclidean norm 1.
    UnitNormRows,
}

/// Which layers receive the `U[-λ, λ]` bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasScope {
    AllHidden,
    AllLayers,
}

/// Where a hidden block's random bias lands when the block has batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasTarget {
    /// The linear layer's bias (cancelled by a following batch norm's centering).
    Linear,
    /// The batch-norm shift `β`; falls back to the linear bias in blocks without batch norm.
    BatchNormShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub weight_scheme: WeightScheme,
    pub bias_lambda: f64,
    pub seed: u64,
    pub apply_bias_to: BiasScope,
    pub bias_target: BiasTarget,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            weight_scheme: WeightScheme::He,
            bias_lambda: 0.0,
            seed: 0,
            apply_bias_to: BiasScope::AllHidden,
            bias_target: BiasTarget::Linear,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bias_lambda >= 0.0 && self.bias_lambda.is_finite()) {
            return Err(Error::usage(format!(
                "bias lambda must be a non-negative finite number, got {}",
                self.bias_lambda
            )));
        }
        Ok(())
    }
}

pub fn init_weights(rows: usize, cols: usize, scheme: WeightScheme, rng: &mut Rng) -> Matrix {
    match scheme {
        WeightScheme::He => {
            let std = (2.0 / cols as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| std * rng.normal())
        }
        WeightScheme::Glorot => {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-limit, limit))
        }
        WeightScheme::UnitNormRows => {
            let he = init_weights(rows, cols, WeightScheme::He, rng);
            let norms: Vec<f64> = (0..rows)
                .map(|i| he.row(i).iter().fold(0.0, |a, &v| a + v * v).sqrt())
                .collect();
            Matrix::from_fn(rows, cols, |i, j| {
                if norms[i] > 0.0 {
                    he.get(i, j) / norms[i]
                } else if j == 0 {
                    1.0
                } else {
                    0.0
                }
            })
        }
    }
}

/// `m x 1` bias, i.i.d. uniform on `[-λ, λ]`; exactly zero when `λ = 0`.
pub fn init_bias(m: usize, lambda: f64, rng: &mut Rng) -> Result<Matrix> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::usage(format!(
            "bias lambda must be non-negative, got {lambda}"
        )));
    }
    let draws = bias_draws(m, rng);
    Ok(scale_bias_draws(&draws, lambda))
}

/// One symmetric unit draw `2u - 1` per bias entry.
pub(crate) fn bias_draws(m: usize, rng: &mut Rng) -> Vec<f64> {
    (0..m).map(|_| 2.0 * rng.uniform() - 1.0).collect()
}

pub(crate) fn scale_bias_draws(draws: &[f64], lambda: f64) -> Matrix {
    // `+ 0.0` turns `-0.0` into `+0.0` so λ = 0 is bit-identical to zero init.
    Matrix::column_vector(&draws.iter().map(|d| d * lambda + 0.0).collect::<Vec<_>>())
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightScheme::He => "he",
            WeightScheme::Glorot => "glorot",
            WeightScheme::UnitNormRows => "unit-norm-rows",
        })
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "he" | "kaiming" => Ok(WeightScheme::He),
            "glorot" | "xavier" => Ok(WeightScheme::Glorot),
            "unit-norm-rows" | "unit_norm_rows" | "unitnorm" => Ok(WeightScheme::UnitNormRows),
            other => Err(Error::config(format!("unknown weight scheme `{other}`"))),
        }
    }
}

impl FromStr for BiasScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hidden" | "all-hidden" | "all_hidden" => Ok(BiasScope::AllHidden),
            "all" | "all-layers" | "all_layers" => Ok(BiasScope::AllLayers),
            other => Err(Error::config(format!("unknown bias scope `{other}`"))),
        }
    }
}

impl FromStr for BiasTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(BiasTarget::Linear),
            "bn" | "bn-shift" | "batchnorm" | "beta" => Ok(BiasTarget::BatchNormShift),
            other => Err(Error::config(format!("unknown bias target `{other}`"))),
        }
    }
}
