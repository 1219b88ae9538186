//! Elementwise activations and their backward gates.
//!
//! Every backward rule is a gate: each output element is either exactly the
//! upstream gradient or exactly zero.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    ReLU,
    HTanh,
    /// `sign` forward, clipped straight-through gate backward.
    SignSTE,
    Identity,
}

impl ActivationKind {
    pub fn forward(self, z: &Matrix) -> Matrix {
        match self {
            ActivationKind::ReLU => relu_forward(z),
            ActivationKind::HTanh => htanh_forward(z),
            ActivationKind::SignSTE => sign_forward(z),
            ActivationKind::Identity => z.clone(),
        }
    }

    pub fn backward(self, z: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        match self {
            ActivationKind::ReLU => relu_backward(z, upstream),
            ActivationKind::HTanh => htanh_backward(z, upstream),
            ActivationKind::SignSTE => sign_ste_backward(z, upstream),
            ActivationKind::Identity => gate(z, upstream, |_| true),
        }
    }

    /// Points where the forward function is not differentiable.
    pub fn kinks(self) -> &'static [f64] {
        match self {
            ActivationKind::ReLU => &[0.0],
            ActivationKind::HTanh | ActivationKind::SignSTE => &[-1.0, 1.0],
            ActivationKind::Identity => &[],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::ReLU => "relu",
            ActivationKind::HTanh => "htanh",
            ActivationKind::SignSTE => "sign",
            ActivationKind::Identity => "identity",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(ActivationKind::ReLU),
            "htanh" | "hardtanh" => Ok(ActivationKind::HTanh),
            "sign" | "sign-ste" | "signste" | "ste" => Ok(ActivationKind::SignSTE),
            "identity" | "linear" | "none" => Ok(ActivationKind::Identity),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

fn gate(z: &Matrix, upstream: &Matrix, pass: impl Fn(f64) -> bool) -> Result<Matrix> {
    z.zip_map(upstream, |z, g| if pass(z) { g } else { 0.0 })
        .map_err(|_| Error::shape("activation backward", z.shape(), upstream.shape()))
}

/// `z` where `z > 0`, else 0. The boundary `z = 0` is inactive.
pub fn relu_forward(z: &Matrix) -> Matrix {
    z.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(z: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    gate(z, upstream, |v| v > 0.0)
}

pub fn htanh_forward(z: &Matrix) -> Matrix {
    z.map(|v| v.clamp(-1.0, 1.0))
}

/// Passes gradient on the open slab `|z| < 1`.
pub fn htanh_backward(z: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    gate(z, upstream, |v| v.abs() < 1.0)
}

/// `+1` for `z >= 0`, `-1` otherwise.
pub fn sign_forward(z: &Matrix) -> Matrix {
    z.map(sign)
}

#[inline]
pub fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Straight-through estimator for `sign`: passes gradient on the closed slab `|z| <= 1`.
pub fn sign_ste_backward(z: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    gate(z, upstream, |v| v.abs() <= 1.0)
}
