//! The network slice every repair computation acts on:
//!
//! ```text
//! z = W v + b,   h = σ(z),   s = W_c h + b_c
//! ```
//!
//! `v` is an embedding produced by a frozen feature extractor. Only `W` is
//! ever changed by repair.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix};

/// Elementwise activation after the repair layer. All supported kinds are
/// 1-Lipschitz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 4] = [
        ActivationKind::Relu,
        ActivationKind::Tanh,
        ActivationKind::Sigmoid,
        ActivationKind::Softplus,
    ];

    pub fn lipschitz(self) -> f64 {
        1.0
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            ActivationKind::Relu => z.max(0.0),
            ActivationKind::Tanh => z.tanh(),
            ActivationKind::Sigmoid => sigmoid(z),
            // log(1 + e^z) without overflow
            ActivationKind::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    /// `σ'(z)`, with the ReLU subgradient at 0 fixed to 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            ActivationKind::Softplus => sigmoid(z),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Softplus => "softplus",
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
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
        ActivationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown activation `{s}`")))
    }
}

/// Diagonal of the activation Jacobian at pre-activation `z`.
pub fn activation_derivative(kind: ActivationKind, z: &[f64]) -> Vec<f64> {
    z.iter().map(|&x| kind.derivative(x)).collect()
}

/// Repair layer plus frozen classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    w: DenseMatrix,
    b: Vec<f64>,
    wc: DenseMatrix,
    bc: Vec<f64>,
    activation: ActivationKind,
}

impl HeadModel {
    pub fn new(
        w: DenseMatrix,
        b: Vec<f64>,
        wc: DenseMatrix,
        bc: Vec<f64>,
        activation: ActivationKind,
    ) -> Result<Self> {
        let (d_out, d_in) = w.shape();
        if d_out == 0 || d_in == 0 {
            return Err(Error::invalid("repair layer has an empty dimension"));
        }
        if b.len() != d_out {
            return Err(Error::invalid(format!(
                "bias length {} does not match d_out {d_out}",
                b.len()
            )));
        }
        if wc.cols() != d_out {
            return Err(Error::invalid(format!(
                "head has {} columns, repair layer has {d_out} outputs",
                wc.cols()
            )));
        }
        if wc.rows() < 2 {
            return Err(Error::invalid("classifier needs at least two classes"));
        }
        if bc.len() != wc.rows() {
            return Err(Error::invalid(format!(
                "head bias length {} does not match {} classes",
                bc.len(),
                wc.rows()
            )));
        }
        let finite = w.is_finite()
            && wc.is_finite()
            && b.iter().chain(&bc).all(|x| x.is_finite());
        if !finite {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(HeadModel {
            w,
            b,
            wc,
            bc,
            activation,
        })
    }

    pub fn weight(&self) -> &DenseMatrix {
        &self.w
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    pub fn head_weight(&self) -> &DenseMatrix {
        &self.wc
    }

    pub fn head_bias(&self) -> &[f64] {
        &self.bc
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    pub fn classes(&self) -> usize {
        self.wc.rows()
    }

    /// Same model with the repair-layer weight replaced.
    pub fn with_weight(&self, w: DenseMatrix) -> Result<Self> {
        if w.shape() != self.w.shape() {
            return Err(Error::invalid("replacement weight has the wrong shape"));
        }
        if !w.is_finite() {
            return Err(Error::NumericFailure {
                step: 0,
                message: "replacement weight has non-finite entries".into(),
            });
        }
        Ok(HeadModel {
            w,
            ..self.clone()
        })
    }

    fn check_input(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.d_in() {
            return Err(Error::invalid(format!(
                "embedding has length {}, model expects {}",
                v.len(),
                self.d_in()
            )));
        }
        Ok(())
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.classes() {
            return Err(Error::invalid(format!(
                "class {y} out of range for {} classes",
                self.classes()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, v: &[f64]) -> Result<Forward> {
        self.check_input(v)?;
        let mut pre = self.w.mul_vec(v);
        pre.iter_mut().zip(&self.b).for_each(|(z, b)| *z += b);
        let hidden: Vec<f64> = pre.iter().map(|&z| self.activation.apply(z)).collect();
        let logits = (0..self.classes())
            .map(|c| dot(self.wc.row(c), &hidden) + self.bc[c])
            .collect();
        Ok(Forward {
            pre,
            hidden,
            logits,
        })
    }

    pub fn logits(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(v)?.logits)
    }

    /// `s_y − max_{c≠y} s_c`.
    pub fn gap(&self, v: &[f64], y: usize) -> Result<f64> {
        self.check_class(y)?;
        Ok(logit_gap(&self.logits(v)?, y))
    }

    /// Strongest competing class `argmax_{c≠y} s_c`.
    pub fn competitor(&self, v: &[f64], y: usize) -> Result<usize> {
        self.check_class(y)?;
        Ok(competitor_of(&self.logits(v)?, y))
    }

    pub fn predict(&self, v: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(v)?))
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// `z = W v + b`
    pub pre: Vec<f64>,
    /// `h = σ(z)`
    pub hidden: Vec<f64>,
    /// `s = W_c h + b_c`
    pub logits: Vec<f64>,
}

/// Index of the largest entry; lowest index wins ties.
pub fn argmax(s: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in s.iter().enumerate().skip(1) {
        if x > s[best] {
            best = i;
        }
    }
    best
}

/// `argmax_{c≠y} s_c`, lowest index on ties.
pub fn competitor_of(s: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    for (c, &x) in s.iter().enumerate() {
        if c != y && (best == usize::MAX || x > s[best]) {
            best = c;
        }
    }
    best
}

pub fn logit_gap(s: &[f64], y: usize) -> f64 {
    s[y] - s[competitor_of(s, y)]
}

/// An embedding with a class label. For repair samples the label is the true
/// class; for remain samples it is the prediction recorded before repair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub v: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(id: impl Into<String>, v: Vec<f64>, label: usize) -> Self {
        Sample {
            id: id.into(),
            v,
            label,
        }
    }

    pub fn validate(&self, model: &HeadModel) -> Result<()> {
        model.check_input(&self.v)?;
        model.check_class(self.label)?;
        if !self.v.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid(format!(
                "sample `{}` has non-finite entries",
                self.id
            )));
        }
        Ok(())
    }
}
