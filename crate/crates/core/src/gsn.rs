//! Gap sensitivity norm (κ) and the κ-maximizing fine-tuning pass that
//! conditions a model before repair.
//!
//! κ measures how much the logit gap of a sample can move when the repair
//! weight is perturbed inside the span of its top-`r` left singular vectors:
//!
//! ```text
//! q_j[k] = (w_y − w_k)ᵀ J(v) U[:, j]      for k ≠ y, j < r
//! κ(v)   = ‖q‖_F
//! ```
//!
//! A model whose κ is near zero on the samples of interest cannot be repaired
//! by a small rank-`r` update, whatever the direction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, truncated_svd, DenseMatrix};
use crate::model::{activation_derivative, HeadModel, Sample};

/// κ for one sample, computing the SVD basis from the model.
pub fn gap_sensitivity_norm(m: &HeadModel, v: &[f64], y: usize, r: usize) -> Result<f64> {
    let u = truncated_svd(m.weight(), r)?.u;
    gap_sensitivity_with_basis(m, &u, v, y)
}

/// κ for one sample against a precomputed basis `U` (`d_out x r`).
pub fn gap_sensitivity_with_basis(
    m: &HeadModel,
    u: &DenseMatrix,
    v: &[f64],
    y: usize,
) -> Result<f64> {
    if u.rows() != m.d_out() {
        return Err(Error::invalid("basis rows must equal d_out"));
    }
    if y >= m.classes() {
        return Err(Error::invalid(format!("class {y} out of range")));
    }
    let fwd = m.forward(v)?;
    let jac = activation_derivative(m.activation(), &fwd.pre);
    // JU, then project each class difference onto it.
    let r = u.cols();
    let wc = m.head_weight();
    let wy = wc.row(y);
    let mut sum_sq = 0.0;
    for k in (0..m.classes()).filter(|&k| k != y) {
        let wk = wc.row(k);
        for j in 0..r {
            let q: f64 = (0..m.d_out())
                .map(|o| (wy[o] - wk[o]) * jac[o] * u[(o, j)])
                .sum();
            sum_sq += q * q;
        }
    }
    Ok(sum_sq.sqrt())
}

/// Per-sample κ (using each sample's label as `y`) against one basis.
pub fn sample_kappas(m: &HeadModel, samples: &[Sample], r: usize) -> Result<Vec<f64>> {
    let u = truncated_svd(m.weight(), r)?.u;
    samples
        .par_iter()
        .map(|s| gap_sensitivity_with_basis(m, &u, &s.v, s.label))
        .collect()
}

pub fn mean_kappa(m: &HeadModel, samples: &[Sample], r: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("mean κ over an empty set"));
    }
    let ks = sample_kappas(m, samples, r)?;
    Ok(ks.iter().sum::<f64>() / ks.len() as f64)
}

/// Gradients of the mean softmax cross-entropy w.r.t. all four tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
    pub wc: DenseMatrix,
    pub bc: Vec<f64>,
}

fn softmax_cross_entropy(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - logits[y];
    let probs = exps.iter().map(|e| e / total).collect();
    (loss, probs)
}

/// Mean cross-entropy of `samples` (labels are the targets).
pub fn cross_entropy_loss(m: &HeadModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("loss over an empty set"));
    }
    let mut total = 0.0;
    for s in samples {
        let logits = m.logits(&s.v)?;
        total += softmax_cross_entropy(&logits, s.label).0;
    }
    Ok(total / samples.len() as f64)
}

/// Mean loss and closed-form backpropagation through
/// `s = W_c σ(W v + b) + b_c`.
pub fn cross_entropy_gradients(m: &HeadModel, samples: &[Sample]) -> Result<(f64, HeadGradients)> {
    if samples.is_empty() {
        return Err(Error::invalid("gradient over an empty set"));
    }
    let (d_out, d_in, c) = (m.d_out(), m.d_in(), m.classes());
    let mut g = HeadGradients {
        w: DenseMatrix::zeros(d_out, d_in),
        b: vec![0.0; d_out],
        wc: DenseMatrix::zeros(c, d_out),
        bc: vec![0.0; c],
    };
    let mut total = 0.0;
    let scale = 1.0 / samples.len() as f64;
    for s in samples {
        if s.label >= c {
            return Err(Error::invalid(format!("sample `{}` label out of range", s.id)));
        }
        let fwd = m.forward(&s.v)?;
        let (loss, mut ds) = softmax_cross_entropy(&fwd.logits, s.label);
        total += loss;
        ds[s.label] -= 1.0;
        let mut dh = vec![0.0; d_out];
        for k in 0..c {
            let dk = ds[k] * scale;
            g.bc[k] += dk;
            let row = g.wc.row_mut(k);
            for o in 0..d_out {
                row[o] += dk * fwd.hidden[o];
                dh[o] += ds[k] * m.head_weight()[(k, o)];
            }
        }
        for o in 0..d_out {
            let dz = dh[o] * m.activation().derivative(fwd.pre[o]) * scale;
            if dz == 0.0 {
                continue;
            }
            g.b[o] += dz;
            let row = g.w.row_mut(o);
            for (i, &vi) in s.v.iter().enumerate() {
                row[i] += dz * vi;
            }
        }
    }
    Ok((total * scale, g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsnFtConfig {
    pub max_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub aux_size: usize,
    pub rank: usize,
    pub seed: u64,
}

impl Default for GsnFtConfig {
    fn default() -> Self {
        GsnFtConfig {
            max_steps: 30,
            learning_rate: 1e-3,
            batch_size: 32,
            aux_size: 8,
            rank: 2,
            seed: 0,
        }
    }
}

impl GsnFtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.aux_size == 0 || self.rank == 0 {
            return Err(Error::invalid("GSN-FT counts must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsnFtStep {
    pub step: usize,
    pub kappa: f64,
    pub loss: f64,
    pub weight_spectral_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsnFtTrace {
    pub steps: Vec<GsnFtStep>,
    pub selected_step: usize,
}

impl GsnFtTrace {
    pub fn selected(&self) -> &GsnFtStep {
        &self.steps[self.selected_step]
    }
}

/// Fine-tunes `W, b, W_c, b_c` by mini-batch gradient descent on the auxiliary
/// set and returns the snapshot with the largest mean κ (earliest on ties).
///
/// Only the first `cfg.aux_size` samples of `aux` are used. Batches are
/// `min(batch_size, aux_size)` samples drawn from a per-epoch shuffle seeded by
/// `cfg.seed`. If step 0 wins, the input model is returned unchanged.
pub fn gsn_ft(m: &HeadModel, aux: &[Sample], cfg: &GsnFtConfig) -> Result<(HeadModel, GsnFtTrace)> {
    cfg.validate()?;
    if aux.is_empty() {
        return Err(Error::invalid("auxiliary set is empty"));
    }
    for s in aux {
        s.validate(m)?;
    }
    let aux = &aux[..aux.len().min(cfg.aux_size)];
    let batch = cfg.batch_size.min(aux.len());
    let mut rng = Xoshiro256StarStar::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..aux.len()).collect();
    let mut cursor = aux.len();

    let record = |model: &HeadModel, step: usize| -> Result<GsnFtStep> {
        let loss = cross_entropy_loss(model, aux)?;
        if !loss.is_finite() {
            return Err(Error::NumericFailure {
                step,
                message: "non-finite cross-entropy loss".into(),
            });
        }
        Ok(GsnFtStep {
            step,
            kappa: mean_kappa(model, aux, cfg.rank)?,
            loss,
            weight_spectral_norm: spectral_norm(model.weight()),
        })
    };

    let mut steps = vec![record(m, 0)?];
    let mut best = (0usize, steps[0].kappa, m.clone());
    let mut current = m.clone();
    for step in 1..=cfg.max_steps {
        if cursor + batch > aux.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let chunk: Vec<Sample> = idx.iter().map(|&i| aux[i].clone()).collect();
        let (loss, g) = cross_entropy_gradients(&current, &chunk)?;
        if !loss.is_finite() {
            return Err(Error::NumericFailure {
                step,
                message: "non-finite cross-entropy loss".into(),
            });
        }
        current = descend(&current, &g, cfg.learning_rate)
            .map_err(|_| Error::NumericFailure {
                step,
                message: "parameters became non-finite".into(),
            })?;
        let rec = record(&current, step)?;
        if rec.kappa > best.1 {
            best = (step, rec.kappa, current.clone());
        }
        steps.push(rec);
    }
    let (selected_step, _, model) = best;
    Ok((
        model,
        GsnFtTrace {
            steps,
            selected_step,
        },
    ))
}

pub(crate) fn descend(m: &HeadModel, g: &HeadGradients, lr: f64) -> Result<HeadModel> {
    let step = |p: &[f64], d: &[f64]| -> Vec<f64> {
        p.iter().zip(d).map(|(a, b)| a - lr * b).collect()
    };
    let w = DenseMatrix::new(m.d_out(), m.d_in(), step(m.weight().as_slice(), g.w.as_slice()))?;
    let wc = DenseMatrix::new(
        m.classes(),
        m.d_out(),
        step(m.head_weight().as_slice(), g.wc.as_slice()),
    )?;
    HeadModel::new(
        w,
        step(m.bias(), &g.b),
        wc,
        step(m.head_bias(), &g.bc),
        m.activation(),
    )
}
