use crate::error::{Error, Result};
use crate::numerics::{dot, norm, FlatParams};

use super::model::ToyFM;

/// Probability clamp applied before the logarithm in [`seg_loss`].
pub const PROB_EPS: f64 = 1e-7;

/// A batch of flattened images and binary masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

impl Batch {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::invalid(format!(
                "batch needs matching non-empty inputs and targets, got {} and {}",
                inputs.len(),
                targets.len()
            )));
        }
        for (x, y) in inputs.iter().zip(&targets) {
            if x.len() != y.len() {
                return Err(Error::invalid("input and mask lengths differ"));
            }
            check_binary(y)?;
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.inputs
            .iter()
            .zip(&self.targets)
            .map(|(x, y)| (x.as_slice(), y.as_slice()))
    }
}

fn check_binary(y: &[f64]) -> Result<()> {
    match y.iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(Error::invalid(format!("mask entry {i} is {} (expected 0 or 1)", y[i]))),
        None => Ok(()),
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel clamped BCE and its derivative w.r.t. the logit.
pub(crate) fn bce_with_grad(logit: f64, y: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let clamped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let loss = -(y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln());
    // the clamp is flat outside [eps, 1-eps]
    let grad = if p > PROB_EPS && p < 1.0 - PROB_EPS { p - y } else { 0.0 };
    (loss, grad)
}

/// Mean binary cross-entropy over pixels with sigmoid probabilities.
pub fn seg_loss(logits: &[f64], y: &[f64]) -> Result<f64> {
    if logits.len() != y.len() || y.is_empty() {
        return Err(Error::invalid(format!(
            "logits ({}) and mask ({}) must have equal non-zero length",
            logits.len(),
            y.len()
        )));
    }
    check_binary(y)?;
    let total: f64 = logits.iter().zip(y).map(|(&z, &t)| bce_with_grad(z, t).0).sum();
    Ok(total / y.len() as f64)
}

/// Negative cosine between the low-level adapters and the round's reference
/// vector. Zero when `theta_low` is the zero vector.
pub fn reg_loss(theta_low: &FlatParams, theta_ref: &FlatParams) -> Result<f64> {
    theta_low.ensure_same_manifest(theta_ref)?;
    Ok(neg_cosine_with_grad(theta_low.values(), theta_ref.values(), false)?.0)
}

/// `(-cos(a, r), d/da)`; the gradient is only computed when asked for.
pub(crate) fn neg_cosine_with_grad(a: &[f64], r: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let nr = norm(r);
    if nr == 0.0 {
        return Err(Error::invalid("regularization reference must be non-zero"));
    }
    let na = norm(a);
    if na == 0.0 {
        return Ok((0.0, vec![0.0; if want_grad { a.len() } else { 0 }]));
    }
    let cos = dot(a, r) / (na * nr);
    let grad = if want_grad {
        a.iter()
            .zip(r)
            .map(|(ai, ri)| -(ri / (na * nr) - cos * ai / (na * na)))
            .collect()
    } else {
        Vec::new()
    };
    Ok((-cos, grad))
}

/// `theta_ref` must cover adapter layers `1..=L` of `m`.
pub(crate) fn low_layer_count(m: &ToyFM, theta_ref: &FlatParams) -> Result<usize> {
    let layers = theta_ref.manifest().len();
    if layers == 0 || layers > m.dims().blocks || theta_ref.manifest() != m.dims().manifest(layers) {
        return Err(Error::invalid(format!(
            "reference manifest {:?} is not adapter layers 1..=L",
            theta_ref.manifest()
        )));
    }
    Ok(layers)
}

/// Mean segmentation loss over the batch plus `beta` times the cosine
/// regularizer on the low-level adapters.
pub fn objective(batch: &Batch, m: &ToyFM, theta_ref: &FlatParams, beta: f64) -> Result<f64> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
    }
    let layers = low_layer_count(m, theta_ref)?;
    let mut total = 0.0;
    for (x, y) in batch.iter() {
        total += seg_loss(&m.forward(x)?, y)?;
    }
    let seg = total / batch.len() as f64;
    if beta == 0.0 {
        return Ok(seg);
    }
    Ok(seg + beta * reg_loss(&m.low_params(layers)?, theta_ref)?)
}
