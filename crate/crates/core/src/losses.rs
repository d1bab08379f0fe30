//! The three training losses and their weighted sum
//! `total = α·L_S + β·L_P + γ·L_G`.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Tensor};
use crate::error::{Error, Result};

/// Floor applied to probabilities inside the logarithm of the pseudo-label loss.
pub const PROB_EPS: f64 = 1e-8;

static EMPTY_MASK_BATCHES: AtomicUsize = AtomicUsize::new(0);

/// Number of Grad-CAM loss evaluations that had no valid cell at all.
pub fn empty_mask_batches() -> usize {
    EMPTY_MASK_BATCHES.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_p: f64,
    pub l_g: f64,
    pub total: f64,
}

/// Mean cross-entropy of `[N, K]` logits against class labels.
pub fn supervised_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let &[n, k] = logits.shape() else {
        return Err(Error::Input(format!("logits must be [N, K], got {:?}", logits.shape())));
    };
    if labels.len() != n || n == 0 {
        return Err(Error::Input(format!("{} labels for {n} logits rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    let log_p = autograd::log_softmax(logits);
    Ok(autograd::select_columns(&log_p, labels).mean_all().neg())
}

fn check_distribution(p: &Tensor, what: &str) -> Result<(usize, usize)> {
    let &[n, k] = p.shape() else {
        return Err(Error::Input(format!("{what} must be [N, K], got {:?}", p.shape())));
    };
    if n == 0 {
        return Err(Error::Input(format!("{what} is empty")));
    }
    for row in p.value().rows() {
        if row.iter().any(|v| !v.is_finite() || *v < -1e-12) || (row.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("{what} rows must be probability distributions")));
        }
    }
    Ok((n, k))
}

/// Cross-entropy `H(p_orig, p_aug) = -Σ_c p_orig,c · log p_aug,c`, averaged
/// over the batch. `p_orig` is a fixed target: it is detached here whatever
/// the caller passes. `p_aug` is clamped at [`PROB_EPS`] inside the log.
pub fn pseudo_label_loss(p_orig: &Tensor, p_aug: &Tensor) -> Result<Tensor> {
    let (n, k) = check_distribution(p_orig, "pseudo-label distribution")?;
    if check_distribution(p_aug, "augmented prediction")? != (n, k) {
        return Err(Error::Input(format!(
            "pseudo-label shape {:?} differs from prediction shape {:?}",
            p_orig.shape(),
            p_aug.shape()
        )));
    }
    let target = p_orig.detach();
    let log_q = p_aug.clamp(PROB_EPS, 1.0).ln();
    Ok(target.mul(&log_q).sum_all().scale(-1.0 / n as f64))
}

/// Mean squared difference between CAM batches over the cells flagged valid.
/// `cam_pseudo` is a fixed target and is detached here. With no valid cell the
/// loss is 0 and [`empty_mask_batches`] is incremented.
pub fn gradcam_consistency_loss(cam_pseudo: &Tensor, cam_aug: &Tensor, valid: &ArrayD<bool>) -> Result<Tensor> {
    if cam_pseudo.shape() != cam_aug.shape() || valid.shape() != cam_aug.shape() {
        return Err(Error::Input(format!(
            "CAM shapes differ: pseudo {:?}, augmented {:?}, mask {:?}",
            cam_pseudo.shape(),
            cam_aug.shape(),
            valid.shape()
        )));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        EMPTY_MASK_BATCHES.fetch_add(1, Ordering::Relaxed);
        log::warn!("Grad-CAM consistency loss over an all-invalid mask; using 0");
        return Ok(cam_aug.sum_all().scale(0.0));
    }
    let mask = valid.mapv(|v| if v { 1.0 } else { 0.0 });
    let diff = cam_aug.sub(&cam_pseudo.detach());
    Ok(diff
        .square()
        .mul(&Tensor::constant(mask))
        .sum_all()
        .scale(1.0 / count as f64))
}

/// `α·l_s + β·l_p + γ·l_g` on plain values.
pub fn combined_loss(parts: (f64, f64, f64), weights: &LossWeights) -> Result<LossBreakdown> {
    let (l_s, l_p, l_g) = parts;
    if ![l_s, l_p, l_g].iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite loss component: l_s={l_s}, l_p={l_p}, l_g={l_g}"
        )));
    }
    weights.validate()?;
    Ok(LossBreakdown {
        l_s,
        l_p,
        l_g,
        total: weights.alpha * l_s + weights.beta * l_p + weights.gamma * l_g,
    })
}

/// The same combination on graph values, for the optimizer step. Terms with a
/// zero weight are left out of the graph.
pub fn combine_tensors(l_s: Option<&Tensor>, l_p: Option<&Tensor>, l_g: Option<&Tensor>, weights: &LossWeights) -> Tensor {
    let terms = [(l_s, weights.alpha), (l_p, weights.beta), (l_g, weights.gamma)];
    terms
        .into_iter()
        .filter_map(|(t, w)| t.filter(|_| w != 0.0).map(|t| t.scale(w)))
        .reduce(|a, b| a.add(&b))
        .unwrap_or_else(|| Tensor::constant(ArrayD::zeros(IxDyn(&[]))))
}
