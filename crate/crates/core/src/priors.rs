//! Auxiliary generation losses: one-hot classification cross-entropy and
//! total-variation smoothing, plus their weighted combination with the
//! similarity-entropy term.

use ndarray::{ArrayView2, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VitqError};
use crate::tape::Var;
use crate::tensor;

/// Balance coefficients of the combined generation loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenLossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for GenLossWeights {
    fn default() -> Self {
        GenLossWeights { alpha1: 1.0, alpha2: 0.05 }
    }
}

/// Mean cross-entropy between softmax(logits) and one-hot targets.
pub fn one_hot_loss(logits: &ArrayView2<f64>, targets: &[usize]) -> Result<f64> {
    let (b, c) = logits.dim();
    if targets.len() != b {
        return Err(VitqError::Contract(format!(
            "{} targets for a batch of {b}",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(VitqError::Contract(format!(
            "target class {bad} out of range for {c} classes"
        )));
    }
    let logp = tensor::log_softmax_last(&logits.to_owned().into_dyn().view());
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -logp[[i, t]])
        .sum();
    Ok(total / b as f64)
}

/// Differentiable one-hot loss; `logits` is a `[B, C]` var.
pub fn one_hot_loss_tape(logits: &Var, targets: &[usize]) -> Result<Var> {
    let shape = logits.shape();
    let (b, c) = (shape[0], shape[1]);
    if targets.len() != b {
        return Err(VitqError::Contract(format!(
            "{} targets for a batch of {b}",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(VitqError::Contract(format!(
            "target class {bad} out of range for {c} classes"
        )));
    }
    let flat_idx: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * c + t).collect();
    Ok(logits.log_softmax_last().gather_flat(&flat_idx).mean_all().neg())
}

/// Anisotropic discrete total variation with forward differences: mean over
/// batch and channels of the summed absolute neighbor differences, divided
/// by the pixel count.
pub fn tv_loss(image: &ArrayView4<f64>) -> f64 {
    let (b, c, h, w) = image.dim();
    assert!(h >= 2 && w >= 2, "image must be at least 2x2");
    let mut total = 0.0;
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = image[[bi, ci, y, x]];
                    if x + 1 < w {
                        total += (image[[bi, ci, y, x + 1]] - v).abs();
                    }
                    if y + 1 < h {
                        total += (image[[bi, ci, y + 1, x]] - v).abs();
                    }
                }
            }
        }
    }
    total / (b * c * h * w) as f64
}

/// Differentiable total variation; `image` is a `[B, C, H, W]` var.
pub fn tv_loss_tape(image: &Var) -> Var {
    let shape = image.shape();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(h >= 2 && w >= 2, "image must be at least 2x2");
    let dx = image
        .slice_axis(3, 1, w - 1)
        .sub(&image.slice_axis(3, 0, w - 1))
        .abs()
        .sum_all();
    let dy = image
        .slice_axis(2, 1, h - 1)
        .sub(&image.slice_axis(2, 0, h - 1))
        .abs()
        .sum_all();
    dx.add(&dy).scale(1.0 / (b * c * h * w) as f64)
}

/// `L = pse + alpha1 * oh + alpha2 * tv`.
pub fn total_generation_loss(pse: f64, oh: f64, tv: f64, w: &GenLossWeights) -> f64 {
    pse + w.alpha1 * oh + w.alpha2 * tv
}

/// Tape combination mirroring [`total_generation_loss`]. Terms with zero
/// weight may be `None` and are then skipped entirely (used by ablations).
pub fn total_generation_loss_tape(
    pse: Option<&Var>,
    oh: Option<&Var>,
    tv: Option<&Var>,
    w: &GenLossWeights,
) -> Result<Var> {
    let mut acc: Option<Var> = pse.cloned();
    if let Some(oh) = oh {
        let term = oh.scale(w.alpha1);
        acc = Some(match acc {
            Some(a) => a.add(&term),
            None => term,
        });
    }
    if let Some(tv) = tv {
        let term = tv.scale(w.alpha2);
        acc = Some(match acc {
            Some(a) => a.add(&term),
            None => term,
        });
    }
    acc.ok_or_else(|| VitqError::Contract("generation loss needs at least one term".into()))
}
