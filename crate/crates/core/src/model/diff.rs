//! Differentiable forward pass on the gradient tape. Mirrors
//! [`super::forward`] operation for operation so both paths produce the same
//! values; the tape version additionally yields gradients for the input
//! pixels and every parameter leaf.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::config::ModelConfig;
use super::forward::LN_EPS;
use super::params::{tensor_layout, ParameterSet};
use crate::error::{Result, VitqError};
use crate::tape::{Tape, Var};

/// Parameter tensors registered as tape leaves, keyed by canonical name.
pub struct TapeParams {
    pub vars: BTreeMap<String, Var>,
}

impl TapeParams {
    /// Register every tensor of `params` as a leaf on `tape`.
    pub fn from_parameter_set(tape: &Tape, params: &ParameterSet) -> Self {
        let vars = params
            .entries()
            .into_iter()
            .map(|(name, tensor)| (name, tape.leaf(tensor.clone())))
            .collect();
        TapeParams { vars }
    }

    /// Register externally held tensors, which must follow the canonical
    /// layout order for `cfg`.
    pub fn from_tensors(tape: &Tape, cfg: &ModelConfig, tensors: &[ArrayD<f64>]) -> Result<Self> {
        let layout = tensor_layout(cfg);
        if layout.len() != tensors.len() {
            return Err(VitqError::Contract(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        let mut vars = BTreeMap::new();
        for ((name, shape), tensor) in layout.into_iter().zip(tensors) {
            if tensor.shape() != shape.as_slice() {
                return Err(VitqError::Shape {
                    tensor: name,
                    expected: shape,
                    actual: tensor.shape().to_vec(),
                });
            }
            vars.insert(name, tape.leaf(tensor.clone()));
        }
        Ok(TapeParams { vars })
    }

    pub fn get(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter leaf {name}"))
    }
}

/// Flat gather indices that rearrange `[B, 3, S, S]` pixels into
/// `[B, N, 3 * patch^2]` patch rows, channel-major within each patch.
fn patch_gather_indices(batch: usize, cfg: &ModelConfig) -> Vec<usize> {
    let s = cfg.image_side;
    let ps = cfg.patch_size;
    let per_side = s / ps;
    let mut idx = Vec::with_capacity(batch * cfg.num_patches * cfg.patch_dim());
    for b in 0..batch {
        for py in 0..per_side {
            for px in 0..per_side {
                for c in 0..3 {
                    for dy in 0..ps {
                        for dx in 0..ps {
                            idx.push(((b * 3 + c) * s + py * ps + dy) * s + px * ps + dx);
                        }
                    }
                }
            }
        }
    }
    idx
}

fn linear(x: &Var, tp: &TapeParams, name: &str) -> Var {
    x.matmul(tp.get(&format!("{name}.weight")))
        .add(tp.get(&format!("{name}.bias")))
}

fn split_heads(x: &Var, b: usize, t: usize, heads: usize, d: usize) -> Var {
    x.reshape(&[b, t, heads, d]).permute(&[0, 2, 1, 3])
}

/// Differentiable forward. Returns logits `[B, C]` and, when `capture` is
/// set, one `[B, H, N, d]` attention-output node per layer (class row
/// dropped).
pub fn forward_tape(
    tape: &Tape,
    tp: &TapeParams,
    cfg: &ModelConfig,
    images: &Var,
    capture: bool,
) -> Result<(Var, Vec<Var>)> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.image_side || shape[3] != cfg.image_side
    {
        return Err(VitqError::Config(format!(
            "image shape {shape:?} does not match configured [_, 3, {0}, {0}]",
            cfg.image_side
        )));
    }
    let b = shape[0];
    let (t, heads, hd, n, d) = (
        cfg.tokens(),
        cfg.num_heads,
        cfg.head_dim,
        cfg.num_patches,
        cfg.hidden_size,
    );
    let scale = 1.0 / (hd as f64).sqrt();

    // Patch embedding
    let idx = patch_gather_indices(b, cfg);
    let patches = images
        .gather_flat(&idx)
        .reshape(&[b, cfg.num_patches, cfg.patch_dim()]);
    let projected = patches
        .matmul(tp.get("patch_embed.weight"))
        .add(tp.get("patch_embed.bias"));
    let pos = tp.get("pos_embed");
    let patch_rows = projected.add(&pos.slice_axis(0, 1, n));
    let cls_row_vec = tp
        .get("cls_token")
        .reshape(&[1, d])
        .add(&pos.slice_axis(0, 0, 1))
        .reshape(&[1, 1, d]);
    let cls_rows = tape
        .leaf(ArrayD::zeros(ndarray::IxDyn(&[b, 1, d])))
        .add(&cls_row_vec);
    let mut x = Var::concat(1, &[cls_rows, patch_rows]);

    let mut trace = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let l = |suffix: &str| format!("layer{i}.{suffix}");

        let ln1 = x.layer_norm(tp.get(&l("ln1.weight")), tp.get(&l("ln1.bias")), LN_EPS);
        let q = linear(&ln1, tp, &l("attn.q"));
        let k = linear(&ln1, tp, &l("attn.k"));
        let v = linear(&ln1, tp, &l("attn.v"));

        let qh = split_heads(&q, b, t, heads, hd);
        let kh = split_heads(&k, b, t, heads, hd);
        let vh = split_heads(&v, b, t, heads, hd);

        let scores = qh.matmul(&kh.transpose_last2()).scale(scale);
        let probs = scores.softmax_last();
        let ctx = probs.matmul(&vh); // [B, H, T, d]

        if capture {
            trace.push(ctx.slice_axis(2, 1, n));
        }

        let merged = ctx.permute(&[0, 2, 1, 3]).reshape(&[b, t, d]);
        let attn_out = linear(&merged, tp, &l("attn.proj"));
        x = x.add(&attn_out);

        let ln2 = x.layer_norm(tp.get(&l("ln2.weight")), tp.get(&l("ln2.bias")), LN_EPS);
        let hidden = linear(&ln2, tp, &l("mlp.fc1")).gelu();
        let mlp_out = hidden.matmul(tp.get(&format!("{}.weight", l("mlp.fc2"))));
        let mlp_out = mlp_out.add(tp.get(&format!("{}.bias", l("mlp.fc2"))));
        x = x.add(&mlp_out);
    }

    let normed = x.layer_norm(tp.get("norm.weight"), tp.get("norm.bias"), LN_EPS);
    let cls = normed.slice_axis(1, 0, 1).reshape(&[b, d]);
    let logits = cls.matmul(tp.get("head.weight")).add(tp.get("head.bias"));

    if logits.value().iter().any(|v| !v.is_finite()) {
        return Err(VitqError::Numerical {
            component: "differentiable forward logits".into(),
            detail: "non-finite value".into(),
        });
    }

    Ok((logits, trace))
}
