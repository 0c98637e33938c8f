//! Plain (non-differentiable) transformer forward pass with optional
//! attention capture and pluggable activation-site hooks.
//!
//! The activation sites are the operands of every matrix multiplication in
//! the attention and MLP blocks, plus the pre-softmax attention scores: the
//! scores are the accumulator of the Q·Kᵀ product, which integer pipelines
//! requantize before the softmax unit, and they are the only activation in
//! the network that no layer norm bounds. In [`SiteMode::Observe`] the
//! tensor flowing through a site is recorded into an observer; in
//! [`SiteMode::Quantize`] it is replaced by its fake-quantized value. Layer
//! norm, softmax, and GELU always run in full precision.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView4, Axis, IxDyn, Slice};

use super::config::ModelConfig;
use super::params::ParameterSet;
use crate::error::{Result, VitqError};
use crate::quant::{fake_quantize, ObserverState, QuantParams};
use crate::tensor;

pub const LN_EPS: f64 = 1e-6;

/// Per-layer per-head attention outputs `[B, H, N, d]`, class-token row
/// excluded.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub layers: Vec<Array4<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub logits: Array2<f64>,
    pub trace: Option<AttentionTrace>,
}

/// What happens to tensors flowing through activation sites.
pub enum SiteMode<'a> {
    Plain,
    Observe(&'a mut BTreeMap<String, ObserverState>),
    Quantize(&'a BTreeMap<String, QuantParams>),
}

/// Names of the activation sites of every layer, in forward order. The
/// attention-probability site is an optional extension and appears only
/// when `include_probs` is set.
pub fn activation_sites(cfg: &ModelConfig, include_probs: bool) -> Vec<String> {
    let mut sites = Vec::new();
    for i in 0..cfg.num_layers {
        sites.push(format!("layer{i}.attn.qkv_in"));
        sites.push(format!("layer{i}.attn.q_out"));
        sites.push(format!("layer{i}.attn.k_out"));
        sites.push(format!("layer{i}.attn.v_out"));
        sites.push(format!("layer{i}.attn.scores"));
        if include_probs {
            sites.push(format!("layer{i}.attn.probs"));
        }
        sites.push(format!("layer{i}.attn.proj_in"));
        sites.push(format!("layer{i}.mlp.fc1_in"));
        sites.push(format!("layer{i}.mlp.fc2_in"));
    }
    sites
}

/// Weight tensors that get fake-quantized when a model is wrapped: the
/// matmul weights of attention and MLP blocks.
pub fn quantizable_weights(cfg: &ModelConfig) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..cfg.num_layers {
        for t in ["attn.q", "attn.k", "attn.v", "attn.proj", "mlp.fc1", "mlp.fc2"] {
            names.push(format!("layer{i}.{t}.weight"));
        }
    }
    names
}

fn apply_site(name: &str, value: ArrayD<f64>, mode: &mut SiteMode, required: bool) -> Result<ArrayD<f64>> {
    match mode {
        SiteMode::Plain => Ok(value),
        SiteMode::Observe(bank) => {
            match bank.get_mut(name) {
                Some(obs) => obs.observe(&value.view()),
                None if required => {
                    return Err(VitqError::State(format!(
                        "no observer installed for activation site {name}"
                    )))
                }
                None => {}
            }
            Ok(value)
        }
        SiteMode::Quantize(table) => match table.get(name) {
            Some(qp) => Ok(fake_quantize(&value.view(), qp)),
            None if required => Err(VitqError::State(format!(
                "no quantization parameters for activation site {name}"
            ))),
            None => Ok(value),
        },
    }
}

/// Cut images into patches and flatten each as (channel, row, col) major:
/// output `[B, N, 3 * patch^2]`.
pub fn extract_patches(images: &ArrayView4<f64>, cfg: &ModelConfig) -> Result<Array3<f64>> {
    let (b, c, h, w) = images.dim();
    if c != 3 || h != cfg.image_side || w != cfg.image_side {
        return Err(VitqError::Config(format!(
            "image shape [{b}, {c}, {h}, {w}] does not match configured [_, 3, {0}, {0}]",
            cfg.image_side
        )));
    }
    let ps = cfg.patch_size;
    let per_side = cfg.image_side / ps;
    let mut patches = Array3::<f64>::zeros((b, cfg.num_patches, cfg.patch_dim()));
    for bi in 0..b {
        for py in 0..per_side {
            for px in 0..per_side {
                let p = py * per_side + px;
                for ci in 0..3 {
                    for dy in 0..ps {
                        for dx in 0..ps {
                            patches[[bi, p, ci * ps * ps + dy * ps + dx]] =
                                images[[bi, ci, py * ps + dy, px * ps + dx]];
                        }
                    }
                }
            }
        }
    }
    Ok(patches)
}

/// Project patches, prepend the class token, and add positional embeddings:
/// `[B, N+1, D]`.
pub fn patch_embed(images: &ArrayView4<f64>, params: &ParameterSet) -> Result<Array3<f64>> {
    let cfg = params.config();
    let patches = extract_patches(images, cfg)?;
    let b = patches.dim().0;
    let d = cfg.hidden_size;
    let w = params.get("patch_embed.weight");
    let bias = params.get("patch_embed.bias");
    let projected = tensor::matmul(&patches.view().into_dyn(), &w.view()) + bias;
    let cls = params.get("cls_token");
    let pos = params.get("pos_embed");
    let mut tokens = Array3::<f64>::zeros((b, cfg.tokens(), d));
    for bi in 0..b {
        for di in 0..d {
            tokens[[bi, 0, di]] = cls[[di]] + pos[[0, di]];
        }
        for p in 0..cfg.num_patches {
            for di in 0..d {
                tokens[[bi, p + 1, di]] = projected[[bi, p, di]] + pos[[p + 1, di]];
            }
        }
    }
    Ok(tokens)
}

fn split_heads(x: &ArrayD<f64>, b: usize, t: usize, heads: usize, d: usize) -> ArrayD<f64> {
    x.to_shape(IxDyn(&[b, t, heads, d]))
        .expect("head split")
        .permuted_axes(IxDyn(&[0, 2, 1, 3]))
        .to_owned()
}

fn linear(x: &ArrayD<f64>, params: &ParameterSet, name: &str) -> ArrayD<f64> {
    let w = params.get(&format!("{name}.weight"));
    let b = params.get(&format!("{name}.bias"));
    tensor::matmul(&x.view(), &w.view()) + b
}

/// Full forward pass. With `capture`, per-head attention outputs (class row
/// dropped) are returned alongside the logits; capture never alters the
/// computation.
pub fn forward(
    params: &ParameterSet,
    images: &ArrayView4<f64>,
    capture: bool,
    mode: &mut SiteMode,
) -> Result<ForwardResult> {
    let cfg = *params.config();
    let (b, t) = (images.dim().0, cfg.tokens());
    let (heads, hd, n) = (cfg.num_heads, cfg.head_dim, cfg.num_patches);
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = patch_embed(images, params)?.into_dyn();
    let mut trace = Vec::with_capacity(cfg.num_layers);

    for i in 0..cfg.num_layers {
        let l = |suffix: &str| format!("layer{i}.{suffix}");

        // Attention block
        let ln1 = tensor::layer_norm(
            &x.view(),
            params.get(&l("ln1.weight")).as_slice().unwrap(),
            params.get(&l("ln1.bias")).as_slice().unwrap(),
            LN_EPS,
        );
        let qkv_in = apply_site(&l("attn.qkv_in"), ln1, mode, true)?;
        let q = apply_site(&l("attn.q_out"), linear(&qkv_in, params, &l("attn.q")), mode, true)?;
        let k = apply_site(&l("attn.k_out"), linear(&qkv_in, params, &l("attn.k")), mode, true)?;
        let v = apply_site(&l("attn.v_out"), linear(&qkv_in, params, &l("attn.v")), mode, true)?;

        let qh = split_heads(&q, b, t, heads, hd);
        let kh = split_heads(&k, b, t, heads, hd);
        let vh = split_heads(&v, b, t, heads, hd);

        let kt = tensor::transpose_last2(&kh.view());
        let scores = tensor::matmul(&qh.view(), &kt.view()) * scale;
        let scores = apply_site(&l("attn.scores"), scores, mode, true)?;
        let probs = tensor::softmax_last(&scores.view());
        let probs = apply_site(&l("attn.probs"), probs, mode, false)?;
        let ctx = tensor::matmul(&probs.view(), &vh.view()); // [B, H, T, d]

        if capture {
            let o_l = ctx
                .slice_axis(Axis(2), Slice::from(1..t))
                .to_owned()
                .into_dimensionality::<ndarray::Ix4>()
                .expect("capture shape");
            debug_assert_eq!(o_l.dim(), (b, heads, n, hd));
            trace.push(o_l);
        }

        let merged = ctx
            .view()
            .permuted_axes(IxDyn(&[0, 2, 1, 3]))
            .to_shape(IxDyn(&[b, t, heads * hd]))
            .expect("head merge")
            .into_owned();
        let proj_in = apply_site(&l("attn.proj_in"), merged, mode, true)?;
        let attn_out = linear(&proj_in, params, &l("attn.proj"));
        x = x + attn_out;

        // MLP block
        let ln2 = tensor::layer_norm(
            &x.view(),
            params.get(&l("ln2.weight")).as_slice().unwrap(),
            params.get(&l("ln2.bias")).as_slice().unwrap(),
            LN_EPS,
        );
        let fc1_in = apply_site(&l("mlp.fc1_in"), ln2, mode, true)?;
        let hidden = linear(&fc1_in, params, &l("mlp.fc1")).mapv(tensor::gelu_scalar);
        let fc2_in = apply_site(&l("mlp.fc2_in"), hidden, mode, true)?;
        let mlp_out = linear(&fc2_in, params, &l("mlp.fc2"));
        x = x + mlp_out;
    }

    let normed = tensor::layer_norm(
        &x.view(),
        params.get("norm.weight").as_slice().unwrap(),
        params.get("norm.bias").as_slice().unwrap(),
        LN_EPS,
    );
    let cls_rows = normed.slice_axis(Axis(1), Slice::from(0..1));
    let cls_flat = cls_rows
        .to_shape(IxDyn(&[b, cfg.hidden_size]))
        .expect("cls row")
        .into_owned();
    let logits_d = tensor::matmul(&cls_flat.view(), &params.get("head.weight").view())
        + params.get("head.bias");
    let logits = logits_d
        .into_dimensionality::<ndarray::Ix2>()
        .expect("logits 2-d");

    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(VitqError::Numerical {
            component: "forward logits".into(),
            detail: format!("non-finite value {bad}"),
        });
    }

    Ok(ForwardResult {
        logits,
        trace: capture.then_some(AttentionTrace { layers: trace }),
    })
}

/// Row-wise argmax with ties broken toward the lower class index.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}
