//! Parameter storage with a canonical tensor naming scheme.
//!
//! Tensor names (layers are 0-indexed):
//! `patch_embed.weight/.bias`, `cls_token`, `pos_embed`,
//! `layer{i}.ln1.weight/.bias`, `layer{i}.attn.{q,k,v,proj}.weight/.bias`,
//! `layer{i}.ln2.weight/.bias`, `layer{i}.mlp.{fc1,fc2}.weight/.bias`,
//! `norm.weight/.bias`, `head.weight/.bias`.
//!
//! Values are held as `f64` for computation but are always snapped to the
//! nearest `f32` (the storage precision), so save/load round-trips are
//! bit-exact and digests are stable.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Result, VitqError};

#[derive(Debug, Clone)]
pub struct ParameterSet {
    config: ModelConfig,
    tensors: BTreeMap<String, ArrayD<f64>>,
}

/// Canonical tensor list: `(name, shape)` in a fixed order used for
/// checkpoints, digests, and optimizer state.
pub fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden_size;
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("patch_embed.weight".into(), vec![cfg.patch_dim(), d]),
        ("patch_embed.bias".into(), vec![d]),
        ("cls_token".into(), vec![d]),
        ("pos_embed".into(), vec![cfg.tokens(), d]),
    ];
    for i in 0..cfg.num_layers {
        let l = |suffix: &str| format!("layer{i}.{suffix}");
        out.push((l("ln1.weight"), vec![d]));
        out.push((l("ln1.bias"), vec![d]));
        for proj in ["q", "k", "v"] {
            out.push((l(&format!("attn.{proj}.weight")), vec![d, d]));
            out.push((l(&format!("attn.{proj}.bias")), vec![d]));
        }
        out.push((l("attn.proj.weight"), vec![d, d]));
        out.push((l("attn.proj.bias"), vec![d]));
        out.push((l("ln2.weight"), vec![d]));
        out.push((l("ln2.bias"), vec![d]));
        out.push((l("mlp.fc1.weight"), vec![d, cfg.mlp_hidden]));
        out.push((l("mlp.fc1.bias"), vec![cfg.mlp_hidden]));
        out.push((l("mlp.fc2.weight"), vec![cfg.mlp_hidden, d]));
        out.push((l("mlp.fc2.bias"), vec![d]));
    }
    out.push(("norm.weight".into(), vec![d]));
    out.push(("norm.bias".into(), vec![d]));
    out.push(("head.weight".into(), vec![d, cfg.num_classes]));
    out.push(("head.bias".into(), vec![cfg.num_classes]));
    out
}

/// Round to the nearest `f32`, the precision everything is stored at.
pub fn snap_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ParameterSet {
    /// Random initialization: normal(0, 0.02) weights, zero biases, unit
    /// layer-norm scales. Deterministic per seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid distribution");
        let mut tensors = BTreeMap::new();
        for (name, shape) in tensor_layout(cfg) {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = if name.ends_with("ln1.weight")
                || name.ends_with("ln2.weight")
                || name == "norm.weight"
            {
                vec![1.0; n]
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| snap_f32(normal.sample(&mut rng))).collect()
            };
            tensors.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), values).unwrap());
        }
        Ok(ParameterSet { config: *cfg, tensors })
    }

    /// Assemble from named tensors, validating every shape. Errors name the
    /// offending tensor.
    pub fn from_tensor_map(cfg: &ModelConfig, mut map: BTreeMap<String, ArrayD<f64>>) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in tensor_layout(cfg) {
            let Some(tensor) = map.remove(&name) else {
                return Err(VitqError::Load(format!("missing tensor \"{name}\"")));
            };
            if tensor.shape() != shape.as_slice() {
                return Err(VitqError::Shape {
                    tensor: name,
                    expected: shape,
                    actual: tensor.shape().to_vec(),
                });
            }
            tensors.insert(name, tensor);
        }
        if let Some((extra, _)) = map.into_iter().next() {
            return Err(VitqError::Load(format!("unexpected tensor \"{extra}\"")));
        }
        Ok(ParameterSet { config: *cfg, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("tensor \"{name}\" absent from a validated parameter set"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("tensor \"{name}\" absent from a validated parameter set"))
    }

    /// Tensors in canonical order.
    pub fn entries(&self) -> Vec<(String, &ArrayD<f64>)> {
        tensor_layout(&self.config)
            .into_iter()
            .map(|(name, _)| {
                let t = self.tensors.get(&name).expect("validated set");
                (name, t)
            })
            .collect()
    }

    /// Snap every value to `f32` storage precision.
    pub fn snap_to_storage(&mut self) {
        for tensor in self.tensors.values_mut() {
            tensor.mapv_inplace(snap_f32);
        }
    }

    /// SHA-256 over the canonical tensor order and their little-endian `f32`
    /// encodings. Identical digests mean identical stored weights.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in self.entries() {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &v in tensor.iter() {
                hasher.update((v as f32).to_le_bytes());
            }
        }
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}
