//! Checkpoint persistence: a JSON manifest (tensor name, shape, dtype, byte
//! offset) next to a single little-endian f32 blob. Values are stored as f32
//! and the in-memory parameters are kept on the f32 grid, so a save/load
//! round trip is bit-exact.
//!
//! [`import_safetensors`] additionally maps the naming scheme used by
//! published ViT/DeiT checkpoints onto this crate's canonical layout. It is
//! a best-effort adapter: only f32 tensors, no distillation tokens.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VitqError};
use crate::model::{ModelConfig, ParameterSet};

pub const MANIFEST_FORMAT: &str = "vitq-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the blob file.
    offset: u64,
    /// Element count.
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    /// Blob file name, relative to the manifest's directory.
    blob: String,
    tensors: Vec<TensorEntry>,
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(blob)
}

/// Write `params` as `<manifest_path>` plus a sibling `.bin` blob. The same
/// parameters always produce byte-identical files.
pub fn save_checkpoint(params: &ParameterSet, manifest_path: &Path) -> Result<()> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| VitqError::Load(format!("bad manifest path {}", manifest_path.display())))?;
    let blob_name = format!("{stem}.bin");

    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in params.entries() {
        let offset = blob.len() as u64;
        for v in tensor.iter() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape: tensor.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            len: tensor.len(),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        config: *params.config(),
        blob: blob_name.clone(),
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| VitqError::Serde(e.to_string()))?;
    fs::write(manifest_path, json)
        .map_err(|e| VitqError::Load(format!("{}: {e}", manifest_path.display())))?;
    let bp = blob_path(manifest_path, &blob_name);
    fs::write(&bp, blob).map_err(|e| VitqError::Load(format!("{}: {e}", bp.display())))?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`]. Every tensor is checked
/// against the manifest's config; failures name the offending tensor.
pub fn load_checkpoint(manifest_path: &Path) -> Result<ParameterSet> {
    let json = fs::read_to_string(manifest_path)
        .map_err(|e| VitqError::Load(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| VitqError::Serde(e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(VitqError::Load(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    manifest.config.validate()?;
    let bp = blob_path(manifest_path, &manifest.blob);
    let blob = fs::read(&bp).map_err(|e| VitqError::Load(format!("{}: {e}", bp.display())))?;

    let mut map = BTreeMap::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(VitqError::Load(format!(
                "tensor \"{}\" has unsupported dtype {:?}",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if numel != entry.len {
            return Err(VitqError::Load(format!(
                "tensor \"{}\" length {} does not match shape {:?}",
                entry.name, entry.len, entry.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len * 4;
        if end > blob.len() {
            return Err(VitqError::Load(format!(
                "tensor \"{}\" extends past end of blob ({} > {})",
                entry.name,
                end,
                blob.len()
            )));
        }
        let mut data = Vec::with_capacity(entry.len);
        for chunk in blob[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| VitqError::Load(format!("tensor \"{}\": {e}", entry.name)))?;
        map.insert(entry.name.clone(), tensor);
    }
    ParameterSet::from_tensor_map(&manifest.config, map)
}

// ---- external checkpoint adapter -------------------------------------------

struct SafetensorsFile {
    header: serde_json::Map<String, serde_json::Value>,
    data: Vec<u8>,
    data_start: usize,
}

impl SafetensorsFile {
    fn open(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| VitqError::Load(format!("{}: {e}", path.display())))?;
        if bytes.len() < 8 {
            return Err(VitqError::Load("file too short for header".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if 8 + header_len > bytes.len() {
            return Err(VitqError::Load("header length exceeds file size".into()));
        }
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + header_len])
            .map_err(|e| VitqError::Serde(format!("header: {e}")))?;
        let header = header
            .as_object()
            .ok_or_else(|| VitqError::Load("header is not a JSON object".into()))?
            .clone();
        Ok(SafetensorsFile {
            header,
            data_start: 8 + header_len,
            data: bytes,
        })
    }

    fn tensor(&self, name: &str) -> Result<ArrayD<f64>> {
        let info = self.header.get(name).ok_or_else(|| {
            VitqError::Load(format!("missing tensor \"{name}\" in external checkpoint"))
        })?;
        let dtype = info["dtype"].as_str().unwrap_or("");
        if dtype != "F32" {
            return Err(VitqError::Load(format!(
                "tensor \"{name}\" has unsupported dtype {dtype:?} (only F32)"
            )));
        }
        let shape: Vec<usize> = info["shape"]
            .as_array()
            .ok_or_else(|| VitqError::Load(format!("tensor \"{name}\": bad shape")))?
            .iter()
            .map(|v| v.as_u64().unwrap_or(0) as usize)
            .collect();
        let offsets = info["data_offsets"]
            .as_array()
            .ok_or_else(|| VitqError::Load(format!("tensor \"{name}\": bad offsets")))?;
        let start = self.data_start + offsets[0].as_u64().unwrap_or(0) as usize;
        let end = self.data_start + offsets[1].as_u64().unwrap_or(0) as usize;
        if end > self.data.len() || start > end {
            return Err(VitqError::Load(format!(
                "tensor \"{name}\" extends past end of file"
            )));
        }
        let numel: usize = shape.iter().product();
        if end - start != numel * 4 {
            return Err(VitqError::Load(format!(
                "tensor \"{name}\" byte span does not match shape {shape:?}"
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in self.data[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| VitqError::Load(format!("tensor \"{name}\": {e}")))
    }
}

fn transpose2(t: &ArrayD<f64>) -> ArrayD<f64> {
    t.view().permuted_axes(IxDyn(&[1, 0])).to_owned()
}

/// Import a published ViT/DeiT checkpoint (`.safetensors`) whose geometry
/// matches `cfg`. Handles the fused qkv projection, the [out, in] weight
/// convention, and the flattened patch-projection convolution.
pub fn import_safetensors(path: &Path, cfg: &ModelConfig) -> Result<ParameterSet> {
    cfg.validate()?;
    let file = SafetensorsFile::open(path)?;
    let d = cfg.hidden_size;
    let mut map: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();

    let cls = file.tensor("cls_token")?; // [1, 1, D]
    map.insert(
        "cls_token".into(),
        cls.to_shape(IxDyn(&[d]))
            .map_err(|_| VitqError::Load(format!("cls_token shape {:?}", cls.shape())))?
            .into_owned(),
    );
    let pos = file.tensor("pos_embed")?; // [1, N+1, D]
    map.insert(
        "pos_embed".into(),
        pos.to_shape(IxDyn(&[cfg.tokens(), d]))
            .map_err(|_| VitqError::Load(format!("pos_embed shape {:?}", pos.shape())))?
            .into_owned(),
    );

    let pw = file.tensor("patch_embed.proj.weight")?; // [D, 3, ps, ps]
    let flat = pw
        .to_shape(IxDyn(&[d, cfg.patch_dim()]))
        .map_err(|_| VitqError::Load(format!("patch projection shape {:?}", pw.shape())))?
        .into_owned();
    map.insert("patch_embed.weight".into(), transpose2(&flat));
    map.insert("patch_embed.bias".into(), file.tensor("patch_embed.proj.bias")?);

    for i in 0..cfg.num_layers {
        let src = |s: &str| format!("blocks.{i}.{s}");
        let dst = |s: &str| format!("layer{i}.{s}");
        map.insert(dst("ln1.weight"), file.tensor(&src("norm1.weight"))?);
        map.insert(dst("ln1.bias"), file.tensor(&src("norm1.bias"))?);
        map.insert(dst("ln2.weight"), file.tensor(&src("norm2.weight"))?);
        map.insert(dst("ln2.bias"), file.tensor(&src("norm2.bias"))?);

        let qkv_w = file.tensor(&src("attn.qkv.weight"))?; // [3D, D], [out, in]
        if qkv_w.shape() != [3 * d, d] {
            return Err(VitqError::Load(format!(
                "tensor \"{}\" has shape {:?}, expected [{}, {}]",
                src("attn.qkv.weight"),
                qkv_w.shape(),
                3 * d,
                d
            )));
        }
        let qkv_b = file.tensor(&src("attn.qkv.bias"))?; // [3D]
        for (j, part) in ["q", "k", "v"].iter().enumerate() {
            let rows = qkv_w
                .slice_axis(ndarray::Axis(0), ndarray::Slice::from(j * d..(j + 1) * d))
                .to_owned();
            map.insert(dst(&format!("attn.{part}.weight")), transpose2(&rows));
            let brows = qkv_b
                .slice_axis(ndarray::Axis(0), ndarray::Slice::from(j * d..(j + 1) * d))
                .to_owned();
            map.insert(dst(&format!("attn.{part}.bias")), brows);
        }
        map.insert(
            dst("attn.proj.weight"),
            transpose2(&file.tensor(&src("attn.proj.weight"))?),
        );
        map.insert(dst("attn.proj.bias"), file.tensor(&src("attn.proj.bias"))?);
        map.insert(
            dst("mlp.fc1.weight"),
            transpose2(&file.tensor(&src("mlp.fc1.weight"))?),
        );
        map.insert(dst("mlp.fc1.bias"), file.tensor(&src("mlp.fc1.bias"))?);
        map.insert(
            dst("mlp.fc2.weight"),
            transpose2(&file.tensor(&src("mlp.fc2.weight"))?),
        );
        map.insert(dst("mlp.fc2.bias"), file.tensor(&src("mlp.fc2.bias"))?);
    }

    map.insert("norm.weight".into(), file.tensor("norm.weight")?);
    map.insert("norm.bias".into(), file.tensor("norm.bias")?);
    map.insert("head.weight".into(), transpose2(&file.tensor("head.weight")?));
    map.insert("head.bias".into(), file.tensor("head.bias")?);

    ParameterSet::from_tensor_map(cfg, map)
}
