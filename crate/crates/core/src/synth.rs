//! Calibration-image synthesis: start from Gaussian noise and descend the
//! combined generation loss (similarity-entropy + one-hot + total-variation)
//! through the frozen model, updating only the pixels.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VitqError};
use crate::model::diff::{forward_tape, TapeParams};
use crate::model::{ModelConfig, ParameterSet};
use crate::optim::{Adam, AdamConfig};
use crate::patchsim::EntropyOptions;
use crate::priors::{one_hot_loss_tape, total_generation_loss_tape, tv_loss_tape, GenLossWeights};
use crate::tape::Tape;

/// Which loss terms participate in the descent. Disabled terms are neither
/// computed nor recorded (their history entries stay 0).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossSelection {
    pub pse: bool,
    pub one_hot: bool,
    pub tv: bool,
}

impl Default for LossSelection {
    fn default() -> Self {
        LossSelection {
            pse: true,
            one_hot: true,
            tv: true,
        }
    }
}

impl LossSelection {
    pub fn any(&self) -> bool {
        self.pse || self.one_hot || self.tv
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: GenLossWeights,
    pub select: LossSelection,
    /// Target class per image, length `batch_size`.
    pub targets: Vec<usize>,
    pub entropy: EntropyOptions,
}

impl GenConfig {
    /// Defaults with round-robin targets over the model's classes.
    pub fn new(steps: usize, seed: u64, num_classes: usize) -> Self {
        let batch_size = 32;
        GenConfig {
            batch_size,
            steps,
            lr: 0.05,
            seed,
            weights: GenLossWeights::default(),
            select: LossSelection::default(),
            targets: (0..batch_size).map(|i| i % num_classes).collect(),
            entropy: EntropyOptions::default(),
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(VitqError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(VitqError::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.targets.len() != self.batch_size {
            return Err(VitqError::Config(format!(
                "{} targets for batch of {}",
                self.targets.len(),
                self.batch_size
            )));
        }
        if let Some(t) = self.targets.iter().find(|t| **t >= model.num_classes) {
            return Err(VitqError::Config(format!(
                "target class {t} out of range for {} classes",
                model.num_classes
            )));
        }
        if !(self.weights.alpha1.is_finite() && self.weights.alpha2.is_finite()) {
            return Err(VitqError::Config("loss weights must be finite".into()));
        }
        Ok(())
    }
}

/// Unweighted values of the loss terms at one step; disabled terms are 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub pse: f64,
    pub one_hot: f64,
    pub tv: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratedBatch {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub loss_history: Vec<LossRecord>,
    pub seed: u64,
}

/// I.i.d. standard-normal pixels, deterministic per seed.
pub fn init_noise(gc: &GenConfig, image_side: usize) -> Array4<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(gc.seed);
    let mut images = Array4::<f64>::zeros((gc.batch_size, 3, image_side, image_side));
    for v in images.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    images
}

fn check_finite(name: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(VitqError::Numerical {
            component: name.into(),
            detail: format!("diverged to {value}"),
        })
    }
}

/// One descent step on the pixels. The model is read-only; optimizer state
/// lives in `adam` across steps.
pub fn generation_step(
    images: &mut Array4<f64>,
    params: &ParameterSet,
    gc: &GenConfig,
    adam: &mut Adam,
) -> Result<LossRecord> {
    let cfg = params.config();
    let tape = Tape::new();
    let tp = TapeParams::from_parameter_set(&tape, params);
    let pix = tape.leaf(images.clone().into_dyn());
    let (logits, trace) = forward_tape(&tape, &tp, cfg, &pix, gc.select.pse)?;

    let pse = if gc.select.pse {
        Some(crate::patchsim::pse_loss_tape(&trace, &tape, &gc.entropy)?)
    } else {
        None
    };
    let oh = if gc.select.one_hot {
        Some(one_hot_loss_tape(&logits, &gc.targets)?)
    } else {
        None
    };
    let tv = if gc.select.tv { Some(tv_loss_tape(&pix)) } else { None };

    let record = LossRecord {
        total: 0.0,
        pse: pse
            .as_ref()
            .map(|v| check_finite("similarity-entropy loss", v.scalar_value()))
            .transpose()?
            .unwrap_or(0.0),
        one_hot: oh
            .as_ref()
            .map(|v| check_finite("one-hot loss", v.scalar_value()))
            .transpose()?
            .unwrap_or(0.0),
        tv: tv
            .as_ref()
            .map(|v| check_finite("total-variation loss", v.scalar_value()))
            .transpose()?
            .unwrap_or(0.0),
    };

    if !gc.select.any() {
        return Ok(record);
    }
    let total = total_generation_loss_tape(pse.as_ref(), oh.as_ref(), tv.as_ref(), &gc.weights)?;
    let total_v = check_finite("total generation loss", total.scalar_value())?;

    let grads = tape.backward(&total);
    let g = grads.wrt(&pix).expect("pixels participate in the loss");
    let mut flat: ArrayD<f64> = images.clone().into_dyn();
    adam.step(&mut [&mut flat], &[Some(g)]);
    *images = flat
        .into_dimensionality::<ndarray::Ix4>()
        .expect("pixel shape preserved");

    Ok(LossRecord {
        total: total_v,
        ..record
    })
}

/// Run the full synthesis loop: noise init, then `steps` descent steps.
/// Deterministic per (seed, config, model).
pub fn generate_samples(params: &ParameterSet, gc: &GenConfig) -> Result<GeneratedBatch> {
    let cfg = params.config();
    gc.validate(cfg)?;
    let mut images = init_noise(gc, cfg.image_side);
    let mut adam = Adam::new(AdamConfig::with_lr(gc.lr));
    let mut history = Vec::with_capacity(gc.steps);
    for _ in 0..gc.steps {
        history.push(generation_step(&mut images, params, gc, &mut adam)?);
    }
    Ok(GeneratedBatch {
        images,
        labels: gc.targets.clone(),
        loss_history: history,
        seed: gc.seed,
    })
}

// ---- persistence ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct BatchManifest {
    format: String,
    shape: Vec<usize>,
    dtype: String,
    blob: String,
    seed: u64,
    labels: Vec<usize>,
    loss_history: Vec<LossRecord>,
}

pub const BATCH_FORMAT: &str = "vitq-genbatch-v1";

/// Persist a batch as a JSON manifest plus a little-endian f64 blob; the
/// round trip is bit-exact.
pub fn save_batch(batch: &GeneratedBatch, manifest_path: &Path) -> Result<()> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| VitqError::Load(format!("bad manifest path {}", manifest_path.display())))?;
    let blob_name = format!("{stem}.bin");
    let manifest = BatchManifest {
        format: BATCH_FORMAT.into(),
        shape: batch.images.shape().to_vec(),
        dtype: "f64".into(),
        blob: blob_name.clone(),
        seed: batch.seed,
        labels: batch.labels.clone(),
        loss_history: batch.loss_history.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, json)
        .map_err(|e| VitqError::Load(format!("{}: {e}", manifest_path.display())))?;
    let mut blob = Vec::with_capacity(batch.images.len() * 8);
    for v in batch.images.iter() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let bp = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&blob_name);
    fs::write(&bp, blob).map_err(|e| VitqError::Load(format!("{}: {e}", bp.display())))?;
    Ok(())
}

pub fn load_batch(manifest_path: &Path) -> Result<GeneratedBatch> {
    let json = fs::read_to_string(manifest_path)
        .map_err(|e| VitqError::Load(format!("{}: {e}", manifest_path.display())))?;
    let manifest: BatchManifest = serde_json::from_str(&json)?;
    if manifest.format != BATCH_FORMAT {
        return Err(VitqError::Load(format!(
            "unsupported batch format {:?}",
            manifest.format
        )));
    }
    if manifest.dtype != "f64" {
        return Err(VitqError::Load(format!(
            "unsupported batch dtype {:?}",
            manifest.dtype
        )));
    }
    let bp = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let blob = fs::read(&bp).map_err(|e| VitqError::Load(format!("{}: {e}", bp.display())))?;
    let numel: usize = manifest.shape.iter().product();
    if blob.len() != numel * 8 {
        return Err(VitqError::Load(format!(
            "blob holds {} bytes, manifest shape {:?} needs {}",
            blob.len(),
            manifest.shape,
            numel * 8
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in blob.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let images = ArrayD::from_shape_vec(IxDyn(&manifest.shape), data)
        .map_err(|e| VitqError::Load(format!("batch images: {e}")))?
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| VitqError::Load(format!("batch images must be 4-d, got {:?}", manifest.shape)))?;
    Ok(GeneratedBatch {
        images,
        labels: manifest.labels,
        loss_history: manifest.loss_history,
        seed: manifest.seed,
    })
}

/// Write per-image PNG previews, each affinely rescaled to [0, 1] on its
/// own (the stored tensors are what calibration consumes; previews are for
/// eyeballing only). Returns the written paths.
pub fn export_pngs(batch: &GeneratedBatch, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| VitqError::Load(format!("{}: {e}", dir.display())))?;
    let (b, _, h, w) = batch.images.dim();
    let mut paths = Vec::with_capacity(b);
    for i in 0..b {
        let img = batch.images.index_axis(ndarray::Axis(0), i);
        let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|c| {
                    let v = (img[[c, y, x]] - lo) / span;
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                });
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let path = dir.join(format!("sample_{i:03}_label{}.png", batch.labels[i]));
        buf.save(&path)
            .map_err(|e| VitqError::Load(format!("{}: {e}", path.display())))?;
        paths.push(path);
    }
    Ok(paths)
}
