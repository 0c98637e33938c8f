//! Stage 2: wrap a model with fake-quantization, calibrate activation
//! clipping ranges from a sample batch, and evaluate top-1 accuracy.
//!
//! Weight ranges are fixed at wrap time (symmetric MinMax per tensor);
//! activation ranges come from observers that watch full-precision values
//! flowing through the weight-quantized model. A bit width of 32 is a bypass
//! sentinel: values pass through untouched.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{ArrayView4, Axis, Slice};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VitqError};
use crate::model::{activation_sites, argmax_rows, forward, quantizable_weights, ParameterSet, SiteMode};
use crate::patchsim::{
    cosine_similarity_matrix, extract_training_points, write_density_csv, DensityCurve,
    DensityModel,
};
use crate::quant::{
    fake_quantize, params_from_range, ObserverConfig, ObserverState, QuantParams, Scheme, Strategy,
};
use crate::synth::GeneratedBatch;

/// Bit width meaning "leave values untouched".
pub const BYPASS_BITS: u32 = 32;

pub fn parse_strategy(name: &str) -> Result<Strategy> {
    match name {
        "minmax" => Ok(Strategy::MinMax),
        "ema" => Ok(Strategy::Ema),
        "percentile" => Ok(Strategy::Percentile),
        "omse" => Ok(Strategy::Omse),
        other => Err(VitqError::Config(format!(
            "unknown calibration strategy {other:?} (expected minmax, ema, percentile, or omse)"
        ))),
    }
}

pub fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::MinMax => "minmax",
        Strategy::Ema => "ema",
        Strategy::Percentile => "percentile",
        Strategy::Omse => "omse",
    }
}

/// A model with fixed weight quantizers and (after calibration) activation
/// quantizers at every matmul-operand site.
pub struct QuantizedModel {
    params: ParameterSet,
    pub k_w: u32,
    pub k_a: u32,
    pub weight_table: BTreeMap<String, QuantParams>,
    observers: BTreeMap<String, ObserverState>,
    pub act_table: Option<BTreeMap<String, QuantParams>>,
    observer_cfg: ObserverConfig,
    include_probs: bool,
}

fn check_bits(label: &str, bits: u32) -> Result<()> {
    if (2..=32).contains(&bits) {
        Ok(())
    } else {
        Err(VitqError::Config(format!(
            "{label} must be in 2..=32 (32 = bypass), got {bits}"
        )))
    }
}

/// Fake-quantize the attention/MLP matmul weights at `k_w` bits and install
/// per-site activation observers for `k_a`-bit calibration.
pub fn wrap_model(
    params: &ParameterSet,
    k_w: u32,
    k_a: u32,
    observer_cfg: ObserverConfig,
    include_probs: bool,
) -> Result<QuantizedModel> {
    check_bits("weight bit width", k_w)?;
    check_bits("activation bit width", k_a)?;

    let mut quantized = params.clone();
    let mut weight_table = BTreeMap::new();
    if k_w != BYPASS_BITS {
        for name in quantizable_weights(params.config()) {
            let w = quantized.get_mut(&name);
            let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let qp = params_from_range(lo, hi, k_w, Scheme::Symmetric)?;
            *w = fake_quantize(&w.view(), &qp);
            weight_table.insert(name, qp);
        }
    }

    let observers = if k_a != BYPASS_BITS {
        activation_sites(params.config(), include_probs)
            .into_iter()
            .map(|site| Ok((site, ObserverState::new(observer_cfg)?)))
            .collect::<Result<BTreeMap<_, _>>>()?
    } else {
        BTreeMap::new()
    };

    Ok(QuantizedModel {
        params: quantized,
        k_w,
        k_a,
        weight_table,
        observers,
        act_table: if k_a == BYPASS_BITS {
            Some(BTreeMap::new())
        } else {
            None
        },
        observer_cfg,
        include_probs,
    })
}

impl QuantizedModel {
    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn is_calibrated(&self) -> bool {
        self.act_table.is_some()
    }

    pub fn include_probs(&self) -> bool {
        self.include_probs
    }

    pub fn strategy(&self) -> Strategy {
        self.observer_cfg.strategy
    }

    /// Logits for a batch, applying activation quantizers when present.
    pub fn logits(&self, images: &ArrayView4<f64>) -> Result<ndarray::Array2<f64>> {
        let mut mode = match &self.act_table {
            Some(table) if self.k_a != BYPASS_BITS => SiteMode::Quantize(table),
            Some(_) => SiteMode::Plain,
            None => {
                return Err(VitqError::State(
                    "activation sites are not calibrated yet".into(),
                ))
            }
        };
        Ok(forward(&self.params, images, false, &mut mode)?.logits)
    }
}

/// Clip table and provenance of one calibration run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub strategy: String,
    /// Where the samples came from: "generated", "noise", or "real".
    pub provenance: String,
    pub num_samples: usize,
    pub seconds: f64,
    pub sites: BTreeMap<String, QuantParams>,
}

/// Feed every sample image through the weight-quantized model, recording
/// full-precision activations at each site, then freeze all observers into
/// quantizer parameters.
pub fn run_calibration(
    qm: &mut QuantizedModel,
    samples: &GeneratedBatch,
    provenance: &str,
) -> Result<CalibrationReport> {
    if samples.images.dim().0 == 0 {
        return Err(VitqError::Contract("calibration batch is empty".into()));
    }
    let start = Instant::now();
    let b = samples.images.dim().0;
    for i in 0..b {
        let image = samples
            .images
            .slice_axis(Axis(0), Slice::from(i..i + 1))
            .to_owned();
        forward(
            &qm.params,
            &image.view(),
            false,
            &mut SiteMode::Observe(&mut qm.observers),
        )?;
    }

    let mut table = BTreeMap::new();
    for (site, obs) in &qm.observers {
        let qp = obs.finalize(qm.k_a, Scheme::Asymmetric).map_err(|e| {
            VitqError::State(format!("site {site} could not be calibrated: {e}"))
        })?;
        table.insert(site.clone(), qp);
    }
    let report = CalibrationReport {
        strategy: strategy_name(qm.observer_cfg.strategy).to_string(),
        provenance: provenance.to_string(),
        num_samples: b,
        seconds: start.elapsed().as_secs_f64(),
        sites: table.clone(),
    };
    qm.act_table = Some(table);
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub dataset: String,
    pub num_images: usize,
}

const EVAL_CHUNK: usize = 64;

fn top1_fraction(
    logits_for: &mut dyn FnMut(&ArrayView4<f64>) -> Result<ndarray::Array2<f64>>,
    images: &ArrayView4<f64>,
    labels: &[usize],
) -> Result<f64> {
    let n = images.dim().0;
    if n == 0 || n != labels.len() {
        return Err(VitqError::Contract(format!(
            "evaluation needs matching non-empty images/labels, got {n} images and {} labels",
            labels.len()
        )));
    }
    let mut correct = 0usize;
    let mut at = 0usize;
    while at < n {
        let end = (at + EVAL_CHUNK).min(n);
        let chunk = images.slice_axis(Axis(0), Slice::from(at..end)).to_owned();
        let logits = logits_for(&chunk.view())?;
        for (row, &label) in argmax_rows(&logits).iter().zip(&labels[at..end]) {
            if *row == label {
                correct += 1;
            }
        }
        at = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Top-1 accuracy of a quantized model; ties break toward the lower class.
pub fn evaluate_top1(
    qm: &QuantizedModel,
    images: &ArrayView4<f64>,
    labels: &[usize],
    dataset: &str,
) -> Result<EvalReport> {
    let top1 = top1_fraction(&mut |c| qm.logits(c), images, labels)?;
    Ok(EvalReport {
        top1,
        dataset: dataset.to_string(),
        num_images: labels.len(),
    })
}

/// Top-1 accuracy of the unquantized model.
pub fn evaluate_fp(
    params: &ParameterSet,
    images: &ArrayView4<f64>,
    labels: &[usize],
    dataset: &str,
) -> Result<EvalReport> {
    let top1 = top1_fraction(
        &mut |c| Ok(forward(params, c, false, &mut SiteMode::Plain)?.logits),
        images,
        labels,
    )?;
    Ok(EvalReport {
        top1,
        dataset: dataset.to_string(),
        num_images: labels.len(),
    })
}

/// Minimum x-range and resolution of exported similarity-density curves.
/// The actual range widens to keep every kernel's mass (6 bandwidths past
/// the extreme points) inside the grid, so curves integrate to ~1.
pub const DENSITY_SPAN: (f64, f64) = (-1.2, 1.2);
pub const DENSITY_GRID: usize = 512;

/// Per-layer similarity density over a batch: all patch-pair cosine values
/// of a layer (every image pooled) smoothed into one curve.
pub fn density_curves(
    params: &ParameterSet,
    images: &ArrayView4<f64>,
    bandwidth_floor: f64,
) -> Result<Vec<DensityCurve>> {
    let res = forward(params, images, true, &mut SiteMode::Plain)?;
    let trace = res.trace.expect("capture requested");
    let b = images.dim().0;
    let mut curves = Vec::with_capacity(trace.layers.len());
    for o_l in &trace.layers {
        let mut points = Vec::new();
        for i in 0..b {
            let per_image = o_l.index_axis(Axis(0), i);
            let gamma = cosine_similarity_matrix(&per_image);
            points.extend(extract_training_points(&gamma)?);
        }
        let model = DensityModel::silverman(points, bandwidth_floor)?;
        let pad = 6.0 * model.bandwidth();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &p in model.points() {
            lo = lo.min(p - pad);
            hi = hi.max(p + pad);
        }
        lo = lo.min(DENSITY_SPAN.0);
        hi = hi.max(DENSITY_SPAN.1);
        curves.push(model.curve_between(lo, hi, DENSITY_GRID));
    }
    Ok(curves)
}

/// Compute per-layer density curves and write them as one CSV
/// (`layer,x,density`).
pub fn export_density_report(
    params: &ParameterSet,
    images: &ArrayView4<f64>,
    out_path: &Path,
) -> Result<Vec<DensityCurve>> {
    let curves = density_curves(params, images, 0.01)?;
    let rows: Vec<(usize, &DensityCurve)> =
        curves.iter().enumerate().map(|(i, c)| (i, c)).collect();
    let file = fs::File::create(out_path)
        .map_err(|e| VitqError::Load(format!("{}: {e}", out_path.display())))?;
    write_density_csv(std::io::BufWriter::new(file), &rows)?;
    Ok(curves)
}

/// The full quantizer table of a calibrated model. BTreeMap keys make the
/// serialized form deterministic: identical calibrations produce identical
/// bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTable {
    pub k_w: u32,
    pub k_a: u32,
    pub weights: BTreeMap<String, QuantParams>,
    pub activations: BTreeMap<String, QuantParams>,
}

pub fn quant_table(qm: &QuantizedModel) -> Result<QuantTable> {
    let act = qm
        .act_table
        .as_ref()
        .ok_or_else(|| VitqError::State("activation sites are not calibrated yet".into()))?;
    Ok(QuantTable {
        k_w: qm.k_w,
        k_a: qm.k_a,
        weights: qm.weight_table.clone(),
        activations: act.clone(),
    })
}

pub fn quant_table_json(qm: &QuantizedModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(&quant_table(qm)?)?)
}

/// Rebuild a ready-to-evaluate quantized model from a saved table: weights
/// are fake-quantized with the stored parameters, activation quantizers are
/// installed as-is.
pub fn model_from_table(params: &ParameterSet, table: &QuantTable) -> Result<QuantizedModel> {
    check_bits("weight bit width", table.k_w)?;
    check_bits("activation bit width", table.k_a)?;
    let mut quantized = params.clone();
    for (name, qp) in &table.weights {
        qp.validate()?;
        let w = quantized.get_mut(name);
        *w = fake_quantize(&w.view(), qp);
    }
    for (site, qp) in &table.activations {
        qp.validate().map_err(|e| {
            VitqError::Load(format!("activation site {site}: {e}"))
        })?;
    }
    Ok(QuantizedModel {
        params: quantized,
        k_w: table.k_w,
        k_a: table.k_a,
        weight_table: table.weights.clone(),
        observers: BTreeMap::new(),
        act_table: Some(table.activations.clone()),
        observer_cfg: ObserverConfig::new(Strategy::MinMax),
        include_probs: false,
    })
}

/// Table 3's loss-combination grid, in row order.
pub fn ablation_grid() -> Vec<(&'static str, crate::synth::LossSelection)> {
    use crate::synth::LossSelection;
    let s = |pse, one_hot, tv| LossSelection { pse, one_hot, tv };
    vec![
        ("none", s(false, false, false)),
        ("oh+tv", s(false, true, true)),
        ("pse", s(true, false, false)),
        ("pse+oh", s(true, true, false)),
        ("pse+tv", s(true, false, true)),
        ("pse+oh+tv", s(true, true, true)),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub top1: f64,
}

/// Run the loss-combination grid: for each row, synthesize a batch with that
/// loss subset (the no-loss row uses raw noise), calibrate a fresh wrapped
/// model on it, and evaluate. Rows come back in grid order.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    params: &ParameterSet,
    base_gc: &crate::synth::GenConfig,
    eval_images: &ArrayView4<f64>,
    eval_labels: &[usize],
    k_w: u32,
    k_a: u32,
    observer_cfg: ObserverConfig,
    include_probs: bool,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, select) in ablation_grid() {
        let mut gc = base_gc.clone();
        gc.select = select;
        if !select.any() {
            gc.steps = 0;
        }
        let batch = crate::synth::generate_samples(params, &gc)?;
        let mut qm = wrap_model(params, k_w, k_a, observer_cfg, include_probs)?;
        let provenance = if select.any() { "generated" } else { "noise" };
        run_calibration(&mut qm, &batch, provenance)?;
        let report = evaluate_top1(&qm, eval_images, eval_labels, "heldout")?;
        rows.push(AblationRow {
            name: name.to_string(),
            top1: report.top1,
        });
    }
    Ok(rows)
}

/// Convenience wrapper: noise batch with the same shape/labels as `gc`
/// would generate, for provenance comparisons.
pub fn noise_batch(gc: &crate::synth::GenConfig, image_side: usize) -> GeneratedBatch {
    GeneratedBatch {
        images: crate::synth::init_noise(gc, image_side),
        labels: gc.targets.clone(),
        loss_history: Vec::new(),
        seed: gc.seed,
    }
}

/// Mean number of density modes per layer (prominence threshold relative to
/// each curve's peak).
pub fn mean_mode_count(curves: &[DensityCurve], prominence_frac: f64) -> f64 {
    if curves.is_empty() {
        return 0.0;
    }
    let total: usize = curves
        .iter()
        .map(|c| c.count_modes(prominence_frac))
        .sum();
    total as f64 / curves.len() as f64
}
