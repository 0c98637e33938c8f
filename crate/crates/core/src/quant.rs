//! Uniform quantization with calibrated clipping ranges.
//!
//! A [`QuantParams`] maps reals onto the `2^k` codes of a uniform grid
//! between two clipping values. Weights use a symmetric range, activations an
//! asymmetric one. Clipping values come from an [`ObserverState`] that
//! accumulates statistics over calibration batches under one of four
//! strategies: plain min/max, an exponential moving average of per-batch
//! extremes, a percentile of the pooled samples, or an exhaustive search for
//! the range with the smallest round-trip mean squared error.

use ndarray::{ArrayD, ArrayViewD};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VitqError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

/// Clipping range and bit width of one uniform quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u32,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub step: f64,
    pub scheme: Scheme,
}

impl QuantParams {
    pub fn new(bits: u32, clip_lo: f64, clip_hi: f64, scheme: Scheme) -> Result<Self> {
        if !(2..=32).contains(&bits) {
            return Err(VitqError::Config(format!(
                "bit width must be in [2, 32], got {bits}"
            )));
        }
        if !(clip_lo < clip_hi) || !clip_lo.is_finite() || !clip_hi.is_finite() {
            return Err(VitqError::Config(format!(
                "invalid clip range [{clip_lo}, {clip_hi}]"
            )));
        }
        if scheme == Scheme::Symmetric && clip_lo != -clip_hi {
            return Err(VitqError::Config(format!(
                "symmetric scheme requires clip_lo = -clip_hi, got [{clip_lo}, {clip_hi}]"
            )));
        }
        let step = (clip_hi - clip_lo) / (Self::max_code(bits) as f64);
        Ok(QuantParams { bits, clip_lo, clip_hi, step, scheme })
    }

    fn max_code(bits: u32) -> u64 {
        (1u64 << bits) - 1
    }

    /// Recheck invariants after deserialization.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::new(self.bits, self.clip_lo, self.clip_hi, self.scheme)?;
        if (rebuilt.step - self.step).abs() > 1e-12 * rebuilt.step.abs() {
            return Err(VitqError::Config(format!(
                "stored step {} disagrees with range-derived step {}",
                self.step, rebuilt.step
            )));
        }
        Ok(())
    }
}

/// Map values to integer codes: `round((clip(v) - lo) / step)`.
///
/// Rounding is half-away-from-zero; codes lie in `[0, 2^k - 1]`.
pub fn quantize(values: &ArrayViewD<f64>, qp: &QuantParams) -> ArrayD<u32> {
    values.mapv(|v| {
        let c = v.clamp(qp.clip_lo, qp.clip_hi);
        ((c - qp.clip_lo) / qp.step).round() as u32
    })
}

/// Map codes back to the real grid: `code * step + lo`.
pub fn dequantize(codes: &ArrayViewD<u32>, qp: &QuantParams) -> Result<ArrayD<f64>> {
    let max_code = QuantParams::max_code(qp.bits);
    if let Some(bad) = codes.iter().find(|&&c| c as u64 > max_code) {
        return Err(VitqError::Contract(format!(
            "code {bad} exceeds maximum {max_code} for {}-bit grid",
            qp.bits
        )));
    }
    Ok(codes.mapv(|c| c as f64 * qp.step + qp.clip_lo))
}

/// Round-trip through the integer grid, staying in the real domain.
pub fn fake_quantize(values: &ArrayViewD<f64>, qp: &QuantParams) -> ArrayD<f64> {
    values.mapv(|v| fake_quantize_scalar(v, qp))
}

#[inline]
pub fn fake_quantize_scalar(v: f64, qp: &QuantParams) -> f64 {
    let c = v.clamp(qp.clip_lo, qp.clip_hi);
    ((c - qp.clip_lo) / qp.step).round() * qp.step + qp.clip_lo
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MinMax,
    Ema,
    Percentile,
    Omse,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObserverConfig {
    pub strategy: Strategy,
    /// Weight on the previous running extreme under [`Strategy::Ema`].
    pub ema_decay: f64,
    /// Tail fraction clipped away on each side under [`Strategy::Percentile`].
    pub percentile: f64,
}

impl ObserverConfig {
    pub fn new(strategy: Strategy) -> Self {
        ObserverConfig { strategy, ema_decay: 0.9, percentile: 1e-5 }
    }
}

/// Streaming statistics for one activation site.
///
/// Call [`observe`](Self::observe) once per calibration batch, then one of
/// the `finalize_*` methods. Finalize does not mutate the state and may be
/// called repeatedly.
#[derive(Debug, Clone)]
pub struct ObserverState {
    cfg: ObserverConfig,
    seen: bool,
    /// Strategy-defined running extremes (plain or EMA-smoothed).
    lo_stat: f64,
    hi_stat: f64,
    /// Plain extremes over everything seen; base range for the MSE search.
    lo_plain: f64,
    hi_plain: f64,
    /// Full sample buffer, kept only for percentile/omse.
    buffer: Vec<f64>,
}

impl ObserverState {
    pub fn new(cfg: ObserverConfig) -> Result<Self> {
        if !(0.0 < cfg.ema_decay && cfg.ema_decay < 1.0) {
            return Err(VitqError::Config(format!(
                "ema_decay must lie in (0, 1), got {}",
                cfg.ema_decay
            )));
        }
        if !(0.0..0.5).contains(&cfg.percentile) {
            return Err(VitqError::Config(format!(
                "percentile fraction must lie in [0, 0.5), got {}",
                cfg.percentile
            )));
        }
        Ok(ObserverState {
            cfg,
            seen: false,
            lo_stat: f64::INFINITY,
            hi_stat: f64::NEG_INFINITY,
            lo_plain: f64::INFINITY,
            hi_plain: f64::NEG_INFINITY,
            buffer: Vec::new(),
        })
    }

    pub fn config(&self) -> &ObserverConfig {
        &self.cfg
    }

    pub fn has_data(&self) -> bool {
        self.seen
    }

    /// Every value observed so far. Populated only under the buffering
    /// strategies (percentile, OMSE); empty for MinMax/EMA.
    pub fn samples(&self) -> &[f64] {
        &self.buffer
    }

    /// Fold one batch into the running statistics. Empty batches are no-ops.
    pub fn observe(&mut self, batch: &ArrayViewD<f64>) {
        if batch.is_empty() {
            return;
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in batch.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        self.lo_plain = self.lo_plain.min(lo);
        self.hi_plain = self.hi_plain.max(hi);
        match self.cfg.strategy {
            Strategy::MinMax => {
                self.lo_stat = self.lo_stat.min(lo);
                self.hi_stat = self.hi_stat.max(hi);
            }
            Strategy::Ema => {
                if self.seen {
                    let b = self.cfg.ema_decay;
                    self.lo_stat = b * self.lo_stat + (1.0 - b) * lo;
                    self.hi_stat = b * self.hi_stat + (1.0 - b) * hi;
                } else {
                    self.lo_stat = lo;
                    self.hi_stat = hi;
                }
            }
            Strategy::Percentile | Strategy::Omse => {
                self.buffer.extend(batch.iter());
                self.lo_stat = self.lo_plain;
                self.hi_stat = self.hi_plain;
            }
        }
        self.seen = true;
    }

    fn require_data(&self) -> Result<()> {
        if self.seen {
            Ok(())
        } else {
            Err(VitqError::State("observer finalized before any data".into()))
        }
    }

    /// Clipping range from the running extremes (plain for the min/max
    /// strategy, smoothed for the moving-average strategy).
    pub fn finalize_minmax(&self, bits: u32, scheme: Scheme) -> Result<QuantParams> {
        self.require_data()?;
        params_from_range(self.lo_stat, self.hi_stat, bits, scheme)
    }

    /// Clipping range from linear-interpolation quantiles of the pooled
    /// samples at fractions `gamma` and `1 - gamma`.
    pub fn finalize_percentile(&self, bits: u32, scheme: Scheme) -> Result<QuantParams> {
        self.require_data()?;
        if self.buffer.is_empty() {
            return Err(VitqError::State(
                "percentile finalize requires a sample buffer; observer was not configured to retain samples".into(),
            ));
        }
        let mut sorted = self.buffer.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let g = self.cfg.percentile;
        let lo = quantile_sorted(&sorted, g);
        let hi = quantile_sorted(&sorted, 1.0 - g);
        params_from_range(lo, hi, bits, scheme)
    }

    /// Clipping range minimizing the round-trip mean squared error.
    ///
    /// Candidates scale the plain min/max range by `s` in `{0.50, 0.51, ...,
    /// 1.00}`; the scaled endpoints are kept inside the observed range. Ties
    /// resolve toward the larger range.
    pub fn finalize_omse(&self, bits: u32, scheme: Scheme) -> Result<QuantParams> {
        self.require_data()?;
        if self.buffer.is_empty() {
            return Err(VitqError::State(
                "mse-search finalize requires a sample buffer; observer was not configured to retain samples".into(),
            ));
        }
        let (a, b) = (self.lo_plain, self.hi_plain);
        let mut best: Option<(f64, QuantParams)> = None;
        // Descending scan: the first candidate at a given error has the
        // larger range, and strictly-better replacement keeps it on ties.
        for i in (50..=100).rev() {
            let s = i as f64 / 100.0;
            let (lo, hi) = match scheme {
                Scheme::Symmetric => {
                    let m = a.abs().max(b.abs()) * s;
                    (-m, m)
                }
                Scheme::Asymmetric => ((s * a).max(a), (s * b).min(b)),
            };
            let Ok(qp) = params_from_range(lo, hi, bits, scheme) else {
                continue;
            };
            let mse: f64 = self
                .buffer
                .iter()
                .map(|&v| {
                    let e = v - fake_quantize_scalar(v, &qp);
                    e * e
                })
                .sum::<f64>()
                / self.buffer.len() as f64;
            if best.as_ref().map_or(true, |(b_mse, _)| mse < *b_mse) {
                best = Some((mse, qp));
            }
        }
        best.map(|(_, qp)| qp).ok_or_else(|| {
            VitqError::Numerical {
                component: "omse".into(),
                detail: "no valid candidate range".into(),
            }
        })
    }

    /// Finalize with the strategy the observer was configured for.
    pub fn finalize(&self, bits: u32, scheme: Scheme) -> Result<QuantParams> {
        match self.cfg.strategy {
            Strategy::MinMax | Strategy::Ema => self.finalize_minmax(bits, scheme),
            Strategy::Percentile => self.finalize_percentile(bits, scheme),
            Strategy::Omse => self.finalize_omse(bits, scheme),
        }
    }
}

/// Linear-interpolation quantile of an ascending slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    }
}

/// Build params from an observed range, widening a collapsed range and
/// reflecting it for the symmetric scheme.
pub fn params_from_range(lo: f64, hi: f64, bits: u32, scheme: Scheme) -> Result<QuantParams> {
    match scheme {
        Scheme::Symmetric => {
            let mut m = lo.abs().max(hi.abs());
            if m == 0.0 {
                m = 1e-6;
            }
            QuantParams::new(bits, -m, m, scheme)
        }
        Scheme::Asymmetric => {
            if lo == hi {
                let eps = lo.abs().max(1.0) * 1e-6;
                QuantParams::new(bits, lo - eps, hi + eps, scheme)
            } else {
                QuantParams::new(bits, lo, hi, scheme)
            }
        }
    }
}
