//! Model compression: training-aware uniform quantization and structured
//! pruning with learned per-layer thresholds.
//!
//! Quantization is uniform over a per-tensor range `(alpha, beta)` with the
//! range nudged so zero is exactly representable. Pruning removes whole
//! hidden units (LSTM) or input columns (FC) chosen by comparing each
//! group's L2 norm against a learnable per-layer threshold.

mod prune;
mod qat;
mod quant;

pub use prune::{
    apply_masks, eval_masks, export_pruned, gate_pullback, group_norm, penalty,
    penalty_with_grads, penalty_with_grads_on, prune_report, pull_back_masked_grads, CoverMap,
    GroupLayer, GroupSet, MaskVec, PruneMode, PruneReport, PruneState, WeightGroup,
};
pub use qat::{
    bias_steps, calibrate, fake_quant_weights, fold_bn, ActGrids, BiasSteps, QatConfig, QatSpecs,
    SkipGrids, WeightSpecs,
};
pub use quant::{fake_to_step, requant_po2_code, round_half_even_shift, RequantParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform quantizer description for one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    /// Lower edge of the representable range (nudged onto the grid).
    pub alpha: f64,
    /// Upper edge of the representable range.
    pub beta: f64,
    /// Code width in bits.
    pub bits: u32,
    /// Grid spacing `(beta - alpha) / (2^bits - 1)`.
    pub step: f64,
    /// Integer code that decodes to exactly 0.0.
    pub zero_point: i64,
}

impl QuantSpec {
    /// Build a spec covering `[min, max]` (extended to include zero), with
    /// the range nudged so that zero lands exactly on the grid.
    pub fn from_range(min: f64, max: f64, bits: u32) -> Result<QuantSpec> {
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::Quant(format!("non-finite range ({min}, {max})")));
        }
        if min > max {
            return Err(Error::Quant(format!("inverted range ({min}, {max})")));
        }
        if !(2..=16).contains(&bits) {
            return Err(Error::Quant(format!("unsupported code width {bits}")));
        }
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        if lo == hi {
            return Err(Error::Quant("degenerate range alpha = beta".into()));
        }
        let levels = (1u64 << bits) - 1;
        let step = (hi - lo) / levels as f64;
        let zero_point = (-lo / step).round() as i64;
        let alpha = -(zero_point as f64) * step;
        let beta = alpha + levels as f64 * step;
        Ok(QuantSpec {
            alpha,
            beta,
            bits,
            step,
            zero_point,
        })
    }

    /// Number of representable codes.
    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn max_code(&self) -> i64 {
        (self.levels() - 1) as i64
    }

    /// Integer code for a real value: clip, scale, round (ties to even).
    pub fn quantize(&self, x: f64) -> i64 {
        let clipped = x.clamp(self.alpha, self.beta);
        let q = ((clipped - self.alpha) / self.step).round_ties_even() as i64;
        q.clamp(0, self.max_code())
    }

    /// Real value of an integer code. Exactly 0.0 at the zero point.
    pub fn dequantize(&self, q: i64) -> f64 {
        (q - self.zero_point) as f64 * self.step
    }

    /// Quantize-dequantize: the value snapped onto the grid.
    pub fn fake_quant(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }

    /// Clip-aware straight-through gradient factor: 1 inside the
    /// representable range, 0 outside.
    pub fn ste_mask(&self, x: f64) -> f64 {
        if (self.alpha..=self.beta).contains(&x) {
            1.0
        } else {
            0.0
        }
    }
}

/// Running min/max tracker for activation calibration (EMA of batch
/// extremes, seeded by the first observation).
#[derive(Debug, Clone, Copy)]
pub struct Calibrator {
    pub lo: f64,
    pub hi: f64,
    pub decay: f64,
    seen: bool,
}

impl Calibrator {
    pub fn new(decay: f64) -> Self {
        Self {
            lo: 0.0,
            hi: 0.0,
            decay,
            seen: false,
        }
    }

    /// Fold one batch of observed values into the running range.
    pub fn observe<I: IntoIterator<Item = f64>>(&mut self, values: I) {
        let mut batch_lo = f64::INFINITY;
        let mut batch_hi = f64::NEG_INFINITY;
        for v in values {
            batch_lo = batch_lo.min(v);
            batch_hi = batch_hi.max(v);
        }
        if batch_lo > batch_hi {
            return; // empty batch
        }
        if self.seen {
            self.lo = self.decay * self.lo + (1.0 - self.decay) * batch_lo;
            self.hi = self.decay * self.hi + (1.0 - self.decay) * batch_hi;
        } else {
            self.lo = batch_lo;
            self.hi = batch_hi;
            self.seen = true;
        }
    }

    pub fn is_calibrated(&self) -> bool {
        self.seen
    }

    /// Freeze the observed range into a quantizer spec.
    pub fn spec(&self, bits: u32) -> Result<QuantSpec> {
        if !self.seen {
            return Err(Error::Quant("calibrator has observed no data".into()));
        }
        QuantSpec::from_range(self.lo, self.hi, bits)
    }
}

/// Per-tensor weight spec from the tensor's current extremes.
pub fn weight_spec(values: impl IntoIterator<Item = f64>, bits: u32) -> Result<QuantSpec> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return Err(Error::Quant("empty tensor has no range".into()));
    }
    QuantSpec::from_range(lo, hi, bits)
}
