//! Full-utterance training: differentiable objective and optimizers.
//!
//! The objective runs the whole enhancement graph — features, recurrent
//! stack, batch norm, mask head, masking loss — over a batch of utterances
//! and backpropagates through all of it, including the skip controller's
//! gate recursion and the structured-pruning masks when enabled.

mod graph;
mod optim;

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::compression::{CoverMap, GroupSet, MaskVec, PruneMode, PruneState, QatSpecs};
use crate::dsp::{stft_with, AudioSignal, FrameConfig, StftPlan};
use crate::enhancer::EnhancerModel;
use crate::error::{Error, Result};

pub use graph::{objective, quant_mask_frames};
pub use optim::{Adam, Optimizer, Sgd};

/// One training example: aligned clean/noisy spectra (`bins x frames`).
#[derive(Debug, Clone)]
pub struct Utterance {
    pub clean: Array2<Complex64>,
    pub noisy: Array2<Complex64>,
}

impl Utterance {
    /// Analyze a clean/noisy signal pair with the given frame settings.
    pub fn from_signals(
        clean: &AudioSignal,
        noisy: &AudioSignal,
        frame: &FrameConfig,
    ) -> Result<Self> {
        let plan = StftPlan::new(*frame)?;
        let c = stft_with(clean, &plan)?;
        let n = stft_with(noisy, &plan)?;
        if c.data.dim() != n.data.dim() {
            return Err(Error::Train(format!(
                "clean/noisy frame mismatch: {:?} vs {:?}",
                c.data.dim(),
                n.data.dim()
            )));
        }
        Ok(Self {
            clean: c.data,
            noisy: n.data,
        })
    }

    pub fn frames(&self) -> usize {
        self.noisy.ncols()
    }
}

/// How batch norm runs inside the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics over all frames of the batch; the computed
    /// mean/variance are returned so the caller can update the model's
    /// running estimates.
    Train,
    /// Frozen affine map from the running statistics.
    Eval,
}

/// How the skip gate participates in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipStyle {
    /// Binary decisions exactly as in streaming inference; gradients flow
    /// through the straight-through rule `d g / d g_tilde = 1`.
    Hard,
    /// Continuous relaxation: states blend by the update probability and
    /// the gate increment is recomputed every frame. Fully differentiable,
    /// used to validate the straight-through path.
    Soft,
}

/// Structured-pruning configuration for one objective evaluation.
#[derive(Clone, Copy)]
pub struct PruneOpts<'a> {
    pub set: &'a GroupSet,
    pub cover: &'a CoverMap,
    pub state: &'a PruneState,
    pub mode: PruneMode,
}

/// Everything that shapes one objective evaluation.
#[derive(Clone, Copy)]
pub struct ObjectiveOpts<'a> {
    pub bn: BnMode,
    pub prune: Option<PruneOpts<'a>>,
    pub skip: SkipStyle,
    /// Weight on the mean update probability; 0 disables the budget term.
    pub budget_weight: f64,
    /// Quantization-aware mode: the forward pass runs on fake-quantized
    /// weights and activations over these grids, with straight-through
    /// gradients. Requires `BnMode::Eval` and a folded identity batch norm.
    pub quant: Option<&'a QatSpecs>,
}

impl Default for ObjectiveOpts<'_> {
    fn default() -> Self {
        Self {
            bn: BnMode::Eval,
            prune: None,
            skip: SkipStyle::Hard,
            budget_weight: 0.0,
            quant: None,
        }
    }
}

/// Value and gradients of one objective evaluation.
#[derive(Debug, Clone)]
pub struct Objective {
    /// `data + penalty + budget`.
    pub value: f64,
    /// Mean masking loss over the batch.
    pub data_term: f64,
    /// Sparsity penalty (0 without pruning).
    pub penalty_term: f64,
    /// Skip-budget term (0 without a skip controller or zero weight).
    pub budget_term: f64,
    /// Gradients, one slot per model tensor.
    pub grads: EnhancerModel,
    /// Gradients of the pruning threshold parameters (empty without pruning).
    pub rho_grads: Vec<f64>,
    /// Batch-norm batch statistics `(mean, var)` when `BnMode::Train`.
    pub bn_batch_stats: Option<(Array1<f64>, Array1<f64>)>,
    /// Group masks used for the forward pass (pruning only).
    pub masks: Option<MaskVec>,
    /// Fraction of frames whose update probability fell below 1/2.
    pub skip_rate: f64,
    /// Total frames in the batch.
    pub frames: usize,
}
