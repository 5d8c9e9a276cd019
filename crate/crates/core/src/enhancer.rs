//! The end-to-end causal masking model.
//!
//! Pipeline per frame: mel projection of the magnitude spectrum, power-law
//! compression, two stacked LSTM layers, batch norm, an FC/ReLU layer, an
//! FC/sigmoid layer producing a mel-domain mask, and a transposed-mel
//! projection back to a nonnegative spectral mask. The enhanced spectrum is
//! the noisy spectrum scaled by that mask, so the noisy phase is reused.
//!
//! An optional frame-skipping controller gates the LSTM state updates; the
//! batch-norm/FC stack then runs on the held LSTM output concatenated with a
//! context EMA of the input features, and the output mask is smoothed.

use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{
    compress_mag, istft, stft_with, AudioSignal, FrameConfig, MelBank, Spectrogram, StftPlan,
};

use crate::error::{Error, Result};
use crate::metrics::COMPRESS_EXP;
use crate::nn::{init_uniform, zero_bias, Activation, BatchNorm, Dense, Lstm, LstmState};
use crate::skip::{
    apply_skip, context_ema_step, mask_ema_step, skip_gate_step, SkipParams, SkipRuntime,
};

/// Layer widths and frame geometry of one model variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Mel bands; also the mask dimension and fc2's output width.
    pub n_mel: usize,
    /// First LSTM layer units.
    pub hidden1: usize,
    /// Second LSTM layer units.
    pub hidden2: usize,
    /// fc1 output units.
    pub fc1_units: usize,
    /// Context vector width when the skip controller is present.
    pub dim_c: Option<usize>,
    /// STFT geometry.
    pub frame: FrameConfig,
}

impl ArchConfig {
    /// Full-rate model: 128 mel bands, 2x256 LSTM units, 2x128 FC units.
    pub fn baseline() -> Self {
        Self {
            n_mel: 128,
            hidden1: 256,
            hidden2: 256,
            fc1_units: 128,
            dim_c: None,
            frame: FrameConfig::baseline(),
        }
    }

    /// Skip-gated variant: same trunk plus a 128-dim context EMA
    /// concatenated ahead of the batch-norm/FC stack.
    pub fn skip_variant() -> Self {
        Self {
            n_mel: 128,
            hidden1: 256,
            hidden2: 256,
            fc1_units: 128,
            dim_c: Some(128),
            frame: FrameConfig::skip(),
        }
    }

    /// Width of the batch-norm/FC stack input: the second LSTM's output,
    /// plus the context vector when the skip controller is present.
    pub fn bn_features(&self) -> usize {
        self.hidden2 + self.dim_c.unwrap_or(0)
    }

    pub fn has_skip(&self) -> bool {
        self.dim_c.is_some()
    }
}

/// Identifies one parameter tensor (or batch-norm statistic) of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TensorId {
    Lstm1Wx,
    Lstm1Wh,
    Lstm1B,
    Lstm2Wx,
    Lstm2Wh,
    Lstm2B,
    BnGamma,
    BnBeta,
    BnRunMean,
    BnRunVar,
    Fc1W,
    Fc1B,
    Fc2W,
    Fc2B,
    CtxW,
    CtxB,
    GateW,
    GateB,
}

impl TensorId {
    /// Every tensor a baseline model owns, in canonical order.
    pub const BASE: [TensorId; 14] = [
        TensorId::Lstm1Wx,
        TensorId::Lstm1Wh,
        TensorId::Lstm1B,
        TensorId::Lstm2Wx,
        TensorId::Lstm2Wh,
        TensorId::Lstm2B,
        TensorId::BnGamma,
        TensorId::BnBeta,
        TensorId::BnRunMean,
        TensorId::BnRunVar,
        TensorId::Fc1W,
        TensorId::Fc1B,
        TensorId::Fc2W,
        TensorId::Fc2B,
    ];

    /// Additional tensors owned by the skip controller.
    pub const SKIP: [TensorId; 4] = [
        TensorId::CtxW,
        TensorId::CtxB,
        TensorId::GateW,
        TensorId::GateB,
    ];

    /// True for learned parameters, false for batch-norm running statistics.
    pub fn is_param(self) -> bool {
        !matches!(self, TensorId::BnRunMean | TensorId::BnRunVar)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TensorId::Lstm1Wx => "lstm1.w_x",
            TensorId::Lstm1Wh => "lstm1.w_h",
            TensorId::Lstm1B => "lstm1.b",
            TensorId::Lstm2Wx => "lstm2.w_x",
            TensorId::Lstm2Wh => "lstm2.w_h",
            TensorId::Lstm2B => "lstm2.b",
            TensorId::BnGamma => "bn.gamma",
            TensorId::BnBeta => "bn.beta",
            TensorId::BnRunMean => "bn.running_mean",
            TensorId::BnRunVar => "bn.running_var",
            TensorId::Fc1W => "fc1.w",
            TensorId::Fc1B => "fc1.b",
            TensorId::Fc2W => "fc2.w",
            TensorId::Fc2B => "fc2.b",
            TensorId::CtxW => "ctx.w",
            TensorId::CtxB => "ctx.b",
            TensorId::GateW => "gate.w",
            TensorId::GateB => "gate.b",
        }
    }

    pub fn parse(name: &str) -> Result<TensorId> {
        TensorId::BASE
            .iter()
            .chain(TensorId::SKIP.iter())
            .copied()
            .find(|id| id.as_str() == name)
            .ok_or_else(|| Error::Container(format!("unknown tensor name {name:?}")))
    }
}

/// Read-only view of one model tensor.
pub enum TensorView<'a> {
    Mat(&'a Array2<f64>),
    Vec(&'a Array1<f64>),
    Scalar(f64),
}

impl TensorView<'_> {
    pub fn len(&self) -> usize {
        match self {
            TensorView::Mat(m) => m.len(),
            TensorView::Vec(v) => v.len(),
            TensorView::Scalar(_) => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major copy of the values.
    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            TensorView::Mat(m) => m.iter().copied().collect(),
            TensorView::Vec(v) => v.to_vec(),
            TensorView::Scalar(s) => vec![*s],
        }
    }

    /// `[rows, cols]` for matrices, `[len]` for vectors, `[]` for scalars.
    pub fn dims(&self) -> Vec<usize> {
        match self {
            TensorView::Mat(m) => vec![m.nrows(), m.ncols()],
            TensorView::Vec(v) => vec![v.len()],
            TensorView::Scalar(_) => vec![],
        }
    }
}

/// Mutable view of one model tensor.
pub enum TensorViewMut<'a> {
    Mat(&'a mut Array2<f64>),
    Vec(&'a mut Array1<f64>),
    Scalar(&'a mut f64),
}

/// One frame's mask in both domains.
#[derive(Debug, Clone)]
pub struct MaskFrame {
    /// Sigmoid-domain mask over mel bands, entries in (0, 1).
    pub mel_mask: Array1<f64>,
    /// Transposed-mel projection onto FFT bins, entries >= 0, unclipped.
    pub spectral_mask: Array1<f64>,
}

/// Per-utterance recurrent state.
#[derive(Debug, Clone)]
pub struct StreamState {
    pub s1: LstmState,
    pub s2: LstmState,
    pub skip: Option<SkipRuntime>,
    /// Gate decision per frame; empty for non-skip models.
    pub gate_trace: Vec<bool>,
}

/// Everything `enhance` produces for one utterance.
#[derive(Debug, Clone)]
pub struct EnhanceOutput {
    pub audio: AudioSignal,
    /// Masked spectrum, same geometry as the analysis spectrum.
    pub spec: Spectrogram,
    /// `n_mel x frames` sigmoid-domain masks.
    pub mel_masks: Array2<f64>,
    /// `bins x frames` spectral masks.
    pub spectral_masks: Array2<f64>,
    /// Gate decision per frame; empty for non-skip models.
    pub gate_trace: Vec<bool>,
}

/// The causal masking model.
#[derive(Debug, Clone)]
pub struct EnhancerModel {
    pub arch: ArchConfig,
    pub mel: MelBank,
    pub lstm1: Lstm,
    pub lstm2: Lstm,
    pub bn: BatchNorm,
    pub fc1: Dense,
    pub fc2: Dense,
    pub skip: Option<SkipParams>,
}

impl EnhancerModel {
    /// Fresh model with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights and
    /// zero biases, drawn from a seeded stream in declaration order.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mel = MelBank::new(arch.n_mel, arch.frame.fft_len(), arch.frame.sample_rate)?;
        let (h1, h2) = (arch.hidden1, arch.hidden2);
        let lstm1 = Lstm::new(
            init_uniform(&mut rng, 4 * h1, arch.n_mel),
            init_uniform(&mut rng, 4 * h1, h1),
            zero_bias(4 * h1),
        )?;
        let lstm2 = Lstm::new(
            init_uniform(&mut rng, 4 * h2, h1),
            init_uniform(&mut rng, 4 * h2, h2),
            zero_bias(4 * h2),
        )?;
        let bn = BatchNorm::new(arch.bn_features());
        let fc1 = Dense::new(
            init_uniform(&mut rng, arch.fc1_units, arch.bn_features()),
            zero_bias(arch.fc1_units),
            Activation::Relu,
        )?;
        let fc2 = Dense::new(
            init_uniform(&mut rng, arch.n_mel, arch.fc1_units),
            zero_bias(arch.n_mel),
            Activation::Sigmoid,
        )?;
        let skip = arch
            .dim_c
            .map(|dim_c| SkipParams::init(&mut rng, h2, dim_c, arch.n_mel));
        let model = Self {
            arch,
            mel,
            lstm1,
            lstm2,
            bn,
            fc1,
            fc2,
            skip,
        };
        model.validate()?;
        Ok(model)
    }

    /// Check that layer dimensions chain correctly end to end.
    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        let chain = [
            (self.mel.n_mel() == a.n_mel, "mel bands"),
            (self.mel.bins() == a.frame.bins(), "mel bins"),
            (self.lstm1.in_dim() == a.n_mel, "lstm1 input"),
            (self.lstm1.hidden() == a.hidden1, "lstm1 hidden"),
            (self.lstm2.in_dim() == a.hidden1, "lstm2 input"),
            (self.lstm2.hidden() == a.hidden2, "lstm2 hidden"),
            (self.bn.gamma.len() == a.bn_features(), "batch-norm width"),
            (self.fc1.w.ncols() == a.bn_features(), "fc1 input"),
            (self.fc1.w.nrows() == a.fc1_units, "fc1 units"),
            (self.fc2.w.ncols() == a.fc1_units, "fc2 input"),
            (self.fc2.w.nrows() == a.n_mel, "fc2 units"),
            (self.fc2.act == Activation::Sigmoid, "fc2 activation"),
            (self.skip.is_some() == a.dim_c.is_some(), "skip presence"),
        ];
        for (ok, what) in chain {
            if !ok {
                return Err(Error::Shape(format!("model dimension chain broken at {what}")));
            }
        }
        if let (Some(skip), Some(dim_c)) = (&self.skip, a.dim_c) {
            if skip.w_b.len() != a.hidden2
                || skip.w_c.nrows() != dim_c
                || skip.w_c.ncols() != a.n_mel
                || skip.b_c.len() != dim_c
            {
                return Err(Error::Shape("skip controller dimensions".into()));
            }
        }
        Ok(())
    }

    /// Tensors this model owns, in canonical order.
    pub fn tensor_ids(&self) -> Vec<TensorId> {
        let mut ids = TensorId::BASE.to_vec();
        if self.skip.is_some() {
            ids.extend_from_slice(&TensorId::SKIP);
        }
        ids
    }

    pub fn tensor(&self, id: TensorId) -> Option<TensorView<'_>> {
        use TensorId::*;
        let view = match id {
            Lstm1Wx => TensorView::Mat(&self.lstm1.w_x),
            Lstm1Wh => TensorView::Mat(&self.lstm1.w_h),
            Lstm1B => TensorView::Vec(&self.lstm1.b),
            Lstm2Wx => TensorView::Mat(&self.lstm2.w_x),
            Lstm2Wh => TensorView::Mat(&self.lstm2.w_h),
            Lstm2B => TensorView::Vec(&self.lstm2.b),
            BnGamma => TensorView::Vec(&self.bn.gamma),
            BnBeta => TensorView::Vec(&self.bn.beta),
            BnRunMean => TensorView::Vec(&self.bn.running_mean),
            BnRunVar => TensorView::Vec(&self.bn.running_var),
            Fc1W => TensorView::Mat(&self.fc1.w),
            Fc1B => TensorView::Vec(&self.fc1.b),
            Fc2W => TensorView::Mat(&self.fc2.w),
            Fc2B => TensorView::Vec(&self.fc2.b),
            CtxW => TensorView::Mat(&self.skip.as_ref()?.w_c),
            CtxB => TensorView::Vec(&self.skip.as_ref()?.b_c),
            GateW => TensorView::Vec(&self.skip.as_ref()?.w_b),
            GateB => TensorView::Scalar(self.skip.as_ref()?.b_b),
        };
        Some(view)
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> Option<TensorViewMut<'_>> {
        use TensorId::*;
        let view = match id {
            Lstm1Wx => TensorViewMut::Mat(&mut self.lstm1.w_x),
            Lstm1Wh => TensorViewMut::Mat(&mut self.lstm1.w_h),
            Lstm1B => TensorViewMut::Vec(&mut self.lstm1.b),
            Lstm2Wx => TensorViewMut::Mat(&mut self.lstm2.w_x),
            Lstm2Wh => TensorViewMut::Mat(&mut self.lstm2.w_h),
            Lstm2B => TensorViewMut::Vec(&mut self.lstm2.b),
            BnGamma => TensorViewMut::Vec(&mut self.bn.gamma),
            BnBeta => TensorViewMut::Vec(&mut self.bn.beta),
            BnRunMean => TensorViewMut::Vec(&mut self.bn.running_mean),
            BnRunVar => TensorViewMut::Vec(&mut self.bn.running_var),
            Fc1W => TensorViewMut::Mat(&mut self.fc1.w),
            Fc1B => TensorViewMut::Vec(&mut self.fc1.b),
            Fc2W => TensorViewMut::Mat(&mut self.fc2.w),
            Fc2B => TensorViewMut::Vec(&mut self.fc2.b),
            CtxW => TensorViewMut::Mat(&mut self.skip.as_mut()?.w_c),
            CtxB => TensorViewMut::Vec(&mut self.skip.as_mut()?.b_c),
            GateW => TensorViewMut::Vec(&mut self.skip.as_mut()?.w_b),
            GateB => TensorViewMut::Scalar(&mut self.skip.as_mut()?.b_b),
        };
        Some(view)
    }

    /// Learned parameters (batch-norm running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.tensor_ids()
            .into_iter()
            .filter(|id| id.is_param())
            .map(|id| self.tensor(id).map_or(0, |t| t.len()))
            .sum()
    }

    /// Same shapes, every tensor zeroed — a gradient/accumulator container.
    pub fn zeroed_like(&self) -> EnhancerModel {
        let mut out = self.clone();
        for id in out.tensor_ids() {
            match out.tensor_mut(id).expect("own tensor id") {
                TensorViewMut::Mat(m) => m.fill(0.0),
                TensorViewMut::Vec(v) => v.fill(0.0),
                TensorViewMut::Scalar(s) => *s = 0.0,
            }
        }
        out
    }

    /// In-place `self += k * other` over every tensor (running statistics
    /// included). Both models must share an architecture.
    pub fn add_scaled(&mut self, other: &EnhancerModel, k: f64) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::Shape("model architecture mismatch".into()));
        }
        for id in self.tensor_ids() {
            let src = other.tensor(id).expect("same architecture").to_flat();
            match self.tensor_mut(id).expect("own tensor id") {
                TensorViewMut::Mat(m) => {
                    for (a, b) in m.iter_mut().zip(&src) {
                        *a += k * b;
                    }
                }
                TensorViewMut::Vec(v) => {
                    for (a, b) in v.iter_mut().zip(&src) {
                        *a += k * b;
                    }
                }
                TensorViewMut::Scalar(s) => *s += k * src[0],
            }
        }
        Ok(())
    }

    pub fn zero_state(&self) -> StreamState {
        StreamState {
            s1: LstmState::zeros(self.arch.hidden1),
            s2: LstmState::zeros(self.arch.hidden2),
            skip: self.arch.dim_c.map(SkipRuntime::new),
            gate_trace: Vec::new(),
        }
    }

    /// Network input for one frame: power-law-compressed mel magnitudes.
    pub fn features(&self, y_frame: &ArrayView1<Complex64>) -> Result<Array1<f64>> {
        if y_frame.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite("enhancer input frame"));
        }
        let mag = y_frame.mapv(|v| v.norm());
        let bands = self.mel.forward_frame(&mag)?;
        bands.iter().map(|&v| compress_mag(v, COMPRESS_EXP)).collect()
    }

    /// One causal step: consume a complex spectrum frame, update `state`,
    /// return the frame's mask in both domains.
    pub fn forward_frame(
        &self,
        y_frame: &ArrayView1<Complex64>,
        state: &mut StreamState,
    ) -> Result<MaskFrame> {
        let feat = self.features(y_frame)?;

        let bn_in = match (&self.skip, state.skip.as_mut()) {
            (Some(params), Some(rt)) => {
                context_ema_step(params, rt, &feat.view())?;
                let g = skip_gate_step(params, rt, &state.s2.c.view())?;
                if g {
                    let (c1, _) = self.lstm1.step(&feat, &state.s1)?;
                    let (c2, _) = self.lstm2.step(&c1.h, &state.s2)?;
                    state.s1 = apply_skip(true, &c1, &state.s1);
                    state.s2 = apply_skip(true, &c2, &state.s2);
                }
                state.gate_trace.push(g);
                concatenate![Axis(0), state.s2.h, rt.c_x]
            }
            (None, None) => {
                let (s1, _) = self.lstm1.step(&feat, &state.s1)?;
                let (s2, _) = self.lstm2.step(&s1.h, &state.s2)?;
                state.s1 = s1;
                state.s2 = s2;
                state.s2.h.clone()
            }
            _ => return Err(Error::Nn("stream state does not match model variant".into())),
        };

        let normed = self.bn.forward_frame(&bn_in)?;
        let a1 = self.fc1.forward_frame(&normed)?;
        let m_raw = self.fc2.forward_frame(&a1)?;
        let mel_mask = match state.skip.as_mut() {
            Some(rt) => mask_ema_step(rt, &m_raw.view()),
            None => m_raw,
        };
        let spectral_mask = self.mel.transpose_frame(&mel_mask)?;
        Ok(MaskFrame {
            mel_mask,
            spectral_mask,
        })
    }

    /// Run the model over a whole spectrogram; returns `n_mel x T` and
    /// `bins x T` mask matrices plus the gate trace.
    pub fn mask_frames(
        &self,
        spec: &Spectrogram,
    ) -> Result<(Array2<f64>, Array2<f64>, Vec<bool>)> {
        let frames = spec.frames();
        let mut state = self.zero_state();
        let mut mel_masks = Array2::zeros((self.arch.n_mel, frames));
        let mut spectral_masks = Array2::zeros((spec.bins(), frames));
        for t in 0..frames {
            let mask = self.forward_frame(&spec.data.column(t), &mut state)?;
            mel_masks.column_mut(t).assign(&mask.mel_mask);
            spectral_masks.column_mut(t).assign(&mask.spectral_mask);
        }
        Ok((mel_masks, spectral_masks, state.gate_trace))
    }

    /// Full utterance enhancement: STFT, per-frame masking, inverse STFT.
    /// The mask scales the noisy spectrum, so the noisy phase is reused.
    pub fn enhance(&self, noisy: &AudioSignal) -> Result<EnhanceOutput> {
        let plan = StftPlan::new(self.arch.frame)?;
        let spec = stft_with(noisy, &plan)?;
        let (mel_masks, spectral_masks, gate_trace) = self.mask_frames(&spec)?;
        let masked = apply_spectral_mask(&spec, &spectral_masks)?;
        let audio = istft(&masked)?;
        Ok(EnhanceOutput {
            audio,
            spec: masked,
            mel_masks,
            spectral_masks,
            gate_trace,
        })
    }
}

/// Scale each spectrum frame by a real nonnegative mask column.
pub fn apply_spectral_mask(spec: &Spectrogram, masks: &Array2<f64>) -> Result<Spectrogram> {
    if masks.dim() != spec.data.dim() {
        return Err(Error::Shape(format!(
            "mask {:?} vs spectrum {:?}",
            masks.dim(),
            spec.data.dim()
        )));
    }
    let mut out = spec.clone();
    out.data.zip_mut_with(masks, |v, &m| *v *= m);
    Ok(out)
}
