//! Streaming STFT/ISTFT, mel filterbank projection, power-law compression,
//! and SNR-controlled mixing.
//!
//! Two frame configurations are used: 32 ms frames with 16 ms hop (50%
//! overlap, square-root Hann on analysis and synthesis) and 25 ms frames
//! with 6.25 ms hop (Hann analysis with least-squares synthesis
//! normalization). Both satisfy perfect reconstruction over interior
//! samples to well below 1e-6.

mod mel;
mod wav;

pub use mel::MelBank;
pub use wav::{read_wav, write_wav};

use std::sync::Arc;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{Error, Result};

/// Mono audio at a fixed sample rate, nominal amplitude range [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Dsp("sample_rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Signal energy, the squared L2 norm of all samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Analysis/synthesis window selection for a frame configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WindowKind {
    /// sqrt(Hann) on both sides; COLA-exact at 50% overlap.
    SqrtHann,
    /// Hann on both sides with least-squares overlap-add normalization.
    Hann,
}

/// Frame length, hop, and sample rate for the STFT front end.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrameConfig {
    pub frame_len: usize,
    pub hop_len: usize,
    pub sample_rate: u32,
    pub window: WindowKind,
}

impl FrameConfig {
    /// 32 ms frame, 16 ms hop at 16 kHz (512/256 samples).
    pub fn baseline() -> Self {
        Self {
            frame_len: 512,
            hop_len: 256,
            sample_rate: 16_000,
            window: WindowKind::SqrtHann,
        }
    }

    /// 25 ms frame, 6.25 ms hop at 16 kHz (400/100 samples), used by the
    /// skip-RNN variant.
    pub fn skip() -> Self {
        Self {
            frame_len: 400,
            hop_len: 100,
            sample_rate: 16_000,
            window: WindowKind::Hann,
        }
    }

    /// FFT size: the frame length rounded up to a power of two.
    pub fn fft_len(&self) -> usize {
        self.frame_len.next_power_of_two()
    }

    pub fn bins(&self) -> usize {
        self.fft_len() / 2 + 1
    }

    fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || self.hop_len == 0 {
            return Err(Error::Dsp("frame_len and hop_len must be positive".into()));
        }
        if self.hop_len > self.frame_len {
            return Err(Error::Dsp(format!(
                "hop_len {} exceeds frame_len {}",
                self.hop_len, self.frame_len
            )));
        }
        if self.frame_len % 2 != 0 {
            return Err(Error::Dsp("frame_len must be even".into()));
        }
        Ok(())
    }
}

/// Complex time-frequency matrix (`bins x frames`) with frame metadata.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// `bins x frames`, bin 0 is DC.
    pub data: Array2<Complex64>,
    pub config: FrameConfig,
    /// Original signal length in samples; `istft` trims to this.
    pub len_hint: usize,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn frames(&self) -> usize {
        self.data.ncols()
    }

    /// Elementwise magnitudes.
    pub fn magnitude(&self) -> Array2<f64> {
        self.data.mapv(|z| z.norm())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |i| {
        0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()
    })
}

fn window_vector(kind: WindowKind, n: usize) -> Array1<f64> {
    let h = hann_window(n);
    match kind {
        WindowKind::SqrtHann => h.mapv(f64::sqrt),
        WindowKind::Hann => h,
    }
}

/// Cached FFT plans for one frame configuration.
pub struct StftPlan {
    config: FrameConfig,
    window: Array1<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl StftPlan {
    pub fn new(config: FrameConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        let fft_len = config.fft_len();
        Ok(Self {
            config,
            window: window_vector(config.window, config.frame_len),
            forward: planner.plan_fft_forward(fft_len),
            inverse: planner.plan_fft_inverse(fft_len),
        })
    }

    pub fn config(&self) -> FrameConfig {
        self.config
    }

    /// Number of frames covering a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.config.hop_len)
    }

    /// Forward transform of one frame already extracted from the signal.
    /// `frame` must have `frame_len` samples; it is windowed, zero-padded
    /// to the FFT size, and transformed.
    pub fn analyze_frame(&self, frame: &[f64]) -> Result<Array1<Complex64>> {
        let fft_len = self.config.fft_len();
        let mut buf = vec![0.0; fft_len];
        for (i, (&s, &w)) in frame.iter().zip(self.window.iter()).enumerate() {
            buf[i] = s * w;
        }
        let mut spec = self.forward.make_output_vec();
        self.forward
            .process(&mut buf, &mut spec)
            .map_err(|e| Error::Dsp(format!("fft failed: {e}")))?;
        Ok(Array1::from_vec(spec))
    }

    fn synthesize_frame(&self, column: &[Complex64]) -> Result<Vec<f64>> {
        let fft_len = self.config.fft_len();
        let mut spec = column.to_vec();
        // realfft requires purely real DC and Nyquist bins.
        spec[0].im = 0.0;
        spec[fft_len / 2].im = 0.0;
        let mut out = vec![0.0; fft_len];
        self.inverse
            .process(&mut spec, &mut out)
            .map_err(|e| Error::Dsp(format!("inverse fft failed: {e}")))?;
        let scale = 1.0 / fft_len as f64;
        out.iter_mut().for_each(|s| *s *= scale);
        Ok(out)
    }
}

/// Short-time Fourier transform with the window implied by the overlap
/// (sqrt-Hann at 50%, Hann otherwise).
pub fn stft(signal: &AudioSignal, frame_len: usize, hop_len: usize) -> Result<Spectrogram> {
    let window = if hop_len * 2 == frame_len {
        WindowKind::SqrtHann
    } else {
        WindowKind::Hann
    };
    let config = FrameConfig {
        frame_len,
        hop_len,
        sample_rate: signal.sample_rate,
        window,
    };
    stft_with(signal, &StftPlan::new(config)?)
}

/// STFT with a prebuilt plan.
pub fn stft_with(signal: &AudioSignal, plan: &StftPlan) -> Result<Spectrogram> {
    if signal.is_empty() {
        return Err(Error::Dsp("empty signal".into()));
    }
    if signal.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("stft input"));
    }
    let cfg = plan.config;
    let n_frames = plan.frame_count(signal.len());
    let bins = cfg.bins();
    let mut data = Array2::zeros((bins, n_frames));
    let mut frame = vec![0.0; cfg.frame_len];
    for t in 0..n_frames {
        let start = t * cfg.hop_len;
        for (i, slot) in frame.iter_mut().enumerate() {
            *slot = signal.samples.get(start + i).copied().unwrap_or(0.0);
        }
        let spec = plan.analyze_frame(&frame)?;
        data.column_mut(t).assign(&spec);
    }
    Ok(Spectrogram {
        data,
        config: cfg,
        len_hint: signal.len(),
    })
}

/// Inverse STFT by windowed overlap-add with pointwise normalization by the
/// accumulated analysis-times-synthesis window product.
pub fn istft(spec: &Spectrogram) -> Result<AudioSignal> {
    if !spec.is_finite() {
        return Err(Error::NonFinite("istft input"));
    }
    let plan = StftPlan::new(spec.config)?;
    istft_with(spec, &plan)
}

/// ISTFT with a prebuilt plan (must match the spectrogram's config).
pub fn istft_with(spec: &Spectrogram, plan: &StftPlan) -> Result<AudioSignal> {
    let cfg = spec.config;
    if plan.config != cfg {
        return Err(Error::Dsp("plan does not match spectrogram config".into()));
    }
    if spec.bins() != cfg.bins() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, config implies {}",
            spec.bins(),
            cfg.bins()
        )));
    }
    if !spec.is_finite() {
        return Err(Error::NonFinite("istft input"));
    }
    let n_frames = spec.frames();
    let total = (n_frames.saturating_sub(1)) * cfg.hop_len + cfg.frame_len;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let column = &mut Vec::new();
    for t in 0..n_frames {
        column.clear();
        column.extend(spec.data.column(t).iter().copied());
        let frame = plan.synthesize_frame(column)?;
        let start = t * cfg.hop_len;
        for i in 0..cfg.frame_len {
            let w = plan.window[i];
            acc[start + i] += w * frame[i];
            norm[start + i] += w * w;
        }
    }
    for (a, n) in acc.iter_mut().zip(norm.iter()) {
        if *n > 1e-8 {
            *a /= *n;
        }
    }
    let len = spec.len_hint.min(total).max(0);
    let len = if spec.len_hint == 0 { total } else { len };
    acc.truncate(len);
    AudioSignal::new(acc, cfg.sample_rate)
}

/// Power-law compression of a nonnegative real value: `v^exponent`.
pub fn compress_mag(v: f64, exponent: f64) -> Result<f64> {
    if v < 0.0 {
        return Err(Error::Dsp(format!(
            "power compression of negative value {v}"
        )));
    }
    Ok(if v == 0.0 { 0.0 } else { v.powf(exponent) })
}

/// Power-law compression of a complex value: `|v|^exponent * exp(j angle v)`.
pub fn compress_complex(v: Complex64, exponent: f64) -> Complex64 {
    let r = v.norm();
    if r == 0.0 {
        Complex64::new(0.0, 0.0)
    } else {
        v * r.powf(exponent - 1.0)
    }
}

fn check_exponent(exponent: f64) -> Result<()> {
    if !(exponent > 0.0 && exponent <= 1.0) {
        return Err(Error::Dsp(format!(
            "compression exponent {exponent} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Elementwise power-law compression of a nonnegative real matrix.
pub fn power_compress(m: &Array2<f64>, exponent: f64) -> Result<Array2<f64>> {
    check_exponent(exponent)?;
    if m.iter().any(|&v| v < 0.0) {
        return Err(Error::Dsp("negative entry in power compression".into()));
    }
    Ok(m.mapv(|v| if v == 0.0 { 0.0 } else { v.powf(exponent) }))
}

/// Elementwise power-law compression of a complex matrix, preserving phase.
pub fn power_compress_complex(m: &Array2<Complex64>, exponent: f64) -> Result<Array2<Complex64>> {
    check_exponent(exponent)?;
    Ok(m.mapv(|v| compress_complex(v, exponent)))
}

/// Gain `g` such that `clean + g*noise` has the requested SNR in dB.
pub fn mix_gain(clean: &AudioSignal, noise: &AudioSignal, snr_db: f64) -> Result<f64> {
    if clean.len() != noise.len() {
        return Err(Error::Shape(format!(
            "clean has {} samples, noise has {}",
            clean.len(),
            noise.len()
        )));
    }
    let e_clean = clean.energy();
    let e_noise = noise.energy();
    if e_clean <= 0.0 || e_noise <= 0.0 {
        return Err(Error::Dsp("zero-energy input to mix_at_snr".into()));
    }
    Ok((e_clean / e_noise * 10f64.powf(-snr_db / 10.0)).sqrt())
}

/// Mix `clean + g*noise` so the whole-utterance SNR equals `snr_db`.
pub fn mix_at_snr(clean: &AudioSignal, noise: &AudioSignal, snr_db: f64) -> Result<AudioSignal> {
    let g = mix_gain(clean, noise, snr_db)?;
    let samples = clean
        .samples
        .iter()
        .zip(noise.samples.iter())
        .map(|(c, n)| c + g * n)
        .collect();
    AudioSignal::new(samples, clean.sample_rate)
}

/// Measured SNR in dB of `noisy = clean + residual`.
pub fn measure_snr(clean: &AudioSignal, noisy: &AudioSignal) -> Result<f64> {
    if clean.len() != noisy.len() {
        return Err(Error::Shape("length mismatch in measure_snr".into()));
    }
    let e_clean = clean.energy();
    let e_noise: f64 = clean
        .samples
        .iter()
        .zip(noisy.samples.iter())
        .map(|(c, y)| (y - c) * (y - c))
        .sum();
    if e_clean <= 0.0 || e_noise <= 0.0 {
        return Err(Error::Dsp("degenerate energies in measure_snr".into()));
    }
    Ok(10.0 * (e_clean / e_noise).log10())
}
