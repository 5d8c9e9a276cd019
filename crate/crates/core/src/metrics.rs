//! Training loss and evaluation metrics.
//!
//! The training objective is a phase-sensitive loss on power-compressed
//! spectra: a magnitude term plus a down-weighted complex term that keeps
//! the estimate aligned with the clean phase. Evaluation uses
//! scale-invariant SDR on time-domain signals.

use ndarray::Array2;
use num_complex::Complex64;

use crate::dsp::compress_complex;
use crate::error::{Error, Result};

/// Spectral compression exponent shared by features and loss.
pub const COMPRESS_EXP: f64 = 0.3;
/// Weight of the phase-sensitive complex term.
pub const PHASE_WEIGHT: f64 = 0.113;
/// SI-SDR ceiling reported when the error energy underflows.
pub const SISDR_CAP_DB: f64 = 100.0;

/// Breakdown of the phase-sensitive loss. `phase_term` is stored
/// unweighted; `total = mag_term + PHASE_WEIGHT * phase_term`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub mag_term: f64,
    pub phase_term: f64,
}

fn check_same_shape(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "spectra {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Phase-sensitive loss between a clean spectrum and an estimate:
/// squared Frobenius distance of compressed magnitudes plus
/// [`PHASE_WEIGHT`] times the squared distance of compressed complex
/// spectra. Summed over all bins and frames.
pub fn psa_loss(clean: &Array2<Complex64>, est: &Array2<Complex64>) -> Result<LossReport> {
    check_same_shape(clean, est)?;
    let mut mag_term = 0.0;
    let mut cplx_term = 0.0;
    for (x, xh) in clean.iter().zip(est.iter()) {
        if !(x.re.is_finite() && x.im.is_finite() && xh.re.is_finite() && xh.im.is_finite()) {
            return Err(Error::NonFinite("psa_loss input"));
        }
        let (cx, cxh) = (
            compress_complex(*x, COMPRESS_EXP),
            compress_complex(*xh, COMPRESS_EXP),
        );
        let dm = cx.norm() - cxh.norm();
        mag_term += dm * dm;
        cplx_term += (cx - cxh).norm_sqr();
    }
    Ok(LossReport {
        total: mag_term + PHASE_WEIGHT * cplx_term,
        mag_term,
        phase_term: cplx_term,
    })
}

/// [`psa_loss`] of a masked mixture together with its exact gradient with
/// respect to the mask.
///
/// The estimate is `mask .* noisy` with a nonnegative real mask, so the
/// estimate keeps the noisy phase and the whole loss is smooth in the mask
/// wherever `mask * |noisy|` is nonzero. The compressed-magnitude power is
/// singular at zero, so bins where the estimate magnitude falls below 1e-8
/// contribute zero gradient.
pub fn psa_masked_loss_grad(
    clean: &Array2<Complex64>,
    noisy: &Array2<Complex64>,
    mask: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(clean, noisy)?;
    if mask.dim() != noisy.dim() {
        return Err(Error::Shape(format!(
            "mask {:?} vs spectra {:?}",
            mask.dim(),
            noisy.dim()
        )));
    }
    let c = COMPRESS_EXP;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(mask.raw_dim());
    for ((idx, &m), (x, y)) in mask.indexed_iter().zip(clean.iter().zip(noisy.iter())) {
        if m < 0.0 {
            return Err(Error::Dsp(format!("negative mask value {m} at {idx:?}")));
        }
        let ay = y.norm();
        let a = m * ay; // |estimate|
        let ac = if a == 0.0 { 0.0 } else { a.powf(c) };
        let cx = compress_complex(*x, c);
        // Projection of the compressed clean spectrum onto the noisy phase.
        let proj = if ay == 0.0 {
            cx.norm()
        } else {
            (cx * (y.conj() / ay)).re
        };
        let dm = cx.norm() - ac;
        loss += dm * dm + PHASE_WEIGHT * (cx.norm_sqr() - 2.0 * ac * proj + ac * ac);
        grad[idx] = if a < 1e-8 {
            0.0
        } else {
            let dac_dm = c * a.powf(c - 1.0) * ay;
            dac_dm * (2.0 * (ac - cx.norm()) + PHASE_WEIGHT * 2.0 * (ac - proj))
        };
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("psa_masked_loss_grad"));
    }
    Ok((loss, grad))
}

/// Scale-invariant signal-to-distortion ratio in dB of `est` against `ref`.
///
/// The reference is rescaled by the projection coefficient
/// `<est, ref> / ||ref||^2`; the result is capped at [`SISDR_CAP_DB`] when
/// the residual energy is negligibly small. No mean removal.
pub fn sisdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    sisdr_with(est, reference, false)
}

/// [`sisdr`] with optional mean removal from both signals first.
pub fn sisdr_with(est: &[f64], reference: &[f64], zero_mean: bool) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Shape(format!(
            "sisdr lengths {} vs {}",
            est.len(),
            reference.len()
        )));
    }
    if est.is_empty() {
        return Err(Error::Dsp("sisdr of empty signals".into()));
    }
    let (est_c, ref_c);
    let (est, reference): (&[f64], &[f64]) = if zero_mean {
        let me = est.iter().sum::<f64>() / est.len() as f64;
        let mr = reference.iter().sum::<f64>() / reference.len() as f64;
        est_c = est.iter().map(|v| v - me).collect::<Vec<_>>();
        ref_c = reference.iter().map(|v| v - mr).collect::<Vec<_>>();
        (&est_c, &ref_c)
    } else {
        (est, reference)
    };
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if ref_energy <= 0.0 {
        return Err(Error::Dsp("sisdr reference has zero energy".into()));
    }
    let dot: f64 = est.iter().zip(reference.iter()).map(|(e, r)| e * r).sum();
    let alpha = dot / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let err_energy: f64 = est
        .iter()
        .zip(reference.iter())
        .map(|(e, r)| {
            let d = alpha * r - e;
            d * d
        })
        .sum();
    if target_energy <= 0.0 {
        // Estimate orthogonal to the reference: no target component at all.
        return Ok(-SISDR_CAP_DB);
    }
    let ratio = target_energy / err_energy;
    if !ratio.is_finite() || 10.0 * ratio.log10() > SISDR_CAP_DB {
        return Ok(SISDR_CAP_DB);
    }
    Ok(10.0 * ratio.log10())
}
