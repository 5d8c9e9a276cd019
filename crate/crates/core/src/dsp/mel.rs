//! Triangular mel filterbank on the HTK mel scale.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Bank of triangular mel filters mapping linear spectrum bins to mel bands.
///
/// Rows are filters, columns are FFT bins. Filters are peak-normalized
/// triangles; any filter narrower than the bin spacing falls back to unit
/// weight on the bin nearest its center so every band stays observable.
#[derive(Debug, Clone)]
pub struct MelBank {
    matrix: Array2<f64>,
    sample_rate: u32,
    fft_len: usize,
}

impl MelBank {
    pub fn new(n_mel: usize, fft_len: usize, sample_rate: u32) -> Result<Self> {
        if n_mel == 0 || fft_len < 2 || fft_len % 2 != 0 {
            return Err(Error::Dsp(format!(
                "invalid mel bank geometry: {n_mel} bands over fft {fft_len}"
            )));
        }
        let bins = fft_len / 2 + 1;
        let f_max = sample_rate as f64 / 2.0;
        let m_max = hz_to_mel(f_max);
        // n_mel + 2 edge points uniformly spaced in mel.
        let edges_hz: Vec<f64> = (0..n_mel + 2)
            .map(|i| mel_to_hz(m_max * i as f64 / (n_mel + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_len as f64;
        let mut matrix = Array2::zeros((n_mel, bins));
        for band in 0..n_mel {
            let (lo, mid, hi) = (edges_hz[band], edges_hz[band + 1], edges_hz[band + 2]);
            let mut any = false;
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    matrix[(band, k)] = w;
                    any = true;
                }
            }
            if !any {
                let k = ((mid / bin_hz).round() as usize).min(bins - 1);
                matrix[(band, k)] = 1.0;
            }
        }
        Ok(Self {
            matrix,
            sample_rate,
            fft_len,
        })
    }

    pub fn n_mel(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn bins(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn fft_len(&self) -> usize {
        self.fft_len
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Project a `bins x frames` magnitude (or compressed-magnitude) matrix
    /// into mel bands: `M * spec`.
    pub fn forward(&self, spec: &Array2<f64>) -> Result<Array2<f64>> {
        if spec.nrows() != self.bins() {
            return Err(Error::Shape(format!(
                "expected {} bins, got {}",
                self.bins(),
                spec.nrows()
            )));
        }
        Ok(self.matrix.dot(spec))
    }

    /// Project one spectrum column into mel bands.
    pub fn forward_frame(&self, spec: &Array1<f64>) -> Result<Array1<f64>> {
        if spec.len() != self.bins() {
            return Err(Error::Shape(format!(
                "expected {} bins, got {}",
                self.bins(),
                spec.len()
            )));
        }
        Ok(self.matrix.dot(spec))
    }

    /// Spread a mel-band vector back over spectrum bins with the transposed
    /// filterbank: `M^T * bands`. Used to lift band masks to bin masks.
    pub fn transpose_frame(&self, bands: &Array1<f64>) -> Result<Array1<f64>> {
        if bands.len() != self.n_mel() {
            return Err(Error::Shape(format!(
                "expected {} bands, got {}",
                self.n_mel(),
                bands.len()
            )));
        }
        Ok(self.matrix.t().dot(bands))
    }

    /// Transposed projection of a `n_mel x frames` matrix.
    pub fn transpose(&self, bands: &Array2<f64>) -> Result<Array2<f64>> {
        if bands.nrows() != self.n_mel() {
            return Err(Error::Shape(format!(
                "expected {} bands, got {}",
                self.n_mel(),
                bands.nrows()
            )));
        }
        Ok(self.matrix.t().dot(bands))
    }
}
