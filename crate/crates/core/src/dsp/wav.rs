//! 16-bit PCM mono WAV input/output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::dsp::AudioSignal;
use crate::error::{Error, Result};

/// Read a mono 16-bit PCM WAV file into [-1, 1] floats.
pub fn read_wav<P: AsRef<Path>>(path: P) -> Result<AudioSignal> {
    let mut reader = WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Dsp(format!(
            "expected mono WAV, got {} channels",
            spec.channels
        )));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Dsp(format!(
            "expected 16-bit PCM, got {:?} at {} bits",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples: Vec<f64> = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<_, _>>()?;
    AudioSignal::new(samples, spec.sample_rate)
}

/// Write a signal as mono 16-bit PCM, clamping to the representable range.
pub fn write_wav<P: AsRef<Path>>(path: P, signal: &AudioSignal) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    for &s in &signal.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
