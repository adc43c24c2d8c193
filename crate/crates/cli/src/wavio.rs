//! Waveform files. Every waveform is written twice: a 16-bit mono RIFF
//! container for human listening and a raw little-endian `f64` sidecar that
//! preserves the exact samples for metric computation and determinism
//! checks.

use std::path::Path;

use remask_core::signal::Waveform;
use remask_core::{Error, Result};

/// Writes the audible 16-bit container. Samples are clamped to [-1, 1] and
/// rounded; this is lossy by design — metrics read the sidecar.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let fail = |e: hound::Error| Error::data(format!("cannot write {}: {e}", path.display()));
    let mut writer = hound::WavWriter::create(path, spec).map_err(fail)?;
    for &x in &wave.samples {
        let q = (x.clamp(-1.0, 1.0) * f64::from(i16::MAX)).round() as i16;
        writer.write_sample(q).map_err(fail)?;
    }
    writer.finalize().map_err(fail)?;
    Ok(())
}

/// Writes the exact samples as raw little-endian f64.
pub fn write_f64(path: &Path, samples: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(samples.len() * 8);
    for v in samples {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

/// Reads a raw little-endian f64 sidecar back into a waveform. The sample
/// rate comes from the caller's configuration — the sidecar is headerless.
pub fn read_f64(path: &Path, sample_rate: u32) -> Result<Waveform> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::data(format!(
            "{} holds {} bytes, not a whole number of f64 samples",
            path.display(),
            bytes.len()
        )));
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Waveform {
        samples,
        sample_rate,
    })
}

/// Writes both representations of one waveform: `<stem>.wav` and
/// `<stem>.f64` in `dir`.
pub fn write_pair(dir: &Path, stem: &str, wave: &Waveform) -> Result<()> {
    write_wav(&dir.join(format!("{stem}.wav")), wave)?;
    write_f64(&dir.join(format!("{stem}.f64")), &wave.samples)
}
