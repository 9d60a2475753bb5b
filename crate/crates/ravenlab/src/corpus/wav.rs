//! Minimal mono 16-bit PCM WAV reader/writer (canonical 44-byte header).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{RavenError, Result};

pub const SAMPLE_RATE: u32 = 16_000;

pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let data_len = (samples.len() * 2) as u32;
    let mut buf = Vec::with_capacity(44 + samples.len() * 2);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    buf.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes()); // bits
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&q.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 44 {
        return Err(RavenError::format(format!("{}: truncated WAV header", path.display())));
    }
    let hdr = |range: std::ops::Range<usize>| &bytes[range];
    if hdr(0..4) != b"RIFF" || hdr(8..12) != b"WAVE" || hdr(12..16) != b"fmt " {
        return Err(RavenError::format(format!("{}: corrupt WAV header", path.display())));
    }
    let u16_at = |ix: usize| u16::from_le_bytes([bytes[ix], bytes[ix + 1]]);
    let u32_at =
        |ix: usize| u32::from_le_bytes([bytes[ix], bytes[ix + 1], bytes[ix + 2], bytes[ix + 3]]);
    if u16_at(20) != 1 || u16_at(22) != 1 || u16_at(34) != 16 {
        return Err(RavenError::format(format!(
            "{}: expected mono 16-bit PCM",
            path.display()
        )));
    }
    if u32_at(24) != SAMPLE_RATE {
        return Err(RavenError::format(format!(
            "{}: expected {SAMPLE_RATE} Hz, got {}",
            path.display(),
            u32_at(24)
        )));
    }
    if hdr(36..40) != b"data" {
        return Err(RavenError::format(format!("{}: missing data chunk", path.display())));
    }
    let data_len = u32_at(40) as usize;
    if bytes.len() < 44 + data_len || data_len % 2 != 0 {
        return Err(RavenError::format(format!(
            "{}: payload shorter than header promises",
            path.display()
        )));
    }
    let samples = bytes[44..44 + data_len]
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32767.0)
        .collect();
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..1280).map(|i| (i as f64 * 0.01).sin() * 0.5).collect();
        write_wav(&path, &samples).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn truncated_wav_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = vec![0.1; 640];
        write_wav(&path, &samples).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(read_wav(&path).is_err());
    }
}
