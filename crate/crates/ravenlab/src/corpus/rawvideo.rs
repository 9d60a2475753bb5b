//! Raw grayscale video container: magic, version, (T, H, W) as u32 LE, then
//! row-major unsigned bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{RavenError, Result};

const MAGIC: &[u8; 4] = b"RVID";
const VERSION: u32 = 1;

pub fn write_rvid(path: &Path, t: usize, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), t * h * w);
    let mut buf = Vec::with_capacity(20 + pixels.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(pixels);
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Returns (T, H, W, pixels).
pub fn read_rvid(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 {
        return Err(RavenError::format(format!("{}: truncated header", path.display())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(RavenError::format(format!("{}: bad magic", path.display())));
    }
    let u32_at =
        |ix: usize| u32::from_le_bytes([bytes[ix], bytes[ix + 1], bytes[ix + 2], bytes[ix + 3]]);
    if u32_at(4) != VERSION {
        return Err(RavenError::format(format!(
            "{}: unsupported version {}",
            path.display(),
            u32_at(4)
        )));
    }
    let (t, h, w) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let expected = t * h * w;
    if bytes.len() - 20 != expected {
        return Err(RavenError::format(format!(
            "{}: payload length {} does not match recorded shape {}x{}x{}",
            path.display(),
            bytes.len() - 20,
            t,
            h,
            w
        )));
    }
    Ok((t, h, w, bytes[20..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rvid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rvid");
        let pixels: Vec<u8> = (0..2 * 4 * 4).map(|i| (i * 7 % 256) as u8).collect();
        write_rvid(&path, 2, 4, 4, &pixels).unwrap();
        let (t, h, w, back) = read_rvid(&path).unwrap();
        assert_eq!((t, h, w), (2, 4, 4));
        assert_eq!(back, pixels);
    }

    #[test]
    fn truncated_payload_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rvid");
        write_rvid(&path, 2, 4, 4, &vec![0u8; 32]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_rvid(&path).unwrap_err();
        assert!(err.to_string().contains("does not match recorded shape"));
    }
}
