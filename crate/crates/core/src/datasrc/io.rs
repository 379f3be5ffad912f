//! Dataset file format: magic `GQD1`, u32 N, u8 C, u16 H, u16 W, label
//! payload u16[N], image payload little-endian f32. Class names and
//! provenance are not stored; loading restores the canonical class-name
//! table and synthetic provenance.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::datasrc::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::nnkit::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"GQD1";

pub fn dataset_to_bytes(data: &Dataset) -> Vec<u8> {
    let shape = data.images.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Vec::with_capacity(4 + 9 + 2 * n + 4 * data.images.numel());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.push(c as u8);
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    for &l in &data.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for &v in data.images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = dataset_to_bytes(data);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    dataset_from_bytes(&buf)
}

pub fn dataset_from_bytes(buf: &[u8]) -> Result<Dataset> {
    let need = |have: usize, n: usize, what: &str| -> Result<()> {
        if have < n {
            return Err(Error::format(format!(
                "truncated dataset file: needed {n} bytes for {what}, {have} left"
            )));
        }
        Ok(())
    };
    need(buf.len(), 13, "header")?;
    if &buf[..4] != DATASET_MAGIC {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {DATASET_MAGIC:?}",
            &buf[..4]
        )));
    }
    let n = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let c = buf[8] as usize;
    let h = u16::from_le_bytes(buf[9..11].try_into().unwrap()) as usize;
    let w = u16::from_le_bytes(buf[11..13].try_into().unwrap()) as usize;
    if c != 3 {
        return Err(Error::format(format!("expected 3 channels, file has {c}")));
    }
    if n == 0 || h == 0 || w == 0 || n > 1 << 24 {
        return Err(Error::format(format!(
            "implausible dataset dims N={n} H={h} W={w}"
        )));
    }
    let mut pos = 13usize;
    need(buf.len() - pos, 2 * n, "labels")?;
    let labels: Vec<u16> = buf[pos..pos + 2 * n]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    pos += 2 * n;
    let count = n * c * h * w;
    need(buf.len() - pos, 4 * count, "image payload")?;
    let pixels: Vec<f32> = buf[pos..pos + 4 * count]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    pos += 4 * count;
    if pos != buf.len() {
        return Err(Error::format("trailing bytes after image payload"));
    }
    let images = Tensor::new(vec![n, c, h, w], pixels)?;
    Dataset::new(images, labels, Provenance::Synthetic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasrc::synth::synth_dataset;

    #[test]
    fn round_trip_is_bitwise_stable() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_dataset(2, 5).unwrap();
        let path = dir.path().join("d.gqd");
        save_dataset(&data, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(data.images, loaded.images);
        assert_eq!(data.labels, loaded.labels);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_dataset(1, 5).unwrap();
        let bytes = dataset_to_bytes(&data);
        let path = dir.path().join("t.gqd");
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
    }

    #[test]
    fn byte_level_little_endian_fixture() {
        // hand-built file: one 3x1x1 image, label 7, known float bits
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"GQD1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(3);
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&7u16.to_le_bytes());
        for v in [0.25f32, 0.5, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let data = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(data.labels, vec![7]);
        assert_eq!(data.images.data(), &[0.25, 0.5, 1.0]);
        // and the writer produces the same bytes back
        assert_eq!(dataset_to_bytes(&data), bytes);
    }
}
