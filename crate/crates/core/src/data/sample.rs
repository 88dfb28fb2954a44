//! One labeled skeleton sequence and its binary container.
//!
//! Container layout (little-endian): magic `"SKL1"` · u32 version=1 ·
//! u32 C · u32 T · u32 N · u32 M · u32 label · C·T·N·M f32 payload in
//! `[C][T][N][M]` order, C slowest and M fastest. Reads validate magic,
//! version, shape, and finiteness; nothing partial is ever returned.

use crate::error::{Error, Result};
use std::io::Read;
use std::path::Path;

pub const SAMPLE_MAGIC: &[u8; 4] = b"SKL1";
pub const SAMPLE_VERSION: u32 = 1;

/// A `[C][T][N][M]` coordinate array with a class label. Absent persons
/// and frames are exact zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub id: String,
    pub label: usize,
    channels: usize,
    frames: usize,
    joints: usize,
    persons: usize,
    data: Vec<f32>,
}

impl SkeletonSequence {
    pub fn zeros(
        id: impl Into<String>,
        label: usize,
        channels: usize,
        frames: usize,
        joints: usize,
        persons: usize,
    ) -> Result<Self> {
        if !(2..=3).contains(&channels) {
            return Err(Error::invalid(format!(
                "sample: channels must be 2 or 3, got {channels}"
            )));
        }
        if frames == 0 || joints == 0 || persons == 0 {
            return Err(Error::invalid(
                "sample: frames, joints and persons must be positive",
            ));
        }
        Ok(SkeletonSequence {
            id: id.into(),
            label,
            channels,
            frames,
            joints,
            persons,
            data: vec![0.0; channels * frames * joints * persons],
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn persons(&self) -> usize {
        self.persons
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn index(&self, c: usize, t: usize, n: usize, m: usize) -> usize {
        debug_assert!(c < self.channels && t < self.frames && n < self.joints && m < self.persons);
        ((c * self.frames + t) * self.joints + n) * self.persons + m
    }

    pub fn get(&self, c: usize, t: usize, n: usize, m: usize) -> f32 {
        self.data[self.index(c, t, n, m)]
    }

    pub fn set(&mut self, c: usize, t: usize, n: usize, m: usize, v: f32) {
        let i = self.index(c, t, n, m);
        self.data[i] = v;
    }

    /// All coordinates of one joint at one frame.
    pub fn joint(&self, t: usize, n: usize, m: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, t, n, m)).collect()
    }

    pub fn set_joint(&mut self, t: usize, n: usize, m: usize, v: &[f32]) {
        assert_eq!(v.len(), self.channels);
        for (c, &x) in v.iter().enumerate() {
            self.set(c, t, n, m, x);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn write_sample(path: &Path, seq: &SkeletonSequence) -> Result<()> {
    if !seq.all_finite() {
        return Err(Error::Numeric(format!(
            "sample '{}': refusing to write non-finite payload",
            seq.id
        )));
    }
    let mut out = Vec::with_capacity(28 + seq.data.len() * 4);
    out.extend_from_slice(SAMPLE_MAGIC);
    for v in [
        SAMPLE_VERSION,
        seq.channels as u32,
        seq.frames as u32,
        seq.joints as u32,
        seq.persons as u32,
        seq.label as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &seq.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(format!("sample truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    })?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_sample(path: &Path) -> Result<SkeletonSequence> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format("sample truncated while reading magic".to_string())
        } else {
            Error::Io(e)
        }
    })?;
    if &magic != SAMPLE_MAGIC {
        return Err(Error::format(format!(
            "sample: bad magic {magic:02x?}, expected {SAMPLE_MAGIC:02x?}"
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != SAMPLE_VERSION {
        return Err(Error::format(format!("sample: unsupported version {version}")));
    }
    let channels = read_u32(&mut r, "channels")? as usize;
    let frames = read_u32(&mut r, "frames")? as usize;
    let joints = read_u32(&mut r, "joints")? as usize;
    let persons = read_u32(&mut r, "persons")? as usize;
    let label = read_u32(&mut r, "label")? as usize;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("sample")
        .to_string();
    let mut seq = SkeletonSequence::zeros(id, label, channels, frames, joints, persons)?;
    let count = seq.data.len();
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format("sample truncated while reading payload".to_string())
        } else {
            Error::Io(e)
        }
    })?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format(
            "sample: trailing bytes after payload".to_string(),
        ));
    }
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::format(format!(
                "sample: non-finite payload value at element {i}"
            )));
        }
        seq.data[i] = v;
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("agcn_sample_test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn random_sample(seed: u64) -> SkeletonSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = SkeletonSequence::zeros("rt", 2, 3, 5, 9, 2).unwrap();
        for v in &mut s.data {
            *v = rng.gen_range(-10.0..10.0);
        }
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = random_sample(5);
        let path = tmp("rt.skl");
        write_sample(&path, &s).unwrap();
        let back = read_sample(&path).unwrap();
        assert_eq!(s.data, back.data);
        assert_eq!(back.label, 2);
        assert_eq!(
            (back.channels, back.frames, back.joints, back.persons),
            (3, 5, 9, 2)
        );
        assert_eq!(back.id, "rt");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let s = random_sample(6);
        let path = tmp("trunc.skl");
        write_sample(&path, &s).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_sample(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn wrong_magic_names_found_bytes() {
        let path = tmp("magic.skl");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"NOPE");
        bytes.extend_from_slice(&[0u8; 24]);
        std::fs::write(&path, bytes).unwrap();
        let err = read_sample(&path).unwrap_err().to_string();
        assert!(err.contains("4e") && err.contains("bad magic"), "{err}");
    }

    #[test]
    fn nan_payload_is_rejected() {
        let s = random_sample(7);
        let path = tmp("nan.skl");
        write_sample(&path, &s).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let nan = f32::NAN.to_le_bytes();
        bytes[28..32].copy_from_slice(&nan);
        std::fs::write(&path, bytes).unwrap();
        let err = read_sample(&path).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");
    }
}
