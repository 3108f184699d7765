//! Binary state snapshots.
//!
//! Layout, all little-endian:
//!
//! | offset | size | content                          |
//! |--------|------|----------------------------------|
//! | 0      | 4    | magic `BNKS`                     |
//! | 4      | 4    | format version, `u32` (= 1)      |
//! | 8      | 4    | `n_x`, `u32`                     |
//! | 12     | 4    | `n_v`, `u32` (points per axis)   |
//! | 16     | 8    | `v_max`, `f64`                   |
//! | 24     | 8    | time stamp, `f64`                |
//! | 32     | 8 N  | `f64` values, `N = n_x n_v^3`    |
//!
//! Values are ordered `i_x` outer, velocity node inner, with the velocity
//! node index `j = (k1 n_v + k2) n_v + k3`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::transport::DistributionField;

pub const MAGIC: [u8; 4] = *b"BNKS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotHeader {
    pub version: u32,
    pub n_x: u32,
    pub n_v: u32,
    pub v_max: f64,
    pub time: f64,
}

impl SnapshotHeader {
    pub fn value_count(&self) -> usize {
        let n_v = self.n_v as usize;
        self.n_x as usize * n_v * n_v * n_v
    }
}

pub fn encode(field: &DistributionField) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * field.data().len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(field.spatial().len() as u32).to_le_bytes());
    out.extend_from_slice(&(field.velocity().n_v() as u32).to_le_bytes());
    out.extend_from_slice(&field.velocity().v_max().to_le_bytes());
    out.extend_from_slice(&field.time().to_le_bytes());
    for x in field.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn f64_at(bytes: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

pub fn decode_header(bytes: &[u8]) -> Result<SnapshotHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Snapshot(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let header = SnapshotHeader {
        version: u32_at(bytes, 4),
        n_x: u32_at(bytes, 8),
        n_v: u32_at(bytes, 12),
        v_max: f64_at(bytes, 16),
        time: f64_at(bytes, 24),
    };
    if header.version != VERSION {
        return Err(Error::Snapshot(format!("unsupported version {}", header.version)));
    }
    Ok(header)
}

pub fn decode(bytes: &[u8]) -> Result<(SnapshotHeader, Vec<f64>)> {
    let header = decode_header(bytes)?;
    let expected = HEADER_LEN + 8 * header.value_count();
    if bytes.len() != expected {
        return Err(Error::Snapshot(format!(
            "expected {expected} bytes for n_x = {}, n_v = {}, found {}",
            header.n_x,
            header.n_v,
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, data))
}

pub fn write_snapshot(path: &Path, field: &DistributionField) -> Result<()> {
    fs::write(path, encode(field)).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_snapshot(path: &Path) -> Result<(SnapshotHeader, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase_grid::{build_velocity_grid, SpatialGrid};
    use crate::transport::PhaseSpace;

    fn field() -> DistributionField {
        let p = PhaseSpace::new(SpatialGrid::new(3).unwrap(), build_velocity_grid(4, 2.0).unwrap());
        DistributionField::from_fn(p, f64::INFINITY, |x, v| x + v[0] * v[0] + 0.1 * v[2] + 1.0)
            .unwrap()
            .with_time(0.75)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let f = field();
        let bytes = encode(&f);
        assert_eq!(bytes.len(), HEADER_LEN + 8 * 3 * 64);
        assert_eq!(&bytes[..4], b"BNKS");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[3, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[4, 0, 0, 0]);
        assert_eq!(&bytes[16..24], &2.0f64.to_le_bytes());
        assert_eq!(&bytes[24..32], &0.75f64.to_le_bytes());
        assert_eq!(&bytes[32..40], &f.data()[0].to_le_bytes());
        let (h, data) = decode(&bytes).unwrap();
        assert_eq!(h.n_x, 3);
        assert_eq!(h.n_v, 4);
        assert_eq!(h.time, 0.75);
        assert_eq!(data, f.data());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&field());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 2;
        assert!(decode(&bad).is_err());
        assert!(decode(&[0u8; 8]).is_err());
    }
}
