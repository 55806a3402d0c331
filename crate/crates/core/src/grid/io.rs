//! IOCC v1: the on-disk grid format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   4 bytes  "IOCC"
//! version u16      1
//! nx,ny,nz u32 x 3
//! voxel_size f32
//! origin  f32 x 3
//! reserved u16     16 (mask width in bits)
//! payload nx*ny*nz u16 label masks, x-fastest row-major
//! ```
//!
//! Write then read is bit-identical: geometry stays f32 end to end and masks
//! are stored raw.

use super::{LabelMask, SemanticGrid};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"IOCC";
pub const VERSION: u16 = 1;
const RESERVED: u16 = 16;
const HEADER_LEN: usize = 4 + 2 + 12 + 4 + 12 + 2;

/// Refuse payloads above 1 GiB (2^29 voxels) rather than trusting a header.
const MAX_VOXELS: u64 = 1 << 29;

#[derive(Debug, Error)]
pub enum GridIoError {
    #[error("bad magic: expected \"IOCC\", got {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0} (expected {VERSION})")]
    UnsupportedVersion(u16),
    #[error("truncated file: expected {expected} bytes of {section}, got {got}")]
    Truncated { section: &'static str, expected: usize, got: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_grid<W: Write>(w: &mut W, grid: &SemanticGrid) -> Result<(), GridIoError> {
    let [nx, ny, nz] = grid.dims();
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(&MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(nx as u32).to_le_bytes());
    header.extend_from_slice(&(ny as u32).to_le_bytes());
    header.extend_from_slice(&(nz as u32).to_le_bytes());
    header.extend_from_slice(&grid.voxel_size().to_le_bytes());
    for o in grid.origin() {
        header.extend_from_slice(&o.to_le_bytes());
    }
    header.extend_from_slice(&RESERVED.to_le_bytes());
    w.write_all(&header)?;

    let mut payload = Vec::with_capacity(grid.len() * 2);
    for m in grid.data() {
        payload.extend_from_slice(&m.0.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_grid<R: Read>(r: &mut R) -> Result<SemanticGrid, GridIoError> {
    let mut header = [0u8; HEADER_LEN];
    let got = read_up_to(r, &mut header)?;
    if got < 4 {
        return Err(GridIoError::Truncated { section: "header", expected: HEADER_LEN, got });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&header[..4]);
    if magic != MAGIC {
        return Err(GridIoError::BadMagic(magic));
    }
    if got < HEADER_LEN {
        return Err(GridIoError::Truncated { section: "header", expected: HEADER_LEN, got });
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(GridIoError::UnsupportedVersion(version));
    }
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let (nx, ny, nz) = (u32_at(6) as u64, u32_at(10) as u64, u32_at(14) as u64);
    let voxel_size = f32_at(18);
    let origin = [f32_at(22), f32_at(26), f32_at(30)];
    let reserved = u16::from_le_bytes([header[34], header[35]]);

    if nx == 0 || ny == 0 || nz == 0 || nx * ny * nz > MAX_VOXELS {
        return Err(GridIoError::InvalidHeader(format!("bad dims {nx}x{ny}x{nz}")));
    }
    if !(voxel_size.is_finite() && voxel_size > 0.0) {
        return Err(GridIoError::InvalidHeader(format!("bad voxel size {voxel_size}")));
    }
    if origin.iter().any(|o| !o.is_finite()) {
        return Err(GridIoError::InvalidHeader(format!("non-finite origin {origin:?}")));
    }
    if reserved != RESERVED {
        return Err(GridIoError::InvalidHeader(format!("reserved field {reserved} != {RESERVED}")));
    }

    let count = (nx * ny * nz) as usize;
    let mut payload = vec![0u8; count * 2];
    let got = read_up_to(r, &mut payload)?;
    if got < payload.len() {
        return Err(GridIoError::Truncated { section: "payload", expected: count * 2, got });
    }

    let mut grid = SemanticGrid::new(nx as usize, ny as usize, nz as usize, voxel_size, origin);
    for (i, b) in payload.chunks_exact(2).enumerate() {
        grid.set_linear(i as u32, LabelMask(u16::from_le_bytes([b[0], b[1]])));
    }
    Ok(grid)
}

/// read_exact, except a clean EOF reports how far it got instead of erroring.
fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize, GridIoError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

pub fn write_grid_file<P: AsRef<Path>>(path: P, grid: &SemanticGrid) -> Result<(), GridIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid(&mut w, grid)?;
    w.flush()?;
    Ok(())
}

pub fn read_grid_file<P: AsRef<Path>>(path: P) -> Result<SemanticGrid, GridIoError> {
    read_grid(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SemanticLabel;
    use proptest::prelude::*;

    fn sample_grid() -> SemanticGrid {
        let mut g = SemanticGrid::new(6, 5, 4, 0.4, [-1.2, -1.0, -0.8]);
        g.set(0, 0, 0, LabelMask::from_label(SemanticLabel::Drivable));
        g.set(5, 4, 3, LabelMask::EMPTY.stamp(SemanticLabel::Vehicle).stamp(SemanticLabel::Ego));
        g.set(2, 2, 1, LabelMask::from_label(SemanticLabel::Vegetation));
        g
    }

    fn to_bytes(g: &SemanticGrid) -> Vec<u8> {
        let mut buf = Vec::new();
        write_grid(&mut buf, g).unwrap();
        buf
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let g = sample_grid();
        let bytes = to_bytes(&g);
        let back = read_grid(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, g);
        // And writing the reread grid reproduces the same bytes.
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn bad_magic_is_its_own_error() {
        let mut bytes = to_bytes(&sample_grid());
        bytes[0] = b'X';
        match read_grid(&mut bytes.as_slice()) {
            Err(GridIoError::BadMagic(m)) => assert_eq!(&m[1..], b"OCC"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_its_own_error() {
        let mut bytes = to_bytes(&sample_grid());
        bytes[4] = 9;
        match read_grid(&mut bytes.as_slice()) {
            Err(GridIoError::UnsupportedVersion(9)) => {}
            other => panic!("expected UnsupportedVersion, got {other:?}"),
        }
    }

    #[test]
    fn truncation_in_header_and_payload_are_detected() {
        let bytes = to_bytes(&sample_grid());
        match read_grid(&mut &bytes[..20]) {
            Err(GridIoError::Truncated { section: "header", .. }) => {}
            other => panic!("expected header truncation, got {other:?}"),
        }
        match read_grid(&mut &bytes[..bytes.len() - 3]) {
            Err(GridIoError::Truncated { section: "payload", .. }) => {}
            other => panic!("expected payload truncation, got {other:?}"),
        }
    }

    #[test]
    fn oversized_dims_are_rejected() {
        let mut bytes = to_bytes(&sample_grid());
        bytes[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            read_grid(&mut bytes.as_slice()),
            Err(GridIoError::InvalidHeader(_))
        ));
    }

    #[test]
    fn file_helpers_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.iocc");
        let g = sample_grid();
        write_grid_file(&path, &g).unwrap();
        assert_eq!(read_grid_file(&path).unwrap(), g);
    }

    proptest! {
        #[test]
        fn prop_roundtrip_arbitrary_masks(masks in proptest::collection::vec(0u16..1024, 24)) {
            let mut g = SemanticGrid::new(2, 3, 4, 0.25, [0.5, -0.5, 0.0]);
            for (i, m) in masks.iter().enumerate() {
                g.set_linear(i as u32, LabelMask(*m));
            }
            let bytes = to_bytes(&g);
            prop_assert_eq!(read_grid(&mut bytes.as_slice()).unwrap(), g);
        }
    }
}
