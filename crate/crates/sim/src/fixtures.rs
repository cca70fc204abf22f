//! The LASPT1 binary tensor format, shared repo-wide.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   6 bytes   "LASPT1"
//! rank    u32       number of dimensions
//! dims    rank*u64  dimension sizes
//! payload f64...    row-major IEEE-754 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use lasp_core::matrix::Matrix;

use crate::SimError;

const MAGIC: &[u8; 6] = b"LASPT1";

pub fn write_tensor(path: &Path, dims: &[u64], data: &[f64]) -> Result<(), SimError> {
    let expected: u64 = dims.iter().product();
    if expected != data.len() as u64 {
        return Err(SimError::Format {
            detail: format!(
                "dims {:?} imply {} values, got {}",
                dims,
                expected,
                data.len()
            ),
        });
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        out.write_all(&d.to_le_bytes())?;
    }
    for &x in data {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Vec<u64>, Vec<f64>), SimError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SimError::Format {
            detail: format!("{}: bad magic bytes", path.display()),
        });
    }
    let mut rank_bytes = [0u8; 4];
    input.read_exact(&mut rank_bytes)?;
    let rank = u32::from_le_bytes(rank_bytes) as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        input.read_exact(&mut b)?;
        dims.push(u64::from_le_bytes(b));
    }
    let count: u64 = dims.iter().product();
    let mut data = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut b = [0u8; 8];
        input.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    // Trailing bytes mean the header lied about the size.
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(SimError::Format {
            detail: format!("{}: trailing bytes after payload", path.display()),
        });
    }
    Ok((dims, data))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<(), SimError> {
    write_tensor(path, &[m.rows() as u64, m.cols() as u64], m.data())
}

pub fn read_matrix(path: &Path) -> Result<Matrix, SimError> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 2 {
        return Err(SimError::Format {
            detail: format!("{}: expected rank 2, got rank {}", path.display(), dims.len()),
        });
    }
    Ok(Matrix::from_vec(dims[0] as usize, dims[1] as usize, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lasp_core::rng::SplitMix64;

    #[test]
    fn matrix_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.laspt1");
        let m = SplitMix64::new(3).matrix(5, 7);
        write_matrix(&path, &m).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn header_layout_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.laspt1");
        write_tensor(&path, &[2, 1], &[1.5, -2.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..6], b"LASPT1");
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..18], &2u64.to_le_bytes());
        assert_eq!(&bytes[18..26], &1u64.to_le_bytes());
        assert_eq!(&bytes[26..34], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 6 + 4 + 16 + 16);
    }

    #[test]
    fn rejects_bad_magic_and_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.laspt1");
        std::fs::write(&path, b"NOPE!!rest").unwrap();
        assert!(matches!(read_tensor(&path), Err(SimError::Format { .. })));
        let path2 = dir.path().join("short.laspt1");
        assert!(write_tensor(&path2, &[3, 3], &[0.0; 4]).is_err());
    }
}
