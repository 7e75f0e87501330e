//! Weight persistence: a small little-endian binary container for named
//! f32 tensors.
//!
//! Layout, with no padding anywhere:
//!
//! ```text
//! magic   4 bytes  "RDTW"
//! version u32      currently 1
//! count   u32      number of tensors
//! then per tensor:
//!   name_len u32, name bytes (UTF-8),
//!   rank u32, dims u32 × rank,
//!   payload f32 × product(dims)
//! ```
//!
//! Payloads are always written as f32 regardless of the in-memory scalar
//! type, so saving from an `f64` instantiation quantizes.

use super::scalar::Scalar;
use super::tensor::Tensor;
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"RDTW";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum StoreError {
    Io(io::Error),
    /// The file does not start with the expected magic bytes.
    BadMagic([u8; 4]),
    UnsupportedVersion(u32),
    /// The file ended before the declared contents were read.
    Truncated,
    NameNotUtf8,
    DuplicateName(String),
    /// A tensor the consumer requires is absent from the file.
    MissingTensor(String),
    /// The file contains a tensor the consumer does not know.
    UnexpectedTensor(String),
    /// A tensor is present but with the wrong shape.
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

impl fmt::Display for StoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoreError::Io(e) => write!(f, "weights file i/o: {e}"),
            StoreError::BadMagic(m) => write!(f, "not a weights file (magic {m:?})"),
            StoreError::UnsupportedVersion(v) => write!(f, "unsupported weights version {v}"),
            StoreError::Truncated => write!(f, "weights file is truncated"),
            StoreError::NameNotUtf8 => write!(f, "tensor name is not valid UTF-8"),
            StoreError::DuplicateName(n) => write!(f, "duplicate tensor name {n:?}"),
            StoreError::MissingTensor(n) => write!(f, "missing tensor {n:?}"),
            StoreError::UnexpectedTensor(n) => write!(f, "unexpected tensor {n:?}"),
            StoreError::ShapeMismatch { name, expected, found } => {
                write!(f, "tensor {name:?}: expected shape {expected:?}, found {found:?}")
            }
        }
    }
}

impl std::error::Error for StoreError {}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            StoreError::Truncated
        } else {
            StoreError::Io(e)
        }
    }
}

pub fn save_tensors<T: Scalar>(path: &Path, entries: &[(&str, &Tensor<T>)]) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_f32().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, StoreError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)? as usize;

    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| StoreError::NameNotUtf8)?;
        if entries.iter().any(|(n, _)| *n == name) {
            return Err(StoreError::DuplicateName(name));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        let mut buf = [0u8; 4];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        entries.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok(entries)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, StoreError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Pulls `name` out of a loaded entry list, shape-checked against `expected`.
pub fn take_tensor(
    entries: &mut Vec<(String, Tensor<f32>)>,
    name: &str,
    expected: &[usize],
) -> Result<Tensor<f32>, StoreError> {
    let pos = entries
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| StoreError::MissingTensor(name.to_string()))?;
    let (_, tensor) = entries.remove(pos);
    if tensor.shape() != expected {
        return Err(StoreError::ShapeMismatch {
            name: name.to_string(),
            expected: expected.to_vec(),
            found: tensor.shape().to_vec(),
        });
    }
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::fs;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.rdtw");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Tensor<f32> = Tensor::gaussian(&[3, 4], 0.5, &mut rng);
        let b: Tensor<f32> = Tensor::gaussian(&[7], 2.0, &mut rng);
        save_tensors(&path, &[("net.a", &a), ("net.b", &b)]).unwrap();

        let loaded = load_tensors(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "net.a");
        assert_eq!(loaded[0].1.shape(), &[3, 4]);
        // Bit-exact: compare the raw bit patterns, not approximate values.
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&loaded[0].1), bits(&a));
        assert_eq!(bits(&loaded[1].1), bits(&b));
    }

    #[test]
    fn header_layout_is_as_documented() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.rdtw");
        let t = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]);
        save_tensors(&path, &[("x", &t)]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"RDTW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1); // name len
        assert_eq!(bytes[16], b'x');
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 1); // rank
        assert_eq!(u32::from_le_bytes(bytes[21..25].try_into().unwrap()), 2); // dim
        assert_eq!(f32::from_le_bytes(bytes[25..29].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[29..33].try_into().unwrap()), 2.0);
        assert_eq!(bytes.len(), 33);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.rdtw");
        fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_tensors(&path).unwrap_err(), StoreError::BadMagic(_)));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.rdtw");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RDTW");
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_tensors(&path).unwrap_err(), StoreError::UnsupportedVersion(9)));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.rdtw");
        let t = Tensor::<f32>::from_vec(&[4], vec![1.0; 4]);
        save_tensors(&path, &[("x", &t)]).unwrap();
        let bytes = fs::read(&path).unwrap();
        // Drop the last 6 bytes: the declared shape now promises more floats
        // than the file holds.
        fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
        assert!(matches!(load_tensors(&path).unwrap_err(), StoreError::Truncated));
    }

    #[test]
    fn take_tensor_checks_shape_and_presence() {
        let mut entries = vec![("a".to_string(), Tensor::<f32>::zeros(&[2, 3]))];
        assert!(matches!(
            take_tensor(&mut entries.clone(), "b", &[2, 3]).unwrap_err(),
            StoreError::MissingTensor(_)
        ));
        assert!(matches!(
            take_tensor(&mut entries.clone(), "a", &[3, 2]).unwrap_err(),
            StoreError::ShapeMismatch { .. }
        ));
        let t = take_tensor(&mut entries, "a", &[2, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert!(entries.is_empty());
    }
}
