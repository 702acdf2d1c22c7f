//! Binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MMTT"            4 bytes magic
//! 0x01              version
//! ndim              u8
//! dims              ndim x u32
//! payload           prod(dims) x f64, row-major
//! ```
//!
//! Several tensors may be written back to back into one file; the first
//! record on its own is always a valid tensor file.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array, ArrayD, IxDyn};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"MMTT";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor file version {0}")]
    BadVersion(u8),
    #[error("tensor has {0} dimensions, at most 255 supported")]
    TooManyDims(usize),
    #[error("dimension {0} does not fit in u32")]
    DimTooLarge(usize),
    #[error("payload length {got} does not match shape {dims:?}")]
    ShapeMismatch { dims: Vec<usize>, got: usize },
    #[error("truncated tensor file")]
    Truncated,
    #[error("expected {expected} tensors, found {got}")]
    Count { expected: String, got: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TensorFileError>;

/// A dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(TensorFileError::ShapeMismatch {
                dims,
                got: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> Option<&[f64]> {
        match self.dims[..] {
            [rows, cols] if i < rows => Some(&self.data[i * cols..(i + 1) * cols]),
            _ => None,
        }
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        Array::from_shape_vec(IxDyn(&self.dims), self.data.clone())
            .expect("shape checked at construction")
    }

    pub fn from_array<D: ndarray::Dimension>(array: &Array<f64, D>) -> Self {
        Self {
            dims: array.shape().to_vec(),
            data: array.iter().copied().collect(),
        }
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let ndim = u8::try_from(self.dims.len())
            .map_err(|_| TensorFileError::TooManyDims(self.dims.len()))?;
        out.write_all(MAGIC)?;
        out.write_all(&[VERSION, ndim])?;
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| TensorFileError::DimTooLarge(d))?;
            out.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one record. Returns `Ok(None)` on a clean end of stream.
    pub fn read_from<R: Read>(input: &mut R) -> Result<Option<Self>> {
        let mut magic = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            let n = input.read(&mut magic[filled..])?;
            if n == 0 {
                return if filled == 0 {
                    Ok(None)
                } else {
                    Err(TensorFileError::Truncated)
                };
            }
            filled += n;
        }
        if &magic != MAGIC {
            return Err(TensorFileError::BadMagic(magic));
        }
        let mut head = [0u8; 2];
        read_exact(input, &mut head)?;
        if head[0] != VERSION {
            return Err(TensorFileError::BadVersion(head[0]));
        }
        let mut dims = Vec::with_capacity(head[1] as usize);
        for _ in 0..head[1] {
            let mut buf = [0u8; 4];
            read_exact(input, &mut buf)?;
            dims.push(u32::from_le_bytes(buf) as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            read_exact(input, &mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Ok(Some(Self { dims, data }))
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensors(path, std::slice::from_ref(self))
    }

    /// Reads a file holding exactly one tensor.
    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut tensors = read_tensors(path)?;
        if tensors.len() != 1 {
            return Err(TensorFileError::Count {
                expected: "1".into(),
                got: tensors.len(),
            });
        }
        Ok(tensors.remove(0))
    }
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TensorFileError::Truncated,
        _ => TensorFileError::Io(e),
    })
}

pub fn write_tensors(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for t in tensors {
        t.write_to(&mut out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    while let Some(t) = Tensor::read_from(&mut input)? {
        out.push(t);
    }
    Ok(out)
}
