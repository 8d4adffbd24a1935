//! Dense complex tensors and the `NBF1` binary container.
//!
//! Layout of an `NBF1` file:
//!
//! ```text
//! magic   b"NBF1"
//! u32 LE  rank
//! u32 LE  dim[0] .. dim[rank-1]
//! u32 LE  dtype code   (0 = complex64: interleaved f32 re/im, 1 = complex128: interleaved f64 re/im)
//! payload row-major, little endian
//! ```
//!
//! The same container carries beamformer banks `[D][F][M]`, beam sets
//! `[D][T][F]`, beam weights `[D][T][F]`, residuals and single-channel
//! spectrograms `[T][F]`.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"NBF1";

/// Element type stored in an `NBF1` payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Complex64 = 0,
    Complex128 = 1,
}

impl Dtype {
    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Dtype::Complex64),
            1 => Ok(Dtype::Complex128),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn element_bytes(self) -> usize {
        match self {
            Dtype::Complex64 => 8,
            Dtype::Complex128 => 16,
        }
    }
}

/// Row-major complex tensor of arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<Complex64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![Complex64::new(0.0, 0.0); len],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<Complex64>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::dims("tensor payload length", len, data.len()));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    /// Fails unless the tensor has exactly the given dims.
    pub fn expect_dims(&self, what: &'static str, dims: &[usize]) -> Result<()> {
        if self.dims != dims {
            return Err(Error::dims(what, dims, &self.dims));
        }
        Ok(())
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(8 + 4 * (self.rank() + 1) + self.data.len() * dtype.element_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&to_u32(self.rank(), "rank")?.to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
        }
        out.extend_from_slice(&dtype.code().to_le_bytes());
        match dtype {
            Dtype::Complex64 => {
                for z in &self.data {
                    out.extend_from_slice(&(z.re as f32).to_le_bytes());
                    out.extend_from_slice(&(z.im as f32).to_le_bytes());
                }
            }
            Dtype::Complex128 => {
                for z in &self.data {
                    out.extend_from_slice(&z.re.to_le_bytes());
                    out.extend_from_slice(&z.im.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W, dtype: Dtype) -> Result<()> {
        w.write_all(&self.to_bytes(dtype)?)?;
        Ok(())
    }

    /// Parses an `NBF1` stream, returning the tensor and the stored dtype.
    pub fn read_from<R: Read>(mut r: R) -> Result<(Self, Dtype)> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"NBF1\"")));
        }
        let rank = read_u32(&mut r, "rank")? as usize;
        if rank > 16 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r, "dimension")? as usize);
        }
        let dtype = Dtype::from_code(read_u32(&mut r, "dtype")?)?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;

        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let expected = len
            .checked_mul(dtype.element_bytes())
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, header {:?} requires {expected}",
                payload.len(),
                dims
            )));
        }
        let data = match dtype {
            Dtype::Complex64 => payload
                .chunks_exact(8)
                .map(|c| {
                    let re = f32::from_le_bytes(c[0..4].try_into().unwrap());
                    let im = f32::from_le_bytes(c[4..8].try_into().unwrap());
                    Complex64::new(re as f64, im as f64)
                })
                .collect(),
            Dtype::Complex128 => payload
                .chunks_exact(16)
                .map(|c| {
                    let re = f64::from_le_bytes(c[0..8].try_into().unwrap());
                    let im = f64::from_le_bytes(c[8..16].try_into().unwrap());
                    Complex64::new(re, im)
                })
                .collect(),
        };
        Ok((Tensor { dims, data }, dtype))
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes(dtype)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        let (t, _) = Tensor::read_from(std::io::BufReader::new(file))
            .map_err(|e| match e {
                Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
                other => other,
            })?;
        Ok(t)
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated header ({what})")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
