//! CDIV binary volume files.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `43 44 49 56` ("CDIV")            |
//! | 4      | 1    | version, must be 1                      |
//! | 5      | 1    | dtype: 0 = real f32, 1 = complex f32    |
//! | 6      | 2    | zero padding                            |
//! | 8      | 12   | `nx`, `ny`, `nz` as u32                 |
//! | 20     | ...  | payload in C order, complex interleaved |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex32;

use super::{ComplexVolume, Dims, RealVolume};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CDIV";
pub const VERSION: u8 = 1;
const DTYPE_REAL: u8 = 0;
const DTYPE_COMPLEX: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CdivVolume {
    Real(RealVolume),
    Complex(ComplexVolume),
}

impl CdivVolume {
    pub fn dims(&self) -> Dims {
        match self {
            CdivVolume::Real(v) => v.dims(),
            CdivVolume::Complex(v) => v.dims(),
        }
    }

    pub fn into_real(self) -> Result<RealVolume> {
        match self {
            CdivVolume::Real(v) => Ok(v),
            CdivVolume::Complex(_) => Err(Error::Format("expected a real volume, found complex".into())),
        }
    }

    pub fn into_complex(self) -> Result<ComplexVolume> {
        match self {
            CdivVolume::Complex(v) => Ok(v),
            CdivVolume::Real(_) => Err(Error::Format("expected a complex volume, found real".into())),
        }
    }
}

fn write_header<W: Write>(w: &mut W, dtype: u8, dims: Dims) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION, dtype, 0, 0])?;
    for n in dims.as_array() {
        let n = u32::try_from(n).map_err(|_| Error::Format(format!("dimension {n} exceeds u32")))?;
        w.write_all(&n.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_real<W: Write>(w: &mut W, vol: &RealVolume) -> Result<()> {
    write_header(w, DTYPE_REAL, vol.dims())?;
    for v in vol.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_complex<W: Write>(w: &mut W, vol: &ComplexVolume) -> Result<()> {
    write_header(w, DTYPE_COMPLEX, vol.dims())?;
    for c in vol.data() {
        w.write_all(&c.re.to_le_bytes())?;
        w.write_all(&c.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read<R: Read>(r: &mut R) -> Result<CdivVolume> {
    let mut header = [0u8; 20];
    r.read_exact(&mut header)?;
    if header[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &header[0..4])));
    }
    if header[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", header[4])));
    }
    let dtype = header[5];
    if dtype != DTYPE_REAL && dtype != DTYPE_COMPLEX {
        return Err(Error::Format(format!("unknown dtype {dtype}")));
    }
    let dim = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap()) as usize;
    let dims = Dims::new(dim(8), dim(12), dim(16));
    let floats = dims.len() * if dtype == DTYPE_COMPLEX { 2 } else { 1 };
    let mut payload = vec![0u8; floats * 4];
    r.read_exact(&mut payload)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite value in payload".into()));
    }
    Ok(if dtype == DTYPE_REAL {
        CdivVolume::Real(RealVolume::new(dims, values)?)
    } else {
        let data = values
            .chunks_exact(2)
            .map(|p| Complex32::new(p[0], p[1]))
            .collect();
        CdivVolume::Complex(ComplexVolume::new(dims, data)?)
    })
}

pub fn read_path(path: impl AsRef<Path>) -> Result<CdivVolume> {
    let mut r = BufReader::new(File::open(path)?);
    read(&mut r)
}

pub fn read_real(path: impl AsRef<Path>) -> Result<RealVolume> {
    read_path(path)?.into_real()
}

pub fn read_complex(path: impl AsRef<Path>) -> Result<ComplexVolume> {
    read_path(path)?.into_complex()
}

pub fn save_real(path: impl AsRef<Path>, vol: &RealVolume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_real(&mut w, vol)?;
    w.flush()?;
    Ok(())
}

pub fn save_complex(path: impl AsRef<Path>, vol: &ComplexVolume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_complex(&mut w, vol)?;
    w.flush()?;
    Ok(())
}
