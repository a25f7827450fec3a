//! Little-endian binary formats.
//!
//! Tensor dump (`.mkst`):
//!
//! ```text
//! "MKST" | dtype: u8 | dims: 4 × u32 (N, C, H, W) | N·C·H·W scalars
//! ```
//!
//! Weight file (`.mksw`):
//!
//! ```text
//! "MKSW" | version: u32 | count: u32 |
//!   count × ( name_len: u16 | name: UTF-8 | dtype: u8 | dims: 4 × u32 | scalars )
//! ```
//!
//! dtype codes are 0 = f32 and 1 = f64. Scalars are written with their exact
//! bit patterns, so a write/read cycle is bit-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use mks_core::backbone::Model;
use mks_core::{DType, Scalar, Shape, Tensor};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"MKST";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"MKSW";
pub const WEIGHTS_VERSION: u32 = 1;

/// A tensor whose element type is only known at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// The tensor as `T`, only if it is stored as `T`.
    pub fn into_typed<T: Scalar>(self) -> Option<Tensor<T>> {
        // the dtype tag pins T, so the element-wise conversion is exact
        match self {
            AnyTensor::F32(t) if T::DTYPE == DType::F32 => Some(t.cast()),
            AnyTensor::F64(t) if T::DTYPE == DType::F64 => Some(t.cast()),
            _ => None,
        }
    }

    fn write_body<W: Write>(&self, w: &mut W) -> io::Result<()> {
        match self {
            AnyTensor::F32(t) => write_body(w, t),
            AnyTensor::F64(t) => write_body(w, t),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

fn write_body<W: Write, T: Scalar>(w: &mut W, t: &Tensor<T>) -> io::Result<()> {
    w.write_all(&[T::DTYPE.code()])?;
    for d in t.shape().dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.size_of());
    match T::DTYPE {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|v| buf.extend((v.as_f64() as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|v| buf.extend(v.as_f64().to_le_bytes())),
    }
    w.write_all(&buf)
}

fn read_array<const N: usize, R: Read>(r: &mut R, what: &'static str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::format(what, format!("truncated input ({e})")))?;
    Ok(b)
}

fn read_body<R: Read>(r: &mut R, what: &'static str) -> Result<AnyTensor> {
    let [code] = read_array::<1, _>(r, what)?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::format(what, format!("unknown dtype code {code}")))?;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = u32::from_le_bytes(read_array(r, what)?) as usize;
    }
    let shape = Shape::from_dims(dims);
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format(what, format!("dims {dims:?} overflow")))?;
    let bytes = n
        .checked_mul(dtype.size_of())
        .ok_or_else(|| Error::format(what, format!("dims {dims:?} overflow")))?;
    let mut raw = Vec::new();
    r.take(bytes as u64)
        .read_to_end(&mut raw)
        .map_err(|e| Error::format(what, e.to_string()))?;
    if raw.len() != bytes {
        return Err(Error::format(
            what,
            format!("expected {bytes} data bytes for {shape}, found {}", raw.len()),
        ));
    }
    Ok(match dtype {
        DType::F32 => {
            let v = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F32(Tensor::from_vec(shape, v)?)
        }
        DType::F64 => {
            let v = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F64(Tensor::from_vec(shape, v)?)
        }
    })
}

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4], what: &'static str) -> Result<()> {
    let got: [u8; 4] = read_array(r, what)?;
    if &got != magic {
        return Err(Error::format(
            what,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    Ok(())
}

fn expect_eof<R: Read>(r: &mut R, what: &'static str) -> Result<()> {
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::format(what, "trailing bytes after the last entry")),
        Err(e) => Err(Error::format(what, e.to_string())),
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &AnyTensor) -> io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    t.write_body(w)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<AnyTensor> {
    const WHAT: &str = "tensor dump";
    expect_magic(r, TENSOR_MAGIC, WHAT)?;
    let t = read_body(r, WHAT)?;
    expect_eof(r, WHAT)?;
    Ok(t)
}

/// Entries in the given order; names must be unique and at most `u16::MAX` bytes.
pub fn write_weights<'a, W: Write>(
    w: &mut W,
    entries: impl ExactSizeIterator<Item = (&'a str, AnyTensor)>,
) -> io::Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("name '{name}' too long")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_body(w)?;
    }
    Ok(())
}

/// Entries in file order.
pub fn read_weights<R: Read>(r: &mut R) -> Result<Vec<(String, AnyTensor)>> {
    const WHAT: &str = "weight file";
    expect_magic(r, WEIGHTS_MAGIC, WHAT)?;
    let version = u32::from_le_bytes(read_array(r, WHAT)?);
    if version != WEIGHTS_VERSION {
        return Err(Error::format(WHAT, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(r, WHAT)?);
    let mut out: Vec<(String, AnyTensor)> = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_array(r, WHAT)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::format(WHAT, format!("truncated name ({e})")))?;
        let name = String::from_utf8(name).map_err(|_| Error::format(WHAT, "entry name is not UTF-8"))?;
        if out.iter().any(|(n, _)| *n == name) {
            return Err(Error::format(WHAT, format!("duplicate entry '{name}'")));
        }
        let t = read_body(r, WHAT)?;
        out.push((name, t));
    }
    expect_eof(r, WHAT)?;
    Ok(out)
}

/// Every parameter and buffer of `model`, sorted by name.
pub fn model_entries<T: Scalar>(model: &Model<T>) -> Vec<(String, AnyTensor)> {
    model
        .state_dict()
        .into_iter()
        .map(|(n, p)| {
            let t = match T::DTYPE {
                DType::F32 => AnyTensor::F32(p.value.cast()),
                DType::F64 => AnyTensor::F64(p.value.cast()),
            };
            (n, t)
        })
        .collect()
}

/// Loads `entries` into `model`; names, shapes and dtype must match exactly.
pub fn load_model<T: Scalar>(model: &mut Model<T>, entries: Vec<(String, AnyTensor)>) -> Result<()> {
    let mut map = BTreeMap::new();
    for (name, t) in entries {
        let dtype = t.dtype();
        let typed = t.into_typed::<T>().ok_or_else(|| {
            Error::format(
                "weight file",
                format!("'{name}' is stored as {dtype:?}, model uses {:?}", T::DTYPE),
            )
        })?;
        map.insert(name, typed);
    }
    model.load_state(&map)?;
    Ok(())
}

fn create(path: &Path) -> Result<io::BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(io::BufWriter::new(
        fs::File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn open(path: &Path) -> Result<io::BufReader<fs::File>> {
    Ok(io::BufReader::new(
        fs::File::open(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn finish(path: &Path, w: io::Result<io::BufWriter<fs::File>>) -> Result<()> {
    w.and_then(|mut w| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn save_tensor(path: &Path, t: &AnyTensor) -> Result<()> {
    let mut w = create(path)?;
    let r = write_tensor(&mut w, t).map(|_| w);
    finish(path, r)
}

pub fn load_tensor(path: &Path) -> Result<AnyTensor> {
    read_tensor(&mut open(path)?)
}

pub fn save_weights<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    let entries = model_entries(model);
    let mut w = create(path)?;
    let r = write_weights(&mut w, entries.iter().map(|(n, t)| (n.as_str(), t.clone()))).map(|_| w);
    finish(path, r)
}

pub fn load_weights(path: &Path) -> Result<Vec<(String, AnyTensor)>> {
    read_weights(&mut open(path)?)
}
