//! `.oodt` tensor files.
//!
//! ```text
//! magic "OODB" | version u32 LE (=1) | dtype u8 | ndim u8 | reserved u16 (=0)
//! | shape: ndim × u64 LE | payload, row-major, little-endian
//! ```
//!
//! Dtype 0 is f32 and 1 is i64. Dtype 2 (f64) is an extension used only for
//! fitted detector state and model checkpoints; bundle roles never carry it.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OODB";
pub const VERSION: u32 = 1;
const FIXED_HEADER: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    I64,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I64 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::I64),
            2 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I64 | DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::I64 => "i64",
            DType::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I64(Vec<i64>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

/// Dense row-major tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

/// Header of an `.oodt` file, readable without touching the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorHeader {
    pub fn element_count(&self) -> Result<usize> {
        element_count(&self.shape)
    }

    pub fn payload_bytes(&self) -> Result<usize> {
        self.element_count()?
            .checked_mul(self.dtype.width())
            .ok_or_else(|| Error::Format("tensor size overflows".into()))
    }

    pub fn header_bytes(&self) -> usize {
        FIXED_HEADER + 8 * self.shape.len()
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::Format("tensor size overflows".into()))
    })
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("rank {} exceeds 255", shape.len())));
        }
        let expected = element_count(&shape)?;
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn i64(shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        Self::new(shape, TensorData::I64(data))
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    /// Rounds to f32 (nearest, ties to even).
    pub fn from_matrix_f32(a: ArrayView2<f64>) -> Self {
        let (r, c) = a.dim();
        Self {
            shape: vec![r, c],
            data: TensorData::F32(a.iter().map(|&x| x as f32).collect()),
        }
    }

    pub fn from_matrix_f64(a: ArrayView2<f64>) -> Self {
        let (r, c) = a.dim();
        Self {
            shape: vec![r, c],
            data: TensorData::F64(a.iter().copied().collect()),
        }
    }

    pub fn from_labels(labels: &[usize]) -> Self {
        Self {
            shape: vec![labels.len()],
            data: TensorData::I64(labels.iter().map(|&l| l as i64).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::I64(_) => DType::I64,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn header(&self) -> TensorHeader {
        TensorHeader {
            dtype: self.dtype(),
            shape: self.shape.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating elements widened to f64. Integer tensors are rejected.
    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        match &self.data {
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TensorData::F64(v) => Ok(v.clone()),
            TensorData::I64(_) => Err(Error::Schema("expected a floating tensor, found i64".into())),
        }
    }

    pub fn as_i64(&self) -> Result<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Ok(v),
            _ => Err(Error::Schema(format!(
                "expected an i64 tensor, found {}",
                self.dtype().name()
            ))),
        }
    }

    /// Rank ≥ 1 tensor viewed as `shape[0] × rest`.
    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        let rows = *self
            .shape
            .first()
            .ok_or_else(|| Error::Shape("scalar tensor has no rows".into()))?;
        let cols = element_count(&self.shape[1..])?;
        Array2::from_shape_vec((rows, cols), self.to_f64_vec()?)
            .map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn to_vector(&self) -> Result<Array1<f64>> {
        if self.shape.len() != 1 {
            return Err(Error::Shape(format!("expected rank 1, got {:?}", self.shape)));
        }
        Ok(Array1::from(self.to_f64_vec()?))
    }

    pub fn to_array3(&self) -> Result<Array3<f64>> {
        if self.shape.len() != 3 {
            return Err(Error::Shape(format!("expected rank 3, got {:?}", self.shape)));
        }
        Array3::from_shape_vec(
            (self.shape[0], self.shape[1], self.shape[2]),
            self.to_f64_vec()?,
        )
        .map_err(|e| Error::Shape(e.to_string()))
    }

    /// Equality of shape, dtype and every element's bit pattern.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            _ => false,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::with_capacity(header.header_bytes() + self.len() * header.dtype.width());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(header.dtype.code());
        out.push(self.shape.len() as u8);
        out.extend_from_slice(&0u16.to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = decode_header(bytes)?;
        let start = header.header_bytes();
        let expected = header.payload_bytes()?;
        let payload = &bytes[start..];
        if payload.len() != expected {
            return Err(Error::Schema(format!(
                "header {:?} implies {expected} payload bytes, file has {}",
                header.shape,
                payload.len()
            )));
        }
        let data = match header.dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I64 => TensorData::I64(
                payload
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Self {
            shape: header.shape,
            data,
        })
    }
}

/// Parses the fixed header and shape. `bytes` may be longer than the header.
pub fn decode_header(bytes: &[u8]) -> Result<TensorHeader> {
    if bytes.len() < FIXED_HEADER {
        return Err(Error::Format(format!(
            "file of {} bytes is shorter than the tensor header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"OODB\"",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let dtype = DType::from_code(bytes[8])?;
    let ndim = bytes[9] as usize;
    let reserved = u16::from_le_bytes(bytes[10..12].try_into().unwrap());
    if reserved != 0 {
        return Err(Error::Format(format!("reserved field is {reserved}, expected 0")));
    }
    let end = FIXED_HEADER + 8 * ndim;
    if bytes.len() < end {
        return Err(Error::Format("file truncated inside the shape block".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = FIXED_HEADER + 8 * i;
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        shape.push(
            usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?,
        );
    }
    let header = TensorHeader { dtype, shape };
    header.payload_bytes()?;
    Ok(header)
}

/// Reads only the header of a tensor file and checks the file length against it.
pub fn read_header(path: &Path) -> Result<TensorHeader> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut fixed = [0u8; FIXED_HEADER];
    let got = read_up_to(&mut file, &mut fixed).map_err(|e| Error::io(path, e))?;
    let ndim = if got == FIXED_HEADER { fixed[9] as usize } else { 0 };
    let mut buf = fixed[..got].to_vec();
    if got == FIXED_HEADER {
        let mut shape = vec![0u8; 8 * ndim];
        let more = read_up_to(&mut file, &mut shape).map_err(|e| Error::io(path, e))?;
        buf.extend_from_slice(&shape[..more]);
    }
    let header = decode_header(&buf)?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let expected = (header.header_bytes() + header.payload_bytes()?) as u64;
    if len != expected {
        return Err(Error::Schema(format!(
            "{}: header {:?} implies {expected} bytes, file has {len}",
            path.display(),
            header.shape
        )));
    }
    Ok(header)
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes).map_err(|e| e.context(path.display().to_string()))
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    write_atomic(path, &tensor.encode())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
