use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::real::{DType, Real};

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Dimension {
                op: "tensor",
                msg: format!("shape {shape:?} holds {n} values but {} were given", data.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Dimension {
                op: "tensor",
                msg: format!("zero extent in shape {shape:?}"),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Shape { op: "reshape", lhs: self.shape, rhs: shape });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn get(&self, idx: &[usize]) -> T {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &d)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of extent {d}");
            flat = flat * d + ix;
        }
        self.data[flat]
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Little-endian dump: `OMGT`, rank (u32), extents (u64 each), dtype code (u8), raw values.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.shape.len() * 8 + self.data.len() * T::DTYPE.size());
        buf.extend_from_slice(DUMP_MAGIC);
        buf.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.push(T::DTYPE.code());
        for &v in &self.data {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a dump written by [`Tensor::write_dump`], converting to `T` if the stored dtype differs.
    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let fmt = |m: &str| TensorError::Format(m.to_string());
        if bytes.len() < 9 || &bytes[..4] != DUMP_MAGIC {
            return Err(fmt("bad magic"));
        }
        let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut pos = 8;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let end = pos + 8;
            let ext = bytes.get(pos..end).ok_or_else(|| fmt("truncated extents"))?;
            shape.push(u64::from_le_bytes(ext.try_into().unwrap()) as usize);
            pos = end;
        }
        let code = *bytes.get(pos).ok_or_else(|| fmt("missing dtype"))?;
        pos += 1;
        let dtype = DType::from_code(code).ok_or_else(|| fmt(&format!("unknown dtype code {code}")))?;
        let n: usize = shape.iter().product();
        let raw = &bytes[pos..];
        if raw.len() != n * dtype.size() {
            return Err(fmt(&format!("expected {} value bytes, found {}", n * dtype.size(), raw.len())));
        }
        let data = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        Tensor::new(shape, data)
    }
}

const DUMP_MAGIC: &[u8; 4] = b"OMGT";
