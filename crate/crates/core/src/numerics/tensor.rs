//! Dense row-major f32 tensor and the handful of reductions the rest of the
//! crate needs.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Dense multi-dimensional f32 array stored in row-major order.
///
/// `shape.iter().product() == data.len()` holds for every constructed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, NumericsError> {
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::ShapeData {
                shape,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { index: i });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, NumericsError> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self, NumericsError> {
        validate_shape(shape)?;
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    /// Builds a rank-1 tensor from a slice.
    pub fn from_slice(values: &[f32]) -> Result<Self, NumericsError> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same buffer, new extents. Element order is preserved.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, NumericsError> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// Applies `f` elementwise. Fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self, NumericsError> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// `self * a + other * b`, elementwise.
    pub fn lin_comb(&self, a: f32, other: &Tensor, b: f32) -> Result<Self, NumericsError> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| x * a + y * b)
            .collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self, NumericsError> {
        self.lin_comb(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self, NumericsError> {
        self.lin_comb(1.0, other, -1.0)
    }

    pub fn scale(&self, s: f32) -> Result<Self, NumericsError> {
        self.map(|v| v * s)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f32, NumericsError> {
        self.check_same_shape(other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> f32 {
        norm(&self.data)
    }

    pub fn mean(&self) -> f32 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() as f32 / self.data.len() as f32
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<(), NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Writes the `LSTN` container: magic, version byte, rank byte,
    /// little-endian u32 extents, little-endian f32 payload.
    pub fn write_lstn<W: Write>(&self, mut w: W) -> Result<(), NumericsError> {
        let rank = u8::try_from(self.shape.len())
            .map_err(|_| NumericsError::Format(format!("rank {} too large", self.shape.len())))?;
        let mut buf = Vec::with_capacity(6 + 4 * self.shape.len() + 4 * self.data.len());
        buf.extend_from_slice(LSTN_MAGIC);
        buf.push(LSTN_VERSION);
        buf.push(rank);
        for &extent in &self.shape {
            let e = u32::try_from(extent)
                .map_err(|_| NumericsError::Format(format!("extent {extent} exceeds u32")))?;
            buf.extend_from_slice(&e.to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_lstn<R: Read>(mut r: R) -> Result<Self, NumericsError> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head)?;
        if &head[..4] != LSTN_MAGIC {
            return Err(NumericsError::Format("bad magic, expected LSTN".into()));
        }
        if head[4] != LSTN_VERSION {
            return Err(NumericsError::Format(format!(
                "unsupported LSTN version {}",
                head[4]
            )));
        }
        let rank = head[5] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut word = [0u8; 4];
        for _ in 0..rank {
            r.read_exact(&mut word)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        validate_shape(&shape)?;
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(NumericsError::Format("trailing bytes after payload".into()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(shape, data)
    }

    pub fn to_lstn_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        // Writing into a Vec cannot fail for in-range ranks and extents,
        // which every constructed tensor satisfies.
        self.write_lstn(&mut out).expect("in-memory LSTN write");
        out
    }

    pub fn from_lstn_bytes(bytes: &[u8]) -> Result<Self, NumericsError> {
        Self::read_lstn(bytes)
    }
}

pub const LSTN_MAGIC: &[u8; 4] = b"LSTN";
pub const LSTN_VERSION: u8 = 1;

fn validate_shape(shape: &[usize]) -> Result<(), NumericsError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(NumericsError::EmptyShape(shape.to_vec()));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum::<f64>() as f32
}

pub(crate) fn norm(a: &[f32]) -> f32 {
    a.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt() as f32
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<f32, NumericsError> {
    a.check_same_shape(b)?;
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(NumericsError::ZeroNorm);
    }
    let c = a.dot(b)? / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

/// Root-mean-square difference: `‖a − b‖₂ / √n`.
pub fn l2_normed(a: &Tensor, b: &Tensor) -> Result<f32, NumericsError> {
    a.check_same_shape(b)?;
    Ok(l2_normed_slices(a.data(), b.data()))
}

pub(crate) fn l2_normed_slices(a: &[f32], b: &[f32]) -> f32 {
    let ss: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    (ss / a.len() as f64).sqrt() as f32
}
