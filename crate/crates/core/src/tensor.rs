//! Dense row-major `f64` tensors, the token-grid view used by the fusion
//! blocks, and the `ORST` binary tensor format.

use std::io::{Read, Write};

use crate::error::{contract_err, dim_err, Error, Result};

const ORST_MAGIC: &[u8; 4] = b"ORST";
const ORST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Gradient slot, written only by `Tape::accumulate_grad`.
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err(format!("shape {shape:?} has a zero extent"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Builds from a list of equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the values. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// First extent and the product of the rest: the matrix view every
    /// tape primitive uses.
    pub fn rows_cols(&self) -> (usize, usize) {
        let rows = self.shape[0];
        (rows, self.data.len() / rows)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_orst<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(ORST_MAGIC)?;
        w.write_all(&ORST_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_orst<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ORST_MAGIC {
            return Err(Error::Format(format!("bad ORST magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != ORST_VERSION {
            return Err(Error::Format(format!("unsupported ORST version {version}")));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("unsupported ORST rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(format!("ORST payload: {e}")))
    }

    pub fn to_orst_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_orst(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// A `[channels, height, width]` tensor viewed as `height * width` tokens
/// of dimension `channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    tensor: Tensor,
}

impl TokenGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Self {
            tensor: Tensor::new(vec![channels, height, width], data)?,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            tensor: Tensor::zeros(&[channels, height, width]),
        }
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return dim_err(format!(
                "token grid needs a rank-3 tensor, got {:?}",
                tensor.shape()
            ));
        }
        Ok(Self { tensor })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape[2]
    }

    pub fn tokens(&self) -> usize {
        self.height() * self.width()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.tensor.data[(c * self.height() + y) * self.width() + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.height(), self.width());
        self.tensor.data[(c * h + y) * w + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.tokens();
        &self.tensor.data[c * p..(c + 1) * p]
    }

    /// The `P x D` token-major matrix (one row per spatial position).
    pub fn to_token_rows(&self) -> Vec<Vec<f64>> {
        let (d, p) = (self.channels(), self.tokens());
        (0..p)
            .map(|t| (0..d).map(|c| self.tensor.data[c * p + t]).collect())
            .collect()
    }

    /// Checks that every position is a probability vector over channels.
    pub fn check_distribution(&self, tol: f64) -> Result<()> {
        let (c, p) = (self.channels(), self.tokens());
        for t in 0..p {
            let mut s = 0.0;
            for ch in 0..c {
                let v = self.tensor.data[ch * p + t];
                if v < -tol {
                    return contract_err(format!("negative mass {v} at token {t}"));
                }
                s += v;
            }
            if (s - 1.0).abs() > tol {
                return contract_err(format!("channels sum to {s} at token {t}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn orst_layout_is_little_endian() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = t.to_orst_bytes();
        assert_eq!(&bytes[..4], b"ORST");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..28], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 16);
        let back = Tensor::read_orst(&bytes[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn orst_rejects_truncated_and_bad_magic() {
        let mut bytes = Tensor::scalar(3.0).to_orst_bytes();
        bytes.pop();
        assert!(Tensor::read_orst(&bytes[..]).is_err());
        let mut bad = Tensor::scalar(3.0).to_orst_bytes();
        bad[0] = b'X';
        assert!(matches!(Tensor::read_orst(&bad[..]), Err(Error::Format(_))));
    }

    #[test]
    fn token_rows_transpose_channels() {
        let g = TokenGrid::new(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(g.to_token_rows(), vec![vec![1.0, 3.0], vec![2.0, 4.0]]);
    }
}
