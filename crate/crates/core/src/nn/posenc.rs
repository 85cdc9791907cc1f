use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `pe[pos, 2i] = sin(pos / 10000^(2i/dim))`, `pe[pos, 2i+1] = cos(...)`.
pub fn sinusoidal_pe_1d(length: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config(format!("1-D positional encoding needs an even dim, got {dim}")));
    }
    if length == 0 {
        return Err(Error::config("positional encoding length must be positive"));
    }
    let mut data = vec![0.0; length * dim];
    for pos in 0..length {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![length, dim], data)
}

/// Encoding for an `n × n` grid flattened row-major. The first `dim/2`
/// channels encode the row, the rest the column.
pub fn sinusoidal_pe_2d(n: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::config(format!("2-D positional encoding needs dim divisible by 4, got {dim}")));
    }
    let half = dim / 2;
    let axis = sinusoidal_pe_1d(n, half)?;
    let mut data = Vec::with_capacity(n * n * dim);
    for r in 0..n {
        for c in 0..n {
            data.extend_from_slice(axis.row(r));
            data.extend_from_slice(axis.row(c));
        }
    }
    Tensor::new(vec![n * n, dim], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionalKind {
    Sequence,
    Grid,
}

/// A fixed encoding table together with how it was built.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    pub kind: PositionalKind,
    pub table: Tensor,
}

impl PositionalEncoding {
    pub fn sequence(length: usize, dim: usize) -> Result<Self> {
        Ok(PositionalEncoding {
            kind: PositionalKind::Sequence,
            table: sinusoidal_pe_1d(length, dim)?,
        })
    }

    pub fn grid(n: usize, dim: usize) -> Result<Self> {
        Ok(PositionalEncoding {
            kind: PositionalKind::Grid,
            table: sinusoidal_pe_2d(n, dim)?,
        })
    }

    pub fn len(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
