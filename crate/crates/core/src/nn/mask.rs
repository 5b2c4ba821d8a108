//! Boolean attention masks. `true` at `(i, j)` means query `i` may attend to key `j`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    /// Lower-triangular (each position sees itself and the past).
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    /// Chunked causal mask: query `i` sees key `j` iff
    /// `floor(j / size) <= floor(i / size)`.
    pub fn chunked(n: usize, size: usize) -> Self {
        let size = size.max(1);
        Self::from_fn(n, n, |i, j| j / size <= i / size)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    /// Hide every key at or beyond `valid`.
    pub fn restrict_keys(&self, valid: usize) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| j < valid && self.get(i, j))
    }

    /// Rows `[start, start + len)`, keys `[0, cols)`.
    pub fn window(&self, start: usize, len: usize, cols: usize) -> Self {
        Self::from_fn(len, cols, |i, j| self.get(start + i, j))
    }

    /// Error on the first row with no visible key.
    pub fn check_rows(&self) -> Result<()> {
        match (0..self.rows).find(|&i| !self.row(i).iter().any(|&b| b)) {
            Some(row) => Err(Error::EmptyMaskRow { row }),
            None => Ok(()),
        }
    }
}
