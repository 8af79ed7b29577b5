use crate::error::{Error, Result};

/// Rows × cols validity grid for attention logits. `true` marks a live entry.
///
/// Masks built from a key-validity vector share one row across all queries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMask {
    rows: usize,
    cols: usize,
    row_stride: usize,
    bits: Vec<bool>,
}

impl BoolMask {
    pub fn full(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::InvalidMask(format!(
                "{} bits for a {rows}x{cols} mask",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, row_stride: cols, bits })
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self::keys(rows, vec![true; cols])
    }

    /// Every query row sees the same key validity.
    pub fn keys(rows: usize, valid: Vec<bool>) -> Self {
        Self { rows, cols: valid.len(), row_stride: 0, bits: valid }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.row_stride + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        let start = row * self.row_stride;
        &self.bits[start..start + self.cols]
    }

    pub fn check(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::Dimension {
                op: "mask",
                lhs: vec![self.rows, self.cols],
                rhs: vec![rows, cols],
            });
        }
        let distinct_rows = if self.row_stride == 0 { 1 } else { self.rows };
        for r in 0..distinct_rows {
            if !self.row(r).iter().any(|&b| b) {
                return Err(Error::InvalidMask(format!("row {r} has no live entries")));
            }
        }
        Ok(())
    }
}
