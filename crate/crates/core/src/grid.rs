use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Square raster of side `side`, row-major storage.
///
/// Row index is the north-south axis (y), column index east-west (x).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    side: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(side: usize, value: T) -> Self {
        Grid {
            side,
            data: vec![value; side * side],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(side: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != side * side {
            return Err(Error::InvalidField(alloc::format!(
                "grid data length {} does not match side {}",
                data.len(),
                side
            )));
        }
        Ok(Grid { side, data })
    }

    /// Build from a per-cell function of (row, col).
    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                data.push(f(i, j));
            }
        }
        Grid { side, data }
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.side + col]
    }

    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        &mut self.data[row * self.side + col]
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            side: self.side,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl Grid<f64> {
    pub fn zeros(side: usize) -> Self {
        Grid::filled(side, 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum with f64 accumulation (values already f64; kept for clarity at
    /// call sites that document accumulation order).
    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Check two grids share a side; used by every binary field op.
pub fn same_side<A, B>(a: &Grid<A>, b: &Grid<B>) -> Result<usize> {
    if a.side() != b.side() {
        return Err(Error::ShapeMismatch {
            expected: a.side(),
            got: b.side(),
        });
    }
    Ok(a.side())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Grid::from_vec(3, alloc::vec![0.0f64; 8]).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let g = Grid::from_fn(4, |i, j| (i * 10 + j) as f64);
        assert_eq!(*g.get(2, 3), 23.0);
        assert_eq!(g.values()[2 * 4 + 3], 23.0);
    }
}
