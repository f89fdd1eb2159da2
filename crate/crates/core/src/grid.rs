use crate::error::{Error, Result};

/// Dense row-major scalar field: a binary layout raster or a height map in nm.
///
/// Row 0 is the minimum-y edge of the die and column 0 the minimum-x edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    height: usize,
    width: usize,
    pitch_nm: f64,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, pitch_nm: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!("{} values for a {height}x{width} grid", values.len())));
        }
        if !(pitch_nm > 0.0 && pitch_nm.is_finite()) {
            return Err(Error::invalid("pitch", format!("{pitch_nm} must be positive")));
        }
        Ok(Grid2D { height, width, pitch_nm, values })
    }

    pub fn filled(height: usize, width: usize, pitch_nm: f64, value: f64) -> Result<Self> {
        Self::new(height, width, pitch_nm, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pitch_nm(&self) -> f64 {
        self.pitch_nm
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.width + col] = v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.width..(row + 1) * self.width]
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn same_dims(&self, other: &Grid2D) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Copy of the `rows`×`cols` window whose top-left corner is `(row, col)`.
    pub fn window(&self, row: usize, col: usize, rows: usize, cols: usize) -> Grid2D {
        assert!(row + rows <= self.height && col + cols <= self.width);
        let mut values = Vec::with_capacity(rows * cols);
        for r in row..row + rows {
            values.extend_from_slice(&self.values[r * self.width + col..r * self.width + col + cols]);
        }
        Grid2D { height: rows, width: cols, pitch_nm: self.pitch_nm, values }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid2D {
        Grid2D { values: self.values.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        self.values.iter().fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }
}
