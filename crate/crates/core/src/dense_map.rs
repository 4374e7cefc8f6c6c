//! Row-major scalar grids.
//!
//! [`DenseMap`] carries every per-pixel quantity in the crate: image
//! channels, depth, logits, risks and scores. Values are held as `f64` and
//! are finite after every public operation. [`UnitIntervalMap`] refines it
//! with a `[0, 1]` range check that never clamps; use
//! [`DenseMap::clamp_to_unit`] explicitly when rounding dust must be removed.

use std::ops::Deref;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Min,
    Max,
}

impl ElementwiseOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            ElementwiseOp::Add => a + b,
            ElementwiseOp::Sub => a - b,
            ElementwiseOp::Mul => a * b,
            ElementwiseOp::Min => a.min(b),
            ElementwiseOp::Max => a.max(b),
        }
    }
}

fn check_dims(height: usize, width: usize) -> Result<usize> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimensions { height, width });
    }
    height
        .checked_mul(width)
        .ok_or(Error::InvalidDimensions { height, width })
}

fn first_non_finite(values: &[f64]) -> Option<(usize, f64)> {
    values
        .iter()
        .copied()
        .enumerate()
        .find(|(_, v)| !v.is_finite())
}

impl DenseMap {
    pub fn new_filled(height: usize, width: usize, fill: f64) -> Result<Self> {
        let len = check_dims(height, width)?;
        if !fill.is_finite() {
            return Err(Error::NonFinite {
                index: 0,
                value: fill,
            });
        }
        Ok(Self {
            height,
            width,
            values: vec![fill; len],
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new_filled(height, width, 0.0)
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let len = check_dims(height, width)?;
        if values.len() != len {
            return Err(Error::InvalidParameter(format!(
                "{} values supplied for a {height}x{width} map",
                values.len()
            )));
        }
        if let Some((index, value)) = first_non_finite(&values) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Builds a map by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let len = check_dims(height, width)?;
        let mut values = Vec::with_capacity(len);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::from_vec(height, width, values)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Value at `(row, col)`. Panics when out of bounds.
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.height && col < self.width);
        self.values[row * self.width + col]
    }

    pub fn ensure_same_dims(&self, other: &DenseMap) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }

    pub fn elementwise(&self, other: &DenseMap, op: ElementwiseOp) -> Result<DenseMap> {
        self.ensure_same_dims(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| op.apply(a, b))
            .collect();
        DenseMap::from_vec(self.height, self.width, values)
    }

    /// Applies `f` to every value. Fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<DenseMap> {
        DenseMap::from_vec(
            self.height,
            self.width,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn scale(&self, k: f64) -> Result<DenseMap> {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Exact median by selection; even lengths average the two middle values.
    pub fn median(&self) -> f64 {
        median_of(&self.values)
    }

    /// Mirror along the vertical axis (column `c` maps to `width - 1 - c`).
    pub fn flip_horizontal(&self) -> DenseMap {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks(self.width) {
            values.extend(row.iter().rev());
        }
        DenseMap {
            height: self.height,
            width: self.width,
            values,
        }
    }

    /// Clamps every value into `[0, 1]`.
    pub fn clamp_to_unit(&self) -> UnitIntervalMap {
        UnitIntervalMap(DenseMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    /// Rounds every value through `f32`, matching what a `.dmap` round trip stores.
    pub fn round_to_f32(&self) -> DenseMap {
        DenseMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}

pub(crate) fn median_of(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut buf = values.to_vec();
    let n = buf.len();
    let mid = n / 2;
    let (_, upper, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = buf[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// A [`DenseMap`] whose values all lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitIntervalMap(DenseMap);

impl UnitIntervalMap {
    pub fn new(map: DenseMap) -> Result<Self> {
        if let Some((index, &value)) = map
            .values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::OutOfUnitInterval { index, value });
        }
        Ok(Self(map))
    }

    pub fn new_filled(height: usize, width: usize, fill: f64) -> Result<Self> {
        Self::new(DenseMap::new_filled(height, width, fill)?)
    }

    /// Builds a binary map from a boolean predicate per pixel.
    pub fn from_mask(height: usize, width: usize, mask: &[bool]) -> Result<Self> {
        Self::new(DenseMap::from_vec(
            height,
            width,
            mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )?)
    }

    /// Checks that the map holds only exact 0s and 1s.
    pub fn ensure_binary(&self) -> Result<()> {
        if let Some((index, &value)) = self
            .0
            .values
            .iter()
            .enumerate()
            .find(|(_, &v)| v != 0.0 && v != 1.0)
        {
            return Err(Error::NonBinaryLabel { index, value });
        }
        Ok(())
    }

    pub fn as_map(&self) -> &DenseMap {
        &self.0
    }

    pub fn into_map(self) -> DenseMap {
        self.0
    }

    /// `true` where the value is at least one half.
    pub fn to_mask(&self) -> Vec<bool> {
        self.0.values.iter().map(|&v| v >= 0.5).collect()
    }

    pub fn flip_horizontal(&self) -> UnitIntervalMap {
        UnitIntervalMap(self.0.flip_horizontal())
    }
}

impl Deref for UnitIntervalMap {
    type Target = DenseMap;

    fn deref(&self) -> &DenseMap {
        &self.0
    }
}

impl TryFrom<DenseMap> for UnitIntervalMap {
    type Error = Error;

    fn try_from(map: DenseMap) -> Result<Self> {
        Self::new(map)
    }
}
