//! Flat storage for every trainable scalar of a model.
//!
//! Parameters live in one contiguous vector so the optimizer, checkpoints and
//! gradient checks all share a single stable index space. Each named block is
//! a row-major matrix view into that vector.

use crate::real::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    blocks: Vec<ParamBlock>,
    data: Vec<T>,
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            blocks: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Appends a block; `values` must hold `rows * cols` entries.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, values: Vec<T>) -> ParamId {
        assert_eq!(values.len(), rows * cols, "parameter block size");
        let id = ParamId(self.blocks.len());
        self.blocks.push(ParamBlock {
            name: name.into(),
            offset: self.data.len(),
            rows,
            cols,
        });
        self.data.extend(values);
        id
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    pub fn values(&self, id: ParamId) -> &[T] {
        &self.data[self.blocks[id.0].range()]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [T] {
        let range = self.blocks[id.0].range();
        &mut self.data[range]
    }

    pub fn matrix(&self, id: ParamId) -> Matrix<T> {
        let b = &self.blocks[id.0];
        Matrix::from_vec(b.rows, b.cols, self.values(id).to_vec())
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Flat index of entry `(row, col)` of block `id`.
    pub fn flat_index(&self, id: ParamId, row: usize, col: usize) -> usize {
        let b = &self.blocks[id.0];
        assert!(row < b.rows && col < b.cols, "parameter index out of range");
        b.offset + row * b.cols + col
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn locate(&self, flat: usize) -> Option<(ParamId, usize, usize)> {
        let pos = self.blocks.partition_point(|b| b.offset + b.len() <= flat);
        let b = self.blocks.get(pos)?;
        if flat < b.offset {
            return None;
        }
        let local = flat - b.offset;
        Some((ParamId(pos), local / b.cols, local % b.cols))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            blocks: self.blocks.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}
