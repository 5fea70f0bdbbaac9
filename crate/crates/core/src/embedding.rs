//! Segmented entity and relation embeddings.
//!
//! Each embedding row of width `d` is split into `M` equal contiguous segments.
//! A fact of arity `n` only touches the first `min(n, M)` segments of every
//! participant, so low-arity facts train a prefix that higher arities share.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedEmbeddings {
    pub entities: Matrix,
    pub relations: Matrix,
    segment_count: usize,
}

impl SegmentedEmbeddings {
    pub fn new(entities: Matrix, relations: Matrix, segment_count: usize) -> Result<Self> {
        let dim = entities.cols();
        if relations.cols() != dim {
            return Err(Error::Shape(format!(
                "entity width {dim} differs from relation width {}",
                relations.cols()
            )));
        }
        check_divisible(dim, segment_count)?;
        if !entities.is_finite() || !relations.is_finite() {
            return Err(Error::Numeric("embeddings contain non-finite values".into()));
        }
        Ok(Self {
            entities,
            relations,
            segment_count,
        })
    }

    pub fn zeros(entity_count: usize, relation_count: usize, dim: usize, segment_count: usize) -> Result<Self> {
        check_divisible(dim, segment_count)?;
        Ok(Self {
            entities: Matrix::zeros(entity_count, dim),
            relations: Matrix::zeros(relation_count, dim),
            segment_count,
        })
    }

    /// Entries drawn i.i.d. from U(-sqrt(6/d), sqrt(6/d)); entities first, then relations.
    pub fn init_uniform(
        entity_count: usize,
        relation_count: usize,
        dim: usize,
        segment_count: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut emb = Self::zeros(entity_count, relation_count, dim, segment_count)?;
        let bound = (6.0 / dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in emb
            .entities
            .as_mut_slice()
            .iter_mut()
            .chain(emb.relations.as_mut_slice())
        {
            *x = rng.random_range(-bound..bound);
        }
        Ok(emb)
    }

    pub fn dim(&self) -> usize {
        self.entities.cols()
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }

    pub fn segment_len(&self) -> usize {
        self.dim() / self.segment_count
    }

    pub fn entity_count(&self) -> usize {
        self.entities.rows()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.rows()
    }

    #[inline]
    pub fn entity(&self, id: u32) -> &[f64] {
        self.entities.row(id as usize)
    }

    #[inline]
    pub fn relation(&self, id: u32) -> &[f64] {
        self.relations.row(id as usize)
    }

    /// Round every entry through `f32`, matching what a checkpoint stores.
    pub fn quantize_f32(&mut self) {
        for x in self
            .entities
            .as_mut_slice()
            .iter_mut()
            .chain(self.relations.as_mut_slice())
        {
            *x = *x as f32 as f64;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entities.is_finite() && self.relations.is_finite()
    }
}

fn check_divisible(dim: usize, segment_count: usize) -> Result<()> {
    if segment_count == 0 || dim == 0 || !dim.is_multiple_of(segment_count) {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension {dim} is not a positive multiple of segment count {segment_count}"
        )));
    }
    Ok(())
}
