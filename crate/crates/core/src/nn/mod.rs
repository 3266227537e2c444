//! A small CPU training engine for staged residual classifiers.
//!
//! Activations are stored NHWC in `f32`. Convolutions run as im2col followed
//! by a single GEMM, so one batch costs one matrix product per layer in each
//! direction. Everything is single-threaded and therefore bit-reproducible.

pub mod loss;
mod network;
mod ops;
pub mod optim;

pub use network::{BlockVariant, MaterializeOptions, Mode, Network, NetworkCache, ROBUST_BLOCK_KEY};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A batch of images in NHWC layout with pixel values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBatch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl ImageBatch {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c, data: vec![0.0; n * h * w * c] }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {n}x{h}x{w}x{c} batch",
                data.len()
            )));
        }
        Ok(Self { n, h, w, c, data })
    }

    /// Number of values per item.
    pub fn item_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f32] {
        let l = self.item_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    /// Gathers the listed items into a new batch.
    pub fn select(&self, indices: &[usize]) -> Self {
        let l = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * l);
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        Self { n: indices.len(), h: self.h, w: self.w, c: self.c, data }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n && self.h == other.h && self.w == other.w && self.c == other.c
    }
}

/// Row-major `n × k` matrix of class scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Logits {
    pub n: usize,
    pub k: usize,
    pub data: Vec<f32>,
}

impl Logits {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self { n, k, data: vec![0.0; n * k] }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn argmax(&self, i: usize) -> usize {
        let r = self.row(i);
        let mut best = 0;
        for (j, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = j;
            }
        }
        best
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.n).map(|i| self.argmax(i)).collect()
    }
}

/// Anything that maps images to logits and can backpropagate to its input.
///
/// Attacks and Lipschitz profiling are written against this trait so that
/// closed-form test models and trained networks share one code path.
pub trait Classifier {
    fn num_outputs(&self) -> usize;

    fn logits(&self, x: &ImageBatch) -> Result<Logits>;

    /// Runs a forward pass, asks `upstream` for dLoss/dLogits and returns the
    /// logits together with dLoss/dInput.
    fn input_gradient(
        &self,
        x: &ImageBatch,
        upstream: &mut dyn FnMut(&Logits) -> Logits,
    ) -> Result<(Logits, ImageBatch)>;
}
