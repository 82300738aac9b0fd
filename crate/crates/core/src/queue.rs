//! Bounded FIFO store of adverse condition embeddings.

use frest_autograd::Mat;
use ndarray::{Array2, ArrayView1, ArrayView2};

/// Ring buffer of embedding rows. Values are copied in, so nothing stored
/// here is linked to any autodiff graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PositiveQueue {
    storage: Array2<f64>,
    head: usize,
    len: usize,
}

impl PositiveQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        PositiveQueue { storage: Array2::zeros((capacity, dim)), head: 0, len: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.storage.nrows()
    }

    pub fn dim(&self) -> usize {
        self.storage.ncols()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends rows newest-last, evicting the oldest entries beyond capacity.
    pub fn push_rows(&mut self, rows: ArrayView2<f64>) {
        assert_eq!(rows.ncols(), self.dim(), "embedding dim mismatch");
        let cap = self.capacity();
        for row in rows.rows() {
            let slot = (self.head + self.len) % cap;
            self.storage.row_mut(slot).assign(&row);
            if self.len < cap {
                self.len += 1;
            } else {
                self.head = (self.head + 1) % cap;
            }
        }
    }

    /// Entry `k`, counted from the oldest.
    pub fn get(&self, k: usize) -> ArrayView1<'_, f64> {
        assert!(k < self.len, "queue index out of range");
        self.storage.row((self.head + k) % self.capacity())
    }

    pub fn iter(&self) -> impl Iterator<Item = ArrayView1<'_, f64>> {
        (0..self.len).map(move |k| self.get(k))
    }

    /// Contents oldest-first as a `len×dim` matrix.
    pub fn to_matrix(&self) -> Mat {
        let mut out = Array2::zeros((self.len, self.dim()));
        for (k, row) in self.iter().enumerate() {
            out.row_mut(k).assign(&row);
        }
        out
    }

    pub fn clear(&mut self) {
        self.head = 0;
        self.len = 0;
    }
}
