use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const UNIT_NORM_TOL: f64 = 1e-9;

/// Paired FIFO dictionaries of past key embeddings, one per augmented view.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyQueue {
    depth: usize,
    tilde: VecDeque<Vec<f64>>,
    bar: VecDeque<Vec<f64>>,
}

impl KeyQueue {
    pub fn new(depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("queue depth must be at least 1"));
        }
        Ok(Self {
            depth,
            tilde: VecDeque::with_capacity(depth),
            bar: VecDeque::with_capacity(depth),
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.tilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tilde.is_empty()
    }

    /// Appends one batch of keys per view, evicting the oldest entries past
    /// the depth. Every row must be unit-norm.
    pub fn enqueue(&mut self, tilde: &Tensor, bar: &Tensor) -> Result<()> {
        if tilde.shape() != bar.shape() || tilde.shape().len() != 2 {
            return Err(Error::Shape {
                op: "enqueue",
                left: tilde.shape().to_vec(),
                right: bar.shape().to_vec(),
            });
        }
        for keys in [tilde, bar] {
            for i in 0..keys.rows() {
                let norm = keys.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::Numeric(format!("queued key {i} has norm {norm}, expected 1")));
                }
            }
        }
        for i in 0..tilde.rows() {
            self.tilde.push_back(tilde.row(i).to_vec());
            self.bar.push_back(bar.row(i).to_vec());
        }
        while self.tilde.len() > self.depth {
            self.tilde.pop_front();
            self.bar.pop_front();
        }
        Ok(())
    }

    fn stack(keys: &VecDeque<Vec<f64>>) -> Option<Tensor> {
        if keys.is_empty() {
            return None;
        }
        let rows: Vec<&[f64]> = keys.iter().map(Vec::as_slice).collect();
        Some(Tensor::from_rows(&rows).expect("uniform key width"))
    }

    /// Stored s̃-view keys, oldest first.
    pub fn tilde_keys(&self) -> Option<Tensor> {
        Self::stack(&self.tilde)
    }

    /// Stored s̄-view keys, oldest first.
    pub fn bar_keys(&self) -> Option<Tensor> {
        Self::stack(&self.bar)
    }
}
