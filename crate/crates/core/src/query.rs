//! Per-layer query bundle shared by the heads, losses and matchers.

use crate::autodiff::{Graph, Value};
use crate::geometry::{rows_to_boxes, BBox};

/// Outputs of one decoder layer. Rows are in the layer's rank order; `order[i]`
/// is the original query slot now sitting at row `i`.
#[derive(Clone, Debug)]
pub struct QueryState {
    pub layer: usize,
    /// `[n, d]` content queries.
    pub content: Value,
    /// `[n, d]` positional queries.
    pub positional: Value,
    /// `[n, K]` classification logits before any rank bias.
    pub logits: Value,
    /// `[n, K]` probabilities.
    pub probs: Value,
    /// `[n, 4]` predicted boxes, center-size form.
    pub boxes: Value,
    pub order: Vec<usize>,
}

impl QueryState {
    pub fn num_queries(&self, g: &Graph) -> usize {
        g.shape(self.probs)[0]
    }

    pub fn snapshot(&self, g: &Graph) -> Predictions {
        Predictions {
            probs: g.data(self.probs).to_vec(),
            num_classes: g.shape(self.probs)[1],
            boxes: rows_to_boxes(g.data(self.boxes)),
        }
    }
}

/// Detached copy of a layer's probabilities and boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// Row-major `[n, K]`.
    pub probs: Vec<f64>,
    pub num_classes: usize,
    pub boxes: Vec<BBox>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn prob(&self, query: usize, class: usize) -> f64 {
        self.probs[query * self.num_classes + class]
    }

    pub fn row(&self, query: usize) -> &[f64] {
        &self.probs[query * self.num_classes..(query + 1) * self.num_classes]
    }

    /// Max-over-categories score per query.
    pub fn max_scores(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}
