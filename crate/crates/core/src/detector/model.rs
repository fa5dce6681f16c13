//! Linear heads over anchor features.
//!
//! Every anchor gets `num_classes + 7` outputs: one objectness logit,
//! `num_classes + 1` category logits (index 0 is background), four box
//! deltas and one mask logit.

use serde::{Deserialize, Serialize};

use super::features::FeatureMatrix;
use super::DetectorError;
use crate::scalar::{sigmoid, softmax, Scalar};

pub const OBJ: usize = 0;
pub const CLS: usize = 1;

pub fn num_outputs(num_classes: usize) -> usize {
    num_classes + 7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Params<T> {
    pub num_classes: usize,
    pub dim: usize,
    /// Row-major `outputs x dim`.
    pub weights: Vec<T>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self { num_classes, dim, weights: vec![T::zero(); num_outputs(num_classes) * dim] }
    }

    pub fn num_outputs(&self) -> usize {
        num_outputs(self.num_classes)
    }

    pub fn box_offset(&self) -> usize {
        CLS + self.num_classes + 1
    }

    pub fn mask_offset(&self) -> usize {
        self.box_offset() + 4
    }

    fn row(&self, o: usize) -> &[T] {
        &self.weights[o * self.dim..(o + 1) * self.dim]
    }

    /// Head weights by name, each a flat row-major array.
    pub fn named_arrays(&self) -> Vec<(&'static str, Vec<T>)> {
        let d = self.dim;
        let slice = |from: usize, to: usize| self.weights[from * d..to * d].to_vec();
        vec![
            ("objectness", slice(OBJ, CLS)),
            ("classification", slice(CLS, self.box_offset())),
            ("box_regression", slice(self.box_offset(), self.mask_offset())),
            ("mask", slice(self.mask_offset(), self.num_outputs())),
        ]
    }
}

/// Row-major `anchors x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs<T> {
    pub anchors: usize,
    pub num_classes: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Outputs<T> {
    pub fn zeros_like(other: &Outputs<T>) -> Self {
        Self { anchors: other.anchors, num_classes: other.num_classes, data: vec![T::zero(); other.data.len()] }
    }

    pub fn width(&self) -> usize {
        num_outputs(self.num_classes)
    }

    pub fn row(&self, a: usize) -> &[T] {
        let w = self.width();
        &self.data[a * w..(a + 1) * w]
    }

    pub fn row_mut(&mut self, a: usize) -> &mut [T] {
        let w = self.width();
        &mut self.data[a * w..(a + 1) * w]
    }

    pub fn objectness_logit(&self, a: usize) -> T {
        self.row(a)[OBJ]
    }

    pub fn objectness(&self, a: usize) -> T {
        sigmoid(self.objectness_logit(a))
    }

    /// `num_classes + 1` logits, background first.
    pub fn class_logits(&self, a: usize) -> &[T] {
        &self.row(a)[CLS..CLS + self.num_classes + 1]
    }

    pub fn class_probs(&self, a: usize) -> Vec<T> {
        softmax(self.class_logits(a))
    }

    pub fn deltas(&self, a: usize) -> &[T] {
        let off = CLS + self.num_classes + 1;
        &self.row(a)[off..off + 4]
    }

    pub fn mask_logit(&self, a: usize) -> T {
        self.row(a)[CLS + self.num_classes + 5]
    }
}

pub fn forward<T: Scalar>(params: &Params<T>, features: &FeatureMatrix<T>) -> Result<Outputs<T>, DetectorError> {
    if features.dim != params.dim {
        return Err(DetectorError::ShapeMismatch { expected: params.dim, got: features.dim });
    }
    let n_out = params.num_outputs();
    let mut data = Vec::with_capacity(features.rows * n_out);
    for a in 0..features.rows {
        let f = features.row(a);
        for o in 0..n_out {
            data.push(params.row(o).iter().zip(f).map(|(&w, &x)| w * x).sum());
        }
    }
    Ok(Outputs { anchors: features.rows, num_classes: params.num_classes, data })
}

/// Accumulate `dL/dW` for `dL/d(outputs)` into `grad` (same layout as the
/// weights), scaled by `scale`.
pub fn backward_into<T: Scalar>(
    features: &FeatureMatrix<T>,
    grad_outputs: &Outputs<T>,
    scale: T,
    grad: &mut [T],
) {
    let dim = features.dim;
    let n_out = grad_outputs.width();
    for a in 0..features.rows {
        let g = grad_outputs.row(a);
        let f = features.row(a);
        for o in 0..n_out {
            let go = g[o];
            if go == T::zero() {
                continue;
            }
            let go = go * scale;
            for (acc, &x) in grad[o * dim..(o + 1) * dim].iter_mut().zip(f) {
                *acc = *acc + go * x;
            }
        }
    }
}
