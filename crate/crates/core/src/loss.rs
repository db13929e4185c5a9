//! Fused, numerically stable loss operators.
//!
//! Each loss takes per-element (or per-row) weights and returns the weighted
//! sum as a scalar; normalization is expressed through the weights.

use crate::error::{dim_err, Result};
use crate::ops::sigmoid;
use crate::tape::{BackwardContext, Operation, Tape, Var};
use crate::tensor::Tensor;

/// `0.5 x²` for `|x| < 1`, `|x| - 0.5` otherwise.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Binary cross-entropy of `sigmoid(z)` against target `t`.
pub fn bce_with_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

struct BceWithLogits {
    targets: Vec<f64>,
    weights: Vec<f64>,
}

impl Operation for BceWithLogits {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let z = ctx.inputs[0].data();
        let g = ctx.grad_output.item();
        Ok(vec![Some(Tensor::from_fn(ctx.inputs[0].shape(), |i| {
            g * self.weights[i] * (sigmoid(z[i]) - self.targets[i])
        }))])
    }
}

struct SoftmaxCrossEntropy {
    width: usize,
    labels: Vec<usize>,
    weights: Vec<f64>,
}

impl Operation for SoftmaxCrossEntropy {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = ctx.grad_output.item();
        let mut out = ctx.inputs[0].clone();
        for (r, row) in out.data_mut().chunks_mut(self.width).enumerate() {
            crate::ops::softmax_in_place(row);
            row[self.labels[r]] -= 1.0;
            let w = g * self.weights[r];
            for v in row.iter_mut() {
                *v *= w;
            }
        }
        Ok(vec![Some(out)])
    }
}

struct SmoothL1 {
    targets: Vec<f64>,
    weights: Vec<f64>,
}

impl Operation for SmoothL1 {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0].data();
        let g = ctx.grad_output.item();
        Ok(vec![Some(Tensor::from_fn(ctx.inputs[0].shape(), |i| {
            g * self.weights[i] * smooth_l1_grad(x[i] - self.targets[i])
        }))])
    }
}

impl Tape {
    /// `Σ wᵢ · BCE(sigmoid(zᵢ), tᵢ)` over all elements of `logits`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        let z = self.value(logits).data();
        if targets.len() != z.len() || weights.len() != z.len() {
            return dim_err(format!(
                "bce: {} logits, {} targets, {} weights",
                z.len(),
                targets.len(),
                weights.len()
            ));
        }
        let total = z
            .iter()
            .zip(&targets)
            .zip(&weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|((&z, &t), &w)| w * bce_with_logit(z, t))
            .sum();
        Ok(self.record(
            Tensor::scalar(total),
            vec![logits],
            Box::new(BceWithLogits { targets, weights }),
        ))
    }

    /// `Σ_r w_r · (−ln softmax(logits_r)[label_r])` for `[R, K]` logits.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Var> {
        let x = self.value(logits);
        let [rows, width] = *x.shape() else {
            return dim_err(format!("cross-entropy expects [R, K], got {:?}", x.shape()));
        };
        if labels.len() != rows || weights.len() != rows || labels.iter().any(|&l| l >= width) {
            return dim_err("cross-entropy labels/weights do not match logits");
        }
        let mut total = 0.0;
        for (r, row) in x.data().chunks(width).enumerate() {
            if weights[r] == 0.0 {
                continue;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += weights[r] * (lse - row[labels[r]]);
        }
        Ok(self.record(
            Tensor::scalar(total),
            vec![logits],
            Box::new(SoftmaxCrossEntropy {
                width,
                labels,
                weights,
            }),
        ))
    }

    /// `Σ wᵢ · smoothL1(predᵢ − targetᵢ)`.
    pub fn smooth_l1(&mut self, pred: Var, targets: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        let x = self.value(pred).data();
        if targets.len() != x.len() || weights.len() != x.len() {
            return dim_err("smooth_l1 targets/weights do not match predictions");
        }
        let total = x
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&p, &t), &w)| w * smooth_l1(p - t))
            .sum();
        Ok(self.record(
            Tensor::scalar(total),
            vec![pred],
            Box::new(SmoothL1 { targets, weights }),
        ))
    }
}
