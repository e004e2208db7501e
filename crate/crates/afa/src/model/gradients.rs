//! Analytic gradients of the cross-entropy loss with respect to every branch
//! weight matrix and the aggregation matrix, plus a central finite-difference
//! oracle used to verify them.
//!
//! With `φ_j = f_j(x)`, `v_j = W_j φ_j`, `x̃_j = f_j⁻¹(v_j)`, `u = [x̃_1; …]`,
//! `z = A u`, `p = softmax(z)` and `L = −ln p_t`, the chain rule gives
//!
//! ```text
//! ∂L/∂z  = p − e_t
//! ∂L/∂A  = (p − e_t) uᵀ
//! ∂L/∂u  = Aᵀ (p − e_t)
//! ∂L/∂v_j = (∂L/∂u)_j ⊙ (f_j⁻¹)'(v_j)
//! ∂L/∂W_j = ∂L/∂v_j φ_jᵀ
//! ```

use super::{Activation, AfaNetwork, ModelError, StackedInput};
use crate::means;
use ndarray::{Array1, Array2};

/// Gradient of the loss with respect to each `W_j` and to `A`, in the same
/// shapes as the parameters themselves.
#[derive(Debug, Clone)]
pub struct AfaGradients {
    pub branch_weights: Vec<Array2<f64>>,
    pub aggregation: Array2<f64>,
}

impl AfaGradients {
    pub fn zeros_like(model: &AfaNetwork) -> Self {
        AfaGradients {
            branch_weights: model
                .branches
                .iter()
                .map(|b| Array2::zeros(b.weights.raw_dim()))
                .collect(),
            aggregation: Array2::zeros(model.aggregation.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &AfaGradients) {
        for (a, b) in self.branch_weights.iter_mut().zip(&other.branch_weights) {
            *a += b;
        }
        self.aggregation += &other.aggregation;
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.branch_weights {
            w.mapv_inplace(|v| v * factor);
        }
        self.aggregation.mapv_inplace(|v| v * factor);
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        for w in &self.branch_weights {
            s += w.iter().map(|v| v * v).sum::<f64>();
        }
        s += self.aggregation.iter().map(|v| v * v).sum::<f64>();
        s.sqrt()
    }

    /// Worst-case entry disagreement `|a − b| / max(|a|, |b|, 1e-3)`. The
    /// floor keeps near-zero entries compared absolutely, where central
    /// differences bottom out on cancellation noise.
    pub fn max_relative_error(&self, other: &AfaGradients) -> f64 {
        fn rel(a: f64, b: f64) -> f64 {
            (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
        }
        let mut worst: f64 = 0.0;
        for (mine, theirs) in self.branch_weights.iter().zip(&other.branch_weights) {
            for (&a, &b) in mine.iter().zip(theirs.iter()) {
                worst = worst.max(rel(a, b));
            }
        }
        for (&a, &b) in self.aggregation.iter().zip(other.aggregation.iter()) {
            worst = worst.max(rel(a, b));
        }
        worst
    }
}

impl AfaNetwork {
    /// Analytic gradients of `−ln softmax(A·[x̃_j])_target`.
    pub fn gradients(&self, x: &StackedInput, target: usize) -> Result<AfaGradients, ModelError> {
        self.gradients_with_loss(x, target).map(|(g, _)| g)
    }

    pub(crate) fn gradients_with_loss(
        &self,
        x: &StackedInput,
        target: usize,
    ) -> Result<(AfaGradients, f64), ModelError> {
        if self.activation != Activation::Softmax {
            return Err(ModelError::RequiresSoftmax);
        }
        if target >= self.n_classes {
            return Err(ModelError::TargetOutOfRange {
                target,
                n_classes: self.n_classes,
            });
        }
        let n = self.n_classes;
        let (f_values, pre_inverse, concat, probs) = self.forward_cached(x)?;
        let loss = -(probs[target].max(f64::MIN_POSITIVE)).ln();
        if !loss.is_finite() {
            return Err(ModelError::NonFinite { layer: "loss" });
        }

        // ∂L/∂z = p − e_t
        let mut dz = probs;
        dz[target] -= 1.0;

        // ∂L/∂A = dz ⊗ u
        let d_aggregation = outer(&dz, &concat);

        // ∂L/∂u = Aᵀ dz, split per branch
        let du = self.aggregation.t().dot(&dz);

        let mut branch_grads = Vec::with_capacity(self.branches.len());
        for (j, branch) in self.branches.iter().enumerate() {
            let deriv = means::f_inv_deriv(branch.kind, &pre_inverse[j]);
            let mut dv = Array1::zeros(n);
            for i in 0..n {
                let g = du[j * n + i] * deriv[i];
                if !g.is_finite() {
                    return Err(ModelError::NonFinite { layer: "branch inverse" });
                }
                dv[i] = g;
            }
            branch_grads.push(outer(&dv, &Array1::from(f_values[j].clone())));
        }

        Ok((
            AfaGradients {
                branch_weights: branch_grads,
                aggregation: d_aggregation,
            },
            loss,
        ))
    }
}

fn outer(col: &Array1<f64>, row: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((col.len(), row.len()));
    for (i, &c) in col.iter().enumerate() {
        for (j, &r) in row.iter().enumerate() {
            out[(i, j)] = c * r;
        }
    }
    out
}

/// Central finite differences of the loss over every parameter entry.
/// Independent of the analytic path; the reference oracle for gradient
/// verification.
pub fn finite_difference_gradients(
    model: &AfaNetwork,
    x: &StackedInput,
    target: usize,
    step: f64,
) -> Result<AfaGradients, ModelError> {
    let mut work = model.clone();
    let mut grads = AfaGradients::zeros_like(model);

    for j in 0..model.branches.len() {
        let dim = model.branches[j].weights.raw_dim();
        for r in 0..dim[0] {
            for c in 0..dim[1] {
                let original = work.branches[j].weights[(r, c)];
                work.branches[j].weights[(r, c)] = original + step;
                let hi = work.loss(x, target)?;
                work.branches[j].weights[(r, c)] = original - step;
                let lo = work.loss(x, target)?;
                work.branches[j].weights[(r, c)] = original;
                grads.branch_weights[j][(r, c)] = (hi - lo) / (2.0 * step);
            }
        }
    }

    let dim = model.aggregation.raw_dim();
    for r in 0..dim[0] {
        for c in 0..dim[1] {
            let original = work.aggregation[(r, c)];
            work.aggregation[(r, c)] = original + step;
            let hi = work.loss(x, target)?;
            work.aggregation[(r, c)] = original - step;
            let lo = work.loss(x, target)?;
            work.aggregation[(r, c)] = original;
            grads.aggregation[(r, c)] = (hi - lo) / (2.0 * step);
        }
    }
    Ok(grads)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::means::MeanKind;
    use crate::simplex::project_rows;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub fn random_model(
        rng: &mut ChaCha8Rng,
        n: usize,
        k: usize,
        kinds: &[MeanKind),
    ) -> AfaNetwork {
        let mut net = AfaNetwork::uniform(n, k, kinds, Activation::Softmax).unwrap();
        for w in net.branch_weights_mut() {
            w.mapv_inplace(|_| rng.random_range(0.0..1.0));
            let projected = project_rows(&w.view()).unwrap();
            w.assign(projected.matrix());
        }
        net.aggregation_mut()
            .mapv_inplace(|_| rng.random_range(0.0..1.0));
        net
    }

    pub fn random_stacked(rng: &mut ChaCha8Rng, n: usize, k: usize) -> StackedInput {
        let mut blocks = Vec::with_capacity(k);
        for _ in 0..k {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            blocks.push(raw.into_iter().map(|v| v / sum).collect::<Vec<_>>());
        }
        StackedInput::from_blocks(&blocks).unwrap()
    }
}
