//! The aggregated f-average network: `J` parallel f-average branches
//! `x̃_j = f_j⁻¹(W_j f_j(x))` over the stacked learner outputs `x ∈ ℝ^{KN}`,
//! combined by a nonnegative aggregation matrix `A ∈ ℝ^{N×NJ}` and a final
//! activation `g`:
//!
//! ```text
//! x̂ = g(A · [x̃_1; …; x̃_J])
//! ```
//!
//! Each `W_j` is row-stochastic (rows on the unit simplex), which keeps every
//! branch an interpretable average: the weights say how much each learner
//! output contributes, and `A` says how much each average contributes.

mod gradients;
mod serialize;
mod train;

pub use gradients::{finite_difference_gradients, AfaGradients};
pub use serialize::ModelFormatError;
pub use train::{train, train_with_observer, TrainConfig, TrainError, TrainReport};

use crate::means::{self, MeanError, MeanKind};
use crate::simplex::RowStochasticMatrix;
use ndarray::{Array1, Array2, ArrayView1};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model shape: {0}")]
    Shape(String),
    #[error("branch {branch}: {source}")]
    Branch {
        branch: usize,
        #[source]
        source: MeanError,
    },
    #[error(transparent)]
    Mean(#[from] MeanError),
    #[error("non-finite value in {layer}")]
    NonFinite { layer: &'static str },
    #[error("stacked input invalid: {0}")]
    InvalidInput(String),
    #[error("target class {target} out of range for {n_classes} classes")]
    TargetOutOfRange { target: usize, n_classes: usize },
    #[error("gradients are defined for the softmax activation")]
    RequiresSoftmax,
}

/// Output activation `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Softmax: outputs a probability vector, used for classification.
    Softmax,
    /// Identity: raw aggregate, exposes the averages directly.
    Identity,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Softmax => "softmax",
            Activation::Identity => "identity",
        }
    }
}

/// Column-wise concatenation of `K` learner prediction vectors of length `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedInput(Array1<f64>);

impl StackedInput {
    /// Builds a stacked input from `K·N` values, checking that every
    /// component lies in `[0, 1]` and each `N`-block sums to 1 within 1e-6.
    pub fn new(values: Vec<f64>, n_classes: usize) -> Result<Self, ModelError> {
        if n_classes == 0 || values.is_empty() || values.len() % n_classes != 0 {
            return Err(ModelError::InvalidInput(format!(
                "length {} is not a positive multiple of N = {}",
                values.len(),
                n_classes
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || !(-means::DOMAIN_SLACK..=1.0 + means::DOMAIN_SLACK).contains(&v) {
                return Err(ModelError::InvalidInput(format!(
                    "component {i} = {v} outside [0, 1]"
                )));
            }
        }
        for (k, block) in values.chunks(n_classes).enumerate() {
            let sum: f64 = block.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(ModelError::InvalidInput(format!(
                    "block {k} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(StackedInput(Array1::from(
            values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect::<Vec<_>>(),
        )))
    }

    /// Stacks `K` prediction vectors of equal length.
    pub fn from_blocks(blocks: &[Vec<f64>]) -> Result<Self, ModelError> {
        if blocks.is_empty() {
            return Err(ModelError::InvalidInput("no blocks".into()));
        }
        let n = blocks[0].len();
        if blocks.iter().any(|b| b.len() != n) {
            return Err(ModelError::InvalidInput("blocks of unequal length".into()));
        }
        Self::new(blocks.concat(), n)
    }

    /// Wraps raw values without the probability-vector checks. Domain
    /// validation still happens inside the conjugation functions.
    pub fn raw(values: Vec<f64>) -> Self {
        StackedInput(Array1::from(values))
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("stacked input is contiguous")
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One f-average branch: a mean family plus its row-stochastic mixing matrix
/// of shape `N × K·N`.
#[derive(Debug, Clone)]
pub struct FAverageBranch {
    kind: MeanKind,
    weights: Array2<f64>,
}

impl FAverageBranch {
    pub fn new(kind: MeanKind, weights: RowStochasticMatrix) -> Result<Self, ModelError> {
        kind.validate()?;
        let weights = weights.into_matrix();
        let (n, kn) = weights.dim();
        if n == 0 || kn == 0 || kn % n != 0 {
            return Err(ModelError::Shape(format!(
                "branch weights {n}×{kn}: columns must be a positive multiple of rows"
            )));
        }
        Ok(FAverageBranch { kind, weights })
    }

    pub fn kind(&self) -> MeanKind {
        self.kind
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// `f⁻¹(W · f(x))`.
    pub fn forward(&self, x: &StackedInput) -> Result<Vec<f64>, MeanError> {
        let fx = means::apply_f(self.kind, x.as_slice())?;
        let v = self.weights.dot(&Array1::from(fx));
        means::apply_f_inv(self.kind, v.as_slice().expect("contiguous"))
    }
}

/// The full network: branches, aggregation matrix and output activation.
#[derive(Debug, Clone)]
pub struct AfaNetwork {
    n_classes: usize,
    n_learners: usize,
    branches: Vec<FAverageBranch>,
    aggregation: Array2<f64>,
    activation: Activation,
}

impl AfaNetwork {
    /// Assembles a network from parts, validating shape agreement and the
    /// nonnegativity of the aggregation matrix.
    pub fn new(
        branches: Vec<FAverageBranch>,
        aggregation: Array2<f64>,
        activation: Activation,
        n_learners: usize,
    ) -> Result<Self, ModelError> {
        if branches.is_empty() {
            return Err(ModelError::Shape("need at least one branch".into()));
        }
        let n_classes = branches[0].weights.nrows();
        let kn = n_classes * n_learners;
        for (j, b) in branches.iter().enumerate() {
            if b.weights.dim() != (n_classes, kn) {
                return Err(ModelError::Shape(format!(
                    "branch {j} weights are {:?}, expected ({n_classes}, {kn})",
                    b.weights.dim()
                )));
            }
        }
        let nj = n_classes * branches.len();
        if aggregation.dim() != (n_classes, nj) {
            return Err(ModelError::Shape(format!(
                "aggregation is {:?}, expected ({n_classes}, {nj})",
                aggregation.dim()
            )));
        }
        if aggregation.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(ModelError::Shape(
                "aggregation entries must be finite and nonnegative".into(),
            ));
        }
        Ok(AfaNetwork {
            n_classes,
            n_learners,
            branches,
            aggregation,
            activation,
        })
    }

    /// Uniform block-identity initialization: `W_j = (1/K)[I_N | … | I_N]`
    /// and `A = (1/J)[I_N | … | I_N]`, so the untrained network is exactly
    /// the plain average of its branch means (and, with a single arithmetic
    /// branch and identity activation, the uniform arithmetic mean of the
    /// learner outputs).
    pub fn uniform(
        n_classes: usize,
        n_learners: usize,
        kinds: &[MeanKind],
        activation: Activation,
    ) -> Result<Self, ModelError> {
        if n_classes == 0 || n_learners == 0 || kinds.is_empty() {
            return Err(ModelError::Shape(
                "need n ≥ 1, k ≥ 1 and at least one mean kind".into(),
            ));
        }
        let j_total = kinds.len();
        let mut branches = Vec::with_capacity(j_total);
        for &kind in kinds {
            kind.validate()?;
            let mut w = Array2::zeros((n_classes, n_classes * n_learners));
            for i in 0..n_classes {
                for k in 0..n_learners {
                    w[(i, k * n_classes + i)] = 1.0 / n_learners as f64;
                }
            }
            branches.push(FAverageBranch { kind, weights: w });
        }
        let mut a = Array2::zeros((n_classes, n_classes * j_total));
        for i in 0..n_classes {
            for j in 0..j_total {
                a[(i, j * n_classes + i)] = 1.0 / j_total as f64;
            }
        }
        AfaNetwork::new(branches, a, activation, n_learners)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_learners(&self) -> usize {
        self.n_learners
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn branches(&self) -> &[FAverageBranch] {
        &self.branches
    }

    pub fn aggregation(&self) -> &Array2<f64> {
        &self.aggregation
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Number of trainable entries: `J·N²·(K+1)`.
    pub fn param_count(&self) -> usize {
        self.branches.len() * self.n_classes * self.n_classes * (self.n_learners + 1)
    }

    /// Output of branch `j` alone.
    pub fn branch_forward(&self, j: usize, x: &StackedInput) -> Result<Vec<f64>, ModelError> {
        self.check_input(x)?;
        self.branches[j]
            .forward(x)
            .map_err(|source| ModelError::Branch { branch: j, source })
    }

    /// Full forward pass `g(A · [x̃_1; …; x̃_J])`.
    pub fn forward(&self, x: &StackedInput) -> Result<Vec<f64>, ModelError> {
        let (_, _, _, out) = self.forward_cached(x)?;
        Ok(out.to_vec())
    }

    fn check_input(&self, x: &StackedInput) -> Result<(), ModelError> {
        let expected = self.n_classes * self.n_learners;
        if x.len() != expected {
            return Err(ModelError::InvalidInput(format!(
                "stacked input has length {}, expected K·N = {expected}",
                x.len()
            )));
        }
        Ok(())
    }

    // Forward pass retaining the per-branch intermediates needed by backprop:
    // (f_j(x), clamped W_j·f_j(x), concatenated branch outputs, activation output).
    pub(crate) fn forward_cached(
        &self,
        x: &StackedInput,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Array1<f64>, Array1<f64>), ModelError> {
        self.check_input(x)?;
        let n = self.n_classes;
        let mut f_values = Vec::with_capacity(self.branches.len());
        let mut pre_inverse = Vec::with_capacity(self.branches.len());
        let mut concat = Array1::zeros(n * self.branches.len());

        for (j, branch) in self.branches.iter().enumerate() {
            let wrap = |source| ModelError::Branch { branch: j, source };
            let fx = means::apply_f(branch.kind, x.as_slice()).map_err(wrap)?;
            let mut v = branch
                .weights
                .dot(&ArrayView1::from(&fx))
                .to_vec();
            means::clamp_inv_domain(branch.kind, &mut v).map_err(wrap)?;
            let xt = means::apply_f_inv(branch.kind, &v).map_err(wrap)?;
            for (i, &val) in xt.iter().enumerate() {
                if !val.is_finite() {
                    return Err(ModelError::NonFinite { layer: "branch inverse" });
                }
                concat[j * n + i] = val;
            }
            f_values.push(fx);
            pre_inverse.push(v);
        }

        let z = self.aggregation.dot(&concat);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { layer: "aggregation" });
        }
        let out = match self.activation {
            Activation::Identity => z,
            Activation::Softmax => softmax(&z),
        };
        Ok((f_values, pre_inverse, concat, out))
    }

    /// Cross-entropy loss `−ln x̂_target` under the softmax activation.
    pub fn loss(&self, x: &StackedInput, target: usize) -> Result<f64, ModelError> {
        if self.activation != Activation::Softmax {
            return Err(ModelError::RequiresSoftmax);
        }
        if target >= self.n_classes {
            return Err(ModelError::TargetOutOfRange {
                target,
                n_classes: self.n_classes,
            });
        }
        let (_, _, _, p) = self.forward_cached(x)?;
        let l = -(p[target].max(f64::MIN_POSITIVE)).ln();
        if !l.is_finite() {
            return Err(ModelError::NonFinite { layer: "loss" });
        }
        Ok(l)
    }

    pub(crate) fn branch_weights_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.branches.iter_mut().map(|b| &mut b.weights)
    }

    pub(crate) fn aggregation_mut(&mut self) -> &mut Array2<f64> {
        &mut self.aggregation
    }
}

pub(crate) fn softmax(z: &Array1<f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps = z.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::means::{closed_form_mean, SimplexWeights};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use ndarray::Array2;

    fn stacked(values: &[f64]) -> StackedInput {
        StackedInput::raw(values.to_vec())
    }

    #[test]
    fn uniform_single_arithmetic_is_plain_mean() {
        let net = AfaNetwork::uniform(2, 2, &[MeanKind::Arithmetic], Activation::Identity).unwrap();
        let out = net.forward(&stacked(&[0.2, 0.8, 0.6, 0.4])).unwrap();
        assert_abs_diff_eq!(out[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.6, epsilon = 1e-15);
    }

    #[test]
    fn uniform_single_learner_is_passthrough() {
        let net = AfaNetwork::uniform(2, 1, &[MeanKind::Arithmetic], Activation::Identity).unwrap();
        let x = [0.3, 0.7];
        let out = net.forward(&stacked(&x)).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn uniform_duplicate_branches_average_to_same() {
        let net = AfaNetwork::uniform(
            2,
            2,
            &[MeanKind::Arithmetic, MeanKind::Arithmetic],
            Activation::Identity,
        )
        .unwrap();
        let out = net.forward(&stacked(&[0.2, 0.8, 0.6, 0.4])).unwrap();
        assert_abs_diff_eq!(out[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.6, epsilon = 1e-15);
    }

    #[test]
    fn branch_forward_matches_closed_form_oracles() {
        // geometric branch at tiny ε ≈ the exact geometric mean
        let net = AfaNetwork::uniform(
            1,
            2,
            &[MeanKind::Geometric { epsilon: 1e-8 }],
            Activation::Identity,
        )
        .unwrap();
        let out = net.branch_forward(0, &stacked(&[4.0, 1.0])).unwrap();
        assert_relative_eq!(out[0], 2.0, max_relative = 1e-4);

        let net = AfaNetwork::uniform(
            1,
            2,
            &[MeanKind::Harmonic { epsilon: 1e-8 }],
            Activation::Identity,
        )
        .unwrap();
        let out = net
            .branch_forward(0, &stacked(&[1.0, 1.0 / 3.0]))
            .unwrap();
        assert_relative_eq!(out[0], 0.5, max_relative = 1e-4);
    }

    #[test]
    fn aggregation_can_select_a_single_branch() {
        // indicator rows on the middle (geometric) branch block
        let n = 3;
        let kinds = [
            MeanKind::Arithmetic,
            MeanKind::Geometric { epsilon: 1e-8 },
            MeanKind::Harmonic { epsilon: 1e-8 },
        ];
        let mut net = AfaNetwork::uniform(n, 2, &kinds, Activation::Identity).unwrap();
        let mut a = Array2::zeros((n, n * 3));
        for i in 0..n {
            a[(i, n + i)] = 1.0;
        }
        net.aggregation = a;

        let x1 = vec![0.5, 0.2, 0.9];
        let x2 = vec![0.1, 0.6, 0.4];
        let out = net
            .forward(&StackedInput::raw([x1.clone(), x2.clone()].concat()))
            .unwrap();
        let oracle = closed_form_mean(
            MeanKind::Geometric { epsilon: 1e-8 },
            &SimplexWeights::uniform(2),
            &[x1, x2],
        )
        .unwrap();
        for (a, b) in out.iter().zip(&oracle) {
            assert_relative_eq!(a, b, max_relative = 1e-4);
        }
    }

    #[test]
    fn softmax_output_is_probability_vector() {
        let kinds = [MeanKind::Arithmetic, MeanKind::Harmonic { epsilon: 1e-3 }];
        let net = AfaNetwork::uniform(2, 2, &kinds, Activation::Softmax).unwrap();
        let out = net.forward(&stacked(&[0.2, 0.8, 0.6, 0.4])).unwrap();
        let sum: f64 = out.iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
        assert!(out.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn branch_outputs_stay_in_unit_interval() {
        let kinds = [
            MeanKind::Arithmetic,
            MeanKind::Geometric { epsilon: 1e-3 },
            MeanKind::Harmonic { epsilon: 1e-3 },
            MeanKind::PowerQ { q: 2.0 },
        ];
        let net = AfaNetwork::uniform(3, 2, &kinds, Activation::Identity).unwrap();
        let mut rng = {
            use rand::SeedableRng;
            rand_chacha::ChaCha8Rng::seed_from_u64(21)
        };
        for _ in 0..200 {
            use rand::Rng;
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..=1.0)).collect();
            let x = StackedInput::raw(x);
            for j in 0..net.n_branches() {
                let out = net.branch_forward(j, &x).unwrap();
                for &v in &out {
                    assert!(
                        (-1e-9..=1.0 + 1e-9).contains(&v),
                        "branch {j} output {v} escaped [0, 1]"
                    );
                }
            }
        }
    }

    #[test]
    fn param_count_formula() {
        let kinds3 = [
            MeanKind::Arithmetic,
            MeanKind::Geometric { epsilon: 1e-3 },
            MeanKind::Harmonic { epsilon: 1e-3 },
        ];
        let net = AfaNetwork::uniform(100, 9, &kinds3, Activation::Softmax).unwrap();
        assert_eq!(net.param_count(), 300_000);

        let net = AfaNetwork::uniform(1, 1, &[MeanKind::Arithmetic], Activation::Softmax).unwrap();
        assert_eq!(net.param_count(), 2);

        let net = AfaNetwork::uniform(
            3,
            4,
            &[MeanKind::Arithmetic, MeanKind::PowerQ { q: 2.0 }],
            Activation::Softmax,
        )
        .unwrap();
        assert_eq!(net.param_count(), 90);
    }

    #[test]
    fn stacked_input_validation() {
        assert!(StackedInput::new(vec![0.3, 0.7, 0.5, 0.5], 2).is_ok());
        // block that does not sum to one
        assert!(StackedInput::new(vec![0.3, 0.3, 0.5, 0.5], 2).is_err());
        // component out of [0, 1]
        assert!(StackedInput::new(vec![1.4, -0.4], 2).is_err());
        // length not a multiple of N
        assert!(StackedInput::new(vec![0.5, 0.5, 1.0], 2).is_err());
        // tiny negative drift is clamped
        let x = StackedInput::new(vec![-1e-12, 1.0 + 1e-13], 2).unwrap();
        assert!(x.as_slice()[0] >= 0.0);
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let net = AfaNetwork::uniform(2, 2, &[MeanKind::Arithmetic], Activation::Softmax).unwrap();
        assert!(net.forward(&stacked(&[0.1, 0.9])).is_err());
    }

    #[test]
    fn construction_rejects_mismatched_shapes() {
        let branch = FAverageBranch {
            kind: MeanKind::Arithmetic,
            weights: Array2::from_elem((2, 4), 0.25),
        };
        // aggregation of the wrong width
        let a = Array2::from_elem((2, 3), 0.5);
        assert!(AfaNetwork::new(vec![branch.clone()], a, Activation::Softmax, 2).is_err());
        // negative aggregation entry
        let mut a = Array2::from_elem((2, 2), 0.5);
        a[(0, 0)] = -0.1;
        assert!(AfaNetwork::new(vec![branch], a, Activation::Softmax, 2).is_err());
    }
}
