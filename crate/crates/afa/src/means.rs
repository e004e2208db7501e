//! Generalized (Kolmogorov) means: component-wise conjugation functions `f` /
//! `f⁻¹` for each mean family, plus the closed-form weighted means used as
//! oracles when testing the conjugated path.
//!
//! A generalized weighted mean is `f⁻¹(Σ ω_k f(x_k))`. The arithmetic mean
//! uses the identity; the geometric mean `ln(ξ+ε)` / `exp(ξ)−ε`; the harmonic
//! mean the leaky hyperbolic involution `h_ε`; power-q uses `ξ^q` / `ξ^(1/q)`.
//! Exact geometric and harmonic means are recovered as `ε → 0`.

use thiserror::Error;

/// Slack under which marginal domain violations (floating-point drift such as
/// `-1e-17` left over from softmax arithmetic) are clamped instead of rejected.
pub const DOMAIN_SLACK: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MeanError {
    #[error("component {index} = {value} outside {family} domain")]
    OutOfDomain {
        family: &'static str,
        index: usize,
        value: f64,
    },
    #[error("epsilon must lie in (0, 1), got {0}")]
    InvalidEpsilon(f64),
    #[error("exponent q must be positive, got {0}")]
    InvalidExponent(f64),
    #[error("weights must be nonnegative and sum to 1 within 1e-9 (sum = {sum})")]
    InvalidWeights { sum: f64 },
    #[error("expected {expected} input vectors of length {len}, got vector {index} of length {got}")]
    LengthMismatch {
        expected: usize,
        len: usize,
        index: usize,
        got: usize,
    },
    #[error("no input vectors given")]
    Empty,
}

/// Choice of conjugation function `f`, selecting the mean family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeanKind {
    Arithmetic,
    /// `f(ξ) = ln(ξ + ε)`, `f⁻¹(ξ) = exp(ξ) − ε`.
    Geometric { epsilon: f64 },
    /// `f = f⁻¹ = h_ε`, the leaky hyperbolic involution.
    Harmonic { epsilon: f64 },
    /// `f(ξ) = ξ^q`, `f⁻¹(ξ) = ξ^(1/q)`.
    PowerQ { q: f64 },
}

impl MeanKind {
    pub fn geometric(epsilon: f64) -> Result<Self, MeanError> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(MeanError::InvalidEpsilon(epsilon));
        }
        Ok(MeanKind::Geometric { epsilon })
    }

    pub fn harmonic(epsilon: f64) -> Result<Self, MeanError> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(MeanError::InvalidEpsilon(epsilon));
        }
        Ok(MeanKind::Harmonic { epsilon })
    }

    pub fn power_q(q: f64) -> Result<Self, MeanError> {
        if !(q > 0.0 && q.is_finite()) {
            return Err(MeanError::InvalidExponent(q));
        }
        Ok(MeanKind::PowerQ { q })
    }

    /// Checks the ε / q invariants of the variant.
    pub fn validate(&self) -> Result<(), MeanError> {
        match *self {
            MeanKind::Arithmetic => Ok(()),
            MeanKind::Geometric { epsilon } | MeanKind::Harmonic { epsilon } => {
                if epsilon > 0.0 && epsilon < 1.0 {
                    Ok(())
                } else {
                    Err(MeanError::InvalidEpsilon(epsilon))
                }
            }
            MeanKind::PowerQ { q } => {
                if q > 0.0 && q.is_finite() {
                    Ok(())
                } else {
                    Err(MeanError::InvalidExponent(q))
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MeanKind::Arithmetic => "arithmetic",
            MeanKind::Geometric { .. } => "geometric",
            MeanKind::Harmonic { .. } => "harmonic",
            MeanKind::PowerQ { .. } => "power-q",
        }
    }
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn new(w: Vec<f64>) -> Result<Self, MeanError> {
        let sum: f64 = w.iter().sum();
        if w.iter().any(|&x| x < 0.0 || !x.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(MeanError::InvalidWeights { sum });
        }
        Ok(SimplexWeights(w))
    }

    /// `K` equal weights `1/K`.
    pub fn uniform(k: usize) -> Self {
        assert!(k > 0, "need at least one weight");
        SimplexWeights(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The leaky hyperbolic function `h_ε`, a continuous involution on ℝ that
/// stands in for `ξ ↦ 1/ξ` while staying defined at zero:
///
/// ```text
/// h_ε(ξ) = 1/(ξ+ε) − ε          for ξ ∈ [0, 1/ε − ε]
///        = −ξ/ε² + 1/ε − ε      for ξ < 0
///        = −ε²(ξ − 1/ε + ε)     for ξ > 1/ε − ε
/// ```
pub fn leaky_hyperbolic(epsilon: f64, xi: f64) -> f64 {
    let joint = 1.0 / epsilon - epsilon;
    if xi < 0.0 {
        -xi / (epsilon * epsilon) + joint
    } else if xi <= joint {
        1.0 / (xi + epsilon) - epsilon
    } else {
        -(epsilon * epsilon) * (xi - joint)
    }
}

/// Derivative of `h_ε`. The three branch derivatives coincide at both joints
/// (`−1/ε²` at 0, `−ε²` at `1/ε − ε`), so the middle-branch value is used
/// there without introducing a jump.
pub fn leaky_hyperbolic_deriv(epsilon: f64, xi: f64) -> f64 {
    let joint = 1.0 / epsilon - epsilon;
    if xi < 0.0 {
        -1.0 / (epsilon * epsilon)
    } else if xi <= joint {
        let s = xi + epsilon;
        -1.0 / (s * s)
    } else {
        -(epsilon * epsilon)
    }
}

// Clamp values marginally below `lo` back to `lo`; anything further out is a
// genuine domain violation.
fn check_lower(family: &'static str, x: &[f64], lo: f64) -> Result<(), MeanError> {
    for (index, &value) in x.iter().enumerate() {
        if !value.is_finite() || value < lo - DOMAIN_SLACK {
            return Err(MeanError::OutOfDomain {
                family,
                index,
                value,
            });
        }
    }
    Ok(())
}

fn check_upper(family: &'static str, x: &[f64], hi: f64) -> Result<(), MeanError> {
    for (index, &value) in x.iter().enumerate() {
        if !value.is_finite() || value > hi + DOMAIN_SLACK {
            return Err(MeanError::OutOfDomain {
                family,
                index,
                value,
            });
        }
    }
    Ok(())
}

/// Component-wise application of `f`.
///
/// Domain is `[0, ∞)` for arithmetic, geometric and power-q inputs (violations
/// within [`DOMAIN_SLACK`] are clamped to 0); `h_ε` accepts all of ℝ.
pub fn apply_f(kind: MeanKind, x: &[f64]) -> Result<Vec<f64>, MeanError> {
    kind.validate()?;
    match kind {
        MeanKind::Arithmetic => {
            check_lower("arithmetic", x, 0.0)?;
            Ok(x.iter().map(|&v| v.max(0.0)).collect())
        }
        MeanKind::Geometric { epsilon } => {
            check_lower("geometric", x, 0.0)?;
            Ok(x.iter().map(|&v| (v.max(0.0) + epsilon).ln()).collect())
        }
        MeanKind::Harmonic { epsilon } => {
            for (index, &value) in x.iter().enumerate() {
                if !value.is_finite() {
                    return Err(MeanError::OutOfDomain {
                        family: "harmonic",
                        index,
                        value,
                    });
                }
            }
            Ok(x.iter().map(|&v| leaky_hyperbolic(epsilon, v)).collect())
        }
        MeanKind::PowerQ { q } => {
            check_lower("power-q", x, 0.0)?;
            Ok(x.iter().map(|&v| v.max(0.0).powf(q)).collect())
        }
    }
}

/// Component-wise application of `f⁻¹`.
///
/// Inverse domains: arithmetic and power-q `[0, ∞)`, geometric `[ln ε, ∞)`,
/// harmonic `(−∞, 1/ε − ε]`. Marginal violations are clamped to the boundary.
pub fn apply_f_inv(kind: MeanKind, y: &[f64]) -> Result<Vec<f64>, MeanError> {
    kind.validate()?;
    match kind {
        MeanKind::Arithmetic => {
            check_lower("arithmetic inverse", y, 0.0)?;
            Ok(y.iter().map(|&v| v.max(0.0)).collect())
        }
        MeanKind::Geometric { epsilon } => {
            let lo = epsilon.ln();
            check_lower("geometric inverse", y, lo)?;
            Ok(y.iter().map(|&v| v.max(lo).exp() - epsilon).collect())
        }
        MeanKind::Harmonic { epsilon } => {
            let hi = 1.0 / epsilon - epsilon;
            check_upper("harmonic inverse", y, hi)?;
            Ok(y
                .iter()
                .map(|&v| leaky_hyperbolic(epsilon, v.min(hi)))
                .collect())
        }
        MeanKind::PowerQ { q } => {
            check_lower("power-q inverse", y, 0.0)?;
            Ok(y.iter().map(|&v| v.max(0.0).powf(1.0 / q)).collect())
        }
    }
}

// Clamps `y` in place to the f⁻¹ domain so that a value and the derivative
// taken at it stay consistent; rejects violations beyond `DOMAIN_SLACK`.
pub(crate) fn clamp_inv_domain(kind: MeanKind, y: &mut [f64]) -> Result<(), MeanError> {
    match kind {
        MeanKind::Arithmetic => {
            check_lower("arithmetic inverse", y, 0.0)?;
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        MeanKind::Geometric { epsilon } => {
            let lo = epsilon.ln();
            check_lower("geometric inverse", y, lo)?;
            y.iter_mut().for_each(|v| *v = v.max(lo));
        }
        MeanKind::Harmonic { epsilon } => {
            let hi = 1.0 / epsilon - epsilon;
            check_upper("harmonic inverse", y, hi)?;
            y.iter_mut().for_each(|v| *v = v.min(hi));
        }
        MeanKind::PowerQ { .. } => {
            check_lower("power-q inverse", y, 0.0)?;
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    Ok(())
}

/// Derivative of `f⁻¹` evaluated component-wise, used by backpropagation.
pub(crate) fn f_inv_deriv(kind: MeanKind, y: &[f64]) -> Vec<f64> {
    match kind {
        MeanKind::Arithmetic => vec![1.0; y.len()],
        MeanKind::Geometric { .. } => y.iter().map(|&v| v.exp()).collect(),
        MeanKind::Harmonic { epsilon } => y
            .iter()
            .map(|&v| leaky_hyperbolic_deriv(epsilon, v))
            .collect(),
        MeanKind::PowerQ { q } => y
            .iter()
            // guards the q > 1 singularity at 0 without affecting values away from it
            .map(|&v| v.max(1e-300).powf(1.0 / q - 1.0) / q)
            .collect(),
    }
}

/// The exact weighted mean of the family, with no ε smoothing:
/// arithmetic `Σ ω_k x_k`, geometric `Π x_k^{ω_k}`, harmonic
/// `(Σ ω_k / x_k)⁻¹`, power-q `(Σ ω_k x_k^q)^{1/q}`.
///
/// Validity domains follow the classical definitions: the arithmetic mean
/// accepts any reals, geometric and power-q need nonnegative components and
/// the harmonic mean strictly positive ones.
pub fn closed_form_mean(
    kind: MeanKind,
    weights: &SimplexWeights,
    inputs: &[Vec<f64>],
) -> Result<Vec<f64>, MeanError> {
    kind.validate()?;
    if inputs.is_empty() {
        return Err(MeanError::Empty);
    }
    let len = inputs[0].len();
    for (index, v) in inputs.iter().enumerate() {
        if v.len() != len {
            return Err(MeanError::LengthMismatch {
                expected: inputs.len(),
                len,
                index,
                got: v.len(),
            });
        }
    }
    if weights.len() != inputs.len() {
        return Err(MeanError::LengthMismatch {
            expected: weights.len(),
            len,
            index: inputs.len(),
            got: inputs.len(),
        });
    }
    let w = weights.as_slice();

    match kind {
        MeanKind::Arithmetic => Ok((0..len)
            .map(|n| inputs.iter().zip(w).map(|(x, &wk)| wk * x[n]).sum())
            .collect()),
        MeanKind::Geometric { .. } => {
            for x in inputs {
                check_lower("geometric", x, 0.0)?;
            }
            Ok((0..len)
                .map(|n| {
                    inputs
                        .iter()
                        .zip(w)
                        .map(|(x, &wk)| x[n].max(0.0).powf(wk))
                        .product()
                })
                .collect())
        }
        MeanKind::Harmonic { .. } => {
            for (k, x) in inputs.iter().enumerate() {
                for (n, &value) in x.iter().enumerate() {
                    if !(value > 0.0) || !value.is_finite() {
                        return Err(MeanError::OutOfDomain {
                            family: "harmonic",
                            index: k * len + n,
                            value,
                        });
                    }
                }
            }
            Ok((0..len)
                .map(|n| {
                    let s: f64 = inputs.iter().zip(w).map(|(x, &wk)| wk / x[n]).sum();
                    1.0 / s
                })
                .collect())
        }
        MeanKind::PowerQ { q } => {
            for x in inputs {
                check_lower("power-q", x, 0.0)?;
            }
            Ok((0..len)
                .map(|n| {
                    let s: f64 = inputs
                        .iter()
                        .zip(w)
                        .map(|(x, &wk)| wk * x[n].max(0.0).powf(q))
                        .sum();
                    s.powf(1.0 / q)
                })
                .collect())
        }
    }
}
