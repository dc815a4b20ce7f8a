//! Empirical tangent kernel of the constraint terms and the weights
//! derived from its diagonal.
//!
//! For terms `T_1 … T_N*` with parameter gradients `J_k = ∂T_k/∂θ` the
//! kernel is `H_ij = ⟨J_i, J_j⟩`. Under gradient flow on
//! `(2 / N*) Σ T_k²` the linearized terms obey `dT/dt = −(4 / N*) H T`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;

use crate::constraints::{map_chunks, ConstraintTerm, OperatorDataset, TermBatch};
use crate::error::{Error, Result};
use crate::operatornet::DeepOnetParams;

/// Largest term count for which the full kernel is materialized.
pub const FULL_LIMIT: usize = 2000;

/// Relative floor applied to diagonal entries before forming weights.
pub const DIAG_FLOOR: f64 = 1e-12;

/// Anything that can produce per-term parameter gradients.
pub trait TermGradients {
    fn n_terms(&self) -> usize;

    /// `‖∂T_k/∂θ‖²` for every term.
    fn grad_sq_norms(&self) -> Result<Vec<f64>>;

    /// `[n_terms, n_params]` with rows `∂T_k/∂θ`.
    fn jacobian(&self) -> Result<Array2<f64>>;
}

/// Constraint terms of a DeepONet model.
pub struct TermSet<'a> {
    pub model: &'a DeepOnetParams,
    pub terms: &'a [ConstraintTerm],
    pub dataset: &'a OperatorDataset,
    pub viscosity: f64,
}

impl TermGradients for TermSet<'_> {
    fn n_terms(&self) -> usize {
        self.terms.len()
    }

    fn grad_sq_norms(&self) -> Result<Vec<f64>> {
        let parts = map_chunks(self.terms, |c| {
            TermBatch::build(self.model, c, self.dataset, self.viscosity, true)?.grad_sq_norms()
        })?;
        Ok(parts.concat())
    }

    fn jacobian(&self) -> Result<Array2<f64>> {
        let parts = map_chunks(self.terms, |c| {
            TermBatch::build(self.model, c, self.dataset, self.viscosity, true)?.jacobian()
        })?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| Error::Numerical(format!("jacobian assembly: {e}")))
    }
}

/// Kernel diagonal `H_kk = ‖∂T_k/∂θ‖²`.
pub fn ntk_diag(src: &impl TermGradients) -> Result<Vec<f64>> {
    let d = src.grad_sq_norms()?;
    if let Some(k) = d.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient for term {k}")));
    }
    Ok(d)
}

/// Full kernel `J Jᵀ`, exactly symmetric.
pub fn ntk_full(src: &impl TermGradients) -> Result<Array2<f64>> {
    let n = src.n_terms();
    if n > FULL_LIMIT {
        return Err(Error::Size {
            n,
            limit: FULL_LIMIT,
        });
    }
    let j = src.jacobian()?;
    if let Some((k, _)) = j.rows().into_iter().enumerate().find(|(_, r)| !r.iter().all(|v| v.is_finite())) {
        return Err(Error::Numerical(format!("non-finite gradient for term {k}")));
    }
    Ok(gram(&j))
}

fn gram(j: &Array2<f64>) -> Array2<f64> {
    let n = j.nrows();
    let mut h = Array2::zeros((n, n));
    for a in 0..n {
        let ra = j.row(a);
        for b in a..n {
            let v = ra.dot(&j.row(b));
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    pub lambdas: Vec<f64>,
    pub alpha: f64,
    pub last_update_step: usize,
    /// Diagonal entries raised to the floor at the last update.
    pub clamped: usize,
}

impl WeightState {
    pub fn uniform(n: usize) -> Self {
        Self {
            lambdas: vec![1.0; n],
            alpha: 0.0,
            last_update_step: 0,
            clamped: 0,
        }
    }
}

/// `λ_k = (max_j H_jj / H_kk)^α`, with `H_kk` raised to at least
/// `1e-12 · max_j H_jj`.
pub fn ntk_weights(diag: &[f64], alpha: f64) -> Result<WeightState> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    if let Some(k) = diag.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numerical(format!(
            "invalid kernel diagonal entry {} for term {k}",
            diag[k]
        )));
    }
    let max = diag.iter().copied().fold(0.0, f64::max);
    let floor = DIAG_FLOOR * max;
    let mut clamped = 0;
    let lambdas = diag
        .iter()
        .map(|&h| {
            if max == 0.0 || alpha == 0.0 {
                return 1.0;
            }
            let h = if h < floor {
                clamped += 1;
                floor
            } else {
                h
            };
            let r = max / h;
            if alpha == 1.0 {
                r
            } else if alpha == 0.5 {
                r.sqrt()
            } else {
                r.powf(alpha)
            }
        })
        .collect();
    Ok(WeightState {
        lambdas,
        alpha,
        last_update_step: 0,
        clamped,
    })
}

fn to_dmatrix(h: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)])
}

fn check_symmetric(h: &Array2<f64>) -> Result<()> {
    if h.nrows() != h.ncols() {
        return Err(Error::Shape {
            context: "kernel matrix",
            expected: h.nrows(),
            got: h.ncols(),
        });
    }
    let scale = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..h.nrows() {
        for j in 0..i {
            if (h[(i, j)] - h[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Numerical(format!(
                    "kernel matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

fn eigen(h: &Array2<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    check_symmetric(h)?;
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("kernel matrix has non-finite entries".into()));
    }
    let e = SymmetricEigen::try_new(to_dmatrix(h), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("eigendecomposition did not converge".into()))?;
    Ok(e)
}

/// Solution of `dT/dt = −(4 / N*) H T` at time `t`.
pub fn predict_linear_dynamics(h: &Array2<f64>, t0: &[f64], t: f64, n_star: usize) -> Result<Vec<f64>> {
    if t0.len() != h.nrows() {
        return Err(Error::Shape {
            context: "initial term vector",
            expected: h.nrows(),
            got: t0.len(),
        });
    }
    if t == 0.0 {
        return Ok(t0.to_vec());
    }
    let e = eigen(h)?;
    let q = &e.eigenvectors;
    let coef = q.transpose() * DVector::from_column_slice(t0);
    let rate = 4.0 / n_star as f64;
    let decayed = DVector::from_fn(coef.len(), |i, _| coef[i] * (-rate * e.eigenvalues[i] * t).exp());
    Ok((q * decayed).iter().copied().collect())
}

/// Eigenvalues in descending order.
pub fn ntk_spectrum(h: &Array2<f64>) -> Result<Vec<f64>> {
    let e = eigen(h)?;
    let mut ev: Vec<f64> = e.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    Ok(ev)
}
