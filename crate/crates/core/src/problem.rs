//! Drift coefficients and the assembled control problem.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::cost::CostSpec;
use crate::field::MartingaleField;

type VecFn = dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
type MatFn = dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Drift `b(t, x, u)` with Jacobians `b_x` (d x d) and `b_u` (d x k).
#[derive(Clone)]
pub struct Drift {
    eval: Arc<VecFn>,
    grad_x: Arc<MatFn>,
    grad_u: Arc<MatFn>,
}

impl Drift {
    pub fn new(
        eval: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        grad_x: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        grad_u: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Drift {
            eval: Arc::new(eval),
            grad_x: Arc::new(grad_x),
            grad_u: Arc::new(grad_u),
        }
    }

    /// `b = A x + B u`.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        let a1 = a.clone();
        let b1 = b.clone();
        Drift::new(
            move |_, x, u| &a * x + &b * u,
            move |_, _, _| a1.clone(),
            move |_, _, _| b1.clone(),
        )
    }

    pub fn zero(state_dim: usize, control_dim: usize) -> Self {
        Drift::linear(
            DMatrix::zeros(state_dim, state_dim),
            DMatrix::zeros(state_dim, control_dim),
        )
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.eval)(t, x, u)
    }

    pub fn grad_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        (self.grad_x)(t, x, u)
    }

    pub fn grad_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        (self.grad_u)(t, x, u)
    }
}

/// A complete control problem: dynamics, noise field, cost, initial state.
#[derive(Clone)]
pub struct ControlProblem {
    pub field: MartingaleField,
    pub drift: Drift,
    pub cost: CostSpec,
    pub x0: DVector<f64>,
    /// User-declared convexity of the Hamiltonian and terminal cost; gates
    /// the sufficiency check.
    pub convex: bool,
}

impl ControlProblem {
    pub fn state_dim(&self) -> usize {
        self.field.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.field.control_dim()
    }
}
