//! Martingale fields with spatial parameters, represented through a finite
//! factor decomposition
//!
//! ```text
//! M(dt, x, u) = sum_k sigma_k(t, x, u) dW^k_t .
//! ```
//!
//! The local characteristic is never stored; it is recomputed from the
//! factors as `q_{ij}(t,x,u,y,v) = sum_k sigma_k^i(t,x,u) sigma_k^j(t,y,v)`,
//! which makes the transpose symmetry `q(t,x,u,y,v) = q*(t,y,v,x,u)` and the
//! positive semidefiniteness of `q(t,x,u,x,u)` hold by construction.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

type EvalFn = dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
type GradFn = dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// One diffusion factor `sigma_k : (t, x, u) -> R^d` together with its
/// Jacobians in `x` (d x d) and `u` (d x k).
#[derive(Clone)]
pub struct SigmaFactor {
    eval: Arc<EvalFn>,
    grad_x: Arc<GradFn>,
    grad_u: Arc<GradFn>,
    fd_gradients: bool,
}

/// Relative step used by the finite-difference fallback Jacobians.
const FD_STEP: f64 = 1e-6;

impl SigmaFactor {
    /// Factor with user-supplied analytic Jacobians.
    pub fn new(
        eval: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        grad_x: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        grad_u: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        SigmaFactor {
            eval: Arc::new(eval),
            grad_x: Arc::new(grad_x),
            grad_u: Arc::new(grad_u),
            fd_gradients: false,
        }
    }

    /// Fallback constructor that differentiates `eval` by central finite
    /// differences. Fields built this way are flagged, and reports carry the
    /// flag, because adjoint accuracy is limited by gradient accuracy.
    pub fn with_fd_gradients(
        eval: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        state_dim: usize,
        control_dim: usize,
    ) -> Self {
        let eval = Arc::new(eval);
        let e1 = eval.clone();
        let grad_x = move |t: f64, x: &DVector<f64>, u: &DVector<f64>| {
            let mut jac = DMatrix::zeros(state_dim, state_dim);
            for j in 0..state_dim {
                let h = FD_STEP * (1.0 + x[j].abs());
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let col = (e1(t, &xp, u) - e1(t, &xm, u)) / (2.0 * h);
                jac.set_column(j, &col);
            }
            jac
        };
        let e2 = eval.clone();
        let grad_u = move |t: f64, x: &DVector<f64>, u: &DVector<f64>| {
            let mut jac = DMatrix::zeros(state_dim, control_dim);
            for j in 0..control_dim {
                let h = FD_STEP * (1.0 + u[j].abs());
                let mut up = u.clone();
                let mut um = u.clone();
                up[j] += h;
                um[j] -= h;
                let col = (e2(t, x, &up) - e2(t, x, &um)) / (2.0 * h);
                jac.set_column(j, &col);
            }
            jac
        };
        SigmaFactor {
            eval,
            grad_x: Arc::new(grad_x),
            grad_u: Arc::new(grad_u),
            fd_gradients: true,
        }
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

    pub fn uses_fd_gradients(&self) -> bool {
        self.fd_gradients
    }
}

/// Driving field `M(t,x,u)` with `m = factors.len()` Brownian drivers.
#[derive(Clone)]
pub struct MartingaleField {
    factors: Vec<SigmaFactor>,
    state_dim: usize,
    control_dim: usize,
}

impl MartingaleField {
    pub fn new(factors: Vec<SigmaFactor>, state_dim: usize, control_dim: usize) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Input("a martingale field needs at least one factor".into()));
        }
        if state_dim == 0 {
            return Err(Error::Input("state_dim must be positive".into()));
        }
        Ok(MartingaleField {
            factors,
            state_dim,
            control_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// Number of Brownian drivers `m`.
    pub fn brownian_dim(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[SigmaFactor] {
        &self.factors
    }

    pub fn uses_fd_gradients(&self) -> bool {
        self.factors.iter().any(|f| f.fd_gradients)
    }

    fn check_state(&self, v: &DVector<f64>, context: &'static str) -> Result<()> {
        if v.len() != self.state_dim {
            return Err(Error::dim(context, self.state_dim, v.len()));
        }
        Ok(())
    }

    fn check_control(&self, v: &DVector<f64>, context: &'static str) -> Result<()> {
        if v.len() != self.control_dim {
            return Err(Error::dim(context, self.control_dim, v.len()));
        }
        Ok(())
    }

    /// Local characteristic `q(t,x,u,y,v)` as a d x d matrix:
    /// `q_{ij} = sum_k sigma_k^i(t,x,u) sigma_k^j(t,y,v)`.
    pub fn local_characteristic(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        y: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        self.check_state(x, "local_characteristic: x")?;
        self.check_state(y, "local_characteristic: y")?;
        self.check_control(u, "local_characteristic: u")?;
        self.check_control(v, "local_characteristic: v")?;
        let mut q = DMatrix::zeros(self.state_dim, self.state_dim);
        for f in &self.factors {
            let a = f.eval(t, x, u);
            let b = f.eval(t, y, v);
            // rank-one update q += a b^T
            q.ger(1.0, &a, &b, 1.0);
        }
        Ok(q)
    }

    /// Realized field increment over one step: `sum_k sigma_k(t,x,u) dW_k`.
    pub fn increment(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dw: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_state(x, "increment: x")?;
        self.check_control(u, "increment: u")?;
        if dw.len() != self.brownian_dim() {
            return Err(Error::dim("increment: dw", self.brownian_dim(), dw.len()));
        }
        let mut out = DVector::zeros(self.state_dim);
        for (k, f) in self.factors.iter().enumerate() {
            out.axpy(dw[k], &f.eval(t, x, u), 1.0);
        }
        Ok(out)
    }

    /// Gradient, in the first spatial slot of `q*`, of
    /// `x' |-> tr[z q*(t, x', u', x, u)]` evaluated on the diagonal
    /// `(x', u') = (x, u)`; concretely `sum_k (d sigma_k/dx)^T z sigma_k`.
    /// Returned as a column vector.
    pub fn trace_form_grad_x(
        &self,
        z: &DMatrix<f64>,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_state(x, "trace_form_grad_x: x")?;
        self.check_control(u, "trace_form_grad_x: u")?;
        if z.nrows() != self.state_dim || z.ncols() != self.state_dim {
            return Err(Error::dim("trace_form_grad_x: z", self.state_dim, z.nrows().max(z.ncols())));
        }
        let mut out = DVector::zeros(self.state_dim);
        for f in &self.factors {
            let sigma = f.eval(t, x, u);
            let jac = f.grad_x(t, x, u);
            out += jac.transpose() * (z * sigma);
        }
        Ok(out)
    }

    /// Control-slot analogue of [`trace_form_grad_x`]:
    /// `sum_k (d sigma_k/du)^T z sigma_k`, a column vector in R^k.
    pub fn trace_form_grad_u(
        &self,
        z: &DMatrix<f64>,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_state(x, "trace_form_grad_u: x")?;
        self.check_control(u, "trace_form_grad_u: u")?;
        if z.nrows() != self.state_dim || z.ncols() != self.state_dim {
            return Err(Error::dim("trace_form_grad_u: z", self.state_dim, z.nrows().max(z.ncols())));
        }
        let mut out = DVector::zeros(self.control_dim);
        for f in &self.factors {
            let sigma = f.eval(t, x, u);
            let jac = f.grad_u(t, x, u);
            out += jac.transpose() * (z * sigma);
        }
        Ok(out)
    }

    /// Residual of the linearity condition on `q`: the trace increment of
    /// `q*` between `(y,v)` and the diagonal `(x,u)` minus its first-order
    /// expansion. Identically zero for fields whose factors are linear in
    /// `(x,u)`.
    pub fn condition_q_residual(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        y: &DVector<f64>,
        v: &DVector<f64>,
        a: &DMatrix<f64>,
    ) -> Result<f64> {
        self.check_state(x, "condition_q_residual: x")?;
        self.check_state(y, "condition_q_residual: y")?;
        self.check_control(u, "condition_q_residual: u")?;
        self.check_control(v, "condition_q_residual: v")?;
        if a.nrows() != self.state_dim || a.ncols() != self.state_dim {
            return Err(Error::dim("condition_q_residual: a", self.state_dim, a.nrows().max(a.ncols())));
        }
        // tr[A q*(t,x,u,y,v)] = sum_k <A^T sigma_k(x,u), sigma_k(y,v)>,
        // so the gradient of the second pair on the diagonal is the trace
        // form applied to A^T.
        let a_t = a.transpose();
        let mut lhs = 0.0;
        for f in &self.factors {
            let s_xu = f.eval(t, x, u);
            let s_yv = f.eval(t, y, v);
            let w = &a_t * &s_xu;
            lhs += w.dot(&(s_yv - &s_xu));
        }
        let gx = self.trace_form_grad_x(&a_t, t, x, u)?;
        let gu = self.trace_form_grad_u(&a_t, t, x, u)?;
        Ok(lhs - gx.dot(&(y - x)) - gu.dot(&(v - u)))
    }
}

/// Named field constructors, used by experiment configs. Custom factors can
/// always be assembled directly through [`SigmaFactor::new`].
pub mod library {
    use super::*;

    /// `sigma_1 = 0`: deterministic dynamics.
    pub fn zero(state_dim: usize, control_dim: usize) -> MartingaleField {
        let d = state_dim;
        MartingaleField::new(
            vec![SigmaFactor::new(
                move |_, _, _| DVector::zeros(d),
                move |_, _, _| DMatrix::zeros(d, d),
                move |_, _, _| DMatrix::zeros(d, control_dim),
            )],
            state_dim,
            control_dim,
        )
        .expect("zero field")
    }

    /// Constant columns: factor `k` is the `k`-th column of `columns`.
    pub fn constant(columns: DMatrix<f64>, control_dim: usize) -> MartingaleField {
        let d = columns.nrows();
        let factors = (0..columns.ncols())
            .map(|k| {
                let col = columns.column(k).into_owned();
                let dd = d;
                SigmaFactor::new(
                    move |_, _, _| col.clone(),
                    move |_, _, _| DMatrix::zeros(dd, dd),
                    move |_, _, _| DMatrix::zeros(dd, control_dim),
                )
            })
            .collect();
        MartingaleField::new(factors, d, control_dim).expect("constant field")
    }

    /// Linear factors `sigma_j = C_j x + D_j u`.
    pub fn linear(cs: Vec<DMatrix<f64>>, ds: Vec<DMatrix<f64>>) -> Result<MartingaleField> {
        if cs.is_empty() && ds.is_empty() {
            return Err(Error::Input("linear field needs at least one factor".into()));
        }
        let m = cs.len().max(ds.len());
        let d = cs
            .first()
            .map(|c| c.nrows())
            .or_else(|| ds.first().map(|dm| dm.nrows()))
            .unwrap();
        let k = ds.first().map(|dm| dm.ncols()).unwrap_or(0);
        let mut factors = Vec::with_capacity(m);
        for j in 0..m {
            let c = cs.get(j).cloned().unwrap_or_else(|| DMatrix::zeros(d, d));
            let dm = ds.get(j).cloned().unwrap_or_else(|| DMatrix::zeros(d, k));
            if c.nrows() != d || c.ncols() != d {
                return Err(Error::dim("linear field: C_j", d, c.nrows().max(c.ncols())));
            }
            if dm.nrows() != d || dm.ncols() != k {
                return Err(Error::dim("linear field: D_j", d, dm.nrows()));
            }
            let c2 = c.clone();
            let dm2 = dm.clone();
            factors.push(SigmaFactor::new(
                move |_, x, u| &c * x + &dm * u,
                move |_, _, _| c2.clone(),
                move |_, _, _| dm2.clone(),
            ));
        }
        MartingaleField::new(factors, d, k)
    }

    /// Scalar field `sigma = cx * x + cu * u` (d = k = m = 1).
    pub fn bilinear(cx: f64, cu: f64) -> MartingaleField {
        linear(
            vec![DMatrix::from_element(1, 1, cx)],
            vec![DMatrix::from_element(1, 1, cu)],
        )
        .expect("bilinear field")
    }

    /// Scalar multiplicative field `sigma = vol * x` (d = m = 1).
    pub fn scalar_gbm(vol: f64, control_dim: usize) -> MartingaleField {
        MartingaleField::new(
            vec![SigmaFactor::new(
                move |_, x, _| DVector::from_element(1, vol * x[0]),
                move |_, _, _| DMatrix::from_element(1, 1, vol),
                move |_, _, _| DMatrix::zeros(1, control_dim),
            )],
            1,
            control_dim,
        )
        .expect("scalar gbm field")
    }

    /// Scalar field `sigma = amp * sin(freq * x) + cu * u`; genuinely
    /// nonlinear in the state, used by the remainder decay study.
    pub fn scalar_sine(amp: f64, freq: f64, cu: f64) -> MartingaleField {
        MartingaleField::new(
            vec![SigmaFactor::new(
                move |_, x, u| DVector::from_element(1, amp * (freq * x[0]).sin() + cu * u[0]),
                move |_, x, _| DMatrix::from_element(1, 1, amp * freq * (freq * x[0]).cos()),
                move |_, _, _| DMatrix::from_element(1, 1, cu),
            )],
            1,
            1,
        )
        .expect("scalar sine field")
    }
}
