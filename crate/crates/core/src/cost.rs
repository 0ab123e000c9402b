//! Running and terminal cost with analytic gradients.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

type ScalarFn = dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync;
type VecFn = dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
type TermFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;
type TermGradFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// Cost functional `J(u) = E[ int f(t, x, u) dt + Phi(x(T)) ]` with gradients.
#[derive(Clone)]
pub struct CostSpec {
    running: Arc<ScalarFn>,
    running_grad_x: Arc<VecFn>,
    running_grad_u: Arc<VecFn>,
    terminal: Arc<TermFn>,
    terminal_grad: Arc<TermGradFn>,
}

impl CostSpec {
    pub fn new(
        running: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync + 'static,
        running_grad_x: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        running_grad_u: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        terminal: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        terminal_grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        CostSpec {
            running: Arc::new(running),
            running_grad_x: Arc::new(running_grad_x),
            running_grad_u: Arc::new(running_grad_u),
            terminal: Arc::new(terminal),
            terminal_grad: Arc::new(terminal_grad),
        }
    }

    /// `f = (x^T Q x + u^T R u) / 2`, `Phi = x^T G x / 2`.
    pub fn quadratic(q: DMatrix<f64>, r: DMatrix<f64>, g: DMatrix<f64>) -> Self {
        let q1 = q.clone();
        let q2 = q;
        let r1 = r.clone();
        let r2 = r;
        let g1 = g.clone();
        let g2 = g;
        CostSpec::new(
            move |_, x, u| 0.5 * ((&q1 * x).dot(x) + (&r1 * u).dot(u)),
            move |_, x, _| &q2 * x,
            move |_, _, u| &r2 * u,
            move |x| 0.5 * (&g1 * x).dot(x),
            move |x| &g2 * x,
        )
    }

    pub fn zero(state_dim: usize, control_dim: usize) -> Self {
        CostSpec::new(
            |_, _, _| 0.0,
            move |_, _, _| DVector::zeros(state_dim),
            move |_, _, _| DVector::zeros(control_dim),
            |_| 0.0,
            move |_| DVector::zeros(state_dim),
        )
    }

    pub fn running(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (self.running)(t, x, u)
    }

    pub fn running_grad_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.running_grad_x)(t, x, u)
    }

    pub fn running_grad_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.running_grad_u)(t, x, u)
    }

    pub fn terminal(&self, x: &DVector<f64>) -> f64 {
        (self.terminal)(x)
    }

    pub fn terminal_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.terminal_grad)(x)
    }

    /// Max relative deviation between analytic gradients and central finite
    /// differences at a sample point. Diagnostic for the consistency invariant.
    pub fn gradient_fd_error(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        let gx = self.running_grad_x(t, x, u);
        for j in 0..x.len() {
            let h = 1e-5 * (1.0 + x[j].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (self.running(t, &xp, u) - self.running(t, &xm, u)) / (2.0 * h);
            worst = worst.max((gx[j] - fd).abs() / (1.0 + fd.abs()));
        }
        let gu = self.running_grad_u(t, x, u);
        for j in 0..u.len() {
            let h = 1e-5 * (1.0 + u[j].abs());
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += h;
            um[j] -= h;
            let fd = (self.running(t, x, &up) - self.running(t, x, &um)) / (2.0 * h);
            worst = worst.max((gu[j] - fd).abs() / (1.0 + fd.abs()));
        }
        let gt = self.terminal_grad(x);
        for j in 0..x.len() {
            let h = 1e-5 * (1.0 + x[j].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (self.terminal(&xp) - self.terminal(&xm)) / (2.0 * h);
            worst = worst.max((gt[j] - fd).abs() / (1.0 + fd.abs()));
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_cost_and_gradients() {
        let cost = CostSpec::quadratic(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 4.0),
            DMatrix::from_element(1, 1, 6.0),
        );
        let x = DVector::from_element(1, 3.0);
        let u = DVector::from_element(1, 0.5);
        assert_relative_eq!(cost.running(0.0, &x, &u), 0.5 * (2.0 * 9.0 + 4.0 * 0.25));
        assert_relative_eq!(cost.running_grad_x(0.0, &x, &u)[0], 6.0);
        assert_relative_eq!(cost.running_grad_u(0.0, &x, &u)[0], 2.0);
        assert_relative_eq!(cost.terminal(&x), 27.0);
        assert_relative_eq!(cost.terminal_grad(&x)[0], 18.0);
        assert!(cost.gradient_fd_error(0.0, &x, &u) < 1e-5);
    }
}
