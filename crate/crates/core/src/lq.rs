//! Linear-quadratic specialization: linear state equation with linear
//! diffusion factors, quadratic cost, the control stationarity residual, and
//! an independent discrete dynamic-programming oracle that synthesizes the
//! optimal feedback.
//!
//! The oracle solves the exact discrete-time problem on the simulation grid
//! (including the O(dt) terms the continuous Riccati equation drops), so the
//! synthesized feedback is optimal for the very cost the Monte Carlo
//! estimators integrate. A separate brute-force sweep re-derives the scalar
//! gains by three-point parabola minimization for cross-validation.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::adjoint::AdjointTriple;
use crate::control::{ControlDomain, ControlLaw};
use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::field::{library, MartingaleField};
use crate::grid::TimeGrid;
use crate::maxprin::{self, SufficiencyReport};
use crate::problem::{ControlProblem, Drift};
use crate::sde::PathBundle;
use crate::stats::Estimate;

/// Piecewise-constant coefficient table: one matrix for all nodes or one per
/// grid node.
#[derive(Clone, Debug)]
pub enum CoeffTable {
    Constant(DMatrix<f64>),
    PerNode(Vec<DMatrix<f64>>),
}

impl CoeffTable {
    pub fn at(&self, node: usize) -> &DMatrix<f64> {
        match self {
            CoeffTable::Constant(m) => m,
            CoeffTable::PerNode(v) => &v[node.min(v.len() - 1)],
        }
    }

    fn shape(&self) -> (usize, usize) {
        let m = self.at(0);
        (m.nrows(), m.ncols())
    }
}

/// LQ problem data: `dx = (A x + B u) dt + sum_j (C_j x + D_j u) dW^j` with
/// cost `(1/2) E[int <Qx,x> + <Ru,u> dt + <G x_T, x_T>]`.
#[derive(Clone)]
pub struct LQSpec {
    pub a: CoeffTable,
    pub b: CoeffTable,
    pub q: CoeffTable,
    pub r: CoeffTable,
    pub g: DMatrix<f64>,
    pub c_factors: Vec<CoeffTable>,
    pub d_factors: Vec<CoeffTable>,
    pub x0: DVector<f64>,
    pub horizon: f64,
    /// Lower bound demanded of R's smallest eigenvalue.
    pub r_min: f64,
}

impl LQSpec {
    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }

    pub fn control_dim(&self) -> usize {
        self.b.shape().1
    }

    pub fn n_factors(&self) -> usize {
        self.c_factors.len().max(self.d_factors.len())
    }

    fn c_at(&self, j: usize, node: usize) -> DMatrix<f64> {
        self.c_factors
            .get(j)
            .map(|t| t.at(node).clone())
            .unwrap_or_else(|| DMatrix::zeros(self.state_dim(), self.state_dim()))
    }

    fn d_at(&self, j: usize, node: usize) -> DMatrix<f64> {
        self.d_factors
            .get(j)
            .map(|t| t.at(node).clone())
            .unwrap_or_else(|| DMatrix::zeros(self.state_dim(), self.control_dim()))
    }

    /// Eigenvalue checks: Q, G positive semidefinite and R positive definite
    /// (smallest eigenvalue >= r_min) at every node.
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        let d = self.state_dim();
        let k = self.control_dim();
        if self.a.shape() != (d, d) {
            return Err(Error::Input("lq: A must be d x d".into()));
        }
        if self.b.shape() != (d, k) {
            return Err(Error::Input("lq: B must be d x k".into()));
        }
        if self.g.nrows() != d || self.g.ncols() != d {
            return Err(Error::Input("lq: G must be d x d".into()));
        }
        for n in 0..grid.n_nodes() {
            let q = self.q.at(n);
            let r = self.r.at(n);
            if q.nrows() != d || q.ncols() != d || r.nrows() != k || r.ncols() != k {
                return Err(Error::Input("lq: Q or R has wrong shape".into()));
            }
            let min_q = q.clone().symmetric_eigen().eigenvalues.min();
            if min_q < -1e-10 {
                return Err(Error::Input(format!("lq: Q at node {n} is not PSD (min eig {min_q})")));
            }
            let min_r = r.clone().symmetric_eigen().eigenvalues.min();
            if min_r < self.r_min {
                return Err(Error::Input(format!(
                    "lq: R at node {n} violates the positivity floor ({min_r} < {})",
                    self.r_min
                )));
            }
        }
        let min_g = self.g.clone().symmetric_eigen().eigenvalues.min();
        if min_g < -1e-10 {
            return Err(Error::Input(format!("lq: G is not PSD (min eig {min_g})")));
        }
        for j in 0..self.n_factors() {
            if self.c_at(j, 0).nrows() != d || self.d_at(j, 0).nrows() != d {
                return Err(Error::Input("lq: factor matrices have wrong row count".into()));
            }
        }
        Ok(())
    }

    /// The linear martingale field induced by the (C_j, D_j) factors.
    pub fn field(&self, grid: &TimeGrid) -> MartingaleField {
        if self.n_factors() == 0 {
            return library::zero(self.state_dim(), self.control_dim());
        }
        let dt = grid.dt();
        let mut factors = Vec::with_capacity(self.n_factors());
        for j in 0..self.n_factors() {
            let cs = self.c_factors.get(j).cloned();
            let ds = self.d_factors.get(j).cloned();
            let d = self.state_dim();
            let k = self.control_dim();
            let node_of = move |t: f64| -> usize { (t / dt).round() as usize };
            let c1 = cs.clone();
            let d1 = ds.clone();
            let c2 = cs.clone();
            let d2 = ds;
            let zero_c = DMatrix::zeros(d, d);
            let zero_d = DMatrix::zeros(d, k);
            let zc
                = zero_c.clone();
            let zd = zero_d.clone();
            factors.push(crate::field::SigmaFactor::new(
                move |t, x: &DVector<f64>, u: &DVector<f64>| {
                    let n = node_of(t);
                    let mut out = DVector::zeros(x.len());
                    if let Some(c) = &c1 {
                        out += c.at(n) * x;
                    }
                    if let Some(dm) = &d1 {
                        out += dm.at(n) * u;
                    }
                    out
                },
                move |t, _: &DVector<f64>, _: &DVector<f64>| match &c2 {
                    Some(c) => c.at(node_of(t)).clone(),
                    None => zc.clone(),
                },
                move |t, _: &DVector<f64>, _: &DVector<f64>| match &d2 {
                    Some(dm) => dm.at(node_of(t)).clone(),
                    None => zd.clone(),
                },
            ));
        }
        MartingaleField::new(factors, self.state_dim(), self.control_dim()).expect("lq field")
    }

    pub fn drift(&self, grid: &TimeGrid) -> Drift {
        let a = self.a.clone();
        let b = self.b.clone();
        let dt = grid.dt();
        let a2 = a.clone();
        let b2 = b.clone();
        let node_of = move |t: f64| -> usize { (t / dt).round() as usize };
        Drift::new(
            move |t, x, u| {
                let n = node_of(t);
                a.at(n) * x + b.at(n) * u
            },
            move |t, _, _| a2.at(node_of(t)).clone(),
            move |t, _, _| b2.at(node_of(t)).clone(),
        )
    }

    pub fn cost(&self, grid: &TimeGrid) -> CostSpec {
        let q = self.q.clone();
        let r = self.r.clone();
        let g = self.g.clone();
        let q2 = q.clone();
        let r2 = r.clone();
        let g2 = g.clone();
        let dt = grid.dt();
        let node_of = move |t: f64| -> usize { (t / dt).round() as usize };
        CostSpec::new(
            move |t, x, u| {
                let n = node_of(t);
                0.5 * ((q.at(n) * x).dot(x) + (r.at(n) * u).dot(u))
            },
            move |t, x, _| q2.at(node_of(t)) * x,
            move |t, _, u| r2.at(node_of(t)) * u,
            move |x| 0.5 * (&g * x).dot(x),
            move |x| &g2 * x,
        )
    }

    pub fn problem(&self, grid: &TimeGrid) -> ControlProblem {
        ControlProblem {
            field: self.field(grid),
            drift: self.drift(grid),
            cost: self.cost(grid),
            x0: self.x0.clone(),
            convex: true,
        }
    }
}

/// Backward dynamic-programming solution: value matrices per node and
/// feedback gains per step (`u_n = -K_n x_n`).
pub struct RiccatiSolution {
    pub p: Vec<DMatrix<f64>>,
    pub k: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    pub fn p0(&self) -> &DMatrix<f64> {
        &self.p[0]
    }

    /// Optimal value of the discrete problem started at `x0`.
    pub fn value(&self, x0: &DVector<f64>) -> f64 {
        0.5 * (self.p0() * x0).dot(x0)
    }

    /// Feedback law `u = -K_n x`.
    pub fn feedback_law(&self, domain: ControlDomain) -> ControlLaw {
        let gains = self.k.clone();
        let k_dim = gains[0].nrows();
        ControlLaw::feedback(
            k_dim,
            move |node, _t, x| {
                let idx = node.min(gains.len() - 1);
                -(&gains[idx] * x)
            },
            domain,
        )
    }

    /// CSV export: `t,p_11..p_dd,k_11..k_kd` (row-major).
    pub fn write_csv(&self, grid: &TimeGrid, mut out: impl Write, config_hash: &str) -> Result<()> {
        writeln!(out, "# config_hash={config_hash}")?;
        let d = self.p[0].nrows();
        let kr = self.k[0].nrows();
        let mut header = String::from("t");
        for i in 0..d {
            for j in 0..d {
                header.push_str(&format!(",p_{}{}", i + 1, j + 1));
            }
        }
        for i in 0..kr {
            for j in 0..d {
                header.push_str(&format!(",k_{}{}", i + 1, j + 1));
            }
        }
        writeln!(out, "{header}")?;
        for n in 0..self.p.len() {
            let mut line = format!("{}", grid.node(n));
            for i in 0..d {
                for j in 0..d {
                    line.push_str(&format!(",{}", self.p[n][(i, j)]));
                }
            }
            let kn = &self.k[n.min(self.k.len() - 1)];
            for i in 0..kr {
                for j in 0..d {
                    line.push_str(&format!(",{}", kn[(i, j)]));
                }
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Exact discrete dynamic programming on the Euler grid. With
/// `At = I + A dt`, `Bt = B dt`:
///
/// ```text
/// K_n = (R dt + Bt^T P Bt + dt sum_j D_j^T P D_j)^{-1}
///       (Bt^T P At + dt sum_j D_j^T P C_j)
/// P_n = Q dt + K^T R K dt + (At - Bt K)^T P (At - Bt K)
///       + dt sum_j (C_j - D_j K)^T P (C_j - D_j K)
/// ```
///
/// with `P_N = G`. The quadratic update keeps `P` symmetric positive
/// semidefinite by construction.
pub fn riccati_oracle(spec: &LQSpec, grid: &TimeGrid) -> Result<RiccatiSolution> {
    spec.validate(grid)?;
    let d = spec.state_dim();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let eye = DMatrix::<f64>::identity(d, d);

    let mut p_nodes = vec![DMatrix::zeros(d, d); grid.n_nodes()];
    let mut k_steps = Vec::with_capacity(n_steps);
    p_nodes[n_steps] = spec.g.clone();

    for n in (0..n_steps).rev() {
        let p_next = p_nodes[n + 1].clone();
        let a_t = &eye + spec.a.at(n) * dt;
        let b_t = spec.b.at(n) * dt;
        let mut lambda = spec.r.at(n) * dt + b_t.transpose() * &p_next * &b_t;
        let mut theta = b_t.transpose() * &p_next * &a_t;
        for j in 0..spec.n_factors() {
            let c = spec.c_at(j, n);
            let dm = spec.d_at(j, n);
            lambda += dm.transpose() * &p_next * &dm * dt;
            theta += dm.transpose() * &p_next * &c * dt;
        }
        let chol = lambda.clone().cholesky().ok_or_else(|| {
            Error::Numerical(format!(
                "riccati recursion: control Hessian not positive definite at node {n}"
            ))
        })?;
        let k = chol.solve(&theta);

        let closed = &a_t - &b_t * &k;
        let mut p = spec.q.at(n) * dt
            + k.transpose() * (spec.r.at(n) * dt) * &k
            + closed.transpose() * &p_next * closed;
        for j in 0..spec.n_factors() {
            let cl = spec.c_at(j, n) - spec.d_at(j, n) * &k;
            p += cl.transpose() * &p_next * cl * dt;
        }
        // symmetrize against rounding drift
        p = (&p + p.transpose()) * 0.5;
        p_nodes[n] = p;
        k_steps.push(k);
    }
    k_steps.reverse();
    Ok(RiccatiSolution {
        p: p_nodes,
        k: k_steps,
    })
}

/// Independent scalar oracle: resolves the same backward recursion by probing
/// the stage objective and fitting parabolas, with no shared algebra with
/// [`riccati_oracle`]. Quadratics are reproduced exactly by three-point
/// interpolation, so agreement is limited only by rounding.
pub fn brute_force_scalar_dp(spec: &LQSpec, grid: &TimeGrid) -> Result<RiccatiSolution> {
    if spec.state_dim() != 1 || spec.control_dim() != 1 {
        return Err(Error::Input("brute_force_scalar_dp supports scalar problems only".into()));
    }
    spec.validate(grid)?;
    let n_steps = grid.n_steps();
    let dt = grid.dt();

    // value function v0 + v1 x + v2 x^2 per node
    let mut coeffs = (0.0, 0.0, 0.5 * spec.g[(0, 0)]);
    let mut p_nodes = vec![DMatrix::zeros(1, 1); grid.n_nodes()];
    let mut k_steps = vec![DMatrix::zeros(1, 1); n_steps];
    p_nodes[n_steps] = spec.g.clone();

    let probes_x = [-1.0, 0.7, 1.3];
    let probes_u = [-1.0, 0.0, 1.0];

    for n in (0..n_steps).rev() {
        let (v0, v1, v2) = coeffs;
        let a = spec.a.at(n)[(0, 0)];
        let b = spec.b.at(n)[(0, 0)];
        let q = spec.q.at(n)[(0, 0)];
        let r = spec.r.at(n)[(0, 0)];

        let objective = |x: f64, u: f64| -> f64 {
            let mu = (1.0 + a * dt) * x + b * dt * u;
            let mut var = 0.0;
            for j in 0..spec.n_factors() {
                let s = spec.c_at(j, n)[(0, 0)] * x + spec.d_at(j, n)[(0, 0)] * u;
                var += s * s * dt;
            }
            0.5 * (q * x * x + r * u * u) * dt + v0 + v1 * mu + v2 * (mu * mu + var)
        };

        // optimal control per probe state by exact parabola minimization
        let minimize = |x: f64| -> (f64, f64) {
            let m: Vec<f64> = probes_u.iter().map(|&u| objective(x, u)).collect();
            let c2 = 0.5 * (m[2] + m[0]) - m[1];
            let c1 = 0.5 * (m[2] - m[0]);
            let u_star = -c1 / (2.0 * c2);
            (u_star, objective(x, u_star))
        };

        let results: Vec<(f64, f64)> = probes_x.iter().map(|&x| minimize(x)).collect();
        // u*(x) is affine in x; recover the gain from two probes
        let beta = (results[2].0 - results[0].0) / (probes_x[2] - probes_x[0]);
        k_steps[n] = DMatrix::from_element(1, 1, -beta);

        // fit the next value function through the three probe values
        let vand = DMatrix::from_fn(3, 3, |i, j| probes_x[i].powi(j as i32));
        let rhs = DVector::from_vec(results.iter().map(|r| r.1).collect());
        let sol = vand
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("brute force value fit is singular".into()))?;
        coeffs = (sol[0], sol[1], sol[2]);
        p_nodes[n] = DMatrix::from_element(1, 1, 2.0 * coeffs.2);
    }

    Ok(RiccatiSolution {
        p: p_nodes,
        k: k_steps,
    })
}

/// Monte Carlo estimate of the quadratic cost along a bundle.
pub fn lq_cost(spec: &LQSpec, bundle: &PathBundle) -> Result<Estimate> {
    let dt = bundle.grid.dt();
    let n_steps = bundle.grid.n_steps();
    let samples: Vec<f64> = (0..bundle.n_paths)
        .map(|p| {
            let mut acc = 0.0;
            for n in 0..n_steps {
                let x = bundle.state(p, n);
                let u = bundle.control(p, n);
                acc += 0.5 * ((spec.q.at(n) * &x).dot(&x) + (spec.r.at(n) * &u).dot(&u)) * dt;
            }
            let xt = bundle.state(p, n_steps);
            acc + 0.5 * (&spec.g * &xt).dot(&xt)
        })
        .collect();
    Ok(Estimate::from_samples(&samples))
}

/// Node-wise control stationarity residual along a reference pair:
/// `B^T y + sum_j D_j^T z (C_j x + D_j u) + R u`, which vanishes at the
/// optimum in the continuous limit.
pub struct StationarityReport {
    pub per_node_mean: Vec<DVector<f64>>,
    pub per_node_se: Vec<DVector<f64>>,
    /// Max over nodes of the mean residual sup-norm.
    pub max_norm: f64,
    /// Mean over nodes of `||R u||` (the natural scale of the condition).
    pub scale: f64,
    /// True when some component violates zero by more than three standard
    /// errors somewhere on the grid.
    pub significant: bool,
}

pub fn stationarity_residual(
    spec: &LQSpec,
    adj: &AdjointTriple,
    bar: &PathBundle,
) -> Result<StationarityReport> {
    if adj.n_paths != bar.n_paths || adj.n_nodes != bar.grid.n_nodes() {
        return Err(Error::Input("stationarity_residual: adjoint shape mismatch".into()));
    }
    let grid = &bar.grid;
    let field = spec.field(grid);
    let k = spec.control_dim();
    let n_steps = grid.n_steps();

    let per_node: Vec<(DVector<f64>, DVector<f64>, f64)> = (0..n_steps)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&n| {
            let t = grid.node(n);
            let b_n = spec.b.at(n);
            let r_n = spec.r.at(n);
            let mut sum: DVector<f64> = DVector::zeros(k);
            let mut sum_sq: DVector<f64> = DVector::zeros(k);
            let mut scale_acc = 0.0;
            for p in 0..bar.n_paths {
                let x = bar.state(p, n);
                let u = bar.control(p, n);
                let y = adj.y(p, n);
                let z = adj.z(p, n);
                let res = b_n.transpose() * y + field.trace_form_grad_u(&z, t, &x, &u)? + r_n * &u;
                for i in 0..k {
                    sum[i] += res[i];
                    sum_sq[i] += res[i] * res[i];
                }
                scale_acc += (r_n * &u).norm();
            }
            let n_f = bar.n_paths as f64;
            let mean = &sum / n_f;
            let se = DVector::from_fn(k, |i, _| {
                if bar.n_paths < 2 {
                    0.0
                } else {
                    let var: f64 = ((sum_sq[i] - sum[i] * sum[i] / n_f) / (n_f - 1.0)).max(0.0);
                    (var / n_f).sqrt()
                }
            });
            Ok((mean, se, scale_acc / n_f))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_node_mean = Vec::with_capacity(n_steps);
    let mut per_node_se = Vec::with_capacity(n_steps);
    let mut max_norm: f64 = 0.0;
    let mut scale = 0.0;
    let mut significant = false;
    for (mean, se, sc) in per_node {
        for i in 0..k {
            if mean[i].abs() > 3.0 * se[i] {
                significant = true;
            }
        }
        max_norm = max_norm.max(mean.amax());
        scale += sc;
        per_node_mean.push(mean);
        per_node_se.push(se);
    }
    scale /= n_steps as f64;
    Ok(StationarityReport {
        per_node_mean,
        per_node_se,
        max_norm,
        scale,
        significant,
    })
}

/// Verdict of the LQ optimality certificate.
pub struct CertificateReport {
    pub sufficiency: SufficiencyReport,
    pub pass: bool,
}

/// Samples random admissible perturbations around `ubar` (always including
/// the dynamic-programming feedback as an explicit competitor) and certifies
/// `J(u) >= J(ubar) - 3 se` for all of them.
#[allow(clippy::too_many_arguments)]
pub fn lq_optimality_certificate(
    spec: &LQSpec,
    ubar: &ControlLaw,
    grid: &TimeGrid,
    n_samples: usize,
    n_paths: usize,
    seed: u64,
) -> Result<CertificateReport> {
    let problem = spec.problem(grid);
    let oracle = riccati_oracle(spec, grid)?;
    let competitor = oracle.feedback_law(ControlDomain::Unbounded);
    let sufficiency = maxprin::sufficiency_check(
        &problem,
        ubar,
        None,
        None,
        &[competitor],
        n_samples,
        *grid,
        n_paths,
        seed,
    )?;
    let pass = sufficiency.failures == 0;
    Ok(CertificateReport { sufficiency, pass })
}
