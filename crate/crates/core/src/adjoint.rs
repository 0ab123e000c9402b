//! Backward solve of the adjoint costate equation by conditional-expectation
//! regression.
//!
//! At each node the sweep regresses the next costate on basis functions of
//! the current state, extracts the integrand `z` from the covariation of the
//! regression residual with the Brownian increments, and steps the costate
//! backward with the explicit driver
//!
//! ```text
//! y_n = E[y_{n+1} | x_n] + (b_x^T y_{n+1} + sum_k J_k^T z_n sigma_k + f_x) dt .
//! ```
//!
//! The filtration is generated by the driving Brownian motions, so the
//! orthogonal martingale component of the costate vanishes identically; the
//! triple keeps it as an explicit zero.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::control::PathTable;
use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::field::MartingaleField;
use crate::problem::Drift;
use crate::sde::PathBundle;
use crate::stats::{Estimate, PATH_BLOCK};

/// Conditional-expectation estimator used by the backward sweep.
#[derive(Clone, Debug)]
pub enum BasisKind {
    /// All monomials in the state coordinates of total degree <= `degree`.
    Polynomial { degree: usize },
    /// Per-bin local linear fit on quantile bins (scalar states only).
    PiecewiseLinear { bins: usize },
}

#[derive(Clone, Debug)]
pub struct RegressionBasis {
    pub kind: BasisKind,
    /// Ridge weight on non-intercept columns. Zero disables regularization,
    /// in which case rank-deficient designs abort the solve.
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis {
            kind: BasisKind::Polynomial { degree: 2 },
            ridge: 1e-8,
        }
    }
}

/// Multi-indices of total degree <= degree over `dim` variables.
fn monomial_exponents(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; dim]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for e in &out {
            for j in 0..dim {
                let mut e2 = e.clone();
                e2[j] += 1;
                next.push(e2);
            }
        }
        out.extend(next);
        out.sort();
        out.dedup();
    }
    out.sort_by_key(|e| (e.iter().sum::<usize>(), e.clone()));
    out
}

/// Evaluated basis at one node: design matrix plus the ridge penalty mask.
struct NodeBasis {
    design: DMatrix<f64>,
    /// 1.0 for penalized columns, 0.0 for intercept-like columns.
    penalty: DVector<f64>,
}

fn build_basis(basis: &RegressionBasis, states: &[DVector<f64>]) -> Result<NodeBasis> {
    let n = states.len();
    let dim = states[0].len();
    match &basis.kind {
        BasisKind::Polynomial { degree } => {
            // Monomials in the per-node standardized coordinates. The column
            // space equals that of the raw monomials, so the fitted values
            // are unchanged, but the design stays well conditioned even when
            // the state cloud is narrow (early nodes).
            let mut mean = vec![0.0; dim];
            let mut std = vec![0.0; dim];
            for j in 0..dim {
                let mu = states.iter().map(|x| x[j]).sum::<f64>() / n as f64;
                let var = states.iter().map(|x| (x[j] - mu) * (x[j] - mu)).sum::<f64>() / n as f64;
                mean[j] = mu;
                std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
            }
            let exps = monomial_exponents(dim, *degree);
            let cols = exps.len();
            let mut design = DMatrix::zeros(n, cols);
            for (row, x) in states.iter().enumerate() {
                for (col, e) in exps.iter().enumerate() {
                    let mut v = 1.0;
                    for (j, &p) in e.iter().enumerate() {
                        let s = (x[j] - mean[j]) / std[j];
                        for _ in 0..p {
                            v *= s;
                        }
                    }
                    design[(row, col)] = v;
                }
            }
            let penalty = DVector::from_iterator(
                cols,
                exps.iter().map(|e| if e.iter().all(|&p| p == 0) { 0.0 } else { 1.0 }),
            );
            Ok(NodeBasis { design, penalty })
        }
        BasisKind::PiecewiseLinear { bins } => {
            if dim != 1 {
                return Err(Error::Input(
                    "piecewise-linear regression basis supports scalar states only".into(),
                ));
            }
            let bins = (*bins).max(1);
            let mut sorted: Vec<f64> = states.iter().map(|x| x[0]).collect();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let edge = |i: usize| -> f64 { sorted[(i * (n - 1)) / bins] };
            let mut design = DMatrix::zeros(n, 2 * bins);
            for (row, x) in states.iter().enumerate() {
                let v = x[0];
                let mut b = bins - 1;
                for i in 0..bins {
                    if v <= edge(i + 1) {
                        b = i;
                        break;
                    }
                }
                let center = 0.5 * (edge(b) + edge(b + 1));
                design[(row, 2 * b)] = 1.0;
                design[(row, 2 * b + 1)] = v - center;
            }
            let penalty = DVector::from_iterator(
                2 * bins,
                (0..2 * bins).map(|c| if c % 2 == 0 { 0.0 } else { 1.0 }),
            );
            Ok(NodeBasis { design, penalty })
        }
    }
}

/// Ridge least squares for a multi-column response. Returns the fitted
/// values and the relative normal-equation residual. Response columns that
/// are bit-for-bit constant across paths are fitted exactly by that constant
/// (the conditional expectation of a known constant carries no regression
/// noise), which keeps constant-costate sweeps exact.
fn ridge_fit(
    nb: &NodeBasis,
    response: &DMatrix<f64>,
    ridge: f64,
    node: usize,
) -> Result<(DMatrix<f64>, f64)> {
    let psi = &nb.design;
    let n = response.nrows();
    let d = response.ncols();
    let mut fitted = DMatrix::zeros(n, d);
    let variable: Vec<usize> = (0..d)
        .filter(|&j| {
            let first = response[(0, j)];
            let constant = (1..n).all(|i| response[(i, j)] == first);
            if constant {
                fitted.column_mut(j).fill(first);
            }
            !constant
        })
        .collect();
    if variable.is_empty() {
        return Ok((fitted, 0.0));
    }

    let mut sub = DMatrix::zeros(n, variable.len());
    for (c, &j) in variable.iter().enumerate() {
        sub.set_column(c, &response.column(j));
    }
    let mut gram = psi.transpose() * psi;
    for i in 0..gram.nrows() {
        gram[(i, i)] += ridge * nb.penalty[i];
    }
    let rhs = psi.transpose() * &sub;
    let chol = gram.cholesky().ok_or_else(|| Error::Solver {
        node,
        detail: if ridge == 0.0 {
            "rank-deficient regression design; enable ridge regularization".into()
        } else {
            "regression normal equations are not positive definite".into()
        },
    })?;
    let beta = chol.solve(&rhs);
    // Normal equations: Psi^T (Y - Psi B) = ridge * D B.
    let mut lhs = psi.transpose() * (&sub - psi * &beta);
    for i in 0..lhs.nrows() {
        for j in 0..lhs.ncols() {
            lhs[(i, j)] -= ridge * nb.penalty[i] * beta[(i, j)];
        }
    }
    let rel = lhs.norm() / (1.0 + rhs.norm());
    let sub_fitted = psi * &beta;
    for (c, &j) in variable.iter().enumerate() {
        fitted.set_column(j, &sub_fitted.column(c));
    }
    Ok((fitted, rel))
}

/// Discretized adjoint triple along a reference bundle. The orthogonal
/// martingale part is identically zero under the Brownian filtration and is
/// exposed only through [`AdjointTriple::orthogonal_increment`].
pub struct AdjointTriple {
    pub n_paths: usize,
    pub n_nodes: usize,
    pub state_dim: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    /// Largest relative normal-equation residual seen across all node
    /// regressions; 0 for sweeps that never regress.
    pub max_normal_eq_residual: f64,
}

impl AdjointTriple {
    #[inline]
    pub fn y_slice(&self, path: usize, node: usize) -> &[f64] {
        let base = (path * self.n_nodes + node) * self.state_dim;
        &self.y[base..base + self.state_dim]
    }

    pub fn y(&self, path: usize, node: usize) -> DVector<f64> {
        DVector::from_column_slice(self.y_slice(path, node))
    }

    /// Row-major d x d block.
    pub fn z(&self, path: usize, node: usize) -> DMatrix<f64> {
        let d = self.state_dim;
        let base = (path * self.n_nodes + node) * d * d;
        DMatrix::from_row_slice(d, d, &self.z[base..base + d * d])
    }

    /// Increment of the orthogonal square-integrable martingale: zero at
    /// every node under the Brownian-filtration assumption.
    pub fn orthogonal_increment(&self, _path: usize, _node: usize) -> DVector<f64> {
        DVector::zeros(self.state_dim)
    }

    pub fn orthogonal_part_is_zero(&self) -> bool {
        true
    }

    /// CSV export: `path_id,t,y_1..y_d,z_11..z_dd` (z row-major).
    pub fn write_csv(
        &self,
        grid: &crate::grid::TimeGrid,
        mut out: impl Write,
        config_hash: &str,
    ) -> Result<()> {
        writeln!(out, "# config_hash={config_hash}")?;
        let d = self.state_dim;
        let mut header = String::from("path_id,t");
        for i in 0..d {
            header.push_str(&format!(",y_{}", i + 1));
        }
        for i in 0..d {
            for j in 0..d {
                header.push_str(&format!(",z_{}{}", i + 1, j + 1));
            }
        }
        writeln!(out, "{header}")?;
        for p in 0..self.n_paths {
            for n in 0..self.n_nodes {
                let mut line = format!("{p},{}", grid.node(n));
                for v in self.y_slice(p, n) {
                    line.push_str(&format!(",{v}"));
                }
                let base = (p * self.n_nodes + n) * d * d;
                for v in &self.z[base..base + d * d] {
                    line.push_str(&format!(",{v}"));
                }
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Minimum-norm solution of `z S = A` with small singular values truncated.
/// `z` only enters downstream formulas through `z sigma_k` contractions,
/// which this choice fixes uniquely.
fn min_norm_z(a: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let tol = 1e-10 * (1.0 + s.norm());
    if s.nrows() == 1 {
        // d = 1: S is 1 x m, z = (A S^T) / (S S^T).
        let denom = s.dot(s);
        if denom <= tol * tol {
            return DMatrix::zeros(1, 1);
        }
        return DMatrix::from_element(1, 1, (a * s.transpose())[(0, 0)] / denom);
    }
    let svd = s.clone().svd(true, true);
    match svd.pseudo_inverse(tol) {
        Ok(pinv) => a * pinv,
        Err(_) => DMatrix::zeros(a.nrows(), s.nrows()),
    }
}

/// Backward least-squares Monte Carlo sweep for the adjoint equation along
/// `(xbar, ubar)`. The terminal condition is imposed path by path exactly.
pub fn solve_adjoint(
    field: &MartingaleField,
    bar: &PathBundle,
    drift: &Drift,
    cost: &CostSpec,
    basis: &RegressionBasis,
) -> Result<AdjointTriple> {
    let d = field.state_dim();
    let m = field.brownian_dim();
    if bar.state_dim != d {
        return Err(Error::dim("solve_adjoint: bundle state", d, bar.state_dim));
    }
    let n_paths = bar.n_paths;
    let n_nodes = bar.grid.n_nodes();
    let n_steps = bar.grid.n_steps();
    let dt = bar.grid.dt();

    let mut y = vec![0.0; n_paths * n_nodes * d];
    let mut z = vec![0.0; n_paths * n_nodes * d * d];
    let mut max_res: f64 = 0.0;

    // Terminal condition, bit-exact per path.
    for p in 0..n_paths {
        let g = cost.terminal_grad(&bar.state(p, n_steps));
        let base = (p * n_nodes + n_steps) * d;
        y[base..base + d].copy_from_slice(g.as_slice());
    }

    for n in (0..n_steps).rev() {
        let t = bar.grid.node(n);
        let states: Vec<DVector<f64>> = (0..n_paths).map(|p| bar.state(p, n)).collect();
        let nb = build_basis(basis, &states)?;

        // Response matrix Y_{n+1}: n_paths x d.
        let mut response = DMatrix::zeros(n_paths, d);
        for p in 0..n_paths {
            let base = (p * n_nodes + n + 1) * d;
            for j in 0..d {
                response[(p, j)] = y[base + j];
            }
        }

        let (fitted, res_y) = ridge_fit(&nb, &response, basis.ridge, n)?;
        max_res = max_res.max(res_y);
        let residual = &response - &fitted;

        // For each driver k, regress residual * dW_k / dt on the basis to
        // estimate alpha_k = z sigma_k. Using the residual instead of the raw
        // costate keeps z exactly zero whenever y_{n+1} is already explained
        // by the basis.
        let mut alphas = Vec::with_capacity(m);
        for kk in 0..m {
            let mut target = DMatrix::zeros(n_paths, d);
            for p in 0..n_paths {
                let w = bar.dw_slice(p, n)[kk] / dt;
                for j in 0..d {
                    target[(p, j)] = residual[(p, j)] * w;
                }
            }
            let (alpha_fit, res_a) = ridge_fit(&nb, &target, basis.ridge, n)?;
            max_res = max_res.max(res_a);
            alphas.push(alpha_fit); // n_paths x d fitted alpha_k
        }

        // Per-path: z from the factor structure, and the realized martingale
        // increment z dM for the control variate below.
        let path_ids: Vec<usize> = (0..n_paths).collect();
        let z_blocks: Vec<Result<(Vec<f64>, Vec<f64>)>> = path_ids
            .par_chunks(PATH_BLOCK)
            .map(|chunk| {
                let mut block_z = Vec::with_capacity(chunk.len() * d * d);
                let mut block_zdm = Vec::with_capacity(chunk.len() * d);
                for &p in chunk {
                    let xb = &states[p];
                    let ub = bar.control(p, n);
                    let mut s = DMatrix::zeros(d, m);
                    for (kk, factor) in field.factors().iter().enumerate() {
                        s.set_column(kk, &factor.eval(t, xb, &ub));
                    }
                    let mut a = DMatrix::zeros(d, m);
                    for kk in 0..m {
                        for j in 0..d {
                            a[(j, kk)] = alphas[kk][(p, j)];
                        }
                    }
                    let zp = min_norm_z(&a, &s);
                    let dw = bar.dw_slice(p, n);
                    let mut zdm: DVector<f64> = DVector::zeros(d);
                    for (kk, w) in dw.iter().enumerate() {
                        zdm.axpy(*w, &(&zp * s.column(kk)), 1.0);
                    }
                    block_zdm.extend_from_slice(zdm.as_slice());
                    for i in 0..d {
                        for j in 0..d {
                            block_z.push(zp[(i, j)]);
                        }
                    }
                }
                Ok((block_z, block_zdm))
            })
            .collect();

        let mut z_dm = DMatrix::zeros(n_paths, d);
        {
            let mut p0 = 0usize;
            for block in z_blocks {
                let (block_z, block_zdm) = block?;
                let count = block_zdm.len() / d;
                for i in 0..count {
                    let p = p0 + i;
                    let zbase = (p * n_nodes + n) * d * d;
                    z[zbase..zbase + d * d].copy_from_slice(&block_z[i * d * d..(i + 1) * d * d]);
                    for j in 0..d {
                        z_dm[(p, j)] = block_zdm[i * d + j];
                    }
                }
                p0 += count;
            }
        }

        // Conditional-expectation estimate with the martingale increment as a
        // control variate: E[y_{n+1} - z dM | x_n] = E[y_{n+1} | x_n] since z
        // is a fitted function of x_n, and the subtraction removes the bulk
        // of the one-step variance before it can accumulate through the
        // backward composition of fits.
        let (e_y, res_cv) = ridge_fit(&nb, &(&response - &z_dm), basis.ridge, n)?;
        max_res = max_res.max(res_cv);

        let updates: Vec<Result<Vec<f64>>> = path_ids
            .par_chunks(PATH_BLOCK)
            .map(|chunk| {
                let mut block_y = Vec::with_capacity(chunk.len() * d);
                for &p in chunk {
                    let xb = &states[p];
                    let ub = bar.control(p, n);
                    let zp = {
                        let zbase = (p * n_nodes + n) * d * d;
                        DMatrix::from_row_slice(d, d, &z[zbase..zbase + d * d])
                    };
                    let y_next = DVector::from_fn(d, |j, _| response[(p, j)]);
                    let bx = drift.grad_x(t, xb, &ub);
                    let fx = cost.running_grad_x(t, xb, &ub);
                    let trace_grad = field.trace_form_grad_x(&zp, t, xb, &ub)?;
                    let cond = DVector::from_fn(d, |j, _| e_y[(p, j)]);
                    let y_n = cond + (bx.transpose() * &y_next + trace_grad + fx) * dt;
                    if y_n.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Solver {
                            node: n,
                            detail: format!("costate left the finite range on path {p}"),
                        });
                    }
                    block_y.extend_from_slice(y_n.as_slice());
                }
                Ok(block_y)
            })
            .collect();

        let mut p0 = 0usize;
        for block in updates {
            let block_y = block?;
            let count = block_y.len() / d;
            for i in 0..count {
                let p = p0 + i;
                let ybase = (p * n_nodes + n) * d;
                y[ybase..ybase + d].copy_from_slice(&block_y[i * d..(i + 1) * d]);
            }
            p0 += count;
        }
    }

    Ok(AdjointTriple {
        n_paths,
        n_nodes,
        state_dim: d,
        y,
        z,
        max_normal_eq_residual: max_res,
    })
}

/// Monte Carlo estimate of the duality defect
///
/// ```text
/// E<y(T), xhat(T)>
///   - E int [ <b_u^T y + (d/du tr[z q*])^*, du> - <f_x^T, xhat> ] dt .
/// ```
///
/// The quadrature makes the discrete identity exact for deterministic
/// problems: the drift pairing uses `y_{n+1}`, the trace form uses `z_n`, and
/// the state pairing uses the left endpoint.
pub fn duality_gap(
    field: &MartingaleField,
    adj: &AdjointTriple,
    hatx: &PathBundle,
    bar: &PathBundle,
    drift: &Drift,
    cost: &CostSpec,
) -> Result<Estimate> {
    if adj.n_paths != hatx.n_paths || adj.n_nodes != hatx.grid.n_nodes() {
        return Err(Error::Input("duality_gap: adjoint and variational shapes differ".into()));
    }
    if bar.n_paths != hatx.n_paths || bar.grid != hatx.grid {
        return Err(Error::Input("duality_gap: reference and variational bundles differ".into()));
    }
    if !bar.shares_noise_with(hatx) {
        return Err(Error::Input("duality_gap: bundles do not share noise".into()));
    }
    let n_steps = bar.grid.n_steps();
    let dt = bar.grid.dt();
    let samples: Vec<f64> = (0..bar.n_paths)
        .into_par_iter()
        .map(|p| {
            let lhs = adj.y(p, n_steps).dot(&hatx.state(p, n_steps));
            let mut rhs = 0.0;
            for n in 0..n_steps {
                let t = bar.grid.node(n);
                let xb = bar.state(p, n);
                let ub = bar.control(p, n);
                let du = hatx.control(p, n);
                let xh = hatx.state(p, n);
                let y_next = adj.y(p, n + 1);
                let zp = adj.z(p, n);
                let bu = drift.grad_u(t, &xb, &ub);
                let gu = field.trace_form_grad_u(&zp, t, &xb, &ub)?;
                let fx = cost.running_grad_x(t, &xb, &ub);
                rhs += ((bu.transpose() * y_next + gu).dot(&du) - fx.dot(&xh)) * dt;
            }
            Ok(lhs - rhs)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_samples(&samples))
}

/// Direction table `candidate - bar` realized along the reference bundle, the
/// input to the variational simulation.
pub fn realized_direction(bar: &PathBundle, candidate: &crate::control::ControlLaw) -> PathTable {
    let mut tbl = PathTable::zeros(bar.n_paths, bar.grid.n_nodes(), bar.control_dim);
    for p in 0..bar.n_paths {
        for n in 0..bar.grid.n_nodes() {
            let t = bar.grid.node(n);
            let xb = bar.state(p, n);
            let du = candidate.eval(n, t, &xb, p) - bar.control(p, n);
            tbl.set(p, n, &du);
        }
    }
    tbl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ControlDomain, ControlLaw};
    use crate::field::library;
    use crate::grid::TimeGrid;
    use crate::sde::{simulate_state, simulate_variational, Noise};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn vec1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn const_law(v: f64) -> ControlLaw {
        ControlLaw::constant(vec1(v), ControlDomain::Unbounded)
    }

    #[test]
    fn monomials_cover_expected_degrees() {
        let exps = monomial_exponents(2, 2);
        // 1, x1, x2, x1^2, x1 x2, x2^2
        assert_eq!(exps.len(), 6);
        assert_eq!(exps[0], vec![0, 0]);
    }

    #[test]
    fn zero_terminal_and_driver_give_zero_triple() {
        let field = library::bilinear(1.0, 1.0);
        let drift = Drift::linear(DMatrix::zeros(1, 1), DMatrix::identity(1, 1));
        let cost = CostSpec::zero(1, 1);
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let bar =
            simulate_state(&field, &drift, &const_law(0.1), &vec1(1.0), grid, 64, &Noise::Seeded(3)).unwrap();
        let adj = solve_adjoint(&field, &bar, &drift, &cost, &RegressionBasis::default()).unwrap();
        for p in 0..bar.n_paths {
            for n in 0..grid.n_nodes() {
                assert_eq!(adj.y_slice(p, n)[0], 0.0);
                assert_eq!(adj.z(p, n)[(0, 0)], 0.0);
            }
        }
        assert!(adj.orthogonal_part_is_zero());
    }

    #[test]
    fn constant_terminal_martingale_is_exact() {
        // b_x = 0, sigma independent of x, zero running gradient, terminal
        // gradient c: y must equal c at every node with z identically zero,
        // with no regression noise at all.
        let c = 2.5;
        let field = library::constant(DMatrix::from_element(1, 1, 0.8), 1);
        let drift = Drift::linear(DMatrix::zeros(1, 1), DMatrix::identity(1, 1));
        let cost = CostSpec::new(
            |_, _, _| 0.0,
            |_, _, _| DVector::zeros(1),
            |_, _, _| DVector::zeros(1),
            move |_| 0.0,
            move |_| DVector::from_element(1, c),
        );
        let grid = TimeGrid::new(1.0, 24).unwrap();
        let bar =
            simulate_state(&field, &drift, &const_law(0.3), &vec1(1.0), grid, 128, &Noise::Seeded(5)).unwrap();
        let adj = solve_adjoint(&field, &bar, &drift, &cost, &RegressionBasis::default()).unwrap();
        for p in 0..bar.n_paths {
            for n in 0..grid.n_nodes() {
                assert_eq!(adj.y_slice(p, n)[0], c);
                assert_eq!(adj.z(p, n)[(0, 0)], 0.0);
            }
        }
        assert!(adj.max_normal_eq_residual < 1e-10);
    }

    #[test]
    fn terminal_condition_is_bit_exact() {
        let field = library::bilinear(1.0, 0.5);
        let drift = Drift::linear(DMatrix::zeros(1, 1), DMatrix::identity(1, 1));
        let cost = CostSpec::quadratic(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, 2.0),
        );
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let bar =
            simulate_state(&field, &drift, &const_law(0.2), &vec1(1.0), grid, 32, &Noise::Seeded(7)).unwrap();
        let adj = solve_adjoint(&field, &bar, &drift, &cost, &RegressionBasis::default()).unwrap();
        for p in 0..bar.n_paths {
            let expected = cost.terminal_grad(&bar.state(p, grid.n_steps()));
            assert_eq!(adj.y_slice(p, grid.n_steps())[0], expected[0]);
        }
    }

    #[test]
    fn rank_deficient_regression_without_ridge_errors() {
        // A design with an identically zero column is exactly singular; with
        // ridge = 0 the fit must fail and name the node, with ridge > 0 it
        // must succeed.
        let design = DMatrix::from_row_slice(4, 3, &[
            1.0, 0.5, 0.0, //
            1.0, -0.3, 0.0, //
            1.0, 1.1, 0.0, //
            1.0, 0.2, 0.0,
        ]);
        let nb = NodeBasis {
            design,
            penalty: DVector::from_vec(vec![0.0, 1.0, 1.0]),
        };
        let response = DMatrix::from_column_slice(4, 1, &[0.1, 0.4, -0.2, 0.9]);
        match ridge_fit(&nb, &response, 0.0, 17) {
            Err(Error::Solver { node, .. }) => assert_eq!(node, 17),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("expected solver error"),
        }
        assert!(ridge_fit(&nb, &response, 1e-8, 17).is_ok());
    }

    #[test]
    fn deterministic_duality_gap_is_machine_zero() {
        // Zero field, linear drift, quadratic cost: the discrete duality
        // identity telescopes exactly path by path.
        let field = library::zero(1, 1);
        let drift = Drift::linear(DMatrix::from_element(1, 1, -0.4), DMatrix::identity(1, 1));
        let cost = CostSpec::quadratic(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, 1.5),
        );
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let bar =
            simulate_state(&field, &drift, &const_law(0.3), &vec1(1.0), grid, 4, &Noise::Seeded(11)).unwrap();
        let adj = solve_adjoint(&field, &bar, &drift, &cost, &RegressionBasis::default()).unwrap();
        let dir = realized_direction(&bar, &const_law(1.0));
        let hat = simulate_variational(&field, &drift, &bar, &dir).unwrap();
        let gap = duality_gap(&field, &adj, &hat, &bar, &drift, &cost).unwrap();
        assert!(gap.mean.abs() < 1e-10, "gap {}", gap.mean);
    }

    #[test]
    fn stochastic_duality_gap_within_three_se() {
        // Scalar problem with state-and-control noise; the identity holds in
        // expectation up to regression error well inside the noise band.
        let field = library::bilinear(1.0, 1.0);
        let drift = Drift::linear(DMatrix::zeros(1, 1), DMatrix::identity(1, 1));
        let cost = CostSpec::quadratic(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        );
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let bar =
            simulate_state(&field, &drift, &const_law(0.0), &vec1(1.0), grid, 2000, &Noise::Seeded(13)).unwrap();
        let adj = solve_adjoint(&field, &bar, &drift, &cost, &RegressionBasis::default()).unwrap();
        let dir = realized_direction(&bar, &const_law(1.0));
        let hat = simulate_variational(&field, &drift, &bar, &dir).unwrap();
        let gap = duality_gap(&field, &adj, &hat, &bar, &drift, &cost).unwrap();
        assert!(
            gap.mean.abs() <= 3.0 * gap.se.max(1e-12),
            "gap {} +- {}",
            gap.mean,
            gap.se
        );
    }

    #[test]
    fn costate_matches_riccati_representation() {
        // Along the dynamic-programming feedback of the scalar benchmark the
        // costate admits the representation y(t) = P(t) x(t); the solver has
        // to reproduce it exactly in the deterministic case and to Monte
        // Carlo accuracy with control-dependent diffusion.
        use crate::control::ControlDomain;
        use crate::lq::{riccati_oracle, CoeffTable, LQSpec};

        let fac = |v: f64| CoeffTable::Constant(DMatrix::from_element(1, 1, v));
        for (d_factor, n_paths, tol) in [(0.0, 16usize, 1e-10), (0.5, 4000, 0.03)] {
            let spec = LQSpec {
                a: fac(0.0),
                b: fac(1.0),
                q: fac(1.0),
                r: fac(1.0),
                g: DMatrix::from_element(1, 1, 0.0),
                c_factors: vec![],
                d_factors: if d_factor == 0.0 { vec![] } else { vec![fac(d_factor)] },
                x0: vec1(1.0),
                horizon: 1.0,
                r_min: 1e-9,
            };
            let grid = TimeGrid::new(1.0, 200).unwrap();
            let oracle = riccati_oracle(&spec, &grid).unwrap();
            let law = oracle.feedback_law(ControlDomain::Unbounded);
            let problem = spec.problem(&grid);
            let bar = simulate_state(&problem.field, &problem.drift, &law, &spec.x0, grid, n_paths, &Noise::Seeded(29))
                .unwrap();
            let adj =
                solve_adjoint(&problem.field, &bar, &problem.drift, &problem.cost, &RegressionBasis::default())
                    .unwrap();
            assert!(adj.max_normal_eq_residual <= 1e-10);
            let mut worst = 0.0f64;
            let mut scale = 0.0f64;
            for n in 0..grid.n_nodes() {
                let p_n = oracle.p[n][(0, 0)];
                let mut err_sum = 0.0;
                let mut mag_sum = 0.0;
                for p in 0..n_paths {
                    let predicted = p_n * bar.state(p, n)[0];
                    err_sum += (adj.y_slice(p, n)[0] - predicted).abs();
                    mag_sum += predicted.abs();
                }
                worst = worst.max(err_sum / n_paths as f64);
                scale = scale.max(mag_sum / n_paths as f64);
            }
            assert!(
                worst <= tol * (1.0 + scale),
                "D = {d_factor}: mean |y - P x| = {worst}, scale {scale}"
            );
        }
    }

    #[test]
    fn adjoint_csv_has_provenance_and_columns() {
        let field = library::bilinear(1.0, 1.0);
        let drift = Drift::linear(DMatrix::zeros(1, 1), DMatrix::identity(1, 1));
        let cost = CostSpec::quadratic(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        );
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let bar = simulate_state(&field, &drift, &const_law(0.2), &vec1(1.0), grid, 8, &Noise::Seeded(7)).unwrap();
        let adj = solve_adjoint(&field, &bar, &drift, &cost, &RegressionBasis::default()).unwrap();
        let mut buf = Vec::new();
        adj.write_csv(&grid, &mut buf, "cafe").unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# config_hash=cafe");
        assert_eq!(lines.next().unwrap(), "path_id,t,y_1,z_11");
        assert_eq!(text.lines().count(), 2 + 8 * 5);
    }

    #[test]
    fn piecewise_linear_basis_solves_the_constant_case() {
        let field = library::bilinear(1.0, 0.0);
        let drift = Drift::linear(DMatrix::zeros(1, 1), DMatrix::identity(1, 1));
        let cost = CostSpec::new(
            |_, _, _| 0.0,
            |_, _, _| DVector::zeros(1),
            |_, _, _| DVector::zeros(1),
            |_| 0.0,
            |_| DVector::from_element(1, 1.0),
        );
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let bar =
            simulate_state(&field, &drift, &const_law(0.1), &vec1(1.0), grid, 256, &Noise::Seeded(17)).unwrap();
        let basis = RegressionBasis {
            kind: BasisKind::PiecewiseLinear { bins: 4 },
            ridge: 1e-8,
        };
        let adj = solve_adjoint(&field, &bar, &drift, &cost, &basis).unwrap();
        for p in 0..bar.n_paths {
            assert_relative_eq!(adj.y_slice(p, 0)[0], 1.0, epsilon = 1e-12);
        }
    }
}
