//! Forward simulation on a fixed time grid: the controlled state equation,
//! the first-order variational equation along a reference pair, generalized
//! Ito integrals, realized covariations, and the perturbation-gap and
//! remainder estimators used by the convergence studies.
//!
//! All schemes are explicit Euler with left-endpoint coefficient evaluation,
//! matching the Riemann-sum definition of the driving integral. Paths own
//! counter-based RNG substreams, so a (seed, config) pair fixes every number
//! in the output regardless of thread count.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::control::{ControlLaw, PathTable};
use crate::error::{Error, Result};
use crate::field::MartingaleField;
use crate::grid::TimeGrid;
use crate::problem::Drift;
use crate::rng;
use crate::stats::{par_block_reduce, Estimate, NodeMoments};

/// Noise source for a simulation: either derived from a seed per path, or an
/// explicit table (tests and replays), laid out `[path][step][driver]`.
#[derive(Clone)]
pub enum Noise {
    Seeded(u64),
    Explicit(Arc<Vec<f64>>),
}

impl Noise {
    fn increments(&self, path: usize, n_steps: usize, m: usize, dt: f64) -> Vec<f64> {
        match self {
            Noise::Seeded(seed) => rng::brownian_increments(*seed, path, n_steps, m, dt),
            Noise::Explicit(table) => {
                let base = path * n_steps * m;
                table[base..base + n_steps * m].to_vec()
            }
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            Noise::Seeded(s) => Some(*s),
            Noise::Explicit(_) => None,
        }
    }
}

/// Simulated paths: states, realized controls, and the Brownian increments
/// that produced them.
#[derive(Clone)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub brownian_dim: usize,
    pub seed: Option<u64>,
    x: Vec<f64>,
    u: Vec<f64>,
    dw: Arc<Vec<f64>>,
}

impl std::fmt::Debug for PathBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PathBundle")
            .field("n_paths", &self.n_paths)
            .field("n_nodes", &self.grid.n_nodes())
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("brownian_dim", &self.brownian_dim)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl PathBundle {
    #[inline]
    pub fn state_slice(&self, path: usize, node: usize) -> &[f64] {
        let base = (path * self.grid.n_nodes() + node) * self.state_dim;
        &self.x[base..base + self.state_dim]
    }

    #[inline]
    pub fn control_slice(&self, path: usize, node: usize) -> &[f64] {
        let base = (path * self.grid.n_nodes() + node) * self.control_dim;
        &self.u[base..base + self.control_dim]
    }

    #[inline]
    pub fn dw_slice(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * self.grid.n_steps() + step) * self.brownian_dim;
        &self.dw[base..base + self.brownian_dim]
    }

    pub fn state(&self, path: usize, node: usize) -> DVector<f64> {
        DVector::from_column_slice(self.state_slice(path, node))
    }

    pub fn control(&self, path: usize, node: usize) -> DVector<f64> {
        DVector::from_column_slice(self.control_slice(path, node))
    }

    pub fn dw(&self, path: usize, step: usize) -> DVector<f64> {
        DVector::from_column_slice(self.dw_slice(path, step))
    }

    /// The realized control values as a dense table.
    pub fn realized_control(&self) -> PathTable {
        let mut tbl = PathTable::zeros(self.n_paths, self.grid.n_nodes(), self.control_dim);
        for p in 0..self.n_paths {
            for n in 0..self.grid.n_nodes() {
                tbl.set(p, n, &self.control(p, n));
            }
        }
        tbl
    }

    /// Checksum over the Brownian increments; equal checksums certify that
    /// two bundles consumed identical noise (the CRN contract).
    pub fn noise_checksum(&self) -> String {
        rng::noise_checksum(&self.dw)
    }

    pub fn shares_noise_with(&self, other: &PathBundle) -> bool {
        Arc::ptr_eq(&self.dw, &other.dw) || self.noise_checksum() == other.noise_checksum()
    }

    /// Columnar CSV export: `path_id,t,x_1..x_d,u_1..u_k`.
    pub fn write_csv(&self, mut out: impl Write, config_hash: &str) -> Result<()> {
        writeln!(out, "# config_hash={config_hash}")?;
        let mut header = String::from("path_id,t");
        for i in 0..self.state_dim {
            header.push_str(&format!(",x_{}", i + 1));
        }
        for i in 0..self.control_dim {
            header.push_str(&format!(",u_{}", i + 1));
        }
        writeln!(out, "{header}")?;
        for p in 0..self.n_paths {
            for n in 0..self.grid.n_nodes() {
                let mut line = format!("{p},{}", self.grid.node(n));
                for v in self.state_slice(p, n) {
                    line.push_str(&format!(",{v}"));
                }
                for v in self.control_slice(p, n) {
                    line.push_str(&format!(",{v}"));
                }
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

fn check_finite(x: &DVector<f64>, path: usize, step: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Simulation {
            path,
            step,
            detail: "state left the finite range (blow-up)".into(),
        });
    }
    Ok(())
}

/// Euler scheme for the controlled state equation
/// `x_{n+1} = x_n + b(t_n, x_n, u_n) dt + sum_k sigma_k(t_n, x_n, u_n) dW^k_n`.
pub fn simulate_state(
    field: &MartingaleField,
    drift: &Drift,
    law: &ControlLaw,
    x0: &DVector<f64>,
    grid: TimeGrid,
    n_paths: usize,
    noise: &Noise,
) -> Result<PathBundle> {
    let d = field.state_dim();
    let k = field.control_dim();
    let m = field.brownian_dim();
    if x0.len() != d {
        return Err(Error::dim("simulate_state: x0", d, x0.len()));
    }
    if law.dim() != k {
        return Err(Error::dim("simulate_state: control law", k, law.dim()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("simulate_state: x0 must be finite".into()));
    }
    let n_steps = grid.n_steps();
    let n_nodes = grid.n_nodes();
    let dt = grid.dt();

    struct Block {
        x: Vec<f64>,
        u: Vec<f64>,
        dw: Vec<f64>,
    }

    let per_block = |range: std::ops::Range<usize>| -> Result<Block> {
        let len = range.len();
        let mut bx = Vec::with_capacity(len * n_nodes * d);
        let mut bu = Vec::with_capacity(len * n_nodes * k);
        let mut bdw = Vec::with_capacity(len * n_steps * m);
        for p in range {
            let dw = noise.increments(p, n_steps, m, dt);
            let mut x = x0.clone();
            for n in 0..n_steps {
                let t = grid.node(n);
                let u = law.eval(n, t, &x, p);
                bx.extend_from_slice(x.as_slice());
                bu.extend_from_slice(u.as_slice());
                let dw_n = DVector::from_column_slice(&dw[n * m..(n + 1) * m]);
                let mut next = &x + drift.eval(t, &x, &u) * dt;
                next += field.increment(t, &x, &u, &dw_n)?;
                check_finite(&next, p, n)?;
                x = next;
            }
            let u_t = law.eval(n_steps, grid.horizon(), &x, p);
            bx.extend_from_slice(x.as_slice());
            bu.extend_from_slice(u_t.as_slice());
            bdw.extend_from_slice(&dw);
        }
        Ok(Block {
            x: bx,
            u: bu,
            dw: bdw,
        })
    };

    let merged = par_block_reduce(
        n_paths,
        per_block,
        |a, b| match (a, b) {
            (Ok(mut a), Ok(b)) => {
                a.x.extend(b.x);
                a.u.extend(b.u);
                a.dw.extend(b.dw);
                Ok(a)
            }
            (Err(e), _) | (_, Err(e)) => Err(e),
        },
    )
    .ok_or_else(|| Error::Input("simulate_state: n_paths must be positive".into()))??;

    Ok(PathBundle {
        grid,
        n_paths,
        state_dim: d,
        control_dim: k,
        brownian_dim: m,
        seed: noise.seed(),
        x: merged.x,
        u: merged.u,
        dw: Arc::new(merged.dw),
    })
}

/// Euler scheme for the variational equation along `(xbar, ubar)`:
///
/// ```text
/// xhat_{n+1} = xhat_n + (b_x xhat_n + b_u du_n) dt
///            + sum_k [ (d sigma_k/dx) xhat_n + (d sigma_k/du) du_n ] dW^k_n,
/// ```
///
/// with all coefficients frozen along the reference bundle and xhat(0) = 0.
/// The returned bundle stores `du` in its control slot and shares the
/// reference noise.
pub fn simulate_variational(
    field: &MartingaleField,
    drift: &Drift,
    bar: &PathBundle,
    dir: &PathTable,
) -> Result<PathBundle> {
    let d = field.state_dim();
    let k = field.control_dim();
    let m = field.brownian_dim();
    if dir.n_paths != bar.n_paths || dir.n_nodes != bar.grid.n_nodes() {
        return Err(Error::Input(
            "simulate_variational: direction table does not match the reference bundle".into(),
        ));
    }
    if dir.dim != k {
        return Err(Error::dim("simulate_variational: direction", k, dir.dim));
    }
    let grid = bar.grid;
    let n_steps = grid.n_steps();
    let n_nodes = grid.n_nodes();
    let dt = grid.dt();

    let per_block = |range: std::ops::Range<usize>| -> Result<(Vec<f64>, Vec<f64>)> {
        let len = range.len();
        let mut hx = Vec::with_capacity(len * n_nodes * d);
        let mut hu = Vec::with_capacity(len * n_nodes * k);
        for p in range {
            let mut xhat: DVector<f64> = DVector::zeros(d);
            for n in 0..n_steps {
                let t = grid.node(n);
                let xb = bar.state(p, n);
                let ub = bar.control(p, n);
                let du = dir.value(p, n);
                hx.extend_from_slice(xhat.as_slice());
                hu.extend_from_slice(du.as_slice());
                let bx = drift.grad_x(t, &xb, &ub);
                let bu = drift.grad_u(t, &xb, &ub);
                let mut next = &xhat + (&bx * &xhat + &bu * &du) * dt;
                let dw = bar.dw_slice(p, n);
                for (kk, factor) in field.factors().iter().enumerate() {
                    let jx = factor.grad_x(t, &xb, &ub);
                    let ju = factor.grad_u(t, &xb, &ub);
                    next += (jx * &xhat + ju * &du) * dw[kk];
                }
                check_finite(&next, p, n)?;
                xhat = next;
            }
            hx.extend_from_slice(xhat.as_slice());
            hu.extend_from_slice(dir.value(p, n_steps).as_slice());
        }
        Ok((hx, hu))
    };

    let (x, u) = par_block_reduce(
        n_paths_of(bar),
        per_block,
        |a, b| match (a, b) {
            (Ok((mut ax, mut au)), Ok((bx, bu))) => {
                ax.extend(bx);
                au.extend(bu);
                Ok((ax, au))
            }
            (Err(e), _) | (_, Err(e)) => Err(e),
        },
    )
    .unwrap()?;

    Ok(PathBundle {
        grid,
        n_paths: bar.n_paths,
        state_dim: d,
        control_dim: k,
        brownian_dim: m,
        seed: bar.seed,
        x,
        u,
        dw: bar.dw.clone(),
    })
}

fn n_paths_of(b: &PathBundle) -> usize {
    b.n_paths
}

/// Left-endpoint Riemann sum of the generalized Ito integral along each path:
/// `sum_n sum_k sigma_k(t_n, x_n, u_n) dW^k_n`.
pub fn ito_integral(field: &MartingaleField, bundle: &PathBundle) -> Result<Vec<DVector<f64>>> {
    let m = field.brownian_dim();
    if bundle.brownian_dim != m {
        return Err(Error::dim("ito_integral: bundle drivers", m, bundle.brownian_dim));
    }
    (0..bundle.n_paths)
        .map(|p| {
            let mut acc = DVector::zeros(field.state_dim());
            for n in 0..bundle.grid.n_steps() {
                let t = bundle.grid.node(n);
                let inc = field.increment(
                    t,
                    &bundle.state(p, n),
                    &bundle.control(p, n),
                    &bundle.dw(p, n),
                )?;
                acc += inc;
            }
            Ok(acc)
        })
        .collect()
}

/// Realized vs. predicted joint quadratic covariation of the integrals along
/// two bundles driven by the same noise.
pub struct CovariationReport {
    /// Per-path realized sum `sum_n dM(X)_n dM(Y)_n^T`.
    pub realized: Vec<DMatrix<f64>>,
    /// Per-path Riemann sum `sum_n q(t_n, X_n, uX_n, Y_n, uY_n) dt`.
    pub predicted: Vec<DMatrix<f64>>,
    /// Root-mean-square Frobenius discrepancy across paths.
    pub rms_discrepancy: f64,
}

pub fn realized_covariation(
    field: &MartingaleField,
    bundle_x: &PathBundle,
    bundle_y: &PathBundle,
) -> Result<CovariationReport> {
    if bundle_x.grid != bundle_y.grid || bundle_x.n_paths != bundle_y.n_paths {
        return Err(Error::Input("realized_covariation: bundles do not share a grid".into()));
    }
    if !bundle_x.shares_noise_with(bundle_y) {
        return Err(Error::Input(
            "realized_covariation: bundles do not share Brownian increments".into(),
        ));
    }
    let d = field.state_dim();
    let dt = bundle_x.grid.dt();
    let mut realized = Vec::with_capacity(bundle_x.n_paths);
    let mut predicted = Vec::with_capacity(bundle_x.n_paths);
    let mut sq_acc = 0.0;
    for p in 0..bundle_x.n_paths {
        let mut r = DMatrix::zeros(d, d);
        let mut q_sum = DMatrix::zeros(d, d);
        for n in 0..bundle_x.grid.n_steps() {
            let t = bundle_x.grid.node(n);
            let xs = bundle_x.state(p, n);
            let us = bundle_x.control(p, n);
            let ys = bundle_y.state(p, n);
            let vs = bundle_y.control(p, n);
            let dw = bundle_x.dw(p, n);
            let dmx = field.increment(t, &xs, &us, &dw)?;
            let dmy = field.increment(t, &ys, &vs, &dw)?;
            r.ger(1.0, &dmx, &dmy, 1.0);
            q_sum += field.local_characteristic(t, &xs, &us, &ys, &vs)? * dt;
        }
        sq_acc += (&r - &q_sum).norm_squared();
        realized.push(r);
        predicted.push(q_sum);
    }
    Ok(CovariationReport {
        realized,
        predicted,
        rms_discrepancy: (sq_acc / bundle_x.n_paths as f64).sqrt(),
    })
}

/// Node-wise Monte Carlo estimates of `E |x_pert(t) - x_bar(t)|^2` for two
/// bundles driven by identical noise.
pub struct GapCurve {
    pub per_node: NodeMoments,
}

impl GapCurve {
    pub fn node_estimate(&self, node: usize) -> Estimate {
        self.per_node.estimate(node)
    }

    /// Supremum over grid nodes of the mean square gap.
    pub fn sup(&self) -> (usize, Estimate) {
        self.per_node.max_mean()
    }
}

pub fn perturbation_gap(bar: &PathBundle, pert: &PathBundle) -> Result<GapCurve> {
    if bar.grid != pert.grid || bar.n_paths != pert.n_paths {
        return Err(Error::Input("perturbation_gap: bundles do not share a grid".into()));
    }
    if !bar.shares_noise_with(pert) {
        return Err(Error::Input(
            "perturbation_gap: common random numbers violated (noise checksums differ)".into(),
        ));
    }
    let n_nodes = bar.grid.n_nodes();
    let moments = par_block_reduce(
        bar.n_paths,
        |range| {
            let mut acc = NodeMoments::zeros(n_nodes);
            for p in range.clone() {
                for n in 0..n_nodes {
                    let a = bar.state_slice(p, n);
                    let b = pert.state_slice(p, n);
                    let gap: f64 = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum();
                    acc.add_sample(n, gap);
                }
            }
            acc.n += range.len();
            acc
        },
        NodeMoments::merge,
    )
    .unwrap();
    Ok(GapCurve { per_node: moments })
}

/// One rung of the perturbation ladder: gap and remainder statistics for a
/// single epsilon, produced by the streaming study below.
pub struct LadderRung {
    pub eps: f64,
    pub gap: NodeMoments,
    pub remainder: NodeMoments,
}

impl LadderRung {
    pub fn sup_gap(&self) -> Estimate {
        self.gap.max_mean().1
    }

    pub fn sup_remainder(&self) -> Estimate {
        self.remainder.max_mean().1
    }
}

/// Streaming convergence study over an epsilon ladder. For every path the
/// reference state, the variational state, and one perturbed state per
/// epsilon evolve together on shared noise; only node-wise moments of
/// `|x_eps - x_bar|^2` and `|(x_eps - x_bar)/eps - xhat|^2` are kept, so the
/// memory footprint is independent of the path count.
///
/// The candidate law is realized along the reference trajectory, matching the
/// convex perturbation `u_eps = u_bar + eps (u - u_bar)` of control processes.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_ladder_study(
    field: &MartingaleField,
    drift: &Drift,
    bar_law: &ControlLaw,
    candidate_law: &ControlLaw,
    x0: &DVector<f64>,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    eps_ladder: &[f64],
) -> Result<Vec<LadderRung>> {
    if eps_ladder.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
        return Err(Error::Input("eps ladder entries must lie in (0, 1]".into()));
    }
    let d = field.state_dim();
    let m = field.brownian_dim();
    let n_steps = grid.n_steps();
    let n_nodes = grid.n_nodes();
    let dt = grid.dt();
    let n_eps = eps_ladder.len();

    struct BlockAcc {
        gap: Vec<NodeMoments>,
        rem: Vec<NodeMoments>,
    }

    let per_block = |range: std::ops::Range<usize>| -> Result<BlockAcc> {
        let mut acc = BlockAcc {
            gap: vec![NodeMoments::zeros(n_nodes); n_eps],
            rem: vec![NodeMoments::zeros(n_nodes); n_eps],
        };
        for p in range.clone() {
            let dw = rng::brownian_increments(seed, p, n_steps, m, dt);
            let mut xbar = x0.clone();
            let mut xhat: DVector<f64> = DVector::zeros(d);
            let mut xeps: Vec<DVector<f64>> = vec![x0.clone(); n_eps];
            for n in 0..=n_steps {
                for (i, e) in eps_ladder.iter().enumerate() {
                    let gap = (&xeps[i] - &xbar).norm_squared();
                    acc.gap[i].add_sample(n, gap);
                    let eta = (&xeps[i] - &xbar) / *e - &xhat;
                    acc.rem[i].add_sample(n, eta.norm_squared());
                }
                if n == n_steps {
                    break;
                }
                let t = grid.node(n);
                let ubar = bar_law.eval(n, t, &xbar, p);
                let ucand = candidate_law.eval(n, t, &xbar, p);
                let du = &ucand - &ubar;
                let dw_n = DVector::from_column_slice(&dw[n * m..(n + 1) * m]);

                // variational step with frozen coefficients
                let bx = drift.grad_x(t, &xbar, &ubar);
                let bu = drift.grad_u(t, &xbar, &ubar);
                let mut hat_next = &xhat + (&bx * &xhat + &bu * &du) * dt;
                for (kk, factor) in field.factors().iter().enumerate() {
                    let jx = factor.grad_x(t, &xbar, &ubar);
                    let ju = factor.grad_u(t, &xbar, &ubar);
                    hat_next += (jx * &xhat + ju * &du) * dw_n[kk];
                }

                // perturbed states
                for (i, e) in eps_ladder.iter().enumerate() {
                    let ue = &ubar + &du * *e;
                    let mut next = &xeps[i] + drift.eval(t, &xeps[i], &ue) * dt;
                    next += field.increment(t, &xeps[i], &ue, &dw_n)?;
                    check_finite(&next, p, n)?;
                    xeps[i] = next;
                }

                // reference state
                let mut bar_next = &xbar + drift.eval(t, &xbar, &ubar) * dt;
                bar_next += field.increment(t, &xbar, &ubar, &dw_n)?;
                check_finite(&bar_next, p, n)?;
                xbar = bar_next;
                check_finite(&hat_next, p, n)?;
                xhat = hat_next;
            }
        }
        for i in 0..n_eps {
            acc.gap[i].n += range.len();
            acc.rem[i].n += range.len();
        }
        Ok(acc)
    };

    let merged = par_block_reduce(
        n_paths,
        per_block,
        |a, b| match (a, b) {
            (Ok(mut a), Ok(b)) => {
                for i in 0..n_eps {
                    let g = std::mem::replace(&mut a.gap[i], NodeMoments::zeros(0));
                    a.gap[i] = g.merge(b.gap[i].clone());
                    let r = std::mem::replace(&mut a.rem[i], NodeMoments::zeros(0));
                    a.rem[i] = r.merge(b.rem[i].clone());
                }
                Ok(a)
            }
            (Err(e), _) | (_, Err(e)) => Err(e),
        },
    )
    .ok_or_else(|| Error::Input("perturbation_ladder_study: n_paths must be positive".into()))??;

    Ok(eps_ladder
        .iter()
        .zip(merged.gap.into_iter().zip(merged.rem))
        .map(|(&eps, (gap, remainder))| LadderRung {
            eps,
            gap,
            remainder,
        })
        .collect())
}
