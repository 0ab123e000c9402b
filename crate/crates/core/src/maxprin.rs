//! Hamiltonian evaluation, the control-gradient stationarity scan, the
//! directional-derivative consistency check for the cost functional, and the
//! sufficiency certificate under declared convexity.
//!
//! All statements the theory makes almost surely are tested here as Monte
//! Carlo estimates with three-standard-error bands.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::adjoint::AdjointTriple;
use crate::control::ControlLaw;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::problem::ControlProblem;
use crate::rng;
use crate::sde::PathBundle;
use crate::stats::{extrapolate_to_zero, par_block_reduce, Estimate};

/// Hamiltonian `H(t,x,u,y,z) = <y, b(t,x,u)> + tr[z q*(t,x,u,xbar,ubar)] + f(t,x,u)`
/// with the anchor pair `(xbar, ubar)` fixed along the reference trajectory.
/// The free pair sits in the differentiated slot of `q*`, so the control
/// gradient of this function is exactly the stationarity quantity of
/// [`hamiltonian_u`].
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    problem: &ControlProblem,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    anchor_x: &DVector<f64>,
    anchor_u: &DVector<f64>,
) -> Result<f64> {
    let d = problem.state_dim();
    if x.len() != d || y.len() != d || anchor_x.len() != d {
        return Err(Error::dim("hamiltonian: state", d, x.len()));
    }
    let k = problem.control_dim();
    if u.len() != k || anchor_u.len() != k {
        return Err(Error::dim("hamiltonian: control", k, u.len()));
    }
    let mut trace_term = 0.0;
    for factor in problem.field.factors() {
        let s_free = factor.eval(t, x, u);
        let s_anchor = factor.eval(t, anchor_x, anchor_u);
        trace_term += s_free.dot(&(z * s_anchor));
    }
    Ok(y.dot(&problem.drift.eval(t, x, u)) + trace_term + problem.cost.running(t, x, u))
}

/// Control gradient of the Hamiltonian along the reference pair:
/// `b_u^T y + (d/du tr[z q*])^* + f_u^T`.
pub fn hamiltonian_u(
    problem: &ControlProblem,
    t: f64,
    xbar: &DVector<f64>,
    ubar: &DVector<f64>,
    y: &DVector<f64>,
    z: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let bu = problem.drift.grad_u(t, xbar, ubar);
    let gu = problem.field.trace_form_grad_u(z, t, xbar, ubar)?;
    let fu = problem.cost.running_grad_u(t, xbar, ubar);
    Ok(bu.transpose() * y + gu + fu)
}

/// Directional-derivative consistency report: one-sided difference quotients
/// of the cost down the epsilon ladder against the variational formula
/// `E[int (f_x xhat + f_u du) dt + Phi_x(xbar_T) xhat_T]`, with common random
/// numbers throughout and per-path extrapolation to zero.
pub struct GateauxReport {
    pub eps: Vec<f64>,
    pub quotients: Vec<Estimate>,
    pub extrapolated: Estimate,
    pub formula: Estimate,
    /// Per-path `extrapolated - formula` statistics; the acceptance quantity.
    pub discrepancy: Estimate,
}

#[allow(clippy::too_many_arguments)]
pub fn gateaux_check(
    problem: &ControlProblem,
    bar_law: &ControlLaw,
    candidate_law: &ControlLaw,
    eps_ladder: &[f64],
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<GateauxReport> {
    if eps_ladder.len() < 2 {
        return Err(Error::Input("gateaux_check: need at least two epsilons".into()));
    }
    if eps_ladder.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
        return Err(Error::Input("gateaux_check: epsilons must lie in (0, 1]".into()));
    }
    let field = &problem.field;
    let drift = &problem.drift;
    let cost = &problem.cost;
    let d = problem.state_dim();
    let m = field.brownian_dim();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let n_eps = eps_ladder.len();

    // Moment accumulators: quotient per eps, extrapolant, formula, discrepancy.
    #[derive(Clone)]
    struct Acc {
        sums: Vec<f64>,
        sum_sqs: Vec<f64>,
        n: usize,
    }
    let width = n_eps + 3;

    let per_block = |range: std::ops::Range<usize>| -> Result<Acc> {
        let mut acc = Acc {
            sums: vec![0.0; width],
            sum_sqs: vec![0.0; width],
            n: range.len(),
        };
        for p in range {
            let dw = rng::brownian_increments(seed, p, n_steps, m, dt);
            let mut xbar = problem.x0.clone();
            let mut xhat: DVector<f64> = DVector::zeros(d);
            let mut xeps: Vec<DVector<f64>> = vec![problem.x0.clone(); n_eps];
            let mut cost_bar = 0.0;
            let mut cost_eps = vec![0.0; n_eps];
            let mut formula = 0.0;
            for n in 0..n_steps {
                let t = grid.node(n);
                let ubar = bar_law.eval(n, t, &xbar, p);
                let ucand = candidate_law.eval(n, t, &xbar, p);
                let du = &ucand - &ubar;
                let dw_n = DVector::from_column_slice(&dw[n * m..(n + 1) * m]);

                cost_bar += cost.running(t, &xbar, &ubar) * dt;
                formula += (cost.running_grad_x(t, &xbar, &ubar).dot(&xhat)
                    + cost.running_grad_u(t, &xbar, &ubar).dot(&du))
                    * dt;

                let bx = drift.grad_x(t, &xbar, &ubar);
                let bu = drift.grad_u(t, &xbar, &ubar);
                let mut hat_next = &xhat + (&bx * &xhat + &bu * &du) * dt;
                for (kk, factor) in field.factors().iter().enumerate() {
                    let jx = factor.grad_x(t, &xbar, &ubar);
                    let ju = factor.grad_u(t, &xbar, &ubar);
                    hat_next += (jx * &xhat + ju * &du) * dw_n[kk];
                }

                for (i, e) in eps_ladder.iter().enumerate() {
                    let ue = &ubar + &du * *e;
                    cost_eps[i] += cost.running(t, &xeps[i], &ue) * dt;
                    let mut next = &xeps[i] + drift.eval(t, &xeps[i], &ue) * dt;
                    next += field.increment(t, &xeps[i], &ue, &dw_n)?;
                    if next.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Simulation {
                            path: p,
                            step: n,
                            detail: "perturbed state left the finite range".into(),
                        });
                    }
                    xeps[i] = next;
                }

                let mut bar_next = &xbar + drift.eval(t, &xbar, &ubar) * dt;
                bar_next += field.increment(t, &xbar, &ubar, &dw_n)?;
                if bar_next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Simulation {
                        path: p,
                        step: n,
                        detail: "reference state left the finite range".into(),
                    });
                }
                xbar = bar_next;
                xhat = hat_next;
            }
            cost_bar += cost.terminal(&xbar);
            formula += cost.terminal_grad(&xbar).dot(&xhat);

            let quotients: Vec<f64> = (0..n_eps)
                .map(|i| {
                    let c = cost_eps[i] + cost.terminal(&xeps[i]);
                    (c - cost_bar) / eps_ladder[i]
                })
                .collect();
            let extr = extrapolate_to_zero(eps_ladder, &quotients);

            for (i, q) in quotients.iter().enumerate() {
                acc.sums[i] += q;
                acc.sum_sqs[i] += q * q;
            }
            acc.sums[n_eps] += extr;
            acc.sum_sqs[n_eps] += extr * extr;
            acc.sums[n_eps + 1] += formula;
            acc.sum_sqs[n_eps + 1] += formula * formula;
            let disc = extr - formula;
            acc.sums[n_eps + 2] += disc;
            acc.sum_sqs[n_eps + 2] += disc * disc;
        }
        Ok(acc)
    };

    let merged = par_block_reduce(
        n_paths,
        per_block,
        |a, b| match (a, b) {
            (Ok(mut a), Ok(b)) => {
                for i in 0..width {
                    a.sums[i] += b.sums[i];
                    a.sum_sqs[i] += b.sum_sqs[i];
                }
                a.n += b.n;
                Ok(a)
            }
            (Err(e), _) | (_, Err(e)) => Err(e),
        },
    )
    .ok_or_else(|| Error::Input("gateaux_check: n_paths must be positive".into()))??;

    let est = |i: usize| Estimate::from_moments(merged.sums[i], merged.sum_sqs[i], merged.n);
    Ok(GateauxReport {
        eps: eps_ladder.to_vec(),
        quotients: (0..n_eps).map(est).collect(),
        extrapolated: est(n_eps),
        formula: est(n_eps + 1),
        discrepancy: est(n_eps + 2),
    })
}

/// Node-wise estimates of `E[ H_u (u - ubar) ]` for one candidate control.
pub struct ViCandidateScan {
    pub per_node: Vec<Estimate>,
    pub min_node: usize,
    pub min_estimate: Estimate,
}

/// Scan of the variational inequality over candidate controls. A node
/// violates the necessary condition when its estimate drops below
/// `-max(3 se, abs_tol)`.
pub struct ViScanReport {
    pub candidates: Vec<ViCandidateScan>,
    pub min_estimate: Estimate,
    pub violations: usize,
    pub abs_tol: f64,
}

pub fn variational_inequality_scan(
    problem: &ControlProblem,
    bar: &PathBundle,
    adj: &AdjointTriple,
    candidates: &[ControlLaw],
    abs_tol: f64,
) -> Result<ViScanReport> {
    if adj.n_paths != bar.n_paths || adj.n_nodes != bar.grid.n_nodes() {
        return Err(Error::Input("variational_inequality_scan: adjoint shape mismatch".into()));
    }
    if candidates.is_empty() {
        return Err(Error::Input("variational_inequality_scan: no candidates".into()));
    }
    let n_steps = bar.grid.n_steps();
    let mut out = Vec::with_capacity(candidates.len());
    let mut global_min: Option<Estimate> = None;
    let mut violations = 0;
    for cand in candidates {
        let per_node: Vec<Estimate> = (0..n_steps)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&n| {
                let t = bar.grid.node(n);
                let samples: Vec<f64> = (0..bar.n_paths)
                    .map(|p| {
                        let xb = bar.state(p, n);
                        let ub = bar.control(p, n);
                        let hu = hamiltonian_u(problem, t, &xb, &ub, &adj.y(p, n), &adj.z(p, n))?;
                        let du = cand.eval(n, t, &xb, p) - ub;
                        Ok(hu.dot(&du))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok(Estimate::from_samples(&samples))
            })
            .collect::<Result<Vec<Estimate>>>()?;
        let (min_node, min_estimate) = per_node
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.mean.total_cmp(&b.1.mean))
            .map(|(i, e)| (i, *e))
            .expect("n_steps > 0");
        for e in &per_node {
            if e.mean < -(3.0 * e.se).max(abs_tol) {
                violations += 1;
            }
        }
        if global_min.is_none_or(|g| min_estimate.mean < g.mean) {
            global_min = Some(min_estimate);
        }
        out.push(ViCandidateScan {
            per_node,
            min_node,
            min_estimate,
        });
    }
    Ok(ViScanReport {
        candidates: out,
        min_estimate: global_min.expect("at least one candidate"),
        violations,
        abs_tol,
    })
}

/// Monte Carlo estimate of `J(law)` with left-endpoint quadrature.
pub fn estimate_cost(
    problem: &ControlProblem,
    law: &ControlLaw,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate> {
    Ok(estimate_cost_difference(problem, law, None, grid, n_paths, seed)?.0)
}

/// Costs of one or two laws on shared noise. With a second law the returned
/// difference statistics are per-path `J_a - J_b` samples (common random
/// numbers).
pub fn estimate_cost_difference(
    problem: &ControlProblem,
    law_a: &ControlLaw,
    law_b: Option<&ControlLaw>,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<(Estimate, Option<Estimate>, Option<Estimate>)> {
    let field = &problem.field;
    let drift = &problem.drift;
    let cost = &problem.cost;
    let m = field.brownian_dim();
    let n_steps = grid.n_steps();
    let dt = grid.dt();

    #[derive(Clone)]
    struct Acc {
        a: (f64, f64),
        b: (f64, f64),
        diff: (f64, f64),
        n: usize,
    }

    let per_block = |range: std::ops::Range<usize>| -> Result<Acc> {
        let mut acc = Acc {
            a: (0.0, 0.0),
            b: (0.0, 0.0),
            diff: (0.0, 0.0),
            n: range.len(),
        };
        for p in range {
            let dw = rng::brownian_increments(seed, p, n_steps, m, dt);
            let mut xa = problem.x0.clone();
            let mut xb = problem.x0.clone();
            let mut ca = 0.0;
            let mut cb = 0.0;
            for n in 0..n_steps {
                let t = grid.node(n);
                let dw_n = DVector::from_column_slice(&dw[n * m..(n + 1) * m]);
                let ua = law_a.eval(n, t, &xa, p);
                ca += cost.running(t, &xa, &ua) * dt;
                let mut next = &xa + drift.eval(t, &xa, &ua) * dt;
                next += field.increment(t, &xa, &ua, &dw_n)?;
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Simulation {
                        path: p,
                        step: n,
                        detail: "state left the finite range".into(),
                    });
                }
                xa = next;
                if let Some(lb) = law_b {
                    let ub = lb.eval(n, t, &xb, p);
                    cb += cost.running(t, &xb, &ub) * dt;
                    let mut nextb = &xb + drift.eval(t, &xb, &ub) * dt;
                    nextb += field.increment(t, &xb, &ub, &dw_n)?;
                    if nextb.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Simulation {
                            path: p,
                            step: n,
                            detail: "comparison state left the finite range".into(),
                        });
                    }
                    xb = nextb;
                }
            }
            ca += cost.terminal(&xa);
            acc.a.0 += ca;
            acc.a.1 += ca * ca;
            if law_b.is_some() {
                cb += cost.terminal(&xb);
                acc.b.0 += cb;
                acc.b.1 += cb * cb;
                let d = ca - cb;
                acc.diff.0 += d;
                acc.diff.1 += d * d;
            }
        }
        Ok(acc)
    };

    let merged = par_block_reduce(
        n_paths,
        per_block,
        |a, b| match (a, b) {
            (Ok(mut a), Ok(b)) => {
                a.a.0 += b.a.0;
                a.a.1 += b.a.1;
                a.b.0 += b.b.0;
                a.b.1 += b.b.1;
                a.diff.0 += b.diff.0;
                a.diff.1 += b.diff.1;
                a.n += b.n;
                Ok(a)
            }
            (Err(e), _) | (_, Err(e)) => Err(e),
        },
    )
    .ok_or_else(|| Error::Input("estimate_cost: n_paths must be positive".into()))??;

    let ja = Estimate::from_moments(merged.a.0, merged.a.1, merged.n);
    if law_b.is_some() {
        let jb = Estimate::from_moments(merged.b.0, merged.b.1, merged.n);
        let diff = Estimate::from_moments(merged.diff.0, merged.diff.1, merged.n);
        Ok((ja, Some(jb), Some(diff)))
    } else {
        Ok((ja, None, None))
    }
}

/// One sampled perturbation in the sufficiency check.
pub struct SufficiencySample {
    /// Per-path statistics of `J(u) - J(ubar)` under common random numbers.
    pub excess: Estimate,
}

pub struct SufficiencyReport {
    pub samples: Vec<SufficiencySample>,
    /// Count of samples with mean below `-3 se`.
    pub failures: usize,
    pub mean_excess: f64,
    /// Midpoint-convexity spot-check violations of the Hamiltonian (warning
    /// only; convexity is declared by the user, not verified symbolically).
    pub convexity_warnings: usize,
}

/// Samples random admissible perturbations `u = ubar + delta` with unit
/// L2([0,T])-norm directions and checks `J(u) >= J(ubar) - 3 se` under common
/// random numbers. Extra candidate laws (for instance a synthesized optimal
/// control) can be prepended through `extra_candidates`.
#[allow(clippy::too_many_arguments)]
pub fn sufficiency_check(
    problem: &ControlProblem,
    bar_law: &ControlLaw,
    adj: Option<&AdjointTriple>,
    bar: Option<&PathBundle>,
    extra_candidates: &[ControlLaw],
    n_samples: usize,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<SufficiencyReport> {
    if !problem.convex {
        return Err(Error::Input(
            "sufficiency_check requires the problem to be declared convex".into(),
        ));
    }
    let k = problem.control_dim();
    let n_nodes = grid.n_nodes();
    let mut rng = rng::path_rng(seed ^ 0x51ff1c1e4c, 0);
    let normal = StandardNormal;

    let mut laws: Vec<ControlLaw> = extra_candidates.to_vec();
    for _ in 0..n_samples {
        let mut offsets = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            offsets.push(DVector::from_fn(k, |_, _| {
                let z: f64 = normal.sample(&mut rng);
                z
            }));
        }
        // normalize to unit L2([0,T]) norm
        let dt = grid.dt();
        let norm_sq: f64 = offsets
            .iter()
            .take(grid.n_steps())
            .map(|v| v.norm_squared() * dt)
            .sum();
        let scale = if norm_sq > 0.0 { norm_sq.sqrt().recip() } else { 1.0 };
        for v in &mut offsets {
            *v *= scale;
        }
        laws.push(bar_law.with_offset(offsets));
    }

    let mut samples = Vec::with_capacity(laws.len());
    let mut failures = 0;
    let mut mean_excess = 0.0;
    for law in &laws {
        let (_, _, diff) =
            estimate_cost_difference(problem, law, Some(bar_law), grid, n_paths, seed)?;
        let excess = diff.expect("difference requested");
        if excess.mean < -3.0 * excess.se {
            failures += 1;
        }
        mean_excess += excess.mean;
        samples.push(SufficiencySample { excess });
    }
    mean_excess /= laws.len().max(1) as f64;

    // Midpoint-convexity spot check of the Hamiltonian on random pairs,
    // using solved costates when available.
    let mut convexity_warnings = 0;
    if let (Some(adj), Some(bar)) = (adj, bar) {
        let d = problem.state_dim();
        for _ in 0..64 {
            let p = (rng.next_u64() as usize) % bar.n_paths;
            let n = (rng.next_u64() as usize) % grid.n_steps();
            let t = grid.node(n);
            let y = adj.y(p, n);
            let z = adj.z(p, n);
            let anchor_x = bar.state(p, n);
            let anchor_u = bar.control(p, n);
            let mut draw = |len: usize| {
                DVector::from_fn(len, |_, _| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v
                })
            };
            let (xa, ua) = (draw(d), draw(k));
            let (xb, ub) = (draw(d), draw(k));
            let ha = hamiltonian(problem, t, &xa, &ua, &y, &z, &anchor_x, &anchor_u)?;
            let hb = hamiltonian(problem, t, &xb, &ub, &y, &z, &anchor_x, &anchor_u)?;
            let hm = hamiltonian(
                problem,
                t,
                &((&xa + &xb) * 0.5),
                &((&ua + &ub) * 0.5),
                &y,
                &z,
                &anchor_x,
                &anchor_u,
            )?;
            if hm > 0.5 * (ha + hb) + 1e-9 * (1.0 + ha.abs() + hb.abs()) {
                convexity_warnings += 1;
            }
        }
    }

    Ok(SufficiencyReport {
        samples,
        failures,
        mean_excess,
        convexity_warnings,
    })
}
