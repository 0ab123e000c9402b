//! Acceptance suite: one test per criterion, each printing a verdict line.
//!
//! The scalar benchmark family used throughout:
//!   - "bilinear":  b = u, sigma = x + u, quadratic cost, ubar = 0, u = 1
//!   - "lq":        A = 0, B = 1, Q = R = 1, G = 0, D in {0, 0.5}, x0 = 1
//!   - "det-lq":    zero field, b = -0.5 x + u, quadratic cost
//!   - "sine":      b = u, sigma = sin(x) + u (genuinely nonlinear)
//!
//! all on [0, 1] with dt = 1e-3 and common random numbers everywhere.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use smpcheck::adjoint::{self, RegressionBasis};
use smpcheck::control::{ControlDomain, ControlLaw};
use smpcheck::cost::CostSpec;
use smpcheck::field::{library, MartingaleField, SigmaFactor};
use smpcheck::lq::{self, CoeffTable, LQSpec};
use smpcheck::maxprin;
use smpcheck::problem::{ControlProblem, Drift};
use smpcheck::sde::{self, LadderRung, Noise};
use smpcheck::stats;
use smpcheck::TimeGrid;

const SEED: u64 = 42;
const EPS_LADDER: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

fn vec1(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

fn mat1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn const_law(v: f64) -> ControlLaw {
    ControlLaw::constant(vec1(v), ControlDomain::Unbounded)
}

fn verdict(name: &str, pass: bool) -> bool {
    println!("criterion {name}: {}", if pass { "PASS" } else { "FAIL" });
    pass
}

/// b = u, sigma = x + u, f = (x^2 + u^2)/2, Phi = x^2/2.
fn bilinear_problem() -> ControlProblem {
    ControlProblem {
        field: library::bilinear(1.0, 1.0),
        drift: Drift::linear(mat1(0.0), mat1(1.0)),
        cost: CostSpec::quadratic(mat1(1.0), mat1(1.0), mat1(1.0)),
        x0: vec1(1.0),
        convex: true,
    }
}

/// Zero field, b = -0.5 x + u, quadratic cost: all identities reduce to
/// quadrature.
fn deterministic_problem() -> ControlProblem {
    ControlProblem {
        field: library::zero(1, 1),
        drift: Drift::linear(mat1(-0.5), mat1(1.0)),
        cost: CostSpec::quadratic(mat1(1.0), mat1(2.0), mat1(1.0)),
        x0: vec1(1.0),
        convex: true,
    }
}

/// b = u, sigma = sin(x) + u.
fn sine_problem() -> ControlProblem {
    ControlProblem {
        field: library::scalar_sine(1.0, 1.0, 1.0),
        drift: Drift::linear(mat1(0.0), mat1(1.0)),
        cost: CostSpec::quadratic(mat1(1.0), mat1(1.0), mat1(1.0)),
        x0: vec1(1.0),
        convex: false,
    }
}

/// Scalar LQ benchmark: A = 0, B = 1, Q = R = 1, G = g, diffusion D.
fn lq_spec(g: f64, d_factor: f64) -> LQSpec {
    let fac = |v: f64| CoeffTable::Constant(mat1(v));
    LQSpec {
        a: fac(0.0),
        b: fac(1.0),
        q: fac(1.0),
        r: fac(1.0),
        g: mat1(g),
        c_factors: if d_factor == 0.0 { vec![] } else { vec![fac(0.0)] },
        d_factors: if d_factor == 0.0 { vec![] } else { vec![fac(d_factor)] },
        x0: vec1(1.0),
        horizon: 1.0,
        r_min: 1e-9,
    }
}

fn grid_1e3() -> TimeGrid {
    TimeGrid::new(1.0, 1000).unwrap()
}

/// The 20000-path ladder study on the bilinear benchmark, shared by the
/// first two criteria.
fn bilinear_ladder() -> &'static Vec<LadderRung> {
    static LADDER: OnceLock<Vec<LadderRung>> = OnceLock::new();
    LADDER.get_or_init(|| {
        let p = bilinear_problem();
        sde::perturbation_ladder_study(
            &p.field,
            &p.drift,
            &const_law(0.0),
            &const_law(1.0),
            &p.x0,
            grid_1e3(),
            20_000,
            SEED,
            &EPS_LADDER,
        )
        .unwrap()
    })
}

#[test]
fn criterion_1_perturbation_gap_rate() {
    let rungs = bilinear_ladder();
    let eps: Vec<f64> = rungs.iter().map(|r| r.eps).collect();
    let sup: Vec<f64> = rungs.iter().map(|r| r.sup_gap().mean).collect();
    let fit = stats::log_log_slope(&eps, &sup).unwrap();
    println!(
        "  slope of sup-t E|x_eps - xbar|^2 vs eps: {:.6} (ci +-{:.2e})",
        fit.slope, fit.ci_half_width
    );
    let pass = fit.slope >= 1.8 && fit.slope <= 2.2;
    assert!(verdict("1 (perturbation gap rate in [1.8, 2.2])", pass));
}

#[test]
fn criterion_2_variational_remainder_decay() {
    // The benchmark dynamics are affine in (x, u), so the first-order
    // remainder vanishes identically; the estimator must sit at the rounding
    // floor for every eps, which is the strongest admissible form of decay.
    let rungs = bilinear_ladder();
    let sup: Vec<f64> = rungs.iter().map(|r| r.sup_remainder().mean).collect();
    println!("  bilinear sup-t E|eta|^2 down the ladder: {sup:?}");
    let zero_floor = 1e-20;
    let affine_pass = sup.iter().all(|&v| v <= zero_floor);

    // Genuinely nonlinear dynamics exercise the monotone-decay branch with
    // the threshold frozen from the quadratic law (0.025/0.2)^2 ~ 0.016
    // plus Monte Carlo headroom.
    let p = sine_problem();
    let rungs = sde::perturbation_ladder_study(
        &p.field,
        &p.drift,
        &const_law(0.0),
        &const_law(1.0),
        &p.x0,
        grid_1e3(),
        8_000,
        SEED,
        &EPS_LADDER,
    )
    .unwrap();
    let sup: Vec<f64> = rungs.iter().map(|r| r.sup_remainder().mean).collect();
    println!("  sine sup-t E|eta|^2 down the ladder: {sup:?}");
    let decreasing = sup.windows(2).all(|w| w[1] < w[0]);
    let nonlinear_pass = decreasing && sup[3] <= 0.05 * sup[0];

    assert!(verdict(
        "2 (remainder identically zero on the affine benchmark; monotone quadratic decay on the sine problem)",
        affine_pass && nonlinear_pass
    ));
}

#[test]
fn criterion_3_cost_derivative_identity() {
    // (a) deterministic problem: quadrature-exact, absolute tolerance 1e-6.
    let det = deterministic_problem();
    let rep = maxprin::gateaux_check(
        &det,
        &const_law(0.2),
        &const_law(1.0),
        &EPS_LADDER,
        grid_1e3(),
        8,
        SEED,
    )
    .unwrap();
    println!(
        "  deterministic: extrapolated {} vs formula {} (disc {:.3e})",
        rep.extrapolated.mean, rep.formula.mean, rep.discrepancy.mean
    );
    let det_pass = rep.discrepancy.mean.abs() <= 1e-6;

    // (b) bilinear benchmark: max(3 se, 5% relative).
    let p = bilinear_problem();
    let rep = maxprin::gateaux_check(
        &p,
        &const_law(0.0),
        &const_law(1.0),
        &EPS_LADDER,
        grid_1e3(),
        20_000,
        SEED,
    )
    .unwrap();
    println!(
        "  bilinear: extrapolated {} vs formula {} (disc {:.3e} se {:.3e})",
        rep.extrapolated.mean, rep.formula.mean, rep.discrepancy.mean, rep.discrepancy.se
    );
    let tol = (3.0 * rep.discrepancy.se).max(0.05 * rep.formula.mean.abs());
    let mc_pass = rep.discrepancy.mean.abs() <= tol;

    assert!(verdict("3 (cost derivative: quotient limit = variational formula)", det_pass && mc_pass));
}

struct DualityCase {
    name: &'static str,
    problem: ControlProblem,
    bar_law: ControlLaw,
    cand_law: ControlLaw,
    n_paths: usize,
    abs_tol: f64,
}

fn duality_gap_for(case: &DualityCase) -> (f64, f64) {
    let grid = grid_1e3();
    let bar = sde::simulate_state(
        &case.problem.field,
        &case.problem.drift,
        &case.bar_law,
        &case.problem.x0,
        grid,
        case.n_paths,
        &Noise::Seeded(SEED),
    )
    .unwrap();
    let adj = adjoint::solve_adjoint(
        &case.problem.field,
        &bar,
        &case.problem.drift,
        &case.problem.cost,
        &RegressionBasis::default(),
    )
    .unwrap();
    let dir = adjoint::realized_direction(&bar, &case.cand_law);
    let hat = sde::simulate_variational(&case.problem.field, &case.problem.drift, &bar, &dir).unwrap();
    let gap = adjoint::duality_gap(
        &case.problem.field,
        &adj,
        &hat,
        &bar,
        &case.problem.drift,
        &case.problem.cost,
    )
    .unwrap();
    (gap.mean, gap.se)
}

#[test]
fn criterion_4_costate_duality() {
    let grid = grid_1e3();
    let lq0 = lq_spec(0.0, 0.0);
    let lq0_law = lq::riccati_oracle(&lq0, &grid).unwrap().feedback_law(ControlDomain::Unbounded);
    let lq5 = lq_spec(0.0, 0.5);
    let lq5_law = lq::riccati_oracle(&lq5, &grid).unwrap().feedback_law(ControlDomain::Unbounded);

    let cases = [
        DualityCase {
            name: "deterministic",
            problem: deterministic_problem(),
            bar_law: const_law(0.3),
            cand_law: const_law(1.0),
            n_paths: 8,
            abs_tol: 1e-8,
        },
        DualityCase {
            name: "lq benchmark (no diffusion)",
            problem: lq0.problem(&grid),
            bar_law: lq0_law,
            cand_law: const_law(0.0),
            n_paths: 64,
            abs_tol: 1e-8,
        },
        DualityCase {
            name: "lq benchmark (D = 0.5)",
            problem: lq5.problem(&grid),
            bar_law: lq5_law,
            cand_law: const_law(0.0),
            n_paths: 8_000,
            abs_tol: 0.0,
        },
        DualityCase {
            name: "bilinear",
            problem: bilinear_problem(),
            bar_law: const_law(0.0),
            cand_law: const_law(1.0),
            n_paths: 4_000,
            abs_tol: 0.0,
        },
        DualityCase {
            name: "sine",
            problem: sine_problem(),
            bar_law: const_law(0.0),
            cand_law: const_law(1.0),
            n_paths: 4_000,
            abs_tol: 0.0,
        },
    ];
    let mut pass = true;
    for case in &cases {
        let (gap, se) = duality_gap_for(case);
        let tol = (3.0 * se).max(case.abs_tol);
        let ok = gap.abs() <= tol;
        println!("  {}: gap {gap:.3e} se {se:.3e} tol {tol:.3e} {}", case.name, if ok { "ok" } else { "VIOLATED" });
        pass &= ok;
    }
    assert!(verdict("4 (duality gap within 3 se; 1e-8 when deterministic)", pass));
}

#[test]
fn criterion_5_lq_stationarity() {
    let grid = grid_1e3();
    let mut pass = true;

    for (d_factor, n_paths) in [(0.0, 64usize), (0.5, 32_000)] {
        let spec = lq_spec(0.0, d_factor);
        let oracle = lq::riccati_oracle(&spec, &grid).unwrap();
        let law = oracle.feedback_law(ControlDomain::Unbounded);
        let problem = spec.problem(&grid);
        let bar = sde::simulate_state(
            &problem.field,
            &problem.drift,
            &law,
            &problem.x0,
            grid,
            n_paths,
            &Noise::Seeded(SEED),
        )
        .unwrap();
        let adj = adjoint::solve_adjoint(&problem.field, &bar, &problem.drift, &problem.cost, &RegressionBasis::default())
            .unwrap();
        let res = lq::stationarity_residual(&spec, &adj, &bar).unwrap();
        // worst node and its standard error
        let mut worst = (0usize, 0usize, 0.0f64);
        for (n, mean) in res.per_node_mean.iter().enumerate() {
            for i in 0..mean.len() {
                if mean[i].abs() > worst.2 {
                    worst = (n, i, mean[i].abs());
                }
            }
        }
        let se = res.per_node_se[worst.0][worst.1];
        let tol = (3.0 * se).max(0.02 * res.scale);
        let ok = worst.2 <= tol;
        println!(
            "  D = {d_factor}: max residual {:.3e} (node {}) tol {:.3e} scale {:.3e} {}",
            worst.2, worst.0, tol, res.scale, if ok { "ok" } else { "VIOLATED" }
        );
        pass &= ok;
    }

    // negative control: ubar' = 0 must be flagged beyond 3 se
    let spec = lq_spec(0.0, 0.5);
    let problem = spec.problem(&grid);
    let zero_law = const_law(0.0);
    let bar = sde::simulate_state(&problem.field, &problem.drift, &zero_law, &problem.x0, grid, 64, &Noise::Seeded(SEED))
        .unwrap();
    let adj = adjoint::solve_adjoint(&problem.field, &bar, &problem.drift, &problem.cost, &RegressionBasis::default())
        .unwrap();
    let res = lq::stationarity_residual(&spec, &adj, &bar).unwrap();
    println!(
        "  negative control (ubar' = 0): max residual {:.3e}, flagged beyond 3 se: {}",
        res.max_norm, res.significant
    );
    pass &= res.significant && res.max_norm > 0.1;

    assert!(verdict("5 (lq stationarity within max(3 se, 2% scale); suboptimal control flagged)", pass));
}

#[test]
fn criterion_6_lq_oracle_optimality_and_value() {
    let grid = grid_1e3();
    let mut pass = true;

    // 50 random perturbations per diffusion level; the certificate also
    // fields the dynamic-programming competitor against the reference law.
    for (d_factor, n_paths) in [(0.0, 64usize), (0.5, 1_000)] {
        let spec = lq_spec(0.0, d_factor);
        let law = lq::riccati_oracle(&spec, &grid).unwrap().feedback_law(ControlDomain::Unbounded);
        let cert = lq::lq_optimality_certificate(&spec, &law, &grid, 50, n_paths, SEED).unwrap();
        let ok = cert.pass && cert.sufficiency.mean_excess > 0.0;
        println!(
            "  D = {d_factor}: {} samples, failures {}, mean excess {:.4} {}",
            cert.sufficiency.samples.len(),
            cert.sufficiency.failures,
            cert.sufficiency.mean_excess,
            if ok { "ok" } else { "VIOLATED" }
        );
        pass &= ok;
    }

    // closed-form value: P(0) -> tanh(1), J(ubar) = x0^2 P(0) / 2
    let spec = lq_spec(0.0, 0.0);
    let oracle = lq::riccati_oracle(&spec, &grid).unwrap();
    let law = oracle.feedback_law(ControlDomain::Unbounded);
    let problem = spec.problem(&grid);
    let bundle = sde::simulate_state(&problem.field, &problem.drift, &law, &problem.x0, grid, 64, &Noise::Seeded(SEED))
        .unwrap();
    let est = lq::lq_cost(&spec, &bundle).unwrap();
    let closed_form = 0.5 * 1f64.tanh();
    let tol = 3.0 * est.se + 0.02 * closed_form;
    let ok = (est.mean - closed_form).abs() <= tol;
    println!(
        "  value: lq_cost {} vs x0^2 tanh(1)/2 = {closed_form} (tol {tol:.2e}) {}",
        est.mean,
        if ok { "ok" } else { "VIOLATED" }
    );
    pass &= ok;

    // negative control: the certificate must reject ubar' = 0
    let cert = lq::lq_optimality_certificate(&lq_spec(0.0, 0.5), &const_law(0.0), &grid, 10, 256, SEED).unwrap();
    println!(
        "  negative control (ubar' = 0): certificate failures {} (expected >= 1)",
        cert.sufficiency.failures
    );
    pass &= !cert.pass;

    assert!(verdict("6 (oracle control optimal among 50 perturbations; value matches tanh closed form)", pass));
}

#[test]
fn criterion_7_classical_reduction() {
    let mut pass = true;

    // (a) local characteristic against the hand-coded sigma(x,u) sigma(y,v)^T
    // of the classical reduction, on a two-driver nonlinear field.
    let field = two_driver_field();
    let mut rng = smpcheck::rng::path_rng(SEED, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let [x, y, u, v, t] = random_args(&mut rng);
        let q = field
            .local_characteristic(t, &vec1(x), &vec1(u), &vec1(y), &vec1(v))
            .unwrap();
        // independent route: assemble the d x m factor matrices explicitly
        let s_x = classical_sigma_matrix(&field, t, x, u);
        let s_y = classical_sigma_matrix(&field, t, y, v);
        let classical = &s_x * s_y.transpose();
        worst = worst.max((q - classical).abs().max());
    }
    println!("  q vs classical factor product: max |diff| {worst:.3e}");
    pass &= worst <= 1e-10;

    // (b) stationarity gradient against the classical formula written with
    // z~ = z * sigma, along a solved noisy LQ pair.
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let spec = lq_spec(0.0, 0.5);
    let law = lq::riccati_oracle(&spec, &grid).unwrap().feedback_law(ControlDomain::Unbounded);
    let problem = spec.problem(&grid);
    let bar = sde::simulate_state(&problem.field, &problem.drift, &law, &problem.x0, grid, 256, &Noise::Seeded(SEED))
        .unwrap();
    let adj = adjoint::solve_adjoint(&problem.field, &bar, &problem.drift, &problem.cost, &RegressionBasis::default())
        .unwrap();
    let mut worst: f64 = 0.0;
    for n in 0..grid.n_steps() {
        let t = grid.node(n);
        for p in 0..bar.n_paths {
            let xb = bar.state(p, n);
            let ub = bar.control(p, n);
            let y = adj.y(p, n);
            let z = adj.z(p, n);
            let hu = maxprin::hamiltonian_u(&problem, t, &xb, &ub, &y, &z).unwrap();
            // classical route: z~ = z sigma(xbar, ubar), then
            // b_u^T y + sum_k (d sigma_k / du)^T z~_k + f_u
            let s = classical_sigma_matrix(&problem.field, t, xb[0], ub[0]);
            let z_tilde = &z * &s;
            let mut h = problem.drift.grad_u(t, &xb, &ub).transpose() * &y
                + problem.cost.running_grad_u(t, &xb, &ub);
            for (k, factor) in problem.field.factors().iter().enumerate() {
                h += factor.grad_u(t, &xb, &ub).transpose() * z_tilde.column(k);
            }
            worst = worst.max((hu - h).abs().max());
        }
    }
    println!("  H_u vs classical z~ formula along the noisy LQ pair: max |diff| {worst:.3e}");
    pass &= worst <= 1e-10;

    // (c) linearity condition residual for the induced linear field.
    let lin_field = spec.field(&grid);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let [x, y, u, v, t] = random_args(&mut rng);
        let a = mat1(rng_float(&mut rng, 2.0));
        let r = lin_field
            .condition_q_residual(t, &vec1(x), &vec1(u), &vec1(y), &vec1(v), &a)
            .unwrap();
        worst = worst.max(r.abs());
    }
    println!("  linear-field condition residual: max |r| {worst:.3e}");
    pass &= worst <= 1e-12;

    assert!(verdict("7 (classical reduction: q, H_u, and the linearity condition match hand-coded formulas)", pass));
}

#[test]
fn criterion_8_structural_properties() {
    let mut pass = true;
    let field = two_driver_field();
    let mut rng = smpcheck::rng::path_rng(SEED, 1);

    // transpose symmetry (1e-12) and diagonal PSD (-1e-10) on 1000 tuples
    let mut worst_sym: f64 = 0.0;
    let mut worst_eig = f64::INFINITY;
    for _ in 0..1000 {
        let [x, y, u, v, t] = random_args(&mut rng);
        let q_xy = field
            .local_characteristic(t, &vec1(x), &vec1(u), &vec1(y), &vec1(v))
            .unwrap();
        let q_yx = field
            .local_characteristic(t, &vec1(y), &vec1(v), &vec1(x), &vec1(u))
            .unwrap();
        worst_sym = worst_sym.max((&q_xy - q_yx.transpose()).abs().max());
        let q_diag = field
            .local_characteristic(t, &vec1(x), &vec1(u), &vec1(x), &vec1(u))
            .unwrap();
        worst_eig = worst_eig.min(q_diag.symmetric_eigen().eigenvalues.min());
    }
    println!("  q symmetry: max |q - q*| {worst_sym:.3e}; min diagonal eigenvalue {worst_eig:.3e}");
    pass &= worst_sym <= 1e-12 && worst_eig >= -1e-10;

    // analytic vs finite-difference gradients: trace forms, cost, Hamiltonian
    let mut worst_grad: f64 = 0.0;
    let cost = CostSpec::quadratic(mat1(1.0), mat1(1.0), mat1(1.0));
    let problem = ControlProblem {
        field: two_driver_field(),
        drift: Drift::linear(mat1(-0.3), mat1(1.0)),
        cost: cost.clone(),
        x0: vec1(1.0),
        convex: true,
    };
    for _ in 0..100 {
        let [x, _, u, _, t] = random_args(&mut rng);
        let xv = vec1(x);
        let uv = vec1(u);
        let z = mat1(rng_float(&mut rng, 1.5));
        // trace form vs central differences of tr[z q*(t, x', u', x, u)]
        let trace_at = |y: &DVector<f64>, v: &DVector<f64>| -> f64 {
            let q_star = field.local_characteristic(t, y, v, &xv, &uv).unwrap().transpose();
            (&z * q_star).trace()
        };
        let h = 1e-5 * (1.0 + x.abs());
        let fd = (trace_at(&vec1(x + h), &uv) - trace_at(&vec1(x - h), &uv)) / (2.0 * h);
        let gx = field.trace_form_grad_x(&z, t, &xv, &uv).unwrap();
        worst_grad = worst_grad.max((gx[0] - fd).abs() / (1.0 + fd.abs()));
        let hu = 1e-5 * (1.0 + u.abs());
        let fd = (trace_at(&xv, &vec1(u + hu)) - trace_at(&xv, &vec1(u - hu))) / (2.0 * hu);
        let gu = field.trace_form_grad_u(&z, t, &xv, &uv).unwrap();
        worst_grad = worst_grad.max((gu[0] - fd).abs() / (1.0 + fd.abs()));

        // cost gradients
        worst_grad = worst_grad.max(cost.gradient_fd_error(t, &xv, &uv));

        // Hamiltonian control gradient vs finite differences of H
        let y = vec1(rng_float(&mut rng, 1.0));
        let anchor_x = vec1(rng_float(&mut rng, 1.0));
        let anchor_u = vec1(rng_float(&mut rng, 1.0));
        let hu_analytic = maxprin::hamiltonian_u(&problem, t, &xv, &uv, &y, &z).unwrap();
        let h_at = |uu: f64| {
            maxprin::hamiltonian(&problem, t, &xv, &vec1(uu), &y, &z, &xv, &uv).unwrap()
        };
        let _ = (anchor_x, anchor_u);
        let fd = (h_at(u + hu) - h_at(u - hu)) / (2.0 * hu);
        worst_grad = worst_grad.max((hu_analytic[0] - fd).abs() / (1.0 + fd.abs()));
    }
    println!("  analytic vs finite-difference gradients: worst relative error {worst_grad:.3e}");
    pass &= worst_grad <= 1e-4;

    // realized vs predicted covariation: rms discrepancy decreasing under halving
    let gbm = library::scalar_gbm(1.0, 1);
    let drift = Drift::zero(1, 1);
    let mut grid = TimeGrid::new(1.0, 64).unwrap();
    let mut last = f64::INFINITY;
    let mut decreasing = true;
    let mut rms_path = Vec::new();
    for _ in 0..3 {
        let b = sde::simulate_state(&gbm, &drift, &const_law(0.0), &vec1(1.0), grid, 512, &Noise::Seeded(SEED))
            .unwrap();
        let rep = sde::realized_covariation(&gbm, &b, &b).unwrap();
        rms_path.push(rep.rms_discrepancy);
        decreasing &= rep.rms_discrepancy < last;
        last = rep.rms_discrepancy;
        grid = grid.refined();
    }
    println!("  covariation rms under dt halving: {rms_path:?}");
    pass &= decreasing;

    // bitwise reproducibility across thread counts
    let cfg = smpcheck::experiments::ExperimentConfig::from_toml_str(MINI_CONFIG).unwrap();
    let texts: Vec<String> = [1usize, 2, 4]
        .iter()
        .map(|&threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                smpcheck::experiments::run(&cfg, &smpcheck::experiments::RunOptions::default())
                    .unwrap()
                    .canonical_text()
            })
        })
        .collect();
    let reproducible = texts.windows(2).all(|w| w[0] == w[1]);
    println!("  report reproducibility across 1/2/4 threads: {reproducible}");
    pass &= reproducible;

    assert!(verdict("8 (structural property suites)", pass));
}

/// Two-driver scalar field mixing a linear and a sine factor; nonlinear but
/// globally Lipschitz, used by the property suites.
fn two_driver_field() -> MartingaleField {
    let f1 = SigmaFactor::new(
        |_, x: &DVector<f64>, u: &DVector<f64>| vec1(0.8 * x[0] + 0.5 * u[0]),
        |_, _, _| DMatrix::from_element(1, 1, 0.8),
        |_, _, _| DMatrix::from_element(1, 1, 0.5),
    );
    let f2 = SigmaFactor::new(
        |_, x: &DVector<f64>, u: &DVector<f64>| vec1((1.3 * x[0]).sin() + 0.2 * u[0]),
        |_, x: &DVector<f64>, _: &DVector<f64>| DMatrix::from_element(1, 1, 1.3 * (1.3 * x[0]).cos()),
        |_, _, _| DMatrix::from_element(1, 1, 0.2),
    );
    MartingaleField::new(vec![f1, f2], 1, 1).unwrap()
}

fn classical_sigma_matrix(field: &MartingaleField, t: f64, x: f64, u: f64) -> DMatrix<f64> {
    let xv = vec1(x);
    let uv = vec1(u);
    let mut s = DMatrix::zeros(1, field.brownian_dim());
    for (k, factor) in field.factors().iter().enumerate() {
        s.set_column(k, &factor.eval(t, &xv, &uv));
    }
    s
}

fn rng_float(rng: &mut rand_chacha::ChaCha12Rng, scale: f64) -> f64 {
    use rand::Rng;
    rng.gen_range(-scale..scale)
}

fn random_args(rng: &mut rand_chacha::ChaCha12Rng) -> [f64; 5] {
    use rand::Rng;
    [
        rng.gen_range(-3.0..3.0),
        rng.gen_range(-3.0..3.0),
        rng.gen_range(-3.0..3.0),
        rng.gen_range(-3.0..3.0),
        rng.gen_range(0.0..1.0),
    ]
}

const MINI_CONFIG: &str = r#"
name = "repro-mini"

[problem]
kind = "custom"
x0 = [1.0]
convex = true

[problem.field]
name = "bilinear"

[problem.drift]
name = "linear"
a = [[0.0]]
b = [[1.0]]

[problem.cost]
name = "quadratic"
q = [[1.0]]
r = [[1.0]]
g = [[1.0]]

[problem.control]
name = "constant"
value = [0.0]

[problem.candidate]
name = "constant"
value = [1.0]

[grid]
horizon = 1.0
n_steps = 100

[mc]
n_paths = 512
seed = 31

[checks]
run = ["perturbation-rate", "gateaux", "duality"]

[checks.params.paths]
adjoint = 512
"#;
