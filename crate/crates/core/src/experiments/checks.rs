//! The named experiment checks. Each check turns estimator output into a
//! pass/fail verdict at the tolerances pinned in the config, plus metrics and
//! a CSV artifact.

use crate::adjoint::{self, AdjointTriple, BasisKind, RegressionBasis};
use crate::control::{ControlDomain, ControlLaw};
use crate::error::{Error, Result};
use crate::experiments::config::CheckParams;
use crate::experiments::report::{CheckReport, CsvBuilder, Metric, Verdict};
use crate::grid::TimeGrid;
use crate::lq::{self, LQSpec};
use crate::maxprin;
use crate::problem::ControlProblem;
use crate::sde::{self, LadderRung, Noise, PathBundle};
use crate::stats;

/// Everything a check needs: the assembled problem, the reference and
/// candidate laws, optional LQ data, grid/paths/seed, and tolerances.
pub struct CheckContext<'a> {
    pub problem: &'a ControlProblem,
    pub bar_law: &'a ControlLaw,
    pub candidate_law: Option<&'a ControlLaw>,
    pub lq: Option<&'a LQSpec>,
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub seed: u64,
    pub params: &'a CheckParams,
    pub config_hash: &'a str,
}

impl<'a> CheckContext<'a> {
    fn candidate(&self) -> Result<&'a ControlLaw> {
        self.candidate_law
            .ok_or_else(|| Error::Config("this check needs a problem.candidate block".into()))
    }

    fn stage_paths(&self, key: &str, default: usize) -> usize {
        *self.params.paths.get(key).unwrap_or(&default)
    }

    fn adjoint_paths(&self) -> usize {
        self.stage_paths("adjoint", self.n_paths.min(4000))
    }

    fn sufficiency_paths(&self) -> usize {
        self.stage_paths("sufficiency", self.n_paths.min(2000))
    }

    fn basis(&self) -> RegressionBasis {
        RegressionBasis {
            kind: BasisKind::Polynomial {
                degree: self.params.basis_degree,
            },
            ridge: self.params.ridge,
        }
    }
}

/// Forward stage shared by the ladder checks.
pub fn run_ladder(ctx: &CheckContext) -> Result<Vec<LadderRung>> {
    sde::perturbation_ladder_study(
        &ctx.problem.field,
        &ctx.problem.drift,
        ctx.bar_law,
        ctx.candidate()?,
        &ctx.problem.x0,
        ctx.grid,
        ctx.n_paths,
        ctx.seed,
        &ctx.params.eps_ladder,
    )
}

/// Adjoint stage shared by the costate checks: reference bundle, solved
/// triple, and the variational bundle along the candidate direction.
pub struct AdjointStage {
    pub bar: PathBundle,
    pub adj: AdjointTriple,
    pub hat: Option<PathBundle>,
}

pub fn run_adjoint_stage(ctx: &CheckContext, with_variational: bool) -> Result<AdjointStage> {
    let n_paths = ctx.adjoint_paths();
    let bar = sde::simulate_state(
        &ctx.problem.field,
        &ctx.problem.drift,
        ctx.bar_law,
        &ctx.problem.x0,
        ctx.grid,
        n_paths,
        &Noise::Seeded(ctx.seed),
    )?;
    let adj = adjoint::solve_adjoint(
        &ctx.problem.field,
        &bar,
        &ctx.problem.drift,
        &ctx.problem.cost,
        &ctx.basis(),
    )?;
    let hat = if with_variational {
        let dir = adjoint::realized_direction(&bar, ctx.candidate()?);
        Some(sde::simulate_variational(
            &ctx.problem.field,
            &ctx.problem.drift,
            &bar,
            &dir,
        )?)
    } else {
        None
    };
    Ok(AdjointStage { bar, adj, hat })
}

/// Log-log slope of the sup-over-time mean-square perturbation gap down the
/// eps ladder; passes inside the configured band.
pub fn perturbation_rate(ctx: &CheckContext, rungs: &[LadderRung]) -> Result<CheckReport> {
    let mut report = CheckReport::new("perturbation-rate");
    let eps: Vec<f64> = rungs.iter().map(|r| r.eps).collect();
    let sup: Vec<stats::Estimate> = rungs.iter().map(|r| r.sup_gap()).collect();
    let mut csv = CsvBuilder::new(ctx.config_hash, "eps,sup_gap,sup_gap_se");
    for (e, s) in eps.iter().zip(&sup) {
        csv.row(&[e.to_string(), s.mean.to_string(), s.se.to_string()]);
    }
    report.csv = Some(csv.finish());

    let ys: Vec<f64> = sup.iter().map(|s| s.mean).collect();
    let fit = stats::log_log_slope(&eps, &ys)?;
    let [lo, hi] = ctx.params.slope_band;
    report.metrics.push(Metric::deterministic("slope", fit.slope));
    report
        .metrics
        .push(Metric::deterministic("slope_ci_half_width", fit.ci_half_width));
    report.metrics.push(Metric::deterministic("band_lo", lo));
    report.metrics.push(Metric::deterministic("band_hi", hi));
    for (e, s) in eps.iter().zip(&sup) {
        report
            .metrics
            .push(Metric::stochastic(format!("sup_gap[eps={e}]"), s.mean, s.se));
    }
    report.verdict = if fit.slope >= lo && fit.slope <= hi {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(report)
}

/// Remainder decay down the ladder: strictly decreasing and below the
/// relative threshold at the smallest eps, or identically zero to rounding
/// (affine dynamics have no first-order remainder).
pub fn variational_remainder(ctx: &CheckContext, rungs: &[LadderRung]) -> Result<CheckReport> {
    let mut report = CheckReport::new("variational-remainder");
    let sup: Vec<stats::Estimate> = rungs.iter().map(|r| r.sup_remainder()).collect();
    let mut csv = CsvBuilder::new(ctx.config_hash, "eps,sup_remainder,sup_remainder_se");
    for (r, s) in rungs.iter().zip(&sup) {
        csv.row(&[r.eps.to_string(), s.mean.to_string(), s.se.to_string()]);
    }
    report.csv = Some(csv.finish());
    for (r, s) in rungs.iter().zip(&sup) {
        report.metrics.push(Metric::stochastic(
            format!("sup_remainder[eps={}]", r.eps),
            s.mean,
            s.se,
        ));
    }

    let floor = ctx.params.remainder_zero_floor;
    let all_zero = sup.iter().all(|s| s.mean <= floor);
    if all_zero {
        report.notes.push(format!(
            "remainder at machine precision (<= {floor}) for every eps: the dynamics are affine in (x, u), so the first-order expansion is exact"
        ));
        report.verdict = Verdict::Pass;
        return Ok(report);
    }

    let decreasing = sup.windows(2).all(|w| w[1].mean < w[0].mean);
    let first = sup.first().map(|s| s.mean).unwrap_or(f64::NAN);
    let last = sup.last().map(|s| s.mean).unwrap_or(f64::NAN);
    let threshold = ctx.params.remainder_rel_threshold * first;
    report.metrics.push(Metric::deterministic("threshold", threshold));
    report
        .metrics
        .push(Metric::deterministic("decreasing", if decreasing { 1.0 } else { 0.0 }));
    report.verdict = if decreasing && last <= threshold {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(report)
}

/// Extrapolated one-sided difference quotient of the cost against the
/// variational formula, with common random numbers.
pub fn gateaux(ctx: &CheckContext) -> Result<CheckReport> {
    let mut report = CheckReport::new("gateaux");
    let rep = maxprin::gateaux_check(
        ctx.problem,
        ctx.bar_law,
        ctx.candidate()?,
        &ctx.params.eps_ladder,
        ctx.grid,
        ctx.n_paths,
        ctx.seed,
    )?;
    let mut csv = CsvBuilder::new(ctx.config_hash, "eps,quotient,quotient_se");
    for (e, q) in rep.eps.iter().zip(&rep.quotients) {
        csv.row(&[e.to_string(), q.mean.to_string(), q.se.to_string()]);
    }
    report.csv = Some(csv.finish());

    report
        .metrics
        .push(Metric::stochastic("extrapolated_quotient", rep.extrapolated.mean, rep.extrapolated.se));
    report
        .metrics
        .push(Metric::stochastic("formula", rep.formula.mean, rep.formula.se));
    report
        .metrics
        .push(Metric::stochastic("discrepancy", rep.discrepancy.mean, rep.discrepancy.se));
    let tol = (3.0 * rep.discrepancy.se)
        .max(ctx.params.gateaux_rel_tol * rep.formula.mean.abs())
        .max(ctx.params.gateaux_abs_tol);
    report.metrics.push(Metric::deterministic("tolerance", tol));
    report.verdict = if rep.discrepancy.mean.abs() <= tol {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(report)
}

/// Costate duality identity; passes within `max(3 se, abs_tol)`.
pub fn duality(ctx: &CheckContext, stage: &AdjointStage) -> Result<CheckReport> {
    let mut report = CheckReport::new("duality");
    let hat = stage
        .hat
        .as_ref()
        .ok_or_else(|| Error::Input("duality needs the variational bundle".into()))?;
    let gap = adjoint::duality_gap(
        &ctx.problem.field,
        &stage.adj,
        hat,
        &stage.bar,
        &ctx.problem.drift,
        &ctx.problem.cost,
    )?;
    report
        .metrics
        .push(Metric::stochastic("gap", gap.mean, gap.se));
    report.metrics.push(Metric::deterministic(
        "normal_eq_residual",
        stage.adj.max_normal_eq_residual,
    ));
    let tol = (3.0 * gap.se).max(ctx.params.duality_abs_tol);
    report.metrics.push(Metric::deterministic("tolerance", tol));
    let mut csv = CsvBuilder::new(ctx.config_hash, "gap,gap_se,tolerance");
    csv.row(&[gap.mean.to_string(), gap.se.to_string(), tol.to_string()]);
    report.csv = Some(csv.finish());
    report.verdict = if gap.mean.abs() <= tol {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(report)
}

/// Variational-inequality scan over the candidate control and, on an
/// unbounded domain, its reflection through the reference control.
pub fn stationarity_scan(ctx: &CheckContext, stage: &AdjointStage) -> Result<CheckReport> {
    let mut report = CheckReport::new("stationarity-scan");
    let cand = ctx.candidate()?;
    let mut candidates = vec![cand.clone()];
    if ctx.bar_law.domain().is_whole_space() {
        // reflection 2 ubar - u: on the whole space the inequality must hold
        // on both sides, pinning the gradient to zero
        candidates.push(ControlLaw::combine(ctx.bar_law, cand, 2.0, -1.0));
    }
    let scan = maxprin::variational_inequality_scan(
        ctx.problem,
        &stage.bar,
        &stage.adj,
        &candidates,
        ctx.params.vi_abs_tol,
    )?;
    let mut csv = CsvBuilder::new(ctx.config_hash, "candidate,node,t,estimate,se");
    for (ci, c) in scan.candidates.iter().enumerate() {
        for (n, e) in c.per_node.iter().enumerate() {
            csv.row(&[
                ci.to_string(),
                n.to_string(),
                ctx.grid.node(n).to_string(),
                e.mean.to_string(),
                e.se.to_string(),
            ]);
        }
    }
    report.csv = Some(csv.finish());
    report.metrics.push(Metric::stochastic(
        "min_estimate",
        scan.min_estimate.mean,
        scan.min_estimate.se,
    ));
    report
        .metrics
        .push(Metric::deterministic("violations", scan.violations as f64));
    report.verdict = if scan.violations == 0 {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(report)
}

/// Random-perturbation sufficiency certificate.
pub fn sufficiency(ctx: &CheckContext, stage: Option<&AdjointStage>) -> Result<CheckReport> {
    let mut report = CheckReport::new("sufficiency");
    let rep = maxprin::sufficiency_check(
        ctx.problem,
        ctx.bar_law,
        stage.map(|s| &s.adj),
        stage.map(|s| &s.bar),
        &[],
        ctx.params.sufficiency_samples,
        ctx.grid,
        ctx.sufficiency_paths(),
        ctx.seed,
    )?;
    let mut csv = CsvBuilder::new(ctx.config_hash, "sample,excess,excess_se");
    for (i, s) in rep.samples.iter().enumerate() {
        csv.row(&[i.to_string(), s.excess.mean.to_string(), s.excess.se.to_string()]);
    }
    report.csv = Some(csv.finish());
    report
        .metrics
        .push(Metric::deterministic("samples", rep.samples.len() as f64));
    report
        .metrics
        .push(Metric::deterministic("failures", rep.failures as f64));
    report
        .metrics
        .push(Metric::deterministic("mean_excess", rep.mean_excess));
    report.metrics.push(Metric::deterministic(
        "convexity_warnings",
        rep.convexity_warnings as f64,
    ));
    if rep.convexity_warnings > 0 {
        report.notes.push(format!(
            "{} midpoint-convexity spot checks failed; the declared convexity flag may be wrong",
            rep.convexity_warnings
        ));
    }
    report.verdict = if rep.failures == 0 { Verdict::Pass } else { Verdict::Fail };
    Ok(report)
}

/// LQ control stationarity residual against `max(3 se, rel * scale)`.
pub fn lq_stationarity(ctx: &CheckContext, stage: &AdjointStage) -> Result<CheckReport> {
    let mut report = CheckReport::new("lq-stationarity");
    let spec = ctx
        .lq
        .ok_or_else(|| Error::Config("lq-stationarity requires an lq problem".into()))?;
    let res = lq::stationarity_residual(spec, &stage.adj, &stage.bar)?;
    let mut csv = CsvBuilder::new(ctx.config_hash, "node,t,component,mean,se");
    for (n, (mean, se)) in res.per_node_mean.iter().zip(&res.per_node_se).enumerate() {
        for i in 0..mean.len() {
            csv.row(&[
                n.to_string(),
                ctx.grid.node(n).to_string(),
                i.to_string(),
                mean[i].to_string(),
                se[i].to_string(),
            ]);
        }
    }
    report.csv = Some(csv.finish());

    // locate the worst node/component and its standard error
    let mut worst = (0usize, 0usize, 0.0f64);
    for (n, mean) in res.per_node_mean.iter().enumerate() {
        for i in 0..mean.len() {
            if mean[i].abs() > worst.2 {
                worst = (n, i, mean[i].abs());
            }
        }
    }
    let worst_se = res.per_node_se[worst.0][worst.1];
    let tol = (3.0 * worst_se).max(ctx.params.stationarity_rel_scale * res.scale);
    report
        .metrics
        .push(Metric::stochastic("max_residual", worst.2, worst_se));
    report.metrics.push(Metric::deterministic("scale", res.scale));
    report.metrics.push(Metric::deterministic("tolerance", tol));
    report.verdict = if worst.2 <= tol { Verdict::Pass } else { Verdict::Fail };
    Ok(report)
}

/// LQ optimality certificate: random perturbations plus the
/// dynamic-programming competitor must not beat the reference control.
pub fn lq_certificate(ctx: &CheckContext) -> Result<CheckReport> {
    let mut report = CheckReport::new("lq-certificate");
    let spec = ctx
        .lq
        .ok_or_else(|| Error::Config("lq-certificate requires an lq problem".into()))?;
    let cert = lq::lq_optimality_certificate(
        spec,
        ctx.bar_law,
        &ctx.grid,
        ctx.params.sufficiency_samples,
        ctx.sufficiency_paths(),
        ctx.seed,
    )?;
    let mut csv = CsvBuilder::new(ctx.config_hash, "sample,excess,excess_se");
    for (i, s) in cert.sufficiency.samples.iter().enumerate() {
        csv.row(&[i.to_string(), s.excess.mean.to_string(), s.excess.se.to_string()]);
    }
    report.csv = Some(csv.finish());
    report
        .metrics
        .push(Metric::deterministic("failures", cert.sufficiency.failures as f64));
    report
        .metrics
        .push(Metric::deterministic("mean_excess", cert.sufficiency.mean_excess));
    report.verdict = if cert.pass { Verdict::Pass } else { Verdict::Fail };
    Ok(report)
}

/// Refinement diagnostic driven by `grid.refinements`: simulates the
/// reference dynamics on successively halved steps and requires the RMS
/// discrepancy between realized and predicted covariation to decrease at
/// every level. Runs whenever the config asks for two or more levels.
pub fn covariation_refinement(ctx: &CheckContext, levels: usize) -> Result<CheckReport> {
    let mut report = CheckReport::new("covariation-refinement");
    let n_paths = ctx.n_paths.min(512);
    let mut grid = ctx.grid;
    let mut rms = Vec::with_capacity(levels);
    for _ in 0..levels {
        let bundle = sde::simulate_state(
            &ctx.problem.field,
            &ctx.problem.drift,
            ctx.bar_law,
            &ctx.problem.x0,
            grid,
            n_paths,
            &Noise::Seeded(ctx.seed),
        )?;
        let rep = sde::realized_covariation(&ctx.problem.field, &bundle, &bundle)?;
        rms.push((grid.n_steps(), rep.rms_discrepancy));
        grid = grid.refined();
    }
    let mut csv = CsvBuilder::new(ctx.config_hash, "n_steps,rms_discrepancy");
    for (steps, v) in &rms {
        csv.row(&[steps.to_string(), v.to_string()]);
    }
    report.csv = Some(csv.finish());
    for (steps, v) in &rms {
        report
            .metrics
            .push(Metric::deterministic(format!("rms[n_steps={steps}]"), *v));
    }
    let zero_field = rms.iter().all(|(_, v)| *v == 0.0);
    let decreasing = rms.windows(2).all(|w| w[1].1 < w[0].1);
    if zero_field {
        report.notes.push("zero diffusion: realized and predicted covariations both vanish".into());
    }
    report.verdict = if zero_field || decreasing {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(report)
}

/// Builds the control domain from optional box bounds.
pub fn domain_from_bounds(
    lower: Option<&Vec<f64>>,
    upper: Option<&Vec<f64>>,
    dim: usize,
) -> Result<ControlDomain> {
    match (lower, upper) {
        (None, None) => Ok(ControlDomain::Unbounded),
        (Some(lo), Some(hi)) => {
            if lo.len() != dim || hi.len() != dim {
                return Err(Error::Config("control bounds must match the control dimension".into()));
            }
            if lo.iter().zip(hi).any(|(a, b)| a > b) {
                return Err(Error::Config("control_lower exceeds control_upper".into()));
            }
            Ok(ControlDomain::Box {
                lower: nalgebra::DVector::from_vec(lo.clone()),
                upper: nalgebra::DVector::from_vec(hi.clone()),
            })
        }
        _ => Err(Error::Config(
            "control bounds need both control_lower and control_upper".into(),
        )),
    }
}
