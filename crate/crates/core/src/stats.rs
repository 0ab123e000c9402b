//! Small statistics helpers shared by the estimators: Monte Carlo means with
//! standard errors, log-log slope fits, polynomial extrapolation to zero, and
//! a deterministic block-parallel reduction.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Fixed block size for parallel path loops. Must not depend on the thread
/// count, otherwise reductions stop being bitwise reproducible.
pub const PATH_BLOCK: usize = 512;

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Estimate {
        let n = samples.len();
        assert!(n > 0, "empty sample");
        let mean = samples.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Estimate { mean, se: 0.0, n };
        }
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        Estimate {
            mean,
            se: (var / n as f64).sqrt(),
            n,
        }
    }

    /// From accumulated sum and sum of squares.
    pub fn from_moments(sum: f64, sum_sq: f64, n: usize) -> Estimate {
        assert!(n > 0, "empty sample");
        let mean = sum / n as f64;
        if n == 1 {
            return Estimate { mean, se: 0.0, n };
        }
        let var = ((sum_sq - sum * sum / n as f64) / (n - 1) as f64).max(0.0);
        Estimate {
            mean,
            se: (var / n as f64).sqrt(),
            n,
        }
    }

    pub fn abs_within(&self, k_se: f64, abs_tol: f64) -> bool {
        self.mean.abs() <= (k_se * self.se).max(abs_tol)
    }
}

/// Slope of an ordinary least-squares fit of `log(y)` on `log(x)`, with a 95%
/// confidence half-width derived from the fit residuals.
#[derive(Debug, Clone, Copy)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci_half_width: f64,
}

/// Log-log OLS slope. Requires at least three strictly positive points.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() {
        return Err(Error::Input("slope: xs and ys lengths differ".into()));
    }
    if xs.len() < 3 {
        return Err(Error::Input("slope: need at least 3 points".into()));
    }
    if xs.iter().chain(ys.iter()).any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::Input("slope: all xs and ys must be positive and finite".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Input("slope: xs are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let dof = lx.len().saturating_sub(2);
    let ci = if dof == 0 {
        0.0
    } else {
        let ss_res: f64 = lx
            .iter()
            .zip(&ly)
            .map(|(x, y)| {
                let r = y - (intercept + slope * x);
                r * r
            })
            .sum();
        let se = (ss_res / dof as f64 / sxx).sqrt();
        1.96 * se
    };
    Ok(SlopeFit {
        slope,
        intercept,
        ci_half_width: ci,
    })
}

/// Neville polynomial extrapolation of `(x_i, y_i)` to `x = 0`.
/// Used to extrapolate one-sided difference quotients down the ladder.
pub fn extrapolate_to_zero(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(!xs.is_empty());
    let mut tbl = ys.to_vec();
    let n = tbl.len();
    for level in 1..n {
        for i in 0..n - level {
            let x0 = xs[i];
            let x1 = xs[i + level];
            tbl[i] = (x0 * tbl[i + 1] - x1 * tbl[i]) / (x0 - x1);
        }
    }
    tbl[0]
}

/// Runs `per_block` over fixed-size path blocks in parallel and folds the
/// per-block outputs in block order. The fold order is independent of the
/// rayon thread count, so the result is bitwise reproducible.
pub fn par_block_reduce<T, F>(n_paths: usize, per_block: F, fold: impl FnMut(T, T) -> T) -> Option<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
{
    let blocks: Vec<std::ops::Range<usize>> = (0..n_paths)
        .step_by(PATH_BLOCK)
        .map(|s| s..(s + PATH_BLOCK).min(n_paths))
        .collect();
    let parts: Vec<T> = blocks.into_par_iter().map(&per_block).collect();
    let mut it = parts.into_iter();
    let first = it.next()?;
    Some(it.fold(first, fold))
}

/// Accumulator for per-node sums of squares across paths: tracks sum and
/// sum-of-squares per node so node-wise means carry standard errors.
#[derive(Debug, Clone)]
pub struct NodeMoments {
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
    pub n: usize,
}

impl NodeMoments {
    pub fn zeros(n_nodes: usize) -> Self {
        NodeMoments {
            sum: vec![0.0; n_nodes],
            sum_sq: vec![0.0; n_nodes],
            n: 0,
        }
    }

    pub fn add_sample(&mut self, node: usize, value: f64) {
        self.sum[node] += value;
        self.sum_sq[node] += value * value;
    }

    pub fn merge(mut self, other: NodeMoments) -> NodeMoments {
        for i in 0..self.sum.len() {
            self.sum[i] += other.sum[i];
            self.sum_sq[i] += other.sum_sq[i];
        }
        self.n += other.n;
        self
    }

    pub fn estimate(&self, node: usize) -> Estimate {
        Estimate::from_moments(self.sum[node], self.sum_sq[node], self.n)
    }

    /// Node index and estimate with the largest mean.
    pub fn max_mean(&self) -> (usize, Estimate) {
        let mut best = (0, self.estimate(0));
        for i in 1..self.sum.len() {
            let e = self.estimate(i);
            if e.mean > best.1.mean {
                best = (i, e);
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn slope_of_exact_square_is_two() {
        let xs = [0.2, 0.1, 0.05, 0.025];
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let fit = log_log_slope(&xs, &ys).unwrap();
        assert_relative_eq!(fit.slope, 2.0, max_relative = 1e-12);
        assert!(fit.ci_half_width < 1e-10);
    }

    #[test]
    fn slope_of_constant_is_zero() {
        let xs = [0.2, 0.1, 0.05, 0.025];
        let ys = [3.0, 3.0, 3.0, 3.0];
        let fit = log_log_slope(&xs, &ys).unwrap();
        assert!(fit.slope.abs() < 1e-12);
    }

    #[test]
    fn slope_rejects_nonpositive_and_short_input() {
        assert!(log_log_slope(&[0.1, 0.2], &[1.0, 2.0]).is_err());
        assert!(log_log_slope(&[0.1, 0.2, 0.3], &[1.0, -2.0, 3.0]).is_err());
        assert!(log_log_slope(&[0.1, 0.2, 0.3], &[1.0, 0.0, 3.0]).is_err());
    }

    #[test]
    fn extrapolation_recovers_linear_limit() {
        // y(x) = 5 + 3x sampled on a halving ladder extrapolates to 5.
        let xs = [0.2, 0.1, 0.05];
        let ys: Vec<f64> = xs.iter().map(|x| 5.0 + 3.0 * x).collect();
        assert_relative_eq!(extrapolate_to_zero(&xs, &ys), 5.0, max_relative = 1e-12);
    }

    #[test]
    fn block_reduce_matches_sequential_sum() {
        let total = par_block_reduce(
            10_000,
            |r| r.map(|i| i as f64).sum::<f64>(),
            |a, b| a + b,
        )
        .unwrap();
        assert_eq!(total, (0..10_000).map(|i| i as f64).sum::<f64>());
    }

    proptest! {
        #[test]
        fn estimate_from_moments_matches_from_samples(samples in proptest::collection::vec(-100.0f64..100.0, 2..64)) {
            let a = Estimate::from_samples(&samples);
            let sum: f64 = samples.iter().sum();
            let sum_sq: f64 = samples.iter().map(|x| x * x).sum();
            let b = Estimate::from_moments(sum, sum_sq, samples.len());
            prop_assert!((a.mean - b.mean).abs() <= 1e-9 * (1.0 + a.mean.abs()));
            prop_assert!((a.se - b.se).abs() <= 1e-6 * (1.0 + a.se.abs()));
        }

        #[test]
        fn slope_recovers_power_law(p in 0.5f64..3.0, c in 0.1f64..10.0) {
            let xs = [0.4, 0.2, 0.1, 0.05, 0.025];
            let ys: Vec<f64> = xs.iter().map(|&x: &f64| c * x.powf(p)).collect();
            let fit = log_log_slope(&xs, &ys).unwrap();
            prop_assert!((fit.slope - p).abs() < 1e-8);
        }
    }
}
