use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid on [0, T] with `n_steps` steps and `n_steps + 1` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if horizon <= 0.0 || !horizon.is_finite() {
            return Err(Error::Input(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::Input("n_steps must be positive".into()));
        }
        Ok(TimeGrid { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of grid nodes, `n_steps + 1`.
    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Time of node `i`, clamped so that `node(n_steps) == horizon` exactly.
    pub fn node(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    /// Halve the step size, doubling `n_steps`. Used by refinement studies.
    pub fn refined(&self) -> TimeGrid {
        TimeGrid {
            horizon: self.horizon,
            n_steps: self.n_steps * 2,
        }
    }
}
