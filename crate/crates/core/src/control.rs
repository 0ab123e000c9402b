//! Control laws: open-loop tables, per-path realized tables, and feedback
//! maps, together with the (convex) control domain they are projected into.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Convex control domain. Feedback evaluations are clamped into finite boxes.
#[derive(Clone, Debug)]
pub enum ControlDomain {
    /// U = R^k.
    Unbounded,
    /// Componentwise box [lower_i, upper_i].
    Box {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
}

impl ControlDomain {
    pub fn project(&self, mut u: DVector<f64>) -> DVector<f64> {
        if let ControlDomain::Box { lower, upper } = self {
            for i in 0..u.len() {
                u[i] = u[i].clamp(lower[i], upper[i]);
            }
        }
        u
    }

    pub fn is_whole_space(&self) -> bool {
        matches!(self, ControlDomain::Unbounded)
    }
}

/// Dense per-path, per-node table of control (or direction) values.
#[derive(Clone, Debug)]
pub struct PathTable {
    pub n_paths: usize,
    pub n_nodes: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl PathTable {
    pub fn zeros(n_paths: usize, n_nodes: usize, dim: usize) -> Self {
        PathTable {
            n_paths,
            n_nodes,
            dim,
            data: vec![0.0; n_paths * n_nodes * dim],
        }
    }

    #[inline]
    pub fn slice(&self, path: usize, node: usize) -> &[f64] {
        let base = (path * self.n_nodes + node) * self.dim;
        &self.data[base..base + self.dim]
    }

    pub fn value(&self, path: usize, node: usize) -> DVector<f64> {
        DVector::from_column_slice(self.slice(path, node))
    }

    pub fn set(&mut self, path: usize, node: usize, v: &DVector<f64>) {
        let base = (path * self.n_nodes + node) * self.dim;
        self.data[base..base + self.dim].copy_from_slice(v.as_slice());
    }

    /// Convex combination `bar + eps * (other - bar)`, entrywise.
    pub fn convex_combination(bar: &PathTable, other: &PathTable, eps: f64) -> Result<PathTable> {
        if bar.n_paths != other.n_paths || bar.n_nodes != other.n_nodes || bar.dim != other.dim {
            return Err(Error::Input("convex_combination: table shapes differ".into()));
        }
        let data = bar
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + eps * (b - a))
            .collect();
        Ok(PathTable {
            n_paths: bar.n_paths,
            n_nodes: bar.n_nodes,
            dim: bar.dim,
            data,
        })
    }

    /// Entrywise difference `other - bar`, the perturbation direction.
    pub fn direction(bar: &PathTable, other: &PathTable) -> Result<PathTable> {
        if bar.n_paths != other.n_paths || bar.n_nodes != other.n_nodes || bar.dim != other.dim {
            return Err(Error::Input("direction: table shapes differ".into()));
        }
        let data = bar.data.iter().zip(&other.data).map(|(a, b)| b - a).collect();
        Ok(PathTable {
            n_paths: bar.n_paths,
            n_nodes: bar.n_nodes,
            dim: bar.dim,
            data,
        })
    }

    /// L2([0,T]) norm of the table averaged over paths, with left-endpoint
    /// quadrature. Used to normalize random perturbations.
    pub fn mean_l2_norm(&self, dt: f64) -> f64 {
        let mut acc = 0.0;
        for p in 0..self.n_paths {
            for n in 0..self.n_nodes - 1 {
                let s = self.slice(p, n);
                acc += s.iter().map(|v| v * v).sum::<f64>() * dt;
            }
        }
        (acc / self.n_paths as f64).sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

type FeedbackFn = dyn Fn(usize, f64, &DVector<f64>) -> DVector<f64> + Send + Sync;

#[derive(Clone)]
enum LawKind {
    /// One value per grid node, shared by all paths.
    OpenLoop(Arc<Vec<DVector<f64>>>),
    /// Realized per-path values (e.g. a perturbed control).
    PerPath(Arc<PathTable>),
    /// State feedback sampled at grid nodes.
    Feedback(Arc<FeedbackFn>),
    /// Base law plus an open-loop offset table.
    Offset {
        base: Arc<ControlLaw>,
        table: Arc<Vec<DVector<f64>>>,
    },
    /// Pointwise combination `wa * a + wb * b` of two laws.
    Combine {
        a: Arc<ControlLaw>,
        b: Arc<ControlLaw>,
        wa: f64,
        wb: f64,
    },
}

/// A control law with its admissible domain.
#[derive(Clone)]
pub struct ControlLaw {
    kind: LawKind,
    domain: ControlDomain,
    dim: usize,
}

impl ControlLaw {
    pub fn open_loop(values: Vec<DVector<f64>>, domain: ControlDomain) -> Result<Self> {
        let dim = values
            .first()
            .map(|v| v.len())
            .ok_or_else(|| Error::Input("open_loop: empty table".into()))?;
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::Input("open_loop: ragged table".into()));
        }
        Ok(ControlLaw {
            kind: LawKind::OpenLoop(Arc::new(values)),
            domain,
            dim,
        })
    }

    /// Constant control u(t) = value.
    pub fn constant(value: DVector<f64>, domain: ControlDomain) -> Self {
        let dim = value.len();
        ControlLaw {
            kind: LawKind::OpenLoop(Arc::new(vec![value])),
            domain,
            dim,
        }
    }

    pub fn per_path(table: PathTable, domain: ControlDomain) -> Self {
        let dim = table.dim;
        ControlLaw {
            kind: LawKind::PerPath(Arc::new(table)),
            domain,
            dim,
        }
    }

    /// State feedback; the closure receives `(node, t, x)`.
    pub fn feedback(
        dim: usize,
        f: impl Fn(usize, f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        domain: ControlDomain,
    ) -> Self {
        ControlLaw {
            kind: LawKind::Feedback(Arc::new(f)),
            domain,
            dim,
        }
    }

    /// Pointwise combination `wa * a + wb * b`; used for reflections like
    /// `2 ubar - u`. The domain of `a` applies.
    pub fn combine(a: &ControlLaw, b: &ControlLaw, wa: f64, wb: f64) -> ControlLaw {
        ControlLaw {
            kind: LawKind::Combine {
                a: Arc::new(a.clone()),
                b: Arc::new(b.clone()),
                wa,
                wb,
            },
            domain: a.domain.clone(),
            dim: a.dim,
        }
    }

    /// This law shifted by an open-loop offset table (one entry per node),
    /// projected back into the same domain.
    pub fn with_offset(&self, offsets: Vec<DVector<f64>>) -> ControlLaw {
        ControlLaw {
            kind: LawKind::Offset {
                base: Arc::new(self.clone()),
                table: Arc::new(offsets),
            },
            domain: self.domain.clone(),
            dim: self.dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> &ControlDomain {
        &self.domain
    }

    /// Evaluate at grid node `node`, time `t`, state `x`, path `path`;
    /// the result lies in the domain.
    pub fn eval(&self, node: usize, t: f64, x: &DVector<f64>, path: usize) -> DVector<f64> {
        let raw = match &self.kind {
            LawKind::OpenLoop(tbl) => {
                let idx = node.min(tbl.len() - 1);
                tbl[idx].clone()
            }
            LawKind::PerPath(tbl) => tbl.value(path, node.min(tbl.n_nodes - 1)),
            LawKind::Feedback(f) => f(node, t, x),
            LawKind::Offset { base, table } => {
                let idx = node.min(table.len() - 1);
                base.eval(node, t, x, path) + &table[idx]
            }
            LawKind::Combine { a, b, wa, wb } => {
                a.eval(node, t, x, path) * *wa + b.eval(node, t, x, path) * *wb
            }
        };
        self.domain.project(raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_projection_clamps_feedback() {
        let dom = ControlDomain::Box {
            lower: DVector::from_element(1, -1.0),
            upper: DVector::from_element(1, 1.0),
        };
        let law = ControlLaw::feedback(1, |_, _, x| x * 10.0, dom);
        let u = law.eval(0, 0.0, &DVector::from_element(1, 0.5), 0);
        assert_eq!(u[0], 1.0);
        let u = law.eval(0, 0.0, &DVector::from_element(1, -0.5), 0);
        assert_eq!(u[0], -1.0);
    }

    #[test]
    fn open_loop_table_saturates_at_last_node() {
        let law = ControlLaw::open_loop(
            vec![DVector::from_element(1, 2.0), DVector::from_element(1, 3.0)],
            ControlDomain::Unbounded,
        )
        .unwrap();
        assert_eq!(law.eval(0, 0.0, &DVector::zeros(1), 0)[0], 2.0);
        assert_eq!(law.eval(1, 0.5, &DVector::zeros(1), 0)[0], 3.0);
        assert_eq!(law.eval(9, 1.0, &DVector::zeros(1), 0)[0], 3.0);
    }

    #[test]
    fn convex_combination_is_entrywise() {
        let mut bar = PathTable::zeros(1, 2, 1);
        bar.set(0, 0, &DVector::from_element(1, 1.0));
        let mut other = PathTable::zeros(1, 2, 1);
        other.set(0, 0, &DVector::from_element(1, 3.0));
        let mix = PathTable::convex_combination(&bar, &other, 0.25).unwrap();
        assert_eq!(mix.value(0, 0)[0], 1.5);
        assert_eq!(mix.value(0, 1)[0], 0.0);
    }
}
