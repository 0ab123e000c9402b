//! Named component registries. Each component family (fields, drifts, costs,
//! controls) maps a block name onto a typed parameter struct and a
//! constructor; unknown block names and unknown parameter keys are errors.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::control::{ControlDomain, ControlLaw};
use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::experiments::config::NamedBlock;
use crate::field::{library, MartingaleField};
use crate::problem::Drift;

pub const FIELD_NAMES: &[&str] = &["zero", "constant", "linear", "bilinear", "scalar-gbm", "scalar-sine"];
pub const DRIFT_NAMES: &[&str] = &["zero", "linear"];
pub const COST_NAMES: &[&str] = &["zero", "quadratic"];
pub const CONTROL_NAMES: &[&str] = &["zero", "constant", "table", "riccati"];

fn parse_params<T: serde::de::DeserializeOwned>(block: &NamedBlock, what: &str) -> Result<T> {
    toml::Value::Table(block.params.clone())
        .try_into()
        .map_err(|e| Error::Config(format!("{what} '{}': {e}", block.name)))
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Config(format!("{what}: empty matrix literal")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{what}: ragged matrix literal")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

pub fn build_field(block: &NamedBlock, state_dim: usize, control_dim: usize) -> Result<MartingaleField> {
    match block.name.as_str() {
        "zero" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {}
            let _: P = parse_params(block, "field")?;
            Ok(library::zero(state_dim, control_dim))
        }
        "constant" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                columns: Vec<Vec<f64>>,
            }
            let p: P = parse_params::<P>(block, "field")?;
            Ok(library::constant(matrix(&p.columns, "field.constant.columns")?, control_dim))
        }
        "linear" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                #[serde(default)]
                c: Vec<Vec<Vec<f64>>>,
                #[serde(default)]
                d: Vec<Vec<Vec<f64>>>,
            }
            let p: P = parse_params(block, "field")?;
            let cs = p
                .c
                .iter()
                .map(|m| matrix(m, "field.linear.c"))
                .collect::<Result<Vec<_>>>()?;
            let ds = p
                .d
                .iter()
                .map(|m| matrix(m, "field.linear.d"))
                .collect::<Result<Vec<_>>>()?;
            library::linear(cs, ds)
        }
        "bilinear" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                #[serde(default = "one")]
                cx: f64,
                #[serde(default = "one")]
                cu: f64,
            }
            fn one() -> f64 {
                1.0
            }
            let p: P = parse_params(block, "field")?;
            Ok(library::bilinear(p.cx, p.cu))
        }
        "scalar-gbm" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                vol: f64,
            }
            let p: P = parse_params(block, "field")?;
            Ok(library::scalar_gbm(p.vol, control_dim))
        }
        "scalar-sine" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                amp: f64,
                freq: f64,
                #[serde(default)]
                cu: f64,
            }
            let p: P = parse_params(block, "field")?;
            Ok(library::scalar_sine(p.amp, p.freq, p.cu))
        }
        other => Err(Error::Config(format!(
            "unknown field '{other}'; registered fields: {FIELD_NAMES:?}"
        ))),
    }
}

pub fn build_drift(block: &NamedBlock, state_dim: usize, control_dim: usize) -> Result<Drift> {
    match block.name.as_str() {
        "zero" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {}
            let _: P = parse_params(block, "drift")?;
            Ok(Drift::zero(state_dim, control_dim))
        }
        "linear" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                a: Vec<Vec<f64>>,
                b: Vec<Vec<f64>>,
            }
            let p: P = parse_params(block, "drift")?;
            Ok(Drift::linear(matrix(&p.a, "drift.linear.a")?, matrix(&p.b, "drift.linear.b")?))
        }
        other => Err(Error::Config(format!(
            "unknown drift '{other}'; registered drifts: {DRIFT_NAMES:?}"
        ))),
    }
}

pub fn build_cost(block: &NamedBlock, state_dim: usize, control_dim: usize) -> Result<CostSpec> {
    match block.name.as_str() {
        "zero" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {}
            let _: P = parse_params(block, "cost")?;
            Ok(CostSpec::zero(state_dim, control_dim))
        }
        "quadratic" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                q: Vec<Vec<f64>>,
                r: Vec<Vec<f64>>,
                g: Vec<Vec<f64>>,
            }
            let p: P = parse_params(block, "cost")?;
            Ok(CostSpec::quadratic(
                matrix(&p.q, "cost.quadratic.q")?,
                matrix(&p.r, "cost.quadratic.r")?,
                matrix(&p.g, "cost.quadratic.g")?,
            ))
        }
        other => Err(Error::Config(format!(
            "unknown cost '{other}'; registered costs: {COST_NAMES:?}"
        ))),
    }
}

/// Controls other than "riccati", which the runner resolves against the LQ
/// oracle.
pub fn build_control(block: &NamedBlock, control_dim: usize, domain: ControlDomain) -> Result<ControlLaw> {
    match block.name.as_str() {
        "zero" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {}
            let _: P = parse_params(block, "control")?;
            Ok(ControlLaw::constant(DVector::zeros(control_dim), domain))
        }
        "constant" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                value: Vec<f64>,
            }
            let p: P = parse_params(block, "control")?;
            if p.value.len() != control_dim {
                return Err(Error::Config(format!(
                    "control.constant.value has length {}, expected {control_dim}",
                    p.value.len()
                )));
            }
            Ok(ControlLaw::constant(DVector::from_vec(p.value), domain))
        }
        "table" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                values: Vec<Vec<f64>>,
            }
            let p: P = parse_params(block, "control")?;
            let rows = p
                .values
                .into_iter()
                .map(|r| {
                    if r.len() != control_dim {
                        Err(Error::Config(format!(
                            "control.table row has length {}, expected {control_dim}",
                            r.len()
                        )))
                    } else {
                        Ok(DVector::from_vec(r))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            ControlLaw::open_loop(rows, domain)
        }
        "riccati" => Err(Error::Config(
            "control 'riccati' is only available for lq problems".into(),
        )),
        other => Err(Error::Config(format!(
            "unknown control '{other}'; registered controls: {CONTROL_NAMES:?}"
        ))),
    }
}

/// One line per registered component family, for the CLI listing.
pub fn describe_registries() -> String {
    let mut s = String::new();
    s.push_str(&format!("fields: {}\n", FIELD_NAMES.join(", ")));
    s.push_str(&format!("drifts: {}\n", DRIFT_NAMES.join(", ")));
    s.push_str(&format!("costs: {}\n", COST_NAMES.join(", ")));
    s.push_str(&format!("controls: {}\n", CONTROL_NAMES.join(", ")));
    s
}
