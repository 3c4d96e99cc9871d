//! Differentiable physics simulators written in the kernel DSL.
//!
//! Each simulator builds its program source at configuration time (shapes
//! and physical constants are baked into the kernel text), compiles it
//! through the full pass pipeline, generates adjoints, and drives the
//! runtime with a plain gradient-descent loop. Together they are the
//! system's end-to-end test corpus: every kernel here must satisfy the
//! global data access rules and pass finite-difference gradient checks.

pub mod billiards;
pub mod bouncing_ball;
pub mod electric;
pub mod mass_spring;
pub mod robot;
pub mod smoke;
pub mod wave;

use crate::autodiff::{make_adjoint, AutodiffError};
use crate::frontend::parse_program;
use crate::ir::{validate, Program};
use crate::passes::{eliminate_mutable_locals, flatten_branches, simplify, PassError};
use crate::runtime::{Context, RuntimeError};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("parse:\n{0}")]
    Parse(String),
    #[error("validate:\n{0}")]
    Validate(String),
    #[error(transparent)]
    Pass(#[from] PassError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("simulation diverged (non-finite loss) at iteration {0}")]
    Diverged(usize),
    #[error("unknown simulator `{0}`")]
    UnknownSim(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Result of one simulator demo run.
#[derive(Debug, Clone)]
pub struct SimResult {
    /// Loss value at the start of each optimization iteration.
    pub losses: Vec<f64>,
    /// Simulator-specific final parameter values.
    pub final_params: Vec<f64>,
    pub summary: String,
}

/// Parses DSL source, marks `stop_grad` fields, runs the pass pipeline on
/// every kernel and appends simplified adjoint kernels for `grads`.
pub fn compile(src: &str, stop_grad: &[&str], grads: &[&str]) -> Result<Program, SimError> {
    let mut p = parse_program(src).map_err(|errs| {
        SimError::Parse(errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("\n"))
    })?;
    for name in stop_grad {
        match p.field_index(name) {
            Some(i) => p.fields[i].stop_grad = true,
            None => return Err(SimError::Config(format!("no field `{name}` to stop_grad"))),
        }
    }
    let diags = validate(&p);
    if !diags.is_empty() {
        return Err(SimError::Validate(
            diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"),
        ));
    }
    let view = p.clone();
    for k in &mut p.kernels {
        let f = flatten_branches(k.clone(), &view)?;
        let s = eliminate_mutable_locals(f)?;
        *k = simplify(s)?;
    }
    for name in grads {
        let k = p
            .kernel(name)
            .ok_or_else(|| SimError::Config(format!("no kernel `{name}` to differentiate")))?;
        let adj = simplify(make_adjoint(k, &p)?)?;
        p.kernels.push(adj);
    }
    Ok(p)
}

/// One entry of the simulator kernel corpus used by the pass-equivalence
/// and access-rule sweeps.
pub struct CorpusEntry {
    pub name: &'static str,
    pub source: String,
    /// Fields to mark stop_grad before compiling.
    pub stop_grad: Vec<&'static str>,
    /// Kernels that get adjoints.
    pub grads: Vec<&'static str>,
    /// Sets up non-differentiable setup state (topology index fields) that
    /// must stay valid while float fields are randomized.
    pub init: Box<dyn Fn(&mut Context) -> Result<(), RuntimeError>>,
    /// Representative launches `(kernel, integer args)` with in-bounds
    /// arguments for this entry's field shapes.
    pub launches: Vec<(&'static str, Vec<i64>)>,
}

/// Every simulator's DSL source at a small instance size.
pub fn corpus() -> Vec<CorpusEntry> {
    vec![
        mass_spring::corpus_entry(),
        bouncing_ball::corpus_entry(),
        robot::corpus_entry(),
        wave::corpus_entry(),
        smoke::corpus_entry(),
        billiards::corpus_entry(),
        electric::corpus_entry(),
    ]
}
