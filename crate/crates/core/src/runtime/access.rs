//! Global data access rule checking.
//!
//! Within one kernel launch, every field element must obey two rules:
//!
//! 1. after its first write, every subsequent write must be an atomic add;
//! 2. once accumulation into an element has begun, the element must not be
//!    read again.
//!
//! Kernels obeying both rules have well-defined results under any parallel
//! schedule, and their generated adjoints recompute correct values. The
//! checker runs the kernel once, sequentially, with every access
//! instrumented; it reports violations rather than failing the launch.

use super::{Context, Monitor, RuntimeError, Value};
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessRule {
    /// Rule 1: a plain store to an element that was already written.
    OverwriteAfterWrite,
    /// Rule 2: a read of an element after accumulation into it began.
    ReadAfterAccumulate,
}

impl std::fmt::Display for AccessRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AccessRule::OverwriteAfterWrite => {
                write!(f, "rule 1: writes after the first must be atomic adds")
            }
            AccessRule::ReadAfterAccumulate => {
                write!(f, "rule 2: element read after accumulation began")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccessViolation {
    pub kernel: String,
    pub field: String,
    /// `true` when the access touched the adjoint buffer.
    pub grad: bool,
    pub index: Vec<usize>,
    pub rule: AccessRule,
}

impl std::fmt::Display for AccessViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let g = if self.grad { ".grad" } else { "" };
        write!(
            f,
            "{}: {}{}[{}]: {}",
            self.kernel,
            self.field,
            g,
            self.index.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", "),
            self.rule
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum AccessKind {
    Load,
    Store,
    Add,
}

#[derive(Debug, Clone, Copy)]
#[cfg_attr(not(test), allow(dead_code))] // trace fields are consumed by tests
pub(crate) struct AccessEvent {
    pub field: u32,
    pub grad: bool,
    pub elem: usize,
    pub kind: AccessKind,
}

#[derive(Default)]
struct TrackerInner {
    /// (field, grad, elem) -> (written, accumulated)
    state: std::collections::HashMap<(u32, bool, usize), (bool, bool)>,
    violations: Vec<(u32, bool, usize, AccessRule)>,
    trace: Vec<AccessEvent>,
    tracing: bool,
}

pub(crate) struct Tracker {
    inner: Mutex<TrackerInner>,
}

impl Tracker {
    pub(crate) fn new(tracing: bool) -> Tracker {
        Tracker { inner: Mutex::new(TrackerInner { tracing, ..Default::default() }) }
    }
}

impl Monitor for Tracker {
    fn load(&self, field: u32, grad: bool, elem: usize) {
        let mut t = self.inner.lock().unwrap();
        if t.tracing {
            t.trace.push(AccessEvent { field, grad, elem, kind: AccessKind::Load });
        }
        if let Some(&(_, accumulated)) = t.state.get(&(field, grad, elem)) {
            if accumulated {
                t.violations.push((field, grad, elem, AccessRule::ReadAfterAccumulate));
            }
        }
    }

    fn store(&self, field: u32, grad: bool, elem: usize) {
        let mut t = self.inner.lock().unwrap();
        if t.tracing {
            t.trace.push(AccessEvent { field, grad, elem, kind: AccessKind::Store });
        }
        let e = t.state.entry((field, grad, elem)).or_insert((false, false));
        if e.0 {
            let violation = (field, grad, elem, AccessRule::OverwriteAfterWrite);
            t.violations.push(violation);
        } else {
            e.0 = true;
        }
    }

    fn add(&self, field: u32, grad: bool, elem: usize) {
        let mut t = self.inner.lock().unwrap();
        if t.tracing {
            t.trace.push(AccessEvent { field, grad, elem, kind: AccessKind::Add });
        }
        let e = t.state.entry((field, grad, elem)).or_insert((false, false));
        e.0 = true;
        e.1 = true;
    }
}

fn unflatten(shape: &[usize], mut lin: usize) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = lin % shape[d];
        lin /= shape[d];
    }
    idx
}

/// Runs `kernel` once in deterministic order with instrumented accesses and
/// returns every data-access-rule violation (empty when clean).
pub fn check_access(
    ctx: &mut Context,
    kernel: &str,
    args: &[Value],
) -> Result<Vec<AccessViolation>, RuntimeError> {
    let (violations, _) = run_tracked(ctx, kernel, args, false)?;
    Ok(violations)
}

pub(crate) fn run_tracked(
    ctx: &mut Context,
    kernel: &str,
    args: &[Value],
    tracing: bool,
) -> Result<(Vec<AccessViolation>, Vec<AccessEvent>), RuntimeError> {
    let ki = ctx.kernel_id(kernel)?;
    let tracker = Tracker::new(tracing);
    let mode = ctx.mode;
    ctx.mode = super::ExecMode::Deterministic;
    let result = ctx.execute(ki, args, &tracker);
    ctx.mode = mode;
    result?;
    let inner = tracker.inner.into_inner().unwrap();
    let violations = inner
        .violations
        .into_iter()
        .map(|(field, grad, elem, rule)| {
            let decl = &ctx.program().fields[field as usize];
            AccessViolation {
                kernel: kernel.to_string(),
                field: decl.name.clone(),
                grad,
                index: unflatten(&decl.shape, elem),
                rule,
            }
        })
        .collect();
    Ok((violations, inner.trace))
}
