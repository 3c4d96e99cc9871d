//! Kernel execution over dense global fields.
//!
//! A [`Context`] owns a validated [`Program`], a buffer per field (plus an
//! adjoint buffer for every `needs_grad` field), a launch tape and a
//! registry of host routines. Kernels are interpreted; parallel loops run
//! either in deterministic sequential order (bitwise reproducible, the
//! default) or on a rayon pool ([`ExecMode::Parallel`]), where all field
//! accumulation goes through atomic adds.
//!
//! Precision: fields store f64 bits, but in [`Precision::F32`] (the
//! default) every load, store and arithmetic result is rounded to f32, so
//! results match a true f32 pipeline bit for bit. [`Precision::F64`] is
//! used for gradient checking.

pub mod access;
pub mod gradcheck;
pub mod io;
pub mod segmented;
pub mod tape;

use crate::ir::{self, BinOp, Expr, FieldDecl, Kernel, Program, ScalarType, Stage, Stmt, UnOp};
use rayon::prelude::*;
use std::collections::HashMap;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering::Relaxed};
use std::sync::Arc;

pub use tape::{Tape, TapeEntry};

/// Environment variable capping the parallel-mode thread count.
pub const THREADS_ENV: &str = "ADJK_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    /// Sequential, fixed iteration order; bitwise reproducible.
    #[default]
    Deterministic,
    /// Parallel loops run on a thread pool; floating-point accumulation
    /// order is unspecified.
    Parallel,
}

/// A scalar runtime value (kernel argument or intermediate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    F(f64),
    I(i64),
}

impl Value {
    fn f(self) -> f64 {
        match self {
            Value::F(v) => v,
            Value::I(_) => unreachable!("validated program mixed i32 into f32 context"),
        }
    }

    fn i(self) -> i64 {
        match self {
            Value::I(v) => v,
            Value::F(_) => unreachable!("validated program mixed f32 into i32 context"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("program failed validation:\n{0}")]
    InvalidProgram(String),
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("unknown routine `{0}`")]
    UnknownRoutine(String),
    #[error("kernel `{kernel}` is at stage {stage}; launch requires ssa or adjoint")]
    StageNotExecutable { kernel: String, stage: Stage },
    #[error("kernel `{kernel}` expects {expected} argument(s), got {got}")]
    BadArity { kernel: String, expected: usize, got: usize },
    #[error("kernel `{kernel}` argument {index} has the wrong type")]
    BadArgType { kernel: String, index: usize },
    #[error("kernel `{kernel}`: index {index:?} out of bounds for field `{field}` with shape {shape:?}")]
    OutOfBounds { kernel: String, field: String, index: Vec<i64>, shape: Vec<usize> },
    #[error("kernel `{kernel}`: integer division by zero")]
    DivByZero { kernel: String },
    #[error("field `{0}` has no adjoint buffer (needs_grad not set)")]
    NoAdjoint(String),
    #[error("no adjoint kernel `{0}` in the program; generate it before replay")]
    NoAdjointKernel(String),
    #[error("index {index:?} out of bounds for field `{field}` with shape {shape:?}")]
    HostOutOfBounds { field: String, index: Vec<usize>, shape: Vec<usize> },
    #[error("routine `{routine}` has no registered custom backward `{backward}`")]
    NoBackwardRoutine { routine: String, backward: String },
    #[error("{0}")]
    Segmented(String),
}

// ── Resolved (executable) kernel form ────────────────────────────────────

#[derive(Debug)]
enum RExpr {
    F(f64),
    I(i64),
    Param(u32),
    Slot(u32),
    Load { field: u32, grad: bool, idx: Box<[RExpr]> },
    Bin { op: BinOp, a: Box<RExpr>, b: Box<RExpr> },
    Un { op: UnOp, a: Box<RExpr> },
    Select { c: Box<RExpr>, a: Box<RExpr>, b: Box<RExpr> },
    Cast { to: ScalarType, a: Box<RExpr> },
}

#[derive(Debug)]
enum RStmt {
    Decl { slot: u32, init: RExpr },
    Assign { slot: u32, value: RExpr },
    Store { field: u32, grad: bool, idx: Box<[RExpr]>, value: RExpr },
    Add { field: u32, grad: bool, idx: Box<[RExpr]>, value: RExpr },
    If { cond: RExpr, then_b: Vec<RStmt>, else_b: Vec<RStmt> },
    For { var: u32, lo: RExpr, hi: RExpr, parallel: bool, reversed: bool, body: Vec<RStmt> },
}

#[derive(Debug)]
struct RKernel {
    name: String,
    params: Vec<ScalarType>,
    nslots: u32,
    stage: Stage,
    body: Vec<RStmt>,
}

fn resolve_kernel(k: &Kernel, field_ids: &HashMap<String, u32>) -> RKernel {
    fn rexpr(e: &Expr, ids: &HashMap<String, u32>) -> RExpr {
        match e {
            Expr::ConstF(v) => RExpr::F(*v),
            Expr::ConstI(v) => RExpr::I(*v),
            Expr::Param(i) => RExpr::Param(*i as u32),
            Expr::LoopVar(s) | Expr::LocalRead(s) => RExpr::Slot(*s),
            Expr::FieldLoad { field, grad, idx } => RExpr::Load {
                field: ids[field.as_str()],
                grad: *grad,
                idx: idx.iter().map(|i| rexpr(i, ids)).collect(),
            },
            Expr::Bin { op, a, b } => RExpr::Bin {
                op: *op,
                a: Box::new(rexpr(a, ids)),
                b: Box::new(rexpr(b, ids)),
            },
            Expr::Un { op, a } => RExpr::Un { op: *op, a: Box::new(rexpr(a, ids)) },
            Expr::Select { cond, a, b } => RExpr::Select {
                c: Box::new(rexpr(cond, ids)),
                a: Box::new(rexpr(a, ids)),
                b: Box::new(rexpr(b, ids)),
            },
            Expr::Cast { to, a } => RExpr::Cast { to: *to, a: Box::new(rexpr(a, ids)) },
        }
    }
    fn rstmt(s: &Stmt, ids: &HashMap<String, u32>) -> RStmt {
        match s {
            Stmt::LocalDecl { slot, init, .. } => RStmt::Decl { slot: *slot, init: rexpr(init, ids) },
            Stmt::LocalAssign { slot, value } => {
                RStmt::Assign { slot: *slot, value: rexpr(value, ids) }
            }
            Stmt::FieldStore { field, grad, idx, value } => RStmt::Store {
                field: ids[field.as_str()],
                grad: *grad,
                idx: idx.iter().map(|i| rexpr(i, ids)).collect(),
                value: rexpr(value, ids),
            },
            Stmt::AtomicAdd { field, grad, idx, value } => RStmt::Add {
                field: ids[field.as_str()],
                grad: *grad,
                idx: idx.iter().map(|i| rexpr(i, ids)).collect(),
                value: rexpr(value, ids),
            },
            Stmt::If { cond, then_block, else_block } => RStmt::If {
                cond: rexpr(cond, ids),
                then_b: then_block.iter().map(|s| rstmt(s, ids)).collect(),
                else_b: else_block.iter().map(|s| rstmt(s, ids)).collect(),
            },
            Stmt::For { var, lo, hi, parallel, reversed, body } => RStmt::For {
                var: *var,
                lo: rexpr(lo, ids),
                hi: rexpr(hi, ids),
                parallel: *parallel,
                reversed: *reversed,
                body: body.iter().map(|s| rstmt(s, ids)).collect(),
            },
        }
    }
    RKernel {
        name: k.name.clone(),
        params: k.params.iter().map(|(_, t)| *t).collect(),
        nslots: k.next_slot,
        stage: k.stage,
        body: k.body.iter().map(|s| rstmt(s, field_ids)).collect(),
    }
}

// ── Storage ──────────────────────────────────────────────────────────────

enum Buffer {
    F(Vec<AtomicU64>),
    I(Vec<AtomicI64>),
}

struct FieldBuf {
    decl: FieldDecl,
    strides: Vec<usize>,
    data: Buffer,
    /// f64-bit adjoint buffer; present iff `needs_grad`.
    adj: Option<Vec<AtomicU64>>,
}

impl FieldBuf {
    fn new(decl: &FieldDecl) -> FieldBuf {
        let len = decl.len().max(1); // 0-D fields hold one element
        let mut strides = vec![0; decl.shape.len()];
        let mut acc = 1;
        for d in (0..decl.shape.len()).rev() {
            strides[d] = acc;
            acc *= decl.shape[d];
        }
        let data = match decl.elem {
            ScalarType::F32 => Buffer::F((0..len).map(|_| AtomicU64::new(0f64.to_bits())).collect()),
            ScalarType::I32 => Buffer::I((0..len).map(|_| AtomicI64::new(0)).collect()),
        };
        let adj = decl
            .needs_grad
            .then(|| (0..len).map(|_| AtomicU64::new(0f64.to_bits())).collect());
        FieldBuf { decl: decl.clone(), strides, data, adj }
    }

    fn len(&self) -> usize {
        self.decl.len().max(1)
    }
}

struct Store {
    fields: Vec<FieldBuf>,
}

// ── Access monitor (no-op in normal execution) ───────────────────────────

/// Observation hooks for every field access, used by the data-access-rule
/// checker and by execution-order tests. Normal launches use [`Noop`],
/// which compiles away.
pub(crate) trait Monitor: Sync {
    fn load(&self, _field: u32, _grad: bool, _elem: usize) {}
    fn store(&self, _field: u32, _grad: bool, _elem: usize) {}
    fn add(&self, _field: u32, _grad: bool, _elem: usize) {}
}

pub(crate) struct Noop;
impl Monitor for Noop {}

// ── Context ──────────────────────────────────────────────────────────────

type Routine = Arc<dyn Fn(&mut Context, &[Value]) -> Result<(), RuntimeError> + Send + Sync>;

pub struct Context {
    program: Program,
    kernels: Vec<RKernel>,
    kernel_ids: HashMap<String, usize>,
    field_ids: HashMap<String, u32>,
    store: Store,
    precision: Precision,
    mode: ExecMode,
    pool: Option<rayon::ThreadPool>,
    pub(crate) tape: Tape,
    pub(crate) recording: bool,
    pub(crate) routines: HashMap<String, Routine>,
}

#[inline]
fn round(v: f64, p: Precision) -> f64 {
    match p {
        Precision::F32 => v as f32 as f64,
        Precision::F64 => v,
    }
}

impl Context {
    /// Builds a context for a validated program: rejects programs with
    /// diagnostics, resolves every kernel and allocates all field (and
    /// adjoint) buffers, zero-initialized.
    pub fn new(program: Program) -> Result<Context, RuntimeError> {
        let diags = ir::validate(&program);
        if !diags.is_empty() {
            let text: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
            return Err(RuntimeError::InvalidProgram(text.join("\n")));
        }
        let field_ids: HashMap<String, u32> = program
            .fields
            .iter()
            .enumerate()
            .map(|(i, f)| (f.name.clone(), i as u32))
            .collect();
        let kernels: Vec<RKernel> =
            program.kernels.iter().map(|k| resolve_kernel(k, &field_ids)).collect();
        let kernel_ids =
            kernels.iter().enumerate().map(|(i, k)| (k.name.clone(), i)).collect();
        let store = Store { fields: program.fields.iter().map(FieldBuf::new).collect() };
        let pool = match std::env::var(THREADS_ENV) {
            Ok(v) => {
                let n: usize = v.parse().map_err(|_| {
                    RuntimeError::InvalidProgram(format!("{THREADS_ENV}={v} is not a thread count"))
                })?;
                Some(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(n.max(1))
                        .build()
                        .expect("thread pool"),
                )
            }
            Err(_) => None,
        };
        Ok(Context {
            program,
            kernels,
            kernel_ids,
            field_ids,
            store,
            precision: Precision::default(),
            mode: ExecMode::default(),
            pool,
            tape: Tape::default(),
            recording: false,
            routines: HashMap::new(),
        })
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn set_precision(&mut self, p: Precision) {
        self.precision = p;
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn set_mode(&mut self, m: ExecMode) {
        self.mode = m;
    }

    /// Registers a host routine so [`Context::call_routine`] can find it.
    /// The routine name must be declared in the program.
    pub fn register_routine(
        &mut self,
        name: &str,
        f: impl Fn(&mut Context, &[Value]) -> Result<(), RuntimeError> + Send + Sync + 'static,
    ) -> Result<(), RuntimeError> {
        if !self.program.has_routine(name) {
            return Err(RuntimeError::UnknownRoutine(name.to_string()));
        }
        self.routines.insert(name.to_string(), Arc::new(f));
        Ok(())
    }

    /// Launches a kernel. Requires stage `ssa` or `adjoint`; primal
    /// launches are recorded on the tape while recording is on.
    pub fn launch(&mut self, name: &str, args: &[Value]) -> Result<(), RuntimeError> {
        let ki = self.kernel_id(name)?;
        let stage = self.kernels[ki].stage;
        if stage != Stage::Ssa && stage != Stage::Adjoint {
            return Err(RuntimeError::StageNotExecutable { kernel: name.to_string(), stage });
        }
        if self.recording && stage == Stage::Ssa {
            self.tape.push(TapeEntry::Kernel { name: name.to_string(), args: args.to_vec() });
        }
        self.execute(ki, args, &Noop)
    }

    /// Launches a kernel regardless of its stage; the interpreter handles
    /// branches and mutable locals directly. Never recorded. Intended for
    /// comparing pre- and post-pass behavior.
    pub fn launch_any_stage(&mut self, name: &str, args: &[Value]) -> Result<(), RuntimeError> {
        let ki = self.kernel_id(name)?;
        self.execute(ki, args, &Noop)
    }

    fn kernel_id(&self, name: &str) -> Result<usize, RuntimeError> {
        self.kernel_ids
            .get(name)
            .copied()
            .ok_or_else(|| RuntimeError::UnknownKernel(name.to_string()))
    }

    pub(crate) fn execute<M: Monitor>(
        &self,
        ki: usize,
        args: &[Value],
        monitor: &M,
    ) -> Result<(), RuntimeError> {
        let rk = &self.kernels[ki];
        if args.len() != rk.params.len() {
            return Err(RuntimeError::BadArity {
                kernel: rk.name.clone(),
                expected: rk.params.len(),
                got: args.len(),
            });
        }
        let mut rounded = Vec::with_capacity(args.len());
        for (i, (a, t)) in args.iter().zip(&rk.params).enumerate() {
            match (a, t) {
                (Value::F(v), ScalarType::F32) => rounded.push(Value::F(round(*v, self.precision))),
                (Value::I(v), ScalarType::I32) => rounded.push(Value::I(*v)),
                _ => {
                    return Err(RuntimeError::BadArgType { kernel: rk.name.clone(), index: i })
                }
            }
        }
        let exec = Exec {
            store: &self.store,
            rk,
            args: &rounded,
            precision: self.precision,
            parallel: self.mode == ExecMode::Parallel,
        };
        let mut env = vec![Value::I(0); rk.nslots as usize];
        let mut run = || exec.block(&rk.body, &mut env, monitor);
        match (&self.pool, self.mode) {
            (Some(pool), ExecMode::Parallel) => pool.install(run),
            _ => run(),
        }
    }

    // ── host-side field access ───────────────────────────────────────

    fn buf(&self, name: &str) -> Result<&FieldBuf, RuntimeError> {
        let id = self
            .field_ids
            .get(name)
            .ok_or_else(|| RuntimeError::UnknownField(name.to_string()))?;
        Ok(&self.store.fields[*id as usize])
    }

    fn flat(&self, name: &str, idx: &[usize]) -> Result<(usize, &FieldBuf), RuntimeError> {
        let b = self.buf(name)?;
        let oob = || RuntimeError::HostOutOfBounds {
            field: name.to_string(),
            index: idx.to_vec(),
            shape: b.decl.shape.clone(),
        };
        if idx.len() != b.decl.shape.len() {
            return Err(oob());
        }
        let mut lin = 0;
        for (d, &i) in idx.iter().enumerate() {
            if i >= b.decl.shape[d] {
                return Err(oob());
            }
            lin += i * b.strides[d];
        }
        Ok((lin, b))
    }

    pub fn get_f(&self, name: &str, idx: &[usize]) -> Result<f64, RuntimeError> {
        let (lin, b) = self.flat(name, idx)?;
        match &b.data {
            Buffer::F(v) => Ok(f64::from_bits(v[lin].load(Relaxed))),
            Buffer::I(v) => Ok(v[lin].load(Relaxed) as f64),
        }
    }

    pub fn set_f(&mut self, name: &str, idx: &[usize], value: f64) -> Result<(), RuntimeError> {
        let p = self.precision;
        let (lin, b) = self.flat(name, idx)?;
        match &b.data {
            Buffer::F(v) => v[lin].store(round(value, p).to_bits(), Relaxed),
            Buffer::I(v) => v[lin].store(value as i64, Relaxed),
        }
        Ok(())
    }

    pub fn get_i(&self, name: &str, idx: &[usize]) -> Result<i64, RuntimeError> {
        let (lin, b) = self.flat(name, idx)?;
        match &b.data {
            Buffer::I(v) => Ok(v[lin].load(Relaxed)),
            Buffer::F(v) => Ok(f64::from_bits(v[lin].load(Relaxed)) as i64),
        }
    }

    pub fn set_i(&mut self, name: &str, idx: &[usize], value: i64) -> Result<(), RuntimeError> {
        let (lin, b) = self.flat(name, idx)?;
        match &b.data {
            Buffer::I(v) => v[lin].store(value, Relaxed),
            Buffer::F(v) => v[lin].store((value as f64).to_bits(), Relaxed),
        }
        Ok(())
    }

    pub fn get_adjoint(&self, name: &str, idx: &[usize]) -> Result<f64, RuntimeError> {
        let (lin, b) = self.flat(name, idx)?;
        let adj = b.adj.as_ref().ok_or_else(|| RuntimeError::NoAdjoint(name.to_string()))?;
        Ok(f64::from_bits(adj[lin].load(Relaxed)))
    }

    pub fn set_adjoint(&mut self, name: &str, idx: &[usize], value: f64) -> Result<(), RuntimeError> {
        let p = self.precision;
        let (lin, b) = self.flat(name, idx)?;
        let adj = b.adj.as_ref().ok_or_else(|| RuntimeError::NoAdjoint(name.to_string()))?;
        adj[lin].store(round(value, p).to_bits(), Relaxed);
        Ok(())
    }

    /// Field contents as f64, row-major.
    pub fn read_field(&self, name: &str) -> Result<Vec<f64>, RuntimeError> {
        let b = self.buf(name)?;
        Ok(match &b.data {
            Buffer::F(v) => v.iter().map(|a| f64::from_bits(a.load(Relaxed))).collect(),
            Buffer::I(v) => v.iter().map(|a| a.load(Relaxed) as f64).collect(),
        })
    }

    pub fn write_field(&mut self, name: &str, values: &[f64]) -> Result<(), RuntimeError> {
        let p = self.precision;
        let b = self.buf(name)?;
        if values.len() != b.len() {
            return Err(RuntimeError::HostOutOfBounds {
                field: name.to_string(),
                index: vec![values.len()],
                shape: b.decl.shape.clone(),
            });
        }
        match &b.data {
            Buffer::F(v) => {
                for (a, x) in v.iter().zip(values) {
                    a.store(round(*x, p).to_bits(), Relaxed);
                }
            }
            Buffer::I(v) => {
                for (a, x) in v.iter().zip(values) {
                    a.store(*x as i64, Relaxed);
                }
            }
        }
        Ok(())
    }

    pub fn read_adjoint(&self, name: &str) -> Result<Vec<f64>, RuntimeError> {
        let b = self.buf(name)?;
        let adj = b.adj.as_ref().ok_or_else(|| RuntimeError::NoAdjoint(name.to_string()))?;
        Ok(adj.iter().map(|a| f64::from_bits(a.load(Relaxed))).collect())
    }

    pub fn fill(&mut self, name: &str, value: f64) -> Result<(), RuntimeError> {
        let p = self.precision;
        let b = self.buf(name)?;
        match &b.data {
            Buffer::F(v) => {
                let bits = round(value, p).to_bits();
                v.iter().for_each(|a| a.store(bits, Relaxed));
            }
            Buffer::I(v) => v.iter().for_each(|a| a.store(value as i64, Relaxed)),
        }
        Ok(())
    }

    /// Zeroes the adjoint buffers of every `needs_grad` field.
    pub fn zero_adjoints(&mut self) {
        let z = 0f64.to_bits();
        for b in &self.store.fields {
            if let Some(adj) = &b.adj {
                adj.iter().for_each(|a| a.store(z, Relaxed));
            }
        }
    }

    pub fn fill_adjoint(&mut self, name: &str, value: f64) -> Result<(), RuntimeError> {
        let p = self.precision;
        let b = self.buf(name)?;
        let adj = b.adj.as_ref().ok_or_else(|| RuntimeError::NoAdjoint(name.to_string()))?;
        let bits = round(value, p).to_bits();
        adj.iter().for_each(|a| a.store(bits, Relaxed));
        Ok(())
    }

    pub fn zero_adjoint_field(&mut self, name: &str) -> Result<(), RuntimeError> {
        let b = self.buf(name)?;
        let adj = b.adj.as_ref().ok_or_else(|| RuntimeError::NoAdjoint(name.to_string()))?;
        let z = 0f64.to_bits();
        adj.iter().for_each(|a| a.store(z, Relaxed));
        Ok(())
    }

    // ── slab helpers (first-dimension slices, used by checkpointing) ─

    pub(crate) fn slab_len(&self, name: &str) -> Result<usize, RuntimeError> {
        let b = self.buf(name)?;
        let d0 = *b.decl.shape.first().ok_or_else(|| {
            RuntimeError::Segmented(format!("field `{name}` has no leading slot dimension"))
        })?;
        Ok(b.len() / d0)
    }

    pub(crate) fn read_slab(&self, name: &str, slot: usize) -> Result<Vec<u64>, RuntimeError> {
        let n = self.slab_len(name)?;
        let b = self.buf(name)?;
        let off = slot * n;
        Ok(match &b.data {
            Buffer::F(v) => v[off..off + n].iter().map(|a| a.load(Relaxed)).collect(),
            Buffer::I(v) => v[off..off + n].iter().map(|a| a.load(Relaxed) as u64).collect(),
        })
    }

    pub(crate) fn write_slab(
        &mut self,
        name: &str,
        slot: usize,
        bits: &[u64],
    ) -> Result<(), RuntimeError> {
        let n = self.slab_len(name)?;
        assert_eq!(bits.len(), n);
        let b = self.buf(name)?;
        let off = slot * n;
        match &b.data {
            Buffer::F(v) => {
                for (a, x) in v[off..off + n].iter().zip(bits) {
                    a.store(*x, Relaxed);
                }
            }
            Buffer::I(v) => {
                for (a, x) in v[off..off + n].iter().zip(bits) {
                    a.store(*x as i64, Relaxed);
                }
            }
        }
        Ok(())
    }

    pub(crate) fn read_adj_slab(&self, name: &str, slot: usize) -> Result<Vec<u64>, RuntimeError> {
        let n = self.slab_len(name)?;
        let b = self.buf(name)?;
        let adj = b.adj.as_ref().ok_or_else(|| RuntimeError::NoAdjoint(name.to_string()))?;
        let off = slot * n;
        Ok(adj[off..off + n].iter().map(|a| a.load(Relaxed)).collect())
    }

    pub(crate) fn write_adj_slab(
        &mut self,
        name: &str,
        slot: usize,
        bits: &[u64],
    ) -> Result<(), RuntimeError> {
        let n = self.slab_len(name)?;
        assert_eq!(bits.len(), n);
        let b = self.buf(name)?;
        let adj = b.adj.as_ref().ok_or_else(|| RuntimeError::NoAdjoint(name.to_string()))?;
        let off = slot * n;
        for (a, x) in adj[off..off + n].iter().zip(bits) {
            a.store(*x, Relaxed);
        }
        Ok(())
    }
}

// ── Interpreter ──────────────────────────────────────────────────────────

struct Exec<'a> {
    store: &'a Store,
    rk: &'a RKernel,
    args: &'a [Value],
    precision: Precision,
    parallel: bool,
}

impl<'a> Exec<'a> {
    fn block<M: Monitor>(
        &self,
        stmts: &[RStmt],
        env: &mut Vec<Value>,
        m: &M,
    ) -> Result<(), RuntimeError> {
        for s in stmts {
            self.stmt(s, env, m)?;
        }
        Ok(())
    }

    fn stmt<M: Monitor>(
        &self,
        s: &RStmt,
        env: &mut Vec<Value>,
        m: &M,
    ) -> Result<(), RuntimeError> {
        match s {
            RStmt::Decl { slot, init } | RStmt::Assign { slot, value: init } => {
                env[*slot as usize] = self.eval(init, env, m)?;
                Ok(())
            }
            RStmt::Store { field, grad, idx, value } => {
                let v = self.eval(value, env, m)?;
                let lin = self.index(*field, idx, env, m)?;
                let b = &self.store.fields[*field as usize];
                if *grad {
                    let adj = b.adj.as_ref().expect("validated grad access");
                    adj[lin].store(round(v.f(), self.precision).to_bits(), Relaxed);
                } else {
                    match &b.data {
                        Buffer::F(d) => {
                            d[lin].store(round(v.f(), self.precision).to_bits(), Relaxed)
                        }
                        Buffer::I(d) => d[lin].store(v.i(), Relaxed),
                    }
                }
                m.store(*field, *grad, lin);
                Ok(())
            }
            RStmt::Add { field, grad, idx, value } => {
                let v = self.eval(value, env, m)?;
                let lin = self.index(*field, idx, env, m)?;
                let b = &self.store.fields[*field as usize];
                if *grad {
                    let adj = b.adj.as_ref().expect("validated grad access");
                    self.atomic_add_f(&adj[lin], v.f());
                } else {
                    match &b.data {
                        Buffer::F(d) => self.atomic_add_f(&d[lin], v.f()),
                        Buffer::I(d) => {
                            d[lin].fetch_add(v.i(), Relaxed);
                        }
                    }
                }
                m.add(*field, *grad, lin);
                Ok(())
            }
            RStmt::If { cond, then_b, else_b } => {
                if self.eval(cond, env, m)?.i() != 0 {
                    self.block(then_b, env, m)
                } else {
                    self.block(else_b, env, m)
                }
            }
            RStmt::For { var, lo, hi, parallel, reversed, body } => {
                let lo = self.eval(lo, env, m)?.i();
                let hi = self.eval(hi, env, m)?.i();
                if hi <= lo {
                    return Ok(());
                }
                if *parallel && self.parallel {
                    let base: Vec<Value> = env.clone();
                    (lo..hi).into_par_iter().try_for_each(|i| {
                        let mut env = base.clone();
                        env[*var as usize] = Value::I(i);
                        self.block(body, &mut env, m)
                    })
                } else {
                    let iter: Box<dyn Iterator<Item = i64>> = if *reversed {
                        Box::new((lo..hi).rev())
                    } else {
                        Box::new(lo..hi)
                    };
                    for i in iter {
                        env[*var as usize] = Value::I(i);
                        self.block(body, env, m)?;
                    }
                    Ok(())
                }
            }
        }
    }

    fn atomic_add_f(&self, a: &AtomicU64, v: f64) {
        let mut cur = a.load(Relaxed);
        loop {
            let new = round(f64::from_bits(cur) + v, self.precision).to_bits();
            match a.compare_exchange_weak(cur, new, Relaxed, Relaxed) {
                Ok(_) => return,
                Err(c) => cur = c,
            }
        }
    }

    fn index<M: Monitor>(
        &self,
        field: u32,
        idx: &[RExpr],
        env: &mut Vec<Value>,
        m: &M,
    ) -> Result<usize, RuntimeError> {
        let b = &self.store.fields[field as usize];
        let mut lin = 0usize;
        let mut raw = Vec::new();
        let mut oob = false;
        for (d, e) in idx.iter().enumerate() {
            let i = self.eval(e, env, m)?.i();
            raw.push(i);
            if i < 0 || i as usize >= b.decl.shape[d] {
                oob = true;
            } else {
                lin += i as usize * b.strides[d];
            }
        }
        if oob {
            return Err(RuntimeError::OutOfBounds {
                kernel: self.rk.name.clone(),
                field: b.decl.name.clone(),
                index: raw,
                shape: b.decl.shape.clone(),
            });
        }
        Ok(lin)
    }

    fn eval<M: Monitor>(
        &self,
        e: &RExpr,
        env: &mut Vec<Value>,
        m: &M,
    ) -> Result<Value, RuntimeError> {
        let p = self.precision;
        Ok(match e {
            RExpr::F(v) => Value::F(round(*v, p)),
            RExpr::I(v) => Value::I(*v),
            RExpr::Param(i) => self.args[*i as usize],
            RExpr::Slot(s) => env[*s as usize],
            RExpr::Load { field, grad, idx } => {
                let lin = self.index(*field, idx, env, m)?;
                let b = &self.store.fields[*field as usize];
                let v = if *grad {
                    let adj = b.adj.as_ref().expect("validated grad access");
                    Value::F(f64::from_bits(adj[lin].load(Relaxed)))
                } else {
                    match &b.data {
                        Buffer::F(d) => Value::F(f64::from_bits(d[lin].load(Relaxed))),
                        Buffer::I(d) => Value::I(d[lin].load(Relaxed)),
                    }
                };
                m.load(*field, *grad, lin);
                v
            }
            RExpr::Bin { op, a, b } => {
                let va = self.eval(a, env, m)?;
                let vb = self.eval(b, env, m)?;
                self.bin(*op, va, vb)?
            }
            RExpr::Un { op, a } => {
                let v = self.eval(a, env, m)?;
                match v {
                    Value::F(x) => Value::F(round(
                        match op {
                            UnOp::Neg => -x,
                            UnOp::Sin => x.sin(),
                            UnOp::Cos => x.cos(),
                            UnOp::Exp => x.exp(),
                            UnOp::Sqrt => x.sqrt(),
                            UnOp::Abs => x.abs(),
                            UnOp::Tanh => x.tanh(),
                            UnOp::Floor => x.floor(),
                        },
                        p,
                    )),
                    Value::I(x) => Value::I(match op {
                        UnOp::Neg => -x,
                        UnOp::Abs => x.abs(),
                        _ => unreachable!("validated: float-only unary on i32"),
                    }),
                }
            }
            RExpr::Select { c, a, b } => {
                let c = self.eval(c, env, m)?.i();
                let va = self.eval(a, env, m)?;
                let vb = self.eval(b, env, m)?;
                if c != 0 {
                    va
                } else {
                    vb
                }
            }
            RExpr::Cast { to, a } => {
                let v = self.eval(a, env, m)?;
                match (v, to) {
                    (Value::F(x), ScalarType::I32) => Value::I(x as i64),
                    (Value::I(x), ScalarType::F32) => Value::F(round(x as f64, p)),
                    (v, _) => v,
                }
            }
        })
    }

    fn bin(&self, op: BinOp, a: Value, b: Value) -> Result<Value, RuntimeError> {
        let p = self.precision;
        Ok(match (a, b) {
            (Value::F(x), Value::F(y)) => match op {
                BinOp::Add => Value::F(round(x + y, p)),
                BinOp::Sub => Value::F(round(x - y, p)),
                BinOp::Mul => Value::F(round(x * y, p)),
                BinOp::Div => Value::F(round(x / y, p)),
                BinOp::Mod => Value::F(round(x.rem_euclid(y), p)),
                BinOp::Min => Value::F(if x <= y { x } else { y }),
                BinOp::Max => Value::F(if y <= x { x } else { y }),
                BinOp::CmpLt => Value::I((x < y) as i64),
                BinOp::CmpLe => Value::I((x <= y) as i64),
                BinOp::CmpEq => Value::I((x == y) as i64),
            },
            (Value::I(x), Value::I(y)) => match op {
                BinOp::Add => Value::I(x.wrapping_add(y)),
                BinOp::Sub => Value::I(x.wrapping_sub(y)),
                BinOp::Mul => Value::I(x.wrapping_mul(y)),
                BinOp::Div => {
                    if y == 0 {
                        return Err(RuntimeError::DivByZero { kernel: self.rk.name.clone() });
                    }
                    Value::I(x.div_euclid(y))
                }
                BinOp::Mod => {
                    if y == 0 {
                        return Err(RuntimeError::DivByZero { kernel: self.rk.name.clone() });
                    }
                    Value::I(x.rem_euclid(y))
                }
                BinOp::Min => Value::I(x.min(y)),
                BinOp::Max => Value::I(x.max(y)),
                BinOp::CmpLt => Value::I((x < y) as i64),
                BinOp::CmpLe => Value::I((x <= y) as i64),
                BinOp::CmpEq => Value::I((x == y) as i64),
            },
            _ => unreachable!("validated: mixed-type binary op"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::make_adjoint;
    use crate::frontend::parse_program;
    use crate::passes::{eliminate_mutable_locals, flatten_branches, simplify};

    /// Parses, runs the pass pipeline on every kernel and generates
    /// adjoints for those listed.
    pub(crate) fn build(src: &str, grads: &[&str]) -> Program {
        let mut p = parse_program(src).expect("parse");
        let view = p.clone();
        for k in &mut p.kernels {
            let f = flatten_branches(k.clone(), &view).unwrap();
            let s = eliminate_mutable_locals(f).unwrap();
            *k = simplify(s).unwrap();
        }
        for name in grads {
            let adj = make_adjoint(p.kernel(name).unwrap(), &p).unwrap();
            let adj = simplify(adj).unwrap();
            p.kernels.push(adj);
        }
        p
    }

    const SIN_SQ: &str = "
field x: f32[16] needs_grad;
field y: f32[16] needs_grad;
kernel f() {
  parallel for i in 0..16 {
    let a = x[i];
    y[i] = sin(a * a);
  }
}
";

    #[test]
    fn forward_launch_computes_sin_of_square() {
        let p = build(SIN_SQ, &[]);
        let mut ctx = Context::new(p).unwrap();
        ctx.set_precision(Precision::F64);
        ctx.set_f("x", &[3], 0.5).unwrap();
        ctx.launch("f", &[]).unwrap();
        assert_eq!(ctx.get_f("y", &[3]).unwrap(), 0.25f64.sin());
        assert_eq!(ctx.get_f("y", &[0]).unwrap(), 0.0);
    }

    #[test]
    fn adjoint_launch_matches_closed_form() {
        let p = build(SIN_SQ, &["f"]);
        let mut ctx = Context::new(p).unwrap();
        ctx.set_precision(Precision::F64);
        let x = 0.3f64;
        ctx.set_f("x", &[7], x).unwrap();
        ctx.launch("f", &[]).unwrap();
        ctx.set_adjoint("y", &[7], 1.0).unwrap();
        ctx.launch("f.grad", &[]).unwrap();
        let got = ctx.get_adjoint("x", &[7]).unwrap();
        let expect = 2.0 * x * (x * x).cos();
        assert!((got - expect).abs() < 1e-14, "got {got}, expected {expect}");
    }

    #[test]
    fn f32_precision_rounds_every_operation() {
        let src = "
field a: f32[1];
kernel f() { a[0] = 0.1 + 0.2; }
";
        let p = build(src, &[]);
        let mut ctx = Context::new(p).unwrap();
        ctx.launch("f", &[]).unwrap();
        assert_eq!(ctx.get_f("a", &[0]).unwrap(), (0.1f32 + 0.2f32) as f64);
        ctx.set_precision(Precision::F64);
        ctx.launch("f", &[]).unwrap();
        assert_eq!(ctx.get_f("a", &[0]).unwrap(), 0.1f64 + 0.2f64);
    }

    #[test]
    fn deterministic_mode_is_bitwise_reproducible() {
        let src = "
field acc: f32[] needs_grad;
field x: f32[256] needs_grad;
kernel sum() { parallel for i in 0..256 { acc[] += x[i] * x[i]; } }
";
        let p = build(src, &[]);
        let mut ctx = Context::new(p).unwrap();
        let vals: Vec<f64> = (0..256).map(|i| ((i * 37 % 101) as f64) * 0.013).collect();
        ctx.write_field("x", &vals).unwrap();
        ctx.fill("acc", 0.0).unwrap();
        ctx.launch("sum", &[]).unwrap();
        let a = ctx.get_f("acc", &[]).unwrap();
        ctx.fill("acc", 0.0).unwrap();
        ctx.launch("sum", &[]).unwrap();
        let b = ctx.get_f("acc", &[]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn parallel_mode_matches_on_exact_sums() {
        // integer-valued f32 sums are order-independent
        let src = "
field acc: f32[];
field x: f32[1024];
kernel sum() { parallel for i in 0..1024 { acc[] += x[i]; } }
";
        let p = build(src, &[]);
        let mut ctx = Context::new(p).unwrap();
        let vals: Vec<f64> = (0..1024).map(|i| (i % 17) as f64).collect();
        ctx.write_field("x", &vals).unwrap();
        ctx.launch("sum", &[]).unwrap();
        let seq = ctx.get_f("acc", &[]).unwrap();
        ctx.fill("acc", 0.0).unwrap();
        ctx.set_mode(ExecMode::Parallel);
        ctx.launch("sum", &[]).unwrap();
        let par = ctx.get_f("acc", &[]).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq, vals.iter().sum::<f64>());
    }

    #[test]
    fn out_of_bounds_is_reported_with_location() {
        let src = "
field a: f32[4];
kernel f(i: i32) { a[i] = 1.0; }
";
        let p = build(src, &[]);
        let mut ctx = Context::new(p).unwrap();
        let err = ctx.launch("f", &[Value::I(4)]).unwrap_err();
        match err {
            RuntimeError::OutOfBounds { kernel, field, index, shape } => {
                assert_eq!(kernel, "f");
                assert_eq!(field, "a");
                assert_eq!(index, vec![4]);
                assert_eq!(shape, vec![4]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn euclidean_mod_wraps_negative_indices() {
        let src = "
field a: f32[8];
kernel f(i: i32) { a[(i % 8 + 8) % 8] = 1.0; }
kernel g(i: i32) { a[i % 8] = 2.0; }
";
        let p = build(src, &[]);
        let mut ctx = Context::new(p).unwrap();
        // Euclidean %: -1 % 8 == 7 directly
        ctx.launch("g", &[Value::I(-1)]).unwrap();
        assert_eq!(ctx.get_f("a", &[7]).unwrap(), 2.0);
    }

    #[test]
    fn bad_arity_and_type_are_rejected() {
        let src = "
field a: f32[1];
kernel f(t: i32) { a[0] = f32(t); }
";
        let p = build(src, &[]);
        let mut ctx = Context::new(p).unwrap();
        assert!(matches!(ctx.launch("f", &[]), Err(RuntimeError::BadArity { .. })));
        assert!(matches!(
            ctx.launch("f", &[Value::F(1.0)]),
            Err(RuntimeError::BadArgType { .. })
        ));
        ctx.launch("f", &[Value::I(3)]).unwrap();
        assert_eq!(ctx.get_f("a", &[0]).unwrap(), 3.0);
    }

    #[test]
    fn parsed_stage_kernel_runs_through_any_stage_entry() {
        let src = "
field out: f32[1];
kernel f(b: f32) {
  let mut a = 0.0;
  if b > 0.0 { a = b; } else { a = 2.0 * b; }
  a = a + 1.0;
  out[0] = a;
}
";
        let p = parse_program(src).unwrap();
        let mut ctx = Context::new(p).unwrap();
        assert!(matches!(
            ctx.launch("f", &[Value::F(-2.0)]),
            Err(RuntimeError::StageNotExecutable { .. })
        ));
        ctx.launch_any_stage("f", &[Value::F(-2.0)]).unwrap();
        assert_eq!(ctx.get_f("out", &[0]).unwrap(), -3.0);
    }

    #[test]
    fn zero_d_field_roundtrip() {
        let src = "
field loss: f32[] needs_grad;
kernel f() { loss[] = 0.5; }
";
        let p = build(src, &[]);
        let mut ctx = Context::new(p).unwrap();
        ctx.launch("f", &[]).unwrap();
        assert_eq!(ctx.get_f("loss", &[]).unwrap(), 0.5);
        ctx.set_adjoint("loss", &[], 1.0).unwrap();
        assert_eq!(ctx.get_adjoint("loss", &[]).unwrap(), 1.0);
    }
}
