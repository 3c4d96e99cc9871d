//! Typed intermediate representation for kernels and global fields.
//!
//! A [`Program`] is the compilation unit: global field declarations plus
//! kernel definitions. Kernel bodies are statement trees that move through
//! a fixed pipeline of stages (`parsed -> flattened -> ssa -> adjoint`);
//! each pass consumes one stage and produces the next. IR values are
//! immutable after construction and safe to share for read-only analysis.

use std::fmt::Write as _;

/// Element type of fields, locals and expressions.
///
/// The runtime additionally supports an f64 execution mode, but that is a
/// storage/evaluation concern; at the IR level every floating value is `F32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScalarType {
    F32,
    I32,
}

impl std::fmt::Display for ScalarType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScalarType::F32 => write!(f, "f32"),
            ScalarType::I32 => write!(f, "i32"),
        }
    }
}

/// A global tensor declaration. An empty `shape` is a 0-D scalar field,
/// indexed with an empty index list.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldDecl {
    pub name: String,
    pub elem: ScalarType,
    pub shape: Vec<usize>,
    pub needs_grad: bool,
    /// Marks a field that a kernel may write without an adjoint being
    /// generated for it (gradients are deliberately stopped there).
    /// Not expressible in the surface language; set programmatically.
    pub stop_grad: bool,
}

impl FieldDecl {
    pub fn new(name: impl Into<String>, elem: ScalarType, shape: Vec<usize>) -> Self {
        FieldDecl { name: name.into(), elem, shape, needs_grad: false, stop_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.needs_grad = true;
        self
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Slot id for locals and loop variables. Unique within one kernel,
/// shared between the two kinds; allocated by [`Kernel::fresh_slot`].
pub type SlotId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    /// Euclidean remainder: result lies in `[0, |divisor|)`. Serves
    /// periodic boundary indexing.
    Mod,
    Min,
    Max,
    CmpLt,
    CmpLe,
    CmpEq,
}

impl BinOp {
    pub fn is_cmp(self) -> bool {
        matches!(self, BinOp::CmpLt | BinOp::CmpLe | BinOp::CmpEq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
    Tanh,
    Floor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    ConstF(f64),
    ConstI(i64),
    /// Kernel scalar parameter, by position.
    Param(usize),
    LoopVar(SlotId),
    LocalRead(SlotId),
    FieldLoad {
        field: String,
        /// Loads the adjoint buffer instead of the primal. Only generated
        /// code (stage `adjoint`) sets this.
        grad: bool,
        idx: Vec<Expr>,
    },
    Bin {
        op: BinOp,
        a: Box<Expr>,
        b: Box<Expr>,
    },
    Un {
        op: UnOp,
        a: Box<Expr>,
    },
    /// `select(cond, a, b)`: both arms are always evaluated; `cond` is an
    /// i32 0/1 value. Guarded-domain idioms (e.g. division that is only
    /// valid on one arm) must be rewritten with safe-guards by the user.
    Select {
        cond: Box<Expr>,
        a: Box<Expr>,
        b: Box<Expr>,
    },
    Cast {
        to: ScalarType,
        a: Box<Expr>,
    },
}

impl Expr {
    pub fn f(v: f64) -> Expr {
        Expr::ConstF(v)
    }

    pub fn i(v: i64) -> Expr {
        Expr::ConstI(v)
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Bin { op, a: Box::new(a), b: Box::new(b) }
    }

    pub fn un(op: UnOp, a: Expr) -> Expr {
        Expr::Un { op, a: Box::new(a) }
    }

    pub fn select(cond: Expr, a: Expr, b: Expr) -> Expr {
        Expr::Select { cond: Box::new(cond), a: Box::new(a), b: Box::new(b) }
    }

    pub fn load(field: impl Into<String>, idx: Vec<Expr>) -> Expr {
        Expr::FieldLoad { field: field.into(), grad: false, idx }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    LocalDecl {
        slot: SlotId,
        mutable: bool,
        init: Expr,
    },
    LocalAssign {
        slot: SlotId,
        value: Expr,
    },
    FieldStore {
        field: String,
        grad: bool,
        idx: Vec<Expr>,
        value: Expr,
    },
    AtomicAdd {
        field: String,
        grad: bool,
        idx: Vec<Expr>,
        value: Expr,
    },
    If {
        cond: Expr,
        then_block: Vec<Stmt>,
        else_block: Vec<Stmt>,
    },
    For {
        var: SlotId,
        lo: Expr,
        hi: Expr,
        parallel: bool,
        /// Iterate `hi-1` down to `lo`. Only adjoint generation sets this.
        reversed: bool,
        body: Vec<Stmt>,
    },
}

/// Compilation stage of a kernel body. Advances monotonically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Parsed,
    Flattened,
    Ssa,
    Adjoint,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Parsed => "parsed",
            Stage::Flattened => "flattened",
            Stage::Ssa => "ssa",
            Stage::Adjoint => "adjoint",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "parsed" => Ok(Stage::Parsed),
            "flattened" => Ok(Stage::Flattened),
            "ssa" => Ok(Stage::Ssa),
            "adjoint" => Ok(Stage::Adjoint),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub name: String,
    pub params: Vec<(String, ScalarType)>,
    pub body: Vec<Stmt>,
    pub stage: Stage,
    /// Next free slot id; transforms allocate locals through this.
    pub next_slot: SlotId,
}

impl Kernel {
    pub fn new(name: impl Into<String>, params: Vec<(String, ScalarType)>) -> Self {
        Kernel { name: name.into(), params, body: Vec::new(), stage: Stage::Parsed, next_slot: 0 }
    }

    pub fn fresh_slot(&mut self) -> SlotId {
        let s = self.next_slot;
        self.next_slot += 1;
        s
    }
}

/// Custom gradient registration for a composite routine: when the tape
/// encounters `forward`, backward replay invokes `backward` instead of any
/// generated adjoint kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct CustomGrad {
    pub forward: String,
    pub backward: String,
}

/// The compilation unit: fields, kernels, declared composite routines and
/// custom-gradient registrations. Declaration order is preserved.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Program {
    pub fields: Vec<FieldDecl>,
    pub kernels: Vec<Kernel>,
    /// Names of host-level composite routines (sequences of kernel
    /// launches) that may appear on the tape.
    pub routines: Vec<String>,
    /// Keyed by the routine name whose launches are replaced on replay.
    pub custom_grads: std::collections::BTreeMap<String, CustomGrad>,
}

impl Program {
    pub fn field(&self, name: &str) -> Option<&FieldDecl> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn kernel(&self, name: &str) -> Option<&Kernel> {
        self.kernels.iter().find(|k| k.name == name)
    }

    pub fn kernel_mut(&mut self, name: &str) -> Option<&mut Kernel> {
        self.kernels.iter_mut().find(|k| k.name == name)
    }

    pub fn declare_routine(&mut self, name: impl Into<String>) {
        let name = name.into();
        if !self.routines.iter().any(|r| *r == name) {
            self.routines.push(name);
        }
    }

    pub fn has_routine(&self, name: &str) -> bool {
        self.routines.iter().any(|r| r == name)
    }
}

/// A validation finding. `validate` returns these instead of failing.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    /// Kernel the problem was found in, if any.
    pub kernel: Option<String>,
    /// Slash-separated node path within the kernel body.
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.kernel {
            Some(k) => write!(f, "{k}: {}: {}", self.path, self.message),
            None => write!(f, "{}: {}", self.path, self.message),
        }
    }
}

/// Checks all type, arity and declaration invariants of a program.
/// An empty result means the program is well-formed. Pure: calling it
/// twice yields identical diagnostics.
pub fn validate(program: &Program) -> Vec<Diagnostic> {
    let mut v = Validator { program, diags: Vec::new() };
    v.program();
    v.diags
}

struct Validator<'a> {
    program: &'a Program,
    diags: Vec<Diagnostic>,
}

impl<'a> Validator<'a> {
    fn program(&mut self) {
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.program.fields {
            if !seen.insert(f.name.as_str()) {
                self.global(format!("duplicate field `{}`", f.name));
            }
            if f.shape.iter().any(|&e| e == 0) {
                self.global(format!("field `{}` has a zero extent", f.name));
            }
            if f.needs_grad && f.elem != ScalarType::F32 {
                self.global(format!("needs_grad field `{}` must be f32", f.name));
            }
        }
        for (routine, cg) in &self.program.custom_grads {
            for id in [&cg.forward, &cg.backward] {
                if !self.program.has_routine(id) {
                    self.global(format!(
                        "custom gradient for `{routine}` references undeclared routine `{id}`"
                    ));
                }
            }
        }
        for k in &self.program.kernels {
            let mut kv = KernelValidator {
                program: self.program,
                kernel: k,
                slots: vec![None; k.next_slot as usize],
                diags: &mut self.diags,
                path: String::from("body"),
            };
            kv.block(&k.body);
        }
    }

    fn global(&mut self, message: String) {
        self.diags.push(Diagnostic { kernel: None, path: "program".into(), message });
    }
}

#[derive(Clone, Copy)]
struct SlotInfo {
    ty: ScalarType,
    mutable: bool,
    loop_var: bool,
}

struct KernelValidator<'a, 'd> {
    program: &'a Program,
    kernel: &'a Kernel,
    slots: Vec<Option<SlotInfo>>,
    diags: &'d mut Vec<Diagnostic>,
    path: String,
}

impl<'a, 'd> KernelValidator<'a, 'd> {
    fn report(&mut self, message: String) {
        self.diags.push(Diagnostic {
            kernel: Some(self.kernel.name.clone()),
            path: self.path.clone(),
            message,
        });
    }

    fn with_path<R>(&mut self, seg: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let len = self.path.len();
        let _ = write!(self.path, "/{seg}");
        let r = f(self);
        self.path.truncate(len);
        r
    }

    fn block(&mut self, stmts: &[Stmt]) {
        for (i, s) in stmts.iter().enumerate() {
            let seg = format!("{i}");
            self.with_path(&seg, |v| v.stmt(s));
        }
    }

    fn stmt(&mut self, s: &Stmt) {
        match s {
            Stmt::LocalDecl { slot, mutable, init } => {
                let ty = self.expr(init);
                let info = ty.map(|ty| SlotInfo { ty, mutable: *mutable, loop_var: false });
                match self.slots.get_mut(*slot as usize) {
                    Some(e) => *e = info,
                    None => self.report(format!("slot {slot} out of range")),
                }
            }
            Stmt::LocalAssign { slot, value } => {
                let vty = self.expr(value);
                match self.slots.get(*slot as usize).copied().flatten() {
                    Some(info) => {
                        if info.loop_var {
                            self.report(format!("assignment to loop variable slot {slot}"));
                        } else if !info.mutable {
                            self.report(format!("assignment to immutable local slot {slot}"));
                        } else if let Some(vty) = vty {
                            if vty != info.ty {
                                self.report(format!(
                                    "assignment type mismatch: local is {}, value is {vty}",
                                    info.ty
                                ));
                            }
                        }
                    }
                    None => self.report(format!("assignment to undeclared local slot {slot}")),
                }
            }
            Stmt::FieldStore { field, grad, idx, value }
            | Stmt::AtomicAdd { field, grad, idx, value } => {
                let vty = self.expr(value);
                if let Some(ety) = self.field_access(field, *grad, idx) {
                    if let Some(vty) = vty {
                        if vty != ety {
                            self.report(format!(
                                "stored value type {vty} does not match field `{field}` element type {ety}"
                            ));
                        }
                    }
                }
            }
            Stmt::If { cond, then_block, else_block } => {
                if let Some(t) = self.with_path("cond", |v| v.expr(cond)) {
                    if t != ScalarType::I32 {
                        self.report("if condition must be i32".into());
                    }
                }
                self.with_path("then", |v| v.block(then_block));
                self.with_path("else", |v| v.block(else_block));
            }
            Stmt::For { var, lo, hi, body, .. } => {
                for (seg, e) in [("lo", lo), ("hi", hi)] {
                    if let Some(t) = self.with_path(seg, |v| v.expr(e)) {
                        if t != ScalarType::I32 {
                            self.report(format!("loop bound `{seg}` must be i32"));
                        }
                    }
                }
                match self.slots.get_mut(*var as usize) {
                    Some(e) => {
                        *e = Some(SlotInfo { ty: ScalarType::I32, mutable: false, loop_var: true })
                    }
                    None => self.report(format!("loop var slot {var} out of range")),
                }
                self.with_path("for", |v| v.block(body));
            }
        }
    }

    fn field_access(&mut self, field: &str, grad: bool, idx: &[Expr]) -> Option<ScalarType> {
        let decl = match self.program.field(field) {
            Some(d) => d.clone(),
            None => {
                self.report(format!("undeclared field `{field}`"));
                return None;
            }
        };
        if idx.len() != decl.shape.len() {
            self.report(format!(
                "field `{field}` has {} dimensions but {} indices given",
                decl.shape.len(),
                idx.len()
            ));
        }
        for (i, e) in idx.iter().enumerate() {
            let seg = format!("idx{i}");
            if let Some(t) = self.with_path(&seg, |v| v.expr(e)) {
                if t != ScalarType::I32 {
                    self.report(format!("index {i} of field `{field}` must be i32, got {t}"));
                }
            }
        }
        if grad && !decl.needs_grad {
            self.report(format!("adjoint access to field `{field}` without needs_grad"));
        }
        Some(if grad { ScalarType::F32 } else { decl.elem })
    }

    fn expr(&mut self, e: &Expr) -> Option<ScalarType> {
        match e {
            Expr::ConstF(_) => Some(ScalarType::F32),
            Expr::ConstI(_) => Some(ScalarType::I32),
            Expr::Param(i) => match self.kernel.params.get(*i) {
                Some((_, t)) => Some(*t),
                None => {
                    self.report(format!("parameter index {i} out of range"));
                    None
                }
            },
            Expr::LoopVar(slot) => match self.slots.get(*slot as usize).copied().flatten() {
                Some(info) if info.loop_var => Some(ScalarType::I32),
                _ => {
                    self.report(format!("loop var slot {slot} not in scope"));
                    None
                }
            },
            Expr::LocalRead(slot) => match self.slots.get(*slot as usize).copied().flatten() {
                Some(info) if !info.loop_var => Some(info.ty),
                _ => {
                    self.report(format!("local slot {slot} not in scope"));
                    None
                }
            },
            Expr::FieldLoad { field, grad, idx } => self.field_access(field, *grad, idx),
            Expr::Bin { op, a, b } => {
                let ta = self.with_path("lhs", |v| v.expr(a));
                let tb = self.with_path("rhs", |v| v.expr(b));
                match (ta, tb) {
                    (Some(ta), Some(tb)) => {
                        if ta != tb {
                            self.report(format!("operand type mismatch: {ta} vs {tb}"));
                            None
                        } else if op.is_cmp() {
                            Some(ScalarType::I32)
                        } else {
                            Some(ta)
                        }
                    }
                    _ => None,
                }
            }
            Expr::Un { op, a } => {
                let t = self.with_path("operand", |v| v.expr(a))?;
                match op {
                    UnOp::Neg | UnOp::Abs => Some(t),
                    _ if t == ScalarType::F32 => Some(ScalarType::F32),
                    _ => {
                        self.report(format!("{op:?} requires an f32 operand"));
                        None
                    }
                }
            }
            Expr::Select { cond, a, b } => {
                if let Some(t) = self.with_path("cond", |v| v.expr(cond)) {
                    if t != ScalarType::I32 {
                        self.report("select condition must be i32".into());
                    }
                }
                let ta = self.with_path("a", |v| v.expr(a));
                let tb = self.with_path("b", |v| v.expr(b));
                match (ta, tb) {
                    (Some(ta), Some(tb)) if ta == tb => Some(ta),
                    (Some(ta), Some(tb)) => {
                        self.report(format!("select arms differ in type: {ta} vs {tb}"));
                        None
                    }
                    _ => None,
                }
            }
            Expr::Cast { to, a } => {
                self.with_path("operand", |v| v.expr(a));
                Some(*to)
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DumpError {
    #[error("kernel `{kernel}` is at stage {actual}, stage {requested} not reached")]
    StageNotReached { kernel: String, requested: Stage, actual: Stage },
}

/// Renders one kernel as stable text. `stage` must have been reached.
/// For stage `parsed` the output re-parses to a structurally identical
/// kernel; later stages may use generated-only syntax (`f.grad[...]`,
/// `for i in reverse a..b`).
pub fn dump_ir(kernel: &Kernel, stage: Stage) -> Result<String, DumpError> {
    if kernel.stage < stage {
        return Err(DumpError::StageNotReached {
            kernel: kernel.name.clone(),
            requested: stage,
            actual: kernel.stage,
        });
    }
    let mut out = String::new();
    dump_kernel(&mut out, kernel);
    Ok(out)
}

/// Renders the whole program (fields then kernels) in declaration order.
pub fn dump_program(program: &Program) -> String {
    let mut out = String::new();
    for f in &program.fields {
        let dims: Vec<String> = f.shape.iter().map(|d| d.to_string()).collect();
        let grad = if f.needs_grad { " needs_grad" } else { "" };
        let _ = writeln!(out, "field {}: {}[{}]{};", f.name, f.elem, dims.join(", "), grad);
    }
    for k in &program.kernels {
        out.push('\n');
        dump_kernel(&mut out, k);
    }
    out
}

fn dump_kernel(out: &mut String, k: &Kernel) {
    let params: Vec<String> = k.params.iter().map(|(n, t)| format!("{n}: {t}")).collect();
    let _ = writeln!(out, "kernel {}({}) {{", k.name, params.join(", "));
    dump_block(out, k, &k.body, 1);
    out.push_str("}\n");
}

fn dump_block(out: &mut String, k: &Kernel, stmts: &[Stmt], depth: usize) {
    let pad = "  ".repeat(depth);
    for s in stmts {
        match s {
            Stmt::LocalDecl { slot, mutable, init } => {
                let m = if *mutable { "mut " } else { "" };
                let _ = writeln!(out, "{pad}let {m}_s{slot} = {};", fmt_expr(k, init));
            }
            Stmt::LocalAssign { slot, value } => {
                let _ = writeln!(out, "{pad}_s{slot} = {};", fmt_expr(k, value));
            }
            Stmt::FieldStore { field, grad, idx, value } => {
                let _ = writeln!(
                    out,
                    "{pad}{}[{}] = {};",
                    fmt_field(field, *grad),
                    fmt_idx(k, idx),
                    fmt_expr(k, value)
                );
            }
            Stmt::AtomicAdd { field, grad, idx, value } => {
                let _ = writeln!(
                    out,
                    "{pad}{}[{}] += {};",
                    fmt_field(field, *grad),
                    fmt_idx(k, idx),
                    fmt_expr(k, value)
                );
            }
            Stmt::If { cond, then_block, else_block } => {
                let _ = writeln!(out, "{pad}if {} {{", fmt_expr(k, cond));
                dump_block(out, k, then_block, depth + 1);
                if else_block.is_empty() {
                    let _ = writeln!(out, "{pad}}}");
                } else {
                    let _ = writeln!(out, "{pad}}} else {{");
                    dump_block(out, k, else_block, depth + 1);
                    let _ = writeln!(out, "{pad}}}");
                }
            }
            Stmt::For { var, lo, hi, parallel, reversed, body } => {
                let par = if *parallel { "parallel " } else { "" };
                let rev = if *reversed { "reverse " } else { "" };
                let _ = writeln!(
                    out,
                    "{pad}{par}for _i{var} in {rev}{}..{} {{",
                    fmt_expr(k, lo),
                    fmt_expr(k, hi)
                );
                dump_block(out, k, body, depth + 1);
                let _ = writeln!(out, "{pad}}}");
            }
        }
    }
}

fn fmt_field(name: &str, grad: bool) -> String {
    if grad {
        format!("{name}.grad")
    } else {
        name.to_string()
    }
}

fn fmt_idx(k: &Kernel, idx: &[Expr]) -> String {
    idx.iter().map(|e| fmt_expr(k, e)).collect::<Vec<_>>().join(", ")
}

fn fmt_float(v: f64) -> String {
    // `{:?}` prints the shortest representation that round-trips.
    format!("{v:?}")
}

/// Precedence levels: cmp(1) < add(2) < mul(3) < unary(4) < atom(5).
fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Bin { op, .. } => match op {
            BinOp::CmpLt | BinOp::CmpLe | BinOp::CmpEq => 1,
            BinOp::Add | BinOp::Sub => 2,
            BinOp::Mul | BinOp::Div | BinOp::Mod => 3,
            BinOp::Min | BinOp::Max => 5,
        },
        Expr::Un { op: UnOp::Neg, .. } => 4,
        Expr::ConstF(v) if *v < 0.0 => 4,
        Expr::ConstI(v) if *v < 0 => 4,
        _ => 5,
    }
}

fn fmt_expr(k: &Kernel, e: &Expr) -> String {
    fmt_prec(k, e, 0)
}

fn fmt_prec(k: &Kernel, e: &Expr, min: u8) -> String {
    let p = prec(e);
    let s = match e {
        Expr::ConstF(v) => fmt_float(*v),
        Expr::ConstI(v) => v.to_string(),
        Expr::Param(i) => k.params[*i].0.clone(),
        Expr::LoopVar(slot) => format!("_i{slot}"),
        Expr::LocalRead(slot) => format!("_s{slot}"),
        Expr::FieldLoad { field, grad, idx } => {
            format!("{}[{}]", fmt_field(field, *grad), fmt_idx(k, idx))
        }
        Expr::Bin { op, a, b } => {
            let (sym, func) = match op {
                BinOp::Add => ("+", None),
                BinOp::Sub => ("-", None),
                BinOp::Mul => ("*", None),
                BinOp::Div => ("/", None),
                BinOp::Mod => ("%", None),
                BinOp::CmpLt => ("<", None),
                BinOp::CmpLe => ("<=", None),
                BinOp::CmpEq => ("==", None),
                BinOp::Min => ("", Some("min")),
                BinOp::Max => ("", Some("max")),
            };
            match func {
                Some(f) => format!("{f}({}, {})", fmt_prec(k, a, 0), fmt_prec(k, b, 0)),
                // Left-associative: the right operand needs strictly
                // higher precedence to omit parentheses.
                None => format!("{} {sym} {}", fmt_prec(k, a, p), fmt_prec(k, b, p + 1)),
            }
        }
        Expr::Un { op, a } => match op {
            UnOp::Neg => format!("-{}", fmt_prec(k, a, 5)),
            UnOp::Sin => format!("sin({})", fmt_prec(k, a, 0)),
            UnOp::Cos => format!("cos({})", fmt_prec(k, a, 0)),
            UnOp::Exp => format!("exp({})", fmt_prec(k, a, 0)),
            UnOp::Sqrt => format!("sqrt({})", fmt_prec(k, a, 0)),
            UnOp::Abs => format!("abs({})", fmt_prec(k, a, 0)),
            UnOp::Tanh => format!("tanh({})", fmt_prec(k, a, 0)),
            UnOp::Floor => format!("floor({})", fmt_prec(k, a, 0)),
        },
        Expr::Select { cond, a, b } => format!(
            "select({}, {}, {})",
            fmt_prec(k, cond, 0),
            fmt_prec(k, a, 0),
            fmt_prec(k, b, 0)
        ),
        Expr::Cast { to, a } => format!("{to}({})", fmt_prec(k, a, 0)),
    };
    if p < min {
        format!("({s})")
    } else {
        s
    }
}

/// Structural checks tied to a stage, used by passes and tests:
/// no `If` from `flattened` on, no `LocalAssign`/mutable locals at `ssa`,
/// adjoint kernels write adjoint fields only via atomic add.
pub fn check_stage(kernel: &Kernel) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut visit = |stmts: &[Stmt]| {
        scan_stmts(stmts, &mut |s, path| {
            let mut report = |msg: String| {
                diags.push(Diagnostic {
                    kernel: Some(kernel.name.clone()),
                    path: path.to_string(),
                    message: msg,
                })
            };
            match s {
                Stmt::If { .. } if kernel.stage >= Stage::Flattened => {
                    report("if statement present after flattening".into())
                }
                Stmt::LocalAssign { .. }
                    if kernel.stage >= Stage::Ssa && kernel.stage != Stage::Adjoint =>
                {
                    report("local assignment present at ssa stage".into())
                }
                Stmt::LocalDecl { mutable: true, .. }
                    if kernel.stage >= Stage::Ssa && kernel.stage != Stage::Adjoint =>
                {
                    report("mutable local present at ssa stage".into())
                }
                Stmt::FieldStore { grad: true, field, .. } if kernel.stage == Stage::Adjoint => {
                    report(format!("plain store to adjoint field `{field}` in adjoint kernel"))
                }
                _ => {}
            }
        });
    };
    visit(&kernel.body);
    diags
}

fn scan_stmts(stmts: &[Stmt], f: &mut impl FnMut(&Stmt, &str)) {
    fn rec(stmts: &[Stmt], path: &mut String, f: &mut impl FnMut(&Stmt, &str)) {
        for (i, s) in stmts.iter().enumerate() {
            let len = path.len();
            let _ = write!(path, "/{i}");
            f(s, path);
            match s {
                Stmt::If { then_block, else_block, .. } => {
                    rec(then_block, path, f);
                    rec(else_block, path, f);
                }
                Stmt::For { body, .. } => rec(body, path, f),
                _ => {}
            }
            path.truncate(len);
        }
    }
    let mut path = String::from("body");
    rec(stmts, &mut path, f);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_program() -> Program {
        let mut p = Program::default();
        p.fields.push(FieldDecl::new("x", ScalarType::F32, vec![4]).with_grad());
        p.fields.push(FieldDecl::new("y", ScalarType::F32, vec![4]).with_grad());
        let mut k = Kernel::new("copy", vec![]);
        let i = k.fresh_slot();
        k.body.push(Stmt::For {
            var: i,
            lo: Expr::i(0),
            hi: Expr::i(4),
            parallel: true,
            reversed: false,
            body: vec![Stmt::FieldStore {
                field: "y".into(),
                grad: false,
                idx: vec![Expr::LoopVar(i)],
                value: Expr::load("x", vec![Expr::LoopVar(i)]),
            }],
        });
        p.kernels.push(k);
        p
    }

    #[test]
    fn well_formed_program_validates_clean() {
        assert!(validate(&simple_program()).is_empty());
    }

    #[test]
    fn undeclared_field_is_reported() {
        let mut p = simple_program();
        if let Stmt::For { body, .. } = &mut p.kernels[0].body[0] {
            if let Stmt::FieldStore { value, .. } = &mut body[0] {
                *value = Expr::load("z", vec![Expr::i(0)]);
            }
        }
        let diags = validate(&p);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("`z`"));
    }

    #[test]
    fn f32_index_is_reported() {
        let mut p = simple_program();
        if let Stmt::For { body, .. } = &mut p.kernels[0].body[0] {
            if let Stmt::FieldStore { idx, .. } = &mut body[0] {
                idx[0] = Expr::f(0.0);
            }
        }
        let diags = validate(&p);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("must be i32"));
    }

    #[test]
    fn validate_is_pure() {
        let p = simple_program();
        assert_eq!(validate(&p), validate(&p));
    }

    #[test]
    fn dump_is_deterministic() {
        let p = simple_program();
        let a = dump_ir(&p.kernels[0], Stage::Parsed).unwrap();
        let b = dump_ir(&p.kernels[0], Stage::Parsed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dump_of_unreached_stage_fails() {
        let p = simple_program();
        assert!(dump_ir(&p.kernels[0], Stage::Ssa).is_err());
    }

    #[test]
    fn empty_kernel_dumps_header_and_block() {
        let k = Kernel::new("empty", vec![]);
        let text = dump_ir(&k, Stage::Parsed).unwrap();
        assert_eq!(text, "kernel empty() {\n}\n");
    }

    #[test]
    fn needs_grad_i32_field_is_reported() {
        let mut p = Program::default();
        let mut f = FieldDecl::new("n", ScalarType::I32, vec![2]);
        f.needs_grad = true;
        p.fields.push(f);
        let diags = validate(&p);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("must be f32"));
    }
}
