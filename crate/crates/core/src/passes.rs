//! IR preprocessing ahead of reverse-mode AD.
//!
//! Pipeline order is fixed: [`flatten_branches`] -> [`eliminate_mutable_locals`]
//! -> [`simplify`]. After the pipeline a kernel body contains no `If`, no
//! `LocalAssign` and no mutable `LocalDecl`, which is what the adjoint
//! generator requires.
//!
//! Flattening evaluates both select arms unconditionally. Guarded-domain
//! idioms (e.g. a division that is only valid inside a branch) must be
//! rewritten with safe-guards such as `min(v, -1e-4)` by the user.

use crate::ir::{BinOp, Expr, Kernel, Program, ScalarType, SlotId, Stage, Stmt, UnOp};
use std::collections::HashMap;

#[derive(Debug, thiserror::Error)]
pub enum PassError {
    #[error("kernel `{kernel}` is at stage {actual}, pass requires {expected}")]
    WrongStage { kernel: String, expected: Stage, actual: Stage },
    #[error("kernel `{kernel}`: loops under branches are unsupported")]
    LoopUnderBranch { kernel: String },
    #[error(
        "kernel `{kernel}`: serial loop assigns local slot {slot} declared outside the loop; \
         use a global field that satisfies the access rules instead"
    )]
    LoopCarriedLocal { kernel: String, slot: SlotId },
}

fn expect_stage(kernel: &Kernel, expected: Stage) -> Result<(), PassError> {
    if kernel.stage != expected {
        return Err(PassError::WrongStage {
            kernel: kernel.name.clone(),
            expected,
            actual: kernel.stage,
        });
    }
    Ok(())
}

/// Runs the full pipeline on every kernel of the program.
pub fn run_pipeline(program: &mut Program) -> Result<(), PassError> {
    let prog_view = program.clone();
    for k in &mut program.kernels {
        *k = flatten_branches(k.clone(), &prog_view)?;
        *k = eliminate_mutable_locals(k.clone())?;
        *k = simplify(k.clone())?;
    }
    Ok(())
}

// ── Flatten branching ────────────────────────────────────────────────────

/// Replaces every `if` with select-merged straight-line code. Locals
/// assigned under a branch become `select(cond, new, old)` assignments,
/// branch-local field stores re-store the old loaded value on the untaken
/// arm, and branch-local atomic adds add zero on the untaken arm. Both
/// arms execute unconditionally.
pub fn flatten_branches(mut kernel: Kernel, program: &Program) -> Result<Kernel, PassError> {
    expect_stage(&kernel, Stage::Parsed)?;
    let body = std::mem::take(&mut kernel.body);
    kernel.body = flatten_block(body, &mut kernel.next_slot, &kernel.name, program)?;
    kernel.stage = Stage::Flattened;
    Ok(kernel)
}

fn flatten_block(
    stmts: Vec<Stmt>,
    next_slot: &mut SlotId,
    kernel_name: &str,
    program: &Program,
) -> Result<Vec<Stmt>, PassError> {
    let mut out = Vec::new();
    for s in stmts {
        match s {
            Stmt::If { cond, then_block, else_block } => {
                let then_block = flatten_block(then_block, next_slot, kernel_name, program)?;
                let else_block = flatten_block(else_block, next_slot, kernel_name, program)?;
                let c = *next_slot;
                *next_slot += 1;
                out.push(Stmt::LocalDecl { slot: c, mutable: false, init: cond });
                let start = out.len();
                merge_arm(&mut out, then_block, c, true, kernel_name, program)?;
                merge_arm(&mut out, else_block, c, false, kernel_name, program)?;
                fuse_conditional_stores(&mut out, start, c);
            }
            Stmt::For { var, lo, hi, parallel, reversed, body } => {
                let body = flatten_block(body, next_slot, kernel_name, program)?;
                out.push(Stmt::For { var, lo, hi, parallel, reversed, body });
            }
            other => out.push(other),
        }
    }
    Ok(out)
}

/// Appends the statements of one (already flattened) branch arm, guarding
/// every effect with the hoisted condition. `taken_on_true` distinguishes
/// the then-arm from the else-arm.
fn merge_arm(
    out: &mut Vec<Stmt>,
    arm: Vec<Stmt>,
    cond_slot: SlotId,
    taken_on_true: bool,
    kernel_name: &str,
    program: &Program,
) -> Result<(), PassError> {
    let cond = || Expr::LocalRead(cond_slot);
    let pick = |taken: Expr, untaken: Expr| {
        if taken_on_true {
            Expr::select(cond(), taken, untaken)
        } else {
            Expr::select(cond(), untaken, taken)
        }
    };
    for s in arm {
        match s {
            Stmt::LocalDecl { .. } => out.push(s),
            Stmt::LocalAssign { slot, value } => {
                out.push(Stmt::LocalAssign { slot, value: pick(value, Expr::LocalRead(slot)) });
            }
            Stmt::FieldStore { field, grad, idx, value } => {
                let old = Expr::FieldLoad { field: field.clone(), grad, idx: idx.clone() };
                out.push(Stmt::FieldStore { field, grad, idx, value: pick(value, old) });
            }
            Stmt::AtomicAdd { field, grad, idx, value } => {
                let zero = match program.field(&field).map(|f| f.elem) {
                    Some(ScalarType::I32) if !grad => Expr::i(0),
                    _ => Expr::f(0.0),
                };
                out.push(Stmt::AtomicAdd { field, grad, idx, value: pick(value, zero) });
            }
            Stmt::For { .. } => {
                return Err(PassError::LoopUnderBranch { kernel: kernel_name.to_string() })
            }
            Stmt::If { .. } => unreachable!("arms are flattened before merging"),
        }
    }
    Ok(())
}

/// When both arms of an `if` store to the same element, merging leaves two
/// adjacent guarded stores (`y[i] = select(c, A, y[i]); y[i] = select(c,
/// y[i], B)`). Fuse such pairs into one store `y[i] = select(c, A, B)`,
/// which keeps the flattened code inside the data access rules.
fn fuse_conditional_stores(out: &mut Vec<Stmt>, start: usize, cond_slot: SlotId) {
    let mut i = start;
    while i + 1 < out.len() {
        let fused = match (&out[i], &out[i + 1]) {
            (
                Stmt::FieldStore {
                    field: f1,
                    grad: g1,
                    idx: i1,
                    value: Expr::Select { cond: c1, a: a1, b: b1 },
                },
                Stmt::FieldStore {
                    field: f2,
                    grad: g2,
                    idx: i2,
                    value: Expr::Select { cond: c2, a: a2, b: b2 },
                },
            ) if f1 == f2
                && g1 == g2
                && i1 == i2
                && **c1 == Expr::LocalRead(cond_slot)
                && **c2 == Expr::LocalRead(cond_slot) =>
            {
                let old = Expr::FieldLoad { field: f1.clone(), grad: *g1, idx: i1.clone() };
                if **b1 == old && **a2 == old {
                    Some(Stmt::FieldStore {
                        field: f1.clone(),
                        grad: *g1,
                        idx: i1.clone(),
                        value: Expr::select(
                            Expr::LocalRead(cond_slot),
                            (**a1).clone(),
                            (**b2).clone(),
                        ),
                    })
                } else {
                    None
                }
            }
            _ => None,
        };
        if let Some(s) = fused {
            out[i] = s;
            out.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

// ── Eliminate mutable locals ─────────────────────────────────────────────

/// Store forwarding: every mutable local and every assignment becomes a
/// fresh single-assignment local; reads are forwarded to the latest
/// definition. Serial loops that assign a local declared outside the loop
/// are rejected.
pub fn eliminate_mutable_locals(mut kernel: Kernel) -> Result<Kernel, PassError> {
    expect_stage(&kernel, Stage::Flattened)?;
    let body = std::mem::take(&mut kernel.body);
    let mut env: HashMap<SlotId, SlotId> = HashMap::new();
    kernel.body = forward_block(body, &mut kernel.next_slot, &kernel.name, &mut env)?;
    kernel.stage = Stage::Ssa;
    Ok(kernel)
}

fn forward_block(
    stmts: Vec<Stmt>,
    next_slot: &mut SlotId,
    kernel_name: &str,
    env: &mut HashMap<SlotId, SlotId>,
) -> Result<Vec<Stmt>, PassError> {
    let mut out = Vec::new();
    for s in stmts {
        match s {
            Stmt::LocalDecl { slot, mutable, init } => {
                let init = forward_expr(init, env);
                if mutable {
                    let ssa = *next_slot;
                    *next_slot += 1;
                    out.push(Stmt::LocalDecl { slot: ssa, mutable: false, init });
                    env.insert(slot, ssa);
                } else {
                    out.push(Stmt::LocalDecl { slot, mutable: false, init });
                }
            }
            Stmt::LocalAssign { slot, value } => {
                let value = forward_expr(value, env);
                let ssa = *next_slot;
                *next_slot += 1;
                out.push(Stmt::LocalDecl { slot: ssa, mutable: false, init: value });
                env.insert(slot, ssa);
            }
            Stmt::FieldStore { field, grad, idx, value } => {
                out.push(Stmt::FieldStore {
                    field,
                    grad,
                    idx: idx.into_iter().map(|e| forward_expr(e, env)).collect(),
                    value: forward_expr(value, env),
                });
            }
            Stmt::AtomicAdd { field, grad, idx, value } => {
                out.push(Stmt::AtomicAdd {
                    field,
                    grad,
                    idx: idx.into_iter().map(|e| forward_expr(e, env)).collect(),
                    value: forward_expr(value, env),
                });
            }
            Stmt::For { var, lo, hi, parallel, reversed, body } => {
                if let Some(slot) = assigned_outer_local(&body, env) {
                    return Err(PassError::LoopCarriedLocal {
                        kernel: kernel_name.to_string(),
                        slot,
                    });
                }
                let lo = forward_expr(lo, env);
                let hi = forward_expr(hi, env);
                let body = forward_block(body, next_slot, kernel_name, env)?;
                out.push(Stmt::For { var, lo, hi, parallel, reversed, body });
            }
            Stmt::If { .. } => unreachable!("no if statements at flattened stage"),
        }
    }
    Ok(out)
}

/// Finds an assignment (inside `stmts`, recursively) to a mutable local
/// that was declared outside, i.e. one already tracked by `env`.
fn assigned_outer_local(stmts: &[Stmt], env: &HashMap<SlotId, SlotId>) -> Option<SlotId> {
    let mut declared_inside: Vec<SlotId> = Vec::new();
    fn scan(
        stmts: &[Stmt],
        env: &HashMap<SlotId, SlotId>,
        declared_inside: &mut Vec<SlotId>,
    ) -> Option<SlotId> {
        for s in stmts {
            match s {
                Stmt::LocalDecl { slot, .. } => declared_inside.push(*slot),
                Stmt::LocalAssign { slot, .. } => {
                    if env.contains_key(slot) && !declared_inside.contains(slot) {
                        return Some(*slot);
                    }
                }
                Stmt::For { body, .. } => {
                    if let Some(v) = scan(body, env, declared_inside) {
                        return Some(v);
                    }
                }
                _ => {}
            }
        }
        None
    }
    scan(stmts, env, &mut declared_inside)
}

fn forward_expr(e: Expr, env: &HashMap<SlotId, SlotId>) -> Expr {
    match e {
        Expr::LocalRead(slot) => match env.get(&slot) {
            Some(ssa) => Expr::LocalRead(*ssa),
            None => Expr::LocalRead(slot),
        },
        Expr::FieldLoad { field, grad, idx } => Expr::FieldLoad {
            field,
            grad,
            idx: idx.into_iter().map(|i| forward_expr(i, env)).collect(),
        },
        Expr::Bin { op, a, b } => {
            Expr::bin(op, forward_expr(*a, env), forward_expr(*b, env))
        }
        Expr::Un { op, a } => Expr::un(op, forward_expr(*a, env)),
        Expr::Select { cond, a, b } => Expr::select(
            forward_expr(*cond, env),
            forward_expr(*a, env),
            forward_expr(*b, env),
        ),
        Expr::Cast { to, a } => Expr::Cast { to, a: Box::new(forward_expr(*a, env)) },
        atom => atom,
    }
}

// ── Simplify ─────────────────────────────────────────────────────────────

/// Constant folding, algebraic identities and dead-local elimination.
/// Semantics preserving: only exact rewrites are applied (e.g. `x - 0.0`
/// and `x * 1.0` are folded, `x + 0.0` is not since it would lose the
/// sign of a negative zero).
pub fn simplify(mut kernel: Kernel) -> Result<Kernel, PassError> {
    if kernel.stage != Stage::Ssa && kernel.stage != Stage::Adjoint {
        return Err(PassError::WrongStage {
            kernel: kernel.name.clone(),
            expected: Stage::Ssa,
            actual: kernel.stage,
        });
    }
    let body = std::mem::take(&mut kernel.body);
    let mut body = simplify_block(body);
    // Interleave copy propagation (constants and single-use load-free
    // locals), expression rewriting and dead-local elimination until a
    // fixed point; propagation exposes rewrites (e.g. the select chains
    // the flattener emits) and rewriting exposes dead locals.
    loop {
        let mut uses: HashMap<SlotId, usize> = HashMap::new();
        count_block(&body, &mut uses);
        let mut inline: HashMap<SlotId, Expr> = HashMap::new();
        collect_inlinable(&body, &uses, &mut inline);
        if !inline.is_empty() {
            body = inline_block(body, &inline);
        }
        body = simplify_block(body);
        let mut uses = HashMap::new();
        count_block(&body, &mut uses);
        let next = drop_dead(body.clone(), &uses);
        if next == body && inline.is_empty() {
            break;
        }
        body = next;
    }
    kernel.body = body;
    Ok(kernel)
}

/// Immutable locals whose definition can replace their reads without
/// changing semantics: constants (any use count) and single-use values
/// that contain no field load (a load must not move across a store).
fn collect_inlinable(
    stmts: &[Stmt],
    uses: &HashMap<SlotId, usize>,
    inline: &mut HashMap<SlotId, Expr>,
) {
    for s in stmts {
        match s {
            Stmt::LocalDecl { slot, mutable: false, init } => {
                let n = uses.get(slot).copied().unwrap_or(0);
                let ok = matches!(init, Expr::ConstF(_) | Expr::ConstI(_))
                    || (n == 1 && !contains_load(init));
                if ok && n > 0 {
                    inline.insert(*slot, init.clone());
                }
            }
            Stmt::For { body, .. } => collect_inlinable(body, uses, inline),
            Stmt::If { then_block, else_block, .. } => {
                collect_inlinable(then_block, uses, inline);
                collect_inlinable(else_block, uses, inline);
            }
            _ => {}
        }
    }
}

fn contains_load(e: &Expr) -> bool {
    match e {
        Expr::FieldLoad { .. } => true,
        Expr::Bin { a, b, .. } => contains_load(a) || contains_load(b),
        Expr::Un { a, .. } => contains_load(a),
        Expr::Select { cond, a, b } => {
            contains_load(cond) || contains_load(a) || contains_load(b)
        }
        Expr::Cast { a, .. } => contains_load(a),
        _ => false,
    }
}

fn inline_block(stmts: Vec<Stmt>, inline: &HashMap<SlotId, Expr>) -> Vec<Stmt> {
    stmts
        .into_iter()
        .map(|s| match s {
            Stmt::LocalDecl { slot, mutable, init } => {
                Stmt::LocalDecl { slot, mutable, init: inline_expr(init, inline) }
            }
            Stmt::LocalAssign { slot, value } => {
                Stmt::LocalAssign { slot, value: inline_expr(value, inline) }
            }
            Stmt::FieldStore { field, grad, idx, value } => Stmt::FieldStore {
                field,
                grad,
                idx: idx.into_iter().map(|e| inline_expr(e, inline)).collect(),
                value: inline_expr(value, inline),
            },
            Stmt::AtomicAdd { field, grad, idx, value } => Stmt::AtomicAdd {
                field,
                grad,
                idx: idx.into_iter().map(|e| inline_expr(e, inline)).collect(),
                value: inline_expr(value, inline),
            },
            Stmt::For { var, lo, hi, parallel, reversed, body } => Stmt::For {
                var,
                lo: inline_expr(lo, inline),
                hi: inline_expr(hi, inline),
                parallel,
                reversed,
                body: inline_block(body, inline),
            },
            Stmt::If { cond, then_block, else_block } => Stmt::If {
                cond: inline_expr(cond, inline),
                then_block: inline_block(then_block, inline),
                else_block: inline_block(else_block, inline),
            },
        })
        .collect()
}

fn inline_expr(e: Expr, inline: &HashMap<SlotId, Expr>) -> Expr {
    match e {
        Expr::LocalRead(slot) => match inline.get(&slot) {
            Some(def) => def.clone(),
            None => Expr::LocalRead(slot),
        },
        Expr::FieldLoad { field, grad, idx } => Expr::FieldLoad {
            field,
            grad,
            idx: idx.into_iter().map(|i| inline_expr(i, inline)).collect(),
        },
        Expr::Bin { op, a, b } => {
            Expr::bin(op, inline_expr(*a, inline), inline_expr(*b, inline))
        }
        Expr::Un { op, a } => Expr::un(op, inline_expr(*a, inline)),
        Expr::Select { cond, a, b } => Expr::select(
            inline_expr(*cond, inline),
            inline_expr(*a, inline),
            inline_expr(*b, inline),
        ),
        Expr::Cast { to, a } => Expr::Cast { to, a: Box::new(inline_expr(*a, inline)) },
        atom => atom,
    }
}

fn simplify_block(stmts: Vec<Stmt>) -> Vec<Stmt> {
    stmts
        .into_iter()
        .map(|s| match s {
            Stmt::LocalDecl { slot, mutable, init } => {
                Stmt::LocalDecl { slot, mutable, init: simplify_expr(init) }
            }
            Stmt::LocalAssign { slot, value } => {
                Stmt::LocalAssign { slot, value: simplify_expr(value) }
            }
            Stmt::FieldStore { field, grad, idx, value } => Stmt::FieldStore {
                field,
                grad,
                idx: idx.into_iter().map(simplify_expr).collect(),
                value: simplify_expr(value),
            },
            Stmt::AtomicAdd { field, grad, idx, value } => Stmt::AtomicAdd {
                field,
                grad,
                idx: idx.into_iter().map(simplify_expr).collect(),
                value: simplify_expr(value),
            },
            Stmt::For { var, lo, hi, parallel, reversed, body } => Stmt::For {
                var,
                lo: simplify_expr(lo),
                hi: simplify_expr(hi),
                parallel,
                reversed,
                body: simplify_block(body),
            },
            Stmt::If { cond, then_block, else_block } => Stmt::If {
                cond: simplify_expr(cond),
                then_block: simplify_block(then_block),
                else_block: simplify_block(else_block),
            },
        })
        .collect()
}

fn count_expr(e: &Expr, uses: &mut HashMap<SlotId, usize>) {
    match e {
        Expr::LocalRead(slot) => *uses.entry(*slot).or_insert(0) += 1,
        Expr::FieldLoad { idx, .. } => idx.iter().for_each(|i| count_expr(i, uses)),
        Expr::Bin { a, b, .. } => {
            count_expr(a, uses);
            count_expr(b, uses);
        }
        Expr::Un { a, .. } => count_expr(a, uses),
        Expr::Select { cond, a, b } => {
            count_expr(cond, uses);
            count_expr(a, uses);
            count_expr(b, uses);
        }
        Expr::Cast { a, .. } => count_expr(a, uses),
        _ => {}
    }
}

fn count_block(stmts: &[Stmt], uses: &mut HashMap<SlotId, usize>) {
    for s in stmts {
        match s {
            Stmt::LocalDecl { init, .. } => count_expr(init, uses),
            Stmt::LocalAssign { value, .. } => count_expr(value, uses),
            Stmt::FieldStore { idx, value, .. } | Stmt::AtomicAdd { idx, value, .. } => {
                idx.iter().for_each(|i| count_expr(i, uses));
                count_expr(value, uses);
            }
            Stmt::For { lo, hi, body, .. } => {
                count_expr(lo, uses);
                count_expr(hi, uses);
                count_block(body, uses);
            }
            Stmt::If { cond, then_block, else_block } => {
                count_expr(cond, uses);
                count_block(then_block, uses);
                count_block(else_block, uses);
            }
        }
    }
}

fn drop_dead(stmts: Vec<Stmt>, uses: &HashMap<SlotId, usize>) -> Vec<Stmt> {
    stmts
        .into_iter()
        .filter_map(|s| match s {
            Stmt::LocalDecl { slot, .. } | Stmt::LocalAssign { slot, .. }
                if uses.get(&slot).copied().unwrap_or(0) == 0 =>
            {
                None
            }
            Stmt::For { var, lo, hi, parallel, reversed, body } => {
                Some(Stmt::For { var, lo, hi, parallel, reversed, body: drop_dead(body, uses) })
            }
            Stmt::If { cond, then_block, else_block } => Some(Stmt::If {
                cond,
                then_block: drop_dead(then_block, uses),
                else_block: drop_dead(else_block, uses),
            }),
            other => Some(other),
        })
        .collect()
}

pub(crate) fn simplify_expr(e: Expr) -> Expr {
    match e {
        Expr::Bin { op, a, b } => {
            let a = simplify_expr(*a);
            let b = simplify_expr(*b);
            fold_bin(op, a, b)
        }
        Expr::Un { op, a } => {
            let a = simplify_expr(*a);
            fold_un(op, a)
        }
        Expr::Select { cond, a, b } => {
            let cond = simplify_expr(*cond);
            let a = simplify_expr(*a);
            let b = simplify_expr(*b);
            if let Expr::ConstI(c) = cond {
                return if c != 0 { a } else { b };
            }
            // select(c, select(c, x, y), z) -> select(c, x, z), same on
            // the other arm; the flattener produces these chains.
            let a = match a {
                Expr::Select { cond: c2, a: x, b: _ } if *c2 == cond => *x,
                other => other,
            };
            let b = match b {
                Expr::Select { cond: c2, a: _, b: y } if *c2 == cond => *y,
                other => other,
            };
            Expr::select(cond, a, b)
        }
        Expr::Cast { to, a } => {
            let a = simplify_expr(*a);
            match (&a, to) {
                (Expr::ConstI(v), ScalarType::F32) => Expr::f(*v as f64),
                (Expr::ConstI(v), ScalarType::I32) => Expr::i(*v),
                (Expr::ConstF(v), ScalarType::I32) => Expr::i(*v as i64),
                (Expr::ConstF(v), ScalarType::F32) => Expr::f(*v),
                _ => Expr::Cast { to, a: Box::new(a) },
            }
        }
        Expr::FieldLoad { field, grad, idx } => Expr::FieldLoad {
            field,
            grad,
            idx: idx.into_iter().map(simplify_expr).collect(),
        },
        atom => atom,
    }
}

fn fold_bin(op: BinOp, a: Expr, b: Expr) -> Expr {
    use BinOp::*;
    if let (Expr::ConstF(x), Expr::ConstF(y)) = (&a, &b) {
        let (x, y) = (*x, *y);
        let v = match op {
            Add => Some(x + y),
            Sub => Some(x - y),
            Mul => Some(x * y),
            Div => Some(x / y),
            Mod => Some(x - y * (x / y).floor()),
            Min => Some(if x <= y { x } else { y }),
            Max => Some(if y <= x { x } else { y }),
            CmpLt => return Expr::i((x < y) as i64),
            CmpLe => return Expr::i((x <= y) as i64),
            CmpEq => return Expr::i((x == y) as i64),
        };
        if let Some(v) = v {
            if v.is_finite() {
                return Expr::f(v);
            }
        }
    }
    if let (Expr::ConstI(x), Expr::ConstI(y)) = (&a, &b) {
        let (x, y) = (*x, *y);
        let v = match op {
            Add => x.checked_add(y),
            Sub => x.checked_sub(y),
            Mul => x.checked_mul(y),
            Div if y != 0 => x.checked_div(y),
            Mod if y != 0 => Some(x.rem_euclid(y)),
            Min => Some(x.min(y)),
            Max => Some(x.max(y)),
            CmpLt => Some((x < y) as i64),
            CmpLe => Some((x <= y) as i64),
            CmpEq => Some((x == y) as i64),
            _ => None,
        };
        if let Some(v) = v {
            return Expr::i(v);
        }
    }
    // exact identities only
    match (op, &a, &b) {
        (Sub, _, Expr::ConstF(z)) if *z == 0.0 => return a,
        (Mul, _, Expr::ConstF(o)) if *o == 1.0 => return a,
        (Mul, Expr::ConstF(o), _) if *o == 1.0 => return b,
        (Div, _, Expr::ConstF(o)) if *o == 1.0 => return a,
        (Add, _, Expr::ConstI(0)) => return a,
        (Add, Expr::ConstI(0), _) => return b,
        (Sub, _, Expr::ConstI(0)) => return a,
        (Mul, _, Expr::ConstI(1)) => return a,
        (Mul, Expr::ConstI(1), _) => return b,
        (Div, _, Expr::ConstI(1)) => return a,
        _ => {}
    }
    Expr::bin(op, a, b)
}

fn fold_un(op: UnOp, a: Expr) -> Expr {
    use UnOp::*;
    if let Expr::ConstF(x) = &a {
        let x = *x;
        let v = match op {
            Neg => -x,
            Sin => x.sin(),
            Cos => x.cos(),
            Exp => x.exp(),
            Sqrt => x.sqrt(),
            Abs => x.abs(),
            Tanh => x.tanh(),
            Floor => x.floor(),
        };
        if v.is_finite() {
            return Expr::f(v);
        }
    }
    if let (Neg, Expr::ConstI(x)) = (op, &a) {
        return Expr::i(-*x);
    }
    if let (Abs, Expr::ConstI(x)) = (op, &a) {
        return Expr::i(x.abs());
    }
    Expr::un(op, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_program;
    use crate::ir::{check_stage, dump_ir};

    fn flatten_named(src: &str, name: &str) -> Result<(Kernel, Program), PassError> {
        let p = parse_program(src).expect("parse");
        let k = flatten_branches(p.kernel(name).unwrap().clone(), &p)?;
        Ok((k, p))
    }

    #[test]
    fn fig3_flattens_to_selects() {
        let src = "
field out: f32[1];
kernel f(b: f32) {
  let mut a = 0.0;
  if b > 0.0 { a = b; } else { a = 2.0 * b; }
  a = a + 1.0;
  out[0] = a;
}
";
        let (k, _) = flatten_named(src, "f").unwrap();
        assert!(check_stage(&k).is_empty());
        let ssa = eliminate_mutable_locals(k).unwrap();
        let ssa = simplify(ssa).unwrap();
        let text = dump_ir(&ssa, Stage::Ssa).unwrap();
        assert!(text.contains("select(0.0 < b, b, 2.0 * b)"), "got:\n{text}");
        assert!(!text.contains("if"));
        assert!(!text.contains("mut"));
    }

    #[test]
    fn branch_free_kernel_unchanged_by_flatten() {
        let src = "
field y: f32[4];
kernel f() { parallel for i in 0..4 { y[i] = 1.0; } }
";
        let p = parse_program(src).unwrap();
        let k0 = p.kernel("f").unwrap().clone();
        let k1 = flatten_branches(k0.clone(), &p).unwrap();
        assert_eq!(k0.body, k1.body);
    }

    #[test]
    fn guarded_atomic_add_becomes_amount_selected() {
        let src = "
field f: f32[4];
kernel k(c: i32, e: f32) {
  if c == 1 { f[0] += e; }
}
";
        let (k, _) = flatten_named(src, "k").unwrap();
        let text = dump_ir(&k, Stage::Flattened).unwrap();
        assert!(text.contains("f[0] += select(_s0, e, 0.0)"), "got:\n{text}");
    }

    #[test]
    fn guarded_store_reloads_old_value() {
        let src = "
field f: f32[4];
kernel k(c: i32) {
  if c == 1 { f[0] = 2.0; }
}
";
        let (k, _) = flatten_named(src, "k").unwrap();
        let text = dump_ir(&k, Stage::Flattened).unwrap();
        assert!(text.contains("f[0] = select(_s0, 2.0, f[0])"), "got:\n{text}");
    }

    #[test]
    fn paired_branch_stores_fuse_into_one_select_store() {
        let src = "
field x: f32[4];
field y: f32[4];
kernel k() {
  parallel for i in 0..4 {
    if x[i] > 0.0 {
      y[i] = sin(x[i]);
    } else {
      y[i] = x[i] * x[i];
    }
  }
}
";
        let (k, _) = flatten_named(src, "k").unwrap();
        let text = dump_ir(&k, Stage::Flattened).unwrap();
        // a single store with no reload of the target element
        assert_eq!(text.matches("y[_i0] =").count(), 1, "got:\n{text}");
        assert!(
            text.contains("y[_i0] = select(_s1, sin(x[_i0]), x[_i0] * x[_i0])"),
            "got:\n{text}"
        );
    }

    #[test]
    fn loop_under_branch_rejected() {
        let src = "
field f: f32[4];
kernel k(c: i32) {
  if c == 1 { for i in 0..4 { f[i] = 0.0; } }
}
";
        assert!(matches!(
            flatten_named(src, "k"),
            Err(PassError::LoopUnderBranch { .. })
        ));
    }

    #[test]
    fn loop_carried_local_rejected() {
        let src = "
field x: f32[4];
kernel k(n: i32) {
  let mut s = 0.0;
  for i in 0..n { s = s + x[i]; }
  x[0] = s;
}
";
        let (k, _) = flatten_named(src, "k").unwrap();
        assert!(matches!(
            eliminate_mutable_locals(k),
            Err(PassError::LoopCarriedLocal { .. })
        ));
    }

    #[test]
    fn already_ssa_kernel_is_identity() {
        let src = "
field y: f32[4];
kernel f() {
  parallel for i in 0..4 {
    let a = y[i] * 2.0;
    y[i] = a;
  }
}
";
        let p = parse_program(src).unwrap();
        let k = flatten_branches(p.kernel("f").unwrap().clone(), &p).unwrap();
        let k1 = eliminate_mutable_locals(k.clone()).unwrap();
        assert_eq!(k.body, k1.body);
    }

    #[test]
    fn constant_folding() {
        let e = Expr::bin(BinOp::Mul, Expr::f(2.0), Expr::f(3.0));
        assert_eq!(simplify_expr(e), Expr::f(6.0));
        // the compile-time exp(-dt*damping) from the integrator listing
        let e = Expr::un(
            UnOp::Exp,
            Expr::un(UnOp::Neg, Expr::bin(BinOp::Mul, Expr::f(0.001), Expr::f(5.0))),
        );
        assert_eq!(simplify_expr(e), Expr::f((-0.001f64 * 5.0).exp()));
    }

    #[test]
    fn dead_local_removed() {
        let src = "
field y: f32[4];
kernel f() {
  parallel for i in 0..4 {
    let dead = y[i] * 3.0;
    let live = y[i] + 1.0;
    y[i] = live;
  }
}
";
        let p = parse_program(src).unwrap();
        let k = flatten_branches(p.kernel("f").unwrap().clone(), &p).unwrap();
        let k = eliminate_mutable_locals(k).unwrap();
        let k = simplify(k).unwrap();
        let text = dump_ir(&k, Stage::Ssa).unwrap();
        assert!(!text.contains("* 3.0"), "dead local survived:\n{text}");
        assert!(text.contains("+ 1.0"));
    }

    #[test]
    fn passes_are_idempotent_in_effect() {
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
        let k = flatten_branches(p.kernel("f").unwrap().clone(), &p).unwrap();
        let k = eliminate_mutable_locals(k).unwrap();
        let once = simplify(k).unwrap();
        let twice = simplify(once.clone()).unwrap();
        assert_eq!(once, twice);
    }
}
