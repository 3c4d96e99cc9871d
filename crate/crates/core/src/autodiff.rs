//! Reverse-mode automatic differentiation by source-code transformation.
//!
//! [`make_adjoint`] turns an SSA-stage kernel into its adjoint kernel
//! (`<name>.grad`, same scalar parameters): a forward sweep that recomputes
//! the kernel's single-assignment locals, followed by a reverse sweep that
//! propagates adjoints from the written fields back to every differentiable
//! load. Parallel loops stay parallel (their iterations are independent);
//! serial loops are iterated in reverse. All writes to adjoint fields are
//! atomic adds, so adjoint kernels satisfy the same data access rules as
//! primal kernels.
//!
//! Correct recomputation assumes a kernel does not read elements of a field
//! it also writes; the global data access rules the runtime checks make the
//! hazardous patterns (overwrites, read-after-accumulate) illegal, and the
//! time-indexed buffers used in practice avoid the rest. The one supported
//! exception is a plain store whose right-hand side reads the stored field
//! (e.g. `x[t + 1] = f(x[t])`, or a flattened conditional store that keeps
//! the old value on one arm): there the store's adjoint first cancels the
//! consumed adjoint so self-read contributions accumulate onto a zero base.
//!
//! For composite routines whose stored intermediate state is overwritten
//! between steps, [`register_custom_gradient`] binds a hand-scheduled
//! backward routine that the tape invokes instead of the generated adjoints.

use crate::ir::{BinOp, CustomGrad, Expr, Kernel, Program, ScalarType, SlotId, Stage, Stmt, UnOp};
use std::collections::HashMap;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("kernel `{kernel}` is at stage {actual}, make_adjoint requires ssa")]
    WrongStage { kernel: String, actual: Stage },
    #[error(
        "kernel `{kernel}` writes field `{field}` which has neither needs_grad nor stop_grad; \
         mark the field before differentiating"
    )]
    NonDifferentiableWrite { kernel: String, field: String },
    #[error("kernel `{kernel}` accesses adjoint of `{field}` but is a primal kernel")]
    AdjointAccessInPrimal { kernel: String, field: String },
    #[error(
        "kernel `{kernel}`: local slot {slot} is read inside a parallel loop but declared \
         outside it; its adjoint accumulation would race"
    )]
    LocalEscapesParallelLoop { kernel: String, slot: SlotId },
    #[error("routine `{routine}` already has a custom gradient registered")]
    DuplicateCustomGradient { routine: String },
    #[error("custom gradient references undeclared routine `{routine}`")]
    UnknownRoutine { routine: String },
}

/// Registers `backward` as the hand-written gradient of `routine`; on tape
/// replay the launches recorded under `routine` are skipped and `backward`
/// is invoked once in their place. `forward` names the routine used when
/// the segment must be recomputed.
pub fn register_custom_gradient(
    program: &mut Program,
    routine: &str,
    forward: &str,
    backward: &str,
) -> Result<(), AutodiffError> {
    for id in [routine, forward, backward] {
        if !program.has_routine(id) {
            return Err(AutodiffError::UnknownRoutine { routine: id.to_string() });
        }
    }
    if program.custom_grads.contains_key(routine) {
        return Err(AutodiffError::DuplicateCustomGradient { routine: routine.to_string() });
    }
    program.custom_grads.insert(
        routine.to_string(),
        CustomGrad { forward: forward.to_string(), backward: backward.to_string() },
    );
    Ok(())
}

/// Generates the adjoint kernel of an SSA-stage kernel.
pub fn make_adjoint(kernel: &Kernel, program: &Program) -> Result<Kernel, AutodiffError> {
    if kernel.stage != Stage::Ssa {
        return Err(AutodiffError::WrongStage {
            kernel: kernel.name.clone(),
            actual: kernel.stage,
        });
    }
    check_writes(kernel, program)?;
    let mut gen = AdjointGen {
        program,
        kernel,
        next_slot: kernel.next_slot,
        slot_ty: HashMap::new(),
        acc: HashMap::new(),
        par_depth: 0,
    };
    let body = gen.block(&kernel.body)?;
    Ok(Kernel {
        name: format!("{}.grad", kernel.name),
        params: kernel.params.clone(),
        body,
        stage: Stage::Adjoint,
        next_slot: gen.next_slot,
    })
}

/// Every field a differentiable kernel writes must carry `needs_grad`
/// (adjoint generated) or `stop_grad` (write deliberately ignored), and a
/// primal kernel must not touch adjoint buffers.
fn check_writes(kernel: &Kernel, program: &Program) -> Result<(), AutodiffError> {
    fn scan(stmts: &[Stmt], kernel: &Kernel, program: &Program) -> Result<(), AutodiffError> {
        for s in stmts {
            match s {
                Stmt::FieldStore { field, grad, .. } | Stmt::AtomicAdd { field, grad, .. } => {
                    if *grad {
                        return Err(AutodiffError::AdjointAccessInPrimal {
                            kernel: kernel.name.clone(),
                            field: field.clone(),
                        });
                    }
                    if let Some(decl) = program.field(field) {
                        if !decl.needs_grad && !decl.stop_grad {
                            return Err(AutodiffError::NonDifferentiableWrite {
                                kernel: kernel.name.clone(),
                                field: field.clone(),
                            });
                        }
                    }
                }
                Stmt::For { body, .. } => scan(body, kernel, program)?,
                _ => {}
            }
        }
        Ok(())
    }
    scan(&kernel.body, kernel, program)
}

struct AdjointGen<'a> {
    program: &'a Program,
    kernel: &'a Kernel,
    next_slot: SlotId,
    slot_ty: HashMap<SlotId, ScalarType>,
    /// primal slot -> (adjoint accumulator slot, parallel depth at decl)
    acc: HashMap<SlotId, (SlotId, usize)>,
    par_depth: usize,
}

impl<'a> AdjointGen<'a> {
    fn fresh(&mut self) -> SlotId {
        let s = self.next_slot;
        self.next_slot += 1;
        s
    }

    fn block(&mut self, stmts: &[Stmt]) -> Result<Vec<Stmt>, AutodiffError> {
        let mut out = Vec::new();
        // Forward sweep: recompute the block's single-assignment locals so
        // the reverse sweep can reference them.
        for s in stmts {
            if let Stmt::LocalDecl { slot, init, .. } = s {
                self.slot_ty.insert(*slot, self.type_of(init));
                out.push(s.clone());
            }
        }
        // One mutable adjoint accumulator per f32 local of this block.
        for s in stmts {
            if let Stmt::LocalDecl { slot, .. } = s {
                if self.slot_ty[slot] == ScalarType::F32 {
                    let a = self.fresh();
                    out.push(Stmt::LocalDecl { slot: a, mutable: true, init: Expr::f(0.0) });
                    self.acc.insert(*slot, (a, self.par_depth));
                }
            }
        }
        // Reverse sweep.
        for s in stmts.iter().rev() {
            match s {
                Stmt::LocalDecl { slot, init, .. } => {
                    if let Some(&(a, _)) = self.acc.get(slot) {
                        self.backprop(init, Expr::LocalRead(a), &mut out)?;
                    }
                }
                Stmt::FieldStore { field, idx, value, .. } => {
                    let decl = self.program.field(field).expect("validated");
                    if decl.stop_grad || !decl.needs_grad {
                        continue;
                    }
                    let g = Expr::FieldLoad { field: field.clone(), grad: true, idx: idx.clone() };
                    let g = self.bind(g, &mut out);
                    // A plain store destroys the previous value of the
                    // element. When the stored expression reads the same
                    // field, the element's own contribution must
                    // accumulate onto a zero base, so cancel the consumed
                    // adjoint first (an atomic add of -g; correct even if
                    // the read aliases the stored element).
                    if reads_field(value, field) {
                        out.push(Stmt::AtomicAdd {
                            field: field.clone(),
                            grad: true,
                            idx: idx.clone(),
                            value: Expr::un(UnOp::Neg, g.clone()),
                        });
                    }
                    self.backprop(value, g, &mut out)?;
                }
                Stmt::AtomicAdd { field, idx, value, .. } => {
                    let decl = self.program.field(field).expect("validated");
                    if decl.stop_grad || !decl.needs_grad {
                        continue;
                    }
                    let g = Expr::FieldLoad { field: field.clone(), grad: true, idx: idx.clone() };
                    let g = self.bind(g, &mut out);
                    self.backprop(value, g, &mut out)?;
                }
                Stmt::For { var, lo, hi, parallel, body, .. } => {
                    if *parallel {
                        self.par_depth += 1;
                    }
                    self.slot_ty.insert(*var, ScalarType::I32);
                    let inner = self.block(body)?;
                    if *parallel {
                        self.par_depth -= 1;
                    }
                    out.push(Stmt::For {
                        var: *var,
                        lo: lo.clone(),
                        hi: hi.clone(),
                        parallel: *parallel,
                        reversed: !*parallel,
                        body: inner,
                    });
                }
                Stmt::LocalAssign { .. } | Stmt::If { .. } => {
                    unreachable!("ssa stage has no assignments or branches")
                }
            }
        }
        Ok(out)
    }

    /// Emits statements accumulating `adj` (the adjoint of `e`) into the
    /// adjoints of everything `e` reads.
    fn backprop(
        &mut self,
        e: &Expr,
        adj: Expr,
        out: &mut Vec<Stmt>,
    ) -> Result<(), AutodiffError> {
        if self.type_of(e) == ScalarType::I32 {
            return Ok(()); // integer computations carry no adjoint
        }
        match e {
            Expr::ConstF(_) | Expr::ConstI(_) | Expr::Param(_) | Expr::LoopVar(_) => Ok(()),
            Expr::LocalRead(slot) => {
                let &(a, decl_depth) = match self.acc.get(slot) {
                    Some(v) => v,
                    None => return Ok(()), // i32 local or recomputed-only value
                };
                if decl_depth != self.par_depth {
                    return Err(AutodiffError::LocalEscapesParallelLoop {
                        kernel: self.kernel.name.clone(),
                        slot: *slot,
                    });
                }
                out.push(Stmt::LocalAssign {
                    slot: a,
                    value: Expr::bin(BinOp::Add, Expr::LocalRead(a), adj),
                });
                Ok(())
            }
            Expr::FieldLoad { field, grad, idx } => {
                if *grad {
                    return Err(AutodiffError::AdjointAccessInPrimal {
                        kernel: self.kernel.name.clone(),
                        field: field.clone(),
                    });
                }
                let decl = self.program.field(field).expect("validated");
                if decl.needs_grad {
                    out.push(Stmt::AtomicAdd {
                        field: field.clone(),
                        grad: true,
                        idx: idx.clone(),
                        value: adj,
                    });
                }
                Ok(())
            }
            Expr::Bin { op, a, b } => {
                use BinOp::*;
                match op {
                    CmpLt | CmpLe | CmpEq => Ok(()), // piecewise-constant
                    Add => {
                        let g = self.bind(adj, out);
                        self.backprop(a, g.clone(), out)?;
                        self.backprop(b, g, out)
                    }
                    Sub => {
                        let g = self.bind(adj, out);
                        self.backprop(a, g.clone(), out)?;
                        self.backprop(b, Expr::un(UnOp::Neg, g), out)
                    }
                    Mul => {
                        let g = self.bind(adj, out);
                        self.backprop(a, Expr::bin(Mul, g.clone(), (**b).clone()), out)?;
                        self.backprop(b, Expr::bin(Mul, (**a).clone(), g), out)
                    }
                    Div => {
                        // d/da (a/b) = 1/b, d/db (a/b) = -a/b^2
                        let g = self.bind(adj, out);
                        self.backprop(a, Expr::bin(Div, g.clone(), (**b).clone()), out)?;
                        let db = Expr::un(
                            UnOp::Neg,
                            Expr::bin(
                                Div,
                                Expr::bin(Mul, g, (**a).clone()),
                                Expr::bin(Mul, (**b).clone(), (**b).clone()),
                            ),
                        );
                        self.backprop(b, db, out)
                    }
                    Mod => {
                        // a mod b = a - b*floor(a/b): derivative (1, 0)
                        // almost everywhere.
                        self.backprop(a, adj, out)
                    }
                    Min | Max => {
                        // Ties route the adjoint to the first operand.
                        let g = self.bind(adj, out);
                        let first_wins = if *op == Min {
                            Expr::bin(CmpLe, (**a).clone(), (**b).clone())
                        } else {
                            Expr::bin(CmpLe, (**b).clone(), (**a).clone())
                        };
                        let first_wins = self.bind(first_wins, out);
                        self.backprop(
                            a,
                            Expr::select(first_wins.clone(), g.clone(), Expr::f(0.0)),
                            out,
                        )?;
                        self.backprop(b, Expr::select(first_wins, Expr::f(0.0), g), out)
                    }
                }
            }
            Expr::Un { op, a } => {
                use UnOp::*;
                let x = || (**a).clone();
                let d = match op {
                    Neg => Some(Expr::un(Neg, adj.clone())),
                    Sin => Some(Expr::bin(BinOp::Mul, Expr::un(Cos, x()), adj.clone())),
                    Cos => Some(Expr::un(
                        Neg,
                        Expr::bin(BinOp::Mul, Expr::un(Sin, x()), adj.clone()),
                    )),
                    Exp => Some(Expr::bin(BinOp::Mul, Expr::un(Exp, x()), adj.clone())),
                    Sqrt => Some(Expr::bin(
                        BinOp::Div,
                        adj.clone(),
                        Expr::bin(BinOp::Mul, Expr::f(2.0), Expr::un(Sqrt, x())),
                    )),
                    Abs => {
                        // sign(x) with sign(0) = 0
                        let sign = Expr::select(
                            Expr::bin(BinOp::CmpLt, Expr::f(0.0), x()),
                            Expr::f(1.0),
                            Expr::select(
                                Expr::bin(BinOp::CmpLt, x(), Expr::f(0.0)),
                                Expr::f(-1.0),
                                Expr::f(0.0),
                            ),
                        );
                        Some(Expr::bin(BinOp::Mul, sign, adj.clone()))
                    }
                    Tanh => {
                        let t = Expr::un(Tanh, x());
                        Some(Expr::bin(
                            BinOp::Mul,
                            Expr::bin(BinOp::Sub, Expr::f(1.0), Expr::bin(BinOp::Mul, t.clone(), t)),
                            adj.clone(),
                        ))
                    }
                    Floor => None, // piecewise-constant
                };
                match d {
                    Some(d) => self.backprop(a, d, out),
                    None => Ok(()),
                }
            }
            Expr::Select { cond, a, b } => {
                let g = self.bind(adj, out);
                let c = self.bind((**cond).clone(), out);
                self.backprop(a, Expr::select(c.clone(), g.clone(), Expr::f(0.0)), out)?;
                self.backprop(b, Expr::select(c, Expr::f(0.0), g), out)
            }
            Expr::Cast { .. } => Ok(()), // rounding is piecewise-constant
        }
    }

    /// Materializes a non-trivial adjoint expression into a local so fan-out
    /// does not duplicate the whole subtree.
    fn bind(&mut self, e: Expr, out: &mut Vec<Stmt>) -> Expr {
        match e {
            Expr::ConstF(_) | Expr::ConstI(_) | Expr::LocalRead(_) | Expr::Param(_)
            | Expr::LoopVar(_) => e,
            complex => {
                let s = self.fresh();
                self.slot_ty.insert(s, self.type_of(&complex));
                out.push(Stmt::LocalDecl { slot: s, mutable: false, init: complex });
                Expr::LocalRead(s)
            }
        }
    }

    fn type_of(&self, e: &Expr) -> ScalarType {
        match e {
            Expr::ConstF(_) => ScalarType::F32,
            Expr::ConstI(_) | Expr::LoopVar(_) => ScalarType::I32,
            Expr::Param(i) => self.kernel.params[*i].1,
            Expr::LocalRead(slot) => {
                self.slot_ty.get(slot).copied().unwrap_or(ScalarType::F32)
            }
            Expr::FieldLoad { field, grad, .. } => {
                if *grad {
                    ScalarType::F32
                } else {
                    self.program.field(field).map(|f| f.elem).unwrap_or(ScalarType::F32)
                }
            }
            Expr::Bin { op, a, .. } => {
                if op.is_cmp() {
                    ScalarType::I32
                } else {
                    self.type_of(a)
                }
            }
            Expr::Un { a, .. } => self.type_of(a),
            Expr::Select { a, .. } => self.type_of(a),
            Expr::Cast { to, .. } => *to,
        }
    }
}

/// Whether `e` contains a primal load of field `name`.
fn reads_field(e: &Expr, name: &str) -> bool {
    match e {
        Expr::FieldLoad { field, grad, idx } => {
            (!grad && field == name) || idx.iter().any(|i| reads_field(i, name))
        }
        Expr::Bin { a, b, .. } => reads_field(a, name) || reads_field(b, name),
        Expr::Un { a, .. } => reads_field(a, name),
        Expr::Select { cond, a, b } => {
            reads_field(cond, name) || reads_field(a, name) || reads_field(b, name)
        }
        Expr::Cast { a, .. } => reads_field(a, name),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_program;
    use crate::ir::{check_stage, dump_ir, validate, FieldDecl};
    use crate::passes::{eliminate_mutable_locals, flatten_branches, simplify};

    fn to_ssa(src: &str, name: &str) -> (Kernel, Program) {
        let p = parse_program(src).expect("parse");
        assert!(validate(&p).is_empty(), "{:?}", validate(&p));
        let k = flatten_branches(p.kernel(name).unwrap().clone(), &p).unwrap();
        let k = eliminate_mutable_locals(k).unwrap();
        let k = simplify(k).unwrap();
        (k, p)
    }

    #[test]
    fn sin_of_square_adjoint_structure() {
        let src = "
field x: f32[16] needs_grad;
field y: f32[16] needs_grad;
kernel f() {
  parallel for i in 0..16 {
    let a = x[i];
    y[i] = sin(a * a);
  }
}
";
        let (k, p) = to_ssa(src, "f");
        let adj = simplify(make_adjoint(&k, &p).unwrap()).unwrap();
        assert_eq!(adj.name, "f.grad");
        assert!(check_stage(&adj).is_empty(), "{:?}", check_stage(&adj));
        let text = dump_ir(&adj, Stage::Adjoint).unwrap();
        // gradient is 2*a*cos(a*a)*y_adj: two equal contributions through
        // the accumulator, one atomic add into x.grad
        assert_eq!(text.matches("x.grad[").count(), 1, "got:\n{text}");
        assert!(text.contains("cos("), "got:\n{text}");
        assert!(text.contains("x.grad[_i0] +="), "got:\n{text}");
        assert!(text.contains("y.grad[_i0]"), "got:\n{text}");
        // the adjoint still validates against the program
        let mut p2 = p.clone();
        p2.kernels.push(adj);
        assert!(validate(&p2).is_empty(), "{:?}", validate(&p2));
    }

    #[test]
    fn min_ties_route_to_first_operand() {
        let src = "
field x: f32[2] needs_grad;
field y: f32[1] needs_grad;
kernel f() { y[0] = min(x[0], x[1]); }
";
        let (k, p) = to_ssa(src, "f");
        let adj = make_adjoint(&k, &p).unwrap();
        let text = dump_ir(&adj, Stage::Adjoint).unwrap();
        assert!(text.contains("x[0] <= x[1]"), "got:\n{text}");
    }

    #[test]
    fn serial_loop_is_reversed() {
        let src = "
field x: f32[8] needs_grad;
field s: f32[9] needs_grad;
kernel prefix() {
  for i in 0..8 {
    s[i + 1] = s[i] + x[i];
  }
}
";
        let (k, p) = to_ssa(src, "prefix");
        let adj = make_adjoint(&k, &p).unwrap();
        let text = dump_ir(&adj, Stage::Adjoint).unwrap();
        assert!(text.contains("in reverse 0..8"), "got:\n{text}");
        assert!(text.contains("s.grad["), "got:\n{text}");
    }

    #[test]
    fn parallel_loop_stays_parallel() {
        let src = "
field x: f32[8] needs_grad;
field y: f32[8] needs_grad;
kernel f() { parallel for i in 0..8 { y[i] = x[i] * 2.0; } }
";
        let (k, p) = to_ssa(src, "f");
        let adj = make_adjoint(&k, &p).unwrap();
        let text = dump_ir(&adj, Stage::Adjoint).unwrap();
        assert!(text.contains("parallel for _i0 in 0..8"), "got:\n{text}");
        assert!(!text.contains("reverse"), "got:\n{text}");
    }

    #[test]
    fn write_to_plain_field_is_rejected() {
        let src = "
field x: f32[2] needs_grad;
field t: f32[2];
kernel f() { t[0] = x[0]; }
";
        let (k, p) = to_ssa(src, "f");
        assert!(matches!(
            make_adjoint(&k, &p),
            Err(AutodiffError::NonDifferentiableWrite { .. })
        ));
    }

    #[test]
    fn stop_grad_write_is_skipped() {
        let src = "
field x: f32[2] needs_grad;
field t: f32[2];
kernel f() { t[0] = x[0]; }
";
        let (k, mut p) = to_ssa(src, "f");
        let ti = p.field_index("t").unwrap();
        p.fields[ti].stop_grad = true;
        let adj = make_adjoint(&k, &p).unwrap();
        let text = dump_ir(&adj, Stage::Adjoint).unwrap();
        assert!(!text.contains(".grad["), "got:\n{text}");
    }

    #[test]
    fn wrong_stage_is_rejected() {
        let src = "
field x: f32[2] needs_grad;
kernel f() { x[0] = 1.0; }
";
        let p = parse_program(src).unwrap();
        assert!(matches!(
            make_adjoint(p.kernel("f").unwrap(), &p),
            Err(AutodiffError::WrongStage { .. })
        ));
    }

    #[test]
    fn local_read_across_parallel_loop_is_rejected() {
        let mut p = Program::default();
        p.fields.push(FieldDecl::new("x", ScalarType::F32, vec![4]).with_grad());
        p.fields.push(FieldDecl::new("y", ScalarType::F32, vec![4]).with_grad());
        let mut k = Kernel::new("f", vec![]);
        let a = k.fresh_slot();
        let i = k.fresh_slot();
        k.body.push(Stmt::LocalDecl {
            slot: a,
            mutable: false,
            init: Expr::load("x", vec![Expr::i(0)]),
        });
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
                value: Expr::bin(BinOp::Mul, Expr::LocalRead(a), Expr::f(2.0)),
            }],
        });
        k.stage = Stage::Ssa;
        assert!(validate(&p).is_empty());
        assert!(matches!(
            make_adjoint(&k, &p),
            Err(AutodiffError::LocalEscapesParallelLoop { .. })
        ));
    }

    #[test]
    fn custom_gradient_registration() {
        let mut p = Program::default();
        p.declare_routine("advance");
        p.declare_routine("advance_grad");
        register_custom_gradient(&mut p, "advance", "advance", "advance_grad").unwrap();
        assert!(matches!(
            register_custom_gradient(&mut p, "advance", "advance", "advance_grad"),
            Err(AutodiffError::DuplicateCustomGradient { .. })
        ));
        assert!(matches!(
            register_custom_gradient(&mut p, "nope", "advance", "advance_grad"),
            Err(AutodiffError::UnknownRoutine { .. })
        ));
    }
}
