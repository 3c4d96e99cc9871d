//! The launch tape: lightweight end-to-end backpropagation.
//!
//! While recording, every primal kernel launch appends (kernel name, scalar
//! arguments) — nothing else; global fields act as the checkpoints between
//! kernels. [`Context::tape_backward`] clears all adjoints, seeds the loss
//! adjoint with 1 and replays the tape in reverse, launching `<name>.grad`
//! for each entry. Composite routines with a registered custom gradient are
//! recorded as a single entry and replayed through their hand-written
//! backward routine instead.

use super::{Context, RuntimeError, Value};

#[derive(Debug, Clone, PartialEq)]
pub enum TapeEntry {
    Kernel { name: String, args: Vec<Value> },
    Routine { name: String, args: Vec<Value> },
}

#[derive(Debug, Default)]
pub struct Tape {
    entries: Vec<TapeEntry>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TapeEntry] {
        &self.entries
    }

    pub(crate) fn push(&mut self, e: TapeEntry) {
        self.entries.push(e);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

impl Context {
    pub fn start_recording(&mut self) {
        self.recording = true;
    }

    pub fn stop_recording(&mut self) {
        self.recording = false;
    }

    pub fn clear_tape(&mut self) {
        self.tape.clear();
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Invokes a registered host routine. If the routine has a custom
    /// gradient it is recorded as one opaque tape entry and its inner
    /// kernel launches are not recorded; otherwise the inner launches
    /// record themselves as usual.
    pub fn call_routine(&mut self, name: &str, args: &[Value]) -> Result<(), RuntimeError> {
        let f = self
            .routines
            .get(name)
            .cloned()
            .ok_or_else(|| RuntimeError::UnknownRoutine(name.to_string()))?;
        if self.program.custom_grads.contains_key(name) {
            if self.recording {
                self.tape.push(TapeEntry::Routine { name: name.to_string(), args: args.to_vec() });
            }
            let was = self.recording;
            self.recording = false;
            let r = f(self, args);
            self.recording = was;
            r
        } else {
            f(self, args)
        }
    }

    /// Clears every adjoint, seeds `d loss / d loss = 1` and replays the
    /// tape backwards.
    pub fn tape_backward(&mut self, loss: &str) -> Result<(), RuntimeError> {
        self.zero_adjoints();
        self.fill_adjoint(loss, 1.0)?;
        self.replay_backward()
    }

    /// Replays the tape backwards without touching adjoint seeds; used by
    /// segment-wise checkpointing, which manages seeding itself.
    pub fn replay_backward(&mut self) -> Result<(), RuntimeError> {
        let entries = self.tape.entries.clone();
        let was = self.recording;
        self.recording = false;
        let result = (|| {
            for e in entries.iter().rev() {
                match e {
                    TapeEntry::Kernel { name, args } => {
                        let adj = format!("{name}.grad");
                        if !self.kernel_ids.contains_key(&adj) {
                            return Err(RuntimeError::NoAdjointKernel(adj));
                        }
                        self.launch(&adj, args)?;
                    }
                    TapeEntry::Routine { name, args } => {
                        let cg = self.program.custom_grads.get(name).cloned().expect("recorded");
                        let f = self.routines.get(&cg.backward).cloned().ok_or_else(|| {
                            RuntimeError::NoBackwardRoutine {
                                routine: name.clone(),
                                backward: cg.backward.clone(),
                            }
                        })?;
                        f(self, args)?;
                    }
                }
            }
            Ok(())
        })();
        self.recording = was;
        result
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::build;
    use super::*;
    use crate::autodiff::register_custom_gradient;
    use crate::runtime::Precision;

    const CHAIN: &str = "
field x: f32[4] needs_grad;
field y: f32[4] needs_grad;
field loss: f32[] needs_grad;
kernel double() { parallel for i in 0..4 { y[i] = x[i] * 2.0; } }
kernel square_sum() { parallel for i in 0..4 { loss[] += y[i] * y[i]; } }
";

    #[test]
    fn tape_records_and_backpropagates_a_chain() {
        let p = build(CHAIN, &["double", "square_sum"]);
        let mut ctx = Context::new(p).unwrap();
        ctx.set_precision(Precision::F64);
        let xs = [0.5, -1.0, 2.0, 0.0];
        ctx.write_field("x", &xs).unwrap();
        ctx.start_recording();
        ctx.launch("double", &[]).unwrap();
        ctx.launch("square_sum", &[]).unwrap();
        ctx.stop_recording();
        assert_eq!(ctx.tape().len(), 2);
        ctx.tape_backward("loss").unwrap();
        // loss = sum (2x)^2 = 4 x^2, so dloss/dx = 8x
        for (i, x) in xs.iter().enumerate() {
            let g = ctx.get_adjoint("x", &[i]).unwrap();
            assert!((g - 8.0 * x).abs() < 1e-12, "elem {i}: {g} vs {}", 8.0 * x);
        }
    }

    #[test]
    fn adjoint_launches_are_not_recorded() {
        let p = build(CHAIN, &["double", "square_sum"]);
        let mut ctx = Context::new(p).unwrap();
        ctx.start_recording();
        ctx.launch("double", &[]).unwrap();
        ctx.launch("double.grad", &[]).unwrap();
        ctx.stop_recording();
        assert_eq!(ctx.tape().len(), 1);
    }

    #[test]
    fn backward_without_adjoint_kernel_fails() {
        let p = build(CHAIN, &["double"]); // no adjoint for square_sum
        let mut ctx = Context::new(p).unwrap();
        ctx.start_recording();
        ctx.launch("square_sum", &[]).unwrap();
        ctx.stop_recording();
        assert!(matches!(
            ctx.tape_backward("loss"),
            Err(RuntimeError::NoAdjointKernel(_))
        ));
    }

    #[test]
    fn custom_gradient_routine_replaces_inner_launches() {
        let mut p = build(CHAIN, &["double", "square_sum"]);
        p.declare_routine("fwd");
        p.declare_routine("bwd");
        register_custom_gradient(&mut p, "fwd", "fwd", "bwd").unwrap();
        let mut ctx = Context::new(p).unwrap();
        ctx.set_precision(Precision::F64);
        ctx.register_routine("fwd", |c, _| c.launch("double", &[])).unwrap();
        // deliberately different backward: writes a sentinel gradient
        ctx.register_routine("bwd", |c, _| {
            for i in 0..4 {
                let g = c.get_adjoint("x", &[i])?;
                c.set_adjoint("x", &[i], g + 100.0)?;
            }
            Ok(())
        })
        .unwrap();
        ctx.write_field("x", &[1.0, 1.0, 1.0, 1.0]).unwrap();
        ctx.start_recording();
        ctx.call_routine("fwd", &[]).unwrap();
        ctx.launch("square_sum", &[]).unwrap();
        ctx.stop_recording();
        // one opaque routine entry + one kernel entry
        assert_eq!(ctx.tape().len(), 2);
        ctx.tape_backward("loss").unwrap();
        assert_eq!(ctx.get_adjoint("x", &[0]).unwrap(), 100.0);
    }

    #[test]
    fn plain_routine_records_inner_launches() {
        let mut p = build(CHAIN, &["double", "square_sum"]);
        p.declare_routine("both");
        let mut ctx = Context::new(p).unwrap();
        ctx.register_routine("both", |c, _| {
            c.launch("double", &[])?;
            c.launch("square_sum", &[])
        })
        .unwrap();
        ctx.start_recording();
        ctx.call_routine("both", &[]).unwrap();
        ctx.stop_recording();
        assert_eq!(ctx.tape().len(), 2);
    }
}
