//! Mass-spring triangle: three point masses joined by springs, optimized so
//! the triangle's signed area at the end of the simulation hits a target.
//!
//! The decision variables are the three spring rest lengths. Starting from a
//! small triangle with short rest lengths, gradient descent through the full
//! simulation inflates the structure until its final-time area matches the
//! target. The spring force uses a `sqrt(d^2 + 1e-8)` length guard so the
//! gradient stays finite for coincident points.
//!
//! The default constants are calibrated so the horizon ends near the first
//! overshoot peak of the moderately damped expansion: there the final area is
//! a smooth, locally monotone function of the rest lengths, which keeps plain
//! gradient descent stable at a useful learning rate.

use super::{compile, CorpusEntry, SimError, SimResult};
use crate::runtime::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::runtime::{Context, Precision, RuntimeError, Value};

/// Initial vertex positions (the simulated triangle always starts here).
pub const POINTS: [[f64; 2]; 3] = [[0.5, 0.5], [0.6, 0.5], [0.5, 0.6]];
/// Spring endpoints: (0,1), (0,2), (1,2).
pub const SPRINGS: [[i64; 2]; 3] = [[0, 1], [0, 2], [1, 2]];

#[derive(Debug, Clone)]
pub struct MassSpringConfig {
    /// Simulation steps per forward pass.
    pub steps: usize,
    pub dt: f64,
    pub stiffness: f64,
    /// Velocity damping rate; each step multiplies v by exp(-dt * damping).
    pub damping: f64,
    /// Gradient-descent learning rate on the rest lengths.
    pub lr: f64,
    pub iters: usize,
    pub target_area: f64,
    pub rest_init: [f64; 3],
}

impl Default for MassSpringConfig {
    fn default() -> Self {
        MassSpringConfig {
            steps: 180,
            dt: 0.001,
            stiffness: 100.0,
            damping: 14.0,
            lr: 0.5,
            iters: 200,
            target_area: 0.2,
            rest_init: [0.1, 0.1, 0.14],
        }
    }
}

/// DSL source for the simulator at the given configuration.
pub fn source(cfg: &MassSpringConfig) -> String {
    let n1 = cfg.steps + 1;
    let k = cfg.stiffness;
    let dt = cfg.dt;
    let decay = (-cfg.dt * cfg.damping).exp();
    let target = cfg.target_area;
    format!(
        "
field x: f32[{n1}, 3, 2] needs_grad;
field v: f32[{n1}, 3, 2] needs_grad;
field force: f32[{n1}, 3, 2] needs_grad;
field rest: f32[3] needs_grad;
field sa: i32[3];
field sb: i32[3];
field area: f32[] needs_grad;
field loss: f32[] needs_grad;

kernel compute_force(t: i32) {{
  parallel for s in 0..3 {{
    let a = sa[s];
    let b = sb[s];
    let dx = x[t, a, 0] - x[t, b, 0];
    let dy = x[t, a, 1] - x[t, b, 1];
    let len = sqrt(dx * dx + dy * dy + 1e-8);
    let f = {k:?} * (len - rest[s]) / len;
    force[t, a, 0] += -(f * dx);
    force[t, a, 1] += -(f * dy);
    force[t, b, 0] += f * dx;
    force[t, b, 1] += f * dy;
  }}
}}

kernel advance(t: i32) {{
  parallel for i in 0..3 {{
    for d in 0..2 {{
      let vn = {decay:?} * v[t, i, d] + {dt:?} * force[t, i, d];
      v[t + 1, i, d] = vn;
      x[t + 1, i, d] = x[t, i, d] + {dt:?} * vn;
    }}
  }}
}}

kernel compute_loss(t: i32) {{
  let ax = x[t, 1, 0] - x[t, 0, 0];
  let ay = x[t, 1, 1] - x[t, 0, 1];
  let bx = x[t, 2, 0] - x[t, 0, 0];
  let by = x[t, 2, 1] - x[t, 0, 1];
  let s = 0.5 * (ax * by - ay * bx);
  area[] = s;
  loss[] = (s - {target:?}) * (s - {target:?});
}}
"
    )
}

pub const GRAD_KERNELS: [&str; 3] = ["compute_force", "advance", "compute_loss"];

/// Compiles the program and sets up topology and rest lengths.
pub fn build(cfg: &MassSpringConfig) -> Result<Context, SimError> {
    let p = compile(&source(cfg), &[], &GRAD_KERNELS)?;
    let mut ctx = Context::new(p)?;
    for (s, [a, b]) in SPRINGS.iter().enumerate() {
        ctx.set_i("sa", &[s], *a)?;
        ctx.set_i("sb", &[s], *b)?;
    }
    ctx.write_field("rest", &cfg.rest_init)?;
    Ok(ctx)
}

/// Clears all simulation state and reinstates the initial positions.
/// Does not touch the rest lengths.
pub fn reset(ctx: &mut Context) -> Result<(), RuntimeError> {
    for f in ["x", "v", "force", "area", "loss"] {
        ctx.fill(f, 0.0)?;
    }
    for (i, p) in POINTS.iter().enumerate() {
        ctx.set_f("x", &[0, i, 0], p[0])?;
        ctx.set_f("x", &[0, i, 1], p[1])?;
    }
    Ok(())
}

/// Runs the forward simulation from the current initial state; returns the
/// loss. Launches are recorded if the context's tape is recording.
pub fn forward(ctx: &mut Context, steps: usize) -> Result<f64, RuntimeError> {
    for t in 0..steps {
        ctx.launch("compute_force", &[Value::I(t as i64)])?;
        ctx.launch("advance", &[Value::I(t as i64)])?;
    }
    ctx.launch("compute_loss", &[Value::I(steps as i64)])?;
    Ok(ctx.read_field("loss")?[0])
}

/// One recorded forward pass plus backpropagation; returns (loss, d loss /
/// d rest).
pub fn loss_and_grad(ctx: &mut Context, steps: usize) -> Result<(f64, Vec<f64>), RuntimeError> {
    reset(ctx)?;
    ctx.clear_tape();
    ctx.start_recording();
    let r = forward(ctx, steps);
    ctx.stop_recording();
    let loss = r?;
    ctx.tape_backward("loss")?;
    ctx.clear_tape();
    Ok((loss, ctx.read_adjoint("rest")?))
}

/// Gradient descent on the rest lengths.
pub fn optimize(cfg: &MassSpringConfig) -> Result<SimResult, SimError> {
    let mut ctx = build(cfg)?;
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let (loss, grad) = loss_and_grad(&mut ctx, cfg.steps)?;
        if !loss.is_finite() {
            return Err(SimError::Diverged(iter));
        }
        losses.push(loss);
        let mut rest = ctx.read_field("rest")?;
        for (r, g) in rest.iter_mut().zip(&grad) {
            *r -= cfg.lr * g;
        }
        ctx.write_field("rest", &rest)?;
    }
    // evaluate the final parameters
    reset(&mut ctx).map_err(SimError::Runtime)?;
    let loss = forward(&mut ctx, cfg.steps).map_err(SimError::Runtime)?;
    let area = ctx.read_field("area")?[0];
    let rest = ctx.read_field("rest")?;
    Ok(SimResult {
        losses,
        final_params: rest.clone(),
        summary: format!(
            "rest lengths [{:.4}, {:.4}, {:.4}], final area {:.4}, final loss {:.6e}",
            rest[0], rest[1], rest[2], area, loss
        ),
    })
}

/// Finite-difference check of d loss / d rest in f64.
pub fn check_gradients(cfg: &MassSpringConfig) -> Result<GradCheckReport, SimError> {
    let mut ctx = build(cfg)?;
    ctx.set_precision(Precision::F64);
    let steps = cfg.steps;
    let rep = grad_check(
        &mut ctx,
        move |c| {
            reset(c)?;
            forward(c, steps).map(|_| ())
        },
        "rest",
        "loss",
        &GradCheckConfig { rel_tol: 1e-4, ..GradCheckConfig::default() },
    )?;
    Ok(rep)
}

pub(super) fn corpus_entry() -> CorpusEntry {
    let cfg = MassSpringConfig { steps: 4, ..MassSpringConfig::default() };
    CorpusEntry {
        name: "mass_spring",
        source: source(&cfg),
        stop_grad: vec![],
        grads: GRAD_KERNELS.to_vec(),
        init: Box::new(|ctx| {
            for (s, [a, b]) in SPRINGS.iter().enumerate() {
                ctx.set_i("sa", &[s], *a)?;
                ctx.set_i("sb", &[s], *b)?;
            }
            Ok(())
        }),
        launches: vec![
            ("compute_force", vec![0]),
            ("advance", vec![0]),
            ("compute_force", vec![3]),
            ("advance", vec![3]),
            ("compute_loss", vec![4]),
        ],
    }
}
