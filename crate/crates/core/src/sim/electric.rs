//! Charged particle steered by electrodes: a neural network controls the
//! charge on a ring of fixed electrodes so the particle tracks a target
//! waypoint trajectory.
//!
//! The force on the (unit-charge) particle from electrode `e` is
//! `k * q_e * (x - p_e) / max(r, r_min)^3` — an inverse-square law with the
//! radius floored to keep the field finite near an electrode. The
//! controller reads the offset to the current waypoint and the particle's
//! velocity, and outputs per-electrode charges through tanh. The loss is
//! the time-integrated squared tracking error.

use super::{compile, CorpusEntry, SimError, SimResult};
use crate::runtime::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::runtime::{Context, Precision, RuntimeError, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N_ELECTRODES: usize = 8;
/// Controller inputs: waypoint offset (2) + velocity (2).
pub const N_INPUTS: usize = 4;

#[derive(Debug, Clone)]
pub struct ElectricConfig {
    pub steps: usize,
    pub dt: f64,
    /// Coulomb constant of the electrode force.
    pub k: f64,
    /// Radius floor for the force law.
    pub r_min: f64,
    /// Electrode ring radius around the domain center (0.5, 0.5).
    pub ring_radius: f64,
    pub hidden: usize,
    /// Particle start position and velocity.
    pub start: [f64; 2],
    pub velocity: [f64; 2],
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ElectricConfig {
    fn default() -> Self {
        ElectricConfig {
            steps: 128,
            dt: 0.01,
            k: 0.02,
            r_min: 0.05,
            ring_radius: 0.4,
            hidden: 8,
            start: [0.5, 0.35],
            velocity: [0.0, 0.0],
            iters: 40,
            lr: 2.0,
            seed: 1,
        }
    }
}

pub fn source(cfg: &ElectricConfig) -> String {
    let n1 = cfg.steps + 1;
    let (h, ne) = (cfg.hidden, N_ELECTRODES);
    let dt = cfg.dt;
    let k = cfg.k;
    let rmin = cfg.r_min;
    let (sx, sy) = (cfg.start[0], cfg.start[1]);
    let (vx0, vy0) = (cfg.velocity[0], cfg.velocity[1]);
    format!(
        "
field x: f32[{n1}, 2] needs_grad;
field v: f32[{n1}, 2] needs_grad;
field force: f32[{n1}, 2] needs_grad;
field hidden_raw: f32[{n1}, {h}] needs_grad;
field q_raw: f32[{n1}, {ne}] needs_grad;
field w1: f32[{h}, {n_in}] needs_grad;
field b1: f32[{h}] needs_grad;
field w2: f32[{ne}, {h}] needs_grad;
field b2: f32[{ne}] needs_grad;
field epos: f32[{ne}, 2];
field target: f32[{n1}, 2];
field loss: f32[] needs_grad;

kernel init() {{
  x[0, 0] = {sx:?};
  x[0, 1] = {sy:?};
  v[0, 0] = {vx0:?};
  v[0, 1] = {vy0:?};
}}

kernel controller_hidden(t: i32) {{
  parallel for h in 0..{h} {{
    hidden_raw[t + 1, h] = w1[h, 0] * (x[t, 0] - target[t, 0])
                         + w1[h, 1] * (x[t, 1] - target[t, 1])
                         + w1[h, 2] * v[t, 0]
                         + w1[h, 3] * v[t, 1]
                         + b1[h];
  }}
}}

kernel controller_q(t: i32) {{
  parallel for e in 0..{ne} {{
    for h in 0..{h} {{
      q_raw[t + 1, e] += w2[e, h] * tanh(hidden_raw[t + 1, h]);
    }}
    q_raw[t + 1, e] += b2[e];
  }}
}}

kernel apply_force(t: i32) {{
  parallel for e in 0..{ne} {{
    let dx = x[t, 0] - epos[e, 0];
    let dy = x[t, 1] - epos[e, 1];
    let r = sqrt(dx * dx + dy * dy + 1e-12);
    let rs = max(r, {rmin:?});
    let q = tanh(q_raw[t + 1, e]);
    let s = {k:?} * q / (rs * rs * rs);
    force[t + 1, 0] += s * dx;
    force[t + 1, 1] += s * dy;
  }}
}}

kernel advance(t: i32) {{
  for d in 0..2 {{
    let vn = v[t, d] + {dt:?} * force[t + 1, d];
    v[t + 1, d] = vn;
    x[t + 1, d] = x[t, d] + {dt:?} * vn;
  }}
}}

kernel step_loss(t: i32) {{
  for d in 0..2 {{
    let e = x[t + 1, d] - target[t + 1, d];
    loss[] += {dt:?} * e * e;
  }}
}}
",
        n_in = N_INPUTS,
    )
}

pub const GRAD_KERNELS: [&str; 6] =
    ["init", "controller_hidden", "controller_q", "apply_force", "advance", "step_loss"];
pub const WEIGHT_FIELDS: [&str; 4] = ["w1", "b1", "w2", "b2"];

pub fn build(cfg: &ElectricConfig) -> Result<Context, SimError> {
    let p = compile(&source(cfg), &["epos", "target"], &GRAD_KERNELS)?;
    let mut ctx = Context::new(p)?;
    for e in 0..N_ELECTRODES {
        let a = e as f64 / N_ELECTRODES as f64 * std::f64::consts::TAU;
        ctx.set_f("epos", &[e, 0], 0.5 + cfg.ring_radius * a.cos())?;
        ctx.set_f("epos", &[e, 1], 0.5 + cfg.ring_radius * a.sin())?;
    }
    init_weights(&mut ctx, cfg)?;
    write_arc_target(&mut ctx, cfg)?;
    Ok(ctx)
}

pub fn init_weights(ctx: &mut Context, cfg: &ElectricConfig) -> Result<(), RuntimeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s1 = (2.0 / N_INPUTS as f64).sqrt();
    let s2 = (2.0 / cfg.hidden as f64).sqrt();
    let mut fill = |ctx: &mut Context, f: &str, n: usize, s: f64| {
        let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-s..s)).collect();
        ctx.write_field(f, &vals)
    };
    fill(ctx, "w1", cfg.hidden * N_INPUTS, s1)?;
    fill(ctx, "b1", cfg.hidden, 0.1)?;
    fill(ctx, "w2", N_ELECTRODES * cfg.hidden, s2)?;
    fill(ctx, "b2", N_ELECTRODES, 0.1)?;
    Ok(())
}

/// Default waypoints: a slow upward drift from the start position.
pub fn write_arc_target(ctx: &mut Context, cfg: &ElectricConfig) -> Result<(), RuntimeError> {
    let n1 = cfg.steps + 1;
    let mut t = Vec::with_capacity(n1 * 2);
    for i in 0..n1 {
        let s = i as f64 / cfg.steps as f64;
        t.push(cfg.start[0] + 0.1 * (s * std::f64::consts::PI).sin());
        t.push(cfg.start[1] + 0.2 * s);
    }
    ctx.write_field("target", &t)
}

/// Forward simulation; returns the loss.
pub fn forward(ctx: &mut Context, cfg: &ElectricConfig) -> Result<f64, RuntimeError> {
    for f in ["x", "v", "force", "hidden_raw", "q_raw", "loss"] {
        ctx.fill(f, 0.0)?;
    }
    ctx.launch("init", &[])?;
    for t in 0..cfg.steps {
        let tv = Value::I(t as i64);
        ctx.launch("controller_hidden", &[tv])?;
        ctx.launch("controller_q", &[tv])?;
        ctx.launch("apply_force", &[tv])?;
        ctx.launch("advance", &[tv])?;
        ctx.launch("step_loss", &[tv])?;
    }
    Ok(ctx.read_field("loss")?[0])
}

/// Gradient descent on the controller weights.
pub fn optimize(cfg: &ElectricConfig) -> Result<SimResult, SimError> {
    let mut ctx = build(cfg)?;
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        ctx.clear_tape();
        ctx.start_recording();
        let r = forward(&mut ctx, cfg);
        ctx.stop_recording();
        let loss = r.map_err(SimError::Runtime)?;
        if !loss.is_finite() {
            return Err(SimError::Diverged(iter));
        }
        losses.push(loss);
        ctx.tape_backward("loss")?;
        ctx.clear_tape();
        for f in WEIGHT_FIELDS {
            let g = ctx.read_adjoint(f)?;
            let mut w = ctx.read_field(f)?;
            for (w, g) in w.iter_mut().zip(&g) {
                *w -= cfg.lr * g;
            }
            ctx.write_field(f, &w)?;
        }
    }
    let final_loss = forward(&mut ctx, cfg).map_err(SimError::Runtime)?;
    Ok(SimResult {
        losses,
        final_params: vec![final_loss],
        summary: format!("final tracking loss {final_loss:.6e}"),
    })
}

/// Finite-difference check of d loss / d `input` (a weight field) in f64.
pub fn check_gradients(cfg: &ElectricConfig, input: &str) -> Result<GradCheckReport, SimError> {
    let mut ctx = build(cfg)?;
    ctx.set_precision(Precision::F64);
    let c = cfg.clone();
    let rep = grad_check(
        &mut ctx,
        move |ctx| forward(ctx, &c).map(|_| ()),
        input,
        "loss",
        &GradCheckConfig { rel_tol: 1e-4, ..GradCheckConfig::default() },
    )?;
    Ok(rep)
}

pub(super) fn corpus_entry() -> CorpusEntry {
    let cfg = ElectricConfig { steps: 4, ..ElectricConfig::default() };
    let setup_cfg = cfg.clone();
    CorpusEntry {
        name: "electric",
        source: source(&cfg),
        stop_grad: vec!["epos", "target"],
        grads: GRAD_KERNELS.to_vec(),
        init: Box::new(move |ctx| {
            for e in 0..N_ELECTRODES {
                let a = e as f64 / N_ELECTRODES as f64 * std::f64::consts::TAU;
                ctx.set_f("epos", &[e, 0], 0.5 + setup_cfg.ring_radius * a.cos())?;
                ctx.set_f("epos", &[e, 1], 0.5 + setup_cfg.ring_radius * a.sin())?;
            }
            Ok(())
        }),
        launches: vec![
            ("init", vec![]),
            ("controller_hidden", vec![0]),
            ("controller_q", vec![0]),
            ("apply_force", vec![0]),
            ("advance", vec![0]),
            ("step_loss", vec![0]),
            ("controller_hidden", vec![3]),
            ("advance", vec![3]),
        ],
    }
}
