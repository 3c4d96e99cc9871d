//! Differentiable smoke: semi-Lagrangian advection plus Jacobi pressure
//! projection on a periodic grid, optimizing the initial velocity field so
//! the advected density matches a target image.
//!
//! Density and post-projection velocities are stored for every time step,
//! but the per-step pressure solve (divergence + J Jacobi iterations) uses
//! scratch fields that are overwritten each step. The whole step is
//! therefore wrapped in a routine with a registered custom gradient: its
//! backward pass first recomputes the scratch fields from the stored
//! velocities, then launches the generated adjoint kernels in reverse
//! order. This keeps the tape one entry per step while the scratch memory
//! stays O(J n^2) instead of O(T J n^2).

use super::{compile, CorpusEntry, SimError, SimResult};
use crate::autodiff::register_custom_gradient;
use crate::runtime::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::runtime::{Context, Precision, RuntimeError, Value};

#[derive(Debug, Clone)]
pub struct SmokeConfig {
    /// Grid side length.
    pub n: usize,
    pub steps: usize,
    /// Jacobi iterations per pressure solve.
    pub jacobi: usize,
    /// Advection step in grid cells per unit velocity.
    pub dt: f64,
    pub iters: usize,
    pub lr: f64,
}

impl Default for SmokeConfig {
    fn default() -> Self {
        SmokeConfig { n: 32, steps: 20, jacobi: 10, dt: 1.0, iters: 30, lr: 20.0 }
    }
}

/// Emits a bilinear sample of `src[t_expr]` at the position backtraced by
/// `(velx, vely)` from cell (i, j), bound to local `name`.
fn bilerp(name: &str, src: &str, t_expr: &str, velx: &str, vely: &str, n: usize, dt: f64) -> String {
    format!(
        "    let px = f32(i) - {dt:?} * {velx};
    let py = f32(j) - {dt:?} * {vely};
    let fx = floor(px);
    let fy = floor(py);
    let wx = px - fx;
    let wy = py - fy;
    let i0 = i32(fx) % {n};
    let j0 = i32(fy) % {n};
    let i1 = (i0 + 1) % {n};
    let j1 = (j0 + 1) % {n};
    let {name} = (1.0 - wx) * (1.0 - wy) * {src}[{t_expr}, i0, j0]
               + (1.0 - wx) * wy * {src}[{t_expr}, i0, j1]
               + wx * (1.0 - wy) * {src}[{t_expr}, i1, j0]
               + wx * wy * {src}[{t_expr}, i1, j1];"
    )
}

pub fn source(cfg: &SmokeConfig) -> String {
    let (n, j1, n1) = (cfg.n, cfg.jacobi + 1, cfg.steps + 1);
    let dt = cfg.dt;
    let sample_vx = bilerp("sx", "vx", "t", "vx[t, i, j]", "vy[t, i, j]", n, dt);
    let sample_vy = bilerp("sy", "vy", "t", "vx[t, i, j]", "vy[t, i, j]", n, dt);
    let sample_d = bilerp("sd", "d", "t", "vx[t + 1, i, j]", "vy[t + 1, i, j]", n, dt);
    format!(
        "
field d: f32[{n1}, {n}, {n}] needs_grad;
field vx: f32[{n1}, {n}, {n}] needs_grad;
field vy: f32[{n1}, {n}, {n}] needs_grad;
field vxa: f32[{n1}, {n}, {n}] needs_grad;
field vya: f32[{n1}, {n}, {n}] needs_grad;
field div: f32[{n}, {n}] needs_grad;
field p: f32[{j1}, {n}, {n}] needs_grad;
field v0x: f32[{n}, {n}] needs_grad;
field v0y: f32[{n}, {n}] needs_grad;
field d0: f32[{n}, {n}];
field target: f32[{n}, {n}];
field loss: f32[] needs_grad;

kernel init() {{
  parallel for i in 0..{n} {{
    for j in 0..{n} {{
      d[0, i, j] = d0[i, j];
      vx[0, i, j] = v0x[i, j];
      vy[0, i, j] = v0y[i, j];
    }}
  }}
}}

kernel advect_v(t: i32) {{
  parallel for i in 0..{n} {{
    for j in 0..{n} {{
{sample_vx}
      vxa[t + 1, i, j] = sx;
    }}
  }}
  parallel for i in 0..{n} {{
    for j in 0..{n} {{
{sample_vy}
      vya[t + 1, i, j] = sy;
    }}
  }}
}}

kernel divergence(t: i32) {{
  parallel for i in 0..{n} {{
    for j in 0..{n} {{
      div[i, j] = 0.5 * (vxa[t + 1, (i + 1) % {n}, j] - vxa[t + 1, (i - 1) % {n}, j]
                       + vya[t + 1, i, (j + 1) % {n}] - vya[t + 1, i, (j - 1) % {n}]);
    }}
  }}
}}

kernel clear_p() {{
  parallel for i in 0..{n} {{
    for j in 0..{n} {{
      p[0, i, j] = 0.0;
    }}
  }}
}}

kernel jacobi(k: i32) {{
  parallel for i in 0..{n} {{
    for j in 0..{n} {{
      p[k + 1, i, j] = 0.25 * (p[k, (i + 1) % {n}, j] + p[k, (i - 1) % {n}, j]
                             + p[k, i, (j + 1) % {n}] + p[k, i, (j - 1) % {n}]
                             - div[i, j]);
    }}
  }}
}}

kernel project(t: i32) {{
  parallel for i in 0..{n} {{
    for j in 0..{n} {{
      vx[t + 1, i, j] = vxa[t + 1, i, j]
                      - 0.5 * (p[{jac}, (i + 1) % {n}, j] - p[{jac}, (i - 1) % {n}, j]);
      vy[t + 1, i, j] = vya[t + 1, i, j]
                      - 0.5 * (p[{jac}, i, (j + 1) % {n}] - p[{jac}, i, (j - 1) % {n}]);
    }}
  }}
}}

kernel advect_d(t: i32) {{
  parallel for i in 0..{n} {{
    for j in 0..{n} {{
{sample_d}
      d[t + 1, i, j] = sd;
    }}
  }}
}}

kernel compute_loss(t: i32) {{
  parallel for i in 0..{n} {{
    for j in 0..{n} {{
      let e = d[t, i, j] - target[i, j];
      loss[] += e * e;
    }}
  }}
}}
",
        jac = cfg.jacobi,
    )
}

pub const GRAD_KERNELS: [&str; 8] = [
    "init",
    "advect_v",
    "divergence",
    "clear_p",
    "jacobi",
    "project",
    "advect_d",
    "compute_loss",
];

/// Compiles the program, declares the `advance` routine with its custom
/// gradient, and registers both host closures.
pub fn build(cfg: &SmokeConfig) -> Result<Context, SimError> {
    let mut p = compile(&source(cfg), &[], &GRAD_KERNELS)?;
    p.declare_routine("advance");
    p.declare_routine("advance_bwd");
    register_custom_gradient(&mut p, "advance", "advance", "advance_bwd")?;
    let mut ctx = Context::new(p)?;
    let jac = cfg.jacobi;
    ctx.register_routine("advance", move |c, args| {
        let t = args[0];
        c.launch("advect_v", &[t])?;
        c.launch("divergence", &[t])?;
        c.launch("clear_p", &[])?;
        for k in 0..jac {
            c.launch("jacobi", &[Value::I(k as i64)])?;
        }
        c.launch("project", &[t])?;
        c.launch("advect_d", &[t])
    })?;
    ctx.register_routine("advance_bwd", move |c, args| {
        let t = args[0];
        // the scratch solve was overwritten by later steps: recompute it
        // from the stored advected velocities, then clear its adjoints
        c.launch("divergence", &[t])?;
        c.launch("clear_p", &[])?;
        for k in 0..jac {
            c.launch("jacobi", &[Value::I(k as i64)])?;
        }
        c.zero_adjoint_field("div")?;
        c.zero_adjoint_field("p")?;
        // generated adjoints, in reverse launch order
        c.launch("advect_d.grad", &[t])?;
        c.launch("project.grad", &[t])?;
        for k in (0..jac).rev() {
            c.launch("jacobi.grad", &[Value::I(k as i64)])?;
        }
        c.launch("divergence.grad", &[t])?;
        c.launch("advect_v.grad", &[t])
    })?;
    Ok(ctx)
}

/// Forward simulation from the current `v0x/v0y/d0`; returns the loss.
pub fn forward(ctx: &mut Context, cfg: &SmokeConfig) -> Result<f64, RuntimeError> {
    ctx.fill("loss", 0.0)?;
    ctx.launch("init", &[])?;
    for t in 0..cfg.steps {
        ctx.call_routine("advance", &[Value::I(t as i64)])?;
    }
    ctx.launch("compute_loss", &[Value::I(cfg.steps as i64)])?;
    Ok(ctx.read_field("loss")?[0])
}

/// One recorded forward plus backpropagation; returns (loss, d loss / d
/// (v0x, v0y)).
pub fn loss_and_grad(
    ctx: &mut Context,
    cfg: &SmokeConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>), RuntimeError> {
    ctx.clear_tape();
    ctx.start_recording();
    let r = forward(ctx, cfg);
    ctx.stop_recording();
    let loss = r?;
    ctx.tape_backward("loss")?;
    ctx.clear_tape();
    Ok((loss, ctx.read_adjoint("v0x")?, ctx.read_adjoint("v0y")?))
}

/// Writes the default problem: a centered density blob and a target blob
/// shifted a quarter-domain to the right.
pub fn default_problem(ctx: &mut Context, cfg: &SmokeConfig) -> Result<(), RuntimeError> {
    let n = cfg.n;
    let blob = |ci: f64, cj: f64| -> Vec<f64> {
        let sigma = n as f64 / 8.0;
        (0..n * n)
            .map(|e| {
                let (di, dj) = ((e / n) as f64 - ci, (e % n) as f64 - cj);
                (-(di * di + dj * dj) / (sigma * sigma)).exp()
            })
            .collect()
    };
    ctx.write_field("d0", &blob(n as f64 / 2.0, n as f64 / 2.0))?;
    ctx.write_field("target", &blob(n as f64 / 2.0, n as f64 * 0.75))?;
    ctx.fill("v0x", 0.0)?;
    ctx.fill("v0y", 0.0)?;
    Ok(())
}

/// Gradient descent on the initial velocity field.
pub fn optimize(cfg: &SmokeConfig) -> Result<SimResult, SimError> {
    let mut ctx = build(cfg)?;
    default_problem(&mut ctx, cfg)?;
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let (loss, gx, gy) = loss_and_grad(&mut ctx, cfg)?;
        if !loss.is_finite() {
            return Err(SimError::Diverged(iter));
        }
        losses.push(loss);
        for (f, g) in [("v0x", gx), ("v0y", gy)] {
            let mut v = ctx.read_field(f)?;
            for (v, g) in v.iter_mut().zip(&g) {
                *v -= cfg.lr * g;
            }
            ctx.write_field(f, &v)?;
        }
    }
    let final_loss = forward(&mut ctx, cfg).map_err(SimError::Runtime)?;
    Ok(SimResult {
        losses,
        final_params: vec![final_loss],
        summary: format!("final loss {final_loss:.6e}"),
    })
}

/// Finite-difference check of d loss / d v0x in f64.
pub fn check_gradients(cfg: &SmokeConfig) -> Result<GradCheckReport, SimError> {
    let mut ctx = build(cfg)?;
    ctx.set_precision(Precision::F64);
    default_problem(&mut ctx, cfg)?;
    // A generic starting flow in both components: backtraced sample
    // positions must stay away from exact cell corners, where the bilinear
    // interpolation has derivative kinks that finite differences straddle.
    let n = cfg.n;
    let tau = std::f64::consts::TAU;
    let vx: Vec<f64> = (0..n * n)
        .map(|e| 0.31 + 0.4 * ((e / n) as f64 / n as f64 * tau).sin())
        .collect();
    let vy: Vec<f64> = (0..n * n)
        .map(|e| 0.23 + 0.4 * ((e % n) as f64 / n as f64 * tau).cos())
        .collect();
    ctx.write_field("v0x", &vx)?;
    ctx.write_field("v0y", &vy)?;
    let c = cfg.clone();
    let rep = grad_check(
        &mut ctx,
        move |ctx| forward(ctx, &c).map(|_| ()),
        "v0x",
        "loss",
        &GradCheckConfig { rel_tol: 1e-4, ..GradCheckConfig::default() },
    )?;
    Ok(rep)
}

/// Host-side divergence of a velocity slice at time index `t`, from fields
/// `fx`/`fy`; returns the max absolute cell divergence.
pub fn max_divergence(
    ctx: &Context,
    fx: &str,
    fy: &str,
    t: usize,
    n: usize,
) -> Result<f64, RuntimeError> {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = 0.5
                * (ctx.get_f(fx, &[t, (i + 1) % n, j])? - ctx.get_f(fx, &[t, (i + n - 1) % n, j])?
                    + ctx.get_f(fy, &[t, i, (j + 1) % n])?
                    - ctx.get_f(fy, &[t, i, (j + n - 1) % n])?);
            worst = worst.max(d.abs());
        }
    }
    Ok(worst)
}

pub(super) fn corpus_entry() -> CorpusEntry {
    let cfg = SmokeConfig { n: 8, steps: 4, jacobi: 3, ..SmokeConfig::default() };
    CorpusEntry {
        name: "smoke",
        source: source(&cfg),
        stop_grad: vec![],
        grads: GRAD_KERNELS.to_vec(),
        init: Box::new(|_| Ok(())),
        launches: vec![
            ("init", vec![]),
            ("advect_v", vec![1]),
            ("divergence", vec![1]),
            ("clear_p", vec![]),
            ("jacobi", vec![0]),
            ("jacobi", vec![2]),
            ("project", vec![1]),
            ("advect_d", vec![1]),
            ("compute_loss", vec![4]),
        ],
    }
}
