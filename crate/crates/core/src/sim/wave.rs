//! Damped wave equation on a periodic 2-D grid, differentiated end-to-end
//! to recover an initial height field from a target final state.
//!
//! Discretization: `u[t+1] = 2u[t] - u[t-1] + c^2 dt^2 lap(u[t])
//! - alpha dt (u[t] - u[t-1])` with a 5-point periodic Laplacian. The loss
//! is the squared difference to a target field at the final time, weighted
//! by the cell area `dx^2`.

use super::{compile, CorpusEntry, SimError, SimResult};
use crate::runtime::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::runtime::{Context, Precision, RuntimeError, Value};

#[derive(Debug, Clone)]
pub struct WaveConfig {
    /// Grid side length (the domain is n x n, periodic).
    pub n: usize,
    pub steps: usize,
    pub dt: f64,
    /// Wave speed.
    pub c: f64,
    /// First-order damping coefficient.
    pub alpha: f64,
    pub iters: usize,
    pub lr: f64,
}

impl Default for WaveConfig {
    fn default() -> Self {
        WaveConfig { n: 32, steps: 64, dt: 0.01, c: 1.0, alpha: 0.2, iters: 100, lr: 50.0 }
    }
}

impl WaveConfig {
    pub fn dx(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Courant number `c dt / dx`; above 1 the scheme is unstable.
    pub fn cfl_number(&self) -> f64 {
        self.c * self.dt / self.dx()
    }

    /// Configuration warnings (currently just the CFL condition).
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.cfl_number() > 1.0 {
            w.push(format!(
                "CFL number c*dt/dx = {:.3} exceeds 1; the scheme will be unstable",
                self.cfl_number()
            ));
        }
        w
    }
}

pub fn source(cfg: &WaveConfig) -> String {
    let (n, n1) = (cfg.n, cfg.steps + 1);
    let c2dt2_inv_dx2 = cfg.c * cfg.c * cfg.dt * cfg.dt / (cfg.dx() * cfg.dx());
    let alpha_dt = cfg.alpha * cfg.dt;
    let dx2 = cfg.dx() * cfg.dx();
    format!(
        "
field u: f32[{n1}, {n}, {n}] needs_grad;
field u0: f32[{n}, {n}] needs_grad;
field target: f32[{n}, {n}];
field loss: f32[] needs_grad;

kernel init() {{
  parallel for i in 0..{n} {{
    for j in 0..{n} {{
      u[0, i, j] = u0[i, j];
      u[1, i, j] = u0[i, j];
    }}
  }}
}}

kernel step(t: i32) {{
  parallel for i in 0..{n} {{
    for j in 0..{n} {{
      let lap = u[t, (i + 1) % {n}, j] + u[t, (i - 1) % {n}, j]
              + u[t, i, (j + 1) % {n}] + u[t, i, (j - 1) % {n}]
              - 4.0 * u[t, i, j];
      u[t + 1, i, j] = 2.0 * u[t, i, j] - u[t - 1, i, j]
                     + {c2dt2_inv_dx2:?} * lap
                     - {alpha_dt:?} * (u[t, i, j] - u[t - 1, i, j]);
    }}
  }}
}}

kernel compute_loss(t: i32) {{
  parallel for i in 0..{n} {{
    for j in 0..{n} {{
      let d = u[t, i, j] - target[i, j];
      loss[] += {dx2:?} * d * d;
    }}
  }}
}}
"
    )
}

pub const GRAD_KERNELS: [&str; 3] = ["init", "step", "compute_loss"];

pub fn build(cfg: &WaveConfig) -> Result<Context, SimError> {
    let p = compile(&source(cfg), &[], &GRAD_KERNELS)?;
    Ok(Context::new(p)?)
}

/// Writes a Gaussian bump of amplitude `amp` and radius `sigma` (in cells)
/// centered at `(ci, cj)` into `field`.
pub fn write_gaussian(
    ctx: &mut Context,
    field: &str,
    n: usize,
    ci: f64,
    cj: f64,
    sigma: f64,
    amp: f64,
) -> Result<(), RuntimeError> {
    let mut vals = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (di, dj) = (i as f64 - ci, j as f64 - cj);
            vals[i * n + j] = amp * (-(di * di + dj * dj) / (sigma * sigma)).exp();
        }
    }
    ctx.write_field(field, &vals)
}

/// Forward simulation from the current `u0`; returns the loss.
pub fn forward(ctx: &mut Context, cfg: &WaveConfig) -> Result<f64, RuntimeError> {
    ctx.fill("loss", 0.0)?;
    ctx.launch("init", &[])?;
    for t in 1..cfg.steps {
        ctx.launch("step", &[Value::I(t as i64)])?;
    }
    ctx.launch("compute_loss", &[Value::I(cfg.steps as i64)])?;
    Ok(ctx.read_field("loss")?[0])
}

/// One recorded forward pass plus backpropagation; returns (loss,
/// d loss / d u0).
pub fn loss_and_grad(ctx: &mut Context, cfg: &WaveConfig) -> Result<(f64, Vec<f64>), RuntimeError> {
    ctx.clear_tape();
    ctx.start_recording();
    let r = forward(ctx, cfg);
    ctx.stop_recording();
    let loss = r?;
    ctx.tape_backward("loss")?;
    ctx.clear_tape();
    Ok((loss, ctx.read_adjoint("u0")?))
}

/// Gradient descent on `u0` toward the current `target`. Starts from the
/// current contents of `u0`.
pub fn optimize(ctx: &mut Context, cfg: &WaveConfig) -> Result<SimResult, SimError> {
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let (loss, grad) = loss_and_grad(ctx, cfg)?;
        if !loss.is_finite() {
            return Err(SimError::Diverged(iter));
        }
        losses.push(loss);
        let mut u0 = ctx.read_field("u0")?;
        for (u, g) in u0.iter_mut().zip(&grad) {
            *u -= cfg.lr * g;
        }
        ctx.write_field("u0", &u0)?;
    }
    let final_loss = forward(ctx, cfg).map_err(SimError::Runtime)?;
    Ok(SimResult {
        losses,
        final_params: vec![final_loss],
        summary: format!("final loss {final_loss:.6e}"),
    })
}

/// Builds a self-consistent target by simulating from a Gaussian `u0`, then
/// clears `u0` so optimization starts from rest.
pub fn make_self_consistent_target(ctx: &mut Context, cfg: &WaveConfig) -> Result<(), SimError> {
    let n = cfg.n;
    write_gaussian(ctx, "u0", n, n as f64 / 2.0, n as f64 / 2.0, n as f64 / 8.0, 1.0)?;
    forward(ctx, cfg).map_err(SimError::Runtime)?;
    let u_final = (0..n * n)
        .map(|e| ctx.get_f("u", &[cfg.steps, e / n, e % n]))
        .collect::<Result<Vec<f64>, _>>()?;
    ctx.write_field("target", &u_final)?;
    ctx.fill("u0", 0.0)?;
    Ok(())
}

/// Finite-difference check of d loss / d u0 in f64.
pub fn check_gradients(cfg: &WaveConfig, rel_tol: f64) -> Result<GradCheckReport, SimError> {
    let mut ctx = build(cfg)?;
    ctx.set_precision(Precision::F64);
    let n = cfg.n;
    write_gaussian(&mut ctx, "target", n, n as f64 / 3.0, n as f64 / 2.0, n as f64 / 6.0, 0.5)?;
    write_gaussian(&mut ctx, "u0", n, n as f64 / 2.0, n as f64 / 2.0, n as f64 / 8.0, 1.0)?;
    let c = cfg.clone();
    let rep = grad_check(
        &mut ctx,
        move |ctx| forward(ctx, &c).map(|_| ()),
        "u0",
        "loss",
        &GradCheckConfig { rel_tol, ..GradCheckConfig::default() },
    )?;
    Ok(rep)
}

pub(super) fn corpus_entry() -> CorpusEntry {
    let cfg = WaveConfig { n: 8, steps: 4, ..WaveConfig::default() };
    CorpusEntry {
        name: "wave",
        source: source(&cfg),
        stop_grad: vec![],
        grads: GRAD_KERNELS.to_vec(),
        init: Box::new(|_| Ok(())),
        launches: vec![("init", vec![]), ("step", vec![1]), ("step", vec![3]), ("compute_loss", vec![4])],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_speed_zero_damping_is_linear_extrapolation() {
        // with c = 0 and alpha = 0 the update is u[t+1] = 2u[t] - u[t-1]
        let cfg = WaveConfig { n: 8, steps: 6, c: 0.0, alpha: 0.0, ..WaveConfig::default() };
        let mut ctx = build(&cfg).unwrap();
        ctx.set_precision(Precision::F64);
        write_gaussian(&mut ctx, "u0", 8, 4.0, 4.0, 2.0, 1.0).unwrap();
        forward(&mut ctx, &cfg).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let u0 = ctx.get_f("u", &[0, i, j]).unwrap();
                // both seed slots hold u0 (zero initial velocity), so the
                // extrapolation stays constant
                let ut = ctx.get_f("u", &[cfg.steps, i, j]).unwrap();
                assert!((ut - u0).abs() < 1e-12, "u[{i},{j}] drifted: {u0} -> {ut}");
            }
        }
    }

    #[test]
    fn cfl_warning_fires_when_unstable() {
        let stable = WaveConfig::default();
        assert!(stable.warnings().is_empty(), "{:?}", stable.warnings());
        let unstable = WaveConfig { dt: 0.05, ..WaveConfig::default() };
        assert!(unstable.cfl_number() > 1.0);
        assert_eq!(unstable.warnings().len(), 1);
        assert!(unstable.warnings()[0].contains("CFL"));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = WaveConfig { n: 16, steps: 16, ..WaveConfig::default() };
        let rep = check_gradients(&cfg, 1e-5).unwrap();
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn recovers_self_consistent_target() {
        let cfg = WaveConfig { n: 16, steps: 16, iters: 200, lr: 100.0, ..WaveConfig::default() };
        let mut ctx = build(&cfg).unwrap();
        ctx.set_precision(Precision::F64);
        make_self_consistent_target(&mut ctx, &cfg).unwrap();
        let res = optimize(&mut ctx, &cfg).unwrap();
        let l0 = res.losses[0];
        let lf = res.final_params[0];
        assert!(lf < 1e-3 * l0, "loss {l0:.3e} -> {lf:.3e}, wanted 1e-3x reduction");
    }
}
