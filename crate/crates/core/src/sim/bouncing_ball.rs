//! Elastic ball bouncing on the ground plane y = 0, used to compare naive
//! penalty-free collision handling against continuous collision detection
//! with time of impact (TOI).
//!
//! The ball starts at height `h0` with constant downward velocity and no
//! gravity, so the continuous trajectory is `y(t) = |h0 - t|` (unit speed):
//! the final height after time T is `T - h0` and its derivative with
//! respect to `h0` is exactly -1. The naive integrator flips the velocity
//! one step late, which adds a sawtooth of amplitude O(dt) to the final
//! height; its finite-difference slope oscillates in sign as `h0` varies,
//! while the TOI integrator recovers the exact smooth trajectory.

use super::{compile, CorpusEntry, SimError};
use crate::runtime::{Context, Precision, RuntimeError, Value};

#[derive(Debug, Clone)]
pub struct BouncingBallConfig {
    pub steps: usize,
    pub dt: f64,
    /// Initial height of the ball.
    pub h0: f64,
    /// Use continuous collision detection (time of impact).
    pub toi: bool,
}

impl Default for BouncingBallConfig {
    fn default() -> Self {
        BouncingBallConfig { steps: 100, dt: 0.01, h0: 0.5, toi: true }
    }
}

/// DSL source; both integrators are emitted, the driver picks one.
pub fn source(cfg: &BouncingBallConfig) -> String {
    let n1 = cfg.steps + 1;
    let dt = cfg.dt;
    format!(
        "
field x: f32[{n1}, 2] needs_grad;
field v: f32[{n1}, 2] needs_grad;
field h0: f32[1] needs_grad;
field loss: f32[] needs_grad;

kernel init() {{
  x[0, 0] = 0.0;
  x[0, 1] = h0[0];
  v[0, 0] = 0.2;
  v[0, 1] = -1.0;
}}

kernel advance_naive(t: i32) {{
  let oy = x[t, 1];
  let ovy = v[t, 1];
  let nvy = select(oy < 0.0, -ovy, ovy);
  v[t + 1, 1] = nvy;
  x[t + 1, 1] = oy + {dt:?} * nvy;
  v[t + 1, 0] = v[t, 0];
  x[t + 1, 0] = x[t, 0] + {dt:?} * v[t, 0];
}}

kernel advance_toi(t: i32) {{
  let oy = x[t, 1];
  let ovy = v[t, 1];
  let naive_y = oy + {dt:?} * ovy;
  let hit = (naive_y < 0.0) * (ovy < -1e-4);
  let safe_v = min(ovy, -1e-4);
  let toi = max(min((0.0 - oy) / safe_v, {dt:?}), 0.0);
  let nvy = select(hit, -ovy, ovy);
  v[t + 1, 1] = nvy;
  x[t + 1, 1] = select(hit, oy + toi * ovy + ({dt:?} - toi) * nvy, naive_y);
  v[t + 1, 0] = v[t, 0];
  x[t + 1, 0] = x[t, 0] + {dt:?} * v[t, 0];
}}

kernel final_height(t: i32) {{
  loss[] = x[t, 1];
}}
"
    )
}

pub const GRAD_KERNELS: [&str; 4] = ["init", "advance_naive", "advance_toi", "final_height"];

pub fn build(cfg: &BouncingBallConfig) -> Result<Context, SimError> {
    let p = compile(&source(cfg), &[], &GRAD_KERNELS)?;
    let mut ctx = Context::new(p)?;
    ctx.set_f("h0", &[0], cfg.h0)?;
    Ok(ctx)
}

/// Forward simulation from the current `h0`; returns the final height.
pub fn forward(ctx: &mut Context, cfg: &BouncingBallConfig) -> Result<f64, RuntimeError> {
    for f in ["x", "v", "loss"] {
        ctx.fill(f, 0.0)?;
    }
    ctx.launch("init", &[])?;
    let advance = if cfg.toi { "advance_toi" } else { "advance_naive" };
    for t in 0..cfg.steps {
        ctx.launch(advance, &[Value::I(t as i64)])?;
    }
    ctx.launch("final_height", &[Value::I(cfg.steps as i64)])?;
    Ok(ctx.read_field("loss")?[0])
}

/// Runs the simulation and backpropagates; returns (final height,
/// d height / d h0).
pub fn gradient(cfg: &BouncingBallConfig) -> Result<(f64, f64), SimError> {
    let mut ctx = build(cfg)?;
    gradient_in(&mut ctx, cfg).map_err(SimError::Runtime)
}

fn gradient_in(ctx: &mut Context, cfg: &BouncingBallConfig) -> Result<(f64, f64), RuntimeError> {
    ctx.clear_tape();
    ctx.start_recording();
    let r = forward(ctx, cfg);
    ctx.stop_recording();
    let height = r?;
    ctx.tape_backward("loss")?;
    ctx.clear_tape();
    Ok((height, ctx.get_adjoint("h0", &[0])?))
}

/// Sweeps `h0` over `[from, to]`; returns `(h0, final height, gradient)`
/// triples. Used to expose the naive integrator's sawtooth.
pub fn scan_heights(
    cfg: &BouncingBallConfig,
    from: f64,
    to: f64,
    samples: usize,
) -> Result<Vec<(f64, f64, f64)>, SimError> {
    let mut ctx = build(cfg)?;
    ctx.set_precision(Precision::F64);
    let mut out = Vec::with_capacity(samples);
    for i in 0..samples {
        let h = from + (to - from) * i as f64 / (samples.max(2) - 1) as f64;
        ctx.set_f("h0", &[0], h)?;
        let (height, grad) = gradient_in(&mut ctx, cfg)?;
        out.push((h, height, grad));
    }
    Ok(out)
}

/// Sign changes of the discrete derivative of `loss(h0)` along a scan.
pub fn derivative_sign_changes(scan: &[(f64, f64, f64)]) -> usize {
    let slopes: Vec<f64> = scan.windows(2).map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0)).collect();
    slopes
        .windows(2)
        .filter(|s| s[0].signum() != s[1].signum() && s[0] != 0.0 && s[1] != 0.0)
        .count()
}

pub(super) fn corpus_entry() -> CorpusEntry {
    let cfg = BouncingBallConfig { steps: 8, ..BouncingBallConfig::default() };
    CorpusEntry {
        name: "bouncing_ball",
        source: source(&cfg),
        stop_grad: vec![],
        grads: GRAD_KERNELS.to_vec(),
        init: Box::new(|_| Ok(())),
        launches: vec![
            ("init", vec![]),
            ("advance_naive", vec![2]),
            ("advance_toi", vec![5]),
            ("final_height", vec![8]),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toi_gradient_is_minus_one() {
        let cfg = BouncingBallConfig { toi: true, ..BouncingBallConfig::default() };
        let (height, grad) = gradient(&cfg).unwrap();
        // exact continuous solution: y(T) = T - h0 = 0.5
        assert!((height - 0.5).abs() < 1e-5, "height {height}");
        assert!((grad + 1.0).abs() < 0.02, "TOI gradient {grad}, expected -1");
    }

    #[test]
    fn naive_gradient_is_plus_one() {
        let cfg = BouncingBallConfig { toi: false, ..BouncingBallConfig::default() };
        let (_, grad) = gradient(&cfg).unwrap();
        assert!((grad - 1.0).abs() < 0.02, "naive gradient {grad}, expected +1");
    }

    #[test]
    fn naive_scan_is_jagged_toi_scan_is_smooth() {
        let naive = scan_heights(
            &BouncingBallConfig { toi: false, ..BouncingBallConfig::default() },
            0.2,
            0.8,
            200,
        )
        .unwrap();
        let toi = scan_heights(
            &BouncingBallConfig { toi: true, ..BouncingBallConfig::default() },
            0.2,
            0.8,
            200,
        )
        .unwrap();
        assert!(
            derivative_sign_changes(&naive) >= 5,
            "naive sign changes {}",
            derivative_sign_changes(&naive)
        );
        assert!(
            derivative_sign_changes(&toi) <= 1,
            "toi sign changes {}",
            derivative_sign_changes(&toi)
        );
    }

    #[test]
    fn integrators_agree_away_from_the_bounce() {
        // before any contact both integrators produce identical states
        let mut naive = BouncingBallConfig { toi: false, steps: 30, h0: 0.5, dt: 0.01 };
        let h_naive = {
            let mut c = build(&naive).unwrap();
            forward(&mut c, &naive).unwrap()
        };
        naive.toi = true;
        let h_toi = {
            let mut c = build(&naive).unwrap();
            forward(&mut c, &naive).unwrap()
        };
        assert_eq!(h_naive.to_bits(), h_toi.to_bits());
    }
}
