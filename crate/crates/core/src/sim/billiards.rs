//! Rigid billiards: equal-mass elastic balls with impulse-based collisions
//! and per-collision time-of-impact position correction.
//!
//! The single decision variable is the cue ball's launch angle. Each step
//! predicts the next positions, accumulates pairwise impulses
//! `-(1+e)/2 * projected_v * dir` (elastic, e = 1) for approaching
//! overlapping pairs, and applies a TOI correction `min(toi - dt, 0) *
//! impulse` to the position update so gradients stay consistent with the
//! continuous collision time. The loss is the squared distance of a chosen
//! ball to a goal point at the final step.

use super::{compile, CorpusEntry, SimError, SimResult};
use crate::runtime::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::runtime::{Context, Precision, RuntimeError, Value};

#[derive(Debug, Clone)]
pub struct BilliardsConfig {
    pub steps: usize,
    pub dt: f64,
    /// Ball radius.
    pub radius: f64,
    /// Cue launch speed.
    pub speed: f64,
    /// Initial launch angle (radians).
    pub angle0: f64,
    /// Ball whose final distance to `goal` is the loss.
    pub target_ball: usize,
    pub goal: [f64; 2],
    /// Initial ball positions; ball 0 is the cue.
    pub layout: Vec<[f64; 2]>,
    pub iters: usize,
    pub lr: f64,
}

impl Default for BilliardsConfig {
    fn default() -> Self {
        BilliardsConfig {
            steps: 1024,
            dt: 0.003,
            radius: 0.03,
            speed: 1.0,
            angle0: 0.02,
            target_ball: 1,
            goal: [0.9, 0.6],
            layout: vec![[0.1, 0.5], [0.5, 0.5], [0.554, 0.5312], [0.554, 0.4688]],
            iters: 30,
            lr: 0.02,
        }
    }
}

impl BilliardsConfig {
    pub fn n_balls(&self) -> usize {
        self.layout.len()
    }

    /// Rejects layouts with overlapping balls.
    pub fn validate(&self) -> Result<(), SimError> {
        if self.target_ball >= self.n_balls() {
            return Err(SimError::Config(format!(
                "target ball {} out of range (have {})",
                self.target_ball,
                self.n_balls()
            )));
        }
        for i in 0..self.n_balls() {
            for j in i + 1..self.n_balls() {
                let (p, q) = (self.layout[i], self.layout[j]);
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                if d < 2.0 * self.radius {
                    return Err(SimError::Config(format!(
                        "balls {i} and {j} overlap: distance {d:.4} < diameter {:.4}",
                        2.0 * self.radius
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn source(cfg: &BilliardsConfig) -> String {
    let (n, n1) = (cfg.n_balls(), cfg.steps + 1);
    let dt = cfg.dt;
    let two_r = 2.0 * cfg.radius;
    let speed = cfg.speed;
    let (gx, gy) = (cfg.goal[0], cfg.goal[1]);
    let tb = cfg.target_ball;
    format!(
        "
field x: f32[{n1}, {n}, 2] needs_grad;
field v: f32[{n1}, {n}, 2] needs_grad;
field impulse: f32[{n1}, {n}, 2] needs_grad;
field x_inc: f32[{n1}, {n}, 2] needs_grad;
field init_pos: f32[{n}, 2];
field aim: f32[1] needs_grad;
field loss: f32[] needs_grad;

kernel init() {{
  parallel for i in 0..{n} {{
    x[0, i, 0] = init_pos[i, 0];
    x[0, i, 1] = init_pos[i, 1];
    v[0, i, 0] = select(i == 0, {speed:?} * cos(aim[0]), 0.0);
    v[0, i, 1] = select(i == 0, {speed:?} * sin(aim[0]), 0.0);
  }}
}}

kernel collide(t: i32) {{
  parallel for i in 0..{n} {{
    for j in 0..{n} {{
      let dx = (x[t, i, 0] + {dt:?} * v[t, i, 0]) - (x[t, j, 0] + {dt:?} * v[t, j, 0]);
      let dy = (x[t, i, 1] + {dt:?} * v[t, i, 1]) - (x[t, j, 1] + {dt:?} * v[t, j, 1]);
      let dist = sqrt(dx * dx + dy * dy + 1e-12);
      let sd = max(dist, 1e-5);
      let dirx = dx / sd;
      let diry = dy / sd;
      let rvx = v[t, i, 0] - v[t, j, 0];
      let rvy = v[t, i, 1] - v[t, j, 1];
      let pv = dirx * rvx + diry * rvy;
      let active = (1 - (i == j)) * (dist < {two_r:?}) * (pv < 0.0);
      let impx = select(active, -(pv * dirx), 0.0);
      let impy = select(active, -(pv * diry), 0.0);
      let toi = (dist - {two_r:?}) / min(-1e-3, pv);
      let lag = min(toi - {dt:?}, 0.0);
      impulse[t + 1, i, 0] += impx;
      impulse[t + 1, i, 1] += impy;
      x_inc[t + 1, i, 0] += select(active, lag * impx, 0.0);
      x_inc[t + 1, i, 1] += select(active, lag * impy, 0.0);
    }}
  }}
}}

kernel advance(t: i32) {{
  parallel for i in 0..{n} {{
    let nvx = v[t, i, 0] + impulse[t + 1, i, 0];
    let nvy = v[t, i, 1] + impulse[t + 1, i, 1];
    v[t + 1, i, 0] = nvx;
    v[t + 1, i, 1] = nvy;
    x[t + 1, i, 0] = x[t, i, 0] + {dt:?} * nvx + x_inc[t + 1, i, 0];
    x[t + 1, i, 1] = x[t, i, 1] + {dt:?} * nvy + x_inc[t + 1, i, 1];
  }}
}}

kernel compute_loss(t: i32) {{
  let dx = x[t, {tb}, 0] - {gx:?};
  let dy = x[t, {tb}, 1] - {gy:?};
  loss[] = dx * dx + dy * dy;
}}
"
    )
}

pub const GRAD_KERNELS: [&str; 4] = ["init", "collide", "advance", "compute_loss"];

pub fn build(cfg: &BilliardsConfig) -> Result<Context, SimError> {
    cfg.validate()?;
    let p = compile(&source(cfg), &[], &GRAD_KERNELS)?;
    let mut ctx = Context::new(p)?;
    for (i, p) in cfg.layout.iter().enumerate() {
        ctx.set_f("init_pos", &[i, 0], p[0])?;
        ctx.set_f("init_pos", &[i, 1], p[1])?;
    }
    ctx.set_f("aim", &[0], cfg.angle0)?;
    Ok(ctx)
}

/// Forward simulation from the current `aim`; returns the loss.
pub fn forward(ctx: &mut Context, cfg: &BilliardsConfig) -> Result<f64, RuntimeError> {
    for f in ["x", "v", "impulse", "x_inc", "loss"] {
        ctx.fill(f, 0.0)?;
    }
    ctx.launch("init", &[])?;
    for t in 0..cfg.steps {
        ctx.launch("collide", &[Value::I(t as i64)])?;
        ctx.launch("advance", &[Value::I(t as i64)])?;
    }
    ctx.launch("compute_loss", &[Value::I(cfg.steps as i64)])?;
    Ok(ctx.read_field("loss")?[0])
}

/// Runs the simulation and backpropagates; returns (loss, d loss / d aim).
pub fn loss_and_grad(ctx: &mut Context, cfg: &BilliardsConfig) -> Result<(f64, f64), RuntimeError> {
    ctx.clear_tape();
    ctx.start_recording();
    let r = forward(ctx, cfg);
    ctx.stop_recording();
    let loss = r?;
    ctx.tape_backward("loss")?;
    ctx.clear_tape();
    Ok((loss, ctx.get_adjoint("aim", &[0])?))
}

/// Gradient descent on the launch angle.
pub fn optimize(cfg: &BilliardsConfig) -> Result<SimResult, SimError> {
    let mut ctx = build(cfg)?;
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let (loss, grad) = loss_and_grad(&mut ctx, cfg)?;
        if !loss.is_finite() {
            return Err(SimError::Diverged(iter));
        }
        losses.push(loss);
        let a = ctx.get_f("aim", &[0])?;
        ctx.set_f("aim", &[0], a - cfg.lr * grad)?;
    }
    let final_loss = forward(&mut ctx, cfg).map_err(SimError::Runtime)?;
    let angle = ctx.get_f("aim", &[0])?;
    Ok(SimResult {
        losses,
        final_params: vec![angle],
        summary: format!("aim angle {angle:.5} rad, final loss {final_loss:.6e}"),
    })
}

/// Sweeps the launch angle; returns `(angle, loss, gradient)` triples.
pub fn scan_angles(
    cfg: &BilliardsConfig,
    from: f64,
    to: f64,
    samples: usize,
) -> Result<Vec<(f64, f64, f64)>, SimError> {
    let mut ctx = build(cfg)?;
    ctx.set_precision(Precision::F64);
    let mut out = Vec::with_capacity(samples);
    for i in 0..samples {
        let a = from + (to - from) * i as f64 / (samples.max(2) - 1) as f64;
        ctx.set_f("aim", &[0], a)?;
        let (loss, grad) = loss_and_grad(&mut ctx, cfg)?;
        out.push((a, loss, grad));
    }
    Ok(out)
}

/// Finite-difference check of d loss / d aim in f64, configured for a
/// clean (non-grazing) collision.
pub fn check_gradients(cfg: &BilliardsConfig) -> Result<GradCheckReport, SimError> {
    let mut ctx = build(cfg)?;
    ctx.set_precision(Precision::F64);
    let c = cfg.clone();
    let rep = grad_check(
        &mut ctx,
        move |ctx| forward(ctx, &c).map(|_| ()),
        "aim",
        "loss",
        &GradCheckConfig { rel_tol: 1e-4, ..GradCheckConfig::default() },
    )?;
    Ok(rep)
}

pub(super) fn corpus_entry() -> CorpusEntry {
    let cfg = BilliardsConfig { steps: 8, ..BilliardsConfig::default() };
    CorpusEntry {
        name: "billiards",
        source: source(&cfg),
        stop_grad: vec![],
        grads: GRAD_KERNELS.to_vec(),
        init: Box::new(|_| Ok(())),
        launches: vec![
            ("init", vec![]),
            ("collide", vec![0]),
            ("advance", vec![0]),
            ("collide", vec![5]),
            ("advance", vec![5]),
            ("compute_loss", vec![8]),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_ball() -> BilliardsConfig {
        BilliardsConfig {
            layout: vec![[0.2, 0.5], [0.5, 0.5]],
            angle0: 0.0,
            steps: 500,
            ..BilliardsConfig::default()
        }
    }

    fn velocities(ctx: &Context, t: usize, n: usize) -> Vec<[f64; 2]> {
        (0..n)
            .map(|i| {
                [ctx.get_f("v", &[t, i, 0]).unwrap(), ctx.get_f("v", &[t, i, 1]).unwrap()]
            })
            .collect()
    }

    #[test]
    fn head_on_collision_exchanges_velocities() {
        let cfg = two_ball();
        let mut ctx = build(&cfg).unwrap();
        ctx.set_precision(Precision::F64);
        forward(&mut ctx, &cfg).unwrap();
        let end = velocities(&ctx, cfg.steps, 2);
        assert!(end[0][0].abs() < 1e-8, "cue vx {}", end[0][0]);
        assert!((end[1][0] - cfg.speed).abs() < 1e-8, "target vx {}", end[1][0]);
        assert!(end[0][1].abs() < 1e-8 && end[1][1].abs() < 1e-8);
    }

    #[test]
    fn collisions_conserve_momentum_and_energy() {
        // a chain of two clean binary collisions; simultaneous multi-ball
        // contacts are out of scope for the pairwise impulse model
        let cfg = BilliardsConfig {
            layout: vec![[0.2, 0.5], [0.5, 0.5], [0.8, 0.5]],
            angle0: 0.0,
            steps: 700,
            ..BilliardsConfig::default()
        };
        let mut ctx = build(&cfg).unwrap();
        ctx.set_precision(Precision::F64);
        forward(&mut ctx, &cfg).unwrap();
        let n = cfg.n_balls();
        let start = velocities(&ctx, 1, n);
        let end = velocities(&ctx, cfg.steps, n);
        let sum = |vs: &[[f64; 2]]| {
            vs.iter().fold(([0.0; 2], 0.0), |(mut p, ke), v| {
                p[0] += v[0];
                p[1] += v[1];
                (p, ke + 0.5 * (v[0] * v[0] + v[1] * v[1]))
            })
        };
        let ((p0, ke0), (p1, ke1)) = (sum(&start), sum(&end));
        let scale = ke0.max(1e-12);
        assert!((p0[0] - p1[0]).abs() / cfg.speed < 1e-6, "px {} -> {}", p0[0], p1[0]);
        assert!((p0[1] - p1[1]).abs() / cfg.speed < 1e-6, "py {} -> {}", p0[1], p1[1]);
        assert!((ke0 - ke1).abs() / scale < 1e-6, "ke {ke0} -> {ke1}");
        // the chain must have actually propagated to the last ball
        assert!(end[2][0] > 0.5, "last ball not moving: vx {}", end[2][0]);
    }

    #[test]
    fn overlapping_layout_is_rejected() {
        let cfg = BilliardsConfig {
            layout: vec![[0.2, 0.5], [0.22, 0.5]],
            ..BilliardsConfig::default()
        };
        assert!(matches!(build(&cfg), Err(SimError::Config(_))));
    }

    #[test]
    fn near_miss_scan_has_a_derivative_discontinuity() {
        // sweeping across the grazing angle, the loss derivative jumps from
        // a large hit-side slope (square-root contact singularity) to an
        // exact zero on the miss side
        let cfg = BilliardsConfig { steps: 400, ..two_ball() };
        let scan = scan_angles(&cfg, 0.0, 0.5, 60).unwrap();
        let slopes: Vec<f64> =
            scan.windows(2).map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0)).collect();
        let max_kink = slopes
            .windows(2)
            .map(|s| (s[1] - s[0]).abs())
            .fold(0.0f64, f64::max);
        assert!(max_kink > 1.0, "no derivative jump found: max kink {max_kink}");
        // the no-contact tail is exactly flat
        assert_eq!(*slopes.last().unwrap(), 0.0);
        assert_eq!(scan.last().unwrap().2, 0.0);
    }

    #[test]
    fn clean_hit_gradient_matches_finite_differences() {
        let cfg = BilliardsConfig { steps: 400, angle0: 0.03, ..two_ball() };
        let rep = check_gradients(&cfg).unwrap();
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn no_contact_aim_has_exactly_zero_gradient() {
        let cfg = two_ball();
        let scan = scan_angles(&cfg, 2.9, 3.4, 20).unwrap();
        let l0 = scan[0].1;
        for (a, l, g) in scan {
            assert!((l - l0).abs() <= 1e-9, "loss varies at angle {a}: {l0} vs {l}");
            assert_eq!(g, 0.0, "gradient at angle {a} is {g}");
        }
    }
}
