//! Mass-spring locomotion robot with a neural-network controller, sticky
//! ground contact, and optional continuous collision handling (TOI).
//!
//! The controller is a small MLP: four sinusoidal clock phases plus each
//! object's offset from the center of mass feed a tanh hidden layer, whose
//! output modulates per-spring rest lengths `l0 * (1 + A * tanh(a))`. The
//! loss is the negated final center-of-mass x coordinate, so gradient
//! descent on the weights teaches the robot to walk to the right.
//!
//! All per-step state and scratch fields are indexed by a window *slot*
//! rather than the absolute time step; kernels take `(dst, t)` so a
//! segment of the simulation can be replayed anywhere in the window. That
//! makes the same kernels usable for full-storage backpropagation
//! (window = steps + 1) and sqrt-time checkpointing (window = segment + 1).

use super::{compile, CorpusEntry, SimError, SimResult};
use crate::runtime::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::runtime::segmented::{run_segmented, SegmentedConfig, SegmentedStats};
use crate::runtime::{Context, Precision, RuntimeError, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
pub struct SpringSpec {
    pub a: usize,
    pub b: usize,
    /// Rest length; negative means "use the initial endpoint distance".
    pub length: f64,
    pub stiffness: f64,
    /// Relative actuation amplitude (0 disables actuation).
    pub actuation: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RobotTopology {
    pub objects: Vec<[f64; 2]>,
    pub springs: Vec<SpringSpec>,
}

impl RobotTopology {
    /// Resolved rest length of spring `s`.
    pub fn rest_length(&self, s: usize) -> f64 {
        let sp = &self.springs[s];
        if sp.length >= 0.0 {
            sp.length
        } else {
            let (p, q) = (self.objects[sp.a], self.objects[sp.b]);
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        }
    }
}

/// Loads one of the built-in robot designs (1..=3).
pub fn builtin(i: usize) -> Result<RobotTopology, SimError> {
    let json = match i {
        1 => include_str!("../../assets/robot1.json"),
        2 => include_str!("../../assets/robot2.json"),
        3 => include_str!("../../assets/robot3.json"),
        _ => return Err(SimError::Config(format!("no built-in robot {i} (have 1..=3)"))),
    };
    serde_json::from_str(json).map_err(|e| SimError::Config(format!("robot {i} asset: {e}")))
}

/// Loads a robot topology from a JSON file.
pub fn load_topology(path: &std::path::Path) -> Result<RobotTopology, SimError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct RobotConfig {
    /// Built-in robot design (1..=3).
    pub robot: usize,
    pub steps: usize,
    pub dt: f64,
    pub gravity: f64,
    /// Velocity damping rate; each step multiplies v by exp(-dt * damping).
    pub damping: f64,
    /// Ground plane height.
    pub ground: f64,
    /// Angular frequency of the controller's sinusoidal clock inputs.
    pub omega: f64,
    /// Hidden layer width.
    pub hidden: usize,
    pub lr: f64,
    pub iters: usize,
    /// Continuous collision handling (time of impact) for ground contact.
    pub toi: bool,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for RobotConfig {
    fn default() -> Self {
        RobotConfig {
            robot: 1,
            steps: 512,
            dt: 0.004,
            gravity: 4.8,
            damping: 15.0,
            ground: 0.1,
            omega: 10.0,
            hidden: 8,
            lr: 4.0,
            iters: 30,
            toi: true,
            seed: 2,
        }
    }
}

/// Number of controller inputs: four clock phases plus (x, y) offsets from
/// the center of mass for each object.
pub fn n_inputs(topo: &RobotTopology) -> usize {
    4 + 2 * topo.objects.len()
}

/// DSL source with `window` state slots (steps + 1 for full storage).
pub fn source(cfg: &RobotConfig, topo: &RobotTopology, window: usize) -> String {
    let n_obj = topo.objects.len();
    let n_spr = topo.springs.len();
    let h = cfg.hidden;
    let n_in = n_inputs(topo);
    let dt = cfg.dt;
    let decay = (-cfg.dt * cfg.damping).exp();
    let gravity = cfg.gravity;
    let ground = cfg.ground;
    let omega = cfg.omega;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let inv_n = 1.0 / n_obj as f64;
    format!(
        "
field x: f32[{window}, {n_obj}, 2] needs_grad;
field v: f32[{window}, {n_obj}, 2] needs_grad;
field force: f32[{window}, {n_obj}, 2] needs_grad;
field com: f32[{window}, 2] needs_grad;
field hidden_raw: f32[{window}, {h}] needs_grad;
field act_raw: f32[{window}, {n_spr}] needs_grad;
field w1: f32[{h}, {n_in}] needs_grad;
field b1: f32[{h}] needs_grad;
field w2: f32[{n_spr}, {h}] needs_grad;
field b2: f32[{n_spr}] needs_grad;
field sa: i32[{n_spr}];
field sb: i32[{n_spr}];
field l0: f32[{n_spr}];
field stiff: f32[{n_spr}];
field amp: f32[{n_spr}];
field loss: f32[] needs_grad;

kernel clear_step(dst: i32) {{
  parallel for i in 0..{n_obj} {{
    force[dst, i, 0] = 0.0;
    force[dst, i, 1] = 0.0;
  }}
  for h in 0..{h} {{ hidden_raw[dst, h] = 0.0; }}
  for s in 0..{n_spr} {{ act_raw[dst, s] = 0.0; }}
  com[dst, 0] = 0.0;
  com[dst, 1] = 0.0;
}}

kernel compute_com(dst: i32) {{
  parallel for i in 0..{n_obj} {{
    com[dst, 0] += x[dst - 1, i, 0] * {inv_n:?};
    com[dst, 1] += x[dst - 1, i, 1] * {inv_n:?};
  }}
}}

kernel controller_hidden(dst: i32, t: i32) {{
  parallel for h in 0..{h} {{
    for j in 0..4 {{
      hidden_raw[dst, h] += w1[h, j] * sin({omega:?} * {dt:?} * f32(t) + {half_pi:?} * f32(j));
    }}
    for i in 0..{n_obj} {{
      for d in 0..2 {{
        hidden_raw[dst, h] += w1[h, 4 + i * 2 + d] * (x[dst - 1, i, d] - com[dst, d]);
      }}
    }}
    hidden_raw[dst, h] += b1[h];
  }}
}}

kernel controller_act(dst: i32) {{
  parallel for s in 0..{n_spr} {{
    for h in 0..{h} {{
      act_raw[dst, s] += w2[s, h] * tanh(hidden_raw[dst, h]);
    }}
    act_raw[dst, s] += b2[s];
  }}
}}

kernel apply_force(dst: i32) {{
  parallel for s in 0..{n_spr} {{
    let a = sa[s];
    let b = sb[s];
    let dx = x[dst - 1, a, 0] - x[dst - 1, b, 0];
    let dy = x[dst - 1, a, 1] - x[dst - 1, b, 1];
    let len = sqrt(dx * dx + dy * dy + 1e-8);
    let target = l0[s] * (1.0 + amp[s] * tanh(act_raw[dst, s]));
    let f = stiff[s] * (len - target) / len;
    force[dst, a, 0] += -(f * dx);
    force[dst, a, 1] += -(f * dy);
    force[dst, b, 0] += f * dx;
    force[dst, b, 1] += f * dy;
  }}
}}

kernel advance_toi(dst: i32) {{
  parallel for i in 0..{n_obj} {{
    let vx = {decay:?} * v[dst - 1, i, 0] + {dt:?} * force[dst, i, 0];
    let vy = {decay:?} * v[dst - 1, i, 1] + {dt:?} * (force[dst, i, 1] - {gravity:?});
    let oy = x[dst - 1, i, 1];
    let naive_y = oy + {dt:?} * vy;
    let hit = (naive_y < {ground:?}) * (vy < -1e-4);
    let safe_v = min(vy, -1e-4);
    let toi = max(min(({ground:?} - oy) / safe_v, {dt:?}), 0.0);
    let adv = select(hit, toi, {dt:?});
    v[dst, i, 0] = select(hit, 0.0, vx);
    v[dst, i, 1] = select(hit, 0.0, vy);
    x[dst, i, 0] = x[dst - 1, i, 0] + adv * vx;
    x[dst, i, 1] = oy + adv * vy;
  }}
}}

kernel advance_naive(dst: i32) {{
  parallel for i in 0..{n_obj} {{
    let vx = {decay:?} * v[dst - 1, i, 0] + {dt:?} * force[dst, i, 0];
    let vy = {decay:?} * v[dst - 1, i, 1] + {dt:?} * (force[dst, i, 1] - {gravity:?});
    let oy = x[dst - 1, i, 1];
    let naive_y = oy + {dt:?} * vy;
    let hit = (naive_y < {ground:?}) * (vy < -1e-4);
    let nvx = select(hit, 0.0, vx);
    let nvy = select(hit, 0.0, vy);
    v[dst, i, 0] = nvx;
    v[dst, i, 1] = nvy;
    x[dst, i, 0] = x[dst - 1, i, 0] + {dt:?} * nvx;
    x[dst, i, 1] = oy + {dt:?} * nvy;
  }}
}}

kernel clear_loss() {{
  loss[] = 0.0;
}}

kernel com_loss(slot: i32) {{
  parallel for i in 0..{n_obj} {{
    loss[] += -(x[slot, i, 0] * {inv_n:?});
  }}
}}
"
    )
}

pub const GRAD_KERNELS: [&str; 9] = [
    "clear_step",
    "compute_com",
    "controller_hidden",
    "controller_act",
    "apply_force",
    "advance_toi",
    "advance_naive",
    "clear_loss",
    "com_loss",
];

pub const STATE_FIELDS: [&str; 2] = ["x", "v"];
pub const SCRATCH_FIELDS: [&str; 4] = ["force", "com", "hidden_raw", "act_raw"];
pub const WEIGHT_FIELDS: [&str; 4] = ["w1", "b1", "w2", "b2"];

/// Compiles the program for the given window size and installs topology
/// constants plus seeded initial weights.
pub fn build(cfg: &RobotConfig, window: usize) -> Result<Context, SimError> {
    let topo = builtin(cfg.robot)?;
    build_with(cfg, &topo, window)
}

pub fn build_with(
    cfg: &RobotConfig,
    topo: &RobotTopology,
    window: usize,
) -> Result<Context, SimError> {
    let p = compile(
        &source(cfg, topo, window),
        &["sa", "sb", "l0", "stiff", "amp"],
        &GRAD_KERNELS,
    )?;
    let mut ctx = Context::new(p)?;
    for (s, sp) in topo.springs.iter().enumerate() {
        ctx.set_i("sa", &[s], sp.a as i64)?;
        ctx.set_i("sb", &[s], sp.b as i64)?;
        ctx.set_f("l0", &[s], topo.rest_length(s))?;
        ctx.set_f("stiff", &[s], sp.stiffness)?;
        ctx.set_f("amp", &[s], sp.actuation)?;
    }
    init_weights(&mut ctx, cfg, topo)?;
    Ok(ctx)
}

/// Seeds the controller weights uniformly in `+-scale` with a fan-in scale.
pub fn init_weights(
    ctx: &mut Context,
    cfg: &RobotConfig,
    topo: &RobotTopology,
) -> Result<(), RuntimeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_in = n_inputs(topo);
    let s1 = (2.0 / n_in as f64).sqrt();
    let s2 = (2.0 / cfg.hidden as f64).sqrt();
    let mut fill_rand = |ctx: &mut Context, f: &str, n: usize, s: f64| {
        let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-s..s)).collect();
        ctx.write_field(f, &vals)
    };
    fill_rand(ctx, "w1", cfg.hidden * n_in, s1)?;
    fill_rand(ctx, "b1", cfg.hidden, 0.1)?;
    fill_rand(ctx, "w2", topo.springs.len() * cfg.hidden, s2)?;
    fill_rand(ctx, "b2", topo.springs.len(), 0.1)?;
    Ok(())
}

/// Places the robot at its topology's starting pose in window slot 0 with
/// zero velocity.
pub fn reset_state(ctx: &mut Context, topo: &RobotTopology) -> Result<(), RuntimeError> {
    ctx.fill("x", 0.0)?;
    ctx.fill("v", 0.0)?;
    for (i, p) in topo.objects.iter().enumerate() {
        ctx.set_f("x", &[0, i, 0], p[0])?;
        ctx.set_f("x", &[0, i, 1], p[1])?;
    }
    Ok(())
}

fn advance_kernel(cfg: &RobotConfig) -> &'static str {
    if cfg.toi {
        "advance_toi"
    } else {
        "advance_naive"
    }
}

/// Launches one simulation step writing into window slot `dst` at global
/// step `t`.
pub fn launch_step(
    ctx: &mut Context,
    cfg: &RobotConfig,
    dst: usize,
    t: usize,
) -> Result<(), RuntimeError> {
    let d = Value::I(dst as i64);
    ctx.launch("clear_step", &[d])?;
    ctx.launch("compute_com", &[d])?;
    ctx.launch("controller_hidden", &[d, Value::I(t as i64)])?;
    ctx.launch("controller_act", &[d])?;
    ctx.launch("apply_force", &[d])?;
    ctx.launch(advance_kernel(cfg), &[d])
}

fn launch_loss(ctx: &mut Context, slot: usize) -> Result<(), RuntimeError> {
    ctx.launch("clear_loss", &[])?;
    ctx.launch("com_loss", &[Value::I(slot as i64)])
}

/// One full forward + backward pass with segment-wise checkpointing.
/// `segment` must divide `cfg.steps`; the context must have been built with
/// `window = segment + 1`. Weight adjoints are accumulated across segments.
pub fn run_once(
    ctx: &mut Context,
    cfg: &RobotConfig,
    topo: &RobotTopology,
    segment: usize,
) -> Result<SegmentedStats, SimError> {
    reset_state(ctx, topo)?;
    let scfg = SegmentedConfig {
        steps: cfg.steps,
        segment,
        carry: 1,
        state_fields: &STATE_FIELDS,
        scratch_fields: &SCRATCH_FIELDS,
    };
    let c = cfg.clone();
    Ok(run_segmented(
        ctx,
        &scfg,
        move |ctx, slot, t| launch_step(ctx, &c, slot, t),
        |ctx, slot| launch_loss(ctx, slot),
        "loss",
    )?)
}

/// Forward only, full storage (window = steps + 1); returns the loss.
pub fn forward_full(ctx: &mut Context, cfg: &RobotConfig, topo: &RobotTopology) -> Result<f64, RuntimeError> {
    reset_state(ctx, topo)?;
    for t in 0..cfg.steps {
        launch_step(ctx, cfg, t + 1, t)?;
    }
    launch_loss(ctx, cfg.steps)?;
    Ok(ctx.read_field("loss")?[0])
}

/// Gradient descent on the controller weights; full-storage backprop.
pub fn optimize(cfg: &RobotConfig) -> Result<SimResult, SimError> {
    let topo = builtin(cfg.robot)?;
    let mut ctx = build_with(cfg, &topo, cfg.steps + 1)?;
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let stats = run_once(&mut ctx, cfg, &topo, cfg.steps)?;
        if !stats.loss.is_finite() {
            return Err(SimError::Diverged(iter));
        }
        losses.push(stats.loss);
        for f in WEIGHT_FIELDS {
            let g = ctx.read_adjoint(f)?;
            let mut w = ctx.read_field(f)?;
            for (w, g) in w.iter_mut().zip(&g) {
                *w -= cfg.lr * g;
            }
            ctx.write_field(f, &w)?;
        }
    }
    let final_loss = forward_full(&mut ctx, cfg, &topo).map_err(SimError::Runtime)?;
    let first = losses.first().copied().unwrap_or(f64::NAN);
    Ok(SimResult {
        losses,
        final_params: vec![final_loss],
        summary: format!(
            "loss {first:.4} -> {final_loss:.4} (center of mass moved {:.4} further right)",
            first - final_loss
        ),
    })
}

/// Finite-difference check of d loss / d `input` (a weight field) in f64.
pub fn check_gradients(
    cfg: &RobotConfig,
    input: &str,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport, SimError> {
    let topo = builtin(cfg.robot)?;
    let mut ctx = build_with(cfg, &topo, cfg.steps + 1)?;
    ctx.set_precision(Precision::F64);
    let c = cfg.clone();
    let rep = grad_check(
        &mut ctx,
        move |ctx| forward_full(ctx, &c, &topo).map(|_| ()),
        input,
        "loss",
        gc,
    )?;
    Ok(rep)
}

pub(super) fn corpus_entry() -> CorpusEntry {
    let cfg = RobotConfig { steps: 4, ..RobotConfig::default() };
    let topo = builtin(cfg.robot).expect("built-in robot 1");
    let setup = {
        let (cfg, topo) = (cfg.clone(), topo.clone());
        move |ctx: &mut Context| -> Result<(), RuntimeError> {
            for (s, sp) in topo.springs.iter().enumerate() {
                ctx.set_i("sa", &[s], sp.a as i64)?;
                ctx.set_i("sb", &[s], sp.b as i64)?;
                ctx.set_f("l0", &[s], topo.rest_length(s))?;
                ctx.set_f("stiff", &[s], sp.stiffness)?;
                ctx.set_f("amp", &[s], sp.actuation)?;
            }
            init_weights(ctx, &cfg, &topo)
        }
    };
    CorpusEntry {
        name: "robot",
        source: source(&cfg, &topo, cfg.steps + 1),
        stop_grad: vec!["sa", "sb", "l0", "stiff", "amp"],
        grads: GRAD_KERNELS.to_vec(),
        init: Box::new(setup),
        launches: vec![
            ("clear_step", vec![1]),
            ("compute_com", vec![1]),
            ("controller_hidden", vec![1, 0]),
            ("controller_act", vec![1]),
            ("apply_force", vec![1]),
            ("advance_toi", vec![1]),
            ("advance_naive", vec![2]),
            ("clear_loss", vec![]),
            ("com_loss", vec![4]),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_topologies_load_and_resolve_lengths() {
        for i in 1..=3 {
            let t = builtin(i).unwrap();
            assert!(!t.objects.is_empty());
            for s in 0..t.springs.len() {
                let l = t.rest_length(s);
                assert!(l > 0.0 && l < 1.0, "robot {i} spring {s} length {l}");
            }
        }
        assert!(matches!(builtin(4), Err(SimError::Config(_))));
    }

    #[test]
    fn resting_robot_stays_on_the_ground() {
        // zero weights -> no actuation; the robot settles under gravity and
        // every object stays at or above the ground (minus the contact
        // tolerance of one step's travel)
        let cfg = RobotConfig { steps: 300, ..RobotConfig::default() };
        let topo = builtin(1).unwrap();
        let mut ctx = build_with(&cfg, &topo, cfg.steps + 1).unwrap();
        ctx.set_precision(Precision::F64);
        for f in WEIGHT_FIELDS {
            ctx.fill(f, 0.0).unwrap();
        }
        forward_full(&mut ctx, &cfg, &topo).unwrap();
        for i in 0..topo.objects.len() {
            let y = ctx.get_f("x", &[cfg.steps, i, 1]).unwrap();
            assert!(y > cfg.ground - 0.01, "object {i} sank to {y}");
            let vy = ctx.get_f("v", &[cfg.steps, i, 1]).unwrap();
            assert!(vy.abs() < 0.05, "object {i} still moving: vy = {vy}");
        }
    }

    #[test]
    fn toi_and_naive_trajectories_stay_close() {
        let topo = builtin(1).unwrap();
        let mut cfg = RobotConfig { steps: 256, ..RobotConfig::default() };
        let run = |cfg: &RobotConfig| {
            let mut ctx = build_with(cfg, &topo, cfg.steps + 1).unwrap();
            ctx.set_precision(Precision::F64);
            forward_full(&mut ctx, cfg, &topo).unwrap();
            let mut xs = Vec::new();
            for i in 0..topo.objects.len() {
                for d in 0..2 {
                    xs.push(ctx.get_f("x", &[cfg.steps, i, d]).unwrap());
                }
            }
            xs
        };
        let toi = run(&cfg);
        cfg.toi = false;
        let naive = run(&cfg);
        for (i, (a, b)) in toi.iter().zip(&naive).enumerate() {
            assert!((a - b).abs() < 1e-2, "coordinate {i}: toi {a} vs naive {b}");
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        // moderate horizon keeps the finite differences well conditioned
        let cfg = RobotConfig { steps: 16, ..RobotConfig::default() };
        let gc = GradCheckConfig { rel_tol: 1e-4, ..GradCheckConfig::default() };
        for input in ["w1", "w2", "b2"] {
            let rep = check_gradients(&cfg, input, &gc).unwrap();
            assert!(rep.passed, "{input}: {rep}");
        }
    }

    #[test]
    fn checkpointed_gradients_match_full_storage_bitwise() {
        let cfg = RobotConfig { steps: 64, ..RobotConfig::default() };
        let topo = builtin(1).unwrap();
        let gather = |segment: usize| {
            let mut ctx = build_with(&cfg, &topo, segment + 1).unwrap();
            let stats = run_once(&mut ctx, &cfg, &topo, segment).unwrap();
            let mut grads = Vec::new();
            for f in WEIGHT_FIELDS {
                grads.extend(ctx.read_adjoint(f).unwrap());
            }
            (stats, grads)
        };
        let (full_stats, full) = gather(cfg.steps);
        for segment in [1, 8] {
            let (stats, grads) = gather(segment);
            assert_eq!(full_stats.loss.to_bits(), stats.loss.to_bits(), "loss, S={segment}");
            for (i, (a, b)) in full.iter().zip(&grads).enumerate() {
                assert_eq!(a.to_bits(), b.to_bits(), "grad {i}, S={segment}: {a} vs {b}");
            }
            assert!(stats.peak_state_slots() <= segment + cfg.steps / segment + 1);
        }
    }
}
