//! Acceptance suite: every published behavior of the toolkit, exercised
//! end to end at desk scale. Each test prints a single pass/fail line
//! (visible with `--nocapture`) and enforces its own wall-clock budget.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use adjk_core::frontend::parse_program;
use adjk_core::ir::{dump_ir, validate, ScalarType, Stage};
use adjk_core::runtime::access::{check_access, AccessRule};
use adjk_core::runtime::gradcheck::GradCheckConfig;
use adjk_core::runtime::{Context, ExecMode, Precision, Value};
use adjk_core::sim;
use adjk_core::sim::billiards::BilliardsConfig;
use adjk_core::sim::bouncing_ball::{
    derivative_sign_changes, gradient, scan_heights, BouncingBallConfig,
};
use adjk_core::sim::electric::ElectricConfig;
use adjk_core::sim::mass_spring::MassSpringConfig;
use adjk_core::sim::robot::{build_with, builtin, run_once, RobotConfig, WEIGHT_FIELDS};
use adjk_core::sim::smoke::SmokeConfig;
use adjk_core::sim::wave::WaveConfig;

fn report(name: &str, pass: bool, detail: String) {
    println!("{name}: {} — {detail}", if pass { "pass" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn within_budget(name: &str, t0: Instant, budget: Duration) {
    let elapsed = t0.elapsed();
    assert!(elapsed <= budget, "{name} took {elapsed:?}, budget {budget:?}");
}

/// Criterion: the generated adjoint of `y[i] = sin(x[i]^2)` accumulates
/// `2 x cos(x^2)` into `x.grad`, and evaluates to the analytic value.
#[test]
fn adjoint_codegen_fidelity() {
    let t0 = Instant::now();
    let src = "
field x: f32[16] needs_grad;
field y: f32[16] needs_grad;
kernel sq_sin() {
  parallel for i in 0..16 {
    y[i] = sin(x[i] * x[i]);
  }
}
";
    let program = sim::compile(src, &[], &["sq_sin"]).unwrap();
    let adj = program.kernel("sq_sin.grad").expect("adjoint kernel generated");
    let text = dump_ir(adj, Stage::Adjoint).unwrap();
    assert!(text.contains("cos("), "no cosine in adjoint:\n{text}");
    assert!(text.contains("x.grad["), "no x.grad accumulation in adjoint:\n{text}");

    let mut ctx = Context::new(program).unwrap();
    ctx.set_precision(Precision::F64);
    let x = 0.3;
    ctx.set_f("x", &[0], x).unwrap();
    ctx.launch_any_stage("sq_sin", &[]).unwrap();
    ctx.set_adjoint("y", &[0], 1.0).unwrap();
    ctx.launch_any_stage("sq_sin.grad", &[]).unwrap();
    let got = ctx.get_adjoint("x", &[0]).unwrap();
    let oracle = 2.0 * x * (x * x).cos();
    within_budget("adjoint codegen fidelity", t0, Duration::from_secs(1));
    report(
        "adjoint codegen fidelity",
        (got - oracle).abs() < 1e-4,
        format!("x_adj(0.3) = {got:.6}, analytic 2x cos(x^2) = {oracle:.6}"),
    );
}

/// Criterion: the naive integrator reports d height / d h0 = +1, the
/// time-of-impact integrator -1; a dense height scan shows the naive
/// saw-tooth (many derivative sign changes) while TOI is smooth.
#[test]
fn toi_gradient_reversal() {
    let t0 = Instant::now();
    let naive_cfg = BouncingBallConfig { toi: false, ..BouncingBallConfig::default() };
    let toi_cfg = BouncingBallConfig { toi: true, ..BouncingBallConfig::default() };
    assert_eq!((naive_cfg.steps, naive_cfg.dt), (100, 0.01));
    let (_, g_naive) = gradient(&naive_cfg).unwrap();
    let (_, g_toi) = gradient(&toi_cfg).unwrap();
    let naive_scan = scan_heights(&naive_cfg, 0.2, 0.8, 200).unwrap();
    let toi_scan = scan_heights(&toi_cfg, 0.2, 0.8, 200).unwrap();
    let (sn, st) = (derivative_sign_changes(&naive_scan), derivative_sign_changes(&toi_scan));
    within_budget("toi gradient reversal", t0, Duration::from_secs(10));
    report(
        "toi gradient reversal",
        (g_naive - 1.0).abs() < 0.02 && (g_toi + 1.0).abs() < 0.02 && sn >= 5 && st <= 1,
        format!(
            "naive grad {g_naive:.4} (want +1), toi grad {g_toi:.4} (want -1), \
             scan sign changes naive {sn} (want >= 5) toi {st} (want <= 1)"
        ),
    );
}

/// Criterion: 200 gradient-descent iterations move the triangle's rest
/// lengths from [0.1, 0.1, 0.14] to within 5% of [0.600, 0.600, 0.529]
/// with final area 0.2 +- 0.01.
#[test]
fn mass_spring_rest_length_optimization() {
    let t0 = Instant::now();
    let cfg = MassSpringConfig::default();
    assert_eq!(cfg.iters, 200);
    assert_eq!(cfg.rest_init, [0.1, 0.1, 0.14]);
    let res = sim::mass_spring::optimize(&cfg).unwrap();
    let reference = [0.600, 0.600, 0.529];
    let max_rel = res
        .final_params
        .iter()
        .zip(&reference)
        .map(|(r, t)| ((r - t) / t).abs())
        .fold(0.0f64, f64::max);
    let mut ctx = sim::mass_spring::build(&cfg).unwrap();
    ctx.write_field("rest", &res.final_params).unwrap();
    sim::mass_spring::reset(&mut ctx).unwrap();
    sim::mass_spring::forward(&mut ctx, cfg.steps).unwrap();
    let area = ctx.read_field("area").unwrap()[0];
    within_budget("mass-spring rest-length optimization", t0, Duration::from_secs(30));
    report(
        "mass-spring rest-length optimization",
        max_rel < 0.05 && (area - 0.2).abs() < 0.01,
        format!(
            "rest [{:.4}, {:.4}, {:.4}] vs [0.600, 0.600, 0.529] (max rel err {:.3}), \
             final area {area:.4}",
            res.final_params[0], res.final_params[1], res.final_params[2], max_rel
        ),
    );
}

/// Criterion: every simulator passes a central-difference gradient check
/// in f64 deterministic mode at relative error < 1e-4.
#[test]
fn gradient_oracle_suite() {
    let t0 = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut note = |name: &str, rep: adjk_core::runtime::gradcheck::GradCheckReport| {
        assert!(rep.passed && rep.max_rel_err < 1e-4, "{name}: {rep}");
        if rep.max_rel_err > worst.0 {
            worst = (rep.max_rel_err, name.to_string());
        }
    };

    let wave_cfg = WaveConfig { n: 32, steps: 64, ..WaveConfig::default() };
    note("wave 32x32/64", sim::wave::check_gradients(&wave_cfg, 1e-4).unwrap());

    let smoke_cfg = SmokeConfig { n: 16, steps: 8, jacobi: 10, ..SmokeConfig::default() };
    note("smoke 16x16/8", sim::smoke::check_gradients(&smoke_cfg).unwrap());

    let robot_cfg = RobotConfig { steps: 16, ..RobotConfig::default() };
    let gc = GradCheckConfig { rel_tol: 1e-4, ..GradCheckConfig::default() };
    for input in ["w1", "w2", "b2"] {
        note(
            &format!("robot 16 steps d/{input}"),
            sim::robot::check_gradients(&robot_cfg, input, &gc).unwrap(),
        );
    }

    let electric_cfg = ElectricConfig { steps: 64, ..ElectricConfig::default() };
    for input in ["w1", "b2"] {
        note(
            &format!("electric 64 steps d/{input}"),
            sim::electric::check_gradients(&electric_cfg, input).unwrap(),
        );
    }

    let billiards_cfg = BilliardsConfig {
        layout: vec![[0.2, 0.5], [0.5, 0.5]],
        angle0: 0.03,
        steps: 400,
        ..BilliardsConfig::default()
    };
    note("billiards clean hit", sim::billiards::check_gradients(&billiards_cfg).unwrap());

    within_budget("gradient oracle suite", t0, Duration::from_secs(300));
    report(
        "gradient oracle suite",
        true,
        format!("all simulators < 1e-4; worst rel err {:.3e} ({})", worst.0, worst.1),
    );
}

/// Criterion: on every corpus kernel, primal results before the pass
/// pipeline (parsed IR, interpreted directly) and after it are bitwise
/// identical over 100 random field states in f64 deterministic mode.
#[test]
fn pass_equivalence() {
    let t0 = Instant::now();
    let mut states = 0usize;
    for (ei, entry) in sim::corpus().iter().enumerate() {
        let pre = parse_program(&entry.source).expect("corpus parses");
        assert!(validate(&pre).is_empty());
        let post = sim::compile(&entry.source, &entry.stop_grad, &[]).unwrap();

        let setup = |p| -> Context {
            let mut ctx = Context::new(p).unwrap();
            ctx.set_precision(Precision::F64);
            ctx.set_mode(ExecMode::Deterministic);
            (entry.init)(&mut ctx).unwrap();
            ctx
        };
        let mut a = setup(pre);
        let mut b = setup(post);

        let float_fields: Vec<(String, usize)> = a
            .program()
            .fields
            .iter()
            .filter(|f| f.elem == ScalarType::F32)
            .map(|f| (f.name.clone(), f.len()))
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(41 + ei as u64);
        for _ in 0..100 {
            for (name, len) in &float_fields {
                let vals: Vec<f64> =
                    (0..*len).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect();
                a.write_field(name, &vals).unwrap();
                b.write_field(name, &vals).unwrap();
            }
            for (kernel, args) in &entry.launches {
                let args: Vec<Value> = args.iter().map(|&v| Value::I(v)).collect();
                a.launch_any_stage(kernel, &args).unwrap();
                b.launch_any_stage(kernel, &args).unwrap();
            }
            for (name, _) in &float_fields {
                let va = a.read_field(name).unwrap();
                let vb = b.read_field(name).unwrap();
                for (i, (x, y)) in va.iter().zip(&vb).enumerate() {
                    assert_eq!(
                        x.to_bits(),
                        y.to_bits(),
                        "{}: field {name}[{i}] diverged: {x:?} vs {y:?}",
                        entry.name
                    );
                }
            }
            states += 1;
        }
    }
    within_budget("pass equivalence", t0, Duration::from_secs(60));
    report(
        "pass equivalence",
        true,
        format!("{states} random states across {} corpus programs, all bitwise equal", 7),
    );
}

/// Criterion: segment-wise checkpointed backpropagation (robot, 256 steps,
/// S in {1, 16, 256}) reproduces the full-storage gradients bitwise with
/// peak retained state <= S + n/S + 1 slots.
#[test]
fn checkpointing_equivalence() {
    let t0 = Instant::now();
    let cfg = RobotConfig { steps: 256, ..RobotConfig::default() };
    let topo = builtin(cfg.robot).unwrap();
    let gather = |segment: usize| {
        let mut ctx = build_with(&cfg, &topo, segment + 1).unwrap();
        let stats = run_once(&mut ctx, &cfg, &topo, segment).unwrap();
        let mut grads = Vec::new();
        for f in WEIGHT_FIELDS {
            grads.extend(ctx.read_adjoint(f).unwrap());
        }
        (stats, grads)
    };
    let (full_stats, full_grads) = gather(cfg.steps);
    for segment in [1usize, 16, 256] {
        let (stats, grads) = gather(segment);
        assert_eq!(
            stats.loss.to_bits(),
            full_stats.loss.to_bits(),
            "S={segment}: loss differs from full storage"
        );
        for (i, (g, f)) in grads.iter().zip(&full_grads).enumerate() {
            assert_eq!(
                g.to_bits(),
                f.to_bits(),
                "S={segment}: weight gradient {i} differs: {g:?} vs {f:?}"
            );
        }
        let bound = segment + cfg.steps / segment + 1;
        assert!(
            stats.peak_state_slots() <= bound,
            "S={segment}: peak {} slots exceeds bound {bound}",
            stats.peak_state_slots()
        );
    }
    within_budget("checkpointing equivalence", t0, Duration::from_secs(60));
    report(
        "checkpointing equivalence",
        true,
        format!(
            "S in {{1, 16, 256}} bitwise equal to full storage over {} weights; \
             peak state within S + n/S + 1",
            full_grads.len()
        ),
    );
}

/// Criterion: the access-rule checker reports zero violations across the
/// simulator corpus and exactly one correctly-classified violation for
/// each synthetic rule-breaking kernel.
#[test]
fn access_rule_checker() {
    let t0 = Instant::now();
    let mut launches = 0usize;
    for entry in sim::corpus() {
        let program = sim::compile(&entry.source, &entry.stop_grad, &entry.grads).unwrap();
        let mut ctx = Context::new(program).unwrap();
        (entry.init)(&mut ctx).unwrap();
        for (kernel, args) in &entry.launches {
            let args: Vec<Value> = args.iter().map(|&v| Value::I(v)).collect();
            let violations = check_access(&mut ctx, kernel, &args).unwrap();
            assert!(violations.is_empty(), "{}::{kernel}: {violations:?}", entry.name);
            launches += 1;
        }
    }

    let synthetic = "
field x: f32[4];
field y: f32[4];
field acc: f32[];
kernel overwrite() { y[0] = 1.0; y[0] = 2.0; }
kernel read_after_acc() { acc[] += x[0]; y[1] = acc[]; }
";
    let program = sim::compile(synthetic, &[], &[]).unwrap();
    let mut ctx = Context::new(program).unwrap();
    let v1 = check_access(&mut ctx, "overwrite", &[]).unwrap();
    assert_eq!(v1.len(), 1, "{v1:?}");
    assert_eq!(v1[0].rule, AccessRule::OverwriteAfterWrite);
    assert_eq!((v1[0].field.as_str(), v1[0].index.as_slice()), ("y", &[0usize][..]));
    let v2 = check_access(&mut ctx, "read_after_acc", &[]).unwrap();
    assert_eq!(v2.len(), 1, "{v2:?}");
    assert_eq!(v2[0].rule, AccessRule::ReadAfterAccumulate);
    assert_eq!(v2[0].field.as_str(), "acc");

    within_budget("access-rule checker", t0, Duration::from_secs(10));
    report(
        "access-rule checker",
        true,
        format!("{launches} corpus launches clean; both synthetic kernels classified correctly"),
    );
}

/// Criterion: over a 100-sample aim-angle window where the cue ball never
/// contacts anything, the billiards loss is constant and the reported
/// gradient is exactly zero (flat land, no spurious gradients).
#[test]
fn billiards_flat_land() {
    let t0 = Instant::now();
    let cfg = BilliardsConfig {
        layout: vec![[0.2, 0.5], [0.5, 0.5]],
        angle0: 0.0,
        steps: 500,
        ..BilliardsConfig::default()
    };
    let scan = sim::billiards::scan_angles(&cfg, 2.9, 3.4, 100).unwrap();
    let l0 = scan[0].1;
    let max_dev = scan.iter().map(|(_, l, _)| (l - l0).abs()).fold(0.0f64, f64::max);
    let max_grad = scan.iter().map(|(_, _, g)| g.abs()).fold(0.0f64, f64::max);
    within_budget("billiards flat land", t0, Duration::from_secs(60));
    report(
        "billiards flat land",
        max_dev <= 1e-9 && max_grad == 0.0,
        format!("100 samples: max |loss - loss0| = {max_dev:.3e}, max |grad| = {max_grad:?}"),
    );
}

/// Criterion: 30 gradient-descent iterations on the robot controller
/// improve the locomotion loss by at least 20% (TOI contacts enabled).
#[test]
fn robot_optimization_progress() {
    let t0 = Instant::now();
    let cfg = RobotConfig { iters: 30, ..RobotConfig::default() };
    assert!(cfg.toi);
    let res = sim::robot::optimize(&cfg).unwrap();
    let (l0, lf) = (res.losses[0], res.final_params[0]);
    let improvement = (l0 - lf) / l0.abs();
    within_budget("robot optimization progress", t0, Duration::from_secs(120));
    report(
        "robot optimization progress",
        improvement >= 0.20,
        format!("loss {l0:.4} -> {lf:.4} over 30 iterations ({:.0}% improvement)", improvement * 100.0),
    );
}
