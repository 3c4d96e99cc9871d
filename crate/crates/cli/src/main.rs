//! `adjk` — command-line surface for the differentiable kernel toolkit.
//!
//! Ties the compiler, runtime and simulators together: compiles `.dk`
//! files and dumps IR at any pipeline stage, runs finite-difference
//! gradient checks, drives the simulator demos (writing `loss.csv` and PGM
//! frames), sweeps scalar parameters, and runs the data-access-rule
//! checker.
//!
//! Exit codes: 0 success, 1 runtime/check failure, 2 usage error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context as _, Result};
use clap::{Parser, Subcommand, ValueEnum};

use adjk_core::autodiff::make_adjoint;
use adjk_core::frontend::parse_program_named;
use adjk_core::ir::{dump_ir, validate, Program, ScalarType, Stage};
use adjk_core::passes::{eliminate_mutable_locals, flatten_branches, simplify};
use adjk_core::runtime::access::check_access;
use adjk_core::runtime::gradcheck::{grad_check, GradCheckConfig};
use adjk_core::runtime::io::write_pgm;
use adjk_core::runtime::{Context, ExecMode, Precision, Value};
use adjk_core::sim;
use adjk_core::sim::SimResult;

#[derive(Parser)]
#[command(name = "adjk", version, about = "differentiable kernel toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Parsed,
    Flattened,
    Ssa,
    Adjoint,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a .dk file and print its IR at a pipeline stage.
    Compile {
        file: PathBuf,
        /// Pipeline stage to dump.
        #[arg(long = "dump-ir", value_enum, default_value = "ssa")]
        dump_ir: StageArg,
        /// Restrict output to one kernel.
        #[arg(long)]
        kernel: Option<String>,
    },
    /// Finite-difference check of d LOSS / d INPUT for a .dk file.
    ///
    /// All parameterless kernels are launched once, in declaration order,
    /// as the forward pass.
    GradCheck {
        file: PathBuf,
        /// Scalar loss field.
        #[arg(long)]
        loss: String,
        /// Input field to differentiate with respect to.
        #[arg(long)]
        input: String,
        /// Central-difference step size.
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Run in f64 precision (default f32).
        #[arg(long = "f64")]
        use_f64: bool,
    },
    /// Run a simulator demo and write loss.csv (and PGM frames) to --out.
    Demo {
        /// One of: mass_spring_simple, bouncing_ball, mass_spring_robot,
        /// wave, smoke, billiards, electric.
        name: String,
        /// Optimization iterations (0 = evaluate the initial loss only).
        #[arg(long)]
        iters: Option<usize>,
        /// Simulation steps per forward pass.
        #[arg(long)]
        steps: Option<usize>,
        /// Time-of-impact collision handling (bouncing_ball, robot).
        #[arg(long, value_enum)]
        toi: Option<OnOff>,
        /// Checkpointing segment length (mass_spring_robot).
        #[arg(long)]
        segment: Option<usize>,
        /// Output directory for loss.csv and frames.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for randomized initialization (robot, electric).
        #[arg(long)]
        seed: Option<u64>,
        /// Force deterministic sequential execution (this is also the
        /// default mode).
        #[arg(long)]
        deterministic: bool,
    },
    /// Sweep a scalar parameter and write (value, loss, gradient) rows.
    Scan {
        /// One of: bouncing_ball (param h0), billiards (param angle).
        name: String,
        #[arg(long)]
        param: String,
        #[arg(long, allow_hyphen_values = true)]
        from: f64,
        #[arg(long, allow_hyphen_values = true)]
        to: f64,
        #[arg(long)]
        samples: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the data-access-rule checker on one kernel of a .dk file.
    CheckAccess {
        file: PathBuf,
        #[arg(long)]
        kernel: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Compile { file, dump_ir, kernel } => cmd_compile(&file, dump_ir, kernel.as_deref()),
        Cmd::GradCheck { file, loss, input, eps, use_f64 } => {
            cmd_grad_check(&file, &loss, &input, eps, use_f64)
        }
        Cmd::Demo { name, iters, steps, toi, segment, out, seed, deterministic } => {
            let flags = DemoFlags {
                iters,
                steps,
                toi: toi.map(|t| t == OnOff::On),
                segment,
                seed,
                deterministic,
            };
            cmd_demo(&name, &flags, out.as_deref())
        }
        Cmd::Scan { name, param, from, to, samples, out } => {
            cmd_scan(&name, &param, from, to, samples, &out)
        }
        Cmd::CheckAccess { file, kernel } => cmd_check_access(&file, &kernel),
    }
}

fn read_source(file: &Path) -> Result<String> {
    std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))
}

/// Parses and validates a .dk file; all diagnostics become one error.
fn parse_file(file: &Path) -> Result<Program> {
    let src = read_source(file)?;
    let name = file.display().to_string();
    let program = parse_program_named(&src, &name).map_err(|errs| {
        anyhow!("{}", errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("\n"))
    })?;
    let diags = validate(&program);
    if !diags.is_empty() {
        bail!("{}", diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"));
    }
    Ok(program)
}

fn cmd_compile(file: &Path, stage: StageArg, only: Option<&str>) -> Result<ExitCode> {
    let mut program = parse_file(file)?;
    if let Some(k) = only {
        if program.kernel(k).is_none() {
            bail!("no kernel `{k}` in {}", file.display());
        }
    }
    let target = match stage {
        StageArg::Parsed => Stage::Parsed,
        StageArg::Flattened => Stage::Flattened,
        StageArg::Ssa | StageArg::Adjoint => Stage::Ssa,
    };
    if target >= Stage::Flattened {
        let view = program.clone();
        for k in &mut program.kernels {
            let mut t = flatten_branches(k.clone(), &view)?;
            if target >= Stage::Ssa {
                t = simplify(eliminate_mutable_locals(t)?)?;
            }
            *k = t;
        }
    }
    let mut adjoints = Vec::new();
    if matches!(stage, StageArg::Adjoint) {
        for k in &program.kernels {
            if only.is_some_and(|o| o != k.name) {
                continue;
            }
            adjoints.push(simplify(make_adjoint(k, &program)?)?);
        }
    }
    let mut out = String::new();
    for k in program.kernels.iter().chain(&adjoints) {
        let selected = match only {
            Some(o) => k.name == o || k.name == format!("{o}.grad"),
            None => true,
        };
        if selected {
            let _ = writeln!(out, "{}", dump_ir(k, k.stage.min(target))?);
        }
    }
    print!("{out}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_grad_check(file: &Path, loss: &str, input: &str, eps: f64, use_f64: bool) -> Result<ExitCode> {
    let src = read_source(file)?;
    let parsed = parse_file(file)?;
    let launches: Vec<String> = parsed
        .kernels
        .iter()
        .filter(|k| k.params.is_empty())
        .map(|k| k.name.clone())
        .collect();
    if launches.is_empty() {
        bail!("{} has no parameterless kernels to launch", file.display());
    }
    let grads: Vec<&str> = launches.iter().map(String::as_str).collect();
    let program = sim::compile(&src, &[], &grads)?;
    let mut ctx = Context::new(program)?;
    if use_f64 {
        ctx.set_precision(Precision::F64);
    }
    ctx.set_mode(ExecMode::Deterministic);
    let names = launches.clone();
    let loss_name = loss.to_string();
    let report = grad_check(
        &mut ctx,
        move |ctx| {
            ctx.fill(&loss_name, 0.0)?;
            for k in &names {
                ctx.launch(k, &[])?;
            }
            Ok(())
        },
        input,
        loss,
        &GradCheckConfig { eps, ..GradCheckConfig::default() },
    )?;
    println!("{report}");
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

struct DemoFlags {
    iters: Option<usize>,
    steps: Option<usize>,
    toi: Option<bool>,
    segment: Option<usize>,
    seed: Option<u64>,
    #[allow(dead_code)]
    deterministic: bool, // deterministic sequential execution is the default
}

/// A demo's artifacts: CSV data rows (after `iteration,loss`), grayscale
/// frames as (rows, cols, data), and a one-line summary.
struct DemoOutput {
    rows: Vec<String>,
    frames: Vec<(usize, usize, Vec<f64>)>,
    summary: String,
}

fn loss_rows(losses: &[f64]) -> Vec<String> {
    losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")).collect()
}

fn from_result(res: SimResult) -> DemoOutput {
    DemoOutput { rows: loss_rows(&res.losses), frames: Vec::new(), summary: res.summary }
}

fn cmd_demo(name: &str, flags: &DemoFlags, out: Option<&Path>) -> Result<ExitCode> {
    let output = match name {
        "mass_spring_simple" => demo_mass_spring(flags)?,
        "bouncing_ball" => demo_bouncing_ball(flags)?,
        "mass_spring_robot" => demo_robot(flags)?,
        "wave" => demo_wave(flags)?,
        "smoke" => demo_smoke(flags)?,
        "billiards" => demo_billiards(flags)?,
        "electric" => demo_electric(flags)?,
        other => {
            eprintln!(
                "unknown demo `{other}`; expected one of mass_spring_simple, bouncing_ball, \
                 mass_spring_robot, wave, smoke, billiards, electric"
            );
            return Ok(ExitCode::from(2));
        }
    };
    println!("{}", output.summary);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut csv = String::from("iteration,loss\n");
        for row in &output.rows {
            csv.push_str(row);
            csv.push('\n');
        }
        std::fs::write(dir.join("loss.csv"), csv)?;
        for (i, (rows, cols, data)) in output.frames.iter().enumerate() {
            write_pgm(&dir.join(format!("frame_{i:04}.pgm")), *rows, *cols, data)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn demo_mass_spring(flags: &DemoFlags) -> Result<DemoOutput> {
    use sim::mass_spring::*;
    let mut cfg = MassSpringConfig::default();
    if let Some(i) = flags.iters {
        cfg.iters = i;
    }
    if let Some(s) = flags.steps {
        cfg.steps = s;
    }
    if cfg.iters == 0 {
        let mut ctx = build(&cfg)?;
        reset(&mut ctx)?;
        let loss = forward(&mut ctx, cfg.steps)?;
        return Ok(DemoOutput {
            rows: loss_rows(&[loss]),
            frames: Vec::new(),
            summary: format!("initial loss {loss:.6e}"),
        });
    }
    Ok(from_result(optimize(&cfg)?))
}

fn demo_bouncing_ball(flags: &DemoFlags) -> Result<DemoOutput> {
    use sim::bouncing_ball::*;
    let mut cfg = BouncingBallConfig::default();
    if let Some(s) = flags.steps {
        cfg.steps = s;
    }
    if let Some(t) = flags.toi {
        cfg.toi = t;
    }
    let (height, grad) = gradient(&cfg)?;
    let kind = if cfg.toi { "toi" } else { "naive" };
    Ok(DemoOutput {
        rows: loss_rows(&[height]),
        frames: Vec::new(),
        summary: format!(
            "integrator {kind}: final height {height:.6}, d height / d h0 = {grad:.6}"
        ),
    })
}

fn demo_robot(flags: &DemoFlags) -> Result<DemoOutput> {
    use sim::robot::*;
    let mut cfg = RobotConfig::default();
    if let Some(i) = flags.iters {
        cfg.iters = i;
    }
    if let Some(s) = flags.steps {
        cfg.steps = s;
    }
    if let Some(t) = flags.toi {
        cfg.toi = t;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    let Some(segment) = flags.segment else {
        return Ok(from_result(optimize(&cfg)?));
    };
    if segment == 0 || cfg.steps % segment != 0 {
        bail!("--segment must divide the step count {}", cfg.steps);
    }
    // checkpointed optimization: window of segment+1 state slots
    let topo = builtin(cfg.robot)?;
    let mut ctx = build_with(&cfg, &topo, segment + 1)?;
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let stats = run_once(&mut ctx, &cfg, &topo, segment)?;
        if !stats.loss.is_finite() {
            bail!("simulation diverged (non-finite loss) at iteration {iter}");
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
    let final_loss = run_once(&mut ctx, &cfg, &topo, segment)?.loss;
    let first = losses.first().copied().unwrap_or(final_loss);
    Ok(DemoOutput {
        rows: loss_rows(&losses),
        frames: Vec::new(),
        summary: format!("segmented (S={segment}): loss {first:.4} -> {final_loss:.4}"),
    })
}

fn demo_wave(flags: &DemoFlags) -> Result<DemoOutput> {
    use sim::wave::*;
    let mut cfg = WaveConfig::default();
    if let Some(i) = flags.iters {
        cfg.iters = i;
    }
    if let Some(s) = flags.steps {
        cfg.steps = s;
    }
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let mut ctx = build(&cfg)?;
    make_self_consistent_target(&mut ctx, &cfg)?;
    let (rows, summary) = if cfg.iters == 0 {
        let loss = forward(&mut ctx, &cfg)?;
        (loss_rows(&[loss]), format!("initial loss {loss:.6e}"))
    } else {
        let res = optimize(&mut ctx, &cfg)?;
        (loss_rows(&res.losses), res.summary)
    };
    // frames: the optimized trajectory u[t] at evenly spaced times
    forward(&mut ctx, &cfg)?;
    let frames = snapshot_frames(&ctx, "u", cfg.steps, cfg.n)?;
    Ok(DemoOutput { rows, frames, summary })
}

fn demo_smoke(flags: &DemoFlags) -> Result<DemoOutput> {
    use sim::smoke::*;
    let mut cfg = SmokeConfig::default();
    if let Some(i) = flags.iters {
        cfg.iters = i;
    }
    if let Some(s) = flags.steps {
        cfg.steps = s;
    }
    let mut ctx = build(&cfg)?;
    default_problem(&mut ctx, &cfg)?;
    let mut losses = Vec::with_capacity(cfg.iters.max(1));
    for iter in 0..cfg.iters {
        let (loss, gx, gy) = loss_and_grad(&mut ctx, &cfg)?;
        if !loss.is_finite() {
            bail!("simulation diverged (non-finite loss) at iteration {iter}");
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
    let final_loss = forward(&mut ctx, &cfg)?;
    if losses.is_empty() {
        losses.push(final_loss);
    }
    let frames = snapshot_frames(&ctx, "d", cfg.steps, cfg.n)?;
    Ok(DemoOutput {
        rows: loss_rows(&losses),
        frames,
        summary: format!("final loss {final_loss:.6e}"),
    })
}

fn demo_billiards(flags: &DemoFlags) -> Result<DemoOutput> {
    use sim::billiards::*;
    let mut cfg = BilliardsConfig::default();
    if let Some(i) = flags.iters {
        cfg.iters = i;
    }
    if let Some(s) = flags.steps {
        cfg.steps = s;
    }
    Ok(from_result(optimize(&cfg)?))
}

fn demo_electric(flags: &DemoFlags) -> Result<DemoOutput> {
    use sim::electric::*;
    let mut cfg = ElectricConfig::default();
    if let Some(i) = flags.iters {
        cfg.iters = i;
    }
    if let Some(s) = flags.steps {
        cfg.steps = s;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    Ok(from_result(optimize(&cfg)?))
}

/// Up to nine `n x n` snapshots of `field[t, :, :]` at evenly spaced `t`.
fn snapshot_frames(
    ctx: &Context,
    field: &str,
    steps: usize,
    n: usize,
) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let stride = (steps / 8).max(1);
    let mut frames = Vec::new();
    let mut t = 0;
    while t <= steps {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(ctx.get_f(field, &[t, i, j])?);
            }
        }
        frames.push((n, n, data));
        t += stride;
    }
    Ok(frames)
}

fn cmd_scan(name: &str, param: &str, from: f64, to: f64, samples: usize, out: &Path) -> Result<ExitCode> {
    let points = match (name, param) {
        ("bouncing_ball", "h0" | "height") => {
            let cfg = sim::bouncing_ball::BouncingBallConfig::default();
            sim::bouncing_ball::scan_heights(&cfg, from, to, samples)?
        }
        ("billiards", "angle" | "angle0" | "aim") => {
            let cfg = sim::billiards::BilliardsConfig::default();
            sim::billiards::scan_angles(&cfg, from, to, samples)?
        }
        _ => {
            eprintln!(
                "unknown scan `{name} --param {param}`; expected `bouncing_ball --param h0` \
                 or `billiards --param angle`"
            );
            return Ok(ExitCode::from(2));
        }
    };
    let mut csv = String::from("value,loss,gradient\n");
    for (v, l, g) in &points {
        let _ = writeln!(csv, "{v},{l},{g}");
    }
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(out, csv)?;
    println!("wrote {} samples to {}", points.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_check_access(file: &Path, kernel: &str) -> Result<ExitCode> {
    let src = read_source(file)?;
    let program = sim::compile(&src, &[], &[])?;
    let Some(k) = program.kernel(kernel) else {
        bail!("no kernel `{kernel}` in {}", file.display());
    };
    let args: Vec<Value> = k
        .params
        .iter()
        .map(|(_, ty)| match ty {
            ScalarType::I32 => Value::I(0),
            ScalarType::F32 => Value::F(0.0),
        })
        .collect();
    let mut ctx = Context::new(program)?;
    let violations = check_access(&mut ctx, kernel, &args)?;
    if violations.is_empty() {
        println!("kernel `{kernel}`: no access-rule violations");
        Ok(ExitCode::SUCCESS)
    } else {
        for v in &violations {
            println!("{v}");
        }
        Ok(ExitCode::from(1))
    }
}
