//! Numerical gradient verification by central finite differences.
//!
//! For sampled elements of an input field the loss is evaluated at
//! `x ± eps` and `(L(x+eps) - L(x-eps)) / 2eps` is compared against the
//! adjoint produced by tape replay. Run in f64 precision and deterministic
//! mode for meaningful tolerances.

use super::{Context, RuntimeError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Elements sampled from the input field (all, if it has fewer).
    pub samples: usize,
    pub seed: u64,
    pub rel_tol: f64,
    /// Absolute tolerance applied when both gradients are tiny.
    pub abs_tol: f64,
    /// Below this magnitude the relative criterion is meaningless and the
    /// absolute one is used.
    pub small_grad: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            samples: 32,
            seed: 0,
            rel_tol: 1e-5,
            abs_tol: 1e-8,
            small_grad: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub worst_element: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {}/{} elements ok, max rel err {:.3e} at element {} (adjoint {:.6e}, \
             finite diff {:.6e})",
            if self.passed { "pass" } else { "FAIL" },
            self.checked - self.failures,
            self.checked,
            self.max_rel_err,
            self.worst_element,
            self.analytic_at_worst,
            self.numeric_at_worst,
        )
    }
}

/// Verifies `d loss / d input` for a program run by `run`. The closure must
/// rebuild all downstream state from the current contents of `input` (and
/// reset any accumulators it reads), and must leave the scalar loss in
/// `loss`. It is invoked once recorded for the adjoint and twice per
/// sampled element for the finite differences; `input` itself is restored
/// afterwards.
pub fn grad_check(
    ctx: &mut Context,
    mut run: impl FnMut(&mut Context) -> Result<(), RuntimeError>,
    input: &str,
    loss: &str,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, RuntimeError> {
    // analytic gradient via tape replay
    ctx.clear_tape();
    ctx.start_recording();
    let fwd = run(ctx);
    ctx.stop_recording();
    fwd?;
    ctx.tape_backward(loss)?;
    ctx.clear_tape();
    let analytic = ctx.read_adjoint(input)?;
    let x0 = ctx.read_field(input)?;
    let n = x0.len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let indices: Vec<usize> = if n <= cfg.samples {
        (0..n).collect()
    } else {
        rand::seq::index::sample(&mut rng, n, cfg.samples).into_vec()
    };

    let mut report = GradCheckReport {
        checked: indices.len(),
        failures: 0,
        max_rel_err: 0.0,
        worst_element: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        passed: true,
    };
    let mut x = x0.clone();
    for &i in &indices {
        x[i] = x0[i] + cfg.eps;
        ctx.write_field(input, &x)?;
        run(ctx)?;
        let lp = ctx.read_field(loss)?[0];
        x[i] = x0[i] - cfg.eps;
        ctx.write_field(input, &x)?;
        run(ctx)?;
        let lm = ctx.read_field(loss)?[0];
        x[i] = x0[i];
        let fd = (lp - lm) / (2.0 * cfg.eps);
        let g = analytic[i];
        let err = (g - fd).abs();
        let scale = g.abs().max(fd.abs());
        let (rel, ok) = if scale < cfg.small_grad {
            (err / cfg.small_grad, err < cfg.abs_tol)
        } else {
            (err / scale, err / scale < cfg.rel_tol)
        };
        if !ok {
            report.failures += 1;
            report.passed = false;
        }
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_element = i;
            report.analytic_at_worst = g;
            report.numeric_at_worst = fd;
        }
    }
    // restore the input and leave downstream state consistent with it
    ctx.write_field(input, &x0)?;
    run(ctx)?;
    Ok(report)
}
