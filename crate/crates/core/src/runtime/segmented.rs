//! Segment-wise checkpointing: O(sqrt(n)) memory backpropagation through
//! long simulations.
//!
//! State fields carry a leading "slot" dimension holding a sliding window
//! of recent steps instead of the whole history. The forward pass snapshots
//! the window's carried slots once per segment; the backward pass walks the
//! segments in reverse, restoring each snapshot, re-running the segment
//! with the tape recording, and replaying its adjoints. With segment
//! length S over n steps, peak live state is `S + carry` window slots plus
//! `n/S` snapshots — choose S near sqrt(n) for O(sqrt(n)) total.
//!
//! Step kernels must take the destination slot and the global step as
//! arguments so a segment re-runs identically wherever its window sits.
//! A single segment with S = n degenerates to full storage, which is what
//! the equivalence tests compare against.

use super::{Context, RuntimeError};

#[derive(Debug, Clone)]
pub struct SegmentedConfig<'a> {
    /// Total number of simulation steps `n`.
    pub steps: usize,
    /// Segment length `S`; must divide `n`.
    pub segment: usize,
    /// Trailing state slots each step depends on (1 for first-order
    /// integrators, 2 for e.g. a second-order wave stencil).
    pub carry: usize,
    /// Fields with a leading slot dimension of exactly `segment + carry`
    /// that hold the simulation state.
    pub state_fields: &'a [&'a str],
    /// Per-step scratch fields (accumulators, activations) whose adjoints
    /// must be cleared when a segment is replayed.
    pub scratch_fields: &'a [&'a str],
}

#[derive(Debug, Clone)]
pub struct SegmentedStats {
    /// Loss value from the forward pass.
    pub loss: f64,
    pub segments: usize,
    /// Live state slots in the window: `segment + carry`.
    pub window_slots: usize,
    /// State slots held as host snapshots: `segments * carry`.
    pub snapshot_slots: usize,
}

impl SegmentedStats {
    /// Peak simultaneously live state slots (window plus snapshots).
    pub fn peak_state_slots(&self) -> usize {
        self.window_slots + self.snapshot_slots
    }
}

/// Runs `steps` simulation steps forward with segment-wise snapshots, then
/// backpropagates segment by segment. `step(ctx, slot, t)` must advance the
/// state into window slot `slot` (reading slots `slot-1..slot-carry`) for
/// global step `t`, launching its kernels normally. `loss(ctx, slot)` must
/// evaluate the scalar loss field from the final state in `slot`.
///
/// Adjoints of non-state, non-scratch fields (e.g. controller weights)
/// accumulate across segments as usual. On return, the adjoint of the
/// initial state sits in window slots `0..carry`.
pub fn run_segmented(
    ctx: &mut Context,
    cfg: &SegmentedConfig,
    mut step: impl FnMut(&mut Context, usize, usize) -> Result<(), RuntimeError>,
    mut loss: impl FnMut(&mut Context, usize) -> Result<(), RuntimeError>,
    loss_field: &str,
) -> Result<SegmentedStats, RuntimeError> {
    let (n, s, carry) = (cfg.steps, cfg.segment, cfg.carry);
    if s == 0 || n == 0 || n % s != 0 {
        return Err(RuntimeError::Segmented(format!(
            "segment length {s} must be positive and divide the step count {n}"
        )));
    }
    if carry == 0 {
        return Err(RuntimeError::Segmented("carry must be at least 1".into()));
    }
    for f in cfg.state_fields {
        let decl = ctx
            .program()
            .field(f)
            .ok_or_else(|| RuntimeError::UnknownField(f.to_string()))?;
        let d0 = *decl.shape.first().unwrap_or(&0);
        if d0 != s + carry {
            return Err(RuntimeError::Segmented(format!(
                "state field `{f}` has {d0} slots; segment {s} + carry {carry} requires {}",
                s + carry
            )));
        }
    }
    let nseg = n / s;
    let final_slot = carry + s - 1;

    // Forward: snapshot the carried slots at each segment entry.
    let mut snapshots: Vec<Vec<Vec<u64>>> = Vec::with_capacity(nseg);
    for seg in 0..nseg {
        let mut snap = Vec::with_capacity(cfg.state_fields.len());
        for f in cfg.state_fields {
            let mut slabs = Vec::new();
            for c in 0..carry {
                slabs.extend(ctx.read_slab(f, c)?);
            }
            snap.push(slabs);
        }
        snapshots.push(snap);
        for k in 0..s {
            step(ctx, carry + k, seg * s + k)?;
        }
        if seg + 1 == nseg {
            loss(ctx, final_slot)?;
        } else {
            // carry the trailing states into the leading slots
            for f in cfg.state_fields {
                for c in 0..carry {
                    let bits = ctx.read_slab(f, s + c)?;
                    ctx.write_slab(f, c, &bits)?;
                }
            }
        }
    }
    let loss_value = ctx.read_field(loss_field)?[0];

    // Backward: segments in reverse, each re-run under a fresh tape.
    for seg in (0..nseg).rev() {
        let last = seg + 1 == nseg;
        // Adjoint of this segment's output = adjoint of the next segment's
        // input, which replay of that segment left in the leading slots.
        let incoming: Option<Vec<Vec<Vec<u64>>>> = if last {
            None
        } else {
            let mut per_field = Vec::with_capacity(cfg.state_fields.len());
            for f in cfg.state_fields {
                let mut slabs = Vec::with_capacity(carry);
                for c in 0..carry {
                    slabs.push(ctx.read_adj_slab(f, c)?);
                }
                per_field.push(slabs);
            }
            Some(per_field)
        };
        // restore the segment's entry state
        for (f, slabs) in cfg.state_fields.iter().zip(&snapshots[seg]) {
            let slab_len = ctx.slab_len(f)?;
            for c in 0..carry {
                ctx.write_slab(f, c, &slabs[c * slab_len..(c + 1) * slab_len])?;
            }
        }
        // re-run the segment, recorded
        ctx.clear_tape();
        ctx.start_recording();
        let mut rerun = || -> Result<(), RuntimeError> {
            for k in 0..s {
                step(ctx, carry + k, seg * s + k)?;
            }
            if last {
                loss(ctx, final_slot)?;
            }
            Ok(())
        };
        let r = rerun();
        ctx.stop_recording();
        r?;
        if last {
            ctx.zero_adjoints();
            ctx.fill_adjoint(loss_field, 1.0)?;
        } else {
            for f in cfg.state_fields {
                ctx.zero_adjoint_field(f)?;
            }
            for f in cfg.scratch_fields {
                ctx.zero_adjoint_field(f)?;
            }
            for (f, slabs) in cfg.state_fields.iter().zip(incoming.as_ref().unwrap()) {
                for c in 0..carry {
                    ctx.write_adj_slab(f, s + c, &slabs[c])?;
                }
            }
        }
        ctx.replay_backward()?;
    }
    ctx.clear_tape();

    Ok(SegmentedStats {
        loss: loss_value,
        segments: nseg,
        window_slots: s + carry,
        snapshot_slots: nseg * carry,
    })
}
