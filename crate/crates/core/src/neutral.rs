//! Velocity-preserving perturbations of a trajectory segment: the kernel of
//! the endpoint-velocity response map, its rank diagnostics, first-order
//! collision-time shifts, and a sampling probe for how often a nearly grazing
//! bounce leaves only the flow direction unpinned.
//!
//! A displacement field W on the momentum-zero space is *neutral* for a
//! segment when sliding the initial configuration by epsilon * W changes no
//! velocity anywhere in the segment to first order. The response map sends W
//! to the pair of first-order velocity deltas at the segment endpoints; its
//! kernel is the neutral space, computed here either by exact tangent
//! propagation or by central differences of the nonlinear flow (the two
//! routes stay independent so they can cross-check each other).

use serde::Serialize;

use crate::error::{CoreError, CoreResult};
use crate::flow::{simulate, state_at, ContactEvent, Replay, SimOptions, Stop, Trajectory};
use crate::linalg::{axpy, norm, svd, Mat};
use crate::phase::{
    contact_normal, from_basis, mass_inner, mass_norm, project_pair_relative, to_basis, wrap_all,
    z_basis, PhasePoint, ReducedVector, SystemParams,
};
use crate::sample::near_tangential_state;
use crate::scalar::Scalar;
use crate::tangent::{propagate_collision_z, propagate_collision_z_inverse, CollisionFrame};

/* ---- options and result types ---- */

/// How the endpoint-velocity response map is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NeutralMethod {
    /// Exact derivative maps pushed through every reflection.
    TangentPropagation,
    /// Central differences of the nonlinear flow, collision sequence pinned.
    FiniteDifference,
}

impl NeutralMethod {
    pub fn name(&self) -> &'static str {
        match self {
            NeutralMethod::TangentPropagation => "tangent-propagation",
            NeutralMethod::FiniteDifference => "finite-difference",
        }
    }
}

/// Tolerances and knobs for neutral-space computations.
#[derive(Debug, Clone)]
pub struct NeutralOptions<T> {
    /// Relative rank threshold: singular values below `tol * sigma_max`
    /// count as kernel.
    pub rank_rel_tol: T,
    /// Central-difference steps tried in order until the perturbed runs
    /// keep the reference collision sequence.
    pub fd_steps: Vec<T>,
    /// Largest accepted relative distance of the flow direction from the
    /// computed kernel.
    pub flow_residual_tol: T,
    /// Segment endpoints must keep this distance from collision moments.
    pub endpoint_clearance: T,
    /// Largest relative contact-plane residual `advance` accepts before
    /// declaring the input not neutral.
    pub advance_gate: T,
    /// Flow options for the finite-difference runs.
    pub sim: SimOptions<T>,
}

impl<T: Scalar> Default for NeutralOptions<T> {
    fn default() -> Self {
        NeutralOptions {
            rank_rel_tol: T::lit(1e-6),
            fd_steps: vec![T::lit(1e-5), T::lit(1e-6), T::lit(1e-7)],
            flow_residual_tol: T::lit(1e-8),
            endpoint_clearance: T::lit(1e-9),
            advance_gate: T::lit(1e-3),
            sim: SimOptions::default(),
        }
    }
}

/// Kernel of the endpoint-velocity response map over a segment.
#[derive(Debug, Clone)]
pub struct NeutralSpaceResult<T> {
    /// Mass-orthonormal spanning set of the kernel.
    pub basis: Vec<ReducedVector<T>>,
    /// Kernel dimension at the point threshold; at least 1 (the flow).
    pub dimension: usize,
    /// [min, max] dimension once the ambiguity band is honored; equal
    /// entries unless `ambiguous`.
    pub dimension_range: (usize, usize),
    /// Set when a singular value falls inside the decade around the rank
    /// threshold, making the dimension call unreliable.
    pub ambiguous: bool,
    /// Singular values of the response map, descending.
    pub singular_values: Vec<T>,
    pub method: NeutralMethod,
    /// Relative distance of the flow direction from the computed kernel.
    pub flow_residual: T,
    /// Mid-flight moment the displacement fields are anchored at.
    pub reference_time: T,
}

/// Verdict of `is_sufficient`: does one segment pin the neutral space down
/// to the flow direction alone?
#[derive(Debug, Clone)]
pub struct SufficiencyResult<T> {
    pub sufficient: bool,
    /// Smallest non-kernel singular value over the largest: the room left
    /// before the rank call would flip.
    pub margin: T,
    pub neutral: NeutralSpaceResult<T>,
}

/// First-order collision-time shift of one event under a neutral field.
#[derive(Debug, Clone)]
pub struct AdvanceResult<T> {
    /// Time advance per unit displacement; the flow direction gives 1.
    pub alpha: T,
    /// Relative size of the displacement component that moves the contact
    /// inside the collision plane (zero for exactly neutral fields).
    pub generator_residual: T,
    /// Anchor time actually used.
    pub reference_time: T,
}

/* ---- segment bookkeeping ---- */

/// Mid-flight anchor: the midpoint of the collision-free interval around the
/// segment midpoint, clipped to (a, b).
fn reference_time<T: Scalar>(traj: &Trajectory<T>, a: T, b: T) -> T {
    let tm = (a + b) * T::half();
    let mut lo = a;
    let mut hi = b;
    for r in &traj.records {
        if r.time > a && r.time <= tm && r.time > lo {
            lo = r.time;
        }
        if r.time > tm && r.time < b && r.time < hi {
            hi = r.time;
            break;
        }
    }
    (lo + hi) * T::half()
}

fn check_segment<T: Scalar>(
    traj: &Trajectory<T>,
    a: T,
    b: T,
    opts: &NeutralOptions<T>,
) -> CoreResult<()> {
    if !(a >= T::zero() && a < b && b <= traj.elapsed) {
        return Err(CoreError::InvalidState(format!(
            "segment [{a}, {b}] must sit inside [0, {}]",
            traj.elapsed
        )));
    }
    for r in &traj.records {
        if (r.time - a).abs() < opts.endpoint_clearance
            || (r.time - b).abs() < opts.endpoint_clearance
        {
            return Err(CoreError::InvalidState(format!(
                "segment endpoint coincides with the collision at t = {}",
                r.time
            )));
        }
        if r.time > a && r.time < b && (r.near_tangential || r.near_double) {
            return Err(CoreError::SingularSegment(format!(
                "collision of pair {:?} at t = {} is too close to a grazing or \
                 simultaneous contact for first-order analysis",
                r.pair, r.time
            )));
        }
    }
    Ok(())
}

/// Events of the segment, split at the anchor: `back` ascending in (a, t_ref),
/// `fwd` ascending in (t_ref, b).
struct Legs<'a, T> {
    back: Vec<&'a ContactEvent<T>>,
    fwd: Vec<&'a ContactEvent<T>>,
}

fn split_legs<'a, T: Scalar>(
    events: &'a [ContactEvent<T>],
    a: T,
    b: T,
    t_ref: T,
) -> Legs<'a, T> {
    let mut back = Vec::new();
    let mut fwd = Vec::new();
    for ev in events {
        let t = ev.record.time;
        if t > a && t < t_ref {
            back.push(ev);
        } else if t > t_ref && t < b {
            fwd.push(ev);
        }
    }
    Legs { back, fwd }
}

/* ---- the endpoint-velocity response map ---- */

/// First-order velocity deltas at the segment endpoints for the displacement
/// field (w, 0) anchored at the leg split: exact tangent transport, forward
/// over `fwd` and inverse over `back`. Flight legs never touch the velocity
/// slot, so the trailing drifts to a and b are omitted.
fn endpoint_deltas_tangent<T: Scalar>(
    params: &SystemParams<T>,
    legs: &Legs<'_, T>,
    t_ref: T,
    w: &[T],
) -> CoreResult<(Vec<T>, Vec<T>)> {
    let d = params.compound_dim();

    let mut dq = w.to_vec();
    let mut dv = vec![T::zero(); d];
    let mut t = t_ref;
    for ev in &legs.fwd {
        axpy(&mut dq, ev.record.time - t, &dv);
        let (q2, v2) = propagate_collision_z(params, &CollisionFrame::forward(ev), &dq, &dv)?;
        dq = q2;
        dv = v2;
        t = ev.record.time;
    }
    let dv_b = dv;

    let mut dq = w.to_vec();
    let mut dv = vec![T::zero(); d];
    let mut t = t_ref;
    for ev in legs.back.iter().rev() {
        // negative dt: drifting backward is the exact inverse of drifting
        // forward
        axpy(&mut dq, ev.record.time - t, &dv);
        let (q2, v2) =
            propagate_collision_z_inverse(params, &CollisionFrame::forward(ev), &dq, &dv)?;
        dq = q2;
        dv = v2;
        t = ev.record.time;
    }
    let dv_a = dv;

    Ok((dv_a, dv_b))
}

/// Same deltas by central differences of the nonlinear flow, never touching
/// the derivative maps: both offset states must reproduce the reference
/// collision sequence on each leg, otherwise the next smaller step is tried.
#[allow(clippy::too_many_arguments)]
fn endpoint_deltas_fd<T: Scalar>(
    params: &SystemParams<T>,
    x_ref: &PhasePoint<T>,
    a: T,
    b: T,
    t_ref: T,
    fwd_pairs: &[(usize, usize)],
    bwd_pairs: &[(usize, usize)],
    w: &[T],
    opts: &NeutralOptions<T>,
) -> CoreResult<(Vec<T>, Vec<T>)> {
    let mut fd_opts = opts.sim.clone();
    fd_opts.require_normalized = false;

    'step: for &h in &opts.fd_steps {
        let mut va = [Vec::new(), Vec::new()];
        let mut vb = [Vec::new(), Vec::new()];
        for (slot, sgn) in [(0usize, T::one()), (1usize, -T::one())] {
            let mut q = x_ref.q.clone();
            axpy(&mut q, sgn * h, w);
            wrap_all(&mut q);
            let st = PhasePoint::new(q, x_ref.v.clone());

            let fw = match simulate(params, &st, &Stop::time(b - t_ref), &fd_opts) {
                Ok(tr) => tr,
                Err(_) => continue 'step,
            };
            if fw.sequence() != fwd_pairs {
                continue 'step;
            }
            vb[slot] = fw.final_state.v;

            let bw = match simulate(params, &st.reversed(), &Stop::time(t_ref - a), &fd_opts) {
                Ok(tr) => tr,
                Err(_) => continue 'step,
            };
            if bw.sequence() != bwd_pairs {
                continue 'step;
            }
            va[slot] = bw.final_state.reversed().v;
        }
        let scale = (T::two() * h).recip();
        let diff = |p: &[T], m: &[T]| -> Vec<T> {
            p.iter().zip(m).map(|(&x, &y)| (x - y) * scale).collect()
        };
        return Ok((diff(&va[0], &va[1]), diff(&vb[0], &vb[1])));
    }
    Err(CoreError::FdUnstable(format!(
        "no difference step in {:?} kept the reference collision sequence",
        opts.fd_steps.iter().map(|s| s.as_f64()).collect::<Vec<_>>()
    )))
}

/* ---- kernel extraction ---- */

struct KernelCall<T> {
    basis: Vec<ReducedVector<T>>,
    coords: Vec<Vec<T>>,
    dimension: usize,
    dimension_range: (usize, usize),
    ambiguous: bool,
    singular_values: Vec<T>,
}

/// Rank-revealing split of the stacked response matrix (rows: endpoint-delta
/// coordinates, columns: displacement basis).
fn kernel_call<T: Scalar>(
    zb: &[Vec<T>],
    response: &Mat<T>,
    rank_rel_tol: T,
) -> CoreResult<KernelCall<T>> {
    let dz = response.cols();
    let fac = svd(response)?;
    let sigma_max = fac.sigma.first().copied().unwrap_or_else(T::zero);

    let (dimension, dimension_range, ambiguous) = if sigma_max <= T::zero() {
        // no collision moves any velocity: everything is neutral
        (dz, (dz, dz), false)
    } else {
        let thresh = rank_rel_tol * sigma_max;
        let count = |cut: T| fac.sigma.iter().filter(|&&s| s <= cut).count();
        let dim = count(thresh);
        let dim_max = count(thresh * T::lit(10.0));
        let dim_min = count(thresh * T::lit(0.1));
        (dim, (dim_min, dim_max), dim_min != dim_max)
    };

    let mut basis = Vec::with_capacity(dimension);
    let mut coords = Vec::with_capacity(dimension);
    for c in (dz - dimension)..dz {
        let col = fac.v.col(c);
        basis.push(ReducedVector::from_trusted(from_basis(zb, &col)));
        coords.push(col);
    }
    Ok(KernelCall {
        basis,
        coords,
        dimension,
        dimension_range,
        ambiguous,
        singular_values: fac.sigma,
    })
}

/* ---- public operations ---- */

/// Neutral space of the segment [a, b]: all momentum-zero displacement
/// fields whose first-order effect on every velocity in the segment is nil,
/// summarized by the endpoint deltas (collisions outside [a, b] cannot
/// un-change a velocity that both endpoints agree on).
pub fn neutral_space<T: Scalar>(
    params: &SystemParams<T>,
    traj: &Trajectory<T>,
    a: T,
    b: T,
    method: NeutralMethod,
    opts: &NeutralOptions<T>,
) -> CoreResult<NeutralSpaceResult<T>> {
    check_segment(traj, a, b, opts)?;
    let events: Vec<ContactEvent<T>> = Replay::new(params, traj).collect::<CoreResult<_>>()?;
    let t_ref = reference_time(traj, a, b);
    let legs = split_legs(&events, a, b, t_ref);
    let zb = z_basis(params);
    let dz = zb.len();

    // stack the two endpoint deltas, in mass-orthonormal coordinates, as the
    // column for each displacement-basis field
    let mut columns: Vec<Vec<T>> = Vec::with_capacity(dz);
    match method {
        NeutralMethod::TangentPropagation => {
            for w in &zb {
                let (dva, dvb) = endpoint_deltas_tangent(params, &legs, t_ref, w)?;
                let mut col = to_basis(params, &zb, &dva);
                col.extend(to_basis(params, &zb, &dvb));
                columns.push(col);
            }
        }
        NeutralMethod::FiniteDifference => {
            let x_ref = state_at(params, traj, t_ref)?;
            let fwd_pairs: Vec<_> = legs.fwd.iter().map(|e| e.record.pair).collect();
            let bwd_pairs: Vec<_> = legs.back.iter().rev().map(|e| e.record.pair).collect();
            for w in &zb {
                let (dva, dvb) = endpoint_deltas_fd(
                    params, &x_ref, a, b, t_ref, &fwd_pairs, &bwd_pairs, w, opts,
                )?;
                let mut col = to_basis(params, &zb, &dva);
                col.extend(to_basis(params, &zb, &dvb));
                columns.push(col);
            }
        }
    }
    let response = Mat::from_cols(&columns);
    let call = kernel_call(&zb, &response, opts.rank_rel_tol)?;

    // the flow direction must lie in the kernel: sliding along the orbit
    // changes no velocity
    let v_ref = state_at(params, traj, t_ref)?.v;
    let vc = to_basis(params, &zb, &v_ref);
    let vn = norm(&vc);
    let mut rem = vc.clone();
    for k in &call.coords {
        let c = rem.iter().zip(k).map(|(&x, &y)| x * y).sum::<T>();
        axpy(&mut rem, -c, k);
    }
    let flow_residual = norm(&rem) / vn;
    if flow_residual > opts.flow_residual_tol {
        return Err(CoreError::Consistency(format!(
            "flow direction escapes the neutral space: relative residual \
             {flow_residual} over segment [{a}, {b}]"
        )));
    }

    Ok(NeutralSpaceResult {
        basis: call.basis,
        dimension: call.dimension,
        dimension_range: call.dimension_range,
        ambiguous: call.ambiguous,
        singular_values: call.singular_values,
        method,
        flow_residual,
        reference_time: t_ref,
    })
}

/// Whether the segment pins its neutral space down to the flow direction
/// alone (dimension exactly 1, rank call unambiguous), and by what margin.
pub fn is_sufficient<T: Scalar>(
    params: &SystemParams<T>,
    traj: &Trajectory<T>,
    a: T,
    b: T,
    opts: &NeutralOptions<T>,
) -> CoreResult<SufficiencyResult<T>> {
    let neutral = neutral_space(params, traj, a, b, NeutralMethod::TangentPropagation, opts)?;
    let sv = &neutral.singular_values;
    let margin = if sv.len() >= 2 && sv[0] > T::zero() {
        sv[sv.len() - 2] / sv[0]
    } else {
        T::zero()
    };
    Ok(SufficiencyResult {
        sufficient: neutral.dimension == 1 && !neutral.ambiguous,
        margin,
        neutral,
    })
}

/// First-order time shift of collision k under the displacement field (w, 0)
/// anchored at `t` (default: the segment's mid-flight anchor): the amount the
/// contact moment advances per unit of the field, positive when the collision
/// happens earlier. The flow direction yields exactly 1.
///
/// The field must be neutral through collision k: its propagated
/// configuration delta, minus the time shift times the incoming velocity,
/// may not move the contact inside the collision plane. The relative size of
/// that forbidden component is returned and gated.
pub fn advance<T: Scalar>(
    params: &SystemParams<T>,
    traj: &Trajectory<T>,
    k: usize,
    w: &ReducedVector<T>,
    t: Option<T>,
    opts: &NeutralOptions<T>,
) -> CoreResult<AdvanceResult<T>> {
    let events: Vec<ContactEvent<T>> = Replay::new(params, traj).collect::<CoreResult<_>>()?;
    if k >= events.len() {
        return Err(CoreError::InvalidState(format!(
            "collision index {k} out of range: segment has {} events",
            events.len()
        )));
    }
    let t_ref = t.unwrap_or_else(|| reference_time(traj, T::zero(), traj.elapsed));
    for r in &traj.records {
        if (r.time - t_ref).abs() < opts.endpoint_clearance {
            return Err(CoreError::InvalidState(format!(
                "anchor time {t_ref} coincides with the collision at t = {}",
                r.time
            )));
        }
    }

    let t_k = events[k].record.time;
    let d = params.compound_dim();
    let mut dq = w.components().to_vec();
    let mut dv = vec![T::zero(); d];
    let mut t_cur = t_ref;
    if t_ref < t_k {
        // forward through the events strictly before collision k, then drift
        // onto its pre side
        for ev in &events {
            let te = ev.record.time;
            if te <= t_ref || te >= t_k {
                continue;
            }
            axpy(&mut dq, te - t_cur, &dv);
            let (q2, v2) = propagate_collision_z(params, &CollisionFrame::forward(ev), &dq, &dv)?;
            dq = q2;
            dv = v2;
            t_cur = te;
        }
        axpy(&mut dq, t_k - t_cur, &dv);
    } else {
        // backward through the events strictly after collision k, then undo
        // collision k itself to land on its pre side
        for ev in events.iter().rev() {
            let te = ev.record.time;
            if te >= t_ref || te <= t_k {
                continue;
            }
            axpy(&mut dq, te - t_cur, &dv);
            let (q2, v2) =
                propagate_collision_z_inverse(params, &CollisionFrame::forward(ev), &dq, &dv)?;
            dq = q2;
            dv = v2;
            t_cur = te;
        }
        axpy(&mut dq, t_k - t_cur, &dv);
        let (q2, _) = propagate_collision_z_inverse(
            params,
            &CollisionFrame::forward(&events[k]),
            &dq,
            &dv,
        )?;
        dq = q2;
    }

    let rec = &events[k].record;
    let (i, j) = rec.pair;
    let n_c = contact_normal(params, &rec.normal, i, j);
    let v_pre = &events[k].pre.v;
    let alpha = mass_inner(params, &n_c, &dq) / mass_inner(params, &n_c, v_pre);

    // contact-plane residual: a neutral field shifts the contact along the
    // orbit only, leaving nothing in the pair-relative directions
    let mut shifted = dq.clone();
    axpy(&mut shifted, -alpha, v_pre);
    let residual = mass_norm(params, &project_pair_relative(params, &shifted, i, j))
        / mass_norm(params, w.components());
    if residual > opts.advance_gate {
        return Err(CoreError::NotNeutral(format!(
            "displacement field moves the contact of pair ({i}, {j}) inside \
             the collision plane: relative residual {residual}"
        )));
    }

    Ok(AdvanceResult { alpha, generator_residual: residual, reference_time: t_ref })
}

/* ---- sufficiency probe over random grazing states ---- */

/// Knobs for `ansatz_probe`.
#[derive(Debug, Clone)]
pub struct ProbeOptions<T> {
    /// Approach-cosine window for the planted grazing bounce (log-uniform).
    pub cos_lo: T,
    pub cos_hi: T,
    /// Number of nested horizons tried per sample (halving down from the
    /// full horizon).
    pub ladder_rungs: u32,
    pub neutral: NeutralOptions<T>,
}

impl<T: Scalar> Default for ProbeOptions<T> {
    fn default() -> Self {
        ProbeOptions {
            cos_lo: T::lit(1e-4),
            cos_hi: T::lit(1e-2),
            ladder_rungs: 4,
            neutral: NeutralOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ProbeVerdict {
    /// Some rung pinned the neutral space to the flow direction.
    Sufficient,
    /// Every rung left extra neutral directions.
    Insufficient,
    /// The deepest rung could not call the rank reliably.
    Ambiguous,
    /// Sampling or analysis failed; see the message.
    Failed,
}

/// One probed grazing state.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeSample<T> {
    pub index: u64,
    /// Radial relative speed of the planted bounce.
    pub tangency_margin: T,
    /// Planted approach cosine.
    pub cos_phi: T,
    /// Upper segment ends tried, ascending.
    pub horizons: Vec<T>,
    /// Neutral dimension at each rung.
    pub dimensions: Vec<usize>,
    /// Rank margin at each rung.
    pub margins: Vec<T>,
    pub verdict: ProbeVerdict,
    pub message: Option<String>,
}

/// Aggregate outcome of a probe run.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport<T> {
    pub seed: u64,
    pub horizon: T,
    pub sample_count: u64,
    pub sufficient: usize,
    pub insufficient: usize,
    pub ambiguous: usize,
    pub failed: usize,
    /// Sufficient samples over all samples.
    pub sufficient_fraction: f64,
    /// Final rank margin of every sample that produced one.
    pub final_margins: Vec<T>,
    pub samples: Vec<ProbeSample<T>>,
}

/// Samples states just after a nearly grazing bounce and asks, for a ladder
/// of nested horizons, whether the following collisions pin the neutral
/// space to the flow direction. Deterministic per (seed, index): each sample
/// draws from its own generator stream.
pub fn ansatz_probe<T: Scalar>(
    params: &SystemParams<T>,
    sample_count: u64,
    horizon: T,
    seed: u64,
    opts: &ProbeOptions<T>,
) -> CoreResult<ProbeReport<T>> {
    if horizon <= T::zero() {
        return Err(CoreError::InvalidState("probe horizon must be positive".into()));
    }
    if opts.ladder_rungs == 0 {
        return Err(CoreError::InvalidState("probe needs at least one rung".into()));
    }

    let mut samples = Vec::with_capacity(sample_count as usize);
    for index in 0..sample_count {
        samples.push(probe_one(params, index, horizon, seed, opts));
    }

    let count_of = |v: ProbeVerdict| samples.iter().filter(|s| s.verdict == v).count();
    let sufficient = count_of(ProbeVerdict::Sufficient);
    let final_margins = samples
        .iter()
        .filter(|s| !s.margins.is_empty())
        .map(|s| *s.margins.last().expect("nonempty"))
        .collect();
    Ok(ProbeReport {
        seed,
        horizon,
        sample_count,
        sufficient,
        insufficient: count_of(ProbeVerdict::Insufficient),
        ambiguous: count_of(ProbeVerdict::Ambiguous),
        failed: count_of(ProbeVerdict::Failed),
        sufficient_fraction: if sample_count == 0 {
            0.0
        } else {
            sufficient as f64 / sample_count as f64
        },
        final_margins,
        samples,
    })
}

fn probe_one<T: Scalar>(
    params: &SystemParams<T>,
    index: u64,
    horizon: T,
    seed: u64,
    opts: &ProbeOptions<T>,
) -> ProbeSample<T> {
    let fail = |margin: T, cos: T, msg: String| ProbeSample {
        index,
        tangency_margin: margin,
        cos_phi: cos,
        horizons: Vec::new(),
        dimensions: Vec::new(),
        margins: Vec::new(),
        verdict: ProbeVerdict::Failed,
        message: Some(msg),
    };

    let mut rng = crate::sample::stream_rng(seed, index);
    let graze = match near_tangential_state(params, &mut rng, opts.cos_lo, opts.cos_hi) {
        Ok(g) => g,
        Err(e) => return fail(T::zero(), T::zero(), format!("sampling: {e}")),
    };
    let margin0 = graze.record.tangency_margin;
    let cos0 = graze.cos_phi;

    let traj = match simulate(params, &graze.state, &Stop::time(horizon), &opts.neutral.sim) {
        Ok(tr) => tr,
        Err(e) => return fail(margin0, cos0, format!("flow: {e}")),
    };

    // segment start: halfway to the first collision after the planted bounce
    let a = match traj.records.first() {
        Some(r) => r.time * T::half(),
        None => horizon * T::lit(0.25),
    };

    let mut sample = ProbeSample {
        index,
        tangency_margin: margin0,
        cos_phi: cos0,
        horizons: Vec::new(),
        dimensions: Vec::new(),
        margins: Vec::new(),
        verdict: ProbeVerdict::Insufficient,
        message: None,
    };

    for rung in 0..opts.ladder_rungs {
        let shift = opts.ladder_rungs - 1 - rung;
        let target = horizon / T::lit((1u64 << shift) as f64);
        // land mid-flight near the target so the endpoint is collision-free
        let mut lo = a;
        let mut hi = horizon;
        for r in &traj.records {
            if r.time > a && r.time <= target && r.time > lo {
                lo = r.time;
            }
            if r.time > target && r.time < horizon && r.time < hi {
                hi = r.time;
                break;
            }
        }
        let b = (lo + hi) * T::half();
        if b <= a + T::lit(1e-9) || sample.horizons.last().is_some_and(|&p| b <= p + T::lit(1e-9))
        {
            continue;
        }

        match is_sufficient(params, &traj, a, b, &opts.neutral) {
            Ok(res) => {
                sample.horizons.push(b);
                sample.dimensions.push(res.neutral.dimension);
                sample.margins.push(res.margin);
                if res.sufficient {
                    sample.verdict = ProbeVerdict::Sufficient;
                    return sample;
                }
                if res.neutral.ambiguous {
                    sample.verdict = ProbeVerdict::Ambiguous;
                } else {
                    sample.verdict = ProbeVerdict::Insufficient;
                }
            }
            Err(e) => {
                sample.verdict = ProbeVerdict::Failed;
                sample.message = Some(format!("rung {rung}: {e}"));
                return sample;
            }
        }
    }
    sample
}

/* ---- tests ---- */

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::principal_angles;
    use crate::phase::{make_system, normalize_state};

    /// Two equal balls on a head-on course; first collision near t = 0.212.
    fn head_on() -> (SystemParams<f64>, PhasePoint<f64>) {
        let params = make_system(2, 2, &[1.0, 1.0], 0.05).unwrap();
        let s = 0.5f64.sqrt();
        let state = PhasePoint::new(vec![0.2, 0.5, 0.6, 0.5], vec![s, 0.0, -s, 0.0]);
        (params, state)
    }

    /// Balls 0 and 1 trade bounces on the x axis while ball 2 sits far away
    /// and never takes part.
    fn idle_third() -> (SystemParams<f64>, PhasePoint<f64>) {
        let params = make_system(3, 2, &[1.0, 1.0, 1.0], 0.05).unwrap();
        let q = vec![0.20, 0.30, 0.60, 0.30, 0.50, 0.80];
        let v_raw = vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0];
        let state = normalize_state(&q, &v_raw, &params).unwrap();
        (params, state)
    }

    fn run(
        params: &SystemParams<f64>,
        state: &PhasePoint<f64>,
        t: f64,
    ) -> Trajectory<f64> {
        simulate(params, state, &Stop::time(t), &SimOptions::default()).unwrap()
    }

    #[test]
    fn free_flight_leaves_everything_neutral() {
        let (params, state) = head_on();
        let traj = run(&params, &state, 0.15); // first collision is later
        assert!(traj.records.is_empty());
        let res = neutral_space(
            &params,
            &traj,
            0.02,
            0.12,
            NeutralMethod::TangentPropagation,
            &NeutralOptions::default(),
        )
        .unwrap();
        assert_eq!(res.dimension, 2); // nu * (N - 1)
        assert!(!res.ambiguous);
        assert!(res.singular_values.iter().all(|s| *s == 0.0));
        assert_eq!(res.basis.len(), 2);
        let suff = is_sufficient(&params, &traj, 0.02, 0.12, &NeutralOptions::default()).unwrap();
        assert!(!suff.sufficient);
    }

    #[test]
    fn one_bounce_of_two_balls_pins_the_flow() {
        let (params, state) = head_on();
        let traj = run(&params, &state, 0.4); // one collision inside
        assert_eq!(traj.records.len(), 1);
        let opts = NeutralOptions::default();
        let res =
            neutral_space(&params, &traj, 0.05, 0.35, NeutralMethod::TangentPropagation, &opts)
                .unwrap();
        assert_eq!(res.dimension, 1);
        assert!(!res.ambiguous);
        assert!(res.flow_residual < 1e-10);

        // the surviving direction is the flow itself
        let v_ref = state_at(&params, &traj, res.reference_time).unwrap().v;
        let vn = mass_norm(&params, &v_ref);
        let overlap = mass_inner(&params, res.basis[0].components(), &v_ref).abs() / vn;
        assert!((overlap - 1.0).abs() < 1e-10);

        let suff = is_sufficient(&params, &traj, 0.05, 0.35, &opts).unwrap();
        assert!(suff.sufficient);
        assert!(suff.margin > 1e-3, "margin {}", suff.margin);
    }

    #[test]
    fn idle_ball_keeps_joint_translations_neutral() {
        let (params, state) = idle_third();
        let traj = run(&params, &state, 0.6);
        assert!(!traj.records.is_empty());
        let opts = NeutralOptions::default();
        let res =
            neutral_space(&params, &traj, 0.05, 0.55, NeutralMethod::TangentPropagation, &opts)
                .unwrap();
        // joint pair translations with compensating idle-ball motion (2) plus
        // the shared line of motion (1)
        assert_eq!(res.dimension, 3);

        // both axis-aligned joint translations must lie in the kernel span
        for axis in 0..2 {
            let mut w = vec![0.0; 6];
            w[axis] = 1.0;
            w[2 + axis] = 1.0;
            w[4 + axis] = -2.0;
            let wn = mass_norm(&params, &w);
            let mut rem = w.clone();
            for b in &res.basis {
                let c = mass_inner(&params, &rem, b.components());
                axpy(&mut rem, -c, b.components());
            }
            assert!(
                mass_norm(&params, &rem) / wn < 1e-8,
                "joint translation along axis {axis} escapes the kernel"
            );
        }

        let suff = is_sufficient(&params, &traj, 0.05, 0.55, &opts).unwrap();
        assert!(!suff.sufficient);
    }

    #[test]
    fn extending_the_segment_never_grows_the_kernel() {
        let (params, state) = idle_third();
        let traj = run(&params, &state, 2.0);
        assert!(traj.records.len() >= 2, "fixture needs two bounces");
        let opts = NeutralOptions::default();
        let a = traj.records[0].time * 0.5;
        let mids: Vec<f64> = (0..traj.records.len())
            .map(|k| {
                let hi = traj.records.get(k + 1).map_or(2.0, |r| r.time);
                (traj.records[k].time + hi) * 0.5
            })
            .collect();
        let mut last = usize::MAX;
        for &b in &mids {
            let res =
                neutral_space(&params, &traj, a, b, NeutralMethod::TangentPropagation, &opts)
                    .unwrap();
            assert!(res.dimension <= last, "kernel grew from {last} to {}", res.dimension);
            last = res.dimension;
        }
    }

    #[test]
    fn difference_route_agrees_with_tangent_route() {
        let (params, state) = head_on();
        let traj = run(&params, &state, 0.4);
        let opts = NeutralOptions::default();
        let tan =
            neutral_space(&params, &traj, 0.05, 0.35, NeutralMethod::TangentPropagation, &opts)
                .unwrap();
        let fd =
            neutral_space(&params, &traj, 0.05, 0.35, NeutralMethod::FiniteDifference, &opts)
                .unwrap();
        assert_eq!(fd.method.name(), "finite-difference");
        assert_eq!(tan.dimension, fd.dimension);

        let inner = |a: &[f64], b: &[f64]| mass_inner(&params, a, b);
        let ta: Vec<Vec<f64>> = tan.basis.iter().map(|b| b.components().to_vec()).collect();
        let fa: Vec<Vec<f64>> = fd.basis.iter().map(|b| b.components().to_vec()).collect();
        let angles = principal_angles(&ta, &fa, &inner).unwrap();
        assert!(angles.iter().all(|a| a.abs() < 1e-4), "angles {angles:?}");
    }

    #[test]
    fn flow_direction_advances_every_collision_by_one() {
        let (params, state) = idle_third();
        let traj = run(&params, &state, 2.0);
        assert!(traj.records.len() >= 2);
        let opts = NeutralOptions::default();
        let t_ref = reference_time(&traj, 0.0, traj.elapsed);
        let v_ref = state_at(&params, &traj, t_ref).unwrap().v;
        let w = ReducedVector::project(&params, &v_ref);
        for k in 0..traj.records.len() {
            let adv = advance(&params, &traj, k, &w, None, &opts).unwrap();
            assert!((adv.alpha - 1.0).abs() < 1e-9, "collision {k}: alpha {}", adv.alpha);
            assert!(adv.generator_residual < 1e-9);
        }
        // linear in the field
        let w2 = ReducedVector::project(
            &params,
            &v_ref.iter().map(|x| 2.0 * x).collect::<Vec<_>>(),
        );
        let adv2 = advance(&params, &traj, 0, &w2, None, &opts).unwrap();
        assert!((adv2.alpha - 2.0).abs() < 1e-9);
    }

    #[test]
    fn joint_translation_advances_nothing() {
        let (params, state) = idle_third();
        let traj = run(&params, &state, 0.6);
        let opts = NeutralOptions::default();
        let w = ReducedVector::project(&params, &[0.0, 1.0, 0.0, 1.0, 0.0, -2.0]);
        let adv = advance(&params, &traj, 0, &w, None, &opts).unwrap();
        assert!(adv.alpha.abs() < 1e-12);
        assert!(adv.generator_residual < 1e-12);
    }

    #[test]
    fn advance_rejects_plane_moving_fields_and_bad_indices() {
        let (params, state) = idle_third();
        let traj = run(&params, &state, 0.6);
        let opts = NeutralOptions::default();
        // pure impact-parameter shift: rotates the contact normal
        let w = ReducedVector::project(&params, &[0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        let err = advance(&params, &traj, 0, &w, None, &opts);
        assert!(matches!(err, Err(CoreError::NotNeutral(_))), "got {err:?}");
        let err = advance(&params, &traj, 99, &w, None, &opts);
        assert!(matches!(err, Err(CoreError::InvalidState(_))));
    }

    #[test]
    fn endpoints_may_not_sit_on_collisions() {
        let (params, state) = head_on();
        let traj = run(&params, &state, 0.4);
        let t1 = traj.records[0].time;
        let err = neutral_space(
            &params,
            &traj,
            0.05,
            t1,
            NeutralMethod::TangentPropagation,
            &NeutralOptions::default(),
        );
        assert!(matches!(err, Err(CoreError::InvalidState(_))));
    }

    #[test]
    fn probe_is_deterministic_and_counts_add_up() {
        let params = make_system(2, 2, &[1.0, 1.0], 0.05).unwrap();
        let mut opts = ProbeOptions::default();
        opts.cos_lo = 1e-3;
        opts.cos_hi = 1e-2;
        let a = ansatz_probe(&params, 4, 3.0, 123, &opts).unwrap();
        let b = ansatz_probe(&params, 4, 3.0, 123, &opts).unwrap();
        assert_eq!(
            serde_json::to_string(&a.samples).unwrap(),
            serde_json::to_string(&b.samples).unwrap()
        );
        assert_eq!(a.sufficient + a.insufficient + a.ambiguous + a.failed, 4);
        for s in &a.samples {
            if s.verdict != ProbeVerdict::Failed {
                assert!(!s.dimensions.is_empty());
                assert!(s.cos_phi >= 1e-3 * 0.999 && s.cos_phi <= 1e-2 * 1.001);
            }
        }
        let empty = ansatz_probe(&params, 0, 3.0, 123, &opts).unwrap();
        assert_eq!(empty.samples.len(), 0);
        assert_eq!(empty.sufficient_fraction, 0.0);
    }
}
