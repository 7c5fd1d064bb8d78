//! Derivative of the collision flow: exact tangent maps for free flight and
//! reflection, the alignment form Q = <dq, dv>_M that certifies expansion,
//! curvature-front pullbacks bracketing the stable subspace, and the search
//! for explicitly contracting tangent vectors.
//!
//! Tangent vectors live on the section of the unit-energy shell: both the
//! configuration part `dq` and the velocity part `dv` have zero total
//! momentum and are M-orthogonal to the base velocity. Both propagation maps
//! preserve that section exactly in real arithmetic; collisions re-project
//! and record the discarded residual instead of letting rounding accumulate.

use serde::Serialize;

use crate::error::{CoreError, CoreResult};
use crate::flow::{self, CollisionRecord, ContactEvent, Replay, SimOptions, Stop, Trajectory};
use crate::linalg::{axpy, lu_solve, norm, sub_vec, sym_eigen, sym_min_eigenvalue, sym_operator_norm, Mat};
use crate::phase::{
    contact_normal, from_basis, mass_inner, mass_norm, min_image_delta, project_momentum_zero,
    project_pair_relative, reflect, section_basis, wrap_all, PhasePoint, ReducedVector,
    SystemParams,
};
use crate::scalar::Scalar;

/* ---- tangent vectors on the section ---- */

/// Tangent vector (dq, dv) at a phase point, restricted to the section:
/// zero momentum and M-orthogonal to the base velocity in both slots.
#[derive(Debug, Clone)]
pub struct TangentVector<T> {
    pub dq: ReducedVector<T>,
    pub dv: ReducedVector<T>,
}

impl<T: Scalar> TangentVector<T> {
    /// Projects raw compound vectors onto the section at base velocity `v`.
    pub fn project(params: &SystemParams<T>, v: &[T], dq_raw: &[T], dv_raw: &[T]) -> Self {
        let (dq, _) = section_split(params, v, dq_raw);
        let (dv, _) = section_split(params, v, dv_raw);
        TangentVector {
            dq: ReducedVector::from_trusted(dq),
            dv: ReducedVector::from_trusted(dv),
        }
    }

    /// Accepts raw components, failing unless they already lie on the section.
    pub fn try_new(
        params: &SystemParams<T>,
        v: &[T],
        dq_raw: Vec<T>,
        dv_raw: Vec<T>,
    ) -> CoreResult<Self> {
        let tol = T::lit(1e-9);
        let vn = mass_norm(params, v);
        for (label, x) in [("dq", &dq_raw), ("dv", &dv_raw)] {
            let scale = mass_norm(params, x) * vn;
            let along = mass_inner(params, x, v).abs();
            if along > tol * scale.max(T::one()) {
                return Err(CoreError::InvalidState(format!(
                    "{label} is not transversal: <x, v>_M = {along}"
                )));
            }
        }
        let dq = ReducedVector::try_new(params, dq_raw)?;
        let dv = ReducedVector::try_new(params, dv_raw)?;
        Ok(TangentVector { dq, dv })
    }

    /// Alignment form Q = <dq, dv>_M.
    pub fn q(&self, params: &SystemParams<T>) -> T {
        mass_inner(params, self.dq.components(), self.dv.components())
    }

    pub fn dq_norm(&self, params: &SystemParams<T>) -> T {
        mass_norm(params, self.dq.components())
    }

    pub fn dv_norm(&self, params: &SystemParams<T>) -> T {
        mass_norm(params, self.dv.components())
    }

    /// Full phase norm sqrt(||dq||^2 + ||dv||^2) in the mass metric.
    pub fn phase_norm(&self, params: &SystemParams<T>) -> T {
        self.dq_norm(params).hypot(self.dv_norm(params))
    }

    pub fn scaled(&self, s: T) -> Self {
        let dq = self.dq.components().iter().map(|&x| x * s).collect();
        let dv = self.dv.components().iter().map(|&x| x * s).collect();
        TangentVector {
            dq: ReducedVector::from_trusted(dq),
            dv: ReducedVector::from_trusted(dv),
        }
    }

    /// Image under the velocity-reversal involution: (dq, dv) -> (dq, -dv).
    pub fn time_reversed(&self) -> Self {
        let dv = self.dv.components().iter().map(|&x| -x).collect();
        TangentVector {
            dq: ReducedVector::from_trusted(self.dq.components().to_vec()),
            dv: ReducedVector::from_trusted(dv),
        }
    }
}

/// Removes the momentum and flow-direction components; returns the cleaned
/// vector and the norm of what was removed.
fn section_split<T: Scalar>(params: &SystemParams<T>, v: &[T], x: &[T]) -> (Vec<T>, T) {
    let mut y = project_momentum_zero(params, x);
    let vz = project_momentum_zero(params, v);
    let nv2 = mass_inner(params, &vz, &vz);
    if nv2 > T::zero() {
        let coeff = mass_inner(params, &y, &vz) / nv2;
        axpy(&mut y, -coeff, &vz);
    }
    let removed = sub_vec(x, &y);
    let r = mass_norm(params, &removed);
    (y, r)
}

/* ---- free flight ---- */

/// Derivative of free flight: dq advances by dt * dv, dv is constant.
pub fn propagate_free<T: Scalar>(tv: &TangentVector<T>, dt: T) -> TangentVector<T> {
    let mut dq = tv.dq.components().to_vec();
    axpy(&mut dq, dt, tv.dv.components());
    TangentVector {
        dq: ReducedVector::from_trusted(dq),
        dv: tv.dv.clone(),
    }
}

/// Exact increment of Q across a flight of length dt: dt * ||dv||^2.
pub fn flight_q_increment<T: Scalar>(params: &SystemParams<T>, tv: &TangentVector<T>, dt: T) -> T {
    let n = tv.dv_norm(params);
    dt * n * n
}

/* ---- collision frames ---- */

/// Geometry of one reflection as seen by the tangent map: which pair
/// touched, the contact direction, and the incoming compound velocity.
#[derive(Debug, Clone)]
pub struct CollisionFrame<T> {
    pub pair: (usize, usize),
    /// Euclidean unit vector along q_i - q_j at contact.
    pub normal: Vec<T>,
    /// Compound velocity approaching the contact.
    pub v_pre: Vec<T>,
}

impl<T: Scalar> CollisionFrame<T> {
    /// Frame of a replayed collision in forward time.
    pub fn forward(ev: &ContactEvent<T>) -> Self {
        CollisionFrame {
            pair: ev.record.pair,
            normal: ev.record.normal.clone(),
            v_pre: ev.pre.v.clone(),
        }
    }

    /// Frame of the same contact crossed by the time-reversed trajectory:
    /// identical geometry, incoming velocity = -(forward outgoing velocity).
    pub fn reversed(ev: &ContactEvent<T>) -> Self {
        CollisionFrame {
            pair: ev.record.pair,
            normal: ev.record.normal.clone(),
            v_pre: ev.post.v.iter().map(|&x| -x).collect(),
        }
    }
}

/// Shared factors of the reflection derivative at one contact.
struct CollisionOps<'a, T> {
    params: &'a SystemParams<T>,
    pair: (usize, usize),
    /// Compound contact normal, unit in the mass metric.
    n_c: Vec<T>,
    v_pre: Vec<T>,
    /// <v_pre, n_c>_M, strictly negative for an approaching contact.
    denom: T,
    /// c = -denom > 0; equals cos(phi) times the compound speed.
    c: T,
    inv_pair_radius: T,
}

impl<'a, T: Scalar> CollisionOps<'a, T> {
    fn new(params: &'a SystemParams<T>, frame: &CollisionFrame<T>) -> CoreResult<Self> {
        let (i, j) = frame.pair;
        let n_c = contact_normal(params, &frame.normal, i, j);
        let denom = mass_inner(params, &frame.v_pre, &n_c);
        if denom >= T::zero() {
            return Err(CoreError::ContractViolation(format!(
                "pair ({i},{j}) not approaching: <v, n>_M = {denom}"
            )));
        }
        Ok(CollisionOps {
            params,
            pair: (i, j),
            n_c,
            v_pre: frame.v_pre.clone(),
            denom,
            c: -denom,
            inv_pair_radius: T::one() / params.pair_radius(i, j),
        })
    }

    /// V x = x - (<x, n>_M / <v, n>_M) v: slides x along v back onto the
    /// contact hypersurface.
    fn v_apply(&self, x: &[T]) -> Vec<T> {
        let coeff = mass_inner(self.params, x, &self.n_c) / self.denom;
        let mut y = x.to_vec();
        axpy(&mut y, -coeff, &self.v_pre);
        y
    }

    /// Adjoint of V in the mass metric: y - (<y, v>_M / <v, n>_M) n.
    fn vstar_apply(&self, y: &[T]) -> Vec<T> {
        let coeff = mass_inner(self.params, y, &self.v_pre) / self.denom;
        let mut z = y.to_vec();
        axpy(&mut z, -coeff, &self.n_c);
        z
    }

    /// Shape operator of the contact sphere: the pair-relative component
    /// orthogonal to the normal, scaled by the inverse pair radius.
    fn k_apply(&self, x: &[T]) -> Vec<T> {
        let (i, j) = self.pair;
        let mut y = project_pair_relative(self.params, x, i, j);
        let cn = mass_inner(self.params, &y, &self.n_c);
        axpy(&mut y, -cn, &self.n_c);
        y.iter_mut().for_each(|e| *e = *e * self.inv_pair_radius);
        y
    }

    fn reflect(&self, x: &[T]) -> Vec<T> {
        reflect(self.params, x, &self.n_c)
    }
}

/* ---- collision map ---- */

/// Result of pushing a tangent vector through one reflection.
#[derive(Debug, Clone)]
pub struct CollisionPropagation<T> {
    pub tv: TangentVector<T>,
    /// Exact increment of Q across the reflection; nonnegative.
    pub q_increment: T,
    /// Collision-angle cosine seen by the derivative.
    pub cos_phi: T,
    /// Set for nearly tangential contacts, where the map is ill conditioned.
    pub ill_conditioned: bool,
    /// Relative norm of the component discarded by section re-projection.
    pub section_residual: T,
}

/// Shared body of the reflection derivative on raw momentum-zero slices:
/// returns (R dq, R (dv + 2c V*KV dq), <dq, C dq>_M).
fn collision_map_raw<T: Scalar>(
    params: &SystemParams<T>,
    ops: &CollisionOps<'_, T>,
    dq: &[T],
    dv: &[T],
) -> (Vec<T>, Vec<T>, T) {
    let vdq = ops.v_apply(dq);
    let kvdq = ops.k_apply(&vdq);
    // <dq, C dq>_M = 2c <V dq, K V dq>_M, and K is positive on the sphere
    // directions, so the increment cannot be negative.
    let q_increment = T::two() * ops.c * mass_inner(params, &vdq, &kvdq);
    let correction = ops.vstar_apply(&kvdq);
    let mut dv_mid = dv.to_vec();
    axpy(&mut dv_mid, T::two() * ops.c, &correction);
    (ops.reflect(dq), ops.reflect(&dv_mid), q_increment)
}

/// Reflection derivative on the full momentum-zero space, without the
/// transversal-section bookkeeping. Needed for displacement fields that have
/// a component along the flow, e.g. when hunting velocity-preserving
/// perturbations.
pub fn propagate_collision_z<T: Scalar>(
    params: &SystemParams<T>,
    frame: &CollisionFrame<T>,
    dq: &[T],
    dv: &[T],
) -> CoreResult<(Vec<T>, Vec<T>)> {
    let ops = CollisionOps::new(params, frame)?;
    let (dq_post, dv_post, _) = collision_map_raw(params, &ops, dq, dv);
    Ok((dq_post, dv_post))
}

/// Inverse of `propagate_collision_z` at the same (forward) collision frame:
/// recovers the pre-collision pair from the post-collision one, using
/// dq- = R dq+ and dv- = R dv+ - 2c V*KV dq-.
pub fn propagate_collision_z_inverse<T: Scalar>(
    params: &SystemParams<T>,
    frame: &CollisionFrame<T>,
    dq_post: &[T],
    dv_post: &[T],
) -> CoreResult<(Vec<T>, Vec<T>)> {
    let ops = CollisionOps::new(params, frame)?;
    let dq_pre = ops.reflect(dq_post);
    let vdq = ops.v_apply(&dq_pre);
    let kvdq = ops.k_apply(&vdq);
    let correction = ops.vstar_apply(&kvdq);
    let mut dv_pre = ops.reflect(dv_post);
    axpy(&mut dv_pre, -(T::two() * ops.c), &correction);
    Ok((dq_pre, dv_pre))
}

/// Pushes (dq, dv) through a reflection:
/// dq+ = R dq, dv+ = R (dv + 2c V*KV dq), with R the mass-metric mirror
/// across the contact normal and c = -<v-, n>_M.
pub fn propagate_collision<T: Scalar>(
    params: &SystemParams<T>,
    frame: &CollisionFrame<T>,
    tv: &TangentVector<T>,
) -> CoreResult<CollisionPropagation<T>> {
    let ops = CollisionOps::new(params, frame)?;
    let speed = mass_norm(params, &frame.v_pre);
    let cos_phi = ops.c / speed;
    let ill_conditioned = cos_phi < T::lit(1e-6);

    let (dq_post_raw, dv_post_raw, q_increment) =
        collision_map_raw(params, &ops, tv.dq.components(), tv.dv.components());
    let v_post = ops.reflect(&frame.v_pre);

    let (dq_post, res_q) = section_split(params, &v_post, &dq_post_raw);
    let (dv_post, res_v) = section_split(params, &v_post, &dv_post_raw);
    let scale = mass_norm(params, &dq_post_raw)
        .max(mass_norm(params, &dv_post_raw))
        .max(T::min_positive_value());
    let section_residual = res_q.max(res_v) / scale;
    if !ill_conditioned && section_residual > T::lit(1e-10) {
        return Err(CoreError::Consistency(format!(
            "reflection left the section: relative residual {section_residual}"
        )));
    }

    Ok(CollisionPropagation {
        tv: TangentVector {
            dq: ReducedVector::from_trusted(dq_post),
            dv: ReducedVector::from_trusted(dv_post),
        },
        q_increment,
        cos_phi,
        ill_conditioned,
        section_residual,
    })
}

/// Alignment form of a tangent vector; shorthand for `tv.q(params)`.
pub fn q_form<T: Scalar>(params: &SystemParams<T>, tv: &TangentVector<T>) -> T {
    tv.q(params)
}

/// Pushes a tangent vector through every event of a trajectory, ending at
/// the trajectory's final time.
pub fn propagate_segment<T: Scalar>(
    params: &SystemParams<T>,
    traj: &Trajectory<T>,
    tv: &TangentVector<T>,
) -> CoreResult<TangentVector<T>> {
    let mut cur = tv.clone();
    let mut t = T::zero();
    for ev in Replay::new(params, traj) {
        let ev = ev?;
        cur = propagate_free(&cur, ev.dt_before);
        cur = propagate_collision(params, &CollisionFrame::forward(&ev), &cur)?.tv;
        t = ev.record.time;
    }
    Ok(propagate_free(&cur, traj.elapsed - t))
}

/* ---- finite-difference oracle ---- */

/// Central-difference approximation of the tangent map over [0, t]:
/// simulates the +h and -h perturbed states and differences the endpoints.
/// Fails with `FdUnstable` when the two perturbed trajectories do not share
/// one collision sequence, since the difference quotient is then meaningless.
pub fn fd_tangent<T: Scalar>(
    params: &SystemParams<T>,
    state: &PhasePoint<T>,
    tv: &TangentVector<T>,
    t: T,
    h: T,
    opts: &SimOptions<T>,
) -> CoreResult<TangentVector<T>> {
    let dq = tv.dq.components();
    let dv = tv.dv.components();
    let perturbed = |s: T| -> PhasePoint<T> {
        let mut q = state.q.clone();
        let mut v = state.v.clone();
        axpy(&mut q, s, dq);
        axpy(&mut v, s, dv);
        wrap_all(&mut q);
        PhasePoint::new(q, v)
    };
    // the perturbed states sit within O(h^2) of the unit shell; skip the
    // exact-normalization gate rather than silently renormalizing them
    let mut o = opts.clone();
    o.require_normalized = false;
    let plus = flow::simulate(params, &perturbed(h), &Stop::time(t), &o)?;
    let minus = flow::simulate(params, &perturbed(-h), &Stop::time(t), &o)?;
    if plus.sequence() != minus.sequence() {
        return Err(CoreError::FdUnstable(format!(
            "perturbed collision sequences diverge ({} vs {} events) at step {h}",
            plus.records.len(),
            minus.records.len()
        )));
    }

    let n = state.q.len();
    let scale = T::half() / h;
    let mut dq_fd = Vec::with_capacity(n);
    let mut dv_fd = Vec::with_capacity(n);
    for k in 0..n {
        let dpos = min_image_delta(minus.final_state.q[k], plus.final_state.q[k]);
        dq_fd.push(dpos * scale);
        dv_fd.push((plus.final_state.v[k] - minus.final_state.v[k]) * scale);
    }
    Ok(TangentVector {
        dq: ReducedVector::from_trusted(dq_fd),
        dv: ReducedVector::from_trusted(dv_fd),
    })
}

/* ---- expansion audit ---- */

/// One checkpoint of the expansion audit.
#[derive(Debug, Clone, Serialize)]
pub struct ExpansionRow<T> {
    pub time: T,
    /// Collision index, or None for the endpoints of the segment.
    pub collision_index: Option<usize>,
    /// ||dq(t)|| / ||dq(0)||.
    pub growth: T,
    /// Certified lower bound 1 + c0 t.
    pub lower_bound: T,
    /// <dq, dv> / ||dq||, which never decreases along the flow.
    pub alignment: T,
    pub q_value: T,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionReport<T> {
    pub c0: T,
    pub rows: Vec<ExpansionRow<T>>,
    pub final_growth: T,
    /// Smallest growth - bound margin seen at any checkpoint.
    pub min_margin: T,
}

/// Certifies ||dq(t)|| >= (1 + c0 t) ||dq(0)|| at every collision and at the
/// final time, for a seed satisfying Q(0) >= c0 ||dq(0)||^2 with c0 > 0.
/// A violated bound or a decreasing alignment aborts with the offending
/// time and ratio.
pub fn expansion_audit<T: Scalar>(
    params: &SystemParams<T>,
    traj: &Trajectory<T>,
    tv0: &TangentVector<T>,
    c0: T,
) -> CoreResult<ExpansionReport<T>> {
    if !(c0 > T::zero()) {
        return Err(CoreError::InvalidState(format!("expansion rate must be positive, got {c0}")));
    }
    let ndq0 = tv0.dq_norm(params);
    if !(ndq0 > T::zero()) {
        return Err(CoreError::InvalidState("seed has no configuration component".into()));
    }
    let q0 = tv0.q(params);
    let slack = T::one() - T::lit(1e-12);
    if q0 < c0 * ndq0 * ndq0 * slack {
        return Err(CoreError::InvalidState(format!(
            "seed alignment {q0} below c0 ||dq||^2 = {}",
            c0 * ndq0 * ndq0
        )));
    }

    let bound_slack = T::one() - T::lit(1e-8);
    let mut rows = Vec::with_capacity(traj.records.len() + 2);
    let mut min_margin = T::infinity();
    let mut tv = tv0.clone();
    let mut alignment_prev = q0 / ndq0;
    let mut t_prev = T::zero();

    let check = |tv: &TangentVector<T>,
                     time: T,
                     idx: Option<usize>,
                     alignment_prev: &mut T,
                     min_margin: &mut T,
                     rows: &mut Vec<ExpansionRow<T>>|
     -> CoreResult<()> {
        let ndq = tv.dq_norm(params);
        let growth = ndq / ndq0;
        let bound = T::one() + c0 * time;
        if growth < bound * bound_slack {
            return Err(CoreError::Consistency(format!(
                "expansion bound violated at t = {time}: growth {growth} < {bound}"
            )));
        }
        let qv = tv.q(params);
        let alignment = qv / ndq;
        let tol = T::lit(1e-9) * alignment_prev.abs().max(T::one());
        if alignment < *alignment_prev - tol {
            return Err(CoreError::Consistency(format!(
                "alignment decreased at t = {time}: {alignment} < {alignment_prev}"
            )));
        }
        *alignment_prev = alignment;
        *min_margin = (*min_margin).min(growth - bound);
        rows.push(ExpansionRow {
            time,
            collision_index: idx,
            growth,
            lower_bound: bound,
            alignment,
            q_value: qv,
        });
        Ok(())
    };

    check(&tv, T::zero(), None, &mut alignment_prev, &mut min_margin, &mut rows)?;
    for ev in Replay::new(params, traj) {
        let ev = ev?;
        tv = propagate_free(&tv, ev.dt_before);
        tv = propagate_collision(params, &CollisionFrame::forward(&ev), &tv)?.tv;
        t_prev = ev.record.time;
        check(&tv, t_prev, Some(ev.index), &mut alignment_prev, &mut min_margin, &mut rows)?;
    }
    tv = propagate_free(&tv, traj.elapsed - t_prev);
    check(&tv, traj.elapsed, None, &mut alignment_prev, &mut min_margin, &mut rows)?;

    let final_growth = rows.last().map(|r| r.growth).unwrap_or(T::one());
    Ok(ExpansionReport { c0, rows, final_growth, min_margin })
}

/* ---- alignment-form audit ---- */

/// Aggregate result of checking Q bookkeeping across a whole trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct QAuditReport<T> {
    pub events: usize,
    /// Collisions whose measured Q increment fell below -1e-12 (unit scale).
    pub negative_increments: usize,
    /// Worst |measured - dt ||dv||^2| over flight segments, unit scale.
    pub max_flight_mismatch: T,
    /// Worst |measured - analytic| over collisions, unit scale.
    pub max_collision_mismatch: T,
    pub min_collision_increment: T,
    pub passed: bool,
}

/// Verifies, event by event, that Q increases exactly as the closed forms
/// say: dt ||dv||^2 in flight, 2c <V dq, KV dq> at collisions, never
/// negative. The working vector is renormalized to unit phase norm after
/// each event so mismatch tolerances stay scale-free over long runs.
pub fn q_monotonicity_audit<T: Scalar>(
    params: &SystemParams<T>,
    traj: &Trajectory<T>,
    tv0: &TangentVector<T>,
) -> CoreResult<QAuditReport<T>> {
    let n0 = tv0.phase_norm(params);
    if !(n0 > T::zero()) {
        return Err(CoreError::InvalidState("zero tangent seed".into()));
    }
    let mut tv = tv0.scaled(T::one() / n0);
    let mut events = 0usize;
    let mut negative = 0usize;
    let mut max_flight = T::zero();
    let mut max_coll = T::zero();
    let mut min_inc = T::infinity();
    let neg_tol = T::lit(-1e-12);

    for ev in Replay::new(params, traj) {
        let ev = ev?;
        let q_before = tv.q(params);
        let predicted_flight = flight_q_increment(params, &tv, ev.dt_before);
        tv = propagate_free(&tv, ev.dt_before);
        let q_mid = tv.q(params);
        max_flight = max_flight.max((q_mid - q_before - predicted_flight).abs());

        let prop = propagate_collision(params, &CollisionFrame::forward(&ev), &tv)?;
        let measured = prop.tv.q(params) - q_mid;
        max_coll = max_coll.max((measured - prop.q_increment).abs());
        min_inc = min_inc.min(prop.q_increment);
        if measured < neg_tol {
            negative += 1;
        }
        tv = prop.tv;
        let n = tv.phase_norm(params);
        tv = tv.scaled(T::one() / n);
        events += 1;
    }

    let tol = T::lit(1e-10);
    let passed = negative == 0 && max_flight <= tol && max_coll <= tol && min_inc >= neg_tol;
    Ok(QAuditReport {
        events,
        negative_increments: negative,
        max_flight_mismatch: max_flight,
        max_collision_mismatch: max_coll,
        min_collision_increment: if events == 0 { T::zero() } else { min_inc },
        passed,
    })
}

/* ---- unstable seed at a collision ---- */

/// A tangent direction fed through one reflection to pick up a certified
/// positive alignment rate.
#[derive(Debug, Clone)]
pub struct UnstableSeed<T> {
    pub pre: TangentVector<T>,
    pub post: TangentVector<T>,
    /// Alignment rate Q+ / ||dq+||^2 right after the reflection.
    pub ratio: T,
    pub q_increment: T,
    /// Set for head-on contacts, where every direction orthogonal to the
    /// relative velocity works and one is chosen arbitrarily.
    pub head_on_degenerate: bool,
}

/// Builds the canonical expanding seed at a contact: dq places the colliding
/// pair in opposition along a direction orthogonal to their relative
/// velocity inside span{v_rel, contact line}, dv is zero (or B dq when a
/// positive-front operator `front` is supplied). The rate comes out as
/// rel_speed / (ball_radius * cos theta) with theta the approach angle, so
/// it is never below rel_speed / ball_radius, with equality head-on.
pub fn unstable_seed<T: Scalar>(
    params: &SystemParams<T>,
    frame: &CollisionFrame<T>,
    front: Option<&Mat<T>>,
) -> CoreResult<UnstableSeed<T>> {
    let nu = params.dimension();
    if nu < 2 {
        return Err(CoreError::InvalidSystem("expanding seed needs at least two dimensions".into()));
    }
    let (i, j) = frame.pair;
    let u = &frame.normal;
    let v_rel: Vec<T> = (0..nu)
        .map(|k| frame.v_pre[i * nu + k] - frame.v_pre[j * nu + k])
        .collect();
    let rel_speed = norm(&v_rel);
    if !(rel_speed > T::zero()) {
        return Err(CoreError::InvalidState("no relative motion at contact".into()));
    }
    let e1: Vec<T> = v_rel.iter().map(|&x| x / rel_speed).collect();
    let radial: T = (0..nu).map(|k| e1[k] * u[k]).sum();
    if radial.abs() < T::lit(1e-12) {
        return Err(CoreError::InvalidState(
            "tangential contact: expanding seed undefined".into(),
        ));
    }

    // direction orthogonal to v_rel, by preference inside span{v_rel, u}
    let mut w: Vec<T> = (0..nu).map(|k| u[k] - radial * e1[k]).collect();
    let head_on_degenerate = norm(&w) < T::lit(1e-8);
    if head_on_degenerate {
        // any unit vector orthogonal to v_rel: take the coordinate axis
        // least aligned with it and orthogonalize
        let axis = (0..nu)
            .min_by(|&a, &b| e1[a].abs().partial_cmp(&e1[b].abs()).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap_or(0);
        w = vec![T::zero(); nu];
        w[axis] = T::one();
        let along: T = (0..nu).map(|k| w[k] * e1[k]).sum();
        for k in 0..nu {
            w[k] = w[k] - along * e1[k];
        }
    }
    let wn = norm(&w);
    for e in w.iter_mut() {
        *e = *e / wn;
    }

    // opposed displacement with zero momentum: slot i gets m_j w, slot j -m_i w
    let d = params.compound_dim();
    let mut dq = vec![T::zero(); d];
    let (mi, mj) = (params.mass(i), params.mass(j));
    for k in 0..nu {
        dq[i * nu + k] = mj * w[k];
        dq[j * nu + k] = -mi * w[k];
    }
    let nd = mass_norm(params, &dq);
    for e in dq.iter_mut() {
        *e = *e / nd;
    }
    let dv = match front {
        Some(b) => b.matvec(&dq),
        None => vec![T::zero(); d],
    };

    let pre = TangentVector::project(params, &frame.v_pre, &dq, &dv);
    let prop = propagate_collision(params, frame, &pre)?;
    let ndq_post = prop.tv.dq_norm(params);
    let ratio = prop.tv.q(params) / (ndq_post * ndq_post);
    Ok(UnstableSeed {
        pre,
        post: prop.tv,
        ratio,
        q_increment: prop.q_increment,
        head_on_degenerate,
    })
}

/* ---- curvature-front pullback ---- */

/// Initial shape of a pulled-back wavefront.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FrontFlavor {
    /// Zero initial curvature; converges to the true front from below.
    Flat,
    /// Point-source front with infinite initial curvature (zero initial
    /// inverse); converges from above.
    PointSource,
}

/// Curvature operator of a wavefront, written in the mass-orthonormal
/// section coordinates of the base state.
#[derive(Debug, Clone)]
pub struct WavefrontOperator<T> {
    pub flavor: FrontFlavor,
    pub matrix: Mat<T>,
}

/// Two-sided estimate of the stable-front curvature at a phase point.
#[derive(Debug, Clone)]
pub struct StableSubspace<T> {
    pub horizon: T,
    pub collisions_used: usize,
    pub flat: WavefrontOperator<T>,
    pub point_source: WavefrontOperator<T>,
    /// Operator-norm distance between the two estimates.
    pub gap: T,
    /// Whether the gap met the requested tolerance.
    pub converged: bool,
    /// Worst min-eigenvalue of (point-source - flat) seen at any
    /// intermediate collision; nonnegative up to rounding when the
    /// estimates bracket correctly.
    pub sandwich_margin: T,
    /// Mass-orthonormal basis of the section at the base state.
    pub section: Vec<Vec<T>>,
    base_velocity: Vec<T>,
}

impl<T: Scalar> StableSubspace<T> {
    /// Graph vectors of the estimated stable subspace: dq = e_a,
    /// dv = -B dq with B the average of the two bracketing estimates.
    pub fn stable_basis(&self, params: &SystemParams<T>) -> Vec<TangentVector<T>> {
        let dim = self.section.len();
        let b = self.flat.matrix.add(&self.point_source.matrix).scale(T::half());
        (0..dim)
            .map(|a| {
                let dq = self.section[a].clone();
                let coeffs: Vec<T> = (0..dim).map(|r| -b[(r, a)]).collect();
                let dv = from_basis(&self.section, &coeffs);
                TangentVector::project(params, &self.base_velocity, &dq, &dv)
            })
            .collect()
    }
}

fn mass_of_slot<T: Scalar>(params: &SystemParams<T>, slot: usize) -> T {
    params.mass(slot / params.dimension())
}

/// Symmetrizes in the mass metric: (A + M^-1 A^T M) / 2.
fn mass_symmetrize<T: Scalar>(params: &SystemParams<T>, a: &Mat<T>) -> Mat<T> {
    let d = a.rows();
    Mat::from_fn(d, d, |r, c| {
        let mr = mass_of_slot(params, r);
        let mc = mass_of_slot(params, c);
        (a[(r, c)] + a[(c, r)] * mc / mr) * T::half()
    })
}

/// Materializes a linear action as a matrix in compound coordinates.
fn operator_matrix<T: Scalar>(d: usize, mut f: impl FnMut(&[T]) -> Vec<T>) -> Mat<T> {
    let mut cols = Vec::with_capacity(d);
    let mut e = vec![T::zero(); d];
    for b in 0..d {
        e[b] = T::one();
        cols.push(f(&e));
        e[b] = T::zero();
    }
    Mat::from_cols(&cols)
}

/// Projector onto the section at velocity v (zero momentum, orthogonal to v).
fn section_projector<T: Scalar>(params: &SystemParams<T>, v: &[T]) -> Mat<T> {
    operator_matrix(params.compound_dim(), |x| section_split(params, v, x).0)
}

/// Matrix of the collision-curvature term C = 2c V* K V.
fn curvature_jump_matrix<T: Scalar>(params: &SystemParams<T>, ops: &CollisionOps<T>) -> Mat<T> {
    operator_matrix(params.compound_dim(), |x| {
        let vdq = ops.v_apply(x);
        let kv = ops.k_apply(&vdq);
        let mut y = ops.vstar_apply(&kv);
        let s = T::two() * ops.c;
        y.iter_mut().for_each(|e| *e = *e * s);
        y
    })
}

/// Writes a compound-coordinate operator in section coordinates.
fn to_section_coords<T: Scalar>(
    params: &SystemParams<T>,
    basis: &[Vec<T>],
    a: &Mat<T>,
) -> Mat<T> {
    let dim = basis.len();
    let images: Vec<Vec<T>> = basis.iter().map(|e| a.matvec(e)).collect();
    Mat::from_fn(dim, dim, |r, c| mass_inner(params, &basis[r], &images[c]))
}

/// Inverse of a symmetric positive matrix via its spectral form.
fn sym_inverse<T: Scalar>(a: &Mat<T>, context: &str) -> CoreResult<Mat<T>> {
    let (vals, vecs) = sym_eigen(a)?;
    let dim = vals.len();
    let top = vals[dim - 1].abs().max(T::one());
    let floor = T::lit(1e-13) * top;
    if vals[0] <= floor {
        return Err(CoreError::SingularSegment(format!(
            "{context}: eigenvalue {} below invertibility floor",
            vals[0]
        )));
    }
    Ok(Mat::from_fn(dim, dim, |r, c| {
        (0..dim).map(|k| vecs[(r, k)] * vecs[(c, k)] / vals[k]).sum()
    }))
}

/// Pulls flat- and point-source-front curvatures back along the reversed
/// trajectory over [0, horizon] and reports both in the section coordinates
/// of the base state. The true stable curvature is bracketed between them;
/// the gap shrinks like 1/horizon.
///
/// Fails with `SingularSegment` when the segment has fewer than two
/// collisions or the point-source front never becomes invertible. A gap
/// above `tolerance` is reported with `converged = false`, not an error.
pub fn stable_subspace<T: Scalar>(
    params: &SystemParams<T>,
    state: &PhasePoint<T>,
    horizon: T,
    tolerance: T,
    opts: &SimOptions<T>,
) -> CoreResult<StableSubspace<T>> {
    if !(horizon > T::zero()) {
        return Err(CoreError::InvalidState(format!("horizon must be positive, got {horizon}")));
    }
    let traj = flow::simulate(params, state, &Stop::time(horizon), opts)?;
    let events: CoreResult<Vec<ContactEvent<T>>> = Replay::new(params, &traj).collect();
    let events = events?;
    if events.len() < 2 {
        return Err(CoreError::SingularSegment(format!(
            "need at least two collisions in [0, {horizon}], found {}",
            events.len()
        )));
    }

    let d = params.compound_dim();
    let identity = Mat::<T>::identity(d);
    // curvature of the flat front and inverse curvature of the point source
    let mut u = Mat::<T>::zeros(d, d);
    let mut w = Mat::<T>::zeros(d, d);
    // reversed trajectory starts at the mirrored endpoint
    let mut v_cur: Vec<T> = traj.final_state.v.iter().map(|&x| -x).collect();
    let mut t_forward = horizon;
    let mut sandwich_margin = T::infinity();

    let flight = |u: &mut Mat<T>, w: &mut Mat<T>, dt: T, v_now: &[T]| -> CoreResult<()> {
        if dt <= T::zero() {
            return Ok(());
        }
        // curvature relaxes as U (I + dt U)^-1; inverse curvature grows by dt
        let a = identity.add(&u.scale(dt));
        let ainv = lu_solve(&a, &identity)?;
        *u = mass_symmetrize(params, &u.matmul(&ainv));
        let pi = section_projector(params, v_now);
        *w = mass_symmetrize(params, &w.add(&pi.scale(dt)));
        Ok(())
    };

    for k in (0..events.len()).rev() {
        let ev = &events[k];
        flight(&mut u, &mut w, t_forward - ev.record.time, &v_cur)?;

        let frame = CollisionFrame::reversed(ev);
        let ops = CollisionOps::new(params, &frame)?;
        let r = operator_matrix(d, |x| ops.reflect(x));
        let c = curvature_jump_matrix(params, &ops);
        u = mass_symmetrize(params, &r.matmul(&u.add(&c)).matmul(&r));
        let x = identity.add(&c.matmul(&w));
        let xinv = lu_solve(&x, &identity)?;
        w = mass_symmetrize(params, &r.matmul(&w.matmul(&xinv)).matmul(&r));

        // reversed post-collision velocity mirrors the forward pre-velocity
        v_cur = ev.pre.v.iter().map(|&x| -x).collect();
        t_forward = ev.record.time;

        // bracket check at this intermediate point, once the point source
        // has focused enough to be invertible
        let basis_k = section_basis(params, &v_cur);
        let w_sec = to_section_coords(params, &basis_k, &w);
        if let Ok(b_point) = sym_inverse(&w_sec, "intermediate front") {
            let u_sec = to_section_coords(params, &basis_k, &u);
            let margin = sym_min_eigenvalue(&b_point.sub(&u_sec))?;
            sandwich_margin = sandwich_margin.min(margin);
        }
    }
    flight(&mut u, &mut w, t_forward, &v_cur)?;

    // the reversed endpoint velocity is -v0; its section equals that of v0
    let basis = section_basis(params, &state.v);
    let flat_sec = to_section_coords(params, &basis, &u);
    let w_sec = to_section_coords(params, &basis, &w);
    let point_sec = sym_inverse(&w_sec, "point-source front at base state")?;
    let gap = sym_operator_norm(&point_sec.sub(&flat_sec))?;
    let converged = gap <= tolerance;

    Ok(StableSubspace {
        horizon,
        collisions_used: events.len(),
        flat: WavefrontOperator { flavor: FrontFlavor::Flat, matrix: flat_sec },
        point_source: WavefrontOperator { flavor: FrontFlavor::PointSource, matrix: point_sec },
        gap,
        converged,
        sandwich_margin,
        section: basis,
        base_velocity: state.v.clone(),
    })
}

/* ---- contracting vectors ---- */

/// A certified contracting tangent direction at a phase point.
#[derive(Debug, Clone)]
pub struct ContractionResult<T> {
    /// Unit tangent vector at the base state with Q < 0.
    pub vector: TangentVector<T>,
    pub witness_time: T,
    pub witness_index: usize,
    pub witness: CollisionRecord<T>,
    /// Relative-speed threshold the witness collision had to clear.
    pub threshold: T,
    /// ||DS^t vector|| / ||vector||, re-measured by independent forward
    /// propagation through every event up to the witness.
    pub measured_ratio: T,
    /// 1 / (1 + seed_ratio * witness_time).
    pub predicted_bound: T,
    pub seed_ratio: T,
    /// Forward image vs the mirrored seed it must reproduce, relative.
    pub duality_residual: T,
    pub q_initial: T,
}

/// Finds a unit tangent vector contracted by at least `l_factor` under the
/// forward flow: runs the trajectory until a collision is fast enough to
/// host an expanding seed, plants that seed on the time-reversed trajectory,
/// and pulls it back to the start, where reversing velocities turns certified
/// expansion into certified contraction. The contraction is then re-measured
/// by plain forward propagation before being reported.
pub fn find_contracting_vector<T: Scalar>(
    params: &SystemParams<T>,
    state: &PhasePoint<T>,
    l_factor: T,
    opts: &SimOptions<T>,
) -> CoreResult<ContractionResult<T>> {
    if !(l_factor > T::one()) {
        return Err(CoreError::InvalidState(format!(
            "contraction factor must exceed 1, got {l_factor}"
        )));
    }
    let threshold = crate::symbolic::g_threshold(params);
    let mut max_speed_seen = T::zero();
    let mut last_cap = 0u64;

    for cap in [256u64, 1024, 4096, 16384] {
        last_cap = cap;
        let traj = flow::simulate(params, state, &Stop::collisions(cap), opts)?;
        let events: CoreResult<Vec<ContactEvent<T>>> = Replay::new(params, &traj).collect();
        let events = events?;
        let mut attempts = 0usize;

        for k in 0..events.len() {
            let rec = &events[k].record;
            max_speed_seen = max_speed_seen.max(rec.rel_speed);
            if rec.rel_speed < threshold || attempts >= 64 {
                continue;
            }
            let frame_rev = CollisionFrame::reversed(&events[k]);
            let seed = match unstable_seed(params, &frame_rev, None) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let t_w = rec.time;
            // demand 5% slack over the requested factor before spending a
            // full pullback on this witness
            if T::one() + seed.ratio * t_w < l_factor * T::lit(1.05) {
                continue;
            }
            attempts += 1;

            if let Some(result) = attempt_witness(params, &events, k, &seed, threshold, l_factor)? {
                return Ok(result);
            }
        }
    }

    Err(CoreError::HorizonExhausted(format!(
        "no contracting vector within {last_cap} collisions: speed threshold {threshold}, \
         max relative speed seen {max_speed_seen}, requested factor {l_factor}"
    )))
}

/// Pulls one seed back to time zero and re-measures the contraction forward.
fn attempt_witness<T: Scalar>(
    params: &SystemParams<T>,
    events: &[ContactEvent<T>],
    k: usize,
    seed: &UnstableSeed<T>,
    threshold: T,
    l_factor: T,
) -> CoreResult<Option<ContractionResult<T>>> {
    let t_w = events[k].record.time;

    // pull the expanding seed down the reversed trajectory to forward time 0
    let mut tv = seed.post.clone();
    let mut t_cursor = t_w;
    for jj in (0..k).rev() {
        tv = propagate_free(&tv, t_cursor - events[jj].record.time);
        let frame = CollisionFrame::reversed(&events[jj]);
        tv = match propagate_collision(params, &frame, &tv) {
            Ok(p) => p.tv,
            Err(_) => return Ok(None),
        };
        t_cursor = events[jj].record.time;
    }
    tv = propagate_free(&tv, t_cursor);

    let raw = tv.time_reversed();
    let scale = raw.phase_norm(params);
    if !(scale > T::zero()) {
        return Ok(None);
    }
    let vector = raw.scaled(T::one() / scale);
    let q_initial = vector.q(params);

    // independent forward re-measurement through the witness collision
    let mut fwd = vector.clone();
    for ev in events.iter().take(k + 1) {
        fwd = propagate_free(&fwd, ev.dt_before);
        fwd = match propagate_collision(params, &CollisionFrame::forward(ev), &fwd) {
            Ok(p) => p.tv,
            Err(_) => return Ok(None),
        };
    }
    let measured_ratio = fwd.phase_norm(params);
    if measured_ratio >= T::one() / l_factor {
        return Ok(None);
    }

    // the forward image must reproduce the mirrored seed: DS^t maps the
    // candidate onto the velocity-reversal of the planted vector
    let target = seed.pre.time_reversed();
    let mut diff2 = T::zero();
    let nu2 = params.compound_dim();
    for r in 0..nu2 {
        let m = mass_of_slot(params, r);
        let dq_d = fwd.dq.components()[r] * scale - target.dq.components()[r];
        let dv_d = fwd.dv.components()[r] * scale - target.dv.components()[r];
        diff2 = diff2 + m * (dq_d * dq_d + dv_d * dv_d);
    }
    let duality_residual = diff2.sqrt() / target.phase_norm(params);

    Ok(Some(ContractionResult {
        vector,
        witness_time: t_w,
        witness_index: k,
        witness: events[k].record.clone(),
        threshold,
        measured_ratio,
        predicted_bound: T::one() / (T::one() + seed.ratio * t_w),
        seed_ratio: seed.ratio,
        duality_residual,
        q_initial,
    }))
}

/* ---- tests ---- */

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::simulate;
    use crate::phase::{make_system, normalize_state};

    /// Two equal balls on a head-on x-axis course, unit energy.
    fn head_on() -> (SystemParams<f64>, PhasePoint<f64>) {
        let params = make_system(2, 2, &[1.0, 1.0], 0.05).unwrap();
        let s = 0.5f64.sqrt();
        let state = PhasePoint::new(vec![0.2, 0.5, 0.6, 0.5], vec![s, 0.0, -s, 0.0]);
        (params, state)
    }

    /// Unit section vector transverse to the head-on axis.
    fn head_on_section(params: &SystemParams<f64>) -> Vec<f64> {
        let a = 0.5f64.sqrt();
        let _ = params;
        vec![0.0, a, 0.0, -a]
    }

    /// Three unequal balls arranged to collide off-center well before t = 1.
    fn three_ball() -> (SystemParams<f64>, PhasePoint<f64>) {
        let params = make_system(3, 2, &[1.0, 2.0, 3.0], 0.05).unwrap();
        let q = vec![0.30, 0.50, 0.62, 0.52, 0.50, 0.85];
        let v_raw = vec![0.80, 0.02, -0.30, 0.00, 0.00, 0.00];
        let state = normalize_state(&q, &v_raw, &params).unwrap();
        (params, state)
    }

    #[test]
    fn free_flight_moves_dq_only() {
        let (params, state) = head_on();
        let e = head_on_section(&params);
        let tv = TangentVector::project(&params, &state.v, &vec![0.0; 4], &e);
        let out = propagate_free(&tv, 0.75);
        for k in 0..4 {
            assert!((out.dq.components()[k] - 0.75 * e[k]).abs() < 1e-15);
            assert_eq!(out.dv.components()[k], tv.dv.components()[k]);
        }
        assert!((flight_q_increment(&params, &tv, 0.75) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn section_projection_removes_flow_and_momentum() {
        let (params, state) = head_on();
        // contaminate a section vector with flow and uniform-translation parts
        let e = head_on_section(&params);
        let mut raw = e.clone();
        axpy(&mut raw, 0.3, &state.v);
        for k in 0..4 {
            raw[k] += 0.2 * if k % 2 == 0 { 1.0 } else { 0.0 };
        }
        let tv = TangentVector::project(&params, &state.v, &raw, &vec![0.0; 4]);
        let dq = tv.dq.components();
        assert!(mass_inner(&params, dq, &state.v).abs() < 1e-14);
        for k in 0..2 {
            let p: f64 = (0..2).map(|b| params.mass(b) * dq[b * 2 + k]).sum();
            assert!(p.abs() < 1e-14);
        }
        for k in 0..4 {
            assert!((dq[k] - e[k]).abs() < 1e-14, "flow/momentum parts not removed cleanly");
        }
    }

    #[test]
    fn try_new_rejects_flow_component() {
        let (params, state) = head_on();
        let bad = state.v.clone();
        let err = TangentVector::try_new(&params, &state.v, bad, vec![0.0; 4]);
        assert!(matches!(err, Err(CoreError::InvalidState(_))));
    }

    /// Runs the head-on fixture to its first collision and returns the frame.
    fn first_frame(
        params: &SystemParams<f64>,
        state: &PhasePoint<f64>,
    ) -> (CollisionFrame<f64>, Trajectory<f64>) {
        let traj = simulate(params, state, &Stop::collisions(1), &SimOptions::default()).unwrap();
        let ev: Vec<_> = Replay::new(params, &traj).collect::<CoreResult<_>>().unwrap();
        (CollisionFrame::forward(&ev[0]), traj)
    }

    #[test]
    fn collision_map_on_transverse_vector() {
        let (params, state) = head_on();
        let (frame, _) = first_frame(&params, &state);
        let e = head_on_section(&params);
        let tv = TangentVector::project(&params, &frame.v_pre, &e, &vec![0.0; 4]);
        let prop = propagate_collision(&params, &frame, &tv).unwrap();

        // transverse direction is fixed by R; dv picks up 2c/r_pair times e
        let expected = 2.0 / params.pair_radius(0, 1);
        for k in 0..4 {
            assert!((prop.tv.dq.components()[k] - e[k]).abs() < 1e-12);
            assert!((prop.tv.dv.components()[k] - expected * e[k]).abs() < 1e-9);
        }
        assert!((prop.q_increment - expected).abs() < 1e-9);
        assert!((prop.cos_phi - 1.0).abs() < 1e-12);
        assert!(!prop.ill_conditioned);
        assert!(prop.section_residual < 1e-12);
    }

    #[test]
    fn z_map_round_trips_and_transports_the_flow() {
        use rand::{Rng, SeedableRng};
        let (params, state) = three_ball();
        let traj = simulate(&params, &state, &Stop::collisions(1), &SimOptions::default()).unwrap();
        let ev: Vec<_> = Replay::new(&params, &traj).collect::<CoreResult<_>>().unwrap();
        let frame = CollisionFrame::forward(&ev[0]);

        // inverse after forward restores an arbitrary momentum-zero pair
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let dq = project_momentum_zero(
            &params,
            &(0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        );
        let dv = project_momentum_zero(
            &params,
            &(0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        );
        let (dq_p, dv_p) = propagate_collision_z(&params, &frame, &dq, &dv).unwrap();
        let (dq_b, dv_b) = propagate_collision_z_inverse(&params, &frame, &dq_p, &dv_p).unwrap();
        for k in 0..6 {
            assert!((dq_b[k] - dq[k]).abs() < 1e-12);
            assert!((dv_b[k] - dv[k]).abs() < 1e-12);
        }

        // the flow direction (v, 0) maps to (v+, 0) exactly
        let (fq, fv) = propagate_collision_z(&params, &frame, &frame.v_pre, &vec![0.0; 6]).unwrap();
        let v_post = reflect(&params, &frame.v_pre, &contact_normal(&params, &frame.normal, 0, 1));
        for k in 0..6 {
            assert!((fq[k] - v_post[k]).abs() < 1e-12);
            assert!(fv[k].abs() < 1e-12);
        }
    }

    #[test]
    fn generator_direction_stays_neutral() {
        // balls 0 and 1 touch; moving all three in lockstep along y (with
        // compensation keeping momentum zero) must commute with the bounce
        let params = make_system(3, 2, &[1.0, 2.0, 3.0], 0.05).unwrap();
        let b = (1.0 / 6.0f64).sqrt();
        let v = vec![2.0 * b, 0.0, -b, 0.0, 0.0, 0.0];
        let frame = CollisionFrame {
            pair: (0, 1),
            normal: vec![-1.0, 0.0],
            v_pre: v.clone(),
        };
        let w = 0.3;
        let dq = vec![0.0, w, 0.0, w, 0.0, -w * (1.0 + 2.0) / 3.0];
        let tv = TangentVector::try_new(&params, &v, dq.clone(), vec![0.0; 6]).unwrap();
        let prop = propagate_collision(&params, &frame, &tv).unwrap();
        for k in 0..6 {
            assert!((prop.tv.dq.components()[k] - dq[k]).abs() < 1e-14);
            assert!(prop.tv.dv.components()[k].abs() < 1e-14);
        }
        assert!(prop.q_increment.abs() < 1e-14);
    }

    #[test]
    fn q_increment_matches_measurement_and_is_nonnegative() {
        use rand::{Rng, SeedableRng};
        let (params, state) = head_on();
        let (frame, _) = first_frame(&params, &state);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for _ in 0..32 {
            let dq_raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dv_raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tv = TangentVector::project(&params, &frame.v_pre, &dq_raw, &dv_raw);
            let n = tv.phase_norm(&params);
            if n < 1e-6 {
                continue;
            }
            let tv = tv.scaled(1.0 / n);
            let prop = propagate_collision(&params, &frame, &tv).unwrap();
            let measured = prop.tv.q(&params) - tv.q(&params);
            assert!((measured - prop.q_increment).abs() < 1e-10);
            assert!(prop.q_increment >= -1e-14);
            // reflection is an isometry on the configuration slot
            assert!((prop.tv.dq_norm(&params) - tv.dq_norm(&params)).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_finite_difference_through_collisions() {
        let (params, state) = three_ball();
        let t_end = 0.8;
        let opts = SimOptions::default();
        let traj = simulate(&params, &state, &Stop::time(t_end), &opts).unwrap();
        assert!(!traj.records.is_empty(), "fixture must collide before t_end");

        let raw_dq = vec![0.11, -0.07, 0.05, 0.09, -0.04, 0.03];
        let raw_dv = vec![-0.06, 0.08, 0.02, -0.05, 0.07, -0.01];
        let tv = TangentVector::project(&params, &state.v, &raw_dq, &raw_dv);
        let tv = tv.scaled(1.0 / tv.phase_norm(&params));

        let exact = propagate_segment(&params, &traj, &tv).unwrap();
        let fd = fd_tangent(&params, &state, &tv, t_end, 1e-5, &opts).unwrap();

        let mut diff2 = 0.0;
        for r in 0..6 {
            let m = params.mass(r / 2);
            let a = exact.dq.components()[r] - fd.dq.components()[r];
            let b = exact.dv.components()[r] - fd.dv.components()[r];
            diff2 += m * (a * a + b * b);
        }
        let rel = diff2.sqrt() / exact.phase_norm(&params);
        assert!(rel < 1e-5, "exact vs finite differences: relative gap {rel}");
    }

    #[test]
    fn expansion_audit_certifies_linear_growth() {
        let (params, state) = head_on();
        let e = head_on_section(&params);
        let tv = TangentVector::project(&params, &state.v, &e, &e);
        let traj = simulate(&params, &state, &Stop::collisions(4), &SimOptions::default()).unwrap();
        let report = expansion_audit(&params, &traj, &tv, 1.0).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert!(report.min_margin >= -1e-8);
        let t_last = traj.elapsed;
        assert!(report.final_growth >= (1.0 + t_last) * (1.0 - 1e-8));
    }

    #[test]
    fn expansion_audit_rejects_bad_seeds() {
        let (params, state) = head_on();
        let e = head_on_section(&params);
        let traj = simulate(&params, &state, &Stop::collisions(2), &SimOptions::default()).unwrap();
        // no velocity component: Q = 0 < c0
        let flat = TangentVector::project(&params, &state.v, &e, &vec![0.0; 4]);
        assert!(expansion_audit(&params, &traj, &flat, 1.0).is_err());
        // nonpositive rate
        let tv = TangentVector::project(&params, &state.v, &e, &e);
        assert!(expansion_audit(&params, &traj, &tv, 0.0).is_err());
    }

    #[test]
    fn q_audit_over_many_events() {
        let (params, state) = head_on();
        let traj =
            simulate(&params, &state, &Stop::collisions(50), &SimOptions::default()).unwrap();
        let e = head_on_section(&params);
        let tv = TangentVector::project(&params, &state.v, &e, &e);
        let report = q_monotonicity_audit(&params, &traj, &tv).unwrap();
        assert_eq!(report.events, 50);
        assert_eq!(report.negative_increments, 0);
        assert!(report.max_flight_mismatch <= 1e-10);
        assert!(report.max_collision_mismatch <= 1e-10);
        assert!(report.passed);
    }

    #[test]
    fn unstable_seed_head_on_rate() {
        let (params, state) = head_on();
        let (frame, _) = first_frame(&params, &state);
        let seed = unstable_seed(&params, &frame, None).unwrap();
        assert!(seed.head_on_degenerate);
        // head-on with any masses: rate = rel_speed / ball radius exactly
        let expected = 2.0f64.sqrt() / 0.05;
        assert!((seed.ratio - expected).abs() < 1e-9 * expected);
        assert!((seed.pre.dq_norm(&params) - 1.0).abs() < 1e-12);
        assert!(seed.pre.dv_norm(&params) < 1e-15);
    }

    #[test]
    fn unstable_seed_oblique_rate_closed_form() {
        // one moving ball striking a resting one off-center
        let params = make_system(2, 2, &[1.0, 1.0], 0.05).unwrap();
        let angle = 0.5f64; // contact line tilted away from the approach
        let u = vec![-angle.cos(), angle.sin()];
        let speed = 1.0;
        let v = vec![speed, 0.0, 0.0, 0.0];
        let frame = CollisionFrame { pair: (0, 1), normal: u.clone(), v_pre: v };
        let seed = unstable_seed(&params, &frame, None).unwrap();
        assert!(!seed.head_on_degenerate);
        // rate = rel_speed / (r cos theta), theta the approach angle; the
        // head-on bound rel_speed / r is the floor of this family
        let expected = speed / (0.05 * angle.cos());
        assert!(
            (seed.ratio - expected).abs() < 1e-9 * expected,
            "rate {} vs closed form {}",
            seed.ratio,
            expected
        );
        assert!(seed.ratio >= speed / 0.05);
    }

    #[test]
    fn unstable_seed_with_positive_front_grows_faster() {
        let (params, state) = head_on();
        let (frame, _) = first_frame(&params, &state);
        let flat = unstable_seed(&params, &frame, None).unwrap();
        // positive front: half the identity restricted to the section
        let v_pre = frame.v_pre.clone();
        let b = section_projector(&params, &v_pre).scale(0.5);
        let seeded = unstable_seed(&params, &frame, Some(&b)).unwrap();
        assert!(seeded.ratio >= flat.ratio - 1e-12);
    }

    #[test]
    fn wavefront_estimates_bracket_and_converge() {
        let (params, state) = head_on();
        let opts = SimOptions::default();
        let sub5 = stable_subspace(&params, &state, 5.0, 1.0 / 5.0 + 1e-9, &opts).unwrap();
        assert_eq!(sub5.section.len(), 1);
        let flat5 = sub5.flat.matrix[(0, 0)];
        let point5 = sub5.point_source.matrix[(0, 0)];
        assert!(flat5 > 0.0, "flat estimate must pick up curvature: {flat5}");
        assert!(point5 >= flat5 - 1e-9, "estimates must bracket: {flat5} vs {point5}");
        assert!(sub5.gap <= 1.0 / 5.0 + 1e-9, "gap {} exceeds 1/horizon", sub5.gap);
        assert!(sub5.converged);
        assert!(sub5.sandwich_margin >= -1e-9);

        // doubling the horizon tightens both one-sided estimates
        let sub10 = stable_subspace(&params, &state, 10.0, 1.0 / 10.0 + 1e-9, &opts).unwrap();
        assert!(sub10.flat.matrix[(0, 0)] >= flat5 - 1e-8);
        assert!(sub10.point_source.matrix[(0, 0)] <= point5 + 1e-8);
        assert!(sub10.gap <= sub5.gap + 1e-12);

        // stable basis vectors align dv against dq through a positive operator
        let basis = sub5.stable_basis(&params);
        assert_eq!(basis.len(), 1);
        assert!(basis[0].q(&params) < 0.0);
    }

    #[test]
    fn contracting_vector_is_found_and_contracts() {
        let (params, state) = head_on();
        let result =
            find_contracting_vector(&params, &state, 10.0, &SimOptions::default()).unwrap();
        assert!(result.measured_ratio < 0.1, "ratio {}", result.measured_ratio);
        assert!(result.q_initial < 0.0);
        assert!((result.vector.phase_norm(&params) - 1.0).abs() < 1e-12);
        assert!(result.duality_residual < 1e-8, "duality residual {}", result.duality_residual);
        assert!(
            result.measured_ratio <= result.predicted_bound * (1.0 + 1e-6),
            "measured {} vs predicted {}",
            result.measured_ratio,
            result.predicted_bound
        );
        assert!(result.witness.rel_speed >= result.threshold);
    }

    #[test]
    fn contraction_factor_must_exceed_one() {
        let (params, state) = head_on();
        let err = find_contracting_vector(&params, &state, 1.0, &SimOptions::default());
        assert!(matches!(err, Err(CoreError::InvalidState(_))));
    }
}
