//! Event-driven billiard flow: exact pair collision scheduling on the torus,
//! elastic resolution as a mass-metric reflection, singularity margins,
//! accumulation alarm, and branch enumeration at near-double collisions.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{CoreError, CoreResult};
use crate::linalg::{dot, norm};
use crate::phase::{
    self, contact_normal, mass_inner, mass_norm, pair_images, validate_no_overlap,
    validate_normalized, wrap_all, PhasePoint, SystemParams,
};
use crate::scalar::Scalar;

/// Tolerances and switches for the event loop.
#[derive(Debug, Clone)]
pub struct SimOptions<T> {
    /// Collision-time root tolerance (Newton polish target), flow-time units.
    pub root_tol: T,
    /// Window flagging near-double collisions.
    pub double_window: T,
    /// Relative margin |<v_rel, n>| / |v_rel| below which a collision counts as near-tangential.
    pub tangency_rel_margin: T,
    /// Abort when consecutive collisions come closer than this.
    pub accumulation_alarm: T,
    /// Allowed penetration before the overlap audit fails.
    pub overlap_slack: T,
    /// Contact acceptance: | distance - 2r | at resolve time.
    pub contact_tol: T,
    /// Default scheduling horizon when no stopping time bounds the search.
    pub pair_horizon: T,
    /// Enforce the momentum/energy normalization precondition.
    pub require_normalized: bool,
}

impl<T: Scalar> Default for SimOptions<T> {
    fn default() -> Self {
        SimOptions {
            root_tol: T::lit(1e-12),
            double_window: T::lit(1e-9),
            tangency_rel_margin: T::lit(1e-6),
            accumulation_alarm: T::lit(1e-11),
            overlap_slack: T::lit(1e-9),
            contact_tol: T::lit(1e-8),
            pair_horizon: T::lit(1e4),
            require_normalized: true,
        }
    }
}

/// Stopping rule: whichever bound is hit first.
#[derive(Debug, Clone, Default)]
pub struct Stop<T> {
    pub max_time: Option<T>,
    pub max_collisions: Option<u64>,
}

impl<T: Scalar> Stop<T> {
    pub fn time(t: T) -> Self {
        Stop { max_time: Some(t), max_collisions: None }
    }

    pub fn collisions(n: u64) -> Self {
        Stop { max_time: None, max_collisions: Some(n) }
    }
}

/// One resolved collision. Field order is the stable export order.
#[derive(Debug, Clone, Serialize)]
pub struct CollisionRecord<T> {
    pub time: T,
    /// Unordered ball pair, stored (i, j) with i < j.
    pub pair: (usize, usize),
    /// Lattice image at contact: displacement = q_j + offset - q_i.
    pub offset: Vec<i32>,
    /// Euclidean unit vector along q_i - q_j at contact.
    pub normal: Vec<T>,
    /// Collision-angle cosine <n, v+> in the mass metric, compound velocity normalized.
    pub cos_phi: T,
    /// ||v_i - v_j|| at contact.
    pub rel_speed: T,
    /// |<v_i- - v_j-, n>|; zero at a tangential singularity.
    pub tangency_margin: T,
    /// Time to the nearest other collision event (either side).
    pub simultaneity_gap: T,
    pub near_tangential: bool,
    pub near_double: bool,
}

/// A simulated segment of the flow.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory<T> {
    pub initial: PhasePoint<T>,
    pub records: Vec<CollisionRecord<T>>,
    pub final_state: PhasePoint<T>,
    pub elapsed: T,
}

impl<T: Scalar> Trajectory<T> {
    /// Symbolic collision sequence (pair labels in time order).
    pub fn sequence(&self) -> Vec<(usize, usize)> {
        self.records.iter().map(|r| r.pair).collect()
    }
}

/* ---- free flight ---- */

/// Advances every ball by dt and wraps coordinates back into [0,1).
pub fn drift<T: Scalar>(state: &mut PhasePoint<T>, dt: T) {
    for (qk, vk) in state.q.iter_mut().zip(&state.v) {
        *qk = *qk + dt * *vk;
    }
    wrap_all(&mut state.q);
}

/* ---- collision scheduling ---- */

/// Earliest approaching contact of pair (i, j): the smallest t > 0 up to
/// `horizon` with ||d + t (v_j - v_i)|| = 2r over lattice images d.
pub fn next_pair_collision<T: Scalar>(
    params: &SystemParams<T>,
    state: &PhasePoint<T>,
    i: usize,
    j: usize,
    horizon: T,
    opts: &SimOptions<T>,
) -> Option<(T, Vec<i32>)> {
    earliest_contact(params, state, i, j, -opts.root_tol, horizon, opts)
        .map(|(t, z)| (t.max(T::zero()), z))
}

/// Root search with an explicit lower time bound. The search marches over
/// windows short enough that relative motion sweeps at most half a torus
/// period per window, so the few integer offsets reachable inside a window
/// are exhaustive; the earliest hit of the earliest window is global.
fn earliest_contact<T: Scalar>(
    params: &SystemParams<T>,
    state: &PhasePoint<T>,
    i: usize,
    j: usize,
    t_min: T,
    horizon: T,
    opts: &SimOptions<T>,
) -> Option<(T, Vec<i32>)> {
    let nu = params.dimension();
    let qi = state.ball_pos(params, i);
    let qj = state.ball_pos(params, j);
    let vi = state.ball_vel(params, i);
    let vj = state.ball_vel(params, j);
    let d0: Vec<T> = (0..nu).map(|k| qj[k] - qi[k]).collect();
    let w: Vec<T> = (0..nu).map(|k| vj[k] - vi[k]).collect();
    let two_r = params.contact_diameter();

    let wmax = w.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    if wmax == T::zero() || horizon <= t_min {
        return None;
    }
    let window = T::half() / wmax;
    let a_coef: T = w.iter().map(|&x| x * x).sum();

    let mut t0 = t_min.min(T::zero());
    for _ in 0..1_000_000usize {
        let t1 = (t0 + window).min(horizon);
        // integer offsets reachable inside [t0, t1]: |d0_k + z_k + t w_k| <= 2r
        let mut ranges = Vec::with_capacity(nu);
        for k in 0..nu {
            let lo_reach = d0[k] + (t0 * w[k]).min(t1 * w[k]);
            let hi_reach = d0[k] + (t0 * w[k]).max(t1 * w[k]);
            let lo = (-hi_reach - two_r).ceil().to_i64().unwrap_or(0);
            let hi = (-lo_reach + two_r).floor().to_i64().unwrap_or(-1);
            ranges.push((lo, hi));
        }
        if ranges.iter().all(|&(lo, hi)| lo <= hi) {
            let mut best: Option<(T, Vec<i32>)> = None;
            let mut cursor: Vec<i64> = ranges.iter().map(|&(lo, _)| lo).collect();
            loop {
                let mut dz = Vec::with_capacity(nu);
                for k in 0..nu {
                    dz.push(d0[k] + T::from_i64(cursor[k]).expect("small offset"));
                }
                if let Some(t) =
                    quadratic_entering_root(&dz, &w, a_coef, two_r, t0, t1, t_min, opts)
                {
                    if best.as_ref().map_or(true, |(tb, _)| t < *tb) {
                        best = Some((t, cursor.iter().map(|&x| x as i32).collect()));
                    }
                }
                let mut k = 0;
                loop {
                    cursor[k] += 1;
                    if cursor[k] <= ranges[k].1 {
                        break;
                    }
                    cursor[k] = ranges[k].0;
                    k += 1;
                    if k == nu {
                        break;
                    }
                }
                if k == nu {
                    break;
                }
            }
            if best.is_some() {
                return best;
            }
        }
        if t1 >= horizon {
            return None;
        }
        t0 = t1;
    }
    None
}

/// Entering root of ||d + t w||^2 = (2r)^2 inside [lo, hi], approaching only.
fn quadratic_entering_root<T: Scalar>(
    d: &[T],
    w: &[T],
    a: T,
    two_r: T,
    lo: T,
    hi: T,
    t_min: T,
    opts: &SimOptions<T>,
) -> Option<T> {
    let half_b = dot(d, w);
    let c = dot(d, d) - two_r * two_r;
    let disc = half_b * half_b - a * c;
    if disc < T::zero() {
        return None;
    }
    let sq = disc.sqrt();
    // stable split avoids cancellation in the smaller root
    let qq = if half_b >= T::zero() { -(half_b + sq) } else { -(half_b - sq) };
    let r1 = qq / a;
    let r2 = if qq != T::zero() { c / qq } else { r1 };
    let mut t = r1.min(r2);
    // entering means the squared distance is still shrinking there
    if half_b + t * a >= T::zero() {
        return None;
    }
    // Newton polish on f(t) = ||d + t w||^2 - 4r^2
    for _ in 0..2 {
        let mut f = -two_r * two_r;
        let mut fp = T::zero();
        for k in 0..d.len() {
            let x = d[k] + t * w[k];
            f = f + x * x;
            fp = fp + T::two() * x * w[k];
        }
        if fp.abs() > T::lit(1e-30) {
            t = t - f / fp;
        }
    }
    let t_lo = lo.max(t_min) - opts.root_tol;
    if t >= t_lo && t <= hi {
        Some(t.max(t_min))
    } else {
        None
    }
}

/// Nearest-image contact geometry of a pair: (distance, unit vector from j
/// toward i, radial relative velocity <v_i - v_j, u>).
fn pair_geometry<T: Scalar>(
    params: &SystemParams<T>,
    state: &PhasePoint<T>,
    i: usize,
    j: usize,
) -> (T, Vec<T>, T) {
    let nu = params.dimension();
    let images = pair_images(state.ball_pos(params, i), state.ball_pos(params, j));
    let disp = images
        .into_iter()
        .map(|(_, d)| d)
        .min_by(|a, b| norm(a).partial_cmp(&norm(b)).unwrap_or(Ordering::Equal))
        .expect("image set is never empty");
    let dist = norm(&disp);
    let u: Vec<T> = disp.iter().map(|&x| -x / dist).collect();
    let vi = state.ball_vel(params, i);
    let vj = state.ball_vel(params, j);
    let v_rel: Vec<T> = (0..nu).map(|k| vi[k] - vj[k]).collect();
    let vn = dot(&v_rel, &u);
    (dist, u, vn)
}

/* ---- collision resolution ---- */

/// Applies the elastic reflection at an existing contact of `pair`.
/// Only the two colliding velocities change; all record margins are filled
/// except the simultaneity gap (the event loop owns that).
pub fn resolve_collision<T: Scalar>(
    params: &SystemParams<T>,
    state: &PhasePoint<T>,
    pair: (usize, usize),
    at_time: T,
    opts: &SimOptions<T>,
) -> CoreResult<(PhasePoint<T>, CollisionRecord<T>)> {
    let (i, j) = if pair.0 < pair.1 { pair } else { (pair.1, pair.0) };
    let nu = params.dimension();
    let two_r = params.contact_diameter();

    // the image achieving distance 2r is unique because 4r < 1
    let images = pair_images(state.ball_pos(params, i), state.ball_pos(params, j));
    let (offset, disp) = images
        .into_iter()
        .min_by(|a, b| {
            let da = (norm(&a.1) - two_r).abs();
            let db = (norm(&b.1) - two_r).abs();
            da.partial_cmp(&db).unwrap_or(Ordering::Equal)
        })
        .expect("image set is never empty");
    let dist = norm(&disp);
    if (dist - two_r).abs() > opts.contact_tol {
        return Err(CoreError::ContractViolation(format!(
            "pair ({i},{j}) not at contact: distance {dist} vs {two_r}"
        )));
    }

    // Euclidean unit normal along q_i - q_j ( = -displacement )
    let normal: Vec<T> = disp.iter().map(|&x| -x / dist).collect();
    let vi = state.ball_vel(params, i).to_vec();
    let vj = state.ball_vel(params, j).to_vec();
    let v_rel: Vec<T> = (0..nu).map(|k| vi[k] - vj[k]).collect();
    let rel_speed = norm(&v_rel);
    let vn = dot(&v_rel, &normal);
    if vn > T::zero() {
        return Err(CoreError::ContractViolation(format!(
            "pair ({i},{j}) receding at contact: <v_rel, n> = {vn}"
        )));
    }
    let tangency_margin = vn.abs();
    let near_tangential =
        rel_speed > T::zero() && tangency_margin < opts.tangency_rel_margin * rel_speed;

    // v_i+ = v_i - (2 m_j / (m_i + m_j)) <v_rel, n> n, and symmetrically
    let (mi, mj) = (params.mass(i), params.mass(j));
    let msum = mi + mj;
    let mut v_new = state.v.clone();
    for k in 0..nu {
        v_new[i * nu + k] = vi[k] - T::two() * mj / msum * vn * normal[k];
        v_new[j * nu + k] = vj[k] + T::two() * mi / msum * vn * normal[k];
    }
    let new_state = PhasePoint::new(state.q.clone(), v_new);

    // compound collision angle: cos phi = <n_c, v+ / ||v+||>
    let n_c = contact_normal(params, &normal, i, j);
    let speed = mass_norm(params, &new_state.v);
    let cos_phi = if speed > T::zero() {
        mass_inner(params, &n_c, &new_state.v) / speed
    } else {
        T::zero()
    };

    let record = CollisionRecord {
        time: at_time,
        pair: (i, j),
        offset,
        normal,
        cos_phi,
        rel_speed,
        tangency_margin,
        simultaneity_gap: T::infinity(),
        near_tangential,
        near_double: false,
    };
    Ok((new_state, record))
}

/* ---- event loop ---- */

#[derive(Debug, Clone)]
struct Event<T> {
    time: T,
    pair: (usize, usize),
    counts: (u64, u64),
}

impl<T: Scalar> PartialEq for Event<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: Scalar> Eq for Event<T> {}
impl<T: Scalar> PartialOrd for Event<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Scalar> Ord for Event<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap, we want earliest first
        other
            .time
            .partial_cmp(&self.time)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.pair.cmp(&self.pair))
    }
}

struct Queue<T> {
    heap: BinaryHeap<Event<T>>,
}

impl<T: Scalar> Queue<T> {
    fn new() -> Self {
        Queue { heap: BinaryHeap::new() }
    }

    fn push(&mut self, ev: Event<T>) {
        self.heap.push(ev);
    }

    /// Pops entries until one matches the current collision counts.
    fn pop_valid(&mut self, counts: &[u64]) -> Option<Event<T>> {
        while let Some(ev) = self.heap.pop() {
            if counts[ev.pair.0] == ev.counts.0 && counts[ev.pair.1] == ev.counts.1 {
                return Some(ev);
            }
        }
        None
    }

    /// Time of the next valid entry, discarding stale ones along the way.
    fn peek_valid_time(&mut self, counts: &[u64]) -> Option<T> {
        while let Some(ev) = self.heap.peek() {
            if counts[ev.pair.0] == ev.counts.0 && counts[ev.pair.1] == ev.counts.1 {
                return Some(ev.time);
            }
            self.heap.pop();
        }
        None
    }
}

/// Runs the event loop until the stopping rule fires.
pub fn simulate<T: Scalar>(
    params: &SystemParams<T>,
    initial: &PhasePoint<T>,
    stop: &Stop<T>,
    opts: &SimOptions<T>,
) -> CoreResult<Trajectory<T>> {
    let mut state = initial.clone();
    wrap_all(&mut state.q);
    validate_no_overlap(params, &state, opts.overlap_slack)?;
    if opts.require_normalized {
        validate_normalized(params, &state, T::lit(1e-9))?;
    }
    let initial = state.clone();

    let n = params.ball_count();
    let mut counts = vec![0u64; n];
    let mut queue = Queue::new();
    let mut time = T::zero();

    let horizon_from = |now: T| -> T {
        match stop.max_time {
            Some(mt) => mt - now + T::one(),
            None => opts.pair_horizon,
        }
    };
    let schedule =
        |queue: &mut Queue<T>, state: &PhasePoint<T>, now: T, counts: &[u64], i: usize, j: usize| {
            if let Some((dt, _)) = next_pair_collision(params, state, i, j, horizon_from(now), opts)
            {
                queue.push(Event { time: now + dt, pair: (i, j), counts: (counts[i], counts[j]) });
            }
        };

    for (i, j) in params.pairs() {
        schedule(&mut queue, &state, time, &counts, i, j);
    }

    let mut records: Vec<CollisionRecord<T>> = Vec::new();
    let mut prev_event_time: Option<T> = None;

    loop {
        if let Some(maxc) = stop.max_collisions {
            if records.len() as u64 >= maxc {
                break;
            }
        }
        let Some(ev) = queue.pop_valid(&counts) else {
            // quiescent: no more predicted contacts inside the horizon
            if stop.max_time.is_none() {
                return Err(CoreError::HorizonExhausted(format!(
                    "no further collisions within pair horizon {} after {} events",
                    opts.pair_horizon,
                    records.len()
                )));
            }
            break;
        };
        if let Some(mt) = stop.max_time {
            if ev.time > mt {
                break;
            }
        }

        let dt = ev.time - time;
        drift(&mut state, dt);
        time = ev.time;

        let (new_state, mut rec) = resolve_collision(params, &state, ev.pair, time, opts)?;
        state = new_state;
        counts[ev.pair.0] += 1;
        counts[ev.pair.1] += 1;

        let gap_prev = prev_event_time.map(|t0| time - t0);
        if let Some(g) = gap_prev {
            if g < opts.accumulation_alarm {
                return Err(CoreError::AccumulationAlarm {
                    time: time.as_f64(),
                    gap: g.as_f64(),
                    alarm: opts.accumulation_alarm.as_f64(),
                });
            }
        }
        prev_event_time = Some(time);

        // recompute only events involving the two balls that just collided
        for &b in &[ev.pair.0, ev.pair.1] {
            for k in 0..n {
                if k == b || (b == ev.pair.1 && k == ev.pair.0) {
                    continue;
                }
                let (lo, hi) = if k < b { (k, b) } else { (b, k) };
                schedule(&mut queue, &state, time, &counts, lo, hi);
            }
        }

        let gap_next = queue.peek_valid_time(&counts).map(|t| t - time);
        let gap = match (gap_prev, gap_next) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => T::infinity(),
        };
        rec.simultaneity_gap = gap;
        rec.near_double = gap < opts.double_window;
        records.push(rec);

        validate_no_overlap(params, &state, opts.overlap_slack)?;
    }

    // land exactly on the requested stopping time when it was the binding rule
    if let Some(mt) = stop.max_time {
        let done_by_count = stop.max_collisions.is_some_and(|mc| records.len() as u64 >= mc);
        if !done_by_count && time < mt {
            drift(&mut state, mt - time);
            time = mt;
        }
    }

    Ok(Trajectory { initial, records, final_state: state, elapsed: time })
}

/* ---- branch enumeration at near-double collisions ---- */

/// Enumerates the trajectory branches of a (near-)double collision: the
/// pending collisions within `window` of the earliest one, when they share a
/// ball, are resolved in both time orders. Disjoint simultaneous pairs
/// commute and yield a single branch; more than two clustered events are
/// rejected.
pub fn enumerate_branches<T: Scalar>(
    params: &SystemParams<T>,
    state: &PhasePoint<T>,
    window: T,
    opts: &SimOptions<T>,
) -> CoreResult<Vec<Trajectory<T>>> {
    validate_no_overlap(params, state, opts.overlap_slack)?;
    let mut pending: Vec<(T, (usize, usize))> = Vec::new();
    for (i, j) in params.pairs() {
        if let Some((t, _)) = next_pair_collision(params, state, i, j, opts.pair_horizon, opts) {
            pending.push((t, (i, j)));
        }
    }
    pending.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));

    if pending.is_empty() {
        return Ok(vec![Trajectory {
            initial: state.clone(),
            records: Vec::new(),
            final_state: state.clone(),
            elapsed: T::zero(),
        }]);
    }

    let t_first = pending[0].0;
    let cluster: Vec<(T, (usize, usize))> =
        pending.into_iter().take_while(|&(t, _)| t <= t_first + window).collect();

    if cluster.len() > 2 {
        return Err(CoreError::UnsupportedDegeneracy(format!(
            "{} collision events inside a window of {window}",
            cluster.len()
        )));
    }

    let shares_ball = cluster.len() == 2 && {
        let (a, b) = (cluster[0].1, cluster[1].1);
        a.0 == b.0 || a.0 == b.1 || a.1 == b.0 || a.1 == b.1
    };
    let orderings: Vec<Vec<(T, (usize, usize))>> = if shares_ball {
        vec![vec![cluster[0], cluster[1]], vec![cluster[1], cluster[0]]]
    } else {
        vec![cluster.clone()]
    };

    // forcing the later event first penetrates the other pair by O(window)
    let relaxed = SimOptions {
        contact_tol: opts.contact_tol + window * T::lit(8.0),
        overlap_slack: opts.overlap_slack + window * T::lit(8.0),
        ..opts.clone()
    };

    let mut branches = Vec::new();
    for ordering in orderings {
        let mut st = state.clone();
        let mut now = T::zero();
        let mut records = Vec::new();
        for (step, &(t_sched, pair)) in ordering.iter().enumerate() {
            if step == 0 {
                drift(&mut st, t_sched - now);
                now = t_sched;
            } else {
                // the first resolution may have shifted or killed this contact
                let (dist, _, vn) = pair_geometry(params, &st, pair.0, pair.1);
                let at_contact = dist <= params.contact_diameter() + relaxed.contact_tol;
                if at_contact {
                    if vn >= T::zero() {
                        break; // contact consumed by the other event's impulse
                    }
                    // resolve in place at the current time
                } else {
                    match next_pair_collision(params, &st, pair.0, pair.1, T::one(), opts) {
                        Some((dt, _)) => {
                            drift(&mut st, dt);
                            now = now + dt;
                        }
                        None => break,
                    }
                }
            }
            let (new_state, mut rec) = resolve_collision(params, &st, pair, now, &relaxed)?;
            rec.simultaneity_gap = if ordering.len() > 1 { T::zero() } else { rec.simultaneity_gap };
            rec.near_double = ordering.len() > 1;
            st = new_state;
            records.push(rec);
        }
        branches.push(Trajectory { initial: state.clone(), records, final_state: st, elapsed: now });
    }
    Ok(branches)
}

/* ---- deterministic replay ---- */

/// One collision replayed with its surrounding states.
#[derive(Debug, Clone)]
pub struct ContactEvent<T> {
    pub index: usize,
    /// Flight time since the previous event (or segment start).
    pub dt_before: T,
    /// State at contact, pre-collision velocities.
    pub pre: PhasePoint<T>,
    /// State at contact, post-collision velocities.
    pub post: PhasePoint<T>,
    pub record: CollisionRecord<T>,
}

/// Recomputes the deterministic state path of a trajectory, yielding each
/// collision with its pre/post states. Uses the same drift/resolve
/// primitives as the event loop, so the arithmetic agrees bitwise.
pub struct Replay<'a, T> {
    params: &'a SystemParams<T>,
    opts: SimOptions<T>,
    records: &'a [CollisionRecord<T>],
    state: PhasePoint<T>,
    time: T,
    idx: usize,
}

impl<'a, T: Scalar> Replay<'a, T> {
    pub fn new(params: &'a SystemParams<T>, traj: &'a Trajectory<T>) -> Self {
        Replay {
            params,
            opts: SimOptions::default(),
            records: &traj.records,
            state: traj.initial.clone(),
            time: T::zero(),
            idx: 0,
        }
    }

    /// Current state (post all events yielded so far).
    pub fn state(&self) -> &PhasePoint<T> {
        &self.state
    }

    pub fn time(&self) -> T {
        self.time
    }

    /// Time of the next collision still to be replayed.
    pub fn next_time(&self) -> Option<T> {
        self.records.get(self.idx).map(|r| r.time)
    }

    /// Drifts the remaining flight to `t_end` after the last yielded event.
    pub fn finish(mut self, t_end: T) -> PhasePoint<T> {
        drift(&mut self.state, t_end - self.time);
        self.state
    }
}

impl<'a, T: Scalar> Iterator for Replay<'a, T> {
    type Item = CoreResult<ContactEvent<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.idx >= self.records.len() {
            return None;
        }
        let rec = &self.records[self.idx];
        let dt = rec.time - self.time;
        drift(&mut self.state, dt);
        self.time = rec.time;
        let pre = self.state.clone();
        match resolve_collision(self.params, &pre, rec.pair, rec.time, &self.opts) {
            Ok((post, replay_rec)) => {
                self.state = post.clone();
                self.idx += 1;
                Some(Ok(ContactEvent {
                    index: self.idx - 1,
                    dt_before: dt,
                    pre,
                    post,
                    record: replay_rec,
                }))
            }
            Err(e) => Some(Err(e)),
        }
    }
}

/// State at an arbitrary time inside the segment. Collisions at exactly `t`
/// are applied before reporting.
pub fn state_at<T: Scalar>(
    params: &SystemParams<T>,
    traj: &Trajectory<T>,
    t: T,
) -> CoreResult<PhasePoint<T>> {
    if t < T::zero() || t > traj.elapsed {
        return Err(CoreError::InvalidState(format!(
            "time {t} outside segment [0, {}]",
            traj.elapsed
        )));
    }
    let mut replay = Replay::new(params, traj);
    while replay.next_time().is_some_and(|tk| tk <= t) {
        match replay.next() {
            Some(Ok(_)) => {}
            Some(Err(e)) => return Err(e),
            None => break,
        }
    }
    Ok(replay.finish(t))
}

/// Prefix of a trajectory up to time t.
pub fn truncate<T: Scalar>(
    params: &SystemParams<T>,
    traj: &Trajectory<T>,
    t: T,
) -> CoreResult<Trajectory<T>> {
    let records: Vec<CollisionRecord<T>> =
        traj.records.iter().take_while(|r| r.time <= t).cloned().collect();
    let final_state = state_at(params, traj, t)?;
    Ok(Trajectory { initial: traj.initial.clone(), records, final_state, elapsed: t })
}

/* ---- gap statistics ---- */

#[derive(Debug, Clone, Serialize)]
pub struct GapStats<T> {
    pub min_gap: Option<T>,
    /// (window size in events, minimal time span of any such window)
    pub window_spans: Vec<(usize, T)>,
}

/// Empirics on inter-collision gaps: smallest gap and, per window size, the
/// minimal time span covered by that many consecutive collisions.
pub fn gap_statistics<T: Scalar>(traj: &Trajectory<T>, windows: &[usize]) -> GapStats<T> {
    let times: Vec<T> = traj.records.iter().map(|r| r.time).collect();
    let min_gap = times
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(None, |acc: Option<T>, g| Some(acc.map_or(g, |a: T| a.min(g))));
    let mut window_spans = Vec::new();
    for &w in windows {
        if w >= 2 && times.len() >= w {
            let span = times
                .windows(w)
                .map(|win| win[w - 1] - win[0])
                .fold(T::infinity(), |a, b| a.min(b));
            window_spans.push((w, span));
        }
    }
    GapStats { min_gap, window_spans }
}

/* ---- exports ---- */

/// One JSON object per collision, stable field order, newline separated.
pub fn trajectory_to_jsonl<T: Scalar>(traj: &Trajectory<T>) -> CoreResult<String> {
    let mut out = String::new();
    for rec in &traj.records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HBCP";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint: versioned header, then radius, masses, positions and
/// velocities as IEEE-754 doubles, little-endian.
pub fn write_checkpoint<T: Scalar, W: Write>(
    w: &mut W,
    params: &SystemParams<T>,
    state: &PhasePoint<T>,
) -> CoreResult<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.ball_count() as u32).to_le_bytes())?;
    w.write_all(&(params.dimension() as u32).to_le_bytes())?;
    w.write_all(&params.radius().as_f64().to_le_bytes())?;
    for &m in params.masses() {
        w.write_all(&m.as_f64().to_le_bytes())?;
    }
    for &x in state.q.iter().chain(&state.v) {
        w.write_all(&x.as_f64().to_le_bytes())?;
    }
    Ok(())
}

/// Reads a checkpoint back at f64 precision.
pub fn read_checkpoint<R: Read>(r: &mut R) -> CoreResult<(SystemParams<f64>, PhasePoint<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CoreError::InvalidState("bad checkpoint magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::InvalidState(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let n = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let nu = u32::from_le_bytes(u32buf) as usize;
    let mut f64buf = [0u8; 8];
    let mut next = |r: &mut R| -> CoreResult<f64> {
        r.read_exact(&mut f64buf)?;
        Ok(f64::from_le_bytes(f64buf))
    };
    let radius = next(r)?;
    let masses: Vec<f64> = (0..n).map(|_| next(r)).collect::<CoreResult<_>>()?;
    let params = phase::make_system(n, nu, &masses, radius)?;
    let q: Vec<f64> = (0..n * nu).map(|_| next(r)).collect::<CoreResult<_>>()?;
    let v: Vec<f64> = (0..n * nu).map(|_| next(r)).collect::<CoreResult<_>>()?;
    Ok((params, PhasePoint::new(q, v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::{make_system, normalize_state};

    fn head_on() -> (SystemParams<f64>, PhasePoint<f64>) {
        let p = make_system(2, 2, &[1.0, 1.0], 0.1).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        let st = PhasePoint::new(vec![0.25, 0.5, 0.75, 0.5], vec![s, 0.0, -s, 0.0]);
        (p, st)
    }

    fn three_ball() -> (SystemParams<f64>, PhasePoint<f64>) {
        let p = make_system(3, 2, &[1.0, 2.0, 3.0], 0.05).unwrap();
        let q = vec![0.15, 0.3, 0.55, 0.62, 0.85, 0.1];
        let v_raw = vec![0.9, -0.2, -0.4, 0.7, 0.1, -0.3];
        let st = normalize_state(&q, &v_raw, &p).unwrap();
        (p, st)
    }

    #[test]
    fn head_on_contact_time_and_offset() {
        let (p, st) = head_on();
        let opts = SimOptions::default();
        let (t, off) = next_pair_collision(&p, &st, 0, 1, 10.0, &opts).unwrap();
        assert!((t - 0.3 / 2.0f64.sqrt()).abs() < 1e-12, "t = {t}");
        assert_eq!(off, vec![0, 0]);
    }

    #[test]
    fn receding_head_on_wraps_around() {
        let (p, mut st) = head_on();
        for v in &mut st.v {
            *v = -*v;
        }
        let opts = SimOptions::default();
        let (t, off) = next_pair_collision(&p, &st, 0, 1, 10.0, &opts).unwrap();
        assert!((t - 0.3 / 2.0f64.sqrt()).abs() < 1e-12, "t = {t}");
        assert_eq!(off, vec![-1, 0]);
    }

    #[test]
    fn parallel_motion_never_collides() {
        let p = make_system(2, 2, &[1.0, 1.0], 0.1).unwrap();
        let st = PhasePoint::new(vec![0.25, 0.5, 0.75, 0.5], vec![0.3, 0.4, 0.3, 0.4]);
        let opts = SimOptions::default();
        assert!(next_pair_collision(&p, &st, 0, 1, 100.0, &opts).is_none());
    }

    #[test]
    fn long_horizon_finds_multi_wrap_contact() {
        // slow diagonal relative drift: first contact only after several wraps
        let p = make_system(2, 2, &[1.0f64, 1.0], 0.05).unwrap();
        let st = PhasePoint::new(vec![0.1, 0.3, 0.6, 0.8], vec![0.31, 0.07, -0.09, 0.036]);
        let opts = SimOptions::default();
        let (t, off) = next_pair_collision(&p, &st, 0, 1, 1e4, &opts).unwrap();
        let mut moved = st.clone();
        drift(&mut moved, t);
        let d = crate::phase::pair_distance(&p, &moved, 0, 1);
        assert!((d - 0.1).abs() < 1e-9, "distance {d} at t = {t}, offset {off:?}");
        assert!(t > 1.0, "contact should take a while, got {t}");
    }

    #[test]
    fn resolve_swaps_equal_mass_head_on() {
        let (p, mut st) = head_on();
        let dt = 0.3 / 2.0f64.sqrt();
        drift(&mut st, dt);
        let opts = SimOptions::default();
        let (post, rec) = resolve_collision(&p, &st, (0, 1), dt, &opts).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        assert!((post.v[0] + s).abs() < 1e-12);
        assert!((post.v[2] - s).abs() < 1e-12);
        assert!((rec.rel_speed - 2.0f64.sqrt()).abs() < 1e-12);
        // head-on means the compound collision angle is zero
        assert!((rec.cos_phi - 1.0).abs() < 1e-12);
        // reflection law: normal relative component reverses exactly
        let vr_pre = [st.v[0] - st.v[2], st.v[1] - st.v[3]];
        let vr_post = [post.v[0] - post.v[2], post.v[1] - post.v[3]];
        let n = &rec.normal;
        let pre_n = vr_pre[0] * n[0] + vr_pre[1] * n[1];
        let post_n = vr_post[0] * n[0] + vr_post[1] * n[1];
        assert!((pre_n + post_n).abs() < 1e-12);
        assert!(rec.tangency_margin > 1.0);
        assert!(!rec.near_tangential);
    }

    #[test]
    fn resolve_rejects_receding_and_off_contact() {
        let (p, mut st) = head_on();
        let opts = SimOptions::default();
        assert!(resolve_collision(&p, &st, (0, 1), 0.0, &opts).is_err());
        let dt = 0.3 / 2.0f64.sqrt();
        drift(&mut st, dt);
        let mut receding = st.clone();
        for v in &mut receding.v {
            *v = -*v;
        }
        assert!(matches!(
            resolve_collision(&p, &receding, (0, 1), dt, &opts),
            Err(CoreError::ContractViolation(_))
        ));
    }

    #[test]
    fn resolve_involution_under_time_reversal() {
        let p = make_system(2, 2, &[1.0f64, 3.0], 0.1).unwrap();
        let q = vec![0.3, 0.5, 0.3 + 0.2 * 0.8, 0.5 + 0.2 * 0.6];
        let v_raw = vec![0.9, 0.2, -0.4, -0.5];
        let st = normalize_state(&q, &v_raw, &p).unwrap();
        let opts = SimOptions::default();
        let (post, _) = resolve_collision(&p, &st, (0, 1), 0.0, &opts).unwrap();
        let (back, _) = resolve_collision(&p, &post.reversed(), (0, 1), 0.0, &opts).unwrap();
        for k in 0..4 {
            assert!((back.v[k] + st.v[k]).abs() < 1e-13);
        }
    }

    #[test]
    fn per_collision_conservation() {
        let p = make_system(3, 2, &[1.0f64, 2.0, 3.0], 0.05).unwrap();
        let q = vec![0.2, 0.2, 0.2 + 0.1 * 0.6, 0.2 + 0.1 * 0.8, 0.7, 0.7];
        let v_raw = vec![0.5, 0.8, -0.7, -0.3, 0.2, -0.1];
        let st = normalize_state(&q, &v_raw, &p).unwrap();
        let opts = SimOptions::default();
        let e0 = crate::phase::kinetic_energy(&p, &st.v);
        let p0 = crate::phase::momentum_of(&p, &st.v);
        let (post, _) = resolve_collision(&p, &st, (0, 1), 0.0, &opts).unwrap();
        let e1 = crate::phase::kinetic_energy(&p, &post.v);
        let p1 = crate::phase::momentum_of(&p, &post.v);
        assert!((e1 - e0).abs() <= 1e-14);
        for k in 0..2 {
            assert!((p1[k] - p0[k]).abs() <= 1e-14);
        }
    }

    #[test]
    fn simulate_head_on_period() {
        let (p, st) = head_on();
        let opts = SimOptions::default();
        let traj = simulate(&p, &st, &Stop::collisions(3), &opts).unwrap();
        assert_eq!(traj.records.len(), 3);
        let t1 = traj.records[0].time;
        let t2 = traj.records[1].time;
        let t3 = traj.records[2].time;
        assert!((t1 - 0.3 / 2.0f64.sqrt()).abs() < 1e-12);
        // after the first bounce 0.6 of separation closes at relative speed sqrt(2)
        assert!(((t2 - t1) - 0.6 / 2.0f64.sqrt()).abs() < 1e-11);
        assert!(((t3 - t2) - (t2 - t1)).abs() < 1e-11);
        // alternating contact sides
        assert_eq!(traj.records[0].offset, vec![0, 0]);
        assert_eq!(traj.records[1].offset[0].abs(), 1);
        assert_eq!(traj.records[2].offset, vec![0, 0]);
        assert!((traj.elapsed - t3).abs() < 1e-15);
    }

    #[test]
    fn simulate_zero_time_is_identity() {
        let (p, st) = head_on();
        let opts = SimOptions::default();
        let traj = simulate(&p, &st, &Stop::time(0.0), &opts).unwrap();
        assert!(traj.records.is_empty());
        assert_eq!(traj.final_state.q, st.q);
        assert_eq!(traj.final_state.v, st.v);
    }

    #[test]
    fn simulate_conserves_over_many_collisions() {
        let (p, st) = three_ball();
        let opts = SimOptions::default();
        let traj = simulate(&p, &st, &Stop::collisions(500), &opts).unwrap();
        assert_eq!(traj.records.len(), 500);
        let e = crate::phase::kinetic_energy(&p, &traj.final_state.v);
        assert!((e - 0.5).abs() < 1e-12);
        let mom = crate::phase::momentum_of(&p, &traj.final_state.v);
        assert!(mom.iter().all(|&c| c.abs() < 1e-12));
        for w in traj.records.windows(2) {
            assert!(w[1].time > w[0].time);
        }
        let stats = gap_statistics(&traj, &[16]);
        assert!(stats.min_gap.unwrap() > 0.0);
        assert_eq!(stats.window_spans.len(), 1);
        assert!(stats.window_spans[0].1 > 0.0);
    }

    #[test]
    fn reversibility_over_moderate_run() {
        let (p, st) = three_ball();
        let opts = SimOptions::default();
        let fwd = simulate(&p, &st, &Stop::collisions(8), &opts).unwrap();
        let t_last = fwd.elapsed;
        // run the reversed endpoint for the same total time
        let back = simulate(&p, &fwd.final_state.reversed(), &Stop::time(t_last), &opts).unwrap();
        assert_eq!(back.records.len(), 8);
        let seq_f = fwd.sequence();
        let mut seq_b = back.sequence();
        seq_b.reverse();
        assert_eq!(seq_f, seq_b);
        // the dynamics amplifies the ~1e-16 endpoint rounding exponentially
        // (a factor ~ rel_speed/r per collision), so times and coordinates
        // can only mirror to the amplified-roundoff scale; the sequence
        // equality above is the exact part of the check
        for (rf, rb) in fwd.records.iter().zip(back.records.iter().rev()) {
            assert!(
                (rb.time - (t_last - rf.time)).abs() < 1e-4,
                "fwd t={} pair={:?} vs back t={} pair={:?}, t_last={}",
                rf.time,
                rf.pair,
                rb.time,
                rb.pair,
                t_last
            );
        }
        // endpoint returns to the reversed start
        let end = back.final_state;
        for k in 0..st.q.len() {
            let dq = crate::phase::min_image_delta(end.q[k], st.q[k]).abs();
            assert!(dq < 1e-4, "coordinate {k} off by {dq}");
            assert!((end.v[k] + st.v[k]).abs() < 1e-4);
        }
    }

    #[test]
    fn symmetric_double_collision_branches_differ() {
        let p = make_system(3, 2, &[1.0, 1.0, 1.0], 0.05).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        let d = 0.05;
        let st = PhasePoint::new(
            vec![0.5 - 0.1 - d, 0.5, 0.5, 0.5, 0.5 + 0.1 + d, 0.5],
            vec![s, 0.0, 0.0, 0.0, -s, 0.0],
        );
        let opts = SimOptions::default();
        let branches = enumerate_branches(&p, &st, 1e-9, &opts).unwrap();
        assert_eq!(branches.len(), 2);
        let (a, b) = (&branches[0], &branches[1]);
        assert_eq!(a.records.len(), 2);
        assert_eq!(b.records.len(), 2);
        assert_eq!(a.records[0].pair, (0, 1));
        assert_eq!(b.records[0].pair, (1, 2));
        let dv: f64 =
            a.final_state.v.iter().zip(&b.final_state.v).map(|(&x, &y)| (x - y).abs()).sum();
        assert!(dv > 0.1, "branches should disagree, total velocity diff {dv}");
    }

    #[test]
    fn orthogonal_shared_ball_collisions_commute() {
        let p = make_system(3, 2, &[1.0f64, 1.0, 1.0], 0.05).unwrap();
        let s = 0.5;
        let d = 0.04;
        let st = PhasePoint::new(
            vec![0.5 - 0.1 - d, 0.5, 0.5, 0.5, 0.5, 0.5 + 0.1 + d],
            vec![s, 0.0, 0.0, 0.0, 0.0, -s],
        );
        let opts = SimOptions { require_normalized: false, ..SimOptions::default() };
        let branches = enumerate_branches(&p, &st, 1e-9, &opts).unwrap();
        assert_eq!(branches.len(), 2);
        let (a, b) = (&branches[0], &branches[1]);
        assert_eq!(a.records.len(), 2);
        assert_eq!(b.records.len(), 2);
        for k in 0..st.v.len() {
            assert!((a.final_state.v[k] - b.final_state.v[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn disjoint_simultaneous_pairs_give_single_branch() {
        // two independent head-on pairs colliding at the same moment
        let p = make_system(4, 2, &[1.0, 1.0, 1.0, 1.0], 0.05).unwrap();
        let s = 0.5;
        let d = 0.03;
        let st = PhasePoint::new(
            vec![
                0.25 - 0.05 - d / 2.0, 0.25, 0.25 + 0.05 + d / 2.0, 0.25,
                0.75 - 0.05 - d / 2.0, 0.75, 0.75 + 0.05 + d / 2.0, 0.75,
            ],
            vec![s, 0.0, -s, 0.0, s, 0.0, -s, 0.0],
        );
        let opts = SimOptions { require_normalized: false, ..SimOptions::default() };
        let branches = enumerate_branches(&p, &st, 1e-9, &opts).unwrap();
        assert_eq!(branches.len(), 1);
        assert_eq!(branches[0].records.len(), 2);
    }

    #[test]
    fn three_clustered_events_are_rejected() {
        // three head-on pairs, all simultaneous
        let p = make_system(6, 2, &[1.0; 6], 0.03).unwrap();
        let s = 0.5;
        let d = 0.02;
        let mut q = Vec::new();
        let mut v = Vec::new();
        for (cx, cy) in [(0.2, 0.2), (0.6, 0.6), (0.2, 0.85)] {
            q.extend_from_slice(&[cx - 0.03 - d / 2.0, cy, cx + 0.03 + d / 2.0, cy]);
            v.extend_from_slice(&[s, 0.0, -s, 0.0]);
        }
        let st = PhasePoint::new(q, v);
        let opts = SimOptions { require_normalized: false, ..SimOptions::default() };
        assert!(matches!(
            enumerate_branches(&p, &st, 1e-9, &opts),
            Err(CoreError::UnsupportedDegeneracy(_))
        ));
    }

    #[test]
    fn no_pending_event_gives_single_trivial_branch() {
        let p = make_system(2, 2, &[1.0, 1.0], 0.1).unwrap();
        let st = PhasePoint::new(vec![0.25, 0.5, 0.75, 0.5], vec![0.3, 0.4, 0.3, 0.4]);
        let opts = SimOptions::default();
        let branches = enumerate_branches(&p, &st, 1e-9, &opts).unwrap();
        assert_eq!(branches.len(), 1);
        assert!(branches[0].records.is_empty());
    }

    #[test]
    fn replay_matches_simulation() {
        let (p, st) = three_ball();
        let opts = SimOptions::default();
        let traj = simulate(&p, &st, &Stop::collisions(20), &opts).unwrap();
        let mut count = 0;
        let mut last_post = None;
        for ev in Replay::new(&p, &traj) {
            let ev = ev.unwrap();
            count += 1;
            last_post = Some(ev.post);
        }
        assert_eq!(count, 20);
        let end = last_post.unwrap();
        assert_eq!(end.v, traj.final_state.v);
        assert_eq!(end.q, traj.final_state.q);
    }

    #[test]
    fn state_at_and_truncate_are_consistent() {
        let (p, st) = three_ball();
        let opts = SimOptions::default();
        let traj = simulate(&p, &st, &Stop::collisions(10), &opts).unwrap();
        let t_mid = (traj.records[4].time + traj.records[5].time) * 0.5;
        let mid = state_at(&p, &traj, t_mid).unwrap();
        let pre = truncate(&p, &traj, t_mid).unwrap();
        assert_eq!(pre.records.len(), 5);
        assert_eq!(pre.final_state.q, mid.q);
        let direct = simulate(&p, &st, &Stop::time(t_mid), &opts).unwrap();
        for k in 0..mid.q.len() {
            assert!((direct.final_state.q[k] - mid.q[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn jsonl_export_has_stable_field_order() {
        let (p, st) = head_on();
        let opts = SimOptions::default();
        let traj = simulate(&p, &st, &Stop::collisions(2), &opts).unwrap();
        let jsonl = trajectory_to_jsonl(&traj).unwrap();
        let lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(lines.len(), 2);
        let keys = [
            "\"time\"", "\"pair\"", "\"offset\"", "\"normal\"", "\"cos_phi\"", "\"rel_speed\"",
            "\"tangency_margin\"", "\"simultaneity_gap\"", "\"near_tangential\"", "\"near_double\"",
        ];
        for line in &lines {
            let positions: Vec<usize> = keys
                .iter()
                .map(|k| line.find(k).unwrap_or_else(|| panic!("{k} missing in {line}")))
                .collect();
            for w in positions.windows(2) {
                assert!(w[0] < w[1], "field order drifted in {line}");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (p, st) = head_on();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, &st).unwrap();
        let (p2, st2) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(p2.ball_count(), 2);
        assert_eq!(p2.dimension(), 2);
        assert_eq!(p2.radius(), 0.1);
        assert_eq!(st2.q, st.q);
        assert_eq!(st2.v, st.v);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let buf = b"NOPE00000000".to_vec();
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
