//! Collision-sequence combinatorics: contact graphs and their connectivity,
//! greedy decomposition into connected blocks, and the quantitative
//! relative-speed bounds that the mass spectrum alone dictates.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{CoreError, CoreResult};
use crate::flow::{CollisionRecord, Replay, Trajectory};
use crate::phase::{PhasePoint, SystemParams};
use crate::scalar::Scalar;

/* ---- union-find ---- */

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
    components: usize,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n], components: n }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (hi, lo) = if self.rank[ra] >= self.rank[rb] { (ra, rb) } else { (rb, ra) };
        self.parent[lo] = hi;
        if self.rank[ra] == self.rank[rb] {
            self.rank[hi] += 1;
        }
        self.components -= 1;
    }
}

/* ---- collision graphs ---- */

/// One labeled contact, kept in time order.
#[derive(Debug, Clone, Serialize)]
pub struct GraphEdge<T> {
    pub pair: (usize, usize),
    pub time: T,
}

/// Multigraph over the ball labels induced by a slice of collision records.
#[derive(Debug, Clone, Serialize)]
pub struct CollisionGraph<T> {
    pub vertices: usize,
    pub edges: Vec<GraphEdge<T>>,
}

impl<T: Scalar> CollisionGraph<T> {
    pub fn component_count(&self) -> usize {
        let mut uf = UnionFind::new(self.vertices);
        for e in &self.edges {
            uf.union(e.pair.0, e.pair.1);
        }
        uf.components
    }

    pub fn is_connected(&self) -> bool {
        self.component_count() == 1
    }

    /// Plain text export, one "i j t" line per edge in time order.
    pub fn edge_list(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            out.push_str(&format!("{} {} {}\n", e.pair.0, e.pair.1, e.time));
        }
        out
    }
}

/// Builds the contact graph of `records[from..to]` over `vertices` balls.
/// An empty range yields the edgeless graph.
pub fn build_graph<T: Scalar>(
    vertices: usize,
    records: &[CollisionRecord<T>],
    from: usize,
    to: usize,
) -> CoreResult<CollisionGraph<T>> {
    if from > to || to > records.len() {
        return Err(CoreError::InvalidState(format!(
            "bad record range {from}..{to} of {}",
            records.len()
        )));
    }
    let edges = records[from..to]
        .iter()
        .map(|r| GraphEdge { pair: r.pair, time: r.time })
        .collect();
    Ok(CollisionGraph { vertices, edges })
}

/* ---- richness ---- */

/// Result of the greedy decomposition into connected consecutive blocks.
#[derive(Debug, Clone, Serialize)]
pub struct RichnessOutcome {
    pub is_rich: bool,
    pub block_count: usize,
    /// Inclusive record-index ranges of the closed blocks, in time order.
    pub blocks: Vec<(usize, usize)>,
}

/// Scans the time-ordered records, closing a block as soon as the edges
/// gathered since the previous close connect all `vertices` labels. The
/// greedy earliest-closing rule maximizes the number of disjoint consecutive
/// connected blocks; the sequence is called rich at level `c` when at least
/// `c` blocks close.
pub fn richness<T: Scalar>(
    vertices: usize,
    records: &[CollisionRecord<T>],
    c: usize,
) -> CoreResult<RichnessOutcome> {
    if c < 1 {
        return Err(CoreError::InvalidState("richness level must be at least 1".into()));
    }
    let mut blocks = Vec::new();
    let mut uf = UnionFind::new(vertices);
    let mut start = 0usize;
    for (idx, r) in records.iter().enumerate() {
        uf.union(r.pair.0, r.pair.1);
        if uf.components == 1 {
            blocks.push((start, idx));
            start = idx + 1;
            uf = UnionFind::new(vertices);
        }
    }
    Ok(RichnessOutcome { is_rich: blocks.len() >= c, block_count: blocks.len(), blocks })
}

/* ---- mass-recursion speed bounds ---- */

/// Memoized value of the bound recursion at a = 1 for one mass multiset.
/// Keyed on sorted f64 bit patterns so equal multisets share one entry.
fn f_unit<T: Scalar>(masses: &[T], memo: &mut HashMap<Vec<u64>, T>) -> T {
    let n = masses.len();
    if n <= 1 {
        return T::zero();
    }
    if n == 2 {
        return T::one();
    }
    let key: Vec<u64> = masses.iter().map(|m| m.as_f64().to_bits()).collect();
    if let Some(&v) = memo.get(&key) {
        return v;
    }

    // unordered two-class partitions: element 0 stays in the first class
    let mut best = T::zero();
    for pick in 0..(1u32 << (n - 1)) {
        let mut d1 = vec![masses[0]];
        let mut d2 = Vec::new();
        for b in 0..(n - 1) {
            if pick >> b & 1 == 1 {
                d1.push(masses[b + 1]);
            } else {
                d2.push(masses[b + 1]);
            }
        }
        if d2.is_empty() {
            continue;
        }
        let g = T::one() + f_unit(&d1, memo) + f_unit(&d2, memo);
        best = best.max(g);
    }

    let total: T = masses.iter().copied().sum();
    let min = masses.iter().copied().fold(T::infinity(), T::min);
    let val = T::two() * (total / min).sqrt() * best;
    memo.insert(key, val);
    val
}

/// Worst-case relative-speed amplification reachable from initial pairwise
/// speeds at most `a`, by the two-class partition recursion over the mass
/// multiset. Linear in `a`; exactly `a` for two balls and 0 for one.
pub fn f_bound<T: Scalar>(a: T, masses: &[T]) -> CoreResult<T> {
    if !(a > T::zero()) {
        return Err(CoreError::InvalidState(format!("scale must be positive, got {a}")));
    }
    if masses.iter().any(|&m| !(m > T::zero())) {
        return Err(CoreError::InvalidState("masses must be positive".into()));
    }
    let mut sorted = masses.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    let mut memo = HashMap::new();
    Ok(a * f_unit(&sorted, &mut memo))
}

/// Largest speed threshold G whose amplification bound stays below
/// 1/sqrt(total mass), shrunk by 1% so the strict inequality survives
/// floating point: G = 0.99 / (sqrt(M) * f_bound(1)).
pub fn g_threshold<T: Scalar>(params: &SystemParams<T>) -> T {
    let mut sorted = params.masses().to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    let mut memo = HashMap::new();
    let f1 = f_unit(&sorted, &mut memo);
    T::lit(0.99) / (params.total_mass().sqrt() * f1)
}

/* ---- witness collisions ---- */

/// First collision of the segment whose relative speed clears the mass
/// threshold. Requires the segment's contact graph to be connected; on a
/// connected segment of a unit-energy state a witness always exists, so
/// coming up empty falsifies something and is reported as an error carrying
/// the threshold and the fastest speed seen.
pub fn witness_collision<T: Scalar>(
    params: &SystemParams<T>,
    records: &[CollisionRecord<T>],
) -> CoreResult<(usize, CollisionRecord<T>)> {
    let graph = build_graph(params.ball_count(), records, 0, records.len())?;
    if !graph.is_connected() {
        return Err(CoreError::InvalidState(format!(
            "contact graph has {} components; witness search needs a connected segment",
            graph.component_count()
        )));
    }
    let g = g_threshold(params);
    let mut max_seen = T::zero();
    for (idx, r) in records.iter().enumerate() {
        if r.rel_speed >= g {
            return Ok((idx, r.clone()));
        }
        max_seen = max_seen.max(r.rel_speed);
    }
    Err(CoreError::Consistency(format!(
        "no collision reached the threshold {g}; fastest seen {max_seen} over {} records",
        records.len()
    )))
}

/* ---- relative-speed envelope ---- */

/// Outcome of auditing the pairwise-speed bound along a trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct SpeedEnvelopeReport<T> {
    /// The audited ceiling 2 a sqrt(M/m).
    pub bound: T,
    pub initial_max_speed: T,
    pub max_speed: T,
    /// max over events of (pairwise speed / bound).
    pub max_ratio: T,
    pub worst_time: T,
    pub worst_pair: (usize, usize),
    pub events_checked: usize,
}

fn max_pair_speed<T: Scalar>(params: &SystemParams<T>, v: &[T]) -> (T, (usize, usize)) {
    let nu = params.dimension();
    let mut best = T::zero();
    let mut pair = (0, 1);
    for (i, j) in params.pairs() {
        let s2: T = (0..nu)
            .map(|k| {
                let d = v[i * nu + k] - v[j * nu + k];
                d * d
            })
            .sum();
        let s = s2.sqrt();
        if s > best {
            best = s;
            pair = (i, j);
        }
    }
    (best, pair)
}

/// Checks that no pairwise relative speed ever exceeds 2 a sqrt(M/m), given
/// that all pairwise speeds start at or below `a`. Velocities only change at
/// collisions, so checking the initial state and each post-collision state
/// covers all times. Works on unnormalized states by design.
pub fn relative_speed_envelope<T: Scalar>(
    params: &SystemParams<T>,
    traj: &Trajectory<T>,
    a: T,
) -> CoreResult<SpeedEnvelopeReport<T>> {
    if !(a > T::zero()) {
        return Err(CoreError::InvalidState(format!("speed scale must be positive, got {a}")));
    }
    let (initial_max, init_pair) = max_pair_speed(params, &traj.initial.v);
    if initial_max > a * (T::one() + T::lit(1e-12)) {
        return Err(CoreError::InvalidState(format!(
            "pair {init_pair:?} starts at relative speed {initial_max} > {a}"
        )));
    }
    let ratio = params.total_mass() / params.m_min();
    let bound = T::two() * a * ratio.sqrt();
    let tol = bound * T::lit(1e-12);

    let mut max_speed = initial_max;
    let mut max_ratio = initial_max / bound;
    let mut worst_time = T::zero();
    let mut worst_pair = init_pair;
    let mut events = 0usize;

    let mut check = |state: &PhasePoint<T>, time: T| -> CoreResult<()> {
        let (s, p) = max_pair_speed(params, &state.v);
        if s > bound + tol {
            return Err(CoreError::Consistency(format!(
                "pair {p:?} reached relative speed {s} > bound {bound} at t = {time}"
            )));
        }
        if s / bound > max_ratio {
            max_ratio = s / bound;
            max_speed = s;
            worst_time = time;
            worst_pair = p;
        }
        Ok(())
    };

    for ev in Replay::new(params, traj) {
        let ev = ev?;
        check(&ev.post, ev.record.time)?;
        events += 1;
    }

    Ok(SpeedEnvelopeReport {
        bound,
        initial_max_speed: initial_max,
        max_speed,
        max_ratio,
        worst_time,
        worst_pair,
        events_checked: events,
    })
}

/* ---- tests ---- */
