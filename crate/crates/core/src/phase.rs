//! System parameters, phase points, the kinetic-energy (mass) metric, and
//! torus arithmetic.
//!
//! Balls live on the flat unit torus; positions are kept in [0,1)^nu and all
//! compound-space geometry (momentum-zero subspace Z, collision generator
//! subspaces and their orthocomplements, orthogonal sections) is expressed in
//! the mass metric <u,w> = sum_i m_i <u_i, w_i>.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};
use crate::linalg::{axpy, gram_schmidt};
use crate::scalar::Scalar;

/// Static description of the system: ball count, dimension, masses, radius.
#[derive(Debug, Clone, Serialize)]
pub struct SystemParams<T> {
    ball_count: usize,
    dimension: usize,
    masses: Vec<T>,
    radius: T,
    total_mass: T,
    m_min: T,
}

/// Builds and validates system parameters.
pub fn make_system<T: Scalar>(
    ball_count: usize,
    dimension: usize,
    masses: &[T],
    radius: T,
) -> CoreResult<SystemParams<T>> {
    if ball_count < 2 {
        return Err(CoreError::InvalidSystem(format!(
            "need at least 2 balls, got {ball_count}"
        )));
    }
    if dimension < 2 {
        return Err(CoreError::InvalidSystem(format!(
            "need dimension >= 2, got {dimension}"
        )));
    }
    if masses.len() != ball_count {
        return Err(CoreError::InvalidSystem(format!(
            "expected {ball_count} masses, got {}",
            masses.len()
        )));
    }
    if let Some(m) = masses.iter().find(|&&m| !(m > T::zero()) || !m.is_finite()) {
        return Err(CoreError::InvalidSystem(format!(
            "masses must be positive and finite, got {m}"
        )));
    }
    if !(radius > T::zero()) {
        return Err(CoreError::InvalidSystem(format!(
            "radius must be positive, got {radius}"
        )));
    }
    // 2r < 1/2 keeps the {-1,0,1}^nu image set exhaustive for contact tests.
    if T::two() * radius >= T::half() {
        return Err(CoreError::InvalidSystem(format!(
            "2r = {} must stay below 1/2 on the unit torus",
            T::two() * radius
        )));
    }
    let total_mass = masses.iter().copied().sum();
    let m_min = masses
        .iter()
        .copied()
        .fold(T::infinity(), |a, b| a.min(b));
    Ok(SystemParams {
        ball_count,
        dimension,
        masses: masses.to_vec(),
        radius,
        total_mass,
        m_min,
    })
}

impl<T: Scalar> SystemParams<T> {
    pub fn ball_count(&self) -> usize {
        self.ball_count
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn masses(&self) -> &[T] {
        &self.masses
    }

    pub fn mass(&self, i: usize) -> T {
        self.masses[i]
    }

    pub fn radius(&self) -> T {
        self.radius
    }

    pub fn total_mass(&self) -> T {
        self.total_mass
    }

    pub fn m_min(&self) -> T {
        self.m_min
    }

    /// Dimension of the compound configuration space, nu * N.
    pub fn compound_dim(&self) -> usize {
        self.ball_count * self.dimension
    }

    /// Contact distance between ball centers.
    pub fn contact_diameter(&self) -> T {
        T::two() * self.radius
    }

    /// Base-sphere radius of the (i,j) collision cylinder in the mass metric:
    /// 2r * sqrt(m_i m_j / (m_i + m_j)).
    pub fn pair_radius(&self, i: usize, j: usize) -> T {
        let (mi, mj) = (self.masses[i], self.masses[j]);
        T::two() * self.radius * (mi * mj / (mi + mj)).sqrt()
    }

    /// Reduced mass m_i m_j / (m_i + m_j).
    pub fn reduced_mass(&self, i: usize, j: usize) -> T {
        let (mi, mj) = (self.masses[i], self.masses[j]);
        mi * mj / (mi + mj)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.ball_count;
        (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
    }
}

/// Positions and velocities of all balls, flat slot-major storage
/// (ball i occupies coordinates [i*nu, (i+1)*nu)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint<T> {
    pub q: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> PhasePoint<T> {
    pub fn new(q: Vec<T>, v: Vec<T>) -> Self {
        assert_eq!(q.len(), v.len());
        PhasePoint { q, v }
    }

    pub fn ball_pos(&self, params: &SystemParams<T>, i: usize) -> &[T] {
        let nu = params.dimension();
        &self.q[i * nu..(i + 1) * nu]
    }

    pub fn ball_vel(&self, params: &SystemParams<T>, i: usize) -> &[T] {
        let nu = params.dimension();
        &self.v[i * nu..(i + 1) * nu]
    }

    /// Velocity-reversed copy (the time-reversal involution).
    pub fn reversed(&self) -> Self {
        PhasePoint {
            q: self.q.clone(),
            v: self.v.iter().map(|&x| -x).collect(),
        }
    }
}

/// A compound vector constrained to the momentum-zero subspace Z.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReducedVector<T>(Vec<T>);

impl<T: Scalar> ReducedVector<T> {
    /// Projects an arbitrary compound vector onto Z (mass-orthogonally).
    pub fn project(params: &SystemParams<T>, raw: &[T]) -> Self {
        ReducedVector(project_momentum_zero(params, raw))
    }

    /// Accepts a vector already in Z, within tolerance.
    pub fn try_new(params: &SystemParams<T>, raw: Vec<T>) -> CoreResult<Self> {
        let p = momentum_of(params, &raw);
        let scale = mass_norm(params, &raw).max(T::one());
        if p.iter().any(|&c| c.abs() > T::lit(1e-9) * scale) {
            return Err(CoreError::InvalidState(
                "vector carries nonzero total momentum".into(),
            ));
        }
        Ok(ReducedVector(raw))
    }

    /// Wraps a vector known to lie in Z (linear images of Z vectors).
    pub(crate) fn from_trusted(raw: Vec<T>) -> Self {
        ReducedVector(raw)
    }

    pub fn components(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

/* ---- torus arithmetic ---- */

/// Wraps a coordinate into [0,1).
pub fn wrap01<T: Scalar>(x: T) -> T {
    let w = x - x.floor();
    if w >= T::one() {
        T::zero()
    } else {
        w
    }
}

/// Wraps every coordinate of a position vector into [0,1).
pub fn wrap_all<T: Scalar>(q: &mut [T]) {
    for x in q {
        *x = wrap01(*x);
    }
}

/// Per-coordinate minimum-image difference b - a, wrapped into [-1/2, 1/2).
pub fn min_image_delta<T: Scalar>(a: T, b: T) -> T {
    let d = b - a;
    d - (d + T::half()).floor()
}

/// All 3^nu lattice-translated displacements q_j + offset - q_i.
pub fn pair_images<T: Scalar>(qi: &[T], qj: &[T]) -> Vec<(Vec<i32>, Vec<T>)> {
    let nu = qi.len();
    debug_assert_eq!(nu, qj.len());
    let total = 3usize.pow(nu as u32);
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        let mut c = code;
        let mut offset = Vec::with_capacity(nu);
        let mut disp = Vec::with_capacity(nu);
        for k in 0..nu {
            let o = (c % 3) as i32 - 1;
            c /= 3;
            offset.push(o);
            disp.push(qj[k] + T::from_i32(o).expect("small int") - qi[k]);
        }
        out.push((offset, disp));
    }
    out
}

/// Minimum-image center distance of balls i and j.
pub fn pair_distance<T: Scalar>(params: &SystemParams<T>, state: &PhasePoint<T>, i: usize, j: usize) -> T {
    let qi = state.ball_pos(params, i);
    let qj = state.ball_pos(params, j);
    let mut d2 = T::zero();
    for k in 0..params.dimension() {
        let d = min_image_delta(qi[k], qj[k]);
        d2 = d2 + d * d;
    }
    d2.sqrt()
}

/* ---- mass metric ---- */

/// Kinetic-metric inner product sum_i m_i <u_i, w_i> on flat compound vectors.
pub fn mass_inner<T: Scalar>(params: &SystemParams<T>, u: &[T], w: &[T]) -> T {
    let nu = params.dimension();
    assert_eq!(u.len(), params.compound_dim(), "dimension mismatch");
    assert_eq!(w.len(), params.compound_dim(), "dimension mismatch");
    let mut acc = T::zero();
    for i in 0..params.ball_count() {
        let m = params.mass(i);
        let mut s = T::zero();
        for k in 0..nu {
            s = s + u[i * nu + k] * w[i * nu + k];
        }
        acc = acc + m * s;
    }
    acc
}

pub fn mass_norm<T: Scalar>(params: &SystemParams<T>, u: &[T]) -> T {
    mass_inner(params, u, u).sqrt()
}

/// Total momentum sum_i m_i v_i as a nu-vector.
pub fn momentum_of<T: Scalar>(params: &SystemParams<T>, v: &[T]) -> Vec<T> {
    let nu = params.dimension();
    let mut p = vec![T::zero(); nu];
    for i in 0..params.ball_count() {
        for k in 0..nu {
            p[k] = p[k] + params.mass(i) * v[i * nu + k];
        }
    }
    p
}

/// Kinetic energy (1/2) sum_i m_i ||v_i||^2.
pub fn kinetic_energy<T: Scalar>(params: &SystemParams<T>, v: &[T]) -> T {
    T::half() * mass_inner(params, v, v)
}

/// Mass-orthogonal projection onto Z: subtracts the mass-weighted mean
/// (the uniform-translation component) from every slot.
pub fn project_momentum_zero<T: Scalar>(params: &SystemParams<T>, x: &[T]) -> Vec<T> {
    let nu = params.dimension();
    let p = momentum_of(params, x);
    let mut out = x.to_vec();
    for i in 0..params.ball_count() {
        for k in 0..nu {
            out[i * nu + k] = out[i * nu + k] - p[k] / params.total_mass();
        }
    }
    out
}

/// Mass-orthogonal projection onto L_{i,j}, the orthocomplement of the
/// generator subspace A_{i,j} = {x_i = x_j}: only the (i,j) relative part
/// survives, distributed with weights m_j/(m_i+m_j) and -m_i/(m_i+m_j).
pub fn project_pair_relative<T: Scalar>(
    params: &SystemParams<T>,
    x: &[T],
    i: usize,
    j: usize,
) -> Vec<T> {
    let nu = params.dimension();
    let (mi, mj) = (params.mass(i), params.mass(j));
    let msum = mi + mj;
    let mut out = vec![T::zero(); x.len()];
    for k in 0..nu {
        let s = x[i * nu + k] - x[j * nu + k];
        out[i * nu + k] = mj / msum * s;
        out[j * nu + k] = -(mi / msum) * s;
    }
    out
}

/// Mass-metric distance from x to the generator subspace A_{i,j}.
pub fn generator_distance<T: Scalar>(
    params: &SystemParams<T>,
    x: &[T],
    i: usize,
    j: usize,
) -> T {
    mass_norm(params, &project_pair_relative(params, x, i, j))
}

/// Compound inner unit normal (mass metric) of the collision cylinder at a
/// contact of pair (i,j) with Euclidean unit separation u = (q_i - q_j)/|..|:
/// slot i carries c*u/m_i, slot j carries -c*u/m_j, c = sqrt(reduced mass).
pub fn contact_normal<T: Scalar>(
    params: &SystemParams<T>,
    u_rel: &[T],
    i: usize,
    j: usize,
) -> Vec<T> {
    let nu = params.dimension();
    let c = params.reduced_mass(i, j).sqrt();
    let mut n = vec![T::zero(); params.compound_dim()];
    for k in 0..nu {
        n[i * nu + k] = c * u_rel[k] / params.mass(i);
        n[j * nu + k] = -(c * u_rel[k] / params.mass(j));
    }
    n
}

/// Mass-metric reflection across the hyperplane orthogonal to the unit
/// vector n: x - 2 <x,n> n.
pub fn reflect<T: Scalar>(params: &SystemParams<T>, x: &[T], n: &[T]) -> Vec<T> {
    let c = mass_inner(params, x, n);
    let mut out = x.to_vec();
    axpy(&mut out, -T::two() * c, n);
    out
}

/* ---- normalization and validation ---- */

/// Removes total momentum and rescales to kinetic energy 1/2; idempotent.
pub fn normalize_state<T: Scalar>(
    q: &[T],
    v_raw: &[T],
    params: &SystemParams<T>,
) -> CoreResult<PhasePoint<T>> {
    let mut q = q.to_vec();
    wrap_all(&mut q);
    let state_check = PhasePoint::new(q.clone(), vec![T::zero(); q.len()]);
    validate_no_overlap(params, &state_check, T::zero())?;

    let v = project_momentum_zero(params, v_raw);
    let speed = mass_norm(params, &v);
    if speed < T::lit(1e-12) {
        return Err(CoreError::InvalidState(
            "velocity vanishes after momentum removal (pure translation)".into(),
        ));
    }
    let v = v.iter().map(|&x| x / speed).collect();
    Ok(PhasePoint::new(q, v))
}

/// Checks that every pair keeps center distance >= 2r - slack.
pub fn validate_no_overlap<T: Scalar>(
    params: &SystemParams<T>,
    state: &PhasePoint<T>,
    slack: T,
) -> CoreResult<()> {
    for (i, j) in params.pairs() {
        let d = pair_distance(params, state, i, j);
        if d < params.contact_diameter() - slack {
            return Err(CoreError::InvalidState(format!(
                "balls {i} and {j} overlap: distance {d} < {}",
                params.contact_diameter()
            )));
        }
    }
    Ok(())
}

/// Checks the momentum-zero and energy normalizations within tol.
pub fn validate_normalized<T: Scalar>(
    params: &SystemParams<T>,
    state: &PhasePoint<T>,
    tol: T,
) -> CoreResult<()> {
    let p = momentum_of(params, &state.v);
    if p.iter().any(|&c| c.abs() > tol) {
        return Err(CoreError::InvalidState(format!(
            "total momentum {:?} exceeds tolerance {tol}",
            p.iter().map(|x| x.as_f64()).collect::<Vec<_>>()
        )));
    }
    let twice_e = mass_inner(params, &state.v, &state.v);
    if (twice_e - T::one()).abs() > tol {
        return Err(CoreError::InvalidState(format!(
            "kinetic energy {} not normalized to 1/2",
            T::half() * twice_e
        )));
    }
    Ok(())
}

/* ---- bases ---- */

/// Mass-orthonormal basis of Z built deterministically from the coordinate
/// directions (dimension nu*(N-1)).
pub fn z_basis<T: Scalar>(params: &SystemParams<T>) -> Vec<Vec<T>> {
    basis_from_coordinates(params, &[])
}

/// Mass-orthonormal basis of the orthogonal section Z ∩ v^perp at a phase
/// point with unit velocity v (dimension nu*(N-1) - 1). Deterministic
/// Gram-Schmidt over the coordinate directions with v appended first.
pub fn section_basis<T: Scalar>(params: &SystemParams<T>, v: &[T]) -> Vec<Vec<T>> {
    let vn = mass_norm(params, v);
    let v_unit: Vec<T> = v.iter().map(|&x| x / vn).collect();
    basis_from_coordinates(params, &[v_unit])
}

fn basis_from_coordinates<T: Scalar>(params: &SystemParams<T>, seed: &[Vec<T>]) -> Vec<Vec<T>> {
    let d = params.compound_dim();
    let inner = |a: &[T], b: &[T]| mass_inner(params, a, b);
    let candidates: Vec<Vec<T>> = (0..d)
        .map(|k| {
            let mut e = vec![T::zero(); d];
            e[k] = T::one();
            project_momentum_zero(params, &e)
        })
        .collect();
    gram_schmidt(seed, &candidates, &inner, T::lit(1e-8))
}

/// Expands section coordinates back to a compound vector.
pub fn from_basis<T: Scalar>(basis: &[Vec<T>], coords: &[T]) -> Vec<T> {
    let d = basis.first().map_or(0, Vec::len);
    let mut out = vec![T::zero(); d];
    for (b, &c) in basis.iter().zip(coords) {
        axpy(&mut out, c, b);
    }
    out
}

/// Coordinates of a compound vector in a mass-orthonormal basis.
pub fn to_basis<T: Scalar>(params: &SystemParams<T>, basis: &[Vec<T>], x: &[T]) -> Vec<T> {
    basis.iter().map(|b| mass_inner(params, x, b)).collect()
}
