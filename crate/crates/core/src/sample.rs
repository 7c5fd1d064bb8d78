//! Reproducible random phase points: uniform packings by whole-configuration
//! rejection, velocities drawn from the rotation-invariant measure on the
//! momentum-zero unit-energy sphere, and near-grazing bounce states for
//! sufficiency scans.
//!
//! Determinism contract: every draw flows through a counter-keyed ChaCha12
//! generator with one independent stream per sample index, so sample k is
//! bit-identical no matter how many other samples run or in what order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, CoreResult};
use crate::flow::{resolve_collision, CollisionRecord, SimOptions};
use crate::linalg::{axpy, dot, norm};
use crate::phase::{
    mass_norm, min_image_delta, normalize_state, project_momentum_zero, wrap01, PhasePoint,
    SystemParams,
};
use crate::scalar::Scalar;

/// Whole-configuration attempts before a draw gives up.
const PLACEMENT_BUDGET: usize = 100_000;

/// Generator for one sample index: the master seed keys the cipher and the
/// index selects an independent stream, so adding samples never perturbs
/// earlier ones.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn gauss<T: Scalar>(rng: &mut ChaCha12Rng) -> T {
    T::lit(rng.sample::<f64, _>(StandardNormal))
}

fn uniform01<T: Scalar>(rng: &mut ChaCha12Rng) -> T {
    T::lit(rng.gen_range(0.0..1.0))
}

/// Isotropic Euclidean unit vector in `nu` coordinates.
fn unit_direction<T: Scalar>(rng: &mut ChaCha12Rng, nu: usize) -> Vec<T> {
    loop {
        let x: Vec<T> = (0..nu).map(|_| gauss::<T>(rng)).collect();
        let n = norm(&x);
        if n > T::lit(1e-6) {
            return x.iter().map(|&e| e / n).collect();
        }
    }
}

/// Toroidal center distance between two raw coordinate blocks.
fn block_gap<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut d2 = T::zero();
    for k in 0..a.len() {
        let d = min_image_delta(a[k], b[k]);
        d2 = d2 + d * d;
    }
    d2.sqrt()
}

fn placement_error(what: &str) -> CoreError {
    CoreError::SamplingExhausted(format!(
        "no admissible {what} found in {PLACEMENT_BUDGET} attempts; \
         reduce the ball radius or the ball count"
    ))
}

/// Uniform admissible configuration: draws all centers at once and accepts
/// only overlap-free configurations, which is exact rejection sampling from
/// the uniform measure on the admissible set.
fn draw_positions<T: Scalar>(params: &SystemParams<T>, rng: &mut ChaCha12Rng) -> CoreResult<Vec<T>> {
    let n = params.ball_count();
    let nu = params.dimension();
    let two_r = params.contact_diameter();
    'attempt: for _ in 0..PLACEMENT_BUDGET {
        let q: Vec<T> = (0..n * nu).map(|_| uniform01(rng)).collect();
        for i in 0..n {
            for j in (i + 1)..n {
                if block_gap(&q[i * nu..(i + 1) * nu], &q[j * nu..(j + 1) * nu]) <= two_r {
                    continue 'attempt;
                }
            }
        }
        return Ok(q);
    }
    Err(placement_error("configuration"))
}

/// Velocity from the rotation-invariant measure on the momentum-zero
/// unit-energy sphere: per-component Gaussians with variance 1/m_i are
/// isotropic in the mass metric, so projecting and normalizing lands
/// uniformly on the sphere section.
fn draw_velocities<T: Scalar>(params: &SystemParams<T>, rng: &mut ChaCha12Rng) -> Vec<T> {
    let nu = params.dimension();
    loop {
        let mut v: Vec<T> = Vec::with_capacity(params.compound_dim());
        for i in 0..params.ball_count() {
            let s = params.mass(i).sqrt().recip();
            for _ in 0..nu {
                v.push(gauss::<T>(rng) * s);
            }
        }
        let vz = project_momentum_zero(params, &v);
        let n = mass_norm(params, &vz);
        if n > T::lit(1e-6) {
            return vz.iter().map(|&e| e / n).collect();
        }
    }
}

/// Random phase point: uniform overlap-free centers, microcanonical velocity.
pub fn random_state<T: Scalar>(
    params: &SystemParams<T>,
    rng: &mut ChaCha12Rng,
) -> CoreResult<PhasePoint<T>> {
    let q = draw_positions(params, rng)?;
    let v = draw_velocities(params, rng);
    normalize_state(&q, &v, params)
}

/// A freshly resolved bounce with a controlled, nearly grazing approach angle.
#[derive(Debug, Clone)]
pub struct GrazingSample<T> {
    /// Post-bounce state: the pair sits at contact and separates.
    pub state: PhasePoint<T>,
    /// Record of the resolved bounce (time 0).
    pub record: CollisionRecord<T>,
    /// Planted approach cosine between the relative velocity and the normal.
    pub cos_phi: T,
}

/// Builds a state just after a nearly tangential bounce of balls 0 and 1.
/// The approach cosine is drawn log-uniformly from [cos_lo, cos_hi]; both
/// momentum removal and energy normalization preserve it exactly, so the
/// planted angle is the angle the record reports.
pub fn near_tangential_state<T: Scalar>(
    params: &SystemParams<T>,
    rng: &mut ChaCha12Rng,
    cos_lo: T,
    cos_hi: T,
) -> CoreResult<GrazingSample<T>> {
    let lo = cos_lo.as_f64();
    let hi = cos_hi.as_f64();
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(CoreError::InvalidState(format!(
            "approach-cosine window must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]"
        )));
    }

    let n = params.ball_count();
    let nu = params.dimension();
    let two_r = params.contact_diameter();
    // a hair outside exact contact so wrapped-coordinate rounding can never
    // read as overlap
    let touch = two_r * T::lit(1.0 + 1e-9);

    'attempt: for _ in 0..PLACEMENT_BUDGET {
        // contact geometry for the pair (0, 1): u points from ball 1 to ball 0
        let u = unit_direction::<T>(rng, nu);
        let q1: Vec<T> = (0..nu).map(|_| uniform01(rng)).collect();
        let q0: Vec<T> = (0..nu).map(|k| wrap01(q1[k] + touch * u[k])).collect();

        let mut q: Vec<T> = Vec::with_capacity(n * nu);
        q.extend_from_slice(&q0);
        q.extend_from_slice(&q1);
        for _ in 2..n {
            let mut placed = false;
            for _ in 0..64 {
                let cand: Vec<T> = (0..nu).map(|_| uniform01(rng)).collect();
                let clear = (0..q.len() / nu)
                    .all(|b| block_gap(&cand, &q[b * nu..(b + 1) * nu]) > two_r);
                if clear {
                    q.extend_from_slice(&cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'attempt;
            }
        }

        // approach cosine, log-uniform over the window
        let cos = T::lit(10f64.powf(rng.gen_range(lo.log10()..=hi.log10())));

        // unit relative velocity: grazing approach cos along -u plus the rest
        // tangential
        let mut tau;
        loop {
            tau = unit_direction::<T>(rng, nu);
            let c = dot(&tau, &u);
            axpy(&mut tau, -c, &u);
            let tn = norm(&tau);
            if tn > T::lit(1e-6) {
                tau.iter_mut().for_each(|e| *e = *e / tn);
                break;
            }
        }
        let sin = (T::one() - cos * cos).sqrt();
        let v_rel: Vec<T> = (0..nu).map(|k| sin * tau[k] - cos * u[k]).collect();

        // split the relative velocity across the pair with zero pair momentum;
        // bystanders get mass-scaled Gaussians; the global momentum projection
        // then shifts every ball equally, leaving all relative velocities
        // untouched
        let m0 = params.mass(0);
        let m1 = params.mass(1);
        let msum = m0 + m1;
        let mut v: Vec<T> = Vec::with_capacity(n * nu);
        v.extend((0..nu).map(|k| v_rel[k] * (m1 / msum)));
        v.extend((0..nu).map(|k| -(v_rel[k] * (m0 / msum))));
        for i in 2..n {
            let s = params.mass(i).sqrt().recip();
            v.extend((0..nu).map(|_| gauss::<T>(rng) * s));
        }

        let pre = match normalize_state(&q, &v, params) {
            Ok(st) => st,
            Err(_) => continue 'attempt,
        };
        let (state, record) =
            match resolve_collision(params, &pre, (0, 1), T::zero(), &SimOptions::default()) {
                Ok(out) => out,
                Err(_) => continue 'attempt,
            };
        return Ok(GrazingSample { state, record, cos_phi: cos });
    }
    Err(placement_error("grazing contact"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{simulate, Stop};
    use crate::phase::{make_system, momentum_of, validate_no_overlap};

    fn params3() -> SystemParams<f64> {
        make_system(3, 2, &[1.0, 2.0, 3.0], 0.05).unwrap()
    }

    #[test]
    fn random_states_are_admissible_and_normalized() {
        let p = params3();
        for idx in 0..50 {
            let mut rng = stream_rng(42, idx);
            let st = random_state(&p, &mut rng).unwrap();
            validate_no_overlap(&p, &st, 0.0).unwrap();
            let mom = momentum_of(&p, &st.v);
            assert!(mom.iter().all(|m| m.abs() < 1e-12));
            assert!((mass_norm(&p, &st.v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn streams_are_reproducible_and_independent() {
        let p = params3();
        let a = random_state(&p, &mut stream_rng(9, 3)).unwrap();
        let b = random_state(&p, &mut stream_rng(9, 3)).unwrap();
        assert_eq!(
            a.q.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.q.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            a.v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let c = random_state(&p, &mut stream_rng(9, 4)).unwrap();
        assert!(a.q != c.q);
    }

    #[test]
    fn velocity_direction_has_no_preferred_axis() {
        // empirical mean of each velocity component stays within 4 standard
        // errors of zero
        let p = params3();
        let count = 2000;
        let mut sums = vec![0.0f64; p.compound_dim()];
        for idx in 0..count {
            let mut rng = stream_rng(7, idx);
            let st = random_state(&p, &mut rng).unwrap();
            for (s, &vk) in sums.iter_mut().zip(&st.v) {
                *s += vk;
            }
        }
        // component scale is about 1/sqrt(m_i * nu * N); be generous
        let tol = 4.0 / (count as f64).sqrt();
        for s in &sums {
            assert!((s / count as f64).abs() < tol, "mean {} beyond {}", s, tol);
        }
    }

    #[test]
    fn grazing_sample_plants_the_approach_angle() {
        let p = params3();
        for idx in 0..20 {
            let mut rng = stream_rng(11, idx);
            let g = near_tangential_state(&p, &mut rng, 1e-4, 1e-2).unwrap();
            assert_eq!(g.record.pair, (0, 1));
            assert!(g.cos_phi >= 1e-4 * 0.999 && g.cos_phi <= 1e-2 * 1.001);
            // the record's radial speed over relative speed recovers the cosine
            let measured = g.record.tangency_margin / g.record.rel_speed;
            assert!(
                (measured - g.cos_phi).abs() < 1e-9 * g.cos_phi.max(1e-12),
                "planted {} measured {}",
                g.cos_phi,
                measured
            );
            validate_no_overlap(&p, &g.state, 1e-12).unwrap();
        }
    }

    #[test]
    fn grazing_state_evolves_cleanly() {
        let p = params3();
        let mut rng = stream_rng(23, 0);
        let g = near_tangential_state(&p, &mut rng, 1e-3, 1e-3).unwrap();
        let traj = simulate(&p, &g.state, &Stop::time(0.5), &SimOptions::default()).unwrap();
        assert!((traj.elapsed - 0.5).abs() < 1e-12);
    }
}
