//! Lorentz-model hyperbolic geometry and entailment cones.
//!
//! Points live on the upper sheet of the hyperboloid
//! `{ u : <u,u>_L = -1/c }` in (n+1)-dimensional spacetime, where
//! `<u,v>_L = <u_space, v_space> - u_time * v_time` and the curvature is
//! `-c` with `c > 0`. Tangent vectors at the origin have time component 0
//! and are lifted onto the hyperboloid by the exponential map.
//!
//! The entailment cone of a point `g` is described by its half-aperture
//! `asin(2k / (sqrt(c) * ||g_space||))`; whether another point `i` falls
//! inside the cone is decided by the exterior angle at `g`. Both kernels
//! clamp their `asin`/`acos` arguments so no input pair can produce NaN.

use std::sync::atomic::{AtomicU64, Ordering};

/// Floor inside the exterior-angle denominator sqrt; also the threshold
/// below which a pair counts as coincident.
pub const EXT_ANGLE_EPS: f64 = 1e-12;

/// Magnitude of the (negative) curvature. Fixed per run, not trainable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curvature {
    c: f64,
}

impl Curvature {
    pub fn new(c: f64) -> Self {
        assert!(c.is_finite() && c > 0.0, "curvature magnitude must be a positive real");
        Self { c }
    }

    pub fn value(&self) -> f64 {
        self.c
    }

    pub fn sqrt(&self) -> f64 {
        self.c.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self { c: 1.0 }
    }
}

/// Aperture boundary constant of the entailment cones (distinct from the
/// gene count).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeConstants {
    pub k_aper: f64,
}

impl ConeConstants {
    pub fn new(k_aper: f64) -> Self {
        assert!(k_aper.is_finite() && k_aper > 0.0, "k_aper must be a positive real");
        Self { k_aper }
    }
}

impl Default for ConeConstants {
    fn default() -> Self {
        Self { k_aper: 0.1 }
    }
}

/// A vector in the tangent space at the hyperboloid origin (time part 0).
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVec {
    pub space: Vec<f64>,
}

impl TangentVec {
    pub fn new(space: Vec<f64>) -> Self {
        Self { space }
    }

    pub fn norm(&self) -> f64 {
        self.space.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// A point on the hyperboloid: spatial part plus positive time part.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperPoint {
    pub space: Vec<f64>,
    pub time: f64,
}

impl HyperPoint {
    /// Lift spatial components onto the hyperboloid by recomputing the
    /// time part as `sqrt(1/c + ||space||^2)`.
    pub fn from_space(space: Vec<f64>, c: Curvature) -> Self {
        let norm_sq: f64 = space.iter().map(|x| x * x).sum();
        let time = (1.0 / c.value() + norm_sq).sqrt();
        Self { space, time }
    }

    /// The hyperboloid origin in `dim` spatial dimensions: space 0,
    /// time `1/sqrt(c)`.
    pub fn origin(dim: usize, c: Curvature) -> Self {
        Self { space: vec![0.0; dim], time: 1.0 / c.sqrt() }
    }

    pub fn space_norm(&self) -> f64 {
        self.space.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `c * <u,u>_L + 1`; zero for points exactly on the hyperboloid.
    pub fn hyperboloid_residual(&self, c: Curvature) -> f64 {
        c.value() * lorentz_inner(self, self) + 1.0
    }
}

/// Anything with spatial components and a time component that the
/// Lorentzian inner product accepts: hyperboloid points, or tangent
/// vectors whose time part is 0.
pub trait MinkowskiVec {
    fn space_part(&self) -> &[f64];
    fn time_part(&self) -> f64;
}

impl MinkowskiVec for HyperPoint {
    fn space_part(&self) -> &[f64] {
        &self.space
    }
    fn time_part(&self) -> f64 {
        self.time
    }
}

impl MinkowskiVec for TangentVec {
    fn space_part(&self) -> &[f64] {
        &self.space
    }
    fn time_part(&self) -> f64 {
        0.0
    }
}

/// Lorentzian inner product `<u_space, v_space> - u_time * v_time`.
pub fn lorentz_inner<U: MinkowskiVec, V: MinkowskiVec>(u: &U, v: &V) -> f64 {
    let us = u.space_part();
    let vs = v.space_part();
    assert_eq!(us.len(), vs.len(), "lorentz_inner: dimension mismatch");
    let spatial: f64 = us.iter().zip(vs).map(|(a, b)| a * b).sum();
    spatial - u.time_part() * v.time_part()
}

/// sinh(x)/x, switching to the 2-term Taylor expansion 1 + x^2/6 below
/// x = 1e-6 to remove the removable singularity at 0.
pub(crate) fn sinhc(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        1.0 + x * x / 6.0
    } else {
        x.sinh() / x
    }
}

/// Exponential map at the origin: lifts a tangent vector onto the
/// hyperboloid. Space part is `sinh(sqrt(c)||p||)/(sqrt(c)||p||) * p`,
/// time part follows from the hyperboloid constraint.
pub fn exp_map(p: &TangentVec, c: Curvature) -> HyperPoint {
    assert!(p.space.iter().all(|x| x.is_finite()), "exp_map: tangent vector must be finite");
    let scale = sinhc(c.sqrt() * p.norm());
    let space: Vec<f64> = p.space.iter().map(|x| scale * x).collect();
    HyperPoint::from_space(space, c)
}

/// Half-aperture of the entailment cone rooted at `g`:
/// `asin(clamp(2k / (sqrt(c)||g_space||), -1, 1))`, so the cone widens to
/// pi/2 as the point approaches the origin.
pub fn half_aperture(g: &HyperPoint, k: ConeConstants, c: Curvature) -> f64 {
    let denom = c.sqrt() * g.space_norm();
    if denom == 0.0 {
        // Maximal cone at the origin; the clamped argument saturates.
        return std::f64::consts::FRAC_PI_2;
    }
    let arg = (2.0 * k.k_aper / denom).clamp(-1.0, 1.0);
    arg.asin()
}

static DEGENERATE_PAIRS: AtomicU64 = AtomicU64::new(0);

/// Number of coincident pairs seen by `exterior_angle` since the last reset.
pub fn degenerate_pair_count() -> u64 {
    DEGENERATE_PAIRS.load(Ordering::Relaxed)
}

pub fn reset_degenerate_pair_count() {
    DEGENERATE_PAIRS.store(0, Ordering::Relaxed);
}

/// Exterior angle at `g` between the cone axis and the geodesic toward `i`:
/// `acos(clamp((i_time + g_time c <g,i>_L) / (||g_space|| sqrt((c<g,i>_L)^2 - 1)), -1, 1))`.
///
/// A coincident pair has `c<g,i>_L = -1`, which zeroes the denominator
/// term; such pairs return 0 (a point trivially entails itself) and bump
/// the degenerate-pair counter.
pub fn exterior_angle(g: &HyperPoint, i: &HyperPoint, c: Curvature) -> f64 {
    let cl = c.value() * lorentz_inner(g, i);
    let m = cl * cl - 1.0;
    if m <= EXT_ANGLE_EPS {
        DEGENERATE_PAIRS.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    let num = i.time + g.time * cl;
    let den = g.space_norm() * m.sqrt();
    let arg = if den == 0.0 { 1.0 } else { (num / den).clamp(-1.0, 1.0) };
    arg.acos()
}

/// How far `i` sits outside the entailment cone of `g`:
/// `max(0, ext(g, i) - aper(g))`. Zero iff `i` lies inside the cone.
pub fn cone_violation(g: &HyperPoint, i: &HyperPoint, k: ConeConstants, c: Curvature) -> f64 {
    (exterior_angle(g, i, c) - half_aperture(g, k, c)).max(0.0)
}

/// Differentiable (tape) forms of the geometry kernels. Each builder
/// performs the same floating-point operations in the same order as its
/// pure counterpart, so forward values agree to the last bit; parity is
/// pinned by tests.
pub mod diff {
    use super::{ConeConstants, Curvature, EXT_ANGLE_EPS};
    use crate::autodiff::{Tape, Tensor};

    /// A batch of hyperboloid points on the tape, one per row.
    #[derive(Debug, Clone, Copy)]
    pub struct LiftedBatch {
        /// N×n lifted spatial components.
        pub space: Tensor,
        /// N×1 time components.
        pub time: Tensor,
        /// N×(n+1): spatial columns then the time column.
        pub full: Tensor,
        /// N×1 norms of the lifted spatial rows.
        pub space_norm: Tensor,
    }

    /// Batch exponential map: lifts each tangent row onto the hyperboloid.
    pub fn lift_batch(tape: &mut Tape, tangent: Tensor, c: Curvature) -> LiftedBatch {
        let norms = tape.row_l2_norm(tangent);
        let x = tape.mul_const(norms, c.sqrt());
        let s = tape.sinhc(x);
        let space = tape.mul_col_broadcast(tangent, s);
        let sq = tape.row_sq_norm(space);
        let t2 = tape.add_const(sq, 1.0 / c.value());
        let time = tape.sqrt(t2);
        let full = tape.concat_cols(space, time);
        let space_norm = tape.sqrt(sq);
        LiftedBatch { space, time, full, space_norm }
    }

    /// Cone half-aperture for every row. Zero-norm rows produce an infinite
    /// clamp argument, which saturates to pi/2 with zero gradient, matching
    /// the pure kernel's origin convention.
    pub fn aperture_col(
        tape: &mut Tape,
        g: &LiftedBatch,
        k: ConeConstants,
        c: Curvature,
    ) -> Tensor {
        let denom = tape.mul_const(g.space_norm, c.sqrt());
        let num = tape.scalar(2.0 * k.k_aper);
        let arg = tape.div(num, denom);
        tape.asin_clamped(arg)
    }

    /// Exterior angle at row `gi` of `g` toward row `ii` of `i`. Returns
    /// `None` for pairs the pure kernel resolves to a constant 0 with no
    /// gradient: coincident pairs and cones rooted exactly at the origin.
    /// Degenerate-pair diagnostics are counted by the pure kernel only.
    pub fn exterior_angle_pair(
        tape: &mut Tape,
        g: &LiftedBatch,
        gi: usize,
        i: &LiftedBatch,
        ii: usize,
        c: Curvature,
    ) -> Option<Tensor> {
        let gs = tape.row(g.space, gi);
        let is_ = tape.row(i.space, ii);
        let gt = tape.index(g.time, gi);
        let it = tape.index(i.time, ii);
        let sdot = tape.dot(gs, is_);
        let tt = tape.mul(gt, it);
        let lor = tape.sub(sdot, tt);
        let cl = tape.mul_const(lor, c.value());
        let clv = tape.value(cl);
        if clv * clv - 1.0 <= EXT_ANGLE_EPS {
            return None;
        }
        if tape.values(g.space_norm)[gi] == 0.0 {
            return None;
        }
        let cl2 = tape.mul(cl, cl);
        let m = tape.add_const(cl2, -1.0);
        let num_b = tape.mul(gt, cl);
        let num = tape.add(it, num_b);
        let gn = tape.index(g.space_norm, gi);
        let sq_m = tape.sqrt(m);
        let den = tape.mul(gn, sq_m);
        let ratio = tape.div(num, den);
        Some(tape.acos_clamped(ratio))
    }

    /// Cone violation of one aligned pair as a tape scalar. `aper_g` must be
    /// the aperture column of `g` (built once per batch).
    pub fn cone_violation_pair(
        tape: &mut Tape,
        g: &LiftedBatch,
        gi: usize,
        i: &LiftedBatch,
        ii: usize,
        aper_g: Tensor,
        c: Curvature,
    ) -> Tensor {
        match exterior_angle_pair(tape, g, gi, i, ii, c) {
            None => tape.scalar(0.0),
            Some(ext) => {
                let aper = tape.index(aper_g, gi);
                let d = tape.sub(ext, aper);
                tape.hinge_max0(d)
            }
        }
    }

}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};

    // 50-digit reference values (mpmath):
    //   sinh(5)/5 = 14.840642115557751795401894399212913119923881800885
    //   cosh(5)   = 74.209948524787844444106108044487714023868258589453
    #[allow(clippy::excessive_precision)]
    const SINH5_OVER_5: f64 = 14.840642115557751795;
    #[allow(clippy::excessive_precision)]
    const COSH5: f64 = 74.209948524787844444;

    fn point(space: &[f64], c: Curvature) -> HyperPoint {
        HyperPoint::from_space(space.to_vec(), c)
    }

    /// Random tangent vector with log-uniform norm in [1e-8, 4] so draws
    /// cover both the Taylor branch and moderately deep points while the
    /// f64 hyperboloid residual stays resolvable.
    fn random_tangent(rng: &mut rand_chacha::ChaCha8Rng, dim: usize) -> TangentVec {
        let log_lo = (1e-8f64).ln();
        let log_hi = 4f64.ln();
        let norm = rng::uniform(rng, log_lo, log_hi).exp();
        let mut dir: Vec<f64> = (0..dim).map(|_| rng::gaussian(rng)).collect();
        let d_norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        dir.iter_mut().for_each(|x| *x *= norm / d_norm);
        TangentVec::new(dir)
    }

    #[test]
    fn inner_at_origin_is_minus_one() {
        let c = Curvature::new(1.0);
        let o = HyperPoint::origin(2, c);
        assert_eq!(lorentz_inner(&o, &o), -1.0);
    }

    #[test]
    fn inner_with_zero_space_is_neg_time_product() {
        let u = HyperPoint { space: vec![0.0, 0.0], time: 1.0 };
        let v = HyperPoint { space: vec![0.0, 0.0], time: 2.0 };
        assert_eq!(lorentz_inner(&u, &v), -2.0);
    }

    #[test]
    fn inner_of_lifted_point_with_itself() {
        // <u,u>_L = sinh(5)^2 - cosh(5)^2 = -1 for u = exp_map([3,4]).
        let c = Curvature::new(1.0);
        let u = exp_map(&TangentVec::new(vec![3.0, 4.0]), c);
        assert_abs_diff_eq!(lorentz_inner(&u, &u), -1.0, epsilon = 1e-9);
    }

    #[test]
    fn inner_for_tangent_pairs_ignores_time() {
        let p = TangentVec::new(vec![1.0, 2.0]);
        let q = TangentVec::new(vec![3.0, -1.0]);
        assert_eq!(lorentz_inner(&p, &q), 1.0);
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn inner_rejects_dimension_mismatch() {
        let u = HyperPoint::origin(2, Curvature::default());
        let v = HyperPoint::origin(3, Curvature::default());
        lorentz_inner(&u, &v);
    }

    #[test]
    fn exp_map_of_zero_is_origin() {
        let c = Curvature::new(1.0);
        let u = exp_map(&TangentVec::new(vec![0.0, 0.0]), c);
        assert_eq!(u.space, vec![0.0, 0.0]);
        assert_eq!(u.time, 1.0);
    }

    #[test]
    fn exp_map_matches_reference_values() {
        let c = Curvature::new(1.0);
        let u = exp_map(&TangentVec::new(vec![3.0, 4.0]), c);
        assert_relative_eq!(u.space[0], SINH5_OVER_5 * 3.0, max_relative = 1e-12);
        assert_relative_eq!(u.space[1], SINH5_OVER_5 * 4.0, max_relative = 1e-12);
        assert_relative_eq!(u.time, COSH5, max_relative = 1e-12);
    }

    #[test]
    fn exp_map_near_identity_for_tiny_inputs() {
        let c = Curvature::new(1.0);
        let u = exp_map(&TangentVec::new(vec![1e-9, 0.0]), c);
        assert_abs_diff_eq!(u.space[0], 1e-9, epsilon = 1e-18);
        assert_abs_diff_eq!(u.time, 1.0, epsilon = 1e-15);
    }

    #[test]
    #[should_panic(expected = "finite")]
    fn exp_map_rejects_non_finite() {
        exp_map(&TangentVec::new(vec![f64::NAN]), Curvature::default());
    }

    #[test]
    fn aperture_reference_values() {
        let c = Curvature::new(1.0);
        let k = ConeConstants::new(0.1);
        assert_abs_diff_eq!(
            half_aperture(&point(&[0.2, 0.0], c), k, c),
            FRAC_PI_2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            half_aperture(&point(&[0.4, 0.0], c), k, c),
            FRAC_PI_6,
            epsilon = 1e-12
        );
        // Argument 4 clamps to 1.
        assert_abs_diff_eq!(
            half_aperture(&point(&[0.05, 0.0], c), k, c),
            FRAC_PI_2,
            epsilon = 1e-12
        );
        // Zero spatial norm: maximal cone.
        assert_eq!(half_aperture(&HyperPoint::origin(2, c), k, c), FRAC_PI_2);
    }

    #[test]
    fn exterior_angle_coincident_pair_is_zero_and_counted() {
        let c = Curvature::new(1.0);
        let g = point(&[0.4, 0.0], c);
        reset_degenerate_pair_count();
        assert_eq!(exterior_angle(&g, &g.clone(), c), 0.0);
        assert_eq!(degenerate_pair_count(), 1);
    }

    #[test]
    fn exterior_angle_collinear_rays() {
        // 50-digit evaluation of the angle formula gives exactly 0 for a
        // point farther out on the same ray and exactly pi on the
        // opposite ray; f64 clamping resolves both to ~sqrt(eps).
        let c = Curvature::new(1.0);
        let g = point(&[0.4, 0.0], c);
        let same = point(&[0.8, 0.0], c);
        let opposite = point(&[-0.8, 0.0], c);
        assert_abs_diff_eq!(exterior_angle(&g, &same, c), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(exterior_angle(&g, &opposite, c), PI, epsilon = 1e-6);
    }

    #[test]
    fn cone_violation_zero_inside_cone() {
        let c = Curvature::new(1.0);
        let k = ConeConstants::new(0.1);
        // g close to the origin has aperture pi/2; a point on the same
        // ray sits well inside.
        let g = point(&[0.2, 0.0], c);
        let i = point(&[0.5, 0.0], c);
        assert_eq!(cone_violation(&g, &i, k, c), 0.0);
    }

    #[test]
    fn cone_violation_hinge_arithmetic() {
        // max(0, ext - aper) with ext = pi/2, aper = pi/6 is pi/3.
        let v: f64 = (FRAC_PI_2 - FRAC_PI_6).max(0.0);
        assert_abs_diff_eq!(v, PI / 3.0, epsilon = 1e-15);
        assert_eq!((-0.3f64).max(0.0), 0.0);
    }

    #[test]
    fn cone_violation_recomposes_from_parts() {
        let c = Curvature::new(1.0);
        let k = ConeConstants::new(0.1);
        let mut r = rng::stream(41, 0);
        for _ in 0..200 {
            let g = exp_map(&random_tangent(&mut r, 8), c);
            let i = exp_map(&random_tangent(&mut r, 8), c);
            let expected = (exterior_angle(&g, &i, c) - half_aperture(&g, k, c)).max(0.0);
            assert_eq!(cone_violation(&g, &i, k, c), expected);
            assert!(cone_violation(&g, &i, k, c) >= 0.0);
        }
    }

    #[test]
    fn hyperboloid_residual_bounded_over_random_draws() {
        for &cv in &[0.5, 1.0, 2.0] {
            let c = Curvature::new(cv);
            let mut r = rng::stream(17, cv.to_bits());
            for step in 0..2000 {
                let dim = [2, 8, 32][step % 3];
                let u = exp_map(&random_tangent(&mut r, dim), c);
                assert!(
                    u.hyperboloid_residual(c).abs() <= 1e-9,
                    "residual {} too large at c={}",
                    u.hyperboloid_residual(c),
                    cv
                );
            }
        }
    }

    #[test]
    fn aperture_monotone_non_increasing_in_norm() {
        let c = Curvature::new(1.0);
        let k = ConeConstants::default();
        let mut r = rng::stream(23, 0);
        for _ in 0..2000 {
            let a = exp_map(&random_tangent(&mut r, 8), c);
            let b = exp_map(&random_tangent(&mut r, 8), c);
            let (small, large) = if a.space_norm() <= b.space_norm() { (a, b) } else { (b, a) };
            assert!(half_aperture(&small, k, c) >= half_aperture(&large, k, c));
        }
    }

    #[test]
    fn exterior_angle_in_range_and_finite() {
        let c = Curvature::new(1.0);
        let mut r = rng::stream(29, 0);
        for step in 0..10_000 {
            let g = exp_map(&random_tangent(&mut r, 8), c);
            let i = if step % 7 == 0 {
                // Near-coincident: nudge one coordinate by ~1e-13.
                let mut s = g.space.clone();
                s[0] += 1e-13;
                HyperPoint::from_space(s, c)
            } else {
                exp_map(&random_tangent(&mut r, 8), c)
            };
            let ext = exterior_angle(&g, &i, c);
            assert!(ext.is_finite());
            assert!((0.0..=PI).contains(&ext));
        }
    }

    #[test]
    fn exp_map_norm_monotone() {
        let c = Curvature::new(1.0);
        let mut r = rng::stream(31, 0);
        for _ in 0..2000 {
            let p = random_tangent(&mut r, 8);
            let scale = 1.0 + rng::uniform(&mut r, 1e-6, 1.0);
            let q = TangentVec::new(p.space.iter().map(|x| scale * x).collect());
            let up = exp_map(&p, c);
            let uq = exp_map(&q, c);
            assert!(up.space_norm() < uq.space_norm());
        }
    }

    #[test]
    fn hinge_exactness() {
        let c = Curvature::new(1.0);
        let k = ConeConstants::default();
        let mut r = rng::stream(37, 0);
        for _ in 0..2000 {
            let g = exp_map(&random_tangent(&mut r, 8), c);
            let i = exp_map(&random_tangent(&mut r, 8), c);
            let ext = exterior_angle(&g, &i, c);
            let aper = half_aperture(&g, k, c);
            let v = cone_violation(&g, &i, k, c);
            if ext <= aper {
                assert_eq!(v, 0.0);
            } else {
                assert!(v > 0.0);
            }
        }
    }
}
