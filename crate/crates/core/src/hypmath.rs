//! Poincaré-ball geometry.
//!
//! All maps are written for the ball `B^c = { x : ‖x‖ < 1/√c }` with the
//! conformal metric `λ(x)² g_euc`, `λ(x) = 2 / (1 − c‖x‖²)`. Every operation
//! that produces a [`BallPoint`] finishes with a radial clip to
//! `(1 − ε_bnd)/√c`, so outputs are always strictly interior.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Default interior margin used by radial clipping.
pub const DEFAULT_EPS_BND: f64 = 0.05;

/// Largest argument passed to `artanh`.
pub const ARTANH_CLAMP: f64 = 1.0 - 1e-15;

/// Curvature ratios outside this interval are refused when pairing two balls.
pub const CURVATURE_RATIO_RANGE: (f64, f64) = (0.5, 2.0);

// Below this value of √c·r the radial scale factors switch to Taylor series.
const SERIES_CUTOFF: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Self(c))
        } else {
            Err(domain(format!("curvature must be positive and finite, got {c}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }

    /// Euclidean radius `1/√c` of the ball.
    pub fn radius(self) -> f64 {
        1.0 / self.0.sqrt()
    }
}

/// Checks that `c_e / c_a` lies in the usable ratio range.
pub fn check_curvature_ratio(c_e: Curvature, c_a: Curvature) -> Result<()> {
    let ratio = c_e.value() / c_a.value();
    let (lo, hi) = CURVATURE_RATIO_RANGE;
    if (lo..=hi).contains(&ratio) {
        Ok(())
    } else {
        Err(domain(format!(
            "curvature ratio c_E/c_A = {ratio} outside [{lo}, {hi}]"
        )))
    }
}

/// A point strictly inside a Poincaré ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallPoint {
    coords: Vec<f64>,
    c: Curvature,
}

impl BallPoint {
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.c
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }

    /// Gyrovector negation `−x` (stays on the same ball).
    pub fn neg(&self) -> BallPoint {
        BallPoint {
            coords: self.coords.iter().map(|v| -v).collect(),
            c: self.c,
        }
    }
}

/// A tangent vector in ambient coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentVector {
    coords: Vec<f64>,
}

impl TangentVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().all(|v| v.is_finite()) {
            Ok(Self { coords })
        } else {
            Err(domain("tangent vector has non-finite entries"))
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { coords: vec![0.0; dim] }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }
}

/// Which power of `(1 − c‖h‖²)` the volume weight uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum VolumeWeighting {
    /// `(1 − c‖h‖²)^{−n}`, proportional to the Riemannian volume density.
    #[default]
    Density,
    /// `(1 − c‖h‖²)^{+n}`, the reciprocal density.
    InverseDensity,
}

/// A radial map `x ↦ s(‖x‖)·x`.
///
/// Carries both the scale `s(r)` and `s'(r)/r`; the Jacobian of any such map
/// is `s I + (s'/r) x xᵀ`, which is what reverse mode needs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RadialMap {
    Exp0 {
        c: f64,
    },
    Log0 {
        c: f64,
    },
    /// Radial projection onto the closed ball of radius `max_norm`.
    Clip {
        max_norm: f64,
    },
    /// Distance-to-origin preserving map from `B^{c_from}` onto `B^{c_to}`.
    Rescale {
        c_from: f64,
        c_to: f64,
    },
}

impl RadialMap {
    pub fn scale(&self, r: f64) -> f64 {
        match *self {
            RadialMap::Exp0 { c } => {
                let y = c.sqrt() * r;
                if y < SERIES_CUTOFF {
                    1.0 - y * y / 3.0
                } else {
                    y.tanh() / y
                }
            }
            RadialMap::Log0 { c } => {
                let y = c.sqrt() * r;
                if y < SERIES_CUTOFF {
                    1.0 + y * y / 3.0
                } else {
                    artanh_clamped(y) / y
                }
            }
            RadialMap::Clip { max_norm } => {
                if r >= max_norm && r > 0.0 {
                    max_norm / r
                } else {
                    1.0
                }
            }
            RadialMap::Rescale { c_from, c_to } => {
                let (a, b) = (c_from.sqrt(), c_to.sqrt());
                if a.max(b) * r < SERIES_CUTOFF {
                    1.0 + (c_from - c_to) * r * r / 3.0
                } else {
                    rescale_radius(r, a, b) / r
                }
            }
        }
    }

    /// `s'(r)/r`, finite at `r = 0`.
    pub fn dscale_over_r(&self, r: f64) -> f64 {
        match *self {
            RadialMap::Exp0 { c } => {
                let y = c.sqrt() * r;
                if y < 1e-3 {
                    c * (-2.0 / 3.0 + 8.0 * y * y / 15.0)
                } else {
                    let sech2 = 1.0 - y.tanh().powi(2);
                    c * (y * sech2 - y.tanh()) / (y * y * y)
                }
            }
            RadialMap::Log0 { c } => {
                let y = c.sqrt() * r;
                if y < 1e-3 {
                    c * (2.0 / 3.0 + 4.0 * y * y / 5.0)
                } else if y >= ARTANH_CLAMP {
                    -c * artanh_clamped(y) / (y * y * y)
                } else {
                    c * (y / (1.0 - y * y) - y.atanh()) / (y * y * y)
                }
            }
            RadialMap::Clip { max_norm } => {
                if r >= max_norm && r > 0.0 {
                    -max_norm / (r * r * r)
                } else {
                    0.0
                }
            }
            RadialMap::Rescale { c_from, c_to } => {
                let (a, b) = (c_from.sqrt(), c_to.sqrt());
                if a.max(b) * r < 1e-3 {
                    2.0 * (c_from - c_to) / 3.0
                } else {
                    let alpha = artanh_clamped(a * r) / a;
                    let rho = (b * alpha).tanh() / b;
                    let sech2 = 1.0 - (b * alpha).tanh().powi(2);
                    let drho = sech2 / (1.0 - a * a * r * r);
                    (drho * r - rho) / (r * r * r)
                }
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let s = self.scale(norm(x));
        x.iter().map(|v| v * s).collect()
    }
}

fn rescale_radius(r: f64, sqrt_from: f64, sqrt_to: f64) -> f64 {
    let alpha = artanh_clamped(sqrt_from * r) / sqrt_from;
    (sqrt_to * alpha).tanh() / sqrt_to
}

pub fn artanh_clamped(x: f64) -> f64 {
    x.clamp(-ARTANH_CLAMP, ARTANH_CLAMP).atanh()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Möbius addition on raw coordinates (no clipping, no checks).
pub fn mobius_add_raw(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let xy = dot(x, y);
    let x2 = dot(x, x);
    let y2 = dot(y, y);
    let a = 1.0 + 2.0 * c * xy + c * y2;
    let b = 1.0 - c * x2;
    let den = (1.0 + 2.0 * c * xy + c * c * x2 * y2).max(1e-15);
    x.iter().zip(y).map(|(xi, yi)| (a * xi + b * yi) / den).collect()
}

/// Poincaré distance on raw coordinates.
pub fn dist_raw(x: &[f64], y: &[f64], c: f64) -> f64 {
    let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
    let m = mobius_add_raw(&neg_x, y, c);
    2.0 / c.sqrt() * artanh_clamped(c.sqrt() * norm(&m))
}

/// Radially clips `x` to norm at most `max_norm`; returns whether it clipped.
///
/// The output norm never exceeds `max_norm`, including after rounding.
pub fn clip_coords(x: &[f64], max_norm: f64) -> (Vec<f64>, bool) {
    let r = norm(x);
    if r < max_norm {
        return (x.to_vec(), false);
    }
    let mut y: Vec<f64> = x.iter().map(|v| v * (max_norm / r)).collect();
    while norm(&y) > max_norm {
        y.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
    }
    (y, true)
}

fn ensure_finite(x: &[f64], what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(domain(format!("{what} has non-finite entries")))
    }
}

/// A Poincaré ball of fixed curvature together with its clipping margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoincareBall {
    c: Curvature,
    eps_bnd: f64,
}

impl PoincareBall {
    pub fn new(c: f64) -> Result<Self> {
        Self::with_margin(c, DEFAULT_EPS_BND)
    }

    pub fn with_margin(c: f64, eps_bnd: f64) -> Result<Self> {
        if !(eps_bnd > 0.0 && eps_bnd < 1.0) {
            return Err(domain(format!("eps_bnd must lie in (0, 1), got {eps_bnd}")));
        }
        Ok(Self {
            c: Curvature::new(c)?,
            eps_bnd,
        })
    }

    pub fn curvature(&self) -> Curvature {
        self.c
    }

    pub fn c(&self) -> f64 {
        self.c.value()
    }

    pub fn eps_bnd(&self) -> f64 {
        self.eps_bnd
    }

    /// Largest norm any constructed point may have: `(1 − ε_bnd)/√c`.
    pub fn max_norm(&self) -> f64 {
        (1.0 - self.eps_bnd) / self.c.sqrt()
    }

    pub fn origin(&self, dim: usize) -> BallPoint {
        BallPoint {
            coords: vec![0.0; dim],
            c: self.c,
        }
    }

    /// Wraps coordinates that are already strictly inside the ball.
    pub fn point(&self, coords: Vec<f64>) -> Result<BallPoint> {
        ensure_finite(&coords, "point")?;
        if norm(&coords) >= self.c.radius() {
            return Err(domain(format!(
                "point of norm {} is not inside the ball of radius {}",
                norm(&coords),
                self.c.radius()
            )));
        }
        Ok(BallPoint { coords, c: self.c })
    }

    fn ensure_on(&self, p: &BallPoint) -> Result<()> {
        if p.c != self.c {
            return Err(domain(format!(
                "curvature mismatch: point on c={}, ball has c={}",
                p.c.value(),
                self.c.value()
            )));
        }
        Ok(())
    }

    fn ensure_interior(&self, p: &BallPoint) -> Result<()> {
        self.ensure_on(p)?;
        if p.norm() >= self.c.radius() {
            return Err(domain("point on or beyond the ball boundary"));
        }
        Ok(())
    }

    /// Radial clipping to `(1 − ε_bnd)/√c`.
    pub fn clip(&self, coords: &[f64]) -> (BallPoint, bool) {
        let (coords, clipped) = clip_coords(coords, self.max_norm());
        (BallPoint { coords, c: self.c }, clipped)
    }

    pub fn exp0(&self, v: &TangentVector) -> Result<BallPoint> {
        ensure_finite(v.coords(), "tangent vector")?;
        let raw = RadialMap::Exp0 { c: self.c() }.apply(v.coords());
        Ok(self.clip(&raw).0)
    }

    pub fn log0(&self, h: &BallPoint) -> Result<TangentVector> {
        self.ensure_interior(h)?;
        Ok(TangentVector {
            coords: RadialMap::Log0 { c: self.c() }.apply(h.coords()),
        })
    }

    pub fn mobius_add(&self, x: &BallPoint, y: &BallPoint) -> Result<BallPoint> {
        self.ensure_interior(x)?;
        self.ensure_interior(y)?;
        if x.dim() != y.dim() {
            return Err(domain("dimension mismatch in Möbius addition"));
        }
        Ok(self.clip(&mobius_add_raw(x.coords(), y.coords(), self.c())).0)
    }

    pub fn dist(&self, x: &BallPoint, y: &BallPoint) -> Result<f64> {
        self.ensure_interior(x)?;
        self.ensure_interior(y)?;
        if x.dim() != y.dim() {
            return Err(domain("dimension mismatch in distance"));
        }
        Ok(dist_raw(x.coords(), y.coords(), self.c()))
    }

    pub fn conformal_factor(&self, h: &BallPoint) -> Result<f64> {
        self.ensure_interior(h)?;
        Ok(2.0 / (1.0 - self.c() * dot(h.coords(), h.coords())))
    }

    /// Exponential map at an arbitrary base point `w`.
    pub fn exp_at(&self, w: &BallPoint, v: &TangentVector) -> Result<BallPoint> {
        self.ensure_interior(w)?;
        ensure_finite(v.coords(), "tangent vector")?;
        let vn = v.norm();
        if vn == 0.0 {
            return Ok(w.clone());
        }
        let sc = self.c.sqrt();
        let lambda = self.conformal_factor(w)?;
        let k = (sc * lambda * vn / 2.0).tanh() / (sc * vn);
        let step: Vec<f64> = v.coords().iter().map(|x| x * k).collect();
        Ok(self.clip(&mobius_add_raw(w.coords(), &step, self.c())).0)
    }

    /// Importance weight `(1 − c‖h‖²)^{∓n}` for an `n`-dimensional ball.
    pub fn volume_weight(&self, h: &BallPoint, weighting: VolumeWeighting) -> Result<f64> {
        self.ensure_interior(h)?;
        let base = 1.0 - self.c() * dot(h.coords(), h.coords());
        let n = h.dim() as i32;
        Ok(match weighting {
            VolumeWeighting::Density => base.powi(-n),
            VolumeWeighting::InverseDensity => base.powi(n),
        })
    }
}

/// Scales `x ∈ B^{c_from}` by `√(c_from/c_to)`, mapping it into `to`.
pub fn linear_rescale(x: &BallPoint, to: &PoincareBall) -> BallPoint {
    let k = (x.c.value() / to.c()).sqrt();
    BallPoint {
        coords: x.coords.iter().map(|v| v * k).collect(),
        c: to.curvature(),
    }
}

/// Radial map `B^{c_from} → B^{c_to}` that preserves distance to the origin.
pub fn isometric_rescale(x: &BallPoint, to: &PoincareBall) -> Result<BallPoint> {
    if x.norm() >= x.c.radius() {
        return Err(domain("isometric rescale of a boundary point"));
    }
    let map = RadialMap::Rescale {
        c_from: x.c.value(),
        c_to: to.c(),
    };
    Ok(to.clip(&map.apply(x.coords())).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ball(c: f64) -> PoincareBall {
        PoincareBall::new(c).unwrap()
    }

    fn tv(v: &[f64]) -> TangentVector {
        TangentVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn exp0_of_zero_is_origin() {
        let b = ball(1.0);
        assert_eq!(b.exp0(&tv(&[0.0, 0.0])).unwrap().coords(), &[0.0, 0.0]);
    }

    #[test]
    fn exp0_unit_vector_has_norm_tanh_one() {
        let b = ball(1.0);
        let h = b.exp0(&tv(&[1.0, 0.0])).unwrap();
        // tanh(1) to 15 digits
        assert_abs_diff_eq!(h.norm(), 0.761_594_155_955_764_9, epsilon = 1e-15);
    }

    #[test]
    fn exp0_large_vector_is_clipped() {
        let b = ball(1.0);
        let h = b.exp0(&tv(&[10.0, 0.0])).unwrap();
        assert!(h.norm() <= 0.95);
        assert_abs_diff_eq!(h.norm(), 0.95, epsilon = 1e-15);
    }

    #[test]
    fn exp0_rejects_non_finite() {
        assert!(TangentVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn log0_inverts_exp0_at_tanh_one() {
        let b = ball(1.0);
        let h = b.point(vec![0.0, 1f64.tanh()]).unwrap();
        let v = b.log0(&h).unwrap();
        assert_abs_diff_eq!(v.coords()[0], 0.0);
        assert_abs_diff_eq!(v.coords()[1], 1.0, epsilon = 1e-14);
        assert_eq!(b.log0(&b.origin(3)).unwrap().coords(), &[0.0; 3]);
    }

    #[test]
    fn log0_rejects_boundary() {
        let b = ball(4.0);
        assert!(b.point(vec![0.5, 0.0]).is_err());
        let on_other = ball(1.0).point(vec![0.6, 0.0]).unwrap();
        assert!(b.log0(&on_other).is_err());
    }

    #[test]
    fn mobius_identities() {
        let b = ball(1.0);
        let x = b.point(vec![0.3, -0.2, 0.1]).unwrap();
        let y = b.point(vec![-0.4, 0.5, 0.2]).unwrap();
        let left_id = b.mobius_add(&b.origin(3), &y).unwrap();
        for (a, e) in left_id.coords().iter().zip(y.coords()) {
            assert_abs_diff_eq!(a, e, epsilon = 1e-15);
        }
        let inv = b.mobius_add(&x.neg(), &x).unwrap();
        assert!(inv.norm() < 1e-12);
    }

    #[test]
    fn mobius_collinear_value() {
        let b = ball(1.0);
        let x = b.point(vec![0.3, 0.0]).unwrap();
        let s = b.mobius_add(&x, &x).unwrap();
        assert_abs_diff_eq!(s.coords()[0], 0.6 / 1.09, epsilon = 1e-15);
        assert_eq!(s.coords()[1], 0.0);
    }

    #[test]
    fn mobius_curvature_mismatch_is_domain_error() {
        let x = ball(1.0).point(vec![0.1]).unwrap();
        let y = ball(0.8).point(vec![0.1]).unwrap();
        assert!(matches!(ball(1.0).mobius_add(&x, &y), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn distance_examples() {
        let b = ball(1.0);
        let x = b.point(vec![0.5, 0.0]).unwrap();
        assert_eq!(b.dist(&x, &x).unwrap(), 0.0);
        assert_abs_diff_eq!(
            b.dist(&b.origin(2), &x).unwrap(),
            1.098_612_288_668_109_7,
            epsilon = 1e-14
        );
    }

    #[test]
    fn exp_at_reduces_to_exp0_and_identity() {
        let b = ball(0.8);
        let v = tv(&[0.3, -0.7]);
        let a = b.exp_at(&b.origin(2), &v).unwrap();
        let e = b.exp0(&v).unwrap();
        for (p, q) in a.coords().iter().zip(e.coords()) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-15);
        }
        let w = b.point(vec![0.2, 0.1]).unwrap();
        assert_eq!(b.exp_at(&w, &TangentVector::zeros(2)).unwrap(), w);
    }

    #[test]
    fn exp_at_moves_riemannian_length() {
        // The geodesic distance travelled equals λ_w‖v‖.
        let b = ball(1.0);
        let w = b.point(vec![0.5, 0.0]).unwrap();
        let v = tv(&[0.1, 0.0]);
        let moved = b.exp_at(&w, &v).unwrap();
        let lambda = b.conformal_factor(&w).unwrap();
        let d = b.dist(&w, &moved).unwrap();
        assert_abs_diff_eq!(d, lambda * 0.1, epsilon = 1e-12);
        assert!(moved.coords()[0] > 0.5 && moved.coords()[1] == 0.0);
    }

    #[test]
    fn conformal_factor_values() {
        let b = ball(1.0);
        assert_eq!(b.conformal_factor(&b.origin(2)).unwrap(), 2.0);
        let h = b.point(vec![0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(b.conformal_factor(&h).unwrap(), 4.0, epsilon = 1e-14);
        let mut prev = 0.0;
        for i in 0..19 {
            let p = b.point(vec![i as f64 * 0.05]).unwrap();
            let f = b.conformal_factor(&p).unwrap();
            assert!(f > prev);
            prev = f;
        }
    }

    #[test]
    fn clip_examples() {
        let b = ball(1.0);
        let (p, flag) = b.clip(&[0.5, 0.0]);
        assert!(!flag);
        assert_eq!(p.coords(), &[0.5, 0.0]);
        let (p, flag) = b.clip(&[0.98, 0.0]);
        assert!(flag);
        assert_abs_diff_eq!(p.norm(), 0.95, epsilon = 1e-15);
        let (p, flag) = ball(4.0).clip(&[1.2, 0.0]);
        assert!(flag);
        assert_abs_diff_eq!(p.norm(), 0.475, epsilon = 1e-15);
    }

    #[test]
    fn linear_rescale_examples() {
        let b1 = ball(1.0);
        let b4 = ball(4.0);
        let x = b1.point(vec![0.3, 0.4]).unwrap();
        assert_eq!(linear_rescale(&x, &b1), x);
        let y = linear_rescale(&x, &b4);
        assert_abs_diff_eq!(y.norm(), 0.25, epsilon = 1e-15);
        let back = linear_rescale(&y, &b1);
        for (a, e) in back.coords().iter().zip(x.coords()) {
            assert_abs_diff_eq!(a, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_rescale_lands_inside_target() {
        for &(c1, c2) in &[(1.0, 4.0), (4.0, 1.0), (1.0, 0.8), (0.8, 1.6)] {
            let from = ball(c1);
            let to = ball(c2);
            for k in 1..=100 {
                let r = (1.0 - 0.5f64.powi(k.min(50))) / f64::sqrt(c1);
                let x = from.point(vec![r * 0.6, r * 0.8]).ok();
                if let Some(x) = x {
                    assert!(linear_rescale(&x, &to).norm() < to.curvature().radius());
                }
            }
        }
    }

    #[test]
    fn isometric_rescale_examples() {
        let b1 = ball(1.0);
        let b4 = ball(4.0);
        let x = b1.point(vec![0.5, 0.0]).unwrap();
        let y = isometric_rescale(&x, &b4).unwrap();
        assert_abs_diff_eq!(y.coords()[0], 0.4, epsilon = 1e-15);
        let d1 = b1.dist(&b1.origin(2), &x).unwrap();
        let d2 = b4.dist(&b4.origin(2), &y).unwrap();
        assert_abs_diff_eq!(d1, 1.098_612_288_668_11, epsilon = 1e-12);
        assert_abs_diff_eq!(d1, d2, epsilon = 1e-12);
        assert_eq!(isometric_rescale(&b1.origin(2), &b4).unwrap().coords(), &[0.0, 0.0]);
    }

    #[test]
    fn isometric_rescale_radius_limit() {
        let map = RadialMap::Rescale { c_from: 1.0, c_to: 4.0 };
        let r = 1.0 - 1e-12;
        assert_abs_diff_eq!(r * map.scale(r), 0.5, epsilon = 1e-5);
    }

    #[test]
    fn volume_weight_examples() {
        let b = ball(1.0);
        assert_eq!(b.volume_weight(&b.origin(2), VolumeWeighting::Density).unwrap(), 1.0);
        let h = b.point(vec![0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(
            b.volume_weight(&h, VolumeWeighting::Density).unwrap(),
            4.0,
            epsilon = 1e-13
        );
        assert_abs_diff_eq!(
            b.volume_weight(&h, VolumeWeighting::InverseDensity).unwrap(),
            0.25,
            epsilon = 1e-14
        );
        // w = λ^n / 2^n
        let lambda = b.conformal_factor(&h).unwrap();
        assert_abs_diff_eq!(
            b.volume_weight(&h, VolumeWeighting::Density).unwrap(),
            lambda.powi(2) / 4.0,
            epsilon = 1e-13
        );
    }

    #[test]
    fn curvature_ratio_guard() {
        let c = |v| Curvature::new(v).unwrap();
        assert!(check_curvature_ratio(c(1.0), c(0.8)).is_ok());
        assert!(check_curvature_ratio(c(1.0), c(0.1)).is_err());
        assert!(check_curvature_ratio(c(0.1), c(1.0)).is_err());
        assert!(Curvature::new(0.0).is_err());
    }

    #[test]
    fn radial_derivatives_match_finite_differences() {
        let maps = [
            RadialMap::Exp0 { c: 0.8 },
            RadialMap::Log0 { c: 1.3 },
            RadialMap::Rescale { c_from: 1.0, c_to: 0.8 },
            RadialMap::Clip { max_norm: 0.3 },
        ];
        for map in maps {
            for &r in &[1e-3f64, 0.05, 0.2, 0.5, 0.7] {
                let h = 1e-6 * r.max(1e-3);
                let fd = (map.scale(r + h) - map.scale(r - h)) / (2.0 * h) / r;
                let an = map.dscale_over_r(r);
                if let RadialMap::Clip { max_norm } = map {
                    if (r - max_norm).abs() < 2.0 * h {
                        continue;
                    }
                }
                // Near r = 0, s'(r)/r comes from its series; compare loosely.
                let tol = if r < 1e-2 { 1e-2 } else { 1e-5 };
                assert!(
                    (fd - an).abs() <= tol * an.abs().max(1e-3),
                    "{map:?} r={r} fd={fd} an={an}"
                );
            }
        }
    }

    #[test]
    fn radial_derivative_limits_at_origin() {
        // tanh(kr)/(kr) = 1 − k²r²/3 + …, so s'(r)/r → −2k²/3; artanh gives +2k²/3.
        let e = RadialMap::Exp0 { c: 0.8 }.dscale_over_r(1e-9);
        assert!((e + 2.0 * 0.8 / 3.0).abs() < 1e-9);
        let l = RadialMap::Log0 { c: 1.3 }.dscale_over_r(1e-9);
        assert!((l - 2.0 * 1.3 / 3.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn exp_log_round_trip(v in prop::collection::vec(-1.7f64..1.7, 3), c in prop::sample::select(vec![1.0, 0.8])) {
            let b = ball(c);
            let t = tv(&v);
            prop_assume!(t.norm() <= 3.0);
            let h = b.exp0(&t).unwrap();
            // Only unclipped points round-trip.
            prop_assume!(h.norm() < b.max_norm() - 1e-9);
            let back = b.log0(&h).unwrap();
            for (a, e) in back.coords().iter().zip(&v) {
                prop_assert!((a - e).abs() <= 1e-9);
            }
        }

        #[test]
        fn clip_never_exceeds_margin(v in prop::collection::vec(-3.0f64..3.0, 1..6), c in 0.3f64..4.0) {
            let b = ball(c);
            let (p, _) = b.clip(&v);
            prop_assert!(p.norm() <= b.max_norm());
        }

        #[test]
        fn triangle_inequality(
            x in prop::collection::vec(-0.5f64..0.5, 3),
            y in prop::collection::vec(-0.5f64..0.5, 3),
            z in prop::collection::vec(-0.5f64..0.5, 3),
        ) {
            let b = ball(1.0);
            let (x, y, z) = (b.point(x).unwrap(), b.point(y).unwrap(), b.point(z).unwrap());
            let dxz = b.dist(&x, &z).unwrap();
            let dxy = b.dist(&x, &y).unwrap();
            let dyz = b.dist(&y, &z).unwrap();
            prop_assert!(dxz <= dxy + dyz + 1e-9);
            prop_assert!((b.dist(&y, &x).unwrap() - dxy).abs() < 1e-12);
        }
    }
}
