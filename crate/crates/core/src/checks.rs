//! Runtime invariant suite behind `ecnet check`.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::analysis::{cochran_armitage, spearman};
use crate::data::{eta_masks, sample_mask, Mask, NUM_MODALITIES};
use crate::error::Result;
use crate::fusion::{FusionConfig, SetFuser};
use crate::gradtape::{grad_check, Graph, ParamStore, FD_STEP};
use crate::hypmath::{
    check_curvature_ratio, isometric_rescale, mobius_add_raw, norm, Curvature, PoincareBall, RadialMap, TangentVector,
    VolumeWeighting,
};
use crate::mirror::{CycleWeighting, MirrorLayer, MirrorLossConfig};
use crate::propdecomp::PropertyBank;
use crate::scorefield::curl_proxy;

/// One invariant with its measured value and tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| !r.passed).count()
    }

    /// Tab-separated `status module name value tolerance` lines and a summary.
    pub fn render(&self) -> String {
        let mut s = String::from("status\tmodule\tname\tvalue\ttolerance\n");
        for r in &self.results {
            let status = if r.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(
                s,
                "{status}\t{}\t{}\t{:.3e}\t{:.3e}",
                r.module, r.name, r.value, r.tolerance
            );
        }
        let _ = writeln!(s, "{} checks, {} failed", self.results.len(), self.failures());
        s
    }
}

/// Knobs for exercising the suite itself.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    /// Boundary margin used when constructing points; the invariants always
    /// test against the configured `eps_bnd`.
    pub clip_margin: f64,
    pub eps_bnd: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 2025,
            clip_margin: 0.05,
            eps_bnd: 0.05,
        }
    }
}

fn gauss_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Suite {
    results: Vec<CheckResult>,
}

impl Suite {
    /// Passes when `value <= tolerance`.
    fn at_most(&mut self, module: &'static str, name: &'static str, value: f64, tolerance: f64) {
        self.results.push(CheckResult {
            module,
            name,
            value,
            tolerance,
            passed: value <= tolerance,
        });
    }
}

pub fn run_checks(opts: &CheckOptions) -> Result<CheckReport> {
    let mut s = Suite { results: Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    hypmath_checks(&mut s, opts, &mut rng)?;
    mirror_checks(&mut s, opts, &mut rng)?;
    score_checks(&mut s)?;
    decomposition_checks(&mut s)?;
    fusion_checks(&mut s, &mut rng)?;
    data_checks(&mut s, &mut rng);
    analysis_checks(&mut s)?;
    Ok(CheckReport { results: s.results })
}

fn hypmath_checks(s: &mut Suite, opts: &CheckOptions, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut round_trip = 0.0f64;
    let mut rescale = 0.0f64;
    let mut mobius = 0.0f64;
    let mut overshoot = f64::NEG_INFINITY;
    let mut volume = 0.0f64;
    for _ in 0..1000 {
        let c = rng.random_range(0.5..2.0);
        let ball = PoincareBall::with_margin(c, opts.eps_bnd)?;
        let dim = rng.random_range(2..9);
        // tangent vectors well inside the clip radius
        let mut v = gauss_vec(rng, dim, 1.0);
        let r = rng.random_range(0.0..1.2) / c.sqrt();
        let n = norm(&v).max(1e-12);
        v.iter_mut().for_each(|x| *x *= r / n);
        let h = ball.exp0(&TangentVector::new(v.clone())?)?;
        let back = ball.log0(&h)?;
        round_trip = round_trip.max(max_abs_diff(back.coords(), &v));

        let ratio = rng.random_range(0.5..2.0);
        let other = PoincareBall::with_margin((c * ratio).clamp(0.05, 20.0), opts.eps_bnd)?;
        let moved = isometric_rescale(&h, &other)?;
        let d0 = ball.dist(&ball.origin(dim), &h)?;
        let d1 = other.dist(&other.origin(dim), &moved)?;
        rescale = rescale.max((d0 - d1).abs());

        let zero = vec![0.0; dim];
        let x = h.coords();
        let neg: Vec<f64> = x.iter().map(|a| -a).collect();
        mobius = mobius
            .max(max_abs_diff(&mobius_add_raw(&zero, x, c), x))
            .max(max_abs_diff(&mobius_add_raw(x, &zero, c), x))
            .max(norm(&mobius_add_raw(&neg, x, c)));

        // construction with the (possibly faulty) margin must respect eps_bnd
        let far = RadialMap::Exp0 { c }.apply(&gauss_vec(rng, dim, 10.0));
        let built = PoincareBall::with_margin(c, opts.clip_margin)?.clip(&far).0;
        overshoot = overshoot.max(built.norm() - ball.max_norm());

        let lambda = ball.conformal_factor(&h)?;
        let w = ball.volume_weight(&h, VolumeWeighting::Density)?;
        volume = volume.max((w - (lambda / 2.0).powi(dim as i32)).abs() / w);
    }
    s.at_most("hypmath", "exp0_log0_round_trip", round_trip, 1e-9);
    s.at_most("hypmath", "isometric_rescale_origin_distance", rescale, 1e-9);
    s.at_most("hypmath", "mobius_identities", mobius, 1e-12);
    s.at_most("hypmath", "boundary_margin_overshoot", overshoot.max(0.0), 0.0);
    s.at_most("hypmath", "volume_weight_conformal_power", volume, 1e-12);

    let ok = |a: f64, b: f64| check_curvature_ratio(Curvature::new(a).unwrap(), Curvature::new(b).unwrap()).is_ok();
    let wrong = [ok(1.0, 0.5), ok(1.0, 2.0), !ok(1.0, 0.49), !ok(1.0, 2.01)]
        .iter()
        .filter(|&&b| !b)
        .count();
    s.at_most("hypmath", "curvature_ratio_window", wrong as f64, 0.0);
    Ok(())
}

fn random_rows(rng: &mut ChaCha8Rng, ball: &PoincareBall, rows: usize, dim: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows, dim));
    for mut row in out.rows_mut() {
        let p = ball.exp0(&TangentVector::new(gauss_vec(rng, dim, 0.6))?)?;
        row.assign(&ndarray::ArrayView1::from(p.coords()));
    }
    Ok(out)
}

fn mirror_checks(s: &mut Suite, opts: &CheckOptions, rng: &mut ChaCha8Rng) -> Result<()> {
    let e = PoincareBall::with_margin(1.0, opts.eps_bnd)?;
    let a = PoincareBall::with_margin(0.8, opts.eps_bnd)?;
    let mut store = ParamStore::new();
    let layer = MirrorLayer::new(&mut store, e, a, 3, 2, 8, rng);
    let pts = random_rows(rng, &e, 4, 3)?;

    let cfg = MirrorLossConfig::default();
    let report = grad_check(
        |g, st| {
            let x = g.constant(pts.clone());
            layer.cycle_loss(g, st, x, cfg)
        },
        &mut store,
        &layer.params(),
        FD_STEP,
        1e-4,
    )?;
    s.at_most("gradtape", "cycle_loss_finite_difference", report.worst(), 1e-4);

    let value = |cfg: MirrorLossConfig| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(pts.clone());
        let l = layer.cycle_loss(&mut g, &store, x, cfg)?;
        Ok(g.scalar(l))
    };
    let weighted = value(MirrorLossConfig {
        weighting: CycleWeighting::Mean,
        ..cfg
    })?;
    let plain = value(MirrorLossConfig {
        weighting: CycleWeighting::Unweighted,
        ..cfg
    })?;
    s.at_most("mirror", "weighted_minus_unweighted_cycle", plain - weighted, 0.0);

    let mut g = Graph::new();
    let x = g.constant(pts.clone());
    let y = layer.g.forward(&mut g, &store, x)?;
    let z = layer.f.forward(&mut g, &store, y)?;
    let worst = |m: &Array2<f64>, ball: &PoincareBall| {
        m.rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt() - ball.max_norm())
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let over = worst(g.value(y), &a).max(worst(g.value(z), &e));
    s.at_most("mirror", "outputs_inside_margin", over.max(0.0), 0.0);
    Ok(())
}

fn score_checks(s: &mut Suite) -> Result<()> {
    let pts: Vec<Vec<f64>> = vec![vec![0.3, -0.2], vec![-0.5, 0.4], vec![0.1, 0.7]];
    let grad = curl_proxy(
        |x| Ok(vec![2.0 * x[0] * x[1], x[0] * x[0] + 3.0 * x[1] * x[1]]),
        &pts,
        1e-3,
    )?;
    s.at_most("scorefield", "gradient_field_curl", grad, 1e-5);
    let rot = curl_proxy(|x| Ok(vec![-x[1], x[0]]), &pts, 1e-3)?;
    s.at_most("scorefield", "rotation_field_curl_minus_two", (rot - 2.0).abs(), 1e-6);
    Ok(())
}

fn decomposition_checks(s: &mut Suite) -> Result<()> {
    let mut store = ParamStore::new();
    let bank = PropertyBank::new(&mut store, "p", 1, 4, 0.95, 100);
    *store.get_mut(bank.params[0]) = Array2::from_shape_vec((1, 4), vec![1.0, -2.0, 0.5, 3.0]).expect("1x4");
    let target = Array2::from_shape_vec((1, 4), vec![0.2, 0.1, -0.4, 0.0]).expect("1x4");
    let gap = |st: &ParamStore| {
        let d = bank.get(st, 0) - &target;
        d.iter().map(|x| x * x).sum::<f64>().sqrt()
    };
    let start = gap(&store);
    let mut worst = 0.0f64;
    for k in 1..=20u64 {
        bank.ema_update(&mut store, 0, &target, 100 * k)?;
        worst = worst.max((gap(&store) - 0.95f64.powi(k as i32) * start).abs());
    }
    s.at_most("propdecomp", "ema_geometric_decay", worst, 1e-12);
    Ok(())
}

fn fusion_checks(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let ball = PoincareBall::new(1.0)?;
    let mut store = ParamStore::new();
    let fuser = SetFuser::new(&mut store, "f", FusionConfig::new(4), ball, rng)?;
    let rows = 5;
    let slots: Vec<Array2<f64>> = (0..4)
        .map(|_| Array2::from_shape_fn((rows, 4), |_| rng.random_range(-0.5..0.5)))
        .collect();
    let avail: Vec<Array2<f64>> = (0..4)
        .map(|_| Array2::from_shape_fn((rows, 1), |_| f64::from(u8::from(rng.random_bool(0.7)))))
        .collect();
    // mask tokens belong to their slot, so permute the filled elements
    let run = |order: &[usize]| -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let vars: Vec<_> = slots.iter().map(|x| g.constant(x.clone())).collect();
        let filled = fuser.fill_slots(&mut g, &store, &vars, &avail)?;
        let elems: Vec<_> = order.iter().map(|&i| filled[i]).collect();
        let out = fuser.pool(&mut g, &store, &elems)?;
        Ok(g.value(out).clone())
    };
    let base = run(&[0, 1, 2, 3])?;
    let perm = run(&[2, 0, 3, 1])?;
    let diff = (&base - &perm).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    s.at_most("fusion", "slot_permutation_invariance", diff, 1e-12);
    Ok(())
}

fn data_checks(s: &mut Suite, rng: &mut ChaCha8Rng) {
    let masks: Vec<Mask> = (0..500)
        .map(|_| std::array::from_fn(|_| rng.random_bool(0.8)))
        .collect();
    let masks: Vec<Mask> = masks.into_iter().filter(|m| m.iter().any(|&b| b)).collect();
    let mut emptied = 0usize;
    for p in [0.2, 0.5, 0.8, 1.0] {
        emptied += sample_mask(&masks, p, rng)
            .iter()
            .filter(|m| !m.iter().any(|&b| b))
            .count();
    }
    s.at_most("data", "masking_never_empties_a_sample", emptied as f64, 0.0);

    let mut violations = 0usize;
    let grid = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
    for w in grid.windows(2) {
        let lo = eta_masks(400, w[0], 11);
        let hi = eta_masks(400, w[1], 11);
        for (a, b) in lo.iter().zip(&hi) {
            violations += (0..NUM_MODALITIES).filter(|&m| b[m] && !a[m]).count();
        }
    }
    s.at_most("data", "eta_masks_nested", violations as f64, 0.0);
}

fn analysis_checks(s: &mut Suite) -> Result<()> {
    let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])?;
    s.at_most("analysis", "spearman_four_point", (r.rho - 0.8).abs(), 0.0);
    let t = cochran_armitage(&[2, 8], &[10, 10], &[0.0, 1.0])?;
    s.at_most("analysis", "trend_hand_example", (t.t - 3.0).abs(), 0.0);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_clean_build() {
        let report = run_checks(&CheckOptions::default()).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert!(report.results.len() >= 15);
        let text = report.render();
        assert!(text.contains("hypmath\texp0_log0_round_trip"));
    }

    #[test]
    fn corrupted_margin_is_caught() {
        let opts = CheckOptions {
            clip_margin: 1e-4,
            ..Default::default()
        };
        let report = run_checks(&opts).unwrap();
        assert!(!report.passed());
        let failed: Vec<_> = report.results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        assert_eq!(failed, ["boundary_margin_overshoot"]);
    }
}
