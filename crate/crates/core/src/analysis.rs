//! Rank and trend statistics, closed-form complexity bounds and run
//! diagnostics.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{contract, domain, Result};
use crate::hypmath::{dist_raw, norm};

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    /// Two-sided, from the t approximation with `n − 2` degrees of freedom.
    pub p: f64,
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(contract(format!(
            "spearman: lengths {} and {} differ",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(contract("spearman needs at least 3 pairs"));
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y));
    let df = (x.len() - 2) as f64;
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Correlation { rho, p })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendTest {
    pub t: f64,
    pub z: f64,
    /// One-sided, for an increasing trend.
    pub p: f64,
}

fn check_trend_input(successes: &[u64], totals: &[u64], scores: &[f64]) -> Result<()> {
    let k = totals.len();
    if k < 2 || successes.len() != k || scores.len() != k {
        return Err(contract("trend test needs K ≥ 2 strata with one count and score each"));
    }
    if totals.contains(&0) {
        return Err(contract("trend test: empty column"));
    }
    if successes.iter().zip(totals).any(|(o, n)| o > n) {
        return Err(contract("trend test: more successes than trials"));
    }
    if scores.windows(2).any(|w| w[1] < w[0]) || scores.iter().any(|s| !s.is_finite()) {
        return Err(contract("trend test: scores must be finite and nondecreasing"));
    }
    Ok(())
}

fn trend_statistic(successes: &[u64], totals: &[u64], scores: &[f64]) -> f64 {
    let n: u64 = totals.iter().sum();
    let p_hat = successes.iter().sum::<u64>() as f64 / n as f64;
    scores
        .iter()
        .zip(successes.iter().zip(totals))
        .map(|(w, (&o, &nk))| w * (o as f64 - nk as f64 * p_hat))
        .sum()
}

/// Cochran–Armitage test on a `2×K` table given as per-stratum successes and
/// totals.
pub fn cochran_armitage(successes: &[u64], totals: &[u64], scores: &[f64]) -> Result<TrendTest> {
    check_trend_input(successes, totals, scores)?;
    let t = trend_statistic(successes, totals, scores);
    let n: u64 = totals.iter().sum();
    let nf = n as f64;
    let p_hat = successes.iter().sum::<u64>() as f64 / nf;
    let s1: f64 = scores.iter().zip(totals).map(|(w, &k)| w * w * k as f64).sum();
    let s2: f64 = scores.iter().zip(totals).map(|(w, &k)| w * k as f64).sum();
    let var = p_hat * (1.0 - p_hat) * (s1 - s2 * s2 / nf);
    let z = if var > 0.0 { t / var.sqrt() } else { 0.0 };
    let p = 1.0 - Normal::standard().cdf(z);
    Ok(TrendTest { t, z, p })
}

/// Exact conditional permutation distribution of the trend statistic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExactTrend {
    pub t: f64,
    pub mean: f64,
    /// `P(T ≥ t_obs)`.
    pub p_upper: f64,
    /// `P(T ≤ t_obs)`.
    pub p_lower: f64,
}

impl ExactTrend {
    /// Direction of the observed statistic relative to the permutation mean.
    pub fn sign(&self) -> i8 {
        const TOL: f64 = 1e-9;
        if self.t > self.mean + TOL {
            1
        } else if self.t < self.mean - TOL {
            -1
        } else {
            0
        }
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    statrs::function::factorial::ln_binomial(n, k)
}

/// Enumerates every allocation of the observed successes to the strata
/// (multivariate hypergeometric under the null). Intended for small tables.
pub fn exact_trend(successes: &[u64], totals: &[u64], scores: &[f64]) -> Result<ExactTrend> {
    check_trend_input(successes, totals, scores)?;
    if totals.iter().any(|&n| n > 12) || totals.len() > 6 {
        return Err(contract("exact trend enumeration is limited to K ≤ 6 and n_k ≤ 12"));
    }
    let t_obs = trend_statistic(successes, totals, scores);
    let s: u64 = successes.iter().sum();
    let n: u64 = totals.iter().sum();
    let ln_total = ln_choose(n, s);
    let mut mean = 0.0;
    let mut upper = 0.0;
    let mut lower = 0.0;
    let mut alloc = vec![0u64; totals.len()];
    fn walk(k: usize, left: u64, alloc: &mut Vec<u64>, totals: &[u64], f: &mut dyn FnMut(&[u64])) {
        if k + 1 == totals.len() {
            if left <= totals[k] {
                alloc[k] = left;
                f(alloc);
            }
            return;
        }
        for x in 0..=left.min(totals[k]) {
            alloc[k] = x;
            walk(k + 1, left - x, alloc, totals, f);
        }
    }
    walk(0, s, &mut alloc, totals, &mut |a| {
        let lp: f64 = a.iter().zip(totals).map(|(&x, &nk)| ln_choose(nk, x)).sum::<f64>() - ln_total;
        let p = lp.exp();
        let t = trend_statistic(a, totals, scores);
        mean += p * t;
        if t >= t_obs - 1e-12 {
            upper += p;
        }
        if t <= t_obs + 1e-12 {
            lower += p;
        }
    });
    Ok(ExactTrend {
        t: t_obs,
        mean,
        p_upper: upper,
        p_lower: lower,
    })
}

fn complexity_factor(gamma: f64, c: f64) -> Result<f64> {
    if !(c > 0.0) || !(gamma >= 0.0) || gamma * c.sqrt() >= 1.0 {
        return Err(domain(format!("need 0 ≤ γ < 1/√c, got γ = {gamma}, c = {c}")));
    }
    Ok(gamma / (1.0 - c * gamma * gamma))
}

/// `4√2 γ/(1 − cγ²) · √(n/N)`.
pub fn rademacher_bound(gamma: f64, c: f64, n: usize, samples: usize) -> Result<f64> {
    if samples == 0 {
        return Err(contract("sample count must be positive"));
    }
    Ok(4.0 * 2f64.sqrt() * complexity_factor(gamma, c)? * (n as f64 / samples as f64).sqrt())
}

/// `R̂ + 8√2 γ/(1 − cγ²) · √(n/N) + √(ln(1/δ)/(2N))`.
pub fn generalization_bound(
    gamma: f64,
    c: f64,
    n: usize,
    samples: usize,
    delta: f64,
    empirical_risk: f64,
) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(contract(format!("δ = {delta} outside (0, 1]")));
    }
    let complexity = 2.0 * rademacher_bound(gamma, c, n, samples)?;
    Ok(empirical_risk + complexity + ((1.0 / delta).ln() / (2.0 * samples as f64)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub empirical_max: f64,
    /// `2√c/(1 − cγ²)`.
    pub bound: f64,
    pub trials: usize,
}

impl LipschitzReport {
    pub fn within_bound(&self) -> bool {
        self.empirical_max <= self.bound
    }
}

fn uniform_in_ball<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt().max(1e-300);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    v.into_iter().map(|x| x * r / n).collect()
}

/// Largest `|d(x,y) − d(x',y')| / (‖x−x'‖ + ‖y−y'‖)` over random quadruples
/// drawn uniformly from the Euclidean ball of radius `γ` in `R^dim`.
pub fn lipschitz_check<R: Rng + ?Sized>(
    c: f64,
    gamma: f64,
    dim: usize,
    trials: usize,
    rng: &mut R,
) -> Result<LipschitzReport> {
    complexity_factor(gamma, c)?;
    let bound = 2.0 * c.sqrt() / (1.0 - c * gamma * gamma);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = uniform_in_ball(dim, gamma, rng);
        let y = uniform_in_ball(dim, gamma, rng);
        let xp = uniform_in_ball(dim, gamma, rng);
        let yp = uniform_in_ball(dim, gamma, rng);
        let num = (dist_raw(&x, &y, c) - dist_raw(&xp, &yp, c)).abs();
        let den = norm(&x.iter().zip(&xp).map(|(a, b)| a - b).collect::<Vec<_>>())
            + norm(&y.iter().zip(&yp).map(|(a, b)| a - b).collect::<Vec<_>>());
        if den > 0.0 {
            worst = worst.max(num / den);
        }
    }
    Ok(LipschitzReport {
        empirical_max: worst,
        bound,
        trials,
    })
}

/// Nearest-rank percentile: the smallest value with at least `q·N` values at
/// or below it.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClippingStats {
    pub median: f64,
    pub p95: f64,
    pub batches: usize,
}

/// Median and 95th percentile (nearest rank) of per-batch clipped fractions.
pub fn clipping_stats(fractions: &[f64]) -> Result<ClippingStats> {
    if fractions.is_empty() {
        return Err(contract("clipping statistics need at least one batch"));
    }
    let mut s = fractions.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(ClippingStats {
        median: nearest_rank(&s, 0.5),
        p95: nearest_rank(&s, 0.95),
        batches: s.len(),
    })
}
