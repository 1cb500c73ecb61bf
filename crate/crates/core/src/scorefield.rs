//! Denoising score matching in mirror space, the reverse-time sampler, the
//! recovered emotion field `V̂` and its numerical curl.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::gradtape::{geom, Activation, Graph, Mlp, ParamId, ParamKind, ParamStore, Var};
use crate::hypmath::{PoincareBall, RadialMap};
use crate::mirror::MirrorLayer;

/// Geometric variance-exploding schedule `σ(t) = σ_min (σ_max/σ_min)^{t/T}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub horizon: f64,
    pub num_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.01,
            sigma_max: 1.0,
            horizon: 1.0,
            num_steps: 50,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, horizon: f64, num_steps: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min && horizon > 0.0) {
            return Err(contract(format!(
                "noise schedule needs 0 < σ_min < σ_max and T > 0, got ({sigma_min}, {sigma_max}, {horizon})"
            )));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
            horizon,
            num_steps,
        })
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t / self.horizon)
    }

    /// Noise levels visited by the sampler, from `σ_max` down to `σ_min`.
    pub fn reverse_grid(&self) -> Vec<f64> {
        let n = self.num_steps;
        (0..=n)
            .map(|i| {
                let t = if n == 0 {
                    self.horizon
                } else {
                    self.horizon * (1.0 - i as f64 / n as f64)
                };
                self.sigma(t)
            })
            .collect()
    }

    fn check_t(&self, t: f64) -> Result<()> {
        if !(t > 0.0 && t <= self.horizon) {
            return Err(contract(format!("t = {t} outside (0, {}]", self.horizon)));
        }
        Ok(())
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// `z_t = z0 + σ(t) ε` and the kernel score `(z0 − z_t)/σ(t)²`.
pub fn perturb_with(z0: &[f64], t: f64, schedule: &NoiseSchedule, eps: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    schedule.check_t(t)?;
    if eps.len() != z0.len() {
        return Err(contract("noise and point dimensions differ"));
    }
    let s = schedule.sigma(t);
    let zt: Vec<f64> = z0.iter().zip(eps).map(|(z, e)| z + s * e).collect();
    let target = z0.iter().zip(&zt).map(|(a, b)| (a - b) / (s * s)).collect();
    Ok((zt, target))
}

pub fn perturb<R: Rng + ?Sized>(
    z0: &[f64],
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let eps: Vec<f64> = (0..z0.len()).map(|_| gauss(rng)).collect();
    perturb_with(z0, t, schedule, &eps)
}

/// Anything that can evaluate a score for a batch of rows at noise level `σ`.
pub trait ScoreFn {
    fn score(&self, z: &Array2<f64>, sigma: f64) -> Result<Array2<f64>>;
}

/// Exact score of the perturbed law of `Normal(mean, var I)` data.
#[derive(Clone, Debug)]
pub struct GaussianScore {
    pub mean: Vec<f64>,
    pub var: f64,
}

impl ScoreFn for GaussianScore {
    fn score(&self, z: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
        let total = self.var + sigma * sigma;
        let mut out = z.clone();
        for mut row in out.rows_mut() {
            for (x, m) in row.iter_mut().zip(&self.mean) {
                *x = (m - *x) / total;
            }
        }
        Ok(out)
    }
}

/// Smallest data variance the gate initialisation resolves.
pub const GATE_VAR_FLOOR: f64 = 1e-8;

/// `s_θ(z, σ) = (1 − κ)(F_θ(z, ln σ) − z)/σ²` with `κ = sigmoid(a + b ln σ)`.
///
/// The gate lets the network represent both sharply concentrated and
/// Gaussian data exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreModel {
    pub net: Mlp,
    pub gate: ParamId,
    pub dim: usize,
}

impl ScoreModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        let net = Mlp::new(
            store,
            &format!("{name}.net"),
            &[dim + 1, hidden, dim],
            Activation::Tanh,
            rng,
        );
        let gate = store.add(
            format!("{name}.gate"),
            ndarray::array![[0.0, -2.0]],
            ParamKind::Euclidean,
        );
        Self { net, gate, dim }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.net.params();
        p.push(self.gate);
        p
    }

    /// Scores for rows `z` with per-row noise levels `sigma` (`r×1`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, sigma: &Array2<f64>) -> Result<Var> {
        if g.shape(z).1 != self.dim || sigma.dim() != (g.shape(z).0, 1) {
            return Err(contract("score model input shape mismatch"));
        }
        let log_sigma = g.constant(sigma.mapv(f64::ln));
        let inp = g.concat_cols(&[z, log_sigma])?;
        let f = self.net.forward(g, store, inp)?;
        let gate = g.param(store, self.gate);
        let a = g.columns(gate, 0, 1)?;
        let b = g.columns(gate, 1, 1)?;
        let bl = g.mul(log_sigma, b)?;
        let logit = g.add(bl, a)?;
        // 1 − sigmoid(x) = (1 − tanh(x/2))/2
        let half = g.scale(logit, 0.5);
        let th = g.tanh(half);
        let neg = g.scale(th, -0.5);
        let one_minus_kappa = g.offset(neg, 0.5);
        let diff = g.sub(f, z)?;
        let gated = g.mul(diff, one_minus_kappa)?;
        let inv = g.constant(sigma.mapv(|s| 1.0 / (s * s)));
        g.mul(gated, inv)
    }

    /// Moment-matched initialisation: afterwards the model is exactly the
    /// score of `Normal(mean(z0), v I)` with `v` the mean per-coordinate
    /// variance of `z0`. The gate becomes `κ(σ) = v/(v + σ²)` and the network
    /// output is the constant batch mean.
    pub fn init_from_data(&self, store: &mut ParamStore, z0: &Array2<f64>) -> Result<()> {
        if z0.nrows() == 0 || z0.ncols() != self.dim {
            return Err(contract(
                "score model initialisation needs a non-empty batch of the model width",
            ));
        }
        let var = if z0.nrows() > 1 {
            z0.var_axis(Axis(0), 0.0).mean().unwrap_or(0.0)
        } else {
            0.0
        };
        let mean = z0.mean_axis(Axis(0)).expect("non-empty");
        let gate = store.get_mut(self.gate);
        gate[[0, 0]] = var.max(GATE_VAR_FLOOR).ln();
        gate[[0, 1]] = -2.0;
        let last = self.net.layers.last().expect("at least one layer");
        store.get_mut(last.weight).fill(0.0);
        if let Some(b) = last.bias {
            store.get_mut(b).row_mut(0).assign(&mean);
        }
        Ok(())
    }

    pub fn bind<'a>(&'a self, store: &'a ParamStore) -> BoundScore<'a> {
        BoundScore { model: self, store }
    }
}

/// A score model paired with the parameter values to evaluate it at.
pub struct BoundScore<'a> {
    pub model: &'a ScoreModel,
    pub store: &'a ParamStore,
}

impl ScoreFn for BoundScore<'_> {
    fn score(&self, z: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let s = Array2::from_elem((z.nrows(), 1), sigma);
        let out = self.model.forward(&mut g, self.store, zv, &s)?;
        Ok(g.value(out).clone())
    }
}

/// Times and noise used by one Monte-Carlo evaluation of the score loss.
#[derive(Clone, Debug)]
pub struct ScoreDraws {
    pub t: Vec<f64>,
    pub eps: Array2<f64>,
}

impl ScoreDraws {
    pub fn sample<R: Rng + ?Sized>(rows: usize, dim: usize, schedule: &NoiseSchedule, rng: &mut R) -> Self {
        // t ~ Uniform(0, T]
        let t = (0..rows)
            .map(|_| schedule.horizon * (1.0 - rng.random::<f64>()))
            .collect();
        let eps = Array2::from_shape_simple_fn((rows, dim), || gauss(rng));
        Self { t, eps }
    }

    /// Like [`ScoreDraws::sample`] but row `i + rows/2` reuses the time of
    /// row `i` with negated noise. The `1/σ` part of the loss gradient then
    /// cancels within each pair, which keeps small noise levels usable.
    pub fn antithetic<R: Rng + ?Sized>(rows: usize, dim: usize, schedule: &NoiseSchedule, rng: &mut R) -> Self {
        let half = rows / 2;
        let mut d = Self::sample(rows, dim, schedule, rng);
        for i in 0..half {
            d.t[i + half] = d.t[i];
            let row = d.eps.row(i).mapv(|e| -e);
            d.eps.row_mut(i + half).assign(&row);
        }
        d
    }
}

/// Per-row weight `λ(σ)` applied to the score-matching residual.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreWeighting {
    /// `λ = 1`.
    Uniform,
    /// `λ = σ²`, which makes every noise level contribute on the same scale.
    #[default]
    NoiseVariance,
}

/// Batch mean of `λ(σ) ‖s_θ(z_t, t) − ∇ log q_t(z_t | z0)‖²`.
pub fn score_loss(
    g: &mut Graph,
    store: &ParamStore,
    model: &ScoreModel,
    z0: &Array2<f64>,
    schedule: &NoiseSchedule,
    draws: &ScoreDraws,
    weighting: ScoreWeighting,
) -> Result<Var> {
    let rows = z0.nrows();
    if rows == 0 {
        return Err(contract("score loss needs a non-empty batch"));
    }
    if draws.t.len() != rows || draws.eps.dim() != z0.dim() {
        return Err(contract("score draws do not match the batch"));
    }
    for &t in &draws.t {
        schedule.check_t(t)?;
    }
    let sigma = Array2::from_shape_fn((rows, 1), |(i, _)| schedule.sigma(draws.t[i]));
    let zt = z0 + &(&draws.eps * &sigma);
    let target = -(&draws.eps / &sigma);
    let zv = g.constant(zt);
    let s = model.forward(g, store, zv, &sigma)?;
    let tv = g.constant(target);
    let d = g.sub(s, tv)?;
    let sq = g.square(d);
    let per_row = g.sum_rows(sq);
    let per_row = match weighting {
        ScoreWeighting::Uniform => per_row,
        ScoreWeighting::NoiseVariance => {
            let w = g.constant(sigma.mapv(|x| x * x));
            g.mul(per_row, w)?
        }
    };
    Ok(g.mean(per_row))
}

/// `sqrt(Σ‖s − s*‖² / Σ‖s*‖²)` over the rows of `z` at noise level `sigma`.
pub fn relative_score_error(model: &dyn ScoreFn, reference: &dyn ScoreFn, z: &Array2<f64>, sigma: f64) -> Result<f64> {
    let a = model.score(z, sigma)?;
    let b = reference.score(z, sigma)?;
    let num = (&a - &b).mapv(|x| x * x).sum();
    let den = b.mapv(|x| x * x).sum();
    Ok((num / den).sqrt())
}

/// Euler–Maruyama integration of the reverse variance-exploding SDE.
pub fn reverse_sample<R: Rng + ?Sized>(
    score: &dyn ScoreFn,
    schedule: &NoiseSchedule,
    count: usize,
    dim: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let grid = schedule.reverse_grid();
    let mut z = Array2::from_shape_simple_fn((count, dim), || schedule.sigma_max * gauss(rng));
    for w in grid.windows(2) {
        let (hi, lo) = (w[0], w[1]);
        let step = hi * hi - lo * lo;
        let s = score.score(&z, hi)?;
        let noise = Array2::from_shape_simple_fn((count, dim), || gauss(rng));
        z = z + &(s * step) + &(noise * step.sqrt());
    }
    Ok(z)
}

/// `V̂(h) = log0^E(f_ψ(clip_A(ẑ))) − log0^E(h)` row by row.
pub fn field_from_samples(
    mirror: &MirrorLayer,
    store: &ParamStore,
    z_hat: &Array2<f64>,
    h: &Array2<f64>,
) -> Result<Array2<f64>> {
    if z_hat.dim() != h.dim() {
        return Err(contract("sample and base-point batches differ in shape"));
    }
    let (e, a) = (*mirror.emotion(), *mirror.anti());
    let mut g = Graph::new();
    let z = g.constant(z_hat.clone());
    let za = geom::clip(&mut g, z, &a);
    let back = mirror.f.forward(&mut g, store, za)?;
    let tangent = geom::log0(&mut g, back, &e);
    let hv = g.constant(h.clone());
    let base = geom::log0(&mut g, hv, &e);
    let v = g.sub(tangent, base)?;
    Ok(g.value(v).clone())
}

/// Draws one reverse-diffusion sample per base point and maps it back to `M_E`.
pub fn recover_vector_field<R: Rng + ?Sized>(
    score: &dyn ScoreFn,
    mirror: &MirrorLayer,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    h: &Array2<f64>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let z_hat = reverse_sample(score, schedule, h.nrows(), h.ncols(), rng)?;
    field_from_samples(mirror, store, &z_hat, h)
}

/// `max_{x, i<j} |∂_i V_j − ∂_j V_i|` by central differences with step `delta`.
pub fn curl_proxy<F>(field: F, points: &[Vec<f64>], delta: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(delta > 0.0) || points.is_empty() {
        return Err(contract("curl proxy needs delta > 0 and at least one point"));
    }
    let mut worst = 0.0f64;
    for x in points {
        let n = x.len();
        // jac[i][j] = ∂_i V_j
        let mut jac = vec![vec![0.0; n]; n];
        for i in 0..n {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[i] += delta;
            minus[i] -= delta;
            let vp = field(&plus)?;
            let vm = field(&minus)?;
            if vp.len() != n || vm.len() != n {
                return Err(contract("vector field dimension differs from its domain"));
            }
            for j in 0..n {
                jac[i][j] = (vp[j] - vm[j]) / (2.0 * delta);
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((jac[i][j] - jac[j][i]).abs());
            }
        }
    }
    Ok(worst)
}

/// `λ · max(0, proxy − bound)`.
pub fn curl_penalty(proxy: f64, lambda: f64, bound: f64) -> f64 {
    lambda * (proxy - bound).max(0.0)
}

/// Curl proxy of `h ↦ V̂(h)` with the reverse-diffusion samples held fixed.
pub fn field_curl(
    mirror: &MirrorLayer,
    store: &ParamStore,
    z_hat: &[f64],
    points: &[Vec<f64>],
    delta: f64,
) -> Result<f64> {
    let e: PoincareBall = *mirror.emotion();
    let z = Array2::from_shape_vec((1, z_hat.len()), z_hat.to_vec()).map_err(|_| contract("bad sample"))?;
    let anchor = field_from_samples(mirror, store, &z, &Array2::zeros((1, z_hat.len())))?;
    let anchor = anchor.index_axis(Axis(0), 0).to_owned();
    let log0 = RadialMap::Log0 { c: e.c() };
    curl_proxy(
        |h| {
            let l = log0.apply(h);
            Ok(anchor.iter().zip(&l).map(|(a, b)| a - b).collect())
        },
        points,
        delta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Adam;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_noise_gives_zero_target() {
        let s = NoiseSchedule::default();
        let (zt, target) = perturb_with(&[0.3, -0.1], 0.5, &s, &[0.0, 0.0]).unwrap();
        assert_eq!(zt, vec![0.3, -0.1]);
        assert_eq!(target, vec![0.0, 0.0]);
    }

    #[test]
    fn unit_sigma_target_is_analytic() {
        // σ(T) = σ_max = 1
        let s = NoiseSchedule::default();
        let (zt, target) = perturb_with(&[0.0, 0.0], 1.0, &s, &[1.0, 0.0]).unwrap();
        assert_eq!(zt, vec![1.0, 0.0]);
        assert_abs_diff_eq!(target[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(target[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn t_out_of_range_is_contract_error() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(perturb(&[0.0], 0.0, &s, &mut rng).is_err());
        assert!(perturb(&[0.0], 1.5, &s, &mut rng).is_err());
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = NoiseSchedule::default();
        assert_abs_diff_eq!(s.sigma(0.0), 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sigma(1.0), 1.0, epsilon = 1e-15);
        let grid = s.reverse_grid();
        assert_eq!(grid.len(), 51);
        assert!(grid.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn target_has_zero_mean() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let t = 0.4;
        let sigma = s.sigma(t);
        let mut sum = 0.0;
        for _ in 0..n {
            sum += perturb(&[0.2], t, &s, &mut rng).unwrap().1[0];
        }
        let mean = sum / n as f64;
        // target = −ε/σ has standard deviation 1/σ
        assert!(mean.abs() < 3.0 / sigma / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn loss_is_nonnegative_and_rejects_empty() {
        let s = NoiseSchedule::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = ScoreModel::new(&mut store, "s", 2, 8, &mut rng);
        let z0 = Array2::from_elem((4, 2), 0.3);
        let draws = ScoreDraws::sample(4, 2, &s, &mut rng);
        let mut g = Graph::new();
        let l = score_loss(&mut g, &store, &model, &z0, &s, &draws, ScoreWeighting::Uniform).unwrap();
        assert!(g.scalar(l) >= 0.0);
        let empty = Array2::zeros((0, 2));
        let draws = ScoreDraws::sample(0, 2, &s, &mut rng);
        let mut g = Graph::new();
        assert!(score_loss(&mut g, &store, &model, &empty, &s, &draws, ScoreWeighting::Uniform).is_err());
    }

    fn train_toy(
        store: &mut ParamStore,
        model: &ScoreModel,
        sample: impl Fn(&mut ChaCha8Rng) -> Array2<f64>,
        seed: u64,
        steps: usize,
    ) {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = Adam::new(1e-2);
        for step in 0..steps {
            opt.cfg.lr = 1e-2 * (1.0 - step as f64 / steps as f64).max(1e-3);
            let z0 = sample(&mut rng);
            if step == 0 {
                model.init_from_data(store, &z0).unwrap();
            }
            let draws = ScoreDraws::antithetic(z0.nrows(), 2, &s, &mut rng);
            let mut g = Graph::new();
            let l = score_loss(&mut g, store, model, &z0, &s, &draws, ScoreWeighting::NoiseVariance).unwrap();
            let grads = g.backward(l).unwrap();
            opt.step(store, &grads);
        }
    }

    fn held_out(mu: [f64; 2], sd: f64, seed: u64) -> Array2<f64> {
        let s = NoiseSchedule::default();
        let total = (sd * sd + s.sigma_min * s.sigma_min).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((512, 2), |(_, j)| mu[j] + total * gauss(&mut rng))
    }

    #[test]
    fn learns_point_mass_score() {
        let z0 = [0.4, -0.3];
        let mut store = ParamStore::new();
        let model = ScoreModel::new(&mut store, "s", 2, 32, &mut ChaCha8Rng::seed_from_u64(5));
        let s = NoiseSchedule::default();
        let reference = GaussianScore {
            mean: z0.to_vec(),
            var: 0.0,
        };
        let z = held_out(z0, 0.0, 99);
        let initial = relative_score_error(&model.bind(&store), &reference, &z, s.sigma_min).unwrap();
        train_toy(
            &mut store,
            &model,
            |_| Array2::from_shape_fn((256, 2), |(_, j)| z0[j]),
            5,
            2000,
        );
        let err = relative_score_error(&model.bind(&store), &reference, &z, s.sigma_min).unwrap();
        assert!(err < 0.1, "relative error {err}");
        assert!(err < 0.1 * initial, "{err} vs initial {initial}");
    }

    #[test]
    fn learns_isotropic_gaussian_score() {
        let mu = [0.2, -0.1];
        let sd = 0.3;
        let mut store = ParamStore::new();
        let model = ScoreModel::new(&mut store, "s", 2, 32, &mut ChaCha8Rng::seed_from_u64(6));
        let sample = move |rng: &mut ChaCha8Rng| Array2::from_shape_fn((256, 2), |(_, j)| mu[j] + sd * gauss(rng));
        train_toy(&mut store, &model, sample, 6, 2000);
        let s = NoiseSchedule::default();
        let reference = GaussianScore {
            mean: mu.to_vec(),
            var: sd * sd,
        };
        let z = held_out(mu, sd, 98);
        let err = relative_score_error(&model.bind(&store), &reference, &z, s.sigma_min).unwrap();
        assert!(err < 0.1, "relative error {err}");
    }

    #[test]
    fn moment_init_is_exact_gaussian_score() {
        let mut store = ParamStore::new();
        let model = ScoreModel::new(&mut store, "s", 2, 8, &mut ChaCha8Rng::seed_from_u64(1));
        let z0 = ndarray::array![[0.1, 0.3], [0.3, -0.1], [0.2, 0.4]];
        model.init_from_data(&mut store, &z0).unwrap();
        let var = z0.var_axis(Axis(0), 0.0).mean().unwrap();
        let mean = z0.mean_axis(Axis(0)).unwrap().to_vec();
        let reference = GaussianScore { mean, var };
        let z = ndarray::array![[0.0, 0.0], [0.5, -0.2]];
        for sigma in [0.01, 0.2, 1.0] {
            let err = relative_score_error(&model.bind(&store), &reference, &z, sigma).unwrap();
            assert!(err < 1e-12, "{sigma}: {err}");
        }
        assert!(model.init_from_data(&mut store, &Array2::zeros((0, 2))).is_err());
    }

    #[test]
    fn antithetic_draws_pair_up() {
        let s = NoiseSchedule::default();
        let d = ScoreDraws::antithetic(5, 3, &s, &mut ChaCha8Rng::seed_from_u64(0));
        for i in 0..2 {
            assert_eq!(d.t[i], d.t[i + 2]);
            for j in 0..3 {
                assert_eq!(d.eps[[i, j]], -d.eps[[i + 2, j]]);
            }
        }
        assert!(d.t.iter().all(|&t| t > 0.0 && t <= 1.0));
    }

    #[test]
    fn noise_variance_weighting_scales_rows() {
        let s = NoiseSchedule::default();
        let mut store = ParamStore::new();
        let model = ScoreModel::new(&mut store, "s", 1, 4, &mut ChaCha8Rng::seed_from_u64(3));
        let z0 = Array2::from_elem((1, 1), 0.2);
        let draws = ScoreDraws {
            t: vec![0.5],
            eps: Array2::from_elem((1, 1), 0.7),
        };
        let mut g = Graph::new();
        let u = score_loss(&mut g, &store, &model, &z0, &s, &draws, ScoreWeighting::Uniform).unwrap();
        let w = score_loss(&mut g, &store, &model, &z0, &s, &draws, ScoreWeighting::NoiseVariance).unwrap();
        let sig = s.sigma(0.5);
        assert_abs_diff_eq!(g.scalar(w), g.scalar(u) * sig * sig, epsilon = 1e-12);
    }

    #[test]
    fn analytic_sampler_recovers_mean() {
        let s = NoiseSchedule::default();
        let mu = vec![0.3, -0.2];
        let score = GaussianScore {
            mean: mu.clone(),
            var: s.sigma_min * s.sigma_min,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = reverse_sample(&score, &s, 10_000, 2, &mut rng).unwrap();
        let mean = z.mean_axis(Axis(0)).unwrap();
        let sd = z.std_axis(Axis(0), 1.0);
        for j in 0..2 {
            assert!(
                (mean[j] - mu[j]).abs() < 3.0 * sd[j] / 100.0,
                "{} vs {}",
                mean[j],
                mu[j]
            );
        }
    }

    #[test]
    fn zero_steps_returns_initial_draw() {
        let s = NoiseSchedule {
            num_steps: 0,
            ..Default::default()
        };
        let score = GaussianScore {
            mean: vec![0.0],
            var: 1.0,
        };
        let a = reverse_sample(&score, &s, 5, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for x in a.iter() {
            let e: f64 = StandardNormal.sample(&mut rng);
            assert_eq!(*x, s.sigma_max * e);
        }
        let b = reverse_sample(
            &score,
            &NoiseSchedule::default(),
            5,
            1,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let c = reverse_sample(
            &score,
            &NoiseSchedule::default(),
            5,
            1,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn curl_of_gradient_and_rotation_fields() {
        let pts = vec![vec![0.3, -0.7], vec![1.1, 0.4], vec![-0.5, 0.2]];
        let id = curl_proxy(|x| Ok(x.to_vec()), &pts, 1e-3).unwrap();
        assert!(id < 1e-9);
        let rot = curl_proxy(|x| Ok(vec![-x[1], x[0]]), &pts, 1e-3).unwrap();
        assert_abs_diff_eq!(rot, 2.0, epsilon = 1e-6);
        let quartic = curl_proxy(
            |x| {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                Ok(x.iter().map(|v| 4.0 * r2 * v).collect())
            },
            &pts,
            1e-3,
        )
        .unwrap();
        assert!(quartic < 1e-6);
        assert!(curl_proxy(|x| Ok(x.to_vec()), &pts, 0.0).is_err());
        assert!(curl_proxy(|x| Ok(x.to_vec()), &[], 1e-3).is_err());
    }

    #[test]
    fn penalty_is_hinged_at_bound() {
        assert_eq!(curl_penalty(0.005, 0.1, 0.01), 0.0);
        assert_abs_diff_eq!(curl_penalty(0.02, 0.1, 0.01), 0.001, epsilon = 1e-15);
        assert_eq!(curl_penalty(0.01, 0.1, 0.01), 0.0);
    }

    #[test]
    fn identity_mirror_with_point_mass_recovers_zero_field() {
        let e = PoincareBall::new(1.0).unwrap();
        let a = PoincareBall::new(0.8).unwrap();
        let mirror = MirrorLayer::transport(e, a);
        let store = ParamStore::new();
        let h = e.point(vec![0.2, -0.4]).unwrap();
        let z0 = mirror.g.apply(&store, &h).unwrap();
        let schedule = NoiseSchedule::default();
        let score = GaussianScore {
            mean: z0.coords().to_vec(),
            var: 0.0,
        };
        let hm = Array2::from_shape_vec((1, 2), h.coords().to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = recover_vector_field(&score, &mirror, &store, &schedule, &hm, &mut rng).unwrap();
        assert!(v.iter().all(|x| x.abs() < 0.05), "{v:?}");
    }

    #[test]
    fn recovered_field_curl_is_small() {
        let e = PoincareBall::new(1.0).unwrap();
        let a = PoincareBall::new(0.8).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mirror = MirrorLayer::new(&mut store, e, a, 3, 2, 8, &mut rng);
        let pts = vec![vec![0.1, 0.5, -0.2], vec![-0.6, 0.1, 0.3]];
        let proxy = field_curl(&mirror, &store, &[0.2, -0.1, 0.4], &pts, 1e-3).unwrap();
        assert!(proxy < 1e-5, "{proxy}");
    }
}
