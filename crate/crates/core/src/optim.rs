//! Adam for Euclidean parameters, Riemannian Adam for ball-valued ones,
//! global gradient clipping, and the running loss normaliser.

use std::collections::{BTreeMap, VecDeque};
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{contract, domain, Result};
use crate::gradtape::{Gradients, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::hypmath::{dot, BallPoint, PoincareBall, TangentVector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepOutcome {
    pub updated: usize,
    /// Parameters left untouched because their gradient was not finite.
    pub skipped: usize,
}

fn all_finite(t: &Tensor) -> bool {
    t.iter().all(|x| x.is_finite())
}

/// Adam over every `Euclidean` parameter that received a gradient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: BTreeMap<ParamId, Tensor>,
    v: BTreeMap<ParamId, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_config(AdamConfig {
            lr,
            ..Default::default()
        })
    }

    pub fn with_config(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> StepOutcome {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut out = StepOutcome::default();
        for (id, grad) in grads.iter() {
            if store.kind(id) != ParamKind::Euclidean {
                continue;
            }
            if !all_finite(grad) {
                out.skipped += 1;
                continue;
            }
            let m = self.m.entry(id).or_insert_with(|| Tensor::zeros(grad.dim()));
            let v = self.v.entry(id).or_insert_with(|| Tensor::zeros(grad.dim()));
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
            out.updated += 1;
        }
        out
    }
}

/// Moment state for one point on the ball.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointMoments {
    pub m: Vec<f64>,
    pub v: f64,
}

/// Euclidean gradient to Riemannian gradient: `∇_E f · (1 − c‖w‖²)²/4`.
pub fn riemannian_grad(ball: &PoincareBall, w: &[f64], egrad: &[f64]) -> Vec<f64> {
    let k = (1.0 - ball.c() * dot(w, w)).powi(2) / 4.0;
    egrad.iter().map(|g| g * k).collect()
}

/// One Riemannian Adam update of a single point, retracting with `exp_w`.
///
/// `t` is the 1-based step used for bias correction. A non-finite gradient
/// leaves both the point and its moments unchanged and returns `None`.
pub fn riemannian_adam_step(
    ball: &PoincareBall,
    w: &BallPoint,
    egrad: &[f64],
    state: &mut PointMoments,
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<Option<BallPoint>> {
    if egrad.len() != w.dim() {
        return Err(contract("gradient and point dimensions differ"));
    }
    if t == 0 {
        return Err(contract("Adam steps are 1-based"));
    }
    if egrad.iter().any(|g| !g.is_finite()) {
        return Ok(None);
    }
    if state.m.len() != w.dim() {
        state.m = vec![0.0; w.dim()];
    }
    let lambda = ball.conformal_factor(w)?;
    let rgrad = riemannian_grad(ball, w.coords(), egrad);
    for (m, g) in state.m.iter_mut().zip(&rgrad) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    }
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * lambda * lambda * dot(&rgrad, &rgrad);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let denom = (state.v / bc2).sqrt() + cfg.eps;
    let step: Vec<f64> = state.m.iter().map(|m| -lr * (m / bc1) / denom).collect();
    Ok(Some(ball.exp_at(w, &TangentVector::new(step)?)?))
}

/// Riemannian Adam over every `Ball` parameter; each row is one point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RiemannianAdam {
    pub cfg: AdamConfig,
    pub eps_bnd: f64,
    t: u64,
    state: BTreeMap<ParamId, Vec<PointMoments>>,
}

impl RiemannianAdam {
    pub fn new(cfg: AdamConfig, eps_bnd: f64) -> Self {
        Self {
            cfg,
            eps_bnd,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<StepOutcome> {
        self.t += 1;
        let mut out = StepOutcome::default();
        for (id, grad) in grads.iter() {
            let ParamKind::Ball { c } = store.kind(id) else {
                continue;
            };
            if !all_finite(grad) {
                out.skipped += 1;
                continue;
            }
            let ball = PoincareBall::with_margin(c, self.eps_bnd)?;
            let rows = grad.nrows();
            let states = self
                .state
                .entry(id)
                .or_insert_with(|| vec![PointMoments::default(); rows]);
            let value = store.get_mut(id);
            for (i, st) in states.iter_mut().enumerate() {
                let w = ball.point(value.row(i).to_vec())?;
                let g = grad.row(i).to_vec();
                if let Some(next) = riemannian_adam_step(&ball, &w, &g, st, self.t, lr, &self.cfg)? {
                    value.row_mut(i).assign(&ndarray::ArrayView1::from(next.coords()));
                }
            }
            out.updated += 1;
        }
        Ok(out)
    }
}

/// `η_t = (D/G) √((1 − cγ²)/(2σt))`.
pub fn eta_schedule(d: f64, g: f64, sigma: f64, c: f64, gamma: f64, t: u64) -> Result<f64> {
    if !(d > 0.0 && g > 0.0 && sigma > 0.0 && c > 0.0 && t > 0) {
        return Err(contract("eta schedule needs D, G, σ, c > 0 and t ≥ 1"));
    }
    let slack = 1.0 - c * gamma * gamma;
    if !(gamma >= 0.0 && slack > 0.0) {
        return Err(domain(format!("γ = {gamma} must lie in [0, 1/√c)")));
    }
    Ok(d / g * (slack / (2.0 * sigma * t as f64)).sqrt())
}

/// Online estimates of `D` and `G` feeding [`eta_schedule`].
///
/// `D` tracks the largest mean distance between the initial points and an
/// exponential running average of the iterates; `G` is an exponential average
/// of the Riemannian gradient norm. Both are floored and the resulting step is
/// capped at `eta_max`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OnlineEta {
    pub sigma_smooth: f64,
    pub d_floor: f64,
    pub g_floor: f64,
    pub eta_max: f64,
    pub avg_decay: f64,
    initial: Option<Tensor>,
    average: Option<Tensor>,
    pub d: f64,
    pub g: f64,
}

impl OnlineEta {
    pub fn new(sigma_smooth: f64, eta_max: f64) -> Self {
        Self {
            sigma_smooth,
            d_floor: 0.1,
            g_floor: 1e-3,
            eta_max,
            avg_decay: 0.99,
            initial: None,
            average: None,
            d: 0.0,
            g: 0.0,
        }
    }

    /// Folds in the current points (rows on `ball`) and their Euclidean gradient.
    pub fn observe(&mut self, ball: &PoincareBall, points: &Tensor, egrad: &Tensor) {
        let initial = self.initial.get_or_insert_with(|| points.clone());
        let average = self.average.get_or_insert_with(|| points.clone());
        average.zip_mut_with(points, |a, &p| *a = self.avg_decay * *a + (1.0 - self.avg_decay) * p);
        let mut dist = 0.0;
        let mut gnorm = 0.0;
        for i in 0..points.nrows() {
            let a = initial.row(i).to_vec();
            let (b, _) = ball.clip(&average.row(i).to_vec());
            dist += crate::hypmath::dist_raw(&a, b.coords(), ball.c());
            let w = points.row(i).to_vec();
            let rg = riemannian_grad(ball, &w, &egrad.row(i).to_vec());
            let lambda = 2.0 / (1.0 - ball.c() * dot(&w, &w));
            gnorm += lambda * dot(&rg, &rg).sqrt();
        }
        let rows = points.nrows().max(1) as f64;
        self.d = self.d.max(dist / rows);
        let gn = gnorm / rows;
        self.g = if self.g == 0.0 { gn } else { 0.99 * self.g + 0.01 * gn };
    }

    pub fn eta(&self, ball: &PoincareBall, t: u64) -> f64 {
        let d = self.d.max(self.d_floor);
        let g = self.g.max(self.g_floor);
        eta_schedule(d, g, self.sigma_smooth, ball.c(), ball.max_norm(), t.max(1))
            .map(|e| e.min(self.eta_max))
            .unwrap_or(self.eta_max)
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn global_grad_clip(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

/// The eight terms of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LossTerm {
    Task,
    Grad,
    Score,
    Cycle,
    Inv,
    Prop,
    Orth,
    Fus,
}

impl LossTerm {
    pub const ALL: [LossTerm; 8] = [
        LossTerm::Task,
        LossTerm::Grad,
        LossTerm::Score,
        LossTerm::Cycle,
        LossTerm::Inv,
        LossTerm::Prop,
        LossTerm::Orth,
        LossTerm::Fus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Task => "task",
            LossTerm::Grad => "grad",
            LossTerm::Score => "score",
            LossTerm::Cycle => "cycle",
            LossTerm::Inv => "inv",
            LossTerm::Prop => "prop",
            LossTerm::Orth => "orth",
            LossTerm::Fus => "fus",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// One value per loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle<T> {
    pub terms: [T; 8],
}

impl<T: Copy> LossBundle<T> {
    pub fn splat(x: T) -> Self {
        Self { terms: [x; 8] }
    }

    pub fn map<U>(&self, f: impl Fn(LossTerm, T) -> U) -> LossBundle<U> {
        LossBundle {
            terms: std::array::from_fn(|i| f(LossTerm::ALL[i], self.terms[i])),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (LossTerm, T)> + '_ {
        LossTerm::ALL.iter().map(move |&k| (k, self.terms[k.index()]))
    }
}

impl<T> Index<LossTerm> for LossBundle<T> {
    type Output = T;
    fn index(&self, k: LossTerm) -> &T {
        &self.terms[k.index()]
    }
}

impl<T> IndexMut<LossTerm> for LossBundle<T> {
    fn index_mut(&mut self, k: LossTerm) -> &mut T {
        &mut self.terms[k.index()]
    }
}

/// Weights of the objective: `L_task + αL_grad + βL_score + γL_cycle + δL_inv
/// + ηL_prop + λ_orth L_orth + ζL_fus`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub eta: f64,
    pub lambda_orth: f64,
    pub zeta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 1.0,
            gamma: 5.0,
            delta: 5.0,
            eta: 1.0,
            lambda_orth: 0.1,
            zeta: 0.0,
        }
    }
}

impl LossWeights {
    pub fn bundle(&self) -> LossBundle<f64> {
        LossBundle {
            terms: [
                1.0,
                self.alpha,
                self.beta,
                self.gamma,
                self.delta,
                self.eta,
                self.lambda_orth,
                self.zeta,
            ],
        }
    }
}

/// `σ ← decay·σ + (1 − decay)·std`.
pub fn ewma_update(sigma: f64, std: f64, decay: f64) -> f64 {
    decay * sigma + (1.0 - decay) * std
}

fn window_std(w: &VecDeque<f64>) -> f64 {
    let n = w.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = w.iter().sum::<f64>() / n;
    (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Per-term running standard deviation used to rescale the objective.
///
/// Before the first interval boundary every `σ_i` is 1. At the first
/// boundary `σ_i` is set to the window standard deviation; afterwards it moves
/// by [`ewma_update`] at each boundary and is constant in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossNormalizer {
    pub decay: f64,
    pub interval: u64,
    pub window: usize,
    pub eps: f64,
    sigma: [f64; 8],
    history: Vec<VecDeque<f64>>,
    batches: u64,
    warmed: bool,
}

impl LossNormalizer {
    pub fn new(decay: f64, interval: u64, window: usize, eps: f64) -> Result<Self> {
        if !(interval > 0 && window > 0 && eps > 0.0 && (0.0..1.0).contains(&decay)) {
            return Err(contract("invalid loss normaliser settings"));
        }
        Ok(Self {
            decay,
            interval,
            window,
            eps,
            sigma: [1.0; 8],
            history: vec![VecDeque::new(); 8],
            batches: 0,
            warmed: false,
        })
    }

    pub fn sigma(&self, k: LossTerm) -> f64 {
        self.sigma[k.index()]
    }

    pub fn batches(&self) -> u64 {
        self.batches
    }

    /// Records one batch of raw losses; returns true if `σ` changed.
    pub fn observe(&mut self, raw: &LossBundle<f64>) -> bool {
        for (k, x) in raw.iter() {
            let h = &mut self.history[k.index()];
            h.push_back(x);
            while h.len() > self.window {
                h.pop_front();
            }
        }
        self.batches += 1;
        if !self.batches.is_multiple_of(self.interval) {
            return false;
        }
        for (i, h) in self.history.iter().enumerate() {
            let s = window_std(h);
            self.sigma[i] = if self.warmed {
                ewma_update(self.sigma[i], s, self.decay)
            } else {
                s
            };
        }
        self.warmed = true;
        true
    }

    /// `1/(σ_i + ε)` for every term.
    pub fn scales(&self) -> LossBundle<f64> {
        LossBundle {
            terms: std::array::from_fn(|i| 1.0 / (self.sigma[i] + self.eps)),
        }
    }

    pub fn normalize(&self, raw: &LossBundle<f64>) -> LossBundle<f64> {
        let s = self.scales();
        raw.map(|k, x| x * s[k])
    }
}

/// Weighted sum of normalised terms, recorded on the graph.
pub fn total_loss(
    g: &mut Graph,
    terms: &LossBundle<Var>,
    scales: &LossBundle<f64>,
    weights: &LossWeights,
) -> Result<Var> {
    let w = weights.bundle();
    let mut acc: Option<Var> = None;
    for (k, v) in terms.iter() {
        if g.shape(v) != (1, 1) {
            return Err(contract(format!("loss term {} is not a scalar", k.name())));
        }
        let term = g.scale(v, w[k] * scales[k]);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("eight terms"))
}

pub fn total_loss_value(normalized: &LossBundle<f64>, weights: &LossWeights) -> f64 {
    let w = weights.bundle();
    normalized.iter().map(|(k, x)| w[k] * x).sum()
}
