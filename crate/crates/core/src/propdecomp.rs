//! Per-modality property embeddings, the sample-specific / sample-invariant
//! decomposition and its diagnostics.

use std::io::Write;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::gradtape::{Activation, DenseLayer, Graph, ParamId, ParamKind, ParamStore, Var};

pub const NUM_ANGLE_BINS: usize = 50;

/// One shared vector `P_m` per modality, kept as a `1×d` parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PropertyBank {
    pub params: Vec<ParamId>,
    pub dim: usize,
    pub ema_decay: f64,
    pub ema_interval: u64,
}

/// What an EMA call did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmaOutcome {
    Applied,
    /// `step` was not a multiple of the interval; nothing changed.
    OffSchedule,
}

/// `decay·p + (1 − decay)·target`.
pub fn ema_blend(p: &Array2<f64>, target: &Array2<f64>, decay: f64) -> Array2<f64> {
    p * decay + target * (1.0 - decay)
}

impl PropertyBank {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        modalities: usize,
        dim: usize,
        ema_decay: f64,
        ema_interval: u64,
    ) -> Self {
        let params = (0..modalities)
            .map(|m| store.add(format!("{name}.{m}"), Array2::zeros((1, dim)), ParamKind::Euclidean))
            .collect();
        Self {
            params,
            dim,
            ema_decay,
            ema_interval,
        }
    }

    pub fn get<'a>(&self, store: &'a ParamStore, m: usize) -> &'a Array2<f64> {
        store.get(self.params[m])
    }

    pub fn is_scheduled(&self, step: u64) -> bool {
        self.ema_interval > 0 && step > 0 && step.is_multiple_of(self.ema_interval)
    }

    /// Moves `P_m` toward `mu_bar` when `step` is on the EMA schedule.
    pub fn ema_update(&self, store: &mut ParamStore, m: usize, mu_bar: &Array2<f64>, step: u64) -> Result<EmaOutcome> {
        if mu_bar.dim() != (1, self.dim) {
            return Err(contract(format!(
                "EMA target must be 1x{}, got {:?}",
                self.dim,
                mu_bar.dim()
            )));
        }
        if !self.is_scheduled(step) {
            return Ok(EmaOutcome::OffSchedule);
        }
        let p = store.get_mut(self.params[m]);
        *p = ema_blend(p, mu_bar, self.ema_decay);
        Ok(EmaOutcome::Applied)
    }
}

/// Shared trunk with two linear heads emitting `Σ_j` and `μ_j`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decomposer {
    pub trunk: DenseLayer,
    pub sigma_head: DenseLayer,
    pub mu_head: DenseLayer,
}

impl Decomposer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            trunk: DenseLayer::new(
                store,
                &format!("{name}.trunk"),
                input,
                hidden,
                Activation::Tanh,
                true,
                rng,
            ),
            sigma_head: DenseLayer::new(
                store,
                &format!("{name}.sigma"),
                hidden,
                dim,
                Activation::Identity,
                true,
                rng,
            ),
            mu_head: DenseLayer::new(
                store,
                &format!("{name}.mu"),
                hidden,
                dim,
                Activation::Identity,
                true,
                rng,
            ),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.trunk, &self.sigma_head, &self.mu_head]
            .into_iter()
            .flat_map(DenseLayer::params)
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.mu_head.out_dim
    }

    /// Returns `(Σ, μ)`, both `batch × d`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        if g.shape(x).0 == 0 {
            return Err(contract("decomposition needs a non-empty batch"));
        }
        let h = self.trunk.forward(g, store, x)?;
        let sigma = self.sigma_head.forward(g, store, h)?;
        let mu = self.mu_head.forward(g, store, h)?;
        Ok((sigma, mu))
    }
}

/// `‖P − mean_j μ_j‖²`.
pub fn prop_loss(g: &mut Graph, p: Var, mu: Var) -> Result<Var> {
    let (pr, pc) = g.shape(p);
    let (mr, mc) = g.shape(mu);
    if pr != 1 || pc != mc || mr == 0 {
        return Err(contract(format!("prop_loss: P is {pr}x{pc}, μ is {mr}x{mc}")));
    }
    let mean = g.mean_cols(mu);
    let d = g.sub(p, mean)?;
    let sq = g.square(d);
    Ok(g.sum(sq))
}

/// `λ · mean_j ⟨Σ_j, μ_j⟩²`.
pub fn orth_loss(g: &mut Graph, sigma: Var, mu: Var, lambda: f64) -> Result<Var> {
    if g.shape(sigma) != g.shape(mu) || g.shape(mu).0 == 0 {
        return Err(contract(format!(
            "orth_loss: Σ is {:?}, μ is {:?}",
            g.shape(sigma),
            g.shape(mu)
        )));
    }
    let prod = g.mul(sigma, mu)?;
    let inner = g.sum_rows(prod);
    let sq = g.square(inner);
    let m = g.mean(sq);
    Ok(g.scale(m, lambda))
}

/// Per-sample angle statistics between rows of `Σ` and `μ`, in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleStats {
    pub mean: f64,
    pub max: f64,
    /// Counts over `[0°, 90°]` in equal bins; 90° falls in the last bin.
    pub histogram: Vec<u64>,
    /// Rows where either vector was zero.
    pub skipped: usize,
    /// Mean of `⟨Σ_j, μ_j⟩²`, the quantity the orthogonality penalty drives down.
    pub mean_sq_inner: f64,
}

impl AngleStats {
    pub fn counted(&self) -> u64 {
        self.histogram.iter().sum()
    }

    pub fn bin_edges(i: usize) -> (f64, f64) {
        let w = 90.0 / NUM_ANGLE_BINS as f64;
        (i as f64 * w, (i + 1) as f64 * w)
    }

    /// `bin_low,bin_high,count` rows under a header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_low,bin_high,count")?;
        for (i, c) in self.histogram.iter().enumerate() {
            let (lo, hi) = Self::bin_edges(i);
            writeln!(out, "{lo},{hi},{c}")?;
        }
        Ok(())
    }
}

pub fn principal_angles(sigma: &Array2<f64>, mu: &Array2<f64>) -> Result<AngleStats> {
    if sigma.dim() != mu.dim() {
        return Err(contract("principal_angles: Σ and μ differ in shape"));
    }
    let mut histogram = vec![0u64; NUM_ANGLE_BINS];
    let (mut sum, mut max, mut skipped, mut inner_sq) = (0.0, 0.0f64, 0usize, 0.0);
    for (s, m) in sigma.axis_iter(Axis(0)).zip(mu.axis_iter(Axis(0))) {
        let dot = s.dot(&m);
        inner_sq += dot * dot;
        let denom = s.dot(&s).sqrt() * m.dot(&m).sqrt();
        if denom == 0.0 {
            skipped += 1;
            continue;
        }
        let angle = (dot.abs() / denom).min(1.0).acos().to_degrees();
        let bin = ((angle / 90.0 * NUM_ANGLE_BINS as f64) as usize).min(NUM_ANGLE_BINS - 1);
        histogram[bin] += 1;
        sum += angle;
        max = max.max(angle);
    }
    let counted = sigma.nrows() - skipped;
    Ok(AngleStats {
        mean: if counted > 0 { sum / counted as f64 } else { 0.0 },
        max,
        histogram,
        skipped,
        mean_sq_inner: if sigma.nrows() > 0 {
            inner_sq / sigma.nrows() as f64
        } else {
            0.0
        },
    })
}
