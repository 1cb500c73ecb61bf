//! Learnable mirror maps between the emotion ball `M_E` and the anti-emotion
//! ball `M_A`, with cycle and involution penalties and the asymmetry score.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, domain, Result};
use crate::gradtape::{geom, Activation, Graph, Mlp, ParamId, ParamStore, Var};
use crate::hypmath::{artanh_clamped, BallPoint, PoincareBall, VolumeWeighting};

/// Target radius fraction for the residual bound: `tanh(√c β)/√c = 0.9/√c`.
pub const RESIDUAL_RADIUS_FRACTION: f64 = 0.9;

/// Residual bound `β` for maps landing in `to`.
pub fn residual_bound(to: &PoincareBall) -> f64 {
    artanh_clamped(RESIDUAL_RADIUS_FRACTION) / to.curvature().sqrt()
}

/// Tangent-space map applied before the residual is added.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseMap {
    #[default]
    Identity,
    Negate,
}

/// How per-point weights enter the batch average of a mirror loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CycleWeighting {
    /// `(1/B) Σ w_j d_j`
    Mean,
    /// `Σ w_j d_j / Σ w_j`
    #[default]
    SelfNormalized,
    /// `(1/B) Σ d_j`
    Unweighted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MirrorLossConfig {
    pub weighting: CycleWeighting,
    pub volume: VolumeWeighting,
}

/// `exp0^{to} ∘ (base + clip_β ∘ R) ∘ log0^{from}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MirrorMap {
    pub residual: Option<Mlp>,
    pub base: BaseMap,
    pub from: PoincareBall,
    pub to: PoincareBall,
    pub beta: f64,
}

impl MirrorMap {
    /// `depth` dense layers of width `hidden` with tanh activations.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        from: PoincareBall,
        to: PoincareBall,
        dim: usize,
        depth: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let depth = depth.max(1);
        let mut dims = vec![dim];
        dims.extend(std::iter::repeat_n(hidden, depth - 1));
        dims.push(dim);
        let mlp = Mlp::new(store, name, &dims, Activation::Tanh, rng);
        Self {
            residual: Some(mlp),
            base: BaseMap::Identity,
            from,
            to,
            beta: residual_bound(&to),
        }
    }

    /// Map with no residual network: pure curvature transport.
    pub fn transport(from: PoincareBall, to: PoincareBall) -> Self {
        Self {
            residual: None,
            base: BaseMap::Identity,
            from,
            to,
            beta: residual_bound(&to),
        }
    }

    pub fn with_base(mut self, base: BaseMap) -> Self {
        self.base = base;
        self
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.residual.as_ref().map(Mlp::params).unwrap_or_default()
    }

    /// Maps every row of `h` (points on `from`) to a point on `to`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        check_interior(g.value(h), &self.from)?;
        let u = geom::log0(g, h, &self.from);
        let mut v = match self.base {
            BaseMap::Identity => u,
            BaseMap::Negate => g.neg(u),
        };
        if let Some(mlp) = &self.residual {
            let r = mlp.forward(g, store, u)?;
            let r = geom::clip_norm(g, r, self.beta);
            v = g.add(v, r)?;
        }
        Ok(geom::exp0(g, v, &self.to))
    }

    pub fn apply(&self, store: &ParamStore, h: &BallPoint) -> Result<BallPoint> {
        let mut g = Graph::new();
        let x = g.constant(point_row(h));
        let y = self.forward(&mut g, store, x)?;
        self.to.point(g.value(y).row(0).to_vec())
    }
}

fn point_row(h: &BallPoint) -> Array2<f64> {
    Array2::from_shape_vec((1, h.dim()), h.coords().to_vec()).expect("row shape")
}

fn check_interior(x: &Array2<f64>, ball: &PoincareBall) -> Result<()> {
    let radius = ball.curvature().radius();
    for row in x.rows() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() || n >= radius {
            return Err(domain(format!(
                "row of norm {n} is not inside the ball of radius {radius}"
            )));
        }
    }
    Ok(())
}

/// The pair `g_φ: M_E → M_A`, `f_ψ: M_A → M_E`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MirrorLayer {
    pub g: MirrorMap,
    pub f: MirrorMap,
}

impl MirrorLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        emotion: PoincareBall,
        anti: PoincareBall,
        dim: usize,
        depth: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            g: MirrorMap::new(store, "mirror.g", emotion, anti, dim, depth, hidden, rng),
            f: MirrorMap::new(store, "mirror.f", anti, emotion, dim, depth, hidden, rng),
        }
    }

    pub fn transport(emotion: PoincareBall, anti: PoincareBall) -> Self {
        Self {
            g: MirrorMap::transport(emotion, anti),
            f: MirrorMap::transport(anti, emotion),
        }
    }

    pub fn emotion(&self) -> &PoincareBall {
        &self.g.from
    }

    pub fn anti(&self) -> &PoincareBall {
        &self.g.to
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.g.params();
        p.extend(self.f.params());
        p
    }

    /// `f_ψ(g_φ(h))` row-wise.
    pub fn round_trip(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let a = self.g.forward(g, store, h)?;
        self.f.forward(g, store, a)
    }

    /// `τ(g_φ(τ(g_φ(h))))` with `τ` the distance-preserving transport `M_A → M_E`.
    pub fn double_mirror(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let (e, a) = (*self.emotion(), *self.anti());
        let once = self.g.forward(g, store, h)?;
        let back = geom::rescale(g, once, &a, &e);
        let twice = self.g.forward(g, store, back)?;
        Ok(geom::rescale(g, twice, &a, &e))
    }

    pub fn cycle_loss(&self, g: &mut Graph, store: &ParamStore, h: Var, cfg: MirrorLossConfig) -> Result<Var> {
        ensure_nonempty(g, h)?;
        let back = self.round_trip(g, store, h)?;
        self.weighted_distance(g, h, back, cfg)
    }

    pub fn involution_loss(&self, g: &mut Graph, store: &ParamStore, h: Var, cfg: MirrorLossConfig) -> Result<Var> {
        ensure_nonempty(g, h)?;
        let back = self.double_mirror(g, store, h)?;
        self.weighted_distance(g, h, back, cfg)
    }

    fn weighted_distance(&self, g: &mut Graph, h: Var, back: Var, cfg: MirrorLossConfig) -> Result<Var> {
        let c = self.emotion().c();
        let d = geom::dist(g, h, back, c)?;
        if cfg.weighting == CycleWeighting::Unweighted {
            return Ok(g.mean(d));
        }
        let w = geom::volume_weight(g, h, c, cfg.volume);
        let wd = g.mul(w, d)?;
        match cfg.weighting {
            CycleWeighting::Mean => Ok(g.mean(wd)),
            CycleWeighting::SelfNormalized => {
                let num = g.sum(wd);
                let den = g.sum(w);
                g.div(num, den)
            }
            CycleWeighting::Unweighted => unreachable!(),
        }
    }

    /// Per-row `d_P(h, f_ψ(g_φ(h)))`, shape `r×1`.
    pub fn asymmetry(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let back = self.round_trip(g, store, h)?;
        geom::dist(g, h, back, self.emotion().c())
    }

    pub fn asymmetry_score(&self, store: &ParamStore, h: &BallPoint) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(point_row(h));
        let s = self.asymmetry(&mut g, store, x)?;
        Ok(g.value(s)[[0, 0]])
    }

    /// Asymmetry scores for a matrix of points, one per row.
    pub fn asymmetry_scores(&self, store: &ParamStore, h: &Array2<f64>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(h.clone());
        let s = self.asymmetry(&mut g, store, x)?;
        Ok(g.value(s).column(0).to_vec())
    }
}

fn ensure_nonempty(g: &Graph, h: Var) -> Result<()> {
    if g.shape(h).0 == 0 {
        return Err(contract("mirror loss needs a non-empty batch"));
    }
    Ok(())
}
