//! Permutation-invariant fusion of per-modality tangent vectors on the
//! emotion ball, learned mask tokens and the prediction head.

use ndarray::{Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::gradtape::{geom, Activation, DenseLayer, Graph, ParamId, ParamKind, ParamStore, Var};
use crate::hypmath::PoincareBall;

/// Slot order: text, audio, vision, recovered field.
pub const SLOT_NAMES: [&str; 4] = ["L", "A", "V", "Vhat"];
pub const NUM_SLOTS: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    /// One learned seed query attending over the slots.
    #[default]
    Attention,
    /// Plain average of the embedded slots.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub pooling: Pooling,
    pub position_encoding: bool,
}

impl FusionConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hidden: 128,
            heads: 8,
            pooling: Pooling::Attention,
            position_encoding: false,
        }
    }
}

/// Result of one fusion pass.
#[derive(Clone, Debug)]
pub struct Fused {
    /// `h_fus` on the emotion ball, `r×n`.
    pub h: Var,
    /// Rows where `h_fus` had to be clipped.
    pub clipped: usize,
    /// Rows where every slot was a mask token.
    pub all_masked: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SetFuser {
    pub cfg: FusionConfig,
    pub ball: PoincareBall,
    /// One `1×n` point on the emotion ball per slot.
    pub mask_tokens: Vec<ParamId>,
    pub embed: DenseLayer,
    pub seed: ParamId,
    pub key: DenseLayer,
    pub value: DenseLayer,
    pub ff: DenseLayer,
    pub out: DenseLayer,
    pub position: Option<ParamId>,
}

fn head_indicator(hidden: usize, heads: usize) -> Array2<f64> {
    let per = hidden / heads;
    Array2::from_shape_fn((hidden, heads), |(i, h)| if i / per == h { 1.0 } else { 0.0 })
}

impl SetFuser {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: FusionConfig,
        ball: PoincareBall,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.heads == 0 || !cfg.hidden.is_multiple_of(cfg.heads) {
            return Err(contract(format!(
                "fusion hidden width {} is not divisible by {} heads",
                cfg.hidden, cfg.heads
            )));
        }
        let (n, h) = (cfg.dim, cfg.hidden);
        let mask_tokens = (0..NUM_SLOTS)
            .map(|s| {
                // small random interior point
                let tok = Array2::from_shape_simple_fn((1, n), || rng.random_range(-0.05..0.05));
                store.add(
                    format!("{name}.mask.{}", SLOT_NAMES[s]),
                    tok,
                    ParamKind::Ball { c: ball.c() },
                )
            })
            .collect();
        let embed = DenseLayer::new(store, &format!("{name}.embed"), n, h, Activation::Identity, true, rng);
        let limit = (3.0 / h as f64).sqrt();
        let seed_init = Array2::from_shape_simple_fn((1, h), || rng.random_range(-limit..limit));
        let seed = store.add(format!("{name}.seed"), seed_init, ParamKind::Euclidean);
        let key = DenseLayer::new(store, &format!("{name}.key"), h, h, Activation::Identity, false, rng);
        let value = DenseLayer::new(store, &format!("{name}.value"), h, h, Activation::Identity, false, rng);
        let ff = DenseLayer::new(store, &format!("{name}.ff"), h, h, Activation::Relu, true, rng);
        let out = DenseLayer::new(store, &format!("{name}.out"), h, n, Activation::Identity, true, rng);
        let position = cfg.position_encoding.then(|| {
            let p = Array2::from_shape_simple_fn((NUM_SLOTS, h), || rng.random_range(-0.1..0.1));
            store.add(format!("{name}.position"), p, ParamKind::Euclidean)
        });
        Ok(Self {
            cfg,
            ball,
            mask_tokens,
            embed,
            seed,
            key,
            value,
            ff,
            out,
            position,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.mask_tokens.clone();
        for layer in [&self.embed, &self.key, &self.value, &self.ff, &self.out] {
            p.extend(layer.params());
        }
        p.push(self.seed);
        p.extend(self.position);
        p
    }

    /// Replaces unavailable rows of each slot by the log-image of its mask
    /// token. `available[s]` is an `r×1` column of 0/1.
    pub fn fill_slots(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slots: &[Var],
        available: &[Array2<f64>],
    ) -> Result<Vec<Var>> {
        if slots.len() != NUM_SLOTS || available.len() != NUM_SLOTS {
            return Err(contract(format!("fusion expects {NUM_SLOTS} slots")));
        }
        let rows = g.shape(slots[0]).0;
        let mut out = Vec::with_capacity(NUM_SLOTS);
        for (s, (&x, avail)) in slots.iter().zip(available).enumerate() {
            if g.shape(x) != (rows, self.cfg.dim) || avail.dim() != (rows, 1) {
                return Err(contract(format!("slot {} has the wrong shape", SLOT_NAMES[s])));
            }
            let tok = g.param(store, self.mask_tokens[s]);
            let tok = geom::log0(g, tok, &self.ball);
            let a = g.constant(avail.clone());
            let b = g.constant(avail.mapv(|v| 1.0 - v));
            let kept = g.mul(x, a)?;
            let filler = g.mul(b, tok)?;
            out.push(g.add(kept, filler)?);
        }
        Ok(out)
    }

    /// Pools any number of `r×n` tangent-vector elements into `r×hidden`.
    /// Element order only matters through the optional position encoding.
    pub fn pool(&self, g: &mut Graph, store: &ParamStore, elems: &[Var]) -> Result<Var> {
        if elems.is_empty() {
            return Err(contract("pooling needs at least one element"));
        }
        let mut embedded = Vec::with_capacity(elems.len());
        for (s, &x) in elems.iter().enumerate() {
            let mut e = self.embed.forward(g, store, x)?;
            if let Some(pos) = self.position {
                let p = g.param(store, pos);
                let row = g.rows(p, &[s % NUM_SLOTS])?;
                e = g.add(e, row)?;
            }
            embedded.push(e);
        }
        let pooled = match self.cfg.pooling {
            Pooling::Mean => {
                let mut acc = embedded[0];
                for &e in &embedded[1..] {
                    acc = g.add(acc, e)?;
                }
                g.scale(acc, 1.0 / embedded.len() as f64)
            }
            Pooling::Attention => self.attend(g, store, &embedded)?,
        };
        let f = self.ff.forward(g, store, pooled)?;
        g.add(pooled, f)
    }

    fn attend(&self, g: &mut Graph, store: &ParamStore, embedded: &[Var]) -> Result<Var> {
        let (hidden, heads) = (self.cfg.hidden, self.cfg.heads);
        let ind = head_indicator(hidden, heads);
        let ind_v = g.constant(ind.clone());
        let ind_t = g.constant(ind.t().to_owned());
        let q = g.param(store, self.seed);
        let scale = 1.0 / ((hidden / heads) as f64).sqrt();
        let mut scores = Vec::with_capacity(embedded.len());
        let mut values = Vec::with_capacity(embedded.len());
        for &e in embedded {
            let k = self.key.forward(g, store, e)?;
            let qk = g.mul(k, q)?;
            let s = g.matmul(qk, ind_v)?;
            scores.push(g.scale(s, scale));
            values.push(self.value.forward(g, store, e)?);
        }
        // softmax over elements, per row and head, shifted by a constant max
        let mut max = g.value(scores[0]).clone();
        for &s in &scores[1..] {
            Zip::from(&mut max).and(g.value(s)).for_each(|m, &v| *m = m.max(v));
        }
        let shift = g.constant(max);
        let mut exps = Vec::with_capacity(scores.len());
        for &s in &scores {
            let d = g.sub(s, shift)?;
            exps.push(g.exp(d));
        }
        let mut denom = exps[0];
        for &e in &exps[1..] {
            denom = g.add(denom, e)?;
        }
        let mut acc: Option<Var> = None;
        for (&e, &v) in exps.iter().zip(&values) {
            let w = g.div(e, denom)?;
            let wide = g.matmul(w, ind_t)?;
            let term = g.mul(wide, v)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        let attn = acc.expect("at least one element");
        g.add(attn, q)
    }

    /// Fuses the four slots into `h_fus = clip(exp0(out(pool(slots))))`.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, slots: &[Var], available: &[Array2<f64>]) -> Result<Fused> {
        let filled = self.fill_slots(g, store, slots, available)?;
        let pooled = self.pool(g, store, &filled)?;
        let v = self.out.forward(g, store, pooled)?;
        let raw = geom::exp0_unclipped(g, v, &self.ball);
        let limit = self.ball.max_norm();
        let clipped = g
            .value(raw)
            .rows()
            .into_iter()
            .filter(|r| r.dot(r).sqrt() > limit)
            .count();
        let h = geom::clip(g, raw, &self.ball);
        let rows = g.shape(h).0;
        let all_masked = (0..rows)
            .filter(|&i| available.iter().all(|a| a[[i, 0]] == 0.0))
            .count();
        Ok(Fused { h, clipped, all_masked })
    }
}

/// Classification with `k` classes or scalar regression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

impl Task {
    pub fn outputs(&self) -> usize {
        match self {
            Task::Classification { classes } => *classes,
            Task::Regression => 1,
        }
    }
}

/// Linear head applied to `log0(h_fus)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionHead {
    pub task: Task,
    pub ball: PoincareBall,
    pub linear: DenseLayer,
}

impl PredictionHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        task: Task,
        ball: PoincareBall,
        rng: &mut R,
    ) -> Self {
        let linear = DenseLayer::new(store, name, dim, task.outputs(), Activation::Identity, true, rng);
        Self { task, ball, linear }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.linear.params()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h_fus: Var) -> Result<Var> {
        let t = geom::log0(g, h_fus, &self.ball);
        self.linear.forward(g, store, t)
    }
}

/// Mean cross-entropy over rows, or mean absolute error for regression.
pub fn task_loss(g: &mut Graph, y_hat: Var, labels: &[f64], task: Task) -> Result<Var> {
    let (rows, cols) = g.shape(y_hat);
    if labels.len() != rows || rows == 0 {
        return Err(contract(format!("{} labels for {rows} predictions", labels.len())));
    }
    if cols != task.outputs() {
        return Err(contract(format!(
            "head emits {cols} outputs, task expects {}",
            task.outputs()
        )));
    }
    match task {
        Task::Classification { classes } => {
            let mut onehot = Array2::zeros((rows, classes));
            for (i, &y) in labels.iter().enumerate() {
                if !(y >= 0.0 && y.fract() == 0.0 && (y as usize) < classes) {
                    return Err(contract(format!("label {y} is not a class index below {classes}")));
                }
                onehot[[i, y as usize]] = 1.0;
            }
            let lp = g.log_softmax(y_hat);
            let oh = g.constant(onehot);
            let picked = g.mul(lp, oh)?;
            let s = g.sum(picked);
            Ok(g.scale(s, -1.0 / rows as f64))
        }
        Task::Regression => {
            let y = g.constant(Array2::from_shape_vec((rows, 1), labels.to_vec()).expect("length checked"));
            let d = g.sub(y_hat, y)?;
            let a = g.abs(d);
            Ok(g.mean(a))
        }
    }
}
