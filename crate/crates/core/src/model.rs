//! The full network: paired per-modality embeddings, decomposition, mirror
//! layer, mirror-space score model, fusion and prediction head, plus the
//! eight loss terms of one training step.

use ndarray::{concatenate, Array2, Axis};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, TaskKind};
use crate::data::{Batch, NUM_MODALITIES};
use crate::error::{contract, Result};
use crate::fusion::{task_loss, FusionConfig, PredictionHead, SetFuser, Task};
use crate::gradtape::{geom, Activation, DenseLayer, Graph, ParamId, ParamStore, Var};
use crate::hypmath::PoincareBall;
use crate::mirror::MirrorLayer;
use crate::optim::{LossBundle, LossTerm};
use crate::propdecomp::{orth_loss, prop_loss, Decomposer, PropertyBank};
use crate::scorefield::{
    curl_penalty, field_curl, field_from_samples, reverse_sample, score_loss, ScoreDraws, ScoreModel, ScoreWeighting,
};

/// Slot index of the recovered field in the fusion input.
pub const VHAT_SLOT: usize = 3;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EcNet {
    pub emotion: PoincareBall,
    pub anti: PoincareBall,
    pub task: Task,
    pub dim: usize,
    /// Tangent projections into `M_E`, one per modality.
    pub proj_e: Vec<DenseLayer>,
    /// Tangent projections into `M_A`, one per modality.
    pub proj_a: Vec<DenseLayer>,
    pub decomposers: Vec<Decomposer>,
    pub props: PropertyBank,
    pub mirror: MirrorLayer,
    pub score: ScoreModel,
    pub fuser: SetFuser,
    pub head: PredictionHead,
}

/// Quantities computed outside the graph for one step: everything the
/// objective treats as a constant.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Recovered field per row, `r×n`.
    pub vhat: Array2<f64>,
    /// Available `h_E` rows, stacked over modalities.
    pub points: Array2<f64>,
    /// `g_φ` images of `points`: the score model's training data.
    pub mirror_points: Array2<f64>,
    pub draws: ScoreDraws,
    /// Availability columns for the sub-mask fusion term.
    pub sub_available: Vec<Array2<f64>>,
    pub curl: f64,
}

/// Graph handles and counters from one forward pass.
#[derive(Clone, Debug)]
pub struct StepGraph {
    pub terms: LossBundle<Var>,
    pub logits: Var,
    pub h_fus: Var,
    /// Per modality: `(Σ, μ)` over available rows, if any.
    pub decomposition: Vec<Option<(Var, Var)>>,
    pub fus_clipped: usize,
}

/// Radial clipping events among embedded points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipCount {
    pub clipped: usize,
    pub total: usize,
}

impl ClipCount {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.clipped as f64 / self.total as f64
        }
    }
}

/// Per-row prediction outputs.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Array2<f64>,
    pub h_fus: Array2<f64>,
}

fn available_rows(col: &Array2<f64>) -> Vec<usize> {
    (0..col.nrows()).filter(|&i| col[[i, 0]] > 0.5).collect()
}

fn count_clipped(x: &Array2<f64>, rows: &[usize], ball: &PoincareBall) -> usize {
    let limit = ball.max_norm() * ball.curvature().sqrt();
    rows.iter()
        .filter(|&&i| {
            let r = x.row(i).dot(&x.row(i)).sqrt();
            (ball.curvature().sqrt() * r).tanh() > limit
        })
        .count()
}

impl EcNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &Config,
        dims: [usize; NUM_MODALITIES],
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let emotion = PoincareBall::with_margin(cfg.c_e, cfg.eps_bnd)?;
        let anti = PoincareBall::with_margin(cfg.c_a, cfg.eps_bnd)?;
        let task = match cfg.task {
            TaskKind::Classification => Task::Classification { classes: outputs },
            TaskKind::Regression => Task::Regression,
        };
        let n = cfg.dim;
        let names = crate::data::MODALITY_NAMES;
        let proj_e: Vec<DenseLayer> = (0..NUM_MODALITIES)
            .map(|m| {
                DenseLayer::new(
                    store,
                    &format!("proj_e.{}", names[m]),
                    dims[m],
                    n,
                    Activation::Identity,
                    false,
                    rng,
                )
            })
            .collect();
        let proj_a: Vec<DenseLayer> = (0..NUM_MODALITIES)
            .map(|m| {
                DenseLayer::new(
                    store,
                    &format!("proj_a.{}", names[m]),
                    dims[m],
                    n,
                    Activation::Identity,
                    false,
                    rng,
                )
            })
            .collect();
        let decomposers = (0..NUM_MODALITIES)
            .map(|m| {
                Decomposer::new(
                    store,
                    &format!("decomp.{}", names[m]),
                    n,
                    cfg.decomp_hidden,
                    cfg.d_p,
                    rng,
                )
            })
            .collect();
        let props = PropertyBank::new(
            store,
            "property",
            NUM_MODALITIES,
            cfg.d_p,
            cfg.ema_decay,
            cfg.ema_interval,
        );
        let mirror = MirrorLayer::new(store, emotion, anti, n, cfg.mirror_depth, cfg.mirror_hidden, rng);
        for id in mirror.params() {
            store.get_mut(id).mapv_inplace(|w| w * cfg.mirror_init_scale);
        }
        // start the projections close to the origin
        for l in proj_e.iter().chain(&proj_a) {
            store.get_mut(l.weight).mapv_inplace(|w| w * 0.1);
        }
        let score = ScoreModel::new(store, "score", n, cfg.score_hidden, rng);
        let fcfg = FusionConfig {
            dim: n,
            hidden: cfg.fusion_hidden,
            heads: cfg.heads,
            pooling: cfg.pooling,
            position_encoding: false,
        };
        let fuser = SetFuser::new(store, "fusion", fcfg, emotion, rng)?;
        let head = PredictionHead::new(store, "head", n, task, emotion, rng);
        Ok(Self {
            emotion,
            anti,
            task,
            dim: n,
            proj_e,
            proj_a,
            decomposers,
            props,
            mirror,
            score,
            fuser,
            head,
        })
    }

    /// Every parameter that belongs to some component.
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        for l in self.proj_e.iter().chain(&self.proj_a) {
            p.extend(l.params());
        }
        for d in &self.decomposers {
            p.extend(d.params());
        }
        p.extend(self.props.params.iter().copied());
        p.extend(self.mirror.params());
        p.extend(self.score.params());
        p.extend(self.fuser.params());
        p.extend(self.head.params());
        p
    }

    /// `log0(clip(exp0(P_E x)))` per modality.
    fn tangents(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(NUM_MODALITIES);
        for m in 0..NUM_MODALITIES {
            let x = g.constant(batch.features[m].clone());
            let t = self.proj_e[m].forward(g, store, x)?;
            let h = geom::exp0(g, t, &self.emotion);
            out.push(geom::log0(g, h, &self.emotion));
        }
        Ok(out)
    }

    /// Clipping events of the paired embeddings on both balls.
    pub fn clip_count(&self, store: &ParamStore, batch: &Batch) -> ClipCount {
        let mut c = ClipCount::default();
        for m in 0..NUM_MODALITIES {
            let rows = available_rows(&batch.available[m]);
            let x = &batch.features[m];
            let te = x.dot(store.get(self.proj_e[m].weight));
            let ta = x.dot(store.get(self.proj_a[m].weight));
            c.clipped += count_clipped(&te, &rows, &self.emotion) + count_clipped(&ta, &rows, &self.anti);
            c.total += 2 * rows.len();
        }
        c
    }

    /// Available `h_E` rows stacked over modalities and the per-row anchor
    /// `exp0(mean of available tangents)`.
    fn points(&self, store: &ParamStore, batch: &Batch) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut g = Graph::new();
        let tangents = self.tangents(&mut g, store, batch)?;
        let r = batch.rows();
        let mut parts = Vec::new();
        let mut sum = Array2::<f64>::zeros((r, self.dim));
        let mut count = Array2::<f64>::zeros((r, 1));
        for (m, &t) in tangents.iter().enumerate() {
            let rows = available_rows(&batch.available[m]);
            let tv = g.value(t);
            let avail = &batch.available[m];
            sum += &(tv * avail);
            count += avail;
            if !rows.is_empty() {
                parts.push(tv.select(Axis(0), &rows));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let tangents = concatenate(Axis(0), &views).map_err(|_| contract("batch has no available modality"))?;
        let mean = sum / &count.mapv(|c| c.max(1.0));
        let ball = self.emotion;
        let to_ball = |t: &Array2<f64>| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let h = geom::exp0(&mut g, v, &ball);
            g.value(h).clone()
        };
        Ok((to_ball(&tangents), to_ball(&mean)))
    }

    /// Images `g_φ(h)` of points on the emotion ball.
    pub fn mirror_images(&self, store: &ParamStore, h: &Array2<f64>) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let x = g.constant(h.clone());
        let y = self.mirror.g.forward(&mut g, store, x)?;
        Ok(g.value(y).clone())
    }

    /// Draws the recovered field for every row of `batch`.
    pub fn recover_field<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        cfg: &Config,
        batch: &Batch,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        let (_, anchor) = self.points(store, batch)?;
        let z_hat = reverse_sample(&self.score.bind(store), &cfg.noise, batch.rows(), self.dim, rng)?;
        field_from_samples(&self.mirror, store, &z_hat, &anchor)
    }

    /// Computes every detached input of one training step. `full` is `batch`
    /// before modality dropout.
    pub fn prepare<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        cfg: &Config,
        batch: &Batch,
        full: &Batch,
        rng: &mut R,
    ) -> Result<Prepared> {
        let (points, anchor) = self.points(store, batch)?;
        let mirror_points = self.mirror_images(store, &points)?;
        let draws = ScoreDraws::antithetic(points.nrows(), self.dim, &cfg.noise, rng);
        let z_hat = reverse_sample(&self.score.bind(store), &cfg.noise, batch.rows(), self.dim, rng)?;
        let vhat = field_from_samples(&self.mirror, store, &z_hat, &anchor)?;
        let r = batch.rows();
        let mut sub: Vec<Array2<f64>> = batch.available.to_vec();
        for i in 0..r {
            let have: Vec<usize> = (0..NUM_MODALITIES).filter(|&m| sub[m][[i, 0]] > 0.5).collect();
            if have.len() >= 2 {
                let &drop = have.choose(rng).expect("non-empty");
                sub[drop][[i, 0]] = 0.0;
            }
        }
        sub.push(Array2::ones((r, 1)));
        // fused embeddings before modality dropout join the mirror batch
        let h_fus = self.predict(store, full, &vhat)?.h_fus;
        let points = concatenate(Axis(0), &[points.view(), h_fus.view()]).expect("same width");
        let k = points.nrows().min(cfg.curl_points);
        let curl_pts: Vec<Vec<f64>> = (0..k).map(|i| points.row(i).to_vec()).collect();
        let curl = field_curl(&self.mirror, store, &z_hat.row(0).to_vec(), &curl_pts, cfg.curl_delta)?;
        Ok(Prepared {
            vhat,
            points,
            mirror_points,
            draws,
            sub_available: sub,
            curl,
        })
    }

    fn fuse_and_predict(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tangents: &[Var],
        vhat: Var,
        available: &[Array2<f64>],
    ) -> Result<(Var, Var, usize)> {
        let mut slots = tangents.to_vec();
        slots.push(vhat);
        let fused = self.fuser.fuse(g, store, &slots, available)?;
        let logits = self.head.forward(g, store, fused.h)?;
        Ok((fused.h, logits, fused.clipped))
    }

    /// Records the whole objective for `batch` on `g`.
    pub fn build(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &Config,
        batch: &Batch,
        prep: &Prepared,
    ) -> Result<StepGraph> {
        let tangents = self.tangents(g, store, batch)?;
        let mut available: Vec<Array2<f64>> = batch.available.to_vec();
        available.push(Array2::ones((batch.rows(), 1)));
        let vhat = g.constant(prep.vhat.clone());
        let (h_fus, logits, fus_clipped) = self.fuse_and_predict(g, store, &tangents, vhat, &available)?;
        let task = task_loss(g, logits, &batch.labels, self.task)?;

        let grad = g.scalar_const(curl_penalty(prep.curl, cfg.lambda_curl, cfg.curl_bound));
        let score = score_loss(
            g,
            store,
            &self.score,
            &prep.mirror_points,
            &cfg.noise,
            &prep.draws,
            ScoreWeighting::NoiseVariance,
        )?;
        let pts = g.constant(prep.points.clone());
        let cycle = self.mirror.cycle_loss(g, store, pts, cfg.mirror_loss)?;
        let inv = self.mirror.involution_loss(g, store, pts, cfg.mirror_loss)?;

        let mut decomposition = Vec::with_capacity(NUM_MODALITIES);
        let mut props = Vec::new();
        let mut orths = Vec::new();
        for (m, &t) in tangents.iter().enumerate() {
            let rows = available_rows(&batch.available[m]);
            if rows.is_empty() {
                decomposition.push(None);
                continue;
            }
            let x = g.rows(t, &rows)?;
            let (sigma, mu) = self.decomposers[m].forward(g, store, x)?;
            let p = g.param(store, self.props.params[m]);
            props.push(prop_loss(g, p, mu)?);
            orths.push(orth_loss(g, sigma, mu, cfg.weights.lambda_orth)?);
            decomposition.push(Some((sigma, mu)));
        }
        let prop = mean_of(g, &props)?;
        let orth = mean_of(g, &orths)?;

        let (_, sub_logits, _) = self.fuse_and_predict(g, store, &tangents, vhat, &prep.sub_available)?;
        let fus = task_loss(g, sub_logits, &batch.labels, self.task)?;

        let mut terms = LossBundle::splat(task);
        terms[LossTerm::Grad] = grad;
        terms[LossTerm::Score] = score;
        terms[LossTerm::Cycle] = cycle;
        terms[LossTerm::Inv] = inv;
        terms[LossTerm::Prop] = prop;
        terms[LossTerm::Orth] = orth;
        terms[LossTerm::Fus] = fus;
        Ok(StepGraph {
            terms,
            logits,
            h_fus,
            decomposition,
            fus_clipped,
        })
    }

    /// Forward pass without losses, for evaluation.
    pub fn predict(&self, store: &ParamStore, batch: &Batch, vhat: &Array2<f64>) -> Result<Prediction> {
        let mut g = Graph::new();
        let tangents = self.tangents(&mut g, store, batch)?;
        let v = g.constant(vhat.clone());
        let mut available: Vec<Array2<f64>> = batch.available.to_vec();
        available.push(Array2::ones((batch.rows(), 1)));
        let (h, logits, _) = self.fuse_and_predict(&mut g, store, &tangents, v, &available)?;
        Ok(Prediction {
            logits: g.value(logits).clone(),
            h_fus: g.value(h).clone(),
        })
    }

    /// `d_P(h, f_ψ(g_φ(h)))` per row.
    pub fn asymmetry(&self, store: &ParamStore, h_fus: &Array2<f64>) -> Result<Vec<f64>> {
        self.mirror.asymmetry_scores(store, h_fus)
    }
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = xs.split_first() else {
        return Ok(g.scalar_const(0.0));
    };
    let mut acc = first;
    for &x in rest {
        acc = g.add(acc, x)?;
    }
    Ok(g.scale(acc, 1.0 / xs.len() as f64))
}

/// Predicted class per row, or the regression value.
pub fn decode(logits: &Array2<f64>, task: Task) -> Vec<f64> {
    match task {
        Task::Classification { .. } => logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold(
                        (0usize, f64::NEG_INFINITY),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0 as f64
            })
            .collect(),
        Task::Regression => logits.column(0).to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, sample_mask, SyntheticConfig};
    use crate::gradtape::{grad_check, FD_STEP};
    use crate::optim::LossTerm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.dim = 4;
        cfg.d_p = 2;
        cfg.decomp_hidden = 5;
        cfg.fusion_hidden = 6;
        cfg.heads = 2;
        cfg.mirror_hidden = 5;
        cfg.score_hidden = 5;
        cfg.curl_points = 4;
        cfg.synthetic = SyntheticConfig {
            classes: 3,
            latent_dim: 3,
            dims: [5, 3, 3],
            ..SyntheticConfig::default()
        };
        cfg
    }

    fn setup(seed: u64) -> (Config, ParamStore, EcNet, Batch, Prepared) {
        let cfg = tiny_config();
        let (train, _) = generate_synthetic(&cfg.synthetic, 8, 2, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = EcNet::new(&mut store, &cfg, train.dims, 3, &mut rng).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let full = train.batch(&idx, &train.masks(&idx)).unwrap();
        let masks = sample_mask(&train.masks(&idx), 0.3, &mut rng);
        let batch = train.batch(&idx, &masks).unwrap();
        let prep = model.prepare(&store, &cfg, &batch, &full, &mut rng).unwrap();
        (cfg, store, model, batch, prep)
    }

    #[test]
    fn every_loss_term_matches_finite_differences() {
        for seed in [1, 2, 3] {
            let (cfg, mut store, model, batch, prep) = setup(seed);
            let params = model.params();
            for term in LossTerm::ALL {
                let report = grad_check(
                    |g, s| Ok(model.build(g, s, &cfg, &batch, &prep)?.terms[term]),
                    &mut store,
                    &params,
                    FD_STEP,
                    1e-4,
                )
                .unwrap();
                let worst = report
                    .entries
                    .iter()
                    .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
                    .unwrap();
                assert!(
                    report.passed(),
                    "seed {seed} {}: {} rel err {:.2e}",
                    term.name(),
                    worst.name,
                    worst.max_rel_err
                );
            }
        }
    }

    #[test]
    fn grad_term_carries_no_parameter_gradient() {
        let (cfg, store, model, batch, prep) = setup(4);
        let mut g = Graph::new();
        let out = model.build(&mut g, &store, &cfg, &batch, &prep).unwrap();
        let grads = g.backward(out.terms[LossTerm::Grad]).unwrap();
        assert!(grads.iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
        assert_eq!(
            g.scalar(out.terms[LossTerm::Grad]),
            curl_penalty(prep.curl, cfg.lambda_curl, cfg.curl_bound)
        );
    }

    #[test]
    fn prepared_batch_includes_fused_rows() {
        let (_, store, model, batch, prep) = setup(5);
        let embedded: usize = batch.available.iter().map(|a| a.sum() as usize).sum();
        assert_eq!(prep.points.nrows(), embedded + batch.rows());
        assert_eq!(prep.mirror_points.nrows(), embedded);
        assert_eq!(prep.vhat.dim(), (batch.rows(), model.dim));
        let limit = model.emotion.max_norm() + 1e-12;
        assert!(prep.points.rows().into_iter().all(|r| r.dot(&r).sqrt() <= limit));
        let clip = model.clip_count(&store, &batch);
        assert_eq!(clip.total, 2 * embedded);
    }

    #[test]
    fn sub_mask_keeps_one_modality_per_row() {
        let (_, _, _, batch, prep) = setup(6);
        for i in 0..batch.rows() {
            let before = (0..NUM_MODALITIES)
                .filter(|&m| batch.available[m][[i, 0]] > 0.5)
                .count();
            let after = (0..NUM_MODALITIES)
                .filter(|&m| prep.sub_available[m][[i, 0]] > 0.5)
                .count();
            assert!(after >= 1);
            assert_eq!(after, if before >= 2 { before - 1 } else { before });
            assert_eq!(prep.sub_available[VHAT_SLOT][[i, 0]], 1.0);
        }
    }

    #[test]
    fn decode_picks_argmax_or_passes_regression_through() {
        let logits = ndarray::array![[0.1, 2.0, -1.0], [3.0, 0.0, 0.5]];
        assert_eq!(decode(&logits, Task::Classification { classes: 3 }), vec![1.0, 0.0]);
        let reg = ndarray::array![[0.25], [-1.5]];
        assert_eq!(decode(&reg, Task::Regression), vec![0.25, -1.5]);
    }
}
