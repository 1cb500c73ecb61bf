//! The training loop: masking, the eight-term objective, normalisation,
//! clipping, optimiser steps, property EMA, diagnostics and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, DataSource};
use crate::data::{generate_synthetic, load_records, sample_mask, Dataset, NUM_MODALITIES};
use crate::error::{contract, Error, Result};
use crate::gradtape::{Graph, ParamKind, ParamStore};
use crate::model::{decode, EcNet};
use crate::optim::{
    global_grad_clip, total_loss, Adam, AdamConfig, LossBundle, LossNormalizer, OnlineEta, RiemannianAdam,
};
use crate::propdecomp::{principal_angles, AngleStats};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CLIPPING_FILE: &str = "clipping.csv";
pub const ANGLES_FILE: &str = "angles_hist.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_FILE: &str = "config.txt";

/// Cap on the Riemannian step size for ball-valued parameters.
const RIEMANNIAN_ETA_MAX: f64 = 1e-2;

/// Mixes a run seed with a stream tag and a counter into one rng seed.
pub fn stream_seed(seed: u64, tag: u64, counter: u64) -> u64 {
    let mut z = seed ^ tag.rotate_left(17) ^ counter.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_INIT: u64 = 1;
const TAG_EPOCH: u64 = 2;
const TAG_STEP: u64 = 3;

/// Train and test sets named by the configuration.
pub fn load_data(cfg: &Config) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic => generate_synthetic(&cfg.synthetic, cfg.train_size, cfg.test_size, cfg.data_seed),
        DataSource::Records { train, test } => {
            let load = |p: &str| {
                load_records(Path::new(p)).map_err(|e| match e {
                    Error::Io(io) => Error::Data {
                        line: 0,
                        msg: format!("{p}: {io}"),
                    },
                    other => other,
                })
            };
            let tr = load(train)?;
            let te = load(test)?;
            if !tr.is_empty() && !te.is_empty() && tr.dims != te.dims {
                return Err(Error::Data {
                    line: 0,
                    msg: format!("train dims {:?} differ from test dims {:?}", tr.dims, te.dims),
                });
            }
            Ok((tr, te))
        }
    }
}

/// Number of model outputs for the configured task.
pub fn outputs_for(cfg: &Config, train: &Dataset) -> usize {
    match cfg.task {
        crate::config::TaskKind::Classification => train.num_classes().max(2),
        crate::config::TaskKind::Regression => 1,
    }
}

/// One diagnostics row, written per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    pub raw: [f64; 8],
    pub normalized: [f64; 8],
    pub total: f64,
    pub clip_frac: f64,
    pub fus_clip_frac: f64,
    pub curl: f64,
    pub angle_mean: f64,
    pub angle_max: f64,
    pub asym_consistent: f64,
    pub asym_inconsistent: f64,
    pub eta_t: f64,
    pub train_acc: f64,
}

impl MetricsRow {
    pub fn header() -> String {
        let names = crate::optim::LossTerm::ALL.map(|k| k.name());
        let mut h = String::from("epoch,step");
        for n in names {
            let _ = write!(h, ",raw_{n}");
        }
        for n in names {
            let _ = write!(h, ",norm_{n}");
        }
        h.push_str(",total,clip_frac,fus_clip_frac,curl,angle_mean,angle_max,asym_consistent,asym_inconsistent,eta_t,train_acc");
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}", self.epoch, self.step);
        for v in self.raw.iter().chain(&self.normalized) {
            let _ = write!(s, ",{v}");
        }
        for v in [
            self.total,
            self.clip_frac,
            self.fus_clip_frac,
            self.curl,
            self.angle_mean,
            self.angle_max,
            self.asym_consistent,
            self.asym_inconsistent,
            self.eta_t,
            self.train_acc,
        ] {
            let _ = write!(s, ",{v}");
        }
        s
    }
}

/// Per-batch clipping record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRow {
    pub step: u64,
    pub clipped: usize,
    pub total: usize,
}

impl ClipRow {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.clipped as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct EpochAccum {
    batches: usize,
    raw: [f64; 8],
    normalized: [f64; 8],
    total: f64,
    clip_frac: f64,
    fus_clipped: usize,
    rows: usize,
    correct: usize,
    asym_sum: [f64; 2],
    asym_count: [usize; 2],
}

/// Everything that changes during training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    /// Next batch within the current epoch.
    pub batch: usize,
    pub step: u64,
    pub store: ParamStore,
    adam: Adam,
    radam: RiemannianAdam,
    online_eta: OnlineEta,
    normalizer: LossNormalizer,
    score_ready: bool,
    accum: EpochAccum,
    pub metrics: Vec<MetricsRow>,
    pub clipping: Vec<ClipRow>,
    pub angles: Option<AngleStats>,
    last_curl: f64,
    last_eta: f64,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: String,
    pub seed: u64,
    pub dims: [usize; NUM_MODALITIES],
    pub outputs: usize,
    pub model: EcNet,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn config(&self) -> Result<Config> {
        Config::parse(&self.config)
    }
}

pub struct Trainer {
    pub cfg: Config,
    pub seed: u64,
    pub outputs: usize,
    pub model: EcNet,
    pub state: TrainState,
    pub train: Dataset,
}

impl Trainer {
    pub fn new(cfg: Config, seed: u64, train: Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(contract("training set is empty"));
        }
        let outputs = outputs_for(&cfg, &train);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, TAG_INIT, 0));
        let model = EcNet::new(&mut store, &cfg, train.dims, outputs, &mut rng)?;
        let adam = Adam::with_config(AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        });
        let radam = RiemannianAdam::new(
            AdamConfig {
                lr: cfg.lr,
                ..Default::default()
            },
            cfg.eps_bnd,
        );
        let normalizer = LossNormalizer::new(
            cfg.loss_ewma_decay,
            cfg.loss_update_interval,
            cfg.loss_window,
            cfg.loss_eps,
        )?;
        let state = TrainState {
            epoch: 0,
            batch: 0,
            step: 0,
            store,
            adam,
            radam,
            online_eta: OnlineEta::new(1.0, RIEMANNIAN_ETA_MAX),
            normalizer,
            score_ready: false,
            accum: EpochAccum::default(),
            metrics: Vec::new(),
            clipping: Vec::new(),
            angles: None,
            last_curl: 0.0,
            last_eta: 0.0,
        };
        Ok(Self {
            cfg,
            seed,
            outputs,
            model,
            state,
            train,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, train: Dataset) -> Result<Self> {
        let cfg = ck.config()?;
        if train.dims != ck.dims {
            return Err(contract("checkpoint was trained on data of a different shape"));
        }
        Ok(Self {
            cfg,
            seed: ck.seed,
            outputs: ck.outputs,
            model: ck.model,
            state: ck.state,
            train,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.to_text(),
            seed: self.seed,
            dims: self.train.dims,
            outputs: self.outputs,
            model: self.model.clone(),
            state: self.state.clone(),
        }
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, TAG_EPOCH, epoch as u64));
        order.shuffle(&mut rng);
        order
            .chunks(self.cfg.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Runs until training finishes or `max_steps` total steps have been taken.
    pub fn run(&mut self, max_steps: Option<u64>) -> Result<()> {
        while !self.finished() && max_steps.is_none_or(|m| self.state.step < m) {
            self.train_step()?;
        }
        Ok(())
    }

    /// One optimisation step on the next batch; closes the epoch after its
    /// last batch.
    pub fn train_step(&mut self) -> Result<()> {
        let batches = self.batches(self.state.epoch);
        if batches.is_empty() {
            return Err(contract("training set is smaller than two samples"));
        }
        let idx = &batches[self.state.batch];
        let cfg = &self.cfg;
        let model = &self.model;
        let st = &mut self.state;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, TAG_STEP, st.step));

        let p = cfg.mask.batch_rate(st.epoch, &mut rng);
        let masks = sample_mask(&self.train.masks(idx), p, &mut rng);
        let batch = self.train.batch(idx, &masks)?;
        let full = self.train.batch(idx, &self.train.masks(idx))?;

        if !st.score_ready {
            let prep0 = model.prepare(&st.store, cfg, &batch, &full, &mut rng.clone())?;
            model.score.init_from_data(&mut st.store, &prep0.mirror_points)?;
            st.score_ready = true;
        }
        let prep = model.prepare(&st.store, cfg, &batch, &full, &mut rng)?;
        let mut g = Graph::new();
        let out = model.build(&mut g, &st.store, cfg, &batch, &prep)?;
        let raw: LossBundle<f64> = out.terms.map(|_, v| g.scalar(v));
        st.normalizer.observe(&raw);
        let scales = st.normalizer.scales();
        let total = total_loss(&mut g, &out.terms, &scales, &cfg.weights)?;
        let total_value = g.scalar(total);
        let mut grads = g.backward(total)?;
        global_grad_clip(&mut grads, cfg.grad_clip);

        // bookkeeping from the pre-update forward pass
        let logits = g.value(out.logits).clone();
        let h_fus = g.value(out.h_fus).clone();
        let mut mu_bars = Vec::new();
        let mut sig_rows = Vec::new();
        let mut mu_rows = Vec::new();
        for (m, d) in out.decomposition.iter().enumerate() {
            if let Some((s, mu)) = d {
                let mv = g.value(*mu);
                mu_bars.push((m, mv.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0))));
                sig_rows.push(g.value(*s).clone());
                mu_rows.push(mv.clone());
            }
        }
        let clip = model.clip_count(&st.store, &batch);

        st.adam.step(&mut st.store, &grads);
        let keep = 1.0 - cfg.lr * cfg.proj_weight_decay;
        for l in &model.proj_e {
            st.store.get_mut(l.weight).mapv_inplace(|w| w * keep);
        }
        let tokens: Vec<_> = model.fuser.mask_tokens.clone();
        let rows: Vec<_> = tokens.iter().map(|&t| st.store.get(t).view()).collect::<Vec<_>>();
        let points = concatenate(Axis(0), &rows).expect("mask tokens share a width");
        let zero = Array2::zeros((1, model.dim));
        let grad_rows: Vec<Array2<f64>> = tokens
            .iter()
            .map(|&t| grads.get(t).cloned().unwrap_or_else(|| zero.clone()))
            .collect();
        let gviews: Vec<_> = grad_rows.iter().map(|x| x.view()).collect();
        let egrad = concatenate(Axis(0), &gviews).expect("mask tokens share a width");
        st.online_eta.observe(&model.emotion, &points, &egrad);
        let eta = st.online_eta.eta(&model.emotion, st.radam.steps() + 1);
        st.radam.step(&mut st.store, &grads, eta)?;
        debug_assert!(tokens
            .iter()
            .all(|&t| matches!(st.store.kind(t), ParamKind::Ball { .. })));

        st.step += 1;
        if model.props.is_scheduled(st.step) {
            for (m, mu_bar) in &mu_bars {
                model.props.ema_update(&mut st.store, *m, mu_bar, st.step)?;
            }
        }

        // diagnostics
        let preds = decode(&logits, model.task);
        let correct = preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        let asym = model.asymmetry(&st.store, &h_fus)?;
        let acc = &mut st.accum;
        acc.batches += 1;
        for i in 0..8 {
            acc.raw[i] += raw.terms[i];
            acc.normalized[i] += raw.terms[i] * scales.terms[i];
        }
        acc.total += total_value;
        acc.clip_frac += clip.fraction();
        acc.fus_clipped += out.fus_clipped;
        acc.rows += batch.rows();
        acc.correct += correct;
        for (s, &flag) in asym.iter().zip(&batch.inconsistent) {
            acc.asym_sum[usize::from(flag)] += s;
            acc.asym_count[usize::from(flag)] += 1;
        }
        st.clipping.push(ClipRow {
            step: st.step,
            clipped: clip.clipped,
            total: clip.total,
        });
        st.last_curl = prep.curl;
        st.last_eta = eta;

        st.batch += 1;
        if st.batch >= batches.len() {
            let sig = concatenate(Axis(0), &sig_rows.iter().map(|x| x.view()).collect::<Vec<_>>()).ok();
            let mu = concatenate(Axis(0), &mu_rows.iter().map(|x| x.view()).collect::<Vec<_>>()).ok();
            if let (Some(s), Some(m)) = (sig, mu) {
                st.angles = Some(principal_angles(&s, &m)?);
            }
            let a = std::mem::take(&mut st.accum);
            let nb = a.batches.max(1) as f64;
            let angles = st.angles.as_ref();
            st.metrics.push(MetricsRow {
                epoch: st.epoch,
                step: st.step,
                raw: a.raw.map(|x| x / nb),
                normalized: a.normalized.map(|x| x / nb),
                total: a.total / nb,
                clip_frac: a.clip_frac / nb,
                fus_clip_frac: a.fus_clipped as f64 / a.rows.max(1) as f64,
                curl: st.last_curl,
                angle_mean: angles.map_or(0.0, |s| s.mean),
                angle_max: angles.map_or(0.0, |s| s.max),
                asym_consistent: a.asym_sum[0] / a.asym_count[0].max(1) as f64,
                asym_inconsistent: a.asym_sum[1] / a.asym_count[1].max(1) as f64,
                eta_t: st.last_eta,
                train_acc: a.correct as f64 / a.rows.max(1) as f64,
            });
            st.epoch += 1;
            st.batch = 0;
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = MetricsRow::header();
        s.push('\n');
        for r in &self.state.metrics {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }

    pub fn clipping_csv(&self) -> String {
        let mut s = String::from("step,clipped,total,fraction\n");
        for r in &self.state.clipping {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.clipped, r.total, r.fraction());
        }
        s
    }

    /// Writes config, metrics, clipping log, angle histogram and checkpoint.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), self.cfg.to_text())?;
        fs::write(dir.join(METRICS_FILE), self.metrics_csv())?;
        fs::write(dir.join(CLIPPING_FILE), self.clipping_csv())?;
        if let Some(a) = &self.state.angles {
            let mut buf = Vec::new();
            a.write_csv(&mut buf)?;
            fs::write(dir.join(ANGLES_FILE), buf)?;
        }
        self.checkpoint().save(&dir.join(CHECKPOINT_FILE))
    }
}

/// Trains `cfg` with `seed`, writing outputs into `out` after every epoch.
/// With `resume`, continues from `out/checkpoint.json` when it exists.
pub fn run_train(cfg: &Config, seed: u64, out: &Path, resume: bool) -> Result<Trainer> {
    let (train, _) = load_data(cfg)?;
    let ck_path: PathBuf = out.join(CHECKPOINT_FILE);
    let mut trainer = if resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.seed != seed || ck.config()? != *cfg {
            return Err(Error::Config(
                "checkpoint was written with a different config or seed".into(),
            ));
        }
        Trainer::from_checkpoint(ck, train)?
    } else {
        Trainer::new(cfg.clone(), seed, train)?
    };
    fs::create_dir_all(out)?;
    while !trainer.finished() {
        let epoch = trainer.state.epoch;
        while trainer.state.epoch == epoch {
            trainer.train_step()?;
        }
        trainer.write_outputs(out)?;
    }
    if trainer.state.metrics.is_empty() {
        trainer.write_outputs(out)?;
    }
    Ok(trainer)
}
