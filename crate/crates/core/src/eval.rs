//! Evaluation protocols over a trained checkpoint: fixed missing patterns,
//! a sweep of the global missing rate, clean and corrupted test sets, and the
//! asymmetry cue.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{spearman, Correlation};
use crate::config::Config;
use crate::data::{eta_masks, Dataset, Mask, FIXED_PATTERNS, NUM_MODALITIES};
use crate::error::{contract, Error, Result};
use crate::fusion::Task;
use crate::gradtape::ParamStore;
use crate::model::{decode, EcNet};
use crate::train::{load_data, Checkpoint, CHECKPOINT_FILE};

/// Missing rates of the sweep protocol.
pub const ETA_GRID: [f64; 7] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
/// Seed of the evaluation masks and the field sampler.
pub const EVAL_SEED: u64 = 0xe7a1;
/// Fraction of test samples perturbed by the corruption protocol.
pub const CORRUPT_FRACTION: f64 = 0.1;
/// Standard deviation of the corrupting feature noise.
pub const CORRUPT_NOISE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    Fixed,
    Eta,
    Clean,
    Corrupt,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "eta" => Ok(Self::Eta),
            "clean" => Ok(Self::Clean),
            "corrupt" => Ok(Self::Corrupt),
            _ => Err(Error::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

/// Scores of one evaluation setting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Scores {
    Classification {
        /// Top-1 accuracy over all classes.
        acc: f64,
        /// Accuracy after collapsing classes into a lower and an upper half.
        acc2: f64,
        /// Macro-averaged F1 over classes.
        f1: f64,
    },
    Regression {
        mae: f64,
        corr: f64,
    },
}

impl Scores {
    pub fn primary(&self) -> f64 {
        match self {
            Scores::Classification { acc, .. } => *acc,
            Scores::Regression { mae, .. } => *mae,
        }
    }
}

pub fn score(pred: &[f64], labels: &[f64], task: Task) -> Result<Scores> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(contract("predictions and labels must be non-empty and of equal length"));
    }
    let n = pred.len() as f64;
    Ok(match task {
        Task::Classification { classes } => {
            let acc = pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / n;
            let half = classes as f64 / 2.0;
            let acc2 = pred
                .iter()
                .zip(labels)
                .filter(|(p, y)| (**p < half) == (**y < half))
                .count() as f64
                / n;
            let mut f1 = 0.0;
            for k in 0..classes {
                let k = k as f64;
                let tp = pred.iter().zip(labels).filter(|(p, y)| **p == k && **y == k).count() as f64;
                let fp = pred.iter().zip(labels).filter(|(p, y)| **p == k && **y != k).count() as f64;
                let fn_ = pred.iter().zip(labels).filter(|(p, y)| **p != k && **y == k).count() as f64;
                if tp > 0.0 {
                    f1 += 2.0 * tp / (2.0 * tp + fp + fn_);
                }
            }
            Scores::Classification {
                acc,
                acc2,
                f1: f1 / classes as f64,
            }
        }
        Task::Regression => {
            let mae = pred.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
            let mp = pred.iter().sum::<f64>() / n;
            let my = labels.iter().sum::<f64>() / n;
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (p, y) in pred.iter().zip(labels) {
                sxy += (p - mp) * (y - my);
                sxx += (p - mp).powi(2);
                syy += (y - my).powi(2);
            }
            let corr = if sxx > 0.0 && syy > 0.0 {
                sxy / (sxx * syy).sqrt()
            } else {
                0.0
            };
            Scores::Regression { mae, corr }
        }
    })
}

/// One row of an evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub protocol: String,
    pub setting: String,
    pub n: usize,
    pub scores: Scores,
    /// Slot availability actually fed to the fuser, summed over rows.
    pub mask_token_uses: [usize; NUM_MODALITIES],
}

pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let regression = rows.iter().any(|r| matches!(r.scores, Scores::Regression { .. }));
    let mut s = if regression {
        String::from("protocol,setting,n,mae,corr,mask_L,mask_A,mask_V\n")
    } else {
        String::from("protocol,setting,n,acc,acc2,f1,mask_L,mask_A,mask_V\n")
    };
    for r in rows {
        let _ = write!(s, "{},{},{}", r.protocol, r.setting, r.n);
        match r.scores {
            Scores::Classification { acc, acc2, f1 } => {
                let _ = write!(s, ",{acc},{acc2},{f1}");
            }
            Scores::Regression { mae, corr } => {
                let _ = write!(s, ",{mae},{corr}");
            }
        }
        let [a, b, c] = r.mask_token_uses;
        let _ = writeln!(s, ",{a},{b},{c}");
    }
    s
}

/// A trained model with its test set.
pub struct Evaluator {
    pub cfg: Config,
    pub model: EcNet,
    pub store: ParamStore,
    pub test: Dataset,
}

impl Evaluator {
    pub fn new(cfg: Config, model: EcNet, store: ParamStore, test: Dataset) -> Self {
        Self {
            cfg,
            model,
            store,
            test,
        }
    }

    pub fn from_run_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_FILE);
        if !path.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no checkpoint at {}", path.display()),
            )));
        }
        let ck = Checkpoint::load(&path)?;
        let cfg = ck.config()?;
        let (_, test) = load_data(&cfg)?;
        if !test.is_empty() && test.dims != ck.dims {
            return Err(contract("test data shape differs from the checkpoint"));
        }
        Ok(Self::new(cfg, ck.model, ck.state.store, test))
    }

    /// Predictions and fused embeddings for `data` under `masks`.
    pub fn run(&self, data: &Dataset, masks: &[Mask]) -> Result<(Vec<f64>, Array2<f64>)> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let batch = data.batch(&idx, masks)?;
        let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
        let vhat = self.model.recover_field(&self.store, &self.cfg, &batch, &mut rng)?;
        let p = self.model.predict(&self.store, &batch, &vhat)?;
        Ok((decode(&p.logits, self.model.task), p.h_fus))
    }

    fn row(&self, protocol: &str, setting: &str, data: &Dataset, masks: &[Mask]) -> Result<EvalRow> {
        let (pred, _) = self.run(data, masks)?;
        let labels: Vec<f64> = data.samples.iter().map(|s| s.label).collect();
        let mut uses = [0usize; NUM_MODALITIES];
        for m in masks {
            for (u, &avail) in uses.iter_mut().zip(m) {
                *u += usize::from(!avail);
            }
        }
        Ok(EvalRow {
            protocol: protocol.into(),
            setting: setting.into(),
            n: data.len(),
            scores: score(&pred, &labels, self.model.task)?,
            mask_token_uses: uses,
        })
    }

    fn combine(&self, base: &[Mask], extra: &[Mask]) -> Vec<Mask> {
        base.iter()
            .zip(extra)
            .map(|(a, b)| std::array::from_fn(|m| a[m] && b[m]))
            .collect()
    }

    pub fn evaluate(&self, protocol: Protocol) -> Result<Vec<EvalRow>> {
        if self.test.is_empty() {
            return Err(contract("test set is empty"));
        }
        let own = self.test.masks(&(0..self.test.len()).collect::<Vec<_>>());
        let n = self.test.len();
        match protocol {
            Protocol::Fixed => FIXED_PATTERNS
                .iter()
                .map(|(name, pattern)| {
                    let m = self.combine(&own, &vec![*pattern; n]);
                    self.row("fixed", name, &self.test, &m)
                })
                .collect(),
            Protocol::Eta => ETA_GRID
                .iter()
                .map(|&eta| {
                    let m = self.combine(&own, &eta_masks(n, eta, EVAL_SEED));
                    self.row("eta", &format!("{eta}"), &self.test, &m)
                })
                .collect(),
            Protocol::Clean => {
                let full = self.row("clean", "full", &self.test, &own)?;
                let m = self.combine(&own, &eta_masks(n, self.cfg.mask.test_rate, EVAL_SEED));
                let masked = self.row("clean", &format!("p={}", self.cfg.mask.test_rate), &self.test, &m)?;
                Ok(vec![full, masked])
            }
            Protocol::Corrupt => {
                let noisy = corrupt(&self.test, CORRUPT_FRACTION, CORRUPT_NOISE, EVAL_SEED);
                let full = self.row("corrupt", "full", &noisy, &own)?;
                let m = self.combine(&own, &eta_masks(n, self.cfg.mask.test_rate, EVAL_SEED));
                let masked = self.row("corrupt", &format!("p={}", self.cfg.mask.test_rate), &noisy, &m)?;
                Ok(vec![full, masked])
            }
        }
    }

    /// Asymmetry score of every full-modality test sample and its rank
    /// correlation with the inconsistency flag.
    pub fn asymmetry(&self) -> Result<(Vec<f64>, Correlation)> {
        let own = self.test.masks(&(0..self.test.len()).collect::<Vec<_>>());
        let (_, h) = self.run(&self.test, &own)?;
        let s = self.model.asymmetry(&self.store, &h)?;
        let flags: Vec<f64> = self
            .test
            .samples
            .iter()
            .map(|x| f64::from(u8::from(x.inconsistent)))
            .collect();
        let c = spearman(&s, &flags)?;
        Ok((s, c))
    }
}

/// Adds Gaussian noise to every feature of a seeded `fraction` of samples.
pub fn corrupt(data: &Dataset, fraction: f64, sd: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ff);
    let mut out = data.clone();
    for s in &mut out.samples {
        if rng.random::<f64>() < fraction {
            for f in s.features.iter_mut() {
                for v in f.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += sd * e;
                }
            }
        }
    }
    out
}
