//! Flat `key=value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every key has a default, so
//! an empty file is a valid configuration. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FloorMode, MaskSchedule, SyntheticConfig};
use crate::error::{Error, Result};
use crate::fusion::Pooling;
use crate::hypmath::{check_curvature_ratio, Curvature, VolumeWeighting};
use crate::mirror::{CycleWeighting, MirrorLossConfig};
use crate::optim::LossWeights;
use crate::scorefield::NoiseSchedule;

/// Where training and test samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic,
    Records { train: String, test: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    // geometry
    pub c_e: f64,
    pub c_a: f64,
    pub eps_bnd: f64,
    pub dim: usize,
    // objective
    pub weights: LossWeights,
    pub lambda_curl: f64,
    pub curl_bound: f64,
    pub curl_points: usize,
    pub curl_delta: f64,
    pub loss_ewma_decay: f64,
    pub loss_update_interval: u64,
    pub loss_window: usize,
    pub loss_eps: f64,
    pub mirror_loss: MirrorLossConfig,
    // property embeddings
    pub d_p: usize,
    pub decomp_hidden: usize,
    pub ema_decay: f64,
    pub ema_interval: u64,
    // networks
    pub heads: usize,
    pub fusion_hidden: usize,
    pub pooling: Pooling,
    pub mirror_depth: usize,
    pub mirror_hidden: usize,
    /// Multiplier on the initial mirror residual weights.
    pub mirror_init_scale: f64,
    pub score_hidden: usize,
    pub noise: NoiseSchedule,
    // optimisation
    pub lr: f64,
    pub grad_clip: f64,
    /// Decoupled weight decay on the modality projections.
    pub proj_weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask: MaskSchedule,
    pub seeds: Vec<u64>,
    // data
    pub task: TaskKind,
    pub data: DataSource,
    pub synthetic: SyntheticConfig,
    pub train_size: usize,
    pub test_size: usize,
    pub data_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            c_e: 1.0,
            c_a: 0.8,
            eps_bnd: 0.05,
            dim: 16,
            weights: LossWeights::default(),
            lambda_curl: 0.1,
            curl_bound: 0.01,
            curl_points: 16,
            curl_delta: 1e-3,
            loss_ewma_decay: 0.99,
            loss_update_interval: 50,
            loss_window: 100,
            loss_eps: 1e-5,
            mirror_loss: MirrorLossConfig::default(),
            d_p: 128,
            decomp_hidden: 64,
            ema_decay: 0.95,
            ema_interval: 100,
            heads: 8,
            fusion_hidden: 128,
            pooling: Pooling::Attention,
            mirror_depth: 2,
            mirror_hidden: 64,
            mirror_init_scale: 8.0,
            score_hidden: 64,
            noise: NoiseSchedule::default(),
            lr: 1e-3,
            grad_clip: 1.0,
            proj_weight_decay: 5.0,
            epochs: 50,
            batch_size: 64,
            mask: MaskSchedule::default(),
            seeds: vec![42, 123, 2025],
            task: TaskKind::Classification,
            data: DataSource::Synthetic,
            synthetic: SyntheticConfig::default(),
            train_size: 2000,
            test_size: 500,
            data_seed: 7,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| cfg_err(format!("{key}: cannot parse {v:?}")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut train_path: Option<String> = None;
        let mut test_path: Option<String> = None;
        let mut source = "synthetic".to_string();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(cfg_err(format!("line {}: expected key=value, got {raw:?}", i + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            match k {
                "c_e" => cfg.c_e = num(k, v)?,
                "c_a" => cfg.c_a = num(k, v)?,
                "eps_bnd" => cfg.eps_bnd = num(k, v)?,
                "dim" => cfg.dim = num(k, v)?,
                "alpha" => cfg.weights.alpha = num(k, v)?,
                "beta" => cfg.weights.beta = num(k, v)?,
                "gamma" => cfg.weights.gamma = num(k, v)?,
                "delta" => cfg.weights.delta = num(k, v)?,
                "eta" => cfg.weights.eta = num(k, v)?,
                "lambda_orth" => cfg.weights.lambda_orth = num(k, v)?,
                "zeta" => cfg.weights.zeta = num(k, v)?,
                "lambda_curl" => cfg.lambda_curl = num(k, v)?,
                "curl_bound" => cfg.curl_bound = num(k, v)?,
                "curl_points" => cfg.curl_points = num(k, v)?,
                "curl_delta" => cfg.curl_delta = num(k, v)?,
                "loss_ewma_decay" => cfg.loss_ewma_decay = num(k, v)?,
                "loss_update_interval" => cfg.loss_update_interval = num(k, v)?,
                "loss_window" => cfg.loss_window = num(k, v)?,
                "loss_eps" => cfg.loss_eps = num(k, v)?,
                "cycle_weighting" => {
                    cfg.mirror_loss.weighting = match v {
                        "mean" => CycleWeighting::Mean,
                        "self_normalized" => CycleWeighting::SelfNormalized,
                        "unweighted" => CycleWeighting::Unweighted,
                        _ => return Err(cfg_err(format!("{k}: unknown value {v:?}"))),
                    }
                }
                "volume_weighting" => {
                    cfg.mirror_loss.volume = match v {
                        "density" => VolumeWeighting::Density,
                        "inverse_density" => VolumeWeighting::InverseDensity,
                        _ => return Err(cfg_err(format!("{k}: unknown value {v:?}"))),
                    }
                }
                "d_p" => cfg.d_p = num(k, v)?,
                "decomp_hidden" => cfg.decomp_hidden = num(k, v)?,
                "ema_decay" => cfg.ema_decay = num(k, v)?,
                "ema_interval" => cfg.ema_interval = num(k, v)?,
                "heads" => cfg.heads = num(k, v)?,
                "fusion_hidden" => cfg.fusion_hidden = num(k, v)?,
                "pooling" => {
                    cfg.pooling = match v {
                        "attention" => Pooling::Attention,
                        "mean" => Pooling::Mean,
                        _ => return Err(cfg_err(format!("{k}: unknown value {v:?}"))),
                    }
                }
                "mirror_depth" => cfg.mirror_depth = num(k, v)?,
                "mirror_hidden" => cfg.mirror_hidden = num(k, v)?,
                "mirror_init_scale" => cfg.mirror_init_scale = num(k, v)?,
                "score_hidden" => cfg.score_hidden = num(k, v)?,
                "sigma_min" => cfg.noise.sigma_min = num(k, v)?,
                "sigma_max" => cfg.noise.sigma_max = num(k, v)?,
                "diffusion_steps" => cfg.noise.num_steps = num(k, v)?,
                "lr" => cfg.lr = num(k, v)?,
                "grad_clip" => cfg.grad_clip = num(k, v)?,
                "proj_weight_decay" => cfg.proj_weight_decay = num(k, v)?,
                "epochs" => cfg.epochs = num(k, v)?,
                "batch_size" => cfg.batch_size = num(k, v)?,
                "mask_rates" => cfg.mask.train_rates = list(k, v)?,
                "mask_min_start" => cfg.mask.min_start = num(k, v)?,
                "mask_min_end" => cfg.mask.min_end = num(k, v)?,
                "mask_anneal_epochs" => cfg.mask.anneal_every = num(k, v)?,
                "mask_anneal_span" => cfg.mask.anneal_span = num(k, v)?,
                "mask_floor" => {
                    cfg.mask.floor_mode = match v {
                        "clip_up" => FloorMode::ClipUp,
                        "filter" => FloorMode::Filter,
                        _ => return Err(cfg_err(format!("{k}: unknown value {v:?}"))),
                    }
                }
                "test_mask" => cfg.mask.test_rate = num(k, v)?,
                "seeds" => cfg.seeds = list(k, v)?,
                "task" => {
                    cfg.task = match v {
                        "classification" => TaskKind::Classification,
                        "regression" => TaskKind::Regression,
                        _ => return Err(cfg_err(format!("{k}: unknown value {v:?}"))),
                    }
                }
                "data" => source = v.to_string(),
                "train_path" => train_path = Some(v.to_string()),
                "test_path" => test_path = Some(v.to_string()),
                "classes" => cfg.synthetic.classes = num(k, v)?,
                "latent_dim" => cfg.synthetic.latent_dim = num(k, v)?,
                "feature_dims" => {
                    let d: Vec<usize> = list(k, v)?;
                    cfg.synthetic.dims = d.try_into().map_err(|_| cfg_err("feature_dims needs three values"))?;
                }
                "prototype_radius" => cfg.synthetic.prototype_radius = num(k, v)?,
                "latent_noise" => cfg.synthetic.latent_noise = num(k, v)?,
                "modality_noise" => {
                    let d: Vec<f64> = list(k, v)?;
                    cfg.synthetic.modality_noise =
                        d.try_into().map_err(|_| cfg_err("modality_noise needs three values"))?;
                }
                "inconsistency" => cfg.synthetic.inconsistency = num(k, v)?,
                "train_size" => cfg.train_size = num(k, v)?,
                "test_size" => cfg.test_size = num(k, v)?,
                "data_seed" => cfg.data_seed = num(k, v)?,
                _ => return Err(cfg_err(format!("line {}: unknown key {k:?}", i + 1))),
            }
        }
        cfg.data = match source.as_str() {
            "synthetic" => DataSource::Synthetic,
            "records" => DataSource::Records {
                train: train_path.ok_or_else(|| cfg_err("data=records needs train_path"))?,
                test: test_path.ok_or_else(|| cfg_err("data=records needs test_path"))?,
            },
            other => return Err(cfg_err(format!("data: unknown source {other:?}"))),
        };
        cfg.synthetic.curvature = cfg.c_e;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks ranges and the curvature-ratio safeguard.
    pub fn validate(&self) -> Result<()> {
        let ce = Curvature::new(self.c_e).map_err(|e| cfg_err(e.to_string()))?;
        let ca = Curvature::new(self.c_a).map_err(|e| cfg_err(e.to_string()))?;
        check_curvature_ratio(ce, ca).map_err(|e| cfg_err(e.to_string()))?;
        let checks: [(bool, &str); 17] = [
            (self.eps_bnd > 0.0 && self.eps_bnd < 1.0, "eps_bnd must lie in (0, 1)"),
            (self.dim >= 2, "dim must be at least 2"),
            (
                self.d_p >= 1 && self.decomp_hidden >= 1,
                "d_p and decomp_hidden must be positive",
            ),
            (
                self.heads >= 1 && self.fusion_hidden.is_multiple_of(self.heads),
                "fusion_hidden must be a multiple of heads",
            ),
            (self.mirror_depth >= 1, "mirror_depth must be at least 1"),
            (
                self.lr > 0.0 && self.grad_clip > 0.0,
                "lr and grad_clip must be positive",
            ),
            (self.batch_size >= 2, "batch_size must be at least 2"),
            (
                (0.0..1.0).contains(&self.ema_decay) && self.ema_interval > 0,
                "ema_decay must lie in [0, 1) with a positive interval",
            ),
            (
                (0.0..1.0).contains(&self.loss_ewma_decay)
                    && self.loss_update_interval > 0
                    && self.loss_window > 0
                    && self.loss_eps > 0.0,
                "invalid loss normaliser settings",
            ),
            (
                !self.mask.train_rates.is_empty() && self.mask.train_rates.iter().all(|r| (0.0..=1.0).contains(r)),
                "mask_rates must be non-empty and within [0, 1]",
            ),
            (
                (0.0..=1.0).contains(&self.mask.min_start)
                    && (0.0..=1.0).contains(&self.mask.min_end)
                    && (0.0..=1.0).contains(&self.mask.test_rate),
                "mask floors and test_mask must lie in [0, 1]",
            ),
            (
                self.noise.sigma_min > 0.0 && self.noise.sigma_max > self.noise.sigma_min,
                "need 0 < sigma_min < sigma_max",
            ),
            (
                self.curl_points >= 1 && self.curl_delta > 0.0,
                "curl_points and curl_delta must be positive",
            ),
            (!self.seeds.is_empty(), "seeds must not be empty"),
            (
                self.train_size >= 1 && self.test_size >= 1,
                "train_size and test_size must be positive",
            ),
            (
                self.lambda_curl >= 0.0 && self.curl_bound >= 0.0,
                "lambda_curl and curl_bound must be non-negative",
            ),
            (
                self.mirror_init_scale > 0.0 && self.proj_weight_decay >= 0.0 && self.lr * self.proj_weight_decay < 1.0,
                "mirror_init_scale must be positive and lr * proj_weight_decay below 1",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(cfg_err(msg));
            }
        }
        let w = self.weights.bundle();
        if w.iter().any(|(_, x)| !(x >= 0.0 && x.is_finite())) {
            return Err(cfg_err("loss weights must be finite and non-negative"));
        }
        self.synthetic.validate().map_err(|e| cfg_err(e.to_string()))
    }

    /// Every key with its resolved value; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &self.weights;
        let enum_name = |x: &str| x.to_string();
        let pairs: Vec<(&str, String)> = vec![
            ("c_e", self.c_e.to_string()),
            ("c_a", self.c_a.to_string()),
            ("eps_bnd", self.eps_bnd.to_string()),
            ("dim", self.dim.to_string()),
            ("alpha", w.alpha.to_string()),
            ("beta", w.beta.to_string()),
            ("gamma", w.gamma.to_string()),
            ("delta", w.delta.to_string()),
            ("eta", w.eta.to_string()),
            ("lambda_orth", w.lambda_orth.to_string()),
            ("zeta", w.zeta.to_string()),
            ("lambda_curl", self.lambda_curl.to_string()),
            ("curl_bound", self.curl_bound.to_string()),
            ("curl_points", self.curl_points.to_string()),
            ("curl_delta", self.curl_delta.to_string()),
            ("loss_ewma_decay", self.loss_ewma_decay.to_string()),
            ("loss_update_interval", self.loss_update_interval.to_string()),
            ("loss_window", self.loss_window.to_string()),
            ("loss_eps", self.loss_eps.to_string()),
            (
                "cycle_weighting",
                enum_name(match self.mirror_loss.weighting {
                    CycleWeighting::Mean => "mean",
                    CycleWeighting::SelfNormalized => "self_normalized",
                    CycleWeighting::Unweighted => "unweighted",
                }),
            ),
            (
                "volume_weighting",
                enum_name(match self.mirror_loss.volume {
                    VolumeWeighting::Density => "density",
                    VolumeWeighting::InverseDensity => "inverse_density",
                }),
            ),
            ("d_p", self.d_p.to_string()),
            ("decomp_hidden", self.decomp_hidden.to_string()),
            ("ema_decay", self.ema_decay.to_string()),
            ("ema_interval", self.ema_interval.to_string()),
            ("heads", self.heads.to_string()),
            ("fusion_hidden", self.fusion_hidden.to_string()),
            (
                "pooling",
                enum_name(match self.pooling {
                    Pooling::Attention => "attention",
                    Pooling::Mean => "mean",
                }),
            ),
            ("mirror_depth", self.mirror_depth.to_string()),
            ("mirror_hidden", self.mirror_hidden.to_string()),
            ("mirror_init_scale", self.mirror_init_scale.to_string()),
            ("score_hidden", self.score_hidden.to_string()),
            ("sigma_min", self.noise.sigma_min.to_string()),
            ("sigma_max", self.noise.sigma_max.to_string()),
            ("diffusion_steps", self.noise.num_steps.to_string()),
            ("lr", self.lr.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("proj_weight_decay", self.proj_weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("mask_rates", join(&self.mask.train_rates)),
            ("mask_min_start", self.mask.min_start.to_string()),
            ("mask_min_end", self.mask.min_end.to_string()),
            ("mask_anneal_epochs", self.mask.anneal_every.to_string()),
            ("mask_anneal_span", self.mask.anneal_span.to_string()),
            (
                "mask_floor",
                enum_name(match self.mask.floor_mode {
                    FloorMode::ClipUp => "clip_up",
                    FloorMode::Filter => "filter",
                }),
            ),
            ("test_mask", self.mask.test_rate.to_string()),
            ("seeds", join(&self.seeds)),
            (
                "task",
                enum_name(match self.task {
                    TaskKind::Classification => "classification",
                    TaskKind::Regression => "regression",
                }),
            ),
            ("classes", self.synthetic.classes.to_string()),
            ("latent_dim", self.synthetic.latent_dim.to_string()),
            ("feature_dims", join(&self.synthetic.dims)),
            ("prototype_radius", self.synthetic.prototype_radius.to_string()),
            ("latent_noise", self.synthetic.latent_noise.to_string()),
            ("modality_noise", join(&self.synthetic.modality_noise)),
            ("inconsistency", self.synthetic.inconsistency.to_string()),
            ("train_size", self.train_size.to_string()),
            ("test_size", self.test_size.to_string()),
            ("data_seed", self.data_seed.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        match &self.data {
            DataSource::Synthetic => s.push_str("data=synthetic\n"),
            DataSource::Records { train, test } => {
                let _ = writeln!(s, "data=records\ntrain_path={train}\ntest_path={test}");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULT_KEYS: &str = "\
c_e=1.0
c_a=0.8
eps_bnd=0.05
lambda_orth=0.1
lambda_curl=0.1
curl_bound=0.01
ema_decay=0.95
ema_interval=100
loss_ewma_decay=0.99
loss_update_interval=50
loss_window=100
grad_clip=1.0
mask_rates=0.2,0.5,0.8
mask_min_start=0.5
mask_min_end=0.1
mask_anneal_epochs=10
test_mask=0.3
d_p=128
lr=0.001
heads=8
mirror_depth=2
seeds=42,123,2025
";

    #[test]
    fn published_constants_are_the_defaults() {
        assert_eq!(Config::parse(DEFAULT_KEYS).unwrap(), Config::default());
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = Config::parse("dim=8\nepochs=3\npooling=mean\nmask_floor=filter\nseeds=1,2").unwrap();
        cfg.weights.zeta = 0.5;
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
        let rec = Config::parse("data=records\ntrain_path=a.jsonl\ntest_path=b.jsonl").unwrap();
        assert_eq!(Config::parse(&rec.to_text()).unwrap(), rec);
    }

    #[test]
    fn comments_and_spacing() {
        let cfg = Config::parse("# header\n  lr = 0.01   # faster\n\nheads=4\nfusion_hidden=64").unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.heads, 4);
    }

    #[test]
    fn rejections() {
        for bad in [
            "unknown_key=1",
            "lr",
            "lr=fast",
            "c_a=0.3",
            "heads=3",
            "mask_rates=0.2,1.5",
            "feature_dims=1,2",
            "data=records",
            "eps_bnd=0",
            "gamma=-1",
        ] {
            let e = Config::parse(bad).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{bad}: {e}");
        }
    }

    #[test]
    fn curvature_ratio_boundaries_are_accepted() {
        assert!(Config::parse("c_e=1.0\nc_a=0.5").is_ok());
        assert!(Config::parse("c_e=0.5\nc_a=1.0").is_ok());
        assert!(Config::parse("c_e=1.0\nc_a=0.49").is_err());
    }
}
