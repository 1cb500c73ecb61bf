//! Multimodal samples, the synthetic generator, record files and the
//! modality-masking schedule.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::hypmath::{mobius_add_raw, PoincareBall, RadialMap};

pub const NUM_MODALITIES: usize = 3;
pub const MODALITY_NAMES: [&str; NUM_MODALITIES] = ["L", "A", "V"];

/// Modality availability, indexed like [`MODALITY_NAMES`].
pub type Mask = [bool; NUM_MODALITIES];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub label: f64,
    pub features: [Vec<f64>; NUM_MODALITIES],
    pub mask: Mask,
    pub inconsistent: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dims: [usize; NUM_MODALITIES],
    pub samples: Vec<Sample>,
}

/// Row-stacked view of a set of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: [Array2<f64>; NUM_MODALITIES],
    /// `r×1` columns of 0/1.
    pub available: [Array2<f64>; NUM_MODALITIES],
    pub labels: Vec<f64>,
    pub inconsistent: Vec<bool>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|s| s.label as usize + 1).max().unwrap_or(0)
    }

    /// Stacks `idx` with the given masks (one per index).
    pub fn batch(&self, idx: &[usize], masks: &[Mask]) -> Result<Batch> {
        if masks.len() != idx.len() {
            return Err(contract("one mask per selected sample is required"));
        }
        let r = idx.len();
        let features = std::array::from_fn(|m| {
            Array2::from_shape_fn((r, self.dims[m]), |(i, j)| {
                let s = &self.samples[idx[i]];
                if masks[i][m] {
                    s.features[m][j]
                } else {
                    0.0
                }
            })
        });
        let available =
            std::array::from_fn(|m| Array2::from_shape_fn((r, 1), |(i, _)| f64::from(u8::from(masks[i][m]))));
        Ok(Batch {
            features,
            available,
            labels: idx.iter().map(|&i| self.samples[i].label).collect(),
            inconsistent: idx.iter().map(|&i| self.samples[i].inconsistent).collect(),
        })
    }

    pub fn masks(&self, idx: &[usize]) -> Vec<Mask> {
        idx.iter().map(|&i| self.samples[i].mask).collect()
    }
}

/// Parameters of the planted-cluster generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub latent_dim: usize,
    pub dims: [usize; NUM_MODALITIES],
    /// Tangent norm of every class prototype at the origin.
    pub prototype_radius: f64,
    /// Standard deviation of the per-sample perturbation in the tangent space.
    pub latent_noise: f64,
    /// Additive feature noise per modality.
    pub modality_noise: [f64; NUM_MODALITIES],
    /// Fraction of samples with one nonverbal modality drawn from another class.
    pub inconsistency: f64,
    pub curvature: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 7,
            latent_dim: 8,
            dims: [48, 16, 16],
            prototype_radius: 1.2,
            latent_noise: 0.15,
            modality_noise: [0.6, 0.6, 0.6],
            inconsistency: 0.2,
            curvature: 1.0,
        }
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.classes >= 2
            && self.latent_dim >= 1
            && self.dims.iter().all(|&d| d >= 1)
            && self.prototype_radius > 0.0
            && self.latent_noise >= 0.0
            && self.modality_noise.iter().all(|&s| s >= 0.0)
            && (0.0..=1.0).contains(&self.inconsistency)
            && self.curvature > 0.0;
        if ok {
            Ok(())
        } else {
            Err(contract(format!("invalid synthetic data config {self:?}")))
        }
    }
}

/// The fixed parts of a synthetic world: prototypes and modality maps.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub cfg: SyntheticConfig,
    /// Prototype points on the ball, one per class.
    pub prototypes: Vec<Vec<f64>>,
    /// `latent_dim × d_m` maps.
    pub maps: [Array2<f64>; NUM_MODALITIES],
}

impl SyntheticWorld {
    pub fn new(cfg: SyntheticConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let exp0 = RadialMap::Exp0 { c: cfg.curvature };
        let prototypes = (0..cfg.classes)
            .map(|_| {
                let v: Vec<f64> = (0..cfg.latent_dim).map(|_| gauss(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                exp0.apply(&v.iter().map(|x| x * cfg.prototype_radius / n).collect::<Vec<_>>())
            })
            .collect();
        let maps = std::array::from_fn(|m| {
            let s = 1.0 / (cfg.latent_dim as f64).sqrt();
            Array2::from_shape_simple_fn((cfg.latent_dim, cfg.dims[m]), || s * gauss(&mut rng))
        });
        Ok(Self { cfg, prototypes, maps })
    }

    /// `prototype ⊕ exp0(noise)`.
    fn perturbed_point<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        let c = self.cfg.curvature;
        let noise: Vec<f64> = (0..self.cfg.latent_dim)
            .map(|_| self.cfg.latent_noise * gauss(rng))
            .collect();
        let step = RadialMap::Exp0 { c }.apply(&noise);
        let p = mobius_add_raw(&self.prototypes[class], &step, c);
        // keep well inside the ball so log0 stays finite
        let ball = PoincareBall::new(c).expect("validated curvature");
        ball.clip(&p).0.into_coords()
    }

    fn features<R: Rng + ?Sized>(&self, m: usize, point: &[f64], rng: &mut R) -> Vec<f64> {
        let t = RadialMap::Log0 { c: self.cfg.curvature }.apply(point);
        let map = &self.maps[m];
        (0..self.cfg.dims[m])
            .map(|j| {
                let clean: f64 = t.iter().enumerate().map(|(k, x)| x * map[[k, j]]).sum();
                clean + self.cfg.modality_noise[m] * gauss(rng)
            })
            .collect()
    }

    /// Draws `count` samples with ids `{prefix}{i}`.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, prefix: &str, rng: &mut R) -> Dataset {
        let k = self.cfg.classes;
        let samples = (0..count)
            .map(|i| {
                let class = i % k;
                let point = self.perturbed_point(class, rng);
                let mut features: [Vec<f64>; NUM_MODALITIES] = std::array::from_fn(|m| self.features(m, &point, rng));
                let inconsistent = rng.random::<f64>() < self.cfg.inconsistency;
                if inconsistent {
                    let other = (class + 1 + rng.random_range(0..k - 1)) % k;
                    let m = 1 + rng.random_range(0..NUM_MODALITIES - 1);
                    let p = self.perturbed_point(other, rng);
                    features[m] = self.features(m, &p, rng);
                }
                Sample {
                    id: format!("{prefix}{i}"),
                    label: class as f64,
                    features,
                    mask: [true; NUM_MODALITIES],
                    inconsistent,
                }
            })
            .collect();
        Dataset {
            dims: self.cfg.dims,
            samples,
        }
    }
}

/// Train and test sets drawn from one world; a pure function of its inputs.
pub fn generate_synthetic(cfg: &SyntheticConfig, train: usize, test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let world = SyntheticWorld::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let tr = world.sample(train, "train-", &mut rng);
    let te = world.sample(test, "test-", &mut rng);
    Ok((tr, te))
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    label: f64,
    features: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<BTreeMap<String, bool>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    inconsistent: bool,
}

fn data_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Data { line, msg: msg.into() }
}

/// Reads newline-delimited JSON records. Blank lines are skipped; the shape of
/// the first record fixes the dimensions for the rest.
pub fn read_records<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut dims: Option<[usize; NUM_MODALITIES]> = None;
    let mut samples = Vec::new();
    let mut pending: Vec<(usize, Sample, [bool; NUM_MODALITIES])> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| data_err(line_no, e.to_string()))?;
        if !rec.label.is_finite() {
            return Err(data_err(line_no, "label is not finite"));
        }
        if let Some(extra) = rec.features.keys().find(|k| !MODALITY_NAMES.contains(&k.as_str())) {
            return Err(data_err(line_no, format!("unknown modality {extra:?}")));
        }
        let mut mask = [true; NUM_MODALITIES];
        let mut present = [false; NUM_MODALITIES];
        let mut features: [Vec<f64>; NUM_MODALITIES] = Default::default();
        for (m, name) in MODALITY_NAMES.iter().enumerate() {
            if let Some(bit) = rec.mask.as_ref().and_then(|mk| mk.get(*name)) {
                mask[m] = *bit;
            }
            match rec.features.get(*name) {
                Some(v) => {
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(data_err(line_no, format!("non-finite feature in {name}")));
                    }
                    features[m] = v.clone();
                    present[m] = true;
                }
                None if !mask[m] => {}
                None => {
                    return Err(data_err(
                        line_no,
                        format!("modality {name} missing but marked available"),
                    ))
                }
            }
        }
        let sample = Sample {
            id: rec.id,
            label: rec.label,
            features,
            mask,
            inconsistent: rec.inconsistent,
        };
        if dims.is_none() && present.iter().all(|&p| p) {
            dims = Some(std::array::from_fn(|m| sample.features[m].len()));
        }
        pending.push((line_no, sample, present));
    }
    // without a complete record, take each width from the first record that has it
    let dims = dims.unwrap_or_else(|| {
        std::array::from_fn(|m| {
            pending
                .iter()
                .find(|(_, _, present)| present[m])
                .map_or(0, |(_, s, _)| s.features[m].len())
        })
    });
    for (line_no, mut s, present) in pending {
        for m in 0..NUM_MODALITIES {
            if present[m] {
                if s.features[m].len() != dims[m] {
                    return Err(data_err(
                        line_no,
                        format!(
                            "{} has {} values, expected {}",
                            MODALITY_NAMES[m],
                            s.features[m].len(),
                            dims[m]
                        ),
                    ));
                }
            } else {
                s.features[m] = vec![0.0; dims[m]];
            }
        }
        samples.push(s);
    }
    Ok(Dataset { dims, samples })
}

pub fn load_records(path: &std::path::Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_records(std::io::BufReader::new(f))
}

pub fn write_records<W: Write>(data: &Dataset, mut out: W) -> Result<()> {
    for s in &data.samples {
        let rec = Record {
            id: s.id.clone(),
            label: s.label,
            features: MODALITY_NAMES
                .iter()
                .enumerate()
                .map(|(m, n)| (n.to_string(), s.features[m].clone()))
                .collect(),
            mask: (!s.mask.iter().all(|&b| b)).then(|| {
                MODALITY_NAMES
                    .iter()
                    .enumerate()
                    .map(|(m, n)| (n.to_string(), s.mask[m]))
                    .collect()
            }),
            inconsistent: s.inconsistent,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_records(data: &Dataset, path: &std::path::Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_records(data, &mut w)?;
    w.flush()?;
    Ok(())
}

/// How the annealed minimum interacts with the sampled per-batch rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FloorMode {
    /// `p = max(p_sampled, floor)`.
    #[default]
    ClipUp,
    /// Sample only among rates at or above the floor.
    Filter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub train_rates: Vec<f64>,
    pub min_start: f64,
    pub min_end: f64,
    /// Epochs between floor decrements.
    pub anneal_every: usize,
    /// Epoch at which the floor reaches `min_end`.
    pub anneal_span: usize,
    pub test_rate: f64,
    pub floor_mode: FloorMode,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self {
            train_rates: vec![0.2, 0.5, 0.8],
            min_start: 0.5,
            min_end: 0.1,
            anneal_every: 10,
            anneal_span: 40,
            test_rate: 0.3,
            floor_mode: FloorMode::ClipUp,
        }
    }
}

impl MaskSchedule {
    /// Floor on the per-batch drop rate: constant within each block of
    /// `anneal_every` epochs, decreasing linearly in the block index.
    pub fn min_rate(&self, epoch: usize) -> f64 {
        if self.anneal_every == 0 || self.anneal_span == 0 {
            return self.min_end;
        }
        let milestones = (self.anneal_span / self.anneal_every).max(1);
        let k = (epoch / self.anneal_every).min(milestones);
        self.min_start + (self.min_end - self.min_start) * k as f64 / milestones as f64
    }

    pub fn batch_rate<R: Rng + ?Sized>(&self, epoch: usize, rng: &mut R) -> f64 {
        let floor = self.min_rate(epoch);
        match self.floor_mode {
            FloorMode::ClipUp => {
                let p = *self.train_rates.choose(rng).unwrap_or(&floor);
                p.max(floor)
            }
            FloorMode::Filter => {
                let allowed: Vec<f64> = self.train_rates.iter().copied().filter(|&r| r >= floor).collect();
                match allowed.choose(rng) {
                    Some(&p) => p,
                    None => self.train_rates.iter().copied().fold(floor, f64::max),
                }
            }
        }
    }
}

/// Drops each available modality independently with probability `p`.
pub fn drop_modalities<R: Rng + ?Sized>(masks: &[Mask], p: f64, rng: &mut R) -> Vec<Mask> {
    masks
        .iter()
        .map(|orig| {
            let mut out = *orig;
            for slot in out.iter_mut() {
                if *slot && rng.random::<f64>() < p {
                    *slot = false;
                }
            }
            out
        })
        .collect()
}

/// [`drop_modalities`], except that a sample which would lose every modality
/// it had keeps one of them, chosen uniformly.
pub fn sample_mask<R: Rng + ?Sized>(masks: &[Mask], p: f64, rng: &mut R) -> Vec<Mask> {
    let mut out = drop_modalities(masks, p, rng);
    for (o, orig) in out.iter_mut().zip(masks) {
        if !o.iter().any(|&b| b) {
            let had: Vec<usize> = (0..NUM_MODALITIES).filter(|&m| orig[m]).collect();
            if let Some(&keep) = had.choose(rng) {
                o[keep] = true;
            }
        }
    }
    out
}

/// Fixed evaluation patterns: everything, then the six non-empty proper subsets.
pub const FIXED_PATTERNS: [(&str, Mask); 7] = [
    ("full", [true, true, true]),
    ("t", [true, false, false]),
    ("a", [false, true, false]),
    ("v", [false, false, true]),
    ("t+a", [true, true, false]),
    ("t+v", [true, false, true]),
    ("a+v", [false, true, true]),
];

/// Global missing rate `eta`: slot `(i, m)` is dropped when `u_im < eta`, with
/// the uniforms drawn once from `seed`. Larger `eta` therefore drops a superset
/// of slots. A sample never loses all modalities: the one with the largest `u`
/// survives.
pub fn eta_masks(count: usize, eta: f64, seed: u64) -> Vec<Mask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let u: [f64; NUM_MODALITIES] = std::array::from_fn(|_| rng.random());
            let mut mask = u.map(|x| x >= eta);
            if !mask.iter().any(|&b| b) {
                let best = (0..NUM_MODALITIES)
                    .max_by(|&a, &b| u[a].total_cmp(&u[b]))
                    .expect("three modalities");
                mask[best] = true;
            }
            mask
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            dims: [5, 4, 3],
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_pure() {
        let a = generate_synthetic(&small_cfg(), 40, 10, 7).unwrap();
        let b = generate_synthetic(&small_cfg(), 40, 10, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small_cfg(), 40, 10, 8).unwrap();
        assert_ne!(a.0, c.0);
        assert_eq!(a.0.dims, [5, 4, 3]);
        assert_eq!(a.0.num_classes(), 7);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = SyntheticConfig {
            inconsistency: 1.5,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&cfg, 1, 1, 0), Err(Error::Contract(_))));
        let cfg = SyntheticConfig {
            classes: 1,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg, 1, 1, 0).is_err());
    }

    #[test]
    fn noiseless_features_are_linear_images() {
        let cfg = SyntheticConfig {
            latent_noise: 0.0,
            modality_noise: [0.0; 3],
            inconsistency: 0.0,
            ..small_cfg()
        };
        let world = SyntheticWorld::new(cfg.clone(), 3).unwrap();
        let data = world.sample(21, "s", &mut ChaCha8Rng::seed_from_u64(1));
        for s in &data.samples {
            let t = RadialMap::Log0 { c: 1.0 }.apply(&world.prototypes[s.label as usize]);
            for m in 0..3 {
                for j in 0..cfg.dims[m] {
                    let expect: f64 = (0..cfg.latent_dim).map(|k| t[k] * world.maps[m][[k, j]]).sum();
                    assert!((s.features[m][j] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn planted_rate_matches() {
        let cfg = SyntheticConfig {
            dims: [2, 2, 2],
            ..Default::default()
        };
        let (tr, _) = generate_synthetic(&cfg, 20_000, 0, 11).unwrap();
        let k = tr.samples.iter().filter(|s| s.inconsistent).count() as f64;
        let n = tr.len() as f64;
        let sd = (0.2 * 0.8 / n).sqrt();
        assert!((k / n - 0.2).abs() < 4.0 * sd, "{}", k / n);
    }

    #[test]
    fn inconsistency_touches_only_nonverbal_modalities() {
        let cfg = SyntheticConfig {
            latent_noise: 0.0,
            modality_noise: [0.0; 3],
            inconsistency: 1.0,
            ..small_cfg()
        };
        let world = SyntheticWorld::new(cfg, 3).unwrap();
        let data = world.sample(30, "s", &mut ChaCha8Rng::seed_from_u64(2));
        let clean = SyntheticWorld::new(
            SyntheticConfig {
                latent_noise: 0.0,
                modality_noise: [0.0; 3],
                inconsistency: 0.0,
                ..small_cfg()
            },
            3,
        )
        .unwrap()
        .sample(30, "s", &mut ChaCha8Rng::seed_from_u64(2));
        for (a, b) in data.samples.iter().zip(&clean.samples) {
            assert!(a.inconsistent);
            assert_eq!(a.features[0], b.features[0]);
            assert!(a.features[1] != b.features[1] || a.features[2] != b.features[2]);
        }
    }

    #[test]
    fn records_round_trip() {
        let (mut tr, _) = generate_synthetic(&small_cfg(), 12, 0, 5).unwrap();
        tr.samples[3].mask = [true, false, true];
        tr.samples[3].features[1] = vec![0.0; 4];
        let mut buf = Vec::new();
        write_records(&tr, &mut buf).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back, tr);
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        let d = read_records("".as_bytes()).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn missing_modality_needs_mask() {
        let ok = r#"{"id":"a","label":1,"features":{"L":[1,2],"V":[3]},"mask":{"A":false}}"#;
        let full = r#"{"id":"b","label":0,"features":{"L":[1,2],"A":[0.5,0.5,0.5],"V":[3]}}"#;
        let d = read_records(format!("{full}\n{ok}\n").as_bytes()).unwrap();
        assert_eq!(d.dims, [2, 3, 1]);
        assert_eq!(d.samples[1].features[1], vec![0.0; 3]);
        assert_eq!(d.samples[1].mask, [true, false, true]);
        let bad = r#"{"id":"c","label":0,"features":{"L":[1,2],"V":[3]}}"#;
        match read_records(format!("{full}\n{bad}\n").as_bytes()) {
            Err(Error::Data { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_reports_line() {
        let a = r#"{"id":"a","label":1,"features":{"L":[1,2],"A":[1],"V":[3]}}"#;
        let b = r#"{"id":"b","label":1,"features":{"L":[1],"A":[1],"V":[3]}}"#;
        match read_records(format!("{a}\n\n{b}\n").as_bytes()) {
            Err(Error::Data { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("expected 2"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        match read_records("{not json}\n".as_bytes()) {
            Err(Error::Data { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn anneal_examples() {
        let s = MaskSchedule::default();
        assert_eq!(s.min_rate(0), 0.5);
        assert_eq!(s.min_rate(9), 0.5);
        assert!((s.min_rate(10) - 0.4).abs() < 1e-15);
        assert!((s.min_rate(40) - 0.1).abs() < 1e-15);
        assert!((s.min_rate(400) - 0.1).abs() < 1e-15);
        for e in 0..100 {
            assert!(s.min_rate(e + 1) <= s.min_rate(e));
        }
    }

    #[test]
    fn batch_rate_respects_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [FloorMode::ClipUp, FloorMode::Filter] {
            let s = MaskSchedule {
                floor_mode: mode,
                ..Default::default()
            };
            for epoch in [0, 15, 45] {
                for _ in 0..200 {
                    let p = s.batch_rate(epoch, &mut rng);
                    assert!(p >= s.min_rate(epoch) - 1e-15);
                    if mode == FloorMode::Filter {
                        assert!(s.train_rates.contains(&p));
                    }
                }
            }
        }
    }

    #[test]
    fn mask_sampling_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let full = vec![[true; 3]; 500];
        assert_eq!(sample_mask(&full, 0.0, &mut rng), full);
        for m in sample_mask(&full, 1.0, &mut rng) {
            assert_eq!(m.iter().filter(|&&b| b).count(), 1);
        }
        // already-missing modalities stay missing
        let partial = vec![[false, true, false]; 50];
        assert_eq!(sample_mask(&partial, 1.0, &mut rng), partial);
    }

    #[test]
    fn empirical_drop_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let full = vec![[true; 3]; n];
        let raw = drop_modalities(&full, 0.5, &mut rng);
        let rate = raw.iter().filter(|m| !m[0]).count() as f64 / n as f64;
        assert!((0.49..=0.51).contains(&rate), "{rate}");
        // the guard restores one of three slots in the 1/8 all-dropped case
        let guarded = sample_mask(&full, 0.5, &mut rng);
        let rate = guarded.iter().filter(|m| !m[0]).count() as f64 / n as f64;
        assert!((rate - (0.5 - 0.125 / 3.0)).abs() < 0.01, "{rate}");
    }

    #[test]
    fn eta_masks_are_nested() {
        let etas = [0.1, 0.3, 0.5, 0.7];
        let ms: Vec<_> = etas.iter().map(|&e| eta_masks(300, e, 3)).collect();
        for w in ms.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                // a slot kept at the larger rate is kept at the smaller one too
                for m in 0..3 {
                    assert!(!b[m] || a[m]);
                }
            }
        }
        assert!(ms.iter().flatten().all(|m| m.iter().any(|&b| b)));
    }

    #[test]
    fn batch_zeroes_masked_features() {
        let (tr, _) = generate_synthetic(&small_cfg(), 4, 0, 1).unwrap();
        let b = tr.batch(&[0, 2], &[[true, false, true], [false, true, true]]).unwrap();
        assert_eq!(b.rows(), 2);
        assert!(b.features[1].row(0).iter().all(|&x| x == 0.0));
        assert!(b.features[0].row(1).iter().all(|&x| x == 0.0));
        assert_eq!(b.available[0][[0, 0]], 1.0);
        assert_eq!(b.available[0][[1, 0]], 0.0);
    }
}
