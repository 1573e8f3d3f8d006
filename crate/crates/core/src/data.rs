//! Synthetic identity datasets, dataset files, the metrics log, and the
//! flat `key = value` run configuration.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvaluationReport;
use crate::trainer::{EpochRecord, TrainConfig};

pub const DATA_MAGIC: &str = "MSKD-DATA";
pub const DATA_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "query" => Some(Split::Query),
            "gallery" => Some(Split::Gallery),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u64,
    pub input: Vec<f64>,
    /// `None` is an unknown identity (stored as `-1`).
    pub identity: Option<u32>,
    pub camera: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Instance> {
        self.instances.iter().filter(|i| i.split == split).collect()
    }

    /// Unique ids, consistent dimensions, and every query identity present
    /// in the gallery under another camera.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for inst in &self.instances {
            if !ids.insert(inst.id) {
                return Err(Error::InvalidParameter(format!("duplicate instance id {}", inst.id)));
            }
            if inst.input.len() != self.input_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.input_dim,
                    got: inst.input.len(),
                });
            }
        }
        let mut gallery_cams: HashMap<u32, HashSet<u32>> = HashMap::new();
        for g in self.split(Split::Gallery) {
            if let Some(id) = g.identity {
                gallery_cams.entry(id).or_default().insert(g.camera);
            }
        }
        for q in self.split(Split::Query) {
            let Some(id) = q.identity else { continue };
            let ok = gallery_cams
                .get(&id)
                .is_some_and(|cams| cams.iter().any(|&c| c != q.camera));
            if !ok {
                return Err(Error::InfeasibleSplit(format!(
                    "query identity {id} has no gallery instance under another camera"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub instances_per_identity: usize,
    pub num_cameras: usize,
    pub input_dim: usize,
    pub identity_spread: f64,
    pub camera_offset_scale: f64,
    pub noise_scale: f64,
    pub query_per_identity: usize,
    pub gallery_per_identity: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 20,
            instances_per_identity: 16,
            num_cameras: 4,
            input_dim: 32,
            identity_spread: 1.0,
            camera_offset_scale: 0.1,
            noise_scale: 0.05,
            query_per_identity: 2,
            gallery_per_identity: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.instances_per_identity == 0 || self.input_dim == 0 {
            return Err(Error::InvalidParameter("identity, instance and input counts must be >= 1".into()));
        }
        if !(self.identity_spread > 0.0) || !(self.camera_offset_scale >= 0.0) || !(self.noise_scale >= 0.0)
        {
            return Err(Error::InvalidParameter("spread must be > 0 and scales >= 0".into()));
        }
        let held_out = self.query_per_identity + self.gallery_per_identity;
        if held_out > self.instances_per_identity {
            return Err(Error::InfeasibleSplit(format!(
                "{held_out} held-out instances per identity exceed {}",
                self.instances_per_identity
            )));
        }
        if self.query_per_identity > 0 && (self.num_cameras < 2 || self.gallery_per_identity == 0) {
            return Err(Error::InfeasibleSplit(
                "queries need at least 2 cameras and a gallery".into(),
            ));
        }
        if self.num_cameras == 0 {
            return Err(Error::InfeasibleSplit("no cameras".into()));
        }
        Ok(())
    }
}

/// Identity prototypes plus per-camera offsets plus isotropic noise.
///
/// Within an identity, instance `j` is seen by camera `(identity + j) mod
/// num_cameras`; the first instances go to the training split, followed by
/// the query and gallery instances.
pub fn generate_synthetic<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<Dataset> {
    cfg.validate()?;
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let draw = |scale: f64, rng: &mut R| -> Vec<f64> {
        (0..cfg.input_dim).map(|_| scale * std.sample(rng)).collect()
    };
    let prototypes: Vec<Vec<f64>> = (0..cfg.num_identities)
        .map(|_| draw(cfg.identity_spread, rng))
        .collect();
    let offsets: Vec<Vec<f64>> = (0..cfg.num_cameras)
        .map(|_| draw(cfg.camera_offset_scale, rng))
        .collect();
    let n_train = cfg.instances_per_identity - cfg.query_per_identity - cfg.gallery_per_identity;
    let mut instances = Vec::with_capacity(cfg.num_identities * cfg.instances_per_identity);
    for (id, proto) in prototypes.iter().enumerate() {
        for j in 0..cfg.instances_per_identity {
            let camera = (id + j) % cfg.num_cameras;
            let noise = draw(cfg.noise_scale, rng);
            let input = proto
                .iter()
                .zip(&offsets[camera])
                .zip(&noise)
                .map(|((p, o), n)| p + o + n)
                .collect();
            let split = if j < n_train {
                Split::Train
            } else if j < n_train + cfg.query_per_identity {
                Split::Query
            } else {
                Split::Gallery
            };
            instances.push(Instance {
                id: instances.len() as u64,
                input,
                identity: Some(id as u32),
                camera: camera as u32,
                split,
            });
        }
    }
    let ds = Dataset {
        input_dim: cfg.input_dim,
        instances,
    };
    ds.validate()?;
    Ok(ds)
}

/// Text encoding: a header line `MSKD-DATA v1 <N> <Din>`, then one line per
/// instance `id identity camera v1 .. vDin`. A `split <name>` line precedes
/// each run of instances belonging to the same split.
pub fn dataset_to_string(ds: &Dataset) -> String {
    let mut out = format!("{DATA_MAGIC} {DATA_VERSION} {} {}\n", ds.instances.len(), ds.input_dim);
    let mut current = None;
    for inst in &ds.instances {
        if current != Some(inst.split) {
            let _ = writeln!(out, "split {}", inst.split.name());
            current = Some(inst.split);
        }
        let identity = inst.identity.map_or(-1, i64::from);
        let _ = write!(out, "{} {} {}", inst.id, identity, inst.camera);
        for v in &inst.input {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

pub fn dataset_from_str(text: &str) -> Result<Dataset> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::MalformedHeader("empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&DATA_MAGIC) {
        return Err(Error::MalformedHeader(header.to_string()));
    }
    if fields.get(1) != Some(&DATA_VERSION) {
        return Err(Error::VersionMismatch(format!(
            "expected {DATA_VERSION}, found {}",
            fields.get(1).unwrap_or(&"nothing")
        )));
    }
    let parse_usize = |s: Option<&&str>| -> Result<usize> {
        s.and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::MalformedHeader(header.to_string()))
    };
    let n = parse_usize(fields.get(2))?;
    let input_dim = parse_usize(fields.get(3))?;
    if fields.len() != 4 {
        return Err(Error::MalformedHeader(header.to_string()));
    }

    let mut split = Split::Train;
    let mut instances = Vec::with_capacity(n);
    for (lineno, line) in lines.enumerate() {
        let lineno = lineno + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let first = tok.next().expect("non-empty line");
        if first == "split" {
            split = tok
                .next()
                .and_then(Split::parse)
                .ok_or_else(|| Error::Truncated(format!("line {lineno}: bad split marker")))?;
            continue;
        }
        let bad = |what: &str| Error::Truncated(format!("line {lineno}: {what}"));
        let id: u64 = first.parse().map_err(|_| bad("instance id"))?;
        let identity: i64 = tok.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("identity"))?;
        let camera: u32 = tok.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("camera"))?;
        let input: Vec<f64> = tok
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("feature value"))?;
        if input.len() != input_dim {
            return Err(bad(&format!("expected {input_dim} values, found {}", input.len())));
        }
        let identity = match identity {
            -1 => None,
            v => Some(u32::try_from(v).map_err(|_| bad("identity"))?),
        };
        instances.push(Instance {
            id,
            input,
            identity,
            camera,
            split,
        });
    }
    if instances.len() != n {
        return Err(Error::Truncated(format!("expected {n} instances, found {}", instances.len())));
    }
    Ok(Dataset {
        input_dim,
        instances,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_to_string(ds))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    dataset_from_str(&fs::read_to_string(path)?)
}

/// One line of the metrics log: the record's fields plus a `kind` tag.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricsRecord {
    Epoch(EpochRecord),
    Evaluation(EvaluationReport),
}

impl MetricsRecord {
    fn kind(&self) -> &'static str {
        match self {
            MetricsRecord::Epoch(_) => "epoch",
            MetricsRecord::Evaluation(_) => "evaluation",
        }
    }

    // Tagging by hand: serde's internally tagged enums cannot read back the
    // integer keys of the CMC map.
    pub fn to_json(&self) -> Result<String> {
        let mut value = match self {
            MetricsRecord::Epoch(r) => serde_json::to_value(r)?,
            MetricsRecord::Evaluation(r) => serde_json::to_value(r)?,
        };
        if let serde_json::Value::Object(map) = &mut value {
            map.insert("kind".into(), self.kind().into());
        }
        Ok(serde_json::to_string(&value)?)
    }

    pub fn from_json(line: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(line)?;
        let kind = value
            .as_object_mut()
            .and_then(|m| m.remove("kind"))
            .and_then(|k| k.as_str().map(str::to_owned))
            .ok_or_else(|| Error::Config("metrics line without a kind".into()))?;
        match kind.as_str() {
            "epoch" => Ok(MetricsRecord::Epoch(serde_json::from_value(value)?)),
            "evaluation" => Ok(MetricsRecord::Evaluation(serde_json::from_value(value)?)),
            other => Err(Error::Config(format!("unknown metrics kind {other:?}"))),
        }
    }
}

/// Appends one JSON object per line. Single writer only.
pub fn append_metrics(record: &MetricsRecord, path: impl AsRef<Path>) -> Result<()> {
    let mut line = record.to_json()?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRecord::from_json)
        .collect()
}

/// Training and data-generation settings read from one config file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.synth.input_dim = cfg.train.encoder.input;
        cfg.synth.seed = cfg.train.seed;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "lambda1" => t.lambda1 = parse_value(key, v)?,
            "lambda2" => t.lambda2 = parse_value(key, v)?,
            "mu" => t.mu = parse_value(key, v)?,
            "tau" => t.tau = parse_value(key, v)?,
            "momentum" => t.momentum = parse_value(key, v)?,
            "eps" => t.eps = parse_value(key, v)?,
            "min_pts" => t.min_pts = parse_value(key, v)?,
            "batch_identities" => t.batch_identities = parse_value(key, v)?,
            "batch_instances" => t.batch_instances = parse_value(key, v)?,
            "lr" => t.lr = parse_value(key, v)?,
            "weight_decay" => t.weight_decay = parse_value(key, v)?,
            "lr_decay_every" => t.lr_decay_every = parse_value(key, v)?,
            "lr_decay_factor" => t.lr_decay_factor = parse_value(key, v)?,
            "num_epochs" => t.num_epochs = parse_value(key, v)?,
            "num_iterations" => {
                t.num_iterations = match v {
                    "auto" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "warmup_multiplier" => t.warmup_multiplier = parse_value(key, v)?,
            "seed" => t.seed = parse_value(key, v)?,
            "deterministic" => t.deterministic = parse_bool(key, v)?,
            "batch_norm" => t.batch_norm = parse_bool(key, v)?,
            "renormalize_centroids" => t.renormalize_centroids = parse_bool(key, v)?,
            "eval_each_epoch" => t.eval_each_epoch = parse_bool(key, v)?,
            "rerank" => {
                if parse_bool(key, v)? {
                    return Err(Error::Config("rerank = on is not supported".into()));
                }
            }
            "gem_p" => t.gem_p = parse_value(key, v)?,
            "input_dim" => t.encoder.input = parse_value(key, v)?,
            "hidden_dim" => t.encoder.hidden = parse_value(key, v)?,
            "map_rows" => t.encoder.rows = parse_value(key, v)?,
            "map_cols" => t.encoder.cols = parse_value(key, v)?,
            "channels" => t.encoder.channels = parse_value(key, v)?,
            "num_identities" => s.num_identities = parse_value(key, v)?,
            "instances_per_identity" => s.instances_per_identity = parse_value(key, v)?,
            "num_cameras" => s.num_cameras = parse_value(key, v)?,
            "identity_spread" => s.identity_spread = parse_value(key, v)?,
            "camera_offset_scale" => s.camera_offset_scale = parse_value(key, v)?,
            "noise_scale" => s.noise_scale = parse_value(key, v)?,
            "query_per_identity" => s.query_per_identity = parse_value(key, v)?,
            "gallery_per_identity" => s.gallery_per_identity = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, parseable by [`RunConfig::parse`].
    pub fn to_config_string(&self) -> String {
        let t = &self.train;
        let s = &self.synth;
        let iters = t.num_iterations.map_or("auto".to_string(), |n| n.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("lambda1", t.lambda1.to_string()),
            ("lambda2", t.lambda2.to_string()),
            ("mu", t.mu.to_string()),
            ("tau", t.tau.to_string()),
            ("momentum", t.momentum.to_string()),
            ("eps", t.eps.to_string()),
            ("min_pts", t.min_pts.to_string()),
            ("batch_identities", t.batch_identities.to_string()),
            ("batch_instances", t.batch_instances.to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("lr_decay_every", t.lr_decay_every.to_string()),
            ("lr_decay_factor", t.lr_decay_factor.to_string()),
            ("num_epochs", t.num_epochs.to_string()),
            ("num_iterations", iters),
            ("warmup_multiplier", t.warmup_multiplier.to_string()),
            ("seed", t.seed.to_string()),
            ("deterministic", t.deterministic.to_string()),
            ("batch_norm", t.batch_norm.to_string()),
            ("renormalize_centroids", t.renormalize_centroids.to_string()),
            ("eval_each_epoch", t.eval_each_epoch.to_string()),
            ("gem_p", t.gem_p.to_string()),
            ("input_dim", t.encoder.input.to_string()),
            ("hidden_dim", t.encoder.hidden.to_string()),
            ("map_rows", t.encoder.rows.to_string()),
            ("map_cols", t.encoder.cols.to_string()),
            ("channels", t.encoder.channels.to_string()),
            ("num_identities", s.num_identities.to_string()),
            ("instances_per_identity", s.instances_per_identity.to_string()),
            ("num_cameras", s.num_cameras.to_string()),
            ("identity_spread", s.identity_spread.to_string()),
            ("camera_offset_scale", s.camera_offset_scale.to_string()),
            ("noise_scale", s.noise_scale.to_string()),
            ("query_per_identity", s.query_per_identity.to_string()),
            ("gallery_per_identity", s.gallery_per_identity.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noise_free_identities_identical() {
        let cfg = SynthConfig {
            noise_scale: 0.0,
            camera_offset_scale: 0.0,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for id in 0..cfg.num_identities as u32 {
            let xs: Vec<_> = ds.instances.iter().filter(|i| i.identity == Some(id)).collect();
            assert!(xs.iter().all(|i| i.input == xs[0].input));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig::default();
        let a = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(dataset_to_string(&a), dataset_to_string(&b));
    }

    #[test]
    fn split_sizes() {
        let cfg = SynthConfig::default();
        let ds = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(ds.split(Split::Train).len(), 200);
        assert_eq!(ds.split(Split::Query).len(), 40);
        assert_eq!(ds.split(Split::Gallery).len(), 80);
    }

    #[test]
    fn single_camera_is_infeasible() {
        let cfg = SynthConfig {
            num_cameras: 1,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::InfeasibleSplit(_))
        ));
    }

    #[test]
    fn file_round_trip_and_unknown_identity() {
        let cfg = SynthConfig {
            num_identities: 3,
            instances_per_identity: 5,
            ..Default::default()
        };
        let cfg = SynthConfig {
            query_per_identity: 1,
            gallery_per_identity: 2,
            ..cfg
        };
        let mut ds = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        ds.instances[0].identity = None;
        let text = dataset_to_string(&ds);
        let back = dataset_from_str(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.instances[0].identity, None);
        assert!(text.lines().nth(2).unwrap().starts_with("0 -1 "));
    }

    #[test]
    fn tampered_header() {
        let ds = generate_synthetic(&SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let text = dataset_to_string(&ds).replacen("MSKD-DATA v1", "MSKD-DATA v2", 1);
        let err = dataset_from_str(&text).unwrap_err();
        assert!(err.to_string().starts_with("version mismatch"));
        let err = dataset_from_str("NOPE v1 1 1\n").unwrap_err();
        assert!(matches!(err, Error::MalformedHeader(_)));
        let text = dataset_to_string(&ds);
        let cut: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(matches!(dataset_from_str(&cut), Err(Error::Truncated(_))));
    }

    #[test]
    fn metrics_append_and_reparse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let rec = EpochRecord {
            phase: "teacher".into(),
            epoch: 3,
            num_clusters: 20,
            num_outliers: 2,
            mean_loss: 1.0 / 3.0,
            pseudo_ari: Some(0.987654321),
            map: None,
            rank1: Some(0.95),
            wall_time_s: 0.0,
        };
        let report = EvaluationReport {
            map: 0.1 + 0.2,
            cmc: [(1, 0.5), (5, 0.75), (10, 1.0)].into_iter().collect(),
            num_queries: 4,
            num_gallery: 8,
            skipped: 0,
        };
        append_metrics(&MetricsRecord::Epoch(rec.clone()), &path).unwrap();
        append_metrics(&MetricsRecord::Evaluation(report.clone()), &path).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back, vec![MetricsRecord::Epoch(rec), MetricsRecord::Evaluation(report)]);
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 2);
    }

    #[test]
    fn config_parse_and_round_trip() {
        let cfg = RunConfig::parse("# comment\neps = 0.7  # looser threshold\nnum_iterations = 3\nbatch_norm = off\n").unwrap();
        assert_eq!(cfg.train.eps, 0.7);
        assert_eq!(cfg.train.num_iterations, Some(3));
        assert!(!cfg.train.batch_norm);
        let again = RunConfig::parse(&cfg.to_config_string()).unwrap();
        assert_eq!(again, cfg);
        assert!(RunConfig::parse("epz = 0.6").unwrap_err().to_string().contains("unknown key"));
        assert!(RunConfig::parse("eps 0.6").is_err());
        assert!(RunConfig::parse("rerank = on").is_err());
        assert!(RunConfig::parse("rerank = off").is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn generated_datasets_valid_and_round_trip(
            ids in 1usize..6,
            per in 3usize..8,
            cams in 2usize..5,
            dim in 1usize..6,
            seed in any::<u64>(),
        ) {
            let cfg = SynthConfig {
                num_identities: ids,
                instances_per_identity: per,
                num_cameras: cams,
                input_dim: dim,
                query_per_identity: 1,
                gallery_per_identity: 2,
                ..Default::default()
            };
            let ds = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(ds.validate().is_ok());
            prop_assert_eq!(dataset_from_str(&dataset_to_string(&ds)).unwrap(), ds);
        }
    }
}
