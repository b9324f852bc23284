//! Training configuration and its flat `key = value` file format.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::generator::{LatentPrior, ToyConfig, DEFAULT_CUTOFF};
use crate::par::Execution;
use crate::perceptual::ExtractorKind;
use crate::stn::StnConfig;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch: usize,
    pub anneal: bool,
    pub anneal_steps: usize,
    pub lambda_tv: f64,
    pub lambda_i: f64,
    pub lr_t: f64,
    pub lr_c: f64,
    /// Length of each warm-restart cycle after the first one (which lasts
    /// `anneal_steps`). Zero means a single cycle running to `total_steps`.
    pub restart_period: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub cutoff: usize,
    /// Number of learned principal-direction coefficients of each target.
    pub n_components: usize,
    pub clusters: usize,
    pub flips: bool,
    pub seed: u64,
    pub pca_pool: usize,
    pub kmeans_pool: usize,
    pub extractor: ExtractorKind,
    pub extractor_seed: u64,
    pub execution: Execution,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub recursion: usize,
    pub classifier_samples: usize,
    pub classifier_batch: usize,
    pub classifier_lr: f64,
    pub network: StnConfig,
    pub toy: ToyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 20_000,
            batch: 8,
            anneal: true,
            anneal_steps: 5_000,
            lambda_tv: 1000.0,
            lambda_i: 1.0,
            lr_t: 1e-3,
            lr_c: 1e-2,
            restart_period: 0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            cutoff: DEFAULT_CUTOFF,
            n_components: 1,
            clusters: 1,
            flips: false,
            seed: 0,
            pca_pool: 50_000,
            kmeans_pool: 50_000,
            extractor: ExtractorKind::RandomFeatures,
            extractor_seed: 0,
            execution: Execution::Parallel,
            log_every: 10,
            checkpoint_every: 0,
            recursion: 1,
            classifier_samples: 4_000,
            classifier_batch: 16,
            classifier_lr: 1e-3,
            network: StnConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().or_else(|_| invalid(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => invalid(format!("bad boolean {value:?} for {key}")),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// Split `key = value` lines, dropping blank lines and `#` comments.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return invalid(format!("line {}: expected key = value", no + 1));
        };
        let key = k.trim().to_string();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return invalid(format!("line {}: duplicate key {key}", no + 1));
        }
    }
    Ok(out)
}

impl TrainConfig {
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let kv = parse_kv(text)?;
        let mut prior_kind = None;
        let (mut prior_dim, mut centers, mut weights, mut spread) = (crate::generator::FACING_DIM, None, None, 0.25);
        for (k, v) in &kv {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "total_steps" => cfg.total_steps = parse(k, v)?,
                "batch" => cfg.batch = parse(k, v)?,
                "anneal" => cfg.anneal = parse_bool(k, v)?,
                "anneal_steps" => cfg.anneal_steps = parse(k, v)?,
                "lambda_tv" => cfg.lambda_tv = parse(k, v)?,
                "lambda_i" => cfg.lambda_i = parse(k, v)?,
                "lr_t" => cfg.lr_t = parse(k, v)?,
                "lr_c" => cfg.lr_c = parse(k, v)?,
                "restart_period" => cfg.restart_period = parse(k, v)?,
                "beta1" => cfg.beta1 = parse(k, v)?,
                "beta2" => cfg.beta2 = parse(k, v)?,
                "weight_decay" => cfg.weight_decay = parse(k, v)?,
                "cutoff" => cfg.cutoff = parse(k, v)?,
                "n_components" => cfg.n_components = parse(k, v)?,
                "clusters" => cfg.clusters = parse(k, v)?,
                "flips" => cfg.flips = parse_bool(k, v)?,
                "seed" => cfg.seed = parse(k, v)?,
                "pca_pool" => cfg.pca_pool = parse(k, v)?,
                "kmeans_pool" => cfg.kmeans_pool = parse(k, v)?,
                "extractor" => cfg.extractor = v.parse()?,
                "extractor_seed" => cfg.extractor_seed = parse(k, v)?,
                "execution" => cfg.execution = v.parse()?,
                "log_every" => cfg.log_every = parse(k, v)?,
                "checkpoint_every" => cfg.checkpoint_every = parse(k, v)?,
                "recursion" => cfg.recursion = parse(k, v)?,
                "classifier_samples" => cfg.classifier_samples = parse(k, v)?,
                "classifier_batch" => cfg.classifier_batch = parse(k, v)?,
                "classifier_lr" => cfg.classifier_lr = parse(k, v)?,
                "resolution" => {
                    cfg.network.resolution = parse(k, v)?;
                    cfg.toy.resolution = cfg.network.resolution;
                }
                "padding" => cfg.network.padding = v.parse()?,
                "use_flow" => cfg.network.use_flow = parse_bool(k, v)?,
                "widths" => {
                    let w = parse_list(k, v)?;
                    if w.len() != 2 {
                        return invalid("widths takes two comma-separated values");
                    }
                    cfg.network.widths = [w[0] as usize, w[1] as usize];
                }
                "hidden" => cfg.network.hidden = parse(k, v)?,
                "network_seed" => cfg.network.seed = parse(k, v)?,
                "pose_gain" => cfg.toy.pose_gain = parse(k, v)?,
                "facing" => cfg.toy.facing = parse_bool(k, v)?,
                "facing_gain" => cfg.toy.facing_gain = parse(k, v)?,
                "prior" => prior_kind = Some(v.to_string()),
                "prior_dim" => prior_dim = parse(k, v)?,
                "prior_centers" => centers = Some(parse_list(k, v)?),
                "prior_weights" => weights = Some(parse_list(k, v)?),
                "prior_spread" => spread = parse(k, v)?,
                other => return invalid(format!("unknown config key {other:?}")),
            }
        }
        match prior_kind.as_deref() {
            None | Some("standard_normal") => {}
            Some("groups") => {
                let centers = centers.ok_or_else(|| crate::Error::InvalidArgument("groups prior needs prior_centers".into()))?;
                let weights = weights.unwrap_or_else(|| vec![1.0; centers.len()]);
                cfg.toy.prior = LatentPrior::Groups { dim: prior_dim, centers, weights, spread };
            }
            Some(other) => return invalid(format!("unknown prior {other:?}")),
        }
        cfg.network.clusters = cfg.clusters;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_kv_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return invalid("batch must be positive");
        }
        if self.anneal_steps == 0 {
            return invalid("anneal_steps must be positive");
        }
        if self.clusters == 0 || self.network.clusters != self.clusters {
            return invalid("cluster count must be positive and match the network");
        }
        if self.network.resolution != self.toy.resolution {
            return invalid("network and generator resolutions differ");
        }
        if self.cutoff > crate::generator::LAYERS {
            return invalid("cutoff exceeds the generator layer count");
        }
        if self.n_components > crate::generator::LATENT_DIM {
            return invalid("n_components exceeds the latent size");
        }
        for (name, v) in [("lr_t", self.lr_t), ("lr_c", self.lr_c), ("lambda_tv", self.lambda_tv), ("lambda_i", self.lambda_i)] {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(format!("{name} must be finite and non-negative"));
            }
        }
        if self.recursion == 0 {
            return invalid("recursion must be at least 1");
        }
        if let LatentPrior::Groups { dim, centers, weights, spread } = &self.toy.prior {
            if *dim >= crate::generator::LATENT_DIM || centers.is_empty() || centers.len() != weights.len() {
                return invalid("groups prior needs a valid dim and matching centers/weights");
            }
            if weights.iter().any(|w| *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 || *spread < 0.0 {
                return invalid("groups prior weights and spread must be non-negative");
            }
        }
        Ok(())
    }

    /// Long-schedule preset for large generators (not exercised by the test suite).
    pub fn full_scale_preset() -> Self {
        Self { total_steps: 1_312_500, batch: 40, anneal_steps: 150_000, ..Self::default() }
    }
}
