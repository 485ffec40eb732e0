//! Run configuration, training hyperparameters, presets and derived seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capacity::Activation;
use crate::error::{Error, Result};
use crate::head::AuxSign;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Cluster,
    Edge,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Cluster => "cluster",
            Variant::Edge => "edge",
        }
    }
}

pub const ABLATION_FLAGS: [&str; 6] = ["no_bb", "no_attg", "no_tran", "no_com", "no_comr", "no_pop"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// One shared branch instead of separate origin and destination branches.
    pub no_bb: bool,
    /// Plain graph convolution over attribute co-occurrence instead of the hypergraph.
    pub no_attg: bool,
    /// Base matrices in place of the generated transformation matrices.
    pub no_tran: bool,
    /// No auxiliary competition loss.
    pub no_com: bool,
    /// Auxiliary loss without gradient reversal.
    pub no_comr: bool,
    /// No population enhancement of the origin embeddings.
    pub no_pop: bool,
}

impl Ablations {
    pub fn set(&mut self, flag: &str) -> Result<()> {
        let slot = match flag.replace('-', "_").as_str() {
            "no_bb" => &mut self.no_bb,
            "no_attg" => &mut self.no_attg,
            "no_tran" => &mut self.no_tran,
            "no_com" => &mut self.no_com,
            "no_comr" => &mut self.no_comr,
            "no_pop" => &mut self.no_pop,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?}; expected one of {}",
                    ABLATION_FLAGS.join(", ")
                )))
            }
        };
        *slot = true;
        Ok(())
    }

    pub fn only(flag: &str) -> Result<Self> {
        let mut a = Ablations::default();
        a.set(flag)?;
        Ok(a)
    }

    pub fn active(&self) -> Vec<&'static str> {
        let on = [self.no_bb, self.no_attg, self.no_tran, self.no_com, self.no_comr, self.no_pop];
        ABLATION_FLAGS.iter().zip(on).filter(|(_, b)| *b).map(|(f, _)| *f).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub gamma1: f64,
    pub gamma2: f64,
    pub k1: usize,
    pub k2: usize,
    pub window: usize,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub ablations: Ablations,
    pub aux_sign: AuxSign,
    pub embed_size: usize,
    pub hyper_layers: usize,
    pub gcn_layers: usize,
    pub pop_layers: usize,
    pub gcn_activation: Activation,
    pub pop_activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Cluster,
            gamma1: 0.04,
            gamma2: 0.01,
            k1: 5,
            k2: 5,
            window: 5,
            batch: 32,
            lr: 0.001,
            epochs: 200,
            seed: 0,
            ablations: Ablations::default(),
            aux_sign: AuxSign::Minus,
            embed_size: 128,
            hyper_layers: 2,
            gcn_layers: 2,
            pop_layers: 1,
            gcn_activation: Activation::Relu,
            pop_activation: Activation::Sigmoid,
        }
    }
}

impl TrainConfig {
    /// Weight of the auxiliary loss for the active variant.
    pub fn gamma(&self) -> f64 {
        match self.variant {
            Variant::Cluster => self.gamma1,
            Variant::Edge => self.gamma2,
        }
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "nyc" => {
                (self.k1, self.k2, self.gamma1, self.gamma2) = (5, 5, 0.04, 0.01);
            }
            "chi" => {
                (self.k1, self.k2, self.gamma1, self.gamma2) = (10, 10, 0.2, 0.01);
            }
            "custom" => {}
            other => return Err(Error::Config(format!("unknown preset {other:?}; expected nyc, chi or custom"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.k1", self.k1),
            ("train.k2", self.k2),
            ("train.window", self.window),
            ("train.batch", self.batch),
            ("train.embed_size", self.embed_size),
            ("train.gcn_layers", self.gcn_layers),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{field}: must be at least 1")));
            }
        }
        if !(self.gamma1 >= 0.0) || !(self.gamma2 >= 0.0) {
            return Err(Error::Config("train.gamma1/gamma2: must be nonnegative".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("train.lr: must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// A seed for a named stream derived from the root seed.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub const STREAMS: [&str; 4] = ["clustering", "init", "negative_sampling", "synth"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub regions: PathBuf,
    pub attributes: PathBuf,
    pub vocab: PathBuf,
    pub trips: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    pub output_dir: PathBuf,
    /// First frame start; defaults to the earliest trip rounded down to `tau`.
    #[serde(default)]
    pub start: Option<String>,
    /// Frame count; defaults to covering the latest trip.
    #[serde(default)]
    pub frames: Option<usize>,
    #[serde(default = "default_tau")]
    pub tau: i64,
    #[serde(default)]
    pub tz_offset_hours: i64,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_tau() -> i64 {
    3600
}

impl RunConfig {
    /// Parses, resolves relative paths against the file's directory, applies the preset
    /// and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        if let Some(p) = cfg.preset.clone() {
            cfg.train.apply_preset(&p)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.data.regions,
            &mut self.data.attributes,
            &mut self.data.vocab,
            &mut self.data.trips,
            &mut self.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0 {
            return Err(Error::Config("tau: must be positive".into()));
        }
        if !(-12..=14).contains(&self.tz_offset_hours) {
            return Err(Error::Config("tz_offset_hours: must be within -12..=14".into()));
        }
        if let Some(s) = &self.start {
            if crate::geodata::parse_timestamp(s).is_none() {
                return Err(Error::Config(format!("start: cannot parse {s:?}")));
            }
        }
        if self.frames == Some(0) {
            return Err(Error::Config("frames: must be positive".into()));
        }
        self.train.validate()
    }
}
