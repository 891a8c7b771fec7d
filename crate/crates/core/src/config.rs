//! Experiment configuration: one JSON document, overridable field by field
//! with dotted paths such as `trainer.lr=0.001`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ClientProfile, FederationSpec, DEFAULT_VAL_RATIO};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainMode};
use crate::pretrain::PretrainConfig;
use crate::trainer::TrainerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    /// Number of clients K.
    pub clients: usize,
    pub rounds: u32,
    pub seed: u64,
    /// Held-out client; `None` runs every client in turn.
    pub test_client: Option<u32>,
    /// Worker threads for client training; `None` uses every core.
    pub threads: Option<usize>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 4,
            rounds: 100,
            seed: 0,
            test_client: None,
            threads: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_per_client: usize,
    pub val_ratio: f64,
    /// Pool slices of one volume before scoring.
    pub group_by_volume: bool,
    /// Explicit client profiles; the built-in ones are used when absent.
    pub profiles: Option<Vec<ClientProfile>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_per_client: 24,
            val_ratio: DEFAULT_VAL_RATIO,
            group_by_volume: false,
            profiles: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Pretrained checkpoint; generated on demand when absent.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Build adapters into the model. Defaults to whether `mode` needs them.
    pub adapters: Option<bool>,
    pub mode: TrainMode,
    pub pretrained: bool,
    pub federation: FederationConfig,
    pub trainer: TrainerConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub paths: PathConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adapters: None,
            mode: TrainMode::AdapterDecoder,
            pretrained: true,
            federation: FederationConfig::default(),
            trainer: TrainerConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_adapters(&self) -> bool {
        self.adapters.unwrap_or(self.mode == TrainMode::AdapterDecoder)
    }

    /// Sets one field by dotted path. The value is parsed as JSON when it
    /// can be and taken as a string otherwise.
    pub fn set(&mut self, path: &str, value: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut doc;
        for key in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown config field {path:?}")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_owned()));
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{path}={value}: {e}")))?;
        if path == "model.variant" {
            // the variant names a size, so it carries its dimensions along
            let sized = ModelConfig::for_variant(self.model.variant, self.model.num_classes);
            self.model.embed_dim = sized.embed_dim;
            self.model.depth = sized.depth;
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Cross-field checks, run before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.mode == TrainMode::AdapterDecoder && !self.with_adapters() {
            return bad("mode \"adapter\" needs a model built with adapters".into());
        }
        let f = &self.federation;
        if f.clients < 2 {
            return bad(format!("leave-one-client-out needs at least 2 clients, got {}", f.clients));
        }
        if f.rounds == 0 {
            return bad("federation.rounds must be at least 1".into());
        }
        if let Some(t) = f.test_client {
            if t as usize >= f.clients {
                return bad(format!("test client {t} does not exist among {} clients", f.clients));
            }
        }
        if f.threads == Some(0) {
            return bad("federation.threads must be positive".into());
        }
        if self.data.n_per_client < 10 {
            return bad(format!("data.n_per_client must be at least 10, got {}", self.data.n_per_client));
        }
        if !(self.data.val_ratio > 0.0 && self.data.val_ratio < 1.0) {
            return bad(format!("data.val_ratio {} outside (0, 1)", self.data.val_ratio));
        }
        if let Some(p) = &self.data.profiles {
            if p.len() != f.clients {
                return bad(format!("{} profiles for {} clients", p.len(), f.clients));
            }
        }
        if self.pretrained && (self.pretrain.corpus_size == 0 || self.pretrain.batch_size == 0) {
            return bad("pretraining needs a non-empty corpus and a positive batch size".into());
        }
        self.federation_spec().validate()
    }

    pub fn federation_spec(&self) -> FederationSpec {
        let mut spec = FederationSpec::synthetic(
            self.federation.clients,
            self.model.input_size,
            self.model.num_classes,
            self.federation.seed,
        );
        if let Some(p) = &self.data.profiles {
            spec.clients = p.clone();
        }
        spec
    }

    /// Row label in the style of the comparison tables.
    pub fn label(&self, federated: bool) -> String {
        let base = match (federated, self.mode) {
            (true, TrainMode::FullFineTune) => "FedSAM",
            (true, TrainMode::AdapterDecoder) => "FedMSA",
            (false, TrainMode::FullFineTune) => "SAM",
            (false, TrainMode::AdapterDecoder) => "MSA",
        };
        if self.pretrained {
            base.to_owned()
        } else {
            format!("{base}-PT")
        }
    }
}
