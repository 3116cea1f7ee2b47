//! TOML run configuration.
//!
//! Every key has a default (listed on the field), so a minimal config can
//! be just a corpus path. Unknown keys are rejected with the offending key
//! named in the error. The effective config — file values plus CLI
//! overrides — is echoed verbatim into report headers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dlqat::adapter::AblationSetting;
use dlqat::error::{Error, Result};
use dlqat::model::TinyLmConfig;
use dlqat::quant::{Granularity, QuantSpec};
use dlqat::trainer::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub quant: QuantSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub out: OutSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// default 256 (byte-level)
    pub vocab_size: usize,
    /// default 64
    pub d_model: usize,
    /// default 2
    pub n_layers: usize,
    /// default 4
    pub n_heads: usize,
    /// default 128
    pub ffn_hidden: usize,
    /// default 48
    pub context_length: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 128,
            context_length: 48,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GranularityKey {
    PerChannel,
    Group,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    /// default true
    pub enabled: bool,
    /// default 4
    pub bits: u8,
    /// "per-channel" or "group"; default "group"
    pub granularity: GranularityKey,
    /// default 16; used when granularity = "group"
    pub group_size: usize,
    /// default unset (activations and K/V stay in float)
    pub activation_bits: Option<u8>,
}

impl Default for QuantSection {
    fn default() -> Self {
        QuantSection {
            enabled: true,
            bits: 4,
            granularity: GranularityKey::Group,
            group_size: 16,
            activation_bits: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// ablation setting 1..=6; default 5 (the full method)
    pub setting: u8,
    /// default 2000
    pub iters: usize,
    /// default 1000
    pub warmup_sb_iters: usize,
    /// default 2e-4, constant
    pub lr: f64,
    /// default 16
    pub batch_size: usize,
    /// default 0
    pub seed: u64,
    /// LoRA rank; default 16
    pub rank: usize,
    /// LoRA scaling; default 2.0
    pub alpha: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            setting: 5,
            iters: 2000,
            warmup_sb_iters: 1000,
            lr: 2e-4,
            batch_size: 16,
            seed: 0,
            rank: 16,
            alpha: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// raw bytes file; default "assets/tiny-corpus.txt"
    pub corpus: PathBuf,
    /// train fraction; default 0.9
    pub split: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            corpus: PathBuf::from("assets/tiny-corpus.txt"),
            split: 0.9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutSection {
    /// JSONL report path; default "dlqat-report.jsonl"
    pub report: PathBuf,
    /// pack output path; default unset (no pack written)
    pub pack: Option<PathBuf>,
}

impl Default for OutSection {
    fn default() -> Self {
        OutSection {
            report: PathBuf::from("dlqat-report.jsonl"),
            pack: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Resolve the file sections into typed model and trainer configs.
    pub fn build(&self) -> Result<(TinyLmConfig, TrainConfig)> {
        let quant = if self.quant.enabled {
            let granularity = match self.quant.granularity {
                GranularityKey::PerChannel => Granularity::PerChannel,
                GranularityKey::Group => Granularity::Group(self.quant.group_size),
            };
            Some(QuantSpec::new(self.quant.bits, granularity)?)
        } else {
            None
        };
        let model = TinyLmConfig {
            vocab_size: self.model.vocab_size,
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            ffn_hidden: self.model.ffn_hidden,
            context_length: self.model.context_length,
            quant,
            activation_bits: self.quant.activation_bits,
        };
        model.validate()?;
        let train = TrainConfig {
            batch_size: self.train.batch_size,
            learning_rate: self.train.lr,
            total_iters: self.train.iters,
            warmup_sb_iters: self.train.warmup_sb_iters,
            lora_rank: self.train.rank,
            lora_alpha: self.train.alpha,
            seed: self.train.seed,
            setting: AblationSetting::from_index(self.train.setting)?,
            quant,
            activation_bits: self.quant.activation_bits,
        };
        train.validate()?;
        if !(0.0..=1.0).contains(&self.data.split) {
            return Err(Error::Config(format!(
                "[data].split must be in [0, 1], got {}",
                self.data.split
            )));
        }
        Ok((model, train))
    }

    /// Report-header echo: the effective file config plus the resolved
    /// trainer/model values.
    pub fn echo_with_report(&self, resolved: &serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "file": self,
            "resolved": resolved,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_round_trip() {
        let f = write_config("[data]\ncorpus = \"x.bin\"\n");
        let cfg = RunConfig::load(f.path()).unwrap();
        assert_eq!(cfg.train.iters, 2000);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.quant.bits, 4);
        assert_eq!(cfg.data.corpus, PathBuf::from("x.bin"));
    }

    #[test]
    fn unknown_key_is_named() {
        let f = write_config("[train]\nranks = 3\n");
        let err = RunConfig::load(f.path()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("ranks"), "error should name the key: {msg}");
    }

    #[test]
    fn invalid_setting_rejected() {
        let f = write_config("[train]\nsetting = 9\n");
        let cfg = RunConfig::load(f.path()).unwrap();
        assert!(cfg.build().is_err());
    }
}
