//! Layered run configuration: embedded defaults deep-merged with TOML
//! overrides. The resolved config serializes deterministically and is
//! identified by the SHA-256 of its JSON form.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{CarrierConfig, ScenarioConfig};
use crate::error::{Error, Result};
use crate::pipeline::{CorruptionPolicy, TokenLayout};

pub const DEFAULT_TOML: &str = include_str!("../config/default.toml");

/// Named override sets applied on top of the defaults.
pub const PRESETS: &[(&str, &str)] = &[("desk", ""), ("paper", PAPER_PRESET), ("toy", TOY_PRESET)];

const PAPER_PRESET: &str = r#"
output_dir = "runs/paper"
[dataset]
n_train = 20000
[dataset.carrier_low]
n_subcarriers = 32
n_antennas = 32
[dataset.carrier_high]
n_subcarriers = 32
n_antennas = 64
[pipeline]
patch_len = 16
[model]
d = 64
dec_dim = 64
[prior]
epochs = 60
[training]
batch_size = 1024
stage1_epochs = 120
stage2_epochs = 100
"#;

const TOY_PRESET: &str = r#"
output_dir = "runs/toy"
[dataset]
n_train = 256
n_val = 64
n_test = 400
codebook_sizes = [8, 32]
[model]
d = 16
depth = 2
heads = 2
dec_depth = 1
dec_dim = 16
[prior]
slot_dim = 16
target_dim = 16
structure_hidden = 32
epochs = 10
batch_size = 32
[training]
batch_size = 32
stage1_epochs = 30
stage2_epochs = 20
[downstream]
training_ratios = [0.1, 1.0]
beam_ratios = [0.1, 1.0]
head_epochs = 40
[downstream.chest]
n_train = 96
n_eval = 64
epochs = 20
"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub dataset: DatasetConfig,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub prior: PriorConfig,
    pub training: TrainingConfig,
    pub downstream: DownstreamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Path slots N_p.
    pub max_paths: usize,
    pub codebook_sizes: Vec<usize>,
    pub carrier_low: CarrierConfig,
    pub carrier_high: CarrierConfig,
    pub seen_scenarios: Vec<ScenarioConfig>,
    pub unseen_scenarios: Vec<ScenarioConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub mu: f64,
    pub patch_len: usize,
    pub mask_ratio: f64,
    pub corruption: CorruptionPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dec_depth: usize,
    pub dec_dim: usize,
    pub decoder_sees_spa: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_permute: f64,
    pub p_drop: f64,
    pub p_mask_flip: f64,
    pub p_jitter: f64,
    pub jitter_delay: f64,
    pub jitter_power: f64,
    pub jitter_angle: f64,
    pub p_global_dropout: f64,
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            p_permute: 0.0,
            p_drop: 0.0,
            p_mask_flip: 0.0,
            p_jitter: 0.0,
            jitter_delay: 0.0,
            jitter_power: 0.0,
            jitter_angle: 0.0,
            p_global_dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub slot_dim: usize,
    pub target_dim: usize,
    pub structure_hidden: usize,
    pub threshold_init: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kappa_par: f64,
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageWeights {
    pub mae: f64,
    pub sa: f64,
    pub pa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub kappa_pa: f64,
    pub stage1_weights: StageWeights,
    pub stage2_weights: StageWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChestConfig {
    pub pilot_antenna_stride: usize,
    pub pilot_freq_stride: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub predictor_depth: usize,
    pub train_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamConfig {
    pub seed: u64,
    pub head_train_fraction: f64,
    pub training_ratios: Vec<f64>,
    pub eval_snrs_db: Vec<f64>,
    pub include_noiseless: bool,
    pub head_epochs: usize,
    pub head_batch_size: usize,
    pub head_lr: f64,
    pub head_hidden: usize,
    pub beam_ratios: Vec<f64>,
    pub chest: ChestConfig,
}

/// Recursively merges `over` into `base`; tables merge, everything else
/// (including arrays) is replaced.
pub fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_toml(text: &str, origin: &str) -> Result<toml::Value> {
    text.parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| Error::Config(format!("{origin}: {e}")))
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self::from_layers(&[]).expect("embedded defaults are valid")
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
        Self::from_layers(&[(text, name)])
    }

    /// Defaults followed by each `(toml text, origin label)` layer in order.
    pub fn from_layers(layers: &[(&str, &str)]) -> Result<Self> {
        let mut value = parse_toml(DEFAULT_TOML, "defaults")?;
        for (text, origin) in layers {
            merge_toml(&mut value, parse_toml(text, origin)?);
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads an override file. A top-level `preset = "<name>"` key selects
    /// a named preset layer beneath the file's own values.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        let mut table = parse_toml(&text, &origin)?;
        let preset = match &mut table {
            toml::Value::Table(t) => t.remove("preset"),
            _ => None,
        };
        let mut value = parse_toml(DEFAULT_TOML, "defaults")?;
        if let Some(p) = preset {
            let name = p
                .as_str()
                .ok_or_else(|| Error::Config(format!("{origin}: preset must be a string")))?;
            let (_, layer) = PRESETS
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Config(format!("{origin}: unknown preset {name:?}")))?;
            merge_toml(&mut value, parse_toml(layer, name)?);
        }
        merge_toml(&mut value, table);
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Identity of the run's semantics; the output location is excluded so
    /// artifacts can be moved between roots.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir.clear();
        hash_json(&c)
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(
            self.dataset.carrier_low.n_antennas,
            self.dataset.carrier_low.n_subcarriers,
            self.pipeline.patch_len,
        )
        .expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        d.carrier_low.validate()?;
        d.carrier_high.validate()?;
        for (name, c) in [("low", &d.carrier_low), ("high", &d.carrier_high)] {
            if !c.n_antennas.is_power_of_two() || !c.n_subcarriers.is_power_of_two() {
                return Err(Error::Config(format!("{name}-band grid dims must be powers of two")));
            }
        }
        TokenLayout::new(d.carrier_low.n_antennas, d.carrier_low.n_subcarriers, self.pipeline.patch_len)?;
        if d.seen_scenarios.is_empty() || d.unseen_scenarios.is_empty() {
            return Err(Error::Config("need at least one seen and one unseen scenario".into()));
        }
        for s in d.seen_scenarios.iter().chain(&d.unseen_scenarios) {
            s.validate(d.max_paths)?;
        }
        for s in &d.seen_scenarios {
            if d.unseen_scenarios.iter().any(|u| u.id == s.id) {
                return Err(Error::Config(format!("scenario id {} is both seen and unseen", s.id)));
            }
        }
        for &b in &d.codebook_sizes {
            if b == 0 || b > d.carrier_high.n_antennas {
                return Err(Error::Config(format!(
                    "codebook size {b} exceeds high-band antenna count {}",
                    d.carrier_high.n_antennas
                )));
            }
        }
        if d.n_train == 0 || d.n_test < 2 {
            return Err(Error::Config("dataset splits too small".into()));
        }
        if !(self.pipeline.mu > 0.0) {
            return Err(Error::Config("mu must be positive".into()));
        }
        let r = self.pipeline.mask_ratio;
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!("mask ratio {r} outside (0,1)")));
        }
        let k = self.layout().num_tokens();
        let m = (r * k as f64).round() as usize;
        if m == 0 || m == k {
            return Err(Error::Config(format!("mask count {m} degenerate for K={k}")));
        }
        let c = &self.pipeline.corruption;
        if !(0.0..=1.0).contains(&c.fraction) || c.snr_min_db > c.snr_max_db {
            return Err(Error::Config("invalid corruption policy".into()));
        }
        let m = &self.model;
        if m.d == 0 || m.heads == 0 || m.d % m.heads != 0 || m.dec_dim == 0 || m.dec_dim % m.heads != 0 {
            return Err(Error::Config(format!(
                "d={} and dec_dim={} must be divisible by heads={}",
                m.d, m.dec_dim, m.heads
            )));
        }
        let t = &self.training;
        for w in [t.stage1_weights, t.stage2_weights] {
            if [w.mae, w.sa, w.pa].iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config("loss weights must be nonnegative".into()));
            }
        }
        if !(t.kappa_pa > 0.0 && self.prior.kappa_par > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if t.alpha < 0.0 || t.beta < 0.0 || t.batch_size == 0 || self.prior.batch_size == 0 {
            return Err(Error::Config("invalid training hyperparameters".into()));
        }
        let ds = &self.downstream;
        if !(ds.head_train_fraction > 0.0 && ds.head_train_fraction < 1.0) {
            return Err(Error::Config("head_train_fraction must be in (0,1)".into()));
        }
        for &q in ds.training_ratios.iter().chain(&ds.beam_ratios) {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Config(format!("training ratio {q} outside (0,1]")));
            }
        }
        let ch = &ds.chest;
        if ch.pilot_antenna_stride == 0 || ch.pilot_freq_stride == 0 {
            return Err(Error::Config("pilot strides must be positive".into()));
        }
        Ok(())
    }
}

/// SHA-256 of the JSON serialization, hex encoded.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let c = RunConfig::defaults();
        assert_eq!(c.layout().num_tokens(), 32);
        assert_eq!(c.model.d, 32);
        assert_eq!(c.dataset.n_train, 2000);
        assert_eq!((c.prior.epochs, c.training.stage1_epochs, c.training.stage2_epochs), (30, 30, 20));
    }

    #[test]
    fn paper_preset_values() {
        let c = RunConfig::preset("paper").unwrap();
        assert_eq!(c.layout().num_tokens(), 64);
        assert_eq!(c.layout().token_dim(), 32);
        assert_eq!(c.model.d, 64);
        assert_eq!(c.training.batch_size, 1024);
        assert_eq!((c.prior.epochs, c.training.stage1_epochs, c.training.stage2_epochs), (60, 120, 100));
        assert_eq!(c.pipeline.mask_ratio, 0.5);
        assert_eq!(c.prior.kappa_par, 0.07);
        let w1 = c.training.stage1_weights;
        let w2 = c.training.stage2_weights;
        assert_eq!((w1.mae, w1.sa, w1.pa), (1.0, 0.2, 0.0));
        assert_eq!((w2.mae, w2.sa, w2.pa), (1.0, 0.05, 0.1));
        assert_eq!((c.training.alpha, c.training.beta, c.training.kappa_pa), (0.7, 0.3, 0.5));
        assert_eq!(c.pipeline.corruption.fraction, 0.6);
    }

    #[test]
    fn overrides_merge_deeply() {
        let c = RunConfig::from_layers(&[("[model]\nd = 16\nheads = 2\n", "test")]).unwrap();
        assert_eq!(c.model.d, 16);
        assert_eq!(c.model.depth, 4);
        assert_ne!(c.hash(), RunConfig::defaults().hash());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in ["[pipeline]\npatch_len = 3\n", "[model]\nheads = 5\n", "[pipeline]\nmask_ratio = 1.0\n", "bogus = 1\n"] {
            assert!(matches!(RunConfig::from_layers(&[(bad, "t")]), Err(Error::Config(_))), "{bad}");
        }
        let big = "[dataset]\ncodebook_sizes = [64]\n";
        assert!(matches!(RunConfig::from_layers(&[(big, "t")]), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_output_dir() {
        let mut c = RunConfig::defaults();
        let h = c.hash();
        c.output_dir = "elsewhere".into();
        assert_eq!(c.hash(), h);
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let c = RunConfig::preset("toy").unwrap();
        let back = RunConfig::from_layers(&[(&c.to_toml(), "echo")]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }
}
