//! Experiment configuration.
//!
//! Loaded from TOML. Every section and key has a default, so an empty file
//! is the stock desk-scale configuration; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::adcore::{AdamWConfig, LrSchedule};
use crate::error::{DecodeError, Result};
use crate::scenegen::{DomainSpec, SceneDims};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Master seed; every stochastic step derives its stream from it.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    #[serde(deserialize_with = "pretrain_section")]
    pub pretrain: TrainConfig,
    #[serde(deserialize_with = "expansion_section")]
    pub expansion: TrainConfig,
    pub baseline: BaselineConfig,
    pub ablation: AblationConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            expansion: TrainConfig::expansion_default(),
            baseline: BaselineConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dims: SceneDims,
    pub domains: Vec<DomainSpec>,
    /// Domains mixed into the pretraining corpus, by name.
    pub pretrain_domains: Vec<String>,
    pub mix_weights: Vec<f64>,
    pub mix_count: usize,
    /// Per-domain training scenes.
    pub train_count: usize,
    /// Per-domain held-out scenes.
    pub val_count: usize,
    /// Expansion order, by domain name. Phase `m` trains on `phases[m-1]`.
    pub phases: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dims: SceneDims {
                t_f: 30,
                ..SceneDims::default()
            },
            domains: DomainSpec::stock(),
            pretrain_domains: vec!["arc".into(), "straight".into(), "turn".into()],
            mix_weights: vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            mix_count: 3000,
            train_count: 1500,
            val_count: 500,
            phases: vec!["arc".into(), "straight".into(), "turn".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_h: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    /// Number of modes / anchors.
    pub modes: usize,
    pub d_q: usize,
    pub d_b: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    /// Bound on the raw log-scale of each coupling layer.
    pub flow_scale_clamp: f64,
    pub trunk_hidden: Vec<usize>,
    pub chunk_decoder: usize,
    pub chunk_flow: usize,
    /// Metres per unit of decoder offset output.
    pub offset_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_h: 64,
            encoder_hidden: 64,
            decoder_hidden: 64,
            modes: 6,
            d_q: 32,
            d_b: 32,
            flow_layers: 8,
            flow_hidden: 64,
            flow_scale_clamp: 5.0,
            trunk_hidden: vec![128, 128],
            chunk_decoder: 512,
            chunk_flow: 256,
            offset_scale: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvidenceMode {
    /// `exp(clamp(log_prob / d_h, lo, hi))`
    PerDimension,
    /// `exp(clamp(log_prob, lo, hi))`
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvidenceConfig {
    pub mode: EvidenceMode,
    pub lo: f64,
    pub hi: f64,
}

impl Default for EvidenceConfig {
    fn default() -> Self {
        EvidenceConfig {
            mode: EvidenceMode::PerDimension,
            lo: -10.0,
            hi: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Output-preservation regularizer weight.
    pub lambda: f64,
    /// Weight of the flow negative log-likelihood.
    pub beta_domain: f64,
    /// Prior evidence of the generalized model.
    pub e0: f64,
    pub evidence: EvidenceConfig,
    /// Weight of the winner-mode L2 term relative to the classification term.
    pub regression_weight: f64,
    /// Endpoint suppression radius for component merging, metres.
    pub nms_radius: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 200.0,
            beta_domain: 1.0,
            e0: 10.0,
            evidence: EvidenceConfig::default(),
            regression_weight: 0.05,
            nms_radius: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at the base rate before halving starts.
    pub warm_epochs: usize,
    pub halve_every: usize,
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            lr: 3e-3,
            warm_epochs: 20,
            halve_every: 2,
            weight_decay: 1e-2,
        }
    }

    pub fn expansion_default() -> Self {
        TrainConfig {
            batch_size: 32,
            ..Self::pretrain_default()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            warm_epochs: self.warm_epochs,
            halve_every: self.halve_every,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain_default()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainPatch {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    warm_epochs: Option<usize>,
    halve_every: Option<usize>,
    weight_decay: Option<f64>,
}

impl TrainPatch {
    fn apply(self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            lr: self.lr.unwrap_or(base.lr),
            warm_epochs: self.warm_epochs.unwrap_or(base.warm_epochs),
            halve_every: self.halve_every.unwrap_or(base.halve_every),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
        }
    }
}

fn pretrain_section<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    Ok(TrainPatch::deserialize(d)?.apply(TrainConfig::pretrain_default()))
}

fn expansion_section<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    Ok(TrainPatch::deserialize(d)?.apply(TrainConfig::expansion_default()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub replay_buffer: usize,
    pub replay_ratio: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            replay_buffer: 1000,
            replay_ratio: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub e0_grid: Vec<f64>,
    /// Checkpoint phase the sweep evaluates.
    pub phase: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            e0_grid: vec![0.1, 1.0, 10.0, 100.0],
            phase: 1,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| DecodeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSpec> {
        self.data
            .domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| DecodeError::Config(format!("unknown domain `{name}`")))
    }

    pub fn phase_domain(&self, phase: usize) -> Result<&DomainSpec> {
        if phase == 0 || phase > self.data.phases.len() {
            return Err(DecodeError::Phase(format!(
                "phase {phase} outside the plan (1..={})",
                self.data.phases.len()
            )));
        }
        self.domain(&self.data.phases[phase - 1])
    }

    /// Configured domains that no phase trains on.
    pub fn holdout_domains(&self) -> Vec<&DomainSpec> {
        self.data
            .domains
            .iter()
            .filter(|d| !self.data.phases.contains(&d.name))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(DecodeError::Config(format!("{field}: {why}")));
        self.data.dims.validate().map_err(|e| DecodeError::Config(format!("data.dims: {e}")))?;
        for (i, d) in self.data.domains.iter().enumerate() {
            d.validate()
                .map_err(|e| DecodeError::Config(format!("data.domains[{i}] ({}): {e}", d.name)))?;
        }
        let mut tags: Vec<u8> = self.data.domains.iter().map(|d| d.tag).collect();
        tags.sort_unstable();
        tags.dedup();
        if tags.len() != self.data.domains.len() {
            return bad("data.domains", "domain tags must be unique".into());
        }
        for n in self.data.pretrain_domains.iter().chain(&self.data.phases) {
            self.domain(n)?;
        }
        if self.data.mix_weights.len() != self.data.pretrain_domains.len() {
            return bad(
                "data.mix_weights",
                format!(
                    "{} weights for {} pretraining domains",
                    self.data.mix_weights.len(),
                    self.data.pretrain_domains.len()
                ),
            );
        }
        if self.data.mix_count == 0 || self.data.train_count == 0 || self.data.val_count == 0 {
            return bad("data", "mix_count, train_count and val_count must be positive".into());
        }
        let m = &self.model;
        if m.d_h == 0 || m.d_h % 2 != 0 {
            return bad("model.d_h", format!("must be positive and even, got {}", m.d_h));
        }
        if m.flow_layers < 2 {
            return bad("model.flow_layers", format!("need at least 2, got {}", m.flow_layers));
        }
        if m.modes == 0 || m.d_q == 0 || m.d_b == 0 || m.chunk_decoder == 0 || m.chunk_flow == 0 {
            return bad("model", "modes, d_q, d_b and chunk sizes must be positive".into());
        }
        if m.trunk_hidden.is_empty() {
            return bad("model.trunk_hidden", "need at least one hidden layer".into());
        }
        let l = &self.loss;
        if !(l.e0 > 0.0) {
            return bad("loss.e0", format!("must be positive, got {}", l.e0));
        }
        if !(l.nms_radius > 0.0) {
            return bad("loss.nms_radius", format!("must be positive, got {}", l.nms_radius));
        }
        if !(l.evidence.lo < l.evidence.hi) {
            return bad("loss.evidence", "lo must be below hi".into());
        }
        if l.lambda < 0.0 || l.beta_domain < 0.0 || l.regression_weight < 0.0 {
            return bad("loss", "weights must be non-negative".into());
        }
        for (name, t) in [("pretrain", &self.pretrain), ("expansion", &self.expansion)] {
            if t.batch_size == 0 || !(t.lr > 0.0) {
                return bad(name, "batch_size and lr must be positive".into());
            }
        }
        if self.baseline.replay_buffer == 0 {
            return bad("baseline.replay_buffer", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.baseline.replay_ratio) {
            return bad("baseline.replay_ratio", "must lie in [0, 1)".into());
        }
        if self.ablation.e0_grid.iter().any(|&e| !(e > 0.0)) {
            return bad("ablation.e0_grid", "values must be positive".into());
        }
        Ok(())
    }
}
