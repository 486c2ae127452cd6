//! End-to-end estimate: preprocess, split, train, extract.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FlozError, Result};
use crate::evidence::{attach_validation_check, estimate_evidence, EvidenceEstimate};
use crate::flow::{FlowConfig, FlowModel};
use crate::losses::LossSchedule;
use crate::preprocess::{preprocess, split_train_validation, PreprocessOptions, TransformLedger};
use crate::sampleio::{PriorMetadata, SampleSet};
use crate::trainer::{train, StopReason, TrainerConfig, TrainingHistory};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowPreset {
    #[default]
    Default,
    HighDim,
}

/// Flow sizes; unset fields come from the preset for the data dimension.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSettings {
    pub preset: FlowPreset,
    pub n_blocks: Option<usize>,
    pub hidden_layers_per_block: Option<usize>,
    pub hidden_width: Option<usize>,
}

impl FlowSettings {
    pub fn resolve(&self, d: usize, seed: u64) -> FlowConfig {
        let base = match self.preset {
            FlowPreset::Default => FlowConfig::default_for(d),
            FlowPreset::HighDim => FlowConfig::high_dim(d),
        };
        FlowConfig {
            n_blocks: self.n_blocks.unwrap_or(base.n_blocks),
            hidden_layers_per_block: self
                .hidden_layers_per_block
                .unwrap_or(base.hidden_layers_per_block),
            hidden_width: self.hidden_width.unwrap_or(base.hidden_width),
            seed,
        }
    }
}

/// Everything that determines a run. `seed` feeds every random stream;
/// the trainer's own `seed` field is overwritten from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub flow: FlowSettings,
    pub trainer: TrainerConfig,
    pub schedule: LossSchedule,
    pub preprocess: PreprocessOptions,
    /// Fraction of samples used for training; the rest validate.
    pub train_fraction: f64,
    /// Latent ball radius; `√d` when unset.
    pub delta: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            flow: FlowSettings::default(),
            trainer: TrainerConfig::default(),
            schedule: LossSchedule::default(),
            preprocess: PreprocessOptions::default(),
            train_fraction: 0.8,
            delta: None,
        }
    }
}

/// Independent seed for stream `k` of a run (splitmix64 finalizer).
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_REFLECT: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_FLOW: u64 = 2;
const STREAM_TRAIN: u64 = 3;

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(s).map_err(|e| FlozError::Schema(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.schedule.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(FlozError::Configuration(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(FlozError::Configuration(format!("delta must be positive, got {d}")));
            }
        }
        let sizes = [
            self.flow.n_blocks,
            self.flow.hidden_layers_per_block,
            self.flow.hidden_width,
        ];
        if sizes.contains(&Some(0)) {
            return Err(FlozError::Configuration("flow sizes must be at least 1".into()));
        }
        Ok(())
    }

    /// Config with every field fixed for dimension `d`.
    pub fn resolved(&self, d: usize) -> ResolvedConfig {
        let flow = self.flow.resolve(d, derive_seed(self.seed, STREAM_FLOW));
        let mut trainer = self.trainer.clone();
        trainer.seed = derive_seed(self.seed, STREAM_TRAIN);
        ResolvedConfig {
            seed: self.seed,
            flow,
            trainer,
            schedule: self.schedule,
            preprocess: self.preprocess,
            train_fraction: self.train_fraction,
            delta: self.delta.unwrap_or((d as f64).sqrt()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub flow: FlowConfig,
    pub trainer: TrainerConfig,
    pub schedule: LossSchedule,
    pub preprocess: PreprocessOptions,
    pub train_fraction: f64,
    pub delta: f64,
}

impl ResolvedConfig {
    /// SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub estimate: EvidenceEstimate,
    pub ledger: TransformLedger,
    pub history: TrainingHistory,
    pub model: FlowModel,
    pub config: ResolvedConfig,
    pub n_train: usize,
    pub n_validation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub n_train: usize,
    pub n_validation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub log_jacobian_total: f64,
    pub whitening_log_jacobian: f64,
    pub reflection_log_jacobian: f64,
    pub steps: Vec<String>,
    pub n_reflected_edges: usize,
}

/// The result file written by `floz estimate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub log_evidence: f64,
    pub uncertainty: f64,
    pub n_in_ball: usize,
    pub n_total: usize,
    pub delta: f64,
    pub estimator: String,
    pub diagnostics: crate::evidence::Diagnostics,
    pub ledger: LedgerSummary,
    pub training: TrainingSummary,
    pub seed: u64,
    pub config_digest: String,
    pub config: ResolvedConfig,
    pub version: String,
    pub timing: Timing,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
}

impl PipelineOutput {
    pub fn document(&self, seconds: f64) -> ResultDocument {
        ResultDocument {
            log_evidence: self.estimate.log_z,
            uncertainty: self.estimate.uncertainty,
            n_in_ball: self.estimate.n_in_ball,
            n_total: self.estimate.n_total,
            delta: self.estimate.delta,
            estimator: "mean_log_zeta".into(),
            diagnostics: self.estimate.diagnostics.clone(),
            ledger: LedgerSummary {
                log_jacobian_total: self.ledger.log_jacobian_total,
                whitening_log_jacobian: self.ledger.whitening_log_jacobian(),
                reflection_log_jacobian: self.ledger.reflection_log_jacobian(),
                steps: self.ledger.steps.clone(),
                n_reflected_edges: self.ledger.n_reflected_edges,
            },
            training: TrainingSummary {
                epochs: self.history.len(),
                best_epoch: self.history.best_epoch,
                stop_reason: self.history.stop_reason,
                n_train: self.n_train,
                n_validation: self.n_validation,
            },
            seed: self.config.seed,
            config_digest: self.config.digest(),
            config: self.config.clone(),
            version: VERSION.into(),
            timing: Timing { seconds },
        }
    }
}

/// reflect → wrap → center/whiten → split → train → estimate.
pub fn run_pipeline(set: &SampleSet, meta: &PriorMetadata, cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    meta.validate()?;
    if meta.dim != set.dim() {
        return Err(FlozError::Schema(format!(
            "metadata dimension {} does not match sample dimension {}",
            meta.dim,
            set.dim()
        )));
    }
    let d = set.dim();
    let rc = cfg.resolved(d);
    let (work, ledger) = preprocess(set, meta, rc.preprocess, derive_seed(rc.seed, STREAM_REFLECT))?;
    let (train_set, val_set) =
        split_train_validation(&work, rc.train_fraction, derive_seed(rc.seed, STREAM_SPLIT))?;
    let init = FlowModel::new(d, rc.flow)?;
    let (model, history) = train(&init, &train_set, &val_set, &rc.trainer, &rc.schedule)?;
    let mut estimate = estimate_evidence(&model, &train_set, Some(rc.delta))?;
    attach_validation_check(&mut estimate, &model, &val_set)?;
    Ok(PipelineOutput {
        estimate,
        ledger,
        history,
        model,
        n_train: train_set.len(),
        n_validation: val_set.len(),
        config: rc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = RunConfig::default().resolved(2);
        assert_eq!(a.digest(), RunConfig::default().resolved(2).digest());
        assert_eq!(a.digest().len(), 64);
        let mut c = RunConfig::default();
        c.seed = 1;
        assert_ne!(a.digest(), c.resolved(2).digest());
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let err = RunConfig::from_json_str(r#"{"sede": 3}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let ok = RunConfig::from_json_str(r#"{"seed": 3, "trainer": {"max_epochs": 7}}"#).unwrap();
        assert_eq!(ok.trainer.max_epochs, 7);
        assert_eq!(ok.trainer.patience, 200);
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        let s: Vec<u64> = (0..4).map(|k| derive_seed(42, k)).collect();
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
    }

    #[test]
    fn high_dim_preset_resolves() {
        let mut f = FlowSettings {
            preset: FlowPreset::HighDim,
            ..FlowSettings::default()
        };
        assert_eq!(f.resolve(10, 0).n_blocks, 11);
        assert_eq!(f.resolve(50, 0).n_blocks, 20);
        f.n_blocks = Some(3);
        assert_eq!(f.resolve(50, 0).n_blocks, 3);
    }
}
