use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::queue::OverflowPolicy;
use super::PipelineError;
use crate::detector::{CostModel, Detector, Endpoint, ExternalConfig, ExternalDetector, NoiseModel, OracleDetector};
use crate::ingest::AnnotationTable;
use crate::tracker::TrackerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// Ground-truth replay through [`NoiseModel`].
    Oracle,
    /// A model process or socket speaking the line protocol.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalSettings {
    /// Program and arguments to spawn. Ignored when `address` is set.
    pub command: Vec<String>,
    /// `host:port` of an already running backend.
    pub address: Option<String>,
    pub deadline_ms: u64,
    pub handshake_timeout_ms: u64,
    /// Where frames are spooled for the backend; a temp dir when unset.
    pub spool_dir: Option<PathBuf>,
}

impl Default for ExternalSettings {
    fn default() -> Self {
        Self {
            command: Vec::new(),
            address: None,
            deadline_ms: 5000,
            handshake_timeout_ms: 10_000,
            spool_dir: None,
        }
    }
}

/// Every tunable of a run. Serialized verbatim into reports so results can
/// be reproduced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Longest edge of the working resolution.
    pub input_size: u32,
    pub batch_size: usize,
    /// Run the detector on every k-th frame and propagate in between.
    pub skip_interval: u32,
    pub conf_threshold: f64,
    pub assoc_iou_threshold: f64,
    pub track_patience: u32,
    pub flow_radius: u32,
    pub frame_queue_capacity: usize,
    pub result_queue_capacity: usize,
    pub frame_queue_policy: OverflowPolicy,
    /// Maximum wait before a partial batch is sent.
    pub batch_flush_ms: u64,
    pub seed: u64,
    /// Crops per track summary.
    pub summary_len: usize,
    /// Recent frames kept for crop generation.
    pub frame_store_capacity: usize,
    pub detector: DetectorKind,
    pub noise: NoiseModel,
    /// Simulated inference latency for the oracle; none by default.
    pub cost_model: Option<CostModel>,
    pub external: ExternalSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input_size: 1080,
            batch_size: 4,
            skip_interval: 1,
            conf_threshold: 0.25,
            assoc_iou_threshold: 0.3,
            track_patience: 5,
            flow_radius: 16,
            frame_queue_capacity: 32,
            result_queue_capacity: 32,
            frame_queue_policy: OverflowPolicy::DropOldest,
            batch_flush_ms: 200,
            seed: 0,
            summary_len: 8,
            frame_store_capacity: 600,
            detector: DetectorKind::Oracle,
            noise: NoiseModel::exact(),
            cost_model: None,
            external: ExternalSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.input_size == 0 {
            return bad("input_size must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.skip_interval == 0 {
            return bad("skip_interval must be positive".into());
        }
        if self.frame_queue_capacity == 0 || self.result_queue_capacity == 0 {
            return bad("queue capacities must be positive".into());
        }
        if self.batch_size > self.frame_queue_capacity {
            return bad(format!(
                "batch_size {} exceeds frame_queue_capacity {}",
                self.batch_size, self.frame_queue_capacity
            ));
        }
        for (name, v) in [("conf_threshold", self.conf_threshold), ("assoc_iou_threshold", self.assoc_iou_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0,1], got {v}"));
            }
        }
        if self.frame_store_capacity == 0 {
            return bad("frame_store_capacity must be positive".into());
        }
        self.noise.validate().map_err(PipelineError::InvalidConfig)?;
        if self.detector == DetectorKind::External && self.external.command.is_empty() && self.external.address.is_none() {
            return bad("external detector needs a command or an address".into());
        }
        Ok(())
    }

    pub fn tracker(&self) -> TrackerConfig {
        TrackerConfig {
            iou_threshold: self.assoc_iou_threshold,
            patience: self.track_patience,
            flow_radius: self.flow_radius,
        }
    }

    pub fn flush_after(&self) -> Duration {
        Duration::from_millis(self.batch_flush_ms)
    }

    /// Noise model with the run seed applied.
    pub fn seeded_noise(&self) -> NoiseModel {
        NoiseModel {
            seed: self.seed,
            ..self.noise
        }
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Construct the configured backend. The oracle needs the source's truth.
pub fn build_detector(cfg: &PipelineConfig, truth: Option<Arc<AnnotationTable>>) -> Result<Box<dyn Detector>, PipelineError> {
    match cfg.detector {
        DetectorKind::Oracle => {
            let truth = truth.ok_or_else(|| {
                PipelineError::InvalidConfig("the oracle detector needs a source with annotations".into())
            })?;
            Ok(Box::new(OracleDetector::new(truth, cfg.seeded_noise()).with_cost(cfg.cost_model)))
        }
        DetectorKind::External => {
            let x = &cfg.external;
            let endpoint = match &x.address {
                Some(a) => Endpoint::Tcp(a.clone()),
                None => Endpoint::Command(x.command.clone()),
            };
            let spool_dir = x
                .spool_dir
                .clone()
                .unwrap_or_else(|| std::env::temp_dir().join(format!("reefpipe-spool-{}", std::process::id())));
            let det = ExternalDetector::connect(&ExternalConfig {
                endpoint,
                deadline: Duration::from_millis(x.deadline_ms),
                handshake_timeout: Duration::from_millis(x.handshake_timeout_ms),
                spool_dir,
            })?;
            Ok(Box::new(det))
        }
    }
}
