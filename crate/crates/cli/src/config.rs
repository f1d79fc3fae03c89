//! Resolved application settings: defaults, then the config file, then
//! command-line flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use reefpipe_core::detector::CostModel;
use reefpipe_core::eval::EvalMode;
use reefpipe_core::pipeline::{DetectorKind, OverflowPolicy};
use reefpipe_core::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub mode: EvalMode,
    /// Score at this single IoU threshold instead of the default sweep.
    pub iou_threshold: Option<f64>,
    pub json: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            mode: EvalMode::Detections,
            iou_threshold: None,
            json: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub batch_sizes: Vec<usize>,
    pub input_sizes: Vec<u32>,
    pub skip_intervals: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSettings {
    pub dest: Option<PathBuf>,
    pub labeled_only: bool,
}

/// Everything a command can be configured with. The JSON form is what
/// `--config` reads and `--print-config` writes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Frame directory or `synthetic:key=value,...` descriptor.
    pub source: Option<String>,
    /// Annotation CSV; overrides the truth shipped with the source.
    pub truth: Option<PathBuf>,
    /// Run directory for recorded frames, tracks, labels and the report.
    pub out: Option<PathBuf>,
    pub serve: Option<String>,
    pub static_dir: Option<PathBuf>,
    pub eval: EvalSettings,
    pub sweep: SweepGrid,
    pub export: ExportSettings,
    pub pipeline: PipelineConfig,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))
    }

    pub fn source(&self) -> Result<&str, UsageError> {
        self.source
            .as_deref()
            .ok_or_else(|| UsageError("missing --source (or \"source\" in the config file)".into()))
    }

    pub fn out(&self) -> Result<&Path, UsageError> {
        self.out
            .as_deref()
            .ok_or_else(|| UsageError("missing --out (or \"out\" in the config file)".into()))
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        self.pipeline.validate().map_err(|e| UsageError(e.to_string()))?;
        if let Some(t) = self.eval.iou_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(UsageError(format!("IoU threshold must be in [0, 1], got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DetectorArg {
    Oracle,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Block,
    DropOldest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Detections,
    Tracks,
}

/// Flags shared by the commands that run the pipeline.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineFlags {
    /// Frame directory or synthetic descriptor, e.g. `synthetic:seed=7,frames=500`.
    #[arg(long)]
    pub source: Option<String>,
    /// Annotation CSV used as ground truth.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub conf_threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub detector: Option<DetectorArg>,
    /// Command line of the external detector, split on whitespace.
    #[arg(long)]
    pub detector_cmd: Option<String>,
    /// host:port of an already running external detector.
    #[arg(long)]
    pub detector_addr: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub assoc_iou: Option<f64>,
    #[arg(long)]
    pub track_patience: Option<u32>,
    #[arg(long)]
    pub flow_radius: Option<u32>,
    #[arg(long)]
    pub frame_queue: Option<usize>,
    #[arg(long)]
    pub result_queue: Option<usize>,
    #[arg(long, value_enum)]
    pub queue_policy: Option<PolicyArg>,
    #[arg(long)]
    pub flush_ms: Option<u64>,
    /// Oracle box jitter, pixels.
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub miss_rate: Option<f64>,
    #[arg(long)]
    pub fp_rate: Option<f64>,
    /// Simulated per-call detector overhead; enables the cost model.
    #[arg(long)]
    pub cost_overhead_ms: Option<f64>,
    /// Simulated per-image detector cost at the reference resolution.
    #[arg(long)]
    pub cost_per_image_ms: Option<f64>,
}

impl PipelineFlags {
    pub fn apply(&self, c: &mut AppConfig) {
        let p = &mut c.pipeline;
        set(&mut c.source, self.source.clone());
        set(&mut c.truth, self.truth.clone());
        if let Some(v) = self.conf_threshold {
            p.conf_threshold = v;
        }
        if let Some(d) = self.detector {
            p.detector = match d {
                DetectorArg::Oracle => DetectorKind::Oracle,
                DetectorArg::External => DetectorKind::External,
            };
        }
        if let Some(cmd) = &self.detector_cmd {
            p.external.command = cmd.split_whitespace().map(str::to_string).collect();
            p.detector = DetectorKind::External;
        }
        if let Some(a) = &self.detector_addr {
            p.external.address = Some(a.clone());
            p.detector = DetectorKind::External;
        }
        if let Some(v) = self.seed {
            p.seed = v;
        }
        if let Some(v) = self.assoc_iou {
            p.assoc_iou_threshold = v;
        }
        if let Some(v) = self.track_patience {
            p.track_patience = v;
        }
        if let Some(v) = self.flow_radius {
            p.flow_radius = v;
        }
        if let Some(v) = self.frame_queue {
            p.frame_queue_capacity = v;
        }
        if let Some(v) = self.result_queue {
            p.result_queue_capacity = v;
        }
        if let Some(v) = self.queue_policy {
            p.frame_queue_policy = match v {
                PolicyArg::Block => OverflowPolicy::Block,
                PolicyArg::DropOldest => OverflowPolicy::DropOldest,
            };
        }
        if let Some(v) = self.flush_ms {
            p.batch_flush_ms = v;
        }
        if let Some(v) = self.jitter {
            p.noise.jitter_px = v;
        }
        if let Some(v) = self.miss_rate {
            p.noise.miss_rate = v;
        }
        if let Some(v) = self.fp_rate {
            p.noise.fp_rate = v;
        }
        if self.cost_overhead_ms.is_some() || self.cost_per_image_ms.is_some() {
            let cost = p.cost_model.get_or_insert_with(CostModel::default);
            if let Some(v) = self.cost_overhead_ms {
                cost.overhead_ms = v;
            }
            if let Some(v) = self.cost_per_image_ms {
                cost.per_image_ms = v;
            }
        }
    }
}

/// Single-valued batch, skip and resolution flags.
#[derive(Debug, Clone, Default, Args)]
pub struct ShapeFlags {
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Detect every k-th frame, propagate the rest.
    #[arg(long)]
    pub skip: Option<u32>,
    /// Longest edge of the working resolution.
    #[arg(long)]
    pub input_size: Option<u32>,
}

impl ShapeFlags {
    pub fn apply(&self, c: &mut AppConfig) {
        if let Some(v) = self.batch_size {
            c.pipeline.batch_size = v;
        }
        if let Some(v) = self.skip {
            c.pipeline.skip_interval = v;
        }
        if let Some(v) = self.input_size {
            c.pipeline.input_size = v;
        }
    }
}

pub fn set<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

pub fn eval_mode(m: ModeArg) -> EvalMode {
    match m {
        ModeArg::Detections => EvalMode::Detections,
        ModeArg::Tracks => EvalMode::Tracks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let mut c: AppConfig =
            serde_json::from_str(r#"{"source": "a", "pipeline": {"batch_size": 2, "seed": 5}}"#).unwrap();
        PipelineFlags {
            seed: Some(9),
            ..PipelineFlags::default()
        }
        .apply(&mut c);
        ShapeFlags {
            batch_size: Some(8),
            ..ShapeFlags::default()
        }
        .apply(&mut c);
        assert_eq!(c.source.as_deref(), Some("a"));
        assert_eq!(c.pipeline.batch_size, 8);
        assert_eq!(c.pipeline.seed, 9);
        assert_eq!(c.pipeline.skip_interval, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<AppConfig>(r#"{"sorce": "a"}"#).is_err());
        assert!(serde_json::from_str::<AppConfig>(r#"{"pipeline": {"batchsize": 1}}"#).is_err());
    }

    #[test]
    fn detector_cmd_selects_external() {
        let mut c = AppConfig::default();
        PipelineFlags {
            detector_cmd: Some("python3 det.py --fast".into()),
            ..PipelineFlags::default()
        }
        .apply(&mut c);
        assert_eq!(c.pipeline.detector, DetectorKind::External);
        assert_eq!(c.pipeline.external.command, vec!["python3", "det.py", "--fast"]);
    }

    #[test]
    fn cost_flags_start_from_defaults() {
        let mut c = AppConfig::default();
        PipelineFlags {
            cost_overhead_ms: Some(5.0),
            ..PipelineFlags::default()
        }
        .apply(&mut c);
        let cost = c.pipeline.cost_model.unwrap();
        assert_eq!(cost.overhead_ms, 5.0);
        assert_eq!(cost.per_image_ms, CostModel::default().per_image_ms);
    }
}
