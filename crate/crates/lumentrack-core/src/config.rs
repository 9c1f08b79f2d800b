//! Engine configuration: every tunable in one serde-backed struct with
//! file round-trip, strict unknown-key rejection, and range validation.

use crate::kalman::KalmanParams;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Configuration failure cases.
#[derive(Debug, Error)]
pub enum ConfigError {
    /// The file could not be parsed (syntax or unknown keys).
    #[error("config parse error: {0}")]
    Parse(String),
    /// A value is outside its documented range.
    #[error("config value out of range: {0}")]
    OutOfRange(String),
}

/// Detection ingestion thresholds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    /// Detections below this score are dropped outright.
    pub tau_det: f64,
    /// Score splitting high-confidence from low-confidence detections.
    pub tau_high: f64,
    /// Optional greedy NMS IoU threshold applied before tracking; `None`
    /// disables pre-filtering.
    pub nms_iou: Option<f64>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            tau_det: 0.1,
            tau_high: 0.5,
            nms_iou: None,
        }
    }
}

/// Two-stage association gates and tracklet lifecycle.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingConfig {
    /// Fused-cost gate for the high-confidence pass.
    pub tau_match: f64,
    /// Motion-cost gate for the second pass when pass one matched something.
    pub low_gate_matched: f64,
    /// Motion-cost gate for the second pass when pass one matched nothing.
    pub low_gate_unmatched: f64,
    /// Appearance weight in the fused cost (motion gets `1 - lambda`).
    pub lambda: f64,
    /// Tracklets labeled more than this many generations from the current
    /// branch are excluded from matching.
    pub generation_gate: usize,
    /// Lost tracklets are removed after this many frames without a match.
    pub max_age: usize,
    /// Live tracklets whose boxes overlap at or above this IoU are collapsed
    /// to the better-supported one; two tracklets on one spot are the same
    /// lumen tracked twice.
    pub dedup_iou: f64,
    /// Use the Kalman prediction as the motion reference (`false`: last box).
    pub use_kalman: bool,
    /// Use appearance embeddings (`false` behaves exactly like `lambda = 0`).
    pub use_reid: bool,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            tau_match: 0.4,
            low_gate_matched: 0.7,
            low_gate_unmatched: 0.9,
            lambda: 0.5,
            generation_gate: 3,
            max_age: 30,
            dedup_iou: 0.6,
            use_kalman: true,
            use_reid: true,
        }
    }
}

/// Appearance embedding handling.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    /// Exponential moving average weight on the previous tracklet embedding.
    pub ema_alpha: f64,
    /// Embedding dimensionality produced by the simulator.
    pub dim: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            ema_alpha: 0.9,
            dim: 32,
        }
    }
}

/// Airway-graph association parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AssociationConfig {
    /// Minimum containment of a child box in its parent for a subgraph edge.
    pub containment_kappa: f64,
    /// Children overlapping their parent at or above this IoU are pruned as
    /// duplicate detections of the same lumen.
    pub duplicate_iou: f64,
    /// Roll estimation skips lumen pairs whose centers sit closer than this
    /// many pixels (at either end of the comparison): the direction of a
    /// short vector is dominated by detection jitter.
    pub min_pair_baseline_px: f64,
    /// Hard visibility cutoff on the branching angle, degrees.
    pub theta_max_deg: f64,
    /// Child directions are truncated at this arc length before projection.
    pub d_trunc_mm: f64,
    /// Resolve the two-fold initialization ambiguity toward |roll| <= 90°.
    pub prefer_upright_init: bool,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            containment_kappa: 0.7,
            duplicate_iou: 0.85,
            min_pair_baseline_px: 25.0,
            theta_max_deg: 70.0,
            d_trunc_mm: 10.0,
            prefer_upright_init: true,
        }
    }
}

impl AssociationConfig {
    pub fn theta_max_rad(&self) -> f64 {
        self.theta_max_deg.to_radians()
    }
}

/// Loop-closure parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LoopClosureConfig {
    pub enabled: bool,
    /// A candidate keyframe pair is a loop when the feature matcher reports
    /// strictly more than this many point pairs.
    pub eta: usize,
    /// Number of most recently updated gallery records searched per check.
    pub recent_records: usize,
    /// Minimum majority point count for a detection to inherit an identity.
    pub min_points: usize,
}

impl Default for LoopClosureConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            eta: 100,
            recent_records: 1,
            min_points: 10,
        }
    }
}

/// Metric evaluation parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// IoU threshold for the CLEAR and IDF1 protocols.
    pub clear_alpha: f64,
    /// Restrict HOTA to the single 0.5 threshold (faster CI runs).
    pub hota_single_alpha: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            clear_alpha: 0.5,
            hota_single_alpha: false,
        }
    }
}

/// Full engine configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub detection: DetectionConfig,
    pub matching: MatchingConfig,
    pub embedding: EmbeddingConfig,
    pub kalman: KalmanParams,
    pub association: AssociationConfig,
    pub loop_closure: LoopClosureConfig,
    pub metrics: MetricsConfig,
}

impl EngineConfig {
    /// Parse from TOML, rejecting unknown keys, and validate ranges.
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: EngineConfig =
            toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Check every tunable against its documented range.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::OutOfRange(m));
        let unit = |name: &str, v: f64| -> Result<(), ConfigError> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange(format!("{name} = {v} not in [0, 1]")))
            }
        };
        unit("detection.tau_det", self.detection.tau_det)?;
        unit("detection.tau_high", self.detection.tau_high)?;
        if self.detection.tau_high < self.detection.tau_det {
            return err(format!(
                "detection.tau_high = {} below tau_det = {}",
                self.detection.tau_high, self.detection.tau_det
            ));
        }
        if let Some(nms) = self.detection.nms_iou {
            unit("detection.nms_iou", nms)?;
        }
        for (name, v) in [
            ("matching.tau_match", self.matching.tau_match),
            ("matching.low_gate_matched", self.matching.low_gate_matched),
            ("matching.low_gate_unmatched", self.matching.low_gate_unmatched),
        ] {
            if !(v > 0.0 && v <= 2.0) {
                return err(format!("{name} = {v} not in (0, 2]"));
            }
        }
        unit("matching.lambda", self.matching.lambda)?;
        unit("matching.dedup_iou", self.matching.dedup_iou)?;
        if self.matching.max_age == 0 {
            return err("matching.max_age must be >= 1".into());
        }
        unit("embedding.ema_alpha", self.embedding.ema_alpha)?;
        if self.embedding.dim == 0 {
            return err("embedding.dim must be >= 1".into());
        }
        for (name, v) in [
            ("kalman.pos_weight", self.kalman.pos_weight),
            ("kalman.vel_weight", self.kalman.vel_weight),
            ("kalman.aspect_std", self.kalman.aspect_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} = {v} must be positive"));
            }
        }
        unit("association.containment_kappa", self.association.containment_kappa)?;
        unit("association.duplicate_iou", self.association.duplicate_iou)?;
        if !(self.association.min_pair_baseline_px >= 0.0
            && self.association.min_pair_baseline_px.is_finite())
        {
            return err(format!(
                "association.min_pair_baseline_px = {} must be finite and non-negative",
                self.association.min_pair_baseline_px
            ));
        }
        if !(0.0 < self.association.theta_max_deg && self.association.theta_max_deg <= 90.0) {
            return err(format!(
                "association.theta_max_deg = {} not in (0, 90]",
                self.association.theta_max_deg
            ));
        }
        if self.association.d_trunc_mm <= 0.0 {
            return err("association.d_trunc_mm must be positive".into());
        }
        if self.loop_closure.recent_records == 0 {
            return err("loop_closure.recent_records must be >= 1".into());
        }
        if self.loop_closure.min_points == 0 {
            return err("loop_closure.min_points must be >= 1".into());
        }
        unit("metrics.clear_alpha", self.metrics.clear_alpha)?;
        Ok(())
    }

    /// Commented TOML template with defaults, for `config init`.
    pub fn template() -> &'static str {
        TEMPLATE
    }
}

const TEMPLATE: &str = r#"# lumentrack engine configuration.
# Every key is shown with its default. Unknown keys are rejected.

[detection]
# Detections below tau_det are dropped; scores in [tau_det, tau_high) join
# the low-confidence second association pass; scores >= tau_high are
# first-pass candidates and may start new tracklets.
tau_det = 0.1
tau_high = 0.5
# Optional greedy NMS IoU threshold applied before tracking. Disabled by
# default. Published IoU pre-filter values of 0.6/0.7 exist but their exact
# placement is ambiguous, so the gate below is explicit and this stays off.
# nms_iou = 0.6

[matching]
# Fused-cost gate (appearance + motion) for high-confidence matching.
tau_match = 0.4
# Motion-only gates for the second pass: the stricter one applies when the
# first pass matched at least one pair, the looser one otherwise.
low_gate_matched = 0.7
low_gate_unmatched = 0.9
# Appearance weight in the fused cost; motion cost gets 1 - lambda.
lambda = 0.5
# Tracklets labeled more than this many generations away from the current
# branch are excluded from association.
generation_gate = 3
# Lost tracklets are removed after this many frames without a match.
max_age = 30
# Ablation switches: motion prediction and appearance re-identification.
use_kalman = true
use_reid = true

[embedding]
# Exponential moving average weight on the previous tracklet embedding.
ema_alpha = 0.9
# Embedding dimensionality produced by the simulator.
dim = 32

[kalman]
# Noise scales as fractions of box height per step (position/velocity), and
# the fixed aspect-channel standard deviation.
pos_weight = 0.05
vel_weight = 0.00625
aspect_std = 0.01

[association]
# Minimum containment of a child box in a parent box for a subgraph edge.
containment_kappa = 0.7
# Children with at least this IoU against their parent are duplicate
# detections of the same lumen and are pruned.
duplicate_iou = 0.85
# Hard visibility cutoff on the branching angle.
theta_max_deg = 70.0
# Child directions are truncated at this arc length before projection.
d_trunc_mm = 10.0
# Resolve the two-fold carina initialization ambiguity toward |roll| <= 90°.
prefer_upright_init = true

[loop_closure]
enabled = true
# A keyframe pair is a loop when the matcher returns more than eta pairs.
eta = 100
# Number of most recently updated gallery records searched per check.
recent_records = 1
# Minimum majority point count for a detection to inherit an identity.
min_points = 10

[metrics]
# IoU threshold for the CLEAR / IDF1 protocols.
clear_alpha = 0.5
# Restrict HOTA to the single 0.5 threshold (faster CI runs).
hota_single_alpha = false
"#;
