//! Branch-level tracking and localization for bronchoscopic video.
//!
//! The crate combines a multi-lumen tracker (Kalman motion model plus
//! appearance re-identification), a semantic airway-graph association layer,
//! a voting localizer, and a lightweight loop-closure stage. A built-in
//! synthetic bronchoscopy simulator produces detection streams with ground
//! truth, and a metrics module scores tracking (MOTA / IDF1 / HOTA) and
//! branch-level localization.
//!
//! Modules are layered bottom-up:
//!
//! * [`geometry`] — boxes, overlap measures, signed planar angles
//! * [`kalman`] — constant-velocity box motion filter
//! * [`assignment`] — gated rectangular Hungarian assignment
//! * [`airway`] — labeled airway tree, frame normalization, projections
//! * [`tracker`] — two-stage lumen association and tracklet lifecycle
//! * [`association`] — detection subgraphs, roll estimation, label
//!   propagation, gallery, and voting localization
//! * [`loop_closure`] — keyframe matching and identity restoration
//! * [`sim`] — procedural airway trees and a synthetic scope renderer
//! * [`metrics`] — CLEAR/IDF1/HOTA tracking metrics and localization scores
//! * [`engine`] — per-frame orchestration of the full pipeline
//! * [`config`] — engine configuration with file round-trip
//! * [`formats`] — versioned JSONL / JSON readers and writers
//! * [`pipeline`] — directory-level simulate / track / evaluate runners

pub mod airway;
pub mod assignment;
pub mod association;
pub mod config;
pub mod engine;
pub mod formats;
pub mod geometry;
pub mod kalman;
pub mod loop_closure;
pub mod metrics;
pub mod pipeline;
pub mod sim;
pub mod tracker;

pub use airway::AirwayGraph;
pub use config::EngineConfig;
pub use engine::{Engine, FrameOutput};
pub use geometry::{BoundingBox, Vec2};
pub use sim::Scenario;
pub use tracker::Detection;
