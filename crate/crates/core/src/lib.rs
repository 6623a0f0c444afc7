//! Multi-camera RGB-D fusion and point-cloud streaming.
//!
//! Framesets from a calibrated rig are back-projected, transformed into a
//! common frame, merged, cropped, voxel-downsampled, outlier-filtered,
//! capped to a point budget and sent as compact binary messages.

pub mod exec;
pub mod filters;
pub mod geometry;
pub mod harness;
pub mod pipeline;
pub mod ply;
pub mod protocol;
pub mod transport;

pub use exec::Exec;
pub use geometry::{ClassSet, Intrinsics, PointCloud, Pose, RgbdFrame, RigidTransform};
pub use pipeline::{process_frameset, run_stream, CameraRig, CameraSpec, FrameSet, PipelineConfig};
pub use protocol::{decode, WireMessage};
