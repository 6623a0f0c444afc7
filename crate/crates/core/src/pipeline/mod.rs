//! Per-frame orchestration from synchronized RGB-D framesets to a budgeted,
//! filtered cloud in the robot base frame.

mod clock;
mod config;
mod stream;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::{self, FilterError};
use crate::geometry::{self, GeometryError, Intrinsics, PointCloud, Pose, RgbdFrame, RigidTransform};
use crate::protocol::EncodeError;

pub use clock::{Clock, SimulatedClock, SystemClock};
pub use config::{ConfigError, PipelineConfig};
pub use stream::{run_stream, StreamFailure, StreamStats, TickRecord};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frameset {frame_id}: no frame for camera {camera_id}")]
    MissingCamera { frame_id: u64, camera_id: u16 },
    #[error("frameset {frame_id}: camera {camera_id} is not a static rig camera")]
    UnexpectedCamera { frame_id: u64, camera_id: u16 },
    #[error("frameset {frame_id}: camera {camera_id} carries frame id {found}")]
    FrameIdMismatch { frame_id: u64, camera_id: u16, found: u64 },
    #[error("invalid rig: {0}")]
    InvalidRig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("frame source failed: {0}")]
    Source(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub camera_id: u16,
    #[serde(default)]
    pub name: String,
    pub intrinsics: Intrinsics,
    /// Camera-to-base transform.
    pub extrinsic: RigidTransform,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<CameraSpec>,
    /// Which of `cameras` is the wrist camera, if any. It feeds the RGB
    /// side channel and is not fused into the cloud.
    #[serde(default)]
    pub wrist_camera_id: Option<u16>,
}

impl CameraRig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut ids: Vec<u16> = self.cameras.iter().map(|c| c.camera_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(PipelineError::InvalidRig("duplicate camera ids".into()));
        }
        if let Some(w) = self.wrist_camera_id {
            if !ids.contains(&w) {
                return Err(PipelineError::InvalidRig(format!("wrist camera {w} not in rig")));
            }
        }
        for c in &self.cameras {
            c.intrinsics.validate()?;
        }
        Ok(())
    }

    /// Static (fused) cameras sorted by id.
    pub fn static_cameras(&self) -> Vec<&CameraSpec> {
        let mut v: Vec<&CameraSpec> = self
            .cameras
            .iter()
            .filter(|c| Some(c.camera_id) != self.wrist_camera_id)
            .collect();
        v.sort_by_key(|c| c.camera_id);
        v
    }

    pub fn wrist(&self) -> Option<&CameraSpec> {
        let id = self.wrist_camera_id?;
        self.cameras.iter().find(|c| c.camera_id == id)
    }

    pub fn camera(&self, id: u16) -> Option<&CameraSpec> {
        self.cameras.iter().find(|c| c.camera_id == id)
    }
}

/// One synchronized capture: a frame per static camera plus the optional
/// wrist frame and end-effector pose.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    pub frame_id: u64,
    pub capture_timestamp_us: u64,
    pub frames: Vec<RgbdFrame>,
    pub wrist: Option<RgbdFrame>,
    pub wrist_pose: Option<Pose>,
}

impl FrameSet {
    /// Frames in rig camera order. Fails on a missing, foreign, or
    /// mislabeled frame.
    pub fn ordered_frames<'a>(&'a self, rig: &CameraRig) -> Result<Vec<&'a RgbdFrame>, PipelineError> {
        let cams = rig.static_cameras();
        for f in &self.frames {
            if !cams.iter().any(|c| c.camera_id == f.camera_id) {
                return Err(PipelineError::UnexpectedCamera {
                    frame_id: self.frame_id,
                    camera_id: f.camera_id,
                });
            }
        }
        let mut out = Vec::with_capacity(cams.len());
        for c in cams {
            let mut hits = self.frames.iter().filter(|f| f.camera_id == c.camera_id);
            let f = hits.next().ok_or(PipelineError::MissingCamera {
                frame_id: self.frame_id,
                camera_id: c.camera_id,
            })?;
            if hits.next().is_some() {
                return Err(PipelineError::InvalidRig(format!(
                    "frameset {} has two frames for camera {}",
                    self.frame_id, c.camera_id
                )));
            }
            if f.frame_id != self.frame_id {
                return Err(PipelineError::FrameIdMismatch {
                    frame_id: self.frame_id,
                    camera_id: c.camera_id,
                    found: f.frame_id,
                });
            }
            out.push(f);
        }
        if let Some(w) = &self.wrist {
            if w.frame_id != self.frame_id {
                return Err(PipelineError::FrameIdMismatch {
                    frame_id: self.frame_id,
                    camera_id: w.camera_id,
                    found: w.frame_id,
                });
            }
        }
        Ok(out)
    }
}

/// Per-stage wall time in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub backproject: f64,
    pub transform: f64,
    pub merge: f64,
    pub crop: f64,
    pub voxel: f64,
    pub sor: f64,
    pub budget: f64,
    pub encode: f64,
    pub total: f64,
    pub output_point_count: usize,
}

pub const STAGE_NAMES: [&str; 8] = [
    "backproject",
    "transform",
    "merge",
    "crop",
    "voxel",
    "sor",
    "budget",
    "encode",
];

impl StageTimings {
    pub fn stages(&self) -> [f64; 8] {
        [
            self.backproject,
            self.transform,
            self.merge,
            self.crop,
            self.voxel,
            self.sor,
            self.budget,
            self.encode,
        ]
    }

    pub fn stage_sum(&self) -> f64 {
        self.stages().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: &'static str,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Mean / p50 / p95 for each stage and the total.
pub fn summarize(timings: &[StageTimings]) -> Vec<StageSummary> {
    let columns: Vec<(&'static str, Vec<f64>)> = STAGE_NAMES
        .iter()
        .enumerate()
        .map(|(i, &name)| (name, timings.iter().map(|t| t.stages()[i]).collect()))
        .chain(std::iter::once(("total", timings.iter().map(|t| t.total).collect())))
        .collect();
    columns
        .into_iter()
        .map(|(stage, v)| StageSummary {
            stage,
            mean_us: if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 },
            p50_us: percentile(&v, 50.0),
            p95_us: percentile(&v, 95.0),
        })
        .collect()
}

fn micros_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e6
}

/// Back-projects, transforms and merges the static cameras of `fs` into
/// one base-frame cloud, before any filtering.
pub fn fuse_frameset(fs: &FrameSet, cfg: &PipelineConfig) -> Result<PointCloud, PipelineError> {
    let frames = fs.ordered_frames(&cfg.rig)?;
    let cams = cfg.rig.static_cameras();
    let clouds = frames
        .iter()
        .zip(&cams)
        .map(|(f, c)| {
            let local = geometry::back_project(f, &c.intrinsics, &cfg.keep_classes)?;
            Ok(geometry::transform(&local, &c.extrinsic))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let mut merged = geometry::merge(&clouds);
    merged.frame_id = fs.frame_id;
    merged.timestamp_us = fs.capture_timestamp_us;
    Ok(merged)
}

/// Runs the full per-frame chain on one frameset.
///
/// The output is `crop → voxel → sor → budget` applied to the merged,
/// transformed, mask-filtered back-projections, stamped with the
/// frameset's id and capture time. Timings cover everything but `encode`.
pub fn process_frameset(fs: &FrameSet, cfg: &PipelineConfig) -> Result<(PointCloud, StageTimings), PipelineError> {
    let start = Instant::now();
    let mut t = StageTimings::default();
    let frames = fs.ordered_frames(&cfg.rig)?;
    let cams = cfg.rig.static_cameras();
    let pairs: Vec<(&RgbdFrame, &CameraSpec)> = frames.into_iter().zip(cams).collect();

    let s = Instant::now();
    let local = cfg
        .exec
        .map(&pairs, |(f, c)| geometry::back_project(f, &c.intrinsics, &cfg.keep_classes))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    t.backproject = micros_since(s);

    let s = Instant::now();
    let base: Vec<PointCloud> = cfg
        .exec
        .map_range(local.len(), |i| geometry::transform(&local[i], &pairs[i].1.extrinsic));
    drop(local);
    t.transform = micros_since(s);

    let s = Instant::now();
    let mut cloud = geometry::merge(&base);
    drop(base);
    cloud.frame_id = fs.frame_id;
    cloud.timestamp_us = fs.capture_timestamp_us;
    t.merge = micros_since(s);

    let s = Instant::now();
    let cloud = filters::crop_aabb(&cloud, &cfg.crop);
    t.crop = micros_since(s);

    let s = Instant::now();
    let cloud = filters::voxel_downsample(&cloud, cfg.filter.voxel_leaf)?;
    t.voxel = micros_since(s);

    let s = Instant::now();
    let cloud = filters::sor_filter_with(&cloud, cfg.filter.sor_k, cfg.filter.sor_std_ratio, cfg.exec)?;
    t.sor = micros_since(s);

    let s = Instant::now();
    let cloud = filters::enforce_budget(&cloud, cfg.filter.point_budget)?;
    t.budget = micros_since(s);

    assert!(cloud.len() <= cfg.filter.point_budget, "point budget exceeded");
    t.output_point_count = cloud.len();
    t.total = micros_since(start);
    Ok((cloud, t))
}
