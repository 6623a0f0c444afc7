//! Throughput benchmark over synthetic framesets.

use std::io::{self, Write};
use std::time::Instant;

use serde::Serialize;

use super::{Renderer, SyntheticScene};
use crate::pipeline::{process_frameset, summarize, PipelineConfig, PipelineError, StageSummary, StageTimings, STAGE_NAMES};
use crate::protocol::{bandwidth_bytes_per_second, encode_cloud_into};

#[derive(Clone, Debug, Serialize)]
pub struct FrameReport {
    pub frame_id: u64,
    pub points: usize,
    pub message_bytes: usize,
    /// Bytes per second needed to ship this frame at the target rate.
    pub bandwidth_bytes_per_s: f64,
    pub timings: StageTimings,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub frames: Vec<FrameReport>,
    pub stages: Vec<StageSummary>,
    pub target_rate_hz: f64,
    /// Frames per second of process + encode, back to back.
    pub achieved_rate_hz: f64,
    pub mean_points: f64,
    pub max_points: usize,
    pub min_points: usize,
    pub mean_bandwidth_bytes_per_s: f64,
}

/// Renders `n_frames` framesets of `scene` and times process + encode for
/// each. Rendering is excluded from all timings.
pub fn bench(cfg: &PipelineConfig, scene: &SyntheticScene, n_frames: usize) -> Result<BenchReport, PipelineError> {
    let renderer = Renderer::new(scene, cfg.exec);
    let mut frames = Vec::with_capacity(n_frames);
    let mut buf = Vec::new();
    let mut busy_s = 0.0;
    for i in 0..n_frames as u64 {
        let fs = renderer.render(i);
        let start = Instant::now();
        let (cloud, mut timings) = process_frameset(&fs, cfg)?;
        let enc = Instant::now();
        buf.clear();
        encode_cloud_into(&cloud, &mut buf)?;
        timings.encode = enc.elapsed().as_secs_f64() * 1e6;
        timings.total += timings.encode;
        busy_s += start.elapsed().as_secs_f64();
        frames.push(FrameReport {
            frame_id: i,
            points: cloud.len(),
            message_bytes: buf.len(),
            bandwidth_bytes_per_s: bandwidth_bytes_per_second(cfg.target_rate, cloud.len()),
            timings,
        });
    }
    Ok(report(cfg.target_rate, frames, busy_s))
}

fn report(target_rate_hz: f64, frames: Vec<FrameReport>, busy_s: f64) -> BenchReport {
    let n = frames.len().max(1) as f64;
    let timings: Vec<StageTimings> = frames.iter().map(|f| f.timings).collect();
    BenchReport {
        stages: summarize(&timings),
        target_rate_hz,
        achieved_rate_hz: if busy_s > 0.0 { frames.len() as f64 / busy_s } else { 0.0 },
        mean_points: frames.iter().map(|f| f.points as f64).sum::<f64>() / n,
        max_points: frames.iter().map(|f| f.points).max().unwrap_or(0),
        min_points: frames.iter().map(|f| f.points).min().unwrap_or(0),
        mean_bandwidth_bytes_per_s: frames.iter().map(|f| f.bandwidth_bytes_per_s).sum::<f64>() / n,
        frames,
    }
}

/// CSV header of the per-frame table.
pub fn frames_csv_header() -> String {
    let mut cols = vec!["frame_id", "points", "message_bytes", "bandwidth_bytes_per_s"];
    let stage_cols: Vec<String> = STAGE_NAMES.iter().map(|s| format!("{s}_us")).collect();
    cols.extend(stage_cols.iter().map(String::as_str));
    cols.push("total_us");
    cols.join(",")
}

impl BenchReport {
    pub fn write_frames_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", frames_csv_header())?;
        for f in &self.frames {
            write!(w, "{},{},{},{:.1}", f.frame_id, f.points, f.message_bytes, f.bandwidth_bytes_per_s)?;
            for s in f.timings.stages() {
                write!(w, ",{s:.1}")?;
            }
            writeln!(w, ",{:.1}", f.timings.total)?;
        }
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "stage,mean_us,p50_us,p95_us")?;
        for s in &self.stages {
            writeln!(w, "{},{:.1},{:.1},{:.1}", s.stage, s.mean_us, s.p50_us, s.p95_us)?;
        }
        Ok(())
    }
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "frames            {}", self.frames.len())?;
        writeln!(
            f,
            "achieved rate     {:.1} Hz (target {:.1} Hz)",
            self.achieved_rate_hz, self.target_rate_hz
        )?;
        writeln!(
            f,
            "points            mean {:.0}  min {}  max {}",
            self.mean_points, self.min_points, self.max_points
        )?;
        writeln!(
            f,
            "bandwidth         {:.0} B/s ({:.2} Mbit/s) at target rate",
            self.mean_bandwidth_bytes_per_s,
            self.mean_bandwidth_bytes_per_s * 8.0 / 1e6
        )?;
        writeln!(f, "{:<12} {:>10} {:>10} {:>10}", "stage", "mean us", "p50 us", "p95 us")?;
        for s in &self.stages {
            writeln!(f, "{:<12} {:>10.1} {:>10.1} {:>10.1}", s.stage, s.mean_us, s.p50_us, s.p95_us)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_shapes() {
        let frames = vec![FrameReport {
            frame_id: 0,
            points: 75_000,
            message_bytes: 1_125_032,
            bandwidth_bytes_per_s: bandwidth_bytes_per_second(10.0, 75_000),
            timings: StageTimings::default(),
        }];
        let r = report(10.0, frames, 0.05);
        assert_eq!(r.mean_bandwidth_bytes_per_s, 11_250_320.0);
        assert_eq!(r.achieved_rate_hz, 20.0);
        let mut out = Vec::new();
        r.write_frames_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert!(lines[1].starts_with("0,75000,1125032,11250320.0,"));
        let mut out = Vec::new();
        r.write_summary_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 10);
    }
}
