//! Rate-controlled streaming with latest-wins frame dropping.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use super::{process_frameset, summarize, Clock, FrameSet, PipelineConfig, PipelineError, StageSummary, StageTimings};
use crate::protocol::{encode_cloud_into, encode_wrist};
use crate::transport::{MessageSink, TransportError};

/// One processed frameset.
#[derive(Clone, Debug, PartialEq)]
pub struct TickRecord {
    pub tick_us: u64,
    pub frame_id: u64,
    pub capture_us: u64,
    pub point_count: usize,
    pub message_bytes: usize,
    /// Framesets that were pending at this tick and skipped in favor of
    /// `frame_id`.
    pub dropped: Vec<u64>,
}

#[derive(Clone, Debug, Default)]
pub struct StreamStats {
    pub processed: u64,
    pub dropped: u64,
    pub rejected: u64,
    pub messages_sent: u64,
    pub wrist_messages: u64,
    pub bytes_sent: u64,
    pub ticks: Vec<TickRecord>,
    pub timings: Vec<StageTimings>,
}

impl StreamStats {
    pub fn stage_summary(&self) -> Vec<StageSummary> {
        summarize(&self.timings)
    }

    pub fn emitted_frame_ids(&self) -> Vec<u64> {
        self.ticks.iter().map(|t| t.frame_id).collect()
    }
}

impl std::fmt::Display for StreamStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "processed {}  dropped {}  rejected {}  messages {} (wrist {})  bytes {}",
            self.processed, self.dropped, self.rejected, self.messages_sent, self.wrist_messages, self.bytes_sent
        )?;
        for s in self.stage_summary() {
            writeln!(
                f,
                "  {:<12} mean {:>10.1} us  p50 {:>10.1} us  p95 {:>10.1} us",
                s.stage, s.mean_us, s.p50_us, s.p95_us
            )?;
        }
        Ok(())
    }
}

/// A sink failure ends the stream; the statistics up to that point survive.
#[derive(Debug, thiserror::Error)]
#[error("stream aborted after {} frames: {error}", stats.processed)]
pub struct StreamFailure {
    #[source]
    pub error: TransportError,
    pub stats: StreamStats,
}

/// Streams framesets to `sink` at no more than `cfg.target_rate`.
///
/// A frameset becomes available once `clock` reaches its
/// `capture_timestamp_us`. At every tick the newest available frameset is
/// processed and every older pending one is dropped. Ticks are at least one
/// frame interval apart; a slow frame delays the next tick rather than
/// causing a burst. Framesets the pipeline rejects are skipped and counted.
/// `stop` ends the stream early.
pub fn run_stream<I, S, C>(
    source: I,
    cfg: &PipelineConfig,
    sink: &mut S,
    clock: &C,
    stop: Option<&AtomicBool>,
) -> Result<StreamStats, StreamFailure>
where
    I: IntoIterator<Item = Result<FrameSet, PipelineError>>,
    S: MessageSink + ?Sized,
    C: Clock + ?Sized,
{
    let interval = cfg.frame_interval_us();
    let mut stats = StreamStats::default();
    let mut source = source.into_iter().peekable();
    let mut buf = Vec::new();
    let mut last_tick: Option<u64> = None;
    let mut next_tick = clock.now_us();

    loop {
        if stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
            break;
        }
        clock.sleep_until_us(next_tick);
        let now = clock.now_us();

        let mut newest: Option<FrameSet> = None;
        let mut dropped = Vec::new();
        while let Some(item) = source.next_if(|i| i.as_ref().map_or(true, |fs| fs.capture_timestamp_us <= now)) {
            match item {
                Ok(fs) => {
                    if let Some(old) = newest.replace(fs) {
                        dropped.push(old.frame_id);
                    }
                }
                Err(e) => {
                    log::warn!("skipping frameset: {e}");
                    stats.rejected += 1;
                }
            }
        }

        let Some(fs) = newest else {
            match source.peek() {
                None => break,
                Some(Ok(fs)) => {
                    let earliest = last_tick.map_or(0, |t| t + interval);
                    next_tick = fs.capture_timestamp_us.max(earliest).max(now);
                    continue;
                }
                Some(Err(_)) => continue,
            }
        };
        stats.dropped += dropped.len() as u64;
        last_tick = Some(now);
        next_tick = now + interval;

        let (cloud, mut timings) = match process_frameset(&fs, cfg) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("rejecting frameset {}: {e}", fs.frame_id);
                stats.rejected += 1;
                continue;
            }
        };

        let enc = Instant::now();
        buf.clear();
        if let Err(e) = encode_cloud_into(&cloud, &mut buf) {
            log::warn!("cannot encode frame {}: {e}", fs.frame_id);
            stats.rejected += 1;
            continue;
        }
        timings.encode = enc.elapsed().as_secs_f64() * 1e6;
        timings.total += timings.encode;

        if let Err(error) = sink.send_message(&buf) {
            return Err(StreamFailure { error, stats });
        }
        stats.messages_sent += 1;
        stats.bytes_sent += buf.len() as u64;
        stats.processed += 1;
        stats.ticks.push(TickRecord {
            tick_us: now,
            frame_id: fs.frame_id,
            capture_us: fs.capture_timestamp_us,
            point_count: cloud.len(),
            message_bytes: buf.len(),
            dropped,
        });
        stats.timings.push(timings);

        if let (Some(wrist), Some(pose)) = (&fs.wrist, &fs.wrist_pose) {
            match encode_wrist(wrist, pose) {
                Ok(msg) => {
                    if let Err(error) = sink.send_message(&msg) {
                        return Err(StreamFailure { error, stats });
                    }
                    stats.messages_sent += 1;
                    stats.wrist_messages += 1;
                    stats.bytes_sent += msg.len() as u64;
                }
                Err(e) => log::warn!("wrist frame {} not sent: {e}", fs.frame_id),
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, RgbdFrame, RigidTransform};
    use crate::pipeline::{CameraRig, CameraSpec, SimulatedClock};

    fn cfg() -> PipelineConfig {
        let k = Intrinsics::new(10.0, 10.0, 2.0, 2.0, 4, 4, 0.001).unwrap();
        PipelineConfig {
            rig: CameraRig {
                cameras: vec![CameraSpec {
                    camera_id: 0,
                    name: String::new(),
                    intrinsics: k,
                    extrinsic: RigidTransform::identity(),
                }],
                wrist_camera_id: None,
            },
            crop: crate::filters::Aabb::new([-1.0; 3], [1.0; 3]).unwrap(),
            ..Default::default()
        }
    }

    fn fs(frame_id: u64, t_us: u64) -> Result<FrameSet, PipelineError> {
        let mut f = RgbdFrame::blank(0, frame_id, t_us, 4, 4);
        f.depth.iter_mut().for_each(|d| *d = 300);
        Ok(FrameSet {
            frame_id,
            capture_timestamp_us: t_us,
            frames: vec![f],
            wrist: None,
            wrist_pose: None,
        })
    }

    struct FailAfter(usize);
    impl MessageSink for FailAfter {
        fn send_message(&mut self, _: &[u8]) -> Result<(), TransportError> {
            if self.0 == 0 {
                return Err(TransportError::Closed);
            }
            self.0 -= 1;
            Ok(())
        }
    }

    #[test]
    fn paced_source_no_drops() {
        let clock = SimulatedClock::new(0);
        let mut sink: Vec<Vec<u8>> = Vec::new();
        let src = (0..20).map(|i| fs(i, i * 100_000));
        let stats = run_stream(src, &cfg(), &mut sink, &clock, None).unwrap();
        assert_eq!((stats.processed, stats.dropped), (20, 0));
        assert_eq!(sink.len(), 20);
    }

    #[test]
    fn sink_failure_keeps_stats() {
        let clock = SimulatedClock::new(0);
        let src = (0..10).map(|i| fs(i, i * 100_000));
        let err = run_stream(src, &cfg(), &mut FailAfter(3), &clock, None).unwrap_err();
        assert_eq!(err.stats.processed, 3);
        assert!(matches!(err.error, TransportError::Closed));
    }

    #[test]
    fn rejected_framesets_are_counted() {
        let clock = SimulatedClock::new(0);
        let mut sink: Vec<Vec<u8>> = Vec::new();
        let src = vec![
            fs(0, 0),
            Err(PipelineError::Source("bad file".into())),
            fs(2, 200_000),
        ];
        let stats = run_stream(src, &cfg(), &mut sink, &clock, None).unwrap();
        assert_eq!((stats.processed, stats.rejected), (2, 1));
    }

    #[test]
    fn stop_flag_ends_stream() {
        let clock = SimulatedClock::new(0);
        let stop = AtomicBool::new(true);
        let mut sink: Vec<Vec<u8>> = Vec::new();
        let stats = run_stream((0..5).map(|i| fs(i, 0)), &cfg(), &mut sink, &clock, Some(&stop)).unwrap();
        assert_eq!(stats.processed, 0);
    }
}
