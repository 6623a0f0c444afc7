use fusecast::harness::{write_archive, Archive, ArchiveError, Renderer, SyntheticScene};
use fusecast::pipeline::{process_frameset, run_stream, PipelineError, SimulatedClock};
use fusecast::protocol::decode;
use fusecast::{Exec, FrameSet, PipelineConfig, WireMessage};

fn small_scene() -> SyntheticScene {
    SyntheticScene::tabletop().with_resolution(80, 60).unwrap()
}

fn config(scene: &SyntheticScene) -> PipelineConfig {
    PipelineConfig {
        rig: scene.rig.clone(),
        ..Default::default()
    }
}

#[test]
fn stage_timings_add_up() {
    let scene = small_scene();
    let cfg = config(&scene);
    let (cloud, t) = process_frameset(&scene.render(0), &cfg).unwrap();
    assert_eq!(t.output_point_count, cloud.len());
    assert!(t.stages().iter().all(|s| *s >= 0.0));
    assert!(t.stage_sum() <= t.total + 1.0, "{} > {}", t.stage_sum(), t.total);
}

#[test]
fn sequential_and_parallel_agree() {
    let scene = small_scene();
    let fs = scene.render(4);
    let mut cfg = config(&scene);
    cfg.exec = Exec::Sequential;
    let (a, _) = process_frameset(&fs, &cfg).unwrap();
    cfg.exec = Exec::Parallel;
    let (b, _) = process_frameset(&fs, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn burst_source_keeps_only_the_newest() {
    let scene = small_scene();
    let cfg = config(&scene);
    let r = Renderer::new(&scene, cfg.exec);
    // five framesets captured together, then one every interval
    let mut sets: Vec<FrameSet> = (0..5)
        .map(|i| {
            let mut fs = r.render(i);
            fs.capture_timestamp_us = 0;
            fs
        })
        .collect();
    sets.extend((5..8).map(|i| {
        let mut fs = r.render(i);
        fs.capture_timestamp_us = (i - 4) * 100_000;
        fs
    }));
    let clock = SimulatedClock::new(0);
    let mut sink: Vec<Vec<u8>> = Vec::new();
    let stats = run_stream(sets.into_iter().map(Ok::<_, PipelineError>), &cfg, &mut sink, &clock, None).unwrap();
    assert_eq!(stats.emitted_frame_ids(), vec![4, 5, 6, 7]);
    assert_eq!(stats.ticks[0].dropped, vec![0, 1, 2, 3]);
    assert_eq!(stats.dropped, 4);
    let ticks: Vec<u64> = stats.ticks.iter().map(|t| t.tick_us).collect();
    assert!(ticks.windows(2).all(|w| w[1] - w[0] >= cfg.frame_interval_us()), "{ticks:?}");
    let ids: Vec<u64> = sink
        .iter()
        .filter_map(|m| match decode(m).unwrap() {
            WireMessage::PointCloud(c) => Some(c.frame_id),
            WireMessage::WristRgb(_) => None,
        })
        .collect();
    assert_eq!(ids, vec![4, 5, 6, 7]);
}

#[test]
fn depth_file_smaller_than_manifest_says() {
    let dir = tempfile::tempdir().unwrap();
    let scene = SyntheticScene::tabletop();
    let cam = scene.rig.static_cameras()[0].clone();
    assert_eq!((cam.intrinsics.width, cam.intrinsics.height), (640, 480));
    write_archive(dir.path(), &scene.rig, &[scene.render(0)]).unwrap();
    let depth = dir.path().join(format!("frames/00000000/cam{}.depth", cam.camera_id));
    std::fs::write(&depth, [0u8; 100]).unwrap();
    let archive = Archive::open(dir.path()).unwrap();
    match archive.frameset(0) {
        Err(e @ ArchiveError::SizeMismatch { .. }) => {
            let text = e.to_string();
            assert!(text.contains(&format!("cam{}.depth", cam.camera_id)), "{text}");
            assert!(text.contains("614400") && text.contains("100"), "{text}");
        }
        other => panic!("expected a size mismatch, got {other:?}"),
    }
}
