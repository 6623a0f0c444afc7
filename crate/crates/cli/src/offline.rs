use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fusecast::harness::{self, Archive, ArchiveWriter, Renderer, SyntheticScene};
use fusecast::pipeline::{fuse_frameset, process_frameset, summarize, PipelineConfig};
use fusecast::ply::write_ply_file;

use crate::resolve_rig;

pub fn ply_name(frame_id: u64) -> String {
    format!("frame_{frame_id:08}.ply")
}

pub fn replay(archive: &Path, out: &Path, mut cfg: PipelineConfig) -> Result<()> {
    let archive = Archive::open(archive)?;
    resolve_rig(&mut cfg, archive.rig())?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;

    let mut timings = Vec::with_capacity(archive.len());
    let mut points = Vec::with_capacity(archive.len());
    for fs in archive.iter() {
        let fs = fs?;
        let (cloud, t) = process_frameset(&fs, &cfg).with_context(|| format!("frameset {}", fs.frame_id))?;
        let path = out.join(ply_name(fs.frame_id));
        write_ply_file(&cloud, &path).with_context(|| format!("cannot write {}", path.display()))?;
        log::info!("frame {}: {} points", fs.frame_id, cloud.len());
        timings.push(t);
        points.push(cloud.len());
    }

    println!("replayed {} frames into {}", points.len(), out.display());
    if let (Some(min), Some(max)) = (points.iter().min(), points.iter().max()) {
        let mean = points.iter().sum::<usize>() as f64 / points.len() as f64;
        println!("points            mean {mean:.0}  min {min}  max {max}");
        for s in summarize(&timings) {
            println!(
                "  {:<12} mean {:>10.1} us  p50 {:>10.1} us  p95 {:>10.1} us",
                s.stage, s.mean_us, s.p50_us, s.p95_us
            );
        }
    }
    Ok(())
}

pub fn export_ply(archive: &Path, frame_id: u64, out: &Path, raw: bool, mut cfg: PipelineConfig) -> Result<()> {
    let archive = Archive::open(archive)?;
    resolve_rig(&mut cfg, archive.rig())?;
    let Some(index) = archive.manifest().frames.iter().position(|f| f.frame_id == frame_id) else {
        bail!("archive has no frameset {frame_id}");
    };
    let fs = archive.frameset(index)?;
    let cloud = if raw {
        fuse_frameset(&fs, &cfg)?
    } else {
        process_frameset(&fs, &cfg)?.0
    };
    write_ply_file(&cloud, out).with_context(|| format!("cannot write {}", out.display()))?;
    println!("wrote {} points to {}", cloud.len(), out.display());
    Ok(())
}

pub fn bench(
    mut cfg: PipelineConfig,
    scene: SyntheticScene,
    frames: u64,
    csv: Option<PathBuf>,
    summary_csv: Option<PathBuf>,
    min_rate: Option<f64>,
) -> Result<()> {
    resolve_rig(&mut cfg, &scene.rig)?;
    let report = harness::bench(&cfg, &scene, frames as usize)?;
    print!("{report}");
    if let Some(p) = csv {
        let f = File::create(&p).with_context(|| format!("cannot create {}", p.display()))?;
        report.write_frames_csv(BufWriter::new(f))?;
    }
    if let Some(p) = summary_csv {
        let f = File::create(&p).with_context(|| format!("cannot create {}", p.display()))?;
        report.write_summary_csv(BufWriter::new(f))?;
    }
    if let Some(min) = min_rate {
        if report.achieved_rate_hz < min {
            bail!("achieved {:.1} Hz, below the required {min:.1} Hz", report.achieved_rate_hz);
        }
    }
    Ok(())
}

pub fn gen_scene(scene: &SyntheticScene, out: Option<&Path>, frames: u64, dump: Option<&Path>) -> Result<()> {
    if out.is_none() && dump.is_none() {
        bail!("nothing to do: give --out and/or --dump-scene");
    }
    if let Some(p) = dump {
        let text = serde_json::to_string_pretty(scene)?;
        fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))?;
    }
    if let Some(out) = out {
        let renderer = Renderer::new(scene, Default::default());
        let mut w = ArchiveWriter::create(out, &scene.rig)?;
        for i in 0..frames {
            w.append(&renderer.render(i))?;
        }
        w.finish()?;
        println!("wrote {frames} framesets to {}", out.display());
    }
    Ok(())
}
