mod net;
mod offline;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fusecast::filters::Aabb;
use fusecast::harness::SyntheticScene;
use fusecast::pipeline::{CameraRig, PipelineConfig};
use fusecast::transport::Mode;
use fusecast::Exec;

#[derive(Parser, Debug)]
#[command(name = "fusecast", version, about = "Fuse RGB-D camera frames into point clouds and stream them")]
struct Cli {
    /// More log output (-v info, -vv debug, -vvv trace). RUST_LOG also works.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Process every frameset of an archive and write one PLY per frame.
    Replay {
        /// Archive directory.
        #[arg(long)]
        archive: PathBuf,
        /// Output directory for frame_<id>.ply files.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Stream processed clouds from an archive or a synthetic scene.
    Serve {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        transport: TransportArgs,
    },
    /// Receive a stream, keep the latest frame and optionally write snapshots.
    Recv {
        /// Directory for snapshot PLY files.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write every Nth exposed cloud as PLY; 0 disables snapshots.
        #[arg(long, default_value_t = 0)]
        snapshot_every: u64,
        /// Exit after this many exposed clouds.
        #[arg(long)]
        max_frames: Option<u64>,
        /// Datagram mode: exit after this long without traffic.
        #[arg(long, default_value_t = 5000)]
        idle_timeout_ms: u64,
        /// Stream mode: keep retrying the connection for this long.
        #[arg(long, default_value_t = 10_000)]
        connect_timeout_ms: u64,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        transport: TransportArgs,
    },
    /// Time process + encode on synthetic frames and report rate and bandwidth.
    Bench {
        /// Scene description (JSON); the built-in tabletop when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        frames: u64,
        /// Per-frame CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Per-stage summary CSV output.
        #[arg(long)]
        summary_csv: Option<PathBuf>,
        /// Fail when the achieved rate is below this many Hz.
        #[arg(long)]
        min_rate: Option<f64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write one archive frameset as PLY.
    ExportPly {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        frame_id: u64,
        #[arg(long)]
        out: PathBuf,
        /// Fused cloud before cropping and filtering.
        #[arg(long)]
        raw: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render a synthetic scene into an archive.
    GenScene {
        /// Scene description (JSON); the built-in tabletop when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Archive directory to create.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        frames: u64,
        /// Resample every camera to this width (needs --height).
        #[arg(long, requires = "height")]
        width: Option<u32>,
        #[arg(long, requires = "width")]
        height: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        depth_std: Option<f64>,
        #[arg(long)]
        outlier_prob: Option<f64>,
        /// Also write the effective scene description as JSON.
        #[arg(long)]
        dump_scene: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct SourceArgs {
    /// Archive directory to stream.
    #[arg(long, conflicts_with = "scene")]
    archive: Option<PathBuf>,
    /// Scene description (JSON) to render live; the built-in tabletop when
    /// neither this nor --archive is given.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Frames to render from a scene.
    #[arg(long, default_value_t = 100)]
    frames: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Stream,
    Datagram,
}

/// Overrides for config file keys.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    target_rate: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    keep_classes: Option<Vec<u8>>,
    #[arg(long, value_enum)]
    exec: Option<ExecArg>,
    /// x,y,z
    #[arg(long, value_delimiter = ',', num_args = 3)]
    crop_min: Option<Vec<f32>>,
    /// x,y,z
    #[arg(long, value_delimiter = ',', num_args = 3)]
    crop_max: Option<Vec<f32>>,
    #[arg(long)]
    voxel_leaf: Option<f64>,
    #[arg(long)]
    sor_k: Option<usize>,
    #[arg(long)]
    sor_std_ratio: Option<f64>,
    #[arg(long)]
    point_budget: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct TransportArgs {
    /// host:port
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    max_message_bytes: Option<usize>,
    #[arg(long)]
    receive_buffer_frames: Option<usize>,
    #[arg(long)]
    fragment_payload: Option<usize>,
}

impl ConfigArgs {
    /// Loads the file (if any) and applies flag overrides. The rig may still
    /// be empty.
    fn load(&self, transport: Option<&TransportArgs>) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.target_rate {
            cfg.target_rate = v;
        }
        if let Some(v) = &self.keep_classes {
            cfg.keep_classes = v.iter().copied().collect();
        }
        if let Some(v) = self.exec {
            cfg.exec = match v {
                ExecArg::Sequential => Exec::Sequential,
                ExecArg::Parallel => Exec::Parallel,
            };
        }
        if self.crop_min.is_some() || self.crop_max.is_some() {
            let min = self.crop_min.as_deref().map_or(cfg.crop.min, to3);
            let max = self.crop_max.as_deref().map_or(cfg.crop.max, to3);
            cfg.crop = Aabb::new(min, max)?;
        }
        let f = &mut cfg.filter;
        if let Some(v) = self.voxel_leaf {
            f.voxel_leaf = v;
        }
        if let Some(v) = self.sor_k {
            f.sor_k = v;
        }
        if let Some(v) = self.sor_std_ratio {
            f.sor_std_ratio = v;
        }
        if let Some(v) = self.point_budget {
            f.point_budget = v;
        }
        if let Some(t) = transport {
            let tc = &mut cfg.transport;
            if let Some(v) = &t.endpoint {
                tc.endpoint = v.clone();
            }
            if let Some(v) = t.mode {
                tc.mode = match v {
                    ModeArg::Stream => Mode::Stream,
                    ModeArg::Datagram => Mode::Datagram,
                };
            }
            if let Some(v) = t.max_message_bytes {
                tc.max_message_bytes = v;
            }
            if let Some(v) = t.receive_buffer_frames {
                tc.receive_buffer_frames = v;
            }
            if let Some(v) = t.fragment_payload {
                tc.fragment_payload = v;
            }
        }
        cfg.validate_settings()?;
        Ok(cfg)
    }
}

fn to3(v: &[f32]) -> [f32; 3] {
    [v[0], v[1], v[2]]
}

/// Fills an empty config rig from the data source; a configured rig wins.
fn resolve_rig(cfg: &mut PipelineConfig, source_rig: &CameraRig) -> Result<()> {
    if cfg.rig.cameras.is_empty() {
        cfg.rig = source_rig.clone();
    }
    cfg.validate()?;
    Ok(())
}

fn load_scene(path: Option<&Path>) -> Result<SyntheticScene> {
    let scene = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("cannot parse scene {}", p.display()))?
        }
        None => SyntheticScene::tabletop(),
    };
    if let Err(e) = scene.validate() {
        bail!("invalid scene: {e}");
    }
    Ok(scene)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Replay { archive, out, config } => offline::replay(&archive, &out, config.load(None)?),
        Command::ExportPly {
            archive,
            frame_id,
            out,
            raw,
            config,
        } => offline::export_ply(&archive, frame_id, &out, raw, config.load(None)?),
        Command::Bench {
            scene,
            frames,
            csv,
            summary_csv,
            min_rate,
            config,
        } => {
            let cfg = config.load(None)?;
            offline::bench(cfg, load_scene(scene.as_deref())?, frames, csv, summary_csv, min_rate)
        }
        Command::GenScene {
            scene,
            out,
            frames,
            width,
            height,
            seed,
            depth_std,
            outlier_prob,
            dump_scene,
        } => {
            let mut s = load_scene(scene.as_deref())?;
            if let (Some(w), Some(h)) = (width, height) {
                s = s.with_resolution(w, h)?;
            }
            if let Some(v) = seed {
                s.seed = v;
            }
            if let Some(v) = depth_std {
                s.noise.depth_std_m = v;
            }
            if let Some(v) = outlier_prob {
                s.noise.outlier_prob = v;
            }
            if let Err(e) = s.validate() {
                bail!("invalid scene: {e}");
            }
            offline::gen_scene(&s, out.as_deref(), frames, dump_scene.as_deref())
        }
        Command::Serve {
            source,
            config,
            transport,
        } => {
            let cfg = config.load(Some(&transport))?;
            net::serve(cfg, &source)
        }
        Command::Recv {
            out,
            snapshot_every,
            max_frames,
            idle_timeout_ms,
            connect_timeout_ms,
            config,
            transport,
        } => {
            if snapshot_every > 0 && out.is_none() {
                bail!("--snapshot-every needs --out");
            }
            let cfg = config.load(Some(&transport))?;
            net::recv(
                &cfg,
                net::RecvOptions {
                    out,
                    snapshot_every,
                    max_frames,
                    idle_timeout_ms,
                    connect_timeout_ms,
                },
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
