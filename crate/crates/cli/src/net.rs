use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs, UdpSocket};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context, Result};
use fusecast::harness::{Archive, Renderer};
use fusecast::pipeline::{run_stream, FrameSet, PipelineConfig, PipelineError, SystemClock};
use fusecast::ply::write_ply_file;
use fusecast::transport::{
    read_frame, Counters, DatagramSender, MessageSink, Mode, ReceiverState, SharedReceiver, StreamSender,
    TransportError,
};
use fusecast::WireMessage;

use crate::offline::ply_name;
use crate::{load_scene, resolve_rig, SourceArgs};

const POLL: Duration = Duration::from_millis(20);

/// First Ctrl-C asks for a clean stop, the second exits at once.
fn stop_flag() -> Result<Arc<AtomicBool>> {
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    ctrlc::set_handler(move || {
        if s.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
    })
    .context("cannot install the interrupt handler")?;
    Ok(stop)
}

fn resolve(endpoint: &str) -> Result<SocketAddr> {
    endpoint
        .to_socket_addrs()
        .with_context(|| format!("invalid endpoint {endpoint:?}"))?
        .next()
        .ok_or_else(|| anyhow!("endpoint {endpoint:?} resolves to no address"))
}

pub fn serve(mut cfg: PipelineConfig, src: &SourceArgs) -> Result<()> {
    let archive = src.archive.as_deref().map(Archive::open).transpose()?;
    let scene = match archive {
        Some(_) => None,
        None => Some(load_scene(src.scene.as_deref())?),
    };
    let rig = match (&archive, &scene) {
        (Some(a), _) => a.rig().clone(),
        (_, Some(s)) => s.rig.clone(),
        _ => unreachable!(),
    };
    resolve_rig(&mut cfg, &rig)?;
    let stop = stop_flag()?;

    let tc = &cfg.transport;
    let mut sink: Box<dyn MessageSink> = match tc.mode {
        Mode::Stream => {
            let listener =
                TcpListener::bind(&tc.endpoint).with_context(|| format!("cannot listen on {}", tc.endpoint))?;
            eprintln!("listening on {}", listener.local_addr()?);
            listener.set_nonblocking(true)?;
            let stream = loop {
                match listener.accept() {
                    Ok((s, peer)) => {
                        eprintln!("client {peer} connected");
                        break s;
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        if stop.load(Ordering::SeqCst) {
                            eprintln!("interrupted before a client connected");
                            return Ok(());
                        }
                        thread::sleep(POLL);
                    }
                    Err(e) => return Err(e).context("accept failed"),
                }
            };
            stream.set_nonblocking(false)?;
            stream.set_nodelay(true)?;
            Box::new(StreamSender::new(stream, tc.max_message_bytes))
        }
        Mode::Datagram => {
            let peer = resolve(&tc.endpoint)?;
            let local = if peer.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" };
            let socket = UdpSocket::bind(local).context("cannot bind a UDP socket")?;
            eprintln!("sending datagrams to {peer}");
            Box::new(DatagramSender::new(socket, peer, tc.fragment_payload, tc.max_message_bytes)?)
        }
    };

    match (&archive, &scene) {
        (Some(a), _) => stream_out(a.iter().map(|r| r.map_err(PipelineError::from)), &cfg, &mut *sink, &stop),
        (_, Some(s)) => {
            let r = Renderer::new(s, cfg.exec);
            stream_out((0..src.frames).map(|i| Ok(r.render(i))), &cfg, &mut *sink, &stop)
        }
        _ => unreachable!(),
    }
}

fn stream_out<I>(source: I, cfg: &PipelineConfig, sink: &mut dyn MessageSink, stop: &AtomicBool) -> Result<()>
where
    I: Iterator<Item = Result<FrameSet, PipelineError>>,
{
    // Capture times are replayed relative to the first frameset.
    let mut t0 = None;
    let rebased = source.map(|r| {
        r.map(|mut fs: FrameSet| {
            let base = *t0.get_or_insert(fs.capture_timestamp_us);
            fs.capture_timestamp_us = fs.capture_timestamp_us.saturating_sub(base);
            fs
        })
    });
    let clock = SystemClock::new();
    match run_stream(rebased, cfg, sink, &clock, Some(stop)) {
        Ok(stats) => {
            if stop.load(Ordering::SeqCst) {
                eprintln!("interrupted");
            }
            print!("{stats}");
            Ok(())
        }
        Err(f) => {
            print!("{}", f.stats);
            Err(f.error).context("stream aborted")
        }
    }
}

pub struct RecvOptions {
    pub out: Option<PathBuf>,
    pub snapshot_every: u64,
    pub max_frames: Option<u64>,
    pub idle_timeout_ms: u64,
    pub connect_timeout_ms: u64,
}

struct Snapshots {
    out: Option<PathBuf>,
    every: u64,
    max_frames: Option<u64>,
    clouds: u64,
    written: u64,
}

impl Snapshots {
    /// Handles one newly exposed message; true once `max_frames` is reached.
    fn exposed(&mut self, msg: &WireMessage) -> Result<bool> {
        let WireMessage::PointCloud(cloud) = msg else {
            return Ok(false);
        };
        self.clouds += 1;
        log::info!("cloud {} with {} points", cloud.frame_id, cloud.len());
        if let Some(dir) = self.out.as_ref().filter(|_| self.every > 0 && self.clouds.is_multiple_of(self.every)) {
            let path = dir.join(ply_name(cloud.frame_id));
            write_ply_file(cloud, &path).with_context(|| format!("cannot write {}", path.display()))?;
            self.written += 1;
        }
        Ok(self.max_frames.is_some_and(|m| self.clouds >= m))
    }
}

fn report(c: &Counters, snaps: &Snapshots) {
    println!(
        "received {}  exposed {}  dropped_stale {}  corrupt {}  pending {}  late_fragments {}",
        c.received, c.exposed, c.dropped_stale, c.corrupt, c.pending, c.late_fragments
    );
    println!("clouds {}  snapshots written {}", snaps.clouds, snaps.written);
}

pub fn recv(cfg: &PipelineConfig, opts: RecvOptions) -> Result<()> {
    if let Some(dir) = &opts.out {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let stop = stop_flag()?;
    let snaps = Snapshots {
        out: opts.out,
        every: opts.snapshot_every,
        max_frames: opts.max_frames,
        clouds: 0,
        written: 0,
    };
    match cfg.transport.mode {
        Mode::Stream => recv_stream(cfg, snaps, opts.connect_timeout_ms, &stop),
        Mode::Datagram => recv_datagram(cfg, snaps, opts.idle_timeout_ms, &stop),
    }
}

fn recv_stream(cfg: &PipelineConfig, mut snaps: Snapshots, connect_timeout_ms: u64, stop: &AtomicBool) -> Result<()> {
    let tc = &cfg.transport;
    let deadline = Instant::now() + Duration::from_millis(connect_timeout_ms);
    let stream = loop {
        match TcpStream::connect(&tc.endpoint) {
            Ok(s) => break s,
            Err(_) if Instant::now() < deadline && !stop.load(Ordering::SeqCst) => thread::sleep(POLL * 5),
            Err(e) => return Err(e).with_context(|| format!("cannot connect to {}", tc.endpoint)),
        }
    };
    let shared = SharedReceiver::new(tc.receive_buffer_frames);
    let state = shared.clone();
    let max = tc.max_message_bytes;
    let reader = thread::spawn(move || -> (Snapshots, Result<()>) {
        let mut r = BufReader::new(stream);
        loop {
            let msg = match read_frame(&mut r, max) {
                Ok(Some(m)) => m,
                Ok(None) => return (snaps, Ok(())),
                Err(TransportError::Closed) => {
                    return (snaps, Err(anyhow!("connection lost in the middle of a message")))
                }
                Err(e) => return (snaps, Err(anyhow::Error::new(e).context("receive failed"))),
            };
            if let Some(m) = state.ingest_message(&msg) {
                match snaps.exposed(&m) {
                    Ok(false) => {}
                    Ok(true) => return (snaps, Ok(())),
                    Err(e) => return (snaps, Err(e)),
                }
            }
        }
    });
    while !reader.is_finished() {
        if stop.load(Ordering::SeqCst) {
            eprintln!("interrupted");
            println!("received {}  (interrupted, snapshots so far are on disk)", shared.counters().received);
            return Ok(());
        }
        thread::sleep(POLL);
    }
    let (snaps, result) = reader.join().map_err(|_| anyhow!("receiver thread panicked"))?;
    report(&shared.counters(), &snaps);
    result
}

fn recv_datagram(cfg: &PipelineConfig, mut snaps: Snapshots, idle_timeout_ms: u64, stop: &AtomicBool) -> Result<()> {
    let tc = &cfg.transport;
    let socket = UdpSocket::bind(&tc.endpoint).with_context(|| format!("cannot bind {}", tc.endpoint))?;
    eprintln!("listening on {}", socket.local_addr()?);
    socket.set_read_timeout(Some(POLL * 5))?;
    let idle = Duration::from_millis(idle_timeout_ms);
    let mut state = ReceiverState::new(tc.receive_buffer_frames);
    let mut buf = vec![0u8; 1 << 16];
    let mut last = Instant::now();
    let result = loop {
        if stop.load(Ordering::SeqCst) {
            eprintln!("interrupted");
            break Ok(());
        }
        match socket.recv(&mut buf) {
            Ok(n) => {
                last = Instant::now();
                if let Some(m) = state.ingest_datagram(&buf[..n]) {
                    match snaps.exposed(&m) {
                        Ok(false) => {}
                        Ok(true) => break Ok(()),
                        Err(e) => break Err(e),
                    }
                }
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                if last.elapsed() >= idle {
                    log::info!("no datagrams for {idle_timeout_ms} ms");
                    break Ok(());
                }
            }
            Err(e) => break Err(anyhow::Error::new(e).context("receive failed")),
        }
    };
    report(&state.counters(), &snaps);
    result
}
