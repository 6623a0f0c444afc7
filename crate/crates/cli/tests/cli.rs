use std::fs;
use std::io::Read;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use ply_rs::parser::Parser;
use ply_rs::ply::{DefaultElement, Property};

fn fusecast() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fusecast"))
}

fn run(args: &[&str]) -> Output {
    fusecast().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_archive(dir: &Path, frames: u32) -> PathBuf {
    let archive = dir.join("archive");
    ok(&[
        "gen-scene",
        "--out",
        p(&archive),
        "--frames",
        &frames.to_string(),
        "--width",
        "160",
        "--height",
        "120",
    ]);
    archive
}

fn ply_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ply"))
        .collect();
    v.sort();
    v
}

fn read_vertices(path: &Path) -> Vec<([f32; 3], [u8; 3])> {
    let mut f = fs::File::open(path).unwrap();
    let ply = Parser::<DefaultElement>::new().read_ply(&mut f).unwrap();
    let f32_of = |e: &DefaultElement, k: &str| match e[k] {
        Property::Float(v) => v,
        ref other => panic!("{k} is {other:?}"),
    };
    let u8_of = |e: &DefaultElement, k: &str| match e[k] {
        Property::UChar(v) => v,
        ref other => panic!("{k} is {other:?}"),
    };
    ply.payload["vertex"]
        .iter()
        .map(|e| {
            (
                [f32_of(e, "x"), f32_of(e, "y"), f32_of(e, "z")],
                [u8_of(e, "red"), u8_of(e, "green"), u8_of(e, "blue")],
            )
        })
        .collect()
}

#[test]
fn replay_writes_one_ply_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let archive = gen_archive(dir.path(), 10);
    let out = dir.path().join("out");
    let stdout = ok(&["replay", "--archive", p(&archive), "--out", p(&out)]);
    assert!(stdout.contains("replayed 10 frames"), "{stdout}");
    let files = ply_files(&out);
    assert_eq!(files.len(), 10);
    for f in &files {
        let v = read_vertices(f);
        assert!(!v.is_empty() && v.len() <= 75_000, "{}: {}", f.display(), v.len());
    }

    // export-ply of one frame matches its replay output
    let single = dir.path().join("single.ply");
    ok(&["export-ply", "--archive", p(&archive), "--frame-id", "3", "--out", p(&single)]);
    assert_eq!(fs::read(&single).unwrap(), fs::read(out.join("frame_00000003.ply")).unwrap());
    let raw = dir.path().join("raw.ply");
    ok(&["export-ply", "--archive", p(&archive), "--frame-id", "3", "--out", p(&raw), "--raw"]);
    assert!(read_vertices(&raw).len() > read_vertices(&single).len());
}

#[test]
fn replay_is_bitwise_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let archive = gen_archive(dir.path(), 4);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["replay", "--archive", p(&archive), "--out", p(&a)]);
    ok(&["replay", "--archive", p(&archive), "--out", p(&b)]);
    ok(&["replay", "--archive", p(&archive), "--out", p(&c), "--exec", "sequential"]);
    let (fa, fb, fc) = (ply_files(&a), ply_files(&b), ply_files(&c));
    assert_eq!(fa.len(), 4);
    for ((x, y), z) in fa.iter().zip(&fb).zip(&fc) {
        let bytes = fs::read(x).unwrap();
        assert_eq!(bytes, fs::read(y).unwrap());
        assert_eq!(bytes, fs::read(z).unwrap());
    }
}

#[test]
fn empty_archive_replays_to_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let archive = gen_archive(dir.path(), 0);
    let out = dir.path().join("out");
    let stdout = ok(&["replay", "--archive", p(&archive), "--out", p(&out)]);
    assert!(stdout.contains("replayed 0 frames"), "{stdout}");
    assert!(ply_files(&out).is_empty());
}

#[test]
fn damaged_archive_fails_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let archive = gen_archive(dir.path(), 2);
    let depth = archive.join("frames/00000001/cam1.depth");
    fs::write(&depth, [0u8; 100]).unwrap();
    let out = run(&["replay", "--archive", p(&archive), "--out", p(&dir.path().join("out"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cam1.depth") && err.contains("size mismatch"), "{err}");
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    for args in [
        vec!["replay", "--archive", p(&missing), "--out", p(dir.path())],
        vec!["serve", "--endpoint", "not-an-endpoint", "--frames", "1"],
        vec!["recv", "--endpoint", "256.0.0.1:99999", "--connect-timeout-ms", "0"],
        vec!["recv", "--snapshot-every", "2"],
        vec!["bench", "--frames", "1", "--voxel-leaf", "-1"],
        vec!["gen-scene", "--frames", "1"],
    ] {
        let out = run(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"), "{args:?}");
    }
}

#[test]
fn config_file_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let archive = gen_archive(dir.path(), 1);
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "[filter]\npoint_budget = 500\n").unwrap();
    let out = dir.path().join("out");
    ok(&["replay", "--archive", p(&archive), "--out", p(&out), "--config", p(&cfg)]);
    assert_eq!(read_vertices(&ply_files(&out)[0]).len(), 500);

    fs::write(&cfg, "[filter]\nno_such_key = 1\n").unwrap();
    let bad = run(&["replay", "--archive", p(&archive), "--out", p(&out), "--config", p(&cfg)]);
    assert!(!bad.status.success());
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.json");
    ok(&["gen-scene", "--width", "96", "--height", "72", "--dump-scene", p(&scene)]);
    let (frames, summary) = (dir.path().join("frames.csv"), dir.path().join("summary.csv"));
    let stdout = ok(&[
        "bench",
        "--scene",
        p(&scene),
        "--frames",
        "3",
        "--csv",
        p(&frames),
        "--summary-csv",
        p(&summary),
    ]);
    assert!(stdout.contains("Hz"), "{stdout}");
    let text = fs::read_to_string(&frames).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(lines.count(), 3);
    assert!(header.contains(&"frame_id") && header.contains(&"points"), "{header:?}");
    assert!(fs::read_to_string(&summary).unwrap().lines().count() > 1);

    let slow = run(&["bench", "--scene", p(&scene), "--frames", "1", "--min-rate", "1e9"]);
    assert!(!slow.status.success());
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn serve_and_recv_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let archive = gen_archive(dir.path(), 6);
    let replayed = dir.path().join("replayed");
    ok(&["replay", "--archive", p(&archive), "--out", p(&replayed)]);

    let endpoint = format!("127.0.0.1:{}", free_port());
    let mut server = fusecast()
        .args(["serve", "--archive", p(&archive), "--endpoint", &endpoint])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let snaps = dir.path().join("snaps");
    let recv = run(&[
        "recv",
        "--endpoint",
        &endpoint,
        "--out",
        p(&snaps),
        "--snapshot-every",
        "1",
    ]);
    let status = server.wait().unwrap();
    let mut server_err = String::new();
    server.stderr.take().unwrap().read_to_string(&mut server_err).unwrap();
    assert!(status.success(), "{server_err}");
    assert!(recv.status.success(), "{}", String::from_utf8_lossy(&recv.stderr));

    let stdout = String::from_utf8(recv.stdout).unwrap();
    assert!(stdout.contains("corrupt 0"), "{stdout}");
    let got = ply_files(&snaps);
    assert!(!got.is_empty());
    for f in got {
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(&f).unwrap(), fs::read(replayed.join(name)).unwrap(), "{name:?}");
    }
}

#[test]
fn recv_without_snapshots_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let archive = gen_archive(dir.path(), 3);
    let endpoint = format!("127.0.0.1:{}", free_port());
    let mut server = fusecast()
        .args(["serve", "--archive", p(&archive), "--endpoint", &endpoint])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let snaps = dir.path().join("snaps");
    let stdout = ok(&["recv", "--endpoint", &endpoint, "--out", p(&snaps), "--snapshot-every", "0"]);
    assert!(server.wait().unwrap().success());
    assert!(stdout.contains("snapshots written 0"), "{stdout}");
    assert!(ply_files(&snaps).is_empty());
}

#[test]
fn datagram_recv_counts_garbage_and_keeps_going() {
    let dir = tempfile::tempdir().unwrap();
    let archive = gen_archive(dir.path(), 3);
    let port = std::net::UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("127.0.0.1:{port}");
    let receiver = fusecast()
        .args([
            "recv",
            "--mode",
            "datagram",
            "--endpoint",
            &endpoint,
            "--idle-timeout-ms",
            "1500",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    std::thread::sleep(std::time::Duration::from_millis(300));
    let junk = std::net::UdpSocket::bind("127.0.0.1:0").unwrap();
    junk.send_to(b"definitely not a fragment", &endpoint).unwrap();
    ok(&["serve", "--archive", p(&archive), "--mode", "datagram", "--endpoint", &endpoint, "--fragment-payload", "8192"]);
    let out = receiver.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("corrupt 1"), "{stdout}");
    assert!(stdout.contains("clouds 3"), "{stdout}");
}
