//! Byte-exact vectors shared with docs/WIRE_FORMAT.md. The hex was produced
//! with Python's `struct` module, not with this crate.

use fusecast::protocol::{decode, encode_cloud, encode_wrist_image, WireMessage, WristImage};
use fusecast::transport::{fragment, parse_fragment, write_frame, FragmentHeader};
use fusecast::{PointCloud, Pose};

const EMPTY_CLOUD: &str = "4643535401000100070000000000000040420f00000000000400000000000000";

const TWO_POINTS: &str = concat!(
    "46435354010001002a0000000000000015cd5b07000000002200000002000000",
    "0000803f000000c00000003fff00800000803e0000000000004040010203",
);

const WRIST: &str = concat!(
    "46435354010002000900000000000000f4010000000000002600000002000100",
    "cdcccc3dcdcc4c3e9a99993e0000803f0000000000000000000000000a141e28",
    "323c",
);

const FRAGMENTS: [&str; 2] = [
    concat!(
        "2a00000000000000010000000200000046435354010001002a00000000000000",
        "15cd5b070000000022000000020000000000803f000000c0",
    ),
    concat!(
        "2a0000000000000001000100020000000000003fff00800000803e0000000000",
        "004040010203",
    ),
];

const STREAM_FRAME: &str = concat!(
    "200000004643535401000100070000000000000040420f000000000004000000",
    "00000000",
);

fn bytes(h: &str) -> Vec<u8> {
    hex::decode(h).unwrap()
}

fn two_points() -> PointCloud {
    let mut c = PointCloud::new(42, 123_456_789);
    c.push([1.0, -2.0, 0.5], [255, 0, 128]);
    c.push([0.25, 0.0, 3.0], [1, 2, 3]);
    c
}

fn wrist() -> WristImage {
    WristImage {
        frame_id: 9,
        timestamp_us: 500,
        width: 2,
        height: 1,
        pose: Pose {
            position: [0.1, 0.2, 0.3],
            orientation: [1.0, 0.0, 0.0, 0.0],
        },
        pixels: vec![10, 20, 30, 40, 50, 60],
    }
}

#[test]
fn empty_cloud() {
    let c = PointCloud::new(7, 1_000_000);
    assert_eq!(encode_cloud(&c).unwrap(), bytes(EMPTY_CLOUD));
    assert_eq!(decode(&bytes(EMPTY_CLOUD)).unwrap(), WireMessage::PointCloud(c));
}

#[test]
fn two_point_cloud() {
    assert_eq!(encode_cloud(&two_points()).unwrap(), bytes(TWO_POINTS));
    assert_eq!(decode(&bytes(TWO_POINTS)).unwrap(), WireMessage::PointCloud(two_points()));
}

#[test]
fn wrist_image() {
    assert_eq!(encode_wrist_image(&wrist()).unwrap(), bytes(WRIST));
    assert_eq!(decode(&bytes(WRIST)).unwrap(), WireMessage::WristRgb(wrist()));
}

#[test]
fn fragments() {
    let parts = fragment(&bytes(TWO_POINTS), 40).unwrap();
    assert_eq!(parts, FRAGMENTS.map(bytes));
    let (h, body) = parse_fragment(&parts[1]).unwrap();
    assert_eq!(
        h,
        FragmentHeader {
            frame_id: 42,
            msg_type: 1,
            index: 1,
            count: 2
        }
    );
    assert_eq!(body.len(), 22);
}

#[test]
fn stream_framing() {
    let mut out = Vec::new();
    write_frame(&mut out, &bytes(EMPTY_CLOUD), 1 << 20).unwrap();
    assert_eq!(out, bytes(STREAM_FRAME));
}
