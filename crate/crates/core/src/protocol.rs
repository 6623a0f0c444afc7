//! Binary wire format for point-cloud and wrist-RGB messages.
//!
//! Every message is a 28-byte header followed by a payload, little-endian
//! throughout:
//!
//! ```text
//! offset size field
//!      0    4 magic        b"FCST"
//!      4    2 version      1
//!      6    2 msg_type     1 = point cloud, 2 = wrist RGB
//!      8    8 frame_id
//!     16    8 timestamp_us
//!     24    4 payload_len  bytes following the header
//! ```
//!
//! Point-cloud payload: `u32 point_count`, then `point_count` records of
//! `f32 x, f32 y, f32 z, u8 r, u8 g, u8 b` (15 bytes, unpadded).
//!
//! Wrist-RGB payload: `u16 width, u16 height`, pose as seven `f32`
//! (`px py pz qw qx qy qz`), then `width·height·3` bytes of row-major RGB.
//!
//! See `docs/WIRE_FORMAT.md` for golden vectors.

use thiserror::Error;

use crate::geometry::{Pose, PointCloud, RgbdFrame, QUATERNION_NORM_TOLERANCE};

pub const MAGIC: [u8; 4] = *b"FCST";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 28;
pub const POINT_RECORD_LEN: usize = 15;
pub const CLOUD_COUNT_LEN: usize = 4;
pub const WRIST_FIXED_LEN: usize = 4 + 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u16)]
pub enum MsgType {
    PointCloud = 1,
    WristRgb = 2,
}

impl MsgType {
    pub fn from_u16(v: u16) -> Option<MsgType> {
        match v {
            1 => Some(MsgType::PointCloud),
            2 => Some(MsgType::WristRgb),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WireHeader {
    pub version: u16,
    pub msg_type: MsgType,
    pub frame_id: u64,
    pub timestamp_us: u64,
    pub payload_len: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WristImage {
    pub frame_id: u64,
    pub timestamp_us: u64,
    pub width: u16,
    pub height: u16,
    pub pose: Pose,
    /// Row-major RGB, `width·height·3` bytes.
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum WireMessage {
    PointCloud(PointCloud),
    WristRgb(WristImage),
}

impl WireMessage {
    pub fn msg_type(&self) -> MsgType {
        match self {
            WireMessage::PointCloud(_) => MsgType::PointCloud,
            WireMessage::WristRgb(_) => MsgType::WristRgb,
        }
    }

    pub fn frame_id(&self) -> u64 {
        match self {
            WireMessage::PointCloud(c) => c.frame_id,
            WireMessage::WristRgb(w) => w.frame_id,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, EncodeError> {
        match self {
            WireMessage::PointCloud(c) => encode_cloud(c),
            WireMessage::WristRgb(w) => encode_wrist_image(w),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("point {index} has a non-finite coordinate")]
    NonFiniteCoordinate { index: usize },
    #[error("positions ({positions}) and colors ({colors}) differ in length")]
    ColumnLength { positions: usize, colors: usize },
    #[error("message payload of {0} bytes does not fit the 32-bit length field")]
    TooLarge(usize),
    #[error("wrist image {width}x{height} exceeds the 16-bit size fields")]
    ImageTooLarge { width: u32, height: u32 },
    #[error("wrist image has {actual} pixel bytes, expected {expected}")]
    PixelBufferSize { actual: usize, expected: usize },
    #[error("pose quaternion norm {0} is not 1")]
    NonUnitQuaternion(f64),
    #[error("pose has a non-finite component")]
    NonFinitePose,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated message: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown message type {0}")]
    UnknownMessageType(u16),
    #[error("payload_len {declared} but {actual} payload bytes present")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("point count {count} inconsistent with payload length {payload_len}")]
    PointCountMismatch { count: u32, payload_len: usize },
    #[error("point {index} has a non-finite coordinate")]
    NonFiniteCoordinate { index: usize },
    #[error("wrist image {width}x{height} inconsistent with payload length {payload_len}")]
    WristSizeMismatch { width: u16, height: u16, payload_len: usize },
    #[error("pose is not finite or its quaternion is not unit length")]
    InvalidPose,
}

/// Encoded size of a point-cloud message with `points` points.
pub const fn cloud_message_len(points: usize) -> usize {
    HEADER_LEN + CLOUD_COUNT_LEN + POINT_RECORD_LEN * points
}

/// Encoded size of a wrist message for a `width`×`height` image.
pub const fn wrist_message_len(width: usize, height: usize) -> usize {
    HEADER_LEN + WRIST_FIXED_LEN + 3 * width * height
}

/// Link bandwidth needed to ship `points`-point clouds at `rate_hz`.
pub fn bandwidth_bytes_per_second(rate_hz: f64, points: usize) -> f64 {
    rate_hz * cloud_message_len(points) as f64
}

fn put_header(buf: &mut Vec<u8>, msg_type: MsgType, frame_id: u64, timestamp_us: u64, payload_len: u32) {
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(msg_type as u16).to_le_bytes());
    buf.extend_from_slice(&frame_id.to_le_bytes());
    buf.extend_from_slice(&timestamp_us.to_le_bytes());
    buf.extend_from_slice(&payload_len.to_le_bytes());
}

pub fn encode_cloud(cloud: &PointCloud) -> Result<Vec<u8>, EncodeError> {
    let mut buf = Vec::new();
    encode_cloud_into(cloud, &mut buf)?;
    Ok(buf)
}

/// Appends the encoded message to `buf`; on error `buf` is left unchanged.
pub fn encode_cloud_into(cloud: &PointCloud, buf: &mut Vec<u8>) -> Result<(), EncodeError> {
    if cloud.positions.len() != cloud.colors.len() {
        return Err(EncodeError::ColumnLength {
            positions: cloud.positions.len(),
            colors: cloud.colors.len(),
        });
    }
    if let Some(index) = cloud.first_non_finite() {
        return Err(EncodeError::NonFiniteCoordinate { index });
    }
    let n = cloud.len();
    let payload_len = CLOUD_COUNT_LEN + POINT_RECORD_LEN * n;
    let payload_len_u32 = u32::try_from(payload_len).map_err(|_| EncodeError::TooLarge(payload_len))?;
    buf.reserve(HEADER_LEN + payload_len);
    put_header(buf, MsgType::PointCloud, cloud.frame_id, cloud.timestamp_us, payload_len_u32);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        let mut rec = [0u8; POINT_RECORD_LEN];
        rec[0..4].copy_from_slice(&p[0].to_le_bytes());
        rec[4..8].copy_from_slice(&p[1].to_le_bytes());
        rec[8..12].copy_from_slice(&p[2].to_le_bytes());
        rec[12..15].copy_from_slice(c);
        buf.extend_from_slice(&rec);
    }
    Ok(())
}

fn check_pose(pose: &Pose) -> Result<(), EncodeError> {
    if pose.position.iter().chain(&pose.orientation).any(|v| !v.is_finite()) {
        return Err(EncodeError::NonFinitePose);
    }
    let n = pose.quaternion_norm();
    if (n - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
        return Err(EncodeError::NonUnitQuaternion(n));
    }
    Ok(())
}

/// Encodes the color image of a wrist frame with the end-effector pose.
pub fn encode_wrist(frame: &RgbdFrame, pose: &Pose) -> Result<Vec<u8>, EncodeError> {
    let (width, height) = match (u16::try_from(frame.width), u16::try_from(frame.height)) {
        (Ok(w), Ok(h)) => (w, h),
        _ => {
            return Err(EncodeError::ImageTooLarge {
                width: frame.width,
                height: frame.height,
            })
        }
    };
    if frame.color.len() != frame.pixel_count() {
        return Err(EncodeError::PixelBufferSize {
            actual: frame.color.len() * 3,
            expected: frame.pixel_count() * 3,
        });
    }
    check_pose(pose)?;
    let mut buf = Vec::with_capacity(wrist_message_len(width as usize, height as usize));
    let payload_len = WRIST_FIXED_LEN + 3 * frame.color.len();
    put_header(&mut buf, MsgType::WristRgb, frame.frame_id, frame.timestamp_us, payload_len as u32);
    put_wrist_fixed(&mut buf, width, height, pose);
    for px in &frame.color {
        buf.extend_from_slice(px);
    }
    Ok(buf)
}

pub fn encode_wrist_image(img: &WristImage) -> Result<Vec<u8>, EncodeError> {
    let expected = 3 * img.width as usize * img.height as usize;
    if img.pixels.len() != expected {
        return Err(EncodeError::PixelBufferSize {
            actual: img.pixels.len(),
            expected,
        });
    }
    check_pose(&img.pose)?;
    let mut buf = Vec::with_capacity(HEADER_LEN + WRIST_FIXED_LEN + expected);
    put_header(
        &mut buf,
        MsgType::WristRgb,
        img.frame_id,
        img.timestamp_us,
        (WRIST_FIXED_LEN + expected) as u32,
    );
    put_wrist_fixed(&mut buf, img.width, img.height, &img.pose);
    buf.extend_from_slice(&img.pixels);
    Ok(buf)
}

fn put_wrist_fixed(buf: &mut Vec<u8>, width: u16, height: u16, pose: &Pose) {
    buf.extend_from_slice(&width.to_le_bytes());
    buf.extend_from_slice(&height.to_le_bytes());
    for v in pose.position.iter().chain(&pose.orientation) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

#[inline]
fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

#[inline]
fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

#[inline]
fn le_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

#[inline]
fn le_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Parses and validates the fixed header only.
pub fn decode_header(bytes: &[u8]) -> Result<WireHeader, DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    let version = le_u16(bytes, 4);
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let raw_type = le_u16(bytes, 6);
    let msg_type = MsgType::from_u16(raw_type).ok_or(DecodeError::UnknownMessageType(raw_type))?;
    Ok(WireHeader {
        version,
        msg_type,
        frame_id: le_u64(bytes, 8),
        timestamp_us: le_u64(bytes, 16),
        payload_len: le_u32(bytes, 24),
    })
}

/// Decodes one complete message. Never reads past `bytes`.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, DecodeError> {
    let header = decode_header(bytes)?;
    let declared = header.payload_len as usize;
    let actual = bytes.len() - HEADER_LEN;
    if actual < declared {
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN + declared,
            available: bytes.len(),
        });
    }
    if actual > declared {
        return Err(DecodeError::LengthMismatch { declared, actual });
    }
    let payload = &bytes[HEADER_LEN..];
    match header.msg_type {
        MsgType::PointCloud => decode_cloud_payload(&header, payload).map(WireMessage::PointCloud),
        MsgType::WristRgb => decode_wrist_payload(&header, payload).map(WireMessage::WristRgb),
    }
}

fn decode_cloud_payload(h: &WireHeader, payload: &[u8]) -> Result<PointCloud, DecodeError> {
    if payload.len() < CLOUD_COUNT_LEN {
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN + CLOUD_COUNT_LEN,
            available: HEADER_LEN + payload.len(),
        });
    }
    let count = le_u32(payload, 0);
    let records = &payload[CLOUD_COUNT_LEN..];
    if records.len() as u64 != count as u64 * POINT_RECORD_LEN as u64 {
        return Err(DecodeError::PointCountMismatch {
            count,
            payload_len: payload.len(),
        });
    }
    let mut cloud = PointCloud::with_capacity(h.frame_id, h.timestamp_us, count as usize);
    for (index, rec) in records.chunks_exact(POINT_RECORD_LEN).enumerate() {
        let p = [le_f32(rec, 0), le_f32(rec, 4), le_f32(rec, 8)];
        if !(p[0].is_finite() && p[1].is_finite() && p[2].is_finite()) {
            return Err(DecodeError::NonFiniteCoordinate { index });
        }
        cloud.push(p, [rec[12], rec[13], rec[14]]);
    }
    Ok(cloud)
}

fn decode_wrist_payload(h: &WireHeader, payload: &[u8]) -> Result<WristImage, DecodeError> {
    if payload.len() < WRIST_FIXED_LEN {
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN + WRIST_FIXED_LEN,
            available: HEADER_LEN + payload.len(),
        });
    }
    let width = le_u16(payload, 0);
    let height = le_u16(payload, 2);
    let pixel_bytes = 3 * width as usize * height as usize;
    if payload.len() != WRIST_FIXED_LEN + pixel_bytes {
        return Err(DecodeError::WristSizeMismatch {
            width,
            height,
            payload_len: payload.len(),
        });
    }
    let f = |i: usize| le_f32(payload, 4 + 4 * i);
    let pose = Pose {
        position: [f(0), f(1), f(2)],
        orientation: [f(3), f(4), f(5), f(6)],
    };
    if check_pose(&pose).is_err() {
        return Err(DecodeError::InvalidPose);
    }
    Ok(WristImage {
        frame_id: h.frame_id,
        timestamp_us: h.timestamp_us,
        width,
        height,
        pose,
        pixels: payload[WRIST_FIXED_LEN..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hex(s: &str) -> Vec<u8> {
        ::hex::decode(s.split_whitespace().collect::<String>()).unwrap()
    }

    #[test]
    fn empty_cloud_is_32_bytes() {
        let bytes = encode_cloud(&PointCloud::default()).unwrap();
        assert_eq!(bytes.len(), 32);
        assert_eq!(&bytes[28..], &[0, 0, 0, 0]);
        assert_eq!(decode(&bytes).unwrap(), WireMessage::PointCloud(PointCloud::default()));
    }

    #[test]
    fn budget_sized_payload() {
        assert_eq!(cloud_message_len(75_000) - HEADER_LEN, 1_125_004);
        assert_eq!(cloud_message_len(75_000), 1_125_032);
    }

    // Hand-assembled from the layout table:
    //   1.0f32 = 0x3f800000, -2.0f32 = 0xc0000000, 0.5f32 = 0x3f000000
    #[test]
    fn single_point_golden_bytes() {
        let mut c = PointCloud::new(0x0102030405060708, 1_000_000);
        c.push([1.0, -2.0, 0.5], [255, 0, 128]);
        let golden = hex(
            "46435354 0100 0100 0807060504030201 40420f0000000000 13000000
             01000000 0000803f 000000c0 0000003f ff0080",
        );
        assert_eq!(encode_cloud(&c).unwrap(), golden);
        assert_eq!(decode(&golden).unwrap(), WireMessage::PointCloud(c));
    }

    #[test]
    fn wrist_golden_bytes() {
        let mut f = RgbdFrame::blank(3, 9, 42, 2, 2);
        f.color = vec![[1, 2, 3], [4, 5, 6], [7, 8, 9], [10, 11, 12]];
        let bytes = encode_wrist(&f, &Pose::identity()).unwrap();
        let golden = hex(
            "46435354 0100 0200 0900000000000000 2a00000000000000 2c000000
             0200 0200
             00000000 00000000 00000000 0000803f 00000000 00000000 00000000
             010203 040506 070809 0a0b0c",
        );
        assert_eq!(bytes, golden);
        assert_eq!(bytes.len() - HEADER_LEN, 32 + 12);
        let WireMessage::WristRgb(img) = decode(&bytes).unwrap() else {
            panic!("wrong type")
        };
        assert_eq!((img.width, img.height, img.frame_id, img.timestamp_us), (2, 2, 9, 42));
        assert_eq!(img.pixels, (1..=12).collect::<Vec<u8>>());
        assert_eq!(encode_wrist_image(&img).unwrap(), bytes);
    }

    #[test]
    fn nan_refused() {
        let mut c = PointCloud::default();
        c.push([0.0; 3], [0; 3]);
        c.push([0.0, f32::NAN, 0.0], [0; 3]);
        assert_eq!(encode_cloud(&c), Err(EncodeError::NonFiniteCoordinate { index: 1 }));
        let mut buf = vec![7u8];
        assert!(encode_cloud_into(&c, &mut buf).is_err());
        assert_eq!(buf, vec![7u8]);
    }

    #[test]
    fn zero_quaternion_refused() {
        let f = RgbdFrame::blank(0, 0, 0, 2, 2);
        let pose = Pose {
            position: [0.0; 3],
            orientation: [0.0; 4],
        };
        assert!(matches!(encode_wrist(&f, &pose), Err(EncodeError::NonUnitQuaternion(_))));
    }

    #[test]
    fn classified_rejections() {
        let mut c = PointCloud::new(5, 6);
        c.push([1.0, 2.0, 3.0], [4, 5, 6]);
        let good = encode_cloud(&c).unwrap();

        let mut m = good.clone();
        m[1] ^= 0xff;
        assert!(matches!(decode(&m), Err(DecodeError::BadMagic(_))));

        let mut m = good.clone();
        m[4] = 2;
        assert_eq!(decode(&m), Err(DecodeError::UnsupportedVersion(2)));

        let mut m = good.clone();
        m[6] = 9;
        assert_eq!(decode(&m), Err(DecodeError::UnknownMessageType(9)));

        let mut m = good.clone();
        m.push(0);
        assert!(matches!(decode(&m), Err(DecodeError::LengthMismatch { .. })));

        let mut m = good.clone();
        m[28] = 2; // count says 2, payload holds 1
        assert!(matches!(decode(&m), Err(DecodeError::PointCountMismatch { count: 2, .. })));

        let mut m = good.clone();
        m[32..36].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert_eq!(decode(&m), Err(DecodeError::NonFiniteCoordinate { index: 0 }));

        for cut in 0..good.len() {
            assert!(matches!(decode(&good[..cut]), Err(DecodeError::Truncated { .. })), "prefix {cut}");
        }
    }

    #[test]
    fn bandwidth_at_budget_and_rate() {
        assert_eq!(bandwidth_bytes_per_second(10.0, 75_000), 11_250_320.0);
    }
}
