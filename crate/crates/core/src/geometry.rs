//! Pinhole camera model, depth back-projection and rigid transforms.
//!
//! Camera frames follow the usual optical convention: x to the right,
//! y down, z forward along the optical axis. Depth images store raw sensor
//! units; `Intrinsics::depth_scale` converts them to meters and a raw value
//! of 0 marks an invalid pixel.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Semantic class carried by each mask pixel.
pub type ClassId = u8;

pub const CLASS_BACKGROUND: ClassId = 0;
pub const CLASS_ROBOT: ClassId = 1;
pub const CLASS_GRIPPER: ClassId = 2;
pub const CLASS_WRIST_MOUNT: ClassId = 3;
pub const CLASS_TABLE: ClassId = 4;

/// The fixed class table: id and human-readable name.
pub const CLASS_TABLE_ENTRIES: [(ClassId, &str); 5] = [
    (CLASS_BACKGROUND, "background"),
    (CLASS_ROBOT, "robot"),
    (CLASS_GRIPPER, "gripper"),
    (CLASS_WRIST_MOUNT, "wrist_mount"),
    (CLASS_TABLE, "table"),
];

pub fn is_known_class(id: ClassId) -> bool {
    CLASS_TABLE_ENTRIES.iter().any(|&(c, _)| c == id)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal (max |RᵀR - I| = {deviation:e}, det = {det})")]
    NotOrthonormal { deviation: f64, det: f64 },
    #[error("non-finite transform component")]
    NonFiniteTransform,
    #[error(
        "camera {camera_id}: frame is {frame_width}x{frame_height} \
         but intrinsics expect {width}x{height}"
    )]
    DimensionMismatch {
        camera_id: u16,
        frame_width: u32,
        frame_height: u32,
        width: u32,
        height: u32,
    },
    #[error("camera {camera_id}: {image} buffer has {actual} pixels, expected {expected}")]
    BufferSize {
        camera_id: u16,
        image: &'static str,
        actual: usize,
        expected: usize,
    },
    #[error("keep-class set is empty")]
    EmptyKeepClasses,
    #[error("quaternion norm {0} is not 1")]
    NonUnitQuaternion(f64),
}

/// Pinhole intrinsics plus the raw-depth scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsRepr")]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Meters per raw depth unit.
    pub depth_scale: f64,
}

#[derive(Deserialize)]
struct IntrinsicsRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    #[serde(default = "default_depth_scale")]
    depth_scale: f64,
}

fn default_depth_scale() -> f64 {
    DEFAULT_DEPTH_SCALE
}

/// Millimeter depth units.
pub const DEFAULT_DEPTH_SCALE: f64 = 0.001;

impl TryFrom<IntrinsicsRepr> for Intrinsics {
    type Error = GeometryError;
    fn try_from(r: IntrinsicsRepr) -> Result<Self, Self::Error> {
        Intrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height, r.depth_scale)
    }
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        depth_scale: f64,
    ) -> Result<Self, GeometryError> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale,
        };
        k.validate()?;
        Ok(k)
    }

    /// A camera with the given horizontal field of view and centered
    /// principal point, square pixels, millimeter depth.
    pub fn from_fov(width: u32, height: u32, hfov_deg: f64) -> Result<Self, GeometryError> {
        let fx = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Intrinsics::new(
            fx,
            fx,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
            DEFAULT_DEPTH_SCALE,
        )
    }

    /// Same camera sampled at a different resolution.
    pub fn resized(&self, width: u32, height: u32) -> Result<Self, GeometryError> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Intrinsics::new(
            self.fx * sx,
            self.fy * sy,
            (self.cx + 0.5) * sx - 0.5,
            (self.cy + 0.5) * sy - 0.5,
            width,
            height,
            self.depth_scale,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fx.is_finite() && self.fy > 0.0 && self.fy.is_finite()) {
            return bad("focal lengths must be positive and finite");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be nonzero");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside [0, width)");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside [0, height)");
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return bad("depth_scale must be positive");
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    /// Points at or behind the camera plane yield `None`.
    pub fn project(&self, p: [f32; 3]) -> Option<(f64, f64)> {
        let z = p[2] as f64;
        if z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p[0] as f64 / z + self.cx,
            self.fy * p[1] as f64 / z + self.cy,
        ))
    }
}

/// Rotation followed by translation: `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRepr", into = "TransformRepr")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// Serialized form: row-major rotation rows and a translation vector.
#[derive(Serialize, Deserialize)]
struct TransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<TransformRepr> for RigidTransform {
    type Error = GeometryError;
    fn try_from(r: TransformRepr) -> Result<Self, Self::Error> {
        RigidTransform::from_rows(r.rotation, r.translation)
    }
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> Self {
        let r = &t.rotation;
        TransformRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFiniteTransform);
        }
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if deviation > ORTHONORMAL_TOLERANCE || (det - 1.0).abs() > ORTHONORMAL_TOLERANCE {
            return Err(GeometryError::NotOrthonormal { deviation, det });
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn from_rows(rows: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self, GeometryError> {
        let r = Matrix3::new(
            rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0],
            rows[2][1], rows[2][2],
        );
        RigidTransform::new(r, Vector3::from(translation))
    }

    pub fn from_rotation_translation(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: rotation.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self::from_rotation_translation(q, translation)
    }

    /// Camera-to-base transform of an optical-frame camera at `eye` looking
    /// at `target`; `up` gives the approximate image-up direction.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            // up parallel to the view direction; pick any perpendicular
            right = forward.cross(&Vector3::x());
            if right.norm() < 1e-9 {
                right = forward.cross(&Vector3::y());
            }
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        RigidTransform {
            rotation,
            translation: eye,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn apply(&self, p: [f32; 3]) -> [f32; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        [
            (r[(0, 0)] * x + r[(0, 1)] * y + r[(0, 2)] * z + t.x) as f32,
            (r[(1, 0)] * x + r[(1, 1)] * y + r[(1, 2)] * z + t.y) as f32,
            (r[(2, 0)] * x + r[(2, 1)] * y + r[(2, 2)] * z + t.z) as f32,
        ]
    }

    #[inline]
    pub fn apply_f64(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_pose(&self) -> Pose {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        Pose {
            position: [
                self.translation.x as f32,
                self.translation.y as f32,
                self.translation.z as f32,
            ],
            orientation: [q.w as f32, q.i as f32, q.j as f32, q.k as f32],
        }
    }
}

/// Position plus unit quaternion (w, x, y, z).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f32; 3],
    pub orientation: [f32; 4],
}

pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-4;

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: [0.0; 3],
            orientation: [1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.orientation
            .iter()
            .map(|&c| c as f64 * c as f64)
            .sum::<f64>()
            .sqrt()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let n = self.quaternion_norm();
        if !n.is_finite() || (n - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            return Err(GeometryError::NonUnitQuaternion(n));
        }
        if self.position.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::NonFiniteTransform);
        }
        Ok(())
    }
}

/// One camera's registered depth, color and mask images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbdFrame {
    pub camera_id: u16,
    pub frame_id: u64,
    pub timestamp_us: u64,
    pub width: u32,
    pub height: u32,
    /// Raw depth units, 0 = invalid.
    pub depth: Vec<u16>,
    pub color: Vec<[u8; 3]>,
    pub mask: Vec<ClassId>,
}

impl RgbdFrame {
    /// A frame with all depth invalid, black color and background mask.
    pub fn blank(camera_id: u16, frame_id: u64, timestamp_us: u64, width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        RgbdFrame {
            camera_id,
            frame_id,
            timestamp_us,
            width,
            height,
            depth: vec![0; n],
            color: vec![[0; 3]; n],
            mask: vec![CLASS_BACKGROUND; n],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Checks buffer sizes against the frame's own dimensions and, when
    /// given, against the camera intrinsics.
    pub fn check_dimensions(&self, intrinsics: Option<&Intrinsics>) -> Result<(), GeometryError> {
        if let Some(k) = intrinsics {
            if k.width != self.width || k.height != self.height {
                return Err(GeometryError::DimensionMismatch {
                    camera_id: self.camera_id,
                    frame_width: self.width,
                    frame_height: self.height,
                    width: k.width,
                    height: k.height,
                });
            }
        }
        let expected = self.pixel_count();
        for (image, actual) in [
            ("depth", self.depth.len()),
            ("color", self.color.len()),
            ("mask", self.mask.len()),
        ] {
            if actual != expected {
                return Err(GeometryError::BufferSize {
                    camera_id: self.camera_id,
                    image,
                    actual,
                    expected,
                });
            }
        }
        Ok(())
    }
}

/// Set of semantic classes, stored as a 256-bit bitmap.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "Vec<ClassId>", into = "Vec<ClassId>")]
pub struct ClassSet([u64; 4]);

impl ClassSet {
    pub fn empty() -> Self {
        ClassSet([0; 4])
    }

    pub fn insert(&mut self, c: ClassId) {
        self.0[(c >> 6) as usize] |= 1 << (c & 63);
    }

    #[inline]
    pub fn contains(&self, c: ClassId) -> bool {
        self.0[(c >> 6) as usize] & (1 << (c & 63)) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == [0; 4]
    }

    pub fn iter(&self) -> impl Iterator<Item = ClassId> + '_ {
        (0..=255u8).filter(|&c| self.contains(c))
    }
}

impl FromIterator<ClassId> for ClassSet {
    fn from_iter<I: IntoIterator<Item = ClassId>>(iter: I) -> Self {
        let mut s = ClassSet::empty();
        for c in iter {
            s.insert(c);
        }
        s
    }
}

impl From<Vec<ClassId>> for ClassSet {
    fn from(v: Vec<ClassId>) -> Self {
        v.into_iter().collect()
    }
}

impl From<ClassSet> for Vec<ClassId> {
    fn from(s: ClassSet) -> Self {
        s.iter().collect()
    }
}

impl std::fmt::Debug for ClassSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Columnar colored point cloud.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
    pub frame_id: u64,
    pub timestamp_us: u64,
}

impl PointCloud {
    pub fn new(frame_id: u64, timestamp_us: u64) -> Self {
        PointCloud {
            frame_id,
            timestamp_us,
            ..Default::default()
        }
    }

    pub fn with_capacity(frame_id: u64, timestamp_us: u64, n: usize) -> Self {
        PointCloud {
            positions: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
            frame_id,
            timestamp_us,
        }
    }

    #[inline]
    pub fn push(&mut self, p: [f32; 3], c: [u8; 3]) {
        self.positions.push(p);
        self.colors.push(c);
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Index of the first non-finite coordinate, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.positions
            .iter()
            .position(|p| !(p[0].is_finite() && p[1].is_finite() && p[2].is_finite()))
    }

    /// New cloud holding the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            frame_id: self.frame_id,
            timestamp_us: self.timestamp_us,
        }
    }

    /// Componentwise min/max of the positions, `None` when empty.
    pub fn bounds(&self) -> Option<([f32; 3], [f32; 3])> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(mut lo, mut hi), p| {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
            (lo, hi)
        }))
    }
}

/// Back-projects every kept, valid pixel into the camera frame.
///
/// Points are emitted in row-major pixel order.
pub fn back_project(
    frame: &RgbdFrame,
    intrinsics: &Intrinsics,
    keep_classes: &ClassSet,
) -> Result<PointCloud, GeometryError> {
    if keep_classes.is_empty() {
        return Err(GeometryError::EmptyKeepClasses);
    }
    frame.check_dimensions(Some(intrinsics))?;

    let w = frame.width as usize;
    let (fx, fy, cx, cy, scale) = (
        intrinsics.fx,
        intrinsics.fy,
        intrinsics.cx,
        intrinsics.cy,
        intrinsics.depth_scale,
    );
    let mut cloud = PointCloud::new(frame.frame_id, frame.timestamp_us);
    for (row, ((depth, mask), color)) in frame
        .depth
        .chunks_exact(w)
        .zip(frame.mask.chunks_exact(w))
        .zip(frame.color.chunks_exact(w))
        .enumerate()
    {
        let dv = row as f64 - cy;
        for u in 0..w {
            let d = depth[u];
            if d == 0 || !keep_classes.contains(mask[u]) {
                continue;
            }
            let z = d as f64 * scale;
            let x = (u as f64 - cx) * z / fx;
            let y = dv * z / fy;
            cloud.push([x as f32, y as f32, z as f32], color[u]);
        }
    }
    Ok(cloud)
}

/// Applies `t` to every position; colors and provenance are unchanged.
pub fn transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    if t.is_identity() {
        return cloud.clone();
    }
    PointCloud {
        positions: cloud.positions.iter().map(|&p| t.apply(p)).collect(),
        colors: cloud.colors.clone(),
        frame_id: cloud.frame_id,
        timestamp_us: cloud.timestamp_us,
    }
}

/// Concatenates clouds in the order given; callers pass them sorted by
/// camera id. Provenance takes the maximum frame id and timestamp.
pub fn merge(clouds: &[PointCloud]) -> PointCloud {
    match clouds {
        [] => PointCloud::default(),
        [one] => one.clone(),
        many => {
            let n = many.iter().map(PointCloud::len).sum();
            let mut out = PointCloud::with_capacity(
                many.iter().map(|c| c.frame_id).max().unwrap_or(0),
                many.iter().map(|c| c.timestamp_us).max().unwrap_or(0),
                n,
            );
            for c in many {
                out.positions.extend_from_slice(&c.positions);
                out.colors.extend_from_slice(&c.colors);
            }
            out
        }
    }
}
