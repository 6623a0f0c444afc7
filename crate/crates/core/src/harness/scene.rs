//! Analytic test scenes rendered by ray casting.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::geometry::{
    ClassId, GeometryError, Intrinsics, RgbdFrame, RigidTransform, CLASS_BACKGROUND, CLASS_GRIPPER, CLASS_ROBOT, CLASS_TABLE,
    CLASS_WRIST_MOUNT,
};
use crate::pipeline::{CameraRig, CameraSpec, FrameSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    /// Infinite plane through the local origin with normal +z.
    Plane,
    Box { half_extents: [f64; 3] },
    /// Axis along local z.
    Cylinder { radius: f64, half_height: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Local-to-base transform.
    pub pose: RigidTransform,
    pub color: [u8; 3],
    pub class_id: ClassId,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Additive Gaussian depth noise, meters.
    pub depth_std_m: f64,
    /// Probability a valid pixel becomes a salt outlier.
    pub outlier_prob: f64,
    /// Outliers are displaced along the ray by a uniform distance in
    /// `[outlier_min_m, outlier_max_m]`, toward or away from the camera.
    pub outlier_min_m: f64,
    pub outlier_max_m: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            depth_std_m: 0.0,
            outlier_prob: 0.0,
            outlier_min_m: 0.1,
            outlier_max_m: 0.4,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.depth_std_m >= 0.0 && self.depth_std_m.is_finite()) {
            return Err("depth_std_m must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return Err("outlier_prob must be in [0, 1]".into());
        }
        if !(0.0 <= self.outlier_min_m && self.outlier_min_m <= self.outlier_max_m && self.outlier_max_m.is_finite()) {
            return Err("need 0 <= outlier_min_m <= outlier_max_m".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub rig: CameraRig,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub seed: u64,
    /// Capture period of the simulated cameras.
    #[serde(default = "default_frame_interval")]
    pub frame_interval_us: u64,
}

fn default_frame_interval() -> u64 {
    100_000
}

/// Nearest hit along a camera ray.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Hit {
    /// Camera-frame depth of the hit.
    z: f64,
    primitive: usize,
}

fn intersect(shape: &Shape, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    const EPS: f64 = 1e-9;
    match *shape {
        Shape::Plane => {
            if d.z.abs() < EPS {
                return None;
            }
            let t = -o.z / d.z;
            (t > EPS).then_some(t)
        }
        Shape::Box { half_extents: h } => {
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            for a in 0..3 {
                if d[a].abs() < EPS {
                    if o[a].abs() > h[a] {
                        return None;
                    }
                    continue;
                }
                let inv = 1.0 / d[a];
                let (mut ta, mut tb) = ((-h[a] - o[a]) * inv, (h[a] - o[a]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
            if t0 > EPS {
                Some(t0)
            } else if t1 > EPS {
                Some(t1)
            } else {
                None
            }
        }
        Shape::Cylinder { radius, half_height } => {
            let mut best = f64::INFINITY;
            // side
            let a = d.x * d.x + d.y * d.y;
            if a > EPS * EPS {
                let b = 2.0 * (o.x * d.x + o.y * d.y);
                let c = o.x * o.x + o.y * o.y - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let s = disc.sqrt();
                    for t in [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)] {
                        if t > EPS && t < best && (o.z + t * d.z).abs() <= half_height {
                            best = t;
                        }
                    }
                }
            }
            // caps
            if d.z.abs() > EPS {
                for zc in [-half_height, half_height] {
                    let t = (zc - o.z) / d.z;
                    if t > EPS && t < best {
                        let (x, y) = (o.x + t * d.x, o.y + t * d.y);
                        if x * x + y * y <= radius * radius {
                            best = t;
                        }
                    }
                }
            }
            best.is_finite().then_some(best)
        }
    }
}

/// Primitive with its pose pre-inverted for ray tests.
struct Prepared {
    to_local: RigidTransform,
    shape: Shape,
}

/// Noise-free ray-cast result for one camera.
#[derive(Clone, Debug)]
pub struct CleanView {
    pub camera_id: u16,
    pub width: u32,
    pub height: u32,
    /// Camera-frame depth in meters, 0 where no primitive was hit.
    pub depth_m: Vec<f64>,
    pub color: Vec<[u8; 3]>,
    pub mask: Vec<ClassId>,
}

/// A rendered camera frame plus which pixels were turned into outliers.
#[derive(Clone, Debug)]
pub struct RenderedView {
    pub frame: RgbdFrame,
    pub outlier: Vec<bool>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn row_seed(seed: u64, frame_id: u64, camera_id: u16, row: usize) -> u64 {
    splitmix(splitmix(splitmix(seed ^ 0x5eed) ^ frame_id) ^ ((camera_id as u64) << 32 | row as u64))
}

impl SyntheticScene {
    /// Resamples every camera to `width`×`height`.
    pub fn with_resolution(mut self, width: u32, height: u32) -> Result<Self, GeometryError> {
        for c in &mut self.rig.cameras {
            c.intrinsics = c.intrinsics.resized(width, height)?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.noise.validate()?;
        self.rig.validate().map_err(|e| e.to_string())?;
        for p in &self.primitives {
            let ok = match p.shape {
                Shape::Plane => true,
                Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0 && h.is_finite()),
                Shape::Cylinder { radius, half_height } => {
                    radius > 0.0 && half_height > 0.0 && radius.is_finite() && half_height.is_finite()
                }
            };
            if !ok {
                return Err(format!("degenerate primitive {:?}", p.shape));
            }
        }
        Ok(())
    }

    /// Ray casts camera `cam` against every primitive without noise.
    pub fn render_clean(&self, cam: &CameraSpec, exec: Exec) -> CleanView {
        let k = &cam.intrinsics;
        let (w, h) = (k.width as usize, k.height as usize);
        let prepared: Vec<Prepared> = self
            .primitives
            .iter()
            .map(|p| Prepared {
                to_local: p.pose.inverse(),
                shape: p.shape,
            })
            .collect();
        let origin = *cam.extrinsic.translation();
        let rot = *cam.extrinsic.rotation();
        let local_origins: Vec<Vector3<f64>> = prepared.iter().map(|p| p.to_local.apply_f64(&origin)).collect();

        let rows: Vec<Vec<Option<Hit>>> = exec.map_range(h, |v| {
            (0..w)
                .map(|u| {
                    let d_cam = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                    let d_base = rot * d_cam;
                    let mut best: Option<Hit> = None;
                    for (i, p) in prepared.iter().enumerate() {
                        let d_local = p.to_local.rotation() * d_base;
                        if let Some(t) = intersect(&p.shape, &local_origins[i], &d_local) {
                            if best.is_none_or(|b| t < b.z) {
                                best = Some(Hit { z: t, primitive: i });
                            }
                        }
                    }
                    best
                })
                .collect()
        });

        let n = w * h;
        let mut view = CleanView {
            camera_id: cam.camera_id,
            width: k.width,
            height: k.height,
            depth_m: Vec::with_capacity(n),
            color: Vec::with_capacity(n),
            mask: Vec::with_capacity(n),
        };
        for hit in rows.into_iter().flatten() {
            match hit {
                Some(hit) => {
                    let p = &self.primitives[hit.primitive];
                    view.depth_m.push(hit.z);
                    view.color.push(p.color);
                    view.mask.push(p.class_id);
                }
                None => {
                    view.depth_m.push(0.0);
                    view.color.push([0; 3]);
                    view.mask.push(CLASS_BACKGROUND);
                }
            }
        }
        view
    }

    /// Applies the noise model to a clean view for `frame_id`.
    pub fn apply_noise(&self, clean: &CleanView, k: &Intrinsics, frame_id: u64, exec: Exec) -> RenderedView {
        let w = clean.width as usize;
        let n = clean.depth_m.len();
        let timestamp_us = frame_id * self.frame_interval_us;
        let mut frame = RgbdFrame {
            camera_id: clean.camera_id,
            frame_id,
            timestamp_us,
            width: clean.width,
            height: clean.height,
            depth: vec![0; n],
            color: clean.color.clone(),
            mask: clean.mask.clone(),
        };
        let mut outlier = vec![false; n];
        let noise = self.noise;
        let normal = Normal::new(0.0, noise.depth_std_m.max(0.0)).expect("std validated");
        let to_raw = |z: f64| -> u16 {
            let r = (z / k.depth_scale).round();
            if r >= 1.0 && r <= u16::MAX as f64 {
                r as u16
            } else {
                0
            }
        };
        let mut rows: Vec<(&mut [u16], &mut [bool])> = frame
            .depth
            .chunks_mut(w)
            .zip(outlier.chunks_mut(w))
            .collect();
        let fill = |v: usize, (depth, out): &mut (&mut [u16], &mut [bool])| {
            let mut rng = ChaCha8Rng::seed_from_u64(row_seed(self.seed, frame_id, clean.camera_id, v));
            for u in 0..w {
                let z = clean.depth_m[v * w + u];
                if z <= 0.0 {
                    continue;
                }
                let mut zn = z;
                if noise.depth_std_m > 0.0 {
                    zn += normal.sample(&mut rng);
                }
                if noise.outlier_prob > 0.0 && rng.random::<f64>() < noise.outlier_prob {
                    let mag = rng.random_range(noise.outlier_min_m..=noise.outlier_max_m);
                    zn += if rng.random::<bool>() { mag } else { -mag };
                    out[u] = true;
                }
                depth[u] = to_raw(zn);
            }
        };
        exec.for_each_chunk_mut(&mut rows, 1, |v, chunk| fill(v, &mut chunk[0]));
        RenderedView { frame, outlier }
    }

    pub fn render_view(&self, cam: &CameraSpec, frame_id: u64, exec: Exec) -> RenderedView {
        self.apply_noise(&self.render_clean(cam, exec), &cam.intrinsics, frame_id, exec)
    }

    /// Renders one frameset with every rig camera.
    pub fn render(&self, frame_id: u64) -> FrameSet {
        Renderer::new(self, Exec::default()).render(frame_id)
    }

    /// The default three-camera tabletop with a wrist camera.
    pub fn tabletop() -> SyntheticScene {
        let rot_z = |deg: f64, at: [f64; 3]| {
            RigidTransform::from_axis_angle(Vector3::z(), deg.to_radians(), Vector3::from(at))
        };
        let at = |p: [f64; 3]| rot_z(0.0, p);
        let boxed = |h: [f64; 3], pose: RigidTransform, color: [u8; 3], class_id| Primitive {
            shape: Shape::Box { half_extents: h },
            pose,
            color,
            class_id,
        };
        let cyl = |r: f64, hh: f64, pose: RigidTransform, color: [u8; 3], class_id| Primitive {
            shape: Shape::Cylinder {
                radius: r,
                half_height: hh,
            },
            pose,
            color,
            class_id,
        };
        let primitives = vec![
            Primitive {
                shape: Shape::Plane,
                pose: at([0.0, 0.0, -0.75]),
                color: [90, 90, 95],
                class_id: CLASS_BACKGROUND,
            },
            // table, top surface at z = 0
            boxed([0.4, 0.6, 0.025], at([0.55, 0.0, -0.025]), [150, 110, 70], CLASS_TABLE),
            // task board lying on the table
            boxed([0.2, 0.25, 0.004], at([0.58, 0.0, 0.004]), [40, 40, 45], CLASS_BACKGROUND),
            // cups
            cyl(0.04, 0.05, at([0.45, 0.17, 0.058]), [200, 40, 40], CLASS_BACKGROUND),
            cyl(0.035, 0.06, at([0.68, -0.16, 0.068]), [40, 70, 200], CLASS_BACKGROUND),
            // T-block
            boxed([0.08, 0.02, 0.02], rot_z(20.0, [0.56, 0.02, 0.028]), [40, 170, 60], CLASS_BACKGROUND),
            boxed([0.02, 0.05, 0.02], rot_z(20.0, [0.5, 0.06, 0.028]), [40, 170, 60], CLASS_BACKGROUND),
            // crate
            boxed([0.05, 0.05, 0.04], rot_z(30.0, [0.75, 0.22, 0.048]), [220, 200, 40], CLASS_BACKGROUND),
            // wire-loop post
            cyl(0.008, 0.1, at([0.38, -0.22, 0.108]), [180, 180, 190], CLASS_BACKGROUND),
            // robot: column, upper arm, gripper, wrist-camera mount
            cyl(0.07, 0.35, at([0.0, 0.0, 0.35]), [235, 235, 235], CLASS_ROBOT),
            boxed([0.22, 0.045, 0.045], at([0.2, 0.0, 0.6]), [235, 235, 235], CLASS_ROBOT),
            boxed([0.03, 0.06, 0.05], at([0.44, 0.0, 0.52]), [60, 60, 60], CLASS_GRIPPER),
            boxed([0.02, 0.03, 0.02], at([0.4, 0.0, 0.6]), [30, 30, 30], CLASS_WRIST_MOUNT),
        ];

        let k = Intrinsics::from_fov(640, 480, 69.0).expect("valid fov");
        let target = Vector3::new(0.57, 0.0, 0.0);
        let cam = |id: u16, name: &str, eye: [f64; 3], look: Vector3<f64>| CameraSpec {
            camera_id: id,
            name: name.to_string(),
            intrinsics: k,
            extrinsic: RigidTransform::look_at(Vector3::from(eye), look, Vector3::z()),
        };
        let rig = CameraRig {
            cameras: vec![
                cam(0, "left", [0.6, 0.75, 0.55], target),
                cam(1, "right", [0.6, -0.75, 0.55], target),
                cam(2, "upper", [1.05, 0.0, 0.85], target),
                cam(3, "wrist", [0.42, 0.0, 0.62], Vector3::new(0.55, 0.0, 0.0)),
            ],
            wrist_camera_id: Some(3),
        };
        SyntheticScene {
            primitives,
            rig,
            noise: NoiseModel {
                depth_std_m: 0.001,
                outlier_prob: 0.002,
                ..Default::default()
            },
            seed: 7,
            frame_interval_us: default_frame_interval(),
        }
    }
}

/// Renders many frames of one scene, ray casting each camera only once.
pub struct Renderer<'a> {
    scene: &'a SyntheticScene,
    clean: Vec<(CameraSpec, CleanView)>,
    exec: Exec,
}

impl<'a> Renderer<'a> {
    pub fn new(scene: &'a SyntheticScene, exec: Exec) -> Self {
        let clean = scene
            .rig
            .cameras
            .iter()
            .map(|c| (c.clone(), scene.render_clean(c, exec)))
            .collect();
        Renderer { scene, clean, exec }
    }

    pub fn render_views(&self, frame_id: u64) -> Vec<(u16, RenderedView)> {
        self.clean
            .iter()
            .map(|(c, v)| (c.camera_id, self.scene.apply_noise(v, &c.intrinsics, frame_id, self.exec)))
            .collect()
    }

    pub fn render(&self, frame_id: u64) -> FrameSet {
        let rig = &self.scene.rig;
        let mut frames = Vec::new();
        let mut wrist = None;
        for (id, view) in self.render_views(frame_id) {
            if Some(id) == rig.wrist_camera_id {
                wrist = Some(view.frame);
            } else {
                frames.push(view.frame);
            }
        }
        frames.sort_by_key(|f| f.camera_id);
        FrameSet {
            frame_id,
            capture_timestamp_us: frame_id * self.scene.frame_interval_us,
            frames,
            wrist_pose: rig.wrist().map(|c| c.extrinsic.to_pose()),
            wrist,
        }
    }
}
