//! On-disk frameset archives.
//!
//! Layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/frames/<frame_id:08>/cam<camera_id>.depth   u16 LE, row-major
//! <dir>/frames/<frame_id:08>/cam<camera_id>.color   RGB8, row-major
//! <dir>/frames/<frame_id:08>/cam<camera_id>.mask    class-id bytes, row-major
//! ```
//!
//! Image sizes come from each camera's intrinsics in the manifest and must
//! match the file sizes exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{is_known_class, ClassId, Pose, RgbdFrame, CLASS_TABLE_ENTRIES};
use crate::pipeline::{CameraRig, FrameSet, PipelineError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARCHIVE_FORMAT: &str = "fusecast-archive";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: invalid manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: {field} size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        path: PathBuf,
        field: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: unknown class id {class_id} at pixel {pixel}")]
    UnknownClass { path: PathBuf, class_id: ClassId, pixel: usize },
    #[error("frameset {frame_id} does not match the archive rig: {message}")]
    FramesetMismatch { frame_id: u64, message: String },
}

impl From<ArchiveError> for PipelineError {
    fn from(e: ArchiveError) -> Self {
        PipelineError::Source(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: ClassId,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_id: u64,
    pub timestamp_us: u64,
    /// Per-camera capture stamps.
    pub camera_timestamps_us: BTreeMap<u16, u64>,
    #[serde(default)]
    pub wrist_pose: Option<Pose>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub depth_scale: f64,
    pub class_table: Vec<ClassEntry>,
    pub rig: CameraRig,
    pub frames: Vec<FrameEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ArchiveError + '_ {
    move |source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn frame_dir(root: &Path, frame_id: u64) -> PathBuf {
    root.join("frames").join(format!("{frame_id:08}"))
}

fn image_path(root: &Path, frame_id: u64, camera_id: u16, ext: &str) -> PathBuf {
    frame_dir(root, frame_id).join(format!("cam{camera_id}.{ext}"))
}

/// Writes framesets incrementally; the manifest is written by
/// [`ArchiveWriter::finish`].
pub struct ArchiveWriter {
    root: PathBuf,
    manifest: Manifest,
}

impl ArchiveWriter {
    pub fn create(root: &Path, rig: &CameraRig) -> Result<Self, ArchiveError> {
        rig.validate().map_err(|e| ArchiveError::Manifest {
            path: root.join(MANIFEST_FILE),
            message: e.to_string(),
        })?;
        let depth_scale = rig.cameras.first().map_or(crate::geometry::DEFAULT_DEPTH_SCALE, |c| {
            c.intrinsics.depth_scale
        });
        if rig.cameras.iter().any(|c| c.intrinsics.depth_scale != depth_scale) {
            return Err(ArchiveError::Manifest {
                path: root.join(MANIFEST_FILE),
                message: "cameras disagree on depth_scale".into(),
            });
        }
        fs::create_dir_all(root.join("frames")).map_err(io_err(root))?;
        Ok(ArchiveWriter {
            root: root.to_path_buf(),
            manifest: Manifest {
                format: ARCHIVE_FORMAT.into(),
                version: ARCHIVE_VERSION,
                depth_scale,
                class_table: CLASS_TABLE_ENTRIES
                    .iter()
                    .map(|&(id, name)| ClassEntry { id, name: name.into() })
                    .collect(),
                rig: rig.clone(),
                frames: Vec::new(),
            },
        })
    }

    pub fn append(&mut self, fs: &FrameSet) -> Result<(), ArchiveError> {
        let rig = &self.manifest.rig;
        let mismatch = |message: String| ArchiveError::FramesetMismatch {
            frame_id: fs.frame_id,
            message,
        };
        fs.ordered_frames(rig).map_err(|e| mismatch(e.to_string()))?;
        if fs.wrist.is_some() != rig.wrist_camera_id.is_some() {
            return Err(mismatch("wrist frame presence differs from rig".into()));
        }
        let dir = frame_dir(&self.root, fs.frame_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut stamps = BTreeMap::new();
        for f in fs.frames.iter().chain(fs.wrist.as_ref()) {
            let cam = rig.camera(f.camera_id).expect("checked above");
            f.check_dimensions(Some(&cam.intrinsics))
                .map_err(|e| mismatch(e.to_string()))?;
            let depth: Vec<u8> = f.depth.iter().flat_map(|d| d.to_le_bytes()).collect();
            let color: Vec<u8> = f.color.iter().flatten().copied().collect();
            for (ext, bytes) in [("depth", &depth[..]), ("color", &color[..]), ("mask", &f.mask[..])] {
                let p = image_path(&self.root, fs.frame_id, f.camera_id, ext);
                fs::write(&p, bytes).map_err(io_err(&p))?;
            }
            stamps.insert(f.camera_id, f.timestamp_us);
        }
        self.manifest.frames.push(FrameEntry {
            frame_id: fs.frame_id,
            timestamp_us: fs.capture_timestamp_us,
            camera_timestamps_us: stamps,
            wrist_pose: fs.wrist_pose,
        });
        Ok(())
    }

    pub fn finish(self) -> Result<Manifest, ArchiveError> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(self.manifest)
    }
}

/// Writes a complete archive.
pub fn write_archive<'a>(
    root: &Path,
    rig: &CameraRig,
    framesets: impl IntoIterator<Item = &'a FrameSet>,
) -> Result<Manifest, ArchiveError> {
    let mut w = ArchiveWriter::create(root, rig)?;
    for fs in framesets {
        w.append(fs)?;
    }
    w.finish()
}

/// An opened archive; frames are loaded on demand.
#[derive(Clone, Debug)]
pub struct Archive {
    root: PathBuf,
    manifest: Manifest,
}

impl Archive {
    pub fn open(root: &Path) -> Result<Self, ArchiveError> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let bad = |message: String| ArchiveError::Manifest {
            path: path.clone(),
            message,
        };
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if manifest.format != ARCHIVE_FORMAT {
            return Err(bad(format!("format is {:?}", manifest.format)));
        }
        if manifest.version != ARCHIVE_VERSION {
            return Err(bad(format!("unsupported version {}", manifest.version)));
        }
        manifest.rig.validate().map_err(|e| bad(e.to_string()))?;
        if manifest
            .rig
            .cameras
            .iter()
            .any(|c| c.intrinsics.depth_scale != manifest.depth_scale)
        {
            return Err(bad("camera depth_scale differs from manifest depth_scale".into()));
        }
        Ok(Archive {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn rig(&self) -> &CameraRig {
        &self.manifest.rig
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    fn read_exact_size(&self, path: &Path, field: &'static str, expected: usize) -> Result<Vec<u8>, ArchiveError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        if bytes.len() != expected {
            return Err(ArchiveError::SizeMismatch {
                path: path.to_path_buf(),
                field,
                expected: expected as u64,
                actual: bytes.len() as u64,
            });
        }
        Ok(bytes)
    }

    fn load_frame(&self, entry: &FrameEntry, camera_id: u16) -> Result<RgbdFrame, ArchiveError> {
        let cam = self.rig().camera(camera_id).expect("rig camera");
        let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
        let n = w as usize * h as usize;
        let path = |ext| image_path(&self.root, entry.frame_id, camera_id, ext);

        let depth = self.read_exact_size(&path("depth"), "depth", 2 * n)?;
        let color = self.read_exact_size(&path("color"), "color", 3 * n)?;
        let mask_path = path("mask");
        let mask = self.read_exact_size(&mask_path, "mask", n)?;
        let known: Vec<ClassId> = self.manifest.class_table.iter().map(|c| c.id).collect();
        if let Some(pixel) = mask
            .iter()
            .position(|m| !known.contains(m) || !is_known_class(*m))
        {
            return Err(ArchiveError::UnknownClass {
                path: mask_path,
                class_id: mask[pixel],
                pixel,
            });
        }
        Ok(RgbdFrame {
            camera_id,
            frame_id: entry.frame_id,
            timestamp_us: entry
                .camera_timestamps_us
                .get(&camera_id)
                .copied()
                .unwrap_or(entry.timestamp_us),
            width: w,
            height: h,
            depth: depth.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect(),
            color: color.chunks_exact(3).map(|b| [b[0], b[1], b[2]]).collect(),
            mask,
        })
    }

    /// Loads the `index`-th frameset in manifest order.
    pub fn frameset(&self, index: usize) -> Result<FrameSet, ArchiveError> {
        let entry = &self.manifest.frames[index];
        let rig = self.rig();
        let frames = rig
            .static_cameras()
            .iter()
            .map(|c| self.load_frame(entry, c.camera_id))
            .collect::<Result<Vec<_>, _>>()?;
        let wrist = rig
            .wrist_camera_id
            .map(|id| self.load_frame(entry, id))
            .transpose()?;
        Ok(FrameSet {
            frame_id: entry.frame_id,
            capture_timestamp_us: entry.timestamp_us,
            frames,
            wrist,
            wrist_pose: entry.wrist_pose,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<FrameSet, ArchiveError>> + '_ {
        (0..self.len()).map(|i| self.frameset(i))
    }
}

/// Opens an archive and loads every frameset.
pub fn read_archive(root: &Path) -> Result<(Manifest, Vec<FrameSet>), ArchiveError> {
    let a = Archive::open(root)?;
    let sets = a.iter().collect::<Result<Vec<_>, _>>()?;
    Ok((a.manifest, sets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{Renderer, SyntheticScene};
    use crate::exec::Exec;

    fn small_scene() -> SyntheticScene {
        let mut s = SyntheticScene::tabletop();
        for c in &mut s.rig.cameras {
            c.intrinsics = crate::geometry::Intrinsics::from_fov(32, 24, 69.0).unwrap();
        }
        s
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = small_scene();
        let r = Renderer::new(&s, Exec::Sequential);
        let sets: Vec<FrameSet> = (0..3).map(|i| r.render(i)).collect();
        write_archive(dir.path(), &s.rig, &sets).unwrap();
        let (m, back) = read_archive(dir.path()).unwrap();
        assert_eq!(back, sets);
        assert_eq!(m.rig, s.rig);
    }

    #[test]
    fn truncated_depth_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let s = small_scene();
        write_archive(dir.path(), &s.rig, &[s.render(0)]).unwrap();
        let p = image_path(dir.path(), 0, 1, "depth");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        let err = read_archive(dir.path()).unwrap_err();
        assert!(matches!(err, ArchiveError::SizeMismatch { field: "depth", .. }));
        assert!(err.to_string().contains("cam1.depth"), "{err}");
    }

    #[test]
    fn unknown_class_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = small_scene();
        write_archive(dir.path(), &s.rig, &[s.render(0)]).unwrap();
        let p = image_path(dir.path(), 0, 0, "mask");
        let mut bytes = fs::read(&p).unwrap();
        bytes[5] = 77;
        fs::write(&p, bytes).unwrap();
        let err = read_archive(dir.path()).unwrap_err();
        assert!(matches!(err, ArchiveError::UnknownClass { class_id: 77, pixel: 5, .. }));
    }

    #[test]
    fn missing_file_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Archive::open(dir.path()), Err(ArchiveError::Io { .. })));
        let s = small_scene();
        write_archive(dir.path(), &s.rig, &[s.render(0)]).unwrap();
        fs::remove_file(image_path(dir.path(), 0, 2, "color")).unwrap();
        let err = read_archive(dir.path()).unwrap_err();
        assert!(err.to_string().contains("cam2.color"));
    }

    #[test]
    fn empty_archive() {
        let dir = tempfile::tempdir().unwrap();
        let s = small_scene();
        write_archive(dir.path(), &s.rig, &[]).unwrap();
        let a = Archive::open(dir.path()).unwrap();
        assert!(a.is_empty());
    }
}
