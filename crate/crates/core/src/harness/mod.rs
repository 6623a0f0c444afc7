//! Synthetic scenes, archives, reference oracles and benchmarking.

pub mod archive;
pub mod bench;
pub mod oracle;
pub mod scene;

pub use archive::{read_archive, write_archive, Archive, ArchiveError, ArchiveWriter, Manifest};
pub use bench::{bench, BenchReport, FrameReport};
pub use scene::{CleanView, NoiseModel, Primitive, RenderedView, Renderer, Shape, SyntheticScene};
