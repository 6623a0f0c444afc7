//! Binary little-endian PLY output.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::geometry::PointCloud;

/// Writes `cloud` as `binary_little_endian` PLY with float x/y/z and uchar
/// red/green/blue vertex properties.
pub fn write_ply<W: Write>(cloud: &PointCloud, mut w: W) -> io::Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\ncomment frame_id {} timestamp_us {}\n\
         element vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.frame_id,
        cloud.timestamp_us,
        cloud.len()
    )?;
    let mut rec = [0u8; 15];
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        for (i, v) in p.iter().enumerate() {
            rec[4 * i..4 * i + 4].copy_from_slice(&v.to_le_bytes());
        }
        rec[12..].copy_from_slice(c);
        w.write_all(&rec)?;
    }
    w.flush()
}

pub fn write_ply_file(cloud: &PointCloud, path: &Path) -> io::Result<()> {
    write_ply(cloud, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn readable_by_ply_rs() {
        let mut c = PointCloud::new(7, 0);
        c.push([1.0, -2.0, 0.5], [255, 0, 128]);
        c.push([0.25, 0.0, 3.0], [1, 2, 3]);
        let mut buf = Vec::new();
        write_ply(&c, &mut buf).unwrap();
        let parser = ply_rs::parser::Parser::<ply_rs::ply::DefaultElement>::new();
        let ply = parser.read_ply(&mut &buf[..]).unwrap();
        let v = &ply.payload["vertex"];
        assert_eq!(v.len(), 2);
        use ply_rs::ply::Property;
        assert_eq!(v[0]["x"], Property::Float(1.0));
        assert_eq!(v[0]["y"], Property::Float(-2.0));
        assert_eq!(v[1]["blue"], Property::UChar(3));
    }
}
