//! Binary frame format.
//!
//! Little-endian layout: magic `DLP1`, point count (u64), `t_start` and
//! `t_end` (f64), then per point `x, y, z, timestamp, doppler` as f64.
//! Normals and planarity scores are never serialized.

use super::{LidarFrame, LidarPoint};
use crate::geom::Vec3;
use std::io::{self, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DLP1";

pub fn write_frame<W: Write>(mut w: W, frame: &LidarFrame) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(frame.points.len() as u64).to_le_bytes())?;
    w.write_all(&frame.t_start.to_le_bytes())?;
    w.write_all(&frame.t_end.to_le_bytes())?;
    for p in &frame.points {
        for v in [
            p.position.x,
            p.position.y,
            p.position.z,
            p.timestamp,
            p.doppler,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_frame<R: Read>(mut r: R) -> io::Result<LidarFrame> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("bad frame magic {magic:?}, expected {MAGIC:?}"),
        ));
    }
    let count = read_u64(&mut r)?;
    let t_start = read_f64(&mut r)?;
    let t_end = read_f64(&mut r)?;
    let mut frame = LidarFrame::new(t_start, t_end);
    frame.points.reserve(count as usize);
    for _ in 0..count {
        let x = read_f64(&mut r)?;
        let y = read_f64(&mut r)?;
        let z = read_f64(&mut r)?;
        let timestamp = read_f64(&mut r)?;
        let doppler = read_f64(&mut r)?;
        frame
            .points
            .push(LidarPoint::new(Vec3::new(x, y, z), timestamp, doppler));
    }
    Ok(frame)
}

pub fn write_frame_file(path: &Path, frame: &LidarFrame) -> io::Result<()> {
    let mut buf = Vec::with_capacity(28 + frame.points.len() * 40);
    write_frame(&mut buf, frame)?;
    std::fs::write(path, buf)
}

pub fn read_frame_file(path: &Path) -> io::Result<LidarFrame> {
    read_frame(io::BufReader::new(std::fs::File::open(path)?))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
