//! Point cloud and trajectory files.
//!
//! ASCII clouds are blocks of
//! ```text
//! cloud <stamp> <frame> <count> <timed 0|1>
//! x y z time_offset      (count lines)
//! ```
//! and a file may hold any number of blocks. The binary variant (`.bin`)
//! starts with [`BINARY_MAGIC`] and stores the same fields little-endian.
//! Trajectories are `stamp tx ty tz qx qy qz qw` per line. `#` starts a
//! comment line in every ASCII format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::IoError;
use crate::geometry::{Pose, StampedPose};
use crate::pointcloud::{Point, PointCloud};

pub const BINARY_MAGIC: &[u8; 8] = b"GOCLOUD1";

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|e| IoError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| IoError::io(path, e))
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

fn content_lines(path: &Path) -> Result<Vec<(usize, String)>, IoError> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| IoError::io(path, e))?;
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            out.push((i + 1, t.to_string()));
        }
    }
    Ok(out)
}

fn parse_f64s<const N: usize>(path: &Path, line: usize, text: &str) -> Result<[f64; N], IoError> {
    let mut out = [0.0; N];
    let mut fields = text.split_whitespace();
    for (i, slot) in out.iter_mut().enumerate() {
        let f = fields
            .next()
            .ok_or_else(|| IoError::parse(path, line, format!("expected {N} numbers, found {i}")))?;
        *slot = f
            .parse()
            .map_err(|_| IoError::parse(path, line, format!("`{f}` is not a number")))?;
    }
    if fields.next().is_some() {
        return Err(IoError::parse(path, line, format!("expected {N} numbers, found more")));
    }
    Ok(out)
}

/// Reads every cloud in an ASCII or binary cloud file.
pub fn read_clouds(path: &Path) -> Result<Vec<PointCloud>, IoError> {
    if is_binary(path) {
        read_clouds_binary(path)
    } else {
        read_clouds_ascii(path)
    }
}

pub fn write_clouds(path: &Path, clouds: &[PointCloud]) -> Result<(), IoError> {
    if is_binary(path) {
        write_clouds_binary(path, clouds)
    } else {
        write_clouds_ascii(path, clouds)
    }
}

fn read_clouds_ascii(path: &Path) -> Result<Vec<PointCloud>, IoError> {
    let lines = content_lines(path)?;
    let mut clouds = Vec::new();
    let mut it = lines.into_iter();
    while let Some((ln, header)) = it.next() {
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 5 || f[0] != "cloud" {
            return Err(IoError::parse(path, ln, "expected `cloud <stamp> <frame> <count> <timed>`"));
        }
        let stamp: f64 = f[1]
            .parse()
            .map_err(|_| IoError::parse(path, ln, format!("bad stamp `{}`", f[1])))?;
        let count: usize = f[3]
            .parse()
            .map_err(|_| IoError::parse(path, ln, format!("bad point count `{}`", f[3])))?;
        let timed = match f[4] {
            "0" => false,
            "1" => true,
            other => return Err(IoError::parse(path, ln, format!("bad timed flag `{other}`"))),
        };
        let mut points = Vec::with_capacity(count);
        for i in 0..count {
            let (pl, text) = it
                .next()
                .ok_or_else(|| IoError::parse(path, ln, format!("cloud declares {count} points, file ends after {i}")))?;
            let [x, y, z, t] = parse_f64s::<4>(path, pl, &text)?;
            points.push(Point::timed(Vector3::new(x, y, z), t));
        }
        let mut c = PointCloud::new(stamp, f[2], points);
        c.timed = timed;
        clouds.push(c);
    }
    Ok(clouds)
}

fn write_clouds_ascii(path: &Path, clouds: &[PointCloud]) -> Result<(), IoError> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        for c in clouds {
            writeln!(w, "cloud {} {} {} {}", c.stamp, c.frame, c.len(), u8::from(c.timed))?;
            for p in &c.points {
                let q = p.position;
                writeln!(w, "{} {} {} {}", q.x, q.y, q.z, p.time_offset)?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| IoError::io(path, e))
}

fn write_clouds_binary(path: &Path, clouds: &[PointCloud]) -> Result<(), IoError> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        w.write_all(BINARY_MAGIC)?;
        for c in clouds {
            w.write_all(&c.stamp.to_le_bytes())?;
            w.write_all(&(c.frame.len() as u32).to_le_bytes())?;
            w.write_all(c.frame.as_bytes())?;
            w.write_all(&(c.len() as u64).to_le_bytes())?;
            w.write_all(&[u8::from(c.timed)])?;
            for p in &c.points {
                for v in [p.position.x, p.position.y, p.position.z, p.time_offset] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()
    })();
    res.map_err(|e| IoError::io(path, e))
}

fn read_clouds_binary(path: &Path) -> Result<Vec<PointCloud>, IoError> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| IoError::io(path, e))?;
    let corrupt = |at: usize, what: &str| IoError::Format {
        path: path.display().to_string(),
        message: format!("{what} at byte {at}"),
    };
    if bytes.len() < 8 || &bytes[..8] != BINARY_MAGIC {
        return Err(corrupt(0, "missing binary cloud header"));
    }
    let mut pos = 8;
    let take = |n: usize, pos: &mut usize| -> Result<&[u8], IoError> {
        let s = bytes.get(*pos..*pos + n).ok_or_else(|| corrupt(*pos, "truncated record"))?;
        *pos += n;
        Ok(s)
    };
    let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
    let mut clouds = Vec::new();
    while pos < bytes.len() {
        let stamp = f64_at(take(8, &mut pos)?);
        let flen = u32::from_le_bytes(take(4, &mut pos)?.try_into().expect("4 bytes")) as usize;
        let frame = String::from_utf8(take(flen, &mut pos)?.to_vec()).map_err(|_| corrupt(pos, "frame is not UTF-8"))?;
        let count = u64::from_le_bytes(take(8, &mut pos)?.try_into().expect("8 bytes")) as usize;
        let timed = take(1, &mut pos)?[0] != 0;
        let raw = take(count.checked_mul(32).ok_or_else(|| corrupt(pos, "bad count"))?, &mut pos)?;
        let points = raw
            .chunks_exact(32)
            .map(|c| {
                Point::timed(
                    Vector3::new(f64_at(&c[0..8]), f64_at(&c[8..16]), f64_at(&c[16..24])),
                    f64_at(&c[24..32]),
                )
            })
            .collect();
        let mut c = PointCloud::new(stamp, frame, points);
        c.timed = timed;
        clouds.push(c);
    }
    Ok(clouds)
}

/// Reads `stamp tx ty tz qx qy qz qw` records.
pub fn read_trajectory(path: &Path) -> Result<Vec<StampedPose>, IoError> {
    Ok(read_trajectory_records(path)?.into_iter().map(|(_, p)| p).collect())
}

/// As [`read_trajectory`], keeping the 1-based source line of each record.
pub fn read_trajectory_records(path: &Path) -> Result<Vec<(usize, StampedPose)>, IoError> {
    content_lines(path)?
        .into_iter()
        .map(|(ln, text)| {
            let [t, tx, ty, tz, qx, qy, qz, qw] = parse_f64s::<8>(path, ln, &text)?;
            let pose = Pose::from_record(&[tx, ty, tz, qx, qy, qz, qw]).map_err(|e| IoError::parse(path, ln, e.to_string()))?;
            StampedPose::new(t, pose)
                .map(|p| (ln, p))
                .map_err(|e| IoError::parse(path, ln, e.to_string()))
        })
        .collect()
}

/// One trajectory record; shortest round-trip float formatting.
pub fn trajectory_line(p: &StampedPose) -> String {
    let r = p.pose.to_record();
    format!("{} {} {} {} {} {} {} {}", p.time, r[0], r[1], r[2], r[3], r[4], r[5], r[6])
}

pub fn write_trajectory(path: &Path, poses: &[StampedPose]) -> Result<(), IoError> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        for p in poses {
            writeln!(w, "{}", trajectory_line(p))?;
        }
        w.flush()
    })();
    res.map_err(|e| IoError::io(path, e))
}
