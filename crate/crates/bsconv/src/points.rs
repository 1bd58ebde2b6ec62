//! Labelled point-cloud IO.
//!
//! Two on-disk forms are supported: a whitespace-separated text format
//! (`x y z label` per line, `#` starts a comment) and a compact binary
//! format (magic `BVPC`, version, count, then `f32 x,y,z` + `u32 label`
//! records, all little-endian).

use crate::error::PointIoError;
use std::fs;
use std::io::Write as _;
use std::path::Path;

const BINARY_MAGIC: &[u8; 4] = b"BVPC";
const BINARY_VERSION: u32 = 1;

/// One labelled point in meters, with optional extra per-point features
/// (not serialized; used when voxel features beyond occupancy are wanted).
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub pos: [f64; 3],
    pub label: i32,
    pub feats: Vec<f64>,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, label: i32) -> Self {
        Point { pos: [x, y, z], label, feats: Vec::new() }
    }
}

/// On-disk representation of a point file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFormat {
    Text,
    Binary,
}

/// Parses the text form: one `x y z label` per line, blank lines and `#`
/// comments skipped.  Errors carry the 1-based line number.
pub fn parse_points_text(content: &str) -> Result<Vec<Point>, PointIoError> {
    let mut points = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(PointIoError::ParseError(i + 1));
        }
        let x = fields[0].parse::<f64>().map_err(|_| PointIoError::ParseError(i + 1))?;
        let y = fields[1].parse::<f64>().map_err(|_| PointIoError::ParseError(i + 1))?;
        let z = fields[2].parse::<f64>().map_err(|_| PointIoError::ParseError(i + 1))?;
        let label = fields[3].parse::<i32>().map_err(|_| PointIoError::ParseError(i + 1))?;
        points.push(Point::new(x, y, z, label));
    }
    Ok(points)
}

fn parse_points_binary(bytes: &[u8]) -> Result<Vec<Point>, PointIoError> {
    if bytes.len() < 16 || &bytes[0..4] != BINARY_MAGIC {
        return Err(PointIoError::BadHeader);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BINARY_VERSION {
        return Err(PointIoError::BadHeader);
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let record = 16usize; // 3 × f32 + u32
    if bytes.len() != 16 + count * record {
        return Err(PointIoError::BadHeader);
    }
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let at = 16 + i * record;
        let f = |o: usize| f32::from_le_bytes(bytes[at + o..at + o + 4].try_into().unwrap());
        let label = u32::from_le_bytes(bytes[at + 12..at + 16].try_into().unwrap());
        points.push(Point::new(f(0) as f64, f(4) as f64, f(8) as f64, label as i32));
    }
    Ok(points)
}

/// Loads a point file in the given format.
pub fn load_points_with(path: &Path, format: PointFormat) -> Result<Vec<Point>, PointIoError> {
    match format {
        PointFormat::Text => parse_points_text(&fs::read_to_string(path)?),
        PointFormat::Binary => parse_points_binary(&fs::read(path)?),
    }
}

/// Loads a point file, sniffing the binary magic to pick the format.
pub fn load_points(path: &Path) -> Result<Vec<Point>, PointIoError> {
    let bytes = fs::read(path)?;
    if bytes.len() >= 4 && &bytes[0..4] == BINARY_MAGIC {
        parse_points_binary(&bytes)
    } else {
        parse_points_text(&String::from_utf8_lossy(&bytes))
    }
}

/// Writes a point file.  Text output prints coordinates with `f64`
/// round-trip precision; binary output narrows coordinates to `f32` and
/// labels to `u32` per the record layout.
pub fn save_points(
    path: &Path,
    points: &[Point],
    format: PointFormat,
) -> Result<(), PointIoError> {
    match format {
        PointFormat::Text => {
            let mut out = String::new();
            for p in points {
                out.push_str(&format!("{} {} {} {}\n", p.pos[0], p.pos[1], p.pos[2], p.label));
            }
            fs::write(path, out)?;
        }
        PointFormat::Binary => {
            let mut buf = Vec::with_capacity(16 + points.len() * 16);
            buf.extend_from_slice(BINARY_MAGIC);
            buf.extend_from_slice(&BINARY_VERSION.to_le_bytes());
            buf.extend_from_slice(&(points.len() as u64).to_le_bytes());
            for p in points {
                for d in 0..3 {
                    buf.extend_from_slice(&(p.pos[d] as f32).to_le_bytes());
                }
                buf.extend_from_slice(&(p.label as u32).to_le_bytes());
            }
            let mut f = fs::File::create(path)?;
            f.write_all(&buf)?;
        }
    }
    Ok(())
}
