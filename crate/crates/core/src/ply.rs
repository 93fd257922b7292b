//! Binary little-endian PLY export and import for point clouds.
//!
//! The schema is fixed: x, y, z as float32 meters, red, green, blue as
//! uint8, and optionally nx, ny, nz as float32 when the cloud carries
//! normals. The reader accepts exactly the layouts the writer produces.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::{GeometryError, PointCloud};

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed ply: {0}")]
    Format(String),
    #[error("cloud invalid after read: {0}")]
    Cloud(#[from] GeometryError),
}

const POSITION_PROPS: [&str; 3] = ["x", "y", "z"];
const COLOR_PROPS: [&str; 3] = ["red", "green", "blue"];
const NORMAL_PROPS: [&str; 3] = ["nx", "ny", "nz"];

/// Write a cloud to binary little-endian PLY. Coordinates and normals are
/// stored at float32 precision; colors quantize to uint8.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<(), PlyError> {
    cloud.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for p in POSITION_PROPS {
        header.push_str(&format!("property float {}\n", p));
    }
    for p in COLOR_PROPS {
        header.push_str(&format!("property uchar {}\n", p));
    }
    if cloud.normals.is_some() {
        for p in NORMAL_PROPS {
            header.push_str(&format!("property float {}\n", p));
        }
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;
    for i in 0..cloud.len() {
        for a in 0..3 {
            w.write_all(&(cloud.coords[i][a] as f32).to_le_bytes())?;
        }
        for a in 0..3 {
            let c = (cloud.colors[i][a] * 255.0).round().clamp(0.0, 255.0) as u8;
            w.write_all(&[c])?;
        }
        if let Some(normals) = &cloud.normals {
            for a in 0..3 {
                w.write_all(&(normals[i][a] as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a cloud written by [`write_ply`]. Pixel provenance is not stored
/// in PLY, so `pixel_src` comes back as `None`.
pub fn read_ply(path: &Path) -> Result<PointCloud, PlyError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)
            .map_err(|_| PlyError::Format("unterminated header".into()))?;
        header.push(byte[0]);
        if header.ends_with(b"end_header\n") {
            break;
        }
        if header.len() > 4096 {
            return Err(PlyError::Format("header exceeds 4096 bytes".into()));
        }
    }
    let header = String::from_utf8(header).map_err(|_| PlyError::Format("non-utf8 header".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(PlyError::Format("missing ply magic".into()));
    }
    if lines.next() != Some("format binary_little_endian 1.0") {
        return Err(PlyError::Format(
            "only binary_little_endian 1.0 is supported".into(),
        ));
    }
    let mut n_vertices: Option<usize> = None;
    let mut props: Vec<(String, String)> = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("comment") => continue,
            Some("element") => {
                if parts.next() != Some("vertex") {
                    return Err(PlyError::Format("only vertex elements are supported".into()));
                }
                let count = parts
                    .next()
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| PlyError::Format("bad vertex count".into()))?;
                n_vertices = Some(count);
            }
            Some("property") => {
                let ty = parts
                    .next()
                    .ok_or_else(|| PlyError::Format("property without type".into()))?;
                let name = parts
                    .next()
                    .ok_or_else(|| PlyError::Format("property without name".into()))?;
                props.push((ty.to_string(), name.to_string()));
            }
            Some("end_header") => break,
            other => {
                return Err(PlyError::Format(format!(
                    "unsupported header line: {:?}",
                    other
                )))
            }
        }
    }
    let n = n_vertices.ok_or_else(|| PlyError::Format("missing vertex element".into()))?;

    let base: Vec<(String, String)> = POSITION_PROPS
        .iter()
        .map(|p| ("float".to_string(), p.to_string()))
        .chain(COLOR_PROPS.iter().map(|p| ("uchar".to_string(), p.to_string())))
        .collect();
    let with_normals: Vec<(String, String)> = base
        .iter()
        .cloned()
        .chain(NORMAL_PROPS.iter().map(|p| ("float".to_string(), p.to_string())))
        .collect();
    let has_normals = if props == base {
        false
    } else if props == with_normals {
        true
    } else {
        return Err(PlyError::Format(format!(
            "unsupported property layout: {:?}",
            props
        )));
    };

    let stride = if has_normals { 12 + 3 + 12 } else { 12 + 3 };
    let mut data = vec![0u8; n * stride];
    r.read_exact(&mut data)
        .map_err(|_| PlyError::Format("vertex data truncated".into()))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(PlyError::Format("trailing bytes after vertex data".into()));
    }

    let mut coords = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut normals = if has_normals {
        Some(Vec::with_capacity(n))
    } else {
        None
    };
    let f32_at = |buf: &[u8], off: usize| f32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
    for i in 0..n {
        let rec = &data[i * stride..(i + 1) * stride];
        coords.push([
            f32_at(rec, 0) as f64,
            f32_at(rec, 4) as f64,
            f32_at(rec, 8) as f64,
        ]);
        colors.push([
            rec[12] as f32 / 255.0,
            rec[13] as f32 / 255.0,
            rec[14] as f32 / 255.0,
        ]);
        if let Some(normals) = normals.as_mut() {
            normals.push([
                f32_at(rec, 15) as f64,
                f32_at(rec, 19) as f64,
                f32_at(rec, 23) as f64,
            ]);
        }
    }
    let cloud = PointCloud {
        coords,
        colors,
        normals,
        pixel_src: None,
    };
    cloud.validate()?;
    Ok(cloud)
}
