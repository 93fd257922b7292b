//! Hybrid dataset construction and frame I/O: per-trajectory depth
//! source assignment at fixed probabilities, manifest building, the raw
//! float32 depth format with its JSON intrinsics sidecar, and an
//! analytic ray-cast scene generator that stands in for a simulator at
//! desk scale.
//!
//! Source assignment hashes (seed, trajectory_id) to a uniform draw
//! instead of walking a sequential RNG, so extending the trajectory list
//! never reshuffles existing assignments.
//!
//! World frame matches the camera convention: x right, y down, z
//! forward. The tabletop plane lives at y = 0 with objects extending
//! into negative y, and the camera sits above the table (negative y)
//! looking down at it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, DepthImage, GeometryError, RgbImage};
use crate::util::atomic_write;

#[derive(Debug, Error)]
pub enum DatapipeError {
    #[error("invalid source mix: {0}")]
    InvalidMix(String),
    #[error("invalid frame record: {0}")]
    InvalidFrame(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("geometry error: {0}")]
    Geometry(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed depth file: {0}")]
    Format(String),
}

/// Environment variable that may prefix relative data paths.
pub const DATA_ROOT_ENV: &str = "ANY3D_DATA_ROOT";

/// Configured root for relative data paths, if any.
pub fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)
}

/// Prefix a relative path with the configured data root; absolute paths
/// and unset roots pass through unchanged.
pub fn resolve_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match data_root() {
        Some(root) => root.join(path),
        None => path.to_path_buf(),
    }
}

/// Named depth sources with mixing probabilities; the order of entries
/// fixes the cumulative walk used by the draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMix {
    pub entries: Vec<(String, f64)>,
}

impl Default for SourceMix {
    /// The hybrid training mix: 30% simulator/sensor depth, 30/20/20%
    /// across the three estimated-depth providers.
    fn default() -> Self {
        Self {
            entries: vec![
                ("Simulator/Sensor".to_string(), 0.30),
                ("UniDepthV2".to_string(), 0.30),
                ("DepthAnything3".to_string(), 0.20),
                ("MapAnything".to_string(), 0.20),
            ],
        }
    }
}

impl SourceMix {
    pub fn validate(&self) -> Result<(), DatapipeError> {
        if self.entries.is_empty() {
            return Err(DatapipeError::InvalidMix("no sources".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut sum = 0.0;
        for (name, p) in &self.entries {
            if name.is_empty() {
                return Err(DatapipeError::InvalidMix("empty source name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(DatapipeError::InvalidMix(format!(
                    "duplicate source {}",
                    name
                )));
            }
            if !p.is_finite() || *p < 0.0 {
                return Err(DatapipeError::InvalidMix(format!(
                    "probability {} for {} must be a non-negative number",
                    p, name
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatapipeError::InvalidMix(format!(
                "probabilities sum to {}, expected 1",
                sum
            )));
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }
}

/// Keyed hash to a uniform draw in [0, 1): sha256(seed LE || id bytes),
/// first 8 digest bytes as a little-endian integer, top 53 bits scaled.
fn unit_draw(seed: u64, trajectory_id: &str) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(trajectory_id.as_bytes());
    let digest = hasher.finalize();
    let bits = u64::from_le_bytes(digest[..8].try_into().unwrap());
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn pick_source<'a>(mix: &'a SourceMix, seed: u64, trajectory_id: &str) -> &'a str {
    let u = unit_draw(seed, trajectory_id);
    let mut acc = 0.0;
    for (name, p) in &mix.entries {
        acc += p;
        if u < acc {
            return name;
        }
    }
    // u landed inside the rounding slack above the final cumulative sum.
    &mix.entries.last().unwrap().0
}

/// Depth source for one trajectory, deterministic in (seed, id).
pub fn source_for_trajectory<'a>(
    mix: &'a SourceMix,
    seed: u64,
    trajectory_id: &str,
) -> Result<&'a str, DatapipeError> {
    mix.validate()?;
    Ok(pick_source(mix, seed, trajectory_id))
}

/// Assign every trajectory a source, independently per id.
pub fn sample_sources(
    mix: &SourceMix,
    trajectory_ids: &[String],
    seed: u64,
) -> Result<BTreeMap<String, String>, DatapipeError> {
    mix.validate()?;
    let mut out = BTreeMap::new();
    for id in trajectory_ids {
        out.insert(id.clone(), pick_source(mix, seed, id).to_string());
    }
    Ok(out)
}

/// A frame awaiting source assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameInput {
    pub trajectory_id: String,
    pub frame_id: u64,
    pub rgb_path: String,
    pub depth_path: String,
    pub intrinsics: CameraIntrinsics,
}

/// One manifest line: a frame with its assigned depth source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub trajectory_id: String,
    pub frame_id: u64,
    pub rgb_path: String,
    pub depth_source: String,
    pub depth_path: String,
    pub intrinsics: CameraIntrinsics,
}

/// What [`build_manifest`] produced and whether it is clean.
#[derive(Debug, Clone, Serialize)]
pub struct ManifestReport {
    pub path: PathBuf,
    pub n_frames: usize,
    pub source_counts: BTreeMap<String, u64>,
    pub issues: Vec<String>,
    pub ok: bool,
}

fn validate_frame(frame: &FrameInput) -> Result<(), DatapipeError> {
    if frame.trajectory_id.is_empty() {
        return Err(DatapipeError::InvalidFrame("empty trajectory id".into()));
    }
    if frame.rgb_path.is_empty() || frame.depth_path.is_empty() {
        return Err(DatapipeError::InvalidFrame(format!(
            "frame {}/{} has an empty path",
            frame.trajectory_id, frame.frame_id
        )));
    }
    frame.intrinsics.validate()?;
    Ok(())
}

/// Write the JSONL manifest: one [`FrameRecord`] per input frame in
/// input order, then a `{"summary": {source: count}}` footer. With
/// `check_files` set, every depth file is checked for existence and for
/// the exact payload length its intrinsics imply; problems are listed in
/// the report and clear its `ok` flag, but the manifest is still
/// written.
pub fn build_manifest(
    frames: &[FrameInput],
    mix: &SourceMix,
    seed: u64,
    out_path: &Path,
    check_files: bool,
) -> Result<ManifestReport, DatapipeError> {
    mix.validate()?;
    for frame in frames {
        validate_frame(frame)?;
    }
    let mut assignment: BTreeMap<&str, &str> = BTreeMap::new();
    for frame in frames {
        assignment
            .entry(frame.trajectory_id.as_str())
            .or_insert_with(|| pick_source(mix, seed, &frame.trajectory_id));
    }

    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut issues = Vec::new();
    let mut body = String::new();
    for frame in frames {
        let source = assignment[frame.trajectory_id.as_str()];
        if check_files {
            let depth = resolve_path(Path::new(&frame.depth_path));
            let want = frame.intrinsics.n_pixels() as u64 * 4;
            match fs::metadata(&depth) {
                Err(_) => issues.push(format!("missing depth file {}", depth.display())),
                Ok(md) if md.len() != want => issues.push(format!(
                    "depth file {} holds {} bytes, intrinsics imply {}",
                    depth.display(),
                    md.len(),
                    want
                )),
                Ok(_) => {}
            }
        }
        let record = FrameRecord {
            trajectory_id: frame.trajectory_id.clone(),
            frame_id: frame.frame_id,
            rgb_path: frame.rgb_path.clone(),
            depth_source: source.to_string(),
            depth_path: frame.depth_path.clone(),
            intrinsics: frame.intrinsics,
        };
        *counts.entry(source.to_string()).or_insert(0) += 1;
        body.push_str(&serde_json::to_string(&record)?);
        body.push('\n');
    }
    body.push_str(&serde_json::json!({ "summary": &counts }).to_string());
    body.push('\n');
    let resolved = resolve_path(out_path);
    if let Some(parent) = resolved.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    atomic_write(&resolved, body.as_bytes())?;
    Ok(ManifestReport {
        path: resolved,
        n_frames: frames.len(),
        source_counts: counts,
        ok: issues.is_empty(),
        issues,
    })
}

/// Write raw little-endian float32 depth row-major, plus a JSON
/// intrinsics sidecar at `<path>.json`. Both writes are atomic.
pub fn write_depth(
    path: &Path,
    depth: &DepthImage,
    intr: &CameraIntrinsics,
) -> Result<(), DatapipeError> {
    intr.validate()?;
    depth.validate()?;
    if depth.width != intr.width || depth.height != intr.height {
        return Err(DatapipeError::InvalidFrame(format!(
            "depth is {}x{}, intrinsics say {}x{}",
            depth.width, depth.height, intr.width, intr.height
        )));
    }
    let mut payload = Vec::with_capacity(depth.values.len() * 4);
    for v in &depth.values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let resolved = resolve_path(path);
    if let Some(parent) = resolved.parent() {
        fs::create_dir_all(parent)?;
    }
    atomic_write(&resolved, &payload)?;
    let sidecar = serde_json::to_string(intr)?;
    atomic_write(&sidecar_path(&resolved), sidecar.as_bytes())?;
    Ok(())
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Read a depth file and its sidecar back; the payload must hold exactly
/// width x height float32 values.
pub fn read_depth(path: &Path) -> Result<(DepthImage, CameraIntrinsics), DatapipeError> {
    let resolved = resolve_path(path);
    let sidecar = fs::read_to_string(sidecar_path(&resolved))?;
    let intr: CameraIntrinsics = serde_json::from_str(&sidecar)?;
    intr.validate()?;
    let payload = fs::read(&resolved)?;
    let want = intr.n_pixels() * 4;
    if payload.len() != want {
        return Err(DatapipeError::Format(format!(
            "{} holds {} bytes, sidecar implies {}",
            resolved.display(),
            payload.len(),
            want
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let depth = DepthImage::new(intr.width, intr.height, values)?;
    Ok((depth, intr))
}

/// Finite rectangular tabletop: a horizontal plane patch at `height`
/// (y-down world, so objects on the table extend into negative y).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub height: f64,
    pub center_x: f64,
    pub center_z: f64,
    pub extent_x: f64,
    pub extent_z: f64,
}

impl Default for TableSpec {
    /// A 50 cm x 40 cm tabletop region at y = 0.
    fn default() -> Self {
        Self {
            height: 0.0,
            center_x: 0.0,
            center_z: 0.05,
            extent_x: 0.50,
            extent_z: 0.40,
        }
    }
}

/// Analytic scene primitive with a flat albedo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneObject {
    Sphere {
        center: [f64; 3],
        radius: f64,
        color: [f32; 3],
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        yaw: f64,
        color: [f32; 3],
    },
}

/// Camera placement: intrinsics plus position and the point it looks at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneCamera {
    pub intrinsics: CameraIntrinsics,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
}

/// Full analytic scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub table: TableSpec,
    pub table_color: [f32; 3],
    pub objects: Vec<SceneObject>,
    pub camera: SceneCamera,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DatapipeError> {
        if !(self.table.extent_x > 0.0 && self.table.extent_z > 0.0) {
            return Err(DatapipeError::InvalidScene(
                "table extents must be positive".into(),
            ));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            match obj {
                SceneObject::Sphere { radius, .. } if *radius <= 0.0 => {
                    return Err(DatapipeError::InvalidScene(format!(
                        "object {} has non-positive radius",
                        i
                    )));
                }
                SceneObject::Box { half_extents, .. }
                    if half_extents.iter().any(|h| *h <= 0.0) =>
                {
                    return Err(DatapipeError::InvalidScene(format!(
                        "object {} has non-positive extent",
                        i
                    )));
                }
                _ => {}
            }
        }
        self.camera.intrinsics.validate()?;
        camera_basis(&self.camera)?;
        Ok(())
    }
}

/// Orthonormal camera axes (x right, y down, z forward) from position
/// and look-at point.
fn camera_basis(
    cam: &SceneCamera,
) -> Result<(Vector3<f64>, Vector3<f64>, Vector3<f64>), DatapipeError> {
    let pos = Vector3::from(cam.position);
    let target = Vector3::from(cam.look_at);
    let forward = target - pos;
    if forward.norm() < 1e-9 {
        return Err(DatapipeError::InvalidScene(
            "camera looks at its own position".into(),
        ));
    }
    let z_c = forward.normalize();
    // Reference "down" is world +y; the basis degenerates for a camera
    // looking straight along it.
    let x_c = Vector3::new(0.0, 1.0, 0.0).cross(&z_c);
    if x_c.norm() < 1e-9 {
        return Err(DatapipeError::InvalidScene(
            "camera axis is vertical; the image orientation is undefined".into(),
        ));
    }
    let x_c = x_c.normalize();
    let y_c = z_c.cross(&x_c);
    Ok((x_c, y_c, z_c))
}

const RAY_EPS: f64 = 1e-9;

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    albedo: [f32; 3],
}

fn hit_table(table: &TableSpec, color: [f32; 3], pos: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    if dir.y.abs() < 1e-12 {
        return None;
    }
    let t = (table.height - pos.y) / dir.y;
    if t <= RAY_EPS {
        return None;
    }
    let p = pos + dir * t;
    if (p.x - table.center_x).abs() <= table.extent_x / 2.0
        && (p.z - table.center_z).abs() <= table.extent_z / 2.0
    {
        // Tabletop normal points up, i.e. toward negative y.
        Some(Hit {
            t,
            normal: Vector3::new(0.0, -1.0, 0.0),
            albedo: color,
        })
    } else {
        None
    }
}

fn hit_sphere(
    center: &Vector3<f64>,
    radius: f64,
    color: [f32; 3],
    pos: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<Hit> {
    let oc = pos - center;
    let a = dir.dot(dir);
    let b = 2.0 * oc.dot(dir);
    let c = oc.dot(&oc) - radius * radius;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let near = (-b - sq) / (2.0 * a);
    let far = (-b + sq) / (2.0 * a);
    let t = if near > RAY_EPS {
        near
    } else if far > RAY_EPS {
        far
    } else {
        return None;
    };
    let p = pos + dir * t;
    Some(Hit {
        t,
        normal: (p - center).normalize(),
        albedo: color,
    })
}

fn rotate_y(v: &Vector3<f64>, yaw: f64) -> Vector3<f64> {
    let (s, c) = yaw.sin_cos();
    Vector3::new(c * v.x + s * v.z, v.y, -s * v.x + c * v.z)
}

fn hit_box(
    center: &Vector3<f64>,
    half: &[f64; 3],
    yaw: f64,
    color: [f32; 3],
    pos: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<Hit> {
    // Slab test in the box frame (rotate the ray by -yaw about y).
    let pl = rotate_y(&(pos - center), -yaw);
    let dl = rotate_y(dir, -yaw);
    let mut t_enter = RAY_EPS;
    let mut t_exit = f64::INFINITY;
    let mut axis = 3usize;
    for i in 0..3 {
        if dl[i].abs() < 1e-12 {
            if pl[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dl[i];
        let mut t0 = (-half[i] - pl[i]) * inv;
        let mut t1 = (half[i] - pl[i]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_enter {
            t_enter = t0;
            axis = i;
        }
        t_exit = t_exit.min(t1);
        if t_enter > t_exit {
            return None;
        }
    }
    if axis == 3 {
        // The ray starts inside the box; no entry face to shade.
        return None;
    }
    let mut normal_local = Vector3::zeros();
    normal_local[axis] = -dl[axis].signum();
    Some(Hit {
        t: t_enter,
        normal: rotate_y(&normal_local, yaw),
        albedo: color,
    })
}

/// Directional light for shading, pointing from surfaces toward the
/// light (up and slightly toward the camera side).
fn light_dir() -> Vector3<f64> {
    Vector3::new(-0.25, -0.9, -0.35).normalize()
}

const AMBIENT: f64 = 0.25;
const DIFFUSE: f64 = 0.75;

/// Render the scene by per-pixel ray casting: depth is the nearest hit's
/// optical-axis distance (0 where nothing is hit), RGB is the hit
/// object's albedo under Lambert shading with a fixed directional light.
pub fn synth_scene(spec: &SceneSpec) -> Result<(RgbImage, DepthImage), DatapipeError> {
    spec.validate()?;
    let (x_c, y_c, z_c) = camera_basis(&spec.camera)?;
    let pos = Vector3::from(spec.camera.position);
    let intr = &spec.camera.intrinsics;
    let light = light_dir();
    let n = intr.n_pixels();
    let mut depth = vec![0.0f32; n];
    let mut rgb = vec![[0.0f32; 3]; n];
    for v in 0..intr.height {
        for u in 0..intr.width {
            // Unnormalized ray with unit optical-axis component, so the
            // ray parameter at a hit IS the camera-frame depth z.
            let du = (u as f64 - intr.cx) / intr.fx;
            let dv = (v as f64 - intr.cy) / intr.fy;
            let dir = x_c * du + y_c * dv + z_c;

            let mut best: Option<Hit> = None;
            let mut consider = |hit: Option<Hit>| {
                if let Some(h) = hit {
                    if best.as_ref().map_or(true, |b| h.t < b.t) {
                        best = Some(h);
                    }
                }
            };
            consider(hit_table(&spec.table, spec.table_color, &pos, &dir));
            for obj in &spec.objects {
                match obj {
                    SceneObject::Sphere {
                        center,
                        radius,
                        color,
                    } => consider(hit_sphere(
                        &Vector3::from(*center),
                        *radius,
                        *color,
                        &pos,
                        &dir,
                    )),
                    SceneObject::Box {
                        center,
                        half_extents,
                        yaw,
                        color,
                    } => consider(hit_box(
                        &Vector3::from(*center),
                        half_extents,
                        *yaw,
                        *color,
                        &pos,
                        &dir,
                    )),
                }
            }
            if let Some(hit) = best {
                let idx = (v * intr.width + u) as usize;
                depth[idx] = hit.t as f32;
                let mut normal = hit.normal;
                if normal.dot(&dir) > 0.0 {
                    normal = -normal;
                }
                let brightness = AMBIENT + DIFFUSE * normal.dot(&light).max(0.0);
                for c in 0..3 {
                    rgb[idx][c] = (hit.albedo[c] as f64 * brightness).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Ok((
        RgbImage::new(intr.width, intr.height, rgb)?,
        DepthImage::new(intr.width, intr.height, depth)?,
    ))
}

/// The committed default scene: a 50 x 40 cm table seen from 62 cm away
/// at a 56 degree tilt, with four objects resting on it. The constants
/// are calibrated so the default crop keeps 30k-60k points and 1 cm
/// voxel compression keeps 3k-8k.
pub fn default_tabletop() -> SceneSpec {
    SceneSpec {
        table: TableSpec::default(),
        table_color: [0.62, 0.58, 0.52],
        objects: vec![
            SceneObject::Sphere {
                center: [-0.12, -0.09, -0.05],
                radius: 0.09,
                color: [0.78, 0.18, 0.16],
            },
            SceneObject::Sphere {
                center: [0.13, -0.055, -0.09],
                radius: 0.055,
                color: [0.15, 0.3, 0.75],
            },
            SceneObject::Box {
                center: [-0.13, -0.13, 0.12],
                half_extents: [0.09, 0.13, 0.035],
                yaw: 0.6,
                color: [0.2, 0.6, 0.25],
            },
            SceneObject::Box {
                center: [0.14, -0.11, 0.10],
                half_extents: [0.075, 0.11, 0.03],
                yaw: -0.45,
                color: [0.82, 0.72, 0.2],
            },
        ],
        camera: SceneCamera {
            intrinsics: CameraIntrinsics {
                fx: 300.0,
                fy: 300.0,
                cx: 128.0,
                cy: 128.0,
                width: 256,
                height: 256,
            },
            position: [0.0, -0.52, -0.30],
            look_at: [0.0, 0.0, 0.05],
        },
        seed: 0,
    }
}

/// Deterministically perturb object positions and yaws (seed ^ salt), so
/// one spec yields a family of distinct frames. Objects keep their
/// resting height and stay on the table.
pub fn jitter_objects(spec: &SceneSpec, salt: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ salt);
    let mut out = spec.clone();
    let margin = 0.07;
    let x_lo = spec.table.center_x - spec.table.extent_x / 2.0 + margin;
    let x_hi = spec.table.center_x + spec.table.extent_x / 2.0 - margin;
    let z_lo = spec.table.center_z - spec.table.extent_z / 2.0 + margin;
    let z_hi = spec.table.center_z + spec.table.extent_z / 2.0 - margin;
    for obj in &mut out.objects {
        let dx: f64 = rng.gen_range(-0.03..=0.03);
        let dz: f64 = rng.gen_range(-0.03..=0.03);
        let dyaw: f64 = rng.gen_range(-0.4..=0.4);
        match obj {
            SceneObject::Sphere { center, .. } => {
                center[0] = (center[0] + dx).clamp(x_lo, x_hi);
                center[2] = (center[2] + dz).clamp(z_lo, z_hi);
            }
            SceneObject::Box { center, yaw, .. } => {
                center[0] = (center[0] + dx).clamp(x_lo, x_hi);
                center[2] = (center[2] + dz).clamp(z_lo, z_hi);
                *yaw += dyaw;
            }
        }
    }
    out
}
