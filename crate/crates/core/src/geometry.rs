//! Pinhole camera geometry: back-projection of depth pixels to metric 3D,
//! projection back to the image plane, RGB-D frame lifting, synchronized
//! point cloud cropping, and k-NN plane-fit normal estimation.
//!
//! Pixel coordinates are integer indices into the image grid; no +0.5
//! center offset is applied anywhere, so projection is the exact algebraic
//! inverse of back-projection.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid crop spec: {0}")]
    InvalidCrop(String),
    #[error("invalid cloud: {0}")]
    InvalidCloud(String),
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds {
        u: u32,
        v: u32,
        width: u32,
        height: u32,
    },
    #[error("depth {0} is not positive and finite")]
    InvalidDepth(f64),
    #[error("cannot project point with z = {0}; z must be > 0")]
    NonPositiveZ(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("normal estimation needs 3 <= k <= n_points, got k = {k} with n = {n}")]
    BadNeighborhood { k: usize, n: usize },
}

/// Pinhole intrinsics in pixels. Principal point lies inside the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let fields = [self.fx, self.fy, self.cx, self.cy];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(
                "fx, fy, cx, cy must be finite".into(),
            ));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx = {}, fy = {}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics(
                "image dimensions must be at least 1x1".into(),
            ));
        }
        if self.cx < 0.0
            || self.cx >= self.width as f64
            || self.cy < 0.0
            || self.cy >= self.height as f64
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains_pixel(&self, u: u32, v: u32) -> bool {
        u < self.width && v < self.height
    }

    pub fn n_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Row-major single-channel metric depth. 0.0 marks an invalid pixel;
/// range filtering is the crop's job, not the image's.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self, GeometryError> {
        let img = Self {
            width,
            height,
            values,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let expect = self.width as usize * self.height as usize;
        if self.values.len() != expect {
            return Err(GeometryError::InvalidImage(format!(
                "depth buffer holds {} values, {}x{} image needs {}",
                self.values.len(),
                self.width,
                self.height,
                expect
            )));
        }
        for (i, &d) in self.values.iter().enumerate() {
            if !d.is_finite() || d < 0.0 {
                return Err(GeometryError::InvalidImage(format!(
                    "depth value {} at index {} is not finite and >= 0",
                    d, i
                )));
            }
        }
        Ok(())
    }

    pub fn at(&self, u: u32, v: u32) -> f32 {
        self.values[v as usize * self.width as usize + u as usize]
    }
}

/// Row-major RGB with float channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, values: Vec<[f32; 3]>) -> Result<Self, GeometryError> {
        let img = Self {
            width,
            height,
            values,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let expect = self.width as usize * self.height as usize;
        if self.values.len() != expect {
            return Err(GeometryError::InvalidImage(format!(
                "rgb buffer holds {} values, {}x{} image needs {}",
                self.values.len(),
                self.width,
                self.height,
                expect
            )));
        }
        for (i, px) in self.values.iter().enumerate() {
            if px.iter().any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0) {
                return Err(GeometryError::InvalidImage(format!(
                    "rgb value {:?} at index {} outside [0, 1]",
                    px, i
                )));
            }
        }
        Ok(())
    }

    pub fn at(&self, u: u32, v: u32) -> [f32; 3] {
        self.values[v as usize * self.width as usize + u as usize]
    }
}

/// Camera-frame keep volume: a height band, a cylinder around the optical
/// axis, and a depth range. All bounds are closed intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub y_min: f64,
    pub y_max: f64,
    pub radius_xz_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for CropSpec {
    /// Desk-scale defaults: half a meter of height band around the optical
    /// axis, 1.2 m lateral radius, 0.1-2.0 m depth.
    fn default() -> Self {
        Self {
            y_min: -0.5,
            y_max: 0.5,
            radius_xz_max: 1.2,
            z_min: 0.1,
            z_max: 2.0,
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let fields = [
            self.y_min,
            self.y_max,
            self.radius_xz_max,
            self.z_min,
            self.z_max,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidCrop("bounds must be finite".into()));
        }
        if self.y_min > self.y_max {
            return Err(GeometryError::InvalidCrop(format!(
                "y_min {} > y_max {}",
                self.y_min, self.y_max
            )));
        }
        if self.z_min > self.z_max {
            return Err(GeometryError::InvalidCrop(format!(
                "z_min {} > z_max {}",
                self.z_min, self.z_max
            )));
        }
        if self.radius_xz_max <= 0.0 {
            return Err(GeometryError::InvalidCrop(format!(
                "radius_xz_max {} must be positive",
                self.radius_xz_max
            )));
        }
        Ok(())
    }

    /// The keep predicate shared by every synchronized attribute stream.
    pub fn keeps(&self, p: [f64; 3]) -> bool {
        let [x, y, z] = p;
        y >= self.y_min
            && y <= self.y_max
            && x * x + z * z <= self.radius_xz_max * self.radius_xz_max
            && z >= self.z_min
            && z <= self.z_max
    }
}

/// Camera-frame point cloud with per-point color and optional normals and
/// pixel provenance. All present attribute streams share one length and
/// every point sits in front of the camera (z > 0).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    pub colors: Vec<[f32; 3]>,
    pub normals: Option<Vec<[f64; 3]>>,
    pub pixel_src: Option<Vec<[u32; 2]>>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>, colors: Vec<[f32; 3]>) -> Result<Self, GeometryError> {
        let cloud = Self {
            coords,
            colors,
            normals: None,
            pixel_src: None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let n = self.coords.len();
        if self.colors.len() != n {
            return Err(GeometryError::InvalidCloud(format!(
                "{} colors for {} points",
                self.colors.len(),
                n
            )));
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(GeometryError::InvalidCloud(format!(
                    "{} normals for {} points",
                    normals.len(),
                    n
                )));
            }
        }
        if let Some(px) = &self.pixel_src {
            if px.len() != n {
                return Err(GeometryError::InvalidCloud(format!(
                    "{} pixel origins for {} points",
                    px.len(),
                    n
                )));
            }
        }
        for (i, p) in self.coords.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(GeometryError::InvalidCloud(format!(
                    "non-finite coordinate {:?} at index {}",
                    p, i
                )));
            }
            if p[2] <= 0.0 {
                return Err(GeometryError::InvalidCloud(format!(
                    "point {} has z = {} <= 0 (behind the camera)",
                    i, p[2]
                )));
            }
        }
        Ok(())
    }
}

/// Plane-fit normals for a cloud, with per-point degeneracy flags.
#[derive(Debug, Clone)]
pub struct NormalEstimate {
    /// Input cloud with `normals` populated.
    pub cloud: PointCloud,
    /// True where the neighborhood had rank < 2 and the sentinel
    /// (0, 0, -1) was substituted.
    pub degenerate: Vec<bool>,
}

/// Normal substituted when a neighborhood is rank-deficient; points back
/// at the camera so the orientation convention still holds.
pub const DEGENERATE_NORMAL: [f64; 3] = [0.0, 0.0, -1.0];

/// Lift one depth pixel to camera coordinates:
/// x = (u - cx) * d / fx, y = (v - cy) * d / fy, z = d.
pub fn backproject_pixel(
    intr: &CameraIntrinsics,
    u: u32,
    v: u32,
    d: f64,
) -> Result<[f64; 3], GeometryError> {
    if !intr.contains_pixel(u, v) {
        return Err(GeometryError::PixelOutOfBounds {
            u,
            v,
            width: intr.width,
            height: intr.height,
        });
    }
    if !(d.is_finite() && d > 0.0) {
        return Err(GeometryError::InvalidDepth(d));
    }
    Ok([
        (u as f64 - intr.cx) * d / intr.fx,
        (v as f64 - intr.cy) * d / intr.fy,
        d,
    ])
}

/// Project a camera-frame point to continuous pixel coordinates:
/// u = fx * x / z + cx, v = fy * y / z + cy. The result may fall outside
/// the image bounds; callers clamp or bin as their contract requires.
pub fn project_point(intr: &CameraIntrinsics, p: [f64; 3]) -> Result<[f64; 2], GeometryError> {
    let [x, y, z] = p;
    if !(z.is_finite() && z > 0.0) {
        return Err(GeometryError::NonPositiveZ(z));
    }
    Ok([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])
}

/// Lift every valid depth pixel of an RGB-D frame, in row-major pixel
/// order, copying the color and recording the source pixel per point.
pub fn lift_frame(
    intr: &CameraIntrinsics,
    rgb: &RgbImage,
    depth: &DepthImage,
) -> Result<PointCloud, GeometryError> {
    if rgb.width != intr.width || rgb.height != intr.height {
        return Err(GeometryError::DimensionMismatch(format!(
            "rgb is {}x{}, intrinsics expect {}x{}",
            rgb.width, rgb.height, intr.width, intr.height
        )));
    }
    if depth.width != intr.width || depth.height != intr.height {
        return Err(GeometryError::DimensionMismatch(format!(
            "depth is {}x{}, intrinsics expect {}x{}",
            depth.width, depth.height, intr.width, intr.height
        )));
    }
    let mut coords = Vec::new();
    let mut colors = Vec::new();
    let mut pixel_src = Vec::new();
    for v in 0..intr.height {
        for u in 0..intr.width {
            let d = depth.at(u, v) as f64;
            if d > 0.0 {
                coords.push(backproject_pixel(intr, u, v, d)?);
                colors.push(rgb.at(u, v));
                pixel_src.push([u, v]);
            }
        }
    }
    Ok(PointCloud {
        coords,
        colors,
        normals: None,
        pixel_src: Some(pixel_src),
    })
}

/// Filter a cloud to the crop volume, keeping every attribute stream
/// synchronized. Order is preserved; the operation is idempotent.
pub fn crop_cloud(cloud: &PointCloud, spec: &CropSpec) -> PointCloud {
    let keep: Vec<bool> = cloud.coords.iter().map(|&p| spec.keeps(p)).collect();
    let filter_vec3 = |src: &Vec<[f64; 3]>| -> Vec<[f64; 3]> {
        src.iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(v, _)| *v)
            .collect()
    };
    PointCloud {
        coords: filter_vec3(&cloud.coords),
        colors: cloud
            .colors
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(v, _)| *v)
            .collect(),
        normals: cloud.normals.as_ref().map(filter_vec3),
        pixel_src: cloud.pixel_src.as_ref().map(|src| {
            src.iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .collect()
        }),
    }
}

/// Exact k nearest neighbors via a uniform hash grid with expanding
/// Chebyshev shells. A cell at shell distance s is at least (s-1) * cell
/// away, so once the k-th best distance is within s * cell the search is
/// provably complete. Ties break on the lower point index.
struct GridIndex<'a> {
    coords: &'a [[f64; 3]],
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<u32>>,
}

impl<'a> GridIndex<'a> {
    fn build(coords: &'a [[f64; 3]]) -> Self {
        let n = coords.len().max(1) as f64;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in coords {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let span = (0..3)
            .map(|a| hi[a] - lo[a])
            .fold(0.0_f64, f64::max)
            .max(1e-9);
        // Sized for surface-like clouds (~n^(1/2) spacing) without
        // degenerating on volumetric ones (~n^(1/3)).
        let cell = span * (2.0 / n.sqrt()).max(1.0 / n.cbrt());
        let mut buckets: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in coords.iter().enumerate() {
            buckets
                .entry(Self::key(p, cell))
                .or_default()
                .push(i as u32);
        }
        Self {
            coords,
            cell,
            buckets,
        }
    }

    fn key(p: &[f64; 3], cell: f64) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    /// Indices of the k nearest points to `q` (the query point itself
    /// included when it belongs to the cloud), sorted by (distance, index).
    fn k_nearest(&self, q: &[f64; 3], k: usize) -> Vec<u32> {
        let center = Self::key(q, self.cell);
        let n = self.coords.len();
        let mut cand: Vec<(f64, u32)> = Vec::with_capacity(4 * k);
        let mut shell: i64 = 0;
        loop {
            self.visit_shell(center, shell, |idx| {
                let p = &self.coords[idx as usize];
                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                cand.push((d2, idx));
            });
            if cand.len() >= k {
                cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let kth = cand[k - 1].0;
                let safe = shell as f64 * self.cell;
                if kth <= safe * safe {
                    break;
                }
            }
            if cand.len() == n {
                cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                break;
            }
            shell += 1;
        }
        cand.truncate(k);
        cand.into_iter().map(|(_, i)| i).collect()
    }

    fn visit_shell(&self, center: [i64; 3], s: i64, mut f: impl FnMut(u32)) {
        let mut visit_cell = |key: [i64; 3]| {
            if let Some(bucket) = self.buckets.get(&key) {
                for &idx in bucket {
                    f(idx);
                }
            }
        };
        if s == 0 {
            visit_cell(center);
            return;
        }
        for dx in -s..=s {
            for dy in -s..=s {
                if dx.abs() == s || dy.abs() == s {
                    for dz in -s..=s {
                        visit_cell([center[0] + dx, center[1] + dy, center[2] + dz]);
                    }
                } else {
                    visit_cell([center[0] + dx, center[1] + dy, center[2] - s]);
                    visit_cell([center[0] + dx, center[1] + dy, center[2] + s]);
                }
            }
        }
    }
}

/// Ratio under which the middle covariance eigenvalue counts as zero,
/// i.e. the neighborhood is a line or a single point.
const RANK_EPS: f64 = 1e-9;

/// Estimate per-point unit normals as the smallest-eigenvalue direction of
/// the k-neighborhood covariance, oriented toward the camera origin
/// (dot(n, -p) >= 0). Rank-deficient neighborhoods get the sentinel
/// normal and a flag instead of an error.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<NormalEstimate, GeometryError> {
    let n = cloud.len();
    if k < 3 || k > n {
        return Err(GeometryError::BadNeighborhood { k, n });
    }
    let index = GridIndex::build(&cloud.coords);
    let mut normals = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    for p in &cloud.coords {
        let neighbors = index.k_nearest(p, k);
        let mut mean = Vector3::zeros();
        for &j in &neighbors {
            mean += Vector3::from(cloud.coords[j as usize]);
        }
        mean /= k as f64;
        let mut cov = Matrix3::zeros();
        for &j in &neighbors {
            let d = Vector3::from(cloud.coords[j as usize]) - mean;
            cov += d * d.transpose();
        }
        cov /= k as f64;

        let eig = cov.symmetric_eigen();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let [lo, mid, hi] = order;
        let l_mid = eig.eigenvalues[mid].max(0.0);
        let l_hi = eig.eigenvalues[hi].max(0.0);
        if l_hi <= 0.0 || l_mid <= RANK_EPS * l_hi {
            normals.push(DEGENERATE_NORMAL);
            degenerate.push(true);
            continue;
        }
        let mut normal = eig.eigenvectors.column(lo).into_owned();
        normal /= normal.norm();
        // Orient toward the camera origin at 0: dot(n, -p) >= 0.
        if normal.dot(&Vector3::from(*p)) > 0.0 {
            normal = -normal;
        }
        normals.push([normal.x, normal.y, normal.z]);
        degenerate.push(false);
    }
    let mut out = cloud.clone();
    out.normals = Some(normals);
    Ok(NormalEstimate {
        cloud: out,
        degenerate,
    })
}
