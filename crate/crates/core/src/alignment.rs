//! Patch-index alignment between 3D points and the 2D patch grid of a
//! frozen patch encoder: project each representative into the image,
//! bin it into the patch it lands on, and pool per-patch features by
//! scatter-mean, substituting a learnable empty token where no point
//! projects.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, GeometryError};

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("invalid patch grid: {0}")]
    InvalidGrid(String),
    #[error("invalid feature set: {0}")]
    InvalidFeatures(String),
    #[error("projection failed: {0}")]
    Projection(#[from] GeometryError),
    #[error("{n_feats} feature rows for {n_assign} assignments")]
    CountMismatch { n_assign: usize, n_feats: usize },
    #[error("empty token has dimension {token}, features have {feats}")]
    DimMismatch { token: usize, feats: usize },
    #[error("assignment {a} out of range for {patches} patches")]
    AssignmentOutOfRange { a: u32, patches: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed feature dump: {0}")]
    Format(String),
}

/// Row-major patch grid over an image plane, overhanging the image by at
/// most one patch per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: u32,
    pub cols: u32,
    pub patch_px: u32,
    pub width: u32,
    pub height: u32,
}

impl Default for PatchGrid {
    /// 224 x 224 image, 14 px patches, 16 x 16 = 256 patches, matching
    /// patch-14 vision transformer encoders.
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 16,
            patch_px: 14,
            width: 224,
            height: 224,
        }
    }
}

impl PatchGrid {
    pub fn new(
        rows: u32,
        cols: u32,
        patch_px: u32,
        width: u32,
        height: u32,
    ) -> Result<Self, AlignmentError> {
        let grid = Self {
            rows,
            cols,
            patch_px,
            width,
            height,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), AlignmentError> {
        if self.rows == 0 || self.cols == 0 || self.patch_px == 0 {
            return Err(AlignmentError::InvalidGrid(
                "rows, cols and patch_px must be positive".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(AlignmentError::InvalidGrid(
                "image dimensions must be positive".into(),
            ));
        }
        let r = self.rows as u64 * self.patch_px as u64;
        let c = self.cols as u64 * self.patch_px as u64;
        if r > self.height as u64 + self.patch_px as u64
            || c > self.width as u64 + self.patch_px as u64
        {
            return Err(AlignmentError::InvalidGrid(format!(
                "{}x{} patches of {} px overhang a {}x{} image by more than one patch",
                self.rows, self.cols, self.patch_px, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.rows as usize * self.cols as usize
    }
}

/// Dense feature rows, one per point or representative.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, AlignmentError> {
        let set = Self { dim, data };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), AlignmentError> {
        if self.dim == 0 {
            return Err(AlignmentError::InvalidFeatures(
                "feature dimension must be positive".into(),
            ));
        }
        if self.data.len() % self.dim != 0 {
            return Err(AlignmentError::InvalidFeatures(format!(
                "{} values do not tile rows of dimension {}",
                self.data.len(),
                self.dim
            )));
        }
        if let Some(bad) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(AlignmentError::InvalidFeatures(format!(
                "non-finite feature value {}",
                bad
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-patch pooled features in patch row-major order, with the mask of
/// patches that received no points. Empty patches hold `empty_token`
/// bit-exactly: the token is copied, never averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureGrid {
    pub rows: u32,
    pub cols: u32,
    pub dim: usize,
    pub features: Vec<f64>,
    pub empty_mask: Vec<bool>,
    pub empty_token: Vec<f64>,
}

impl PatchFeatureGrid {
    pub fn n_patches(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn patch(&self, j: usize) -> &[f64] {
        &self.features[j * self.dim..(j + 1) * self.dim]
    }

    pub fn empty_fraction(&self) -> f64 {
        if self.empty_mask.is_empty() {
            return 0.0;
        }
        self.empty_mask.iter().filter(|&&e| e).count() as f64 / self.empty_mask.len() as f64
    }
}

/// Patch index of each point: project to continuous pixel coordinates,
/// divide by the patch size, floor, and clamp to the grid border so
/// points slightly outside the image stay attached to the nearest patch.
/// a = row * cols + col, row-major.
pub fn assign_patches(
    grid: &PatchGrid,
    intr: &CameraIntrinsics,
    points: &[[f64; 3]],
) -> Result<Vec<u32>, AlignmentError> {
    grid.validate()?;
    let mut out = Vec::with_capacity(points.len());
    for &p in points {
        let [u, v] = crate::geometry::project_point(intr, p)?;
        let col = ((u / grid.patch_px as f64).floor() as i64).clamp(0, grid.cols as i64 - 1);
        let row = ((v / grid.patch_px as f64).floor() as i64).clamp(0, grid.rows as i64 - 1);
        out.push(row as u32 * grid.cols + col as u32);
    }
    Ok(out)
}

/// Pool features per patch: the mean of assigned rows where a patch has
/// members, the empty token elsewhere. Accumulation runs in f64 over
/// points in ascending index order; that summation order is the reference
/// semantics for bit-level comparisons.
pub fn scatter_mean(
    assignments: &[u32],
    feats: &FeatureSet,
    grid: &PatchGrid,
    empty_token: &[f64],
) -> Result<PatchFeatureGrid, AlignmentError> {
    grid.validate()?;
    feats.validate()?;
    if assignments.len() != feats.len() {
        return Err(AlignmentError::CountMismatch {
            n_assign: assignments.len(),
            n_feats: feats.len(),
        });
    }
    if empty_token.len() != feats.dim {
        return Err(AlignmentError::DimMismatch {
            token: empty_token.len(),
            feats: feats.dim,
        });
    }
    let n_patches = grid.n_patches();
    let dim = feats.dim;
    let mut sums = vec![0.0f64; n_patches * dim];
    let mut counts = vec![0u64; n_patches];
    for (i, &a) in assignments.iter().enumerate() {
        let a = a as usize;
        if a >= n_patches {
            return Err(AlignmentError::AssignmentOutOfRange {
                a: a as u32,
                patches: n_patches,
            });
        }
        let row = feats.row(i);
        let acc = &mut sums[a * dim..(a + 1) * dim];
        for (s, x) in acc.iter_mut().zip(row) {
            *s += x;
        }
        counts[a] += 1;
    }
    let mut features = vec![0.0f64; n_patches * dim];
    let mut empty_mask = vec![false; n_patches];
    for j in 0..n_patches {
        let dst = &mut features[j * dim..(j + 1) * dim];
        if counts[j] == 0 {
            dst.copy_from_slice(empty_token);
            empty_mask[j] = true;
        } else {
            let c = counts[j] as f64;
            for (d, s) in dst.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                *d = s / c;
            }
        }
    }
    Ok(PatchFeatureGrid {
        rows: grid.rows,
        cols: grid.cols,
        dim,
        features,
        empty_mask,
        empty_token: empty_token.to_vec(),
    })
}

/// Deterministic starting value for the learnable empty token: small
/// zero-mean gaussian entries.
pub fn seeded_empty_token(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    (0..dim).map(|_| 0.02 * crate::util::gaussian(&mut rng)).collect()
}

/// On-disk feature block: two little-endian uint32 (row count, dimension),
/// float32 rows in row-major order, then one 0/1 byte per row marking
/// empty patches. Token dumps reuse the format with an all-zero mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub dim: usize,
    pub data: Vec<f32>,
    pub empty_mask: Vec<bool>,
}

impl FeatureDump {
    pub fn count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn from_grid(grid: &PatchFeatureGrid) -> Self {
        Self {
            dim: grid.dim,
            data: grid.features.iter().map(|&v| v as f32).collect(),
            empty_mask: grid.empty_mask.clone(),
        }
    }

    pub fn from_rows(dim: usize, rows: &[f64]) -> Self {
        Self {
            dim,
            data: rows.iter().map(|&v| v as f32).collect(),
            empty_mask: vec![false; if dim == 0 { 0 } else { rows.len() / dim }],
        }
    }
}

pub fn write_feature_dump(path: &Path, dump: &FeatureDump) -> Result<(), AlignmentError> {
    if dump.dim == 0 || dump.data.len() % dump.dim != 0 {
        return Err(AlignmentError::InvalidFeatures(format!(
            "{} values do not tile rows of dimension {}",
            dump.data.len(),
            dump.dim
        )));
    }
    let count = dump.count();
    if dump.empty_mask.len() != count {
        return Err(AlignmentError::InvalidFeatures(format!(
            "{} mask entries for {} rows",
            dump.empty_mask.len(),
            count
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(count as u32).to_le_bytes())?;
    w.write_all(&(dump.dim as u32).to_le_bytes())?;
    for &v in &dump.data {
        w.write_all(&v.to_le_bytes())?;
    }
    for &e in &dump.empty_mask {
        w.write_all(&[e as u8])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_dump(path: &Path) -> Result<FeatureDump, AlignmentError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 8 {
        return Err(AlignmentError::Format("missing header".into()));
    }
    let count = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(AlignmentError::Format("zero feature dimension".into()));
    }
    let expect = 8 + 4 * count * dim + count;
    if buf.len() != expect {
        return Err(AlignmentError::Format(format!(
            "{} bytes for {} rows of dimension {}, expected {}",
            buf.len(),
            count,
            dim,
            expect
        )));
    }
    let mut data = Vec::with_capacity(count * dim);
    for i in 0..count * dim {
        let off = 8 + 4 * i;
        data.push(f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()));
    }
    let mask_off = 8 + 4 * count * dim;
    let mut empty_mask = Vec::with_capacity(count);
    for i in 0..count {
        match buf[mask_off + i] {
            0 => empty_mask.push(false),
            1 => empty_mask.push(true),
            b => {
                return Err(AlignmentError::Format(format!(
                    "mask byte {} at row {} is not 0/1",
                    b, i
                )))
            }
        }
    }
    Ok(FeatureDump {
        dim,
        data,
        empty_mask,
    })
}
