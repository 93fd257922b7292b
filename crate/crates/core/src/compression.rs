//! Voxel-grid compression: bin points into cubic cells of edge g by
//! v = floor(p / g) per axis (mathematical floor, so -0.2 / 0.01 lands in
//! cell -20... -1 side, never truncated toward zero), keep one
//! representative point per occupied cell, and remember the point-to-cell
//! assignment so per-representative features can be broadcast back to the
//! dense cloud.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{GeometryError, PointCloud};
use crate::ply::{self, PlyError};

#[derive(Debug, Error)]
pub enum CompressionError {
    #[error("invalid voxel spec: {0}")]
    InvalidSpec(String),
    #[error("cannot compress an empty cloud")]
    EmptyCloud,
    #[error("cell coordinate {cell} on axis {axis} exceeds +/-2^31; choose a larger g")]
    CellOutOfRange { axis: usize, cell: i64 },
    #[error("{got} per-representative values for {expected} representatives")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid compressed cloud: {0}")]
    Invalid(String),
    #[error("cloud error: {0}")]
    Cloud(#[from] GeometryError),
    #[error("ply error: {0}")]
    Ply(#[from] PlyError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed sidecar: {0}")]
    Format(String),
}

/// Cubic voxel edge length in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelSpec {
    pub g: f64,
}

impl Default for VoxelSpec {
    fn default() -> Self {
        Self { g: 0.01 }
    }
}

impl VoxelSpec {
    pub fn new(g: f64) -> Result<Self, CompressionError> {
        let spec = Self { g };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CompressionError> {
        if !(self.g.is_finite() && self.g > 0.0) {
            return Err(CompressionError::InvalidSpec(format!(
                "g = {} must be positive and finite",
                self.g
            )));
        }
        Ok(())
    }
}

/// How the representative point of a voxel is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RepresentativeRule {
    /// Deterministic default: the member with the lowest original index.
    LowestIndex,
    /// Uniform member draw per voxel, reproducible from the seed. Kept
    /// behind this flag for parity with randomized grid sampling.
    SeededRandom(u64),
}

/// A voxel-compressed cloud plus the bookkeeping to invert it:
/// `inverse_index[i]` names the representative of original point i, so
/// representative features broadcast back to the dense cloud in one gather.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCloud {
    /// One point per occupied voxel, ordered by first occurrence of the
    /// voxel in the input.
    pub representatives: PointCloud,
    /// Cell coordinates, aligned with `representatives`.
    pub voxel_coords: Vec<[i64; 3]>,
    /// Dense-to-representative map, aligned with the input cloud.
    pub inverse_index: Vec<u32>,
}

impl CompressedCloud {
    pub fn len(&self) -> usize {
        self.representatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.representatives.is_empty()
    }

    pub fn validate(&self) -> Result<(), CompressionError> {
        self.representatives.validate()?;
        let m = self.representatives.len();
        if self.voxel_coords.len() != m {
            return Err(CompressionError::Invalid(format!(
                "{} voxel coords for {} representatives",
                self.voxel_coords.len(),
                m
            )));
        }
        if self.inverse_index.is_empty() || m == 0 {
            return Err(CompressionError::Invalid(
                "compressed cloud must be non-empty".into(),
            ));
        }
        if let Some(bad) = self.inverse_index.iter().find(|&&r| r as usize >= m) {
            return Err(CompressionError::Invalid(format!(
                "inverse index {} out of range for {} representatives",
                bad, m
            )));
        }
        Ok(())
    }
}

const CELL_LIMIT: i64 = 1 << 31;

fn voxel_key(p: &[f64; 3], g: f64) -> Result<[i64; 3], CompressionError> {
    let mut key = [0i64; 3];
    for axis in 0..3 {
        let cell = (p[axis] / g).floor();
        // f64 beyond 2^53 would alias neighboring cells anyway; the 2^31
        // bound keeps the key space comfortably collision-free.
        if cell.abs() > CELL_LIMIT as f64 {
            return Err(CompressionError::CellOutOfRange {
                axis,
                // Saturating cast; only used for the error message.
                cell: cell as i64,
            });
        }
        key[axis] = cell as i64;
    }
    Ok(key)
}

/// Compress with the default lowest-index representative rule.
pub fn compress(cloud: &PointCloud, spec: &VoxelSpec) -> Result<CompressedCloud, CompressionError> {
    compress_with_rule(cloud, spec, RepresentativeRule::LowestIndex)
}

pub fn compress_with_rule(
    cloud: &PointCloud,
    spec: &VoxelSpec,
    rule: RepresentativeRule,
) -> Result<CompressedCloud, CompressionError> {
    spec.validate()?;
    cloud.validate()?;
    if cloud.is_empty() {
        return Err(CompressionError::EmptyCloud);
    }
    let n = cloud.len();
    if n > u32::MAX as usize {
        return Err(CompressionError::Invalid(format!(
            "{} points exceed the u32 inverse-index range",
            n
        )));
    }

    // Group member indices per voxel, voxels in first-occurrence order.
    let mut slot: HashMap<[i64; 3], u32> = HashMap::new();
    let mut members: Vec<Vec<u32>> = Vec::new();
    let mut cells: Vec<[i64; 3]> = Vec::new();
    let mut inverse_index = vec![0u32; n];
    for (i, p) in cloud.coords.iter().enumerate() {
        let key = voxel_key(p, spec.g)?;
        let j = *slot.entry(key).or_insert_with(|| {
            members.push(Vec::new());
            cells.push(key);
            (members.len() - 1) as u32
        });
        members[j as usize].push(i as u32);
        inverse_index[i] = j;
    }

    let mut rng = match rule {
        RepresentativeRule::LowestIndex => None,
        RepresentativeRule::SeededRandom(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let chosen: Vec<u32> = members
        .iter()
        .map(|m| match rng.as_mut() {
            // First member == lowest index, because input order is scanned once.
            None => m[0],
            Some(rng) => m[rng.gen_range(0..m.len())],
        })
        .collect();

    let gather3 = |src: &Vec<[f64; 3]>| -> Vec<[f64; 3]> {
        chosen.iter().map(|&i| src[i as usize]).collect()
    };
    let representatives = PointCloud {
        coords: gather3(&cloud.coords),
        colors: chosen.iter().map(|&i| cloud.colors[i as usize]).collect(),
        normals: cloud.normals.as_ref().map(gather3),
        pixel_src: cloud
            .pixel_src
            .as_ref()
            .map(|src| chosen.iter().map(|&i| src[i as usize]).collect()),
    };
    Ok(CompressedCloud {
        representatives,
        voxel_coords: cells,
        inverse_index,
    })
}

/// Broadcast one value per representative back to the dense cloud.
pub fn decompress_feature<T: Clone>(
    comp: &CompressedCloud,
    rep_values: &[T],
) -> Result<Vec<T>, CompressionError> {
    if rep_values.len() != comp.len() {
        return Err(CompressionError::LengthMismatch {
            expected: comp.len(),
            got: rep_values.len(),
        });
    }
    Ok(comp
        .inverse_index
        .iter()
        .map(|&r| rep_values[r as usize].clone())
        .collect())
}

/// Write the representatives as PLY and the assignment as a sidecar of
/// N little-endian uint32 inverse indices followed by 3M little-endian
/// int64 voxel coordinates.
pub fn write_compressed(
    ply_path: &Path,
    sidecar_path: &Path,
    comp: &CompressedCloud,
) -> Result<(), CompressionError> {
    comp.validate()?;
    ply::write_ply(ply_path, &comp.representatives)?;
    let mut w = BufWriter::new(File::create(sidecar_path)?);
    for &idx in &comp.inverse_index {
        w.write_all(&idx.to_le_bytes())?;
    }
    for cell in &comp.voxel_coords {
        for axis in 0..3 {
            w.write_all(&cell[axis].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_compressed`]. The sidecar carries no counts of its
/// own: M comes from the PLY and N from the remaining byte length.
pub fn read_compressed(
    ply_path: &Path,
    sidecar_path: &Path,
) -> Result<CompressedCloud, CompressionError> {
    let representatives = ply::read_ply(ply_path)?;
    let m = representatives.len();
    let mut r = BufReader::new(File::open(sidecar_path)?);
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let coord_bytes = 24 * m;
    if data.len() < coord_bytes || (data.len() - coord_bytes) % 4 != 0 {
        return Err(CompressionError::Format(format!(
            "{} bytes cannot hold {} voxel coords plus uint32 indices",
            data.len(),
            m
        )));
    }
    let n = (data.len() - coord_bytes) / 4;
    let mut inverse_index = Vec::with_capacity(n);
    for i in 0..n {
        inverse_index.push(u32::from_le_bytes(data[4 * i..4 * i + 4].try_into().unwrap()));
    }
    let mut voxel_coords = Vec::with_capacity(m);
    for j in 0..m {
        let base = 4 * n + 24 * j;
        let mut cell = [0i64; 3];
        for axis in 0..3 {
            let off = base + 8 * axis;
            cell[axis] = i64::from_le_bytes(data[off..off + 8].try_into().unwrap());
        }
        voxel_coords.push(cell);
    }
    let comp = CompressedCloud {
        representatives,
        voxel_coords,
        inverse_index,
    };
    comp.validate()?;
    Ok(comp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud_from(coords: Vec<[f64; 3]>) -> PointCloud {
        let n = coords.len();
        let colors = (0..n).map(|i| [(i % 200) as f32 / 255.0, 0.0, 0.0]).collect();
        let mut cloud = PointCloud::new(coords, colors).unwrap();
        cloud.pixel_src = Some((0..n).map(|i| [i as u32, 0]).collect());
        cloud
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cloud_from(
            (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(0.05..2.0),
                    ]
                })
                .collect(),
        )
    }

    /// Reference group-by: collect members per cell, pick the minimum
    /// index, order groups by that minimum. Equivalent to the
    /// first-occurrence rule because the first occurrence of a cell is its
    /// minimum member.
    fn oracle_compress(cloud: &PointCloud, g: f64) -> (Vec<u32>, Vec<u32>, Vec<[i64; 3]>) {
        let mut groups: BTreeMap<[i64; 3], Vec<u32>> = BTreeMap::new();
        for (i, p) in cloud.coords.iter().enumerate() {
            // The keying rule floor(p / g) is part of the contract and is
            // shared; the grouping and ordering route is independent.
            let key = [
                (p[0] / g).floor() as i64,
                (p[1] / g).floor() as i64,
                (p[2] / g).floor() as i64,
            ];
            groups.entry(key).or_default().push(i as u32);
        }
        let mut ordered: Vec<([i64; 3], Vec<u32>)> = groups.into_iter().collect();
        ordered.sort_by_key(|(_, members)| members[0]);
        let reps: Vec<u32> = ordered.iter().map(|(_, m)| m[0]).collect();
        let cells: Vec<[i64; 3]> = ordered.iter().map(|(c, _)| *c).collect();
        let mut inverse = vec![0u32; cloud.len()];
        for (j, (_, members)) in ordered.iter().enumerate() {
            for &i in members {
                inverse[i as usize] = j as u32;
            }
        }
        (reps, inverse, cells)
    }

    #[test]
    fn single_point_cloud() {
        let cloud = cloud_from(vec![[0.123, -0.456, 0.789]]);
        let comp = compress(&cloud, &VoxelSpec::default()).unwrap();
        assert_eq!(comp.len(), 1);
        assert_eq!(comp.inverse_index, vec![0]);
        assert_eq!(comp.representatives.coords[0], cloud.coords[0]);
    }

    #[test]
    fn same_cell_merges_to_lowest_index() {
        let cloud = cloud_from(vec![[0.004, 0.002, 0.503], [0.006, 0.001, 0.507]]);
        let comp = compress(&cloud, &VoxelSpec::default()).unwrap();
        assert_eq!(comp.len(), 1);
        assert_eq!(comp.representatives.coords[0], cloud.coords[0]);
        assert_eq!(comp.inverse_index, vec![0, 0]);
    }

    #[test]
    fn cell_boundary_splits() {
        let cloud = cloud_from(vec![[0.009999, 0.0, 0.5], [0.010001, 0.0, 0.5]]);
        let comp = compress(&cloud, &VoxelSpec::default()).unwrap();
        assert_eq!(comp.len(), 2);
        assert_eq!(comp.voxel_coords[0][0], 0);
        assert_eq!(comp.voxel_coords[1][0], 1);
    }

    #[test]
    fn negative_coordinates_use_mathematical_floor() {
        let key = voxel_key(&[-0.005, -0.2, 0.5], 0.01).unwrap();
        assert_eq!(key, [-1, -20, 50]);
    }

    #[test]
    fn rejects_empty_and_out_of_range() {
        let empty = PointCloud::default();
        assert!(matches!(
            compress(&empty, &VoxelSpec::default()),
            Err(CompressionError::EmptyCloud)
        ));
        let huge = cloud_from(vec![[1e9, 0.0, 0.5]]);
        assert!(matches!(
            compress(&huge, &VoxelSpec::default()),
            Err(CompressionError::CellOutOfRange { axis: 0, .. })
        ));
        assert!(VoxelSpec::new(0.0).is_err());
        assert!(VoxelSpec::new(f64::NAN).is_err());
    }

    #[test]
    fn matches_group_by_oracle() {
        for seed in 0..10 {
            let cloud = random_cloud(3000, seed);
            let g = [0.01, 0.05, 0.2][seed as usize % 3];
            let comp = compress(&cloud, &VoxelSpec::new(g).unwrap()).unwrap();
            let (reps, inverse, cells) = oracle_compress(&cloud, g);
            assert_eq!(comp.inverse_index, inverse);
            assert_eq!(comp.voxel_coords, cells);
            let got_reps: Vec<[f64; 3]> = comp.representatives.coords.clone();
            let want_reps: Vec<[f64; 3]> =
                reps.iter().map(|&i| cloud.coords[i as usize]).collect();
            assert_eq!(got_reps, want_reps);
        }
    }

    #[test]
    fn representatives_ordered_by_first_occurrence() {
        let cloud = cloud_from(vec![
            [0.5, 0.0, 0.5],   // cell A
            [-0.5, 0.0, 0.5],  // cell B
            [0.501, 0.0, 0.5], // cell A again
            [0.0, 0.3, 0.5],   // cell C
        ]);
        let comp = compress(&cloud, &VoxelSpec::new(0.1).unwrap()).unwrap();
        assert_eq!(comp.len(), 3);
        assert_eq!(comp.inverse_index, vec![0, 1, 0, 2]);
        assert_eq!(comp.representatives.coords[0], cloud.coords[0]);
        assert_eq!(comp.representatives.coords[1], cloud.coords[1]);
        assert_eq!(comp.representatives.coords[2], cloud.coords[3]);
    }

    #[test]
    fn recompression_is_identity() {
        let cloud = random_cloud(5000, 42);
        let spec = VoxelSpec::default();
        let comp = compress(&cloud, &spec).unwrap();
        let again = compress(&comp.representatives, &spec).unwrap();
        assert_eq!(again.len(), comp.len());
        let identity: Vec<u32> = (0..comp.len() as u32).collect();
        assert_eq!(again.inverse_index, identity);
        assert_eq!(again.representatives, comp.representatives);
    }

    #[test]
    fn permutation_changes_order_not_partition() {
        let cloud = random_cloud(800, 9);
        let spec = VoxelSpec::default();
        let comp_a = compress(&cloud, &spec).unwrap();

        let mut order: Vec<usize> = (0..cloud.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let permuted = cloud_from(order.iter().map(|&i| cloud.coords[i]).collect());
        let comp_b = compress(&permuted, &spec).unwrap();

        let partition = |inv: &[u32]| -> std::collections::BTreeSet<Vec<u32>> {
            let mut groups: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
            for (i, &r) in inv.iter().enumerate() {
                groups.entry(r).or_default().push(i as u32);
            }
            groups.into_values().collect()
        };
        // Map permuted point ids back to original ids before comparing.
        let mut groups_b: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (i, &r) in comp_b.inverse_index.iter().enumerate() {
            groups_b.entry(r).or_default().push(order[i] as u32);
        }
        let part_b: std::collections::BTreeSet<Vec<u32>> = groups_b
            .into_values()
            .map(|mut v| {
                v.sort_unstable();
                v
            })
            .collect();
        assert_eq!(partition(&comp_a.inverse_index), part_b);
    }

    #[test]
    fn seeded_random_rule_is_reproducible_and_in_cell() {
        let cloud = random_cloud(2000, 77);
        let spec = VoxelSpec::default();
        let base = compress(&cloud, &spec).unwrap();
        let a = compress_with_rule(&cloud, &spec, RepresentativeRule::SeededRandom(5)).unwrap();
        let b = compress_with_rule(&cloud, &spec, RepresentativeRule::SeededRandom(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), base.len());
        // Same cells in the same order; only the member choice may differ.
        assert_eq!(a.voxel_coords, base.voxel_coords);
        assert_eq!(a.inverse_index, base.inverse_index);
        for (j, rep) in a.representatives.coords.iter().enumerate() {
            let key = voxel_key(rep, spec.g).unwrap();
            assert_eq!(key, a.voxel_coords[j]);
        }
    }

    #[test]
    fn decompress_broadcasts_representative_values() {
        let comp = CompressedCloud {
            representatives: cloud_from(vec![[0.0, 0.0, 0.5], [0.5, 0.0, 0.5]]),
            voxel_coords: vec![[0, 0, 50], [50, 0, 50]],
            inverse_index: vec![1, 0, 1],
        };
        let out = decompress_feature(&comp, &[10, 20]).unwrap();
        assert_eq!(out, vec![20, 10, 20]);
        assert!(matches!(
            decompress_feature(&comp, &[1]),
            Err(CompressionError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn decompress_restores_dense_length_and_cell_consistency() {
        let cloud = random_cloud(4000, 3);
        let spec = VoxelSpec::default();
        let comp = compress(&cloud, &spec).unwrap();
        let cells = decompress_feature(&comp, &comp.voxel_coords).unwrap();
        assert_eq!(cells.len(), cloud.len());
        for (p, cell) in cloud.coords.iter().zip(&cells) {
            assert_eq!(voxel_key(p, spec.g).unwrap(), *cell);
        }
    }

    #[test]
    fn sidecar_roundtrip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let ply_path = dir.path().join("reps.ply");
        let sidecar = dir.path().join("reps.voxidx");
        let cloud = random_cloud(500, 21);
        let comp = compress(&cloud, &VoxelSpec::default()).unwrap();
        write_compressed(&ply_path, &sidecar, &comp).unwrap();

        let bytes = std::fs::read(&sidecar).unwrap();
        assert_eq!(bytes.len(), 4 * cloud.len() + 24 * comp.len());
        // First record is a little-endian uint32 inverse index.
        assert_eq!(
            u32::from_le_bytes(bytes[0..4].try_into().unwrap()),
            comp.inverse_index[0]
        );
        let coord0 = 4 * cloud.len();
        assert_eq!(
            i64::from_le_bytes(bytes[coord0..coord0 + 8].try_into().unwrap()),
            comp.voxel_coords[0][0]
        );

        let back = read_compressed(&ply_path, &sidecar).unwrap();
        assert_eq!(back.inverse_index, comp.inverse_index);
        assert_eq!(back.voxel_coords, comp.voxel_coords);
        assert_eq!(back.len(), comp.len());
    }

    #[test]
    fn sidecar_rejects_bad_length() {
        let dir = tempfile::tempdir().unwrap();
        let ply_path = dir.path().join("reps.ply");
        let sidecar = dir.path().join("reps.voxidx");
        let cloud = random_cloud(100, 22);
        let comp = compress(&cloud, &VoxelSpec::default()).unwrap();
        write_compressed(&ply_path, &sidecar, &comp).unwrap();
        let bytes = std::fs::read(&sidecar).unwrap();
        std::fs::write(&sidecar, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            read_compressed(&ply_path, &sidecar),
            Err(CompressionError::Format(_))
        ));
    }
}
