//! Randomized invariants over the geometry, compression, alignment and
//! flow-sample layers: the properties hold for all inputs the generators
//! can reach, not just the worked examples in the unit tests.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use patchfuse_core::alignment::{scatter_mean, FeatureSet, PatchGrid};
use patchfuse_core::compression::{compress, VoxelSpec};
use patchfuse_core::geometry::{
    backproject_pixel, crop_cloud, project_point, CameraIntrinsics, CropSpec, PointCloud,
};
use patchfuse_core::objectives::{make_flow_sample, ActionChunk};

fn cloud_strategy(max_len: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(
        (-3.0..3.0f64, -3.0..3.0f64, 0.01..5.0f64).prop_map(|(x, y, z)| [x, y, z]),
        1..max_len,
    )
}

fn cloud_from(coords: Vec<[f64; 3]>) -> PointCloud {
    let colors = vec![[0.25f32, 0.5, 0.75]; coords.len()];
    PointCloud::new(coords, colors).unwrap()
}

proptest! {
    /// Lifting a pixel and projecting the point lands back on the pixel.
    #[test]
    fn backprojection_round_trips_through_projection(
        w in 2u32..1024,
        h in 2u32..1024,
        fx in 50.0..2000.0f64,
        fy in 50.0..2000.0f64,
        cfx in 0.05..0.95f64,
        cfy in 0.05..0.95f64,
        uf in 0.0..1.0f64,
        vf in 0.0..1.0f64,
        d in 1e-3..50.0f64,
    ) {
        let intr = CameraIntrinsics::new(
            fx, fy, cfx * f64::from(w), cfy * f64::from(h), w, h,
        ).unwrap();
        let u = ((uf * f64::from(w)) as u32).min(w - 1);
        let v = ((vf * f64::from(h)) as u32).min(h - 1);
        let p = backproject_pixel(&intr, u, v, d).unwrap();
        let [pu, pv] = project_point(&intr, p).unwrap();
        prop_assert!((pu - f64::from(u)).abs() <= 1e-9 * (1.0 + f64::from(u)));
        prop_assert!((pv - f64::from(v)).abs() <= 1e-9 * (1.0 + f64::from(v)));
    }

    /// Cropping is idempotent and keeps exactly the points the keep
    /// predicate admits.
    #[test]
    fn crop_is_idempotent_and_membership_exact(coords in cloud_strategy(300)) {
        let cloud = cloud_from(coords.clone());
        let spec = CropSpec::default();
        let once = crop_cloud(&cloud, &spec);
        let twice = crop_cloud(&once, &spec);
        prop_assert_eq!(&once.coords, &twice.coords);
        prop_assert_eq!(&once.colors, &twice.colors);
        let expected: Vec<[f64; 3]> = coords
            .iter()
            .copied()
            .filter(|&p| spec.keeps(p))
            .collect();
        prop_assert_eq!(&once.coords, &expected);
    }

    /// Every representative is an input point whose voxel cell matches its
    /// recorded cell; the inverse index maps points into their own cell;
    /// compressing the representatives again is the identity.
    #[test]
    fn compression_is_a_projection_onto_cell_representatives(
        coords in cloud_strategy(300),
        g in 0.005..0.8f64,
    ) {
        let cloud = cloud_from(coords.clone());
        let spec = VoxelSpec::new(g).unwrap();
        let comp = compress(&cloud, &spec).unwrap();
        let cell_of = |p: [f64; 3]| {
            [
                (p[0] / g).floor() as i64,
                (p[1] / g).floor() as i64,
                (p[2] / g).floor() as i64,
            ]
        };
        let input: BTreeSet<[u64; 3]> = coords
            .iter()
            .map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()])
            .collect();
        let mut seen_cells = BTreeSet::new();
        for (rep, cell) in comp.representatives.coords.iter().zip(&comp.voxel_coords) {
            prop_assert!(input.contains(&[rep[0].to_bits(), rep[1].to_bits(), rep[2].to_bits()]));
            prop_assert_eq!(&cell_of(*rep), cell);
            prop_assert!(seen_cells.insert(*cell), "duplicate cell {:?}", cell);
        }
        for (p, &idx) in coords.iter().zip(&comp.inverse_index) {
            prop_assert_eq!(cell_of(*p), comp.voxel_coords[idx as usize]);
        }
        let again = compress(&comp.representatives, &spec).unwrap();
        prop_assert_eq!(&again.representatives.coords, &comp.representatives.coords);
        prop_assert_eq!(again.inverse_index, (0..comp.len() as u32).collect::<Vec<_>>());
    }

    /// Pooled means do not depend on the order rows arrive in, and the
    /// empty mask is a function of the assignment multiset alone.
    #[test]
    fn scatter_mean_is_permutation_invariant(
        n in 1usize..300,
        dim in 1usize..6,
        shuffle_seed in 0u64..1_000_000,
        value_seed in 0u64..1_000_000,
    ) {
        let grid = PatchGrid { rows: 4, cols: 4, patch_px: 14, width: 56, height: 56 };
        let mut rng = ChaCha8Rng::seed_from_u64(value_seed);
        let assignments: Vec<u32> =
            (0..n).map(|_| rand::Rng::gen_range(&mut rng, 0..grid.n_patches() as u32)).collect();
        let data: Vec<f64> =
            (0..n * dim).map(|_| rand::Rng::gen_range(&mut rng, -4.0..4.0)).collect();
        let empty_token: Vec<f64> =
            (0..dim).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let shuffled_assign: Vec<u32> = order.iter().map(|&i| assignments[i]).collect();
        let shuffled_data: Vec<f64> = order
            .iter()
            .flat_map(|&i| data[i * dim..(i + 1) * dim].to_vec())
            .collect();

        let a = scatter_mean(
            &assignments,
            &FeatureSet::new(dim, data).unwrap(),
            &grid,
            &empty_token,
        ).unwrap();
        let b = scatter_mean(
            &shuffled_assign,
            &FeatureSet::new(dim, shuffled_data).unwrap(),
            &grid,
            &empty_token,
        ).unwrap();
        prop_assert_eq!(&a.empty_mask, &b.empty_mask);
        for (x, y) in a.features.iter().zip(&b.features) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{} vs {}", x, y);
        }
    }

    /// The interpolant hits both endpoints, the field is their difference,
    /// and the start point is recoverable from any interior time.
    #[test]
    fn flow_samples_reconstruct_their_endpoints(
        (h, d, a0, noise, t) in (1usize..5, 1usize..8).prop_flat_map(|(h, d)| (
            Just(h),
            Just(d),
            prop::collection::vec(-5.0..5.0f64, h * d),
            prop::collection::vec(-5.0..5.0f64, h * d),
            0.0..=1.0f64,
        )),
    ) {
        let chunk = ActionChunk::new(h, d, a0.clone()).unwrap();
        let sample = make_flow_sample(&chunk, t, &noise).unwrap();
        for i in 0..h * d {
            prop_assert!((sample.u_t[i] - (noise[i] - a0[i])).abs() <= 1e-12);
            let expect = (1.0 - t) * a0[i] + t * noise[i];
            prop_assert!((sample.a_t[i] - expect).abs() <= 1e-12);
            if t < 0.5 {
                // Reconstruct A_0 = (A_t - t eps) / (1 - t) away from the
                // singular endpoint.
                let rec = (sample.a_t[i] - t * noise[i]) / (1.0 - t);
                prop_assert!((rec - a0[i]).abs() <= 1e-9 * (1.0 + a0[i].abs()));
            }
        }
        let at_zero = make_flow_sample(&chunk, 0.0, &noise).unwrap();
        prop_assert_eq!(&at_zero.a_t, &a0);
        let at_one = make_flow_sample(&chunk, 1.0, &noise).unwrap();
        prop_assert_eq!(&at_one.a_t, &noise);
    }
}
