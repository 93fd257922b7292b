//! Finite-difference verification of the hand-written backward passes.
//! The numeric route only ever calls the forward functions, so it stays
//! independent of the analytic gradients it judges: central differences
//! (f(x + h) - f(x - h)) / 2h at step 1e-5, compared by relative error
//! |a - n| / max(|a|, |n|, 1e-3).
//!
//! The fusion check drives the full chain
//! L = sum(upstream . fuse(h2d, project(patch_features), params)) and
//! covers every parameter field plus both inputs; the flow check covers
//! the flow-matching loss gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment::PatchFeatureGrid;
use crate::fusion::{
    fuse, fuse_backward, project_3d_tokens, project_3d_tokens_backward, FusionDims, FusionError,
    FusionParams, TokenSequence,
};
use crate::objectives::{
    draw_flow_sample, flow_matching_grad, flow_matching_loss, ActionChunk, ObjectiveError,
    DEFAULT_ACTION_DIM, DEFAULT_HORIZON,
};
use crate::util::gaussian;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Pass threshold for the fusion chain.
pub const FUSION_TOL: f64 = 1e-4;

/// Pass threshold for the flow-matching loss gradient.
pub const FLOW_TOL: f64 = 1e-6;

/// Relative error floor: below this magnitude the comparison turns
/// absolute, so near-zero gradients do not divide by noise.
pub const REL_FLOOR: f64 = 1e-3;

/// Worst relative error observed in one named gradient block.
#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub block: String,
    pub n_checked: usize,
    pub max_rel_err: f64,
}

/// Outcome of a full check run.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub max_rel_err: f64,
    pub passed: bool,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    fn from_blocks(blocks: Vec<BlockReport>, step: f64, tol: f64) -> Self {
        let max_rel_err = blocks.iter().fold(0.0f64, |m, b| m.max(b.max_rel_err));
        Self {
            step,
            tol,
            max_rel_err,
            passed: max_rel_err <= tol,
            blocks,
        }
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Distinct indices, `take` of them, drawn without replacement.
fn sample_indices(rng: &mut ChaCha8Rng, len: usize, take: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, len, take.min(len)).into_vec()
}

struct FusionCase {
    params: FusionParams,
    patches: PatchFeatureGrid,
    h2d: TokenSequence,
    upstream: TokenSequence,
}

fn fusion_case(dims: FusionDims, seed: u64) -> Result<FusionCase, FusionError> {
    let mut params = FusionParams::init(dims, seed)?;
    // A larger variance floor than the default keeps ln_eps - FD_STEP
    // inside the valid domain while the centered difference probes it.
    params.ln_eps = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6ead);
    let (rows, cols) = (2u32, 2u32);
    let n = (rows * cols) as usize;
    let patches = PatchFeatureGrid {
        rows,
        cols,
        dim: dims.d3,
        features: (0..n * dims.d3).map(|_| gaussian(&mut rng)).collect(),
        empty_mask: vec![false; n],
        empty_token: vec![0.0; dims.d3],
    };
    let mut h2d = TokenSequence::zeros(rows, cols, dims.dtok);
    for v in h2d.data.iter_mut() {
        *v = gaussian(&mut rng);
    }
    let mut upstream = TokenSequence::zeros(rows, cols, dims.dtok);
    for v in upstream.data.iter_mut() {
        *v = gaussian(&mut rng);
    }
    Ok(FusionCase {
        params,
        patches,
        h2d,
        upstream,
    })
}

fn fusion_loss(case: &FusionCase) -> Result<f64, FusionError> {
    let h3d = project_3d_tokens(&case.patches, &case.params)?;
    let fused = fuse(&case.h2d, &h3d, &case.params)?;
    Ok(fused
        .data
        .iter()
        .zip(&case.upstream.data)
        .map(|(f, u)| f * u)
        .sum())
}

/// Mutable view of one named coordinate block of the fusion case.
fn block_slice<'a>(case: &'a mut FusionCase, name: &str) -> &'a mut [f64] {
    let p = &mut case.params;
    match name {
        "w3d" => &mut p.w3d,
        "b3d" => &mut p.b3d,
        "mlp_w1" => &mut p.mlp_w1,
        "mlp_b1" => &mut p.mlp_b1,
        "mlp_w2" => &mut p.mlp_w2,
        "mlp_b2" => &mut p.mlp_b2,
        "ln_scale" => &mut p.ln_scale,
        "ln_shift" => &mut p.ln_shift,
        "ln_eps" => std::slice::from_mut(&mut p.ln_eps),
        "gate" => std::slice::from_mut(&mut p.gate),
        "input_h2d" => &mut case.h2d.data,
        "input_patch_features" => &mut case.patches.features,
        other => panic!("unknown gradient block {}", other),
    }
}

/// Check every parameter field of the fusion block plus both inputs
/// against central finite differences, sampling up to `per_block`
/// coordinates from each block. `corrupt` scales one analytic block to
/// serve as a negative control; a healthy implementation must then fail.
pub fn check_fusion(
    dims: FusionDims,
    seed: u64,
    per_block: usize,
    corrupt: bool,
) -> Result<GradCheckReport, FusionError> {
    let mut case = fusion_case(dims, seed)?;
    let h3d = project_3d_tokens(&case.patches, &case.params)?;
    let fg = fuse_backward(&case.h2d, &h3d, &case.params, &case.upstream)?;
    let pg = project_3d_tokens_backward(&case.patches, &case.params, &fg.d_h3d)?;

    let mut w1 = fg.d_mlp_w1.clone();
    if corrupt {
        for v in w1.iter_mut() {
            *v *= 1.5;
        }
    }
    let analytic: Vec<(&str, Vec<f64>)> = vec![
        ("w3d", pg.d_w3d),
        ("b3d", pg.d_b3d),
        ("mlp_w1", w1),
        ("mlp_b1", fg.d_mlp_b1),
        ("mlp_w2", fg.d_mlp_w2),
        ("mlp_b2", fg.d_mlp_b2),
        ("ln_scale", fg.d_ln_scale),
        ("ln_shift", fg.d_ln_shift),
        ("ln_eps", vec![fg.d_ln_eps]),
        ("gate", vec![fg.d_gate]),
        ("input_h2d", fg.d_h2d.data),
        ("input_patch_features", pg.d_features),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut blocks = Vec::with_capacity(analytic.len());
    for (name, grad) in analytic {
        let picks = sample_indices(&mut rng, grad.len(), per_block.max(1));
        let mut worst = 0.0f64;
        for &i in &picks {
            let slice = block_slice(&mut case, name);
            let keep = slice[i];
            slice[i] = keep + FD_STEP;
            let plus = fusion_loss(&case)?;
            block_slice(&mut case, name)[i] = keep - FD_STEP;
            let minus = fusion_loss(&case)?;
            block_slice(&mut case, name)[i] = keep;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad[i], numeric));
        }
        blocks.push(BlockReport {
            block: name.to_string(),
            n_checked: picks.len(),
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport::from_blocks(blocks, FD_STEP, FUSION_TOL))
}

/// Check the flow-matching loss gradient on `n_draws` random samples,
/// every prediction coordinate of each.
pub fn check_flow_loss(seed: u64, n_draws: usize) -> Result<GradCheckReport, ObjectiveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf10e);
    let n = DEFAULT_HORIZON * DEFAULT_ACTION_DIM;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..n_draws.max(1) {
        let values: Vec<f64> = (0..n).map(|_| gaussian(&mut rng)).collect();
        let a0 = ActionChunk::new(DEFAULT_HORIZON, DEFAULT_ACTION_DIM, values)?;
        let sample = draw_flow_sample(&a0, &mut rng)?;
        let mut pred: Vec<f64> = (0..n).map(|_| gaussian(&mut rng)).collect();
        let grad = flow_matching_grad(&sample, &pred, true)?;
        for i in 0..n {
            let keep = pred[i];
            pred[i] = keep + FD_STEP;
            let plus = flow_matching_loss(&sample, &pred, true)?;
            pred[i] = keep - FD_STEP;
            let minus = flow_matching_loss(&sample, &pred, true)?;
            pred[i] = keep;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad[i], numeric));
            checked += 1;
        }
    }
    let blocks = vec![BlockReport {
        block: "flow_predicted_field".to_string(),
        n_checked: checked,
        max_rel_err: worst,
    }];
    Ok(GradCheckReport::from_blocks(blocks, FD_STEP, FLOW_TOL))
}
