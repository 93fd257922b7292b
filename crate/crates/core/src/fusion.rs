//! Gated residual fusion of per-patch 2D tokens with aligned 3D patch
//! features: the 3D features are projected to token width, a two-layer
//! MLP on the concatenated streams proposes a correction, and the
//! correction is layer-normalized and added through a learnable scalar
//! gate: fused = h2d + sigmoid(gate) * LayerNorm(delta).
//!
//! The gate starts at [`GATE_INIT`], so sigmoid(gate) is about 0.1 and
//! fusion begins as a mild perturbation of the 2D stream. Stub encoders
//! stand in for the frozen production backbones at desk scale while
//! preserving the interface: per-patch tokens of width Dtok, per-point
//! features of width D3.
//!
//! Everything runs in f64; the checkpoint format stores f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::alignment::{FeatureSet, PatchFeatureGrid, PatchGrid};
use crate::geometry::{PointCloud, RgbImage};
use crate::util::{gaussian, sigmoid};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// Gate pre-activation at initialization; sigmoid(-2.1972) = 0.1000 to
/// four decimals, so the fused stream starts 90 percent 2D.
pub const GATE_INIT: f64 = -2.1972;

/// LayerNorm variance floor.
pub const LN_EPS_DEFAULT: f64 = 1e-5;

/// Token width of the production 2D encoder stack (1024 + 1152 channels).
/// Desk-scale runs use [`FusionDims::default`] instead.
pub const PRODUCTION_DTOK: usize = 2176;

/// Feature width of the production 3D encoder.
pub const PRODUCTION_D3: usize = 1728;

/// Layer widths of the fusion block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionDims {
    /// Token width shared by the 2D stream and the fused output.
    pub dtok: usize,
    /// Width of the aligned 3D patch features.
    pub d3: usize,
    /// Hidden width of the correction MLP.
    pub hidden: usize,
}

impl Default for FusionDims {
    /// Desk-scale stand-ins for the production widths; the MLP hidden
    /// width follows the 2 * Dtok rule used at full scale.
    fn default() -> Self {
        Self {
            dtok: 32,
            d3: 24,
            hidden: 64,
        }
    }
}

impl FusionDims {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.dtok == 0 || self.d3 == 0 || self.hidden == 0 {
            return Err(FusionError::InvalidParams(
                "dtok, d3 and hidden must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Learnable state of the projection and fusion block. Matrices are
/// row-major: `w3d` is dtok x d3, `mlp_w1` is hidden x 2*dtok, `mlp_w2`
/// is dtok x hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub dims: FusionDims,
    pub w3d: Vec<f64>,
    pub b3d: Vec<f64>,
    pub mlp_w1: Vec<f64>,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Vec<f64>,
    pub mlp_b2: Vec<f64>,
    pub ln_scale: Vec<f64>,
    pub ln_shift: Vec<f64>,
    pub ln_eps: f64,
    pub gate: f64,
}

impl FusionParams {
    /// Seeded gaussian init scaled by 1/sqrt(fan_in); biases zero, the
    /// LayerNorm affine at identity, the gate at [`GATE_INIT`].
    pub fn init(dims: FusionDims, seed: u64) -> Result<Self, FusionError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize| -> Vec<f64> {
            let scale = 1.0 / (cols as f64).sqrt();
            (0..rows * cols).map(|_| scale * gaussian(&mut rng)).collect()
        };
        let w3d = mat(dims.dtok, dims.d3);
        let mlp_w1 = mat(dims.hidden, 2 * dims.dtok);
        let mlp_w2 = mat(dims.dtok, dims.hidden);
        Ok(Self {
            dims,
            w3d,
            b3d: vec![0.0; dims.dtok],
            mlp_w1,
            mlp_b1: vec![0.0; dims.hidden],
            mlp_w2,
            mlp_b2: vec![0.0; dims.dtok],
            ln_scale: vec![1.0; dims.dtok],
            ln_shift: vec![0.0; dims.dtok],
            ln_eps: LN_EPS_DEFAULT,
            gate: GATE_INIT,
        })
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        self.dims.validate()?;
        let d = self.dims.dtok;
        let checks: [(&str, usize, usize); 8] = [
            ("w3d", self.w3d.len(), d * self.dims.d3),
            ("b3d", self.b3d.len(), d),
            ("mlp_w1", self.mlp_w1.len(), self.dims.hidden * 2 * d),
            ("mlp_b1", self.mlp_b1.len(), self.dims.hidden),
            ("mlp_w2", self.mlp_w2.len(), d * self.dims.hidden),
            ("mlp_b2", self.mlp_b2.len(), d),
            ("ln_scale", self.ln_scale.len(), d),
            ("ln_shift", self.ln_shift.len(), d),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(FusionError::InvalidParams(format!(
                    "{} has {} entries, dims require {}",
                    name, got, want
                )));
            }
        }
        let finite = self
            .w3d
            .iter()
            .chain(&self.b3d)
            .chain(&self.mlp_w1)
            .chain(&self.mlp_b1)
            .chain(&self.mlp_w2)
            .chain(&self.mlp_b2)
            .chain(&self.ln_scale)
            .chain(&self.ln_shift)
            .all(|v| v.is_finite());
        if !finite || !self.gate.is_finite() {
            return Err(FusionError::InvalidParams(
                "parameter entries must be finite".into(),
            ));
        }
        if !(self.ln_eps.is_finite() && self.ln_eps > 0.0) {
            return Err(FusionError::InvalidParams(format!(
                "ln_eps = {} must be positive",
                self.ln_eps
            )));
        }
        Ok(())
    }
}

/// Per-patch token block in patch row-major order; `data` holds
/// rows * cols tokens of width `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub rows: u32,
    pub cols: u32,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TokenSequence {
    pub fn zeros(rows: u32, cols: u32, dim: usize) -> Self {
        Self {
            rows,
            cols,
            dim,
            data: vec![0.0; rows as usize * cols as usize * dim],
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn token(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn token_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.dim == 0 {
            return Err(FusionError::DimensionMismatch(
                "token dimension must be positive".into(),
            ));
        }
        if self.data.len() != self.n_tokens() * self.dim {
            return Err(FusionError::DimensionMismatch(format!(
                "{} values for {}x{} tokens of width {}",
                self.data.len(),
                self.rows,
                self.cols,
                self.dim
            )));
        }
        Ok(())
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.dim == other.dim
    }
}

/// Number of sinusoidal position channels in the 2D stub token input.
const POS_CODE_DIMS: usize = 8;

/// Raw attribute channels of the 3D stub: xyz, rgb, normal.
const RAW_3D_DIMS: usize = 9;

/// Deterministic stand-in for a frozen patch encoder: each patch token is
/// a seeded random linear embedding of (mean patch RGB, fixed sinusoidal
/// position code). Tokens depend only on their own patch pixels, so two
/// images differing in one patch differ in exactly one token.
pub fn stub_encode_2d(
    rgb: &RgbImage,
    grid: &PatchGrid,
    dtok: usize,
    seed: u64,
) -> Result<TokenSequence, FusionError> {
    if dtok == 0 {
        return Err(FusionError::DimensionMismatch(
            "dtok must be positive".into(),
        ));
    }
    if rgb.width != grid.width || rgb.height != grid.height {
        return Err(FusionError::DimensionMismatch(format!(
            "image is {}x{}, grid expects {}x{}",
            rgb.width, rgb.height, grid.width, grid.height
        )));
    }
    let in_dim = 3 + POS_CODE_DIMS;
    let embed = seeded_embedding(dtok, in_dim, seed ^ 0x2d2d);
    let mut out = TokenSequence::zeros(grid.rows, grid.cols, dtok);
    let mut raw = vec![0.0f64; in_dim];
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let u0 = col * grid.patch_px;
            let v0 = row * grid.patch_px;
            let u1 = (u0 + grid.patch_px).min(grid.width);
            let v1 = (v0 + grid.patch_px).min(grid.height);
            let mut mean = [0.0f64; 3];
            let mut count = 0.0;
            for v in v0..v1 {
                for u in u0..u1 {
                    let px = rgb.at(u, v);
                    for c in 0..3 {
                        mean[c] += px[c] as f64;
                    }
                    count += 1.0;
                }
            }
            if count > 0.0 {
                for c in &mut mean {
                    *c /= count;
                }
            }
            raw[..3].copy_from_slice(&mean);
            position_code(row, grid.rows, col, grid.cols, &mut raw[3..]);
            let j = (row * grid.cols + col) as usize;
            matvec(&embed, &raw, out.token_mut(j));
        }
    }
    Ok(out)
}

/// Deterministic stand-in for a frozen point cloud encoder: each point's
/// feature is a seeded random linear embedding of its raw attributes
/// (position, color, normal; zero normal when absent).
pub fn stub_encode_3d(cloud: &PointCloud, d3: usize, seed: u64) -> Result<FeatureSet, FusionError> {
    if d3 == 0 {
        return Err(FusionError::DimensionMismatch("d3 must be positive".into()));
    }
    let embed = seeded_embedding(d3, RAW_3D_DIMS, seed ^ 0x3d3d);
    let mut data = vec![0.0f64; cloud.len() * d3];
    let mut raw = [0.0f64; RAW_3D_DIMS];
    for i in 0..cloud.len() {
        raw[..3].copy_from_slice(&cloud.coords[i]);
        for c in 0..3 {
            raw[3 + c] = cloud.colors[i][c] as f64;
        }
        match &cloud.normals {
            Some(normals) => raw[6..9].copy_from_slice(&normals[i]),
            None => raw[6..9].fill(0.0),
        }
        matvec(&embed, &raw, &mut data[i * d3..(i + 1) * d3]);
    }
    FeatureSet::new(d3, data).map_err(|e| FusionError::DimensionMismatch(e.to_string()))
}

fn seeded_embedding(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols).map(|_| scale * gaussian(&mut rng)).collect()
}

fn position_code(row: u32, rows: u32, col: u32, cols: u32, out: &mut [f64]) {
    let r = (row as f64 + 0.5) / rows as f64;
    let c = (col as f64 + 0.5) / cols as f64;
    let mut k = 0;
    for &freq in &[1.0f64, 3.0] {
        for &x in &[r, c] {
            out[k] = (std::f64::consts::PI * freq * x).sin();
            out[k + 1] = (std::f64::consts::PI * freq * x).cos();
            k += 2;
        }
    }
}

/// y = W x (+ nothing); W is rows x cols row-major, len(y) = rows.
fn matvec(w: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *yr = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// Affine projection of pooled 3D patch features to token width:
/// h3d_j = w3d * g_j + b3d, applied to every patch including the ones
/// holding the empty token.
pub fn project_3d_tokens(
    patches: &PatchFeatureGrid,
    params: &FusionParams,
) -> Result<TokenSequence, FusionError> {
    params.validate()?;
    if patches.dim != params.dims.d3 {
        return Err(FusionError::DimensionMismatch(format!(
            "patch features have width {}, params expect d3 = {}",
            patches.dim, params.dims.d3
        )));
    }
    let mut out = TokenSequence::zeros(patches.rows, patches.cols, params.dims.dtok);
    for j in 0..patches.n_patches() {
        let token = out.token_mut(j);
        matvec(&params.w3d, patches.patch(j), token);
        for (t, b) in token.iter_mut().zip(&params.b3d) {
            *t += b;
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss through [`project_3d_tokens`].
#[derive(Debug, Clone)]
pub struct ProjectionGradients {
    pub d_w3d: Vec<f64>,
    pub d_b3d: Vec<f64>,
    /// Gradient with respect to the pooled patch features.
    pub d_features: Vec<f64>,
}

pub fn project_3d_tokens_backward(
    patches: &PatchFeatureGrid,
    params: &FusionParams,
    d_h3d: &TokenSequence,
) -> Result<ProjectionGradients, FusionError> {
    params.validate()?;
    let (dtok, d3) = (params.dims.dtok, params.dims.d3);
    if patches.dim != d3 || d_h3d.dim != dtok || d_h3d.n_tokens() != patches.n_patches() {
        return Err(FusionError::DimensionMismatch(
            "projection backward shapes disagree".into(),
        ));
    }
    let mut d_w3d = vec![0.0; dtok * d3];
    let mut d_b3d = vec![0.0; dtok];
    let mut d_features = vec![0.0; patches.n_patches() * d3];
    for j in 0..patches.n_patches() {
        let g = patches.patch(j);
        let up = d_h3d.token(j);
        for r in 0..dtok {
            d_b3d[r] += up[r];
            let wrow = &params.w3d[r * d3..(r + 1) * d3];
            let drow = &mut d_w3d[r * d3..(r + 1) * d3];
            let df = &mut d_features[j * d3..(j + 1) * d3];
            for c in 0..d3 {
                drow[c] += up[r] * g[c];
                df[c] += up[r] * wrow[c];
            }
        }
    }
    Ok(ProjectionGradients {
        d_w3d,
        d_b3d,
        d_features,
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

/// Smooth gaussian-error-style nonlinearity (tanh form), chosen for a
/// clean closed-form derivative.
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct TokenCache {
    z: Vec<f64>,
    a1: Vec<f64>,
    g1: Vec<f64>,
    xhat: Vec<f64>,
    y: Vec<f64>,
    s2: f64,
}

fn fuse_token(h2d: &[f64], h3d: &[f64], params: &FusionParams, fused: &mut [f64]) -> TokenCache {
    let (dtok, hidden) = (params.dims.dtok, params.dims.hidden);
    let mut z = Vec::with_capacity(2 * dtok);
    z.extend_from_slice(h2d);
    z.extend_from_slice(h3d);
    let mut a1 = vec![0.0; hidden];
    matvec(&params.mlp_w1, &z, &mut a1);
    for (a, b) in a1.iter_mut().zip(&params.mlp_b1) {
        *a += b;
    }
    let g1: Vec<f64> = a1.iter().map(|&x| gelu(x)).collect();
    let mut delta = vec![0.0; dtok];
    matvec(&params.mlp_w2, &g1, &mut delta);
    for (d, b) in delta.iter_mut().zip(&params.mlp_b2) {
        *d += b;
    }
    // LayerNorm with biased variance.
    let mu = delta.iter().sum::<f64>() / dtok as f64;
    let var = delta.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / dtok as f64;
    let s2 = var + params.ln_eps;
    let s = s2.sqrt();
    let xhat: Vec<f64> = delta.iter().map(|d| (d - mu) / s).collect();
    let y: Vec<f64> = xhat
        .iter()
        .zip(params.ln_scale.iter().zip(&params.ln_shift))
        .map(|(x, (sc, sh))| sc * x + sh)
        .collect();
    let sig = sigmoid(params.gate);
    for d in 0..dtok {
        fused[d] = h2d[d] + sig * y[d];
    }
    TokenCache {
        z,
        a1,
        g1,
        xhat,
        y,
        s2,
    }
}

fn check_fuse_shapes(
    h2d: &TokenSequence,
    h3d: &TokenSequence,
    params: &FusionParams,
) -> Result<(), FusionError> {
    params.validate()?;
    h2d.validate()?;
    h3d.validate()?;
    if !h2d.same_shape(h3d) {
        return Err(FusionError::DimensionMismatch(format!(
            "2D tokens are {}x{}x{}, 3D tokens are {}x{}x{}",
            h2d.rows, h2d.cols, h2d.dim, h3d.rows, h3d.cols, h3d.dim
        )));
    }
    if h2d.dim != params.dims.dtok {
        return Err(FusionError::DimensionMismatch(format!(
            "tokens have width {}, params expect dtok = {}",
            h2d.dim, params.dims.dtok
        )));
    }
    Ok(())
}

/// fused_j = h2d_j + sigmoid(gate) * LayerNorm(MLP(concat(h2d_j, h3d_j))).
/// The residual enters through the gate term only, so a closed gate
/// returns the 2D stream unchanged.
pub fn fuse(
    h2d: &TokenSequence,
    h3d: &TokenSequence,
    params: &FusionParams,
) -> Result<TokenSequence, FusionError> {
    check_fuse_shapes(h2d, h3d, params)?;
    let mut out = TokenSequence::zeros(h2d.rows, h2d.cols, h2d.dim);
    for j in 0..h2d.n_tokens() {
        fuse_token(h2d.token(j), h3d.token(j), params, out.token_mut(j));
    }
    Ok(out)
}

/// Gradients of L = sum(upstream . fused) with respect to both token
/// streams and every parameter field of the fusion block.
#[derive(Debug, Clone)]
pub struct FusionGradients {
    pub d_h2d: TokenSequence,
    pub d_h3d: TokenSequence,
    pub d_mlp_w1: Vec<f64>,
    pub d_mlp_b1: Vec<f64>,
    pub d_mlp_w2: Vec<f64>,
    pub d_mlp_b2: Vec<f64>,
    pub d_ln_scale: Vec<f64>,
    pub d_ln_shift: Vec<f64>,
    pub d_ln_eps: f64,
    pub d_gate: f64,
}

/// Analytic reverse pass of [`fuse`] for the scalar loss
/// L = sum_j upstream_j . fused_j.
pub fn fuse_backward(
    h2d: &TokenSequence,
    h3d: &TokenSequence,
    params: &FusionParams,
    upstream: &TokenSequence,
) -> Result<FusionGradients, FusionError> {
    check_fuse_shapes(h2d, h3d, params)?;
    if !upstream.same_shape(h2d) {
        return Err(FusionError::DimensionMismatch(
            "upstream gradient shape disagrees with tokens".into(),
        ));
    }
    let (dtok, hidden) = (params.dims.dtok, params.dims.hidden);
    let sig = sigmoid(params.gate);
    let dsig = sig * (1.0 - sig);

    let mut g = FusionGradients {
        d_h2d: TokenSequence::zeros(h2d.rows, h2d.cols, dtok),
        d_h3d: TokenSequence::zeros(h2d.rows, h2d.cols, dtok),
        d_mlp_w1: vec![0.0; hidden * 2 * dtok],
        d_mlp_b1: vec![0.0; hidden],
        d_mlp_w2: vec![0.0; dtok * hidden],
        d_mlp_b2: vec![0.0; dtok],
        d_ln_scale: vec![0.0; dtok],
        d_ln_shift: vec![0.0; dtok],
        d_ln_eps: 0.0,
        d_gate: 0.0,
    };
    let mut fused = vec![0.0; dtok];
    for j in 0..h2d.n_tokens() {
        let cache = fuse_token(h2d.token(j), h3d.token(j), params, &mut fused);
        let up = upstream.token(j);

        // Residual path.
        g.d_h2d.token_mut(j).copy_from_slice(up);
        // Gate path: d sigma = sum_d up_d * y_d.
        g.d_gate += dsig * up.iter().zip(&cache.y).map(|(u, y)| u * y).sum::<f64>();

        // Through y = scale * xhat + shift.
        let mut d_xhat = vec![0.0; dtok];
        for d in 0..dtok {
            let dy = sig * up[d];
            g.d_ln_scale[d] += dy * cache.xhat[d];
            g.d_ln_shift[d] += dy;
            d_xhat[d] = dy * params.ln_scale[d];
        }

        // LayerNorm backward, biased variance:
        // d_delta = (d_xhat - mean(d_xhat) - xhat * mean(d_xhat . xhat)) / s.
        let s = cache.s2.sqrt();
        let mean_dx = d_xhat.iter().sum::<f64>() / dtok as f64;
        let mean_dx_xhat = d_xhat
            .iter()
            .zip(&cache.xhat)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / dtok as f64;
        let d_delta: Vec<f64> = (0..dtok)
            .map(|d| (d_xhat[d] - mean_dx - cache.xhat[d] * mean_dx_xhat) / s)
            .collect();
        // d xhat / d eps = -xhat / (2 * s^2).
        g.d_ln_eps += d_xhat
            .iter()
            .zip(&cache.xhat)
            .map(|(dx, x)| dx * (-0.5 * x / cache.s2))
            .sum::<f64>();

        // Second affine: delta = w2 g1 + b2.
        let mut d_g1 = vec![0.0; hidden];
        for r in 0..dtok {
            g.d_mlp_b2[r] += d_delta[r];
            let wrow = &params.mlp_w2[r * hidden..(r + 1) * hidden];
            let drow = &mut g.d_mlp_w2[r * hidden..(r + 1) * hidden];
            for c in 0..hidden {
                drow[c] += d_delta[r] * cache.g1[c];
                d_g1[c] += d_delta[r] * wrow[c];
            }
        }

        // Nonlinearity and first affine: a1 = w1 z + b1.
        let mut d_z = vec![0.0; 2 * dtok];
        for r in 0..hidden {
            let da = d_g1[r] * gelu_prime(cache.a1[r]);
            g.d_mlp_b1[r] += da;
            let wrow = &params.mlp_w1[r * 2 * dtok..(r + 1) * 2 * dtok];
            let drow = &mut g.d_mlp_w1[r * 2 * dtok..(r + 1) * 2 * dtok];
            for c in 0..2 * dtok {
                drow[c] += da * cache.z[c];
                d_z[c] += da * wrow[c];
            }
        }
        for d in 0..dtok {
            g.d_h2d.token_mut(j)[d] += d_z[d];
            g.d_h3d.token_mut(j)[d] = d_z[dtok + d];
        }
    }
    Ok(g)
}

/// Checkpoint block order; shapes derive from the dimension header.
const BLOCK_ORDER: [&str; 10] = [
    "w3d", "b3d", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "ln_scale", "ln_shift", "ln_eps", "gate",
];

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    dims: FusionDims,
    blocks: Vec<BlockShape>,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockShape {
    name: String,
    shape: Vec<usize>,
}

fn block_shapes(dims: &FusionDims) -> Vec<BlockShape> {
    let d = dims.dtok;
    BLOCK_ORDER
        .iter()
        .map(|&name| {
            let shape = match name {
                "w3d" => vec![d, dims.d3],
                "b3d" | "mlp_b2" | "ln_scale" | "ln_shift" => vec![d],
                "mlp_w1" => vec![dims.hidden, 2 * d],
                "mlp_b1" => vec![dims.hidden],
                "mlp_w2" => vec![d, dims.hidden],
                "ln_eps" | "gate" => vec![1],
                _ => unreachable!(),
            };
            BlockShape {
                name: name.to_string(),
                shape,
            }
        })
        .collect()
}

fn param_blocks(params: &FusionParams) -> [(&'static str, Vec<f64>); 10] {
    [
        ("w3d", params.w3d.clone()),
        ("b3d", params.b3d.clone()),
        ("mlp_w1", params.mlp_w1.clone()),
        ("mlp_b1", params.mlp_b1.clone()),
        ("mlp_w2", params.mlp_w2.clone()),
        ("mlp_b2", params.mlp_b2.clone()),
        ("ln_scale", params.ln_scale.clone()),
        ("ln_shift", params.ln_shift.clone()),
        ("ln_eps", vec![params.ln_eps]),
        ("gate", vec![params.gate]),
    ]
}

/// Write the checkpoint: a little-endian uint32 dimension header
/// (dtok, d3, hidden) followed by float32 parameter blocks in the fixed
/// order w3d, b3d, mlp_w1, mlp_b1, mlp_w2, mlp_b2, ln_scale, ln_shift,
/// ln_eps, gate; plus a JSON manifest carrying shapes and the payload's
/// sha256.
pub fn save_params(
    bin_path: &Path,
    manifest_path: &Path,
    params: &FusionParams,
) -> Result<(), FusionError> {
    params.validate()?;
    let mut payload = Vec::new();
    payload.extend_from_slice(&(params.dims.dtok as u32).to_le_bytes());
    payload.extend_from_slice(&(params.dims.d3 as u32).to_le_bytes());
    payload.extend_from_slice(&(params.dims.hidden as u32).to_le_bytes());
    for (_, block) in param_blocks(params) {
        for v in block {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&payload);
    let manifest = CheckpointManifest {
        dims: params.dims,
        blocks: block_shapes(&params.dims),
        sha256: digest.iter().map(|b| format!("{:02x}", b)).collect(),
    };
    let mut w = BufWriter::new(File::create(bin_path)?);
    w.write_all(&payload)?;
    w.flush()?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| FusionError::Format(e.to_string()))?;
    std::fs::write(manifest_path, json)?;
    Ok(())
}

/// Read a checkpoint written by [`save_params`], verifying the manifest's
/// content hash and shapes.
pub fn load_params(bin_path: &Path, manifest_path: &Path) -> Result<FusionParams, FusionError> {
    let mut payload = Vec::new();
    BufReader::new(File::open(bin_path)?).read_to_end(&mut payload)?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)
            .map_err(|e| FusionError::Format(format!("manifest: {}", e)))?;
    let digest: String = Sha256::digest(&payload)
        .iter()
        .map(|b| format!("{:02x}", b))
        .collect();
    if digest != manifest.sha256 {
        return Err(FusionError::Format(format!(
            "content hash {} does not match manifest {}",
            digest, manifest.sha256
        )));
    }
    if payload.len() < 12 {
        return Err(FusionError::Format("missing dimension header".into()));
    }
    let dtok = u32::from_le_bytes(payload[0..4].try_into().unwrap()) as usize;
    let d3 = u32::from_le_bytes(payload[4..8].try_into().unwrap()) as usize;
    let hidden = u32::from_le_bytes(payload[8..12].try_into().unwrap()) as usize;
    let dims = FusionDims { dtok, d3, hidden };
    if dims != manifest.dims {
        return Err(FusionError::Format(
            "dimension header disagrees with manifest".into(),
        ));
    }
    let expect_shapes = block_shapes(&dims);
    if manifest.blocks.len() != expect_shapes.len()
        || manifest
            .blocks
            .iter()
            .zip(&expect_shapes)
            .any(|(a, b)| a.name != b.name || a.shape != b.shape)
    {
        return Err(FusionError::Format("unexpected block table".into()));
    }
    let counts: Vec<usize> = expect_shapes
        .iter()
        .map(|b| b.shape.iter().product())
        .collect();
    let total: usize = counts.iter().sum();
    if payload.len() != 12 + 4 * total {
        return Err(FusionError::Format(format!(
            "payload holds {} bytes, dims require {}",
            payload.len(),
            12 + 4 * total
        )));
    }
    let mut off = 12;
    let mut read_block = |count: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            out.push(f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()) as f64);
            off += 4;
        }
        out
    };
    let w3d = read_block(counts[0]);
    let b3d = read_block(counts[1]);
    let mlp_w1 = read_block(counts[2]);
    let mlp_b1 = read_block(counts[3]);
    let mlp_w2 = read_block(counts[4]);
    let mlp_b2 = read_block(counts[5]);
    let ln_scale = read_block(counts[6]);
    let ln_shift = read_block(counts[7]);
    let ln_eps = read_block(counts[8])[0];
    let gate = read_block(counts[9])[0];
    let params = FusionParams {
        dims,
        w3d,
        b3d,
        mlp_w1,
        mlp_b1,
        mlp_w2,
        mlp_b2,
        ln_scale,
        ln_shift,
        ln_eps,
        gate,
    };
    params.validate()?;
    Ok(params)
}
