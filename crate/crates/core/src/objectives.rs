//! Training objectives on toy predictors: the masked autoregressive
//! sequence loss over discrete bbox/grasp-pose tokens, the conditional
//! flow-matching loss on action chunks with single-timestep sampling,
//! and their sum. Also the two dataset augmentations (random pad onto a
//! fixed canvas, uniform pose noise) and a linear toy predictor used as
//! a convergence smoke test.
//!
//! Flow path: linear interpolation A_t = (1 - t) A_0 + t eps with target
//! field u_t = eps - A_0 and eps standard normal. Synthetic samples carry
//! full supervision; non-synthetic samples zero both the flow loss and
//! the grasp-pose term, leaving only the bounding box term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RgbImage;
use crate::util::gaussian;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid action chunk: {0}")]
    InvalidChunk(String),
    #[error("flow time {0} outside [0, 1]")]
    InvalidTime(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("invalid loss value: {0}")]
    InvalidLoss(String),
    #[error("invalid noise bounds: {0}")]
    InvalidBounds(String),
    #[error("invalid image or canvas: {0}")]
    InvalidImage(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

/// Default chunk horizon (steps predicted jointly).
pub const DEFAULT_HORIZON: usize = 4;

/// Default per-step action width: six end-effector delta components plus
/// one gripper command.
pub const DEFAULT_ACTION_DIM: usize = 7;

/// A chunk of H steps of d-dimensional actions, row-major H x d.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub horizon: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, dim: usize, values: Vec<f64>) -> Result<Self, ObjectiveError> {
        let chunk = Self {
            horizon,
            dim,
            values,
        };
        chunk.validate()?;
        Ok(chunk)
    }

    pub fn zeros(horizon: usize, dim: usize) -> Result<Self, ObjectiveError> {
        Self::new(horizon, dim, vec![0.0; horizon * dim])
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.horizon == 0 || self.dim == 0 {
            return Err(ObjectiveError::InvalidChunk(
                "horizon and action dimension must be positive".into(),
            ));
        }
        if self.values.len() != self.horizon * self.dim {
            return Err(ObjectiveError::InvalidChunk(format!(
                "{} values for a {}x{} chunk",
                self.values.len(),
                self.horizon,
                self.dim
            )));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(ObjectiveError::InvalidChunk(
                "entries must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn n_values(&self) -> usize {
        self.horizon * self.dim
    }
}

/// One Monte Carlo draw along the flow path: the time, the noise, the
/// interpolated chunk and the regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub horizon: usize,
    pub dim: usize,
    pub t: f64,
    pub noise: Vec<f64>,
    pub a_t: Vec<f64>,
    pub u_t: Vec<f64>,
}

/// Build the sample at a given time: A_t = (1 - t) A_0 + t eps and
/// u_t = eps - A_0.
pub fn make_flow_sample(
    a0: &ActionChunk,
    t: f64,
    noise: &[f64],
) -> Result<FlowSample, ObjectiveError> {
    a0.validate()?;
    if !(0.0..=1.0).contains(&t) {
        return Err(ObjectiveError::InvalidTime(t));
    }
    if noise.len() != a0.n_values() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "noise has {} entries, chunk has {}",
            noise.len(),
            a0.n_values()
        )));
    }
    let a_t: Vec<f64> = a0
        .values
        .iter()
        .zip(noise)
        .map(|(a, e)| (1.0 - t) * a + t * e)
        .collect();
    let u_t: Vec<f64> = a0.values.iter().zip(noise).map(|(a, e)| e - a).collect();
    Ok(FlowSample {
        horizon: a0.horizon,
        dim: a0.dim,
        t,
        noise: noise.to_vec(),
        a_t,
        u_t,
    })
}

/// Draw t uniform in [0, 1], then the noise entries row-major standard
/// normal, in that order (the order is a determinism contract).
pub fn draw_flow_sample(a0: &ActionChunk, rng: &mut ChaCha8Rng) -> Result<FlowSample, ObjectiveError> {
    a0.validate()?;
    let t: f64 = rng.gen_range(0.0..=1.0);
    let noise: Vec<f64> = (0..a0.n_values()).map(|_| gaussian(rng)).collect();
    make_flow_sample(a0, t, &noise)
}

/// Single-sample flow-matching loss: the squared Frobenius distance to
/// the target field, masked to zero on non-synthetic samples.
pub fn flow_matching_loss(
    sample: &FlowSample,
    predicted_field: &[f64],
    is_synthetic: bool,
) -> Result<f64, ObjectiveError> {
    if predicted_field.len() != sample.u_t.len() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "prediction has {} entries, target field has {}",
            predicted_field.len(),
            sample.u_t.len()
        )));
    }
    if !is_synthetic {
        return Ok(0.0);
    }
    Ok(predicted_field
        .iter()
        .zip(&sample.u_t)
        .map(|(p, u)| (p - u) * (p - u))
        .sum())
}

/// Gradient of [`flow_matching_loss`] with respect to the prediction:
/// 2 (predicted - u_t), or zeros when the indicator masks the sample.
pub fn flow_matching_grad(
    sample: &FlowSample,
    predicted_field: &[f64],
    is_synthetic: bool,
) -> Result<Vec<f64>, ObjectiveError> {
    if predicted_field.len() != sample.u_t.len() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "prediction has {} entries, target field has {}",
            predicted_field.len(),
            sample.u_t.len()
        )));
    }
    if !is_synthetic {
        return Ok(vec![0.0; predicted_field.len()]);
    }
    Ok(predicted_field
        .iter()
        .zip(&sample.u_t)
        .map(|(p, u)| 2.0 * (p - u))
        .collect())
}

/// Discrete supervision targets for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTargets {
    pub bbox: Vec<u32>,
    pub gpose: Vec<u32>,
    pub is_synthetic: bool,
}

/// A stack of logit rows over a shared vocabulary, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn new(vocab: usize, data: Vec<f64>) -> Result<Self, ObjectiveError> {
        if vocab == 0 {
            return Err(ObjectiveError::ShapeMismatch(
                "vocabulary must be positive".into(),
            ));
        }
        if data.len() % vocab != 0 {
            return Err(ObjectiveError::ShapeMismatch(format!(
                "{} logits do not tile rows of width {}",
                data.len(),
                vocab
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(ObjectiveError::ShapeMismatch(
                "logits must be finite".into(),
            ));
        }
        Ok(Self { vocab, data })
    }

    /// All-zero rows, i.e. the uniform distribution.
    pub fn uniform(n_rows: usize, vocab: usize) -> Result<Self, ObjectiveError> {
        Self::new(vocab, vec![0.0; n_rows * vocab])
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.vocab
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

/// Negative log-likelihood of one token row under max-subtracted
/// log-softmax (natural log).
fn token_nll(row: &[f64], target: u32, vocab: usize) -> Result<f64, ObjectiveError> {
    if target as usize >= vocab {
        return Err(ObjectiveError::TokenOutOfRange { id: target, vocab });
    }
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    Ok(lse - row[target as usize])
}

/// Sequence loss: the bounding box term is always scored, the grasp-pose
/// term only on synthetic samples.
pub fn sequence_loss(
    logits_bbox: &Logits,
    logits_gpose: &Logits,
    targets: &TokenTargets,
) -> Result<f64, ObjectiveError> {
    if logits_bbox.n_rows() != targets.bbox.len() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "{} bbox logit rows for {} targets",
            logits_bbox.n_rows(),
            targets.bbox.len()
        )));
    }
    if logits_gpose.n_rows() != targets.gpose.len() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "{} grasp-pose logit rows for {} targets",
            logits_gpose.n_rows(),
            targets.gpose.len()
        )));
    }
    let mut loss = 0.0;
    for (i, &y) in targets.bbox.iter().enumerate() {
        loss += token_nll(logits_bbox.row(i), y, logits_bbox.vocab)?;
    }
    if targets.is_synthetic {
        for (i, &y) in targets.gpose.iter().enumerate() {
            loss += token_nll(logits_gpose.row(i), y, logits_gpose.vocab)?;
        }
    } else {
        // Still validate the masked targets so bad ids never pass silently.
        for &y in &targets.gpose {
            if y as usize >= logits_gpose.vocab {
                return Err(ObjectiveError::TokenOutOfRange {
                    id: y,
                    vocab: logits_gpose.vocab,
                });
            }
        }
    }
    Ok(loss)
}

/// L_total = L_S2 + L_S1; both terms must be finite and non-negative.
pub fn total_loss(l_s2: f64, l_s1: f64) -> Result<f64, ObjectiveError> {
    for (name, v) in [("L_S2", l_s2), ("L_S1", l_s1)] {
        if !v.is_finite() || v < 0.0 {
            return Err(ObjectiveError::InvalidLoss(format!(
                "{} = {} must be finite and non-negative",
                name, v
            )));
        }
    }
    Ok(l_s2 + l_s1)
}

/// Where a padded image landed on its canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadPlacement {
    pub scaled_width: u32,
    pub scaled_height: u32,
    pub offset_x: u32,
    pub offset_y: u32,
}

fn bilinear_at(src: &RgbImage, x: f64, y: f64) -> [f32; 3] {
    let x = x.clamp(0.0, (src.width - 1) as f64);
    let y = y.clamp(0.0, (src.height - 1) as f64);
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(src.width - 1);
    let y1 = (y0 + 1).min(src.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let top = src.at(x0, y0)[c] as f64 * (1.0 - fx) + src.at(x1, y0)[c] as f64 * fx;
        let bot = src.at(x0, y1)[c] as f64 * (1.0 - fx) + src.at(x1, y1)[c] as f64 * fx;
        out[c] = (top * (1.0 - fy) + bot * fy) as f32;
    }
    out
}

/// Resize preserving aspect ratio so the image just fits the canvas,
/// place it at a uniform integer offset, fill the rest with black.
/// The horizontal offset is drawn before the vertical one.
pub fn augment_random_pad(
    rgb: &RgbImage,
    canvas_width: u32,
    canvas_height: u32,
    rng: &mut ChaCha8Rng,
) -> Result<(RgbImage, PadPlacement), ObjectiveError> {
    if canvas_width == 0 || canvas_height == 0 {
        return Err(ObjectiveError::InvalidImage(
            "canvas dimensions must be positive".into(),
        ));
    }
    let (w, h) = (rgb.width as f64, rgb.height as f64);
    let scale = (canvas_width as f64 / w).min(canvas_height as f64 / h);
    let new_w = ((w * scale).round() as u32).clamp(1, canvas_width);
    let new_h = ((h * scale).round() as u32).clamp(1, canvas_height);
    let offset_x = rng.gen_range(0..=canvas_width - new_w);
    let offset_y = rng.gen_range(0..=canvas_height - new_h);

    let mut values = vec![[0.0f32; 3]; (canvas_width * canvas_height) as usize];
    let sx = w / new_w as f64;
    let sy = h / new_h as f64;
    for dy in 0..new_h {
        let src_y = (dy as f64 + 0.5) * sy - 0.5;
        for dx in 0..new_w {
            let src_x = (dx as f64 + 0.5) * sx - 0.5;
            let px = bilinear_at(rgb, src_x, src_y);
            let out_idx = ((offset_y + dy) * canvas_width + offset_x + dx) as usize;
            values[out_idx] = px;
        }
    }
    let canvas = RgbImage::new(canvas_width, canvas_height, values)
        .map_err(|e| ObjectiveError::InvalidImage(e.to_string()))?;
    Ok((
        canvas,
        PadPlacement {
            scaled_width: new_w,
            scaled_height: new_h,
            offset_x,
            offset_y,
        },
    ))
}

/// End-effector pose: translation in meters, rotation as an axis-angle
/// vector in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

/// Per-component half-widths of the uniform perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseNoiseBounds {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

impl PoseNoiseBounds {
    pub fn zero() -> Self {
        Self {
            translation: [0.0; 3],
            rotation: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let ok = self
            .translation
            .iter()
            .chain(&self.rotation)
            .all(|b| b.is_finite() && *b >= 0.0);
        if !ok {
            return Err(ObjectiveError::InvalidBounds(
                "half-widths must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Perturb each pose component by an independent uniform draw in
/// [-bound, +bound]; translation components first, then rotation.
pub fn augment_pose_noise(
    pose: &Pose,
    bounds: &PoseNoiseBounds,
    rng: &mut ChaCha8Rng,
) -> Result<Pose, ObjectiveError> {
    bounds.validate()?;
    let mut draw = |b: f64| -> f64 {
        if b == 0.0 {
            0.0
        } else {
            rng.gen_range(-b..=b)
        }
    };
    let mut out = *pose;
    for i in 0..3 {
        out.translation[i] += draw(bounds.translation[i]);
    }
    for i in 0..3 {
        out.rotation[i] += draw(bounds.rotation[i]);
    }
    Ok(out)
}

/// Linear predictor of the flow field from features
/// [vec(A_t), t, 1]: weights are (H d) x (H d + 2) row-major. A fixed
/// small batch keeps the regression exactly solvable, so gradient
/// descent on the flow loss drives it toward zero.
#[derive(Debug, Clone)]
pub struct ToyFlowPredictor {
    pub horizon: usize,
    pub dim: usize,
    pub w: Vec<f64>,
}

impl ToyFlowPredictor {
    pub fn new(horizon: usize, dim: usize) -> Result<Self, ObjectiveError> {
        if horizon == 0 || dim == 0 {
            return Err(ObjectiveError::InvalidChunk(
                "horizon and action dimension must be positive".into(),
            ));
        }
        let n = horizon * dim;
        Ok(Self {
            horizon,
            dim,
            w: vec![0.0; n * (n + 2)],
        })
    }

    fn features(&self, sample: &FlowSample) -> Vec<f64> {
        let mut x = Vec::with_capacity(sample.a_t.len() + 2);
        x.extend_from_slice(&sample.a_t);
        x.push(sample.t);
        x.push(1.0);
        x
    }

    pub fn predict(&self, sample: &FlowSample) -> Result<Vec<f64>, ObjectiveError> {
        let n = self.horizon * self.dim;
        if sample.horizon != self.horizon || sample.dim != self.dim {
            return Err(ObjectiveError::ShapeMismatch(format!(
                "sample is {}x{}, predictor is {}x{}",
                sample.horizon, sample.dim, self.horizon, self.dim
            )));
        }
        let x = self.features(sample);
        let cols = n + 2;
        let mut out = vec![0.0; n];
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.w[r * cols..(r + 1) * cols]
                .iter()
                .zip(&x)
                .map(|(a, b)| a * b)
                .sum();
        }
        Ok(out)
    }

    /// Mean flow-matching loss over a batch of synthetic samples.
    pub fn batch_loss(&self, batch: &[FlowSample]) -> Result<f64, ObjectiveError> {
        if batch.is_empty() {
            return Err(ObjectiveError::ShapeMismatch("empty batch".into()));
        }
        let mut total = 0.0;
        for sample in batch {
            let pred = self.predict(sample)?;
            total += flow_matching_loss(sample, &pred, true)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// One full-batch gradient descent step; returns the loss before the
    /// step.
    pub fn train_step(&mut self, batch: &[FlowSample], lr: f64) -> Result<f64, ObjectiveError> {
        let loss = self.batch_loss(batch)?;
        let n = self.horizon * self.dim;
        let cols = n + 2;
        let mut grad = vec![0.0; self.w.len()];
        for sample in batch {
            let pred = self.predict(sample)?;
            let dpred = flow_matching_grad(sample, &pred, true)?;
            let x = self.features(sample);
            for r in 0..n {
                let row = &mut grad[r * cols..(r + 1) * cols];
                for (g, xv) in row.iter_mut().zip(&x) {
                    *g += dpred[r] * xv;
                }
            }
        }
        let inv_b = 1.0 / batch.len() as f64;
        for (w, g) in self.w.iter_mut().zip(&grad) {
            *w -= lr * inv_b * g;
        }
        Ok(loss)
    }
}

/// Seeded batch of flow samples over random chunks, for the convergence
/// smoke test.
pub fn make_toy_batch(
    horizon: usize,
    dim: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<FlowSample>, ObjectiveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = Vec::with_capacity(n);
    for _ in 0..n {
        let values: Vec<f64> = (0..horizon * dim).map(|_| gaussian(&mut rng)).collect();
        let a0 = ActionChunk::new(horizon, dim, values)?;
        batch.push(draw_flow_sample(&a0, &mut rng)?);
    }
    Ok(batch)
}

/// One line of the loss-evaluation JSONL input. Predictions are
/// optional; absent ones fall back to the documented baseline (zero
/// field, uniform logits).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossEvalRecord {
    #[serde(rename = "A0")]
    pub a0: Vec<Vec<f64>>,
    pub t: f64,
    pub noise: Vec<Vec<f64>>,
    pub is_synthetic: bool,
    #[serde(default)]
    pub bbox_targets: Vec<u32>,
    #[serde(default)]
    pub gpose_targets: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_field: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits_bbox: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits_gpose: Option<Vec<Vec<f64>>>,
}

/// One line of the loss-evaluation JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEvalResult {
    #[serde(rename = "L_S1")]
    pub l_s1: f64,
    #[serde(rename = "L_S2")]
    pub l_s2: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
}

fn flatten_matrix(rows: &[Vec<f64>], what: &str) -> Result<(usize, usize, Vec<f64>), ObjectiveError> {
    if rows.is_empty() {
        return Err(ObjectiveError::InvalidRecord(format!("{} is empty", what)));
    }
    let width = rows[0].len();
    if width == 0 {
        return Err(ObjectiveError::InvalidRecord(format!(
            "{} has zero-width rows",
            what
        )));
    }
    let mut flat = Vec::with_capacity(rows.len() * width);
    for row in rows {
        if row.len() != width {
            return Err(ObjectiveError::InvalidRecord(format!(
                "{} rows have uneven widths",
                what
            )));
        }
        flat.extend_from_slice(row);
    }
    Ok((rows.len(), width, flat))
}

fn logits_from(
    explicit: &Option<Vec<Vec<f64>>>,
    n_targets: usize,
    vocab: usize,
    what: &str,
) -> Result<Logits, ObjectiveError> {
    match explicit {
        Some(rows) => {
            if rows.is_empty() {
                return Logits::uniform(0, vocab);
            }
            let (_, width, flat) = flatten_matrix(rows, what)?;
            Logits::new(width, flat)
        }
        None => Logits::uniform(n_targets, vocab),
    }
}

/// Evaluate one record against the supplied predictions, or against the
/// baseline (zero predicted field, uniform logits over `vocab`) when a
/// prediction is absent.
pub fn evaluate_record(record: &LossEvalRecord, vocab: usize) -> Result<LossEvalResult, ObjectiveError> {
    let (h, d, a0_flat) = flatten_matrix(&record.a0, "A0")?;
    let a0 = ActionChunk::new(h, d, a0_flat)?;
    let (nh, nd, noise) = flatten_matrix(&record.noise, "noise")?;
    if (nh, nd) != (h, d) {
        return Err(ObjectiveError::InvalidRecord(format!(
            "noise is {}x{}, A0 is {}x{}",
            nh, nd, h, d
        )));
    }
    let sample = make_flow_sample(&a0, record.t, &noise)?;
    let predicted = match &record.predicted_field {
        Some(rows) => {
            let (ph, pd, flat) = flatten_matrix(rows, "predicted_field")?;
            if (ph, pd) != (h, d) {
                return Err(ObjectiveError::InvalidRecord(format!(
                    "predicted_field is {}x{}, A0 is {}x{}",
                    ph, pd, h, d
                )));
            }
            flat
        }
        None => vec![0.0; a0.n_values()],
    };
    let l_s1 = flow_matching_loss(&sample, &predicted, record.is_synthetic)?;

    let targets = TokenTargets {
        bbox: record.bbox_targets.clone(),
        gpose: record.gpose_targets.clone(),
        is_synthetic: record.is_synthetic,
    };
    let logits_bbox = logits_from(&record.logits_bbox, targets.bbox.len(), vocab, "logits_bbox")?;
    let logits_gpose = logits_from(
        &record.logits_gpose,
        targets.gpose.len(),
        vocab,
        "logits_gpose",
    )?;
    let l_s2 = sequence_loss(&logits_bbox, &logits_gpose, &targets)?;
    let l_total = total_loss(l_s2, l_s1)?;
    Ok(LossEvalResult {
        l_s1,
        l_s2,
        l_total,
    })
}
