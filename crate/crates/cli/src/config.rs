//! Single JSON configuration record covering every pipeline stage.
//!
//! The effective config is always fully materialized: `--print-config`
//! dumps defaults merged with the loaded file, and feeding that dump back
//! through `--config` reproduces identical outputs. Unknown keys are
//! rejected to prevent silent drift between config files and the binary.

use std::path::Path;

use anyhow::Context;
use patchfuse_core::alignment::PatchGrid;
use patchfuse_core::datapipe::SourceMix;
use patchfuse_core::fusion::{FusionDims, FusionParams, GATE_INIT, LN_EPS_DEFAULT};
use patchfuse_core::geometry::{CameraIntrinsics, CropSpec};
use serde::{Deserialize, Serialize};

/// Fusion block hyperparameters: token widths plus the two scalar knobs
/// that tests exercise directly (`ln_eps`, `gate_init`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub dtok: usize,
    pub d3: usize,
    pub hidden: usize,
    pub ln_eps: f64,
    pub gate_init: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        let dims = FusionDims::default();
        Self {
            dtok: dims.dtok,
            d3: dims.d3,
            hidden: dims.hidden,
            ln_eps: LN_EPS_DEFAULT,
            gate_init: GATE_INIT,
        }
    }
}

impl FusionConfig {
    pub fn dims(&self) -> FusionDims {
        FusionDims {
            dtok: self.dtok,
            d3: self.d3,
            hidden: self.hidden,
        }
    }

    /// Seeded parameters with the configured scalar overrides applied.
    pub fn init_params(&self, seed: u64) -> anyhow::Result<FusionParams> {
        let mut params = FusionParams::init(self.dims(), seed)?;
        params.ln_eps = self.ln_eps;
        params.gate = self.gate_init;
        params.validate()?;
        Ok(params)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub intrinsics: CameraIntrinsics,
    pub crop: CropSpec,
    pub voxel_size: f64,
    pub normals_k: usize,
    pub patch_grid: PatchGrid,
    pub fusion: FusionConfig,
    pub source_mix: SourceMix,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        // The synthetic frames are 256x256, so the default grid tiles them
        // with 16 px patches instead of the bare grid default (224 / 14 px).
        Self {
            intrinsics: CameraIntrinsics::new(300.0, 300.0, 128.0, 128.0, 256, 256)
                .expect("default intrinsics are valid"),
            crop: CropSpec::default(),
            voxel_size: 0.01,
            normals_k: 16,
            patch_grid: PatchGrid {
                rows: 16,
                cols: 16,
                patch_px: 16,
                width: 256,
                height: 256,
            },
            fusion: FusionConfig::default(),
            source_mix: SourceMix::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.intrinsics.validate()?;
        self.crop.validate()?;
        self.patch_grid.validate()?;
        self.source_mix.validate()?;
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            anyhow::bail!("voxel_size must be positive and finite, got {}", self.voxel_size);
        }
        if self.normals_k < 3 {
            anyhow::bail!("normals_k must be at least 3, got {}", self.normals_k);
        }
        if self.fusion.dtok == 0 || self.fusion.d3 == 0 || self.fusion.hidden == 0 {
            anyhow::bail!("fusion dims must all be positive");
        }
        if !(self.fusion.ln_eps.is_finite() && self.fusion.ln_eps > 0.0) {
            anyhow::bail!("fusion.ln_eps must be positive and finite");
        }
        if !self.fusion.gate_init.is_finite() {
            anyhow::bail!("fusion.gate_init must be finite");
        }
        Ok(())
    }
}
