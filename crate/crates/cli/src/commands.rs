//! Subcommand bodies. Each returns the process exit code for soft verdicts
//! (a failed gradient check or a manifest with issues exits 1 without being
//! an error); hard failures propagate as `anyhow::Error` and are classified
//! by `main`. Machine-readable stats go to stdout, progress notes to stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use patchfuse_core::alignment::{
    assign_patches, read_feature_dump, scatter_mean, seeded_empty_token, write_feature_dump,
    FeatureDump, FeatureSet,
};
use patchfuse_core::compression::{compress, read_compressed, write_compressed, CompressedCloud, VoxelSpec};
use patchfuse_core::datapipe::{
    build_manifest, default_tabletop, jitter_objects, read_depth, synth_scene, write_depth,
    FrameInput,
};
use patchfuse_core::fusion::{
    fuse, load_params, project_3d_tokens, save_params, stub_encode_2d, stub_encode_3d,
    TokenSequence,
};
use patchfuse_core::geometry::{crop_cloud, estimate_normals, lift_frame, PointCloud};
use patchfuse_core::gradcheck::{check_flow_loss, check_fusion};
use patchfuse_core::objectives::{evaluate_record, LossEvalRecord};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::pngio::{read_png, write_png};

pub struct Ctx {
    pub config: PipelineConfig,
    pub out: PathBuf,
}

pub struct AlignFuseArgs {
    pub cloud: PathBuf,
    pub sidecar: Option<PathBuf>,
    pub rgb: Option<PathBuf>,
    pub tokens_2d: Option<PathBuf>,
    pub features_3d: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub save_params: Option<PathBuf>,
}

/// Render jittered tabletop frames plus a manifest. Manifest paths are
/// relative to the output directory so two runs with the same seed produce
/// byte-identical files regardless of where they land.
pub fn synth(ctx: &Ctx, trajectories: usize, frames: usize) -> anyhow::Result<i32> {
    let t0 = Instant::now();
    let mut base = default_tabletop();
    base.camera.intrinsics = ctx.config.intrinsics;
    base.seed = ctx.config.seed;
    let mut inputs = Vec::with_capacity(trajectories * frames);
    for t in 0..trajectories {
        let traj_id = format!("traj_{t:03}");
        let traj_dir = ctx.out.join(&traj_id);
        std::fs::create_dir_all(&traj_dir)
            .with_context(|| format!("creating {}", traj_dir.display()))?;
        for f in 0..frames {
            let salt = (t as u64) << 32 | f as u64;
            let spec = jitter_objects(&base, salt);
            let (rgb, depth) = synth_scene(&spec)?;
            let rgb_rel = format!("{traj_id}/rgb_{f:06}.png");
            let depth_rel = format!("{traj_id}/depth_{f:06}.f32");
            write_png(&ctx.out.join(&rgb_rel), &rgb)?;
            write_depth(&ctx.out.join(&depth_rel), &depth, &ctx.config.intrinsics)?;
            inputs.push(FrameInput {
                trajectory_id: traj_id.clone(),
                frame_id: f as u64,
                rgb_path: rgb_rel,
                depth_path: depth_rel,
                intrinsics: ctx.config.intrinsics,
            });
        }
        eprintln!("rendered {traj_id}: {frames} frame(s)");
    }
    let manifest_path = ctx.out.join("manifest.jsonl");
    let report = build_manifest(&inputs, &ctx.config.source_mix, ctx.config.seed, &manifest_path, false)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "trajectories": trajectories,
            "frames_per_trajectory": frames,
            "n_frames": report.n_frames,
            "source_counts": report.source_counts,
            "manifest": manifest_path,
            "elapsed_ms": ms(t0),
        }))?
    );
    Ok(0)
}

/// Depth frame in, compressed cloud out: lift, crop, normals, voxel
/// group-by, with per-stage timings in the stats report.
pub fn lift_compress(ctx: &Ctx, depth_path: &Path, rgb_path: Option<PathBuf>) -> anyhow::Result<i32> {
    let t_read = Instant::now();
    let (depth, intr) = read_depth(depth_path)
        .with_context(|| format!("reading depth frame {}", depth_path.display()))?;
    let rgb_path = rgb_path.unwrap_or_else(|| infer_rgb_path(depth_path));
    let rgb = read_png(&rgb_path)?;
    let read_ms = ms(t_read);

    let t = Instant::now();
    let cloud = lift_frame(&intr, &rgb, &depth)?;
    let lift_ms = ms(t);
    let t = Instant::now();
    let cropped = crop_cloud(&cloud, &ctx.config.crop);
    let crop_ms = ms(t);
    if cropped.coords.is_empty() {
        bail!(
            "empty cloud: no valid depth pixel of {} survives the workspace crop",
            depth_path.display()
        );
    }
    eprintln!("lifted {} points, {} inside the crop volume", cloud.coords.len(), cropped.coords.len());

    let t = Instant::now();
    let est = estimate_normals(&cropped, ctx.config.normals_k)?;
    let degenerate = est.degenerate.iter().filter(|&&d| d).count();
    let normals_ms = ms(t);
    let t = Instant::now();
    let comp = compress(&est.cloud, &VoxelSpec::new(ctx.config.voxel_size)?)?;
    let compress_ms = ms(t);

    let stem = file_stem(depth_path);
    let ply_path = ctx.out.join(format!("{stem}.ply"));
    let sidecar_path = ctx.out.join(format!("{stem}.voxidx"));
    let t = Instant::now();
    write_compressed(&ply_path, &sidecar_path, &comp)?;
    let write_ms = ms(t);

    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "n_dense": cropped.coords.len(),
            "m_compressed": comp.len(),
            "degenerate_normals": degenerate,
            "voxel_size": ctx.config.voxel_size,
            "outputs": { "ply": ply_path, "sidecar": sidecar_path },
            "timings_ms": {
                "read": read_ms,
                "lift": lift_ms,
                "crop": crop_ms,
                "normals": normals_ms,
                "compress": compress_ms,
                "write": write_ms,
            },
        }))?
    );
    Ok(0)
}

/// Compressed cloud in, fused token dump out. 2D tokens and per-point 3D
/// features come from the deterministic stub encoders unless imported dumps
/// are given; parameters come from a checkpoint or seeded initialization.
pub fn align_fuse(ctx: &Ctx, args: &AlignFuseArgs) -> anyhow::Result<i32> {
    let sidecar = args
        .sidecar
        .clone()
        .unwrap_or_else(|| args.cloud.with_extension("voxidx"));
    let comp = read_compressed(&args.cloud, &sidecar)?;
    let reps = &comp.representatives;
    let seed = ctx.config.seed;
    let grid = ctx.config.patch_grid;

    let params = match &args.params {
        Some(bin) => {
            let loaded = load_params(bin, &bin.with_extension("json"))?;
            if loaded.dims != ctx.config.fusion.dims() {
                eprintln!(
                    "checkpoint dims {:?} take precedence over config dims {:?}",
                    loaded.dims,
                    ctx.config.fusion.dims()
                );
            }
            loaded
        }
        None => ctx.config.fusion.init_params(seed)?,
    };
    let dims = params.dims;

    let feats = match &args.features_3d {
        Some(path) => {
            let dump = read_feature_dump(path)?;
            if dump.dim != dims.d3 {
                bail!(
                    "{} holds {}-wide features, fusion expects d3 = {}",
                    path.display(),
                    dump.dim,
                    dims.d3
                );
            }
            let n_rows = dump.data.len() / dump.dim;
            if n_rows != reps.len() {
                bail!(
                    "{} holds {} rows for {} compressed points",
                    path.display(),
                    n_rows,
                    reps.len()
                );
            }
            FeatureSet::new(dump.dim, dump.data.iter().map(|&v| f64::from(v)).collect())?
        }
        None => stub_encode_3d(reps, dims.d3, seed)?,
    };

    let assignments = assign_patches(&grid, &ctx.config.intrinsics, &reps.coords)?;
    let empty_token = seeded_empty_token(dims.d3, seed);
    let patches = scatter_mean(&assignments, &feats, &grid, &empty_token)?;
    let h3d = project_3d_tokens(&patches, &params)?;

    let h2d = match &args.tokens_2d {
        Some(path) => {
            let dump = read_feature_dump(path)?;
            if dump.dim != dims.dtok {
                bail!(
                    "{} holds {}-wide tokens, fusion expects dtok = {}",
                    path.display(),
                    dump.dim,
                    dims.dtok
                );
            }
            let n_rows = dump.data.len() / dump.dim;
            if n_rows != grid.n_patches() {
                bail!(
                    "{} holds {} tokens for a {}x{} patch grid",
                    path.display(),
                    n_rows,
                    grid.rows,
                    grid.cols
                );
            }
            let seq = TokenSequence {
                rows: grid.rows,
                cols: grid.cols,
                dim: dump.dim,
                data: dump.data.iter().map(|&v| f64::from(v)).collect(),
            };
            seq.validate()?;
            seq
        }
        None => {
            let Some(rgb) = &args.rgb else {
                bail!("provide --rgb or --tokens-2d for the 2D token stream");
            };
            stub_encode_2d(&read_png(rgb)?, &grid, dims.dtok, seed)?
        }
    };

    let fused = fuse(&h2d, &h3d, &params)?;

    let empty_patches = patches.empty_mask.iter().filter(|&&e| e).count();
    let n_patches = patches.n_patches();
    let outputs = [
        ("patchfeat", FeatureDump::from_grid(&patches)),
        ("h2d", FeatureDump::from_rows(dims.dtok, &h2d.data)),
        (
            "h3d",
            FeatureDump {
                dim: dims.dtok,
                data: h3d.data.iter().map(|&v| v as f32).collect(),
                empty_mask: patches.empty_mask.clone(),
            },
        ),
        (
            "fused",
            FeatureDump {
                dim: dims.dtok,
                data: fused.data.iter().map(|&v| v as f32).collect(),
                empty_mask: patches.empty_mask.clone(),
            },
        ),
    ];
    let mut out_paths = serde_json::Map::new();
    for (name, dump) in &outputs {
        let path = ctx.out.join(format!("{name}.bin"));
        write_feature_dump(&path, dump)?;
        out_paths.insert((*name).into(), json!(path));
    }
    if let Some(bin) = &args.save_params {
        let manifest = bin.with_extension("json");
        save_params(bin, &manifest, &params)?;
        out_paths.insert("params".into(), json!(bin));
        out_paths.insert("params_manifest".into(), json!(manifest));
    }

    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "n_points": reps.len(),
            "n_patches": n_patches,
            "empty_patches": empty_patches,
            "empty_fraction": empty_patches as f64 / n_patches as f64,
            "dims": { "dtok": dims.dtok, "d3": dims.d3, "hidden": dims.hidden },
            "outputs": out_paths,
        }))?
    );
    Ok(0)
}

/// Finite-difference checks for the fusion backward pass and the flow loss
/// gradient. Exit 0 only when every block passes; `--corrupt` scales one
/// analytic block as a negative control and must exit nonzero.
pub fn gradcheck(ctx: &Ctx, corrupt: bool, per_block: usize, draws: usize) -> anyhow::Result<i32> {
    let fusion = check_fusion(ctx.config.fusion.dims(), ctx.config.seed, per_block, corrupt)?;
    let flow = check_flow_loss(ctx.config.seed, draws)?;
    let passed = fusion.passed && flow.passed;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "fusion": fusion,
            "flow": flow,
            "passed": passed,
        }))?
    );
    Ok(if passed { 0 } else { 1 })
}

/// Build a depth-source manifest from a bare trajectory list or a JSONL
/// frame file. Exits 1 when the report carries issues.
pub fn mix(
    ctx: &Ctx,
    trajectories: Option<&Path>,
    frames: Option<&Path>,
    check_files: bool,
) -> anyhow::Result<i32> {
    let inputs: Vec<FrameInput> = match (trajectories, frames) {
        (Some(_), Some(_)) => bail!("pass exactly one of --trajectories or --frames"),
        (None, None) => bail!("pass --trajectories (id list) or --frames (JSONL)"),
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading trajectory list {}", path.display()))?;
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|id| FrameInput {
                    trajectory_id: id.to_string(),
                    frame_id: 0,
                    rgb_path: format!("{id}/rgb_000000.png"),
                    depth_path: format!("{id}/depth_000000.f32"),
                    intrinsics: ctx.config.intrinsics,
                })
                .collect()
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading frame records {}", path.display()))?;
            let mut inputs = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let frame: FrameInput = serde_json::from_str(line)
                    .with_context(|| format!("{}:{}", path.display(), i + 1))?;
                inputs.push(frame);
            }
            inputs
        }
    };
    let manifest_path = ctx.out.join("manifest.jsonl");
    let report = build_manifest(
        &inputs,
        &ctx.config.source_mix,
        ctx.config.seed,
        &manifest_path,
        check_files,
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.ok { 0 } else { 1 })
}

/// Score JSONL loss records. Without `--output` the scored records are the
/// stdout stream; with it they go to the file and stdout gets a summary.
pub fn loss_eval(input: &Path, output: Option<&Path>, vocab: usize) -> anyhow::Result<i32> {
    let text = std::fs::read_to_string(input)
        .with_context(|| format!("reading records {}", input.display()))?;
    let mut lines_out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let at = || format!("{}:{}", input.display(), i + 1);
        let record: LossEvalRecord = serde_json::from_str(line).with_context(at)?;
        let result = evaluate_record(&record, vocab).with_context(at)?;
        lines_out.push(serde_json::to_string(&result)?);
    }
    match output {
        Some(path) => {
            let body = if lines_out.is_empty() {
                String::new()
            } else {
                lines_out.join("\n") + "\n"
            };
            std::fs::write(path, body)
                .with_context(|| format!("writing {}", path.display()))?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "records": lines_out.len(),
                    "vocab": vocab,
                    "output": path,
                }))?
            );
        }
        None => {
            for line in &lines_out {
                println!("{line}");
            }
        }
    }
    Ok(0)
}

/// Brute-force scatter-mean over the same inputs `align-fuse` consumes:
/// inline pinhole projection, per-patch filtered sums. Emits a feature dump
/// that must match the pipeline's `patchfeat.bin` byte for byte.
pub fn oracle_scatter_mean(ctx: &Ctx, cloud: &Path, sidecar: Option<PathBuf>) -> anyhow::Result<i32> {
    let sidecar = sidecar.unwrap_or_else(|| cloud.with_extension("voxidx"));
    let comp = read_compressed(cloud, &sidecar)?;
    let reps = &comp.representatives;
    let seed = ctx.config.seed;
    let d3 = ctx.config.fusion.d3;
    let grid = ctx.config.patch_grid;
    let intr = &ctx.config.intrinsics;

    let feats = stub_encode_3d(reps, d3, seed)?;
    let empty_token = seeded_empty_token(d3, seed);

    let n = reps.coords.len();
    let mut assignments = Vec::with_capacity(n);
    for &[x, y, z] in &reps.coords {
        if !(z.is_finite() && z > 0.0) {
            bail!("point with depth {z} cannot be projected onto the patch grid");
        }
        let u = intr.fx * x / z + intr.cx;
        let v = intr.fy * y / z + intr.cy;
        let col = ((u / f64::from(grid.patch_px)).floor() as i64).clamp(0, i64::from(grid.cols) - 1);
        let row = ((v / f64::from(grid.patch_px)).floor() as i64).clamp(0, i64::from(grid.rows) - 1);
        assignments.push(row as usize * grid.cols as usize + col as usize);
    }

    let n_patches = grid.n_patches();
    let mut data = vec![0.0f64; n_patches * d3];
    let mut empty_mask = vec![false; n_patches];
    for j in 0..n_patches {
        let dst = &mut data[j * d3..(j + 1) * d3];
        let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == j).collect();
        if members.is_empty() {
            dst.copy_from_slice(&empty_token);
            empty_mask[j] = true;
            continue;
        }
        for &i in &members {
            for (acc, x) in dst.iter_mut().zip(&feats.data[i * d3..(i + 1) * d3]) {
                *acc += x;
            }
        }
        for acc in dst.iter_mut() {
            *acc /= members.len() as f64;
        }
    }

    let dump = FeatureDump {
        dim: d3,
        data: data.iter().map(|&v| v as f32).collect(),
        empty_mask,
    };
    let out_path = ctx.out.join("oracle_patchfeat.bin");
    write_feature_dump(&out_path, &dump)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "n_points": n,
            "n_patches": n_patches,
            "output": out_path,
        }))?
    );
    Ok(0)
}

/// Brute-force voxel compression of a depth frame: the shared lift, crop
/// and normals stages feed an ordered-map group-by keyed on floor(p / g).
/// Outputs must match `lift-compress` byte for byte.
pub fn oracle_voxel_groupby(ctx: &Ctx, depth_path: &Path, rgb_path: Option<PathBuf>) -> anyhow::Result<i32> {
    let (depth, intr) = read_depth(depth_path)
        .with_context(|| format!("reading depth frame {}", depth_path.display()))?;
    let rgb = read_png(&rgb_path.unwrap_or_else(|| infer_rgb_path(depth_path)))?;
    let cloud = lift_frame(&intr, &rgb, &depth)?;
    let cropped = crop_cloud(&cloud, &ctx.config.crop);
    if cropped.coords.is_empty() {
        bail!(
            "empty cloud: no valid depth pixel of {} survives the workspace crop",
            depth_path.display()
        );
    }
    let cloud = estimate_normals(&cropped, ctx.config.normals_k)?.cloud;

    let g = ctx.config.voxel_size;
    let mut seen: BTreeMap<(i64, i64, i64), u32> = BTreeMap::new();
    let mut rep_indices: Vec<usize> = Vec::new();
    let mut voxel_coords: Vec<[i64; 3]> = Vec::new();
    let mut inverse_index = Vec::with_capacity(cloud.coords.len());
    for (i, p) in cloud.coords.iter().enumerate() {
        let cell = (
            (p[0] / g).floor() as i64,
            (p[1] / g).floor() as i64,
            (p[2] / g).floor() as i64,
        );
        let next = rep_indices.len() as u32;
        let id = *seen.entry(cell).or_insert_with(|| {
            rep_indices.push(i);
            voxel_coords.push([cell.0, cell.1, cell.2]);
            next
        });
        inverse_index.push(id);
    }
    let representatives = PointCloud {
        coords: rep_indices.iter().map(|&i| cloud.coords[i]).collect(),
        colors: rep_indices.iter().map(|&i| cloud.colors[i]).collect(),
        normals: cloud
            .normals
            .as_ref()
            .map(|ns| rep_indices.iter().map(|&i| ns[i]).collect()),
        pixel_src: cloud
            .pixel_src
            .as_ref()
            .map(|ps| rep_indices.iter().map(|&i| ps[i]).collect()),
    };
    let comp = CompressedCloud {
        representatives,
        voxel_coords,
        inverse_index,
    };

    let stem = file_stem(depth_path);
    let ply_path = ctx.out.join(format!("oracle_{stem}.ply"));
    let sidecar_path = ctx.out.join(format!("oracle_{stem}.voxidx"));
    write_compressed(&ply_path, &sidecar_path, &comp)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "n_dense": cloud.coords.len(),
            "m_compressed": comp.len(),
            "outputs": { "ply": ply_path, "sidecar": sidecar_path },
        }))?
    );
    Ok(0)
}

/// rgb path guess for a depth file: swap the first "depth" in the file name
/// for "rgb" and use the .png extension.
fn infer_rgb_path(depth: &Path) -> PathBuf {
    let name = depth
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let swapped = if name.contains("depth") {
        name.replacen("depth", "rgb", 1)
    } else {
        name
    };
    depth.with_file_name(swapped).with_extension("png")
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "frame".into())
}

fn ms(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1e3
}
