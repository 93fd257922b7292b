//! End-to-end subcommand tests: every invocation goes through the real
//! binary, and byte-level determinism claims are checked with hashes over
//! the produced files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_patchfuse"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawning the pipeline binary")
}

fn run_json(args: &[&str]) -> serde_json::Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stats output is JSON")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process exited normally")
}

fn sha(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    format!("{:x}", Sha256::digest(&bytes))
}

fn s(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Render one trajectory/frame into `dir` and return the depth/rgb paths.
fn synth_one(dir: &Path) -> (PathBuf, PathBuf) {
    run_json(&["synth", "--trajectories", "1", "--frames", "1", "--out", s(dir)]);
    (
        dir.join("traj_000/depth_000000.f32"),
        dir.join("traj_000/rgb_000000.png"),
    )
}

/// Parse a feature dump: (rows, dim, data, mask).
fn read_dump(path: &Path) -> (usize, usize, Vec<f32>, Vec<u8>) {
    let bytes = std::fs::read(path).unwrap();
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let data: Vec<f32> = bytes[8..8 + count * dim * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mask = bytes[8 + count * dim * 4..].to_vec();
    assert_eq!(mask.len(), count, "mask length in {}", path.display());
    (count, dim, data, mask)
}

#[test]
fn print_config_round_trips_and_bad_configs_are_rejected() {
    let dir = tempdir().unwrap();
    let out = run(&["--print-config"]);
    assert_eq!(exit_code(&out), 0);
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, &out.stdout).unwrap();

    let again = run(&["--config", s(&config_path), "--print-config"]);
    assert_eq!(exit_code(&again), 0);
    assert_eq!(again.stdout, out.stdout, "effective config must round trip");

    // A seed override shows up in the effective config.
    let seeded = run(&["--config", s(&config_path), "--seed", "9", "--print-config"]);
    let value: serde_json::Value = serde_json::from_slice(&seeded.stdout).unwrap();
    assert_eq!(value["seed"], 9);

    // Unknown keys are a format failure of the config document.
    let mut doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    doc.as_object_mut().unwrap().insert("surprise".into(), 1.into());
    let bad_path = dir.path().join("bad.json");
    std::fs::write(&bad_path, serde_json::to_vec(&doc).unwrap()).unwrap();
    let bad = run(&["--config", s(&bad_path), "--print-config"]);
    assert_eq!(exit_code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("surprise"));

    // Semantically invalid values are a validation failure.
    let mut doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    doc["voxel_size"] = (-1.0).into();
    let invalid_path = dir.path().join("invalid.json");
    std::fs::write(&invalid_path, serde_json::to_vec(&doc).unwrap()).unwrap();
    let invalid = run(&["--config", s(&invalid_path), "--print-config"]);
    assert_eq!(exit_code(&invalid), 1);
}

#[test]
fn synth_is_deterministic_with_the_documented_formats() {
    let a = tempdir().unwrap();
    let b = tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        run_json(&["synth", "--trajectories", "2", "--frames", "2", "--out", s(dir)]);
    }
    for rel in [
        "manifest.jsonl",
        "traj_000/depth_000000.f32",
        "traj_000/depth_000000.f32.json",
        "traj_000/rgb_000000.png",
        "traj_001/depth_000001.f32",
        "traj_001/rgb_000001.png",
    ] {
        assert_eq!(
            sha(&a.path().join(rel)),
            sha(&b.path().join(rel)),
            "{rel} must be byte-identical across runs"
        );
    }
    let payload = std::fs::metadata(a.path().join("traj_000/depth_000000.f32")).unwrap();
    assert_eq!(payload.len(), 262_144, "256x256 float32 depth payload");

    // A different seed actually changes the rendered content.
    let c = tempdir().unwrap();
    run_json(&["synth", "--trajectories", "1", "--frames", "1", "--seed", "5", "--out", s(c.path())]);
    assert_ne!(
        sha(&a.path().join("traj_000/depth_000000.f32")),
        sha(&c.path().join("traj_000/depth_000000.f32"))
    );
}

#[test]
fn synth_with_zero_frames_writes_an_empty_manifest() {
    let dir = tempdir().unwrap();
    let stats = run_json(&["synth", "--trajectories", "0", "--frames", "0", "--out", s(dir.path())]);
    assert_eq!(stats["n_frames"], 0);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), 1, "only the summary footer remains");
    assert!(lines[0].contains("summary"));
}

#[test]
fn lift_compress_hits_the_count_bands_and_reruns_byte_identically() {
    let dir = tempdir().unwrap();
    let (depth, _rgb) = synth_one(dir.path());
    let out_a = dir.path().join("a");
    let stats = run_json(&["lift-compress", "--depth", s(&depth), "--out", s(&out_a)]);
    let n = stats["n_dense"].as_u64().unwrap();
    let m = stats["m_compressed"].as_u64().unwrap();
    assert!((30_000..=60_000).contains(&n), "dense count {n}");
    assert!((3_000..=8_000).contains(&m), "compressed count {m}");

    let out_b = dir.path().join("b");
    run_json(&["lift-compress", "--depth", s(&depth), "--out", s(&out_b)]);
    assert_eq!(
        sha(&out_a.join("depth_000000.ply")),
        sha(&out_b.join("depth_000000.ply")),
        "rerun must reproduce the PLY exactly"
    );
    assert_eq!(
        sha(&out_a.join("depth_000000.voxidx")),
        sha(&out_b.join("depth_000000.voxidx"))
    );
}

#[test]
fn lift_compress_rejects_an_all_invalid_frame_as_empty() {
    let dir = tempdir().unwrap();
    let (_depth, rgb) = synth_one(dir.path());
    let zero_depth = dir.path().join("traj_000/depth_zero.f32");
    std::fs::write(&zero_depth, vec![0u8; 262_144]).unwrap();
    std::fs::write(
        dir.path().join("traj_000/depth_zero.f32.json"),
        r#"{"fx":300.0,"fy":300.0,"cx":128.0,"cy":128.0,"width":256,"height":256}"#,
    )
    .unwrap();
    std::fs::copy(&rgb, dir.path().join("traj_000/rgb_zero.png")).unwrap();

    let out = run(&["lift-compress", "--depth", s(&zero_depth), "--out", s(dir.path())]);
    assert_eq!(exit_code(&out), 1);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("empty cloud"),
        "stderr names the empty cloud: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn lift_compress_flags_a_truncated_depth_file_as_format_error() {
    let dir = tempdir().unwrap();
    let truncated = dir.path().join("depth_bad.f32");
    std::fs::write(&truncated, vec![0u8; 1000]).unwrap();
    std::fs::write(
        dir.path().join("depth_bad.f32.json"),
        r#"{"fx":300.0,"fy":300.0,"cx":128.0,"cy":128.0,"width":256,"height":256}"#,
    )
    .unwrap();
    let out = run(&["lift-compress", "--depth", s(&truncated), "--out", s(dir.path())]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("depth_bad"));
}

#[test]
fn align_fuse_writes_dumps_and_the_closed_gate_reduces_to_h2d() {
    let dir = tempdir().unwrap();
    let (depth, rgb) = synth_one(dir.path());
    run_json(&["lift-compress", "--depth", s(&depth), "--out", s(dir.path())]);
    let cloud = dir.path().join("depth_000000.ply");

    let fused_dir = dir.path().join("fused");
    let stats = run_json(&[
        "align-fuse", "--cloud", s(&cloud), "--rgb", s(&rgb), "--out", s(&fused_dir),
    ]);
    let frac = stats["empty_fraction"].as_f64().unwrap();
    assert!(frac > 0.0 && frac < 1.0, "empty fraction {frac}");
    for name in ["patchfeat.bin", "h2d.bin", "h3d.bin", "fused.bin"] {
        assert!(fused_dir.join(name).exists(), "{name} missing");
    }

    // Determinism: a second run reproduces the fused dump exactly.
    let fused_dir2 = dir.path().join("fused2");
    run_json(&["align-fuse", "--cloud", s(&cloud), "--rgb", s(&rgb), "--out", s(&fused_dir2)]);
    assert_eq!(sha(&fused_dir.join("fused.bin")), sha(&fused_dir2.join("fused.bin")));

    // gate_init = -50 closes the gate: fused tokens equal the 2D tokens.
    let config = run(&["--print-config"]);
    let mut doc: serde_json::Value = serde_json::from_slice(&config.stdout).unwrap();
    doc["fusion"]["gate_init"] = (-50.0).into();
    let gate_path = dir.path().join("gate.json");
    std::fs::write(&gate_path, serde_json::to_vec(&doc).unwrap()).unwrap();
    let gated_dir = dir.path().join("gated");
    run_json(&[
        "align-fuse", "--config", s(&gate_path), "--cloud", s(&cloud), "--rgb", s(&rgb),
        "--out", s(&gated_dir),
    ]);
    let (n_f, d_f, fused, _) = read_dump(&gated_dir.join("fused.bin"));
    let (n_h, d_h, h2d, _) = read_dump(&gated_dir.join("h2d.bin"));
    assert_eq!((n_f, d_f), (n_h, d_h));
    let worst = fused
        .iter()
        .zip(&h2d)
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    assert!(worst <= 1e-10, "closed gate deviates by {worst}");
}

#[test]
fn align_fuse_single_patch_cloud_reports_the_counting_fraction() {
    use patchfuse_core::compression::{compress, write_compressed, VoxelSpec};
    use patchfuse_core::geometry::PointCloud;

    let dir = tempdir().unwrap();
    // Five points along +x at z = 1 m: pixels u = 128 + 3.6 k stay inside
    // patch column 8, row 8 of the 16 px grid, one voxel apart.
    let coords: Vec<[f64; 3]> = (0..5).map(|k| [0.012 * k as f64, 0.0, 1.0]).collect();
    let colors = vec![[0.5f32, 0.5, 0.5]; coords.len()];
    let cloud = PointCloud::new(coords, colors).unwrap();
    let comp = compress(&cloud, &VoxelSpec::default()).unwrap();
    assert_eq!(comp.len(), 5, "each point is its own voxel");
    let ply = dir.path().join("single.ply");
    write_compressed(&ply, &dir.path().join("single.voxidx"), &comp).unwrap();

    let black = image::RgbImage::new(256, 256);
    let rgb = dir.path().join("black.png");
    black.save(&rgb).unwrap();

    let stats = run_json(&["align-fuse", "--cloud", s(&ply), "--rgb", s(&rgb), "--out", s(dir.path())]);
    assert_eq!(stats["empty_patches"], 255);
    assert_eq!(stats["n_patches"], 256);
    let frac = stats["empty_fraction"].as_f64().unwrap();
    assert!((frac - 255.0 / 256.0).abs() < 1e-12);
}

#[test]
fn align_fuse_checkpoints_override_the_config() {
    let dir = tempdir().unwrap();
    let (depth, rgb) = synth_one(dir.path());
    run_json(&["lift-compress", "--depth", s(&depth), "--out", s(dir.path())]);
    let cloud = dir.path().join("depth_000000.ply");

    let base_dir = dir.path().join("base");
    let params = dir.path().join("params.bin");
    run_json(&[
        "align-fuse", "--cloud", s(&cloud), "--rgb", s(&rgb),
        "--save-params", s(&params), "--out", s(&base_dir),
    ]);
    assert!(params.exists());
    assert!(dir.path().join("params.json").exists(), "checkpoint manifest");

    // Two runs that load the same checkpoint must agree byte for byte even
    // when one of them carries a gate-closed config: stored parameters win
    // over config hyperparameters.
    let default_dir = dir.path().join("default");
    run_json(&[
        "align-fuse", "--cloud", s(&cloud), "--rgb", s(&rgb), "--params", s(&params),
        "--out", s(&default_dir),
    ]);
    let config = run(&["--print-config"]);
    let mut doc: serde_json::Value = serde_json::from_slice(&config.stdout).unwrap();
    doc["fusion"]["gate_init"] = (-50.0).into();
    let gate_path = dir.path().join("gate.json");
    std::fs::write(&gate_path, serde_json::to_vec(&doc).unwrap()).unwrap();
    let loaded_dir = dir.path().join("loaded");
    run_json(&[
        "align-fuse", "--config", s(&gate_path), "--cloud", s(&cloud), "--rgb", s(&rgb),
        "--params", s(&params), "--out", s(&loaded_dir),
    ]);
    assert_eq!(sha(&default_dir.join("fused.bin")), sha(&loaded_dir.join("fused.bin")));

    // The loaded gate is still the open default, so the fused tokens must
    // differ visibly from the plain 2D tokens.
    let (_, _, fused, _) = read_dump(&loaded_dir.join("fused.bin"));
    let (_, _, h2d, _) = read_dump(&loaded_dir.join("h2d.bin"));
    let worst = fused
        .iter()
        .zip(&h2d)
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    assert!(worst > 1e-3, "config gate leaked into the loaded run");

    // A tampered checkpoint payload is rejected as a format failure.
    let mut bytes = std::fs::read(&params).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    std::fs::write(&params, bytes).unwrap();
    let out = run(&[
        "align-fuse", "--cloud", s(&cloud), "--rgb", s(&rgb), "--params", s(&params),
        "--out", s(&loaded_dir),
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn align_fuse_rejects_mismatched_imported_features() {
    let dir = tempdir().unwrap();
    let (depth, rgb) = synth_one(dir.path());
    run_json(&["lift-compress", "--depth", s(&depth), "--out", s(dir.path())]);
    let cloud = dir.path().join("depth_000000.ply");

    // A 2-row, 5-wide dump cannot satisfy d3 = 24.
    let mut dump = Vec::new();
    dump.extend_from_slice(&2u32.to_le_bytes());
    dump.extend_from_slice(&5u32.to_le_bytes());
    dump.extend_from_slice(&[0u8; 2 * 5 * 4]);
    dump.extend_from_slice(&[0u8, 0u8]);
    let feat_path = dir.path().join("narrow.bin");
    std::fs::write(&feat_path, dump).unwrap();

    let out = run(&[
        "align-fuse", "--cloud", s(&cloud), "--rgb", s(&rgb),
        "--features-3d", s(&feat_path), "--out", s(dir.path()),
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("narrow.bin"));

    // Without any 2D token source the command cannot proceed.
    let out = run(&["align-fuse", "--cloud", s(&cloud), "--out", s(dir.path())]);
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--tokens-2d"));
}

#[test]
fn align_fuse_accepts_imported_2d_tokens() {
    let dir = tempdir().unwrap();
    let (depth, rgb) = synth_one(dir.path());
    run_json(&["lift-compress", "--depth", s(&depth), "--out", s(dir.path())]);
    let cloud = dir.path().join("depth_000000.ply");

    let stub_dir = dir.path().join("stub");
    run_json(&["align-fuse", "--cloud", s(&cloud), "--rgb", s(&rgb), "--out", s(&stub_dir)]);
    let imported_dir = dir.path().join("imported");
    run_json(&[
        "align-fuse", "--cloud", s(&cloud), "--tokens-2d", s(&stub_dir.join("h2d.bin")),
        "--out", s(&imported_dir),
    ]);
    // The imported tokens pass through unchanged (f32 -> f64 -> f32 is
    // lossless), so the emitted h2d dumps carry identical data.
    let (_, _, a, _) = read_dump(&stub_dir.join("h2d.bin"));
    let (_, _, b, _) = read_dump(&imported_dir.join("h2d.bin"));
    assert_eq!(a, b);
}

#[test]
fn gradcheck_exit_codes_separate_healthy_and_corrupted_gradients() {
    let out = run(&["gradcheck", "--per-block", "4", "--draws", "4"]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["fusion"]["blocks"].as_array().unwrap().len(), 12);
    assert!(report["flow"]["passed"].as_bool().unwrap());

    let corrupt = run(&["gradcheck", "--per-block", "4", "--draws", "4", "--corrupt"]);
    assert_eq!(exit_code(&corrupt), 1, "corrupted gradients must fail");
    let report: serde_json::Value = serde_json::from_slice(&corrupt.stdout).unwrap();
    assert_eq!(report["passed"], false);
}

#[test]
fn mix_reproduces_the_default_ratios_and_is_deterministic() {
    let dir = tempdir().unwrap();
    let list = dir.path().join("trajectories.txt");
    let ids: Vec<String> = (0..10_000).map(|i| format!("t{i:06}")).collect();
    std::fs::write(&list, ids.join("\n")).unwrap();

    let out_a = dir.path().join("a");
    let report = run_json(&["mix", "--trajectories", s(&list), "--out", s(&out_a)]);
    assert_eq!(report["ok"], true);
    let counts = report["source_counts"].as_object().unwrap();
    let expected = [
        ("Simulator/Sensor", 0.30),
        ("UniDepthV2", 0.30),
        ("DepthAnything3", 0.20),
        ("MapAnything", 0.20),
    ];
    for (name, p) in expected {
        let freq = counts[name].as_f64().unwrap() / 10_000.0;
        assert!(
            (freq - p).abs() <= 0.015,
            "{name}: observed {freq:.4}, target {p}"
        );
    }

    let out_b = dir.path().join("b");
    run_json(&["mix", "--trajectories", s(&list), "--out", s(&out_b)]);
    assert_eq!(sha(&out_a.join("manifest.jsonl")), sha(&out_b.join("manifest.jsonl")));

    let out_c = dir.path().join("c");
    run_json(&["mix", "--trajectories", s(&list), "--seed", "1", "--out", s(&out_c)]);
    assert_ne!(
        sha(&out_a.join("manifest.jsonl")),
        sha(&out_c.join("manifest.jsonl")),
        "a different seed must reshuffle sources"
    );
}

#[test]
fn mix_check_files_reports_missing_depth_and_fails() {
    let dir = tempdir().unwrap();
    let (depth, _rgb) = synth_one(dir.path());

    // One real frame, one frame pointing at a file that does not exist.
    let frames = dir.path().join("frames.jsonl");
    let intr = r#"{"fx":300.0,"fy":300.0,"cx":128.0,"cy":128.0,"width":256,"height":256}"#;
    let body = format!(
        "{{\"trajectory_id\":\"ok\",\"frame_id\":0,\"rgb_path\":\"r.png\",\"depth_path\":\"{}\",\"intrinsics\":{intr}}}\n\
         {{\"trajectory_id\":\"gone\",\"frame_id\":0,\"rgb_path\":\"r.png\",\"depth_path\":\"{}/missing.f32\",\"intrinsics\":{intr}}}\n",
        depth.display(),
        dir.path().display(),
    );
    std::fs::write(&frames, body).unwrap();

    let out = run(&["mix", "--frames", s(&frames), "--check-files", "--out", s(dir.path())]);
    assert_eq!(exit_code(&out), 1, "issues must fail the run");
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["ok"], false);
    let issues = report["issues"].as_array().unwrap();
    assert_eq!(issues.len(), 1);
    assert!(issues[0].as_str().unwrap().contains("missing.f32"));
    // The manifest itself is still complete for the frames that exist.
    let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3, "two records plus footer");
}

#[test]
fn loss_eval_scores_records_and_rejects_malformed_lines() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("records.jsonl");
    // Uniform-logit baseline: two bbox tokens at vocab 4 cost 2 ln 4; the
    // zero baseline field against A0 = 0, noise = 1 costs sum((1-0)^2) = 2.
    std::fs::write(
        &input,
        concat!(
            r#"{"A0": [[0.0, 0.0]], "t": 0.5, "noise": [[1.0, 1.0]], "is_synthetic": false, "bbox_targets": [1, 2]}"#,
            "\n",
            r#"{"A0": [[0.0, 0.0]], "t": 0.5, "noise": [[1.0, 1.0]], "is_synthetic": true, "bbox_targets": [1, 2]}"#,
            "\n",
        ),
    )
    .unwrap();
    let out = run(&["loss-eval", "--input", s(&input), "--vocab", "4"]);
    assert_eq!(exit_code(&out), 0);
    let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    let two_ln4 = 2.0 * 4.0f64.ln();
    // Real-robot record: flow term masked off.
    assert!((lines[0]["L_S1"].as_f64().unwrap() - 0.0).abs() < 1e-12);
    assert!((lines[0]["L_S2"].as_f64().unwrap() - two_ln4).abs() < 1e-9);
    // Synthetic record: flow term live.
    assert!((lines[1]["L_S1"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert!((lines[1]["L_total"].as_f64().unwrap() - (2.0 + two_ln4)).abs() < 1e-9);

    // --output moves the records into a file and summarizes on stdout.
    let scored = dir.path().join("scored.jsonl");
    let summary = run_json(&[
        "loss-eval", "--input", s(&input), "--vocab", "4", "--output", s(&scored),
    ]);
    assert_eq!(summary["records"], 2);
    assert_eq!(std::fs::read_to_string(&scored).unwrap().lines().count(), 2);

    // A malformed line is a format failure naming the line number.
    std::fs::write(&input, "{ not json\n").unwrap();
    let bad = run(&["loss-eval", "--input", s(&input)]);
    assert_eq!(exit_code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains(":1"));

    // A semantically invalid record (token out of vocabulary) is a
    // validation failure.
    std::fs::write(
        &input,
        r#"{"A0": [[0.0]], "t": 0.5, "noise": [[1.0]], "is_synthetic": true, "bbox_targets": [9]}"#,
    )
    .unwrap();
    let invalid = run(&["loss-eval", "--input", s(&input), "--vocab", "4"]);
    assert_eq!(exit_code(&invalid), 1);
}

#[test]
fn oracle_routes_match_the_pipeline_byte_for_byte() {
    let dir = tempdir().unwrap();
    let (depth, rgb) = synth_one(dir.path());
    let out = dir.path().join("pipeline");
    run_json(&["lift-compress", "--depth", s(&depth), "--out", s(&out)]);
    run_json(&["oracle", "voxel-groupby", "--depth", s(&depth), "--out", s(&out)]);
    assert_eq!(
        sha(&out.join("depth_000000.ply")),
        sha(&out.join("oracle_depth_000000.ply")),
        "group-by oracle PLY"
    );
    assert_eq!(
        sha(&out.join("depth_000000.voxidx")),
        sha(&out.join("oracle_depth_000000.voxidx")),
        "group-by oracle inverse index"
    );

    let cloud = out.join("depth_000000.ply");
    run_json(&["align-fuse", "--cloud", s(&cloud), "--rgb", s(&rgb), "--out", s(&out)]);
    run_json(&["oracle", "scatter-mean", "--cloud", s(&cloud), "--out", s(&out)]);
    assert_eq!(
        sha(&out.join("patchfeat.bin")),
        sha(&out.join("oracle_patchfeat.bin")),
        "scatter-mean oracle dump"
    );
}

#[test]
fn missing_inputs_are_io_failures() {
    let out = run(&["lift-compress", "--depth", "/nonexistent/depth.f32"]);
    assert_eq!(exit_code(&out), 2);
    let out = run(&["mix"]);
    assert_eq!(exit_code(&out), 1, "no input list is a validation failure");
}
