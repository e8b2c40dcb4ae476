//! End-to-end exercise of the command surface on a miniature model: train,
//! all four generation commands, eval and the cost table, checking seeded
//! reproducibility at the file level.

use std::path::{Path, PathBuf};
use std::process::Command;

use marvid::attention::BaseAttention;
use marvid::config::{GeneratorSection, PlannerSection, RunConfig};
use marvid::data::{render_video, write_pgm, Geometry, SceneSpec};
use marvid::masking::{StageConfig, StageObjective};
use marvid::rng::{Rng, StreamId};

fn tiny_config(out_dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.output_dir = out_dir.to_path_buf();
    cfg.checkpoint_every = 1000;
    cfg.geometry = Geometry {
        frames: 3,
        high_px: 16,
        low_px: 4,
        patch: 4,
    };
    cfg.planner = PlannerSection {
        depth: 1,
        hidden: 16,
        mlp: 32,
        heads: 2,
        c_cond: 8,
        identity_attention: true,
    };
    cfg.generator = GeneratorSection {
        depth: 1,
        hidden: 8,
        mlp: 16,
        heads: 2,
        t_dim: 8,
        attention: BaseAttention::Temporal,
    };
    cfg.schedule.t_max = 50;
    cfg.schedule.ddim_steps = 4;
    cfg.train.batch = 2;
    cfg.train.holdout_videos = 2;
    cfg.train.eval_every = 5;
    let stage = |name: &str, objective, steps| StageConfig {
        name: name.into(),
        objective,
        steps,
        frames: 3,
        high_px: 16,
        base_lr: 1e-3,
        warmup_steps: 1,
        ratio: None,
    };
    cfg.train.stages = vec![
        stage("recon", StageObjective::PlannerRecon, 3),
        stage("warmup", StageObjective::DenoiseWarmup, 3),
        stage("interp", StageObjective::JointInterpolation, 2),
        stage("joint", StageObjective::JointCurriculum, 2),
    ];
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_marvid"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn marvid");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn frame_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".pgm"))
        })
        .collect();
    v.sort();
    v
}

#[test]
fn cli_end_to_end() {
    let ws = tempfile::tempdir().unwrap();
    let run_dir = ws.path().join("run");
    let cfg = tiny_config(&run_dir);
    let cfg_path = ws.path().join("tiny.toml");
    cfg.save(&cfg_path).unwrap();

    // Train: 10 steps, 10 loss records, at least one checkpoint.
    let stdout = run_ok(bin().args(["train", "--config"]).arg(&cfg_path));
    assert!(stdout.contains("10 steps"), "{stdout}");
    let losses = std::fs::read_to_string(run_dir.join("losses.jsonl")).unwrap();
    assert_eq!(losses.lines().count(), 10);
    let mut saw_temporal_joint = false;
    for line in losses.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
        if v["stage"] == "interp" {
            assert_eq!(v["dm_attention"], "temporal");
            saw_temporal_joint = true;
        }
        if v["stage"] == "warmup" {
            assert_eq!(v["dm_attention"], "spatio_temporal");
        }
    }
    assert!(saw_temporal_joint);
    assert!(run_dir.join("config.toml").exists());
    let ckpt = run_dir.join("ckpt_000010.mdni");
    assert!(ckpt.exists(), "final checkpoint missing");

    // Source frames for the generation commands.
    let g = cfg.geometry;
    let mut rng = Rng::new(99, StreamId::Custom(1));
    let spec = SceneSpec::sample(&mut rng, &cfg.data);
    let truth = render_video(&spec, g.high_px, g.frames);
    let first = ws.path().join("first.pgm");
    let last = ws.path().join("last.pgm");
    write_pgm(&first, g.high_px, g.high_px, truth.frame(0)).unwrap();
    write_pgm(&last, g.high_px, g.high_px, truth.frame(g.frames - 1)).unwrap();

    // Interpolate twice with one seed, once with another: hash equality.
    let int_a = ws.path().join("int_a");
    let int_b = ws.path().join("int_b");
    let int_c = ws.path().join("int_c");
    for (dir, seed) in [(&int_a, "5"), (&int_b, "5"), (&int_c, "6")] {
        run_ok(
            bin()
                .args(["interpolate", "--ckpt"])
                .arg(&ckpt)
                .args(["--steps", "4", "--seed", seed, "--first"])
                .arg(&first)
                .arg("--last")
                .arg(&last)
                .arg("--out")
                .arg(dir),
        );
    }
    let files_a = frame_files(&int_a);
    assert_eq!(files_a.len(), g.frames);
    for (fa, fb) in files_a.iter().zip(frame_files(&int_b)) {
        assert_eq!(
            std::fs::read(fa).unwrap(),
            std::fs::read(&fb).unwrap(),
            "same seed must reproduce identical files"
        );
    }
    let all_c: Vec<Vec<u8>> = frame_files(&int_c).iter().map(|p| std::fs::read(p).unwrap()).collect();
    let all_a: Vec<Vec<u8>> = files_a.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_ne!(all_a, all_c, "different seed must change some frame");
    // REF frames are copied bit-exactly: file 0 equals the input PGM.
    assert_eq!(
        std::fs::read(&files_a[0]).unwrap(),
        std::fs::read(&first).unwrap()
    );
    assert_eq!(
        std::fs::read(files_a.last().unwrap()).unwrap(),
        std::fs::read(&last).unwrap()
    );
    // Every written frame is hashed into the metrics log.
    let metrics = std::fs::read_to_string(int_a.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), g.frames);
    assert!(metrics.contains("sha256"));

    // Animate emits the full sequence with frame 0 preserved.
    let ani = ws.path().join("ani");
    run_ok(
        bin()
            .args(["animate", "--ckpt"])
            .arg(&ckpt)
            .args(["--steps", "4", "--cfg", "2.5", "--first"])
            .arg(&first)
            .arg("--out")
            .arg(&ani),
    );
    let ani_files = frame_files(&ani);
    assert_eq!(ani_files.len(), g.frames);
    assert_eq!(
        std::fs::read(&ani_files[0]).unwrap(),
        std::fs::read(&first).unwrap()
    );

    // Expand: two prefix frames in a directory, continuation out.
    let seeds = ws.path().join("seeds");
    std::fs::create_dir_all(&seeds).unwrap();
    write_pgm(&seeds.join("frame_000.pgm"), g.high_px, g.high_px, truth.frame(0)).unwrap();
    write_pgm(&seeds.join("frame_001.pgm"), g.high_px, g.high_px, truth.frame(1)).unwrap();
    let exp = ws.path().join("exp");
    run_ok(
        bin()
            .args(["expand", "--ckpt"])
            .arg(&ckpt)
            .args(["--steps", "4", "--frames"])
            .arg(&seeds)
            .arg("--out")
            .arg(&exp),
    );
    let exp_files = frame_files(&exp);
    assert_eq!(exp_files.len(), g.frames);
    for i in 0..2 {
        assert_eq!(
            std::fs::read(&exp_files[i]).unwrap(),
            std::fs::read(seeds.join(format!("frame_{i:03}.pgm"))).unwrap(),
            "prefix frame {i} must be preserved"
        );
    }

    // Slow motion: one level turns 2 frames into 3, inputs contained.
    let slow = ws.path().join("slow");
    run_ok(
        bin()
            .args(["slowmo", "--ckpt"])
            .arg(&ckpt)
            .args(["--steps", "4", "--levels", "1", "--frames"])
            .arg(&seeds)
            .arg("--out")
            .arg(&slow),
    );
    let slow_files = frame_files(&slow);
    assert_eq!(slow_files.len(), 3);
    assert_eq!(
        std::fs::read(&slow_files[0]).unwrap(),
        std::fs::read(seeds.join("frame_000.pgm")).unwrap()
    );
    assert_eq!(
        std::fs::read(&slow_files[2]).unwrap(),
        std::fs::read(seeds.join("frame_001.pgm")).unwrap()
    );

    // Eval writes a structured report.
    let ev = ws.path().join("ev");
    let stdout = run_ok(
        bin()
            .args(["eval", "--ckpt"])
            .arg(&ckpt)
            .args(["--task", "interp", "--n", "2", "--steps", "4", "--out"])
            .arg(&ev),
    );
    assert!(stdout.contains("copy-ref"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("eval_interp_planned.json")).unwrap())
            .unwrap();
    assert!(report["model"]["psnr"]["mean"].as_f64().unwrap().is_finite());
    assert_eq!(report["n_videos"], 2);

    // Flops table prints all four deployment rows without a checkpoint.
    let stdout = run_ok(bin().args(["flops", "--config"]).arg(&cfg_path));
    for row in ["symmetric", "asym-resolution", "asym-attention", "asym-both"] {
        assert!(stdout.contains(row), "missing row {row} in:\n{stdout}");
    }

    // The output root env var reroutes relative out dirs.
    let rooted = ws.path().join("rooted");
    run_ok(
        bin()
            .env("MARVID_OUT", &rooted)
            .args(["interpolate", "--ckpt"])
            .arg(&ckpt)
            .args(["--steps", "4", "--seed", "5", "--first"])
            .arg(&first)
            .arg("--last")
            .arg(&last)
            .args(["--out", "frames"]),
    );
    assert_eq!(frame_files(&rooted.join("frames")).len(), g.frames);
}

#[test]
fn cli_rejects_missing_config_and_bad_resume() {
    let ws = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(ws.path().join("absent.toml"))
        .output()
        .unwrap();
    assert!(!out.status.success());

    // A checkpoint without config.toml beside it cannot drive inference.
    let run_dir = ws.path().join("run");
    let cfg = tiny_config(&run_dir);
    let cfg_path = ws.path().join("tiny.toml");
    cfg.save(&cfg_path).unwrap();
    run_ok(bin().args(["train", "--config"]).arg(&cfg_path));
    let ckpt = run_dir.join("ckpt_000010.mdni");
    let orphan = ws.path().join("orphan.mdni");
    std::fs::copy(&ckpt, &orphan).unwrap();
    let first = ws.path().join("f.pgm");
    write_pgm(&first, 16, 16, &vec![0.5; 256]).unwrap();
    let out = bin()
        .args(["interpolate", "--ckpt"])
        .arg(&orphan)
        .args(["--steps", "4", "--first"])
        .arg(&first)
        .arg("--last")
        .arg(&first)
        .output()
        .unwrap();
    assert!(!out.status.success());

    // Resume under a drifted config is refused without --force.
    let mut drifted = cfg.clone();
    drifted.seed = 12;
    let drifted_path = ws.path().join("drifted.toml");
    drifted.save(&drifted_path).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&drifted_path)
        .arg("--resume")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("different config"), "unexpected error text: {err}");
}
