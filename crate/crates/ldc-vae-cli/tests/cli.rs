//! End-to-end tests of the command-line binary: artifact layout, exit codes,
//! determinism under fixed seeds, and output file grammar.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ldc_vae::config::TrainConfig;
use ldc_vae::trainer::TrainReport;
use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ldc-vae"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn binary");
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    bin().args(args).output().expect("spawn binary").status.code().expect("exit code")
}

/// Trains a small synthetic run in `dir` and returns its path as a string.
fn train_tiny(dir: &Path, seed: &str, epochs: &str, extra: &[&str]) -> String {
    let out_dir = dir.to_str().expect("utf8 path").to_string();
    let mut args = vec![
        "train",
        "--dataset",
        "gaussian_grid",
        "--synth_train",
        "60",
        "--synth_test",
        "40",
        "--batch_size",
        "20",
        "--epochs",
        epochs,
        "--latent_dim",
        "2",
        "--enc_x_hidden",
        "8",
        "--enc_noise_hidden",
        "4",
        "--enc_merge_hidden",
        "8",
        "--dec_hidden",
        "8",
        "--sampler_hidden",
        "8",
        "--seed",
        seed,
        "--out_dir",
        &out_dir,
    ];
    args.extend_from_slice(extra);
    run_ok(&args);
    out_dir
}

fn mnist_dir() -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    path.canonicalize().expect("mnist data directory").to_str().expect("utf8 path").to_string()
}

fn read_csv(path: &Path) -> (String, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).expect("read csv");
    let mut lines = text.lines();
    let header = lines.next().expect("csv header").to_string();
    let rows = lines
        .map(|l| l.split(',').map(|c| c.parse::<f64>().expect("numeric cell")).collect())
        .collect();
    (header, rows)
}

/// Parses a binary PGM, asserting the exact P5 header grammar.
fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).expect("read pgm");
    let header_end =
        bytes.iter().enumerate().filter(|(_, b)| **b == b'\n').nth(2).expect("3 header lines").0
            + 1;
    let header = std::str::from_utf8(&bytes[..header_end]).expect("utf8 header");
    let mut lines = header.lines();
    assert_eq!(lines.next(), Some("P5"));
    let dims: Vec<usize> = lines
        .next()
        .expect("dimension line")
        .split(' ')
        .map(|t| t.parse().expect("dimension"))
        .collect();
    assert_eq!(dims.len(), 2);
    assert_eq!(lines.next(), Some("255"));
    let (w, h) = (dims[0], dims[1]);
    let pixels = bytes[header_end..].to_vec();
    assert_eq!(pixels.len(), w * h, "payload must be exactly width x height bytes");
    (w, h, pixels)
}

#[test]
fn train_writes_artifacts_and_repeats_bit_identically() {
    let tmp = tempdir().unwrap();
    let a = train_tiny(&tmp.path().join("a"), "11", "2", &[]);
    let b = train_tiny(&tmp.path().join("b"), "11", "2", &[]);

    for dir in [&a, &b] {
        let dir = Path::new(dir);
        assert!(dir.join("config.txt").is_file());
        assert!(dir.join("model.ckpt").is_file());
        assert!(dir.join("report.csv").is_file());
    }
    // Reports agree except for wall-clock timings; weights agree exactly.
    let ra = TrainReport::load(&Path::new(&a).join("report.csv")).unwrap();
    let rb = TrainReport::load(&Path::new(&b).join("report.csv")).unwrap();
    assert_eq!(ra.without_wall_time().to_csv(), rb.without_wall_time().to_csv());
    assert_eq!(
        fs::read(Path::new(&a).join("model.ckpt")).unwrap(),
        fs::read(Path::new(&b).join("model.ckpt")).unwrap()
    );
    // 60 samples in batches of 20 over 2 epochs is 6 iteration rows, plus
    // the untrained evaluation and one evaluation per epoch.
    assert_eq!(ra.records.len(), 6 + 3);
}

#[test]
fn train_accepts_config_file_with_flag_overrides() {
    let tmp = tempdir().unwrap();
    let cfg_path = tmp.path().join("base.cfg");
    let mut cfg = TrainConfig::default();
    cfg.set("dataset", "two_moons").unwrap();
    cfg.set("synth_train", "60").unwrap();
    cfg.set("synth_test", "40").unwrap();
    cfg.set("batch_size", "20").unwrap();
    cfg.set("epochs", "1").unwrap();
    cfg.set("enc_x_hidden", "8").unwrap();
    cfg.set("enc_noise_hidden", "4").unwrap();
    cfg.set("enc_merge_hidden", "8").unwrap();
    cfg.set("dec_hidden", "8").unwrap();
    cfg.set("sampler_hidden", "8").unwrap();
    cfg.save(&cfg_path).unwrap();

    let out_dir = tmp.path().join("run");
    run_ok(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--epochs",
        "2",
        "--out_dir",
        out_dir.to_str().unwrap(),
    ]);
    // The flag override wins over the file value.
    let saved = TrainConfig::from_file(&out_dir.join("config.txt")).unwrap();
    assert_eq!(saved.epochs, 2);
    assert_eq!(saved.synth_train, 60);
}

#[test]
fn usage_problems_exit_2() {
    assert_eq!(exit_code(&["train", "--no_such_flag", "1"]), 2);
    assert_eq!(exit_code(&["train", "--batch_size", "nope"]), 2);
    assert_eq!(exit_code(&["no-such-command"]), 2);
    assert_eq!(exit_code(&["sample", "--run_dir", "/no/such/run"]), 2);
    let tmp = tempdir().unwrap();
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "batch_size = what\n").unwrap();
    assert_eq!(exit_code(&["train", "--config", bad.to_str().unwrap()]), 2);
}

#[test]
fn numeric_divergence_exits_3() {
    let tmp = tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let code = exit_code(&[
        "train",
        "--mode",
        "baseline",
        "--dataset",
        "gaussian_grid",
        "--synth_train",
        "60",
        "--synth_test",
        "40",
        "--batch_size",
        "20",
        "--epochs",
        "1",
        "--latent_dim",
        "2",
        "--vae_hidden",
        "8",
        "--dec_hidden",
        "8",
        "--lr_encoder",
        "1e8",
        "--lr_decoder",
        "1e8",
        "--out_dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
}

#[test]
fn zero_epochs_writes_header_only_report() {
    let tmp = tempdir().unwrap();
    let dir = train_tiny(tmp.path(), "7", "0", &[]);
    let report = fs::read_to_string(Path::new(&dir).join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1, "only the header, no records");
    assert!(Path::new(&dir).join("model.ckpt").is_file(), "initial weights still saved");
}

#[test]
fn sample_is_seed_deterministic() {
    let tmp = tempdir().unwrap();
    let dir = train_tiny(tmp.path(), "7", "2", &[]);
    let out_a = tmp.path().join("sa");
    let out_b = tmp.path().join("sb");
    let out_c = tmp.path().join("sc");
    for (out, seed) in [(&out_a, "5"), (&out_b, "5"), (&out_c, "6")] {
        run_ok(&[
            "sample",
            "--run_dir",
            &dir,
            "--count",
            "10",
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    let a = fs::read_to_string(out_a.join("latents.csv")).unwrap();
    let b = fs::read_to_string(out_b.join("latents.csv")).unwrap();
    let c = fs::read_to_string(out_c.join("latents.csv")).unwrap();
    assert_eq!(a, b, "same seed, same latents");
    assert_ne!(a, c, "different seed, different latents");

    let (header, rows) = read_csv(&out_a.join("latents.csv"));
    assert_eq!(header, "index,z0,z1");
    assert_eq!(rows.len(), 10);
    let (header, rows) = read_csv(&out_a.join("samples.csv"));
    assert_eq!(header, "index,v0,v1");
    assert_eq!(rows.len(), 10);
}

#[test]
fn interpolate_blends_are_exact_endpoint_mixes() {
    let tmp = tempdir().unwrap();
    let dir = train_tiny(tmp.path(), "7", "2", &[]);
    run_ok(&["interpolate", "--run_dir", &dir, "--pairs", "2", "--steps", "4"]);
    let (header, rows) = read_csv(&Path::new(&dir).join("interpolate.csv"));
    assert_eq!(header, "pair,step,weight,z0,z1");
    assert_eq!(rows.len(), 2 * 4);

    for p in 0..2 {
        let path: Vec<&Vec<f64>> = rows.iter().filter(|r| r[0] == p as f64).collect();
        assert_eq!(path.len(), 4);
        let za = &path[0][3..];
        let zb = &path[3][3..];
        for (k, row) in path.iter().enumerate() {
            assert_eq!(row[1], k as f64);
            let w = k as f64 / 3.0;
            assert_eq!(row[2], w, "weights are k / (steps - 1)");
            for j in 0..2 {
                assert_eq!(row[3 + j], (1.0 - w) * za[j] + w * zb[j]);
            }
        }
    }
}

#[test]
fn eval_reproduces_the_final_report_row() {
    let tmp = tempdir().unwrap();
    let dir = train_tiny(tmp.path(), "7", "2", &[]);
    run_ok(&["eval", "--run_dir", &dir]);

    let report = TrainReport::load(&Path::new(&dir).join("report.csv")).unwrap();
    let &(epoch, mmd2, test_mse) = report.epoch_metrics().last().unwrap();
    assert_eq!(epoch, 2);
    let (header, rows) = read_csv(&Path::new(&dir).join("metrics.csv"));
    assert_eq!(header, "test_mse,mmd2,mmd_bandwidth,n");
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], test_mse);
    assert_eq!(rows[0][1], mmd2);
    assert_eq!(rows[0][3], 40.0);

    // Both latent clouds appear in the scatter, labeled by source.
    let pca = fs::read_to_string(Path::new(&dir).join("pca.csv")).unwrap();
    let mut lines = pca.lines();
    assert_eq!(lines.next(), Some("cloud,pc1,pc2"));
    let (mut enc, mut cmp) = (0, 0);
    for line in lines {
        match line.split(',').next().unwrap() {
            "encoder" => enc += 1,
            "comparison" => cmp += 1,
            other => panic!("unexpected cloud label {other}"),
        }
    }
    assert_eq!((enc, cmp), (40, 40));
}

#[test]
fn baseline_mode_supports_generation_commands() {
    let tmp = tempdir().unwrap();
    let dir =
        train_tiny(tmp.path(), "7", "1", &["--mode", "baseline", "--vae_hidden", "8"]);
    run_ok(&["sample", "--run_dir", &dir, "--count", "6"]);
    run_ok(&["reconstruct", "--run_dir", &dir, "--count", "4"]);
    run_ok(&["eval", "--run_dir", &dir]);
    let (_, rows) = read_csv(&Path::new(&dir).join("reconstruct.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[1].is_finite()));
}

#[test]
fn mnist_run_emits_valid_pgm_grids() {
    let tmp = tempdir().unwrap();
    let data = mnist_dir();
    let out_dir = tmp.path().join("run");
    let dir = out_dir.to_str().unwrap();
    run_ok(&[
        "train",
        "--dataset",
        "mnist",
        "--data_dir",
        &data,
        "--train_limit",
        "64",
        "--test_limit",
        "32",
        "--batch_size",
        "32",
        "--epochs",
        "1",
        "--latent_dim",
        "4",
        "--enc_x_hidden",
        "16",
        "--enc_noise_hidden",
        "8",
        "--enc_merge_hidden",
        "16",
        "--dec_hidden",
        "16",
        "--sampler_hidden",
        "16",
        "--out_dir",
        dir,
    ]);

    // 5 tiles pack into a 2x3 grid of 28x28 images with 1-pixel separators.
    run_ok(&["sample", "--run_dir", dir, "--count", "5"]);
    let (w, h, pixels) = read_pgm(&out_dir.join("samples.pgm"));
    assert_eq!((w, h), (3 * 28 + 2, 2 * 28 + 1));
    assert_eq!(pixels[28], 128, "separator column renders mid-gray");

    // 3 reconstructions sit in a 3x2 grid: original left, decoded right.
    run_ok(&["reconstruct", "--run_dir", dir, "--count", "3"]);
    let (w, h, _) = read_pgm(&out_dir.join("reconstruct.pgm"));
    assert_eq!((w, h), (2 * 28 + 1, 3 * 28 + 2));

    // 2 pairs over 3 steps: originals flank the 3-step path, 5 columns.
    run_ok(&["interpolate", "--run_dir", dir, "--pairs", "2", "--steps", "3"]);
    let (w, h, _) = read_pgm(&out_dir.join("interpolate.pgm"));
    assert_eq!((w, h), (5 * 28 + 4, 2 * 28 + 1));
}

#[test]
fn svgd_demo_dumps_full_trajectories() {
    let tmp = tempdir().unwrap();
    let out = tmp.path().join("traj.csv");
    let args = [
        "svgd-demo",
        "--target",
        "mixture",
        "--n",
        "7",
        "--steps",
        "5",
        "--step_size",
        "0.2",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ];
    run_ok(&args);
    let (header, rows) = read_csv(&out);
    assert_eq!(header, "step,particle,z");
    // Initial positions plus one row per particle per step.
    assert_eq!(rows.len(), 7 * 6);
    assert!(rows.iter().take(7).all(|r| r[0] == 0.0));
    assert!(rows.iter().all(|r| r[2].is_finite()));

    let first = fs::read_to_string(&out).unwrap();
    run_ok(&args);
    assert_eq!(first, fs::read_to_string(&out).unwrap(), "same seed, same trajectory");

    // Zero steps still dumps the initial cloud.
    run_ok(&["svgd-demo", "--steps", "0", "--n", "4", "--out", out.to_str().unwrap()]);
    let (_, rows) = read_csv(&out);
    assert_eq!(rows.len(), 4);
}

#[test]
fn train_help_lists_every_config_key() {
    let out = run_ok(&["train", "--help"]);
    let help = String::from_utf8(out.stdout).unwrap();
    for key in TrainConfig::KEYS {
        assert!(help.contains(&format!("--{key}")), "--{key} missing from help");
    }
}
