//! End-to-end checks of the `wise-ale` binary: every subcommand, the
//! config-file merge, usage errors, and byte-identical reruns.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wise-ale"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawn");
    assert!(!out.status.success(), "command {args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn train_tiny(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap().to_string();
    let mut args = vec![
        "train",
        "--dataset",
        "sine",
        "--count",
        "96",
        "--objective",
        "aevb",
        "--batch-size",
        "8",
        "--epochs",
        "1",
        "--seed",
        "3",
        "--eval-count",
        "16",
        "--out",
        &out,
    ];
    args.extend_from_slice(extra);
    run_ok(&args);
}

#[test]
fn gen_data_writes_sine_cache_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("waves.bin");
    run_ok(&[
        "gen-data",
        "--dataset",
        "sine",
        "--count",
        "40",
        "--seed",
        "5",
        "--out",
        cache.to_str().unwrap(),
    ]);
    assert!(cache.exists());
    assert!(dir.path().join("waves.bin.meta.csv").exists());
    let ds = wise_ale::data::load_sine(&cache).unwrap();
    assert_eq!(ds.data.shape(), &[40, 256]);
}

#[test]
fn gen_data_writes_idx_digits() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "gen-data",
        "--dataset",
        "synthetic-digits",
        "--count",
        "30",
        "--seed",
        "5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let ds =
        wise_ale::data::load_mnist_idx(dir.path(), wise_ale::data::MnistSplit::Train, Some(0.5))
            .unwrap();
    assert_eq!(ds.labels.len(), 30);
}

#[test]
fn train_writes_artifacts_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), &[]);
    assert!(dir.path().join("metrics.csv").exists());
    assert!(dir.path().join("model.bin").exists());
    assert!(dir.path().join("checkpoint_epoch_000.bin").exists());
    let resolved = std::fs::read_to_string(dir.path().join("config.resolved")).unwrap();
    assert!(resolved.contains("objective=aevb"), "{resolved}");
    assert!(resolved.contains("seed=3"), "{resolved}");
}

#[test]
fn beta_vae_without_beta_names_the_missing_flag() {
    let dir = tempfile::tempdir().unwrap();
    let stderr = run_err(&[
        "train",
        "--dataset",
        "sine",
        "--count",
        "96",
        "--objective",
        "beta-vae",
        "--epochs",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(stderr.contains("--beta"), "{stderr}");
    assert!(stderr.lines().count() == 1, "one-line error expected: {stderr}");
}

#[test]
fn unknown_subcommand_lists_options() {
    let stderr = run_err(&["frobnicate"]);
    assert!(stderr.contains("train") && stderr.contains("check-kl"), "{stderr}");
}

#[test]
fn config_file_is_merged_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    let out_dir = dir.path().join("out");
    std::fs::write(
        &cfg,
        format!(
            "dataset=sine\ncount=96\nobjective=aevb\nepochs=2\nbatch-size=8\nseed=4\neval-count=16\nout={}\n",
            out_dir.display()
        ),
    )
    .unwrap();
    // --epochs 1 overrides the file's epochs=2
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    let resolved = std::fs::read_to_string(out_dir.join("config.resolved")).unwrap();
    assert!(resolved.contains("epochs=1"), "{resolved}");
    assert!(resolved.contains("seed=4"), "{resolved}");
}

#[test]
fn config_file_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "no-such-key=1\n").unwrap();
    let stderr = run_err(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(stderr.contains("no-such-key"), "{stderr}");
}

#[test]
fn eval_reports_on_held_out_rows() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), &[]);
    let out = run_ok(&[
        "eval",
        "--checkpoint",
        dir.path().join("model.bin").to_str().unwrap(),
        "--dataset",
        "sine",
        "--count",
        "96",
        "--eval-count",
        "16",
        "--seed",
        "3",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("recon_error="), "{stdout}");
    assert!(stdout.contains("n=16"), "{stdout}");
}

#[test]
fn embed_writes_svg_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let model_dir = dir.path().join("run");
    run_ok(&[
        "train",
        "--dataset",
        "synthetic-digits",
        "--count",
        "200",
        "--latent-dim",
        "2",
        "--objective",
        "wise-ale",
        "--batch-size",
        "16",
        "--epochs",
        "1",
        "--seed",
        "2",
        "--eval-count",
        "20",
        "--out",
        model_dir.to_str().unwrap(),
    ]);
    let out_dir = dir.path().join("fig");
    run_ok(&[
        "embed",
        "--checkpoint",
        model_dir.join("model.bin").to_str().unwrap(),
        "--dataset",
        "synthetic-digits",
        "--count",
        "200",
        "--n",
        "32",
        "--seed",
        "7",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out_dir.join("embed.svg").exists());
    let csv = std::fs::read_to_string(out_dir.join("embed.csv")).unwrap();
    assert_eq!(csv.lines().count(), 33);
}

#[test]
fn curves_and_recon_render_from_a_run() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), &[]);
    let svg = dir.path().join("curves.svg");
    run_ok(&[
        "curves",
        "--metrics",
        dir.path().join("metrics.csv").to_str().unwrap(),
        "--out",
        svg.to_str().unwrap(),
    ]);
    assert!(svg.exists());
    let recon = dir.path().join("recon.svg");
    run_ok(&[
        "recon",
        "--checkpoint",
        dir.path().join("model.bin").to_str().unwrap(),
        "--dataset",
        "sine",
        "--count",
        "96",
        "--seed",
        "3",
        "--indices",
        "0,5,9",
        "--out",
        recon.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&recon).unwrap();
    assert_eq!(text.matches(r#"class="panel""#).count(), 3);
}

#[test]
fn check_grad_passes_and_prints_cases() {
    let out = run_ok(&["check-grad", "--tolerance", "1e-4"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches("PASS").count(), 6, "{stdout}");
}

#[test]
fn check_kl_small_run_passes() {
    let out = run_ok(&["check-kl", "--trials", "5", "--samples", "20000", "--seed", "7"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("upper bound held in 5 of 5"), "{stdout}");
}

#[test]
fn reruns_are_byte_identical_after_wall_ms_mask() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    train_tiny(d1.path(), &[]);
    train_tiny(d2.path(), &[]);
    let m1 = std::fs::read_to_string(d1.path().join("metrics.csv")).unwrap();
    let m2 = std::fs::read_to_string(d2.path().join("metrics.csv")).unwrap();
    assert_eq!(
        wise_ale::report::mask_wall_ms(&m1),
        wise_ale::report::mask_wall_ms(&m2)
    );
    // checkpoints and resolved configs carry no timing at all
    assert_eq!(
        std::fs::read(d1.path().join("model.bin")).unwrap(),
        std::fs::read(d2.path().join("model.bin")).unwrap()
    );
    let r1 = std::fs::read_to_string(d1.path().join("config.resolved")).unwrap();
    let r2 = std::fs::read_to_string(d2.path().join("config.resolved")).unwrap();
    assert_eq!(
        r1.lines().filter(|l| !l.starts_with("out=")).collect::<Vec<_>>(),
        r2.lines().filter(|l| !l.starts_with("out=")).collect::<Vec<_>>()
    );
}
