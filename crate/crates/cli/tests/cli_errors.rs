//! Error-path behaviour of the binary: loud nonzero exits with messages on
//! bad configuration, missing files and malformed masks.

use std::process::Command;

fn run(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_bridgevq"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

#[test]
fn unknown_config_keys_fail_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nwarp_factor = 9\n").unwrap();
    let out_dir = dir.path().join("out");
    let (ok, stderr) = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(!ok);
    assert!(stderr.contains("invalid configuration"), "{stderr}");
}

#[test]
fn missing_checkpoint_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let (ok, stderr) = run(&[
        "sample",
        "--checkpoint",
        dir.path().join("nope.ckpt").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!ok);
    assert!(stderr.contains("opening"), "{stderr}");
}

#[test]
fn malformed_mask_fails_loudly() {
    // train a tiny checkpoint first
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "seed = 3\n[schedule]\nsteps = 4\n[training]\nbatch_size = 8\nstep_count = 5\ncheckpoint_every = 0\n[data]\nexport_count = 20\n",
    )
    .unwrap();
    let train_out = dir.path().join("train");
    let (ok, stderr) = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
    ]);
    assert!(ok, "{stderr}");
    let ckpt = train_out.join("checkpoint_final.ckpt");
    let (ok, stderr) = run(&[
        "inpaint",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        dir.path().join("inp").to_str().unwrap(),
        "--mask",
        "0,banana",
    ]);
    assert!(!ok);
    assert!(stderr.contains("malformed mask"), "{stderr}");

    let (ok, stderr) = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        dir.path().join("ev").to_str().unwrap(),
        "--metrics",
        "sharpness",
    ]);
    assert!(!ok);
    assert!(stderr.contains("unknown metric"), "{stderr}");
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("lock"), b"").unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "seed = 1\n").unwrap();
    let (ok, stderr) = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!ok);
    assert!(stderr.contains("locked"), "{stderr}");
}
