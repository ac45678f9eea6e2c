use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cvqn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvqn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn cvqn")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = cvqn(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], dir: &Path) -> String {
    let out = cvqn(args, dir);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

#[test]
fn check_bound_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["check-bound", "--r", "0.25,0.5,0.25", "--q", "3,5,7", "--Q", "5"], dir.path());
    assert!(out.contains("grouped bits/symbol: 2.2590"));
    assert!(out.ends_with("2.2590 < 2.3219: satisfied\n"));
    let out = ok(&["check-bound", "--r", "1", "--q", "5", "--Q", "5"], dir.path());
    assert!(out.ends_with("equal: not satisfied\n"));
    let out = ok(&["check-bound", "--r", "0.25,0.5,0.25", "--q", "2,5,8", "--Q", "5"], dir.path());
    assert!(out.ends_with("2.1610 < 2.3219: satisfied\n"), "{out}");
    let err = fails(&["check-bound", "--r", "0.5,0.4", "--q", "3,5", "--Q", "5"], dir.path());
    assert!(err.starts_with("error:"));
}

#[test]
fn grad_check_exit_codes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok(&["grad-check", "--module", "rcab", "--seed", "4"], dir.path());
    assert!(a.contains("PASS"));
    assert_eq!(a, ok(&["grad-check", "--module", "rcab", "--seed", "4"], dir.path()));
    let out = cvqn(&["grad-check", "--module", "corrupted_backward"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    fails(&["grad-check", "--module", "nothing"], dir.path());
}

#[test]
fn pipeline_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["synth-data", "--out", "data", "--count", "3", "--size", "32", "--seed", "5"], d);
    let cfg = ok(&["init-config", "--toy"], d).replace("epochs=20", "epochs=2");
    fs::write(d.join("toy.cfg"), cfg).unwrap();
    ok(&["train", "--config", "toy.cfg", "--data", "data", "--out", "m.ckpt", "--log", "log.csv"], d);
    let log = fs::read_to_string(d.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,loss,dis,ent_bits,gmm_nll,ms_ssim,est_bpp\n"));

    let report = ok(&["compress", "--ckpt", "m.ckpt", "--in", "data/img000.ppm", "--out", "a.cvqn"], d);
    assert!(report.contains("group 2: q=7 channels=2"));
    assert!(report.contains("bpp="));
    ok(&["decompress", "--ckpt", "m.ckpt", "--in", "a.cvqn", "--out", "a.ppm"], d);
    ok(&["decompress", "--ckpt", "m.ckpt", "--in", "a.cvqn", "--out", "b.ppm"], d);
    let a = fs::read(d.join("a.ppm")).unwrap();
    assert!(a.starts_with(b"P6\n32 32\n255\n"));
    assert_eq!(a, fs::read(d.join("b.ppm")).unwrap());

    let bytes = fs::read(d.join("a.cvqn")).unwrap();
    fs::write(d.join("cut.cvqn"), &bytes[..bytes.len() - 2]).unwrap();
    let err = fails(&["decompress", "--ckpt", "m.ckpt", "--in", "cut.cvqn", "--out", "cut.ppm"], d);
    assert!(err.contains("corrupt stream"), "{err}");
    assert!(!d.join("cut.ppm").exists());

    ok(&["analyze-channels", "--ckpt", "m.ckpt", "--data", "data", "--out", "ch1.csv"], d);
    ok(&["analyze-channels", "--ckpt", "m.ckpt", "--data", "data", "--out", "ch2.csv"], d);
    let ch = fs::read_to_string(d.join("ch1.csv")).unwrap();
    assert_eq!(ch.lines().count(), 9);
    assert!(ch.starts_with("channel,psnr_loss_db,msssim_loss_db\n"));
    assert_eq!(ch, fs::read_to_string(d.join("ch2.csv")).unwrap());
}

#[test]
fn bad_inputs_fail_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fails(&["compress", "--ckpt", "missing.ckpt", "--in", "x.ppm", "--out", "y"], d);
    fs::write(d.join("bad.cfg"), "latent_channels = 8\nwhat = 1\n").unwrap();
    fs::create_dir(d.join("data")).unwrap();
    let err = fails(&["train", "--config", "bad.cfg", "--data", "data", "--out", "m"], d);
    assert!(err.contains("what"), "{err}");
}
