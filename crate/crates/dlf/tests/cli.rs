mod common;

use std::path::Path;
use std::process::Command;

use common::{random_image, tiny_model};
use dlf::config::Variant;
use dlf::imageio::{read_image, write_atomic, write_image};

fn dlf(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dlf")).args(args).output().unwrap()
}

fn save_model(dir: &Path) -> std::path::PathBuf {
    let m = tiny_model(Variant::Full, 3);
    let path = dir.join("model.safetensors");
    write_atomic(&path, &m.store.to_safetensors(&m.manifest(2, 0), &[]).unwrap()).unwrap();
    path
}

#[test]
fn encode_then_decode_reproduces_the_library_result() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = save_model(dir.path());
    let input = dir.path().join("in.png");
    let img = random_image(1, 40, 30);
    write_image(&input, &img).unwrap();
    let stream = dir.path().join("x.dlf");
    let out = dlf(&["encode", input.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--out", stream.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let decoded = dir.path().join("out.ppm");
    let out = dlf(&["decode", stream.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--out", decoded.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let m = tiny_model(Variant::Full, 3);
    let expected = m.forward_quantized(&read_image(&input).unwrap(), 32).unwrap();
    let got = read_image(&decoded).unwrap();
    let to8 = |i: &dlf_core::Image| dlf::imageio::to_rgb8(i).into_raw();
    assert_eq!(to8(&got), to8(&expected));
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = save_model(dir.path());
    let c = ckpt.to_str().unwrap();
    let missing = dlf(&["decode", "/nonexistent.dlf", "--checkpoint", c, "--out", "/tmp/x.png"]);
    assert_eq!(missing.status.code(), Some(2));

    let bad = dir.path().join("bad.dlf");
    std::fs::write(&bad, b"NOPE0000000000000000000000").unwrap();
    let out = dlf(&["decode", bad.to_str().unwrap(), "--checkpoint", c, "--out", "/tmp/x.png"]);
    assert_eq!(out.status.code(), Some(3));

    let short = dir.path().join("short.dlf");
    std::fs::write(&short, b"DLF1\x01\x00").unwrap();
    let out = dlf(&["decode", short.to_str().unwrap(), "--checkpoint", c, "--out", "/tmp/x.png"]);
    assert_eq!(out.status.code(), Some(4));

    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "stage = 1\nsteps = 1\n").unwrap();
    let out = dlf(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    std::fs::write(&cfg, "stage = 0\nbogus = 1\n").unwrap();
    let out = dlf(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn train_and_eval_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "stage=0\nsteps=2\nembed_dim=16\ndetail_dim=4\nstages=1\nheads=2\ncodebook_size=64\n\
         gen_channels=8,8,8,8\nentropy_hidden=8\ndw_kernel=3\ncrop=32\nmax_images=10\nbatch=2\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = dlf(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("seed = 4"));
    let ckpt = out.join("stage0-lambda0.safetensors");
    assert!(ckpt.is_file());
    assert_eq!(std::fs::read_to_string(out.join("trace-stage0-lambda0.csv")).unwrap().lines().count(), 3);

    let o = dlf(&[
        "eval", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(),
        "--out", out.to_str().unwrap(), "--workers", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("points.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(out.join("report.md").is_file());
}
