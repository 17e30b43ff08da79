use std::path::Path;
use std::process::{Command, Output};

use solarnet_core::data::{read_pnm, write_pnm, Image};

fn solarnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_solarnet"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn solarnet")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, name: &str, n: usize, seed: u64) {
    let out = solarnet(
        &[
            "synth",
            "--out",
            name,
            "--n",
            &n.to_string(),
            "--seed",
            &seed.to_string(),
        ],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

fn train_tiny(dir: &Path, data: &str, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--preset", "tiny", "--data", data, "--out", out];
    args.extend_from_slice(extra);
    solarnet(&args, dir)
}

#[test]
fn synth_writes_pairs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "a", 10, 4);
    synth(tmp.path(), "b", 10, 4);
    let a = tmp.path().join("a");
    assert_eq!(std::fs::read_dir(a.join("images")).unwrap().count(), 10);
    assert_eq!(std::fs::read_dir(a.join("masks")).unwrap().count(), 10);
    let manifest = std::fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert!(manifest.starts_with("stem,label,positive_pixel_fraction\n"));
    assert_eq!(manifest.lines().count(), 11);
    for sub in [
        "manifest.csv",
        "images/synth_00003.ppm",
        "masks/synth_00007.pgm",
    ] {
        assert_eq!(
            std::fs::read(a.join(sub)).unwrap(),
            std::fs::read(tmp.path().join("b").join(sub)).unwrap(),
            "{sub}"
        );
    }
}

#[test]
fn synth_zero_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = solarnet(&["synth", "--out", "c", "--n", "0"], tmp.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn train_writes_run_directory_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "corpus", 6, 1);
    for run in ["r1", "r2"] {
        let out = train_tiny(tmp.path(), "corpus", run, &[]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let r1 = tmp.path().join("r1");
    for f in [
        "resolved_config.txt",
        "metrics.csv",
        "eval.csv",
        "split.csv",
        "checkpoints/final.emsg",
    ] {
        assert!(r1.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read(r1.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(b"iter,loss_total,loss_cls,loss_seg,lr\n"));
    assert_eq!(
        metrics,
        std::fs::read(tmp.path().join("r2/metrics.csv")).unwrap()
    );

    // the echoed config reproduces the run bit for bit
    let out = solarnet(
        &["train", "--config", "r1/resolved_config.txt", "--out", "r3"],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        metrics,
        std::fs::read(tmp.path().join("r3/metrics.csv")).unwrap()
    );
}

#[test]
fn train_errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train_tiny(tmp.path(), "missing", "r", &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing"), "{}", stderr(&out));

    std::fs::write(
        tmp.path().join("bad.cfg"),
        "learning_rate = 1e-3\nwidgets = 4\n",
    )
    .unwrap();
    synth(tmp.path(), "corpus", 4, 2);
    let out = solarnet(
        &[
            "train", "--config", "bad.cfg", "--data", "corpus", "--out", "r",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("widgets"));

    let out = train_tiny(tmp.path(), "corpus", "r", &["--set", "lambda=3"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unet_trains_baseline_path() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "corpus", 4, 3);
    let out = train_tiny(
        tmp.path(),
        "corpus",
        "u",
        &["--model", "unet", "--iterations", "4"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("trained unet"));
    let cfg = std::fs::read_to_string(tmp.path().join("u/resolved_config.txt")).unwrap();
    assert!(cfg.contains("model = unet"));
}

#[test]
fn eval_appends_rows_and_rejects_corrupt_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "corpus", 5, 5);
    assert_eq!(code(&train_tiny(tmp.path(), "corpus", "run", &[])), 0);
    let ckpt = "run/checkpoints/final.emsg";
    for _ in 0..2 {
        let out = solarnet(
            &[
                "eval",
                "--checkpoint",
                ckpt,
                "--data",
                "corpus",
                "--tile",
                "32",
            ],
            tmp.path(),
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let row = stdout(&out).lines().nth(1).unwrap().to_string();
        let miou: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&miou));
    }
    let results = std::fs::read_to_string(tmp.path().join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 3);
    assert_eq!(
        results.lines().next(),
        Some("model,dataset,miou,pixel_acc,images,pixels")
    );

    let mut bytes = std::fs::read(tmp.path().join(ckpt)).unwrap();
    bytes[0] = b'X';
    std::fs::write(tmp.path().join("bad.emsg"), bytes).unwrap();
    let out = solarnet(
        &["eval", "--checkpoint", "bad.emsg", "--data", "corpus"],
        tmp.path(),
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn predict_stitches_large_rasters() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "corpus", 4, 6);
    assert_eq!(
        code(&train_tiny(
            tmp.path(),
            "corpus",
            "run",
            &["--iterations", "2"]
        )),
        0
    );
    let ckpt = "run/checkpoints/final.emsg";
    for (w, h) in [(512, 512), (1536, 1024)] {
        let data = (0..w * h * 3).map(|i| ((i * 37) % 256) as u8).collect();
        let img = Image::new(w, h, 3, data).unwrap();
        let name = format!("scene_{w}x{h}.ppm");
        write_pnm(&img, &tmp.path().join(&name)).unwrap();
        let out = solarnet(
            &[
                "predict",
                "--checkpoint",
                ckpt,
                "--image",
                &name,
                "--out",
                "pred",
            ],
            tmp.path(),
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(stdout(&out).contains("positive fraction"));
        let mask = read_pnm(&tmp.path().join(format!("pred/scene_{w}x{h}_mask.pgm"))).unwrap();
        assert_eq!((mask.width, mask.height, mask.channels), (w, h, 1));
        assert!(mask.data.iter().all(|&v| v == 0 || v == 255));
        let overlay =
            read_pnm(&tmp.path().join(format!("pred/scene_{w}x{h}_overlay.ppm"))).unwrap();
        assert_eq!((overlay.width, overlay.height, overlay.channels), (w, h, 3));
    }
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let out = solarnet(&["gradcheck", "--preset", "tiny"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let report = stdout(&out);
    for op in [
        "conv2d",
        "softmax_rows",
        "batchnorm2d",
        "em_oracle_32x8_k4_t5",
    ] {
        assert!(report.contains(op), "{op} missing from report");
    }

    let out = solarnet(&["gradcheck", "--inject-fault", "conv2d"], tmp.path());
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("conv2d"));

    let out = solarnet(&["gradcheck", "--inject-fault", "frobnicate"], tmp.path());
    assert_eq!(code(&out), 2);
}
