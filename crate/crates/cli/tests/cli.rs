use std::path::Path;
use std::process::{Command, Output};

fn xdr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdr"))
        .args(args)
        .env_remove("XDR_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, extra_source: bool) -> std::path::PathBuf {
    let mut sources = vec![
        serde_json::json!({"dataset": "A", "n": 300}),
        serde_json::json!({"dataset": "B", "n": 300}),
    ];
    if extra_source {
        sources.push(serde_json::json!({"dataset": "C", "n": 300}));
    }
    let phantom = |family: &str, seed: u64| {
        serde_json::json!({"kind": "phantom", "target_shape": [32, 32],
            "phantom": {"family": family, "count": 10, "seed": seed}})
    };
    let mut ds = Vec::new();
    for (id, fam, seed) in [
        ("A", "ellipses", 1),
        ("B", "rectangles", 2),
        ("C", "rectangles", 2),
    ] {
        let mut d = phantom(fam, seed);
        d["id"] = id.into();
        ds.push(d);
    }
    let cfg = serde_json::json!({
        "datasets": ds,
        "cascade": {"n_cascades": 1, "n_conv_per_block": 2, "n_filters": 4},
        "train": {"epochs": 1},
        "eval": {"train_domains": ["A"], "test_domains": ["A", "B"], "report_slices": 1},
        "patch_stats": {"targets": [{"dataset": "A", "n": 50}], "sources": sources, "patch_size": 5},
        "global_seed": 3
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn mask_command_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.cimg");
    let b = dir.path().join("b.cimg");
    for f in [&a, &b] {
        let o = xdr(&[
            "mask",
            "--height",
            "256",
            "--width",
            "256",
            "--accel",
            "4",
            "--seed",
            "7",
            "--out",
            p(f),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let m = xdr_core::kspace::container::read_mask(&a).unwrap();
    assert_eq!(m.sampled_columns().len(), 64);
}

#[test]
fn invalid_mask_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.cimg");
    let o = xdr(&[
        "mask",
        "--height",
        "64",
        "--width",
        "64",
        "--accel",
        "0.5",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("acceleration"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn synth_converts_and_reports_skips() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    std::fs::create_dir(&input).unwrap();
    for i in 0..3u8 {
        let img = image::GrayImage::from_fn(40, 30, |x, y| {
            image::Luma([(x as u8).wrapping_mul(5) ^ (y as u8) ^ i])
        });
        img.save(input.join(format!("img{i}.png"))).unwrap();
    }
    std::fs::write(input.join("broken.png"), b"not a png").unwrap();
    let out = dir.path().join("out");
    let args = [
        "synth",
        "--input",
        p(&input),
        "--out",
        p(&out),
        "--height",
        "32",
        "--width",
        "32",
    ];
    let o = xdr(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let cimgs: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "cimg")
        })
        .collect();
    assert_eq!(cimgs.len(), 3);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("load_report.json")).unwrap()).unwrap();
    assert_eq!(report["scanned"], 4);
    assert_eq!(report["skipped"].as_array().unwrap().len(), 1);
    let first = std::fs::read(out.join("img0.cimg")).unwrap();
    assert!(xdr(&args).status.success());
    assert_eq!(std::fs::read(out.join("img0.cimg")).unwrap(), first);
}

#[test]
fn synth_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = xdr(&[
        "synth",
        "--input",
        p(dir.path()),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn unknown_config_keys_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"global_seed": 1, "learning_rate": 0.1}"#).unwrap();
    let o = xdr(&["--config", p(&cfg), "--output-dir", p(dir.path()), "xdomain"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"));
}

#[test]
fn missing_checkpoint_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), false);
    let missing = dir.path().join("nope.ckpt");
    let o = xdr(&[
        "--config",
        p(&cfg),
        "--output-dir",
        p(dir.path()),
        "eval",
        "--checkpoint",
        p(&missing),
        "--dataset",
        "A",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.ckpt"));
}

#[test]
fn report_without_results_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = xdr(&["--output-dir", p(dir.path()), "report"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nothing to report"));
}

#[test]
fn train_eval_recon_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), false);
    let root = dir.path().join("out");
    let base = ["--config", p(&cfg), "--output-dir", p(&root)];

    let o = xdr(&[&base[..], &["train", "--dataset", "A", "--epochs", "1"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = root.join("train/A/best.ckpt");
    assert!(ckpt.is_file());

    let o = xdr(&[&base[..], &["eval", "--checkpoint", p(&ckpt), "--dataset", "B"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(root.join("eval/table.csv")).unwrap();
    assert!(table.starts_with("train_domain,B_psnr_mean"));
    assert!(table.lines().nth(1).unwrap().starts_with("A,"));

    let slice = dir.path().join("slice.cimg");
    let img = xdr_core::data::phantom_slice(
        &xdr_core::data::DatasetSpec::phantom("A", xdr_core::data::PhantomFamily::Ellipses, 10, 1, [32, 32]),
        9,
    )
    .unwrap();
    xdr_core::kspace::container::write_complex(&slice, &img.image).unwrap();
    let mask = dir.path().join("mask.cimg");
    assert!(
        xdr(&["mask", "--height", "32", "--width", "32", "--out", p(&mask)])
            .status
            .success()
    );
    let o = xdr(&[
        &base[..],
        &[
            "recon",
            "--checkpoint",
            p(&ckpt),
            "--input",
            p(&slice),
            "--mask",
            p(&mask),
        ],
    ]
    .concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root.join("recon/slice.cimg").is_file());

    let o = xdr(&[&base[..], &["xdomain"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(root.join("xdomain/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    let o = xdr(&[&base[..], &["report"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("report/manifest.json")).unwrap()).unwrap();
    let artifacts = manifest["artifacts"].as_array().unwrap();
    // Three images per slice, for model A and the baseline, on both test sets.
    let pngs = artifacts
        .iter()
        .filter(|a| a["path"].as_str().unwrap().ends_with(".png"))
        .count();
    assert_eq!(pngs, 3 * 2 * 2);
    for a in artifacts {
        assert!(root.join("report").join(a["path"].as_str().unwrap()).is_file());
    }
}

#[test]
fn manifest_lists_every_written_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), false);
    let root = dir.path().join("out");
    let o = xdr(&["--config", p(&cfg), "--output-dir", p(&root), "xdomain"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let xd = root.join("xdomain");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(xd.join("manifest.json")).unwrap()).unwrap();
    let mut listed: Vec<String> = manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["path"].as_str().unwrap().to_string())
        .collect();
    listed.sort();
    let mut on_disk = Vec::new();
    let mut stack = vec![xd.clone()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "manifest.json" {
                on_disk.push(path.strip_prefix(&xd).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    on_disk.sort();
    assert_eq!(listed, on_disk);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn patchdist_identical_sources_give_identical_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), true);
    let root = dir.path().join("out");
    let o = xdr(&[
        "--config",
        p(&cfg),
        "--output-dir",
        p(&root),
        "patchdist",
        "--block-size",
        "64",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(root.join("patchdist/table.csv")).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = table.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(
        header[..7],
        ["target", "A_mean", "A_std", "B_mean", "B_std", "C_mean", "C_std"]
    );
    assert_eq!(&row[1..3], &["-", "-"]);
    assert_eq!(row[3], row[5]);
    assert_eq!(row[4], row[6]);
    assert!(root.join("patchdist/patches/source_C.cimg").is_file());
}
