//! End-to-end tests of the `zipcount` binary: exit codes, file outputs and
//! reproducibility of the deterministic commands.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use zipcount::blockgrid::AnnotationSet;

fn zipcount(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zipcount"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_annotations(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let scenes = [
        ("img_a", vec![[5.0, 5.0], [20.0, 9.0], [20.5, 9.5]]),
        ("img_b", vec![[100.0, 70.0]]),
        ("img_c", vec![]),
    ];
    for (name, points) in scenes {
        let ann = AnnotationSet {
            image_h: 96,
            image_w: 128,
            points,
        };
        ann.to_json_file(&dir.join(format!("{name}.json"))).unwrap();
    }
}

#[test]
fn gt_map_stats_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let ann_dir = dir.path().join("ann");
    write_annotations(&ann_dir);

    let maps = dir.path().join("maps");
    let out = zipcount(&[
        "gt-map",
        "--ann-dir",
        ann_dir.to_str().unwrap(),
        "--out",
        maps.to_str().unwrap(),
        "--block",
        "16",
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("files_ok=3"), "{text}");
    assert!(text.contains("total=3"), "{text}");
    assert!(maps.join("img_a.bcm").exists());
    assert!(maps.join("manifest.json").exists());
    assert!(maps.join("report.json").exists());

    // Identical inputs reproduce identical map bytes.
    let maps2 = dir.path().join("maps2");
    let out2 = zipcount(&[
        "gt-map",
        "--ann-dir",
        ann_dir.to_str().unwrap(),
        "--out",
        maps2.to_str().unwrap(),
        "--block",
        "16",
    ]);
    assert!(out2.status.success());
    for name in ["img_a.bcm", "img_b.bcm", "img_c.bcm"] {
        assert_eq!(
            fs::read(maps.join(name)).unwrap(),
            fs::read(maps2.join(name)).unwrap(),
            "{name} differs between runs"
        );
    }

    let out = zipcount(&[
        "stats",
        "--map-dir",
        maps.to_str().unwrap(),
        "--block",
        "16",
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    // 3 images of 6x8 blocks, 4 of 144 blocks positive.
    assert!(text.contains("grid=6x8 blocks=144"), "{text}");
    assert!(text.contains("zero_blocks=141"), "{text}");
    assert!(text.contains("count_2=1"), "{text}");
    assert!(text.contains("bin_0=141"), "{text}");

    let pred = dir.path().join("pred.csv");
    fs::write(&pred, "image_id,count\nimg_a,4\nimg_b,1\nimg_c,0\n").unwrap();
    let out = zipcount(&[
        "eval",
        "--pred",
        pred.to_str().unwrap(),
        "--ann-dir",
        ann_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("images=3"), "{text}");
    assert!(text.contains("positive_images=2"), "{text}");
    // MAE = (1 + 0 + 0) / 3; NAE = mean(1/3, 0).
    assert!(text.contains("mae=0.3333333333333333"), "{text}");
    assert!(text.contains("nae=0.16666666666666666"), "{text}");
}

#[test]
fn gt_map_failures() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = zipcount(&[
        "gt-map",
        "--ann-dir",
        empty.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("no annotations found"),
        "{out:?}"
    );

    // One good file, one with an out-of-bounds point: partial failure.
    let ann_dir = dir.path().join("ann");
    fs::create_dir_all(&ann_dir).unwrap();
    AnnotationSet {
        image_h: 64,
        image_w: 64,
        points: vec![[1.0, 1.0]],
    }
    .to_json_file(&ann_dir.join("good.json"))
    .unwrap();
    AnnotationSet {
        image_h: 64,
        image_w: 64,
        points: vec![[1.0, 1.0], [200.0, 5.0]],
    }
    .to_json_file(&ann_dir.join("bad.json"))
    .unwrap();
    let maps = dir.path().join("maps");
    let out = zipcount(&[
        "gt-map",
        "--ann-dir",
        ann_dir.to_str().unwrap(),
        "--out",
        maps.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("files_ok=1"), "{text}");
    assert!(text.contains("files_failed=1"), "{text}");
    // The failure names the file and the offending point index.
    assert!(text.contains("bad.json"), "{text}");
    assert!(text.contains("point 1"), "{text}");
    assert!(maps.join("good.bcm").exists());
    assert!(!maps.join("bad.bcm").exists());
}

#[test]
fn stats_groups_mixed_grid_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let ann_dir = dir.path().join("ann");
    fs::create_dir_all(&ann_dir).unwrap();
    for (name, h, w) in [("small", 64, 64), ("large", 128, 96)] {
        AnnotationSet {
            image_h: h,
            image_w: w,
            points: vec![[1.0, 1.0]],
        }
        .to_json_file(&ann_dir.join(format!("{name}.json")))
        .unwrap();
    }
    let maps = dir.path().join("maps");
    let out = zipcount(&[
        "gt-map",
        "--ann-dir",
        ann_dir.to_str().unwrap(),
        "--out",
        maps.to_str().unwrap(),
        "--block",
        "16",
    ]);
    assert!(out.status.success(), "{out:?}");
    let out = zipcount(&["stats", "--map-dir", maps.to_str().unwrap()]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("grid=4x4 files=1"), "{text}");
    assert!(text.contains("grid=8x6 files=1"), "{text}");
}

#[test]
fn grad_check_exit_codes() {
    let out = zipcount(&["grad-check", "--trials", "5", "--seed", "3"]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("passed=true"));

    let out = zipcount(&["grad-check", "--trials", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trials must be ≥ 1"));
}

#[test]
fn usage_errors_exit_2() {
    let out = zipcount(&["gt-map", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = zipcount(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_demo_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{
            "seed": 9,
            "steps": 30,
            "warmup_steps": 5,
            "train_scenes": 4,
            "test_scenes": 2,
            "image_size": 128,
            "mean_heads": 15.0
        }"#,
    )
    .unwrap();

    let run = |out_dir: &Path| {
        let out = zipcount(&[
            "train-demo",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{out:?}");
        stdout(&out)
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let text_a = run(&out_a);
    let text_b = run(&out_b);
    assert!(text_a.contains("disentanglement_auc="), "{text_a}");

    // Same seed and config: identical loss curves and checkpoints, byte for byte.
    assert_eq!(
        fs::read(out_a.join("loss_curve.csv")).unwrap(),
        fs::read(out_b.join("loss_curve.csv")).unwrap()
    );
    assert_eq!(
        fs::read(out_a.join("checkpoint.zcp")).unwrap(),
        fs::read(out_b.join("checkpoint.zcp")).unwrap()
    );
    // The key=value metric lines agree too (manifests differ by wall time).
    let metrics = |t: &str| {
        t.lines()
            .filter(|l| !l.starts_with("manifest_") && !l.contains('/'))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(metrics(&text_a), metrics(&text_b));

    // The emitted corpus feeds the rest of the pipeline.
    let corpus = out_a.join("corpus");
    let out = zipcount(&["stats", "--map-dir", corpus.to_str().unwrap()]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("grid=8x8"), "{}", stdout(&out));
}

#[test]
fn train_demo_zero_lr_flat_curve() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    // Single train scene and batch 1 keep every batch identical.
    fs::write(
        &config,
        r#"{
            "seed": 4,
            "lr": 0.0,
            "steps": 12,
            "batch_size": 1,
            "train_scenes": 1,
            "test_scenes": 1,
            "image_size": 128,
            "mean_heads": 15.0
        }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = zipcount(&[
        "train-demo",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let csv = fs::read_to_string(out_dir.join("loss_curve.csv")).unwrap();
    let totals: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap())
        .collect();
    assert_eq!(totals.len(), 12);
    assert!(
        totals.iter().all(|t| t == &totals[0]),
        "curve not flat: {csv}"
    );
}
