use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
synthetic.image_size=16
synthetic.images_per_class=10
synthetic.n_source_classes=4
synthetic.n_target_coarse=4
model.stem_channels=4
model.stage_channels=4,8
model.blocks_per_stage=1,1
model.ftm_sites=1
stage1.epochs=2
stage1.batch_size=8
stage2.epochs=2
stage2.batch_size=8
";

fn ftm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = ftm(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_reports_every_primitive() {
    let out = ok(&["gradcheck", "--dtype", "f64", "--trials", "2"]);
    for name in ["conv2d", "batch_norm", "relu", "gap", "linear", "softmax_ce", "channel_affine", "network"] {
        assert!(out.lines().any(|l| l.starts_with(name) && l.ends_with("ok")), "{name} missing in\n{out}");
    }
}

#[test]
fn usage_errors_exit_two() {
    let o = ftm(&["sweep", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(ftm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ftm(&["gradcheck", "--dtype", "f16"]).status.code(), Some(2));
}

#[test]
fn contract_failures_exit_one_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = ftm(&["adapt", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: missing setting `checkpoint`"));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "stage1.learning_rate=0.1\n").unwrap();
    let o = ftm(&["train-source", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage1.learning_rate"));
}

#[test]
fn full_pipeline_and_reproduction() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("small.cfg");
    fs::write(&cfg, format!("{SMALL}mosaic.size=64\n")).unwrap();
    let c = s(&cfg);

    let data = root.join("data");
    ok(&["gen-data", "--data", "synthetic", "--config", c, "--seed", "4", "--out", s(&data)]);
    assert!(data.join("target/taxonomy.txt").is_file());
    assert!(data.join("mosaic.png").is_file());

    let src = root.join("src");
    fs::write(&cfg, SMALL).unwrap();
    ok(&["train-source", "--config", c, "--seed", "4", "--out", s(&src)]);
    let ckpt = src.join("source.ftmc");

    // rerunning from the resolved config reproduces every output byte
    let again = root.join("src_again");
    ok(&["train-source", "--config", s(&src.join("resolved_config.txt")), "--out", s(&again)]);
    for f in ["source.ftmc", "history.csv", "resolved_config.txt"] {
        assert_eq!(fs::read(src.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    for cmd in ["adapt", "finetune"] {
        let out = root.join(cmd);
        let text = ok(&[cmd, "--config", c, "--seed", "4", "--checkpoint", s(&ckpt), "--shots", "3", "--out", s(&out)]);
        assert!(text.contains("test accuracy"));
        let csv = fs::read_to_string(out.join("confusion.csv")).unwrap();
        assert!(csv.starts_with("truth,coarse0_sub0,coarse0_sub1,coarse1_sub0,"));
        assert_eq!(csv.lines().count(), 1 + 8 + 3);
        assert!(csv.contains("macro_f1,"));
    }
    let adapted = root.join("adapt/adapted.ftmc");

    let ev = root.join("eval");
    let text = ok(&["eval", "--config", c, "--seed", "4", "--checkpoint", s(&ckpt), "--domain", "source", "--out", s(&ev)]);
    assert!(text.starts_with("test accuracy"));
    let o = ftm(&["eval", "--config", c, "--seed", "4", "--checkpoint", s(&ckpt), "--out", s(&ev)]);
    assert_eq!(o.status.code(), Some(1));

    let sw = root.join("sweep");
    ok(&["sweep", "--config", c, "--seed", "4", "--checkpoint", s(&ckpt), "--shots", "1,2", "--trials", "2", "--out", s(&sw)]);
    let csv = fs::read_to_string(sw.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "shots,method,mean_acc,std_acc");
    assert_eq!(lines.len(), 5);
    assert_eq!(fs::read_to_string(sw.join("sweep_trials.csv")).unwrap().lines().count(), 9);
    let sw2 = root.join("sweep2");
    ok(&["sweep", "--config", s(&sw.join("resolved_config.txt")), "--out", s(&sw2)]);
    for f in ["sweep.csv", "sweep_trials.csv"] {
        assert_eq!(fs::read(sw.join(f)).unwrap(), fs::read(sw2.join(f)).unwrap(), "{f}");
    }

    let mp = root.join("map");
    let text = ok(&[
        "map",
        "--checkpoint",
        s(&adapted),
        "--image",
        s(&data.join("mosaic.png")),
        "--taxonomy",
        s(&data.join("target/taxonomy.txt")),
        "--truth",
        s(&data.join("mosaic_truth.png")),
        "--patch",
        "16",
        "--superpixels",
        "8",
        "--out",
        s(&mp),
    ]);
    assert!(text.contains("average F1"));
    let f1 = fs::read_to_string(mp.join("f1.csv")).unwrap();
    assert!(f1.starts_with("class,f1\n"));
    assert!(f1.lines().last().unwrap().starts_with("average,"));
    let map = image::open(mp.join("map.png")).unwrap();
    assert_eq!((map.width(), map.height()), (64, 64));
    assert!(fs::read_to_string(mp.join("votes.txt")).unwrap().starts_with("superpixel,"));
}

#[test]
fn trains_from_an_exported_folder() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(&cfg, format!("{SMALL}mosaic.size=32\n")).unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);

    let folder_cfg = dir.path().join("folder.cfg");
    let model_lines: String = SMALL.lines().filter(|l| l.starts_with("model.") || l.starts_with("stage1.")).map(|l| format!("{l}\n")).collect();
    fs::write(&folder_cfg, format!("{model_lines}model.image_size=16\n")).unwrap();
    let out = dir.path().join("out");
    ok(&["train-source", "--config", s(&folder_cfg), "--data", s(&data.join("source")), "--out", s(&out)]);
    let resolved = fs::read_to_string(out.join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("model.num_classes=4\n"));
    assert!(resolved.contains("data.taxonomy="));
}
