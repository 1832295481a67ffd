//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ftm_core::data::{synth_domain_pair, synth_mosaic, LabeledDataset, Split, SyntheticShiftConfig};
use ftm_core::mapping::{map_image, score_map, MapConfig};
use ftm_core::network::{build_model, load_checkpoint, save_checkpoint, write_checkpoint, ModelState, NetworkConfig, Partition};
use ftm_core::tensor::Tensor;
use ftm_core::training::{
    adapt_ftm, evaluate, lr_at, prepare_target_model, run_shot_sweep, sample_shots, train_source, Optimizer, StageConfig,
    SweepConfig,
};
use ftm_core::verify::{run_gradcheck, NETWORK_TOLERANCE, PRIMITIVE_TOLERANCE};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

struct Desk {
    source: LabeledDataset,
    target: LabeledDataset,
    model: ModelState,
    trained_in: Duration,
}

fn desk() -> Result<Desk, String> {
    let t = Instant::now();
    let (source, target) = synth_domain_pair(&SyntheticShiftConfig::desk()).map_err(e)?;
    let init = build_model(&NetworkConfig::desk(), 0).map_err(e)?;
    let (model, _) = train_source(&init, &source, &StageConfig::source_desk()).map_err(e)?;
    Ok(Desk {
        source,
        target,
        model,
        trained_in: t.elapsed(),
    })
}

fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let report = run_gradcheck(20, 0).map_err(e)?;
    let secs = t.elapsed().as_secs_f64();
    let worst_prim = report.lines.iter().filter(|l| l.name != "network").map(|l| l.max_rel_error).fold(0.0, f64::max);
    let net = report.lines.iter().find(|l| l.name == "network").ok_or("no network line")?;
    check(report.lines.len() == 8 && report.lines.iter().all(|l| l.trials >= 20), "expected 7 primitives and the network over >= 20 trials")?;
    check(worst_prim < PRIMITIVE_TOLERANCE, format!("primitive rel err {worst_prim:.2e}"))?;
    check(net.max_rel_error < NETWORK_TOLERANCE, format!("network rel err {:.2e}", net.max_rel_error))?;
    check(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "worst primitive {worst_prim:.2e} (< 1e-5), network {:.2e} (< 1e-4), {} kink probes skipped, {secs:.1}s",
        net.max_rel_error, net.skipped
    ))
}

fn ftm_identity() -> Outcome {
    let with = build_model::<f32>(&NetworkConfig::desk(), 0).map_err(e)?;
    let without = build_model::<f32>(&NetworkConfig { ftm_sites: vec![], ..NetworkConfig::desk() }, 0).map_err(e)?;
    let x = Tensor::uniform(&[100, 3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let a = with.logits(&x).map_err(e)?;
    let b = without.logits(&x).map_err(e)?;
    let diff = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(0f32, f32::max);
    check(diff <= 1e-6, format!("max |dlogit| {diff:e}"))?;
    Ok(format!("max |dlogit| {diff:e} over 100 inputs (<= 1e-6)"))
}

fn frozen_backbone(d: &Desk) -> Outcome {
    let episode = sample_shots(&d.target, 3, 11).map_err(e)?;
    let start = prepare_target_model(&d.model, d.target.num_classes(), 12).map_err(e)?;
    let cfg = StageConfig { epochs: 10, ..StageConfig::ftm() };
    let (adapted, _) = adapt_ftm(&start, &episode, &[], &cfg).map_err(e)?;
    check(
        adapted.checksum(Partition::Backbone) == start.checksum(Partition::Backbone),
        "backbone checksum moved",
    )?;
    let changed: BTreeSet<String> = start
        .params()
        .iter()
        .filter(|(n, t)| adapted.params()[*n] != **t)
        .map(|(n, _)| n.clone())
        .collect();
    let expected: BTreeSet<String> = ["head.bias", "head.weight", "stage2.ftm.beta", "stage2.ftm.gamma"].map(String::from).into();
    check(changed == expected, format!("changed params {changed:?}"))?;
    let (b0, b1) = (start.buffers(), adapted.buffers());
    let moved = b0.iter().filter(|(n, t)| b1[*n] != **t).count();
    check(moved == b0.len(), format!("{moved} of {} BN buffers moved", b0.len()))?;
    Ok(format!(
        "backbone sha256 {}.. unchanged; changed = FTM gamma/beta + head + all {} BN buffers",
        &start.checksum(Partition::Backbone)[..12],
        b0.len()
    ))
}

fn parsimony() -> Outcome {
    let r34 = NetworkConfig {
        stem_channels: 64,
        stage_channels: vec![64, 128, 256, 512],
        blocks_per_stage: vec![3, 4, 6, 3],
        num_classes: 45,
        ftm_sites: vec![3],
        image_size: 224,
        ..NetworkConfig::desk()
    };
    let m = build_model::<f32>(&r34, 0).map_err(e)?;
    let added = m.partition_count(Partition::Ftm);
    let total = m.param_count();
    let ratio = added as f64 / total as f64;
    check(added == 2 * 512, format!("FTM adds {added}"))?;
    check(ratio < 1e-4, format!("ratio {ratio:e}"))?;
    let desk = build_model::<f32>(&NetworkConfig::desk(), 0).map_err(e)?;
    check(desk.partition_count(Partition::Ftm) == 2 * 64, "desk FTM census")?;
    Ok(format!("ResNet-34 shape: {added} of {total} ({:.4}%, < 0.01%)", 100.0 * ratio))
}

fn desk_protocol(d: &Desk) -> Outcome {
    let t = Instant::now();
    let src_test = d.source.split(Split::Test);
    let source_acc = evaluate(&d.model, &src_test, &d.source.fine_classes).map_err(e)?.scores().map_err(e)?.accuracy;
    let cfg = SweepConfig {
        shots: vec![3, 5, 10],
        trials: 5,
        ftm: StageConfig::ftm_desk(),
        finetune: StageConfig::finetune_desk(),
        seed: 0,
    };
    let report = run_shot_sweep(&d.model, &d.target, &cfg).map_err(e)?;
    let secs = (t.elapsed() + d.trained_in).as_secs_f64();
    let frozen = report.frozen_accuracy.ok_or("no frozen accuracy")?;
    let mean = |k: usize, m: &str| report.row(k, m).map(|r| r.mean).unwrap_or(f64::NAN);
    let table: Vec<String> = cfg
        .shots
        .iter()
        .map(|&k| format!("K={k} FT {:.3} FTM {:.3}", mean(k, "FT"), mean(k, "FTM")))
        .collect();
    let detail = format!("source {source_acc:.3}, frozen {frozen:.3}; {}; {secs:.0}s", table.join(", "));
    let fail = |why: &str| Err(format!("{why}: {detail}"));
    if frozen > source_acc - 0.10 {
        return fail("no domain gap");
    }
    if let Some(&k) = cfg.shots.iter().find(|&&k| mean(k, "FTM") <= frozen) {
        return fail(&format!("FTM does not beat frozen at K={k}"));
    }
    for m in ["FT", "FTM"] {
        if cfg.shots.windows(2).any(|w| mean(w[1], m) < mean(w[0], m)) {
            return fail(&format!("{m} mean decreases with shots"));
        }
    }
    let rows_ok = report.rows.len() == 6 && report.rows.iter().all(|r| r.accuracies.len() == 5);
    let csv_ok = report.to_csv().lines().count() == 7 && report.trials_csv().lines().count() == 31;
    if !(rows_ok && csv_ok) {
        return fail("sweep CSV shape");
    }
    if secs >= 600.0 {
        return fail("over 10 minutes");
    }
    let lead = cfg.shots.iter().filter(|&&k| mean(k, "FTM") > mean(k, "FT")).count();
    Ok(format!("{detail}; FTM ahead of FT at {lead}/3 shot counts (reported only)"))
}

fn stage_defaults() -> Outcome {
    let (ft, ftm) = (StageConfig::finetune(), StageConfig::ftm());
    check(
        (ft.batch_size, ft.epochs, ft.base_lr, ft.lr_step, ft.lr_decay, ft.optimizer) == (64, 50, 0.001, 15, 0.1, Optimizer::Adam),
        format!("FT {ft:?}"),
    )?;
    check(
        ftm.base_lr == 0.003 && StageConfig { base_lr: 0.001, trainable: ft.trainable.clone(), ..ftm.clone() } == ft,
        format!("FTM {ftm:?}"),
    )?;
    check(lr_at(14, &ftm) == 0.003 && lr_at(15, &ftm) == 3e-4, format!("lr_at(15) = {}", lr_at(15, &ftm)))?;
    Ok("FT(64, 50, 1e-3, step 15, x0.1, Adam), FTM lr 3e-3 otherwise equal; lr_at(15) = 3e-4 exactly".into())
}

fn mapping(d: &Desk) -> Outcome {
    let t = Instant::now();
    let cfg = SyntheticShiftConfig::desk();
    let mosaic = synth_mosaic(&cfg, 512).map_err(e)?;
    let episode = sample_shots(&d.target, MAP_SHOTS, 21).map_err(e)?;
    let start = prepare_target_model(&d.model, d.target.num_classes(), 22).map_err(e)?;
    let (adapted, _) = adapt_ftm(&start, &episode, &[], &StageConfig::ftm_desk()).map_err(e)?;
    let mc = MapConfig {
        superpixels: 100,
        patch_size: 32,
        ..MapConfig::default()
    };
    let r = map_image(&adapted, &mosaic.image, &d.target.taxonomy, &mc).map_err(e)?;
    let sc = score_map(&r.map, &mosaic.truth, 32).map_err(e)?;
    let secs = t.elapsed().as_secs_f64();

    let seg = &r.segmentation;
    let sizes = seg.sizes();
    let partition = seg.labels.len() == 512 * 512 && sizes.iter().all(|&s| s > 0) && sizes.iter().sum::<usize>() == 512 * 512;
    check(partition, "superpixels do not partition the image")?;
    let present: Vec<f64> = sc.per_class_f1.iter().flatten().copied().collect();
    let avg = present.iter().sum::<f64>() / present.len() as f64;
    check(sc.per_class_f1.len() == 5 && present.len() < 5, "absent class was not excluded")?;
    check((avg - sc.average_f1).abs() < 1e-12, "average is not over present classes")?;
    let detail = format!("average F1 {:.3} over {} classes, {} superpixels, {secs:.0}s", sc.average_f1, present.len(), seg.k_actual);
    check(sc.average_f1 >= 0.90, format!("below 0.90: {detail}"))?;
    check(secs < 180.0, format!("too slow: {detail}"))?;
    Ok(detail)
}

const MAP_SHOTS: usize = 10;

const TINY_CFG: &str = "\
synthetic.image_size=16
synthetic.images_per_class=12
synthetic.n_source_classes=4
synthetic.n_target_coarse=4
model.stem_channels=4
model.stage_channels=4,8
model.blocks_per_stage=1,1
model.ftm_sites=1
stage1.epochs=2
stage1.batch_size=8
stage2.epochs=3
stage2.batch_size=8
";

fn run_cli(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_ftm")).args(args).output().map_err(e)?;
    check(o.status.success(), format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for n in names {
        let (x, y) = (fs::read(a.join(n)).map_err(e)?, fs::read(b.join(n)).map_err(e)?);
        check(x == y, format!("{n} differs between runs"))?;
    }
    Ok(())
}

fn determinism(d: &Desk) -> Outcome {
    let net = NetworkConfig {
        stem_channels: 4,
        stage_channels: vec![4, 8],
        blocks_per_stage: vec![1, 1],
        num_classes: 8,
        ftm_sites: vec![1],
        ..NetworkConfig::desk()
    };
    let cfg = StageConfig { epochs: 2, ..StageConfig::source_desk() };
    let train = || -> Result<Vec<u8>, String> {
        let m = build_model(&net, 7).map_err(e)?;
        let (m, _) = train_source(&m, &d.source, &cfg).map_err(e)?;
        Ok(write_checkpoint(&m))
    };
    check(train()? == train()?, "checkpoints differ between identical runs")?;

    let dir = tempfile::tempdir().map_err(e)?;
    let path = dir.path().join("m.ftmc");
    save_checkpoint(&d.model, &path).map_err(e)?;
    let back = load_checkpoint(&path).map_err(e)?;
    let x = Tensor::uniform(&[8, 3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let (a, b) = (d.model.logits(&x).map_err(e)?, back.logits(&x).map_err(e)?);
    check(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()), "logits differ after reload")?;

    let root = dir.path();
    let cfg_path = root.join("tiny.cfg");
    fs::write(&cfg_path, TINY_CFG).map_err(e)?;
    let p = |q: &Path| q.to_str().unwrap().to_string();
    let (c, r1, r2) = (p(&cfg_path), root.join("run1"), root.join("run2"));
    run_cli(&["train-source", "--config", &c, "--seed", "3", "--out", &p(&r1.join("src"))])?;
    run_cli(&["train-source", "--config", &p(&r1.join("src/resolved_config.txt")), "--out", &p(&r2.join("src"))])?;
    same_files(&r1.join("src"), &r2.join("src"), &["source.ftmc", "history.csv", "resolved_config.txt"])?;
    let ckpt = p(&r1.join("src/source.ftmc"));
    for (cmd, files) in [
        ("adapt", &["adapted.ftmc", "history.csv", "confusion.csv"][..]),
        ("sweep", &["sweep.csv", "sweep_trials.csv"][..]),
    ] {
        let (o1, o2) = (r1.join(cmd), r2.join(cmd));
        let mut args = vec![cmd, "--config", &c, "--seed", "3", "--checkpoint", &ckpt];
        if cmd == "sweep" {
            args.extend(["--shots", "1,2", "--trials", "2"]);
        }
        let o1s = p(&o1);
        args.extend(["--out", &o1s]);
        run_cli(&args)?;
        run_cli(&[cmd, "--config", &p(&o1.join("resolved_config.txt")), "--out", &p(&o2)])?;
        same_files(&o1, &o2, files)?;
    }
    Ok("checkpoints bit-identical across runs, reload logits bit-identical, CLI outputs byte-identical from resolved config".into())
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient oracle", gradient_oracle()),
        ("2 FTM identity at init", ftm_identity()),
        ("4 parameter parsimony", parsimony()),
        ("6 stage-2 defaults", stage_defaults()),
    ];
    match desk() {
        Ok(d) => {
            results.push(("3 frozen backbone", frozen_backbone(&d)));
            results.push(("5 desk cross-domain protocol", desk_protocol(&d)));
            results.push(("7 mapping pipeline", mapping(&d)));
            results.push(("8 determinism and round trips", determinism(&d)));
        }
        Err(err) => {
            for name in ["3 frozen backbone", "5 desk cross-domain protocol", "7 mapping pipeline", "8 determinism and round trips"] {
                results.push((name, Err(format!("source training failed: {err}"))));
            }
        }
    }
    results.sort_by_key(|(n, _)| n.split(' ').next().and_then(|k| k.parse::<u32>().ok()));
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(msg) => println!("PASS criterion {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg}");
            }
        }
    }
    println!("acceptance: {} of {} passed in {:.0}s", results.len() - failed, results.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
