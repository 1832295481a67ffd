use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use ftm_core::data::{
    export_folder_dataset, load_folder_dataset, load_image, read_taxonomy_file, save_image, synth_domain_pair, synth_mosaic,
    LabeledDataset, Split, SyntheticShiftConfig, Taxonomy,
};
use ftm_core::mapping::{decode_map, default_palette, map_image, save_map_png, score_map, LandCoverMap, MapConfig};
use ftm_core::network::{build_model, load_checkpoint, save_checkpoint, ModelState, NetworkConfig};
use ftm_core::training::{
    adapt_ftm, evaluate, finetune_baseline, prepare_target_model, run_shot_sweep, sample_shots, StageConfig,
    SweepConfig,
};
use ftm_core::verify::run_gradcheck;

use crate::config::{ensure_dir, write_file, Flags, Settings};
use crate::Common;

#[derive(Clone, Copy)]
pub enum Method {
    Ftm,
    Finetune,
}

enum DataSpec {
    Synthetic(SyntheticShiftConfig),
    Folder { root: PathBuf, taxonomy: Option<PathBuf> },
}

impl DataSpec {
    fn resolve(s: &mut Settings, seed: u64) -> Result<Self> {
        let data: String = s.get("data", "synthetic".to_string())?;
        if data == "synthetic" {
            let base = SyntheticShiftConfig {
                seed,
                ..SyntheticShiftConfig::desk()
            };
            let cfg = base.overlay_kv(&s.input_section("synthetic"))?;
            s.record("synthetic", &cfg.to_kv());
            return Ok(Self::Synthetic(cfg));
        }
        let root = PathBuf::from(&data);
        if !root.is_dir() {
            bail!("dataset folder {} does not exist", root.display());
        }
        let default_tax = root.join("taxonomy.txt");
        let taxonomy = match s.optional("data.taxonomy") {
            Some(p) => Some(PathBuf::from(p)),
            None if default_tax.is_file() => {
                s.resolved.set("data.taxonomy", default_tax.display());
                Some(default_tax)
            }
            None => None,
        };
        Ok(Self::Folder { root, taxonomy })
    }

    /// `target` picks the shifted domain of the synthetic pair.
    fn load(&self, target: bool, image_size: usize) -> Result<LabeledDataset> {
        match self {
            Self::Synthetic(cfg) => {
                if cfg.image_size != image_size {
                    bail!("synthetic images are {0}x{0} but the model expects {1}x{1}", cfg.image_size, image_size);
                }
                let (source, shifted) = synth_domain_pair(cfg)?;
                Ok(if target { shifted } else { source })
            }
            Self::Folder { root, taxonomy } => Ok(load_folder_dataset(root, taxonomy.as_deref(), Some(image_size))?),
        }
    }

    fn is_synthetic(&self) -> bool {
        matches!(self, Self::Synthetic(_))
    }
}

fn stage(s: &mut Settings, prefix: &str, shared: Option<&str>, base: StageConfig) -> Result<StageConfig> {
    let mut cfg = base;
    if let Some(sh) = shared {
        cfg = cfg.overlay_kv(&s.input_section(sh))?;
    }
    cfg = cfg.overlay_kv(&s.input_section(prefix))?;
    s.record(prefix, &cfg.to_kv());
    Ok(cfg)
}

fn stage2(s: &mut Settings, data: &DataSpec, method: Method, seed: u64) -> Result<StageConfig> {
    let desk = matches!(data, DataSpec::Synthetic(_));
    let (prefix, base) = match (method, desk) {
        (Method::Ftm, true) => ("stage2.ftm", StageConfig::ftm_desk()),
        (Method::Ftm, false) => ("stage2.ftm", StageConfig::ftm()),
        (Method::Finetune, true) => ("stage2.finetune", StageConfig::finetune_desk()),
        (Method::Finetune, false) => ("stage2.finetune", StageConfig::finetune()),
    };
    stage(s, prefix, Some("stage2"), StageConfig { seed, ..base })
}

fn checkpoint(s: &mut Settings) -> Result<ModelState> {
    let p = s.require("checkpoint")?;
    load_checkpoint(&p).with_context(|| format!("loading checkpoint {p}"))
}

fn check_head(model: &ModelState, ds: &LabeledDataset) -> Result<()> {
    let k = model.config().num_classes;
    if k != ds.num_classes() {
        bail!("checkpoint head has {k} outputs but the dataset has {} classes", ds.num_classes());
    }
    Ok(())
}

fn accuracy_line(cm: &ftm_core::metrics::ConfusionMatrix) -> Result<String> {
    let sc = cm.scores()?;
    Ok(format!("test accuracy {:.4}  macro F1 {:.4}", sc.accuracy, sc.macro_f1))
}

pub fn gen_data(common: &Common, flags: Flags) -> Result<bool> {
    let mut s = Settings::load(common, flags)?;
    let seed = s.get("seed", 0u64)?;
    let DataSpec::Synthetic(cfg) = DataSpec::resolve(&mut s, seed)? else {
        bail!("gen-data only generates `--data synthetic`");
    };
    let size: usize = s.get("mosaic.size", 512)?;
    s.check_unknown()?;

    let out = &common.out;
    ensure_dir(out)?;
    let (source, target) = synth_domain_pair(&cfg)?;
    export_folder_dataset(&source, out.join("source"))?;
    export_folder_dataset(&target, out.join("target"))?;
    let mosaic = synth_mosaic(&cfg, size)?;
    save_image(&mosaic.image, out.join("mosaic.png"))?;
    let truth = LandCoverMap {
        labels: mosaic.truth,
        height: mosaic.height,
        width: mosaic.width,
        classes: mosaic.coarse_classes.clone(),
        winners: Vec::new(),
        tallies: Vec::new(),
    };
    save_map_png(&truth, &default_palette(mosaic.coarse_classes.len()), out.join("mosaic_truth.png"))?;
    s.write(out)?;
    println!(
        "wrote {} source and {} target images, {size}x{size} mosaic to {}",
        source.items.len(),
        target.items.len(),
        out.display()
    );
    Ok(true)
}

pub fn train_source(common: &Common, flags: Flags) -> Result<bool> {
    let mut s = Settings::load(common, flags)?;
    let seed = s.get("seed", 0u64)?;
    let data = DataSpec::resolve(&mut s, seed)?;
    let mut model_kv = NetworkConfig::desk().to_kv();
    if let DataSpec::Synthetic(c) = &data {
        model_kv.set("image_size", c.image_size);
        model_kv.set("num_classes", c.n_source_classes);
    }
    model_kv.overlay(&s.input_section("model"));
    let size: usize = model_kv.require("image_size")?;
    let ds = data.load(false, size)?;
    if !data.is_synthetic() && !s.input_section("model").contains("num_classes") {
        model_kv.set("num_classes", ds.num_classes());
    }
    let net = NetworkConfig::from_kv(&model_kv)?;
    s.record("model", &net.to_kv());
    let init_seed = s.get("model.init_seed", seed)?;
    let base = if data.is_synthetic() { StageConfig::source_desk() } else { StageConfig::source() };
    let cfg = stage(&mut s, "stage1", None, StageConfig { seed, ..base })?;
    s.check_unknown()?;

    let model = build_model(&net, init_seed)?;
    let (trained, history) = ftm_core::training::train_source(&model, &ds, &cfg)?;
    let out = &common.out;
    ensure_dir(out)?;
    write_file(out, "history.csv", history.to_csv())?;
    save_checkpoint(&trained, out.join("source.ftmc"))?;
    s.write(out)?;
    let sel = history.selected_epoch.and_then(|e| history.rows.get(e));
    if let Some(r) = sel {
        let acc = r.val_acc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        println!("selected epoch {} (val accuracy {acc})", r.epoch);
    }
    Ok(true)
}

pub fn adapt(common: &Common, flags: Flags, method: Method) -> Result<bool> {
    let mut s = Settings::load(common, flags)?;
    let seed = s.get("seed", 0u64)?;
    let data = DataSpec::resolve(&mut s, seed)?;
    let source = checkpoint(&mut s)?;
    let shots: usize = s.get("adapt.shots", 5)?;
    let episode_seed = s.get("adapt.episode_seed", seed)?;
    let head_seed = s.get("adapt.head_seed", seed.wrapping_add(1))?;
    let cfg = stage2(&mut s, &data, method, seed)?;
    s.check_unknown()?;

    let target = data.load(true, source.config().image_size)?;
    let episode = sample_shots(&target, shots, episode_seed)?;
    let start = prepare_target_model(&source, target.num_classes(), head_seed)?;
    let monitor = target.split(Split::Val);
    let (model, history) = match method {
        Method::Ftm => adapt_ftm(&start, &episode, &monitor, &cfg)?,
        Method::Finetune => finetune_baseline(&start, &episode, &monitor, &cfg)?,
    };
    let cm = evaluate(&model, &target.split(Split::Test), &target.fine_classes)?;
    let out = &common.out;
    ensure_dir(out)?;
    let name = match method {
        Method::Ftm => "adapted.ftmc",
        Method::Finetune => "finetuned.ftmc",
    };
    save_checkpoint(&model, out.join(name))?;
    write_file(out, "history.csv", history.to_csv())?;
    write_file(out, "confusion.csv", cm.to_csv()?)?;
    s.write(out)?;
    println!("{}", accuracy_line(&cm)?);
    Ok(true)
}

pub fn eval(common: &Common, flags: Flags) -> Result<bool> {
    let mut s = Settings::load(common, flags)?;
    let seed = s.get("seed", 0u64)?;
    let data = DataSpec::resolve(&mut s, seed)?;
    let model = checkpoint(&mut s)?;
    let target = if data.is_synthetic() {
        match s.get("eval.domain", "target".to_string())?.as_str() {
            "target" => true,
            "source" => false,
            other => bail!("eval.domain must be source or target, got `{other}`"),
        }
    } else {
        true
    };
    s.check_unknown()?;

    let ds = data.load(target, model.config().image_size)?;
    check_head(&model, &ds)?;
    let cm = evaluate(&model, &ds.split(Split::Test), &ds.fine_classes)?;
    write_file(&common.out, "confusion.csv", cm.to_csv()?)?;
    s.write(&common.out)?;
    println!("{}", accuracy_line(&cm)?);
    Ok(true)
}

pub fn sweep(common: &Common, flags: Flags) -> Result<bool> {
    let mut s = Settings::load(common, flags)?;
    let seed = s.get("seed", 0u64)?;
    let data = DataSpec::resolve(&mut s, seed)?;
    let source = checkpoint(&mut s)?;
    let d = SweepConfig::default();
    let shots = s.get_list("sweep.shots", d.shots)?;
    let trials = s.get("sweep.trials", d.trials)?;
    let sweep_seed = s.get("sweep.seed", seed)?;
    let ftm = stage2(&mut s, &data, Method::Ftm, seed)?;
    let finetune = stage2(&mut s, &data, Method::Finetune, seed)?;
    s.check_unknown()?;

    let target = data.load(true, source.config().image_size)?;
    let cfg = SweepConfig {
        shots,
        trials,
        ftm,
        finetune,
        seed: sweep_seed,
    };
    let report = run_shot_sweep(&source, &target, &cfg)?;
    let out = &common.out;
    ensure_dir(out)?;
    write_file(out, "sweep.csv", report.to_csv())?;
    write_file(out, "sweep_trials.csv", report.trials_csv())?;
    s.write(out)?;
    if let Some(f) = report.frozen_accuracy {
        println!("frozen source model: {f:.4}");
    }
    print!("{}", report.to_csv());
    Ok(true)
}

fn read_taxonomy(path: Option<&str>, fine_count: usize) -> Result<Taxonomy> {
    match path {
        Some(p) => {
            let pairs = read_taxonomy_file(p)?;
            let fine: Vec<String> = pairs.keys().cloned().collect();
            Ok(Taxonomy::from_pairs(&fine, &pairs)?)
        }
        None => {
            let names: Vec<String> = (0..fine_count).map(|i| format!("class{i}")).collect();
            Ok(Taxonomy::identity(&names))
        }
    }
}

pub fn map(common: &Common, flags: Flags) -> Result<bool> {
    let mut s = Settings::load(common, flags)?;
    let model = checkpoint(&mut s)?;
    let image_path = s.require("image")?;
    let taxonomy_path = s.optional("taxonomy");
    let truth_path = s.optional("truth");
    let cfg = MapConfig::default().overlay_kv(&s.input_section("map"))?;
    s.record("map", &cfg.to_kv());
    s.check_unknown()?;

    let image = load_image(&image_path)?;
    let taxonomy = read_taxonomy(taxonomy_path.as_deref(), model.config().num_classes)?;
    let result = map_image(&model, &image, &taxonomy, &cfg)?;
    let palette = default_palette(taxonomy.num_coarse());
    let out = &common.out;
    ensure_dir(out)?;
    save_map_png(&result.map, &palette, out.join("map.png"))?;
    write_file(out, "votes.txt", result.map.vote_audit())?;
    println!("{} patches, {} superpixels", result.grid.len(), result.segmentation.k_actual);
    if let Some(t) = truth_path {
        let truth_img = image::open(&t).with_context(|| format!("reading {t}"))?.to_rgb8();
        let truth = decode_map(&truth_img, &palette)?;
        let scores = score_map(&result.map, &truth, cfg.patch_size)?;
        write_file(out, "f1.csv", scores.to_csv())?;
        println!("average F1 {:.4}", scores.average_f1);
    }
    s.write(out)?;
    Ok(true)
}

pub fn gradcheck(trials: usize, seed: u64) -> Result<bool> {
    let report = run_gradcheck(trials, seed)?;
    print!("{}", report.to_text());
    Ok(report.passed())
}
