//! Residual CNN with optional FTM slots.
//!
//! Topology: 3×3 stem conv → BN → ReLU, then one stage per entry of
//! `stage_channels`, each a stack of basic residual blocks
//! (conv-BN-ReLU-conv-BN, shortcut add, ReLU), then global average pooling
//! and a linear head. The first block of every stage after the first halves
//! the resolution; a 1×1 conv + BN projection shortcut is used whenever the
//! block changes resolution or channel count.
//!
//! An FTM slot for stage `s` sits after the second BN of the last block of
//! that stage and is applied before the shortcut addition.

mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autograd::{softmax_rows, BnState, Mode, Tape, Var, BN_EPSILON, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::ftm::{ftm_apply, FtmParams};
use crate::kv::KvMap;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub num_classes: usize,
    pub input_channels: usize,
    pub ftm_sites: Vec<usize>,
    pub image_size: usize,
    /// Per-channel input standardization, applied before the stem.
    pub input_mean: Vec<f32>,
    pub input_std: Vec<f32>,
    pub bn_momentum: f32,
    pub bn_epsilon: f32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkConfig {
    /// Small three-stage network for 32×32 inputs.
    pub fn desk() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            num_classes: 8,
            input_channels: 3,
            ftm_sites: vec![2],
            image_size: 32,
            input_mean: vec![0.0; 3],
            input_std: vec![1.0; 3],
            bn_momentum: BN_MOMENTUM as f32,
            bn_epsilon: BN_EPSILON as f32,
        }
    }

    /// ResNet-34 stage layout with one FTM slot in the last stage.
    pub fn resnet34(num_classes: usize) -> Self {
        Self {
            stem_channels: 64,
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: vec![3, 4, 6, 3],
            num_classes,
            ftm_sites: vec![3],
            image_size: 224,
            ..Self::desk()
        }
    }

    pub fn without_ftm(&self) -> Self {
        Self {
            ftm_sites: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.blocks_per_stage.len() {
            return bad(format!(
                "need matching non-empty stage lists, got {} channel entries and {} block entries",
                self.stage_channels.len(),
                self.blocks_per_stage.len()
            ));
        }
        let extents = [self.stem_channels, self.num_classes, self.input_channels, self.image_size];
        if extents.contains(&0) || self.stage_channels.contains(&0) || self.blocks_per_stage.contains(&0) {
            return bad("all extents must be at least 1".into());
        }
        let mut seen = BTreeSet::new();
        for &s in &self.ftm_sites {
            if s >= self.stage_channels.len() {
                return bad(format!("FTM site {s} is not a stage index"));
            }
            if !seen.insert(s) {
                return bad(format!("FTM site {s} listed twice"));
            }
        }
        if self.input_mean.len() != self.input_channels || self.input_std.len() != self.input_channels {
            return bad("input normalization must have one entry per input channel".into());
        }
        if self.input_std.iter().any(|&s| s.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) {
            return bad("input_std entries must be positive".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) || self.bn_epsilon.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad("bn_momentum must lie in (0,1) and bn_epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("stem_channels", self.stem_channels);
        kv.set_list("stage_channels", &self.stage_channels);
        kv.set_list("blocks_per_stage", &self.blocks_per_stage);
        kv.set("num_classes", self.num_classes);
        kv.set("input_channels", self.input_channels);
        kv.set_list("ftm_sites", &self.ftm_sites);
        kv.set("image_size", self.image_size);
        kv.set_list("input_mean", &self.input_mean);
        kv.set_list("input_std", &self.input_std);
        kv.set("bn_momentum", self.bn_momentum);
        kv.set("bn_epsilon", self.bn_epsilon);
        kv
    }

    /// Read a config; keys absent from `kv` keep their desk defaults.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::desk();
        let cfg = Self {
            stem_channels: kv.get("stem_channels")?.unwrap_or(d.stem_channels),
            stage_channels: kv.get_list("stage_channels")?.unwrap_or(d.stage_channels),
            blocks_per_stage: kv.get_list("blocks_per_stage")?.unwrap_or(d.blocks_per_stage),
            num_classes: kv.get("num_classes")?.unwrap_or(d.num_classes),
            input_channels: kv.get("input_channels")?.unwrap_or(d.input_channels),
            ftm_sites: kv.get_list("ftm_sites")?.unwrap_or(d.ftm_sites),
            image_size: kv.get("image_size")?.unwrap_or(d.image_size),
            input_mean: kv.get_list("input_mean")?.unwrap_or(d.input_mean),
            input_std: kv.get_list("input_std")?.unwrap_or(d.input_std),
            bn_momentum: kv.get("bn_momentum")?.unwrap_or(d.bn_momentum),
            bn_epsilon: kv.get("bn_epsilon")?.unwrap_or(d.bn_epsilon),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn blocks(&self) -> Vec<BlockSpec> {
        let mut out = Vec::new();
        let mut cin = self.stem_channels;
        for (s, (&cout, &nb)) in self.stage_channels.iter().zip(&self.blocks_per_stage).enumerate() {
            for b in 0..nb {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                out.push(BlockSpec {
                    prefix: format!("stage{s}.block{b}"),
                    cin,
                    cout,
                    stride,
                    projection: stride != 1 || cin != cout,
                    ftm: (b + 1 == nb && self.ftm_sites.contains(&s)).then(|| ftm_prefix(s)),
                });
                cin = cout;
            }
        }
        out
    }

    fn feature_dim(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }
}

fn ftm_prefix(stage: usize) -> String {
    format!("stage{stage}.ftm")
}

struct BlockSpec {
    prefix: String,
    cin: usize,
    cout: usize,
    stride: usize,
    projection: bool,
    ftm: Option<String>,
}

/// Which group a parameter belongs to during adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Backbone,
    Ftm,
    Head,
}

impl Partition {
    pub fn of(name: &str) -> Self {
        if name.starts_with("head.") {
            Partition::Head
        } else if name.contains(".ftm.") {
            Partition::Ftm
        } else {
            Partition::Backbone
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Partition::Backbone => 0,
            Partition::Ftm => 1,
            Partition::Head => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Partition::Backbone => "backbone",
            Partition::Ftm => "ftm",
            Partition::Head => "head",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PartitionSets {
    pub backbone: BTreeSet<String>,
    pub ftm: BTreeSet<String>,
    pub head: BTreeSet<String>,
}

/// Parameters, BN running statistics and the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Real = f32> {
    config: NetworkConfig,
    params: BTreeMap<String, Tensor<T>>,
    bn: BTreeMap<String, BnState<T>>,
}

/// Handles produced by one recorded forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Tape handle of every parameter, trainable or not.
    pub params: BTreeMap<String, Var>,
}

fn kaiming<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn head_init<T: Real>(k: usize, d: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead_5eed);
    (Tensor::randn(&[k, d], 1.0 / (d as f64).sqrt(), &mut rng), Tensor::zeros(&[k]))
}

/// Build a freshly initialized model. Identical `(config, seed)` give
/// bit-identical parameters; FTM slots never consume randomness, so adding
/// or removing them leaves every other tensor unchanged.
pub fn build_model<T: Real>(config: &NetworkConfig, seed: u64) -> Result<ModelState<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    let mut bn = BTreeMap::new();
    let mom = T::lit(config.bn_momentum as f64);
    let eps = T::lit(config.bn_epsilon as f64);
    let mut add_bn = |params: &mut BTreeMap<String, Tensor<T>>, name: String, c: usize| {
        params.insert(format!("{name}.gamma"), Tensor::ones(&[c]));
        params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        let mut st = BnState::new(c);
        st.momentum = mom;
        st.epsilon = eps;
        bn.insert(name, st);
    };

    params.insert(
        "stem.conv.weight".into(),
        kaiming(&[config.stem_channels, config.input_channels, 3, 3], &mut rng),
    );
    add_bn(&mut params, "stem.bn".into(), config.stem_channels);
    for blk in config.blocks() {
        let p = &blk.prefix;
        params.insert(format!("{p}.conv1.weight"), kaiming(&[blk.cout, blk.cin, 3, 3], &mut rng));
        add_bn(&mut params, format!("{p}.bn1"), blk.cout);
        params.insert(format!("{p}.conv2.weight"), kaiming(&[blk.cout, blk.cout, 3, 3], &mut rng));
        add_bn(&mut params, format!("{p}.bn2"), blk.cout);
        if blk.projection {
            params.insert(format!("{p}.shortcut.conv.weight"), kaiming(&[blk.cout, blk.cin, 1, 1], &mut rng));
            add_bn(&mut params, format!("{p}.shortcut.bn"), blk.cout);
        }
        if let Some(f) = &blk.ftm {
            let slot = FtmParams::<T>::init(f.clone(), blk.cout)?;
            params.insert(format!("{f}.gamma"), slot.gamma_tensor());
            params.insert(format!("{f}.beta"), slot.beta_tensor());
        }
    }
    let (w, b) = head_init(config.num_classes, config.feature_dim(), seed);
    params.insert("head.weight".into(), w);
    params.insert("head.bias".into(), b);
    Ok(ModelState {
        config: config.clone(),
        params,
        bn,
    })
}

struct Recorder<'a, T: Real> {
    tape: &'a mut Tape<T>,
    params: &'a BTreeMap<String, Tensor<T>>,
    bn: &'a mut BTreeMap<String, BnState<T>>,
    mode: Mode,
    trainable: &'a [Partition],
    vars: BTreeMap<String, Var>,
}

impl<T: Real> Recorder<'_, T> {
    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::contract(format!("model has no parameter `{name}`")))?;
        let v = self.tape.leaf(t.clone(), self.trainable.contains(&Partition::of(name)));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        self.tape.conv2d(x, w, None, stride, pad)
    }

    fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{name}.gamma"))?;
        let b = self.param(&format!("{name}.beta"))?;
        let st = self
            .bn
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("model has no BN state `{name}`")))?;
        self.tape.batch_norm(x, g, b, st, self.mode)
    }
}

impl<T: Real> ModelState<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn bn_states(&self) -> &BTreeMap<String, BnState<T>> {
        &self.bn
    }

    /// Running statistics flattened to `name.running_mean` / `name.running_var`.
    pub fn buffers(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, st) in &self.bn {
            let c = st.channels();
            out.insert(format!("{name}.running_mean"), Tensor::new(&[c], st.running_mean.clone()).expect("c>0"));
            out.insert(format!("{name}.running_var"), Tensor::new(&[c], st.running_var.clone()).expect("c>0"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn partition_count(&self, part: Partition) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| Partition::of(n) == part)
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn partition_params(&self) -> PartitionSets {
        let mut sets = PartitionSets::default();
        for name in self.params.keys() {
            let set = match Partition::of(name) {
                Partition::Backbone => &mut sets.backbone,
                Partition::Ftm => &mut sets.ftm,
                Partition::Head => &mut sets.head,
            };
            set.insert(name.clone());
        }
        sets
    }

    /// The FTM slot hosted by `stage`, if configured.
    pub fn ftm_slot(&self, stage: usize) -> Option<FtmParams<T>> {
        let p = ftm_prefix(stage);
        let g = self.params.get(&format!("{p}.gamma"))?;
        let b = self.params.get(&format!("{p}.beta"))?;
        Some(FtmParams {
            layer_id: p,
            gamma: g.data().to_vec(),
            beta: b.data().to_vec(),
        })
    }

    /// SHA-256 over name, shape and little-endian bytes of every tensor in
    /// `part`, in name order.
    pub fn checksum(&self, part: Partition) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(n, _)| Partition::of(n) == part) {
            hash_tensor(&mut h, name, t);
        }
        hex(&h.finalize())
    }

    /// SHA-256 over all BN running statistics.
    pub fn buffer_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.buffers() {
            hash_tensor(&mut h, &name, &t);
        }
        hex(&h.finalize())
    }

    /// Replace the classifier with a fresh `num_classes`-way head. Every
    /// other tensor is left untouched.
    pub fn reinit_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::config(format!("a classifier head needs at least 2 classes, got {num_classes}")));
        }
        let (w, b) = head_init(num_classes, self.config.feature_dim(), seed);
        self.params.insert("head.weight".into(), w);
        self.params.insert("head.bias".into(), b);
        self.config.num_classes = num_classes;
        Ok(())
    }

    pub fn set_input_normalization(&mut self, mean: Vec<f32>, std: Vec<f32>) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.input_mean = mean;
        cfg.input_std = std;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            bn: self
                .bn
                .iter()
                .map(|(k, s)| {
                    let c = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64_lossy())).collect();
                    (
                        k.clone(),
                        BnState {
                            running_mean: c(&s.running_mean),
                            running_var: c(&s.running_var),
                            momentum: U::lit(s.momentum.to_f64_lossy()),
                            epsilon: U::lit(s.epsilon.to_f64_lossy()),
                        },
                    )
                })
                .collect(),
        }
    }

    fn normalize_input(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let s = batch.shape();
        let cfg = &self.config;
        if s.len() != 4 || s[1] != cfg.input_channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(Error::dim(format!(
                "model expects [N,{},{},{}] input, got {s:?}",
                cfg.input_channels, cfg.image_size, cfg.image_size
            )));
        }
        let plane = s[2] * s[3];
        let mean: Vec<T> = cfg.input_mean.iter().map(|&v| T::lit(v as f64)).collect();
        let inv: Vec<T> = cfg.input_std.iter().map(|&v| T::one() / T::lit(v as f64)).collect();
        let mut data = batch.data().to_vec();
        for (i, p) in data.chunks_mut(plane).enumerate() {
            let c = i % cfg.input_channels;
            p.iter_mut().for_each(|v| *v = (*v - mean[c]) * inv[c]);
        }
        Tensor::new(s, data)
    }

    /// Record a forward pass on `tape`. Parameters whose partition is listed
    /// in `trainable` become gradient-requiring leaves. In train mode BN
    /// layers use batch statistics and update their running estimates.
    pub fn forward_on(&mut self, tape: &mut Tape<T>, batch: &Tensor<T>, mode: Mode, trainable: &[Partition]) -> Result<ForwardTrace> {
        let x = self.normalize_input(batch)?;
        let mut rec = Recorder {
            tape,
            params: &self.params,
            bn: &mut self.bn,
            mode,
            trainable,
            vars: BTreeMap::new(),
        };
        let logits = record_forward(&mut rec, &self.config, x)?;
        Ok(ForwardTrace {
            logits,
            params: rec.vars,
        })
    }

    /// Logits for `batch`; BN state is updated only in train mode.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let tr = self.forward_on(&mut tape, batch, mode, &[])?;
        Ok(tape.value(tr.logits).clone())
    }

    /// Eval-mode logits without touching the model.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.normalize_input(batch)?;
        let mut bn = self.bn.clone();
        let mut tape = Tape::new();
        let mut rec = Recorder {
            tape: &mut tape,
            params: &self.params,
            bn: &mut bn,
            mode: Mode::Eval,
            trainable: &[],
            vars: BTreeMap::new(),
        };
        let l = record_forward(&mut rec, &self.config, x)?;
        Ok(tape.value(l).clone())
    }

    /// Eval-mode class probabilities, one row per sample.
    pub fn probabilities(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let l = self.logits(batch)?;
        let k = l.shape()[1];
        Tensor::new(l.shape(), softmax_rows(l.data(), k))
    }

    pub(crate) fn from_parts(config: NetworkConfig, params: BTreeMap<String, Tensor<T>>, buffers: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let template = build_model::<T>(&config, 0)?;
        if template.params.len() != params.len() || template.params.iter().any(|(k, t)| params.get(k).map(|p| p.shape()) != Some(t.shape())) {
            return Err(Error::contract("parameter set does not match the configured topology"));
        }
        let mut bn = template.bn;
        for (name, st) in bn.iter_mut() {
            let c = st.channels();
            let get = |suffix: &str| -> Result<Vec<T>> {
                let key = format!("{name}.{suffix}");
                let t = buffers
                    .get(&key)
                    .ok_or_else(|| Error::contract(format!("missing buffer `{key}`")))?;
                if t.len() != c {
                    return Err(Error::contract(format!("buffer `{key}` has wrong length")));
                }
                Ok(t.data().to_vec())
            };
            st.running_mean = get("running_mean")?;
            st.running_var = get("running_var")?;
        }
        if buffers.len() != 2 * bn.len() {
            return Err(Error::contract("unexpected extra buffers"));
        }
        Ok(Self { config, params, bn })
    }
}

fn record_forward<T: Real>(rec: &mut Recorder<'_, T>, cfg: &NetworkConfig, x: Tensor<T>) -> Result<Var> {
    let x = rec.tape.constant(x);
    let h = rec.conv("stem.conv", x, 1, 1)?;
    let h = rec.bn("stem.bn", h)?;
    let mut h = rec.tape.relu(h)?;
    for blk in cfg.blocks() {
        let p = &blk.prefix;
        let o = rec.conv(&format!("{p}.conv1"), h, blk.stride, 1)?;
        let o = rec.bn(&format!("{p}.bn1"), o)?;
        let o = rec.tape.relu(o)?;
        let o = rec.conv(&format!("{p}.conv2"), o, 1, 1)?;
        let mut o = rec.bn(&format!("{p}.bn2"), o)?;
        if let Some(f) = &blk.ftm {
            let g = rec.param(&format!("{f}.gamma"))?;
            let b = rec.param(&format!("{f}.beta"))?;
            o = ftm_apply(rec.tape, o, g, b)?;
        }
        let sc = if blk.projection {
            let s = rec.conv(&format!("{p}.shortcut.conv"), h, blk.stride, 0)?;
            rec.bn(&format!("{p}.shortcut.bn"), s)?
        } else {
            h
        };
        let sum = rec.tape.add(o, sc)?;
        h = rec.tape.relu(sum)?;
    }
    let pooled = rec.tape.global_avg_pool(h)?;
    let w = rec.param("head.weight")?;
    let b = rec.param("head.bias")?;
    rec.tape.linear(pooled, w, b)
}

fn hash_tensor<T: Real>(h: &mut Sha256, name: &str, t: &Tensor<T>) {
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_f64_lossy().to_bits().to_le_bytes());
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
