//! Source training, frozen-backbone FTM adaptation and the finetuning
//! baseline, with their Adam optimizer, step schedule and episode sampler.

mod stages;
mod sweep;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use stages::{
    adapt_ftm, evaluate, finetune_baseline, frozen_source_accuracy, prepare_target_model, train_source, History, HistoryRow,
};
pub use sweep::{run_shot_sweep, SweepConfig, SweepReport, SweepRow};

use crate::data::{Item, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::network::Partition;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub lr_decay: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub trainable: Vec<Partition>,
    pub seed: u64,
}

const ALL: [Partition; 3] = [Partition::Backbone, Partition::Ftm, Partition::Head];

impl StageConfig {
    fn adam(batch_size: usize, epochs: usize, base_lr: f64, lr_step: usize, trainable: &[Partition]) -> Self {
        Self {
            batch_size,
            epochs,
            base_lr,
            lr_step,
            lr_decay: 0.1,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            trainable: trainable.to_vec(),
            seed: 0,
        }
    }

    /// Full-scale source training: 30 epochs, batch 128, lr 1e-4 decayed
    /// by 0.1 every 10 epochs.
    pub fn source() -> Self {
        Self::adam(128, 30, 1e-4, 10, &ALL)
    }

    /// Source training for the small synthetic benchmark.
    pub fn source_desk() -> Self {
        Self::adam(32, 8, 1e-3, 5, &ALL)
    }

    /// FTM adaptation: batch 64, 50 epochs, lr 0.003, decay 0.1 every 15.
    pub fn ftm() -> Self {
        Self::adam(64, 50, 0.003, 15, &[Partition::Ftm, Partition::Head])
    }

    /// Finetuning baseline: as [`StageConfig::ftm`] with lr 0.001 and every
    /// parameter trainable.
    pub fn finetune() -> Self {
        Self::adam(64, 50, 0.001, 15, &ALL)
    }

    /// [`StageConfig::ftm`] with batch 16, so the ten-class synthetic
    /// episodes take as many steps per epoch as the full-scale ones.
    pub fn ftm_desk() -> Self {
        Self { batch_size: 16, ..Self::ftm() }
    }

    pub fn finetune_desk() -> Self {
        Self { batch_size: 16, ..Self::finetune() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_step == 0 {
            return Err(Error::config("batch size and lr step must be positive"));
        }
        if !(self.base_lr >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::config("learning rate must be >= 0 and decay > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps_adam > 0.0) {
            return Err(Error::config("Adam betas must lie in [0, 1) and eps be positive"));
        }
        if self.trainable.is_empty() {
            return Err(Error::config("no trainable partition selected"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("base_lr", self.base_lr);
        kv.set("lr_step", self.lr_step);
        kv.set("lr_decay", self.lr_decay);
        kv.set("optimizer", "adam");
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps_adam", self.eps_adam);
        let parts: Vec<&str> = self.trainable.iter().map(|p| p.name()).collect();
        kv.set_list("trainable", &parts);
        kv.set("seed", self.seed);
        kv
    }

    /// Read from `kv`, keeping the value of `self` for absent keys.
    pub fn overlay_kv(&self, kv: &KvMap) -> Result<Self> {
        if let Some(opt) = kv.get_str("optimizer") {
            if opt != "adam" {
                return Err(Error::config(format!("unsupported optimizer `{opt}`")));
            }
        }
        let trainable = match kv.get_list::<String>("trainable")? {
            None => self.trainable.clone(),
            Some(names) => names
                .iter()
                .map(|n| {
                    ALL.into_iter()
                        .find(|p| p.name() == n)
                        .ok_or_else(|| Error::config(format!("unknown partition `{n}`")))
                })
                .collect::<Result<_>>()?,
        };
        let out = Self {
            batch_size: kv.get("batch_size")?.unwrap_or(self.batch_size),
            epochs: kv.get("epochs")?.unwrap_or(self.epochs),
            base_lr: kv.get("base_lr")?.unwrap_or(self.base_lr),
            lr_step: kv.get("lr_step")?.unwrap_or(self.lr_step),
            lr_decay: kv.get("lr_decay")?.unwrap_or(self.lr_decay),
            optimizer: Optimizer::Adam,
            beta1: kv.get("beta1")?.unwrap_or(self.beta1),
            beta2: kv.get("beta2")?.unwrap_or(self.beta2),
            eps_adam: kv.get("eps_adam")?.unwrap_or(self.eps_adam),
            trainable,
            seed: kv.get("seed")?.unwrap_or(self.seed),
        };
        out.validate()?;
        Ok(out)
    }
}

/// `base_lr * decay^floor(epoch / step)`, rounded to 15 significant digits
/// so decimal schedules land on their decimal values (0.003 -> 0.0003).
pub fn lr_at(epoch: usize, cfg: &StageConfig) -> f64 {
    let n = (epoch / cfg.lr_step.max(1)) as i32;
    let lr = cfg.base_lr * cfg.lr_decay.powi(n);
    if lr == 0.0 || !lr.is_finite() {
        return lr;
    }
    format!("{lr:.14e}").parse().unwrap_or(lr)
}

/// Adam moments for the parameters it has seen, plus the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter named in `grads`.
/// Any non-finite gradient aborts before anything is modified.
pub fn adam_step<T: Real>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::config(format!("learning rate {lr} is negative")));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::dim(format!("gradient of `{name}` is {:?}, parameter is {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let (one, lr_t, eps_t) = (T::one(), T::lit(lr), T::lit(eps));
    let c1 = one - T::lit(beta1.powi(t));
    let c2 = one - T::lit(beta2.powi(t));
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr_t * mhat / (vhat.sqrt() + eps_t);
        }
    }
    Ok(())
}

/// `shots_per_class` training items from each class, grouped by class.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub shots_per_class: usize,
    pub classes: Vec<String>,
    pub items: Vec<Item>,
    /// Dataset indices the items were drawn from.
    pub source_indices: Vec<usize>,
}

impl Episode {
    pub fn refs(&self) -> Vec<&Item> {
        self.items.iter().collect()
    }
}

/// Draw `k` distinct train-split items per class, uniformly and
/// deterministically for a given seed.
pub fn sample_shots(ds: &LabeledDataset, k: usize, seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(Error::config("shots per class must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(k * ds.num_classes());
    let mut source_indices = Vec::with_capacity(k * ds.num_classes());
    for (class, pool) in ds.indices_by_class(Split::Train).iter().enumerate() {
        if pool.len() < k {
            return Err(Error::InsufficientData {
                class: ds.fine_classes[class].clone(),
                available: pool.len(),
                requested: k,
            });
        }
        for i in rand::seq::index::sample(&mut rng, pool.len(), k) {
            source_indices.push(pool[i]);
            items.push(ds.items[pool[i]].clone());
        }
    }
    Ok(Episode {
        shots_per_class: k,
        classes: ds.fine_classes.clone(),
        items,
        source_indices,
    })
}
