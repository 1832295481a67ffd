use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, lr_at, AdamState, Episode, StageConfig};
use crate::autograd::{Mode, Tape};
use crate::data::{make_batch, Item, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::network::{ModelState, Partition};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// `None` when no monitoring set was given.
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    /// Epoch whose parameters were returned.
    pub selected_epoch: Option<usize>,
}

impl History {
    /// `epoch,lr,train_loss,val_acc`; a missing accuracy is left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_acc\n");
        for r in &self.rows {
            let acc = r.val_acc.map(|a| a.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.train_loss, acc));
        }
        s
    }
}

/// Arg-max class per item, ties to the lower index.
pub(crate) fn predict(model: &ModelState, items: &[&Item]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_BATCH) {
        let (x, _) = make_batch(chunk)?;
        let logits = model.logits(&x)?;
        let k = logits.shape()[1];
        for row in logits.data().chunks(k) {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Eval-mode confusion matrix of `model` over `items`.
pub fn evaluate(model: &ModelState, items: &[&Item], classes: &[String]) -> Result<ConfusionMatrix> {
    let preds = predict(model, items)?;
    let truth: Vec<usize> = items.iter().map(|it| it.label).collect();
    ConfusionMatrix::from_labels(classes.to_vec(), &truth, &preds)
}

fn accuracy(model: &ModelState, items: &[&Item]) -> Result<f64> {
    let preds = predict(model, items)?;
    let hits = preds.iter().zip(items).filter(|(p, it)| **p == it.label).count();
    Ok(hits as f64 / items.len() as f64)
}

/// Accuracy of an unadapted source classifier on `split` of a generated
/// target dataset: a prediction counts when it names the source family the
/// target class was derived from.
pub fn frozen_source_accuracy(source_model: &ModelState, target: &LabeledDataset, split: Split) -> Result<f64> {
    let family = target
        .source_family
        .as_ref()
        .ok_or_else(|| Error::Data("target dataset does not record source families".into()))?;
    let items = target.split(split);
    if items.is_empty() {
        return Err(Error::Data("empty evaluation split".into()));
    }
    let preds = predict(source_model, &items)?;
    let hits = preds.iter().zip(&items).filter(|(p, it)| **p == family[it.label]).count();
    Ok(hits as f64 / items.len() as f64)
}

/// Copy of `source` with a fresh `num_classes`-way head.
pub fn prepare_target_model(source: &ModelState, num_classes: usize, head_seed: u64) -> Result<ModelState> {
    let mut m = source.clone();
    m.reinit_head(num_classes, head_seed)?;
    Ok(m)
}

fn train_step(model: &mut ModelState, x: &Tensor<f32>, labels: &[usize], cfg: &StageConfig, adam: &mut AdamState<f32>, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let trace = model.forward_on(&mut tape, x, Mode::Train, &cfg.trainable)?;
    let loss = tape.softmax_cross_entropy(trace.logits, labels)?;
    let value = tape.value(loss).data()[0] as f64;
    let mut g = tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, var) in &trace.params {
        if cfg.trainable.contains(&Partition::of(name)) {
            if let Some(t) = g.take(*var) {
                grads.insert(name.clone(), t);
            }
        }
    }
    adam_step(model.params_mut(), &grads, adam, lr, cfg.beta1, cfg.beta2, cfg.eps_adam)?;
    Ok(value)
}

/// Mini-batches over `order`: the fewest batches of at most `size` items,
/// with sizes differing by at most one so no batch is left with a handful
/// of samples for its statistics. Never fewer than two items per batch
/// when there are at least two.
pub(crate) fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let n = order.len();
    if n == 0 {
        return Vec::new();
    }
    let count = n.div_ceil(size).min((n / 2).max(1));
    let (base, extra) = (n / count, n % count);
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for b in 0..count {
        let end = start + base + usize::from(b < extra);
        out.push(&order[start..end]);
        start = end;
    }
    out
}

fn run_epochs(mut model: ModelState, train: &[&Item], monitor: &[&Item], cfg: &StageConfig, keep_best: bool) -> Result<(ModelState, History)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    let mut best: Option<(f64, ModelState)> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in batches(&order, cfg.batch_size) {
            let items: Vec<&Item> = chunk.iter().map(|&i| train[i]).collect();
            let (x, labels) = make_batch(&items)?;
            loss_sum += train_step(&mut model, &x, &labels, cfg, &mut adam, lr)? * items.len() as f64;
        }
        let val_acc = if monitor.is_empty() { None } else { Some(accuracy(&model, monitor)?) };
        history.rows.push(HistoryRow {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_acc,
        });
        if keep_best {
            if let Some(acc) = val_acc {
                if best.as_ref().is_none_or(|(b, _)| acc >= *b) {
                    best = Some((acc, model.clone()));
                    history.selected_epoch = Some(epoch);
                }
            }
        }
    }
    match best {
        Some((_, m)) => Ok((m, history)),
        None => {
            history.selected_epoch = cfg.epochs.checked_sub(1);
            Ok((model, history))
        }
    }
}

fn check_head(model: &ModelState, classes: usize) -> Result<()> {
    let k = model.config().num_classes;
    if k != classes {
        return Err(Error::contract(format!("head has {k} outputs but the data has {classes} classes")));
    }
    Ok(())
}

/// Train every partition on the source train split and return the snapshot
/// with the best validation accuracy (latest on ties). The model's input
/// standardization is first set to the train-split channel statistics.
pub fn train_source(model: &ModelState, source: &LabeledDataset, cfg: &StageConfig) -> Result<(ModelState, History)> {
    check_head(model, source.num_classes())?;
    let train = source.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("source train split is empty".into()));
    }
    let mut m = model.clone();
    let (mean, std) = source.channel_stats()?;
    m.set_input_normalization(mean, std)?;
    run_epochs(m, &train, &source.split(Split::Val), cfg, true)
}

/// Stage-2 adaptation: only the FTM slots and the head are updated, BN
/// layers run on batch statistics and keep refreshing their running
/// estimates, every backbone tensor stays bit-identical. `monitor` items,
/// if any, are scored after each epoch for the history only; the
/// final-epoch model is returned.
pub fn adapt_ftm(model: &ModelState, episode: &Episode, monitor: &[&Item], cfg: &StageConfig) -> Result<(ModelState, History)> {
    if model.partition_count(Partition::Ftm) == 0 {
        return Err(Error::config("model has no FTM slots to adapt"));
    }
    if cfg.trainable.contains(&Partition::Backbone) {
        return Err(Error::contract("FTM adaptation must keep the backbone frozen"));
    }
    check_head(model, episode.classes.len())?;
    run_epochs(model.clone(), &episode.refs(), monitor, cfg, false)
}

/// Baseline adaptation that updates whatever `cfg.trainable` selects (all
/// partitions by default); otherwise identical to [`adapt_ftm`].
pub fn finetune_baseline(model: &ModelState, episode: &Episode, monitor: &[&Item], cfg: &StageConfig) -> Result<(ModelState, History)> {
    check_head(model, episode.classes.len())?;
    run_epochs(model.clone(), &episode.refs(), monitor, cfg, false)
}
