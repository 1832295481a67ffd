//! Labeled image datasets, the synthetic domain-shift benchmark and tiling of
//! large images.

mod folder;
mod synthetic;
mod tiling;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use folder::{export_folder_dataset, load_folder_dataset, load_image, read_taxonomy_file, save_image, write_taxonomy_file};
pub use synthetic::{synth_domain_pair, synth_mosaic, Mosaic, SyntheticShiftConfig, TextureParams};
pub use tiling::{tile_image, PatchGrid};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    /// `[3, S, S]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub split: Split,
}

/// Fine-to-coarse class grouping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    coarse_classes: Vec<String>,
    fine_to_coarse: Vec<usize>,
}

impl Taxonomy {
    /// Every fine class is its own coarse class.
    pub fn identity(fine_classes: &[String]) -> Self {
        Self {
            coarse_classes: fine_classes.to_vec(),
            fine_to_coarse: (0..fine_classes.len()).collect(),
        }
    }

    /// Build from `(fine, coarse)` name pairs. Coarse classes are ordered by
    /// first appearance along `fine_classes`.
    pub fn from_pairs(fine_classes: &[String], pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut coarse_classes: Vec<String> = Vec::new();
        let mut fine_to_coarse = Vec::with_capacity(fine_classes.len());
        for fine in fine_classes {
            let coarse = pairs
                .get(fine)
                .ok_or_else(|| Error::Taxonomy(format!("fine class `{fine}` has no coarse class")))?;
            let idx = match coarse_classes.iter().position(|c| c == coarse) {
                Some(i) => i,
                None => {
                    coarse_classes.push(coarse.clone());
                    coarse_classes.len() - 1
                }
            };
            fine_to_coarse.push(idx);
        }
        if let Some(extra) = pairs.keys().find(|k| !fine_classes.contains(k)) {
            return Err(Error::Taxonomy(format!("taxonomy names unknown fine class `{extra}`")));
        }
        Ok(Self {
            coarse_classes,
            fine_to_coarse,
        })
    }

    pub fn from_indices(coarse_classes: Vec<String>, fine_to_coarse: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = fine_to_coarse.iter().find(|&&c| c >= coarse_classes.len()) {
            return Err(Error::Taxonomy(format!("coarse index {bad} out of range")));
        }
        Ok(Self {
            coarse_classes,
            fine_to_coarse,
        })
    }

    pub fn coarse_classes(&self) -> &[String] {
        &self.coarse_classes
    }

    pub fn num_fine(&self) -> usize {
        self.fine_to_coarse.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_classes.len()
    }

    pub fn coarse_of(&self, fine: usize) -> Result<usize> {
        self.fine_to_coarse
            .get(fine)
            .copied()
            .ok_or_else(|| Error::Taxonomy(format!("fine class {fine} is not mapped")))
    }

    pub fn fine_to_coarse(&self) -> &[usize] {
        &self.fine_to_coarse
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub items: Vec<Item>,
    pub fine_classes: Vec<String>,
    pub taxonomy: Taxonomy,
    /// For generated target domains: the source class each fine class was
    /// derived from. Lets a source-trained classifier be scored on the
    /// target domain without any adaptation.
    pub source_family: Option<Vec<usize>>,
}

impl LabeledDataset {
    pub fn num_classes(&self) -> usize {
        self.fine_classes.len()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.items.first().map(|it| it.image.shape()[1])
    }

    pub fn split(&self, split: Split) -> Vec<&Item> {
        self.items.iter().filter(|it| it.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.items.iter().filter(|it| it.split == split).count()
    }

    /// Per-class item indices within `split`, in dataset order.
    pub fn indices_by_class(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, it) in self.items.iter().enumerate() {
            if it.split == split {
                out[it.label].push(i);
            }
        }
        out
    }

    /// Re-tag splits per class: a seeded shuffle, then the first
    /// `train_frac` to train, the next `val_frac` to val, the rest to test.
    pub fn assign_splits(&mut self, train_frac: f64, val_frac: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class = vec![Vec::new(); self.num_classes()];
        for (i, it) in self.items.iter().enumerate() {
            by_class[it.label].push(i);
        }
        for idx in by_class.iter_mut() {
            idx.shuffle(&mut rng);
            let n = idx.len();
            let n_train = (n as f64 * train_frac).round() as usize;
            let n_val = ((n as f64 * val_frac).round() as usize).min(n - n_train.min(n));
            for (k, &i) in idx.iter().enumerate() {
                self.items[i].split = if k < n_train {
                    Split::Train
                } else if k < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
    }

    /// Per-channel mean and standard deviation over the train split.
    pub fn channel_stats(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        let train = self.split(Split::Train);
        let first = train.first().ok_or_else(|| Error::Data("train split is empty".into()))?;
        let c = first.image.shape()[0];
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        let mut n = 0usize;
        for it in &train {
            let plane = it.image.len() / c;
            for (ch, p) in it.image.data().chunks(plane).enumerate() {
                for &v in p {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            n += plane;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n as f64 - m * m).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        Ok((mean.into_iter().map(|m| m as f32).collect(), std))
    }
}

/// Stack the images of `items` into one `[N,3,S,S]` batch with its labels.
pub fn make_batch(items: &[&Item]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let imgs: Vec<&Tensor<f32>> = items.iter().map(|it| &it.image).collect();
    let labels = items.iter().map(|it| it.label).collect();
    Ok((Tensor::stack(&imgs)?, labels))
}
