//! Land-cover mapping of large images: patch classification, fine-to-coarse
//! probability fusion, superpixel voting, scoring and rendering.

mod slic;

use std::path::Path;

use image::imageops::FilterType;
use image::{Rgb, Rgb32FImage, RgbImage};

pub use slic::{slic_segment, smooth, Segmentation};

use crate::data::{tile_image, PatchGrid, Taxonomy};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::metrics::{ConfusionMatrix, Scores};
use crate::network::ModelState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MapConfig {
    pub superpixels: usize,
    pub patch_size: usize,
    /// SLIC colour/space trade-off for RGB in `[0, 1]`.
    pub compactness: f32,
    /// Gaussian sigma in pixels applied before SLIC so superpixels follow
    /// region borders rather than fine texture; 0 disables it.
    pub smoothing: f32,
    pub slic_iters: usize,
    pub batch: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            superpixels: 100,
            patch_size: 224,
            compactness: 0.3,
            smoothing: 2.0,
            slic_iters: 10,
            batch: 32,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.superpixels == 0 || self.patch_size == 0 || self.slic_iters == 0 || self.batch == 0 {
            return Err(Error::config("map settings must be positive"));
        }
        if !(self.compactness >= 0.0) || !(self.smoothing >= 0.0) || !self.smoothing.is_finite() {
            return Err(Error::config("compactness and smoothing must be non-negative"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("superpixels", self.superpixels);
        kv.set("patch_size", self.patch_size);
        kv.set("compactness", self.compactness);
        kv.set("smoothing", self.smoothing);
        kv.set("slic_iters", self.slic_iters);
        kv.set("batch", self.batch);
        kv
    }

    /// Read from `kv`, keeping the value of `self` for absent keys.
    pub fn overlay_kv(&self, kv: &KvMap) -> Result<Self> {
        let out = Self {
            superpixels: kv.get("superpixels")?.unwrap_or(self.superpixels),
            patch_size: kv.get("patch_size")?.unwrap_or(self.patch_size),
            compactness: kv.get("compactness")?.unwrap_or(self.compactness),
            smoothing: kv.get("smoothing")?.unwrap_or(self.smoothing),
            slic_iters: kv.get("slic_iters")?.unwrap_or(self.slic_iters),
            batch: kv.get("batch")?.unwrap_or(self.batch),
        };
        out.validate()?;
        Ok(out)
    }
}

fn crop(image: &Tensor<f32>, r: usize, c: usize, size: usize) -> Vec<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut out = Vec::with_capacity(3 * size * size);
    for ch in 0..3 {
        for y in r..r + size {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&d[row + c..row + c + size]);
        }
    }
    out
}

fn resize_chw(data: Vec<f32>, from: usize, to: usize) -> Vec<f32> {
    let plane = from * from;
    let img = Rgb32FImage::from_fn(from as u32, from as u32, |x, y| {
        let i = y as usize * from + x as usize;
        Rgb([data[i], data[plane + i], data[2 * plane + i]])
    });
    let small = image::imageops::resize(&img, to as u32, to as u32, FilterType::Triangle);
    let mut out = vec![0f32; 3 * to * to];
    for (x, y, px) in small.enumerate_pixels() {
        let i = y as usize * to + x as usize;
        for ch in 0..3 {
            out[ch * to * to + i] = px.0[ch];
        }
    }
    out
}

/// Eval-mode class probabilities for every patch of `grid`, in
/// [`PatchGrid::origins`] order. Patches are resized to the model's input
/// size when they differ.
pub fn classify_patches(model: &ModelState, image: &Tensor<f32>, grid: &PatchGrid, batch: usize) -> Result<Vec<Vec<f32>>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != grid.height || s[2] != grid.width {
        return Err(Error::dim(format!(
            "image {s:?} does not match a {}x{} patch grid",
            grid.height, grid.width
        )));
    }
    if batch == 0 {
        return Err(Error::config("batch must be positive"));
    }
    let p = grid.patch_size;
    let m = model.config().image_size;
    let origins = grid.origins();
    let mut out = Vec::with_capacity(origins.len());
    for chunk in origins.chunks(batch) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * m * m);
        for &(r, c) in chunk {
            let patch = crop(image, r, c, p);
            data.extend(if p == m { patch } else { resize_chw(patch, p, m) });
        }
        let x = Tensor::new(&[chunk.len(), 3, m, m], data)?;
        let probs = model.probabilities(&x)?;
        let k = probs.shape()[1];
        out.extend(probs.data().chunks(k).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Sum the probabilities of fine classes sharing a coarse class.
pub fn fine_to_coarse(probs: &[f32], taxonomy: &Taxonomy) -> Result<Vec<f32>> {
    if probs.len() != taxonomy.num_fine() {
        return Err(Error::Taxonomy(format!(
            "{} probabilities for a taxonomy over {} fine classes",
            probs.len(),
            taxonomy.num_fine()
        )));
    }
    let mut out = vec![0f32; taxonomy.num_coarse()];
    for (f, &p) in probs.iter().enumerate() {
        out[taxonomy.coarse_of(f)?] += p;
    }
    Ok(out)
}

/// Index of the largest value, ties to the lower index.
fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Coarse label per pixel plus the per-superpixel vote record.
#[derive(Debug, Clone, PartialEq)]
pub struct LandCoverMap {
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<String>,
    /// Winning class of each superpixel.
    pub winners: Vec<usize>,
    /// Overlap-weighted votes per superpixel and class.
    pub tallies: Vec<Vec<u64>>,
}

impl LandCoverMap {
    /// `superpixel,<class names...>,winner`, one line per superpixel.
    pub fn vote_audit(&self) -> String {
        let mut s = String::from("superpixel");
        for c in &self.classes {
            s.push(',');
            s.push_str(c);
        }
        s.push_str(",winner\n");
        for (i, (t, &win)) in self.tallies.iter().zip(&self.winners).enumerate() {
            s.push_str(&i.to_string());
            for v in t {
                s.push_str(&format!(",{v}"));
            }
            s.push_str(&format!(",{}\n", self.classes[win]));
        }
        s
    }
}

/// Winner-take-all labeling: superpixel `s` collects, for every patch `p`,
/// `|pixels of s inside p|` votes for the class of `p`; the class with the
/// most votes (lowest index on ties) paints all of `s`.
pub fn label_superpixels(seg: &Segmentation, grid: &PatchGrid, patch_labels: &[usize], classes: &[String]) -> Result<LandCoverMap> {
    if seg.height != grid.height || seg.width != grid.width {
        return Err(Error::contract("segmentation and patch grid cover different image sizes"));
    }
    let origins = grid.origins();
    if origins.len() != patch_labels.len() {
        return Err(Error::contract(format!("{} patches but {} labels", origins.len(), patch_labels.len())));
    }
    let k = classes.len();
    if let Some(&bad) = patch_labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index(format!("patch label {bad} outside {k} classes")));
    }
    let (w, p) = (seg.width, grid.patch_size);
    let mut tallies = vec![vec![0u64; k]; seg.k_actual];
    for (&(r, c), &label) in origins.iter().zip(patch_labels) {
        for y in r..r + p {
            for &s in &seg.labels[y * w + c..y * w + c + p] {
                tallies[s][label] += 1;
            }
        }
    }
    let mut winners = Vec::with_capacity(seg.k_actual);
    for (s, t) in tallies.iter().enumerate() {
        if t.iter().all(|&v| v == 0) {
            return Err(Error::contract(format!("superpixel {s} overlaps no patch")));
        }
        winners.push(argmax(t));
    }
    Ok(LandCoverMap {
        labels: seg.labels.iter().map(|&s| winners[s]).collect(),
        height: seg.height,
        width: seg.width,
        classes: classes.to_vec(),
        winners,
        tallies,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapScores {
    /// Patch-level confusion matrix, truth rows by predicted columns.
    pub confusion: ConfusionMatrix,
    pub scores: Scores,
    /// F1 per class; `None` for classes absent from truth and prediction.
    pub per_class_f1: Vec<Option<f64>>,
    pub average_f1: f64,
}

impl MapScores {
    /// `class,f1` rows then `average`; skipped classes have an empty field.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,f1\n");
        for (name, f) in self.confusion.classes().iter().zip(&self.per_class_f1) {
            s.push_str(&format!("{name},{}\n", f.map(|v| v.to_string()).unwrap_or_default()));
        }
        s.push_str(&format!("average,{}\n", self.average_f1));
        s
    }
}

fn majority(labels: &[usize], w: usize, r: usize, c: usize, p: usize, k: usize) -> Result<usize> {
    let mut counts = vec![0usize; k];
    for y in r..r + p {
        for &l in &labels[y * w + c..y * w + c + p] {
            *counts
                .get_mut(l)
                .ok_or_else(|| Error::Index(format!("label {l} outside {k} classes")))? += 1;
        }
    }
    Ok(argmax(&counts))
}

/// Patch-level F1: the image is tiled with `patch_size` patches (edge
/// snapped) and each patch takes the majority label of the prediction and
/// of the truth. Classes missing from both are left out of the average.
pub fn score_map(pred: &LandCoverMap, truth: &[usize], patch_size: usize) -> Result<MapScores> {
    let (h, w) = (pred.height, pred.width);
    if truth.len() != h * w || pred.labels.len() != h * w {
        return Err(Error::contract(format!("truth has {} pixels, map has {}x{}", truth.len(), h, w)));
    }
    let grid = tile_image(h, w, patch_size, patch_size)?;
    let k = pred.classes.len();
    let mut cm = ConfusionMatrix::new(pred.classes.clone());
    for (r, c) in grid.origins() {
        let t = majority(truth, w, r, c, patch_size, k)?;
        let p = majority(&pred.labels, w, r, c, patch_size, k)?;
        cm.update(t, p)?;
    }
    let scores = cm.scores()?;
    let per_class_f1 = scores
        .per_class_f1
        .iter()
        .zip(&scores.present)
        .map(|(&f, &present)| present.then_some(f))
        .collect();
    Ok(MapScores {
        average_f1: scores.macro_f1,
        confusion: cm,
        scores,
        per_class_f1,
    })
}

/// Distinct colors for `n` classes.
pub fn default_palette(n: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 8] = [
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [70, 240, 240],
        [245, 130, 48],
        [128, 128, 128],
    ];
    (0..n)
        .map(|i| {
            if i < BASE.len() {
                BASE[i]
            } else {
                [(i * 37 % 256) as u8, (i * 91 % 256) as u8, (i * 151 % 256) as u8]
            }
        })
        .collect()
}

/// One palette color per pixel.
pub fn render_map(map: &LandCoverMap, palette: &[[u8; 3]]) -> Result<RgbImage> {
    if palette.len() < map.classes.len() {
        return Err(Error::config(format!(
            "palette has {} colors for {} classes",
            palette.len(),
            map.classes.len()
        )));
    }
    let w = map.width;
    Ok(RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        Rgb(palette[map.labels[y as usize * w + x as usize]])
    }))
}

pub fn save_map_png(map: &LandCoverMap, palette: &[[u8; 3]], path: impl AsRef<Path>) -> Result<()> {
    render_map(map, palette)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Inverse of [`render_map`]: class index per pixel.
pub fn decode_map(img: &RgbImage, palette: &[[u8; 3]]) -> Result<Vec<usize>> {
    img.pixels()
        .map(|px| {
            palette
                .iter()
                .position(|c| *c == px.0)
                .ok_or_else(|| Error::Data(format!("color {:?} is not in the palette", px.0)))
        })
        .collect()
}

/// Everything the mapping pipeline produced for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub grid: PatchGrid,
    pub segmentation: Segmentation,
    /// Coarse probabilities per patch.
    pub patch_probs: Vec<Vec<f32>>,
    pub patch_labels: Vec<usize>,
    pub map: LandCoverMap,
}

/// Tile, classify, fuse to coarse classes, segment and vote.
pub fn map_image(model: &ModelState, image: &Tensor<f32>, taxonomy: &Taxonomy, cfg: &MapConfig) -> Result<MapResult> {
    if model.config().num_classes != taxonomy.num_fine() {
        return Err(Error::Taxonomy(format!(
            "model predicts {} classes, taxonomy covers {}",
            model.config().num_classes,
            taxonomy.num_fine()
        )));
    }
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("expected a [3,H,W] image, got {s:?}")));
    }
    cfg.validate()?;
    let grid = tile_image(s[1], s[2], cfg.patch_size, cfg.patch_size)?;
    let fine = classify_patches(model, image, &grid, cfg.batch)?;
    let patch_probs = fine.iter().map(|p| fine_to_coarse(p, taxonomy)).collect::<Result<Vec<_>>>()?;
    let patch_labels: Vec<usize> = patch_probs.iter().map(|p| argmax(p)).collect();
    let segmentation = slic_segment(&smooth(image, cfg.smoothing)?, cfg.superpixels, cfg.compactness, cfg.slic_iters)?;
    let map = label_superpixels(&segmentation, &grid, &patch_labels, taxonomy.coarse_classes())?;
    Ok(MapResult {
        grid,
        segmentation,
        patch_probs,
        patch_labels,
        map,
    })
}
