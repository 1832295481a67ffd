//! Procedural texture benchmark with a controlled domain shift.
//!
//! Every source class is a texture family: an oriented sinusoid with its own
//! angle and frequency, a base color on the hue wheel and a blob layout.
//! Target coarse classes reuse the first few families; each is split into
//! subclasses by a frequency multiplier and a hue offset. Every target pixel
//! then goes through `gain * x + bias` per channel plus Gaussian noise.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Item, LabeledDataset, Split, Taxonomy};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShiftConfig {
    pub n_source_classes: usize,
    pub n_target_coarse: usize,
    pub subclasses_per_coarse: usize,
    pub channel_gain: [f32; 3],
    pub channel_bias: [f32; 3],
    pub noise_sigma: f32,
    /// Ratio between the highest and lowest subclass frequency multiplier.
    pub subclass_freq_ratio: f32,
    /// Subclass hue offsets span `[-subclass_hue_offset, subclass_hue_offset]`.
    pub subclass_hue_offset: f32,
    pub image_size: usize,
    pub images_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticShiftConfig {
    fn default() -> Self {
        Self {
            n_source_classes: 8,
            n_target_coarse: 5,
            subclasses_per_coarse: 2,
            channel_gain: [0.35, 0.45, 0.3],
            channel_bias: [0.45, 0.3, 0.35],
            noise_sigma: 0.05,
            subclass_freq_ratio: 1.3,
            subclass_hue_offset: 0.02,
            image_size: 64,
            images_per_class: 200,
            seed: 0,
        }
    }
}

impl SyntheticShiftConfig {
    /// 32x32 images, otherwise the defaults.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subclasses_per_coarse < 1 {
            return Err(Error::config("need at least one subclass per coarse class"));
        }
        if self.n_target_coarse < 1 || self.n_target_coarse > self.n_source_classes {
            return Err(Error::config(format!(
                "{} target coarse classes cannot reuse {} source families",
                self.n_target_coarse, self.n_source_classes
            )));
        }
        if self.n_source_classes < 2 {
            return Err(Error::config("need at least two source classes"));
        }
        if self.channel_gain.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::config("channel gains must be positive"));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise sigma must be non-negative"));
        }
        if !(self.subclass_freq_ratio >= 1.0) || !(self.subclass_hue_offset >= 0.0) {
            return Err(Error::config("subclass frequency ratio must be >= 1 and hue offset >= 0"));
        }
        if self.image_size < 4 || self.images_per_class < 1 {
            return Err(Error::config("image size must be >= 4 and classes non-empty"));
        }
        Ok(())
    }

    pub fn is_identity_shift(&self) -> bool {
        self.channel_gain == [1.0; 3] && self.channel_bias == [0.0; 3] && self.noise_sigma == 0.0
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("n_source_classes", self.n_source_classes);
        kv.set("n_target_coarse", self.n_target_coarse);
        kv.set("subclasses_per_coarse", self.subclasses_per_coarse);
        kv.set_list("channel_gain", &self.channel_gain);
        kv.set_list("channel_bias", &self.channel_bias);
        kv.set("noise_sigma", self.noise_sigma);
        kv.set("subclass_freq_ratio", self.subclass_freq_ratio);
        kv.set("subclass_hue_offset", self.subclass_hue_offset);
        kv.set("image_size", self.image_size);
        kv.set("images_per_class", self.images_per_class);
        kv.set("seed", self.seed);
        kv
    }

    /// Read from `kv`, keeping the value of `self` for absent keys.
    pub fn overlay_kv(&self, kv: &KvMap) -> Result<Self> {
        let triple = |key: &str, cur: [f32; 3]| -> Result<[f32; 3]> {
            match kv.get_list::<f32>(key)? {
                None => Ok(cur),
                Some(v) => v
                    .try_into()
                    .map_err(|_| Error::config(format!("`{key}` needs three values"))),
            }
        };
        let out = Self {
            n_source_classes: kv.get("n_source_classes")?.unwrap_or(self.n_source_classes),
            n_target_coarse: kv.get("n_target_coarse")?.unwrap_or(self.n_target_coarse),
            subclasses_per_coarse: kv.get("subclasses_per_coarse")?.unwrap_or(self.subclasses_per_coarse),
            channel_gain: triple("channel_gain", self.channel_gain)?,
            channel_bias: triple("channel_bias", self.channel_bias)?,
            noise_sigma: kv.get("noise_sigma")?.unwrap_or(self.noise_sigma),
            subclass_freq_ratio: kv.get("subclass_freq_ratio")?.unwrap_or(self.subclass_freq_ratio),
            subclass_hue_offset: kv.get("subclass_hue_offset")?.unwrap_or(self.subclass_hue_offset),
            image_size: kv.get("image_size")?.unwrap_or(self.image_size),
            images_per_class: kv.get("images_per_class")?.unwrap_or(self.images_per_class),
            seed: kv.get("seed")?.unwrap_or(self.seed),
        };
        out.validate()?;
        Ok(out)
    }
}

/// Class-level texture description.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureParams {
    /// Stripe angle in radians.
    pub orientation: f32,
    /// Stripe cycles per `image_size` pixels.
    pub frequency: f32,
    /// Base color position on the hue wheel, in turns.
    pub hue: f32,
    /// Blobs per `image_size x image_size` area.
    pub blob_density: f32,
    /// Blob radius as a fraction of `image_size`.
    pub blob_radius: f32,
}

impl TextureParams {
    pub fn source_family(i: usize, n: usize) -> Self {
        Self {
            orientation: i as f32 * PI / n as f32,
            frequency: 2.0 + 1.25 * (i % 3) as f32,
            hue: i as f32 / n as f32,
            blob_density: 1.0 + (i % 3) as f32,
            blob_radius: 0.08 + 0.04 * ((i / 3) % 2) as f32,
        }
    }

    /// Subclass `j` of `m` derived from source family `i` of `n`.
    pub fn target_subclass(i: usize, n: usize, j: usize, m: usize, freq_ratio: f32, hue_offset: f32) -> Self {
        let mut p = Self::source_family(i, n);
        if m > 1 {
            let t = j as f32 / (m - 1) as f32;
            p.frequency *= freq_ratio.powf(t - 0.5);
            p.hue += hue_offset * (2.0 * t - 1.0);
        }
        p
    }
}

fn hue_color(h: f32) -> [f32; 3] {
    let (s, v) = (0.7f32, 0.9f32);
    let h = h.rem_euclid(1.0) * 6.0;
    let sector = h.floor() as i32 % 6;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Per-image random draw of phase, orientation, frequency, hue, brightness
/// and blob positions.
struct Instance {
    color: [f32; 3],
    angle: f32,
    freq: f32,
    phase: f32,
    brightness: f32,
    radius: f32,
    blobs: Vec<(f32, f32)>,
}

impl Instance {
    fn draw(p: &TextureParams, size: usize, area: (f32, f32, f32, f32), rng: &mut ChaCha8Rng) -> Self {
        let (x0, y0, w, h) = area;
        let n_blobs = p.blob_density * w * h / (size * size) as f32;
        let n = n_blobs.floor() as usize + usize::from(rng.random::<f32>() < n_blobs.fract());
        Self {
            color: hue_color(p.hue + rng.random_range(-0.02..0.02)),
            angle: p.orientation + rng.random_range(-0.12..0.12),
            freq: p.frequency * rng.random_range(0.9..1.1) / size as f32,
            phase: rng.random_range(0.0..2.0 * PI),
            brightness: rng.random_range(0.9..1.1),
            radius: p.blob_radius * size as f32,
            blobs: (0..n)
                .map(|_| (x0 + rng.random::<f32>() * w, y0 + rng.random::<f32>() * h))
                .collect(),
        }
    }

    fn pixel(&self, x: f32, y: f32) -> [f32; 3] {
        let (s, c) = self.angle.sin_cos();
        let stripe = 0.5 + 0.5 * (2.0 * PI * self.freq * (x * c + y * s) + self.phase).sin();
        let r2 = self.radius * self.radius;
        let mut blob = 0f32;
        for &(bx, by) in &self.blobs {
            let d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
            if d2 < 9.0 * r2 {
                blob += (-d2 / (2.0 * r2)).exp();
            }
        }
        let blob = blob.min(1.0) * 0.3;
        let k = (0.45 + 0.55 * stripe) * self.brightness;
        [
            (self.color[0] * k + blob).clamp(0.0, 1.0),
            (self.color[1] * k + blob).clamp(0.0, 1.0),
            (self.color[2] * k + blob).clamp(0.0, 1.0),
        ]
    }
}

/// Applies `gain * x + bias` and noise from its own stream, then clips.
struct Shift {
    gain: [f32; 3],
    bias: [f32; 3],
    noise: Option<Normal<f32>>,
    rng: ChaCha8Rng,
}

impl Shift {
    fn new(cfg: &SyntheticShiftConfig, stream: u64) -> Self {
        Self {
            gain: cfg.channel_gain,
            bias: cfg.channel_bias,
            noise: (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("valid sigma")),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ stream),
        }
    }

    fn apply(&mut self, img: &mut Tensor<f32>) {
        let plane = img.len() / 3;
        for (c, p) in img.data_mut().chunks_mut(plane).enumerate() {
            for v in p {
                let mut x = self.gain[c] * *v + self.bias[c];
                if let Some(n) = &self.noise {
                    x += n.sample(&mut self.rng);
                }
                *v = x.clamp(0.0, 1.0);
            }
        }
    }
}

fn render(inst: &Instance, x0: usize, y0: usize, w: usize, h: usize, out: &mut [f32], stride: usize, plane: usize) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let px = inst.pixel(x as f32, y as f32);
            for c in 0..3 {
                out[c * plane + y * stride + x] = px[c];
            }
        }
    }
}

fn texture_image(p: &TextureParams, size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let inst = Instance::draw(p, size, (0.0, 0.0, size as f32, size as f32), rng);
    let mut data = vec![0f32; 3 * size * size];
    render(&inst, 0, 0, size, size, &mut data, size, size * size);
    Tensor::new(&[3, size, size], data).expect("non-empty image")
}

const SOURCE_STREAM: u64 = 0x5eed_0001;
const TARGET_STREAM: u64 = 0x5eed_0002;
const NOISE_STREAM: u64 = 0x5eed_0003;
const MOSAIC_STREAM: u64 = 0x5eed_0004;
const MOSAIC_NOISE_STREAM: u64 = 0x5eed_0005;

fn split_seed(cfg: &SyntheticShiftConfig) -> u64 {
    cfg.seed.wrapping_add(1)
}

/// Generate the source and shifted target datasets, both split 60/20/20.
pub fn synth_domain_pair(cfg: &SyntheticShiftConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    cfg.validate()?;
    let (n, s) = (cfg.n_source_classes, cfg.image_size);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SOURCE_STREAM);
    let mut items = Vec::with_capacity(n * cfg.images_per_class);
    for i in 0..n {
        let p = TextureParams::source_family(i, n);
        for _ in 0..cfg.images_per_class {
            items.push(Item {
                image: texture_image(&p, s, &mut rng),
                label: i,
                split: Split::Train,
            });
        }
    }
    let names: Vec<String> = (0..n).map(|i| format!("family{i}")).collect();
    let mut source = LabeledDataset {
        items,
        taxonomy: Taxonomy::identity(&names),
        fine_classes: names,
        source_family: None,
    };
    source.assign_splits(0.6, 0.2, split_seed(cfg));

    let m = cfg.subclasses_per_coarse;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TARGET_STREAM);
    let mut shift = Shift::new(cfg, NOISE_STREAM);
    let mut items = Vec::new();
    let mut fine = Vec::new();
    let mut to_coarse = Vec::new();
    for c in 0..cfg.n_target_coarse {
        for j in 0..m {
            let label = fine.len();
            fine.push(format!("coarse{c}_sub{j}"));
            to_coarse.push(c);
            let p = TextureParams::target_subclass(c, n, j, m, cfg.subclass_freq_ratio, cfg.subclass_hue_offset);
            for _ in 0..cfg.images_per_class {
                let mut image = texture_image(&p, s, &mut rng);
                shift.apply(&mut image);
                items.push(Item {
                    image,
                    label,
                    split: Split::Train,
                });
            }
        }
    }
    let coarse = (0..cfg.n_target_coarse).map(|c| format!("coarse{c}")).collect();
    let mut target = LabeledDataset {
        items,
        taxonomy: Taxonomy::from_indices(coarse, to_coarse.clone())?,
        fine_classes: fine,
        source_family: Some(to_coarse),
    };
    target.assign_splits(0.6, 0.2, split_seed(cfg));
    Ok((source, target))
}

/// Large target-domain scene with a known coarse-class raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Mosaic {
    /// `[3, H, W]`.
    pub image: Tensor<f32>,
    /// Row-major coarse label per pixel.
    pub truth: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub coarse_classes: Vec<String>,
}

/// Render a `size x size` scene of four rectangular regions holding coarse
/// classes 0..4, split at `(0.47 size, 0.53 size)` so region borders do not
/// fall on patch boundaries. Any further coarse classes are absent.
/// Region `r` uses subclass `r % subclasses_per_coarse`.
pub fn synth_mosaic(cfg: &SyntheticShiftConfig, size: usize) -> Result<Mosaic> {
    cfg.validate()?;
    if cfg.n_target_coarse < 4 {
        return Err(Error::config("a mosaic needs at least four target coarse classes"));
    }
    if size < 8 {
        return Err(Error::config("mosaic too small"));
    }
    let (n, m, s) = (cfg.n_source_classes, cfg.subclasses_per_coarse, cfg.image_size);
    let sx = (size as f32 * 0.47).round() as usize;
    let sy = (size as f32 * 0.53).round() as usize;
    let regions = [(0, 0, sx, sy), (sx, 0, size - sx, sy), (0, sy, sx, size - sy), (sx, sy, size - sx, size - sy)];
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    let mut truth = vec![0usize; plane];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ MOSAIC_STREAM);
    for (r, &(x0, y0, w, h)) in regions.iter().enumerate() {
        let p = TextureParams::target_subclass(r, n, r % m, m, cfg.subclass_freq_ratio, cfg.subclass_hue_offset);
        let area = (x0 as f32, y0 as f32, w as f32, h as f32);
        let inst = Instance::draw(&p, s, area, &mut rng);
        render(&inst, x0, y0, w, h, &mut data, size, plane);
        for y in y0..y0 + h {
            truth[y * size + x0..y * size + x0 + w].fill(r);
        }
    }
    let mut image = Tensor::new(&[3, size, size], data)?;
    Shift::new(cfg, MOSAIC_NOISE_STREAM).apply(&mut image);
    Ok(Mosaic {
        image,
        truth,
        height: size,
        width: size,
        coarse_classes: (0..cfg.n_target_coarse).map(|c| format!("coarse{c}")).collect(),
    })
}

/// Un-shifted target generator output, for checking the shift in isolation.
#[cfg(test)]
pub(crate) fn raw_target_images(cfg: &SyntheticShiftConfig) -> Vec<Tensor<f32>> {
    let (n, m, s) = (cfg.n_source_classes, cfg.subclasses_per_coarse, cfg.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TARGET_STREAM);
    let mut out = Vec::new();
    for c in 0..cfg.n_target_coarse {
        for j in 0..m {
            let p = TextureParams::target_subclass(c, n, j, m, cfg.subclass_freq_ratio, cfg.subclass_hue_offset);
            for _ in 0..cfg.images_per_class {
                out.push(texture_image(&p, s, &mut rng));
            }
        }
    }
    out
}
