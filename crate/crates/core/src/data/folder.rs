//! `root/<class_name>/<image files>` datasets and `fine=coarse` taxonomy files.
//!
//! Files whose names all start with `train_`, `val_` or `test_` keep those
//! split tags; otherwise a seeded 60/20/20 split is assigned per class.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, Rgb32FImage, RgbImage};

use super::{Item, LabeledDataset, Split, Taxonomy};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;

const IMAGE_EXTS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff"];
const SPLIT_SEED: u64 = 0;

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
}

fn split_from_name(p: &Path) -> Option<Split> {
    let name = p.file_name()?.to_str()?;
    if name.starts_with("train_") {
        Some(Split::Train)
    } else if name.starts_with("val_") {
        Some(Split::Val)
    } else if name.starts_with("test_") {
        Some(Split::Test)
    } else {
        None
    }
}

/// Decode an image file into a `[3, size, size]` tensor in `[0, 1]`.
pub(crate) fn decode_image(path: &Path, size: Option<usize>) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rgb = img.to_rgb32f();
    if let Some(s) = size {
        if rgb.width() as usize != s || rgb.height() as usize != s {
            rgb = image::imageops::resize(&rgb, s as u32, s as u32, FilterType::Triangle);
        }
    }
    Ok(rgb_to_tensor(&rgb))
}

/// Decode any supported image file at its native size.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_image(path.as_ref(), None)
}

/// Write a `[3, H, W]` tensor in `[0, 1]` as an 8-bit PNG.
pub fn save_image(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(format!("expected a [3,H,W] image, got {s:?}")));
    }
    tensor_to_rgb8(image).save(path.as_ref()).map_err(Error::Image)
}

pub(crate) fn rgb_to_tensor(rgb: &Rgb32FImage) -> Tensor<f32> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (x, y, px) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * w * h + i] = px.0[c].clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, h, w], data).expect("non-empty image")
}

pub(crate) fn tensor_to_rgb8(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (d[c * w * h + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

pub fn read_taxonomy_file(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let kv = KvMap::parse(&text).map_err(|e| Error::Taxonomy(e.to_string()))?;
    Ok(kv.keys().map(|k| (k.to_string(), kv.get_str(k).unwrap().to_string())).collect())
}

pub fn write_taxonomy_file(path: impl AsRef<Path>, fine_classes: &[String], taxonomy: &Taxonomy) -> Result<()> {
    let mut s = String::new();
    for (i, f) in fine_classes.iter().enumerate() {
        s.push_str(&format!("{f}={}\n", taxonomy.coarse_classes()[taxonomy.coarse_of(i)?]));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Load `root/<class>/<images>`; classes and files are taken in
/// lexicographic order. Images are resized to `image_size` when given,
/// otherwise they must all share the first image's square size.
pub fn load_folder_dataset(root: impl AsRef<Path>, taxonomy_file: Option<&Path>, image_size: Option<usize>) -> Result<LabeledDataset> {
    let root = root.as_ref();
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} has no class directories", root.display())));
    }
    let mut fine_classes = Vec::new();
    let mut items = Vec::new();
    let mut tagged = true;
    let mut size = image_size;
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} holds no images", dir.display())));
        }
        for f in files {
            let image = decode_image(&f, size)?;
            let (h, w) = (image.shape()[1], image.shape()[2]);
            match size {
                None if h == w => size = Some(h),
                Some(s) if h == s && w == s => {}
                _ => {
                    return Err(Error::Data(format!(
                        "{} is {w}x{h}; pass an image size to resize",
                        f.display()
                    )))
                }
            }
            let split = split_from_name(&f);
            tagged &= split.is_some();
            items.push(Item {
                image,
                label,
                split: split.unwrap_or(Split::Train),
            });
        }
        fine_classes.push(name);
    }
    let taxonomy = match taxonomy_file {
        Some(p) => Taxonomy::from_pairs(&fine_classes, &read_taxonomy_file(p)?)?,
        None => Taxonomy::identity(&fine_classes),
    };
    let mut ds = LabeledDataset {
        items,
        fine_classes,
        taxonomy,
        source_family: None,
    };
    if !tagged {
        ds.assign_splits(0.6, 0.2, SPLIT_SEED);
    }
    Ok(ds)
}

/// Write `ds` as `root/<class>/<split>_<index>.png` plus `root/taxonomy.txt`.
pub fn export_folder_dataset(ds: &LabeledDataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    for name in &ds.fine_classes {
        fs::create_dir_all(root.join(name))?;
    }
    let mut counters = vec![0usize; ds.num_classes()];
    for it in &ds.items {
        let tag = match it.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        let k = counters[it.label];
        counters[it.label] += 1;
        let path = root.join(&ds.fine_classes[it.label]).join(format!("{tag}_{k:05}.png"));
        tensor_to_rgb8(&it.image).save(&path)?;
    }
    write_taxonomy_file(root.join("taxonomy.txt"), &ds.fine_classes, &ds.taxonomy)
}
