//! SLIC superpixels on RGB images in `[0, 1]`.

use image::{imageops, ImageBuffer, Rgb, Rgb32FImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Superpixel label per pixel, row-major, labels contiguous in
/// `0..k_actual`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub k_requested: usize,
    pub k_actual: usize,
}

impl Segmentation {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k_actual];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

#[derive(Clone, Copy)]
struct Center {
    rgb: [f32; 3],
    x: f32,
    y: f32,
}

fn grid_centers(h: usize, w: usize, k: usize, img: &[f32]) -> Vec<Center> {
    let nx = ((k as f64 * w as f64 / h as f64).sqrt().ceil() as usize).clamp(1, k.min(w));
    let ny = (k / nx).clamp(1, h);
    let plane = h * w;
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f32 + 0.5) * w as f32 / nx as f32;
            let y = (j as f32 + 0.5) * h as f32 / ny as f32;
            let p = (y as usize).min(h - 1) * w + (x as usize).min(w - 1);
            out.push(Center {
                rgb: [img[p], img[plane + p], img[2 * plane + p]],
                x,
                y,
            });
        }
    }
    out
}

/// Gaussian blur of a `[3,H,W]` image with standard deviation `sigma`
/// pixels; `sigma == 0` returns a copy.
pub fn smooth(image: &Tensor<f32>, sigma: f32) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(format!("smoothing expects a [3,H,W] image, got {s:?}")));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("smoothing sigma {sigma} must be finite and >= 0")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let d = image.data();
    let rgb: Rgb32FImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([d[p], d[n + p], d[2 * n + p]])
    });
    let blurred = imageops::blur(&rgb, sigma);
    let mut out = vec![0f32; 3 * n];
    for (p, px) in blurred.pixels().enumerate() {
        for c in 0..3 {
            out[c * n + p] = px.0[c];
        }
    }
    Tensor::new(&[3, h, w], out)
}

/// Cluster pixels into about `k` compact regions. Distances combine RGB
/// difference with spatial offset scaled by `compactness / S`, where
/// `S = sqrt(H W / k)` is the grid spacing; each center searches a
/// `2S x 2S` window. Afterwards every label is made 4-connected: stray
/// pieces and fragments under a quarter cell merge into the largest
/// adjacent segment.
pub fn slic_segment(image: &Tensor<f32>, k: usize, compactness: f32, iters: usize) -> Result<Segmentation> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(format!("SLIC expects a [3,H,W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    if k == 0 || k > n {
        return Err(Error::config(format!("cannot form {k} superpixels from {n} pixels")));
    }
    if iters == 0 || !(compactness >= 0.0) {
        return Err(Error::config("SLIC needs at least one iteration and non-negative compactness"));
    }
    let img = image.data();
    let step = (n as f32 / k as f32).sqrt();
    let spatial = compactness / step;
    let radius = step.ceil() as isize;
    let mut centers = grid_centers(h, w, k, img);
    let mut labels = vec![usize::MAX; n];
    let mut dist = vec![f32::INFINITY; n];

    let d2 = |c: &Center, p: usize| -> f32 {
        let (x, y) = ((p % w) as f32, (p / w) as f32);
        let dr = img[p] - c.rgb[0];
        let dg = img[n + p] - c.rgb[1];
        let db = img[2 * n + p] - c.rgb[2];
        let (dx, dy) = ((x - c.x) * spatial, (y - c.y) * spatial);
        dr * dr + dg * dg + db * db + dx * dx + dy * dy
    };

    for _ in 0..iters {
        labels.fill(usize::MAX);
        dist.fill(f32::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let (cx, cy) = (c.x as isize, c.y as isize);
            let y0 = (cy - radius).max(0) as usize;
            let y1 = ((cy + radius + 1).max(0) as usize).min(h);
            let x0 = (cx - radius).max(0) as usize;
            let x1 = ((cx + radius + 1).max(0) as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * w + x;
                    let d = d2(c, p);
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = ci;
                    }
                }
            }
        }
        // pixels outside every window go to the nearest center
        for p in 0..n {
            if labels[p] == usize::MAX {
                let (ci, _) = centers
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (i, d2(c, p)))
                    .fold((0, f32::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                labels[p] = ci;
            }
        }
        let mut acc = vec![[0f64; 6]; centers.len()];
        for (p, &l) in labels.iter().enumerate() {
            let a = &mut acc[l];
            a[0] += img[p] as f64;
            a[1] += img[n + p] as f64;
            a[2] += img[2 * n + p] as f64;
            a[3] += (p % w) as f64;
            a[4] += (p / w) as f64;
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                let m = |v: f64| (v / a[5]) as f32;
                *c = Center {
                    rgb: [m(a[0]), m(a[1]), m(a[2])],
                    x: m(a[3]),
                    y: m(a[4]),
                };
            }
        }
    }

    let min_size = ((step * step / 4.0) as usize).max(1);
    let (labels, k_actual) = enforce_connectivity(&labels, h, w, min_size);
    Ok(Segmentation {
        labels,
        height: h,
        width: w,
        k_requested: k,
        k_actual,
    })
}

/// 4-connected components of equal labels: component id per pixel and
/// component sizes.
fn components(labels: &[usize], h: usize, w: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let n = h * w;
    let mut comp = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    let mut comp_label = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let l = labels[start];
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && labels[q] == l {
                    comp[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        sizes.push(size);
        comp_label.push(l);
    }
    (comp, sizes, comp_label)
}

fn enforce_connectivity(labels: &[usize], h: usize, w: usize, min_size: usize) -> (Vec<usize>, usize) {
    let (comp, sizes, comp_label) = components(labels, h, w);
    let nc = sizes.len();
    let n_labels = comp_label.iter().max().map_or(0, |m| m + 1);
    let mut largest: Vec<Option<usize>> = vec![None; n_labels];
    for c in 0..nc {
        let l = comp_label[c];
        if largest[l].is_none_or(|b| sizes[c] > sizes[b]) {
            largest[l] = Some(c);
        }
    }
    // owner[c]: the kept component that c ends up in
    let mut owner: Vec<Option<usize>> = (0..nc)
        .map(|c| (largest[comp_label[c]] == Some(c) && sizes[c] >= min_size).then_some(c))
        .collect();
    if owner.iter().all(Option::is_none) {
        let big = (0..nc).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).expect("non-empty image");
        owner[big] = Some(big);
    }

    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for p in 0..h * w {
        let (x, y) = (p % w, p / w);
        for q in [(x + 1 < w).then(|| p + 1), (y + 1 < h).then(|| p + w)].into_iter().flatten() {
            let (a, b) = (comp[p], comp[q]);
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }

    let mut seg_size: Vec<usize> = (0..nc).map(|c| if owner[c] == Some(c) { sizes[c] } else { 0 }).collect();
    loop {
        let mut progressed = false;
        let mut pending = false;
        for c in 0..nc {
            if owner[c].is_some() {
                continue;
            }
            let target = adj[c]
                .iter()
                .filter_map(|&d| owner[d])
                .max_by_key(|&o| (seg_size[o], std::cmp::Reverse(o)));
            match target {
                Some(o) => {
                    owner[c] = Some(o);
                    seg_size[o] += sizes[c];
                    progressed = true;
                }
                None => pending = true,
            }
        }
        if !pending {
            break;
        }
        assert!(progressed, "orphan components with no path to a kept segment");
    }

    let mut relabel = vec![usize::MAX; nc];
    let mut next = 0;
    let mut out = vec![0; h * w];
    for p in 0..h * w {
        let o = owner[comp[p]].expect("all components resolved");
        if relabel[o] == usize::MAX {
            relabel[o] = next;
            next += 1;
        }
        out[p] = relabel[o];
    }
    (out, next)
}
