//! Pseudo-anomaly synthesis.
//!
//! Augmented anomalies perturb one k-means superpixel of a normal image.
//! Generated anomalies fill a union of random ellipses with procedural
//! content (value-noise texture, shifted intensity, blurred original),
//! standing in for an inpainting model; externally generated images can be
//! ingested instead.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{load_image, Image, Mask};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, stream};

pub const KMEANS_MAX_ITERS: usize = 50;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMap {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub labels: Vec<usize>,
}

impl SuperpixelMap {
    pub fn cluster_mask(&self, cluster: usize) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.labels.iter().map(|&l| l == cluster).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

fn pixel_features(image: &Image, alpha: f64) -> Vec<[f64; 3]> {
    let (h, w) = (image.height, image.width);
    let sy = if h > 1 { 1.0 / (h - 1) as f64 } else { 0.0 };
    let sx = if w > 1 { 1.0 / (w - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push([f64::from(image.intensity(y, x)), alpha * x as f64 * sx, alpha * y as f64 * sy]);
        }
    }
    out
}

/// Lloyd's k-means on `(intensity, α·x, α·y)` with coordinates scaled to
/// `[0,1]`. Returns the map and the within-cluster objective after every
/// iteration.
pub fn kmeans_with_trace<R: Rng + ?Sized>(image: &Image, k: usize, alpha: f64, rng: &mut R) -> Result<(SuperpixelMap, Vec<f64>)> {
    let feats = pixel_features(image, alpha);
    let n = feats.len();
    if k == 0 || k > n {
        return Err(Error::config("pseudo.augment.k", format!("k={k} for {n} pixels")));
    }
    // k-means++ seeding.
    let mut centers = vec![feats[rng.gen_range(0..n)]];
    let mut d2: Vec<f64> = feats.iter().map(|f| sq_dist(f, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    chosen = i;
                    break;
                }
                t -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.push(feats[pick]);
        for (d, f) in d2.iter_mut().zip(&feats) {
            *d = d.min(sq_dist(f, &centers[centers.len() - 1]));
        }
    }

    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, f) in feats.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(f, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        reseed_empty(&feats, &mut labels, &mut centers);
        update_centers(&feats, &labels, &mut centers);
        trace.push(objective(&feats, &labels, &centers));
        if !changed {
            break;
        }
    }
    Ok((
        SuperpixelMap {
            height: image.height,
            width: image.width,
            k,
            labels,
        },
        trace,
    ))
}

pub fn kmeans_superpixels<R: Rng + ?Sized>(image: &Image, k: usize, alpha: f64, rng: &mut R) -> Result<SuperpixelMap> {
    Ok(kmeans_with_trace(image, k, alpha, rng)?.0)
}

/// Moves the point farthest from its centroid (among clusters with more
/// than one member) into each empty cluster.
fn reseed_empty(feats: &[[f64; 3]], labels: &mut [usize], centers: &mut [[f64; 3]]) {
    let k = centers.len();
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let far = (0..feats.len())
            .filter(|&i| sizes[labels[i]] > 1)
            .max_by(|&a, &b| {
                sq_dist(&feats[a], &centers[labels[a]])
                    .partial_cmp(&sq_dist(&feats[b], &centers[labels[b]]))
                    .expect("finite features")
            })
            .expect("more pixels than clusters");
        sizes[labels[far]] -= 1;
        labels[far] = j;
        sizes[j] = 1;
        centers[j] = feats[far];
    }
}

fn update_centers(feats: &[[f64; 3]], labels: &[usize], centers: &mut [[f64; 3]]) {
    let mut sums = vec![[0.0; 3]; centers.len()];
    let mut counts = vec![0usize; centers.len()];
    for (f, &l) in feats.iter().zip(labels) {
        for c in 0..3 {
            sums[l][c] += f[c];
        }
        counts[l] += 1;
    }
    for (j, c) in centers.iter_mut().enumerate() {
        if counts[j] > 0 {
            *c = sums[j].map(|s| s / counts[j] as f64);
        }
    }
}

fn objective(feats: &[[f64; 3]], labels: &[usize], centers: &[[f64; 3]]) -> f64 {
    feats.iter().zip(labels).map(|(f, &l)| sq_dist(f, &centers[l])).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub alpha: f64,
    pub min_cluster_pixels: usize,
    pub max_ops: usize,
    pub shift: [f64; 2],
    pub noise_sigma: [f64; 2],
    /// Displacement amplitude in pixels at 256² (scaled with image size).
    pub distortion: [f64; 2],
    pub opacity: [f64; 2],
    pub defect_depth: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            k_min: 3,
            k_max: 8,
            alpha: 0.5,
            min_cluster_pixels: 16,
            max_ops: 3,
            shift: [0.1, 0.3],
            noise_sigma: [0.03, 0.1],
            distortion: [4.0, 12.0],
            opacity: [0.3, 0.7],
            defect_depth: [0.1, 0.3],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(Error::config("pseudo.augment.k_min", format!("[{}, {}] is not a valid interval", self.k_min, self.k_max)));
        }
        if self.max_ops == 0 {
            return Err(Error::config("pseudo.augment.max_ops", "must be at least 1"));
        }
        for (name, r) in [
            ("shift", self.shift),
            ("noise_sigma", self.noise_sigma),
            ("distortion", self.distortion),
            ("opacity", self.opacity),
            ("defect_depth", self.defect_depth),
        ] {
            if !(r[0] >= 0.0 && r[0] <= r[1]) {
                return Err(Error::config(format!("pseudo.augment.{name}"), format!("{r:?} is not a valid range")));
            }
        }
        Ok(())
    }
}

/// One perturbation applied inside the chosen superpixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    IntensityShift { delta: f64 },
    Noise { sigma: f64, seed: u64 },
    /// Sinusoidal displacement field sampled inside the cluster's bounding box.
    SpatialDistortion { amplitude: f64, wavelength: f64, phase: f64 },
    /// Blend toward a constant level.
    OpacityArtifact { level: f64, opacity: f64 },
    /// Periodic bands of altered intensity.
    StructuralDefect { depth: f64, period: f64, angle: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecipe {
    pub k: usize,
    pub alpha: f64,
    pub kmeans_seed: u64,
    pub cluster: usize,
    pub ops: Vec<AugOp>,
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

/// Samples a recipe, applies it, and returns `(X^aug, mask, recipe)`.
pub fn synthesize_augmented<R: Rng + ?Sized>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<(Image, Mask, AugmentationRecipe)> {
    cfg.validate()?;
    let k = rng.gen_range(cfg.k_min..=cfg.k_max).min(image.height * image.width);
    let kmeans_seed: u64 = rng.gen();
    let map = kmeans_superpixels(image, k, cfg.alpha, &mut rng_for(kmeans_seed, &[]))?;
    let sizes = map.sizes();
    let eligible: Vec<usize> = (0..k).filter(|&c| sizes[c] >= cfg.min_cluster_pixels).collect();
    let cluster = match eligible.choose(rng) {
        Some(&c) => c,
        None => (0..k).max_by_key(|&c| sizes[c]).expect("k ≥ 1"),
    };
    let scale = image.height.max(image.width) as f64 / 256.0;
    let mut kinds = vec![0u8, 1, 2, 3, 4];
    kinds.shuffle(rng);
    let count = rng.gen_range(1..=cfg.max_ops.min(5));
    let ops = kinds[..count]
        .iter()
        .map(|&kind| match kind {
            0 => {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                AugOp::IntensityShift { delta: sign * sample_range(rng, cfg.shift) }
            }
            1 => AugOp::Noise { sigma: sample_range(rng, cfg.noise_sigma), seed: rng.gen() },
            2 => AugOp::SpatialDistortion {
                amplitude: sample_range(rng, cfg.distortion) * scale,
                wavelength: rng.gen_range(16.0..64.0) * scale,
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            },
            3 => AugOp::OpacityArtifact {
                level: if rng.gen_bool(0.5) { rng.gen_range(0.0..0.15) } else { rng.gen_range(0.85..1.0) },
                opacity: sample_range(rng, cfg.opacity),
            },
            _ => AugOp::StructuralDefect {
                depth: sample_range(rng, cfg.defect_depth),
                period: rng.gen_range(4.0..12.0) * scale.max(0.25),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            },
        })
        .collect();
    let recipe = AugmentationRecipe {
        k,
        alpha: cfg.alpha,
        kmeans_seed,
        cluster,
        ops,
    };
    let (out, mask) = apply_recipe(image, &recipe)?;
    Ok((out, mask, recipe))
}

/// Re-runs the clustering recorded in `recipe` and applies its operations
/// to pixels of the chosen cluster.
pub fn apply_recipe(image: &Image, recipe: &AugmentationRecipe) -> Result<(Image, Mask)> {
    let map = kmeans_superpixels(image, recipe.k, recipe.alpha, &mut rng_for(recipe.kmeans_seed, &[]))?;
    if recipe.cluster >= recipe.k {
        return Err(Error::Format(format!("recipe cluster {} of {}", recipe.cluster, recipe.k)));
    }
    let mask = map.cluster_mask(recipe.cluster);
    let (h, w, ch) = (image.height, image.width, image.channels);
    let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
        }
    }
    let mut out = image.clone();
    for op in &recipe.ops {
        let src = out.clone();
        let mut noise = match op {
            AugOp::Noise { sigma, seed } if *sigma > 0.0 => Some((Normal::new(0.0, *sigma).expect("positive sigma"), rng_for(*seed, &[]))),
            _ => None,
        };
        for y in 0..h {
            for x in 0..w {
                if !mask.get(y, x) {
                    continue;
                }
                let warped = match op {
                    AugOp::SpatialDistortion { amplitude, wavelength, phase } => {
                        let tau = std::f64::consts::TAU;
                        let sy = y as f64 + amplitude * (tau * x as f64 / wavelength + phase).sin();
                        let sx = x as f64 + amplitude * (tau * y as f64 / wavelength + phase).cos();
                        Some((sy.clamp(y0 as f64, y1 as f64), sx.clamp(x0 as f64, x1 as f64)))
                    }
                    _ => None,
                };
                let n = noise.as_mut().map(|(d, r)| d.sample(r));
                for c in 0..ch {
                    let v = f64::from(src.get(y, x, c));
                    let nv = match op {
                        AugOp::IntensityShift { delta } => v + delta,
                        AugOp::Noise { .. } => v + n.unwrap_or(0.0),
                        AugOp::SpatialDistortion { .. } => {
                            let (sy, sx) = warped.expect("computed above");
                            bilinear(&src, sy, sx, c)
                        }
                        AugOp::OpacityArtifact { level, opacity } => (1.0 - opacity) * v + opacity * level,
                        AugOp::StructuralDefect { depth, period, angle } => {
                            let t = x as f64 * angle.cos() + y as f64 * angle.sin();
                            let band = if (t / period).rem_euclid(1.0) < 0.5 { 1.0 } else { -1.0 };
                            v + depth * band
                        }
                    };
                    out.set(y, x, c, nv.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    Ok((out, mask))
}

fn bilinear(img: &Image, y: f64, x: f64, c: usize) -> f64 {
    let (yf, xf) = (y.floor(), x.floor());
    let (ty, tx) = (y - yf, x - xf);
    let y0 = yf as usize;
    let x0 = xf as usize;
    let y1 = (y0 + 1).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let g = |yy: usize, xx: usize| f64::from(img.get(yy, xx, c));
    if ty == 0.0 && tx == 0.0 {
        return g(y0, x0);
    }
    (1.0 - ty) * ((1.0 - tx) * g(y0, x0) + tx * g(y0, x1)) + ty * ((1.0 - tx) * g(y1, x0) + tx * g(y1, x1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EllipseConfig {
    pub max_count: usize,
    /// Semi-axis range in pixels at 256² (scaled with image size).
    pub axes: [f64; 2],
    pub area: [f64; 2],
    pub attempts: usize,
}

impl Default for EllipseConfig {
    fn default() -> Self {
        Self {
            max_count: 5,
            axes: [4.0, 48.0],
            area: [0.01, 0.25],
            attempts: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub a: f64,
    pub b: f64,
    pub rotation: f64,
}

impl Ellipse {
    /// Closed ellipse test at integer pixel coordinates.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f64 - self.cy, x as f64 - self.cx);
        let (s, c) = self.rotation.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0 + 1e-12
    }

    pub fn rasterize_into(&self, mask: &mut Mask) {
        for y in 0..mask.height {
            for x in 0..mask.width {
                if self.contains(y, x) {
                    mask.set(y, x, true);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseMaskSpec {
    pub ellipses: Vec<Ellipse>,
    /// `(y0, x0, y1, x1)`, exclusive upper bounds.
    pub bounds: Option<(usize, usize, usize, usize)>,
}

/// Union of 1..=max_count random ellipses with centers inside `bounds`,
/// resampled until the area fraction is within the configured interval.
pub fn make_ellipse_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    bounds: Option<(usize, usize, usize, usize)>,
    rng: &mut R,
    cfg: &EllipseConfig,
) -> Result<(Mask, EllipseMaskSpec)> {
    if cfg.max_count == 0 {
        return Err(Error::config("pseudo.ellipse.max_count", "must be at least 1"));
    }
    let (y0, x0, y1, x1) = bounds.unwrap_or((0, 0, height, width));
    if y0 >= y1 || x0 >= x1 || y1 > height || x1 > width {
        return Err(Error::Precondition(format!("bounds {:?} empty or outside {height}×{width}", (y0, x0, y1, x1))));
    }
    let scale = height.max(width) as f64 / 256.0;
    let amin = (cfg.axes[0] * scale).max(1.0);
    let amax = (cfg.axes[1] * scale).max(amin);
    for _ in 0..cfg.attempts.max(1) {
        let count = rng.gen_range(1..=cfg.max_count);
        let ellipses: Vec<Ellipse> = (0..count)
            .map(|_| Ellipse {
                cy: rng.gen_range(y0..y1) as f64,
                cx: rng.gen_range(x0..x1) as f64,
                a: rng.gen_range(amin..=amax).round().max(1.0),
                b: rng.gen_range(amin..=amax).round().max(1.0),
                rotation: rng.gen_range(0.0..std::f64::consts::PI),
            })
            .collect();
        let mut mask = Mask::empty(height, width);
        for e in &ellipses {
            e.rasterize_into(&mut mask);
        }
        let frac = mask.area_fraction();
        if frac >= cfg.area[0] && frac <= cfg.area[1] {
            return Ok((mask, EllipseMaskSpec { ellipses, bounds }));
        }
    }
    Err(Error::config(
        "pseudo.ellipse.area",
        format!("no mask within {:?} after {} attempts", cfg.area, cfg.attempts),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratedConfig {
    pub opacity: [f64; 2],
    pub feather: usize,
    /// Value-noise cell size in pixels at 256² (scaled with image size).
    pub texture_scale: [f64; 2],
    pub shift: [f64; 2],
    pub blur_radius: [usize; 2],
}

impl Default for GeneratedConfig {
    fn default() -> Self {
        Self {
            opacity: [0.4, 0.9],
            feather: 2,
            texture_scale: [8.0, 48.0],
            shift: [0.1, 0.35],
            blur_radius: [2, 6],
        }
    }
}

/// Procedural inpainting recipe, kept so results can be reproduced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FillRecipe {
    pub opacity: f64,
    pub texture_cell: f64,
    pub texture_seed: u64,
    pub shift: f64,
    pub blur_radius: usize,
    /// Mixing weights of texture, shifted original, blurred original.
    pub mix: [f64; 3],
}

pub fn sample_fill<R: Rng + ?Sized>(size: usize, cfg: &GeneratedConfig, rng: &mut R) -> FillRecipe {
    let scale = size as f64 / 256.0;
    let raw: [f64; 3] = [rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)];
    let s: f64 = raw.iter().sum();
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    FillRecipe {
        opacity: sample_range(rng, cfg.opacity),
        texture_cell: (sample_range(rng, cfg.texture_scale) * scale).max(2.0),
        texture_seed: rng.gen(),
        shift: sign * sample_range(rng, cfg.shift),
        blur_radius: rng.gen_range(cfg.blur_radius[0]..=cfg.blur_radius[1].max(cfg.blur_radius[0])),
        mix: raw.map(|r| r / s),
    }
}

/// Blends procedural content into `image` inside `mask` (feathered outward
/// by `cfg.feather` pixels). Pixels farther than the feather band from the
/// mask are untouched.
pub fn synthesize_generated<R: Rng + ?Sized>(image: &Image, mask: &Mask, rng: &mut R, cfg: &GeneratedConfig) -> Result<Image> {
    let recipe = sample_fill(image.height.max(image.width), cfg, rng);
    apply_fill(image, mask, &recipe, cfg.feather)
}

pub fn apply_fill(image: &Image, mask: &Mask, recipe: &FillRecipe, feather: usize) -> Result<Image> {
    if mask.count() == 0 {
        return Err(Error::Precondition("empty inpainting mask".into()));
    }
    if (mask.height, mask.width) != (image.height, image.width) {
        return Err(Error::Shape("mask and image sizes differ".into()));
    }
    let (h, w, ch) = (image.height, image.width, image.channels);
    // Chebyshev distance to the mask, capped past the feather band.
    let mut dist = vec![usize::MAX; h * w];
    for r in 0..=feather {
        let grown = if r == 0 { mask.clone() } else { mask.dilate(r) };
        for (d, &inside) in dist.iter_mut().zip(&grown.data) {
            if inside && *d == usize::MAX {
                *d = r;
            }
        }
    }
    let texture = value_noise(h, w, recipe.texture_cell, recipe.texture_seed);
    let blurred = box_blur(image, recipe.blur_radius);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let d = dist[y * w + x];
            if d == usize::MAX {
                continue;
            }
            let soft = 1.0 - d as f64 / (feather + 1) as f64;
            let a = recipe.opacity * soft;
            for c in 0..ch {
                let v = f64::from(image.get(y, x, c));
                let fill = recipe.mix[0] * texture[y * w + x]
                    + recipe.mix[1] * (v + recipe.shift)
                    + recipe.mix[2] * f64::from(blurred.get(y, x, c));
                out.set(y, x, c, ((1.0 - a) * v + a * fill).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(out)
}

/// Bilinearly interpolated lattice noise in `[0,1]` with the given cell size.
fn value_noise(h: usize, w: usize, cell: f64, seed: u64) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let mut rng = rng_for(seed, &[]);
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen()).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / cell, x as f64 / cell);
            let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let g = |a: usize, b: usize| lattice[a * gw + b];
            out.push(
                (1.0 - ty) * ((1.0 - tx) * g(iy, ix) + tx * g(iy, ix + 1))
                    + ty * ((1.0 - tx) * g(iy + 1, ix) + tx * g(iy + 1, ix + 1)),
            );
        }
    }
    out
}

fn box_blur(image: &Image, radius: usize) -> Image {
    let (h, w, ch) = (image.height, image.width, image.channels);
    let mut out = image.clone();
    if radius == 0 {
        return out;
    }
    let r = radius as isize;
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let (mut s, mut n) = (0.0f64, 0usize);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            s += f64::from(image.get(yy as usize, xx as usize, c));
                            n += 1;
                        }
                    }
                }
                out.set(y, x, c, (s / n as f64) as f32);
            }
        }
    }
    out
}

/// Organ bounding box: pixels brighter than the image mean intensity.
pub fn organ_bounds(image: &Image) -> Option<(usize, usize, usize, usize)> {
    let n = (image.height * image.width) as f32;
    let mean = (0..image.height)
        .flat_map(|y| (0..image.width).map(move |x| (y, x)))
        .map(|(y, x)| image.intensity(y, x))
        .sum::<f32>()
        / n;
    crate::data::foreground_bounds(image, mean)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoConfig {
    pub augment: AugmentConfig,
    pub ellipse: EllipseConfig,
    pub generated: GeneratedConfig,
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        let e = &self.ellipse;
        if e.max_count == 0 || !(e.area[0] >= 0.0 && e.area[0] <= e.area[1] && e.area[1] <= 1.0) || e.axes[0] > e.axes[1] {
            return Err(Error::config("pseudo.ellipse", format!("{e:?}")));
        }
        let g = &self.generated;
        if !(g.opacity[0] >= 0.0 && g.opacity[0] <= g.opacity[1] && g.opacity[1] <= 1.0) {
            return Err(Error::config("pseudo.generated.opacity", format!("{:?}", g.opacity)));
        }
        if g.texture_scale[0] <= 0.0 || g.texture_scale[0] > g.texture_scale[1] || g.blur_radius[0] > g.blur_radius[1] {
            return Err(Error::config("pseudo.generated", format!("{g:?}")));
        }
        Ok(())
    }
}

/// Both pseudo-anomalies of one training image.
#[derive(Clone, Debug)]
pub struct PseudoPair {
    pub aug: Image,
    pub aug_mask: Mask,
    pub recipe: AugmentationRecipe,
    pub gen: Image,
    pub gen_mask: Mask,
    pub ellipses: Option<EllipseMaskSpec>,
    pub fill: Option<FillRecipe>,
}

/// Synthesizes the augmented and generated variants of image `index` with
/// seeds derived from `(seed, index)`. A supplied external image replaces
/// the procedural generated variant.
pub fn synthesize_pair(image: &Image, index: usize, seed: u64, cfg: &PseudoConfig, external: Option<&Image>) -> Result<PseudoPair> {
    let mut rng = rng_for(seed, &[stream::SYNTH_AUG, index as u64]);
    let (aug, aug_mask, recipe) = synthesize_augmented(image, &cfg.augment, &mut rng)?;
    if let Some(ext) = external {
        let gen_mask = difference_mask(image, ext);
        return Ok(PseudoPair { aug, aug_mask, recipe, gen: ext.clone(), gen_mask, ellipses: None, fill: None });
    }
    let mut rng = rng_for(seed, &[stream::SYNTH_GEN, index as u64]);
    let (gen_mask, spec) = make_ellipse_mask(image.height, image.width, organ_bounds(image), &mut rng, &cfg.ellipse)?;
    let fill = sample_fill(image.height.max(image.width), &cfg.generated, &mut rng);
    let gen = apply_fill(image, &gen_mask, &fill, cfg.generated.feather)?;
    Ok(PseudoPair { aug, aug_mask, recipe, gen, gen_mask, ellipses: Some(spec), fill: Some(fill) })
}

fn difference_mask(a: &Image, b: &Image) -> Mask {
    let mut m = Mask::empty(a.height, a.width);
    if (a.height, a.width, a.channels) == (b.height, b.width, b.channels) {
        for y in 0..a.height {
            for x in 0..a.width {
                m.set(y, x, (a.intensity(y, x) - b.intensity(y, x)).abs() > 0.5 / 255.0);
            }
        }
    }
    m
}

/// Per-image seed for corpus synthesis.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[index as u64])
}

/// Reads `<stem>.gen.<ext>` files from `dir` into a map keyed by `<stem>`.
/// Files without the suffix are skipped with a warning.
pub fn ingest_external_generated(dir: &Path, target_size: usize) -> Result<BTreeMap<String, Image>> {
    let mut registry = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
    paths.sort();
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        match stem.strip_suffix(".gen") {
            Some(original) if !original.is_empty() => {
                let img = load_image(&path, target_size)?;
                registry.insert(original.to_owned(), img);
            }
            _ => warn!("skipping {}: no `.gen` suffix", path.display()),
        }
    }
    Ok(registry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::save_png;

    fn half_split() -> Image {
        let mut img = Image::filled(4, 4, 1, 0.2);
        for y in 0..4 {
            for x in 2..4 {
                img.set(y, x, 0, 0.8);
            }
        }
        img
    }

    fn textured(size: usize, seed: u64) -> Image {
        let mut rng = rng_for(seed, &[]);
        let data = (0..size * size)
            .map(|i| {
                let (y, x) = (i / size, i % size);
                (0.3 + 0.3 * ((x as f32 / 6.0).sin() * (y as f32 / 9.0).cos()) + rng.gen_range(-0.05f32..0.05)).clamp(0.0, 1.0)
            })
            .collect();
        Image::new(size, size, 1, data).unwrap()
    }

    #[test]
    fn one_cluster_covers_everything() {
        let m = kmeans_superpixels(&textured(8, 0), 1, 0.5, &mut rng_for(1, &[])).unwrap();
        assert!(m.labels.iter().all(|&l| l == 0));
        assert!(matches!(kmeans_superpixels(&textured(2, 0), 5, 0.5, &mut rng_for(1, &[])), Err(Error::Config { .. })));
    }

    #[test]
    fn half_split_matches_best_threshold_partition() {
        let img = half_split();
        let m = kmeans_superpixels(&img, 2, 0.0, &mut rng_for(3, &[])).unwrap();
        // Exhaustive oracle over threshold-induced 2-partitions.
        let vals: Vec<f64> = (0..16).map(|i| f64::from(img.data[i])).collect();
        let mut best = (f64::INFINITY, 0.0);
        let mut cands = vals.clone();
        cands.sort_by(f64::total_cmp);
        cands.dedup();
        for &t in &cands[..cands.len() - 1] {
            let (lo, hi): (Vec<f64>, Vec<f64>) = vals.iter().partition(|&&v| v <= t);
            let var = |g: &[f64]| {
                let mean = g.iter().sum::<f64>() / g.len() as f64;
                g.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            };
            let cost = var(&lo) + var(&hi);
            if cost < best.0 {
                best = (cost, t);
            }
        }
        for i in 0..16 {
            for j in 0..16 {
                let same_oracle = (vals[i] <= best.1) == (vals[j] <= best.1);
                assert_eq!(m.labels[i] == m.labels[j], same_oracle);
            }
        }
    }

    #[test]
    fn kmeans_is_deterministic_and_monotone() {
        let img = textured(24, 4);
        let (a, trace) = kmeans_with_trace(&img, 6, 0.5, &mut rng_for(5, &[])).unwrap();
        let (b, _) = kmeans_with_trace(&img, 6, 0.5, &mut rng_for(5, &[])).unwrap();
        assert_eq!(a, b);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{trace:?}");
        }
        assert!(a.sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn constant_image_keeps_clusters_nonempty() {
        let img = Image::filled(6, 6, 1, 0.5);
        let m = kmeans_superpixels(&img, 4, 0.0, &mut rng_for(0, &[])).unwrap();
        assert!(m.sizes().iter().all(|&s| s > 0));
    }

    fn recipe_with(ops: Vec<AugOp>) -> AugmentationRecipe {
        AugmentationRecipe { k: 2, alpha: 0.0, kmeans_seed: 9, cluster: 0, ops }
    }

    #[test]
    fn zero_strengths_are_identity() {
        let img = textured(16, 7);
        let r = recipe_with(
            vec![
                AugOp::IntensityShift { delta: 0.0 },
                AugOp::Noise { sigma: 0.0, seed: 3 },
                AugOp::SpatialDistortion { amplitude: 0.0, wavelength: 10.0, phase: 0.3 },
                AugOp::OpacityArtifact { level: 1.0, opacity: 0.0 },
                AugOp::StructuralDefect { depth: 0.0, period: 5.0, angle: 1.0 },
            ],
        );
        let (out, _) = apply_recipe(&img, &r).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn intensity_shift_on_constant_cluster() {
        let mut img = Image::filled(8, 8, 1, 0.1);
        for y in 0..8 {
            for x in 0..4 {
                img.set(y, x, 0, 0.5);
            }
        }
        let map = kmeans_superpixels(&img, 2, 0.0, &mut rng_for(9, &[])).unwrap();
        let cluster = map.labels[0];
        let r = AugmentationRecipe { k: 2, alpha: 0.0, kmeans_seed: 9, cluster, ops: vec![AugOp::IntensityShift { delta: 0.3 }] };
        let (out, mask) = apply_recipe(&img, &r).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if x < 4 {
                    assert!(mask.get(y, x));
                    assert!((out.get(y, x, 0) - 0.8).abs() < 1e-6);
                } else {
                    assert_eq!(out.get(y, x, 0), 0.1);
                }
            }
        }
    }

    #[test]
    fn augmentation_is_local_and_reproducible() {
        let cfg = AugmentConfig::default();
        for seed in 0..20 {
            let img = textured(32, seed);
            let (out, mask, recipe) = synthesize_augmented(&img, &cfg, &mut rng_for(seed, &[1])).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    if !mask.get(y, x) {
                        assert_eq!(out.get(y, x, 0), img.get(y, x, 0));
                    }
                }
            }
            let json = serde_json::to_string(&recipe).unwrap();
            let back: AugmentationRecipe = serde_json::from_str(&json).unwrap();
            assert_eq!(back, recipe);
            assert_eq!(apply_recipe(&img, &back).unwrap().0, out);
            assert!(recipe.ops.len() >= 1);
        }
    }

    #[test]
    fn ellipse_boundary_pixels() {
        let e = Ellipse { cy: 10.0, cx: 10.0, a: 4.0, b: 2.0, rotation: 0.0 };
        assert!(e.contains(10, 14));
        assert!(!e.contains(10, 15));
        assert!(e.contains(12, 10));
        assert!(!e.contains(13, 10));
    }

    #[test]
    fn disjoint_ellipses_add_areas() {
        let e1 = Ellipse { cy: 8.0, cx: 8.0, a: 5.0, b: 3.0, rotation: 0.4 };
        let e2 = Ellipse { cy: 30.0, cx: 30.0, a: 4.0, b: 6.0, rotation: 1.1 };
        let count = |es: &[&Ellipse]| {
            let mut m = Mask::empty(40, 40);
            for e in es {
                e.rasterize_into(&mut m);
            }
            m.count()
        };
        assert_eq!(count(&[&e1, &e2]), count(&[&e1]) + count(&[&e2]));
    }

    #[test]
    fn ellipse_centers_respect_bounds_and_area() {
        let cfg = EllipseConfig::default();
        let mut rng = rng_for(11, &[]);
        let bounds = Some((20, 30, 40, 50));
        for _ in 0..1000 {
            let (mask, spec) = make_ellipse_mask(64, 64, bounds, &mut rng, &cfg).unwrap();
            for e in &spec.ellipses {
                assert!((20.0..40.0).contains(&e.cy) && (30.0..50.0).contains(&e.cx));
            }
            let f = mask.area_fraction();
            assert!((cfg.area[0]..=cfg.area[1]).contains(&f));
        }
        let impossible = EllipseConfig { area: [0.9, 0.95], ..cfg };
        assert!(matches!(make_ellipse_mask(64, 64, None, &mut rng, &impossible), Err(Error::Config { .. })));
    }

    #[test]
    fn generated_fill_locality_and_strength() {
        let cfg = GeneratedConfig::default();
        let mut rng = rng_for(12, &[]);
        let mut deviations = Vec::new();
        for i in 0..100 {
            let img = textured(32, i);
            let (mask, _) = make_ellipse_mask(32, 32, None, &mut rng, &EllipseConfig::default()).unwrap();
            let out = synthesize_generated(&img, &mask, &mut rng, &cfg).unwrap();
            let near = mask.dilate(2);
            let (mut dev, mut n) = (0.0, 0);
            for y in 0..32 {
                for x in 0..32 {
                    if !near.get(y, x) {
                        assert_eq!(out.get(y, x, 0), img.get(y, x, 0));
                    }
                    if mask.get(y, x) {
                        dev += f64::from((out.get(y, x, 0) - img.get(y, x, 0)).abs());
                        n += 1;
                    }
                }
            }
            deviations.push(dev / n as f64);
        }
        let mean = deviations.iter().sum::<f64>() / deviations.len() as f64;
        assert!(mean > 0.02, "{mean}");
    }

    #[test]
    fn zero_opacity_and_empty_mask() {
        let img = textured(16, 3);
        let mut mask = Mask::empty(16, 16);
        let recipe = sample_fill(16, &GeneratedConfig::default(), &mut rng_for(0, &[]));
        assert!(matches!(apply_fill(&img, &mask, &recipe, 2), Err(Error::Precondition(_))));
        mask.set(5, 5, true);
        let clear = FillRecipe { opacity: 0.0, ..recipe };
        assert_eq!(apply_fill(&img, &mask, &clear, 2).unwrap(), img);
    }

    #[test]
    fn external_registry() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest_external_generated(dir.path(), 16).unwrap().is_empty());
        save_png(&textured(32, 1), &dir.path().join("0003.gen.png")).unwrap();
        save_png(&textured(16, 2), &dir.path().join("stray.png")).unwrap();
        let reg = ingest_external_generated(dir.path(), 16).unwrap();
        assert_eq!(reg.len(), 1);
        let img = &reg["0003"];
        assert_eq!((img.height, img.width), (16, 16));
    }
}
