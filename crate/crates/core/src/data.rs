//! Images, patch sequences, dataset manifests, and the procedural toy
//! dataset.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageReader, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::Mat;

/// `height × width × channels` intensities in `[0,1]`, row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Format("zero-dimension image".into()));
        }
        if !matches!(channels, 1 | 3) {
            return Err(Error::Format(format!("{channels} channels (expected 1 or 3)")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}×{width}×{channels} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    /// Mean over channels at one pixel.
    pub fn intensity(&self, y: usize, x: usize) -> f32 {
        let base = self.idx(y, x, 0);
        self.data[base..base + self.channels].iter().sum::<f32>() / self.channels as f32
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    /// Converts to `channels` channels: 1 averages, 3 replicates gray.
    pub fn with_channels(&self, channels: usize) -> Result<Image> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (1, 3) => Ok(self.to_rgb()),
            (_, 1) => {
                let data = (0..self.height)
                    .flat_map(|y| (0..self.width).map(move |x| (y, x)))
                    .map(|(y, x)| self.intensity(y, x))
                    .collect();
                Image::new(self.height, self.width, 1, data)
            }
            (a, b) => Err(Error::Shape(format!("cannot convert {a} channels to {b}"))),
        }
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// 8-bit quantization as performed by PNG storage.
    pub fn quantized(&self) -> Image {
        Image {
            data: self
                .data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
            ..self.clone()
        }
    }
}

/// Loads a PNG/PGM/PPM file, resizes it bilinearly to `target_size²`, scales
/// intensities to `[0,1]` and replicates grayscale to three channels.
pub fn load_image(path: &Path, target_size: usize) -> Result<Image> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    from_dynamic(decoded, target_size)
}

fn from_dynamic(img: DynamicImage, target_size: usize) -> Result<Image> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Format("zero-dimension image".into()));
    }
    if target_size == 0 {
        return Err(Error::Format("zero target size".into()));
    }
    let t = target_size as u32;
    let resized = if img.width() == t && img.height() == t {
        img
    } else {
        img.resize_exact(t, t, FilterType::Triangle)
    };
    let rgb = resized.to_rgb32f();
    let data = rgb.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Image::new(target_size, target_size, 3, data)
}

/// Writes an image as 8-bit PNG: grayscale when every pixel has equal
/// channels, RGB otherwise.
pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let gray = image.channels == 1
        || image
            .data
            .chunks_exact(image.channels)
            .all(|p| p.iter().all(|&v| v == p[0]));
    let result = if gray {
        let buf: Vec<u8> = image
            .data
            .chunks_exact(image.channels)
            .map(|p| to_u8(p[0]))
            .collect();
        GrayImage::from_raw(image.width as u32, image.height as u32, buf)
            .expect("buffer sized from image")
            .save(path)
    } else {
        let buf: Vec<u8> = image.data.iter().map(|&v| to_u8(v)).collect();
        RgbImage::from_raw(image.width as u32, image.height as u32, buf)
            .expect("buffer sized from image")
            .save(path)
    };
    result.map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Binary `height × width` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    /// Chebyshev dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        let mut out = Mask::empty(self.height, self.width);
        let r = radius as isize;
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < self.height && (xx as usize) < self.width {
                            out.set(yy as usize, xx as usize, true);
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let buf = mask.data.iter().map(|&b| if b { 255u8 } else { 0 }).collect();
    GrayImage::from_raw(mask.width as u32, mask.height as u32, buf)
        .expect("buffer sized from mask")
        .save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads a single-channel mask (nonzero = anomalous), nearest-neighbour
/// resized to `target_size²`.
pub fn load_mask(path: &Path, target_size: usize) -> Result<Mask> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let t = target_size as u32;
    let luma = img.resize_exact(t, t, FilterType::Nearest).to_luma8();
    Ok(Mask {
        height: target_size,
        width: target_size,
        data: luma.into_raw().into_iter().map(|v| v != 0).collect(),
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

/// Non-overlapping `P×P` patches in row-major grid order, each flattened
/// `(row, col, channel)` channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub patch_size: usize,
    pub channels: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patches: Mat<f32>,
}

impl PatchSequence {
    pub fn num_patches(&self) -> usize {
        self.patches.rows
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.cols
    }
}

pub fn patchify(image: &Image, patch_size: usize) -> Result<PatchSequence> {
    let p = patch_size;
    if p == 0 || image.height % p != 0 || image.width % p != 0 {
        return Err(Error::Shape(format!(
            "{}×{} image not divisible by patch size {p}",
            image.height, image.width
        )));
    }
    let (gr, gc, ch) = (image.height / p, image.width / p, image.channels);
    let dim = p * p * ch;
    let mut patches = Mat::zeros(gr * gc, dim);
    for r in 0..gr {
        for c in 0..gc {
            let row = patches.row_mut(r * gc + c);
            for py in 0..p {
                let src = image.idx(r * p + py, c * p, 0);
                row[py * p * ch..(py + 1) * p * ch].copy_from_slice(&image.data[src..src + p * ch]);
            }
        }
    }
    Ok(PatchSequence {
        patch_size: p,
        channels: ch,
        grid_rows: gr,
        grid_cols: gc,
        patches,
    })
}

pub fn unpatchify(seq: &PatchSequence) -> Result<Image> {
    let p = seq.patch_size;
    let ch = seq.channels;
    if seq.grid_rows * seq.grid_cols != seq.num_patches() || seq.patch_dim() != p * p * ch {
        return Err(Error::Shape(format!(
            "grid {}×{} with {} patches of dim {} (patch size {p}, {ch} channels)",
            seq.grid_rows,
            seq.grid_cols,
            seq.num_patches(),
            seq.patch_dim()
        )));
    }
    let (h, w) = (seq.grid_rows * p, seq.grid_cols * p);
    let mut image = Image::filled(h, w, ch, 0.0);
    for r in 0..seq.grid_rows {
        for c in 0..seq.grid_cols {
            let row = seq.patches.row(r * seq.grid_cols + c);
            for py in 0..p {
                let dst = image.idx(r * p + py, c * p, 0);
                image.data[dst..dst + p * ch].copy_from_slice(&row[py * p * ch..(py + 1) * p * ch]);
            }
        }
    }
    Ok(image)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Anomalous,
    Unlabeled,
}

impl Label {
    pub fn as_binary(self) -> Option<u8> {
        match self {
            Label::Normal => Some(0),
            Label::Anomalous => Some(1),
            Label::Unlabeled => None,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "0" | "normal" => Ok(Label::Normal),
            "1" | "anomalous" => Ok(Label::Anomalous),
            "" | "unlabeled" | "-" => Ok(Label::Unlabeled),
            other => Err(Error::Format(format!("unknown label {other:?}"))),
        }
    }

    fn token(self) -> &'static str {
        match self {
            Label::Normal => "0",
            Label::Anomalous => "1",
            Label::Unlabeled => "unlabeled",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// Path as written in the manifest, relative to the manifest directory.
    pub image: PathBuf,
    pub label: Label,
    pub mask: Option<PathBuf>,
}

/// One split of a dataset: a comma-separated text file with a `# split=`
/// header line and one `path,label[,mask]` record per line.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub base_dir: PathBuf,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.resolve(&self.records[i].image)
    }

    pub fn mask_path(&self, i: usize) -> Option<PathBuf> {
        self.records[i].mask.as_deref().map(|m| self.resolve(m))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.split == Split::Train {
            if let Some(r) = self.records.iter().find(|r| r.label == Label::Anomalous) {
                return Err(Error::Format(format!(
                    "train split contains anomalous record {}",
                    r.image.display()
                )));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut split = None;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(s) = comment.trim().strip_prefix("split=") {
                    split = Some(s.trim().parse()?);
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.is_empty() || fields.len() > 3 || fields[0].is_empty() {
                return Err(Error::Format(format!(
                    "{}:{}: expected path,label[,mask]",
                    path.display(),
                    lineno + 1
                )));
            }
            records.push(Record {
                image: PathBuf::from(fields[0]),
                label: Label::parse(fields.get(1).copied().unwrap_or(""))?,
                mask: fields
                    .get(2)
                    .filter(|m| !m.is_empty())
                    .map(PathBuf::from),
            });
        }
        let split = split.ok_or_else(|| {
            Error::Format(format!("{}: missing `# split=` header", path.display()))
        })?;
        let manifest = Self {
            split,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        ensure_parent(path)?;
        let mut text = format!("# split={}\n", self.split);
        for r in &self.records {
            text.push_str(&r.image.to_string_lossy());
            text.push(',');
            text.push_str(r.label.token());
            if let Some(m) = &r.mask {
                text.push(',');
                text.push_str(&m.to_string_lossy());
            }
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Parameters of the procedural toy dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Fraction of val/test images carrying a planted anomaly.
    pub anomalous_fraction: f64,
    /// Organ disc radius as a fraction of the image side.
    pub disc_radius: [f64; 2],
    pub noise_sigma: f64,
    /// Absolute intensity deviation of planted anomalies.
    pub blob_delta: [f64; 2],
    /// Area fraction bounds of planted anomalies.
    pub blob_area: [f64; 2],
    pub streak_probability: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            train: 200,
            val: 50,
            test: 100,
            anomalous_fraction: 0.5,
            disc_radius: [0.28, 0.38],
            noise_sigma: 0.02,
            blob_delta: [0.2, 0.4],
            blob_area: [0.02, 0.2],
            streak_probability: 0.3,
        }
    }
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => stream::TOY_TRAIN,
        Split::Val => stream::TOY_VAL,
        Split::Test => stream::TOY_TEST,
    }
}

/// The normal (anomaly-free) toy image for `(seed, split, index)`, single channel.
pub fn toy_normal_image(cfg: &ToyConfig, seed: u64, split: Split, index: usize) -> Image {
    let mut rng = rng_for(seed, &[split_stream(split), index as u64, 0]);
    let s = cfg.image_size;
    let sf = s as f64;
    let cy = sf * (0.5 + rng.gen_range(-0.06..0.06));
    let cx = sf * (0.5 + rng.gen_range(-0.06..0.06));
    let radius = sf * rng.gen_range(cfg.disc_radius[0]..=cfg.disc_radius[1]);
    let aspect = rng.gen_range(0.85..1.15);
    let organ_level = rng.gen_range(0.42..0.52);
    let rim_level = rng.gen_range(0.12..0.2);
    let bias = rng.gen_range(0.08..0.14);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = rng.gen_range(1.5..4.0) / sf;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.015..0.04);
            (theta, freq, phase, amp)
        })
        .collect();
    let mut noise_rng = rng_for(seed, &[split_stream(split), index as u64, 1]);
    let normal = rand_distr::Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("valid sigma");
    let mut data = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            // Consistent illumination gradient: brighter toward the top-left.
            let background = 0.05 + bias * (1.0 - (yf + xf) / (2.0 * sf));
            let dy = (yf - cy) / (radius * aspect);
            let dx = (xf - cx) / radius;
            let rr = (dx * dx + dy * dy).sqrt();
            let mut v = background;
            if rr <= 1.0 {
                let texture: f64 = waves
                    .iter()
                    .map(|&(t, f, p, a)| {
                        a * (std::f64::consts::TAU * f * (xf * t.cos() + yf * t.sin()) + p).sin()
                    })
                    .sum();
                // Bright rim band near the organ boundary, smooth falloff.
                let rim = rim_level * (-((1.0 - rr) / 0.12).powi(2)).exp();
                let edge = ((1.0 - rr) / 0.04).min(1.0);
                v = background + edge * (organ_level - background + texture + rim);
            }
            let n: f64 = if cfg.noise_sigma > 0.0 {
                rand_distr::Distribution::sample(&normal, &mut noise_rng)
            } else {
                0.0
            };
            data.push((v + n).clamp(0.0, 1.0) as f32);
        }
    }
    Image::new(s, s, 1, data).expect("toy image in range")
}

/// Organ disc bounding box `(y0, x0, y1, x1)` in pixels (exclusive upper
/// bounds), estimated from intensity above the background level.
pub fn foreground_bounds(image: &Image, threshold: f32) -> Option<(usize, usize, usize, usize)> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..image.height {
        for x in 0..image.width {
            if image.intensity(y, x) > threshold {
                bounds = Some(match bounds {
                    None => (y, x, y + 1, x + 1),
                    Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
                });
            }
        }
    }
    bounds
}

/// Plants a blob or streak of deviant intensity and texture inside the
/// organ. Returns the anomalous image and its mask; outside the mask the
/// image is untouched, inside every pixel differs from the source by at least
/// `0.5·blob_delta[0]` (pre-quantization).
pub fn plant_toy_anomaly<R: Rng>(cfg: &ToyConfig, normal: &Image, rng: &mut R) -> (Image, Mask) {
    let s = cfg.image_size;
    let sf = s as f64;
    let (y0, x0, y1, x1) = foreground_bounds(normal, 0.3).unwrap_or((s / 4, s / 4, 3 * s / 4, 3 * s / 4));
    let mut attempts = 0;
    let mask = loop {
        attempts += 1;
        let mut mask = Mask::empty(s, s);
        let streak = rng.gen_bool(cfg.streak_probability);
        let cy = rng.gen_range(y0 as f64..y1 as f64);
        let cx = rng.gen_range(x0 as f64..x1 as f64);
        let target = rng.gen_range(cfg.blob_area[0]..cfg.blob_area[1]) * sf * sf;
        let lobes = if streak { 1 } else { rng.gen_range(1..=3) };
        for lobe in 0..lobes {
            let (ly, lx) = if lobe == 0 {
                (cy, cx)
            } else {
                (cy + rng.gen_range(-0.06..0.06) * sf, cx + rng.gen_range(-0.06..0.06) * sf)
            };
            let area = target / lobes as f64;
            let ratio: f64 = if streak { rng.gen_range(4.0..8.0) } else { rng.gen_range(1.0..2.0) };
            let b = (area / (std::f64::consts::PI * ratio)).sqrt();
            let a = b * ratio;
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let (st, ct) = theta.sin_cos();
            for y in 0..s {
                for x in 0..s {
                    let (dy, dx) = (y as f64 + 0.5 - ly, x as f64 + 0.5 - lx);
                    let u = (dx * ct + dy * st) / a;
                    let v = (-dx * st + dy * ct) / b;
                    if u * u + v * v <= 1.0 {
                        mask.set(y, x, true);
                    }
                }
            }
        }
        let frac = mask.area_fraction();
        if (cfg.blob_area[0]..=cfg.blob_area[1]).contains(&frac) || attempts >= 200 {
            break mask;
        }
    };
    let delta = rng.gen_range(cfg.blob_delta[0]..=cfg.blob_delta[1]);
    let bright = rng.gen_bool(0.5);
    let freq = rng.gen_range(0.25..0.6);
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let mut out = normal.clone();
    for y in 0..s {
        for x in 0..s {
            if !mask.get(y, x) {
                continue;
            }
            let stripes = (freq * (x as f64 * theta.cos() + y as f64 * theta.sin())).sin();
            let d = delta * (0.75 + 0.25 * stripes);
            for c in 0..normal.channels {
                let base = normal.get(y, x, c) as f64;
                let up = base + d;
                let down = base - d;
                let v = if (bright && up <= 1.0) || down < 0.0 { up } else { down };
                out.set(y, x, c, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    (out, mask)
}

/// Paths of a generated toy dataset.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub root: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

/// Writes the toy dataset under `root`: `images/<split>/NNNN.png`,
/// `masks/<split>/NNNN.png` for anomalous records, and one manifest per split.
pub fn make_toy_dataset(cfg: &ToyConfig, seed: u64, root: &Path) -> Result<ToyDataset> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut out = ToyDataset {
        root: root.to_path_buf(),
        train: root.join("train.csv"),
        val: root.join("val.csv"),
        test: root.join("test.csv"),
    };
    for (split, count) in [(Split::Train, cfg.train), (Split::Val, cfg.val), (Split::Test, cfg.test)] {
        let n_anom = if split == Split::Train {
            0
        } else {
            (count as f64 * cfg.anomalous_fraction).round() as usize
        };
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let normal = toy_normal_image(cfg, seed, split, i);
            let rel = PathBuf::from(format!("images/{split}/{i:04}.png"));
            // Anomalous records are the last `n_anom` indices of the split.
            let anomalous = i >= count - n_anom;
            if anomalous {
                let mut rng = rng_for(seed, &[split_stream(split), i as u64, 2]);
                let (img, mask) = plant_toy_anomaly(cfg, &normal, &mut rng);
                let mask_rel = PathBuf::from(format!("masks/{split}/{i:04}.png"));
                save_png(&img, &root.join(&rel))?;
                save_mask(&mask, &root.join(&mask_rel))?;
                records.push(Record {
                    image: rel,
                    label: Label::Anomalous,
                    mask: Some(mask_rel),
                });
            } else {
                save_png(&normal, &root.join(&rel))?;
                records.push(Record {
                    image: rel,
                    label: Label::Normal,
                    mask: None,
                });
            }
        }
        let manifest = DatasetManifest {
            split,
            base_dir: root.to_path_buf(),
            records,
        };
        let path = match split {
            Split::Train => &mut out.train,
            Split::Val => &mut out.val,
            Split::Test => &mut out.test,
        };
        manifest.write(path)?;
    }
    out.root = root.to_path_buf();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let n = h * w * c;
        Image::new(h, w, c, (0..n).map(|i| i as f32 / n as f32).collect()).unwrap()
    }

    #[test]
    fn patch_counts() {
        let seq = patchify(&ramp(256, 256, 3), 16).unwrap();
        assert_eq!(seq.num_patches(), 256);
        assert_eq!(seq.patch_dim(), 768);
        let seq = patchify(&ramp(32, 32, 1), 16).unwrap();
        assert_eq!(seq.num_patches(), 4);
        assert_eq!(seq.grid_rows * seq.grid_cols, 4);
    }

    #[test]
    fn non_divisible_is_rejected() {
        assert!(matches!(patchify(&ramp(30, 32, 1), 16), Err(Error::Shape(_))));
    }

    #[test]
    fn single_patch_is_the_image() {
        let img = ramp(8, 8, 3);
        let seq = patchify(&img, 8).unwrap();
        assert_eq!(seq.patches.data, img.data);
        assert_eq!(unpatchify(&seq).unwrap(), img);
    }

    #[test]
    fn checkerboard_quadrants_match_direct_indexing() {
        // 4 patches of 2×2 with one value per quadrant.
        let mut img = Image::filled(4, 4, 1, 0.0);
        for y in 0..4 {
            for x in 0..4 {
                let q = (y / 2) * 2 + x / 2;
                img.set(y, x, 0, [0.1, 0.9, 0.6, 0.3][q]);
            }
        }
        let seq = patchify(&img, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let (py, px) = (j / 2, j % 2);
                let (y, x) = ((i / 2) * 2 + py, (i % 2) * 2 + px);
                assert_eq!(seq.patches.get(i, j), img.get(y, x, 0));
            }
        }
        let back = unpatchify(&seq).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn grid_mismatch_is_a_dimension_error() {
        let mut seq = patchify(&ramp(8, 8, 1), 4).unwrap();
        seq.grid_cols = 3;
        assert!(matches!(unpatchify(&seq), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn patchify_round_trips(gr in 1usize..5, gc in 1usize..5, p in 1usize..6, rgb in any::<bool>(), seed in any::<u64>()) {
            let c = if rgb { 3 } else { 1 };
            let mut rng = rng_for(seed, &[]);
            let data = (0..gr * p * gc * p * c).map(|_| rand::Rng::gen::<f32>(&mut rng)).collect();
            let img = Image::new(gr * p, gc * p, c, data).unwrap();
            let seq = patchify(&img, p).unwrap();
            prop_assert_eq!(seq.patch_dim(), p * p * c);
            prop_assert_eq!(seq.num_patches(), gr * gc);
            prop_assert_eq!(unpatchify(&seq).unwrap(), img);
        }
    }

    #[test]
    fn load_resizes_and_replicates_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let buf: Vec<u8> = (0..512 * 512).map(|i| (i % 251) as u8).collect();
        GrayImage::from_raw(512, 512, buf).unwrap().save(&path).unwrap();
        let img = load_image(&path, 256).unwrap();
        assert_eq!((img.height, img.width, img.channels), (256, 256, 3));
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        for px in img.data.chunks(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
    }

    #[test]
    fn all_black_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pgm");
        GrayImage::new(40, 30).save(&path).unwrap();
        let img = load_image(&path, 16).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_resize_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let img = ramp(16, 16, 3).quantized();
        save_png(&img, &path).unwrap();
        let back = load_image(&path, 16).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let err = load_image(Path::new("/nonexistent/x.png"), 8).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn manifest_round_trip_and_train_discipline() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            split: Split::Test,
            base_dir: dir.path().to_path_buf(),
            records: vec![
                Record { image: "a.png".into(), label: Label::Normal, mask: None },
                Record { image: "b.png".into(), label: Label::Anomalous, mask: Some("mb.png".into()) },
                Record { image: "c.png".into(), label: Label::Unlabeled, mask: None },
            ],
        };
        let path = dir.path().join("test.csv");
        m.write(&path).unwrap();
        assert_eq!(DatasetManifest::read(&path).unwrap(), m);
        assert_eq!(m.mask_path(1).unwrap(), dir.path().join("mb.png"));

        let bad = DatasetManifest { split: Split::Train, ..m };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn toy_anomaly_differs_exactly_inside_mask() {
        let cfg = ToyConfig::default();
        for i in 0..20 {
            let normal = toy_normal_image(&cfg, 7, Split::Test, i);
            let mut rng = rng_for(7, &[99, i as u64]);
            let (anom, mask) = plant_toy_anomaly(&cfg, &normal, &mut rng);
            let (qn, qa) = (normal.quantized(), anom.quantized());
            for y in 0..cfg.image_size {
                for x in 0..cfg.image_size {
                    let differs = qn.get(y, x, 0) != qa.get(y, x, 0);
                    assert_eq!(differs, mask.get(y, x), "pixel ({y},{x}) of sample {i}");
                }
            }
        }
    }

    #[test]
    fn toy_blob_area_within_bounds() {
        let cfg = ToyConfig::default();
        for i in 0..100 {
            let normal = toy_normal_image(&cfg, 11, Split::Test, i);
            let mut rng = rng_for(11, &[5, i as u64]);
            let (_, mask) = plant_toy_anomaly(&cfg, &normal, &mut rng);
            let frac = mask.count() as f64 / (cfg.image_size * cfg.image_size) as f64;
            assert!((0.02..=0.2).contains(&frac), "sample {i}: area fraction {frac}");
        }
    }

    #[test]
    fn dilation_grows_by_radius() {
        let mut m = Mask::empty(7, 7);
        m.set(3, 3, true);
        assert_eq!(m.dilate(2).count(), 25);
    }
}
