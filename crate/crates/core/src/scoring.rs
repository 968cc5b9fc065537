//! Inference-time anomaly scores per task, percentile-rank fusion, and
//! pixel-level anomaly maps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::TaskId;
use crate::data::{save_png, Image, PatchSequence};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tasks::{
    loss_jigsaw, mim_sample_with_mask, permute_tiles, ClsSample, DeMixUpSample, JigsawSample, MultiTaskModel,
    TaskBatch,
};
use crate::tensor::{sigmoid, Float, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MimScoreMode {
    /// `⌈1/mask_ratio⌉` disjoint masks covering every patch once.
    Complementary,
    /// One seeded random mask at the training ratio.
    SingleRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Uniform,
    /// Grid search over the simplex for the best validation AUROC.
    ValidationFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub jigsaw_permutations: usize,
    pub top_k: usize,
    pub mim_mode: MimScoreMode,
    pub fusion: FusionMode,
    /// Grid resolution of the validation fit (weights are multiples of 1/n).
    pub fit_grid: usize,
    /// Gaussian width of the map smoothing in pixels; half a patch when unset.
    pub map_sigma: Option<f64>,
    pub batch_size: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            jigsaw_permutations: 4,
            top_k: 10,
            mim_mode: MimScoreMode::Complementary,
            fusion: FusionMode::Uniform,
            fit_grid: 4,
            map_sigma: None,
            batch_size: 32,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jigsaw_permutations == 0 {
            return Err(Error::config("scoring.jigsaw_permutations", "must be positive"));
        }
        if self.top_k == 0 {
            return Err(Error::config("scoring.top_k", "must be positive"));
        }
        if self.fit_grid == 0 {
            return Err(Error::config("scoring.fit_grid", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("scoring.batch_size", "must be positive"));
        }
        if self.map_sigma.is_some_and(|s| !(s >= 0.0)) {
            return Err(Error::config("scoring.map_sigma", "must be nonnegative"));
        }
        Ok(())
    }
}

/// `1 − e^{−x}` for `x ≥ 0`.
pub fn normalize_score(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("score normalization needs x ≥ 0, got {x}")));
    }
    Ok(-(-x).exp_m1())
}

/// Splits a seeded permutation of `0..n` into `⌈1/mask_ratio⌉` near-equal
/// disjoint masks.
pub fn complementary_masks(n: usize, mask_ratio: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if !(mask_ratio > 0.0 && mask_ratio <= 1.0) {
        return Err(Error::Domain(format!("mask ratio {mask_ratio} outside (0, 1]")));
    }
    let passes = ((1.0 / mask_ratio) - 1e-9).ceil().max(1.0) as usize;
    if passes > n {
        return Err(Error::Precondition(format!("{passes} passes over {n} patches")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[stream::SCORE, 0]));
    let (base, extra) = (n / passes, n % passes);
    let mut out = Vec::with_capacity(passes);
    let mut start = 0;
    for k in 0..passes {
        let len = base + usize::from(k < extra);
        let mut m = order[start..start + len].to_vec();
        m.sort_unstable();
        out.push(m);
        start += len;
    }
    Ok(out)
}

/// Squared reconstruction error `‖x̂_i − x_i‖²` of each listed patch.
/// `recon` rows are offset by one for the classification slot.
pub fn mim_residuals(recon: &[&[f64]], patches: &Mat<f32>, masked: &[usize]) -> Vec<(usize, f64)> {
    masked
        .iter()
        .map(|&p| {
            let r = recon[p + 1]
                .iter()
                .zip(patches.row(p))
                .map(|(a, &b)| (a - f64::from(b)) * (a - f64::from(b)))
                .sum();
            (p, r)
        })
        .collect()
}

/// Mean of the `k` largest values, or of all when fewer.
pub fn top_k_mean(values: &[f64], k: usize) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = k.min(v.len());
    v[..k].iter().sum::<f64>() / k as f64
}

/// Per-task scores of one image, indexed by [`TaskId::index`]. MIM and
/// jigsaw entries are normalized to `[0, 1)`; disabled tasks are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub values: [Option<f64>; 5],
}

impl ScoreVector {
    pub fn get(&self, task: TaskId) -> Option<f64> {
        self.values[task.index()]
    }

    pub fn set(&mut self, task: TaskId, v: f64) {
        self.values[task.index()] = Some(v);
    }
}

/// Scores plus the per-patch maps needed for rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub scores: ScoreVector,
    pub mim_residuals: Option<Vec<f64>>,
    pub demixup_probs: Option<Vec<f64>>,
}

pub struct Scorer<'a> {
    pub model: &'a MultiTaskModel<f32>,
    pub config: &'a ScoringConfig,
    pub tasks: Vec<TaskId>,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a MultiTaskModel<f32>, config: &'a ScoringConfig, tasks: Vec<TaskId>) -> Self {
        Self { model, config, tasks }
    }

    fn has(&self, task: TaskId) -> bool {
        self.tasks.contains(&task)
    }

    fn run(&self, batch: &TaskBatch) -> Result<(Mat<f64>, f64)> {
        let mut tape = Tape::inference();
        let out = self.model.forward(&mut tape, batch, None, None)?;
        let v = tape.value(out.output);
        Ok((v.cast(), tape.scalar(out.loss).as_f64()))
    }

    /// Scores every image in `seqs`, batching images with identical layouts.
    pub fn score(&self, seqs: &[PatchSequence]) -> Result<Vec<ImageScore>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(self.config.batch_size) {
            out.extend(self.score_chunk(chunk)?);
        }
        Ok(out)
    }

    fn score_chunk(&self, seqs: &[PatchSequence]) -> Result<Vec<ImageScore>> {
        let b = seqs.len();
        let cfg = &self.model.config;
        let n = cfg.encoder.num_patches();
        let mut res: Vec<ImageScore> = (0..b)
            .map(|_| ImageScore {
                scores: ScoreVector::default(),
                mim_residuals: None,
                demixup_probs: None,
            })
            .collect();
        if self.has(TaskId::Mim) {
            let masks = match self.config.mim_mode {
                MimScoreMode::Complementary => complementary_masks(n, cfg.tasks.mask_ratio, 0)?,
                MimScoreMode::SingleRandom => {
                    let count = ((cfg.tasks.mask_ratio * n as f64).round() as usize).clamp(1, n - 1);
                    let mut order: Vec<usize> = (0..n).collect();
                    order.shuffle(&mut rng_for(0, &[stream::SCORE, 1]));
                    let mut m = order[..count].to_vec();
                    m.sort_unstable();
                    vec![m]
                }
            };
            let mut residuals = vec![vec![f64::NAN; n]; b];
            for mask in &masks {
                let samples = seqs.iter().map(|s| mim_sample_with_mask(s, mask.clone())).collect();
                let (recon, _) = self.run(&TaskBatch::Mim(samples))?;
                for (i, s) in seqs.iter().enumerate() {
                    let rows: Vec<&[f64]> = (0..=n).map(|r| recon.row(i * (n + 1) + r)).collect();
                    for (p, r) in mim_residuals(&rows, &s.patches, mask) {
                        residuals[i][p] = r;
                    }
                }
            }
            for (i, r) in residuals.into_iter().enumerate() {
                let covered: Vec<f64> = r.iter().copied().filter(|v| !v.is_nan()).collect();
                let raw = covered.iter().sum::<f64>() / covered.len() as f64;
                res[i].scores.set(TaskId::Mim, normalize_score(raw)?);
                res[i].mim_residuals = Some(r);
            }
        }
        if self.has(TaskId::Jigsaw) {
            let t = cfg.tasks.tiles;
            let t2 = t * t;
            let mut rng = rng_for(0, &[stream::SCORE, 2]);
            let mut sums = vec![0.0; b];
            for _ in 0..self.config.jigsaw_permutations {
                let mut perm: Vec<usize> = (0..t2).collect();
                perm.shuffle(&mut rng);
                let samples: Vec<JigsawSample> = seqs
                    .iter()
                    .map(|s| {
                        Ok(JigsawSample {
                            shuffled: permute_tiles(s, t, &perm)?,
                            perm: perm.clone(),
                        })
                    })
                    .collect::<Result<_>>()?;
                let targets = samples[0].targets();
                let (logits, _) = self.run(&TaskBatch::Jigsaw(samples))?;
                for (i, sum) in sums.iter_mut().enumerate() {
                    let probs = Mat::from_vec(
                        t2,
                        t2,
                        logits.data[i * t2 * t2..(i + 1) * t2 * t2].iter().map(|&z| sigmoid(z)).collect(),
                    );
                    *sum += loss_jigsaw(&probs, &targets, cfg.tasks.jigsaw_loss, cfg.tasks.bce_eps);
                }
            }
            for (i, s) in sums.into_iter().enumerate() {
                let raw = s / self.config.jigsaw_permutations as f64;
                res[i].scores.set(TaskId::Jigsaw, normalize_score(raw)?);
            }
        }
        if self.has(TaskId::DeMixUp) {
            let samples = seqs
                .iter()
                .map(|s| DeMixUpSample {
                    mixed: s.patches.clone(),
                    replaced: Vec::new(),
                    labels: vec![0; n],
                })
                .collect();
            let (logits, _) = self.run(&TaskBatch::DeMixUp(samples))?;
            for (i, r) in res.iter_mut().enumerate() {
                let probs: Vec<f64> = logits.data[i * n..(i + 1) * n].iter().map(|&z| sigmoid(z)).collect();
                r.scores.set(TaskId::DeMixUp, top_k_mean(&probs, self.config.top_k));
                r.demixup_probs = Some(probs);
            }
        }
        for task in [TaskId::AugCls, TaskId::GenCls] {
            if !self.has(task) {
                continue;
            }
            let samples: Vec<ClsSample> = seqs
                .iter()
                .map(|s| ClsSample {
                    patches: s.patches.clone(),
                    label: 0,
                })
                .collect();
            let batch = if task == TaskId::AugCls {
                TaskBatch::AugCls(samples)
            } else {
                TaskBatch::GenCls(samples)
            };
            let (logits, _) = self.run(&batch)?;
            for (r, &z) in res.iter_mut().zip(&logits.data) {
                r.scores.set(task, sigmoid(z));
            }
        }
        Ok(res)
    }

    pub fn anomaly_map(&self, image: &ImageScore, image_size: usize) -> Result<AnomalyMap> {
        let e = &self.model.config.encoder;
        let sigma = self.config.map_sigma.unwrap_or(e.patch_size as f64 / 2.0);
        anomaly_map(
            image.mim_residuals.as_deref(),
            image.demixup_probs.as_deref(),
            e.grid(),
            e.patch_size,
            image_size,
            sigma,
        )
    }
}

/// Sorted reference scores per task, built from the validation split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PercentileTables {
    pub tables: BTreeMap<TaskId, Vec<f64>>,
}

impl PercentileTables {
    pub fn build(scores: &[ScoreVector], tasks: &[TaskId]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Precondition("percentile tables need at least one validation image".into()));
        }
        let mut tables = BTreeMap::new();
        for &t in tasks {
            let mut v: Vec<f64> = scores
                .iter()
                .map(|s| s.get(t).ok_or_else(|| Error::Precondition(format!("no {t} score for table"))))
                .collect::<Result<_>>()?;
            v.sort_by(f64::total_cmp);
            tables.insert(t, v);
        }
        Ok(Self { tables })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text)?;
        for (task, v) in &t.tables {
            if v.is_empty() || v.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Format(format!("table for {task} is empty or unsorted")));
            }
        }
        Ok(t)
    }
}

/// Mid-rank percentile of `score` within the sorted `table`.
pub fn percentile_rank(score: f64, table: &[f64]) -> f64 {
    let below = table.partition_point(|&v| v < score);
    let upto = table.partition_point(|&v| v <= score);
    (below as f64 + 0.5 * (upto - below) as f64) / table.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub weights: BTreeMap<TaskId, f64>,
}

impl FusionWeights {
    pub fn uniform(tasks: &[TaskId]) -> Self {
        let w = 1.0 / tasks.len() as f64;
        Self {
            weights: tasks.iter().map(|&t| (t, w)).collect(),
        }
    }

    /// Normalizes nonnegative weights to sum to one.
    pub fn new(weights: BTreeMap<TaskId, f64>) -> Result<Self> {
        let total: f64 = weights.values().sum();
        if weights.values().any(|&w| !(w >= 0.0)) || !(total > 0.0) {
            return Err(Error::Domain(format!("fusion weights {weights:?}")));
        }
        Ok(Self {
            weights: weights.into_iter().map(|(t, w)| (t, w / total)).collect(),
        })
    }
}

/// `Σ_i w_i · percentile_rank(s_i, table_i)`.
pub fn fuse(scores: &ScoreVector, tables: &PercentileTables, weights: &FusionWeights) -> Result<f64> {
    let mut total = 0.0;
    for (&task, &w) in &weights.weights {
        let table = tables
            .tables
            .get(&task)
            .ok_or_else(|| Error::Precondition(format!("no percentile table for {task}")))?;
        let s = scores
            .get(task)
            .ok_or_else(|| Error::Precondition(format!("no {task} score to fuse")))?;
        total += w * percentile_rank(s, table);
    }
    Ok(total)
}

/// Compositions of `grid` units over `m` slots.
fn simplex_grid(m: usize, grid: usize) -> Vec<Vec<usize>> {
    if m == 1 {
        return vec![vec![grid]];
    }
    (0..=grid)
        .flat_map(|first| {
            simplex_grid(m - 1, grid - first).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            })
        })
        .collect()
}

/// Weights on the `1/grid` simplex lattice with the highest AUROC on labeled
/// validation scores; ties keep the earliest lattice point, and uniform
/// weights are returned when the labels hold a single class.
pub fn fit_weights(
    scores: &[ScoreVector],
    labels: &[u8],
    tables: &PercentileTables,
    tasks: &[TaskId],
    grid: usize,
) -> Result<FusionWeights> {
    let uniform = FusionWeights::uniform(tasks);
    let mut best: Option<(f64, FusionWeights)> = None;
    for point in simplex_grid(tasks.len(), grid) {
        if point.iter().all(|&u| u == 0) {
            continue;
        }
        let w = FusionWeights::new(tasks.iter().zip(&point).map(|(&t, &u)| (t, u as f64)).collect())?;
        let fused: Vec<f64> = scores.iter().map(|s| fuse(s, tables, &w)).collect::<Result<_>>()?;
        let a = match crate::eval::auroc(&fused, labels) {
            Ok(a) => a,
            Err(Error::UndefinedMetric(_)) => return Ok(uniform),
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|(b, _)| a > *b) {
            best = Some((a, w));
        }
    }
    Ok(best.map_or(uniform, |(_, w)| w))
}

/// Per-pixel anomaly heat in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl AnomalyMap {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.clone(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_png(&self.to_image(), path)
    }

    /// Blends a blue-to-red ramp of the map over the grayscale image.
    pub fn save_overlay(&self, image: &Image, path: &Path) -> Result<()> {
        let mut out = Image::filled(self.height, self.width, 3, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                let g = image.intensity(y, x);
                let h = self.get(y, x);
                let ramp = [h, 1.0 - (2.0 * h - 1.0).abs(), 1.0 - h];
                for (c, r) in ramp.iter().enumerate() {
                    out.set(y, x, c, 0.5 * g + 0.5 * r);
                }
            }
        }
        save_png(&out, path)
    }
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped borders.
fn blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * data[y * w + (x as i64 + j as i64 - r).clamp(0, w as i64 - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[(y as i64 + j as i64 - r).clamp(0, h as i64 - 1) as usize * w + x])
                .sum();
        }
    }
    out
}

/// Min-max normalizes each available per-patch map, averages them, spreads
/// every patch value over its pixels, smooths with a Gaussian of width
/// `sigma` and clamps to `[0, 1]`.
pub fn anomaly_map(
    mim: Option<&[f64]>,
    demixup: Option<&[f64]>,
    grid: usize,
    patch: usize,
    image_size: usize,
    sigma: f64,
) -> Result<AnomalyMap> {
    let n = grid * grid;
    let maps: Vec<Vec<f64>> = [mim, demixup].into_iter().flatten().map(min_max).collect();
    if maps.iter().any(|m| m.len() != n) {
        return Err(Error::Shape(format!("per-patch map length differs from {n} patches")));
    }
    let per_patch: Vec<f64> = if maps.is_empty() {
        vec![0.0; n]
    } else {
        (0..n).map(|i| maps.iter().map(|m| m[i]).sum::<f64>() / maps.len() as f64).collect()
    };
    let side = grid * patch;
    let mut pixels = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            pixels[y * side + x] = per_patch[(y / patch) * grid + x / patch];
        }
    }
    let smooth = blur(&pixels, side, side, sigma);
    let data = if side == image_size {
        smooth
    } else {
        (0..image_size * image_size)
            .map(|i| {
                let (y, x) = (i / image_size, i % image_size);
                smooth[(y * side / image_size) * side + x * side / image_size]
            })
            .collect()
    };
    Ok(AnomalyMap {
        height: image_size,
        width: image_size,
        data: data.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_score(0.0).unwrap(), 0.0);
        assert!((normalize_score(2f64.ln()).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(normalize_score(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn masks_partition() {
        for ratio in [0.25, 0.4, 0.5] {
            let masks = complementary_masks(64, ratio, 0).unwrap();
            assert_eq!(masks.len(), (1.0 / ratio as f64).ceil() as usize);
            let mut all: Vec<usize> = masks.concat();
            all.sort_unstable();
            assert_eq!(all, (0..64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn top_k_cases() {
        assert_eq!(top_k_mean(&[0.0; 20], 10), 0.0);
        let mut v = vec![0.0; 256];
        for x in v.iter_mut().take(10) {
            *x = 0.9;
        }
        assert!((top_k_mean(&v, 10) - 0.9).abs() < 1e-15);
        assert!((top_k_mean(&[0.1, 0.2, 0.3, 0.4, 0.5], 10) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn percentile_cases() {
        let t: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(percentile_rank(0.7, &t), 0.65);
        assert_eq!(percentile_rank(0.0, &t), 0.0);
        assert_eq!(percentile_rank(2.0, &t), 1.0);
    }

    #[test]
    fn fuse_cases() {
        let tasks = TaskId::ALL.to_vec();
        let mut tables = PercentileTables::default();
        for &t in &tasks {
            tables.tables.insert(t, vec![0.5]);
        }
        let mut s = ScoreVector::default();
        s.set(TaskId::Mim, 1.0);
        for &t in &tasks[1..] {
            s.set(t, 0.0);
        }
        let f = fuse(&s, &tables, &FusionWeights::uniform(&tasks)).unwrap();
        assert!((f - 0.2).abs() < 1e-15);
        tables.tables.remove(&TaskId::GenCls);
        assert!(fuse(&s, &tables, &FusionWeights::uniform(&tasks)).is_err());
    }

    #[test]
    fn lattice_size() {
        assert_eq!(simplex_grid(5, 4).len(), 70);
        assert!(simplex_grid(3, 4).iter().all(|p| p.iter().sum::<usize>() == 4));
    }

    #[test]
    fn constant_maps_are_zero() {
        let m = anomaly_map(Some(&[0.0; 16]), Some(&[0.3; 16]), 4, 4, 16, 2.0).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.0));
        assert_eq!((m.height, m.width), (16, 16));
        let m = anomaly_map(None, None, 4, 4, 20, 2.0).unwrap();
        assert_eq!(m.data.len(), 400);
    }

    #[test]
    fn map_peaks_at_hot_patch() {
        let mut r = vec![0.0; 16];
        r[5] = 1.0;
        let m = anomaly_map(Some(&r), None, 4, 4, 16, 2.0).unwrap();
        let (hot, cold) = (m.get(6, 6), m.get(14, 14));
        assert!(hot > cold);
        let swapped = anomaly_map(None, Some(&r), 4, 4, 16, 2.0).unwrap();
        assert_eq!(swapped, m);
    }
}
