//! Evaluation: AUROC, multi-seed reports, and the command implementations
//! behind the command-line tool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::backbone::TaskId;
use crate::config::fingerprint;
use crate::data::{load_image, load_mask, make_toy_dataset, patchify, save_mask, save_png, DatasetManifest, Label, Mask, PatchSequence, ToyConfig, ToyDataset};
use crate::error::{Error, Result};
use crate::params::{load_checkpoint_into, read_checkpoint_metadata};
use crate::pseudo::{ingest_external_generated, synthesize_pair};
use crate::scoring::{fit_weights, fuse, percentile_rank, AnomalyMap, FusionMode, FusionWeights, ImageScore, PercentileTables, ScoreVector, Scorer};
use crate::tasks::MultiTaskModel;
use crate::train::{record_stem, train, RunConfig, TaskFlags};

/// Mann–Whitney AUROC with ties counted half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Image-level AUROCs of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEval {
    pub seed: u64,
    pub fused: Option<f64>,
    pub per_task: [Option<f64>; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub seeds: Vec<SeedEval>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub per_task: [Option<(f64, f64)>; 5],
}

fn stat(values: Vec<f64>) -> Option<(f64, f64)> {
    (!values.is_empty()).then(|| mean_std(&values))
}

impl EvalReport {
    pub fn new(fingerprint: String, seeds: Vec<SeedEval>) -> Self {
        let fused = stat(seeds.iter().filter_map(|s| s.fused).collect());
        let mut per_task = [None; 5];
        for (i, slot) in per_task.iter_mut().enumerate() {
            *slot = stat(seeds.iter().filter_map(|s| s.per_task[i]).collect());
        }
        Self {
            fingerprint,
            seeds,
            mean: fused.map(|f| f.0),
            std: fused.map(|f| f.1),
            per_task,
        }
    }

    fn rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut headers = vec!["run".to_owned(), "fused".to_owned()];
        headers.extend(TaskId::ALL.iter().map(|t| t.name().to_owned()));
        let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into());
        let pm = |v: Option<(f64, f64)>| {
            v.map(|(m, s)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s))
                .unwrap_or_else(|| "-".into())
        };
        let mut rows: Vec<Vec<String>> = self
            .seeds
            .iter()
            .map(|s| {
                let mut r = vec![format!("seed {}", s.seed), pct(s.fused)];
                r.extend(s.per_task.iter().map(|&v| pct(v)));
                r
            })
            .collect();
        let mut summary = vec!["mean ± std".to_owned(), pm(self.mean.zip(self.std))];
        summary.extend(self.per_task.iter().map(|&v| pm(v)));
        rows.push(summary);
        (headers, rows)
    }

    pub fn to_text(&self) -> String {
        let (h, r) = self.rows();
        format!("config {}\n{}", self.fingerprint, aligned(&h, &r))
    }

    /// Writes `report.json`, `report.csv` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("report.json");
        fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))?;
        let (h, r) = self.rows();
        write_csv(&dir.join("report.csv"), &h, &r)?;
        let p = dir.join("report.txt");
        fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))
    }
}

/// Left-aligned plain-text table.
pub fn aligned(headers: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_owned()
    };
    let mut out = line(headers);
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, headers: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(headers)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rebuilds the model stored in a checkpoint directory together with the
/// configuration it was trained with.
pub fn load_model(ckpt: &Path) -> Result<(RunConfig, u64, MultiTaskModel<f32>)> {
    let meta = read_checkpoint_metadata(ckpt)?;
    let cfg: RunConfig = serde_json::from_value(meta["config"].clone())?;
    let seed = meta["seed"]
        .as_u64()
        .ok_or_else(|| Error::Format("checkpoint metadata lacks a seed".into()))?;
    let mut model = MultiTaskModel::new(&cfg.model, seed)?;
    load_checkpoint_into(&mut model.store, ckpt)?;
    Ok((cfg, seed, model))
}

/// Every record of a manifest, patchified for the model.
pub fn load_split(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<Vec<PatchSequence>> {
    let e = &cfg.model.encoder;
    (0..manifest.len())
        .map(|i| {
            let img = load_image(&manifest.image_path(i), e.image_size)?.with_channels(e.channels)?;
            patchify(&img, e.patch_size)
        })
        .collect()
}

pub const TABLES_FILE: &str = "percentiles.json";
pub const WEIGHTS_FILE: &str = "fusion.json";

/// Loads the percentile tables and fusion weights stored beside a
/// checkpoint, building them from the validation split when absent.
pub fn fusion_artifacts(ckpt: &Path, cfg: &RunConfig, model: &MultiTaskModel<f32>) -> Result<(PercentileTables, FusionWeights)> {
    let tasks = cfg.tasks.enabled();
    let (tp, wp) = (ckpt.join(TABLES_FILE), ckpt.join(WEIGHTS_FILE));
    if tp.exists() && wp.exists() {
        let tables = PercentileTables::load(&tp)?;
        let text = fs::read_to_string(&wp).map_err(|e| Error::io(&wp, e))?;
        return Ok((tables, serde_json::from_str(&text)?));
    }
    let val_path = cfg
        .data
        .val
        .as_ref()
        .ok_or_else(|| Error::config("data.val", "validation split needed for percentile tables"))?;
    let manifest = DatasetManifest::read(val_path)?;
    if manifest.is_empty() {
        return Err(Error::Precondition("empty validation split".into()));
    }
    let seqs = load_split(&manifest, cfg)?;
    let scorer = Scorer::new(model, &cfg.scoring, tasks.clone());
    let scores: Vec<ScoreVector> = scorer.score(&seqs)?.into_iter().map(|s| s.scores).collect();
    let tables = PercentileTables::build(&scores, &tasks)?;
    let weights = match cfg.scoring.fusion {
        FusionMode::Uniform => FusionWeights::uniform(&tasks),
        FusionMode::ValidationFit => {
            let labels: Vec<u8> = manifest.records.iter().map(|r| r.label.as_binary().unwrap_or(0)).collect();
            fit_weights(&scores, &labels, &tables, &tasks, cfg.scoring.fit_grid)?
        }
    };
    tables.save(&tp)?;
    fs::write(&wp, serde_json::to_string_pretty(&weights)?).map_err(|e| Error::io(&wp, e))?;
    Ok((tables, weights))
}

/// Scores of one test image.
#[derive(Clone, Debug)]
pub struct ScoredImage {
    pub path: PathBuf,
    pub label: Label,
    pub mask: Option<PathBuf>,
    pub score: ImageScore,
    pub percentiles: [Option<f64>; 5],
    pub fused: f64,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub seed_eval: SeedEval,
    pub images: Vec<ScoredImage>,
    /// Anomaly maps in image order, when requested.
    pub maps: Option<Vec<AnomalyMap>>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_scores(path: &Path, images: &[ScoredImage]) -> Result<()> {
    let mut headers = vec!["path".to_owned()];
    headers.extend(TaskId::ALL.iter().map(|t| format!("score_{t}")));
    headers.extend(TaskId::ALL.iter().map(|t| format!("pct_{t}")));
    headers.push("fused".into());
    headers.push("label".into());
    let rows: Vec<Vec<String>> = images
        .iter()
        .map(|s| {
            let mut r = vec![s.path.display().to_string()];
            r.extend(s.score.scores.values.iter().map(|&v| opt(v)));
            r.extend(s.percentiles.iter().map(|&v| opt(v)));
            r.push(s.fused.to_string());
            r.push(s.label.as_binary().map(|b| b.to_string()).unwrap_or_default());
            r
        })
        .collect();
    write_csv(path, &headers, &rows)
}

/// Scores a test manifest with a checkpoint, writes `scores.csv` (and maps
/// under `maps/` when asked) into `out`, and computes AUROCs when the split
/// carries both labels.
pub fn cmd_eval(ckpt: &Path, test: Option<&Path>, maps: bool, out: &Path) -> Result<EvalOutput> {
    let (cfg, seed, model) = load_model(ckpt)?;
    let test_path = test
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.test.clone())
        .ok_or_else(|| Error::config("data.test", "test manifest required"))?;
    let manifest = DatasetManifest::read(&test_path)?;
    let (tables, weights) = fusion_artifacts(ckpt, &cfg, &model)?;
    let tasks = cfg.tasks.enabled();
    let seqs = load_split(&manifest, &cfg)?;
    let scorer = Scorer::new(&model, &cfg.scoring, tasks.clone());
    let scores = scorer.score(&seqs)?;
    let mut images = Vec::with_capacity(scores.len());
    for (i, s) in scores.into_iter().enumerate() {
        let mut percentiles = [None; 5];
        for &t in &tasks {
            if let (Some(v), Some(table)) = (s.scores.get(t), tables.tables.get(&t)) {
                percentiles[t.index()] = Some(percentile_rank(v, table));
            }
        }
        let fused = fuse(&s.scores, &tables, &weights)?;
        let r = &manifest.records[i];
        images.push(ScoredImage {
            path: r.image.clone(),
            label: r.label,
            mask: manifest.mask_path(i),
            score: s,
            percentiles,
            fused,
        });
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_scores(&out.join("scores.csv"), &images)?;
    let labels: Option<Vec<u8>> = images.iter().map(|s| s.label.as_binary()).collect();
    let seed_eval = match labels {
        Some(labels) => {
            let metric = |v: Vec<f64>| match auroc(&v, &labels) {
                Ok(a) => Ok(Some(a)),
                Err(Error::UndefinedMetric(m)) => {
                    warn!("AUROC skipped: {m}");
                    Ok(None)
                }
                Err(e) => Err(e),
            };
            let fused = metric(images.iter().map(|s| s.fused).collect())?;
            let mut per_task = [None; 5];
            for &t in &tasks {
                per_task[t.index()] = metric(images.iter().map(|s| s.score.scores.get(t).unwrap_or(0.0)).collect())?;
            }
            SeedEval { seed, fused, per_task }
        }
        None => {
            warn!("test split has unlabeled records; AUROC skipped");
            SeedEval {
                seed,
                fused: None,
                per_task: [None; 5],
            }
        }
    };
    let maps = if maps {
        let dir = out.join("maps");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let size = cfg.model.encoder.image_size;
        let mut all = Vec::with_capacity(images.len());
        for (i, s) in images.iter().enumerate() {
            let map = scorer.anomaly_map(&s.score, size)?;
            let stem = record_stem(&s.path);
            map.save_png(&dir.join(format!("{stem}.png")))?;
            let img = load_image(&manifest.image_path(i), size)?;
            map.save_overlay(&img, &dir.join(format!("{stem}.overlay.png")))?;
            all.push(map);
        }
        Some(all)
    } else {
        None
    };
    Ok(EvalOutput { seed_eval, images, maps })
}

/// `(mean inside, mean outside)` of a map over a ground-truth mask, or
/// `None` when either region is empty.
pub fn map_contrast(map: &AnomalyMap, mask: &Mask) -> Option<(f64, f64)> {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..map.height {
        for x in 0..map.width {
            let v = f64::from(map.get(y, x));
            if mask.get(y, x) {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
    }
    (ni > 0 && no > 0).then(|| (si / ni as f64, so / no as f64))
}

/// Fraction of masked images whose map is hotter inside the mask than outside.
pub fn map_hit_rate(output: &EvalOutput, image_size: usize) -> Result<Option<f64>> {
    let Some(maps) = &output.maps else { return Ok(None) };
    let (mut hits, mut total) = (0usize, 0usize);
    for (s, map) in output.images.iter().zip(maps) {
        let Some(mask_path) = &s.mask else { continue };
        let mask = load_mask(mask_path, image_size)?;
        if let Some((inside, outside)) = map_contrast(map, &mask) {
            total += 1;
            hits += usize::from(inside > outside);
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// Run directory of one seed: `<output_dir>/<fingerprint>/<seed>`.
pub fn run_dir(cfg: &RunConfig, seed: u64) -> Result<PathBuf> {
    Ok(cfg.output_dir.join(fingerprint(cfg)?).join(seed.to_string()))
}

fn check_inputs(cfg: &RunConfig) -> Result<()> {
    for (field, p) in [("data.train", &cfg.data.train), ("data.val", &cfg.data.val), ("data.test", &cfg.data.test)] {
        if let Some(p) = p {
            if !p.exists() {
                return Err(Error::config(field, format!("{} does not exist", p.display())));
            }
        }
    }
    if cfg.data.train.is_none() {
        return Err(Error::config("data.train", "training manifest required"));
    }
    Ok(())
}

/// Trains one independent run per seed; returns the run directories.
pub fn cmd_train(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    check_inputs(cfg)?;
    let mut dirs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let dir = run_dir(cfg, seed)?;
        info!("training seed {seed} into {}", dir.display());
        train(cfg, seed, &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Trains and evaluates every seed, writing `report.*` beside the runs.
pub fn cmd_train_eval(cfg: &RunConfig, seeds: &[u64], maps: bool) -> Result<(EvalReport, Vec<EvalOutput>)> {
    let dirs = cmd_train(cfg, seeds)?;
    let mut outputs = Vec::with_capacity(dirs.len());
    for d in &dirs {
        outputs.push(cmd_eval(&d.join("last"), None, maps, &d.join("eval"))?);
    }
    let report = EvalReport::new(fingerprint(cfg)?, outputs.iter().map(|o| o.seed_eval.clone()).collect());
    report.write(&cfg.output_dir.join(fingerprint(cfg)?))?;
    Ok((report, outputs))
}

/// Aggregates already-evaluated runs into one report.
pub fn aggregate(fingerprint: String, evals: Vec<SeedEval>) -> EvalReport {
    EvalReport::new(fingerprint, evals)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub images: usize,
    pub masks: usize,
    pub external: usize,
}

/// Writes `<stem>.aug.png`, `<stem>.gen.png`, their `.mask.png` files and a
/// `<stem>.recipe.json` for every training image into `out`.
pub fn cmd_synth(cfg: &RunConfig, seed: u64, out: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let train_path = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::config("data.train", "training manifest required"))?;
    let manifest = DatasetManifest::read(train_path)?;
    let e = &cfg.model.encoder;
    let external = match &cfg.data.external_gen {
        Some(dir) => ingest_external_generated(dir, e.image_size)?,
        None => BTreeMap::new(),
    };
    fs::create_dir_all(out).map_err(|err| Error::io(out, err))?;
    let mut summary = SynthSummary::default();
    for i in 0..manifest.len() {
        let stem = record_stem(&manifest.records[i].image);
        let img = load_image(&manifest.image_path(i), e.image_size)?.with_channels(e.channels)?;
        let ext = external.get(&stem).map(|x| x.with_channels(e.channels)).transpose()?;
        let pair = synthesize_pair(&img, i, seed, &cfg.pseudo, ext.as_ref())?;
        save_png(&pair.aug, &out.join(format!("{stem}.aug.png")))?;
        save_png(&pair.gen, &out.join(format!("{stem}.gen.png")))?;
        save_mask(&pair.aug_mask, &out.join(format!("{stem}.aug.mask.png")))?;
        save_mask(&pair.gen_mask, &out.join(format!("{stem}.gen.mask.png")))?;
        let recipe = serde_json::json!({
            "augmented": pair.recipe,
            "ellipses": pair.ellipses,
            "fill": pair.fill,
            "external": ext.is_some(),
        });
        let p = out.join(format!("{stem}.recipe.json"));
        fs::write(&p, serde_json::to_string_pretty(&recipe)?).map_err(|err| Error::io(&p, err))?;
        summary.images += 2;
        summary.masks += 2;
        summary.external += usize::from(ext.is_some());
    }
    Ok(summary)
}

/// The nine task combinations of the reference ablation, in order.
pub fn reference_ablation_rows() -> Vec<TaskFlags> {
    use TaskId::*;
    [
        &[Mim][..],
        &[Jigsaw],
        &[DeMixUp],
        &[AugCls],
        &[GenCls],
        &[Mim, Jigsaw],
        &[Mim, Jigsaw, DeMixUp],
        &[Mim, Jigsaw, DeMixUp, AugCls],
        &[Mim, Jigsaw, DeMixUp, AugCls, GenCls],
    ]
    .into_iter()
    .map(TaskFlags::only)
    .collect()
}

/// Parses rows such as `10000,11100`; each digit toggles one task in
/// the order MIM, jigsaw, de-mixing, aug-cls, gen-cls.
pub fn parse_ablation_rows(spec: &str) -> Result<Vec<TaskFlags>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|row| {
            if row.len() != 5 || !row.chars().all(|c| c == '0' || c == '1') {
                return Err(Error::config("rows", format!("`{row}` is not five 0/1 digits")));
            }
            let tasks: Vec<TaskId> = row
                .chars()
                .zip(TaskId::ALL)
                .filter(|(c, _)| *c == '1')
                .map(|(_, t)| t)
                .collect();
            let flags = TaskFlags::only(&tasks);
            flags.validate().map_err(|_| Error::config("rows", format!("`{row}` enables no task")))?;
            Ok(flags)
        })
        .collect()
}

pub fn flags_label(f: &TaskFlags) -> String {
    TaskId::ALL.iter().map(|&t| if f.get(t) { '1' } else { '0' }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: TaskFlags,
    pub eval: SeedEval,
}

/// Retrains and evaluates the base config once per task combination with a
/// shared seed; writes `ablation.csv` and `ablation.txt` under `out`.
pub fn cmd_ablate(base: &RunConfig, rows: &[TaskFlags], seed: u64, out: &Path) -> Result<Vec<AblationRow>> {
    let mut results = Vec::with_capacity(rows.len());
    for flags in rows {
        flags.validate()?;
        let mut cfg = base.clone();
        cfg.tasks = *flags;
        cfg.output_dir = out.join(format!("row_{}", flags_label(flags)));
        let (report, _) = cmd_train_eval(&cfg, &[seed], false)?;
        results.push(AblationRow {
            flags: *flags,
            eval: report.seeds[0].clone(),
        });
    }
    let mut headers: Vec<String> = TaskId::ALL.iter().map(|t| t.name().to_owned()).collect();
    headers.push("auroc".into());
    let table: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            let mut row: Vec<String> = TaskId::ALL
                .iter()
                .map(|&t| if r.flags.get(t) { "x" } else { "-" }.to_owned())
                .collect();
            row.push(r.eval.fused.map(|a| format!("{:.2}", 100.0 * a)).unwrap_or_else(|| "-".into()));
            row
        })
        .collect();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_csv(&out.join("ablation.csv"), &headers, &table)?;
    let p = out.join("ablation.txt");
    fs::write(&p, aligned(&headers, &table)).map_err(|e| Error::io(&p, e))?;
    Ok(results)
}

pub fn cmd_toydata(cfg: &ToyConfig, seed: u64, root: &Path) -> Result<ToyDataset> {
    make_toy_dataset(cfg, seed, root)
}

/// Scores one image: returns the fused score, the per-task scores, and the
/// anomaly map, which is also written to `map_out` when given.
pub fn cmd_score(ckpt: &Path, image: &Path, map_out: Option<&Path>) -> Result<(f64, ScoreVector, AnomalyMap)> {
    let (cfg, _, model) = load_model(ckpt)?;
    let (tables, weights) = fusion_artifacts(ckpt, &cfg, &model)?;
    let e = &cfg.model.encoder;
    let img = load_image(image, e.image_size)?;
    let seq = patchify(&img.with_channels(e.channels)?, e.patch_size)?;
    let scorer = Scorer::new(&model, &cfg.scoring, cfg.tasks.enabled());
    let s = scorer.score(std::slice::from_ref(&seq))?.remove(0);
    let fused = fuse(&s.scores, &tables, &weights)?;
    let map = scorer.anomaly_map(&s, e.image_size)?;
    if let Some(p) = map_out {
        map.save_png(p)?;
    }
    Ok((fused, s.scores, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_worked_example() {
        let a = auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert_eq!(a, 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn ablation_row_parsing() {
        let rows = parse_ablation_rows("10000, 11100").unwrap();
        assert_eq!(rows[1].enabled(), vec![TaskId::Mim, TaskId::Jigsaw, TaskId::DeMixUp]);
        assert!(matches!(parse_ablation_rows("00000"), Err(Error::Config { .. })));
        assert!(parse_ablation_rows("1010").is_err());
        assert_eq!(reference_ablation_rows().len(), 9);
        assert_eq!(flags_label(&reference_ablation_rows()[6]), "11100");
    }

    #[test]
    fn report_text() {
        let r = EvalReport::new(
            "abc".into(),
            vec![
                SeedEval { seed: 0, fused: Some(0.9), per_task: [Some(0.8); 5] },
                SeedEval { seed: 1, fused: Some(0.92), per_task: [Some(0.82); 5] },
            ],
        );
        assert!((r.mean.unwrap() - 0.91).abs() < 1e-12);
        let text = r.to_text();
        assert!(text.contains("91.00 ± 1.41"), "{text}");
    }
}
