//! The five proxy tasks: batch construction, task heads, losses, and the
//! multi-task model tying them to the shared encoder.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BceForm, Tape, Var};
use crate::backbone::{
    add_ffn, add_layer_norm, add_linear, layer_norm, linear, Block, EmbedInput, Encoder, EncoderConfig,
    Routing, TaskId, INIT_STD,
};
use crate::data::PatchSequence;
use crate::error::{Error, Result};
use crate::moe::{ExpertAssignment, ExpertDropoutMask, FfnParams, RoutingCounters};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::rng::{rng_for, stream};
use crate::tensor::{sigmoid, Float, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JigsawLoss {
    /// Both BCE terms over every (tile, position) pair.
    Full,
    /// Positive term only.
    Eq3Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 128,
            heads: 16,
            mlp_ratio: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub mask_ratio: f64,
    /// Jigsaw grid side `T` (T×T tiles).
    pub tiles: usize,
    pub mix_ratio: f64,
    pub jigsaw_loss: JigsawLoss,
    /// Probability clamp for the jigsaw and de-mixing losses.
    pub bce_eps: f64,
    pub decoder: DecoderConfig,
    /// Hidden width of the feed-forward heads; defaults to the encoder width.
    pub head_hidden: Option<usize>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.4,
            tiles: 4,
            mix_ratio: 0.25,
            jigsaw_loss: JigsawLoss::Full,
            bce_eps: 1e-7,
            decoder: DecoderConfig::default(),
            head_hidden: None,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        let n = encoder.num_patches();
        let err = |f: &str, m: String| Err(Error::config(format!("tasks.{f}"), m));
        let masked = masked_count(self.mask_ratio, n);
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) || masked == 0 || masked == n {
            return err("mask_ratio", format!("{} masks {masked} of {n} patches", self.mask_ratio));
        }
        let replaced = masked_count(self.mix_ratio, n);
        if !(self.mix_ratio > 0.0 && self.mix_ratio < 1.0) || replaced == 0 || replaced == n {
            return err("mix_ratio", format!("{} replaces {replaced} of {n} patches", self.mix_ratio));
        }
        let g = encoder.grid();
        if self.tiles == 0 || g % self.tiles != 0 {
            return err("tiles", format!("{}-patch grid does not split into {} tiles per side", g, self.tiles));
        }
        if self.tiles * self.tiles * 4 > n {
            return err("tiles", format!("T²={} exceeds N/4={}", self.tiles * self.tiles, n / 4));
        }
        if !(self.bce_eps > 0.0 && self.bce_eps < 0.5) {
            return err("bce_eps", format!("{} outside (0, 0.5)", self.bce_eps));
        }
        let d = &self.decoder;
        if d.depth == 0 || d.width == 0 || d.heads == 0 || d.width % d.heads != 0 || d.mlp_ratio == 0 {
            return err("decoder", format!("depth {} width {} heads {}", d.depth, d.width, d.heads));
        }
        if self.head_hidden == Some(0) {
            return err("head_hidden", "must be positive".into());
        }
        Ok(())
    }

    pub fn jigsaw_form(&self) -> BceForm {
        match self.jigsaw_loss {
            JigsawLoss::Full => BceForm::Clamped { eps: self.bce_eps },
            JigsawLoss::Eq3Literal => BceForm::ClampedPositiveOnly { eps: self.bce_eps },
        }
    }
}

fn masked_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).round() as usize
}

// ---------------------------------------------------------------- batches

#[derive(Clone, Debug, PartialEq)]
pub struct MimSample {
    pub patches: Mat<f32>,
    /// Sorted masked patch indices.
    pub masked: Vec<usize>,
    /// Sorted visible patch indices.
    pub visible: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JigsawSample {
    /// Patch grid after the tiles were permuted.
    pub shuffled: Mat<f32>,
    /// `perm[i]` is the original position of the tile now at position `i`.
    pub perm: Vec<usize>,
}

impl JigsawSample {
    /// `T²×T²` target with `y[i][j] = 1` iff tile `i` came from position `j`.
    pub fn targets(&self) -> Mat<f64> {
        let t2 = self.perm.len();
        let mut y = Mat::zeros(t2, t2);
        for (i, &j) in self.perm.iter().enumerate() {
            y.set(i, j, 1.0);
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeMixUpSample {
    pub mixed: Mat<f32>,
    /// Sorted replaced patch indices.
    pub replaced: Vec<usize>,
    /// 1 where the patch came from the donor.
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsSample {
    pub patches: Mat<f32>,
    pub label: u8,
}

/// A mini-batch for one task.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskBatch {
    Mim(Vec<MimSample>),
    Jigsaw(Vec<JigsawSample>),
    DeMixUp(Vec<DeMixUpSample>),
    AugCls(Vec<ClsSample>),
    GenCls(Vec<ClsSample>),
}

impl TaskBatch {
    pub fn task(&self) -> TaskId {
        match self {
            TaskBatch::Mim(_) => TaskId::Mim,
            TaskBatch::Jigsaw(_) => TaskId::Jigsaw,
            TaskBatch::DeMixUp(_) => TaskId::DeMixUp,
            TaskBatch::AugCls(_) => TaskId::AugCls,
            TaskBatch::GenCls(_) => TaskId::GenCls,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TaskBatch::Mim(v) => v.len(),
            TaskBatch::Jigsaw(v) => v.len(),
            TaskBatch::DeMixUp(v) => v.len(),
            TaskBatch::AugCls(v) | TaskBatch::GenCls(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_mim_batch<R: Rng + ?Sized>(seq: &PatchSequence, mask_ratio: f64, rng: &mut R) -> Result<MimSample> {
    let n = seq.num_patches();
    let m = masked_count(mask_ratio, n);
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) || m == 0 || m == n {
        return Err(Error::config("tasks.mask_ratio", format!("{mask_ratio} masks {m} of {n} patches")));
    }
    let mut masked = index::sample(rng, n, m).into_vec();
    masked.sort_unstable();
    Ok(mim_sample_with_mask(seq, masked))
}

/// A masked-modeling sample with a caller-chosen mask.
pub fn mim_sample_with_mask(seq: &PatchSequence, masked: Vec<usize>) -> MimSample {
    let mut is_masked = vec![false; seq.num_patches()];
    for &i in &masked {
        is_masked[i] = true;
    }
    let visible = (0..seq.num_patches()).filter(|&i| !is_masked[i]).collect();
    MimSample {
        patches: seq.patches.clone(),
        masked,
        visible,
    }
}

/// Patch indices of every tile position, row-major across tiles and within
/// each tile.
pub fn tile_patch_indices(grid_rows: usize, grid_cols: usize, tiles: usize) -> Result<Vec<Vec<usize>>> {
    if tiles == 0 || grid_rows % tiles != 0 || grid_cols % tiles != 0 {
        return Err(Error::Shape(format!("{grid_rows}×{grid_cols} patch grid does not split into {tiles}×{tiles} tiles")));
    }
    let (th, tw) = (grid_rows / tiles, grid_cols / tiles);
    Ok((0..tiles * tiles)
        .map(|t| {
            let (r0, c0) = ((t / tiles) * th, (t % tiles) * tw);
            (0..th)
                .flat_map(|r| (0..tw).map(move |c| (r0 + r) * grid_cols + c0 + c))
                .collect()
        })
        .collect())
}

/// Places original tile `perm[i]` at position `i`, preserving the patch
/// order inside each tile.
pub fn permute_tiles(seq: &PatchSequence, tiles: usize, perm: &[usize]) -> Result<Mat<f32>> {
    let idx = tile_patch_indices(seq.grid_rows, seq.grid_cols, tiles)?;
    let mut out = Mat::zeros(seq.patches.rows, seq.patches.cols);
    for (i, &src) in perm.iter().enumerate() {
        for (&dst_p, &src_p) in idx[i].iter().zip(&idx[src]) {
            out.row_mut(dst_p).copy_from_slice(seq.patches.row(src_p));
        }
    }
    Ok(out)
}

pub fn build_jigsaw_batch<R: Rng + ?Sized>(seq: &PatchSequence, tiles: usize, rng: &mut R) -> Result<JigsawSample> {
    if tiles * tiles * 4 > seq.num_patches() {
        return Err(Error::config(
            "tasks.tiles",
            format!("T²={} exceeds N/4 for N={}", tiles * tiles, seq.num_patches()),
        ));
    }
    let mut perm: Vec<usize> = (0..tiles * tiles).collect();
    perm.shuffle(rng);
    let shuffled = permute_tiles(seq, tiles, &perm)?;
    Ok(JigsawSample { shuffled, perm })
}

/// Replaces `round(mix_ratio·N)` uniformly chosen base patches by the donor
/// patches at the same grid locations.
pub fn build_demixup_batch<R: Rng + ?Sized>(
    base: (usize, &PatchSequence),
    donor: (usize, &PatchSequence),
    mix_ratio: f64,
    rng: &mut R,
) -> Result<DeMixUpSample> {
    if base.0 == donor.0 {
        return Err(Error::Precondition(format!("donor index {} equals base index", donor.0)));
    }
    let (b, d) = (base.1, donor.1);
    if b.patches.shape() != d.patches.shape() {
        return Err(Error::Shape("base and donor patch grids differ".into()));
    }
    let n = b.num_patches();
    let c = masked_count(mix_ratio, n);
    if !(mix_ratio > 0.0 && mix_ratio < 1.0) || c == 0 || c == n {
        return Err(Error::config("tasks.mix_ratio", format!("{mix_ratio} replaces {c} of {n} patches")));
    }
    let mut replaced = index::sample(rng, n, c).into_vec();
    replaced.sort_unstable();
    let mut mixed = b.patches.clone();
    let mut labels = vec![0u8; n];
    for &i in &replaced {
        mixed.row_mut(i).copy_from_slice(d.patches.row(i));
        labels[i] = 1;
    }
    Ok(DeMixUpSample { mixed, replaced, labels })
}

// ----------------------------------------------------------------- losses

/// `(1/|M|)·Σ_{i∈M} ‖x̂_i − x_i‖²`.
pub fn loss_mim(recon: &Mat<f64>, targets: &Mat<f64>, masked: &[usize]) -> Result<f64> {
    if masked.is_empty() {
        return Err(Error::Precondition("empty mask set".into()));
    }
    if recon.shape() != targets.shape() {
        return Err(Error::Shape("reconstruction and target shapes differ".into()));
    }
    let total: f64 = masked
        .iter()
        .map(|&i| {
            recon
                .row(i)
                .iter()
                .zip(targets.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    Ok(total / masked.len() as f64)
}

fn clamped_bce(p: f64, y: f64, eps: f64, positive_only: bool) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    let pos = -y * p.ln();
    if positive_only {
        pos
    } else {
        pos - (1.0 - y) * (1.0 - p).ln()
    }
}

/// Per-image jigsaw loss from tile-position probabilities, `1/T²`-normalized.
pub fn loss_jigsaw(probs: &Mat<f64>, targets: &Mat<f64>, mode: JigsawLoss, eps: f64) -> f64 {
    let positive_only = mode == JigsawLoss::Eq3Literal;
    let total: f64 = probs
        .data
        .iter()
        .zip(&targets.data)
        .map(|(&p, &y)| clamped_bce(p, y, eps, positive_only))
        .sum();
    total / probs.rows as f64
}

pub fn loss_demixup(probs: &[f64], labels: &[u8], eps: f64) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| clamped_bce(p, f64::from(y), eps, false))
        .sum();
    total / probs.len() as f64
}

/// Binary cross-entropy of `σ(logit)` in log-sum-exp form.
pub fn loss_cls(logit: f64, label: u8) -> f64 {
    crate::autodiff::bce_value(logit, f64::from(label), BceForm::LogSumExp)
}

// ------------------------------------------------------------------ model

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub tasks: TaskConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            tasks: TaskConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.tasks.validate(&self.encoder)
    }

    pub fn head_hidden(&self) -> usize {
        self.tasks.head_hidden.unwrap_or(self.encoder.width)
    }
}

/// Masked-modeling decoder: lifts encoder tokens to the decoder width,
/// fills masked positions with a shared mask token, adds decoder positional
/// embeddings, and predicts every patch.
#[derive(Clone, Debug)]
pub struct MimDecoder {
    pub embed: (ParamId, ParamId),
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln: (ParamId, ParamId),
    pub pred: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub mim: MimDecoder,
    pub jigsaw: FfnParams,
    pub demixup: FfnParams,
    pub augcls: FfnParams,
    pub gencls: FfnParams,
}

/// Prefix of every parameter owned by a task's head.
pub fn head_prefix(task: TaskId) -> String {
    format!("head.{task}.")
}

pub struct MultiTaskModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub heads: Heads,
    pub assignment: ExpertAssignment,
    tile_indices: Vec<Vec<usize>>,
}

/// Loss and raw head output of one task forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TaskOutput {
    pub task: TaskId,
    pub loss: Var,
    /// MIM: `B·(N+1) × patch_dim` reconstructions (row 0 of every sample is
    /// the classification slot). Jigsaw: `B·T² × T²` logits. De-mixing:
    /// `B·N × 1` logits. Classification: `B × 1` logits.
    pub output: Var,
}

impl<T: Float> MultiTaskModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[stream::INIT]);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config.encoder, &mut rng)?;
        let e = &config.encoder;
        let d = e.width;
        let hidden = config.head_hidden();
        let dc = &config.tasks.decoder;
        let mim = MimDecoder {
            embed: add_linear(&mut store, "head.mim.embed", d, dc.width, &mut rng),
            mask_token: store.add("head.mim.mask_token", trunc_normal(1, dc.width, INIT_STD, &mut rng)),
            pos: store.add("head.mim.pos", trunc_normal(e.num_patches() + 1, dc.width, INIT_STD, &mut rng)),
            blocks: (0..dc.depth)
                .map(|l| Block::new(&mut store, &format!("head.mim.l{l}"), dc.width, dc.mlp_ratio * dc.width, None, &mut rng))
                .collect(),
            ln: add_layer_norm(&mut store, "head.mim.ln", dc.width),
            pred: add_linear(&mut store, "head.mim.pred", dc.width, e.patch_dim(), &mut rng),
        };
        let tiles = config.tasks.tiles;
        let tile_indices = tile_patch_indices(e.grid(), e.grid(), tiles)?;
        let per_tile = tile_indices[0].len();
        let heads = Heads {
            mim,
            jigsaw: add_ffn(&mut store, "head.jigsaw", per_tile * d, hidden, tiles * tiles, &mut rng),
            demixup: add_ffn(&mut store, "head.demixup", d, hidden, 1, &mut rng),
            augcls: add_ffn(&mut store, "head.augcls", d, hidden, 1, &mut rng),
            gencls: add_ffn(&mut store, "head.gencls", d, hidden, 1, &mut rng),
        };
        Ok(Self {
            config: config.clone(),
            store,
            assignment: ExpertAssignment::new(e.experts)?,
            encoder,
            heads,
            tile_indices,
        })
    }

    pub fn tile_indices(&self) -> &[Vec<usize>] {
        &self.tile_indices
    }

    pub fn sample_dropout<R: Rng + ?Sized>(&self, rng: &mut R) -> ExpertDropoutMask {
        ExpertDropoutMask::sample(
            self.config.encoder.expert_dropout_rate,
            &self.assignment,
            self.config.encoder.num_moe_layers(),
            rng,
        )
    }

    fn stack(rows: &[&Mat<f32>], cols: usize) -> Mat<T> {
        let total: usize = rows.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(total * cols);
        for m in rows {
            data.extend(m.data.iter().map(|&v| T::lit(f64::from(v))));
        }
        Mat::from_vec(total, cols, data)
    }

    fn encode(
        &self,
        tape: &mut Tape<T>,
        input: &EmbedInput<T>,
        task: TaskId,
        mask: Option<&ExpertDropoutMask>,
        counters: Option<&mut RoutingCounters>,
    ) -> Result<(Var, usize)> {
        let (tokens, seq) = self.encoder.embed(tape, &self.store, input)?;
        let routing = Routing {
            assignment: &self.assignment,
            task,
            mask,
            counters,
        };
        Ok((self.encoder.encode(tape, &self.store, tokens, seq, routing)?, seq))
    }

    /// Checks the batch variant against `task`, then runs [`Self::forward`].
    pub fn forward_task(
        &self,
        tape: &mut Tape<T>,
        task: TaskId,
        batch: &TaskBatch,
        mask: Option<&ExpertDropoutMask>,
        counters: Option<&mut RoutingCounters>,
    ) -> Result<TaskOutput> {
        if batch.task() != task {
            return Err(Error::Dispatch(format!("{} batch passed for task {task}", batch.task())));
        }
        self.forward(tape, batch, mask, counters)
    }

    /// Encodes the batch under its task's routing, applies the task head and
    /// records the batch-mean loss.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        batch: &TaskBatch,
        mask: Option<&ExpertDropoutMask>,
        counters: Option<&mut RoutingCounters>,
    ) -> Result<TaskOutput> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let task = batch.task();
        let e = &self.config.encoder;
        let (n, pd) = (e.num_patches(), e.patch_dim());
        let bsz = batch.len();
        let eps = self.config.tasks.bce_eps;
        let store = &self.store;
        let (loss, output) = match batch {
            TaskBatch::Mim(samples) => {
                let nv = samples[0].visible.len();
                let nm = samples[0].masked.len();
                if nm == 0 {
                    return Err(Error::Precondition("masked-modeling sample with no masked patch".into()));
                }
                let mut rows = Mat::zeros(bsz * nv, pd);
                let mut positions = Vec::with_capacity(bsz * nv);
                for (b, s) in samples.iter().enumerate() {
                    if s.visible.len() != nv || s.masked.len() != nm || s.patches.shape() != (n, pd) {
                        return Err(Error::Shape("masked-modeling samples differ in layout".into()));
                    }
                    for (j, &p) in s.visible.iter().enumerate() {
                        for (o, &v) in rows.row_mut(b * nv + j).iter_mut().zip(s.patches.row(p)) {
                            *o = T::lit(f64::from(v));
                        }
                    }
                    positions.extend_from_slice(&s.visible);
                }
                let input = EmbedInput {
                    patches: rows,
                    batch: bsz,
                    positions: Some(positions),
                };
                let (enc, seq) = self.encode(tape, &input, task, mask, counters)?;
                let recon = self.decode(tape, enc, seq, samples)?;
                let mut target = Mat::zeros(bsz * (n + 1), pd);
                let mut loss_rows = Vec::with_capacity(bsz * nm);
                let w = T::one() / T::lit((bsz * nm) as f64);
                for (b, s) in samples.iter().enumerate() {
                    for p in 0..n {
                        for (o, &v) in target.row_mut(b * (n + 1) + 1 + p).iter_mut().zip(s.patches.row(p)) {
                            *o = T::lit(f64::from(v));
                        }
                    }
                    loss_rows.extend(s.masked.iter().map(|&p| (b * (n + 1) + 1 + p, w)));
                }
                (tape.squared_error(recon, target, loss_rows), recon)
            }
            TaskBatch::Jigsaw(samples) => {
                let t2 = self.tile_indices.len();
                let refs: Vec<&Mat<f32>> = samples.iter().map(|s| &s.shuffled).collect();
                let input = EmbedInput {
                    patches: Self::stack(&refs, pd),
                    batch: bsz,
                    positions: None,
                };
                let (enc, seq) = self.encode(tape, &input, task, mask, counters)?;
                let per_tile = self.tile_indices[0].len();
                let mut map = Vec::with_capacity(bsz * n);
                for b in 0..bsz {
                    for tile in &self.tile_indices {
                        map.extend(tile.iter().map(|&p| (0, (b * seq + 1 + p) as u32)));
                    }
                }
                let gathered = tape.gather(&[enc], map);
                let d = e.width;
                let tile_tokens = tape.reshape(gathered, bsz * t2, per_tile * d);
                let logits = self.heads.jigsaw.forward(tape, store, tile_tokens);
                let mut targets = Mat::zeros(bsz * t2, t2);
                for (b, s) in samples.iter().enumerate() {
                    if s.perm.len() != t2 {
                        return Err(Error::Shape(format!("permutation over {} tiles, head expects {t2}", s.perm.len())));
                    }
                    for (i, &j) in s.perm.iter().enumerate() {
                        targets.set(b * t2 + i, j, T::one());
                    }
                }
                let w = T::one() / T::lit((bsz * t2) as f64);
                (tape.bce(logits, targets, w, self.config.tasks.jigsaw_form()), logits)
            }
            TaskBatch::DeMixUp(samples) => {
                let refs: Vec<&Mat<f32>> = samples.iter().map(|s| &s.mixed).collect();
                let input = EmbedInput {
                    patches: Self::stack(&refs, pd),
                    batch: bsz,
                    positions: Some((0..bsz).flat_map(|_| 0..n).collect()),
                };
                let (enc, seq) = self.encode(tape, &input, task, mask, counters)?;
                let map = (0..bsz)
                    .flat_map(|b| (0..n).map(move |p| (0, (b * seq + 1 + p) as u32)))
                    .collect();
                let tokens = tape.gather(&[enc], map);
                let logits = self.heads.demixup.forward(tape, store, tokens);
                let targets = Mat::from_vec(
                    bsz * n,
                    1,
                    samples
                        .iter()
                        .flat_map(|s| s.labels.iter().map(|&y| T::lit(f64::from(y))))
                        .collect(),
                );
                let w = T::one() / T::lit((bsz * n) as f64);
                (tape.bce(logits, targets, w, BceForm::Clamped { eps }), logits)
            }
            TaskBatch::AugCls(samples) | TaskBatch::GenCls(samples) => {
                let refs: Vec<&Mat<f32>> = samples.iter().map(|s| &s.patches).collect();
                let input = EmbedInput {
                    patches: Self::stack(&refs, pd),
                    batch: bsz,
                    positions: Some((0..bsz).flat_map(|_| 0..n).collect()),
                };
                let (enc, seq) = self.encode(tape, &input, task, mask, counters)?;
                let cls = tape.gather(&[enc], (0..bsz).map(|b| (0, (b * seq) as u32)).collect());
                let head = if task == TaskId::AugCls {
                    &self.heads.augcls
                } else {
                    &self.heads.gencls
                };
                let logits = head.forward(tape, store, cls);
                let targets = Mat::from_vec(bsz, 1, samples.iter().map(|s| T::lit(f64::from(s.label))).collect());
                let w = T::one() / T::lit(bsz as f64);
                (tape.bce(logits, targets, w, BceForm::LogSumExp), logits)
            }
        };
        Ok(TaskOutput { task, loss, output })
    }

    fn decode(&self, tape: &mut Tape<T>, enc: Var, seq: usize, samples: &[MimSample]) -> Result<Var> {
        let store = &self.store;
        let dec = &self.heads.mim;
        let n = self.config.encoder.num_patches();
        let bsz = samples.len();
        let lifted = linear(tape, store, enc, dec.embed);
        let mask_token = tape.param(store, dec.mask_token);
        let mut map = Vec::with_capacity(bsz * (n + 1));
        for (b, s) in samples.iter().enumerate() {
            map.push((0, (b * seq) as u32));
            let mut slot = vec![None; n];
            for (j, &p) in s.visible.iter().enumerate() {
                slot[p] = Some(j);
            }
            map.extend(slot.iter().map(|v| match v {
                Some(j) => (0, (b * seq + 1 + j) as u32),
                None => (1, 0),
            }));
        }
        let full = tape.gather(&[lifted, mask_token], map);
        let pos = tape.param(store, dec.pos);
        let pos_rows = tape.gather(&[pos], (0..bsz).flat_map(|_| (0..=n).map(|r| (0, r as u32))).collect());
        let mut x = tape.add(full, pos_rows);
        let heads = self.config.tasks.decoder.heads;
        for block in &dec.blocks {
            x = block.forward(tape, store, x, heads, n + 1, None)?;
        }
        let x = layer_norm(tape, store, x, dec.ln);
        Ok(linear(tape, store, x, dec.pred))
    }

    /// Fraction of tiles whose highest-scoring position is their true origin.
    pub fn jigsaw_accuracy(tape: &Tape<T>, out: &TaskOutput, samples: &[JigsawSample]) -> f64 {
        let logits = tape.value(out.output);
        let t2 = logits.cols;
        let mut correct = 0usize;
        for (b, s) in samples.iter().enumerate() {
            for (i, &j) in s.perm.iter().enumerate() {
                let row = logits.row(b * t2 + i);
                let best = (0..t2)
                    .max_by(|&x, &y| row[x].partial_cmp(&row[y]).expect("finite logits"))
                    .expect("nonempty row");
                correct += usize::from(best == j);
            }
        }
        correct as f64 / (samples.len() * t2) as f64
    }

    /// Fraction of patches whose predicted provenance matches the label.
    pub fn demixup_accuracy(tape: &Tape<T>, out: &TaskOutput, samples: &[DeMixUpSample]) -> f64 {
        let logits = tape.value(out.output);
        let labels = samples.iter().flat_map(|s| s.labels.iter());
        let (mut correct, mut total) = (0usize, 0usize);
        for (&z, &y) in logits.data.iter().zip(labels) {
            correct += usize::from((z > T::zero()) == (y == 1));
            total += 1;
        }
        correct as f64 / total as f64
    }

    /// Sigmoid probabilities of a logit output.
    pub fn probabilities(tape: &Tape<T>, out: &TaskOutput) -> Vec<f64> {
        tape.value(out.output).data.iter().map(|&z| sigmoid(z).as_f64()).collect()
    }
}
