//! Pre-norm transformer encoder over patch tokens.
//!
//! Each layer computes `X' = X + MHSA(LN(X))`, then `X'' = X' + FFN(LN(X'))`,
//! where FFN is a task-routed mixture of experts in the configured layers.
//! A final layer norm closes the stack. Token 0 is the classification token.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::moe::{moe_forward, ExpertAssignment, ExpertDropoutMask, FfnParams, RoutingCounters};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::{Float, Mat};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Mim,
    Jigsaw,
    DeMixUp,
    AugCls,
    GenCls,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::Mim,
        TaskId::Jigsaw,
        TaskId::DeMixUp,
        TaskId::AugCls,
        TaskId::GenCls,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Mim => "mim",
            TaskId::Jigsaw => "jigsaw",
            TaskId::DeMixUp => "demixup",
            TaskId::AugCls => "augcls",
            TaskId::GenCls => "gencls",
        }
    }

    pub fn is_self_supervised(self) -> bool {
        matches!(self, TaskId::Mim | TaskId::Jigsaw | TaskId::DeMixUp)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Hidden width of every feed-forward block as a multiple of `width`.
    pub mlp_ratio: usize,
    pub experts: usize,
    /// 1-based layer indices whose feed-forward block is a mixture of
    /// experts; `None` means every layer.
    pub moe_layers: Option<Vec<usize>>,
    pub expert_dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            channels: 3,
            patch_size: 16,
            depth: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            experts: 5,
            moe_layers: None,
            expert_dropout_rate: 0.10,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: String| Err(Error::config(format!("encoder.{f}"), m));
        if !(1..=12).contains(&self.depth) {
            return err("depth", format!("{} outside [1, 12]", self.depth));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return err("heads", format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return err(
                "patch_size",
                format!("image size {} not divisible by patch size {}", self.image_size, self.patch_size),
            );
        }
        if !matches!(self.channels, 1 | 3) {
            return err("channels", format!("{} (expected 1 or 3)", self.channels));
        }
        if self.experts == 0 {
            return err("experts", "must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio", "must be at least 1".into());
        }
        if let Some(layers) = &self.moe_layers {
            if let Some(l) = layers.iter().find(|&&l| l == 0 || l > self.depth) {
                return err("moe_layers", format!("layer {l} outside 1..={}", self.depth));
            }
        }
        if !(0.0..1.0).contains(&self.expert_dropout_rate) {
            return err("expert_dropout_rate", format!("{} outside [0, 1)", self.expert_dropout_rate));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.moe_layers
            .as_ref()
            .map_or(true, |ls| ls.contains(&(layer + 1)))
    }

    pub fn num_moe_layers(&self) -> usize {
        (0..self.depth).filter(|&l| self.is_moe_layer(l)).count()
    }
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Dense(FfnParams),
    /// Experts of one mixture layer; `slot` indexes the dropout mask.
    Moe { experts: Vec<FfnParams>, slot: usize },
}

/// Parameter handles of one pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: (ParamId, ParamId),
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub o: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub ffn: FeedForward,
}

pub(crate) fn add_linear<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.w"), trunc_normal(fan_in, fan_out, INIT_STD, rng)),
        store.add(format!("{name}.b"), Mat::zeros(1, fan_out)),
    )
}

pub(crate) fn add_layer_norm<T: Float>(store: &mut ParamStore<T>, name: &str, width: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.g"), Mat::filled(1, width, T::one())),
        store.add(format!("{name}.b"), Mat::zeros(1, width)),
    )
}

pub(crate) fn add_ffn<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    width: usize,
    hidden: usize,
    out: usize,
    rng: &mut R,
) -> FfnParams {
    let (w1, b1) = add_linear(store, &format!("{name}.fc1"), width, hidden, rng);
    let (w2, b2) = add_linear(store, &format!("{name}.fc2"), hidden, out, rng);
    FfnParams { w1, b1, w2, b2 }
}

pub(crate) fn linear<T: Float>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, p: (ParamId, ParamId)) -> Var {
    let w = tape.param(store, p.0);
    let b = tape.param(store, p.1);
    tape.linear(x, w, b)
}

pub(crate) fn layer_norm<T: Float>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, p: (ParamId, ParamId)) -> Var {
    let g = tape.param(store, p.0);
    let b = tape.param(store, p.1);
    tape.layer_norm(x, g, b)
}

/// Routing context for mixture layers.
pub struct Routing<'a> {
    pub assignment: &'a ExpertAssignment,
    pub task: TaskId,
    pub mask: Option<&'a ExpertDropoutMask>,
    pub counters: Option<&'a mut RoutingCounters>,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        hidden: usize,
        moe: Option<(usize, usize)>,
        rng: &mut R,
    ) -> Self {
        let ln1 = add_layer_norm(store, &format!("{name}.ln1"), width);
        let q = add_linear(store, &format!("{name}.attn.q"), width, width, rng);
        let k = add_linear(store, &format!("{name}.attn.k"), width, width, rng);
        let v = add_linear(store, &format!("{name}.attn.v"), width, width, rng);
        let o = add_linear(store, &format!("{name}.attn.o"), width, width, rng);
        let ln2 = add_layer_norm(store, &format!("{name}.ln2"), width);
        let ffn = match moe {
            None => FeedForward::Dense(add_ffn(store, &format!("{name}.ffn"), width, hidden, width, rng)),
            Some((num_experts, slot)) => FeedForward::Moe {
                experts: (0..num_experts)
                    .map(|e| add_ffn(store, &format!("{name}.expert{e}"), width, hidden, width, rng))
                    .collect(),
                slot,
            },
        };
        Self { ln1, q, k, v, o, ln2, ffn }
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        heads: usize,
        seq: usize,
        routing: Option<&mut Routing<'_>>,
    ) -> Result<Var> {
        let h = layer_norm(tape, store, x, self.ln1);
        let q = linear(tape, store, h, self.q);
        let k = linear(tape, store, h, self.k);
        let v = linear(tape, store, h, self.v);
        let a = tape.attention(q, k, v, heads, seq);
        let a = linear(tape, store, a, self.o);
        let x = tape.add(x, a);
        let h = layer_norm(tape, store, x, self.ln2);
        let f = match &self.ffn {
            FeedForward::Dense(p) => p.forward(tape, store, h),
            FeedForward::Moe { experts, slot } => {
                let r = routing.ok_or_else(|| Error::State("mixture layer without routing".into()))?;
                let active = r.mask.map(|m| m.active[*slot].as_slice());
                let counters = r.counters.as_deref_mut().map(|c| (c, *slot));
                moe_forward(tape, store, experts, r.assignment, h, r.task, active, counters)?
            }
        };
        Ok(tape.add(x, f))
    }
}

/// Encoder parameter handles.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch: (ParamId, ParamId),
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: (ParamId, ParamId),
}

/// Patch tokens of `batch` samples stacked row-wise, `n` per sample.
#[derive(Clone, Debug)]
pub struct EmbedInput<T> {
    pub patches: Mat<T>,
    pub batch: usize,
    /// Grid index of every row of `patches`; `None` disables positional
    /// embeddings.
    pub positions: Option<Vec<usize>>,
}

impl<T> EmbedInput<T> {
    pub fn tokens_per_sample(&self) -> usize {
        self.patches.rows / self.batch
    }

    /// Sequence length after the classification token is prepended.
    pub fn seq(&self) -> usize {
        self.tokens_per_sample() + 1
    }
}

impl Encoder {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let patch = add_linear(store, "enc.patch", config.patch_dim(), d, rng);
        let cls = store.add("enc.cls", trunc_normal(1, d, INIT_STD, rng));
        let pos = store.add("enc.pos", trunc_normal(config.num_patches() + 1, d, INIT_STD, rng));
        let mut slot = 0;
        let blocks = (0..config.depth)
            .map(|l| {
                let moe = config.is_moe_layer(l).then(|| {
                    slot += 1;
                    (config.experts, slot - 1)
                });
                Block::new(store, &format!("enc.l{l}"), d, config.mlp_ratio * d, moe, rng)
            })
            .collect();
        let ln_f = add_layer_norm(store, "enc.ln_f", d);
        Ok(Self {
            config: config.clone(),
            patch,
            cls,
            pos,
            blocks,
            ln_f,
        })
    }

    /// Parameter-name prefix of one expert of one layer.
    pub fn expert_prefix(layer: usize, expert: usize) -> String {
        format!("enc.l{layer}.expert{expert}.")
    }

    /// Projects patches to tokens, adds positional embeddings when requested,
    /// and prepends the classification token. Returns `(tokens, seq)`.
    pub fn embed<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: &EmbedInput<T>) -> Result<(Var, usize)> {
        let pd = self.config.patch_dim();
        if input.patches.cols != pd {
            return Err(Error::Shape(format!("patch dim {} but projection expects {pd}", input.patches.cols)));
        }
        if input.batch == 0 || input.patches.rows % input.batch != 0 {
            return Err(Error::Shape(format!(
                "{} patch rows do not split into {} samples",
                input.patches.rows, input.batch
            )));
        }
        let n = input.tokens_per_sample();
        let x = tape.input(input.patches.clone());
        let mut proj = linear(tape, store, x, self.patch);
        let cls = tape.param(store, self.cls);
        let cls_row = match &input.positions {
            Some(positions) => {
                if positions.len() != input.patches.rows {
                    return Err(Error::Shape("one position per patch row required".into()));
                }
                let limit = self.config.num_patches();
                if let Some(p) = positions.iter().find(|&&p| p >= limit) {
                    return Err(Error::Shape(format!("position {p} outside the {limit}-patch grid")));
                }
                let table = tape.param(store, self.pos);
                let rows = tape.gather(&[table], positions.iter().map(|&p| (0, p as u32 + 1)).collect());
                proj = tape.add(proj, rows);
                let pos0 = tape.gather(&[table], vec![(0, 0)]);
                tape.add(cls, pos0)
            }
            None => cls,
        };
        let mut map = Vec::with_capacity(input.batch * (n + 1));
        for b in 0..input.batch {
            map.push((0, 0));
            map.extend((0..n).map(|i| (1, (b * n + i) as u32)));
        }
        Ok((tape.gather(&[cls_row, proj], map), n + 1))
    }

    /// Runs every block and the final layer norm. Non-finite activations
    /// abort with the 1-based index of the offending layer.
    pub fn encode<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
        seq: usize,
        mut routing: Routing<'_>,
    ) -> Result<Var> {
        if tape.value(tokens).cols != self.config.width {
            return Err(Error::Shape(format!(
                "token width {} but encoder width {}",
                tape.value(tokens).cols,
                self.config.width
            )));
        }
        if let Some(mask) = routing.mask {
            if mask.active.len() != self.config.num_moe_layers() {
                return Err(Error::Shape("dropout mask layer count".into()));
            }
        }
        let mut x = tokens;
        for (l, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, store, x, self.config.heads, seq, Some(&mut routing))?;
            if !tape.value(x).all_finite() {
                return Err(Error::Numeric {
                    layer: l + 1,
                    message: "non-finite activation after block".into(),
                });
            }
        }
        Ok(layer_norm(tape, store, x, self.ln_f))
    }
}
