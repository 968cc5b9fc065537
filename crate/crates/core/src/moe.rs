//! Task-routed mixture-of-experts feed-forward layer.
//!
//! Routing is fixed by construction: every token of a batch carries the
//! batch's task, and only that task's experts see it. The layer output is the
//! plain mean of the active assigned experts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::TaskId;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Float;

/// Per-task expert index sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertAssignment {
    num_experts: usize,
    sets: [Vec<usize>; 5],
}

impl ExpertAssignment {
    /// Contiguous disjoint blocks when `K ≥ 5` (the first `K mod 5` tasks
    /// get one extra expert), round-robin sharing when `K < 5`.
    pub fn new(num_experts: usize) -> Result<Self> {
        if num_experts == 0 {
            return Err(Error::config("encoder.experts", "must be at least 1"));
        }
        let k = num_experts;
        let sets = std::array::from_fn(|t| {
            if k >= 5 {
                let base = k / 5;
                let extra = k % 5;
                let start = t * base + t.min(extra);
                let len = base + usize::from(t < extra);
                (start..start + len).collect()
            } else {
                vec![t % k]
            }
        });
        Ok(Self { num_experts: k, sets })
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn experts(&self, task: TaskId) -> &[usize] {
        &self.sets[task.index()]
    }

    pub fn is_disjoint(&self) -> bool {
        self.num_experts >= 5
    }
}

/// Active flags per MoE layer and expert for one training step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertDropoutMask {
    pub active: Vec<Vec<bool>>,
}

impl ExpertDropoutMask {
    pub fn all_active(layers: usize, num_experts: usize) -> Self {
        Self {
            active: vec![vec![true; num_experts]; layers],
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        rate: f64,
        assignment: &ExpertAssignment,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            active: (0..layers)
                .map(|_| sample_dropout(rate, assignment, rng).active)
                .collect(),
        }
    }

    /// Every task keeps at least one active expert in every layer.
    pub fn check(&self, assignment: &ExpertAssignment) -> Result<()> {
        for (layer, active) in self.active.iter().enumerate() {
            for task in TaskId::ALL {
                if !assignment.experts(task).iter().any(|&e| active[e]) {
                    return Err(Error::Invariant(format!(
                        "MoE layer slot {layer}: every expert of task {task} is dropped"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Outcome of one single-layer dropout draw.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDropout {
    pub active: Vec<bool>,
    /// Experts switched back on because their task would otherwise be empty.
    pub reinstated: Vec<usize>,
}

/// Drops each expert independently with probability `rate`, then reinstates
/// one uniformly chosen expert for any task left without an active one.
pub fn sample_dropout<R: Rng + ?Sized>(
    rate: f64,
    assignment: &ExpertAssignment,
    rng: &mut R,
) -> LayerDropout {
    let mut active: Vec<bool> = (0..assignment.num_experts())
        .map(|_| rate <= 0.0 || !rng.gen_bool(rate.min(1.0)))
        .collect();
    let mut reinstated = Vec::new();
    for task in TaskId::ALL {
        let set = assignment.experts(task);
        if !set.iter().any(|&e| active[e]) {
            let &e = set.choose(rng).expect("nonempty expert set");
            active[e] = true;
            reinstated.push(e);
        }
    }
    LayerDropout { active, reinstated }
}

/// Parameter handles of one expert (`d → hidden → d`, GeLU between).
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let (w1, b1, w2, b2) = (
            tape.param(store, self.w1),
            tape.param(store, self.b1),
            tape.param(store, self.w2),
            tape.param(store, self.b2),
        );
        let h = tape.linear(x, w1, b1);
        let h = tape.gelu(h);
        tape.linear(h, w2, b2)
    }
}

/// Mean of the task's active experts applied tokenwise. `active = None`
/// (inference) uses every assigned expert.
#[allow(clippy::too_many_arguments)]
pub fn moe_forward<T: Float>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    experts: &[FfnParams],
    assignment: &ExpertAssignment,
    x: Var,
    task: TaskId,
    active: Option<&[bool]>,
    mut counters: Option<(&mut RoutingCounters, usize)>,
) -> Result<Var> {
    let chosen: Vec<usize> = assignment
        .experts(task)
        .iter()
        .copied()
        .filter(|&e| active.map_or(true, |a| a[e]))
        .collect();
    if chosen.is_empty() {
        return Err(Error::Invariant(format!(
            "dropout mask deactivates every expert of task {task}"
        )));
    }
    let tokens = tape.value(x).rows as u64;
    let mut sum: Option<Var> = None;
    for &e in &chosen {
        if let Some((c, layer)) = counters.as_mut() {
            c.record(*layer, e, task, tokens);
        }
        let y = experts[e].forward(tape, store, x);
        sum = Some(match sum {
            None => y,
            Some(s) => tape.add(s, y),
        });
    }
    let sum = sum.expect("at least one expert");
    Ok(if chosen.len() == 1 {
        sum
    } else {
        tape.scale(sum, T::one() / T::lit(chosen.len() as f64))
    })
}

/// Token counts routed through each `(layer, expert, task)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoutingCounters {
    counts: BTreeMap<(usize, usize, TaskId), u64>,
}

impl RoutingCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, layer: usize, expert: usize, task: TaskId, tokens: u64) {
        *self.counts.entry((layer, expert, task)).or_default() += tokens;
    }

    pub fn get(&self, layer: usize, expert: usize, task: TaskId) -> u64 {
        self.counts.get(&(layer, expert, task)).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, TaskId, u64)> + '_ {
        self.counts.iter().map(|(&(l, e, t), &n)| (l, e, t, n))
    }

    /// Total tokens that reached an expert outside their task's set.
    pub fn cross_task_activations(&self, assignment: &ExpertAssignment) -> u64 {
        self.iter()
            .filter(|(_, e, t, _)| !assignment.experts(*t).contains(e))
            .map(|(_, _, _, n)| n)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,expert,task,activations\n");
        for (l, e, t, n) in self.iter() {
            let _ = writeln!(out, "{l},{e},{t},{n}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
