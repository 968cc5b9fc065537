//! Fast adaptive multitask weighting.
//!
//! Task weights are a softmax over logits. The combined objective is
//! `c·Σ p_i·ln L_i` with `c = (Σ p_i/L_i)⁻¹`, whose parameter gradient is the
//! convex combination `Σ (c·p_i/L_i)·∇L_i`. After each step the logits move
//! against tasks whose loss fell faster than the others, driving all losses
//! toward an equal relative rate of decrease.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamoConfig {
    pub beta: f64,
    pub eps: f64,
    /// Reset the logits to zero when the task set grows at a phase change.
    pub reinit_at_phase_change: bool,
}

impl Default for FamoConfig {
    fn default() -> Self {
        Self {
            beta: 0.025,
            eps: 1e-8,
            reinit_at_phase_change: true,
        }
    }
}

pub fn softmax(w: &[f64]) -> Vec<f64> {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|&v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Combined loss value with its normalization constant and the per-task
/// gradient coefficients `c·p_i/L_i` (these sum to one).
#[derive(Clone, Debug, PartialEq)]
pub struct Combined {
    pub value: f64,
    pub c: f64,
    pub coefficients: Vec<f64>,
}

pub fn famo_combined_loss(losses: &[f64], p: &[f64], eps: f64) -> Combined {
    assert_eq!(losses.len(), p.len(), "one weight per loss");
    let floored: Vec<f64> = losses.iter().map(|&l| l.max(eps)).collect();
    if floored.iter().all(|&l| l <= eps) {
        warn!("every task loss is at the floor {eps}");
    }
    let c = 1.0 / p.iter().zip(&floored).map(|(&pi, &l)| pi / l).sum::<f64>();
    let value = c * p.iter().zip(&floored).map(|(&pi, &l)| pi * l.ln()).sum::<f64>();
    let coefficients = p.iter().zip(&floored).map(|(&pi, &l)| c * pi / l).collect();
    Combined { value, c, coefficients }
}

/// `w − β·Jᵀr` with `J = diag(p) − p·pᵀ`.
pub fn famo_logit_step(w: &[f64], r: &[f64], beta: f64) -> Vec<f64> {
    let p = softmax(w);
    let pr: f64 = p.iter().zip(r).map(|(a, b)| a * b).sum();
    w.iter()
        .zip(&p)
        .zip(r)
        .map(|((&wi, &pi), &ri)| wi - beta * (pi * ri - pi * pr))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamoState {
    pub logits: Vec<f64>,
    pub previous: Option<Vec<f64>>,
    pub beta: f64,
    pub eps: f64,
}

impl FamoState {
    pub fn new(m: usize, beta: f64, eps: f64) -> Self {
        Self {
            logits: vec![0.0; m],
            previous: None,
            beta,
            eps,
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn combined(&self, losses: &[f64]) -> Combined {
        famo_combined_loss(losses, &self.weights(), self.eps)
    }

    /// Records the loss vector that the next [`Self::update`] compares against.
    pub fn observe(&mut self, losses: &[f64]) {
        self.previous = Some(losses.iter().map(|&l| l.max(self.eps)).collect());
    }

    /// Moves the logits by the log-ratio of the stored and new losses, then
    /// stores the new losses. Entries whose ratio is not finite contribute 0.
    pub fn update(&mut self, new_losses: &[f64]) {
        let new: Vec<f64> = new_losses.iter().map(|&l| l.max(self.eps)).collect();
        if let Some(prev) = &self.previous {
            let r: Vec<f64> = prev
                .iter()
                .zip(&new)
                .map(|(&a, &b)| {
                    let v = a.ln() - b.ln();
                    if v.is_finite() {
                        v
                    } else {
                        0.0
                    }
                })
                .collect();
            self.logits = famo_logit_step(&self.logits, &r, self.beta);
        }
        self.previous = Some(new);
    }
}

/// Loss `½·Σ_j h_j·(θ_j − c_j)²`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    pub center: Vec<f64>,
    pub curvature: Vec<f64>,
}

impl Quadratic {
    pub fn value(&self, theta: &[f64]) -> f64 {
        0.5 * theta
            .iter()
            .zip(&self.center)
            .zip(&self.curvature)
            .map(|((t, c), h)| h * (t - c) * (t - c))
            .sum::<f64>()
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.center)
            .zip(&self.curvature)
            .map(|((t, c), h)| h * (t - c))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weighting {
    Famo { beta: f64 },
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchTrace {
    pub losses: Vec<Vec<f64>>,
    /// Per-step relative decreases `(L^t − L^{t+1})/L^t`.
    pub rates: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl BenchTrace {
    /// Mean over the last half of the steps of the across-task standard
    /// deviation of relative decrease rates.
    pub fn late_dispersion(&self) -> f64 {
        let start = self.rates.len() / 2;
        let tail = &self.rates[start..];
        tail.iter()
            .map(|r| {
                let m = r.iter().sum::<f64>() / r.len() as f64;
                (r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / r.len() as f64).sqrt()
            })
            .sum::<f64>()
            / tail.len() as f64
    }
}

/// Gradient descent on a set of quadratic losses under the given weighting.
/// The start point is `start` jittered by up to ±0.5 per coordinate from
/// `seed`; FAMO re-evaluates the losses after every step at the new
/// parameters.
pub fn equal_rate_bench(
    tasks: &[Quadratic],
    start: &[f64],
    weighting: Weighting,
    lr: f64,
    steps: usize,
    seed: u64,
) -> BenchTrace {
    let dim = tasks[0].center.len();
    assert_eq!(start.len(), dim, "start point dimension");
    let mut rng = rng_for(seed, &[]);
    let mut theta: Vec<f64> = start.iter().map(|&s| s + rng.gen_range(-0.5..0.5)).collect();
    let m = tasks.len();
    let mut famo = FamoState::new(m, if let Weighting::Famo { beta } = weighting { beta } else { 0.0 }, 1e-8);
    let eval = |th: &[f64]| tasks.iter().map(|t| t.value(th)).collect::<Vec<f64>>();
    let mut trace = BenchTrace {
        losses: Vec::with_capacity(steps + 1),
        rates: Vec::with_capacity(steps),
        weights: Vec::with_capacity(steps),
    };
    let mut losses = eval(&theta);
    trace.losses.push(losses.clone());
    for _ in 0..steps {
        let coeffs = match weighting {
            Weighting::Uniform => vec![1.0 / m as f64; m],
            Weighting::Famo { .. } => famo.combined(&losses).coefficients,
        };
        trace.weights.push(match weighting {
            Weighting::Uniform => coeffs.clone(),
            Weighting::Famo { .. } => famo.weights(),
        });
        let mut g = vec![0.0; dim];
        for (task, &a) in tasks.iter().zip(&coeffs) {
            for (gi, ti) in g.iter_mut().zip(task.grad(&theta)) {
                *gi += a * ti;
            }
        }
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= lr * gi;
        }
        let next = eval(&theta);
        if let Weighting::Famo { .. } = weighting {
            famo.observe(&losses);
            famo.update(&next);
        }
        trace
            .rates
            .push(losses.iter().zip(&next).map(|(a, b)| (a - b) / a).collect());
        trace.losses.push(next.clone());
        losses = next;
    }
    trace
}

/// Two quadratics in three coordinates. They pull the first coordinate toward
/// ±0.5, and each owns one private coordinate. The second is `ratio` times
/// steeper. Returns the tasks with a start point where both losses are of
/// similar size.
pub fn conflicting_pair(ratio: f64) -> (Vec<Quadratic>, Vec<f64>) {
    let tasks = vec![
        Quadratic {
            center: vec![0.5, 0.0, 0.0],
            curvature: vec![1.0, 1.0, 0.0],
        },
        Quadratic {
            center: vec![-0.5, 0.0, 0.0],
            curvature: vec![ratio, 0.0, ratio],
        },
    ];
    (tasks, vec![0.0, 3.0, 1.0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_values() {
        assert_eq!(softmax(&[0.0; 5]), vec![0.2; 5]);
        let p = softmax(&[7.5, 7.5, 7.5]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]);
        assert!(p[0].is_finite() && p[1] >= 0.0);
    }

    #[test]
    fn combined_loss_cases() {
        let single = famo_combined_loss(&[0.7], &[1.0], 1e-8);
        assert!((single.c - 0.7).abs() < 1e-15);
        assert!((single.value - 0.7 * 0.7f64.ln()).abs() < 1e-15);
        assert!((single.coefficients[0] - 1.0).abs() < 1e-15);

        let eq = famo_combined_loss(&[0.3; 4], &[0.25; 4], 1e-8);
        assert!((eq.c - 0.3).abs() < 1e-15);
        assert!((eq.value - 0.3 * 0.3f64.ln()).abs() < 1e-15);

        let h = famo_combined_loss(&[1.0, 2.0], &[0.5, 0.5], 1e-8);
        assert!((h.c - 4.0 / 3.0).abs() < 1e-15);
        assert!((h.value - 2.0 / 3.0 * 2f64.ln()).abs() < 1e-15);
        assert!((h.coefficients.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn update_cases() {
        let mut s = FamoState::new(3, 0.5, 1e-8);
        s.observe(&[1.0, 2.0, 3.0]);
        s.update(&[1.0, 2.0, 3.0]);
        assert_eq!(s.logits, vec![0.0; 3]);
        let w = famo_logit_step(&[0.0, 0.0], &[2f64.ln(), 0.0], 1.0);
        assert!((w[0] + 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((w[1] - 0.25 * 2f64.ln()).abs() < 1e-15);
        let w = famo_logit_step(&[0.3, -0.2, 0.1], &[0.4, 0.4, 0.4], 1.0);
        for (a, b) in w.iter().zip([0.3, -0.2, 0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn floor_keeps_logits_finite() {
        let mut s = FamoState::new(2, 0.1, 1e-8);
        s.observe(&[0.0, 1.0]);
        s.update(&[0.0, 0.5]);
        assert!(s.logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rescaling_losses_leaves_update_unchanged() {
        let mut a = FamoState::new(3, 0.2, 1e-8);
        let mut b = a.clone();
        a.observe(&[1.0, 2.0, 3.0]);
        a.update(&[0.8, 1.9, 2.0]);
        b.observe(&[10.0, 0.2, 30.0]);
        b.update(&[8.0, 0.19, 20.0]);
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tasks_keep_uniform_weights() {
        let q = Quadratic { center: vec![1.0, -1.0], curvature: vec![1.0, 2.0] };
        let start = [0.0, 0.0];
        let trace = equal_rate_bench(&[q.clone(), q], &start, Weighting::Famo { beta: 0.025 }, 0.01, 200, 3);
        for w in &trace.weights {
            assert!((w[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn famo_equalizes_rates_on_conflicting_pair() {
        let (tasks, start) = conflicting_pair(10.0);
        for seed in 0..4 {
            let u = equal_rate_bench(&tasks, &start, Weighting::Uniform, 0.01, 1000, seed);
            let f = equal_rate_bench(&tasks, &start, Weighting::Famo { beta: 5.0 }, 0.01, 1000, seed);
            assert!(f.late_dispersion() < u.late_dispersion(), "seed {seed}");
            for w in &f.weights {
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9 && w.iter().all(|&v| v > 0.0));
            }
        }
    }
}
