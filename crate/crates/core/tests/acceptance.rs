//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line with the
//! measured value and its pinned tolerance, then asserts.
//!
//! The end-to-end toy benchmark (criteria 10 to 12) trains nine small
//! models and dominates the runtime.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use mtlmad::autodiff::Tape;
use mtlmad::backbone::{EncoderConfig, TaskId};
use mtlmad::data::{patchify, toy_normal_image, Image, PatchSequence, Split, ToyConfig};
use mtlmad::eval::{
    auroc, cmd_ablate, cmd_eval, cmd_toydata, cmd_train_eval, map_hit_rate, run_dir,
};
use mtlmad::famo::{
    conflicting_pair, equal_rate_bench, famo_logit_step, softmax, FamoState, Weighting,
};
use mtlmad::moe::{ExpertAssignment, ExpertDropoutMask};
use mtlmad::rng::rng_for;
use mtlmad::scoring::{
    complementary_masks, fuse, normalize_score, percentile_rank, FusionMode, FusionWeights,
    PercentileTables, ScoreVector,
};
use mtlmad::tasks::{
    build_demixup_batch, build_jigsaw_batch, build_mim_batch, loss_cls, loss_demixup, loss_jigsaw,
    loss_mim, ClsSample, DecoderConfig, JigsawLoss, ModelConfig, MultiTaskModel, TaskBatch,
    TaskConfig,
};
use mtlmad::tensor::Mat;
use mtlmad::train::{build_batches, OptimizerKind, RunConfig, TaskData, TaskFlags, Trainer};
use rand::Rng;

/// Writes to the stdout handle directly so the line survives test capture.
fn report(id: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {id:>2} [{verdict}] {name}: {detail}").unwrap();
}

fn random_seq(grid: usize, p: usize, seed: u64) -> PatchSequence {
    let mut rng = rng_for(seed, &[]);
    let s = grid * p;
    let img = Image::new(s, s, 1, (0..s * s).map(|_| rng.gen::<f32>()).collect()).unwrap();
    patchify(&img, p).unwrap()
}

// ---------------------------------------------------------------- 1

fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 16,
            channels: 1,
            patch_size: 4,
            depth: 1,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
            experts: 5,
            moe_layers: None,
            expert_dropout_rate: 0.1,
        },
        tasks: TaskConfig {
            tiles: 2,
            decoder: DecoderConfig {
                depth: 1,
                width: 8,
                heads: 2,
                mlp_ratio: 2,
            },
            ..TaskConfig::default()
        },
    }
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let cfg = gradcheck_config();
    let mut model = MultiTaskModel::<f64>::new(&cfg, 7).unwrap();
    let a = random_seq(4, 4, 1);
    let b = random_seq(4, 4, 2);
    let mut rng = rng_for(3, &[]);
    let batches = [
        TaskBatch::Mim(vec![
            build_mim_batch(&a, 0.4, &mut rng).unwrap(),
            build_mim_batch(&b, 0.4, &mut rng).unwrap(),
        ]),
        TaskBatch::Jigsaw(vec![
            build_jigsaw_batch(&a, 2, &mut rng).unwrap(),
            build_jigsaw_batch(&b, 2, &mut rng).unwrap(),
        ]),
        TaskBatch::DeMixUp(vec![
            build_demixup_batch((0, &a), (1, &b), 0.25, &mut rng).unwrap()
        ]),
        // One label per batch: a positive and a negative on near-identical
        // random inputs cancel to a vanishing gradient.
        TaskBatch::AugCls(vec![
            ClsSample {
                patches: a.patches.clone(),
                label: 1,
            },
            ClsSample {
                patches: b.patches.clone(),
                label: 1,
            },
        ]),
        TaskBatch::GenCls(vec![
            ClsSample {
                patches: b.patches.clone(),
                label: 0,
            },
            ClsSample {
                patches: a.patches.clone(),
                label: 0,
            },
        ]),
    ];
    let h = 1e-4;
    let ids: Vec<_> = model.store.ids().collect();
    let mut worst_all = 0.0f64;
    let mut lines = Vec::new();
    for batch in &batches {
        let loss_at = |m: &MultiTaskModel<f64>| {
            let mut tape = Tape::inference();
            let out = m.forward(&mut tape, batch, None, None).unwrap();
            tape.scalar(out.loss)
        };
        model.store.zero_grads();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, batch, None, None).unwrap();
        tape.backward(out.loss, 1.0, &mut model.store).unwrap();
        drop(tape);
        // Entries far below the loss's largest gradient are compared on that
        // scale; central differences cannot resolve them more finely.
        let floor = 1e-3
            * ids
                .iter()
                .flat_map(|&id| model.store.grad(id).data.iter())
                .fold(0.0f64, |m, g| m.max(g.abs()));
        let mut worst = 0.0f64;
        let mut checked = 0usize;
        for &id in &ids {
            let analytic = model.store.grad(id).clone();
            for k in 0..analytic.data.len() {
                let orig = model.store.value(id).data[k];
                model.store.value_mut(id).data[k] = orig + h;
                let up = loss_at(&model);
                model.store.value_mut(id).data[k] = orig - h;
                let down = loss_at(&model);
                model.store.value_mut(id).data[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = analytic.data[k];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(floor);
                worst = worst.max(rel);
                checked += 1;
            }
        }
        lines.push(format!("{}={worst:.2e} over {checked}", batch.task()));
        worst_all = worst_all.max(worst);
    }
    let pass = worst_all < 1e-4;
    report(
        1,
        "gradient check",
        pass,
        format!("max rel err {worst_all:.2e} < 1e-4 ({})", lines.join(", ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn small_run_config(experts: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        encoder: EncoderConfig {
            image_size: 32,
            channels: 1,
            patch_size: 8,
            depth: 2,
            width: 32,
            heads: 2,
            mlp_ratio: 2,
            experts,
            moe_layers: None,
            expert_dropout_rate: 0.1,
        },
        tasks: TaskConfig {
            tiles: 2,
            decoder: DecoderConfig {
                depth: 1,
                width: 32,
                heads: 2,
                mlp_ratio: 2,
            },
            ..TaskConfig::default()
        },
    };
    cfg.optimizer.kind = OptimizerKind::Adam;
    cfg.batch_size = 4;
    cfg
}

fn toy_images(cfg: &ToyConfig, n: usize) -> (Vec<String>, Vec<Image>) {
    let images = (0..n)
        .map(|i| toy_normal_image(cfg, 0, Split::Train, i))
        .collect();
    ((0..n).map(|i| format!("{i:04}")).collect(), images)
}

#[test]
fn criterion_02_routing_is_exclusive() {
    let mut cfg = small_run_config(10);
    cfg.audit_routing = true;
    cfg.curriculum.phase1_epochs = 10;
    cfg.curriculum.epochs = 50;
    cfg.max_steps = Some(200);
    let toy = ToyConfig {
        image_size: 32,
        ..ToyConfig::default()
    };
    let (names, images) = toy_images(&toy, 16);
    let data = TaskData::from_images(names, &images, &cfg, 0, &BTreeMap::new()).unwrap();
    let mut trainer = Trainer::new(&cfg, 0).unwrap();
    let outcome = trainer.run(&data, None, None);
    let audited = outcome.is_ok();
    let steps = trainer.steps_taken();
    let cross = trainer
        .counters
        .cross_task_activations(&trainer.model.assignment);
    let own: u64 = trainer.counters.iter().map(|(_, _, _, n)| n).sum();
    let pass = audited && steps == 200 && cross == 0 && own > 0;
    report(
        2,
        "routing exclusivity",
        pass,
        format!(
            "{steps} steps, cross-task activations {cross} (own {own}), foreign gradient mass zero at every step: {audited}"
        ),
    );
    if let Err(e) = outcome {
        panic!("{e}");
    }
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_expert_dropout_keeps_every_task_alive() {
    let assignment = ExpertAssignment::new(10).unwrap();
    let n = assignment.experts(TaskId::Mim).len() as i32;
    let samples = 100_000;
    let mut pass = true;
    let mut lines = Vec::new();
    for (k, &rate) in [0.05, 0.10, 0.15, 0.5, 0.9].iter().enumerate() {
        let mut rng = rng_for(11, &[k as u64]);
        let mut dropped = 0usize;
        let mut violations = 0usize;
        for _ in 0..samples {
            let mask = ExpertDropoutMask::sample(rate, &assignment, 1, &mut rng);
            violations += usize::from(mask.check(&assignment).is_err());
            dropped += mask.active[0].iter().filter(|&&a| !a).count();
        }
        let freq = dropped as f64 / (samples * 10) as f64;
        let expected = rate - rate.powi(n) / f64::from(n);
        let target = if (expected - rate).abs() < 0.02 {
            rate
        } else {
            expected
        };
        let ok = violations == 0 && (freq - target).abs() <= 0.02;
        pass &= ok;
        lines.push(format!(
            "r={rate}: freq {freq:.4} vs {target:.4}, violations {violations}"
        ));
    }
    report(
        3,
        "expert-dropout invariant",
        pass,
        format!("±0.02; {}", lines.join("; ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_famo_unit_behavior() {
    let uniform = softmax(&[0.0; 4]) == vec![0.25; 4] && softmax(&[0.0; 3]) == vec![1.0 / 3.0; 3];
    let w = vec![0.3, -1.2, 0.7];
    let still = famo_logit_step(&w, &[0.0; 3], 0.8) == w;
    let ln2 = std::f64::consts::LN_2;
    let stepped = famo_logit_step(&[0.0, 0.0], &[ln2, 0.0], 1.0);
    let hand_err = (stepped[0] + 0.25 * ln2)
        .abs()
        .max((stepped[1] - 0.25 * ln2).abs());

    let mut famo = FamoState::new(3, 0.025, 1e-8);
    let mut rng = rng_for(4, &[]);
    let mut losses = vec![2.0, 1.0, 0.5];
    let mut simplex_err = 0.0f64;
    for _ in 0..1000 {
        let next: Vec<f64> = losses
            .iter()
            .map(|l| l * rng.gen_range(0.9..1.05))
            .collect();
        famo.observe(&losses);
        famo.update(&next);
        let p = famo.weights();
        simplex_err = simplex_err.max((p.iter().sum::<f64>() - 1.0).abs());
        assert!(p.iter().all(|&x| x > 0.0));
        losses = next;
    }
    let (tasks, start) = conflicting_pair(10.0);
    let trace = equal_rate_bench(&tasks, &start, Weighting::Famo { beta: 5.0 }, 0.01, 1000, 0);
    for p in &trace.weights {
        simplex_err = simplex_err.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    let pass = uniform && still && hand_err < 1e-12 && simplex_err < 1e-6;
    report(
        4,
        "FAMO units",
        pass,
        format!(
            "softmax(0)=uniform {uniform}, zero-rate step fixed {still}, hand update err {hand_err:.1e} < 1e-12, max |Σp−1| {simplex_err:.1e} < 1e-6"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_famo_equalizes_rates() {
    let (tasks, start) = conflicting_pair(10.0);
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let famo = equal_rate_bench(
            &tasks,
            &start,
            Weighting::Famo { beta: 5.0 },
            0.01,
            1000,
            seed,
        )
        .late_dispersion();
        let uni = equal_rate_bench(&tasks, &start, Weighting::Uniform, 0.01, 1000, seed)
            .late_dispersion();
        pass &= famo < uni;
        lines.push(format!("seed {seed}: {famo:.2e} vs {uni:.2e}"));
    }
    report(
        5,
        "FAMO equal-rate",
        pass,
        format!("late dispersion FAMO < uniform; {}", lines.join("; ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_overfits_eight_images() {
    let toy = ToyConfig::default();
    let mut cfg = RunConfig::default();
    cfg.model.encoder = EncoderConfig {
        image_size: 64,
        channels: 1,
        patch_size: 8,
        depth: 4,
        width: 128,
        heads: 4,
        mlp_ratio: 4,
        experts: 5,
        moe_layers: None,
        expert_dropout_rate: 0.1,
    };
    cfg.model.tasks.tiles = 4;
    cfg.model.tasks.decoder = DecoderConfig {
        depth: 2,
        width: 128,
        heads: 16,
        mlp_ratio: 4,
    };
    cfg.optimizer.kind = OptimizerKind::Adam;
    cfg.overfit = true;
    cfg.batch_size = 8;
    cfg.tasks = TaskFlags::only(&[TaskId::Mim, TaskId::Jigsaw, TaskId::DeMixUp]);
    cfg.curriculum.phase1_epochs = 500;
    cfg.curriculum.epochs = 501;
    cfg.max_steps = Some(500);
    let (names, images) = toy_images(&toy, 8);
    let data = TaskData::from_images(names, &images, &cfg, 0, &BTreeMap::new()).unwrap();
    let mut trainer = Trainer::new(&cfg, 0).unwrap();
    trainer.run(&data, None, None).unwrap();
    let indices: Vec<usize> = (0..8).collect();
    let batches = build_batches(&trainer.active, &indices, &data, &cfg.model.tasks, 0, 0).unwrap();
    let model = &trainer.model;
    let mut mim = f64::NAN;
    let mut jig = f64::NAN;
    let mut dmx = f64::NAN;
    for b in &batches {
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, b, None, None).unwrap();
        match b {
            TaskBatch::Mim(_) => mim = f64::from(tape.scalar(out.loss)),
            TaskBatch::Jigsaw(s) => jig = MultiTaskModel::jigsaw_accuracy(&tape, &out, s),
            TaskBatch::DeMixUp(s) => dmx = MultiTaskModel::demixup_accuracy(&tape, &out, s),
            _ => unreachable!("phase-1 task set"),
        }
    }
    let pass = mim < 0.01 && jig == 1.0 && dmx == 1.0;
    report(
        6,
        "overfit smoke test",
        pass,
        format!(
            "{} steps: L_MIM {mim:.4} < 0.01, jigsaw acc {jig:.3} = 1, DeMixUp acc {dmx:.3} = 1",
            trainer.steps_taken()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_loss_oracles() {
    let ln2 = std::f64::consts::LN_2;
    let half = Mat::filled(4, 4, 0.5);
    let mut eye = Mat::zeros(4, 4);
    for i in 0..4 {
        eye.set(i, (i + 1) % 4, 1.0);
    }
    // Hand enumeration: each of the 16 entries contributes −ln 0.5 under the
    // full form; only the 4 positives contribute under the literal form.
    let full_oracle = 16.0 * ln2 / 4.0;
    let literal_oracle = 4.0 * ln2 / 4.0;
    let full = loss_jigsaw(&half, &eye, JigsawLoss::Full, 1e-7);
    let literal = loss_jigsaw(&half, &eye, JigsawLoss::Eq3Literal, 1e-7);
    let dmx = loss_demixup(&[0.9, 0.1, 0.1, 0.1], &[1, 0, 0, 0], 1e-7);
    let dmx_oracle = -(0.9f64.ln() + 3.0 * 0.9f64.ln()) / 4.0;
    let recon = Mat::filled(1, 768, 0.5);
    let target = Mat::zeros(1, 768);
    let mim = loss_mim(&recon, &target, &[0]).unwrap();
    let mut rng = rng_for(5, &[]);
    let mut sym = 0.0f64;
    for _ in 0..10_000 {
        let z: f64 = rng.gen_range(-40.0..40.0);
        sym = sym.max((loss_cls(z, 1) - loss_cls(-z, 0)).abs());
    }
    let pass = (full - full_oracle).abs() < 1e-9
        && (literal - literal_oracle).abs() < 1e-9
        && (dmx - 0.1054).abs() < 1e-4
        && (dmx - dmx_oracle).abs() < 1e-12
        && mim == 192.0
        && sym < 1e-12;
    report(
        7,
        "loss oracles",
        pass,
        format!(
            "jigsaw full {full:.12} (4 ln 2), literal {literal:.12} (ln 2), DeMixUp {dmx:.6} (0.1054 ±1e-4), MIM {mim} (192), BCE symmetry {sym:.1e}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_scoring_contracts() {
    let norm = normalize_score(std::f64::consts::LN_2).unwrap();
    let mut partitions = true;
    for ratio in [0.25, 0.4, 0.5] {
        for n in [16usize, 64, 256] {
            let masks = complementary_masks(n, ratio, 9).unwrap();
            let mut seen = vec![0u32; n];
            masks.iter().flatten().for_each(|&i| seen[i] += 1);
            partitions &= seen.iter().all(|&c| c == 1);
        }
    }
    let table: Vec<f64> = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
    let pct = percentile_rank(0.7, &table);

    let mut rng = rng_for(8, &[]);
    let mut violations = 0usize;
    for _ in 0..10_000 {
        let m = rng.gen_range(1..=5);
        let tasks: Vec<TaskId> = TaskId::ALL[..m].to_vec();
        let refs: Vec<ScoreVector> = (0..rng.gen_range(1..20))
            .map(|_| {
                let mut s = ScoreVector::default();
                tasks
                    .iter()
                    .for_each(|&t| s.set(t, f64::from(rng.gen_range(0u8..10)) / 10.0));
                s
            })
            .collect();
        let tables = PercentileTables::build(&refs, &tasks).unwrap();
        let weights = FusionWeights::new(
            tasks
                .iter()
                .map(|&t| (t, rng.gen_range(0.0..1.0)))
                .collect(),
        )
        .unwrap();
        let mut s = ScoreVector::default();
        tasks
            .iter()
            .for_each(|&t| s.set(t, rng.gen_range(-0.1..1.1)));
        let base = fuse(&s, &tables, &weights).unwrap();
        let t = tasks[rng.gen_range(0..m)];
        s.set(t, s.get(t).unwrap() + rng.gen_range(0.0..0.5));
        violations += usize::from(fuse(&s, &tables, &weights).unwrap() < base);
    }
    let pass = (norm - 0.5).abs() < 1e-12 && partitions && pct == 0.65 && violations == 0;
    report(
        8,
        "scoring contracts",
        pass,
        format!(
            "normalize(ln 2) {norm:.15}, masks partition {partitions}, percentile {pct} (0.65), monotonicity violations {violations}/10000"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

#[test]
fn criterion_09_auroc_matches_pairwise_oracle() {
    let mut rng = rng_for(9, &[]);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.gen_range(0u8..8)) / 8.0)
            .collect();
        worst =
            worst.max((auroc(&scores, &labels).unwrap() - pairwise_auroc(&scores, &labels)).abs());
    }
    let worked = auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    let pass = worst < 1e-12 && worked == 0.75;
    report(
        9,
        "AUROC oracle",
        pass,
        format!("max |rank − pairwise| {worst:.1e} < 1e-12, worked example {worked} (0.75)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 10 to 12

fn toy_benchmark_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.encoder = EncoderConfig {
        image_size: 64,
        channels: 1,
        patch_size: 8,
        depth: 4,
        width: 128,
        heads: 4,
        mlp_ratio: 4,
        experts: 5,
        moe_layers: None,
        expert_dropout_rate: 0.1,
    };
    cfg.model.tasks.tiles = 4;
    cfg.model.tasks.decoder = DecoderConfig {
        depth: 2,
        width: 128,
        heads: 16,
        mlp_ratio: 4,
    };
    cfg.optimizer.kind = OptimizerKind::Adam;
    cfg.batch_size = 16;
    cfg.scoring.fusion = FusionMode::ValidationFit;
    cfg.curriculum.phase1_epochs = 25;
    cfg.curriculum.epochs = 50;
    cfg.data.train = Some(root.join("toy/train.csv"));
    cfg.data.val = Some(root.join("toy/val.csv"));
    cfg.data.test = Some(root.join("toy/test.csv"));
    cfg.output_dir = root.join("runs");
    cfg
}

#[test]
fn criteria_10_to_12_toy_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    cmd_toydata(&ToyConfig::default(), 0, &root.join("toy")).unwrap();
    let cfg = toy_benchmark_config(root);

    let (full, outputs) = cmd_train_eval(&cfg, &[0, 1, 2], true).unwrap();
    let (mean, std) = (
        full.mean.expect("labeled test split"),
        full.std.unwrap_or(0.0),
    );
    let singles: Vec<TaskFlags> = TaskId::ALL.iter().map(|&t| TaskFlags::only(&[t])).collect();
    let rows = cmd_ablate(&cfg, &singles, 0, &root.join("ablation")).unwrap();
    let full_seed0 = full.seeds[0].fused.unwrap();
    let mut ablation_ok = true;
    let mut lines = Vec::new();
    for r in &rows {
        let a = r.eval.fused.unwrap();
        ablation_ok &= full_seed0 >= a - 0.02;
        lines.push(format!("{} {a:.4}", r.flags.enabled()[0]));
    }
    let pass10 = mean >= 0.85 && ablation_ok;
    report(
        10,
        "toy benchmark",
        pass10,
        format!(
            "fused AUROC {mean:.4} ± {std:.4} over 3 seeds (≥ 0.85); seed-0 full {full_seed0:.4} vs single-task rows [{}] (margin 0.02)",
            lines.join(", ")
        ),
    );

    let hit = map_hit_rate(&outputs[0], cfg.model.encoder.image_size)
        .unwrap()
        .unwrap();
    let pass11 = hit >= 0.8;
    report(
        11,
        "anomaly-map sanity",
        pass11,
        format!(
            "inside > outside on {:.1}% of anomalous images (≥ 80%)",
            100.0 * hit
        ),
    );

    let mut again = cfg.clone();
    again.output_dir = root.join("rerun");
    let first = run_dir(&cfg, 0).unwrap();
    let second = run_dir(&again, 0).unwrap();
    mtlmad::eval::cmd_train(&again, &[0]).unwrap();
    cmd_eval(&second.join("last"), None, false, &second.join("eval")).unwrap();
    let same =
        |rel: &str| fs::read(first.join(rel)).unwrap() == fs::read(second.join(rel)).unwrap();
    let metrics_same = same("metrics.csv");
    let scores_same = same("eval/scores.csv");
    let pass12 = metrics_same && scores_same;
    report(
        12,
        "determinism",
        pass12,
        format!("metrics.csv identical {metrics_same}, scores.csv identical {scores_same}"),
    );
    assert!(pass10 && pass11 && pass12);
}
