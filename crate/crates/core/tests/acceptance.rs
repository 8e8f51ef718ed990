//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line and then
//! asserts it. Run with `--nocapture` to see the lines:
//!
//! ```text
//! cargo test --release -p prompt-mil --test acceptance -- --nocapture --test-threads 1
//! ```

use std::cell::Cell;
use std::time::Instant;

use prompt_mil::autodiff::grad_check;
use prompt_mil::harness::{
    build_backbone, cmd_ablate_k, cmd_train, load_data, train_from, BackboneInit, ExperimentConfig, Record,
};
use prompt_mil::mil::{aggregate, auroc, loss, HeadConfig, HeadKind, MilHead, TaskKind, TaskSpec};
use prompt_mil::params::ParamTree;
use prompt_mil::synth::{generate_dataset, Bag, GenSpec};
use prompt_mil::trainer::{
    bench_strategies, full_graph_grads, step1_features, step2_head_update, step3_extractor_grads, AdamState, MilModel,
    OptimizerKind, Strategy as GradStrategy, TrainConfig, TrainMode, Trainer,
};
use prompt_mil::vit::{count_trainable_params, PromptSet, VitConfig};
use prompt_mil::{Exec, Graph, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} {verdict} {name}: {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn binary() -> TaskSpec {
    TaskSpec::new(TaskKind::SubtypeBinary, 2).unwrap()
}

fn toy_model(seed: u64) -> MilModel<f64> {
    MilModel::init(
        &VitConfig::toy(),
        &HeadConfig::default(),
        binary(),
        TrainMode::Prompt,
        seed,
    )
    .unwrap()
}

fn toy_bag(n: usize, seed: u64) -> Bag {
    let spec = GenSpec {
        n_min: n,
        n_max: n,
        image_size: 16,
        train_bags: 1,
        val_bags: 0,
        test_bags: 0,
        seed,
        ..GenSpec::default()
    };
    generate_dataset(&spec, Exec::Sequential).unwrap().train.remove(0)
}

/// Prompt gradient via steps 1-3 with the head learning rate at zero.
fn three_step_prompt_grad(model: &MilModel<f64>, bag: &Bag, batch: usize) -> Vec<f64> {
    let p = bag.patches(8).unwrap();
    let h = step1_features(&model.backbone, model.prompt.as_ref(), &p, batch, Exec::Sequential).unwrap();
    let mut head = model.head.clone();
    let mut opt = AdamState::new(OptimizerKind::AdamW, 0.0, &head);
    let step = step2_head_update(&h, bag.label, &mut head, &model.task, &mut opt, 0.0, None).unwrap();
    step3_extractor_grads(
        &model.backbone,
        model.prompt.as_ref(),
        &p,
        &step.g,
        batch,
        false,
        Exec::Sequential,
        None,
    )
    .unwrap()
    .prompt
    .unwrap()
}

/// `max_i |a_i - b_i| / max_i |b_i|`
fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

#[test]
fn c01_three_step_gradient_equals_full_graph() {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let model = toy_model(seed);
        let bag = toy_bag(8, seed);
        let three = three_step_prompt_grad(&model, &bag, 4);
        let full = full_graph_grads(
            &model.backbone,
            model.prompt.as_ref(),
            &model.head,
            &model.task,
            &bag.patches(8).unwrap(),
            bag.label,
            false,
            None,
        )
        .unwrap()
        .prompt
        .unwrap();
        worst = worst.max(max_rel(&three, &full));
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        1,
        "three-step prompt gradient vs end-to-end",
        worst < 1e-10 && secs < 5.0,
        format!("max rel err {worst:.2e} (< 1e-10), n=8 m=2, 3 seeds, {secs:.2}s (< 5s)"),
    );
}

#[test]
fn c02_pipeline_gradient_matches_finite_differences() {
    let t = Instant::now();
    let model = toy_model(7);
    let bag = toy_bag(8, 7);
    let p = bag.patches(8).unwrap();
    let mut params = vec![model.prompt.as_ref().unwrap().tokens.clone()];
    params.extend(model.head.flatten());
    let err = grad_check(&params, 1e-4, |g, ps| {
        let prompt = PromptSet { tokens: ps[0].clone() };
        let mut head = model.head.clone();
        let mut rest = ps[1..].iter();
        head.visit_mut(&mut |_, t| *t = rest.next().unwrap().clone());
        let h = model.backbone.encode(g, Some(&prompt), p.all())?;
        let pred = aggregate(g, &h, &head)?;
        loss(g, &pred.logits, bag.label, &model.task)
    })
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    let count: usize = params.iter().map(|p| p.numel()).sum();
    report(
        2,
        "prompt and head gradients vs central differences",
        err < 1e-3 && secs < 60.0,
        format!("max rel err {err:.2e} (< 1e-3) over {count} coordinates, eps 1e-4, {secs:.1}s (< 60s)"),
    );
}

#[test]
fn c03_prompt_gradient_is_batching_invariant() {
    let model = toy_model(3);
    let bag = toy_bag(8, 3);
    let grads: Vec<_> = [1, 2, 8]
        .iter()
        .map(|&b| three_step_prompt_grad(&model, &bag, b))
        .collect();
    let mut worst = 0.0f64;
    for i in 0..grads.len() {
        for j in i + 1..grads.len() {
            worst = worst.max(max_rel(&grads[i], &grads[j]));
        }
    }
    report(
        3,
        "prompt gradient across batch sizes {1, 2, 8}",
        worst <= 1e-12,
        format!("max pairwise rel diff {worst:.2e} (<= 1e-12)"),
    );
}

#[test]
fn c04_parameter_census_and_frozen_backbone() {
    let vit = VitConfig::vit_tiny();
    let prompt = count_trainable_params(&vit, 0, true).prompt;
    let conv = count_trainable_params(&vit.clone().with_prompts(0), 0, true).prompt;

    let task = binary();
    let model = MilModel::<f64>::init(&VitConfig::toy(), &HeadConfig::default(), task, TrainMode::Prompt, 1).unwrap();
    let before = model.backbone.checksum();
    let prompt_before = model.prompt.as_ref().unwrap().tokens.clone();
    let spec = GenSpec {
        n_min: 4,
        n_max: 8,
        image_size: 16,
        train_bags: 6,
        val_bags: 0,
        test_bags: 0,
        ..GenSpec::default()
    };
    let bags = generate_dataset(&spec, Exec::Sequential).unwrap().train;
    let mut trainer = Trainer::new(
        model,
        TrainMode::Prompt,
        TrainConfig {
            instance_batch_size: 3,
            ..Default::default()
        },
    )
    .unwrap();
    trainer.train_epoch(&bags).unwrap();
    let after = trainer.model.backbone.checksum();
    let prompt_moved = trainer.model.prompt.as_ref().unwrap().tokens != prompt_before;
    report(
        4,
        "parameter census and frozen backbone",
        prompt == 192 && conv == 0 && before == after && prompt_moved,
        format!(
            "d=192 k=1 prompt params {prompt} (== 192), conventional {conv} (== 0), \
             backbone checksum {before:016x} -> {after:016x}, prompt updated {prompt_moved}"
        ),
    );
}

#[test]
fn c05_three_step_saves_activation_memory() {
    let t = Instant::now();
    let model = MilModel::<f64>::init(
        &VitConfig::desk(),
        &HeadConfig::default(),
        binary(),
        TrainMode::Prompt,
        0,
    )
    .unwrap();
    let rows = bench_strategies(&model, &[64, 128, 256], 8, &GenSpec::default()).unwrap();
    let reductions: Vec<f64> = rows
        .iter()
        .filter(|r| r.strategy == GradStrategy::ThreeStep)
        .map(|r| r.reduction_pct.unwrap())
        .collect();
    let monotone = reductions.windows(2).all(|w| w[1] >= w[0]);
    let secs = t.elapsed().as_secs_f64();
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{}@{}={}", r.strategy.name(), r.n_instances, r.peak_act_elems))
        .collect();
    report(
        5,
        "peak saved activations, three-step vs full graph",
        reductions.len() == 3 && reductions[0] >= 30.0 && monotone && secs < 180.0,
        format!(
            "reduction n=64/128/256: {:.2}% / {:.2}% / {:.2}% (>= 30% at 64, non-decreasing), batch 8, {secs:.1}s; {}",
            reductions[0],
            reductions[1],
            reductions[2],
            table.join(" ")
        ),
    );
}

#[test]
fn c06_prompt_tuning_beats_frozen_features() {
    let t = Instant::now();
    let mut gaps = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3 {
        let base = ExperimentConfig::default().with_seed(seed);
        let data = load_data(&base).unwrap();
        let (backbone, _) = build_backbone::<f64>(&base).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut acc = [0.0; 2];
        for (i, mode) in [TrainMode::Conventional, TrainMode::Prompt].into_iter().enumerate() {
            let mut cfg = base.clone();
            cfg.mode = mode;
            cfg.model.num_prompts = if mode == TrainMode::Prompt { 1 } else { 0 };
            let out = train_from(&cfg, &data, backbone.clone(), &dir.path().join(mode.name()), vec![]).unwrap();
            acc[i] = out.test.accuracy;
        }
        gaps.push(100.0 * (acc[1] - acc[0]));
        lines.push(format!(
            "seed {seed}: conventional {:.1}% prompt {:.1}%",
            100.0 * acc[0],
            100.0 * acc[1]
        ));
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let secs = t.elapsed().as_secs_f64();
    report(
        6,
        "prompt (k=1) vs conventional test accuracy",
        mean >= 5.0 && secs < 900.0,
        format!(
            "mean gain {mean:+.2} points (>= +5); {}; {secs:.0}s (< 900s)",
            lines.join("; ")
        ),
    );
}

fn brute_auroc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
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
fn c07_auroc_matches_pairwise_counting() {
    let mut runner = TestRunner::new(Config {
        cases: 100,
        ..Config::default()
    });
    let worst = Cell::new(0.0f64);
    let monotone_exact = Cell::new(true);
    let strategy = (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..12, n),
            prop::collection::vec(any::<bool>(), n),
        )
    });
    runner
        .run(&strategy, |(levels, mut positive)| {
            // both classes present
            positive[0] = true;
            positive[1] = false;
            // coarse levels force plenty of ties
            let scores: Vec<f64> = levels.iter().map(|&l| l as f64 / 11.0).collect();
            let got = auroc(&scores, &positive).unwrap();
            worst.set(worst.get().max((got - brute_auroc(&scores, &positive)).abs()));
            let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
            monotone_exact.set(monotone_exact.get() && auroc(&squashed, &positive).unwrap() == got);
            Ok(())
        })
        .unwrap();
    let (worst, monotone_exact) = (worst.get(), monotone_exact.get());
    report(
        7,
        "AUROC vs brute-force pairwise counting",
        worst <= 1e-12 && monotone_exact,
        format!("100 tied draws, max abs diff {worst:.2e} (<= 1e-12), monotone transform exact: {monotone_exact}"),
    );
}

#[test]
fn c08_mil_head_properties() {
    let task = binary();
    let drift = Cell::new(0.0f64);
    let attn_err = Cell::new(0.0f64);
    let single_ok = Cell::new(true);
    let mut runner = TestRunner::new(Config {
        cases: 32,
        ..Config::default()
    });
    for kind in [HeadKind::Dsmil, HeadKind::GatedAttention, HeadKind::MeanPool] {
        let head = MilHead::<f64>::init(&HeadConfig { kind, attn_dim: 16 }, 8, &task, 5).unwrap();
        runner
            .run(
                &(1usize..24).prop_flat_map(|n| {
                    (
                        prop::collection::vec(-3.0f64..3.0, n * 8),
                        Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
                    )
                }),
                |(data, perm)| {
                    let n = perm.len();
                    let g = Graph::inference();
                    let h = Tensor::from_f64(&[n, 8], &data).unwrap();
                    let permuted: Vec<f64> = perm.iter().flat_map(|&i| data[i * 8..(i + 1) * 8].to_vec()).collect();
                    let hp = Tensor::from_f64(&[n, 8], &permuted).unwrap();
                    let a = aggregate(&g, &h, &head).unwrap();
                    let b = aggregate(&g, &hp, &head).unwrap();
                    for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
                        drift.set(drift.get().max((x - y).abs()));
                    }
                    if let Some(w) = &a.attention {
                        attn_err.set(attn_err.get().max((w.iter().sum::<f64>() - 1.0).abs()));
                    }
                    if n == 1 {
                        single_ok.set(single_ok.get() && a.probs.iter().all(|p| p.is_finite()));
                    }
                    Ok(())
                },
            )
            .unwrap();
        let one = Tensor::from_f64(&[1, 8], &[0.5; 8]).unwrap();
        let pred = aggregate(&Graph::inference(), &one, &head).unwrap();
        single_ok.set(single_ok.get() && pred.probs.iter().all(|p| p.is_finite()));
        if let Some(w) = &pred.attention {
            single_ok.set(single_ok.get() && (w[0] - 1.0).abs() <= 1e-12);
        }
    }
    let (drift, attn_err, single_ok) = (drift.get(), attn_err.get(), single_ok.get());
    report(
        8,
        "MIL head permutation invariance, attention, n=1",
        drift <= 1e-9 && attn_err <= 1e-6 && single_ok,
        format!("logit drift {drift:.2e} (<= 1e-9), attention sum err {attn_err:.2e} (<= 1e-6), n=1 ok: {single_ok}"),
    );
}

#[test]
fn c09_prompt_count_ablation_table() {
    let t = Instant::now();
    let mut cfg = ExperimentConfig::default();
    // the ordering is reported, not asserted; a short schedule keeps the run cheap
    cfg.train.epochs = 3;
    let dir = tempfile::tempdir().unwrap();
    let rows = cmd_ablate_k(&cfg, &[1, 2, 3], dir.path()).unwrap();
    let keys: Vec<(usize, u64, String, f64)> = rows
        .iter()
        .filter_map(|r| match r {
            Record::Ablation {
                k,
                seed,
                data_fingerprint,
                accuracy,
                ..
            } => Some((*k, *seed, data_fingerprint.clone(), *accuracy)),
            _ => None,
        })
        .collect();
    let shared = keys.len() == 3 && keys.iter().all(|k| k.1 == keys[0].1 && k.2 == keys[0].2);
    let ks: Vec<usize> = keys.iter().map(|k| k.0).collect();
    let table: Vec<String> = keys
        .iter()
        .map(|k| format!("k={} acc {:.1}%", k.0, 100.0 * k.3))
        .collect();
    report(
        9,
        "prompt-count ablation table",
        shared && ks == [1, 2, 3],
        format!(
            "{} rows, shared seed/data fingerprint {}: {}; {:.0}s",
            keys.len(),
            shared,
            table.join(", "),
            t.elapsed().as_secs_f64()
        ),
    );
}

fn metric_fields(records: &[Record]) -> Vec<String> {
    records
        .iter()
        .filter_map(|r| match r {
            Record::Epoch {
                epoch,
                split,
                loss,
                accuracy,
                auroc,
                lr,
                ..
            } => Some(format!(
                "{epoch} {split} {:016x} {:016x} {:?} {:016x}",
                loss.to_bits(),
                accuracy.to_bits(),
                auroc.map(f64::to_bits),
                lr.to_bits()
            )),
            _ => None,
        })
        .collect()
}

#[test]
fn c10_training_is_deterministic() {
    let mut cfg = ExperimentConfig::default();
    cfg.model = VitConfig::toy();
    cfg.backbone.init = BackboneInit::PretrainLite;
    cfg.backbone.pretrain.steps = 20;
    cfg.data.image_size = 16;
    cfg.data.n_min = 4;
    cfg.data.n_max = 12;
    cfg.data.train_bags = 12;
    cfg.data.val_bags = 6;
    cfg.data.test_bags = 8;
    cfg.train.epochs = 3;
    cfg.train.instance_batch_size = 4;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = metric_fields(&cmd_train(&cfg, a.path()).unwrap().records);
    let rb = metric_fields(&cmd_train(&cfg, b.path()).unwrap().records);
    let ck_same =
        std::fs::read(a.path().join("best.ckpt")).unwrap() == std::fs::read(b.path().join("best.ckpt")).unwrap();
    report(
        10,
        "repeated training runs",
        ra == rb && !ra.is_empty() && ck_same,
        format!(
            "{} metric records bit-identical: {}, checkpoints identical: {ck_same}",
            ra.len(),
            ra == rb
        ),
    );
}
