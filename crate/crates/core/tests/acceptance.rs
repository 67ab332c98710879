//! One test per acceptance criterion. Each prints a single
//! `ACCEPTANCE <n> PASS|FAIL <summary>` line. Tests hold a shared lock so
//! the timed criteria are measured without competing for the CPU.

mod common;

use std::collections::BTreeSet;
use std::sync::Mutex;
use std::time::Instant;

use mrc_core::allreduce::{predict_step_time, ring_all_reduce, CommCostModel, DataParallel};
use mrc_core::autodiff::{grad_check_params, ParamId, Tape};
use mrc_core::corpus::{parse_str, BinaryInstance, Parsed};
use mrc_core::decode::{select_top_n, write_predictions, GroupScores};
use mrc_core::encoder::EncoderConfig;
use mrc_core::exec::Execution;
use mrc_core::heads::{binary_loss, binary_loss_from_logits, multi_choice_loss, multi_choice_loss_from_logits, MultiChoiceHead};
use mrc_core::hpo::{hyperband_schedule, run_search, successive_halving, Config, Controller, SearchSpace, Trial};
use mrc_core::synth::SynthStyle;
use mrc_core::tokenizer::{build_vocab, encode_triplet, TokenSequence};
use mrc_core::trainer::checkpoint::to_bytes;
use mrc_core::trainer::{evaluate, predict, score_groups, train, train_with, transfer_pipeline, EncodedCorpus, Head, Model, TrainConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: u32, pass: bool, summary: String) {
    println!("ACCEPTANCE {n} {} {summary}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {summary}");
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

// ---------------------------------------------------------------- 1

fn tiny_model(variant: Variant, seed: u64) -> Model {
    let inst = common::keyword_instances(8, seed, SynthStyle::Exam, "g");
    let vocab = build_vocab(&inst, 1, 1000).unwrap();
    let cfg = EncoderConfig {
        n_layers: 2,
        n_heads: 2,
        hidden_dim: 16,
        ffn_dim: 32,
        max_len: 32,
        seed,
        ..EncoderConfig::default()
    };
    let mut model = Model::new(variant, cfg, vocab).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.3).unwrap();
    for p in model.store.iter_mut() {
        for v in p.value.data_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    model
}

#[test]
fn criterion_1_gradient_oracle() {
    let _g = lock();
    let start = Instant::now();
    let passage = "key1 fill2 fill3 key4 fill5 .";
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut invariant_grad: f64 = 0.0;
    for variant in [Variant::Binary, Variant::MultiChoice] {
        let model = tiny_model(variant, 11);
        let seqs: Vec<TokenSequence> = ["key1", "key7", "key4", "key9"]
            .iter()
            .map(|a| encode_triplet(passage, "which word appears in the passage ?", a, &model.vocab, 32).unwrap())
            .collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let loss_fn = |tape: &mut Tape<'_>| {
            let t = model.encoder.encode_batch_on(tape, &refs, None)?;
            match &model.head {
                Head::Binary(h) => h.loss_on(tape, t, &[1, 0, 0, 0], &[1.0, 1.0, 1.0, 1.0]),
                Head::MultiChoice(h) => h.loss_on(tape, t, 0),
            }
        };
        // under the multi-choice loss the head bias and the final layer-norm
        // bias shift every option logit alike, so their gradients are
        // identically zero and are checked on their own
        let excluded: Vec<ParamId> = match variant {
            Variant::MultiChoice => [MultiChoiceHead::B_NAME, "encoder.final_ln.bias"]
                .iter()
                .map(|n| model.store.find(n).unwrap())
                .collect(),
            Variant::Binary => Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coords: Vec<(ParamId, usize)> = model
            .store
            .iter()
            .enumerate()
            .filter(|(i, _)| !excluded.contains(&ParamId(*i)))
            .flat_map(|(i, p)| {
                let n = p.value.len();
                (0..n.min(8)).map(|_| (ParamId(i), rng.gen_range(0..n))).collect::<Vec<_>>()
            })
            .collect();
        let r = grad_check_params(&model.store, &coords, 1e-5, loss_fn).unwrap();
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
        let mut tape = Tape::new(&model.store);
        let out = loss_fn(&mut tape).unwrap();
        let (g, _) = tape.backward(out).unwrap();
        for &id in &excluded {
            let largest = g.param(id).map_or(0.0, |t| t.data().iter().fold(0.0, |m: f64, x| m.max(x.abs())));
            invariant_grad = invariant_grad.max(largest);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && checked >= 200 && secs < 60.0 && invariant_grad < 1e-12;
    report(
        1,
        pass,
        format!("max_rel_error={worst:.2e} coordinates={checked} (>=100 per head) shift_invariant_grad={invariant_grad:.1e} runtime={secs:.1}s"),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_loss_formulas() {
    let _g = lock();
    let mc = multi_choice_loss(&[0.25; 4], 2).unwrap();
    let bc1 = binary_loss(0.5, 1);
    let bc0 = binary_loss(0.5, 0);
    let ln4 = 4f64.ln();
    let ln2 = 2f64.ln();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let z = [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)];
        let a = binary_loss_from_logits(z, 1);
        let b = multi_choice_loss_from_logits(&z, 1).unwrap();
        if a.to_bits() != b.to_bits() {
            mismatches += 1;
        }
    }
    let pass = (mc - ln4).abs() <= 1e-12 && (bc1 - ln2).abs() <= 1e-12 && (bc0 - ln2).abs() <= 1e-12 && mismatches == 0;
    report(
        2,
        pass,
        format!(
            "|mc-ln4|={:.1e} |bc-ln2|={:.1e} pair_mismatches={mismatches}/1000",
            (mc - ln4).abs(),
            (bc1 - ln2).abs().max((bc0 - ln2).abs())
        ),
    );
}

// ---------------------------------------------------------------- 3

fn race_fixture(questions: usize) -> String {
    let mut lines = Vec::new();
    let mut left = questions;
    let mut id = 0;
    while left > 0 {
        let here = left.min(3);
        left -= here;
        let qs: Vec<String> = (0..here)
            .map(|q| {
                format!(
                    r#"{{"question":"q{q}?","options":["a{q}","b{q}","c{q}","d{q}"],"answer":"{}"}}"#,
                    ["A", "B", "C", "D"][q % 4]
                )
            })
            .collect();
        lines.push(format!(r#"{{"id":"r{id}","article":"Article number {id}.","questions":[{}]}}"#, qs.join(",")));
        id += 1;
    }
    lines.join("\n")
}

fn dream_fixture(questions: usize) -> String {
    (0..questions)
        .map(|i| {
            format!(
                r#"{{"id":"d{i}","dialogue":["M: Hello {i}.","W: Hi."],"questions":[{{"question":"What?","choice":["x{i}","y{i}","z{i}"],"answer":"y{i}"}}]}}"#
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn squad_fixture(n: usize) -> String {
    (0..n)
        .map(|i| format!(r#"{{"context":"Context {i}.","question":"Q{i}?","answer_text":"ans{i}"}}"#))
        .collect::<Vec<_>>()
        .join("\n")
}

fn counts(inst: &[BinaryInstance]) -> (usize, usize) {
    (inst.len(), inst.iter().filter(|i| i.label == 1).count())
}

#[test]
fn criterion_3_reconstruction_counts() {
    let _g = lock();
    let q = 11;
    let race = counts(&parse_str(&race_fixture(q), "race".parse().unwrap()).unwrap().into_binary());
    let dream = counts(&parse_str(&dream_fixture(q), "dream".parse().unwrap()).unwrap().into_binary());
    let squad = parse_str(&squad_fixture(q), "squad2pos".parse().unwrap()).unwrap();
    let squad_is_binary = matches!(squad, Parsed::Binary(_));
    let squad = counts(&squad.into_binary());
    let pass = race == (4 * q, q) && dream == (3 * q, q) && squad == (q, q) && squad_is_binary;
    report(
        3,
        pass,
        format!("Q={q}: race {race:?} (want {:?}), dream {dream:?} (want {:?}), squad2pos {squad:?} (want {:?})", (4 * q, q), (3 * q, q), (q, q)),
    );
}

// ---------------------------------------------------------------- 4

const LEARN_MAX_LEN: usize = 24;

struct LearnRun {
    best: f64,
    last: f64,
}

fn learnability_run(variant: Variant, seed: u64) -> LearnRun {
    let train_i = common::keyword_instances(2000, 100 + seed, SynthStyle::Exam, "tr");
    let dev_i = common::keyword_instances(500, 200 + seed, SynthStyle::Exam, "dv");
    let vocab = common::vocab_of(&train_i);
    let mut model = Model::new(variant, common::small_encoder(seed, LEARN_MAX_LEN), vocab).unwrap();
    let tr = common::encode(&train_i, &model.vocab, LEARN_MAX_LEN);
    let dv = common::encode(&dev_i, &model.vocab, LEARN_MAX_LEN);
    let config = learn_config(variant, seed);
    let out = train(&config, &mut model, &tr, Some(&dv)).unwrap();
    LearnRun {
        best: out.best_dev_accuracy().unwrap(),
        last: out.final_dev_accuracy().unwrap(),
    }
}

fn learn_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        variant,
        learning_rate: 1e-2,
        warmup_steps: 0,
        total_steps: 2000,
        // 64 sequences per step either way
        batch_size: if variant == Variant::Binary { 64 } else { 16 },
        seed,
        max_len: LEARN_MAX_LEN,
        eval_interval: 100,
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_4_synthetic_learnability() {
    let _g = lock();
    let start = Instant::now();
    let seeds = [0u64, 1, 2, 3, 4];
    let mut bin = Vec::new();
    let mut mc = Vec::new();
    for &s in &seeds {
        bin.push(learnability_run(Variant::Binary, s));
        mc.push(learnability_run(Variant::MultiChoice, s));
    }
    let secs = start.elapsed().as_secs_f64();
    let mean = |runs: &[LearnRun]| runs.iter().map(|r| r.last).sum::<f64>() / runs.len() as f64;
    let (mb, mm) = (mean(&bin), mean(&mc));
    let fmt = |runs: &[LearnRun]| runs.iter().map(|r| format!("{:.3}/{:.3}", r.best, r.last)).collect::<Vec<_>>().join(" ");
    println!("  binary best/final per seed: {}", fmt(&bin));
    println!("  multi-choice best/final per seed: {}", fmt(&mc));
    let reach = bin[0].best >= 0.95 && mc[0].best >= 0.95;
    let direction = mb >= mm - 0.01;
    let pass = reach && direction && secs < 600.0;
    report(
        4,
        pass,
        format!(
            "seed0 best dev: binary={:.3} multi_choice={:.3} (>=0.95); 5-seed final mean: binary={mb:.4} multi_choice={mm:.4} gap={:+.2}pt (>= -1pt); runtime={secs:.0}s (<600s)",
            bin[0].best,
            mc[0].best,
            100.0 * (mb - mm)
        ),
    );
}

// ---------------------------------------------------------------- 5

fn transfer_config(variant: Variant, steps: u64, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        variant,
        learning_rate: lr,
        warmup_steps: 0,
        total_steps: steps,
        batch_size: 64,
        seed,
        max_len: LEARN_MAX_LEN,
        eval_interval: steps,
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_5_transfer_effect() {
    let _g = lock();
    let mut gains = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let target = common::keyword_instances(200, 300 + seed, SynthStyle::Exam, "tgt");
        let aux = common::keyword_instances(2000, 400 + seed, SynthStyle::Dialogue, "aux");
        let dev = common::keyword_instances(500, 500 + seed, SynthStyle::Exam, "dev");
        let all: Vec<BinaryInstance> = target.iter().chain(&aux).cloned().collect();
        let vocab = common::vocab_of(&all);
        let fresh = || Model::new(Variant::Binary, common::small_encoder(seed, LEARN_MAX_LEN), vocab.clone()).unwrap();
        let config_a = transfer_config(Variant::Binary, 2000, 1e-2, seed);
        let config_b = transfer_config(Variant::Binary, 300, 3e-3, seed);

        let mut baseline = fresh();
        let tr = common::encode(&target, &baseline.vocab, LEARN_MAX_LEN);
        let dv = common::encode(&dev, &baseline.vocab, LEARN_MAX_LEN);
        train(&config_b, &mut baseline, &tr, None).unwrap();
        let base_acc = evaluate(&baseline, &dv).unwrap();

        let out = transfer_pipeline(fresh(), &[aux, target.clone()], &target, None, &config_a, &config_b, None).unwrap();
        let transfer_acc = evaluate(&out.model, &dv).unwrap();
        gains.push(transfer_acc - base_acc);
        lines.push(format!("seed{seed}: target-only={base_acc:.3} transfer={transfer_acc:.3}"));
    }
    for l in &lines {
        println!("  {l}");
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    report(5, mean_gain >= 0.02, format!("mean gain over 5 seeds = {:+.2} points (>= +2)", 100.0 * mean_gain));
}

// ---------------------------------------------------------------- 6

/// Option `i` is selected iff fewer than `n` options beat it (higher
/// score, or equal score and lower index).
fn brute_force_top_n(scores: &[f64], n: usize) -> BTreeSet<usize> {
    (0..scores.len())
        .filter(|&i| {
            let beaten_by = (0..scores.len()).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
            beaten_by < n
        })
        .collect()
}

#[test]
fn criterion_6_top_n_decoding() {
    let _g = lock();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut with_ties = 0;
    for case in 0..10_000 {
        let len = rng.gen_range(2..=8);
        let tied = case % 2 == 0;
        let scores: Vec<f64> = (0..len)
            .map(|_| if tied { rng.gen_range(0..4) as f64 / 4.0 } else { rng.gen::<f64>() })
            .collect();
        let uniq: BTreeSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
        if uniq.len() < len {
            with_ties += 1;
        }
        let n = 1 + case % 2;
        let gs = GroupScores::from_dense(format!("g{case}"), &scores, n).unwrap();
        if select_top_n(&gs).unwrap() != brute_force_top_n(&scores, n) {
            mismatches += 1;
        }
    }
    let example = select_top_n(&GroupScores::from_dense("e", &[0.7, 0.2, 0.9, 0.4], 2).unwrap()).unwrap();
    let pass = mismatches == 0 && with_ties > 1000 && example == BTreeSet::from([0, 2]);
    report(6, pass, format!("mismatches={mismatches}/10000 vectors_with_ties={with_ties} example={example:?}"));
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_hyperband() {
    let _g = lock();
    // (n_i, r_i) per round, from an independent script of the recurrence
    let scripted: Vec<Vec<(usize, f64)>> = vec![
        vec![(81, 1.0), (27, 3.0), (9, 9.0), (3, 27.0), (1, 81.0)],
        vec![(34, 3.0), (11, 9.0), (3, 27.0), (1, 81.0)],
        vec![(15, 9.0), (5, 27.0), (1, 81.0)],
        vec![(8, 27.0), (2, 81.0)],
        vec![(5, 81.0)],
    ];
    let got: Vec<Vec<(usize, f64)>> = hyperband_schedule(81.0, 3).unwrap().into_iter().map(|b| b.rounds).collect();
    let schedule_ok = got == scripted;

    let xs = [0.15, 0.95, 0.35, 0.55, 0.05, 0.75, 0.45, 0.85, 0.25];
    let trials: Vec<Trial> = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| Trial::new(i as u64, Config::from([("x".to_string(), serde_json::json!(x))])))
        .collect();
    // maximised at x = 0.6, sharper with budget
    let objective = |c: &Config, b: f64| Ok(-(c["x"].as_f64().unwrap() - 0.6).powi(2) * (1.0 + 1.0 / b));
    let (best, _) = successive_halving(trials, 3, 1.0, objective).unwrap();
    let optimum = 3; // x = 0.55 is the closest to 0.6
    let pass = schedule_ok && best.trial_id == optimum;
    report(7, pass, format!("schedule_matches={schedule_ok} sh_best=trial{} (optimum trial{optimum})", best.trial_id));
}

// ---------------------------------------------------------------- 8

fn ring_order_oracle(grads: &[Vec<f64>]) -> Vec<f64> {
    let (k, n) = (grads.len(), grads[0].len());
    let mut out = vec![0.0; n];
    let mut start = 0;
    for c in 0..k {
        let len = n / k + usize::from(c < n % k);
        for i in start..start + len {
            let mut s = grads[c][i];
            for j in 1..k {
                s += grads[(c + j) % k][i];
            }
            out[i] = s;
        }
        start += len;
    }
    out
}

#[test]
fn criterion_8_all_reduce_equivalence() {
    let _g = lock();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bitwise = true;
    for k in [2, 3, 4, 8] {
        for n in [1, 17, 1024] {
            let grads: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0) * 10f64.powi(rng.gen_range(-3..4))).collect()).collect();
            let oracle = ring_order_oracle(&grads);
            let out = ring_all_reduce(&grads).unwrap();
            bitwise &= out.iter().all(|r| r.iter().zip(&oracle).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    let (model, data, config) = common::tiny_binary(21, 0.1);
    let mut single = model.clone();
    let oracle: Vec<f64> = train_with(Execution::Sequential, &config, &mut single, &data, None)
        .unwrap()
        .trace
        .iter()
        .map(|r| r.loss)
        .collect();
    let mut worst: f64 = 0.0;
    for k in [2, 4] {
        let mut dp = DataParallel::new(&model, k, &config, Execution::Parallel).unwrap();
        let trace = dp.train(&data).unwrap();
        for (a, b) in trace.iter().zip(&oracle) {
            worst = worst.max((a - b).abs() / b.abs());
        }
    }

    let cost = CommCostModel {
        bytes_per_param: 4.0,
        bandwidth: 1e9,
        latency_per_hop: 1e-5,
        compute_time_per_step: 0.2,
    };
    let n_params = 1_000_000;
    let bound = 2.0 * n_params as f64 * cost.bytes_per_param / cost.bandwidth;
    let volumes: Vec<f64> = [2, 4, 8, 16].iter().map(|&k| cost.transfer_time(n_params, k)).collect();
    let monotone = volumes.windows(2).all(|w| w[0] < w[1]) && volumes.iter().all(|&v| v <= bound);
    let times: Vec<f64> = [1, 2, 4, 8, 16].iter().map(|&k| predict_step_time(&cost, n_params, k)).collect();
    let cost_ok = monotone && times[0] == cost.compute_time_per_step && times.windows(2).all(|w| w[0] < w[1]);

    let pass = bitwise && oracle.len() == 50 && worst < 1e-7 && cost_ok;
    report(
        8,
        pass,
        format!("ring_bitwise={bitwise} trace_steps={} max_rel_loss_diff={worst:.1e} cost_monotone_bounded={cost_ok}", oracle.len()),
    );
}

// ---------------------------------------------------------------- 9

fn train_eval_once(seed: u64) -> (Vec<u8>, Vec<u8>) {
    let (mut model, data, mut config) = common::tiny_binary(seed, 0.1);
    config.total_steps = 20;
    train(&config, &mut model, &data, Some(&data)).unwrap();
    let scores = score_groups(&model, &data, None).unwrap();
    let mut preds = Vec::new();
    write_predictions(&mut preds, &predict(&scores).unwrap()).unwrap();
    (to_bytes(&model).unwrap(), preds)
}

fn hpo_once(data: &EncodedCorpus, model: &Model, base: &TrainConfig) -> Vec<(u64, Option<u64>)> {
    let objective = |c: &Config, budget: f64| {
        let config = TrainConfig {
            learning_rate: c["learning_rate"].as_f64().unwrap(),
            batch_size: c["batch_size"].as_u64().unwrap() as usize / 8,
            warmup_steps: 0,
            total_steps: budget.ceil() as u64,
            eval_interval: budget.ceil() as u64,
            ..base.clone()
        };
        let mut m = model.clone();
        train(&config, &mut m, data, None)?;
        evaluate(&m, data)
    };
    let mut c = Controller::new(2, &objective).unwrap();
    let out = run_search(&SearchSpace::default_training(), &hyperband_schedule(9.0, 3).unwrap(), 4, &mut c).unwrap();
    out.ranking.iter().map(|t| (t.trial_id, t.metric.map(f64::to_bits))).collect()
}

#[test]
fn criterion_9_reproducibility() {
    let _g = lock();
    let a = train_eval_once(31);
    let b = train_eval_once(31);
    let (model, data, config) = common::tiny_binary(32, 0.0);
    let r1 = hpo_once(&data, &model, &config);
    let r2 = hpo_once(&data, &model, &config);
    let pass = a.0 == b.0 && a.1 == b.1 && r1 == r2 && !r1.is_empty();
    report(
        9,
        pass,
        format!(
            "checkpoint_identical={} predictions_identical={} hpo_ranking_identical={} ({} trials)",
            a.0 == b.0,
            a.1 == b.1,
            r1 == r2,
            r1.len()
        ),
    );
}
