mod common;

use mrc_core::allreduce::{param_hash, DataParallel};
use mrc_core::exec::Execution;
use mrc_core::trainer::{train_with, Unit};
use mrc_core::Error;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn one_worker_equals_the_plain_trainer_bitwise() {
    let (model, data, config) = common::tiny_binary(3, 0.1);
    let mut single = model.clone();
    let trace = train_with(Execution::Sequential, &config, &mut single, &data, None).unwrap();
    let mut dp = DataParallel::new(&model, 1, &config, Execution::Sequential).unwrap();
    let losses = dp.train(&data).unwrap();
    let expected: Vec<f64> = trace.trace.iter().map(|r| r.loss).collect();
    assert_eq!(losses, expected);
    assert_eq!(param_hash(&dp.into_model()), param_hash(&single));
}

#[test]
fn four_workers_match_one_full_batch_step() {
    let (model, data, mut config) = common::tiny_binary(4, 0.0);
    config.total_steps = 1;
    config.warmup_steps = 0;
    let mut single = model.clone();
    train_with(Execution::Sequential, &config, &mut single, &data, None).unwrap();
    let mut dp = DataParallel::new(&model, 4, &config, Execution::Parallel).unwrap();
    dp.train(&data).unwrap();
    let got = dp.into_model().store.flat_values();
    for (a, b) in got.iter().zip(single.store.flat_values()) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-12), "{a} vs {b}");
    }
}

#[test]
fn fifty_step_traces_agree_for_several_worker_counts() {
    let (model, data, config) = common::tiny_binary(5, 0.1);
    let mut single = model.clone();
    let oracle: Vec<f64> = train_with(Execution::Sequential, &config, &mut single, &data, None)
        .unwrap()
        .trace
        .iter()
        .map(|r| r.loss)
        .collect();
    assert_eq!(oracle.len(), 50);
    for k in [2, 3, 4, 8] {
        let mut dp = DataParallel::new(&model, k, &config, Execution::Parallel).unwrap();
        let trace = dp.train(&data).unwrap();
        for (step, (a, b)) in trace.iter().zip(&oracle).enumerate() {
            assert!(rel(*a, *b) < 1e-7, "k={k} step {step}: {a} vs {b}");
        }
    }
}

#[test]
fn serial_and_concurrent_replicas_agree_bitwise() {
    let (model, data, config) = common::tiny_binary(6, 0.1);
    let run = |exec| {
        let mut dp = DataParallel::new(&model, 4, &config, exec).unwrap();
        let t = dp.train(&data).unwrap();
        (t, dp.hashes())
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}

#[test]
fn replicas_stay_identical_and_divergence_is_detected() {
    let (model, data, config) = common::tiny_binary(7, 0.0);
    let batch: Vec<Unit> = data.units(config.variant)[..8].to_vec();
    let mut dp = DataParallel::new(&model, 4, &config, Execution::Parallel).unwrap();
    for _ in 0..2 {
        dp.step(&data, &batch).unwrap();
        let h = dp.hashes();
        assert!(h.iter().all(|x| *x == h[0]));
    }
    let v = &mut dp.replicas[2].model.store.iter_mut().next().unwrap().value;
    v.data_mut()[0] += 1e-12;
    assert!(matches!(dp.step(&data, &batch), Err(Error::Consistency(_))));
}

#[test]
fn batch_smaller_than_workers_is_usage_error() {
    let (model, data, config) = common::tiny_binary(8, 0.0);
    let batch: Vec<Unit> = data.units(config.variant)[..3].to_vec();
    let mut dp = DataParallel::new(&model, 4, &config, Execution::Sequential).unwrap();
    assert!(matches!(dp.step(&data, &batch), Err(Error::Usage(_))));
}
