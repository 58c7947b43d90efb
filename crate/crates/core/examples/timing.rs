use std::time::Instant;

use planperf_core::encoding::{fit_space, FitOptions, LabelNormalizer, StructuralParams};
use planperf_core::neural::{
    train, MetricNormalizers, ModelConfig, NeuralExample, OutputKind, TrainConfig,
    TreeAttentionModel, ValidationMetric,
};
use planperf_core::synth::{generate, SynthConfig};

fn main() {
    let t0 = Instant::now();
    let train_records = generate(&SynthConfig {
        n_queries: 20_000,
        seed: 42,
        ..SynthConfig::default()
    })
    .unwrap();
    let test_records = generate(&SynthConfig {
        n_queries: 2_000,
        seed: 43,
        ..SynthConfig::default()
    })
    .unwrap();
    println!("synth: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let space = fit_space(&train_records, &FitOptions::default()).unwrap();
    let params = StructuralParams::default();
    let labels: Vec<f64> = train_records.iter().map(|r| r.latency_ms).collect();
    let normalizer = LabelNormalizer::fit_min_max_log(&labels).unwrap();
    let metrics = MetricNormalizers::fit(&train_records).unwrap();
    let build = |records: &[planperf_core::plan::QueryRecord]| -> Vec<NeuralExample> {
        records
            .iter()
            .map(|r| {
                NeuralExample::build(
                    r,
                    &space,
                    &params,
                    r.latency_ms,
                    normalizer.normalize(r.latency_ms).unwrap(),
                    0,
                    &metrics,
                )
                .unwrap()
            })
            .collect()
    };
    let train_ex = build(&train_records);
    let test_ex = build(&test_records);
    println!("encode: {:?}", t0.elapsed());
    let avg_nodes: f64 =
        train_ex.iter().map(|e| e.input.n as f64).sum::<f64>() / train_ex.len() as f64;
    let max_nodes = train_ex.iter().map(|e| e.input.n).max().unwrap();
    println!("avg nodes {avg_nodes:.1}, max {max_nodes}");

    let config = ModelConfig {
        seed: 1,
        ..ModelConfig::default()
    };
    let mut model = TreeAttentionModel::new(config, &space).unwrap();
    let tc = TrainConfig {
        lambda: 1.0,
        batch_size: 64,
        learning_rate: 1e-3,
        max_epochs: 2,
        patience: 3,
        seed: 1,
    };
    let t0 = Instant::now();
    let outcome = train(
        &mut model,
        &train_ex,
        &test_ex,
        &tc,
        &ValidationMetric::P50QError(normalizer.clone()),
    )
    .unwrap();
    println!("2 epochs: {:?}", t0.elapsed());
    for e in &outcome.history {
        println!(
            "epoch {} train_loss {:.4} valid P50 qerr {:.4}",
            e.epoch, e.train_loss, e.valid_metric
        );
    }
}
// appended: nothing
