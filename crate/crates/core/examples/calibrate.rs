use std::time::Instant;

use planperf_core::bound::{choose_representatives, group_by_encoded_form, overall_bound, Target};
use planperf_core::encoding::{fit_space, FitOptions, LabelNormalizer, StructuralParams};
use planperf_core::eval::{regression_report, RangeSpec};
use planperf_core::neural::{
    train, MetricNormalizers, ModelConfig, NeuralExample, TrainConfig, TreeAttentionModel,
    ValidationMetric,
};
use planperf_core::synth::{generate, SynthConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let model_seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let d_model: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(32);
    let synth_cfg = SynthConfig {
        n_queries: 20_000,
        max_depth: 6,
        duplicate_fraction: 0.4,
        hidden_noise_sigma: 0.25,
        cpu_latency_extra_noise: 0.4,
        seed: 42,
        ..SynthConfig::default()
    };
    let train_records = generate(&synth_cfg).unwrap();
    let test_records = generate(&SynthConfig {
        n_queries: 2_000,
        seed: 43,
        ..synth_cfg.clone()
    })
    .unwrap();

    let space = fit_space(&train_records, &FitOptions::default()).unwrap();
    let params = StructuralParams::default();
    let labels: Vec<f64> = train_records.iter().map(|r| r.cpu_ms).collect();
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
                    r.cpu_ms,
                    normalizer.normalize(r.cpu_ms).unwrap(),
                    0,
                    &metrics,
                )
                .unwrap()
            })
            .collect()
    };
    let train_ex = build(&train_records);
    let test_ex = build(&test_records);

    let mut groups =
        group_by_encoded_form(&test_records, &space, &params, Target::Cpu).unwrap();
    choose_representatives(&mut groups, 0.5).unwrap();
    let report = overall_bound(&groups, 0.5).unwrap();
    println!(
        "bound: P50 {:.4}, groups {}, singletons {}, largest {}",
        report.overall_bound, report.n_groups, report.n_singletons, report.largest_group
    );

    for lambda in [1.0, 0.0] {
        let config = ModelConfig {
            seed: model_seed,
            d_model,
            ffn_dim: 2 * d_model,
            ..ModelConfig::default()
        };
        let mut model = TreeAttentionModel::new(config, &space).unwrap();
        let tc = TrainConfig {
            lambda,
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 8,
            patience: 3,
            seed: model_seed,
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
        let pairs: Vec<(f64, f64)> = test_ex
            .iter()
            .map(|ex| {
                let out = model.forward(&ex.input).unwrap();
                (normalizer.denormalize(out.plan_out[0]), ex.plan_label_raw)
            })
            .collect();
        let rep = regression_report(&pairs, &RangeSpec::new(vec![1000.0])).unwrap();
        println!(
            "seed {model_seed} lambda={lambda}: {:.0?} best_epoch {} epochs {} | P50 {:.4} P90 {:.4} P99 {:.4}",
            t0.elapsed(),
            outcome.best_epoch,
            outcome.history.len(),
            rep.overall.p50,
            rep.overall.p90,
            rep.overall.p99
        );
    }
}
