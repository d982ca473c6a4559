//! Branch dropout: two timestamps are missing from the training images and
//! nine from the evaluation. Compares a model trained with branch dropout
//! against one trained without.
//!
//! cargo run --release --example missing_data -- [iterations]

use mtcn::data::{generate, split_segments, SynthConfig};
use mtcn::eval::evaluate;
use mtcn::net::{AvailabilityMask, NetworkSpec};
use mtcn::train::{train, CheckpointSink, TrainingConfig, TrainingSet};

fn main() -> anyhow::Result<()> {
    let iterations = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1500);
    let ds = generate(&SynthConfig { seed: 1, missing: vec![3, 7], ..SynthConfig::default() })?;
    let split = split_segments(&ds.labels, 0.8, 1)?;
    let train_px = split.train_samples(&ds.labels);
    let test_px = split.test_samples(&ds.labels);
    let spec = NetworkSpec::paper(12, 3, ds.num_classes()).with_widths(16, &[32, 64], &[128]);
    println!("branch keep probability {:.4}", spec.branch_dropout_keep_prob());

    let sparse = AvailabilityMask::only(12, &[0, 5, 10]);
    for adapted in [false, true] {
        let cfg = TrainingConfig {
            max_iterations: iterations,
            decay_interval: (iterations / 3).max(1),
            batch_size: 32,
            seed: 1,
            missing_data_mode: adapted,
            ..TrainingConfig::default()
        };
        let out = train(&spec, TrainingSet { stack: &ds.stack, samples: &train_px }, &cfg, &CheckpointSink::default())?;
        let params = &out.checkpoint.params;
        let (all, _) = evaluate(params, &ds.stack, &test_px, &ds.stack.mask(), &ds.manifest.classes)?;
        let (few, _) = evaluate(params, &ds.stack, &test_px, &sparse, &ds.manifest.classes)?;
        println!(
            "branch dropout {:<5}  10 of 12 timestamps {:.2}   3 of 12 timestamps {:.2}",
            adapted, all.average_accuracy, few.average_accuracy
        );
    }
    Ok(())
}
