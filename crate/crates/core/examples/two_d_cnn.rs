//! The single-branch baseline: all timestamps stacked channel-wise into one
//! window, same trunk and head as the multi-temporal network.

use mtcn::data::{generate, split_segments, SynthConfig};
use mtcn::eval::evaluate;
use mtcn::net::NetworkSpec;
use mtcn::train::{train, CheckpointSink, TrainingConfig, TrainingSet};

fn main() -> anyhow::Result<()> {
    let iterations = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let ds = generate(&SynthConfig { seed: 1, ..SynthConfig::default() })?;
    let split = split_segments(&ds.labels, 0.8, 1)?;
    let train_px = split.train_samples(&ds.labels);
    let test_px = split.test_samples(&ds.labels);
    let (t, c, k) = (ds.stack.len(), ds.stack.channels, ds.num_classes());
    let cfg = TrainingConfig {
        max_iterations: iterations,
        decay_interval: 100,
        batch_size: 32,
        seed: 1,
        ..TrainingConfig::default()
    };

    for (name, spec) in [("2-D CNN", NetworkSpec::two_d_cnn(t, c, k)), ("multi-temporal", NetworkSpec::paper(t, c, k))]
    {
        let spec = spec.with_widths(16, &[32, 64], &[128]);
        let out = train(&spec, TrainingSet { stack: &ds.stack, samples: &train_px }, &cfg, &CheckpointSink::default())?;
        let params = &out.checkpoint.params;
        let branch_weights: usize = params.branches.iter().map(|b| b.weights.len()).sum();
        let (report, _) = evaluate(params, &ds.stack, &test_px, &ds.stack.mask(), &ds.manifest.classes)?;
        println!("{name:<15} branch weights {branch_weights:>6}  test average accuracy {:.2}", report.average_accuracy);
    }
    Ok(())
}
