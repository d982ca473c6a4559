//! Trains a desk-scale multi-temporal ConvNet on synthetic data and reports
//! test accuracy.
//!
//! cargo run --release --example train_multitemporal -- [iterations]

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

    // published kernels and strides, narrower layers
    let spec =
        NetworkSpec::paper(ds.stack.len(), ds.stack.channels, ds.num_classes()).with_widths(16, &[32, 64], &[128]);
    println!("shape chain {:?}", spec.shape_chain()?.extents);
    let cfg = TrainingConfig {
        max_iterations: iterations,
        decay_interval: 100,
        batch_size: 32,
        seed: 1,
        ..TrainingConfig::default()
    };
    let out = train(&spec, TrainingSet { stack: &ds.stack, samples: &train_px }, &cfg, &CheckpointSink::default())?;
    for row in &out.trace {
        println!(
            "iter {:>5}  lr {:.4}  loss {:.4}  batch acc {:.2}",
            row.iteration, row.lr, row.loss, row.batch_accuracy
        );
    }
    let (report, _) = evaluate(&out.checkpoint.params, &ds.stack, &test_px, &ds.stack.mask(), &ds.manifest.classes)?;
    println!("test average accuracy {:.2}, overall {:.2}", report.average_accuracy, report.overall_accuracy);
    Ok(())
}
