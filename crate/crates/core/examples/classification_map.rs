//! Trains briefly, then writes the predicted classification map as a PNG
//! (class colors on annotated pixels, black elsewhere).
//!
//! cargo run --release --example classification_map -- [output.png]

use std::path::PathBuf;

use mtcn::data::{generate, split_segments, SynthConfig};
use mtcn::eval::{predict_map, write_map_png};
use mtcn::net::NetworkSpec;
use mtcn::train::{train, CheckpointSink, TrainingConfig, TrainingSet};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("mtcn-map.png"));
    let ds = generate(&SynthConfig { seed: 1, ..SynthConfig::default() })?;
    let split = split_segments(&ds.labels, 0.8, 1)?;
    let train_px = split.train_samples(&ds.labels);
    let spec = NetworkSpec::paper(12, 3, ds.num_classes()).with_widths(16, &[32, 64], &[128]);
    let cfg = TrainingConfig {
        max_iterations: 200,
        decay_interval: 100,
        batch_size: 32,
        seed: 1,
        ..TrainingConfig::default()
    };
    let trained = train(&spec, TrainingSet { stack: &ds.stack, samples: &train_px }, &cfg, &CheckpointSink::default())?;

    let map = predict_map(&trained.checkpoint.params, &ds.stack, &ds.labels, &ds.stack.mask())?;
    let wrong = map.iter().zip(&ds.labels.labels).filter(|(p, l)| p != l).count();
    write_map_png(&out, &map, ds.labels.width, ds.labels.height, &ds.manifest.class_colors())?;
    println!(
        "wrote {} ({wrong} of {} annotated pixels differ from the labels)",
        out.display(),
        ds.labels.annotated().len()
    );
    Ok(())
}
