//! Checkpoints carry parameters, momentum, batch-norm statistics and the
//! generator position, so a resumed run matches an uninterrupted one.

use mtcn::checkpoint::Checkpoint;
use mtcn::data::{generate, SynthConfig};
use mtcn::net::NetworkSpec;
use mtcn::train::{resume, train, CheckpointSink, TrainingConfig, TrainingSet};

fn main() -> anyhow::Result<()> {
    let ds = generate(&SynthConfig { size: 40, segments_per_class: 4, timestamps: 3, ..SynthConfig::default() })?;
    let samples = ds.labels.annotated();
    let data = TrainingSet { stack: &ds.stack, samples: &samples };
    let spec = NetworkSpec::paper(3, 3, ds.num_classes()).with_widths(8, &[16, 32], &[32]);
    let dir = tempfile_dir()?;
    let sink = CheckpointSink { dir: Some(dir.clone()) };

    let full = TrainingConfig {
        max_iterations: 40,
        batch_size: 16,
        seed: 9,
        checkpoint_interval: 20,
        ..TrainingConfig::default()
    };
    let straight = train(&spec, data, &full, &sink)?;

    let halfway = Checkpoint::load(&dir.join("checkpoint_00000020.mtcn"))?;
    println!("loaded checkpoint at iteration {}", halfway.iteration);
    let resumed = resume(halfway, data, &full, &CheckpointSink::default())?;
    let same = straight.checkpoint.to_bytes()? == resumed.checkpoint.to_bytes()?;
    println!("resumed run identical to uninterrupted run: {same}");
    anyhow::ensure!(same);
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("mtcn-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
