//! Timestamp ablation: one model per timestamp, pairwise correlation of
//! their validation predictions, and low-correlation subsets.
//!
//! cargo run --release --example timestamp_ablation -- [iterations]

use mtcn::ablate::{ablate, AblationConfig};
use mtcn::data::{generate, split_segments, SynthConfig};
use mtcn::net::NetworkSpec;
use mtcn::train::TrainingConfig;

fn main() -> anyhow::Result<()> {
    let iterations = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(150);
    // six timestamps, the third one alone separates every class, the last
    // one is a copy of the first
    let ds = generate(&SynthConfig {
        seed: 1,
        timestamps: 6,
        separable_timestamp: Some(2),
        duplicate: Some((0, 5)),
        size: 96,
        radius: (5.0, 7.0),
        ..SynthConfig::default()
    })?;
    let split = split_segments(&ds.labels, 0.8, 1)?;
    let spec = NetworkSpec::paper(6, 3, ds.num_classes()).with_widths(16, &[32, 64], &[128]);
    let training = TrainingConfig {
        max_iterations: iterations,
        decay_interval: 100,
        batch_size: 32,
        seed: 1,
        ..TrainingConfig::default()
    };
    let mut cfg = AblationConfig::new(spec, training);
    cfg.sizes = vec![2, 3, 4];

    let report = ablate(&ds, &split, &cfg)?;
    for s in &report.singles {
        println!("{}: validation {:.2}  test {:.2}", s.label, s.validation_average_accuracy, s.test_average_accuracy);
    }
    println!("ranking {:?}", report.ranking);
    println!("correlation of the duplicated pair {:.3}", report.correlation[0][5]);
    print!("{}", report.table());
    Ok(())
}
