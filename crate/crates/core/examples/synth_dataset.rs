//! Generates the phase-coded synthetic dataset and writes it to disk.
//!
//! cargo run --release --example synth_dataset -- [output-dir]

use std::path::PathBuf;

use mtcn::data::{generate, load_dataset, write_dataset, SynthConfig};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("mtcn-synth"));
    std::fs::create_dir_all(&out)?;

    let cfg = SynthConfig { seed: 1, ..SynthConfig::default() };
    let dataset = generate(&cfg)?;
    let manifest = write_dataset(&dataset, &out)?;
    println!("wrote {}", manifest.display());

    let back = load_dataset(&manifest)?;
    let annotated = back.labels.annotated();
    println!(
        "{} timestamps of {}x{}x{}, {} classes, {} labeled pixels",
        back.stack.len(),
        back.stack.width,
        back.stack.height,
        back.stack.channels,
        back.num_classes(),
        annotated.len()
    );
    // class means of the first channel over time
    for class in 0..cfg.classes {
        let curve: Vec<String> = (0..cfg.timestamps).map(|j| format!("{:.2}", cfg.trajectory(class, j, 0))).collect();
        println!("class {class}: {}", curve.join(" "));
    }
    Ok(())
}
