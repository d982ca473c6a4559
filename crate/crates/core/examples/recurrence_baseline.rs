//! Hand-crafted baseline: per-pixel recurrence plot, LBP histogram, linear
//! softmax classifier.

use mtcn::baselines::{lbp_codes, recurrence_plot, LinearConfig, PixelSeries, RecurrenceBaseline};
use mtcn::data::{generate, split_segments, SynthConfig};
use mtcn::eval::average_accuracy;

fn main() -> anyhow::Result<()> {
    let ds = generate(&SynthConfig { seed: 1, ..SynthConfig::default() })?;
    let split = split_segments(&ds.labels, 0.8, 1)?;
    let train_px = split.train_samples(&ds.labels);
    let test_px = split.test_samples(&ds.labels);

    let probe = train_px[0];
    let series = PixelSeries::from_stack(&ds.stack, probe.x, probe.y, &ds.stack.mask())?;
    let plot = recurrence_plot(&series, None)?;
    println!("recurrence plot of pixel ({}, {}), class {}:", probe.x, probe.y, probe.label);
    for i in 0..plot.size {
        let row: String = (0..plot.size).map(|j| if plot.get(i, j) == 1 { '#' } else { '.' }).collect();
        println!("  {row}");
    }
    let as_f64: Vec<f64> = plot.matrix.iter().map(|&v| v as f64).collect();
    println!("first LBP codes {:?}", &lbp_codes(&as_f64, plot.size, plot.size)?[..6]);

    let model = RecurrenceBaseline::fit(&ds.stack, &train_px, ds.num_classes(), None, &LinearConfig::default())?;
    let preds = model.predict(&ds.stack, &test_px, &ds.stack.mask())?;
    let labels: Vec<usize> = test_px.iter().map(|s| s.label).collect();
    println!("test average accuracy {:.2}", average_accuracy(&preds, &labels, ds.num_classes())?);
    Ok(())
}
