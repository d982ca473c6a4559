//! Synthetic phenology scenes.
//!
//! Elliptical "crowns" are scattered over a dark background. Every class
//! follows a smooth seasonal color trajectory
//! `base[ch] + amp[ch] * cos(2 pi j / t - phase[class])`, and per-pixel
//! Gaussian texture noise is added on top. With four classes the phases are
//! `{0, 1, 2, 4} * pi/3`; for `t = 12` every timestamp then has exactly one
//! pair of classes with identical colors, so no single image separates all
//! classes while the full series does.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::manifest::{default_color, quantize, write_png16_gray, write_png8, Dataset, Manifest, TimestampEntry};
use crate::data::stack::{LabelMap, TemporalImageStack, TimestampImage, BACKGROUND};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BASE: [f64; 3] = [0.50, 0.55, 0.45];
const AMPLITUDE: [f64; 3] = [0.30, 0.25, 0.20];
const BACKGROUND_LEVEL: f64 = 0.12;
const PLACEMENT_ATTEMPTS: usize = 5_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub segments_per_class: usize,
    /// Images are `size x size`.
    pub size: usize,
    pub timestamps: usize,
    pub channels: usize,
    /// Standard deviation of the per-pixel texture noise.
    pub noise: f64,
    pub seed: u64,
    /// Range of the ellipse semi-axes, in pixels.
    pub radius: (f64, f64),
    /// A timestamp at which every class gets a distinct color.
    #[serde(default)]
    pub separable_timestamp: Option<usize>,
    /// Timestamps written as unavailable.
    #[serde(default)]
    pub missing: Vec<usize>,
    /// `(source, copy)`: timestamp `copy` becomes an exact duplicate of `source`.
    #[serde(default)]
    pub duplicate: Option<(usize, usize)>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            segments_per_class: 12,
            size: 64,
            timestamps: 12,
            channels: 3,
            noise: 0.05,
            seed: 1,
            radius: (2.5, 4.0),
            separable_timestamp: None,
            missing: Vec::new(),
            duplicate: None,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.timestamps == 0 || self.channels == 0 || self.size == 0 || self.segments_per_class == 0 {
            return Err(Error::config("timestamps, channels, size and segments must be positive"));
        }
        if self.classes > BACKGROUND as usize {
            return Err(Error::config("too many classes for 8-bit labels"));
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return Err(Error::config(format!("invalid radius range {:?}", self.radius)));
        }
        let t = self.timestamps;
        let bad = |j: &usize| *j >= t;
        if self.missing.iter().any(bad) || self.separable_timestamp.as_ref().is_some_and(bad) {
            return Err(Error::config("timestamp index out of range"));
        }
        if let Some((a, b)) = self.duplicate {
            if a >= t || b >= t || a == b {
                return Err(Error::config("invalid duplicate pair"));
            }
        }
        if self.missing.len() >= t {
            return Err(Error::config("at least one timestamp must stay available"));
        }
        Ok(())
    }

    /// Phase of `class` as a fraction `(num, den)` of a full turn.
    fn phase_turns(&self, class: usize) -> (usize, usize) {
        const CODE: [usize; 4] = [0, 1, 2, 4];
        if self.classes <= 4 {
            (CODE[class], 6)
        } else {
            (class, self.classes)
        }
    }

    /// Phase of `class` in radians.
    pub fn phase(&self, class: usize) -> f64 {
        let (num, den) = self.phase_turns(class);
        std::f64::consts::TAU * num as f64 / den as f64
    }

    /// Noise-free value of channel `ch` for `class` at timestamp `j`.
    pub fn trajectory(&self, class: usize, j: usize, ch: usize) -> f64 {
        let (base, amp) = (BASE[ch % 3], AMPLITUDE[ch % 3]);
        if self.separable_timestamp == Some(j) {
            let pos = class as f64 / (self.classes - 1) as f64;
            return base + amp * (2.0 * pos - 1.0);
        }
        // angle j/t - num/den turns, reduced exactly so that equal angles
        // give bitwise equal values
        let (num, den) = self.phase_turns(class);
        let period = self.timestamps * den;
        let n = (j * den + period - (num * self.timestamps) % period) % period;
        let folded = n.min(period - n);
        base + amp * (std::f64::consts::TAU * folded as f64 / period as f64).cos()
    }

    fn background(&self, j: usize) -> f64 {
        let theta = std::f64::consts::TAU * j as f64 / self.timestamps as f64;
        BACKGROUND_LEVEL + 0.04 * theta.sin()
    }
}

/// Pixels covered by one ellipse.
struct Ellipse {
    pixels: Vec<(usize, usize)>,
}

fn rasterize(size: usize, cx: f64, cy: f64, rx: f64, ry: f64, angle: f64) -> Option<Ellipse> {
    let (s, c) = angle.sin_cos();
    let reach = rx.max(ry).ceil() as isize + 1;
    let mut pixels = Vec::new();
    for y in (cy as isize - reach)..=(cy as isize + reach) {
        for x in (cx as isize - reach)..=(cx as isize + reach) {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = (dx * c + dy * s) / rx;
            let v = (-dx * s + dy * c) / ry;
            if u * u + v * v <= 1.0 {
                if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
                    return None;
                }
                pixels.push((x as usize, y as usize));
            }
        }
    }
    (pixels.len() >= 3).then_some(Ellipse { pixels })
}

fn quantized(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() as u8) as f32 / 255.0
}

/// Generates a dataset in memory. Pixel values are already quantized to the
/// 8-bit grid used on disk, so writing and reloading is lossless.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.size;
    let mut labels = vec![BACKGROUND; n * n];
    let mut segments = vec![0u32; n * n];
    let mut occupied = vec![false; n * n];

    let total = cfg.classes * cfg.segments_per_class;
    for s in 0..total {
        let class = s % cfg.classes;
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let rx = rng.gen_range(cfg.radius.0..=cfg.radius.1);
            let ry = rng.gen_range(cfg.radius.0..=cfg.radius.1);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let cx = rng.gen_range(0.0..n as f64);
            let cy = rng.gen_range(0.0..n as f64);
            let Some(e) = rasterize(n, cx, cy, rx, ry, angle) else { continue };
            // keep a one-pixel gap to every existing crown
            let clear = e.pixels.iter().all(|&(x, y)| {
                (y.saturating_sub(1)..=(y + 1).min(n - 1))
                    .all(|yy| (x.saturating_sub(1)..=(x + 1).min(n - 1)).all(|xx| !occupied[yy * n + xx]))
            });
            if clear {
                placed = Some(e);
                break;
            }
        }
        let e = placed.ok_or_else(|| {
            Error::Generation(format!("could not place segment {} of {total} without overlap", s + 1))
        })?;
        for (x, y) in e.pixels {
            occupied[y * n + x] = true;
            labels[y * n + x] = class as u8;
            segments[y * n + x] = s as u32 + 1;
        }
    }

    let normal = if cfg.noise > 0.0 {
        Some(Normal::new(0.0, cfg.noise).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };
    let mut images: Vec<Tensor<f32>> = Vec::with_capacity(cfg.timestamps);
    for j in 0..cfg.timestamps {
        let mut data = vec![0.0f32; cfg.channels * n * n];
        for ch in 0..cfg.channels {
            let class_values: Vec<f64> = (0..cfg.classes).map(|c| cfg.trajectory(c, j, ch)).collect();
            let bg = cfg.background(j);
            for p in 0..n * n {
                let clean = match labels[p] {
                    BACKGROUND => bg,
                    c => class_values[c as usize],
                };
                let noisy = clean + normal.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                data[ch * n * n + p] = quantized(noisy);
            }
        }
        images.push(Tensor::from_vec(&[cfg.channels, n, n], data)?);
    }
    if let Some((src, dst)) = cfg.duplicate {
        images[dst] = images[src].clone();
    }

    let timestamps: Vec<TimestampImage> = images
        .into_iter()
        .enumerate()
        .map(|(j, img)| TimestampImage { label: format!("t{j:02}"), image: (!cfg.missing.contains(&j)).then_some(img) })
        .collect();
    let stack = TemporalImageStack::new(timestamps)?;
    let class_names: Vec<String> = (0..cfg.classes).map(|c| format!("class{c}")).collect();
    let label_map = LabelMap { height: n, width: n, labels, segments, class_names: class_names.clone() };
    label_map.validate()?;

    let manifest = Manifest {
        classes: class_names,
        palette: (0..cfg.classes).map(default_color).collect(),
        timestamps: stack
            .timestamps
            .iter()
            .map(|t| TimestampEntry {
                label: t.label.clone(),
                files: if t.available() { image_files(&t.label, cfg.channels) } else { Vec::new() },
                available: t.available(),
            })
            .collect(),
        labels: "labels.png".into(),
        segments: "segments.png".into(),
    };
    Ok(Dataset { manifest, root: PathBuf::new(), stack, labels: label_map })
}

/// File names holding a timestamp's channels: one RGB file per group of
/// three channels, or one grayscale file per channel otherwise.
fn image_files(label: &str, channels: usize) -> Vec<String> {
    if channels == 3 {
        vec![format!("{label}.png")]
    } else if channels % 3 == 0 {
        (0..channels / 3).map(|g| format!("{label}_{g}.png")).collect()
    } else {
        (0..channels).map(|c| format!("{label}_c{c}.png")).collect()
    }
}

/// Writes `dataset` (images, labels, segments and manifest) under `dir`.
/// Returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let stack = &dataset.stack;
    let (h, w) = (stack.height, stack.width);
    for (entry, ts) in dataset.manifest.timestamps.iter().zip(&stack.timestamps) {
        let Some(img) = &ts.image else { continue };
        let per_file = img.shape()[0] / entry.files.len().max(1);
        for (g, file) in entry.files.iter().enumerate() {
            let range = g * per_file..(g + 1) * per_file;
            write_png8(&dir.join(file), w, h, per_file, &quantize(img, range))?;
        }
    }
    write_png8(&dir.join(&dataset.manifest.labels), w, h, 1, &dataset.labels.labels)?;
    let segs: Vec<u16> = dataset
        .labels
        .segments
        .iter()
        .map(|&s| u16::try_from(s).map_err(|_| Error::data(format!("segment id {s} exceeds 16 bits"))))
        .collect::<Result<_>>()?;
    write_png16_gray(&dir.join(&dataset.manifest.segments), w, h, &segs)?;
    let path = dir.join("manifest.json");
    dataset.manifest.write(&path)?;
    Ok(path)
}

/// Generates a dataset and writes it under `dir`; returns the manifest path.
pub fn synth_generate(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    let dataset = generate(cfg)?;
    write_dataset(&dataset, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::load_dataset;

    fn segment_means(ds: &Dataset, j: usize, ch: usize) -> Vec<(usize, f64)> {
        let classes = ds.labels.segment_classes().unwrap();
        classes
            .iter()
            .map(|(&seg, &class)| {
                let px = ds.labels.samples_in(|s| s == seg);
                let sum: f64 = px.iter().map(|p| ds.stack.pixel(j, ch, p.x, p.y).unwrap() as f64).sum();
                (class, sum / px.len() as f64)
            })
            .collect()
    }

    #[test]
    fn noise_free_segments_follow_the_trajectory() {
        let cfg = SynthConfig { noise: 0.0, ..SynthConfig::default() };
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.labels.segment_classes().unwrap().len(), 48);
        for j in 0..12 {
            for ch in 0..3 {
                for (class, mean) in segment_means(&ds, j, ch) {
                    let want = cfg.trajectory(class, j, ch);
                    assert!((mean - want).abs() <= 0.5 / 255.0 + 1e-6, "j={j} ch={ch} class={class}");
                }
            }
        }
    }

    #[test]
    fn every_timestamp_has_a_colliding_pair() {
        let cfg = SynthConfig::default();
        for j in 0..12 {
            let colors: Vec<Vec<f64>> = (0..4).map(|c| (0..3).map(|ch| cfg.trajectory(c, j, ch)).collect()).collect();
            let collide = (0..4)
                .any(|a| (a + 1..4).any(|b| colors[a].iter().zip(&colors[b]).all(|(x, y)| (x - y).abs() < 1e-12)));
            assert!(collide, "timestamp {j} separates every class");
        }
        // the series as a whole separates every pair
        for a in 0..4 {
            for b in a + 1..4 {
                assert!((0..12).any(|j| (cfg.trajectory(a, j, 0) - cfg.trajectory(b, j, 0)).abs() > 0.1));
            }
        }
    }

    /// Nearest-centroid classification of individual pixels from the features
    /// returned by `feature`, trained and scored on the same pixels.
    fn nearest_centroid_accuracy(ds: &Dataset, classes: &[usize], feature: impl Fn(usize, usize) -> Vec<f64>) -> f64 {
        let samples: Vec<_> = ds.labels.annotated().into_iter().filter(|s| classes.contains(&s.label)).collect();
        let dim = feature(samples[0].x, samples[0].y).len();
        let mut centroids = vec![vec![0.0; dim]; classes.len()];
        let mut counts = vec![0usize; classes.len()];
        for s in &samples {
            let ci = classes.iter().position(|&c| c == s.label).unwrap();
            for (a, v) in centroids[ci].iter_mut().zip(feature(s.x, s.y)) {
                *a += v;
            }
            counts[ci] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let mut correct = vec![0usize; classes.len()];
        for s in &samples {
            let f = feature(s.x, s.y);
            let dist = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..classes.len()).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            if classes[best] == s.label {
                correct[best] += 1;
            }
        }
        let recalls: f64 = correct.iter().zip(&counts).map(|(&c, &n)| c as f64 / n as f64).sum();
        recalls / classes.len() as f64
    }

    #[test]
    fn opposite_phase_pair_needs_the_series() {
        // classes 2 and 3 have phases 2pi/3 and 4pi/3: identical at j = 0
        let cfg = SynthConfig { noise: 0.03, ..SynthConfig::default() };
        assert_eq!(cfg.trajectory(2, 0, 1), cfg.trajectory(3, 0, 1));
        let ds = generate(&cfg).unwrap();
        let single = nearest_centroid_accuracy(&ds, &[2, 3], |x, y| {
            (0..3).map(|c| ds.stack.pixel(0, c, x, y).unwrap() as f64).collect()
        });
        let series = nearest_centroid_accuracy(&ds, &[2, 3], |x, y| {
            (0..12)
                .flat_map(|j| (0..3).map(move |c| (j, c)))
                .map(|(j, c)| ds.stack.pixel(j, c, x, y).unwrap() as f64)
                .collect()
        });
        // chance plus a margin for noise-driven luck on a finite sample
        assert!(single <= 0.6, "single-timestamp accuracy {single}");
        assert_eq!(series, 1.0);
    }

    #[test]
    fn seeded_generation_is_byte_identical_and_round_trips() {
        let cfg = SynthConfig { missing: vec![3, 7], ..SynthConfig::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = synth_generate(&cfg, a.path()).unwrap();
        synth_generate(&cfg, b.path()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 10 + 3);
        for name in names {
            assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
        }
        let loaded = load_dataset(&ma).unwrap();
        let generated = generate(&cfg).unwrap();
        assert_eq!(loaded.stack.len(), 12);
        assert_eq!(loaded.stack.mask().count(), 10);
        for (l, g) in loaded.stack.timestamps.iter().zip(&generated.stack.timestamps) {
            assert_eq!(l.image, g.image);
        }
        assert_eq!(loaded.labels.labels, generated.labels.labels);
        assert_eq!(loaded.labels.segments, generated.labels.segments);
    }

    #[test]
    fn crowded_scene_fails_to_place() {
        let cfg = SynthConfig { size: 10, segments_per_class: 20, ..SynthConfig::default() };
        assert!(matches!(generate(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&SynthConfig { classes: 1, ..SynthConfig::default() }).is_err());
        assert!(generate(&SynthConfig { timestamps: 0, ..SynthConfig::default() }).is_err());
        assert!(generate(&SynthConfig { missing: vec![12], ..SynthConfig::default() }).is_err());
    }

    #[test]
    fn grouped_channels_are_split_across_files() {
        let cfg = SynthConfig { channels: 6, timestamps: 2, segments_per_class: 3, size: 32, ..SynthConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(&cfg, dir.path()).unwrap();
        let ds = load_dataset(&m).unwrap();
        assert_eq!(ds.manifest.timestamps[0].files.len(), 2);
        assert_eq!(ds.stack.channels, 6);
        assert_eq!(ds.stack.timestamps[1].image, generate(&cfg).unwrap().stack.timestamps[1].image);
    }
}
