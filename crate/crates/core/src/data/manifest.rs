//! JSON manifest and PNG storage of a dataset.
//!
//! ```json
//! { "classes": ["a", "b"], "palette": [[255, 0, 0], [0, 255, 0]],
//!   "timestamps": [ { "label": "2016-01", "files": ["t00.png"], "available": true } ],
//!   "labels": "labels.png", "segments": "segments.png" }
//! ```
//!
//! Paths are relative to the manifest's directory. A timestamp listing
//! several files stacks their channels in the listed order. Labels are an
//! 8-bit grayscale PNG with 255 for background; segment ids are a grayscale
//! PNG (8 or 16 bit) with 0 for "no segment".

use std::collections::HashSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::stack::{LabelMap, TemporalImageStack, TimestampImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestampEntry {
    pub label: String,
    #[serde(default)]
    pub files: Vec<String>,
    #[serde(default = "default_true")]
    pub available: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    #[serde(default)]
    pub palette: Vec<[u8; 3]>,
    pub timestamps: Vec<TimestampEntry>,
    pub labels: String,
    pub segments: String,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file =
            File::open(path).map_err(|e| Error::data(format!("cannot open manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_reader(file)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    /// Palette color for each class, falling back to a fixed table.
    pub fn class_colors(&self) -> Vec<[u8; 3]> {
        (0..self.classes.len()).map(|c| self.palette.get(c).copied().unwrap_or_else(|| default_color(c))).collect()
    }
}

pub fn default_color(class: usize) -> [u8; 3] {
    const TABLE: [[u8; 3]; 8] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
    ];
    TABLE[class % TABLE.len()]
}

/// A loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
    pub stack: TemporalImageStack,
    pub labels: LabelMap,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }
}

/// Decoded PNG with interleaved samples widened to `u16`.
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub bit_depth: u8,
    pub samples: Vec<u16>,
}

pub fn read_png(path: &Path) -> Result<RawImage> {
    let file = File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    let channels = info.color_type.samples();
    let (width, height) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let samples = match info.bit_depth {
        png::BitDepth::Eight => bytes.iter().map(|&b| b as u16).collect(),
        png::BitDepth::Sixteen => bytes.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
        other => return Err(Error::data(format!("{}: unsupported bit depth {other:?}", path.display()))),
    };
    let bit_depth = if info.bit_depth == png::BitDepth::Sixteen { 16 } else { 8 };
    Ok(RawImage { width, height, channels, bit_depth, samples })
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}

/// Writes interleaved 8-bit samples with 1 (gray) or 3 (RGB) channels.
pub fn write_png8(path: &Path, width: usize, height: usize, channels: usize, data: &[u8]) -> Result<()> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::input(format!("cannot write a {c}-channel PNG"))),
    };
    write_png(path, width, height, color, png::BitDepth::Eight, data)
}

pub fn write_png16_gray(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

/// Loads an 8-bit image as a planar `[ch, H, W]` tensor scaled to `[0, 1]`.
fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let raw = read_png(path)?;
    if raw.bit_depth != 8 {
        return Err(Error::data(format!("{}: expected an 8-bit image", path.display())));
    }
    let (c, h, w) = (raw.channels, raw.height, raw.width);
    let mut data = vec![0.0f32; c * h * w];
    for (i, &s) in raw.samples.iter().enumerate() {
        let (pix, ch) = (i / c, i % c);
        data[ch * h * w + pix] = s as f32 / 255.0;
    }
    Tensor::from_vec(&[c, h, w], data)
}

/// Reads the manifest and every file it references.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut seen = HashSet::new();
    let mut timestamps = Vec::with_capacity(manifest.timestamps.len());
    for entry in &manifest.timestamps {
        if !seen.insert(entry.label.as_str()) {
            return Err(Error::data(format!("duplicate timestamp label '{}'", entry.label)));
        }
        let image = if entry.available && !entry.files.is_empty() {
            let parts = entry.files.iter().map(|f| load_image(&root.join(f))).collect::<Result<Vec<_>>>()?;
            Some(stack_channels(&parts, &entry.label)?)
        } else {
            None
        };
        timestamps.push(TimestampImage { label: entry.label.clone(), image });
    }
    let stack = TemporalImageStack::new(timestamps)?;

    let labels_raw = read_png(&root.join(&manifest.labels))?;
    let segments_raw = read_png(&root.join(&manifest.segments))?;
    for (what, raw) in [("labels", &labels_raw), ("segments", &segments_raw)] {
        if raw.channels != 1 {
            return Err(Error::data(format!("{what} image must be single-channel")));
        }
        if (raw.height, raw.width) != (stack.height, stack.width) {
            return Err(Error::data(format!(
                "{what} image is {}x{}, images are {}x{}",
                raw.width, raw.height, stack.width, stack.height
            )));
        }
    }
    if labels_raw.bit_depth != 8 {
        return Err(Error::data("labels image must be 8-bit"));
    }
    let labels = LabelMap {
        height: stack.height,
        width: stack.width,
        labels: labels_raw.samples.iter().map(|&v| v as u8).collect(),
        segments: segments_raw.samples.iter().map(|&v| v as u32).collect(),
        class_names: manifest.classes.clone(),
    };
    labels.validate()?;
    Ok(Dataset { manifest, root, stack, labels })
}

fn stack_channels(parts: &[Tensor<f32>], label: &str) -> Result<Tensor<f32>> {
    let (h, w) = (parts[0].shape()[1], parts[0].shape()[2]);
    let mut data = Vec::new();
    let mut channels = 0;
    for p in parts {
        if p.shape()[1..] != [h, w] {
            return Err(Error::data(format!("timestamp '{label}' mixes image sizes")));
        }
        channels += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[channels, h, w], data)
}

/// Quantizes a `[ch, H, W]` image in `[0, 1]` to interleaved 8-bit samples.
pub fn quantize(image: &Tensor<f32>, channels: std::ops::Range<usize>) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut out = Vec::with_capacity(plane * channels.len());
    for p in 0..plane {
        for c in channels.clone() {
            let v = image.data()[c * plane + p];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}
