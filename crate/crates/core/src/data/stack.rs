use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::net::AvailabilityMask;
use crate::tensor::Tensor;

/// Label value of background / unannotated pixels.
pub const BACKGROUND: u8 = 255;

#[derive(Debug, Clone)]
pub struct TimestampImage {
    pub label: String,
    /// `[ch, H, W]` with values in `[0, 1]`; `None` when unavailable.
    pub image: Option<Tensor<f32>>,
}

impl TimestampImage {
    pub fn available(&self) -> bool {
        self.image.is_some()
    }
}

/// Co-registered images of one scene over time.
#[derive(Debug, Clone)]
pub struct TemporalImageStack {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub timestamps: Vec<TimestampImage>,
}

impl TemporalImageStack {
    pub fn new(timestamps: Vec<TimestampImage>) -> Result<Self> {
        let first = timestamps
            .iter()
            .find_map(|t| t.image.as_ref())
            .ok_or_else(|| Error::data("stack has no available timestamp"))?;
        let (c, h, w) = match *first.shape() {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::data(format!("timestamp image must be [ch, H, W], got {:?}", first.shape()))),
        };
        for t in &timestamps {
            if let Some(img) = &t.image {
                if img.shape() != [c, h, w] {
                    return Err(Error::data(format!(
                        "timestamp '{}' is {:?}, expected {:?}",
                        t.label,
                        img.shape(),
                        [c, h, w]
                    )));
                }
            }
        }
        Ok(TemporalImageStack { height: h, width: w, channels: c, timestamps })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn mask(&self) -> AvailabilityMask {
        AvailabilityMask::from_flags(self.timestamps.iter().map(|t| t.available()).collect())
    }

    pub fn image(&self, j: usize) -> Result<&Tensor<f32>> {
        self.timestamps
            .get(j)
            .ok_or_else(|| Error::input(format!("timestamp {j} out of range")))?
            .image
            .as_ref()
            .ok_or(Error::Unavailable(j))
    }

    /// Value of channel `c` at `(x, y)` in timestamp `j`.
    pub fn pixel(&self, j: usize, c: usize, x: usize, y: usize) -> Result<f32> {
        let img = self.image(j)?;
        Ok(img.data()[(c * self.height + y) * self.width + x])
    }

    /// Copy with every timestamp outside `mask` made unavailable.
    pub fn masked(&self, mask: &AvailabilityMask) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(Error::input(format!("mask of {} for a stack of {}", mask.len(), self.len())));
        }
        let timestamps = self
            .timestamps
            .iter()
            .zip(&mask.flags)
            .map(|(t, &keep)| TimestampImage {
                label: t.label.clone(),
                image: if keep { t.image.clone() } else { None },
            })
            .collect();
        TemporalImageStack::new(timestamps)
    }

    /// New stack made of the listed timestamps, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let timestamps = indices
            .iter()
            .map(|&j| {
                self.timestamps.get(j).cloned().ok_or_else(|| Error::input(format!("timestamp {j} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        TemporalImageStack::new(timestamps)
    }
}

/// Per-pixel class indices and segment (instance) ids.
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    /// Row-major class index per pixel; [`BACKGROUND`] marks unlabeled pixels.
    pub labels: Vec<u8>,
    /// Row-major segment id per pixel; 0 means no segment.
    pub segments: Vec<u32>,
    pub class_names: Vec<String>,
}

/// One annotated pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Sample {
    pub x: usize,
    pub y: usize,
    pub label: usize,
}

impl LabelMap {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.labels.len() != n || self.segments.len() != n {
            return Err(Error::data("label/segment maps do not match the declared size"));
        }
        let k = self.num_classes();
        for (i, (&l, &s)) in self.labels.iter().zip(&self.segments).enumerate() {
            if l == BACKGROUND {
                continue;
            }
            if l as usize >= k {
                return Err(Error::data(format!(
                    "unknown class index {l} at pixel ({}, {}); {k} classes declared",
                    i % self.width,
                    i / self.width
                )));
            }
            if s == 0 {
                return Err(Error::data(format!(
                    "labeled pixel ({}, {}) has no segment id",
                    i % self.width,
                    i / self.width
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn segment(&self, x: usize, y: usize) -> u32 {
        self.segments[y * self.width + x]
    }

    /// Every annotated pixel in row-major order.
    pub fn annotated(&self) -> Vec<Sample> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != BACKGROUND)
            .map(|(i, &l)| Sample { x: i % self.width, y: i / self.width, label: l as usize })
            .collect()
    }

    /// Class of every segment, taken from its first annotated pixel.
    pub fn segment_classes(&self) -> Result<BTreeMap<u32, usize>> {
        let mut out = BTreeMap::new();
        for (&l, &s) in self.labels.iter().zip(&self.segments) {
            if l == BACKGROUND || s == 0 {
                continue;
            }
            match out.insert(s, l as usize) {
                Some(prev) if prev != l as usize => {
                    return Err(Error::data(format!("segment {s} mixes classes {prev} and {l}")));
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Annotated pixels whose segment satisfies `keep`.
    pub fn samples_in(&self, keep: impl Fn(u32) -> bool) -> Vec<Sample> {
        self.annotated().into_iter().filter(|s| keep(self.segment(s.x, s.y))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(c: usize, h: usize, w: usize, v: f32) -> Option<Tensor<f32>> {
        Some(Tensor::filled(&[c, h, w], v))
    }

    #[test]
    fn mismatched_images_are_rejected() {
        let ts = vec![
            TimestampImage { label: "a".into(), image: img(3, 4, 4, 0.0) },
            TimestampImage { label: "b".into(), image: img(3, 5, 4, 0.0) },
        ];
        assert!(matches!(TemporalImageStack::new(ts), Err(Error::Data(_))));
    }

    #[test]
    fn unavailable_access_is_an_error() {
        let ts = vec![
            TimestampImage { label: "a".into(), image: img(1, 2, 2, 0.5) },
            TimestampImage { label: "b".into(), image: None },
        ];
        let stack = TemporalImageStack::new(ts).unwrap();
        assert_eq!(stack.mask().flags, vec![true, false]);
        assert!(matches!(stack.image(1), Err(Error::Unavailable(1))));
        assert_eq!(stack.pixel(0, 0, 1, 1).unwrap(), 0.5);
    }

    #[test]
    fn label_map_validation() {
        let mut m = LabelMap {
            height: 1,
            width: 3,
            labels: vec![0, BACKGROUND, 1],
            segments: vec![1, 0, 2],
            class_names: vec!["a".into(), "b".into()],
        };
        m.validate().unwrap();
        assert_eq!(m.annotated().len(), 2);
        m.labels[2] = 2;
        assert!(m.validate().is_err());
        m.labels[2] = 1;
        m.segments[2] = 0;
        assert!(m.validate().is_err());
    }
}
