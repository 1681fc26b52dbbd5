//! Images, label masks, datasets, and low-data split sampling.

mod shapes;
mod split;
mod voc;

pub use shapes::{generate_shapes_sample, ShapesDataset};
pub use split::{class_histogram, sample_low_data_split, DatasetSplit, Fraction, DEFAULT_MAX_RETRIES, DEFAULT_MIN_CLASS_PIXELS};
pub use voc::{write_voc_layout, VocDataset};

use crate::error::{Error, Result};

/// Mask value of unannotated / excluded pixels.
pub const IGNORE: u8 = 255;

pub const MIN_IMAGE_SIDE: usize = 16;

/// An RGB image with values in [0, 1], stored height × width × 3.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl DenseImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::Data(format!("image {height}x{width} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Data(format!("expected {} values, got {}", height * width * 3, pixels.len())));
        }
        if let Some(v) = pixels.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    /// Constructor for internal producers whose output is in range by construction.
    pub(crate) fn from_raw(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        debug_assert_eq!(pixels.len(), height * width * 3);
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Channel-first `f64` copy (3 × H × W) for the network.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c] as f64;
            }
        }
        out
    }

    pub fn mean_color(&self) -> [f32; 3] {
        let mut s = [0f64; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                s[c] += px[c] as f64;
            }
        }
        let n = (self.height * self.width) as f64;
        [(s[0] / n) as f32, (s[1] / n) as f32, (s[2] / n) as f32]
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.pixels.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let pixels = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self::new(img.height() as usize, img.width() as usize, pixels)
    }
}

/// Per-pixel class indices, with [`IGNORE`] marking excluded pixels.
/// Class 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    classes: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Self {
        assert_eq!(classes.len(), height * width, "mask size mismatch");
        Self { height, width, classes }
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    /// Checks every entry is a valid class or [`IGNORE`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.classes.iter().find(|&&v| v != IGNORE && v as usize >= num_classes) {
            Some(v) => Err(Error::Data(format!("mask value {v} is not a class index below {num_classes} nor {IGNORE}"))),
            None => Ok(()),
        }
    }

    pub fn valid_pixels(&self) -> usize {
        self.classes.iter().filter(|&&v| v != IGNORE).count()
    }

    /// Pixel count per class, ignoring [`IGNORE`].
    pub fn histogram(&self, num_classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; num_classes];
        for &v in &self.classes {
            if v != IGNORE && (v as usize) < num_classes {
                h[v as usize] += 1;
            }
        }
        h
    }

    pub fn image_level_labels(&self, num_classes: usize) -> ImageLevelLabels {
        let h = self.histogram(num_classes);
        ImageLevelLabels { present: h[1..].iter().map(|&n| n > 0).collect() }
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_raw(self.width as u32, self.height as u32, self.classes.clone()).expect("buffer size")
    }
}

/// Presence of each foreground class (index `c` is class `c + 1`).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageLevelLabels {
    pub present: Vec<bool>,
}

impl ImageLevelLabels {
    pub fn as_targets(&self) -> Vec<f64> {
        self.present.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()
    }
}

/// One annotated example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: DenseImage,
    pub mask: LabelMask,
}

/// Random-access segmentation dataset. Implementations are immutable once
/// constructed and may be read concurrently.
pub trait SegDataset: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn id(&self, index: usize) -> &str;

    fn get(&self, index: usize) -> Result<Sample>;

    fn num_classes(&self) -> usize;

    fn ids(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.id(i).to_string()).collect()
    }
}

/// A fully materialized dataset.
#[derive(Debug, Clone, Default)]
pub struct InMemoryDataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl InMemoryDataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Self {
        Self { samples, num_classes }
    }

    /// Loads every sample of another dataset.
    pub fn load(ds: &dyn SegDataset) -> Result<Self> {
        let samples = (0..ds.len()).map(|i| ds.get(i)).collect::<Result<_>>()?;
        Ok(Self { samples, num_classes: ds.num_classes() })
    }

    /// The subset with the given ids, in the order given.
    pub fn subset(&self, ids: &[String]) -> Result<Self> {
        let index: std::collections::HashMap<&str, &Sample> =
            self.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let samples = ids
            .iter()
            .map(|id| index.get(id.as_str()).map(|s| (*s).clone()).ok_or_else(|| Error::ingest(id, "unknown sample id")))
            .collect::<Result<_>>()?;
        Ok(Self { samples, num_classes: self.num_classes })
    }

    /// Mean RGB color over all pixels.
    pub fn mean_color(&self) -> [f32; 3] {
        if self.samples.is_empty() {
            return [0.5; 3];
        }
        let mut s = [0f64; 3];
        for smp in &self.samples {
            let m = smp.image.mean_color();
            for c in 0..3 {
                s[c] += m[c] as f64;
            }
        }
        let n = self.samples.len() as f64;
        [(s[0] / n) as f32, (s[1] / n) as f32, (s[2] / n) as f32]
    }
}

impl SegDataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.samples[index].id
    }

    fn get(&self, index: usize) -> Result<Sample> {
        Ok(self.samples[index].clone())
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}
