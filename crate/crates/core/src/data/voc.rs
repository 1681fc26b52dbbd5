//! VOC-style directory layout:
//!
//! ```text
//! root/images/<stem>.png|jpg
//! root/masks/<stem>.png        single-channel class indices, 255 = ignore
//! root/splits/{train,val}.txt  one stem per line
//! root/labels.json             optional, stem -> image-level label vector
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DenseImage, LabelMask, Sample, SegDataset};
use crate::error::{Error, Result};

/// A lazily loaded split of a VOC-style directory.
#[derive(Debug, Clone)]
pub struct VocDataset {
    entries: Vec<(String, PathBuf, PathBuf)>,
    num_classes: usize,
}

fn read_split(root: &Path, split: &str) -> Result<Vec<String>> {
    let path = root.join("splits").join(format!("{split}.txt"));
    let text = fs::read_to_string(&path).map_err(|e| Error::ingest(path.display().to_string(), e.to_string()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

impl VocDataset {
    /// Indexes `root` for `split`. Every listed stem must have an image and
    /// a mask; pixel data is read on access.
    pub fn open(root: impl AsRef<Path>, split: &str, num_classes: usize) -> Result<Self> {
        let root = root.as_ref();
        let mut entries = Vec::new();
        for stem in read_split(root, split)? {
            let image = ["png", "jpg", "jpeg"]
                .iter()
                .map(|ext| root.join("images").join(format!("{stem}.{ext}")))
                .find(|p| p.is_file())
                .ok_or_else(|| Error::ingest(&stem, "no image file"))?;
            let mask = root.join("masks").join(format!("{stem}.png"));
            if !mask.is_file() {
                return Err(Error::ingest(&stem, "no mask file"));
            }
            entries.push((stem, image, mask));
        }
        Ok(Self { entries, num_classes })
    }
}

impl SegDataset for VocDataset {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    fn get(&self, index: usize) -> Result<Sample> {
        let (stem, image_path, mask_path) = &self.entries[index];
        let rgb = image::open(image_path).map_err(|e| Error::ingest(stem, e.to_string()))?.to_rgb8();
        let image = DenseImage::from_rgb8(&rgb).map_err(|e| Error::ingest(stem, e.to_string()))?;
        let gray = image::open(mask_path).map_err(|e| Error::ingest(stem, e.to_string()))?.to_luma8();
        if gray.dimensions() != rgb.dimensions() {
            return Err(Error::ingest(stem, "mask and image sizes differ"));
        }
        let mask = LabelMask::new(gray.height() as usize, gray.width() as usize, gray.into_raw());
        mask.validate(self.num_classes).map_err(|e| Error::Data(format!("{stem}: {e}")))?;
        Ok(Sample { id: stem.clone(), image, mask })
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Writes samples in the VOC-style layout, including `labels.json`.
pub fn write_voc_layout(root: impl AsRef<Path>, train: &[Sample], val: &[Sample], num_classes: usize) -> Result<()> {
    let root = root.as_ref();
    for dir in ["images", "masks", "splits"] {
        fs::create_dir_all(root.join(dir))?;
    }
    let mut labels = BTreeMap::new();
    for (split, samples) in [("train", train), ("val", val)] {
        let mut list = String::new();
        for s in samples {
            s.image.to_rgb8().save(root.join("images").join(format!("{}.png", s.id)))?;
            s.mask.to_luma8().save(root.join("masks").join(format!("{}.png", s.id)))?;
            labels.insert(s.id.clone(), s.mask.image_level_labels(num_classes).present);
            list.push_str(&s.id);
            list.push('\n');
        }
        fs::write(root.join("splits").join(format!("{split}.txt")), list)?;
    }
    fs::write(root.join("labels.json"), serde_json::to_string_pretty(&labels)?)?;
    Ok(())
}
