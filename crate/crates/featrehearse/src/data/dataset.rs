//! In-memory labeled image collection.

use crate::error::{Error, Result};

/// Channel-major image geometry. Pixels are stored CHW, one byte per value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn pixel_count(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Read-only view of an image collection. The trainer consumes images only
/// through this trait, which makes it possible to interpose access counters
/// in tests and alternative storage backends.
pub trait ImageSource {
    fn len(&self) -> usize;
    fn shape(&self) -> ImageShape;
    fn label(&self, index: usize) -> u32;
    fn class_count(&self) -> u32;
    /// Copies image `index` into `out` (CHW order, `shape().pixel_count()` bytes).
    fn read_image(&self, index: usize, out: &mut [u8]);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Owned dataset: contiguous CHW u8 pixels plus one label per image.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    shape: ImageShape,
    pixels: Vec<u8>,
    labels: Vec<u32>,
    class_count: u32,
}

impl LabeledDataset {
    pub fn new(
        shape: ImageShape,
        pixels: Vec<u8>,
        labels: Vec<u32>,
        class_count: u32,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset("dataset has no examples".into()));
        }
        let expect = labels.len() * shape.pixel_count();
        if pixels.len() != expect {
            return Err(Error::Consistency(format!(
                "pixel buffer holds {} bytes but {} examples of shape {}x{}x{} need {}",
                pixels.len(),
                labels.len(),
                shape.channels,
                shape.height,
                shape.width,
                expect
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Consistency(format!(
                "label {bad} outside class range 0..{class_count}"
            )));
        }
        Ok(Self {
            shape,
            pixels,
            labels,
            class_count,
        })
    }

    pub fn image(&self, index: usize) -> &[u8] {
        let n = self.shape.pixel_count();
        &self.pixels[index * n..(index + 1) * n]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// New dataset containing the given rows, in the given order.
    pub fn subset(&self, indices: &[u32]) -> Result<Self> {
        let n = self.shape.pixel_count();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i as usize));
            labels.push(self.labels[i as usize]);
        }
        Self::new(self.shape, pixels, labels, self.class_count)
    }
}

impl ImageSource for LabeledDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }
    fn shape(&self) -> ImageShape {
        self.shape
    }
    fn label(&self, index: usize) -> u32 {
        self.labels[index]
    }
    fn class_count(&self) -> u32 {
        self.class_count
    }
    fn read_image(&self, index: usize, out: &mut [u8]) {
        out.copy_from_slice(self.image(index));
    }
}

impl<S: ImageSource + ?Sized> ImageSource for &S {
    fn len(&self) -> usize {
        (**self).len()
    }
    fn shape(&self) -> ImageShape {
        (**self).shape()
    }
    fn label(&self, index: usize) -> u32 {
        (**self).label(index)
    }
    fn class_count(&self) -> u32 {
        (**self).class_count()
    }
    fn read_image(&self, index: usize, out: &mut [u8]) {
        (**self).read_image(index, out)
    }
}
