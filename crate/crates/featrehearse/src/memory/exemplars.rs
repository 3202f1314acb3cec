//! Optional raw-image exemplar store for the hybrid configuration.

use crate::data::ImageShape;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarImage {
    /// CHW pixels, same layout as the source dataset.
    pub pixels: Vec<u8>,
    /// Row in the originating task's training set.
    pub source_index: u32,
}

/// Class-keyed store of a small number of raw images per class.
#[derive(Debug, Clone)]
pub struct ImageExemplarStore {
    shape: ImageShape,
    per_class_budget: usize,
    classes: BTreeMap<u32, Vec<ExemplarImage>>,
}

impl ImageExemplarStore {
    pub fn new(shape: ImageShape, per_class_budget: usize) -> Self {
        Self {
            shape,
            per_class_budget,
            classes: BTreeMap::new(),
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }
    pub fn per_class_budget(&self) -> usize {
        self.per_class_budget
    }
    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.keys().copied().collect()
    }
    pub fn count(&self, class: u32) -> usize {
        self.classes.get(&class).map_or(0, Vec::len)
    }
    pub fn total(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }
    pub fn images(&self, class: u32) -> Option<&[ExemplarImage]> {
        self.classes.get(&class).map(Vec::as_slice)
    }
    pub fn iter(&self) -> impl Iterator<Item = (u32, &[ExemplarImage])> {
        self.classes.iter().map(|(&c, v)| (c, v.as_slice()))
    }

    pub fn insert_class(&mut self, class: u32, images: Vec<ExemplarImage>) -> Result<()> {
        if self.classes.contains_key(&class) {
            return Err(Error::Consistency(format!(
                "class {class} already has stored exemplar images"
            )));
        }
        if images.len() > self.per_class_budget {
            return Err(Error::Consistency(format!(
                "class {class}: {} exemplar images exceed the per-class budget {}",
                images.len(),
                self.per_class_budget
            )));
        }
        let want = self.shape.pixel_count();
        if let Some(bad) = images.iter().find(|i| i.pixels.len() != want) {
            return Err(Error::Dimension(format!(
                "class {class}: exemplar image holds {} bytes, shape needs {want}",
                bad.pixels.len()
            )));
        }
        self.classes.insert(class, images);
        Ok(())
    }
}
