//! On-disk snapshots of the rehearsal stores.
//!
//! `FRMEM1` holds the descriptor memory: little-endian, per-class blocks of
//! adapt counts, f32 vectors and (optionally) provenance rows. `FRIMG1`
//! holds raw exemplar images for the hybrid configuration. Both formats are
//! versioned, length-checked to the byte and written atomically.

use super::exemplars::{ExemplarImage, ImageExemplarStore};
use super::store::{FeatureMemory, StoredDescriptor};
use crate::binio::{atomic_write, Reader};
use crate::data::ImageShape;
use crate::error::{Error, Result};
use std::path::Path;

const MEM_MAGIC: &[u8] = b"FRMEM1";
const IMG_MAGIC: &[u8] = b"FRIMG1";
const VERSION: u16 = 1;
const FLAG_PROVENANCE: u8 = 1;

pub fn write_memory_snapshot(memory: &FeatureMemory, path: &Path) -> Result<()> {
    // Provenance is all-or-nothing on disk: the flag is set only when every
    // descriptor carries a source row.
    let has_provenance = memory.total() > 0
        && memory
            .iter()
            .all(|(_, descs)| descs.iter().all(|d| d.source_index.is_some()));
    atomic_write(path, |w| {
        w.magic(MEM_MAGIC)?;
        w.u16(VERSION)?;
        w.u8(if has_provenance { FLAG_PROVENANCE } else { 0 })?;
        w.u8(0)?; // reserved
        w.u32(memory.dim() as u32)?;
        w.u32(memory.per_class_budget() as u32)?;
        w.u32(memory.class_count() as u32)?;
        for (class, descs) in memory.iter() {
            w.u32(class)?;
            w.u32(descs.len() as u32)?;
            for d in descs {
                w.u32(d.adapt_count)?;
            }
            for d in descs {
                w.f32_slice(&d.vector)?;
            }
            if has_provenance {
                for d in descs {
                    w.i64(d.source_index.map_or(-1, |s| s as i64))?;
                }
            }
        }
        Ok(())
    })
}

pub fn read_memory_snapshot(path: &Path) -> Result<FeatureMemory> {
    let mut r = Reader::open(path)?;
    r.expect_magic(MEM_MAGIC)?;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported memory snapshot version {version}",
            path.display()
        )));
    }
    let flags = r.u8("flags")?;
    r.u8("reserved")?;
    let has_provenance = flags & FLAG_PROVENANCE != 0;
    let dim = r.u32("dim")? as usize;
    let budget = r.u32("budget")? as usize;
    let class_count = r.u32("class count")?;
    let mut memory = FeatureMemory::new(dim, budget);
    let mut last_class: Option<u32> = None;
    for _ in 0..class_count {
        let class = r.u32("class id")?;
        if let Some(prev) = last_class {
            if class <= prev {
                return Err(Error::Format(format!(
                    "{}: class ids out of order ({prev} then {class})",
                    path.display()
                )));
            }
        }
        last_class = Some(class);
        let count = r.u32("descriptor count")? as usize;
        let mut adapt = Vec::with_capacity(count);
        for _ in 0..count {
            adapt.push(r.u32("adapt count")?);
        }
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            vectors.push(r.f32_vec(dim, "descriptor vector")?);
        }
        let mut provenance = vec![None; count];
        if has_provenance {
            for p in provenance.iter_mut() {
                let raw = r.i64("provenance row")?;
                *p = if raw < 0 { None } else { Some(raw as u32) };
            }
        }
        let descs: Vec<StoredDescriptor> = adapt
            .into_iter()
            .zip(vectors)
            .zip(provenance)
            .map(|((adapt_count, vector), source_index)| StoredDescriptor {
                vector,
                adapt_count,
                source_index,
            })
            .collect();
        memory.insert_class(class, descs)?;
    }
    r.expect_eof()?;
    Ok(memory)
}

pub fn write_exemplar_snapshot(store: &ImageExemplarStore, path: &Path) -> Result<()> {
    let shape = store.shape();
    atomic_write(path, |w| {
        w.magic(IMG_MAGIC)?;
        w.u16(VERSION)?;
        w.u16(0)?; // reserved
        w.u32(shape.channels as u32)?;
        w.u32(shape.height as u32)?;
        w.u32(shape.width as u32)?;
        w.u32(store.per_class_budget() as u32)?;
        w.u32(store.class_ids().len() as u32)?;
        for (class, images) in store.iter() {
            w.u32(class)?;
            w.u32(images.len() as u32)?;
            for img in images {
                w.u32(img.source_index)?;
                w.bytes(&img.pixels)?;
            }
        }
        Ok(())
    })
}

pub fn read_exemplar_snapshot(path: &Path) -> Result<ImageExemplarStore> {
    let mut r = Reader::open(path)?;
    r.expect_magic(IMG_MAGIC)?;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported exemplar snapshot version {version}",
            path.display()
        )));
    }
    r.u16("reserved")?;
    let shape = ImageShape {
        channels: r.u32("channels")? as usize,
        height: r.u32("height")? as usize,
        width: r.u32("width")? as usize,
    };
    let budget = r.u32("budget")? as usize;
    let class_count = r.u32("class count")?;
    let mut store = ImageExemplarStore::new(shape, budget);
    for _ in 0..class_count {
        let class = r.u32("class id")?;
        let count = r.u32("image count")? as usize;
        let mut images = Vec::with_capacity(count);
        for _ in 0..count {
            let source_index = r.u32("source index")?;
            let pixels = r.bytes(shape.pixel_count(), "image pixels")?;
            images.push(ExemplarImage {
                pixels,
                source_index,
            });
        }
        store.insert_class(class, images)?;
    }
    r.expect_eof()?;
    Ok(store)
}
