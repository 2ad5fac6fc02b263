//! Group directories: `images/` and `masks/` with matching file stems.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{load_image, load_mask, BinaryMask, RasterImage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupManifest {
    pub name: String,
    pub entries: Vec<GroupEntry>,
    /// Indices into `entries` that get attacked.
    pub targets: Vec<usize>,
}

/// A manifest with its pixels loaded.
#[derive(Debug, Clone)]
pub struct LoadedGroup {
    pub stems: Vec<String>,
    pub images: Vec<RasterImage>,
    pub masks: Vec<BinaryMask>,
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let supported = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"));
        if !path.is_file() || !supported {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned);
        let Some(stem) = stem else {
            return Err(Error::Group(format!("non-UTF-8 file name {}", path.display())));
        };
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Group(format!(
                "stem `{stem}` appears twice: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Images under `dir/images`, sorted by stem. Masks are not required.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let images = stems(&dir.as_ref().join("images"))?;
    if images.is_empty() {
        return Err(Error::Group(format!("no images in {}", dir.as_ref().join("images").display())));
    }
    Ok(images.into_iter().collect())
}

/// Pairs `dir/images/*` with `dir/masks/*` by stem, sorted by stem. Every
/// image is a target. Shapes are checked by loading each pair.
pub fn ingest_group(dir: impl AsRef<Path>) -> Result<GroupManifest> {
    let dir = dir.as_ref();
    let images = stems(&dir.join("images"))?;
    let mut masks = stems(&dir.join("masks"))?;
    if images.is_empty() {
        return Err(Error::Group(format!("no images in {}", dir.join("images").display())));
    }
    let mut entries = Vec::with_capacity(images.len());
    for (stem, image) in images {
        let Some(mask) = masks.remove(&stem) else {
            return Err(Error::Group(format!("image `{stem}` has no mask")));
        };
        entries.push(GroupEntry { stem, image, mask });
    }
    if let Some(stem) = masks.keys().next() {
        return Err(Error::Group(format!("mask `{stem}` has no image")));
    }
    let name = dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("group")
        .to_string();
    let manifest = GroupManifest { name, targets: (0..entries.len()).collect(), entries };
    manifest.load()?;
    Ok(manifest)
}

impl GroupManifest {
    pub fn with_targets(mut self, targets: Vec<usize>) -> Result<Self> {
        if let Some(&t) = targets.iter().find(|&&t| t >= self.entries.len()) {
            return Err(Error::config("targets", format!("index {t} out of range for {} images", self.entries.len())));
        }
        self.targets = targets;
        Ok(self)
    }

    pub fn load(&self) -> Result<LoadedGroup> {
        let mut group = LoadedGroup { stems: vec![], images: vec![], masks: vec![] };
        for e in &self.entries {
            let ctx = |err: Error| err.context(format!("image `{}`", e.stem));
            let img = load_image(&e.image).map_err(ctx)?;
            let mask = load_mask(&e.mask).map_err(ctx)?;
            if !mask.same_shape(img.height(), img.width()) {
                return Err(Error::ShapeMismatch(format!(
                    "image `{}` is {}x{} but its mask is {}x{}",
                    e.stem,
                    img.height(),
                    img.width(),
                    mask.height(),
                    mask.width()
                )));
            }
            group.stems.push(e.stem.clone());
            group.images.push(img);
            group.masks.push(mask);
        }
        Ok(group)
    }
}
