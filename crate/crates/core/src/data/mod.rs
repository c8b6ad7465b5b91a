//! Image ingestion, multi-crop view generation, and the synthetic
//! lesion-style dataset used for desk-scale experiments.

mod augment;
mod ppm;
mod synth;

pub use augment::{make_views, random_resized_crop, ViewBatch, ViewConfig};
pub use ppm::{load_ppm, save_pgm, save_ppm};
pub use synth::{synth_dataset, synth_single_blob, SynthSpec};

use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// RGB image with row-major pixels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `pixels[(y * width + x) * 3 + c]`, c = R, G, B.
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, DataError> {
        if height == 0 || width == 0 {
            return Err(DataError::InvalidArgument(format!(
                "image dims must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(DataError::InvalidArgument(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if !pixels.iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(DataError::InvalidArgument(
                "pixel values must lie in [0, 1]".into(),
            ));
        }
        Ok(Image { height, width, pixels })
    }

    /// Solid-color image.
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self, DataError> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Image::new(height, width, pixels)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Labeled image paths, class-per-directory layout, lexicographic class order.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub items: Vec<(PathBuf, usize)>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    /// Scan `root/<class_name>/*.ppm`. Class indices follow lexicographic
    /// directory order and are dense in [0, C).
    pub fn scan(root: &Path) -> Result<Self, DataError> {
        let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        if class_dirs.is_empty() {
            return Err(DataError::InvalidDataset(format!(
                "no class directories under {}",
                root.display()
            )));
        }
        let mut items = Vec::new();
        let mut class_names = Vec::new();
        for (idx, dir) in class_dirs.iter().enumerate() {
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(DataError::InvalidDataset(format!(
                    "class '{name}' has zero samples"
                )));
            }
            items.extend(files.into_iter().map(|f| (f, idx)));
            class_names.push(name);
        }
        Ok(LabeledDataset { items, class_names })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}
