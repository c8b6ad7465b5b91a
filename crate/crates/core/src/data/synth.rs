//! Synthetic leaf-style dataset: green backgrounds with lesion-like blobs
//! whose count, radius, and hue drift are class-determined. Classes are
//! linearly separable in simple color-moment statistics by construction.

use super::{save_ppm, DataError, Image, LabeledDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const LEAF_GREEN: [f64; 3] = [0.15, 0.55, 0.10];
const LESION_BASE: [f64; 3] = [0.45, 0.26, 0.05];
const LESION_DRIFT: [f64; 3] = [0.62, 0.38, 0.12];

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// Generate the dataset under `root/<class_name>/` as binary PPM files.
/// Class c carries c+1 lesion blobs; radius and hue-drift direction vary by
/// class. Byte-identical output for identical specs.
pub fn synth_dataset(root: &Path, spec: &SynthSpec) -> Result<LabeledDataset, DataError> {
    if spec.classes < 2 {
        return Err(DataError::InvalidArgument(format!(
            "need at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.per_class < 1 {
        return Err(DataError::InvalidArgument("need per_class >= 1".into()));
    }
    if spec.image_size < 16 {
        return Err(DataError::InvalidArgument(format!(
            "image size must be >= 16, got {}",
            spec.image_size
        )));
    }
    std::fs::create_dir_all(root)?;
    let mut items = Vec::new();
    let mut class_names = Vec::new();
    for c in 0..spec.classes {
        let class_name = format!("class_{c:02}");
        let dir = root.join(&class_name);
        std::fs::create_dir_all(&dir)?;
        for i in 0..spec.per_class {
            // One stream per (class, index) pair: parallel generation could
            // never reorder results.
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((c * spec.per_class + i + 1) as u64);
            let img = synth_image(spec.image_size, c, &mut rng);
            let path = dir.join(format!("img_{i:04}.ppm"));
            save_ppm(&img, &path)?;
            items.push((path, c));
        }
        class_names.push(class_name);
    }
    Ok(LabeledDataset { items, class_names })
}

fn synth_image(size: usize, class: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut img = leaf_background(size, rng);
    // Hue drift axis: lesion color shifts from base toward drift along a
    // randomly oriented direction across the leaf.
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (axis_y, axis_x) = (angle.sin(), angle.cos());
    let blobs = class + 1;
    // Blobs large enough that random local crops usually include lesion
    // tissue; lesion area stays strongly monotone in the class index.
    let radius_base = size as f64 * (0.13 + 0.02 * class as f64);
    let mut placed: Vec<(f64, f64, f64)> = Vec::with_capacity(blobs);
    for _ in 0..blobs {
        let r = radius_base * rng.random_range(0.94..1.06);
        let margin = r.ceil() as usize + 1;
        // Non-overlapping placement keeps the lesion area fraction of class c
        // pinned near (c+1)·πr², which is what separates the classes.
        let (mut cy, mut cx) = (0.0, 0.0);
        for _ in 0..64 {
            cy = rng.random_range(margin..size - margin) as f64;
            cx = rng.random_range(margin..size - margin) as f64;
            let clear = placed
                .iter()
                .all(|&(py, px, pr)| ((cy - py).powi(2) + (cx - px).powi(2)).sqrt() > r + pr + 1.0);
            if clear {
                break;
            }
        }
        placed.push((cy, cx, r));
        // Position along the drift axis in [0, 1] picks the blob color.
        let t = ((cy - size as f64 / 2.0) * axis_y + (cx - size as f64 / 2.0) * axis_x)
            / size as f64
            + 0.5;
        let t = t.clamp(0.0, 1.0);
        let color = [
            LESION_BASE[0] + t * (LESION_DRIFT[0] - LESION_BASE[0]),
            LESION_BASE[1] + t * (LESION_DRIFT[1] - LESION_BASE[1]),
            LESION_BASE[2] + t * (LESION_DRIFT[2] - LESION_BASE[2]),
        ];
        stamp_blob(&mut img, cy, cx, r, color);
    }
    img
}

fn leaf_background(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut pixels = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        for c in 0..3 {
            let noise = rng.random_range(-0.03..0.03);
            pixels.push((LEAF_GREEN[c] + noise).clamp(0.0, 1.0));
        }
    }
    Image { height: size, width: size, pixels }
}

fn stamp_blob(img: &mut Image, cy: f64, cx: f64, radius: f64, color: [f64; 3]) {
    let y_lo = (cy - radius - 1.0).floor().max(0.0) as usize;
    let y_hi = ((cy + radius + 1.0).ceil() as usize).min(img.height - 1);
    let x_lo = (cx - radius - 1.0).floor().max(0.0) as usize;
    let x_hi = ((cx + radius + 1.0).ceil() as usize).min(img.width - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dist = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            // Soft one-pixel edge.
            let alpha = (radius - dist + 1.0).clamp(0.0, 1.0);
            if alpha > 0.0 {
                let p = img.pixel(y, x);
                img.set_pixel(
                    y,
                    x,
                    [
                        (p[0] * (1.0 - alpha) + color[0] * alpha).clamp(0.0, 1.0),
                        (p[1] * (1.0 - alpha) + color[1] * alpha).clamp(0.0, 1.0),
                        (p[2] * (1.0 - alpha) + color[2] * alpha).clamp(0.0, 1.0),
                    ],
                );
            }
        }
    }
}

/// One high-contrast blob on a clean background, for saliency tests.
/// Returns the image and the blob center (y, x).
pub fn synth_single_blob(
    size: usize,
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, (usize, usize)), DataError> {
    if size < 16 {
        return Err(DataError::InvalidArgument(format!(
            "image size must be >= 16, got {size}"
        )));
    }
    let mut img = Image::filled(size, size, LEAF_GREEN)?;
    let margin = radius.ceil() as usize + 2;
    let cy = rng.random_range(margin..size - margin);
    let cx = rng.random_range(margin..size - margin);
    stamp_blob(&mut img, cy as f64, cx as f64, radius, [0.85, 0.15, 0.05]);
    Ok((img, (cy, cx)))
}
