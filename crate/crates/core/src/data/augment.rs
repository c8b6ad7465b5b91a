//! Multi-crop view generation: random resized crops, horizontal flips, and
//! photometric jitter. Two global and six local views per source image.

use super::{DataError, Image};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const ASPECT_RANGE: (f64, f64) = (0.75, 4.0 / 3.0);
const CROP_ATTEMPTS: usize = 10;

/// Sizes, crop area ranges, and jitter strengths for [`make_views`].
#[derive(Debug, Clone)]
pub struct ViewConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub global_area: (f64, f64),
    pub local_area: (f64, f64),
    pub flip_prob: f64,
    /// Brightness and contrast factors drawn from [1-jitter, 1+jitter].
    pub jitter: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            global_size: 224,
            local_size: 96,
            global_area: (0.4, 1.0),
            local_area: (0.05, 0.4),
            flip_prob: 0.5,
            jitter: 0.2,
        }
    }
}

/// The augmented views derived from one source image: exactly two global
/// crops and six local crops, all sharing the source.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub globals: Vec<Image>,
    pub locals: Vec<Image>,
    pub source_id: usize,
}

pub const GLOBAL_VIEWS: usize = 2;
pub const LOCAL_VIEWS: usize = 6;

/// Generate 2 global + 6 local augmented crops. Reproducible given the
/// generator state.
pub fn make_views(
    img: &Image,
    rng: &mut ChaCha8Rng,
    cfg: &ViewConfig,
    source_id: usize,
) -> Result<ViewBatch, DataError> {
    let mut globals = Vec::with_capacity(GLOBAL_VIEWS);
    for _ in 0..GLOBAL_VIEWS {
        let crop = random_resized_crop(img, cfg.global_size, cfg.global_area, rng)?;
        globals.push(photometric(crop, rng, cfg));
    }
    let mut locals = Vec::with_capacity(LOCAL_VIEWS);
    for _ in 0..LOCAL_VIEWS {
        let crop = random_resized_crop(img, cfg.local_size, cfg.local_area, rng)?;
        locals.push(photometric(crop, rng, cfg));
    }
    Ok(ViewBatch { globals, locals, source_id })
}

fn photometric(mut img: Image, rng: &mut ChaCha8Rng, cfg: &ViewConfig) -> Image {
    if rng.random_range(0.0..1.0) < cfg.flip_prob {
        flip_horizontal(&mut img);
    }
    let b = rng.random_range(1.0 - cfg.jitter..1.0 + cfg.jitter);
    let c = rng.random_range(1.0 - cfg.jitter..1.0 + cfg.jitter);
    let mean = img.pixels.iter().sum::<f64>() / img.pixels.len() as f64;
    for p in &mut img.pixels {
        let brightened = *p * b;
        *p = ((brightened - mean) * c + mean).clamp(0.0, 1.0);
    }
    img
}

fn flip_horizontal(img: &mut Image) {
    for y in 0..img.height {
        for x in 0..img.width / 2 {
            let a = img.pixel(y, x);
            let b = img.pixel(y, img.width - 1 - x);
            img.set_pixel(y, x, b);
            img.set_pixel(y, img.width - 1 - x, a);
        }
    }
}

/// Crop a sub-rectangle with area fraction uniform in `area_range` and
/// aspect ratio uniform in [3/4, 4/3], then bilinearly resize to
/// `out_size` x `out_size`. Falls back to the largest in-range crop when ten
/// samples fail to fit.
pub fn random_resized_crop(
    img: &Image,
    out_size: usize,
    area_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Image, DataError> {
    let (lo, hi) = area_range;
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "area range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
        )));
    }
    if out_size < 2 {
        return Err(DataError::InvalidArgument(format!(
            "output size must be >= 2, got {out_size}"
        )));
    }
    if img.height < 2 || img.width < 2 {
        return Err(DataError::InvalidArgument(format!(
            "source image too small: {}x{}",
            img.height, img.width
        )));
    }
    let (crop_h, crop_w) = sample_crop_dims(img.height, img.width, area_range, rng);
    let y0 = rng.random_range(0..=img.height - crop_h);
    let x0 = rng.random_range(0..=img.width - crop_w);
    Ok(crop_resize(img, y0, x0, crop_h, crop_w, out_size))
}

fn sample_crop_dims(
    height: usize,
    width: usize,
    area_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> (usize, usize) {
    let total = (height * width) as f64;
    for _ in 0..CROP_ATTEMPTS {
        let area = total * rng.random_range(area_range.0..=area_range.1);
        let aspect = rng.random_range(ASPECT_RANGE.0..=ASPECT_RANGE.1);
        let w = (area * aspect).sqrt().round() as usize;
        let h = (area / aspect).sqrt().round() as usize;
        if (1..=width).contains(&w) && (1..=height).contains(&h) {
            return (h, w);
        }
    }
    // Largest crop whose aspect lies in range.
    let in_ratio = width as f64 / height as f64;
    if in_ratio < ASPECT_RANGE.0 {
        let w = width;
        let h = ((w as f64 / ASPECT_RANGE.0).round() as usize).min(height);
        (h.max(1), w)
    } else if in_ratio > ASPECT_RANGE.1 {
        let h = height;
        let w = ((h as f64 * ASPECT_RANGE.1).round() as usize).min(width);
        (h, w.max(1))
    } else {
        (height, width)
    }
}

/// Bilinear resample of the crop window to `out` x `out`, half-pixel centers.
fn crop_resize(img: &Image, y0: usize, x0: usize, crop_h: usize, crop_w: usize, out: usize) -> Image {
    let sy = crop_h as f64 / out as f64;
    let sx = crop_w as f64 / out as f64;
    let mut pixels = Vec::with_capacity(out * out * 3);
    for dy in 0..out {
        let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (crop_h - 1) as f64);
        let ty = fy.floor() as usize;
        let y_hi = (ty + 1).min(crop_h - 1);
        let wy = fy - ty as f64;
        for dx in 0..out {
            let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (crop_w - 1) as f64);
            let tx = fx.floor() as usize;
            let x_hi = (tx + 1).min(crop_w - 1);
            let wx = fx - tx as f64;
            let p00 = img.pixel(y0 + ty, x0 + tx);
            let p01 = img.pixel(y0 + ty, x0 + x_hi);
            let p10 = img.pixel(y0 + y_hi, x0 + tx);
            let p11 = img.pixel(y0 + y_hi, x0 + x_hi);
            for c in 0..3 {
                let top = p00[c] * (1.0 - wx) + p01[c] * wx;
                let bot = p10[c] * (1.0 - wx) + p11[c] * wx;
                pixels.push((top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0));
            }
        }
    }
    Image { height: out, width: out, pixels }
}
