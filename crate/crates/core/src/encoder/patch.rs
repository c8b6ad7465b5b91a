//! Image patchification: non-overlapping p x p patches in raster order, each
//! flattened row-major to a 3p² token. Lossless by construction.

use crate::data::Image;
use crate::tensor::{Tensor, TensorError};

/// Token sequence extracted from one image.
#[derive(Debug, Clone)]
pub struct PatchSequence {
    /// `[N, 3p²]`, token i = patch i in raster (left-to-right, top-to-bottom) order.
    pub tokens: Tensor,
    pub n: usize,
    pub patch_size: usize,
    pub origin_hw: (usize, usize),
}

/// Split an image into N = HW/p² flattened patches.
pub fn patchify(image: &Image, p: usize) -> Result<PatchSequence, TensorError> {
    if p == 0 {
        return Err(TensorError::InvalidArgument("patch size must be >= 1".into()));
    }
    if image.height % p != 0 || image.width % p != 0 {
        return Err(TensorError::InvalidShape(format!(
            "patch size {p} does not divide image {}x{}",
            image.height, image.width
        )));
    }
    let (rows, cols) = (image.height / p, image.width / p);
    let n = rows * cols;
    let d_in = 3 * p * p;
    let mut data = Vec::with_capacity(n * d_in);
    for py in 0..rows {
        for px in 0..cols {
            for dy in 0..p {
                for dx in 0..p {
                    let rgb = image.pixel(py * p + dy, px * p + dx);
                    data.extend_from_slice(&rgb);
                }
            }
        }
    }
    Ok(PatchSequence {
        tokens: Tensor::from_data(&[n, d_in], data)?,
        n,
        patch_size: p,
        origin_hw: (image.height, image.width),
    })
}

/// Reassemble the image from its patch sequence (exact inverse of
/// [`patchify`]).
pub fn unpatchify(seq: &PatchSequence) -> Result<Image, TensorError> {
    let p = seq.patch_size;
    let (h, w) = seq.origin_hw;
    let cols = w / p;
    let mut pixels = vec![0.0; h * w * 3];
    for (i, token) in seq.tokens.data.chunks(3 * p * p).enumerate() {
        let (py, px) = (i / cols, i % cols);
        for dy in 0..p {
            for dx in 0..p {
                let src = (dy * p + dx) * 3;
                let dst = ((py * p + dy) * w + px * p + dx) * 3;
                pixels[dst..dst + 3].copy_from_slice(&token[src..src + 3]);
            }
        }
    }
    Image::new(h, w, pixels).map_err(|e| TensorError::InvalidArgument(e.to_string()))
}
