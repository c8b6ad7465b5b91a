//! Gradient×activation saliency: per-token relevance |∂target/∂Z ⊙ Z| summed
//! over channels, reshaped to the patch grid and upsampled to image size.
//! A classifier-free stand-in for Grad-CAM, since the pretrained model has
//! no class logits.

use super::EvalError;
use crate::data::{load_ppm, save_pgm, Image};
use crate::encoder::{encode, EncoderConfig};
use crate::head::{project, prototype_logits};
use crate::tensor::{Tape, Tensor};
use crate::train::{load_checkpoint, ModelParams, TrainState};
use std::path::Path;

#[derive(Debug, Clone, Copy)]
pub enum SaliencyTarget {
    /// Squared L2 norm of the pooled embedding.
    PooledNorm,
    /// Cosine similarity to one prototype, through the projection head.
    Prototype(usize),
}

/// Relevance map at image resolution, min-max normalized to [0, 1]
/// (all-zero when the raw relevances are constant).
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn save_pgm(&self, path: &Path) -> Result<(), EvalError> {
        save_pgm(&self.values, self.height, self.width, path)?;
        Ok(())
    }
}

/// Compute the map plus the raw per-token relevances (patch-grid raster
/// order, before normalization).
pub fn saliency_map(
    params: &ModelParams,
    enc_cfg: &EncoderConfig,
    image: &Image,
    target: SaliencyTarget,
) -> Result<(SaliencyMap, Vec<f64>), EvalError> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let out = encode(&mut tape, image, enc_cfg, &vars.encoder)?;
    let scalar = match target {
        SaliencyTarget::PooledNorm => {
            let sq = tape.mul(out.pooled, out.pooled)?;
            tape.sum_all(sq)?
        }
        SaliencyTarget::Prototype(i) => {
            let k = params.head.num_prototypes();
            if i >= k {
                return Err(EvalError::InvalidArgument(format!(
                    "prototype index {i} out of range for {k} prototypes"
                )));
            }
            let v = project(&mut tape, out.pooled, &vars.head)?;
            let logits = prototype_logits(&mut tape, v, &vars.head)?;
            let mut onehot = Tensor::zeros(&[k])?;
            onehot.data[i] = 1.0;
            let sel = tape.constant(onehot);
            let picked = tape.mul(logits, sel)?;
            tape.sum_all(picked)?
        }
    };
    tape.backward(scalar)?;
    let z = tape.value(out.z).clone();
    let grad = tape
        .grad(out.z)
        .ok_or_else(|| EvalError::InvalidArgument("no gradient reached the token features".into()))?;
    let (n, d) = (z.shape[0], z.shape[1]);
    let relevance: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|c| (grad.data[i * d + c] * z.data[i * d + c]).abs()).sum())
        .collect();

    let p = enc_cfg.patch_size;
    let (gh, gw) = (image.height / p, image.width / p);
    let upsampled = bilinear_upsample(&relevance, gh, gw, image.height, image.width);
    let lo = upsampled.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = upsampled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi - lo < 1e-12 {
        vec![0.0; upsampled.len()]
    } else {
        upsampled.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    Ok((
        SaliencyMap { height: image.height, width: image.width, values },
        relevance,
    ))
}

/// Load a checkpoint and run [`saliency_map`] with the student parameters.
pub fn saliency_from_checkpoint(
    checkpoint: &Path,
    image_path: &Path,
    target: SaliencyTarget,
) -> Result<(SaliencyMap, Vec<f64>), EvalError> {
    let state = TrainState::from_bundle(&load_checkpoint(checkpoint)?)?;
    let image = load_ppm(image_path)?;
    saliency_map(&state.student, &state.cfg.encoder_config(), &image, target)
}

fn bilinear_upsample(grid: &[f64], gh: usize, gw: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let sy = gh as f64 / out_h as f64;
    let sx = gw as f64 / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (gh - 1) as f64);
        let ty = fy.floor() as usize;
        let by = (ty + 1).min(gh - 1);
        let wy = fy - ty as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (gw - 1) as f64);
            let tx = fx.floor() as usize;
            let bx = (tx + 1).min(gw - 1);
            let wx = fx - tx as f64;
            let top = grid[ty * gw + tx] * (1.0 - wx) + grid[ty * gw + bx] * wx;
            let bot = grid[by * gw + tx] * (1.0 - wx) + grid[by * gw + bx] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

/// Argmax of the token relevances as (row, col) in the patch grid.
pub fn argmax_patch(relevance: &[f64], grid_w: usize) -> (usize, usize) {
    let (mut best, mut idx) = (f64::NEG_INFINITY, 0);
    for (i, &v) in relevance.iter().enumerate() {
        if v > best {
            best = v;
            idx = i;
        }
    }
    (idx / grid_w, idx % grid_w)
}
