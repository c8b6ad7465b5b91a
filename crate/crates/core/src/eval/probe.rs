//! Linear probe: freeze the encoder, extract pooled embeddings once, train a
//! single affine softmax classifier on a seeded 80/20 split.

use super::EvalError;
use crate::data::{load_ppm, LabeledDataset};
use crate::tensor::{Fill, Tape, Tensor};
use crate::train::{load_checkpoint, TrainState};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, Clone, Copy)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { epochs: 200, lr: 0.1, seed: 0 }
    }
}

/// Probe a pretrained checkpoint on a labeled dataset. Loads the student
/// encoder, embeds every image once, then trains the affine classifier.
/// Returns held-out accuracy in [0, 1].
pub fn linear_probe(
    checkpoint: &Path,
    data_dir: &Path,
    opts: &ProbeOptions,
) -> Result<f64, EvalError> {
    let bundle = load_checkpoint(checkpoint)?;
    let state = TrainState::from_bundle(&bundle)?;
    let dataset = LabeledDataset::scan(data_dir)?;
    if dataset.num_classes() < 2 {
        return Err(EvalError::InvalidDataset(format!(
            "need at least 2 classes, got {}",
            dataset.num_classes()
        )));
    }
    let enc_cfg = state.cfg.encoder_config();
    let mut features = Vec::with_capacity(dataset.items.len());
    let mut labels = Vec::with_capacity(dataset.items.len());
    for (path, label) in &dataset.items {
        let img = load_ppm(path)?;
        let mut tape = Tape::new();
        let vars = state.student.encoder.bind(&mut tape, false);
        let out = crate::encoder::encode(&mut tape, &img, &enc_cfg, &vars)?;
        features.push(tape.value(out.pooled).data.clone());
        labels.push(*label);
    }
    probe_features(&features, &labels, dataset.num_classes(), opts)
}

/// Train the affine classifier on pre-extracted features. Deterministic
/// given the seed: the split, the init, and full-batch updates all derive
/// from it.
pub fn probe_features(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    opts: &ProbeOptions,
) -> Result<f64, EvalError> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(EvalError::InvalidArgument(format!(
            "{} features vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(EvalError::InvalidArgument("ragged feature matrix".into()));
    }
    for c in 0..num_classes {
        if !labels.contains(&c) {
            return Err(EvalError::InvalidDataset(format!("class {c} has zero samples")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut rng);
    let split = ((features.len() as f64) * 0.8).round() as usize;
    let split = split.clamp(1, features.len() - 1);
    let (train_idx, test_idx) = order.split_at(split);

    // Standardize with train-split statistics.
    let mut mean = vec![0.0; dim];
    for &i in train_idx {
        for (m, v) in mean.iter_mut().zip(&features[i]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= train_idx.len() as f64;
    }
    let mut std = vec![0.0; dim];
    for &i in train_idx {
        for (s, (v, m)) in std.iter_mut().zip(features[i].iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = (*s / train_idx.len() as f64).sqrt().max(1e-8);
    }
    let standardized = |i: usize| -> Vec<f64> {
        features[i]
            .iter()
            .zip(mean.iter().zip(&std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    };

    let train_x: Vec<f64> = train_idx.iter().flat_map(|&i| standardized(i)).collect();
    let train_y: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let train_t = Tensor::from_data(&[train_idx.len(), dim], train_x)?;

    let mut w = Tensor::new(
        &[num_classes, dim],
        Fill::Normal { mean: 0.0, std: 0.01 },
        &mut rng,
    )?;
    let mut b = Tensor::zeros(&[num_classes])?;
    let hp = crate::train::AdamHyper { weight_decay: 0.0, ..Default::default() };
    let mut m_w = vec![0.0; w.numel()];
    let mut v_w = vec![0.0; w.numel()];
    let mut m_b = vec![0.0; b.numel()];
    let mut v_b = vec![0.0; b.numel()];
    for t in 1..=opts.epochs as u64 {
        let mut tape = Tape::new();
        let xv = tape.constant(train_t.clone());
        let wv = tape.leaf(w.clone(), true);
        let bv = tape.leaf(b.clone(), true);
        let wt = tape.transpose(wv)?;
        let scores = tape.matmul(xv, wt)?;
        let bias = tape.tile_rows(bv, train_idx.len())?;
        let logits = tape.add(scores, bias)?;
        let loss = tape.cross_entropy_rows(logits, &train_y)?;
        tape.backward(loss)?;
        let gw = tape.grad(wv).expect("classifier weight gradient");
        let gb = tape.grad(bv).expect("classifier bias gradient");
        crate::train::adamw_step("probe.w", &mut w.data, &gw.data, &mut m_w, &mut v_w, t, opts.lr, &hp)
            .map_err(EvalError::Train)?;
        crate::train::adamw_step("probe.b", &mut b.data, &gb.data, &mut m_b, &mut v_b, t, opts.lr, &hp)
            .map_err(EvalError::Train)?;
    }

    let mut correct = 0usize;
    for &i in test_idx {
        let x = standardized(i);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for c in 0..num_classes {
            let score: f64 = (0..dim).map(|j| w.data[c * dim + j] * x[j]).sum::<f64>() + b.data[c];
            if score > best.0 {
                best = (score, c);
            }
        }
        if best.1 == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_idx.len() as f64)
}
