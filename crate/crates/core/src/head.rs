//! Projection head, prototype distributions, teacher centering, and the
//! cross-view distillation loss.
//!
//! The head h(z) = W_2 σ(W_1 z) (no biases) maps pooled features to prototype
//! space; cosine similarity against K learnable prototypes, scaled by a
//! temperature softmax, gives the student and teacher distributions. The loss
//! is the teacher→student cross-entropy averaged over cross-view pairs.

use crate::tensor::{Fill, Tape, Tensor, TensorError, Var};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_STUDENT_TEMP: f64 = 0.1;
pub const DEFAULT_TEACHER_TEMP: f64 = 0.04;
pub const DEFAULT_PROTOTYPES: usize = 64;
pub const DEFAULT_CENTER_MOMENTUM: f64 = 0.9;
/// Student probabilities are clamped here before the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Projection weights, prototypes, temperatures, and the running center.
#[derive(Debug, Clone)]
pub struct Head {
    pub w1: Tensor,         // [d_h, d]
    pub w2: Tensor,         // [d_p, d_h]
    pub prototypes: Tensor, // [K, d_p]
    pub t_s: f64,
    pub t_t: f64,
    pub center: Tensor, // [K]
    pub center_momentum: f64,
    pub centering: bool,
}

impl Head {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        d: usize,
        d_h: usize,
        d_p: usize,
        k: usize,
        t_s: f64,
        t_t: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        if k < 2 {
            return Err(TensorError::InvalidArgument(format!(
                "need at least 2 prototypes, got {k}"
            )));
        }
        if !(t_s > 0.0 && t_t > 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "temperatures must be positive, got T_s={t_s} T_t={t_t}"
            )));
        }
        if t_t > t_s {
            return Err(TensorError::InvalidArgument(format!(
                "teacher must be at least as sharp as the student: T_t={t_t} > T_s={t_s}"
            )));
        }
        Ok(Head {
            w1: Tensor::new(
                &[d_h, d],
                Fill::Normal { mean: 0.0, std: 1.0 / (d as f64).sqrt() },
                rng,
            )?,
            w2: Tensor::new(
                &[d_p, d_h],
                Fill::Normal { mean: 0.0, std: 1.0 / (d_h as f64).sqrt() },
                rng,
            )?,
            prototypes: Tensor::new(&[k, d_p], Fill::Normal { mean: 0.0, std: 1.0 }, rng)?,
            t_s,
            t_t,
            center: Tensor::zeros(&[k])?,
            center_momentum: DEFAULT_CENTER_MOMENTUM,
            centering: true,
        })
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototypes.shape[0]
    }

    /// Trainable tensors in canonical order (the center is not trainable; it
    /// is updated by its own momentum rule).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("head.w1".to_string(), &self.w1),
            ("head.w2".to_string(), &self.w2),
            ("head.prototypes".to_string(), &self.prototypes),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("head.w1".to_string(), &mut self.w1),
            ("head.w2".to_string(), &mut self.w2),
            ("head.prototypes".to_string(), &mut self.prototypes),
        ]
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> HeadVars {
        HeadVars {
            w1: tape.leaf(self.w1.clone(), requires_grad),
            w2: tape.leaf(self.w2.clone(), requires_grad),
            prototypes: tape.leaf(self.prototypes.clone(), requires_grad),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w1: Var,
    pub w2: Var,
    pub prototypes: Var,
}

impl HeadVars {
    pub fn leaf_vars(&self) -> Vec<Var> {
        vec![self.w1, self.w2, self.prototypes]
    }

    pub fn from_vars(vars: &[Var]) -> Self {
        assert_eq!(vars.len(), 3, "var count mismatch");
        HeadVars { w1: vars[0], w2: vars[1], prototypes: vars[2] }
    }
}

/// h(z) = W_2 σ(W_1 z) with elementwise sigmoid, no bias terms.
/// `z` may be any shape with d elements; output is `[d_p]`.
pub fn project(tape: &mut Tape, z: Var, head: &HeadVars) -> Result<Var, TensorError> {
    let d = tape.value(head.w1).shape[1];
    let d_p = tape.value(head.w2).shape[0];
    let col = tape.reshape(z, &[d, 1])?;
    let hidden = tape.matmul(head.w1, col)?;
    let act = tape.sigmoid(hidden)?;
    let out = tape.matmul(head.w2, act)?;
    tape.reshape(out, &[d_p])
}

/// Cosine similarity of the projected embedding against each prototype row.
/// Logits lie in [-1, 1].
pub fn prototype_logits(tape: &mut Tape, v: Var, head: &HeadVars) -> Result<Var, TensorError> {
    tape.row_cosine(v, head.prototypes)
}

/// p_s = softmax(logits / T_s) over the prototype axis.
pub fn student_dist(
    tape: &mut Tape,
    z: Var,
    head: &HeadVars,
    t_s: f64,
) -> Result<Var, TensorError> {
    let v = project(tape, z, head)?;
    let logits = prototype_logits(tape, v, head)?;
    tape.softmax(logits, t_s)
}

/// p_t = softmax((logits − center) / T_t). Returns (distribution, raw logits);
/// the raw logits feed [`center_update`]. Run this on a tape whose leaves do
/// not require gradients: the teacher path must contribute none.
pub fn teacher_dist(
    tape: &mut Tape,
    z: Var,
    head: &HeadVars,
    t_t: f64,
    center: &Tensor,
    centering: bool,
) -> Result<(Var, Tensor), TensorError> {
    let v = project(tape, z, head)?;
    let logits = prototype_logits(tape, v, head)?;
    let raw = tape.value(logits).clone();
    let shifted = if centering {
        let c = tape.constant(center.clone());
        tape.sub(logits, c)?
    } else {
        logits
    };
    let dist = tape.softmax(shifted, t_t)?;
    Ok((dist, raw))
}

/// center ← c·center + (1−c)·batch-mean(teacher logits).
pub fn center_update(
    center: &mut Tensor,
    teacher_logits_batch: &[Tensor],
    momentum: f64,
) -> Result<(), TensorError> {
    if teacher_logits_batch.is_empty() {
        return Err(TensorError::InvalidArgument(
            "center update needs a non-empty batch".into(),
        ));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(TensorError::InvalidArgument(format!(
            "center momentum must lie in [0, 1), got {momentum}"
        )));
    }
    let k = center.numel();
    let mut mean = vec![0.0; k];
    for logits in teacher_logits_batch {
        if logits.numel() != k {
            return Err(TensorError::InvalidShape(format!(
                "teacher logits have {} entries, center has {k}",
                logits.numel()
            )));
        }
        for (m, v) in mean.iter_mut().zip(&logits.data) {
            *m += v;
        }
    }
    let b = teacher_logits_batch.len() as f64;
    for (c, m) in center.data.iter_mut().zip(&mean) {
        *c = momentum * *c + (1.0 - momentum) * (m / b);
    }
    Ok(())
}

/// A distribution tagged with the crop it came from; same-crop
/// teacher/student pairs are excluded from the loss.
pub struct TaggedDist<T> {
    pub view: usize,
    pub dist: T,
}

/// Mean over all cross-view (teacher, student) pairs of
/// −Σ_i p_t(i) log p_s(i), with p_s clamped at 1e-12 inside the log.
pub fn distill_loss(
    tape: &mut Tape,
    teachers: &[TaggedDist<Tensor>],
    students: &[TaggedDist<Var>],
) -> Result<Var, TensorError> {
    let mut terms: Vec<Var> = Vec::new();
    for t in teachers {
        validate_dist(&t.dist.data)?;
        for s in students {
            if t.view == s.view {
                continue;
            }
            let p_s = tape.value(s.dist);
            if p_s.numel() != t.dist.numel() {
                return Err(TensorError::InvalidArgument(format!(
                    "distribution lengths differ: {} vs {}",
                    t.dist.numel(),
                    p_s.numel()
                )));
            }
            validate_dist(&p_s.data.clone())?;
            let clamped = tape.clamp_min(s.dist, LOG_FLOOR)?;
            let logp = tape.log(clamped)?;
            let pt = tape.constant(t.dist.clone());
            let prod = tape.mul(pt, logp)?;
            let total = tape.sum_all(prod)?;
            terms.push(tape.scale(total, -1.0)?);
        }
    }
    if terms.is_empty() {
        return Err(TensorError::InvalidArgument(
            "no cross-view pairs to average".into(),
        ));
    }
    let mut acc = terms[0];
    for term in &terms[1..] {
        acc = tape.add(acc, *term)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

fn validate_dist(p: &[f64]) -> Result<(), TensorError> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || p.iter().any(|v| *v < 0.0) {
        return Err(TensorError::InvalidArgument(format!(
            "not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}
