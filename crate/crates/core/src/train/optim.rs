//! AdamW with decoupled weight decay, the EMA teacher update, and the
//! momentum / learning-rate schedules.

use super::TrainError;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.04 }
    }
}

/// One AdamW update of a single parameter buffer. Decoupled decay
/// (θ ← θ − lr·wd·θ) first, then the bias-corrected Adam step. `t` is the
/// 1-based step count. Moments advance in place.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    name: &str,
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    hp: &AdamHyper,
) -> Result<(), TrainError> {
    debug_assert_eq!(param.len(), grad.len());
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { param: name.to_string() });
    }
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..param.len() {
        param[i] *= 1.0 - lr * hp.weight_decay;
        let g = grad[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// ξ ← m ξ + (1−m) θ, elementwise. No gradients are involved.
pub fn ema_update(teacher: &mut [f64], student: &[f64], m: f64) -> Result<(), TrainError> {
    if teacher.len() != student.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "ema: teacher has {} values, student {}",
            teacher.len(),
            student.len()
        )));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(TrainError::ShapeMismatch(format!(
            "ema momentum must lie in [0, 1], got {m}"
        )));
    }
    for (xi, th) in teacher.iter_mut().zip(student) {
        *xi = m * *xi + (1.0 - m) * th;
    }
    Ok(())
}

/// Cosine ramp from `m_start` at step 0 to `m_end` at `total_steps`;
/// monotone nondecreasing, clamped past the end.
pub fn momentum_schedule(step: u64, total_steps: u64, m_start: f64, m_end: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return m_end;
    }
    let t = step as f64 / total_steps as f64;
    m_end - (m_end - m_start) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}

/// Linear warmup over `warmup_frac` of training, then cosine decay to zero.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64, warmup_frac: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let warmup = ((total_steps as f64 * warmup_frac).ceil() as u64).min(total_steps);
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let t = (step - warmup) as f64 / (total_steps - warmup).max(1) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_without_decay_leave_params_unchanged() {
        let mut p = vec![1.5, -0.7];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let hp = AdamHyper { weight_decay: 0.0, ..Default::default() };
        adamw_step("p", &mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &hp).unwrap();
        assert_eq!(p, vec![1.5, -0.7]);
    }

    #[test]
    fn zero_grads_with_decay_shrink_multiplicatively() {
        let mut p = vec![2.0, -4.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let hp = AdamHyper { weight_decay: 0.5, ..Default::default() };
        adamw_step("p", &mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &hp).unwrap();
        // Pure shrink by (1 - lr*wd) = 0.95.
        assert!((p[0] - 2.0 * 0.95).abs() < 1e-15);
        assert!((p[1] + 4.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn sign_sgd_limit() {
        // beta1 = beta2 = 0, eps = 0, wd = 0: step is exactly -lr * sign(g).
        let hp = AdamHyper { beta1: 0.0, beta2: 0.0, eps: 0.0, weight_decay: 0.0 };
        let mut p = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        for t in 1..=5 {
            adamw_step("p", &mut p, &[1.0], &mut m, &mut v, t, 0.1, &hp).unwrap();
            assert!((p[0] - (1.0 - 0.1 * t as f64)).abs() < 1e-12, "t={t}: {}", p[0]);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut p = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let err = adamw_step(
            "enc.w_e",
            &mut p,
            &[f64::NAN],
            &mut m,
            &mut v,
            1,
            0.1,
            &AdamHyper::default(),
        )
        .unwrap_err();
        match err {
            TrainError::NonFiniteGradient { param } => assert_eq!(param, "enc.w_e"),
            other => panic!("unexpected {other:?}"),
        }
        // Parameter untouched on abort.
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn ema_boundary_momenta() {
        let student = vec![0.25, -1.0];
        let mut frozen = vec![1.0, 2.0];
        ema_update(&mut frozen, &student, 1.0).unwrap();
        assert_eq!(frozen, vec![1.0, 2.0]);
        let mut copied = vec![1.0, 2.0];
        ema_update(&mut copied, &student, 0.0).unwrap();
        assert_eq!(copied, student);
    }

    #[test]
    fn ema_arithmetic() {
        let mut xi = vec![1.0];
        ema_update(&mut xi, &[0.0], 0.9).unwrap();
        assert!((xi[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn ema_shape_mismatch_rejected() {
        let mut xi = vec![1.0];
        assert!(ema_update(&mut xi, &[0.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn momentum_schedule_boundaries_and_midpoint() {
        assert_eq!(momentum_schedule(0, 100, 0.996, 1.0), 0.996);
        assert_eq!(momentum_schedule(100, 100, 0.996, 1.0), 1.0);
        assert_eq!(momentum_schedule(250, 100, 0.996, 1.0), 1.0);
        let mid = momentum_schedule(50, 100, 0.996, 1.0);
        assert!((mid - 0.998).abs() < 1e-12);
        // Monotone nondecreasing.
        let mut prev = 0.0;
        for s in 0..=100 {
            let m = momentum_schedule(s, 100, 0.996, 1.0);
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn lr_schedule_warms_up_then_decays_to_zero() {
        let base = 1e-3;
        let first = lr_schedule(0, 100, base, 0.1);
        assert!(first > 0.0 && first <= base * 0.11);
        assert!((lr_schedule(9, 100, base, 0.1) - base).abs() < 1e-12);
        assert!(lr_schedule(55, 100, base, 0.1) < base);
        assert!(lr_schedule(100, 100, base, 0.1) == 0.0);
    }
}
