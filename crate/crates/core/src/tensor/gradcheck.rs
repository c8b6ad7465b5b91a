//! Finite-difference verification of recorded gradients.

use super::{Tape, Tensor, TensorError, Var};

/// Compare analytic gradients of a scalar-valued tensor function against
/// central differences with step `eps`. Returns the max over all input
/// elements of |analytic − cd| / max(|analytic|, |cd|, 1e-12).
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::InvalidArgument(format!(
            "eps must lie in (0, 1e-2], got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).is_scalar() {
        return Err(TensorError::InvalidArgument(
            "grad_check needs a scalar-valued function".into(),
        ));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(|g| g.data).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut max_rel: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for e in 0..inputs[i].numel() {
            let orig = work[i].data[e];
            work[i].data[e] = orig + eps;
            let fp = eval_scalar(&f, &work)?;
            work[i].data[e] = orig - eps;
            let fm = eval_scalar(&f, &work)?;
            work[i].data[e] = orig;
            let cd = (fp - fm) / (2.0 * eps);
            let a = analytic[i][e];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-12);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).data[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::from_data(&[2, 3], vec![0.3, -1.2, 0.7, 1.9, -0.4, 0.1]).unwrap();
        let err = grad_check(|t, v| t.sum_all(v[0]), &[x], 1e-5).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn softmax_then_dot_matches_differences() {
        let x = Tensor::from_data(&[3], vec![0.4, -0.9, 1.3]).unwrap();
        let target = Tensor::from_data(&[3], vec![0.2, 0.5, 0.3]).unwrap();
        let err = grad_check(
            |t, v| {
                let p = t.softmax(v[0], 1.0)?;
                let w = t.constant(target.clone());
                let prod = t.mul(p, w)?;
                t.sum_all(prod)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn rejects_bad_eps_and_non_scalar() {
        let x = Tensor::from_data(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            grad_check(|t, v| t.sum_all(v[0]), std::slice::from_ref(&x), 0.0),
            Err(TensorError::InvalidArgument(_))
        ));
        assert!(matches!(
            grad_check(|t, v| t.sigmoid(v[0]), &[x], 1e-5),
            Err(TensorError::InvalidArgument(_))
        ));
    }
}
