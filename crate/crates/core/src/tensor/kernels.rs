//! Raw forward/backward kernels for the gated scan.
//!
//! Kept tape-free so the scaling benchmark can time exactly the recurrence
//! and nothing else. The tape's `SsmScan` op delegates here.

/// One forward sweep of h_k = g_k ⊙ (W_s h_{k-1} + W_x x_k),
/// g_k = sigmoid(W_g x_k + b_g), h_0 = 0.
///
/// Returns (states, gates, pre) each `[n, d_s]` row-major, where `pre` holds
/// the pre-gate activations W_s h_{k-1} + W_x x_k saved for backward.
#[allow(clippy::too_many_arguments)]
pub fn scan_forward(
    u: &[f64],
    w_s: &[f64],
    w_x: &[f64],
    w_g: &[f64],
    b_g: &[f64],
    n: usize,
    d: usize,
    ds: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut states = vec![0.0; n * ds];
    let mut gates = vec![0.0; n * ds];
    let mut pre = vec![0.0; n * ds];
    let mut h = vec![0.0; ds];
    for k in 0..n {
        let x = &u[k * d..(k + 1) * d];
        for r in 0..ds {
            let mut c = b_g[r];
            let mut a = 0.0;
            let (wg_row, wx_row) = (&w_g[r * d..(r + 1) * d], &w_x[r * d..(r + 1) * d]);
            for j in 0..d {
                c += wg_row[j] * x[j];
                a += wx_row[j] * x[j];
            }
            let ws_row = &w_s[r * ds..(r + 1) * ds];
            for j in 0..ds {
                a += ws_row[j] * h[j];
            }
            let g = super::tape::sigmoid(c);
            pre[k * ds + r] = a;
            gates[k * ds + r] = g;
            states[k * ds + r] = g * a;
        }
        h.copy_from_slice(&states[k * ds..(k + 1) * ds]);
    }
    (states, gates, pre)
}

pub struct ScanGrads {
    pub d_u: Vec<f64>,
    pub d_w_s: Vec<f64>,
    pub d_w_x: Vec<f64>,
    pub d_w_g: Vec<f64>,
    pub d_b_g: Vec<f64>,
}

/// Backward sweep through the recurrence. `g_states` / `g_gates` are the
/// upstream gradients for the two outputs; either may be absent.
#[allow(clippy::too_many_arguments)]
pub fn scan_backward(
    g_states: Option<&[f64]>,
    g_gates: Option<&[f64]>,
    states: &[f64],
    gates: &[f64],
    pre: &[f64],
    u: &[f64],
    w_s: &[f64],
    w_x: &[f64],
    w_g: &[f64],
    n: usize,
    d: usize,
    ds: usize,
) -> ScanGrads {
    let mut out = ScanGrads {
        d_u: vec![0.0; n * d],
        d_w_s: vec![0.0; ds * ds],
        d_w_x: vec![0.0; ds * d],
        d_w_g: vec![0.0; ds * d],
        d_b_g: vec![0.0; ds],
    };
    let mut carry = vec![0.0; ds];
    let mut da = vec![0.0; ds];
    let mut dc = vec![0.0; ds];
    for k in (0..n).rev() {
        let x = &u[k * d..(k + 1) * d];
        let gk = &gates[k * ds..(k + 1) * ds];
        let ak = &pre[k * ds..(k + 1) * ds];
        for r in 0..ds {
            let mut dh = carry[r];
            if let Some(gs) = g_states {
                dh += gs[k * ds + r];
            }
            da[r] = dh * gk[r];
            let mut dg = dh * ak[r];
            if let Some(gg) = g_gates {
                dg += gg[k * ds + r];
            }
            dc[r] = dg * gk[r] * (1.0 - gk[r]);
        }
        // Accumulate weight grads and push gradient to x_k and h_{k-1}.
        for r in 0..ds {
            let (dar, dcr) = (da[r], dc[r]);
            out.d_b_g[r] += dcr;
            let wx_grad = &mut out.d_w_x[r * d..(r + 1) * d];
            let wg_grad = &mut out.d_w_g[r * d..(r + 1) * d];
            for j in 0..d {
                wx_grad[j] += dar * x[j];
                wg_grad[j] += dcr * x[j];
            }
            if k > 0 {
                let h_prev = &states[(k - 1) * ds..k * ds];
                let ws_grad = &mut out.d_w_s[r * ds..(r + 1) * ds];
                for j in 0..ds {
                    ws_grad[j] += dar * h_prev[j];
                }
            }
        }
        let dx = &mut out.d_u[k * d..(k + 1) * d];
        for r in 0..ds {
            let (dar, dcr) = (da[r], dc[r]);
            let (wx_row, wg_row) = (&w_x[r * d..(r + 1) * d], &w_g[r * d..(r + 1) * d]);
            for j in 0..d {
                dx[j] += wx_row[j] * dar + wg_row[j] * dcr;
            }
        }
        for j in 0..ds {
            carry[j] = 0.0;
        }
        for r in 0..ds {
            let dar = da[r];
            let ws_row = &w_s[r * ds..(r + 1) * ds];
            for j in 0..ds {
                carry[j] += ws_row[j] * dar;
            }
        }
    }
    out
}

/// Single-head softmax(Q Kᵀ / √d) V with Q = X W_q, K = X W_k, V = X W_v.
/// Row-convention: `tokens` is `[n, d]`, weights are `[d, d]`.
/// Two token-by-token matmuls make the work Θ(n²) for fixed d.
pub fn attention_forward(
    tokens: &[f64],
    w_q: &[f64],
    w_k: &[f64],
    w_v: &[f64],
    n: usize,
    d: usize,
) -> Vec<f64> {
    use super::tape::{matmul_raw, softmax_row};
    let q = matmul_raw(tokens, w_q, n, d, d);
    let k = matmul_raw(tokens, w_k, n, d, d);
    let v = matmul_raw(tokens, w_v, n, d, d);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut scores = vec![0.0; n];
    let mut probs = vec![0.0; n];
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        for j in 0..n {
            let kj = &k[j * d..(j + 1) * d];
            scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_d;
        }
        softmax_row(&scores, 1.0, &mut probs);
        let orow = &mut out[i * d..(i + 1) * d];
        for j in 0..n {
            let p = probs[j];
            let vj = &v[j * d..(j + 1) * d];
            for c in 0..d {
                orow[c] += p * vj[c];
            }
        }
    }
    out
}
