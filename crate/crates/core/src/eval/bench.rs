//! Compute-scaling benchmark: wall-clock of the scan kernel vs the quadratic
//! attention kernel across token counts, with log-log exponent fits.

use super::EvalError;
use crate::tensor::{kernels, Fill, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub mixer: &'static str,
    pub n: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone)]
pub struct MixerFit {
    pub mixer: &'static str,
    /// Slope of log(time) vs log(N): the empirical cost exponent.
    pub exponent: f64,
    pub r2: f64,
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub fits: Vec<MixerFit>,
    pub timer_warning: Option<String>,
}

impl ScalingReport {
    pub fn fit(&self, mixer: &str) -> Option<&MixerFit> {
        self.fits.iter().find(|f| f.mixer == mixer)
    }

    pub fn row(&self, mixer: &str, n: usize) -> Option<&ScalingRow> {
        self.rows.iter().find(|r| r.mixer == mixer && r.n == n)
    }
}

/// Time forward passes of the scan and the attention reference at each token
/// count, then fit log(time) against log(N) per mixer by least squares.
pub fn scaling_benchmark(
    seq_lengths: &[usize],
    d: usize,
    d_s: usize,
    repeats: usize,
    seed: u64,
) -> Result<ScalingReport, EvalError> {
    let mut lengths: Vec<usize> = seq_lengths.to_vec();
    lengths.sort_unstable();
    lengths.dedup();
    if lengths.len() < 4 {
        return Err(EvalError::InvalidArgument(format!(
            "need at least 4 distinct lengths, got {}",
            lengths.len()
        )));
    }
    let (lo, hi) = (lengths[0], *lengths.last().unwrap());
    if lo == 0 || hi / lo < 8 {
        return Err(EvalError::InvalidArgument(format!(
            "lengths must span at least an 8x range, got {lo}..{hi}"
        )));
    }
    if repeats < 5 {
        return Err(EvalError::InvalidArgument(format!(
            "need at least 5 repeats, got {repeats}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uni = |shape: &[usize], rng: &mut ChaCha8Rng| {
        Tensor::new(shape, Fill::Uniform { lo: -1.0, hi: 1.0 }, rng).unwrap()
    };
    let w_s = uni(&[d_s, d_s], &mut rng);
    let w_x = uni(&[d_s, d], &mut rng);
    let w_g = uni(&[d_s, d], &mut rng);
    let b_g = uni(&[d_s], &mut rng);
    let w_q = uni(&[d, d], &mut rng);
    let w_k = uni(&[d, d], &mut rng);
    let w_v = uni(&[d, d], &mut rng);

    let mut rows = Vec::new();
    let mut fastest = f64::INFINITY;
    for mixer in ["ssm", "attention"] {
        for &n in &lengths {
            let tokens = uni(&[n, d], &mut rng);
            let run = || match mixer {
                "ssm" => {
                    let out = kernels::scan_forward(
                        black_box(&tokens.data),
                        &w_s.data,
                        &w_x.data,
                        &w_g.data,
                        &b_g.data,
                        n,
                        d,
                        d_s,
                    );
                    black_box(out.0.len())
                }
                _ => {
                    let out = kernels::attention_forward(
                        black_box(&tokens.data),
                        &w_q.data,
                        &w_k.data,
                        &w_v.data,
                        n,
                        d,
                    );
                    black_box(out.len())
                }
            };
            // Warmup, then calibrate the inner iteration count so each
            // repeat spans at least ~2 ms of wall clock.
            run();
            let t0 = Instant::now();
            run();
            let once = t0.elapsed().as_secs_f64().max(1e-9);
            let iters = ((2e-3 / once).ceil() as usize).clamp(1, 100_000);
            let mut samples_ms = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let t = Instant::now();
                for _ in 0..iters {
                    run();
                }
                samples_ms.push(t.elapsed().as_secs_f64() * 1e3 / iters as f64);
            }
            let (mean, std, median) = summarize(&samples_ms);
            fastest = fastest.min(mean);
            rows.push(ScalingRow { mixer, n, mean_ms: mean, std_ms: std, median_ms: median, repeats });
        }
    }

    let fits = ["ssm", "attention"]
        .iter()
        .map(|mixer| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.mixer == *mixer)
                .map(|r| ((r.n as f64).ln(), r.mean_ms.ln()))
                .collect();
            let (slope, r2) = log_log_fit(&pts);
            MixerFit { mixer, exponent: slope, r2 }
        })
        .collect();

    let resolution_ms = timer_resolution_ms();
    let timer_warning = if resolution_ms > 0.01 * fastest {
        Some(format!(
            "unreliable-timing: clock resolution {resolution_ms:.6} ms exceeds 1% of fastest mean {fastest:.6} ms"
        ))
    } else {
        None
    };

    Ok(ScalingReport { rows, fits, timer_warning })
}

fn summarize(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    (mean, var.sqrt(), median)
}

/// Least-squares slope and R² of y against x.
pub(crate) fn log_log_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, r2)
}

fn timer_resolution_ms() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..16 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min((t1 - t0).as_secs_f64() * 1e3);
    }
    best
}

/// CSV: `mixer,N,mean_ms,std_ms,median_ms,repeats` rows plus one
/// `# exponent=<v> r2=<v>` footer comment per mixer.
pub fn write_scaling_csv(report: &ScalingReport, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, scaling_csv_string(report))?;
    Ok(())
}

pub fn scaling_csv_string(report: &ScalingReport) -> String {
    let mut out = String::from("mixer,N,mean_ms,std_ms,median_ms,repeats\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{}\n",
            r.mixer, r.n, r.mean_ms, r.std_ms, r.median_ms, r.repeats
        ));
    }
    for f in &report.fits {
        out.push_str(&format!("# exponent={:.4} r2={:.4}\n", f.exponent, f.r2));
    }
    if let Some(w) = &report.timer_warning {
        out.push_str(&format!("# {w}\n"));
    }
    out
}
