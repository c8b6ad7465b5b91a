//! Per-run epoch timing summaries parsed from metrics CSVs.

use super::EvalError;
use std::path::{Path, PathBuf};

const HEADER: &str = "epoch,loss,teacher_entropy,momentum,lr,epoch_ms";

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub path: PathBuf,
    pub epochs: usize,
    pub mean_epoch_ms: f64,
    pub std_epoch_ms: f64,
    pub peak_mem_mb: Option<f64>,
}

/// Parse one or more metrics CSVs and summarize per-run epoch timing and the
/// runtime's own peak-arena memory figure. Absolute values are
/// machine-dependent; only cross-run comparisons are meaningful.
pub fn epoch_timing_report(paths: &[PathBuf]) -> Result<Vec<RunSummary>, EvalError> {
    paths.iter().map(|p| summarize_one(p)).collect()
}

fn summarize_one(path: &Path) -> Result<RunSummary, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        Some((_, h)) => {
            return Err(EvalError::Parse {
                line: 1,
                msg: format!("unexpected header '{h}'"),
            })
        }
        None => return Err(EvalError::Parse { line: 1, msg: "empty file".into() }),
    }
    let mut epoch_ms = Vec::new();
    let mut peak_mem_mb = None;
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(v) = comment.strip_prefix("peak_mem_mb=") {
                peak_mem_mb = Some(v.parse().map_err(|_| EvalError::Parse {
                    line: line_no,
                    msg: format!("bad peak_mem_mb value '{v}'"),
                })?);
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(EvalError::Parse {
                line: line_no,
                msg: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let ms: f64 = fields[5].parse().map_err(|_| EvalError::Parse {
            line: line_no,
            msg: format!("bad epoch_ms value '{}'", fields[5]),
        })?;
        epoch_ms.push(ms);
    }
    let n = epoch_ms.len().max(1) as f64;
    let mean = epoch_ms.iter().sum::<f64>() / n;
    let var = epoch_ms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(RunSummary {
        path: path.to_path_buf(),
        epochs: epoch_ms.len(),
        mean_epoch_ms: mean,
        std_epoch_ms: var.sqrt(),
        peak_mem_mb,
    })
}

/// Plot-ready comparison CSV: one row per run.
pub fn write_timing_csv(summaries: &[RunSummary], path: &Path) -> Result<(), EvalError> {
    let mut out = String::from("run,epochs,mean_epoch_ms,std_epoch_ms,peak_mem_mb\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{:.3},{:.3},{}\n",
            s.path.display(),
            s.epochs,
            s.mean_epoch_ms,
            s.std_epoch_ms,
            s.peak_mem_mb.map_or("".to_string(), |v| format!("{v:.3}")),
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
