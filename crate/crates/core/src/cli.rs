//! Single binary covering the whole workflow: dataset synthesis,
//! pretraining, linear probing, the scaling benchmark, saliency maps, and
//! the gradient verification suite.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
//! stderr; data goes to files or stdout.

use crate::data::{synth_dataset, SynthSpec};
use crate::eval::{
    gradcheck_suite, linear_probe, saliency_from_checkpoint, scaling_benchmark,
    write_scaling_csv, ProbeOptions, SaliencyTarget,
};
use crate::train::{train, TrainConfig, TrainError};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::ffi::OsString;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "sssl", version, about = "Gated state-space self-supervised pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic lesion-style PPM dataset.
    Synth {
        /// Output dataset directory (class-per-subdirectory layout).
        #[arg(long)]
        out: PathBuf,
        /// Number of classes.
        #[arg(long)]
        classes: usize,
        /// Images per class.
        #[arg(long = "per-class")]
        per_class: usize,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run self-supervised pretraining from a config file.
    Pretrain {
        /// Config file: one `key = value` per line, `#` comments.
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Bit-reproducible mode: single-threaded, timing column zeroed.
        #[arg(long)]
        deterministic: bool,
    },
    /// Linear-probe a checkpoint on a labeled dataset.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root (class-per-subdirectory PPM layout).
        #[arg(long)]
        data: PathBuf,
        /// Classifier training epochs.
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        /// Classifier learning rate.
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        /// Split / init seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the scan against quadratic attention across token counts.
    Bench {
        /// Comma-separated token counts, e.g. 64,128,256,512.
        #[arg(long, value_parser = parse_lengths)]
        lengths: std::vec::Vec<usize>,
        /// Timed repeats per point (>= 5).
        #[arg(long)]
        repeats: usize,
        /// Token width d.
        #[arg(long)]
        dim: usize,
        /// State width d_s.
        #[arg(long = "state-dim")]
        state_dim: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit a gradient×activation saliency map as a PGM image.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input PPM image.
        #[arg(long)]
        image: PathBuf,
        /// Output PGM path (a `.csv` of raw token relevances lands next to it).
        #[arg(long)]
        out: PathBuf,
        /// `norm` (pooled-norm) or `proto:I` (prototype index I).
        #[arg(long, default_value = "norm")]
        target: String,
    },
    /// Run the finite-difference gradient verification suite.
    Gradcheck {
        /// Relative-error tolerance for primitives; composites use 100x.
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

fn parse_lengths(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad token count '{part}'"))
        })
        .collect()
}

/// Dispatch a full command line (including argv[0]) and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Failed) => 2,
    }
}

enum CliError {
    Usage(String),
    Runtime(String),
    /// Already reported on stdout/stderr.
    Failed,
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { out, classes, per_class, size, seed } => {
            let spec = SynthSpec { classes, per_class, image_size: size, seed };
            let ds = synth_dataset(&out, &spec)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            eprintln!(
                "wrote {} PPM files across {} classes under {}",
                ds.items.len(),
                ds.num_classes(),
                out.display()
            );
            Ok(())
        }
        Command::Pretrain { config, seed, out, deterministic } => {
            let mut cfg = TrainConfig::parse_file(&config).map_err(|e| match e {
                TrainError::Config { .. } => {
                    CliError::Usage(format!("{e} (config: {})", config.display()))
                }
                other => CliError::Runtime(other.to_string()),
            })?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if deterministic {
                cfg.deterministic = true;
            }
            let report = train(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
            for row in &report.rows {
                eprintln!(
                    "epoch {}: loss {:.6} entropy {:.4} m {:.6} lr {:.6} ({} ms)",
                    row.epoch, row.loss, row.teacher_entropy, row.momentum, row.lr, row.epoch_ms
                );
            }
            eprintln!("final checkpoint: {}", report.final_checkpoint.display());
            eprintln!("metrics: {}", report.metrics_csv.display());
            Ok(())
        }
        Command::Probe { checkpoint, data, epochs, lr, seed } => {
            let acc = linear_probe(&checkpoint, &data, &ProbeOptions { epochs, lr, seed })
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            println!("{acc:.4}");
            Ok(())
        }
        Command::Bench { lengths, repeats, dim, state_dim, out } => {
            let report = scaling_benchmark(&lengths, dim, state_dim, repeats, 0)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            write_scaling_csv(&report, &out).map_err(|e| CliError::Runtime(e.to_string()))?;
            for f in &report.fits {
                eprintln!("{}: exponent {:.3} (r2 {:.4})", f.mixer, f.exponent, f.r2);
            }
            if let Some(w) = &report.timer_warning {
                eprintln!("warning: {w}");
            }
            Ok(())
        }
        Command::Saliency { checkpoint, image, out, target } => {
            let target = parse_target(&target).map_err(CliError::Usage)?;
            let (map, relevance) = saliency_from_checkpoint(&checkpoint, &image, target)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            map.save_pgm(&out).map_err(|e| CliError::Runtime(e.to_string()))?;
            let csv_path = out.with_extension("csv");
            let mut csv = String::from("token,relevance\n");
            for (i, r) in relevance.iter().enumerate() {
                csv.push_str(&format!("{i},{r:.9e}\n"));
            }
            std::fs::write(&csv_path, csv).map_err(|e| CliError::Runtime(e.to_string()))?;
            eprintln!("wrote {} and {}", out.display(), csv_path.display());
            Ok(())
        }
        Command::Gradcheck { tolerance } => {
            if !(tolerance > 0.0) {
                return Err(CliError::Usage(format!(
                    "tolerance must be positive, got {tolerance}"
                )));
            }
            let reports =
                gradcheck_suite(tolerance).map_err(|e| CliError::Runtime(e.to_string()))?;
            let mut all_ok = true;
            for r in &reports {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{status} {name}: max_rel_err={err:.3e} (tol {tol:.1e})",
                    name = r.name,
                    err = r.max_rel_err,
                    tol = r.tolerance
                );
                all_ok &= r.passed();
            }
            if all_ok {
                Ok(())
            } else {
                Err(CliError::Failed)
            }
        }
    }
}

fn parse_target(s: &str) -> Result<SaliencyTarget, String> {
    if s == "norm" {
        return Ok(SaliencyTarget::PooledNorm);
    }
    if let Some(idx) = s.strip_prefix("proto:") {
        return idx
            .parse::<usize>()
            .map(SaliencyTarget::Prototype)
            .map_err(|_| format!("bad prototype index in target '{s}'"));
    }
    Err(format!("target must be 'norm' or 'proto:I', got '{s}'"))
}
