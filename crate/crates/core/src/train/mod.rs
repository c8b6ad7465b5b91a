//! End-to-end self-supervised training: student/teacher forward passes over
//! multi-crop views, the cross-view distillation loss, AdamW updates, the EMA
//! teacher with a scheduled momentum, centering, checkpointing, and metrics.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointBundle,
};
pub use config::TrainConfig;

pub use crate::encoder::Mixer;
pub use optim::{adamw_step, ema_update, lr_schedule, momentum_schedule, AdamHyper};

use crate::data::{make_views, DataError, Image, LabeledDataset, ViewBatch, ViewConfig};
use crate::encoder::{encode, EncoderParams, EncoderVars};
use crate::head::{center_update, distill_loss, student_dist, teacher_dist, Head, HeadVars, TaggedDist};
use crate::tensor::{Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error (line {line}): {msg}")]
    Config { line: usize, msg: String },
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("config hash mismatch: expected {expected:#018x}, found {found:#018x}")]
    ConfigHashMismatch { expected: u64, found: u64 },
    #[error("non-finite gradient in parameter '{param}', aborting step")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at step {step}, aborting run")]
    NonFiniteLoss { step: u64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Student or teacher parameter set: encoder plus projection head. The head
/// weights belong to θ/ξ, so the EMA applies to them too.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub head: Head,
}

impl ModelParams {
    pub fn init(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self, TrainError> {
        let encoder = EncoderParams::init(&cfg.encoder_config(), rng)?;
        let mut head = Head::init(
            cfg.model_dim,
            cfg.head_hidden,
            cfg.head_out,
            cfg.prototypes,
            cfg.t_s,
            cfg.t_t,
            rng,
        )?;
        head.center_momentum = cfg.center_momentum;
        head.centering = cfg.centering;
        Ok(ModelParams { encoder, head })
    }

    /// Trainable tensors in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named_tensors();
        out.extend(self.head.named_tensors());
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.named_tensors_mut();
        out.extend(self.head.named_tensors_mut());
        out
    }

    pub fn snap_to_f32(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.snap_to_f32();
        }
        self.head.center.snap_to_f32();
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(tape, requires_grad),
            head: self.head.bind(tape, requires_grad),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub head: HeadVars,
}

impl ModelVars {
    pub fn leaf_vars(&self) -> Vec<crate::tensor::Var> {
        let mut out = self.encoder.leaf_vars();
        out.extend(self.head.leaf_vars());
        out
    }
}

/// Student θ, teacher ξ, optimizer moments, step counter, and the seeded
/// trainer generator. At step 0, ξ = θ exactly.
pub struct TrainState {
    pub cfg: TrainConfig,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub moments_m: Vec<Tensor>,
    pub moments_v: Vec<Tensor>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

/// Stream ids carved out of the seed: the trainer itself uses the default
/// stream, parameter init a reserved one, and every (epoch, item) pair gets
/// its own augmentation stream.
const PARAM_INIT_STREAM: u64 = u64::MAX;

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let mut param_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        param_rng.set_stream(PARAM_INIT_STREAM);
        let mut student = ModelParams::init(cfg, &mut param_rng)?;
        student.snap_to_f32();
        let teacher = student.clone();
        let zeros: Vec<Tensor> = student
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(&t.shape).expect("valid shape"))
            .collect();
        let moments_m = zeros.clone();
        let moments_v = zeros;
        Ok(TrainState {
            cfg: cfg.clone(),
            student,
            teacher,
            moments_m,
            moments_v,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn to_bundle(&self) -> CheckpointBundle {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.student.named_tensors() {
            tensors.push((format!("student.{name}"), t.clone()));
        }
        for (name, t) in self.teacher.named_tensors() {
            tensors.push((format!("teacher.{name}"), t.clone()));
        }
        for ((name, _), m) in self.student.named_tensors().iter().zip(&self.moments_m) {
            tensors.push((format!("opt.m.{name}"), m.clone()));
        }
        for ((name, _), v) in self.student.named_tensors().iter().zip(&self.moments_v) {
            tensors.push((format!("opt.v.{name}"), v.clone()));
        }
        tensors.push(("center".to_string(), self.teacher.head.center.clone()));
        CheckpointBundle {
            arch_hash: self.cfg.arch_hash(),
            step: self.step,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
            config_text: self.cfg.canonical_text(),
            tensors,
        }
    }

    pub fn from_bundle(bundle: &CheckpointBundle) -> Result<Self, TrainError> {
        let cfg = TrainConfig::parse_str(&bundle.config_text)?;
        bundle.expect_arch_hash(cfg.arch_hash())?;
        let mut state = TrainState::init(&cfg)?;
        for (name, t) in state.student.named_tensors_mut() {
            assign(t, bundle.tensor(&format!("student.{name}"))?)?;
        }
        for (name, t) in state.teacher.named_tensors_mut() {
            assign(t, bundle.tensor(&format!("teacher.{name}"))?)?;
        }
        let names: Vec<String> = state
            .student
            .named_tensors()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        for (name, m) in names.iter().zip(state.moments_m.iter_mut()) {
            assign(m, bundle.tensor(&format!("opt.m.{name}"))?)?;
        }
        for (name, v) in names.iter().zip(state.moments_v.iter_mut()) {
            assign(v, bundle.tensor(&format!("opt.v.{name}"))?)?;
        }
        assign(&mut state.teacher.head.center, bundle.tensor("center")?)?;
        state.step = bundle.step;
        state.rng = ChaCha8Rng::from_seed(bundle.rng_seed);
        state.rng.set_word_pos(bundle.rng_word_pos);
        Ok(state)
    }
}

fn assign(dst: &mut Tensor, src: &Tensor) -> Result<(), TrainError> {
    if dst.shape != src.shape {
        return Err(TrainError::Checkpoint(format!(
            "tensor shape mismatch: expected {:?}, found {:?}",
            dst.shape, src.shape
        )));
    }
    dst.data.clone_from(&src.data);
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub teacher_entropy: f64,
    pub momentum: f64,
    pub lr: f64,
    /// Peak tape arena bytes across the step's forward passes.
    pub tape_bytes: usize,
    /// Encoder invocations on the student path this step.
    pub student_encodes: usize,
    /// Encoder invocations on the teacher path this step.
    pub teacher_encodes: usize,
}

/// One optimizer step over a batch of view bundles: teacher forward (no
/// gradients), student forward over the seven student views, Eq.-style
/// cross-view loss averaged over the batch, backward, AdamW, EMA, centering.
pub fn train_step(
    state: &mut TrainState,
    batch: &[ViewBatch],
    total_steps: u64,
) -> Result<StepStats, TrainError> {
    let cfg = state.cfg.clone();
    let enc_cfg = cfg.encoder_config();

    // Teacher path on its own tape, leaves without gradients.
    let mut teacher_tape = Tape::new();
    let tvars = state.teacher.bind(&mut teacher_tape, false);
    let mut teacher_dists: Vec<Vec<TaggedDist<Tensor>>> = Vec::with_capacity(batch.len());
    let mut raw_logits: Vec<Tensor> = Vec::new();
    let mut entropy_sum = 0.0;
    let mut entropy_count = 0usize;
    let mut teacher_encodes = 0usize;
    for item in batch {
        let mut dists = Vec::new();
        for view in 0..cfg.teacher_views {
            let out = encode(&mut teacher_tape, &item.globals[view], &enc_cfg, &tvars.encoder)?;
            teacher_encodes += 1;
            let (p_t, raw) = teacher_dist(
                &mut teacher_tape,
                out.pooled,
                &tvars.head,
                cfg.t_t,
                &state.teacher.head.center,
                cfg.centering,
            )?;
            let p = teacher_tape.value(p_t).clone();
            entropy_sum += entropy_of(&p.data);
            entropy_count += 1;
            dists.push(TaggedDist { view, dist: p });
            raw_logits.push(raw);
        }
        teacher_dists.push(dists);
    }

    // Student path: one tape for the whole batch, single backward.
    let mut tape = Tape::new();
    let svars = state.student.bind(&mut tape, true);
    let mut student_encodes = 0usize;
    let mut item_losses = Vec::with_capacity(batch.len());
    for (item, teachers) in batch.iter().zip(&teacher_dists) {
        let mut students: Vec<TaggedDist<crate::tensor::Var>> = Vec::new();
        let mut student_views: Vec<(usize, &Image)> = vec![(1, &item.globals[1])];
        student_views.extend(item.locals.iter().enumerate().map(|(i, l)| (2 + i, l)));
        for (view, img) in student_views {
            let out = encode(&mut tape, img, &enc_cfg, &svars.encoder)?;
            student_encodes += 1;
            let p_s = student_dist(&mut tape, out.pooled, &svars.head, cfg.t_s)?;
            students.push(TaggedDist { view, dist: p_s });
        }
        item_losses.push(distill_loss(&mut tape, teachers, &students)?);
    }
    let mut acc = item_losses[0];
    for l in &item_losses[1..] {
        acc = tape.add(acc, *l)?;
    }
    let loss = tape.scale(acc, 1.0 / item_losses.len() as f64)?;
    let loss_value = tape.value(loss).data[0];
    if !loss_value.is_finite() {
        eprintln!(
            "non-finite loss {loss_value} at step {}; dumping parameter norms:",
            state.step
        );
        for (name, t) in state.student.named_tensors() {
            let norm: f64 = t.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            eprintln!("  {name}: l2 = {norm:.6e}");
        }
        return Err(TrainError::NonFiniteLoss { step: state.step });
    }
    tape.backward(loss)?;

    let lr = lr_schedule(state.step, total_steps, cfg.lr, cfg.warmup_frac);
    let hp = AdamHyper { weight_decay: cfg.weight_decay, ..Default::default() };
    let leaf_vars = svars.leaf_vars();
    let t = state.step + 1;
    {
        let mut tensors = state.student.named_tensors_mut();
        for (i, (name, tensor)) in tensors.iter_mut().enumerate() {
            let grad = tape
                .grad(leaf_vars[i])
                .map(|g| g.data)
                .unwrap_or_else(|| vec![0.0; tensor.numel()]);
            adamw_step(
                name,
                &mut tensor.data,
                &grad,
                &mut state.moments_m[i].data,
                &mut state.moments_v[i].data,
                t,
                lr,
                &hp,
            )?;
        }
    }

    let m = momentum_schedule(state.step, total_steps, cfg.m_start, cfg.m_end);
    {
        let student_tensors = state.student.named_tensors();
        let mut teacher_tensors = state.teacher.named_tensors_mut();
        for ((_, th), (_, xi)) in student_tensors.iter().zip(teacher_tensors.iter_mut()) {
            ema_update(&mut xi.data, &th.data, m)?;
        }
    }
    if cfg.centering {
        center_update(&mut state.teacher.head.center, &raw_logits, cfg.center_momentum)?;
    }

    // Persisted state lives on the f32 grid; see the checkpoint format.
    state.student.snap_to_f32();
    state.teacher.snap_to_f32();
    for t in state.moments_m.iter_mut().chain(state.moments_v.iter_mut()) {
        t.snap_to_f32();
    }
    state.step += 1;

    Ok(StepStats {
        loss: loss_value,
        teacher_entropy: entropy_sum / entropy_count.max(1) as f64,
        momentum: m,
        lr,
        tape_bytes: tape.bytes_in_use() + teacher_tape.bytes_in_use(),
        student_encodes,
        teacher_encodes,
    })
}

fn entropy_of(p: &[f64]) -> f64 {
    p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum()
}

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub teacher_entropy: f64,
    pub momentum: f64,
    pub lr: f64,
    pub epoch_ms: u64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub peak_mem_bytes: usize,
}

/// Run the full pretraining loop and write metrics plus final and best
/// checkpoints under `cfg.out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    let dataset = LabeledDataset::scan(&cfg.data_dir)?;
    let images: Vec<Image> = dataset
        .items
        .iter()
        .map(|(path, _)| crate::data::load_ppm(path))
        .collect::<Result<_, _>>()?;
    let n_items = images.len();
    let steps_per_epoch = n_items.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let view_cfg = ViewConfig {
        global_size: cfg.global_size,
        local_size: cfg.local_size,
        ..Default::default()
    };

    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut state = TrainState::init(cfg)?;
    let mut rows: Vec<EpochRow> = Vec::with_capacity(cfg.epochs);
    let mut peak_mem = 0usize;
    let mut best_loss = f64::INFINITY;
    let final_path = cfg.out_dir.join("checkpoint_final.sssl");
    let best_path = cfg.out_dir.join("checkpoint_best.sssl");

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut state.rng);
        let mut loss_sum = 0.0;
        let mut entropy_sum = 0.0;
        let mut steps = 0usize;
        let mut last = None;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ViewBatch> = chunk
                .iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(1 + ((epoch - 1) * n_items + i) as u64);
                    make_views(&images[i], &mut rng, &view_cfg, i)
                })
                .collect::<Result<_, _>>()?;
            let stats = train_step(&mut state, &batch, total_steps)?;
            loss_sum += stats.loss;
            entropy_sum += stats.teacher_entropy;
            peak_mem = peak_mem.max(stats.tape_bytes);
            steps += 1;
            last = Some(stats);
        }
        let last = last.expect("at least one step per epoch");
        let epoch_ms = if cfg.deterministic {
            0
        } else {
            t0.elapsed().as_millis() as u64
        };
        let row = EpochRow {
            epoch,
            loss: loss_sum / steps as f64,
            teacher_entropy: entropy_sum / steps as f64,
            momentum: last.momentum,
            lr: last.lr,
            epoch_ms,
        };
        if row.loss < best_loss {
            best_loss = row.loss;
            save_checkpoint(&state.to_bundle(), &best_path)?;
        }
        rows.push(row);
    }

    save_checkpoint(&state.to_bundle(), &final_path)?;
    if cfg.epochs == 0 {
        // Degenerate run still leaves a loadable initial checkpoint.
        save_checkpoint(&state.to_bundle(), &best_path)?;
    }
    let metrics_csv = cfg.out_dir.join("metrics.csv");
    write_metrics(&metrics_csv, &rows, peak_mem)?;
    Ok(TrainReport {
        rows,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        metrics_csv,
        peak_mem_bytes: peak_mem,
    })
}

/// CSV layout: `epoch,loss,teacher_entropy,momentum,lr,epoch_ms` plus a
/// trailing `# peak_mem_mb=<v>` comment for the timing report.
pub fn write_metrics(
    path: &std::path::Path,
    rows: &[EpochRow],
    peak_mem_bytes: usize,
) -> Result<(), TrainError> {
    let mut out = String::from("epoch,loss,teacher_entropy,momentum,lr,epoch_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.8},{}\n",
            r.epoch, r.loss, r.teacher_entropy, r.momentum, r.lr, r.epoch_ms
        ));
    }
    out.push_str(&format!(
        "# peak_mem_mb={:.3}\n",
        peak_mem_bytes as f64 / (1024.0 * 1024.0)
    ));
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
