//! Training configuration: UTF-8 `key = value` lines, `#` comments.
//! Unknown keys are errors, never ignored.

use super::TrainError;
use crate::encoder::{EncoderConfig, Mixer, Pooling};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub m_start: f64,
    pub m_end: f64,
    pub t_s: f64,
    pub t_t: f64,
    pub prototypes: usize,
    pub head_hidden: usize,
    pub head_out: usize,
    pub patch_size: usize,
    pub model_dim: usize,
    pub state_dim: usize,
    pub depth: usize,
    pub bidirectional: bool,
    pub pooling: Pooling,
    pub mixer: Mixer,
    pub global_size: usize,
    pub local_size: usize,
    pub teacher_views: usize,
    pub centering: bool,
    pub center_momentum: f64,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_dir: PathBuf::new(),
            out_dir: PathBuf::from("run"),
            epochs: 20,
            batch_size: 8,
            lr: 5e-4,
            weight_decay: 0.04,
            warmup_frac: 0.1,
            m_start: 0.996,
            m_end: 1.0,
            t_s: crate::head::DEFAULT_STUDENT_TEMP,
            t_t: crate::head::DEFAULT_TEACHER_TEMP,
            prototypes: crate::head::DEFAULT_PROTOTYPES,
            head_hidden: 64,
            head_out: 32,
            patch_size: 8,
            model_dim: 32,
            state_dim: 32,
            depth: 2,
            bidirectional: true,
            pooling: Pooling::Mean,
            mixer: Mixer::Ssm,
            global_size: 224,
            local_size: 96,
            teacher_views: 1,
            centering: true,
            center_momentum: crate::head::DEFAULT_CENTER_MOMENTUM,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn parse_file(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Config {
            line: 0,
            msg: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, TrainError> {
        let mut cfg = TrainConfig::default();
        let mut saw_data_dir = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(TrainError::Config {
                line: line_no,
                msg: format!("expected 'key = value', got '{raw}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value, line_no)?;
            if key == "data_dir" {
                saw_data_dir = true;
            }
        }
        if !saw_data_dir {
            return Err(TrainError::Config {
                line: 0,
                msg: "missing required key 'data_dir'".into(),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), TrainError> {
        fn num<T: std::str::FromStr>(value: &str, key: &str, line: usize) -> Result<T, TrainError> {
            value.parse().map_err(|_| TrainError::Config {
                line,
                msg: format!("bad value '{value}' for key '{key}'"),
            })
        }
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "epochs" => self.epochs = num(value, key, line)?,
            "batch_size" => self.batch_size = num(value, key, line)?,
            "lr" => self.lr = num(value, key, line)?,
            "weight_decay" => self.weight_decay = num(value, key, line)?,
            "warmup_frac" => self.warmup_frac = num(value, key, line)?,
            "m_start" => self.m_start = num(value, key, line)?,
            "m_end" => self.m_end = num(value, key, line)?,
            "t_s" => self.t_s = num(value, key, line)?,
            "t_t" => self.t_t = num(value, key, line)?,
            "prototypes" => self.prototypes = num(value, key, line)?,
            "head_hidden" => self.head_hidden = num(value, key, line)?,
            "head_out" => self.head_out = num(value, key, line)?,
            "patch_size" => self.patch_size = num(value, key, line)?,
            "model_dim" => self.model_dim = num(value, key, line)?,
            "state_dim" => self.state_dim = num(value, key, line)?,
            "depth" => self.depth = num(value, key, line)?,
            "bidirectional" => self.bidirectional = parse_bool(value, key, line)?,
            "pooling" => {
                self.pooling = match value {
                    "mean" => Pooling::Mean,
                    "last" => Pooling::LastToken,
                    _ => {
                        return Err(TrainError::Config {
                            line,
                            msg: format!("pooling must be 'mean' or 'last', got '{value}'"),
                        })
                    }
                }
            }
            "mixer" => {
                self.mixer = match value {
                    "ssm" => Mixer::Ssm,
                    "attention" => Mixer::Attention,
                    _ => {
                        return Err(TrainError::Config {
                            line,
                            msg: format!("mixer must be 'ssm' or 'attention', got '{value}'"),
                        })
                    }
                }
            }
            "global_size" => self.global_size = num(value, key, line)?,
            "local_size" => self.local_size = num(value, key, line)?,
            "teacher_views" => {
                self.teacher_views = num(value, key, line)?;
                if !(self.teacher_views == 1 || self.teacher_views == 2) {
                    return Err(TrainError::Config {
                        line,
                        msg: format!("teacher_views must be 1 or 2, got '{value}'"),
                    });
                }
            }
            "centering" => self.centering = parse_bool(value, key, line)?,
            "center_momentum" => self.center_momentum = num(value, key, line)?,
            "seed" => self.seed = num(value, key, line)?,
            "deterministic" => self.deterministic = parse_bool(value, key, line)?,
            _ => {
                return Err(TrainError::Config {
                    line,
                    msg: format!("unknown key '{key}'"),
                })
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config { line: 0, msg });
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.m_start)
            || !(0.0..=1.0).contains(&self.m_end)
            || self.m_start > self.m_end
        {
            return bad(format!(
                "momentum range must satisfy 0 <= m_start <= m_end <= 1, got [{}, {}]",
                self.m_start, self.m_end
            ));
        }
        if self.prototypes < 2 {
            return bad("prototypes must be >= 2".into());
        }
        if self.global_size % self.patch_size != 0 || self.local_size % self.patch_size != 0 {
            return bad(format!(
                "patch size {} must divide global ({}) and local ({}) crop sizes",
                self.patch_size, self.global_size, self.local_size
            ));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            patch_size: self.patch_size,
            model_dim: self.model_dim,
            state_dim: self.state_dim,
            depth: self.depth,
            bidirectional: self.bidirectional,
            pooling: self.pooling,
            mixer: self.mixer,
        }
    }

    /// Canonical serialization: fixed key order, so equal configs give equal
    /// bytes. Embedded in checkpoints.
    pub fn canonical_text(&self) -> String {
        let pooling = match self.pooling {
            Pooling::Mean => "mean",
            Pooling::LastToken => "last",
        };
        let mixer = match self.mixer {
            Mixer::Ssm => "ssm",
            Mixer::Attention => "attention",
        };
        format!(
            "data_dir = {}\nout_dir = {}\nepochs = {}\nbatch_size = {}\nlr = {}\n\
             weight_decay = {}\nwarmup_frac = {}\nm_start = {}\nm_end = {}\nt_s = {}\n\
             t_t = {}\nprototypes = {}\nhead_hidden = {}\nhead_out = {}\npatch_size = {}\n\
             model_dim = {}\nstate_dim = {}\ndepth = {}\nbidirectional = {}\npooling = {}\n\
             mixer = {}\nglobal_size = {}\nlocal_size = {}\nteacher_views = {}\ncentering = {}\n\
             center_momentum = {}\nseed = {}\ndeterministic = {}\n",
            self.data_dir.display(),
            self.out_dir.display(),
            self.epochs,
            self.batch_size,
            self.lr,
            self.weight_decay,
            self.warmup_frac,
            self.m_start,
            self.m_end,
            self.t_s,
            self.t_t,
            self.prototypes,
            self.head_hidden,
            self.head_out,
            self.patch_size,
            self.model_dim,
            self.state_dim,
            self.depth,
            self.bidirectional,
            pooling,
            mixer,
            self.global_size,
            self.local_size,
            self.teacher_views,
            self.centering,
            self.center_momentum,
            self.seed,
            self.deterministic,
        )
    }

    /// FNV-1a over the architecture-determining fields. Checkpoints carry
    /// this hash; loading against a different architecture is an error.
    pub fn arch_hash(&self) -> u64 {
        let arch = format!(
            "p={} d={} ds={} L={} bidi={} pool={:?} dh={} dp={} K={}",
            self.patch_size,
            self.model_dim,
            self.state_dim,
            self.depth,
            self.bidirectional,
            self.pooling,
            self.head_hidden,
            self.head_out,
            self.prototypes,
        );
        let mut hash: u64 = 0xcbf29ce484222325;
        for b in arch.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash
    }
}

fn parse_bool(value: &str, key: &str, line: usize) -> Result<bool, TrainError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(TrainError::Config {
            line,
            msg: format!("key '{key}' needs 'true' or 'false', got '{value}'"),
        }),
    }
}
