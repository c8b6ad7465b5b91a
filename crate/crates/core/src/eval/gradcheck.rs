//! The full finite-difference verification suite: every tape primitive, one
//! encoder block, and the whole pipeline (patchify → encode → project →
//! distillation loss) on a micro configuration.

use super::EvalError;
use crate::data::Image;
use crate::encoder::{encode, mamba_block, EncoderConfig, EncoderVars, Mixer, Pooling};
use crate::head::{distill_loss, student_dist, HeadVars, TaggedDist};
use crate::tensor::{grad_check, Fill, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(shape, Fill::Uniform { lo: -2.0, hi: 2.0 }, &mut rng).unwrap()
}

type CheckFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>;

/// Run every check. Primitives use `primitive_tol`; the block and pipeline
/// composites use 100x that (1e-4 at the default 1e-6).
pub fn gradcheck_suite(primitive_tol: f64) -> Result<Vec<CheckReport>, EvalError> {
    let composite_tol = primitive_tol * 100.0;
    let mut reports = Vec::new();

    let primitives: Vec<(&'static str, Vec<Tensor>, CheckFn)> = vec![
        (
            "matmul",
            vec![rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)],
            Box::new(|t, v| {
                let c = t.matmul(v[0], v[1])?;
                t.sum_all(c)
            }),
        ),
        (
            "add_sub_mul",
            vec![rand_t(&[2, 3], 3), rand_t(&[2, 3], 4)],
            Box::new(|t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[1])?;
                let m = t.mul(d, v[1])?;
                t.sum_all(m)
            }),
        ),
        (
            "sigmoid",
            vec![rand_t(&[2, 3], 5)],
            Box::new(|t, v| {
                let y = t.sigmoid(v[0])?;
                t.sum_all(y)
            }),
        ),
        (
            "silu",
            vec![rand_t(&[2, 3], 6)],
            Box::new(|t, v| {
                let y = t.silu(v[0])?;
                t.sum_all(y)
            }),
        ),
        (
            "relu",
            vec![Tensor::from_data(&[4], vec![-1.7, -0.5, 0.4, 1.6]).unwrap()],
            Box::new(|t, v| {
                let y = t.relu(v[0])?;
                t.sum_all(y)
            }),
        ),
        (
            "exp",
            vec![rand_t(&[2, 3], 7)],
            Box::new(|t, v| {
                let y = t.exp(v[0])?;
                t.sum_all(y)
            }),
        ),
        (
            "log",
            vec![Tensor::from_data(&[4], vec![0.3, 0.9, 1.7, 2.6]).unwrap()],
            Box::new(|t, v| {
                let y = t.log(v[0])?;
                t.sum_all(y)
            }),
        ),
        (
            "scale",
            vec![rand_t(&[5], 8)],
            Box::new(|t, v| {
                let y = t.scale(v[0], -2.3)?;
                t.sum_all(y)
            }),
        ),
        (
            "clamp_min",
            vec![Tensor::from_data(&[4], vec![-1.4, -0.6, 0.7, 1.9]).unwrap()],
            Box::new(|t, v| {
                let y = t.clamp_min(v[0], 0.05)?;
                t.sum_all(y)
            }),
        ),
        (
            "softmax",
            vec![rand_t(&[2, 4], 9)],
            Box::new(|t, v| {
                let p = t.softmax(v[0], 1.0)?;
                let sq = t.mul(p, p)?;
                t.sum_all(sq)
            }),
        ),
        (
            "structural",
            vec![rand_t(&[3, 4], 10)],
            Box::new(|t, v| {
                let tr = t.transpose(v[0])?;
                let rev = t.reverse_rows(tr)?;
                let m = t.mean_rows(rev)?;
                let flat = t.reshape(m, &[3])?;
                let tiled = t.tile_rows(flat, 4)?;
                let r = t.row(tiled, 1)?;
                let sq = t.mul(r, r)?;
                t.sum_all(sq)
            }),
        ),
        (
            "channel_norm",
            vec![rand_t(&[5, 3], 11), rand_t(&[3], 12), rand_t(&[3], 13)],
            Box::new(move |t, v| {
                let y = t.channel_norm(v[0], v[1], v[2])?;
                let w = t.constant(rand_t(&[5, 3], 14));
                let p = t.mul(y, w)?;
                t.sum_all(p)
            }),
        ),
        (
            "row_cosine",
            vec![rand_t(&[3], 15), rand_t(&[4, 3], 16)],
            Box::new(|t, v| {
                let y = t.row_cosine(v[0], v[1])?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            }),
        ),
        (
            "cross_entropy",
            vec![rand_t(&[4, 3], 17)],
            Box::new(|t, v| t.cross_entropy_rows(v[0], &[0, 2, 1, 2])),
        ),
        (
            "ssm_scan",
            vec![
                rand_t(&[4, 2], 18),
                {
                    let mut w = rand_t(&[3, 3], 19);
                    for x in &mut w.data {
                        *x *= 0.3;
                    }
                    w
                },
                rand_t(&[3, 2], 20),
                rand_t(&[3, 2], 21),
                rand_t(&[3], 22),
            ],
            Box::new(|t, v| {
                let (states, gates) = t.ssm_scan(v[0], v[1], v[2], v[3], v[4])?;
                let s1 = t.sum_all(states)?;
                let sq = t.mul(gates, gates)?;
                let s2 = t.sum_all(sq)?;
                t.add(s1, s2)
            }),
        ),
    ];
    for (name, inputs, f) in primitives {
        let err = grad_check(|t, v| f(t, v), &inputs, 1e-5)?;
        reports.push(CheckReport { name, max_rel_err: err, tolerance: primitive_tol });
    }

    // One full block at d=2, d_s=2, N=4.
    {
        let (n, d, ds) = (4usize, 2usize, 2usize);
        let inputs = vec![
            rand_t(&[ds, ds], 30),
            rand_t(&[ds, d], 31),
            rand_t(&[ds, d], 32),
            rand_t(&[ds], 33),
            rand_t(&[d, ds], 34),
            rand_t(&[d], 35),
            rand_t(&[d], 36),
            rand_t(&[n, d], 37),
        ];
        let readout = rand_t(&[n, d], 38);
        let err = grad_check(
            |tape, v| {
                let b = crate::encoder::BlockVars {
                    w_s: v[0],
                    w_x: v[1],
                    w_g: v[2],
                    b_g: v[3],
                    w_o: v[4],
                    norm_scale: v[5],
                    norm_bias: v[6],
                };
                let (out, _) = mamba_block(tape, v[7], &b, true)?;
                let w = tape.constant(readout.clone());
                let p = tape.mul(out, w)?;
                tape.sum_all(p)
            },
            &inputs,
            1e-5,
        )?;
        reports.push(CheckReport { name: "mamba_block", max_rel_err: err, tolerance: composite_tol });
    }

    // Full pipeline on the 8x8 micro configuration.
    {
        let cfg = EncoderConfig {
            patch_size: 4,
            model_dim: 8,
            state_dim: 8,
            depth: 2,
            bidirectional: true,
            pooling: Pooling::Mean,
            mixer: Mixer::Ssm,
        };
        let image = micro_image(8, 8);
        let t_s = 0.1;
        // Fixed sharp teacher target over K = 4 prototypes.
        let teacher = {
            let logits = rand_t(&[4], 50);
            let mut tape = Tape::new();
            let lv = tape.constant(logits);
            let p = tape.softmax(lv, 0.5).unwrap();
            tape.value(p).clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let enc = crate::encoder::EncoderParams::init(&cfg, &mut rng).unwrap();
        let head = crate::head::Head::init(8, 8, 8, 4, t_s, 0.04, &mut rng).unwrap();
        let mut inputs: Vec<Tensor> =
            enc.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        inputs.extend(head.named_tensors().into_iter().map(|(_, t)| t.clone()));
        let n_enc = 2 + 7 * cfg.depth;
        let err = grad_check(
            |tape, v| {
                let enc_vars = EncoderVars::from_vars(&v[..n_enc], cfg.depth);
                let head_vars = HeadVars::from_vars(&v[n_enc..]);
                let out = encode(tape, &image, &cfg, &enc_vars)?;
                let p_s = student_dist(tape, out.pooled, &head_vars, t_s)?;
                distill_loss(
                    tape,
                    &[TaggedDist { view: 0, dist: teacher.clone() }],
                    &[TaggedDist { view: 1, dist: p_s }],
                )
            },
            &inputs,
            1e-5,
        )?;
        reports.push(CheckReport { name: "pipeline", max_rel_err: err, tolerance: composite_tol });
    }

    Ok(reports)
}

fn micro_image(h: usize, w: usize) -> Image {
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            pixels.push((y % 4) as f64 / 4.0);
            pixels.push((x % 5) as f64 / 5.0);
            pixels.push(((y * 3 + x) % 7) as f64 / 7.0);
        }
    }
    Image::new(h, w, pixels).unwrap()
}
