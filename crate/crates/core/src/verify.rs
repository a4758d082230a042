//! Finite-difference gradient checks for every differentiable operation and
//! for the full encode → decode → loss path, in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{ConvS2S, Mode, ModelConfig};
use crate::tensor::*;

pub const EPS: f64 = 1e-5;

/// Largest relative error of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub seed: u64,
    pub error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor<f64>> {
    Tensor::param(uniform(rng, shape.iter().product()), shape)
}

/// Projects `y` to a scalar with fixed random weights, so that constant
/// sums (such as softmax rows) still carry a gradient signal.
fn project(y: &Tensor<f64>, w: &[f64]) -> Result<Tensor<f64>> {
    weighted_sum(y, &w[..y.numel()])
}

/// Runs one check per exported differentiable operation on small random
/// shapes.
pub fn op_gradient_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, 512);
    let w = &w;
    let mut out = Vec::new();
    let mut push = |name: &'static str, error: f64| out.push(GradCheck { name, seed, error });

    let a = param(&mut rng, &[3, 4])?;
    let b = param(&mut rng, &[3, 4])?;
    let pair = [a.clone(), b.clone()];
    push(
        "add",
        grad_check_params(&pair, || project(&add(&a, &b)?, w), EPS)?,
    );
    push(
        "sub",
        grad_check_params(&pair, || project(&sub(&a, &b)?, w), EPS)?,
    );
    push(
        "mul",
        grad_check_params(&pair, || project(&mul(&a, &b)?, w), EPS)?,
    );
    push(
        "scale",
        grad_check_params(&pair[..1], || project(&scale(&a, 1.7), w), EPS)?,
    );
    let c = uniform(&mut rng, 12);
    push(
        "add_const",
        grad_check_params(&pair[..1], || project(&add_const(&a, &c)?, w), EPS)?,
    );
    push(
        "mul_const",
        grad_check_params(&pair[..1], || project(&mul_const(&a, &c)?, w), EPS)?,
    );
    push(
        "sigmoid",
        grad_check_params(&pair[..1], || project(&sigmoid(&a), w), EPS)?,
    );
    push(
        "sum",
        grad_check_params(&pair[..1], || Ok(scale(&sum(&mul(&a, &a)?), 0.5)), EPS)?,
    );
    push(
        "reshape",
        grad_check_params(&pair[..1], || project(&reshape(&a, &[2, 6])?, w), EPS)?,
    );
    push(
        "concat_rows",
        grad_check_params(&pair, || project(&concat_rows(&a, &b)?, w), EPS)?,
    );

    let x3 = param(&mut rng, &[2, 3, 4])?;
    let one = [x3.clone()];
    push(
        "transpose_last2",
        grad_check_params(&one, || project(&transpose_last2(&x3)?, w), EPS)?,
    );
    push(
        "softmax_last",
        grad_check_params(&one, || project(&softmax(&x3, 2)?, w), EPS)?,
    );
    push(
        "softmax_inner",
        grad_check_params(&one, || project(&softmax(&x3, 1)?, w), EPS)?,
    );

    let idx = [Some(2), None, Some(0), Some(2)];
    push(
        "gather_rows",
        grad_check_params(&pair[..1], || project(&gather_rows(&a, &idx)?, w), EPS)?,
    );
    let table = param(&mut rng, &[5, 3])?;
    let ids = [1, 4, 1, 0, 2, 1];
    push(
        "embedding",
        grad_check_params(
            std::slice::from_ref(&table),
            || project(&embedding(&table, &ids, &[2, 3])?, w),
            EPS,
        )?,
    );

    let m = param(&mut rng, &[4, 5])?;
    let mm = [a.clone(), m.clone()];
    push(
        "matmul",
        grad_check_params(&mm, || project(&matmul(&a, &m)?, w), EPS)?,
    );
    let q = param(&mut rng, &[2, 3, 4])?;
    let k = param(&mut rng, &[2, 5, 4])?;
    let v = param(&mut rng, &[2, 4, 5])?;
    let qk = [q.clone(), k.clone()];
    push(
        "batched_matmul_t",
        grad_check_params(&qk, || project(&batched_matmul(&q, &k, true)?, w), EPS)?,
    );
    let qv = [q.clone(), v.clone()];
    push(
        "batched_matmul",
        grad_check_params(&qv, || project(&batched_matmul(&q, &v, false)?, w), EPS)?,
    );

    let lw = param(&mut rng, &[6, 4])?;
    let lb = param(&mut rng, &[6])?;
    let lin = [x3.clone(), lw.clone(), lb.clone()];
    push(
        "linear",
        grad_check_params(&lin, || project(&linear(&x3, &lw, Some(&lb))?, w), EPS)?,
    );

    let input = param(&mut rng, &[2, 3, 5])?;
    let kernel = param(&mut rng, &[4, 3, 3])?;
    let bias = param(&mut rng, &[4])?;
    let conv = [input.clone(), kernel.clone(), bias.clone()];
    push(
        "conv1d",
        grad_check_params(
            &conv,
            || project(&conv1d(&input, &kernel, &bias, 1, 1)?, w),
            EPS,
        )?,
    );
    push(
        "conv1d_causal",
        grad_check_params(
            &conv,
            || project(&conv1d(&input, &kernel, &bias, 2, 0)?, w),
            EPS,
        )?,
    );
    let input_cl = param(&mut rng, &[2, 5, 3])?;
    let conv_cl = [input_cl.clone(), kernel.clone(), bias.clone()];
    push(
        "conv1d_channels_last",
        grad_check_params(
            &conv_cl,
            || project(&conv1d_channels_last(&input_cl, &kernel, &bias, 1, 1)?, w),
            EPS,
        )?,
    );

    let g = param(&mut rng, &[2, 4, 3])?;
    let gl = [g.clone()];
    push(
        "glu",
        grad_check_params(&gl, || project(&glu(&g, 1)?, w), EPS)?,
    );
    push(
        "glu_last",
        grad_check_params(std::slice::from_ref(&x3), || project(&glu(&x3, 2)?, w), EPS)?,
    );

    let mask_seed = rng.gen();
    push(
        "dropout",
        grad_check_params(
            &gl,
            || {
                let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
                project(&dropout(&g, 0.6, true, &mut r)?, w)
            },
            EPS,
        )?,
    );

    let logits = param(&mut rng, &[3, 5])?;
    let lg = [logits.clone()];
    push(
        "cross_entropy",
        grad_check_params(&lg, || cross_entropy(&logits, &[4, 0, 2], usize::MAX), EPS)?,
    );
    push(
        "cross_entropy_ignore",
        grad_check_params(&lg, || cross_entropy(&logits, &[4, 7, 2], 7), EPS)?,
    );

    let h = param(&mut rng, &[3, 4])?;
    let proj = param(&mut rng, &[4, 5])?;
    let out_w = param(&mut rng, &[5, 5])?;
    let chain = [h.clone(), proj.clone(), out_w.clone()];
    push(
        "matmul_softmax_cross_entropy",
        grad_check_params(
            &chain,
            || {
                let p = softmax(&matmul(&h, &proj)?, 1)?;
                cross_entropy(&matmul(&p, &out_w)?, &[1, 3, 0], usize::MAX)
            },
            EPS,
        )?,
    );
    Ok(out)
}

/// The model size used for the end-to-end check.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        hidden_units: 8,
        kernel_width: 3,
        encoder_layers: 1,
        decoder_layers: 1,
        dropout_keep: 1.0,
        max_positions: 16,
        source_vocab: 12,
        target_vocab: 12,
        max_decode_len: 6,
    }
}

/// Checks every model parameter through encode, teacher-forced decoding and
/// the cross-entropy loss on a random two-sample batch (one with patch
/// features, one padded shorter).
pub fn model_gradient_check(seed: u64) -> Result<GradCheck> {
    let cfg = check_model_config();
    let model = ConvS2S::<f64>::new(cfg.clone(), seed)?;
    // Scale parameters up from the small init so every path carries a
    // gradient well above finite-difference noise.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, p) in model.named_parameters() {
        for v in p.data_mut().iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let vocab = cfg.source_vocab;
    let src_a: Vec<usize> = [1]
        .into_iter()
        .chain((0..5).map(|_| rng.gen_range(5..vocab)))
        .chain([2])
        .collect();
    let src_b: Vec<usize> = [1]
        .into_iter()
        .chain((0..3).map(|_| rng.gen_range(5..vocab)))
        .chain([2])
        .collect();
    let patches = crate::fusion::VisualFeatures::new(
        2,
        cfg.embed_dim,
        (0..2 * cfg.embed_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )?;
    let tgt_a: Vec<usize> = vec![1, rng.gen_range(5..vocab), rng.gen_range(5..vocab), 2];
    let tgt_b: Vec<usize> = vec![1, rng.gen_range(5..vocab), 2];

    let params: Vec<Tensor<f64>> = model
        .named_parameters()
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let error = grad_check_params(
        &params,
        || {
            let enc = model.encode(&[&src_a, &src_b], &[Some(&patches), None], &mut Mode::Eval)?;
            let inputs: [&[usize]; 2] = [&tgt_a[..3], &tgt_b[..2]];
            let out = model.decode_train(&enc, &inputs, &mut Mode::Eval)?;
            let mut labels = vec![0; 2 * 3];
            labels[..3].copy_from_slice(&tgt_a[1..]);
            labels[3..5].copy_from_slice(&tgt_b[1..]);
            cross_entropy(&out.logits, &labels, 0)
        },
        EPS,
    )?;
    Ok(GradCheck {
        name: "encode_decode_cross_entropy",
        seed,
        error,
    })
}

/// A square op whose backward pass is wrong by a factor of two; the checker
/// must flag it.
pub fn mutated_gradient_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, 6);
    grad_check(
        |t| {
            let d: Vec<f64> = t.data().iter().map(|v| v * v).collect();
            let saved = t.to_vec();
            let sq = Tensor::from_op(
                d,
                t.shape().to_vec(),
                "bad_square",
                vec![t.clone()],
                Box::new(move |g| vec![Some(g.iter().zip(&saved).map(|(g, x)| g * x).collect())]),
            );
            Ok(sum(&sq))
        },
        &x,
        &[2, 3],
        EPS,
    )
}
