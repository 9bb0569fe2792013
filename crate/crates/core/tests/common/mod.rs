//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use ftlab::eval::{Capability, ModelBackend, Result as EvalResult};
use ftlab::lora::{attach_adapters, AdapterSet, LoraConfig};
use ftlab::model::{self, init_model, randomize_weights, GenerationParams, TransformerConfig, TransformerWeights};
use ftlab::tensor::{finite_difference_grad, relative_error, Tape, Tensor, Var};
use ftlab::tokenizer::TokenId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f32 = 1e-2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

/// Norm-wise relative error between the tape gradient of `Σ f(x) ⊙ W`
/// (W fixed and random, drawn from `seed`) and central differences, over
/// all inputs at once. The kernel runs in f32 either way; only the final
/// projection of the finite-difference side is summed in f64, so the
/// objective is not rounded at its own magnitude.
pub fn gradcheck<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let w = randn(tape.value(out).shape(), 1.0, &mut rng(seed));
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).expect("backward");
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        match grads.get(vars[i]) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, x.len())),
        }
        let fd = finite_difference_grad(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.constant(if j == i { probe.clone() } else { x.clone() }))
                    .collect();
                let o = f(&mut t, &vs);
                t.value(o).data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>()
            },
            x,
            FD_EPS,
        )
        .expect("finite differences");
        numeric.extend_from_slice(fd.data());
    }
    relative_error(&analytic, &numeric)
}

pub const KERNELS: [&str; 19] = [
    "matmul",
    "matmul_nt",
    "add",
    "add_row",
    "mul",
    "scale",
    "sum",
    "mean_rows",
    "gelu",
    "softmax_rows",
    "layer_norm",
    "embedding",
    "slice_rows",
    "causal_attention",
    "cross_entropy",
    "mse",
    "dropout",
    "lora_delta",
    "model",
];

/// One randomized gradient check of kernel `name`; returns its relative error.
pub fn kernel_case(name: &str, seed: u64) -> f64 {
    let mut r = rng(seed);
    // At least 2×2, so no instance rests on one scalar sitting at a
    // stationary point, where any relative error is noise.
    let m = r.random_range(2..5usize);
    let k = r.random_range(2..6usize);
    let n = r.random_range(1..5usize);
    let s = seed ^ 0xabcd;
    match name {
        "matmul" => gradcheck(&[randn(&[m, k], 1.0, &mut r), randn(&[k, n], 1.0, &mut r)], s, |t, v| t.matmul(v[0], v[1]).unwrap()),
        "matmul_nt" => gradcheck(&[randn(&[m, k], 1.0, &mut r), randn(&[n, k], 1.0, &mut r)], s, |t, v| t.matmul_nt(v[0], v[1]).unwrap()),
        "add" => gradcheck(&[randn(&[m, k], 1.0, &mut r), randn(&[m, k], 1.0, &mut r)], s, |t, v| t.add(v[0], v[1]).unwrap()),
        "add_row" => gradcheck(&[randn(&[m, k], 1.0, &mut r), randn(&[k], 1.0, &mut r)], s, |t, v| t.add_row(v[0], v[1]).unwrap()),
        "mul" => gradcheck(&[randn(&[m, k], 1.0, &mut r), randn(&[m, k], 1.0, &mut r)], s, |t, v| t.mul(v[0], v[1]).unwrap()),
        "scale" => {
            let factor = r.random_range(-3.0f32..3.0);
            gradcheck(&[randn(&[m, k], 1.0, &mut r)], s, move |t, v| t.scale(v[0], factor).unwrap())
        }
        "sum" => gradcheck(&[randn(&[m, k], 1.0, &mut r)], s, |t, v| {
            let o = t.sum(v[0]).unwrap();
            t.mul(o, o).unwrap()
        }),
        "mean_rows" => gradcheck(&[randn(&[m, k], 1.0, &mut r)], s, |t, v| t.mean_rows(v[0]).unwrap()),
        "gelu" => gradcheck(&[randn(&[m, k], 1.5, &mut r)], s, |t, v| t.gelu(v[0]).unwrap()),
        "softmax_rows" => gradcheck(&[randn(&[m, k + 1], 1.5, &mut r)], s, |t, v| t.softmax_rows(v[0]).unwrap()),
        "layer_norm" => {
            // Rows of width >= 4 and spread well beyond the probe step: with
            // two or three nearly equal entries the normalized output
            // swings over a distance comparable to eps.
            let d = k + 3;
            gradcheck(
                &[randn(&[m, d], 3.0, &mut r), randn(&[d], 1.0, &mut r), randn(&[d], 1.0, &mut r)],
                s,
                |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
            )
        }
        "embedding" => {
            let rows = n + 2;
            let ids: Vec<u32> = (0..m + 2).map(|_| r.random_range(0..rows as u32)).collect();
            gradcheck(&[randn(&[rows, k], 1.0, &mut r)], s, move |t, v| t.embedding(v[0], &ids).unwrap())
        }
        "slice_rows" => {
            let rows = m + 3;
            let start = r.random_range(0..rows - 1);
            let len = r.random_range(1..=rows - start);
            gradcheck(&[randn(&[rows, k], 1.0, &mut r)], s, move |t, v| t.slice_rows(v[0], start, len).unwrap())
        }
        "causal_attention" => {
            let heads = r.random_range(1..3usize);
            let d = heads * r.random_range(1..4usize);
            let tlen = r.random_range(1..6usize);
            gradcheck(
                &[
                    randn(&[tlen, d], 1.0, &mut r),
                    randn(&[tlen, d], 1.0, &mut r),
                    randn(&[tlen, d], 1.0, &mut r),
                ],
                s,
                move |t, v| t.causal_attention(v[0], v[1], v[2], heads).unwrap(),
            )
        }
        "cross_entropy" => {
            let vocab = k + 1;
            let targets: Vec<u32> = (0..m).map(|_| r.random_range(0..vocab as u32)).collect();
            gradcheck(&[randn(&[m, vocab], 2.0, &mut r)], s, move |t, v| t.cross_entropy(v[0], &targets).unwrap())
        }
        "mse" => {
            let targets: Vec<f32> = (0..m * k).map(|_| r.random_range(-3.0f32..3.0)).collect();
            gradcheck(&[randn(&[m, k], 1.0, &mut r)], s, move |t, v| t.mse(v[0], &targets).unwrap())
        }
        "dropout" => gradcheck(&[randn(&[m, k], 1.0, &mut r)], s, |t, v| {
            // A fresh RNG per evaluation keeps the mask fixed.
            t.dropout(v[0], 0.3, &mut rng(s)).unwrap()
        }),
        "lora_delta" => {
            let d = k + 2;
            let rank = r.random_range(1..=d.min(3));
            let w = init_model(&TransformerConfig {
                context_length: 8,
                model_dim: d,
                num_layers: 1,
                num_heads: 1,
                mlp_hidden: 4,
                ..Default::default()
            })
            .unwrap();
            let set = attach_adapters(
                &w,
                &LoraConfig {
                    rank,
                    dropout: 0.0,
                    ..Default::default()
                },
            )
            .unwrap();
            let adapter = set.adapters()[0].clone();
            gradcheck(
                &[randn(&[m, d], 1.0, &mut r), randn(&[rank, d], 1.0, &mut r), randn(&[d, rank], 1.0, &mut r)],
                s,
                move |t, v| adapter.delta_on_tape(t, (v[1], v[2]), v[0], None).unwrap(),
            )
        }
        "model" => model_case(seed).0,
        other => panic!("no gradient case for {other}"),
    }
}

pub fn desk_config(context_length: usize, model_dim: usize, num_layers: usize) -> TransformerConfig {
    TransformerConfig {
        context_length,
        model_dim,
        num_layers,
        num_heads: 2,
        mlp_hidden: 2 * model_dim,
        ..Default::default()
    }
}

/// Chunk NLL with the final log-softmax and mean taken in f64 from the f32
/// logits, so the objective is not rounded at loss magnitude.
pub fn nll_f64(weights: &TransformerWeights, ids: &[TokenId], adapters: Option<&AdapterSet>) -> f64 {
    let lp = model::sequence_logprobs(weights, ids, adapters).unwrap();
    -lp.iter().sum::<f64>() / lp.len() as f64
}

/// Gradient check of the chunk loss of a 2-layer width-16 model with
/// adapters, over every base and adapter parameter. Returns the relative
/// error and the number of parameters checked.
pub fn model_case(seed: u64) -> (f64, usize) {
    model_case_with(seed, 0.3, FD_EPS)
}

pub fn model_case_with(seed: u64, std: f32, eps: f32) -> (f64, usize) {
    let mut r = rng(seed);
    let mut weights = init_model(&desk_config(8, 16, 2)).unwrap();
    randomize_weights(&mut weights, std, &mut r);
    let mut set = attach_adapters(
        &weights,
        &LoraConfig {
            rank: 2,
            dropout: 0.0,
            ..Default::default()
        },
    )
    .unwrap();
    for a in set.adapters_mut() {
        a.b = randn(a.b.shape(), std, &mut r);
    }
    let ids: Vec<TokenId> = (0..6).map(|_| r.random_range(3..259u32)).collect();

    let mut tape = Tape::new();
    let bw = weights.bind(&mut tape, true);
    let ba = set.bind(&mut tape, true);
    let loss = model::chunk_nll_on_tape(&weights, &mut tape, &bw, Some((&set, &ba)), &ids, None).unwrap();
    let grads = tape.backward(loss).unwrap();
    weights.zero_grads();
    set.zero_grads();
    bw.accumulate(&grads, &mut weights).unwrap();
    ba.accumulate(&grads, &mut set).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let n_base = weights.named_params().len();
    for p in 0..n_base {
        let x = weights.named_params()[p].1.clone();
        analytic.extend(x.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]));
        let mut probe_w = weights.clone();
        let fd = finite_difference_grad(
            |probe| {
                probe_w.params_mut()[p].data_mut().copy_from_slice(probe.data());
                nll_f64(&probe_w, &ids, Some(&set))
            },
            &x,
            eps,
        )
        .unwrap();
        numeric.extend_from_slice(fd.data());
    }
    for i in 0..set.len() {
        for which in 0..2 {
            let x = {
                let a = &set.adapters()[i];
                if which == 0 { a.a.clone() } else { a.b.clone() }
            };
            analytic.extend(x.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]));
            let mut probe_set = set.clone();
            let fd = finite_difference_grad(
                |probe| {
                    let a = &mut probe_set.adapters_mut()[i];
                    let slot = if which == 0 { &mut a.a } else { &mut a.b };
                    slot.data_mut().copy_from_slice(probe.data());
                    nll_f64(&weights, &ids, Some(&probe_set))
                },
                &x,
                eps,
            )
            .unwrap();
            numeric.extend_from_slice(fd.data());
        }
    }
    (relative_error(&analytic, &numeric), analytic.len())
}

/// Stub whose every token has the same log-probability `ln(1/V)`.
pub struct UniformStub {
    pub vocab: usize,
}

impl ModelBackend for UniformStub {
    fn id(&self) -> &str {
        "uniform"
    }
    fn supports(&self, _: Capability) -> bool {
        true
    }
    fn continuation_logprobs(&self, _: &[TokenId], c: &[TokenId]) -> EvalResult<Vec<f64>> {
        Ok(vec![-(self.vocab as f64).ln(); c.len()])
    }
    fn generate(&self, _: &str, _: &GenerationParams) -> EvalResult<String> {
        Ok(String::new())
    }
}

/// Random-init model of the given shape with seeded weights.
pub fn seeded_model(cfg: TransformerConfig, seed: u64) -> TransformerWeights {
    init_model(&TransformerConfig { seed, ..cfg }).unwrap()
}

pub fn random_ids(len: usize, r: &mut ChaCha8Rng) -> Vec<TokenId> {
    (0..len).map(|_| r.random_range(3..259u32)).collect()
}

pub fn adapters_for(weights: &TransformerWeights, rank: usize, seed: u64) -> AdapterSet {
    attach_adapters(
        weights,
        &LoraConfig {
            rank,
            seed,
            ..Default::default()
        },
    )
    .unwrap()
}
