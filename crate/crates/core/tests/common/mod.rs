#![allow(dead_code)]

use lat_core::params::{init, Bound, ParamSet};
use lat_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    init::normal(&mut rng(seed), shape, 1.0).unwrap()
}

/// Uniform samples in [-1, 1].
pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..=1.0)).unwrap()
}

/// Moves every parameter to a random point in [-1, 1]. Zero-initialized
/// biases otherwise feed layer norm an exactly constant row, where the
/// curvature is too high for a 1e-4 central difference.
pub fn randomize(params: &mut ParamSet<f64>, seed: u64) {
    let mut r = rng(seed);
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = r.random_range(-1.0..=1.0));
    }
}

/// Denominator floor: gradients that vanish identically (e.g. a key bias under
/// softmax shift invariance) leave only rounding noise on both sides.
pub const FD_NORM_FLOOR: f64 = 1e-5;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖ + ‖n‖, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(FD_NORM_FLOOR)
}

/// Reduces any output to a scalar with fixed random weights so every
/// Jacobian entry takes part.
fn project(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    if shape.is_empty() {
        return Ok(out);
    }
    let w = tape.constant(randn(&shape, 0xfeed));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Largest relative error over `inputs` between backprop and central differences of `f`.
pub fn check_inputs(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        let l = project(&mut tape, out).unwrap();
        tape.scalar_value(l).unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(&x.clone().with_grad())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let l = project(&mut tape, out).unwrap();
    let grads = tape.backward(l).unwrap();

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map_or_else(|| vec![0.0; x.numel()], |g| g.data().to_vec());
        let mut numeric = Vec::with_capacity(x.numel());
        let mut work = inputs.to_vec();
        for k in 0..x.numel() {
            let orig = x.data()[k];
            work[i].data_mut()[k] = orig + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[k] = orig - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Largest relative error over every parameter tensor of `params`.
pub fn check_params(params: &ParamSet<f64>, f: impl Fn(&mut Tape<f64>, &Bound) -> Result<Var>) -> f64 {
    let eval = |p: &ParamSet<f64>| -> f64 {
        let mut tape = Tape::new();
        let bound = p.bind_frozen(&mut tape);
        let l = f(&mut tape, &bound).unwrap();
        tape.scalar_value(l).unwrap()
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let l = f(&mut tape, &bound).unwrap();
    let grads = tape.backward(l).unwrap();

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for id in params.ids() {
        let x = params.get(id);
        let analytic = grads
            .get(bound.var(id))
            .map_or_else(|| vec![0.0; x.numel()], |g| g.data().to_vec());
        let mut numeric = Vec::with_capacity(x.numel());
        for k in 0..x.numel() {
            let orig = x.data()[k];
            work.get_mut(id).data_mut()[k] = orig + FD_STEP;
            let up = eval(&work);
            work.get_mut(id).data_mut()[k] = orig - FD_STEP;
            let down = eval(&work);
            work.get_mut(id).data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let e = relative_error(&analytic, &numeric);
        assert!(e.is_finite(), "{}", params.name(id));
        worst = worst.max(e);
    }
    worst
}

/// Plain `-mean log(exp(s_ii/τ) / Σ exp(s_·/τ))` without max subtraction.
/// `rows = true` normalizes each row over columns.
pub fn naive_info_nce(sim: &[Vec<f64>], tau: f64, rows: bool) -> f64 {
    let n = sim.len();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n)
            .map(|j| if rows { sim[i][j] } else { sim[j][i] })
            .map(|s| (s / tau).exp())
            .sum();
        total += -((sim[i][i] / tau).exp() / denom).ln();
    }
    total / n as f64
}

/// Rank of the diagonal entry by sorting each row (descending, true item after equal scores).
pub fn sorted_ranks(scores: &[f64], queries: usize, gallery: usize) -> Vec<usize> {
    (0..queries)
        .map(|q| {
            let row = &scores[q * gallery..(q + 1) * gallery];
            let mut order: Vec<usize> = (0..gallery).collect();
            // descending score; among equal scores the true item goes last
            order.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .unwrap()
                    .then_with(|| (a == q).cmp(&(b == q)))
            });
            order.iter().position(|&j| j == q).unwrap() + 1
        })
        .collect()
}

pub fn naive_median(ranks: &[usize]) -> f64 {
    let mut s = ranks.to_vec();
    s.sort();
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0
    }
}

pub mod gradcases {
    use super::*;
    use lat_core::attention::{DecoderStack, MultiHeadAttention};
    use lat_core::bank::MemoryBank;
    use lat_core::data::{generate_synthetic, Modality, SyntheticConfig};
    use lat_core::losses::{batch_objective, LossWeights};
    use lat_core::{ModelConfig, TranslationMethod, TranslatorPair};

    type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

    fn op(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> (String, Vec<Tensor<f64>>, OpFn) {
        let inputs = shapes.iter().enumerate().map(|(i, s)| uniform(s, 100 + i as u64)).collect();
        (name.to_string(), inputs, Box::new(f))
    }

    /// Every differentiable tape operation with representative shapes.
    pub fn tape_ops() -> Vec<(String, Vec<Tensor<f64>>, OpFn)> {
        vec![
            op("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
            op("matmul rank 3", &[&[2, 3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
            op("bmm", &[&[2, 3, 4], &[2, 4, 5]], |t, v| t.bmm(v[0], v[1])),
            op("transpose", &[&[3, 4]], |t, v| t.transpose(v[0])),
            op("transpose rank 3", &[&[2, 3, 4]], |t, v| t.transpose(v[0])),
            op("add", &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1])),
            op("sub", &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1])),
            op("mul", &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1])),
            op("add_broadcast vector", &[&[2, 3, 4], &[4]], |t, v| t.add_broadcast(v[0], v[1])),
            op("add_broadcast matrix", &[&[2, 3, 4], &[3, 4]], |t, v| t.add_broadcast(v[0], v[1])),
            op("scale", &[&[2, 3]], |t, v| t.scale(v[0], 0.7)),
            op("gelu", &[&[3, 4]], |t, v| t.gelu(v[0])),
            op("softmax", &[&[3, 5]], |t, v| t.softmax(v[0])),
            op("log_softmax", &[&[3, 5]], |t, v| t.log_softmax(v[0])),
            op("layer_norm", &[&[2, 3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
            op("l2_normalize", &[&[3, 4]], |t, v| t.l2_normalize(v[0])),
            op("sum", &[&[2, 3]], |t, v| t.sum(v[0])),
            op("mean", &[&[2, 3]], |t, v| t.mean(v[0])),
            op("mean_axis 0", &[&[2, 3, 4]], |t, v| t.mean_axis(v[0], 0)),
            op("mean_axis 1", &[&[2, 3, 4]], |t, v| t.mean_axis(v[0], 1)),
            op("mean_axis 2", &[&[2, 3, 4]], |t, v| t.mean_axis(v[0], 2)),
            op("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
            op("concat axis 0", &[&[2, 3], &[1, 3]], |t, v| t.concat(&[v[0], v[1]], 0)),
            op("concat axis 1", &[&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
            op("slice", &[&[2, 5, 3]], |t, v| t.slice(v[0], 1, 1, 3)),
            op("gather", &[&[4, 3]], |t, v| t.gather(v[0], &[2, 0, 2])),
            op("diagonal", &[&[3, 4]], |t, v| t.diagonal(v[0])),
            op("split_heads", &[&[2, 3, 8]], |t, v| t.split_heads(v[0], 2)),
            op("merge_heads", &[&[4, 3, 4]], |t, v| t.merge_heads(v[0], 2)),
        ]
    }

    /// Attention, the decoder stack and the full objective; `(name, error)` pairs.
    pub fn module_errors() -> Vec<(String, f64)> {
        let mut out = Vec::new();
        let (d, heads) = (8, 2);

        let mut params = ParamSet::<f64>::new();
        let mha = MultiHeadAttention::new(&mut params, "mha", d, heads, &mut rng(1)).unwrap();
        randomize(&mut params, 21);
        let q = uniform(&[2, 3, d], 11);
        let kv = uniform(&[2, 4, d], 12);
        {
            let (q, kv) = (q.clone(), kv.clone());
            out.push((
                "attention parameters".into(),
                check_params(&params, |t, b| {
                    let (qv, kvv) = (t.constant(q.clone()), t.constant(kv.clone()));
                    let y = mha.forward(t, b, qv, kvv, kvv)?;
                    project(t, y)
                }),
            ));
        }
        {
            let p = params.clone();
            let mha = mha.clone();
            out.push((
                "attention inputs".into(),
                check_inputs(&[q, kv], move |t, v| {
                    let b = p.bind_frozen(t);
                    mha.forward(t, &b, v[0], v[1], v[1])
                }),
            ));
        }

        let mut params = ParamSet::<f64>::new();
        let stack = DecoderStack::new(&mut params, "dec", d, heads, 2, &mut rng(2)).unwrap();
        randomize(&mut params, 22);
        let queries = uniform(&[3, d], 3);
        let source = uniform(&[2, 4, d], 13);
        {
            let (p, s, src) = (params.clone(), stack.clone(), source.clone());
            out.push((
                "decoder w.r.t. queries".into(),
                check_inputs(&[queries.clone()], move |t, v| {
                    let b = p.bind_frozen(t);
                    let x = t.constant(src.clone());
                    s.forward(t, &b, v[0], x)
                }),
            ));
        }
        out.push((
            "decoder parameters".into(),
            check_params(&params, |t, b| {
                let (qv, sv) = (t.constant(queries.clone()), t.constant(source.clone()));
                let y = stack.forward(t, b, qv, sv)?;
                project(t, y)
            }),
        ));

        for method in [TranslationMethod::Decoder, TranslationMethod::Transformer, TranslationMethod::Linear] {
            let e = objective_error(method);
            out.push((format!("full objective ({method})"), e));
        }
        out
    }

    /// Composite objective on a 2-item batch with memory-bank negatives.
    pub fn objective_error(method: TranslationMethod) -> f64 {
        let set = generate_synthetic(&SyntheticConfig {
            items: 4,
            dim: 8,
            tokens_visual: 3,
            tokens_text: 4,
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        let mut cfg = ModelConfig::new(method, 8, 3, 4);
        cfg.heads = 2;
        cfg.depth = 1;
        cfg.seed = 5;
        let mut model = TranslatorPair::<f64>::new(cfg).unwrap();
        randomize(&mut model.params, 23);
        let (v, t) = set.batch::<f64>(&[0, 1]).unwrap();
        let (bv, bt) = set.batch::<f64>(&[2, 3]).unwrap();
        let mut bank = MemoryBank::<f64>::new(4, 8);
        bank.push(Modality::Visual, &lat_core::trainer::cls_rows(&bv).unwrap()).unwrap();
        bank.push(Modality::Text, &lat_core::trainer::cls_rows(&bt).unwrap()).unwrap();
        let negatives = bank.negatives();
        let weights = LossWeights::default();
        check_params(&model.params, |tape, b| {
            let (_, obj) = batch_objective(tape, b, &model, &v, &t, &weights, Some(&negatives))?;
            Ok(obj.total)
        })
    }
}
