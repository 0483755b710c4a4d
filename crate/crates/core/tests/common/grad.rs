//! Finite-difference checks of every differentiable operation, shared by
//! the gradient tests and the acceptance run.

use endx::aggregator::{aggregate_batch, register_aggregator, AggregatorConfig};
use endx::autodiff::{Graph, Var};
use endx::cross_attention::{cross_refine_batch, register_cross_attention, CrossAttentionConfig};
use endx::encoders::{encode_batch, register_encoder, EncodedBatch, EncoderConfig, EncoderKind, SeqBatch, Tower};
use endx::losses::{GamConfig, LossWeights};
use endx::model::{Model, ModelConfig};
use endx::params::{gradient_of, ParameterStore};
use endx::trainer::joint_loss;
use endx::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed, uneven weights so every
/// output entry contributes a distinct amount.
fn project(g: &mut Graph<f64>, out: Var) -> Var {
    let shape = g.shape(out).to_vec();
    let w = random(&shape, 991);
    let w = g.constant(w);
    let p = g.mul(out, w);
    g.sum(p)
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-10)
}

/// Compares backward against central differences for every input entry.
fn check_inputs(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, tol: f64) {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone(), true)).collect();
        let l = build(&mut g, &vars);
        g.check().unwrap();
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let l = build(&mut g, &vars);
    let grads = g.backward(l).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * H));
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < tol, "input {k}: relative error {e:e}\nanalytic {analytic:?}\nnumeric {numeric:?}");
    }
}

/// Same check for named parameters, probing up to `probes` entries each.
fn check_store(
    store: &ParameterStore<f64>,
    build: impl Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Var,
    tol: f64,
    probes: usize,
    only: impl Fn(&str) -> bool,
) {
    let mut g = Graph::new();
    let l = build(&mut g, store);
    let grads = gradient_of(&g, l, store).unwrap();
    let eval = |s: &ParameterStore<f64>| {
        let mut g = Graph::new();
        let l = build(&mut g, s);
        g.check().unwrap();
        g.value(l).data()[0]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let names: Vec<String> = store.names().filter(|n| only(n)).map(str::to_string).collect();
    assert!(!names.is_empty());
    for name in names {
        let base = store.get(&name).unwrap().clone();
        let picks: Vec<usize> = if base.len() <= probes {
            (0..base.len()).collect()
        } else {
            (0..probes).map(|_| rng.gen_range(0..base.len())).collect()
        };
        for i in picks {
            let mut s = store.clone();
            let mut t = base.clone();
            t.data_mut()[i] += H;
            s.set(&name, t).unwrap();
            let up = eval(&s);
            let mut t = base.clone();
            t.data_mut()[i] -= H;
            s.set(&name, t).unwrap();
            let down = eval(&s);
            let a = grads[&name].data()[i];
            let n = (up - down) / (2.0 * H);
            analytic.push(a);
            numeric.push(n);
            let local = (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
            assert!(local < 1e-2 || (a - n).abs() < 1e-7, "{name}[{i}]: analytic {a} numeric {n}");
        }
    }
    let e = rel_err(&analytic, &numeric);
    assert!(e < tol, "relative error {e:e}");
}

pub fn matmul_all_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { random(&[4, 3], 1) } else { random(&[3, 4], 1) };
        let b = if tb { random(&[2, 4], 2) } else { random(&[4, 2], 2) };
        check_inputs(&[a, b], |g, v| {
            let m = g.matmul_t(v[0], v[1], ta, tb);
            project(g, m)
        }, 1e-5);
    }
}

pub fn batch_matmul_plain_and_transposed() {
    for tb in [false, true] {
        let b = if tb { random(&[2, 5, 4], 4) } else { random(&[2, 4, 5], 4) };
        check_inputs(&[random(&[2, 3, 4], 3), b], |g, v| {
            let m = g.batch_matmul(v[0], v[1], tb);
            project(g, m)
        }, 1e-5);
    }
}

pub fn elementwise_binary() {
    let x = random(&[3, 4], 5);
    let y = random(&[3, 4], 6);
    check_inputs(&[x.clone(), y.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        project(g, s)
    }, 1e-5);
    check_inputs(&[x.clone(), y.clone()], |g, v| {
        let s = g.sub(v[0], v[1]);
        project(g, s)
    }, 1e-5);
    check_inputs(&[x, y], |g, v| {
        let s = g.mul(v[0], v[1]);
        project(g, s)
    }, 1e-5);
}

pub fn bias_and_scale() {
    check_inputs(&[random(&[3, 4], 7), random(&[4], 8)], |g, v| {
        let s = g.add_bias(v[0], v[1]);
        let s = g.scale(s, -1.7);
        project(g, s)
    }, 1e-5);
}

pub fn pointwise_nonlinearities() {
    let x = random(&[4, 5], 9);
    check_inputs(std::slice::from_ref(&x), |g, v| {
        let s = g.tanh(v[0]);
        project(g, s)
    }, 1e-5);
    check_inputs(std::slice::from_ref(&x), |g, v| {
        let s = g.sigmoid(v[0]);
        project(g, s)
    }, 1e-5);
    check_inputs(std::slice::from_ref(&x), |g, v| {
        let s = g.exp(v[0]);
        project(g, s)
    }, 1e-5);
    // keep entries away from the kink
    let shifted = Tensor::new(x.shape(), x.data().iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v }).collect()).unwrap();
    check_inputs(&[shifted], |g, v| {
        let s = g.relu(v[0]);
        project(g, s)
    }, 1e-5);
}

pub fn softmax_with_and_without_mask() {
    let x = random(&[3, 4], 10);
    check_inputs(std::slice::from_ref(&x), |g, v| {
        let s = g.softmax(v[0], None);
        project(g, s)
    }, 1e-5);
    let mask: Vec<bool> = (0..12).map(|k| k % 4 != k / 4).collect();
    check_inputs(&[x], move |g, v| {
        let s = g.softmax(v[0], Some(&mask));
        project(g, s)
    }, 1e-5);
}

pub fn layer_norm_all_inputs() {
    check_inputs(&[random(&[3, 5], 11), random(&[5], 12), random(&[5], 13)], |g, v| {
        let s = g.layer_norm(v[0], v[1], v[2]);
        project(g, s)
    }, 1e-5);
}

pub fn gather_rows() {
    check_inputs(&[random(&[5, 3], 14)], |g, v| {
        let s = g.gather(v[0], &[4, 0, 4, 2]);
        project(g, s)
    }, 1e-5);
}

pub fn shape_plumbing() {
    let x = random(&[2 * 3, 4], 15);
    check_inputs(std::slice::from_ref(&x), |g, v| {
        let s = g.reshape(v[0], &[3, 8]);
        project(g, s)
    }, 1e-5);
    check_inputs(&[random(&[2, 3, 4], 16)], |g, v| {
        let s = g.transpose(v[0]);
        project(g, s)
    }, 1e-5);
    check_inputs(std::slice::from_ref(&x), |g, v| {
        let s = g.split_heads(v[0], 2, 3, 2);
        project(g, s)
    }, 1e-5);
    check_inputs(&[random(&[4, 3, 2], 17)], |g, v| {
        let s = g.merge_heads(v[0], 2, 3, 2);
        project(g, s)
    }, 1e-5);
    check_inputs(std::slice::from_ref(&x), |g, v| {
        let s = g.slice_cols(v[0], 1, 3);
        project(g, s)
    }, 1e-5);
    check_inputs(std::slice::from_ref(&x), |g, v| {
        let s = g.select_time(v[0], 1, 3);
        project(g, s)
    }, 1e-5);
    check_inputs(&[random(&[2, 4], 18), random(&[2, 4], 19), random(&[2, 4], 20)], |g, v| {
        let s = g.stack_time(v);
        project(g, s)
    }, 1e-5);
    check_inputs(std::slice::from_ref(&x), |g, v| {
        let s = g.row_mask(v[0], &[true, false, true, true, false, true]);
        project(g, s)
    }, 1e-5);
    check_inputs(&[random(&[3, 4], 21), random(&[3, 4], 22)], |g, v| {
        let s = g.row_blend(v[0], v[1], &[true, false, true]);
        project(g, s)
    }, 1e-5);
}

pub fn reductions() {
    check_inputs(&[random(&[3, 4], 23)], |g, v| g.sum(v[0]), 1e-5);
    check_inputs(&[random(&[3, 4], 24)], |g, v| g.mean(v[0]), 1e-5);
}

pub fn diagonal_cross_entropy() {
    check_inputs(&[random(&[4, 4], 25)], |g, v| g.diag_cross_entropy(v[0]), 1e-5);
}

pub fn kl_student_side() {
    let teacher = {
        let mut g = Graph::new();
        let t = g.constant(random(&[3, 4], 26));
        let p = g.softmax(t, None);
        g.value(p).clone()
    };
    check_inputs(&[random(&[3, 4], 27)], move |g, v| {
        let t = g.constant(teacher.clone());
        let s = g.softmax(v[0], None);
        g.kl_div(t, s)
    }, 1e-5);
}

pub fn squared_distances() {
    check_inputs(&[random(&[3, 4], 28), random(&[5, 4], 29)], |g, v| {
        let s = g.sq_dist(v[0], v[1]);
        project(g, s)
    }, 1e-5);
}

fn batch_of(g: &mut Graph<f64>, values: Tensor<f64>, lens: &[usize], len: usize) -> EncodedBatch {
    let mut mask = Vec::new();
    for &l in lens {
        mask.extend((0..len).map(|t| t < l));
    }
    let h = g.input(values, false);
    let h = g.row_mask(h, &mask);
    EncodedBatch { h, mask, batch: lens.len(), len }
}

pub fn cross_refine_parameters() {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut store = ParameterStore::new();
    register_cross_attention(&mut store, d, &mut rng).unwrap();
    let source = random(&[2 * 4, d], 31);
    let guide = random(&[2 * 3, d], 32);
    let cfg = CrossAttentionConfig { heads: 2 };
    check_store(&store, |g, s| {
        let src = batch_of(g, source.clone(), &[4, 2], 4);
        let gd = batch_of(g, guide.clone(), &[3, 1], 3);
        let out = cross_refine_batch(g, s, &cfg, &src, &gd).unwrap();
        project(g, out.h)
    }, 1e-5, 8, |_| true);
}

pub fn aggregator_parameters() {
    let d = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut store = ParameterStore::new();
    let cfg = AggregatorConfig { hops: 3, attention_dim: 5, embedding_dim: 4 };
    register_aggregator(&mut store, "agg", &cfg, d, &mut rng).unwrap();
    let x = random(&[2 * 4, d], 34);
    check_store(&store, |g, s| {
        let seq = batch_of(g, x.clone(), &[4, 2], 4);
        let out = aggregate_batch(g, s, "agg", &cfg, &seq).unwrap();
        project(g, out)
    }, 1e-5, 8, |_| true);
}

pub fn encoder_parameters_every_kind() {
    for kind in [EncoderKind::Transformer, EncoderKind::Rnn, EncoderKind::Gru, EncoderKind::Lstm] {
        let cfg = EncoderConfig { kind, layers: 2, model_dim: 4, heads: 2, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut store = ParameterStore::new();
        register_encoder(&mut store, &cfg, 9, Tower::Dual, &mut rng).unwrap();
        let seqs = SeqBatch::new(&[vec![2, 3, 4], vec![5, 8]]).unwrap();
        check_store(&store, |g, s| {
            let out = encode_batch(g, s, &cfg, Tower::Dual, &seqs).unwrap();
            project(g, out.h)
        }, 1e-5, 6, |_| true);
    }
}

fn toy_model() -> Model<f64> {
    let cfg = ModelConfig {
        vocab_size: 12,
        encoder: EncoderConfig { model_dim: 8, heads: 2, layers: 1, ..Default::default() },
        aggregator: AggregatorConfig { hops: 2, attention_dim: 6, embedding_dim: 0 },
        cross_attention: CrossAttentionConfig { heads: 2 },
    };
    Model::new(cfg, 17).unwrap()
}

/// The joint objective at full alignment weight. Dual parameters see every
/// term; the teacher is detached, so cross parameters must see exactly the
/// weighted cross loss and nothing else.
pub fn full_joint_objective() {
    let model = toy_model();
    let cfg = model.config.clone();
    let weights = LossWeights::default();
    let gam = GamConfig::default();
    let scheduled = gam.scheduled_weights(gam.warmup_epochs);
    let batches = [
        (vec![vec![2, 3, 4], vec![5, 6]], vec![vec![7, 8, 9, 10], vec![11, 3]]),
        (vec![vec![2, 3], vec![5, 6, 7], vec![9]], vec![vec![7, 8], vec![11, 3, 4], vec![10, 2, 6]]),
    ];
    for (qs, as_) in batches {
        let q = SeqBatch::new(&qs).unwrap();
        let a = SeqBatch::new(&as_).unwrap();
        let total = |g: &mut Graph<f64>, s: &ParameterStore<f64>| {
            let m = Model::from_params(cfg.clone(), s.clone()).unwrap();
            joint_loss(g, &m, &q, &a, &weights, &gam, &scheduled).unwrap().total
        };
        let cross_only = |g: &mut Graph<f64>, s: &ParameterStore<f64>| {
            let m = Model::from_params(cfg.clone(), s.clone()).unwrap();
            let lc = joint_loss(g, &m, &q, &a, &weights, &gam, &scheduled).unwrap().cross.unwrap();
            g.scale(lc, weights.cross)
        };
        check_store(&model.params, total, 1e-5, 6, |n| n.starts_with("dual."));
        check_store(&model.params, cross_only, 1e-5, 6, |n| n.starts_with("cross."));

        let mut g = Graph::new();
        let l = total(&mut g, &model.params);
        let from_total = gradient_of(&g, l, &model.params).unwrap();
        let mut g = Graph::new();
        let l = cross_only(&mut g, &model.params);
        let from_cross = gradient_of(&g, l, &model.params).unwrap();
        for (name, t) in from_total.iter().filter(|(n, _)| n.starts_with("cross.")) {
            let u = &from_cross[name];
            let diff = t.data().iter().zip(u.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "{name} receives alignment gradient ({diff:e})");
        }
    }
}

/// Every check, by name.
pub const CASES: &[(&str, fn())] = &[
    ("matmul_all_transposes", matmul_all_transposes),
    ("batch_matmul_plain_and_transposed", batch_matmul_plain_and_transposed),
    ("elementwise_binary", elementwise_binary),
    ("bias_and_scale", bias_and_scale),
    ("pointwise_nonlinearities", pointwise_nonlinearities),
    ("softmax_with_and_without_mask", softmax_with_and_without_mask),
    ("layer_norm_all_inputs", layer_norm_all_inputs),
    ("gather_rows", gather_rows),
    ("shape_plumbing", shape_plumbing),
    ("reductions", reductions),
    ("diagonal_cross_entropy", diagonal_cross_entropy),
    ("kl_student_side", kl_student_side),
    ("squared_distances", squared_distances),
    ("cross_refine_parameters", cross_refine_parameters),
    ("aggregator_parameters", aggregator_parameters),
    ("encoder_parameters_every_kind", encoder_parameters_every_kind),
    ("full_joint_objective", full_joint_objective),
];
