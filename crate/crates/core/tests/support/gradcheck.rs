//! Gradient-check fixtures shared by the gradient tests and the acceptance
//! suite.
//!
//! Full-model losses are checked against a central difference of the scalar
//! reference loss evaluated in double-double arithmetic. A plain f64 central
//! difference cannot resolve derivative components much below
//! `ulp(loss) / epsilon`, and deep recurrences have many such components.

use std::collections::BTreeMap;

use metainflect::adcore::{finite_difference_check, max_relative_error, NodeId, ParamSet, Tape, Tensor};
use metainflect::corpus::{parse_dataset, LanguageId, Vocabulary};
use metainflect::models::{EncodedExample, Model, ModelDims, ModelKind};
use metainflect::seeded_rng;
use rand::Rng;

use super::dd::{Real, DD};
use super::reference::{batch_loss, RefParams};

pub const FD_EPSILON: f64 = 1e-9;

pub struct Instance {
    pub model: Model,
    pub params: ParamSet,
    pub batch: Vec<EncodedExample>,
}

fn word<R: Rng>(rng: &mut R, alphabet: &[u8], max_len: usize) -> String {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())] as char).collect()
}

/// Two random examples with words of at most five characters, small random
/// dimensions and parameters drawn at one of two scales.
pub fn random_instance(kind: ModelKind, seed: u64) -> Instance {
    let mut rng = seeded_rng(seed);
    let tags = ["V", "N", "PST", "PL"];
    let mut text = String::new();
    for _ in 0..2 {
        let lemma = word(&mut rng, b"abcd", 5);
        let form = word(&mut rng, b"abcde", 5);
        let t = tags[rng.random_range(0..tags.len())];
        text.push_str(&format!("{lemma}\t{form}\t{t}\n"));
    }
    let ds = parse_dataset(&text, &LanguageId::new("xx")).unwrap();
    let vocab = Vocabulary::build(&[&ds]).unwrap();
    let dims = ModelDims::new(rng.random_range(2..=3), rng.random_range(2..=5), rng.random_range(2..=3));
    let model = Model::new(kind, dims, vocab).unwrap();
    let scale = if seed % 2 == 0 { 1.0 } else { 4.0 };
    let base = model.init_params(&mut rng);
    let mut params = ParamSet::new();
    for (name, t) in base.iter() {
        params.insert(name.clone(), t.map(|x| x * scale));
    }
    let batch = model.encode_all(&ds.examples);
    Instance { model, params, batch }
}

/// Largest relative error between the model's analytic gradient and the
/// double-double central difference of the reference loss.
pub fn model_gradient_error(inst: &Instance) -> f64 {
    let (_, grads) = inst.model.loss_and_grad(&inst.params, &inst.batch).unwrap();
    let kind = inst.model.kind();
    let eps = DD::new(FD_EPSILON);
    max_relative_error(&grads, &inst.params, |name, i| {
        let x = DD::new(inst.params.get(name).unwrap().data()[i]);
        let plus = batch_loss(&RefParams::with_override(&inst.params, Some((name, i, x + eps))), kind, &inst.batch);
        let minus = batch_loss(&RefParams::with_override(&inst.params, Some((name, i, x - eps))), kind, &inst.batch);
        Ok(((plus - minus) / (eps + eps)).to_f64())
    })
    .unwrap()
}

/// Absolute difference between the model loss and the f64 reference loss.
pub fn reference_loss_gap(inst: &Instance) -> f64 {
    let model = inst.model.loss(&inst.params, &inst.batch).unwrap();
    let reference: f64 = batch_loss(&RefParams::with_override(&inst.params, None), inst.model.kind(), &inst.batch);
    (model - reference).abs()
}

type Build = fn(&mut Tape, &BTreeMap<String, NodeId>) -> NodeId;

/// One small graph per operation kind. Each returns a node whose value is
/// reduced to a scalar through a fixed random projection.
pub fn op_cases() -> Vec<(&'static str, ParamSet, Build)> {
    let mut rng = seeded_rng(7);
    let mut t = |shape: &[usize]| Tensor::uniform(shape, 1.0, &mut rng);
    let ab = ParamSet::new().with("a", t(&[2, 3])).with("b", t(&[2, 3]));
    let one = ParamSet::new().with("a", t(&[2, 3]));
    let seq = ParamSet::new().with("a", t(&[2, 4, 3])).with("b", t(&[2, 3]));
    let cases: Vec<(&'static str, ParamSet, Build)> = vec![
        ("matmul", ParamSet::new().with("a", t(&[2, 3])).with("b", t(&[3, 4])), |g, p| g.matmul(p["a"], p["b"])),
        ("add", ab.clone(), |g, p| g.add(p["a"], p["b"])),
        ("sub", ab.clone(), |g, p| g.sub(p["a"], p["b"])),
        ("mul", ab.clone(), |g, p| g.mul(p["a"], p["b"])),
        ("add_row", ParamSet::new().with("a", t(&[2, 3])).with("r", t(&[3])), |g, p| g.add_row(p["a"], p["r"])),
        ("mul_col", ParamSet::new().with("a", t(&[2, 3])).with("c", t(&[2, 1])), |g, p| g.mul_col(p["a"], p["c"])),
        ("scale", one.clone(), |g, p| g.scale(p["a"], -1.7)),
        ("add_scalar", one.clone(), |g, p| {
            let x = g.add_scalar(p["a"], 0.3);
            g.mul(x, x)
        }),
        ("sigmoid", one.clone(), |g, p| g.sigmoid(p["a"])),
        ("tanh", one.clone(), |g, p| g.tanh(p["a"])),
        ("log_floor", one.clone(), |g, p| {
            let s = g.sigmoid(p["a"]);
            g.log_floor(s, 1e-12)
        }),
        ("slice_cols", one.clone(), |g, p| {
            let s = g.slice_cols(p["a"], 1, 3);
            g.mul(s, s)
        }),
        ("concat_cols", ab.clone(), |g, p| {
            let c = g.concat_cols(&[p["a"], p["b"], p["a"]]);
            g.tanh(c)
        }),
        ("gather_rows", ParamSet::new().with("a", t(&[4, 3])), |g, p| {
            let r = g.gather_rows(p["a"], vec![2, 0, 2, 3]);
            g.mul(r, r)
        }),
        ("stack_mid", ab.clone(), |g, p| {
            let s = g.stack_mid(&[p["a"], p["b"], p["a"]]);
            g.tanh(s)
        }),
        ("reshape", ParamSet::new().with("a", t(&[2, 6])), |g, p| {
            let r = g.reshape(p["a"], &[2, 3, 2]);
            g.tanh(r)
        }),
        ("add_mid", seq.clone(), |g, p| {
            let s = g.add_mid(p["a"], p["b"]);
            g.tanh(s)
        }),
        ("softmax", ParamSet::new().with("a", t(&[2, 4])), |g, p| g.softmax(p["a"], None)),
        ("softmax_masked", ParamSet::new().with("a", t(&[2, 4])), |g, p| {
            g.softmax(p["a"], Some(vec![true, true, false, true, true, false, true, false]))
        }),
        ("weighted_sum", ParamSet::new().with("w", t(&[2, 4])).with("v", t(&[2, 4, 3])), |g, p| {
            let w = g.softmax(p["w"], None);
            g.weighted_sum(w, p["v"])
        }),
        ("scatter_cols", ParamSet::new().with("a", t(&[2, 3])), |g, p| {
            let s = g.scatter_cols(p["a"], vec![1, 4, 1, 0, 0, 2], 5);
            g.mul(s, s)
        }),
        ("pick_cols", ParamSet::new().with("a", t(&[3, 4])), |g, p| {
            let s = g.pick_cols(p["a"], vec![3, 0, 3]);
            g.tanh(s)
        }),
        ("row_select", ab.clone(), |g, p| {
            let s = g.row_select(vec![true, false], p["a"], p["b"]);
            g.mul(s, s)
        }),
        ("sum", one, |g, p| {
            let s = g.sigmoid(p["a"]);
            let total = g.sum(s);
            g.mul(total, total)
        }),
    ];
    cases
}

/// Runs `finite_difference_check` on one op case after projecting its output
/// onto a fixed random tensor.
pub fn op_gradient_error(params: &ParamSet, build: Build, seed: u64) -> f64 {
    let loss = |p: &ParamSet| {
        let mut tape = Tape::new();
        let nodes = tape.params(p);
        let out = build(&mut tape, &nodes);
        let shape = tape.value(out).shape().to_vec();
        let proj = Tensor::uniform(&shape, 1.0, &mut seeded_rng(seed));
        let c = tape.constant(proj);
        let y = tape.mul(out, c);
        let l = tape.sum(y);
        let value = tape.value(l).item();
        Ok((value, tape.backward(l)?))
    };
    finite_difference_check(loss, params, 1e-5).unwrap()
}

/// Randomized variants of every op case: parameters are redrawn per seed.
pub fn randomized_op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = seeded_rng(seed);
    op_cases()
        .into_iter()
        .map(|(name, params, build)| {
            let mut fresh = ParamSet::new();
            for (n, t) in params.iter() {
                fresh.insert(n.clone(), Tensor::uniform(t.shape(), 1.5, &mut rng));
            }
            (name, op_gradient_error(&fresh, build, seed))
        })
        .collect()
}
