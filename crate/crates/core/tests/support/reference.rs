//! Scalar reference implementation of both model losses, one example at a
//! time, generic over the number type. It shares no code with the tape-based
//! models; only the parameter naming and storage order are common.

use std::collections::BTreeMap;

use metainflect::adcore::ParamSet;
use metainflect::models::{EncodedExample, ModelKind};

use super::dd::Real;

const PROB_FLOOR: f64 = 1e-12;

pub struct RefParams<R> {
    tensors: BTreeMap<String, (Vec<usize>, Vec<R>)>,
}

impl<R: Real> RefParams<R> {
    /// Converts `params`, replacing element `i` of tensor `name` by `value`.
    pub fn with_override(params: &ParamSet, over: Option<(&str, usize, R)>) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, t) in params.iter() {
            let mut data: Vec<R> = t.data().iter().map(|&x| R::from_f64(x)).collect();
            if let Some((n, i, v)) = over {
                if n == name {
                    data[i] = v;
                }
            }
            tensors.insert(name.clone(), (t.shape().to_vec(), data));
        }
        Self { tensors }
    }

    fn t(&self, name: &str) -> &(Vec<usize>, Vec<R>) {
        &self.tensors[name]
    }

    fn vec(&self, name: &str) -> &[R] {
        &self.t(name).1
    }

    /// Row vector times matrix: `z_j = sum_k x_k W[k, j]`.
    fn vm(&self, x: &[R], name: &str) -> Vec<R> {
        let (shape, w) = self.t(name);
        let (rows, cols) = (shape[0], shape[1]);
        assert_eq!(rows, x.len(), "{name}");
        (0..cols)
            .map(|j| {
                let mut s = R::zero();
                for (k, &xk) in x.iter().enumerate() {
                    s = s + xk * w[k * cols + j];
                }
                s
            })
            .collect()
    }

    fn emb(&self, id: usize) -> Vec<R> {
        let (shape, w) = self.t("emb");
        let e = shape[1];
        w[id * e..(id + 1) * e].to_vec()
    }

    fn hidden(&self) -> usize {
        self.t("dec.wh").0[0]
    }
}

fn add<R: Real>(a: &[R], b: &[R]) -> Vec<R> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

fn cat<R: Real>(parts: &[&[R]]) -> Vec<R> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn softmax<R: Real>(z: &[R]) -> Vec<R> {
    let m = z.iter().copied().fold(z[0], R::max);
    let e: Vec<R> = z.iter().map(|&x| (x - m).exp()).collect();
    let s = e.iter().copied().fold(R::zero(), |a, b| a + b);
    e.into_iter().map(|x| x / s).collect()
}

fn lstm<R: Real>(p: &RefParams<R>, prefix: &str, x: &[R], h: &[R], c: &[R]) -> (Vec<R>, Vec<R>) {
    let n = h.len();
    let z = add(&add(&p.vm(x, &format!("{prefix}.wx")), &p.vm(h, &format!("{prefix}.wh"))), p.vec(&format!("{prefix}.b")));
    let mut h2 = Vec::with_capacity(n);
    let mut c2 = Vec::with_capacity(n);
    for j in 0..n {
        let i = z[j].sigmoid();
        let f = z[n + j].sigmoid();
        let g = z[2 * n + j].tanh();
        let o = z[3 * n + j].sigmoid();
        let cj = f * c[j] + i * g;
        c2.push(cj);
        h2.push(o * cj.tanh());
    }
    (h2, c2)
}

struct Encoded<R> {
    states: Vec<Vec<R>>,
    fwd: Vec<R>,
    bwd: Vec<R>,
}

fn bilstm<R: Real>(p: &RefParams<R>, prefix: &str, ids: &[usize]) -> Encoded<R> {
    let n = p.hidden();
    let xs: Vec<Vec<R>> = ids.iter().map(|&i| p.emb(i)).collect();
    let run = |order: Vec<usize>, dir: &str| {
        let (mut h, mut c) = (vec![R::zero(); n], vec![R::zero(); n]);
        let mut out = vec![Vec::new(); ids.len()];
        for t in order {
            (h, c) = lstm(p, &format!("{prefix}_{dir}"), &xs[t], &h, &c);
            out[t] = h.clone();
        }
        (out, h)
    };
    let (f, fwd) = run((0..ids.len()).collect(), "fwd");
    let (b, bwd) = run((0..ids.len()).rev().collect(), "bwd");
    let states = f.iter().zip(&b).map(|(x, y)| cat(&[x, y])).collect();
    Encoded { states, fwd, bwd }
}

fn attention<R: Real>(p: &RefParams<R>, prefix: &str, states: &[Vec<R>], s: &[R]) -> (Vec<R>, Vec<R>) {
    let q = p.vm(s, &format!("{prefix}.wq"));
    let b = p.vec(&format!("{prefix}.b"));
    let scores: Vec<R> = states
        .iter()
        .map(|h| {
            let k = add(&add(&p.vm(h, &format!("{prefix}.wk")), &q), b);
            let t: Vec<R> = k.into_iter().map(R::tanh).collect();
            p.vm(&t, &format!("{prefix}.v"))[0]
        })
        .collect();
    let w = softmax(&scores);
    let mut ctx = vec![R::zero(); states[0].len()];
    for (wi, h) in w.iter().zip(states) {
        for (c, &x) in ctx.iter_mut().zip(h) {
            *c = *c + *wi * x;
        }
    }
    (ctx, w)
}

/// Mean negative log-likelihood of one example's target.
pub fn example_loss<R: Real>(p: &RefParams<R>, kind: ModelKind, ex: &EncodedExample) -> R {
    let (encs, prefixes): (Vec<Encoded<R>>, Vec<&str>) = match kind {
        ModelKind::Med => (vec![bilstm(p, "enc", &ex.primary)], vec!["att"]),
        ModelKind::Pg => (
            vec![bilstm(p, "tag", &ex.primary), bilstm(p, "chr", ex.chars.as_ref().unwrap())],
            vec!["att_tag", "att_chr"],
        ),
    };
    let finals: Vec<&[R]> = encs.iter().flat_map(|e| [e.fwd.as_slice(), e.bwd.as_slice()]).collect();
    let mut h: Vec<R> = add(&p.vm(&cat(&finals), "bridge.w"), p.vec("bridge.b"))
        .into_iter()
        .map(R::tanh)
        .collect();
    let mut c = vec![R::zero(); h.len()];
    let vout = p.vec("out.b").len();

    let steps = ex.target.len() - 1;
    let mut total = R::zero();
    for t in 1..=steps {
        let attended: Vec<(Vec<R>, Vec<R>)> = encs
            .iter()
            .zip(&prefixes)
            .map(|(e, pre)| attention(p, pre, &e.states, &h))
            .collect();
        let ctx: Vec<R> = attended.iter().flat_map(|(c, _)| c.iter().copied()).collect();
        let y = p.emb(ex.target[t - 1]);
        (h, c) = lstm(p, "dec", &cat(&[&y, &ctx]), &h, &c);
        let logits = add(&p.vm(&cat(&[&h, &ctx]), "out.w"), p.vec("out.b"));
        let mut probs = softmax(&logits);
        if kind == ModelKind::Pg {
            let z = p.vm(&ctx, "gate.wc")[0] + p.vm(&h, "gate.ws")[0] + p.vm(&y, "gate.wy")[0] + p.vec("gate.b")[0];
            let alpha = z.sigmoid();
            let mut copy = vec![R::zero(); vout];
            for (&w, &id) in attended[1].1.iter().zip(ex.chars.as_ref().unwrap()) {
                copy[id] = copy[id] + w;
            }
            probs = probs
                .iter()
                .zip(&copy)
                .map(|(&d, &k)| alpha * d + (R::one() - alpha) * k)
                .collect();
        }
        let gold = probs[ex.target[t]].max(R::from_f64(PROB_FLOOR));
        total = total - gold.ln();
    }
    total / R::from_f64(steps as f64)
}

/// Batch loss: mean of the per-example losses.
pub fn batch_loss<R: Real>(p: &RefParams<R>, kind: ModelKind, batch: &[EncodedExample]) -> R {
    let s = batch.iter().fold(R::zero(), |acc, ex| acc + example_loss(p, kind, ex));
    s / R::from_f64(batch.len() as f64)
}
