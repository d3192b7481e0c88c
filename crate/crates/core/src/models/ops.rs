//! Single-example entry points to the model components, working directly on
//! a parameter set.

use super::network::{self, Nodes, Padded};
use super::{infer_dims, infer_sizes, layout, EncodedExample, ModelKind};
use crate::adcore::{ParamSet, Tape, Tensor};
use crate::error::{Error, Result};

fn check_layout(kind: ModelKind, params: &ParamSet) -> Result<(usize, usize, usize)> {
    let dims = infer_dims(kind, params)?;
    let (vin, vout) = infer_sizes(params)?;
    for (name, shape) in layout(kind, dims, vin, vout) {
        let t = params.require(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ParamMismatch(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
        }
    }
    Ok((dims.hidden, vin, vout))
}

fn check_indices(seq: &[usize], size: usize, what: &str) -> Result<()> {
    match seq.iter().find(|&&i| i >= size) {
        Some(i) => Err(Error::VocabMismatch(format!("{what} symbol {i} outside vocabulary of {size}"))),
        None => Ok(()),
    }
}

/// Bidirectional encoding of one sequence with the encoder `prefix`
/// (`enc` for MED, `tag` or `chr` for PG). Entry `i` is
/// `[forward state i; backward state i]`.
pub fn bilstm_encode(params: &ParamSet, prefix: &str, seq: &[usize]) -> Result<Vec<Vec<f64>>> {
    if seq.is_empty() {
        return Err(Error::invalid("cannot encode an empty sequence"));
    }
    let emb = params.require("emb")?;
    check_indices(seq, emb.shape()[0], "input")?;
    let hidden = params.require(&format!("{prefix}_fwd.wh"))?.shape()[0];
    params.require(&format!("{prefix}_bwd.wh"))?;
    let mut tape = Tape::new();
    let nodes = Nodes(tape.params(params));
    let padded = Padded::new(&[seq]);
    let enc = network::bilstm(&mut tape, &nodes, prefix, &padded, hidden);
    let states = tape.value(enc.states);
    let d = 2 * hidden;
    Ok(states.data().chunks(d).map(<[f64]>::to_vec).collect())
}

/// Additive attention of the decoder state `s` over encoder states with the
/// attention block `prefix` (`att`, `att_tag` or `att_chr`).
pub fn attention_context(
    params: &ParamSet,
    prefix: &str,
    s: &[f64],
    states: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if states.is_empty() {
        return Err(Error::invalid("attention needs at least one encoder state"));
    }
    let d = states[0].len();
    if states.iter().any(|h| h.len() != d) {
        return Err(Error::invalid("encoder states differ in dimension"));
    }
    let wk = params.require(&format!("{prefix}.wk"))?;
    let wq = params.require(&format!("{prefix}.wq"))?;
    if wk.shape()[0] != d || wq.shape()[0] != s.len() {
        return Err(Error::invalid(format!(
            "attention `{prefix}` expects keys of {} and queries of {}, got {d} and {}",
            wk.shape()[0],
            wq.shape()[0],
            s.len()
        )));
    }
    let l = states.len();
    let mut tape = Tape::new();
    let nodes = Nodes(tape.params(params));
    let flat: Vec<f64> = states.iter().flatten().copied().collect();
    let hs = tape.input("states", Tensor::from_parts(vec![1, l, d], flat));
    let query = tape.input("query", Tensor::from_parts(vec![1, s.len()], s.to_vec()));
    let flat_hs = tape.reshape(hs, &[l, d]);
    let k = tape.matmul(flat_hs, nodes.get(&format!("{prefix}.wk")));
    let a = tape.value(k).shape()[1];
    let k = tape.reshape(k, &[1, l, a]);
    let keys = tape.add_row(k, nodes.get(&format!("{prefix}.b")));
    let prefix: &'static str = match prefix {
        "att" => "att",
        "att_tag" => "att_tag",
        "att_chr" => "att_chr",
        other => return Err(Error::invalid(format!("unknown attention block `{other}`"))),
    };
    let mem = network::Memory {
        prefix,
        states: hs,
        keys,
        mask: vec![true; l],
        batch: 1,
        len: l,
    };
    let (ctx, w) = network::attend(&mut tape, &nodes, &mem, query);
    Ok((tape.value(ctx).data().to_vec(), tape.value(w).data().to_vec()))
}

/// `sigmoid(w_c . c + w_s . s + w_y . y_prev + b)`.
pub fn generation_gate(params: &ParamSet, c: &[f64], s: &[f64], y_prev: &[f64]) -> Result<f64> {
    let mut z = params.require("gate.b")?.data()[0];
    for (name, x) in [("gate.wc", c), ("gate.ws", s), ("gate.wy", y_prev)] {
        let w = params.require(name)?;
        if w.numel() != x.len() {
            return Err(Error::invalid(format!("`{name}` has {} weights for {} inputs", w.numel(), x.len())));
        }
        let mut tape = Tape::new();
        let wn = tape.param(name, w);
        let xn = tape.input(name, Tensor::from_parts(vec![1, x.len()], x.to_vec()));
        let dot = tape.matmul(xn, wn);
        z += tape.value(dot).item();
    }
    Ok(crate::adcore::sigmoid(z))
}

/// Scatter-sum of attention weights onto the symbols they attend to.
pub fn copy_distribution(weights: &[f64], chars: &[usize], vocab_size: usize) -> Result<Vec<f64>> {
    if weights.len() != chars.len() {
        return Err(Error::invalid(format!("{} weights for {} positions", weights.len(), chars.len())));
    }
    check_indices(chars, vocab_size, "copied")?;
    if chars.is_empty() {
        return Ok(vec![0.0; vocab_size]);
    }
    let mut tape = Tape::new();
    let w = tape.input("weights", Tensor::from_parts(vec![1, weights.len()], weights.to_vec()));
    let p = tape.scatter_cols(w, chars.to_vec(), vocab_size);
    Ok(tape.value(p).data().to_vec())
}

/// `alpha * p_dec + (1 - alpha) * p_copy`.
pub fn mix_distributions(alpha: f64, p_dec: &[f64], p_copy: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("mixing weight {alpha} outside [0, 1]")));
    }
    if p_dec.len() != p_copy.len() {
        return Err(Error::invalid(format!(
            "distributions over {} and {} symbols",
            p_dec.len(),
            p_copy.len()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.input("alpha", Tensor::from_parts(vec![1, 1], vec![alpha]));
    let d = tape.input("p_dec", Tensor::from_parts(vec![1, p_dec.len()], p_dec.to_vec()));
    let c = tape.input("p_copy", Tensor::from_parts(vec![1, p_copy.len()], p_copy.to_vec()));
    let p = network::mix_node(&mut tape, a, d, c);
    Ok(tape.value(p).data().to_vec())
}

fn single_loss(kind: ModelKind, params: &ParamSet, ex: EncodedExample) -> Result<f64> {
    let (hidden, vin, vout) = check_layout(kind, params)?;
    ex.validate(kind)?;
    check_indices(&ex.primary, vin, "input")?;
    if let Some(c) = &ex.chars {
        check_indices(c, vout, "character")?;
    }
    check_indices(&ex.target, vout, "target")?;
    let mut tape = Tape::new();
    let nodes = Nodes(tape.params(params));
    let loss = network::teacher_forced_loss(&mut tape, &nodes, kind, hidden, vout, &[&ex]);
    Ok(tape.value(loss).item())
}

/// Teacher-forced mean cross-entropy of `target` given a MED input.
pub fn med_loss(params: &ParamSet, input: &[usize], target: &[usize]) -> Result<f64> {
    single_loss(
        ModelKind::Med,
        params,
        EncodedExample {
            primary: input.to_vec(),
            chars: None,
            target: target.to_vec(),
            lemma_len: input.len(),
            unk: 0,
        },
    )
}

/// Teacher-forced mean cross-entropy of `target` under the generate/copy
/// mixture.
pub fn pg_loss(params: &ParamSet, tags: &[usize], chars: &[usize], target: &[usize]) -> Result<f64> {
    single_loss(
        ModelKind::Pg,
        params,
        EncodedExample {
            primary: tags.to_vec(),
            chars: Some(chars.to_vec()),
            target: target.to_vec(),
            lemma_len: chars.len(),
            unk: 0,
        },
    )
}
