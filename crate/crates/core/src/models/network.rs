//! Tape-level building blocks shared by both architectures.
//!
//! Batches are padded to the longest sequence. Padded encoder steps keep the
//! previous state (so the backward direction starts from zeros at each
//! sequence's true end) and are masked out of attention.

use std::collections::BTreeMap;

use super::{EncodedExample, ModelKind};
use crate::adcore::{NodeId, Tape, Tensor};
use crate::corpus::{BOS, PAD};

pub(crate) const PROB_FLOOR: f64 = 1e-12;

/// Parameter node ids by name.
pub(crate) struct Nodes(pub BTreeMap<String, NodeId>);

impl Nodes {
    pub fn get(&self, name: &str) -> NodeId {
        *self
            .0
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not registered"))
    }
}

/// Right-padded index sequences, stored time-major for the recurrences.
pub(crate) struct Padded {
    pub batch: usize,
    pub len: usize,
    /// `ids[t][b]`
    pub ids: Vec<Vec<usize>>,
    /// `valid[t][b]`
    pub valid: Vec<Vec<bool>>,
}

impl Padded {
    pub fn new(seqs: &[&[usize]]) -> Self {
        let batch = seqs.len();
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![vec![PAD; batch]; len];
        let mut valid = vec![vec![false; batch]; len];
        for (b, s) in seqs.iter().enumerate() {
            for (t, &id) in s.iter().enumerate() {
                ids[t][b] = id;
                valid[t][b] = true;
            }
        }
        Self { batch, len, ids, valid }
    }

    /// Batch-major flattening `[b * len + t]`.
    pub fn flat_valid(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.batch * self.len);
        for b in 0..self.batch {
            out.extend((0..self.len).map(|t| self.valid[t][b]));
        }
        out
    }

    pub fn flat_ids(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch * self.len);
        for b in 0..self.batch {
            out.extend((0..self.len).map(|t| self.ids[t][b]));
        }
        out
    }
}

pub(crate) struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

pub(crate) fn zeros(tape: &mut Tape, rows: usize, cols: usize) -> NodeId {
    tape.constant(Tensor::zeros(&[rows, cols]))
}

/// One LSTM cell update with gate order input, forget, cell, output.
pub(crate) fn lstm_step(tape: &mut Tape, p: &Nodes, prefix: &str, x: NodeId, state: &LstmState, hidden: usize) -> LstmState {
    let wx = p.get(&format!("{prefix}.wx"));
    let wh = p.get(&format!("{prefix}.wh"));
    let b = p.get(&format!("{prefix}.b"));
    let xw = tape.matmul(x, wx);
    let hw = tape.matmul(state.h, wh);
    let z = tape.add(xw, hw);
    let z = tape.add_row(z, b);
    let i = tape.slice_cols(z, 0, hidden);
    let f = tape.slice_cols(z, hidden, 2 * hidden);
    let g = tape.slice_cols(z, 2 * hidden, 3 * hidden);
    let o = tape.slice_cols(z, 3 * hidden, 4 * hidden);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, state.c);
    let ig = tape.mul(i, g);
    let c = tape.add(fc, ig);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    LstmState { h, c }
}

pub(crate) struct BiEncoding {
    /// `[B, L, 2H]`, forward state then backward state per position.
    pub states: NodeId,
    pub fwd_final: NodeId,
    pub bwd_final: NodeId,
}

pub(crate) fn bilstm(tape: &mut Tape, p: &Nodes, prefix: &str, seqs: &Padded, hidden: usize) -> BiEncoding {
    let emb = p.get("emb");
    let inputs: Vec<NodeId> = seqs.ids.iter().map(|ids| tape.gather_rows(emb, ids.clone())).collect();
    let z = zeros(tape, seqs.batch, hidden);

    let run = |tape: &mut Tape, dir: &str, order: &mut dyn Iterator<Item = usize>| {
        let mut state = LstmState { h: z, c: z };
        let mut out = vec![z; seqs.len];
        for t in order {
            let next = lstm_step(tape, p, &format!("{prefix}_{dir}"), inputs[t], &state, hidden);
            if seqs.valid[t].iter().all(|&v| v) {
                state = next;
            } else {
                state = LstmState {
                    h: tape.row_select(seqs.valid[t].clone(), next.h, state.h),
                    c: tape.row_select(seqs.valid[t].clone(), next.c, state.c),
                };
            }
            out[t] = state.h;
        }
        (out, state.h)
    };

    let (fwd, fwd_final) = run(tape, "fwd", &mut (0..seqs.len));
    let (bwd, bwd_final) = run(tape, "bwd", &mut (0..seqs.len).rev());
    let per_pos: Vec<NodeId> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| tape.concat_cols(&[f, b]))
        .collect();
    let states = tape.stack_mid(&per_pos);
    BiEncoding {
        states,
        fwd_final,
        bwd_final,
    }
}

/// Encoder states prepared for additive attention.
pub(crate) struct Memory {
    pub prefix: &'static str,
    pub states: NodeId,
    /// `W_k h_i + b` for every position, `[B, L, A]`.
    pub keys: NodeId,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

pub(crate) fn memory(tape: &mut Tape, p: &Nodes, prefix: &'static str, enc: &BiEncoding, seqs: &Padded) -> Memory {
    let (b, l) = (seqs.batch, seqs.len);
    let d = tape.value(enc.states).shape()[2];
    let flat = tape.reshape(enc.states, &[b * l, d]);
    let k = tape.matmul(flat, p.get(&format!("{prefix}.wk")));
    let a = tape.value(k).shape()[1];
    let k = tape.reshape(k, &[b, l, a]);
    let keys = tape.add_row(k, p.get(&format!("{prefix}.b")));
    Memory {
        prefix,
        states: enc.states,
        keys,
        mask: seqs.flat_valid(),
        batch: b,
        len: l,
    }
}

/// Additive attention: `score_i = v . tanh(W_k h_i + W_q s + b)`, softmax over
/// valid positions, context = weighted sum of encoder states.
pub(crate) fn attend(tape: &mut Tape, p: &Nodes, mem: &Memory, query: NodeId) -> (NodeId, NodeId) {
    let q = tape.matmul(query, p.get(&format!("{}.wq", mem.prefix)));
    let z = tape.add_mid(mem.keys, q);
    let z = tape.tanh(z);
    let a = tape.value(z).shape()[2];
    let z = tape.reshape(z, &[mem.batch * mem.len, a]);
    let scores = tape.matmul(z, p.get(&format!("{}.v", mem.prefix)));
    let scores = tape.reshape(scores, &[mem.batch, mem.len]);
    let mask = if mem.mask.iter().all(|&m| m) {
        None
    } else {
        Some(mem.mask.clone())
    };
    let weights = tape.softmax(scores, mask);
    let ctx = tape.weighted_sum(weights, mem.states);
    (ctx, weights)
}

/// Everything the decoder needs from the encoder side.
pub(crate) struct EncoderOutput {
    pub memories: Vec<Memory>,
    pub init: LstmState,
    /// Output-space ids of the copyable characters, `[B * L_chars]`.
    pub copy_ids: Option<Vec<usize>>,
}

pub(crate) fn encode(tape: &mut Tape, p: &Nodes, kind: ModelKind, hidden: usize, batch: &[&EncodedExample]) -> EncoderOutput {
    let n = batch.len();
    let (memories, finals, copy_ids) = match kind {
        ModelKind::Med => {
            let seqs: Vec<&[usize]> = batch.iter().map(|e| e.primary.as_slice()).collect();
            let padded = Padded::new(&seqs);
            let enc = bilstm(tape, p, "enc", &padded, hidden);
            let mem = memory(tape, p, "att", &enc, &padded);
            (vec![mem], vec![enc.fwd_final, enc.bwd_final], None)
        }
        ModelKind::Pg => {
            let tags: Vec<&[usize]> = batch.iter().map(|e| e.primary.as_slice()).collect();
            let chars: Vec<&[usize]> = batch
                .iter()
                .map(|e| e.chars.as_deref().expect("pointer-generator input needs a character sequence"))
                .collect();
            let tp = Padded::new(&tags);
            let cp = Padded::new(&chars);
            let te = bilstm(tape, p, "tag", &tp, hidden);
            let ce = bilstm(tape, p, "chr", &cp, hidden);
            let tm = memory(tape, p, "att_tag", &te, &tp);
            let cm = memory(tape, p, "att_chr", &ce, &cp);
            (
                vec![tm, cm],
                vec![te.fwd_final, te.bwd_final, ce.fwd_final, ce.bwd_final],
                Some(cp.flat_ids()),
            )
        }
    };
    let cat = tape.concat_cols(&finals);
    let s0 = tape.matmul(cat, p.get("bridge.w"));
    let s0 = tape.add_row(s0, p.get("bridge.b"));
    let h = tape.tanh(s0);
    let c = zeros(tape, n, hidden);
    EncoderOutput {
        memories,
        init: LstmState { h, c },
        copy_ids,
    }
}

pub(crate) struct StepOutput {
    pub state: LstmState,
    /// Output distribution `[B, V]`.
    pub probs: NodeId,
}

/// One decoder step: attend with the previous state, feed `[y_prev; c_t]`
/// to the decoder LSTM, predict from `[s_t; c_t]`. The pointer-generator
/// then mixes in the copy distribution of the character attention.
pub(crate) fn decoder_step(
    tape: &mut Tape,
    p: &Nodes,
    enc: &EncoderOutput,
    state: &LstmState,
    prev: Vec<usize>,
    hidden: usize,
    vocab_out: usize,
) -> StepOutput {
    let mut ctxs = Vec::with_capacity(enc.memories.len());
    let mut weights = Vec::with_capacity(enc.memories.len());
    for mem in &enc.memories {
        let (c, w) = attend(tape, p, mem, state.h);
        ctxs.push(c);
        weights.push(w);
    }
    let ctx = if ctxs.len() == 1 { ctxs[0] } else { tape.concat_cols(&ctxs) };
    let y_prev = tape.gather_rows(p.get("emb"), prev);
    let x = tape.concat_cols(&[y_prev, ctx]);
    let next = lstm_step(tape, p, "dec", x, state, hidden);
    let feat = tape.concat_cols(&[next.h, ctx]);
    let logits = tape.matmul(feat, p.get("out.w"));
    let logits = tape.add_row(logits, p.get("out.b"));
    let p_dec = tape.softmax(logits, None);

    let probs = match &enc.copy_ids {
        None => p_dec,
        Some(copy_ids) => {
            let alpha = generation_gate_node(tape, p, ctx, next.h, y_prev);
            let chr_weights = *weights.last().unwrap();
            let p_copy = tape.scatter_cols(chr_weights, copy_ids.clone(), vocab_out);
            mix_node(tape, alpha, p_dec, p_copy)
        }
    };
    StepOutput {
        state: next,
        probs,
    }
}

/// `alpha = sigmoid(w_c c_t + w_s s_t + w_y y_{t-1} + b)`, shape `[B, 1]`.
pub(crate) fn generation_gate_node(tape: &mut Tape, p: &Nodes, ctx: NodeId, s: NodeId, y_prev: NodeId) -> NodeId {
    let a = tape.matmul(ctx, p.get("gate.wc"));
    let b = tape.matmul(s, p.get("gate.ws"));
    let c = tape.matmul(y_prev, p.get("gate.wy"));
    let z = tape.add(a, b);
    let z = tape.add(z, c);
    let z = tape.add_row(z, p.get("gate.b"));
    tape.sigmoid(z)
}

/// `alpha * p_dec + (1 - alpha) * p_copy` with `alpha` of shape `[B, 1]`.
pub(crate) fn mix_node(tape: &mut Tape, alpha: NodeId, p_dec: NodeId, p_copy: NodeId) -> NodeId {
    let gen = tape.mul_col(p_dec, alpha);
    let neg = tape.scale(alpha, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let copy = tape.mul_col(p_copy, one_minus);
    tape.add(gen, copy)
}

/// Teacher-forced loss: mean negative log-likelihood over each target's
/// predicted positions, averaged over the batch.
pub(crate) fn teacher_forced_loss(
    tape: &mut Tape,
    p: &Nodes,
    kind: ModelKind,
    hidden: usize,
    vocab_out: usize,
    batch: &[&EncodedExample],
) -> NodeId {
    let enc = encode(tape, p, kind, hidden, batch);
    let targets: Vec<&[usize]> = batch.iter().map(|e| e.target.as_slice()).collect();
    let tp = Padded::new(&targets);
    let n = batch.len();
    let steps = tp.len - 1;

    let mut state = LstmState { h: enc.init.h, c: enc.init.c };
    let mut log_probs = Vec::with_capacity(steps);
    for t in 1..=steps {
        let prev = tp.ids[t - 1].iter().map(|&y| if y == PAD { BOS } else { y }).collect();
        let out = decoder_step(tape, p, &enc, &state, prev, hidden, vocab_out);
        let gold = tp.ids[t].clone();
        let picked = tape.pick_cols(out.probs, gold);
        log_probs.push(tape.log_floor(picked, PROB_FLOOR));
        state = out.state;
    }
    let lp = tape.concat_cols(&log_probs);
    let mut weights = vec![0.0; n * steps];
    for (b, tgt) in targets.iter().enumerate() {
        let predicted = tgt.len() - 1;
        for t in 0..predicted {
            weights[b * steps + t] = -1.0 / (predicted as f64 * n as f64);
        }
    }
    let w = tape.constant(Tensor::from_parts(vec![n, steps], weights));
    let weighted = tape.mul(lp, w);
    tape.sum(weighted)
}
