use serde::{Deserialize, Serialize};

use super::network::{decoder_step, encode, EncoderOutput, LstmState, Nodes};
use super::{EncodedExample, Model};
use crate::adcore::{ParamSet, Tape};
use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Characters allowed beyond the lemma length when no explicit limit is set.
pub const DEFAULT_EXTRA_LEN: usize = 20;
const DECODE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub strategy: DecodeStrategy,
    /// Maximum output characters; `None` means lemma length + 20.
    pub max_len: Option<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            strategy: DecodeStrategy::Greedy,
            max_len: None,
        }
    }
}

impl DecodeOptions {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn beam(width: usize) -> Self {
        Self {
            strategy: DecodeStrategy::Beam(width),
            max_len: None,
        }
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = Some(max_len);
        self
    }

    fn limit(&self, ex: &EncodedExample) -> usize {
        self.max_len.unwrap_or(ex.lemma_len + DEFAULT_EXTRA_LEN)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub text: String,
    /// Output symbol ids, without BOS and EOS.
    pub ids: Vec<usize>,
    /// The length limit was hit before EOS.
    pub truncated: bool,
}

fn emittable(v: usize) -> bool {
    v != PAD && v != BOS
}

/// Highest-probability emittable symbol, lowest index on ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = EOS;
    for (v, &p) in row.iter().enumerate() {
        if emittable(v) && p > row[best] {
            best = v;
        }
    }
    // EOS is the lowest emittable index, so strict `>` keeps the lowest on ties.
    best
}

pub(crate) fn decode(model: &Model, params: &ParamSet, inputs: &[EncodedExample], opts: &DecodeOptions) -> Result<Vec<Decoded>> {
    if opts.max_len == Some(0) {
        return Err(Error::invalid("maximum output length must be at least 1"));
    }
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    // Targets are not used, but the batch validation wants a well-formed one.
    let probe: Vec<EncodedExample> = inputs
        .iter()
        .map(|e| EncodedExample {
            target: vec![BOS, EOS],
            ..e.clone()
        })
        .collect();
    model.check_batch(params, &probe.iter().collect::<Vec<_>>())?;
    let ids = match opts.strategy {
        DecodeStrategy::Greedy => {
            let mut out = Vec::with_capacity(inputs.len());
            for chunk in probe.chunks(DECODE_CHUNK) {
                out.extend(greedy(model, params, chunk, opts));
            }
            out
        }
        DecodeStrategy::Beam(0) => return Err(Error::invalid("beam width must be at least 1")),
        DecodeStrategy::Beam(w) => probe.iter().map(|ex| beam(model, params, ex, w, opts)).collect(),
    };
    Ok(ids
        .into_iter()
        .map(|(ids, truncated)| Decoded {
            text: model.vocab.decode_chars(&ids),
            ids,
            truncated,
        })
        .collect())
}

fn greedy(model: &Model, params: &ParamSet, batch: &[EncodedExample], opts: &DecodeOptions) -> Vec<(Vec<usize>, bool)> {
    let mut tape = Tape::new();
    let p = Nodes(tape.params(params));
    let refs: Vec<&EncodedExample> = batch.iter().collect();
    let hidden = model.dims.hidden;
    let vout = model.vocab.output_size();
    let enc = encode(&mut tape, &p, model.kind, hidden, &refs);

    let limits: Vec<usize> = batch.iter().map(|e| opts.limit(e)).collect();
    let mut out = vec![(Vec::new(), false); batch.len()];
    let mut done = vec![false; batch.len()];
    let mut prev = vec![BOS; batch.len()];
    let mut state = LstmState {
        h: enc.init.h,
        c: enc.init.c,
    };
    let steps = limits.iter().max().copied().unwrap_or(0) + 1;
    for _ in 0..steps {
        let step = decoder_step(&mut tape, &p, &enc, &state, prev.clone(), hidden, vout);
        let probs = tape.value(step.probs);
        for b in 0..batch.len() {
            if done[b] {
                continue;
            }
            let v = argmax(probs.row(b));
            if v == EOS {
                done[b] = true;
            } else if out[b].0.len() == limits[b] {
                out[b].1 = true;
                done[b] = true;
            } else {
                out[b].0.push(v);
                prev[b] = v;
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
        state = step.state;
    }
    out
}

/// Source of next-symbol distributions for sequence search.
pub trait StepDistributions {
    /// Distributions for the next symbol of every live hypothesis. Row `r`
    /// extends the hypothesis that occupied row `parents[r]` at the previous
    /// step by the symbol `prev[r]` (`BOS` on the first step).
    fn next(&mut self, parents: &[usize], prev: &[usize]) -> Vec<Vec<f64>>;
}

/// Decodes one sequence. Returns the symbols without EOS and whether the
/// length limit was hit first.
pub fn search<S: StepDistributions>(scorer: &mut S, strategy: DecodeStrategy, max_len: usize) -> (Vec<usize>, bool) {
    match strategy {
        DecodeStrategy::Greedy => {
            let mut ids = Vec::new();
            let mut prev = BOS;
            loop {
                let dist = scorer.next(&[0], &[prev]);
                let v = argmax(&dist[0]);
                if v == EOS {
                    return (ids, false);
                }
                if ids.len() == max_len {
                    return (ids, true);
                }
                ids.push(v);
                prev = v;
            }
        }
        DecodeStrategy::Beam(width) => beam_search(scorer, width.max(1), max_len),
    }
}

struct Hyp {
    ids: Vec<usize>,
    score: f64,
}

/// Length-normalized beam search. Finished hypotheses are ranked by total
/// log-probability divided by their length including EOS.
fn beam_search<S: StepDistributions>(scorer: &mut S, width: usize, max_len: usize) -> (Vec<usize>, bool) {
    let mut hyps = vec![Hyp {
        ids: Vec::new(),
        score: 0.0,
    }];
    let mut parents = vec![0];
    let mut prev = vec![BOS];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut cut: Vec<(Vec<usize>, f64)> = Vec::new();
    loop {
        let dists = scorer.next(&parents, &prev);
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, h) in hyps.iter().enumerate() {
            for (v, &pv) in dists[hi].iter().enumerate() {
                // Zero-probability continuations are never proposed.
                if emittable(v) && pv > 0.0 {
                    cands.push((h.score + pv.ln(), v, hi));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut next = Vec::with_capacity(width);
        parents.clear();
        for &(score, v, hi) in cands.iter().take(width) {
            let h = &hyps[hi];
            if v == EOS {
                finished.push((h.ids.clone(), score / (h.ids.len() + 1) as f64));
            } else if h.ids.len() == max_len {
                cut.push((h.ids.clone(), score / h.ids.len().max(1) as f64));
            } else {
                let mut ids = h.ids.clone();
                ids.push(v);
                next.push(Hyp { ids, score });
                parents.push(hi);
            }
        }
        if next.is_empty() || finished.len() >= width {
            break;
        }
        prev = next.iter().map(|h| *h.ids.last().unwrap()).collect();
        hyps = next;
    }
    // First maximum wins: earlier entries came from higher-ranked candidates.
    let best = |list: &[(Vec<usize>, f64)]| -> Option<Vec<usize>> {
        let mut best: Option<&(Vec<usize>, f64)> = None;
        for item in list {
            if best.is_none_or(|b| item.1 > b.1) {
                best = Some(item);
            }
        }
        best.map(|b| b.0.clone())
    };
    match best(&finished) {
        Some(ids) => (ids, false),
        None => (best(&cut).unwrap_or_default(), true),
    }
}

/// Runs the decoder for one example, with encoder memories replicated over
/// `width` rows so that hypotheses can be reordered by gathering states.
struct ModelScorer<'a> {
    model: &'a Model,
    tape: Tape,
    nodes: Nodes,
    enc: EncoderOutput,
    state: LstmState,
    width: usize,
    started: bool,
}

impl<'a> ModelScorer<'a> {
    fn new(model: &'a Model, params: &ParamSet, ex: &EncodedExample, width: usize) -> Self {
        let mut tape = Tape::new();
        let nodes = Nodes(tape.params(params));
        let copies: Vec<&EncodedExample> = vec![ex; width];
        let enc = encode(&mut tape, &nodes, model.kind, model.dims.hidden, &copies);
        let state = LstmState {
            h: enc.init.h,
            c: enc.init.c,
        };
        Self {
            model,
            tape,
            nodes,
            enc,
            state,
            width,
            started: false,
        }
    }
}

impl StepDistributions for ModelScorer<'_> {
    fn next(&mut self, parents: &[usize], prev: &[usize]) -> Vec<Vec<f64>> {
        let w = self.width;
        if self.started {
            let mut rows = parents.to_vec();
            rows.resize(w, rows[0]);
            self.state = LstmState {
                h: self.tape.gather_rows(self.state.h, rows.clone()),
                c: self.tape.gather_rows(self.state.c, rows),
            };
        }
        self.started = true;
        let mut prev = prev.to_vec();
        prev.resize(w, BOS);
        let step = decoder_step(
            &mut self.tape,
            &self.nodes,
            &self.enc,
            &self.state,
            prev,
            self.model.dims.hidden,
            self.model.vocab.output_size(),
        );
        self.state = step.state;
        let probs = self.tape.value(step.probs);
        (0..parents.len()).map(|r| probs.row(r).to_vec()).collect()
    }
}

fn beam(model: &Model, params: &ParamSet, ex: &EncodedExample, width: usize, opts: &DecodeOptions) -> (Vec<usize>, bool) {
    let mut scorer = ModelScorer::new(model, params, ex, width);
    search(&mut scorer, DecodeStrategy::Beam(width), opts.limit(ex))
}
