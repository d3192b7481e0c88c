//! The two inflection architectures.
//!
//! * MED: one bidirectional LSTM encoder over `[BOS, lang, tags.., chars.., EOS]`,
//!   an attentional LSTM decoder and a softmax output layer.
//! * PG: separate tag and character encoders with one attention each, the
//!   concatenated context feeding the decoder, and a generation gate mixing
//!   the decoder distribution with a copy distribution over input characters.
//!
//! Both share one embedding table over the unified input space of
//! [`Vocabulary`]; the decoder embeds its previous output through the same
//! table (output ids coincide with character input ids).

mod bundle;
mod decode;
pub(crate) mod network;
mod ops;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adcore::{GradientMap, ParamSet, Tape, Tensor};
use crate::corpus::{encode_med_input, encode_pg_input, encode_target, InflectionExample, Vocabulary, BOS};
use crate::error::{Error, Result};

pub use bundle::{load_model, save_model, LoadedModel, ModelInfo};
pub use decode::{DecodeOptions, DecodeStrategy, Decoded};
pub use ops::{
    attention_context, bilstm_encode, copy_distribution, generation_gate, med_loss, mix_distributions, pg_loss,
};

pub const INIT_SCALE: f64 = 0.1;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Med,
    Pg,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Med => "med",
            ModelKind::Pg => "pg",
        }
    }

    /// Number of bidirectional encoders feeding the context vector.
    fn encoders(self) -> usize {
        match self {
            ModelKind::Med => 1,
            ModelKind::Pg => 2,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "med" => Ok(ModelKind::Med),
            "pg" => Ok(ModelKind::Pg),
            other => Err(Error::invalid(format!("unknown model kind `{other}` (expected med or pg)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub embed: usize,
    pub hidden: usize,
    pub attention: usize,
}

impl ModelDims {
    pub fn new(embed: usize, hidden: usize, attention: usize) -> Self {
        Self {
            embed,
            hidden,
            attention,
        }
    }

    /// Published sizes: MED 300/100, PG 100/100.
    pub fn published(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Med => Self::new(300, 100, 100),
            ModelKind::Pg => Self::new(100, 100, 100),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.hidden == 0 || self.attention == 0 {
            return Err(Error::invalid(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// An example mapped to index sequences for one architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    /// MED input, or the PG tag sequence.
    pub primary: Vec<usize>,
    /// PG character sequence.
    pub chars: Option<Vec<usize>>,
    /// `[BOS, form chars.., EOS]`.
    pub target: Vec<usize>,
    pub lemma_len: usize,
    pub unk: usize,
}

impl EncodedExample {
    fn validate(&self, kind: ModelKind) -> Result<()> {
        if self.primary.is_empty() {
            return Err(Error::invalid("empty input sequence"));
        }
        if kind == ModelKind::Pg && self.chars.as_ref().is_none_or(|c| c.is_empty()) {
            return Err(Error::invalid("pointer-generator input needs a non-empty character sequence"));
        }
        if self.target.len() < 2 || self.target[0] != BOS {
            return Err(Error::invalid("target must be a BOS-prefixed sequence with at least one predicted symbol"));
        }
        Ok(())
    }
}

/// Summary written next to checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub input_size: usize,
    pub output_size: usize,
    pub num_params: usize,
    pub vocab_hash: String,
}

/// Architecture plus vocabulary. Parameters are passed separately so that a
/// model can be evaluated under many parameter snapshots.
#[derive(Clone, Debug)]
pub struct Model {
    kind: ModelKind,
    dims: ModelDims,
    vocab: Vocabulary,
}

impl Model {
    pub fn new(kind: ModelKind, dims: ModelDims, vocab: Vocabulary) -> Result<Self> {
        dims.validate()?;
        Ok(Self { kind, dims, vocab })
    }

    /// Recovers the dimensions from a parameter set and checks every shape.
    pub fn from_params(kind: ModelKind, vocab: Vocabulary, params: &ParamSet) -> Result<Self> {
        let dims = infer_dims(kind, params)?;
        let model = Self::new(kind, dims, vocab)?;
        model.check_params(params)?;
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Parameter names and shapes.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        layout(self.kind, self.dims, self.vocab.input_size(), self.vocab.output_size())
    }

    /// Uniform initialization in `[-0.1, 0.1]`, LSTM forget-gate biases 1.0.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut params = ParamSet::new();
        for (name, shape) in self.layout() {
            let mut t = Tensor::uniform(&shape, INIT_SCALE, rng);
            if is_lstm_bias(&name) {
                let h = self.dims.hidden;
                t.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = FORGET_BIAS);
            }
            params.insert(&name, t);
        }
        params
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let layout = self.layout();
        if params.len() != layout.len() {
            return Err(Error::ParamMismatch(format!(
                "expected {} tensors for {}, found {}",
                layout.len(),
                self.kind,
                params.len()
            )));
        }
        for (name, shape) in &layout {
            let t = params
                .get(name)
                .ok_or_else(|| Error::ParamMismatch(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ParamMismatch(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn card(&self, params: &ParamSet) -> ModelCard {
        ModelCard {
            kind: self.kind,
            dims: self.dims,
            input_size: self.vocab.input_size(),
            output_size: self.vocab.output_size(),
            num_params: params.numel(),
            vocab_hash: self.vocab.hash(),
        }
    }

    pub fn encode(&self, ex: &InflectionExample) -> EncodedExample {
        let target = encode_target(&self.vocab, &ex.form);
        let lemma_len = ex.lemma.chars().count();
        match self.kind {
            ModelKind::Med => {
                let input = encode_med_input(&self.vocab, ex);
                EncodedExample {
                    primary: input.ids,
                    chars: None,
                    target: target.ids,
                    lemma_len,
                    unk: input.unk + target.unk,
                }
            }
            ModelKind::Pg => {
                let input = encode_pg_input(&self.vocab, ex);
                EncodedExample {
                    primary: input.tags.ids,
                    chars: Some(input.chars.ids),
                    target: target.ids,
                    lemma_len,
                    unk: input.tags.unk + input.chars.unk + target.unk,
                }
            }
        }
    }

    pub fn encode_all(&self, examples: &[InflectionExample]) -> Vec<EncodedExample> {
        examples.iter().map(|e| self.encode(e)).collect()
    }

    pub(crate) fn check_batch(&self, params: &ParamSet, batch: &[&EncodedExample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyData("empty batch".into()));
        }
        self.check_params(params)?;
        let (vin, vout) = (self.vocab.input_size(), self.vocab.output_size());
        for ex in batch {
            ex.validate(self.kind)?;
            let inputs = ex.primary.iter().chain(ex.chars.iter().flatten());
            if inputs.copied().any(|i| i >= vin) || ex.target.iter().any(|&i| i >= vout) {
                return Err(Error::VocabMismatch("symbol index outside the model vocabulary".into()));
            }
            if ex.chars.iter().flatten().any(|&i| i >= vout) {
                return Err(Error::VocabMismatch("copy source is not a character".into()));
            }
        }
        Ok(())
    }

    fn build_loss(&self, tape: &mut Tape, params: &ParamSet, batch: &[&EncodedExample]) -> crate::adcore::NodeId {
        let nodes = network::Nodes(tape.params(params));
        network::teacher_forced_loss(tape, &nodes, self.kind, self.dims.hidden, self.vocab.output_size(), batch)
    }

    /// Batch loss: per-example mean cross-entropy over predicted positions,
    /// averaged over the batch.
    pub fn loss(&self, params: &ParamSet, batch: &[EncodedExample]) -> Result<f64> {
        let refs: Vec<&EncodedExample> = batch.iter().collect();
        self.check_batch(params, &refs)?;
        let mut tape = Tape::new();
        let loss = self.build_loss(&mut tape, params, &refs);
        Ok(tape.value(loss).item())
    }

    pub fn loss_and_grad(&self, params: &ParamSet, batch: &[EncodedExample]) -> Result<(f64, GradientMap)> {
        let refs: Vec<&EncodedExample> = batch.iter().collect();
        self.loss_and_grad_refs(params, &refs)
    }

    /// [`Model::loss_and_grad`] over borrowed examples.
    pub fn loss_and_grad_refs(&self, params: &ParamSet, batch: &[&EncodedExample]) -> Result<(f64, GradientMap)> {
        self.check_batch(params, batch)?;
        let mut tape = Tape::new();
        let loss = self.build_loss(&mut tape, params, batch);
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), grads))
    }

    /// Loss averaged over a whole dataset in chunks of `batch` examples,
    /// weighting each example equally.
    pub fn dataset_loss(&self, params: &ParamSet, data: &[EncodedExample], batch: usize) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyData("empty dataset".into()));
        }
        let mut total = 0.0;
        for chunk in data.chunks(batch.max(1)) {
            total += self.loss(params, chunk)? * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    }

    pub fn decode(&self, params: &ParamSet, inputs: &[EncodedExample], opts: &DecodeOptions) -> Result<Vec<Decoded>> {
        decode::decode(self, params, inputs, opts)
    }

    /// Decoded surface forms for raw examples.
    pub fn predict(&self, params: &ParamSet, examples: &[InflectionExample], opts: &DecodeOptions) -> Result<Vec<String>> {
        let enc = self.encode_all(examples);
        Ok(self.decode(params, &enc, opts)?.into_iter().map(|d| d.text).collect())
    }
}

fn is_lstm_bias(name: &str) -> bool {
    name.ends_with(".b") && (name.starts_with("dec") || name.contains("_fwd") || name.contains("_bwd"))
}

fn lstm_layout(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, input: usize, hidden: usize) {
    out.push((format!("{prefix}.wx"), vec![input, 4 * hidden]));
    out.push((format!("{prefix}.wh"), vec![hidden, 4 * hidden]));
    out.push((format!("{prefix}.b"), vec![4 * hidden]));
}

fn attention_layout(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, key: usize, query: usize, att: usize) {
    out.push((format!("{prefix}.wk"), vec![key, att]));
    out.push((format!("{prefix}.wq"), vec![query, att]));
    out.push((format!("{prefix}.b"), vec![att]));
    out.push((format!("{prefix}.v"), vec![att, 1]));
}

pub(crate) fn layout(kind: ModelKind, dims: ModelDims, input_size: usize, output_size: usize) -> Vec<(String, Vec<usize>)> {
    let ModelDims {
        embed: e,
        hidden: h,
        attention: a,
    } = dims;
    let ctx = 2 * h * kind.encoders();
    let mut out = vec![("emb".to_string(), vec![input_size, e])];
    let (encoders, attentions): (&[&str], &[&str]) = match kind {
        ModelKind::Med => (&["enc"], &["att"]),
        ModelKind::Pg => (&["tag", "chr"], &["att_tag", "att_chr"]),
    };
    for enc in encoders {
        lstm_layout(&mut out, &format!("{enc}_fwd"), e, h);
        lstm_layout(&mut out, &format!("{enc}_bwd"), e, h);
    }
    for att in attentions {
        attention_layout(&mut out, att, 2 * h, h, a);
    }
    out.push(("bridge.w".into(), vec![ctx, h]));
    out.push(("bridge.b".into(), vec![h]));
    lstm_layout(&mut out, "dec", e + ctx, h);
    out.push(("out.w".into(), vec![h + ctx, output_size]));
    out.push(("out.b".into(), vec![output_size]));
    if kind == ModelKind::Pg {
        out.push(("gate.wc".into(), vec![ctx, 1]));
        out.push(("gate.ws".into(), vec![h, 1]));
        out.push(("gate.wy".into(), vec![e, 1]));
        out.push(("gate.b".into(), vec![1]));
    }
    out
}

pub(crate) fn infer_dims(kind: ModelKind, params: &ParamSet) -> Result<ModelDims> {
    let dim = |name: &str, axis: usize| -> Result<usize> {
        let t = params.require(name)?;
        t.shape()
            .get(axis)
            .copied()
            .ok_or_else(|| Error::ParamMismatch(format!("`{name}` has shape {:?}", t.shape())))
    };
    let att = match kind {
        ModelKind::Med => "att.v",
        ModelKind::Pg => "att_chr.v",
    };
    let dims = ModelDims::new(dim("emb", 1)?, dim("dec.wh", 0)?, dim(att, 0)?);
    dims.validate()?;
    Ok(dims)
}

/// Sizes of the input and output symbol spaces implied by a parameter set.
pub(crate) fn infer_sizes(params: &ParamSet) -> Result<(usize, usize)> {
    let vin = params.require("emb")?.shape()[0];
    let vout = params.require("out.b")?.numel();
    Ok((vin, vout))
}
