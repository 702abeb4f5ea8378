//! A small transformer encoder with an MLM head and a `[CLS]` relevance head.
//!
//! Parameters live in one flat `f64` buffer addressed through a named-tensor
//! layout; gradients, Adam moments and checkpoints share that layout. The
//! backward pass is written out by hand for the fixed encoder graph and is
//! checked against central finite differences by [`grad_check`].

mod encoder;
mod gradcheck;
mod train;

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::ArtifactHeader;
use crate::rng::SeededRng;
use crate::tokenizer::{EncodedSequence, Vocabulary, DEFAULT_MAX_LEN, DEFAULT_VOCAB_SIZE};

pub use encoder::{ForwardOutput, SeqInput};
pub use gradcheck::{grad_check, CoordCheck, GradCheckOptions, GradCheckReport, Stencil};
pub use train::{
    batch_loss, finetune_pairs, loss_and_gradient, mask_tokens, masked_count, pair_examples, pretrain_mlm,
    write_loss_curve, Adam, FinetuneReport, MaskedSequence, Phase, PretrainReport, TrainConfig, TrainExample,
};

const CHECKPOINT_MAGIC: &str = "codesearch-checkpoint v1";
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("fine-tuning pairs must share one language pair: saw {first} and {other}")]
    MixedLanguages { first: String, other: String },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 128,
            ffn: 512,
            max_len: DEFAULT_MAX_LEN,
            vocab_size: DEFAULT_VOCAB_SIZE,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("heads", self.heads),
            ("hidden", self.hidden),
            ("ffn", self.ffn),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// A small configuration (under 1e5 parameters) for tests and demos.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 32,
            ffn: 64,
            max_len: 64,
            vocab_size,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Location of one tensor inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerSlots {
    pub wq: Slot,
    pub bq: Slot,
    pub wk: Slot,
    pub bk: Slot,
    pub wv: Slot,
    pub bv: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: Slot,
    pub pos_emb: Slot,
    pub emb_ln_g: Slot,
    pub emb_ln_b: Slot,
    pub layers: Vec<LayerSlots>,
    pub mlm_w: Slot,
    pub mlm_b: Slot,
    pub cls_w: Slot,
    pub cls_b: Slot,
    /// Every tensor with its name, in buffer order.
    pub named: Vec<(String, Slot)>,
    pub total: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

impl Layout {
    fn new(c: &EncoderConfig) -> (Self, Vec<Init>) {
        let mut named = Vec::new();
        let mut inits = Vec::new();
        let mut off = 0;
        let mut add = |name: String, rows: usize, cols: usize, init: Init| {
            let s = Slot { off, rows, cols };
            off += rows * cols;
            named.push((name, s));
            inits.push(init);
            s
        };
        let (d, f, v) = (c.hidden, c.ffn, c.vocab_size);
        let tok_emb = add("tok_emb".into(), v, d, Init::Normal);
        let pos_emb = add("pos_emb".into(), c.max_len, d, Init::Normal);
        let emb_ln_g = add("emb_ln.g".into(), 1, d, Init::Ones);
        let emb_ln_b = add("emb_ln.b".into(), 1, d, Init::Zeros);
        let mut layers = Vec::new();
        for l in 0..c.layers {
            let mut p = |n: &str, r, cc, i| add(format!("layer{l}.{n}"), r, cc, i);
            layers.push(LayerSlots {
                wq: p("wq", d, d, Init::Normal),
                bq: p("bq", 1, d, Init::Zeros),
                wk: p("wk", d, d, Init::Normal),
                bk: p("bk", 1, d, Init::Zeros),
                wv: p("wv", d, d, Init::Normal),
                bv: p("bv", 1, d, Init::Zeros),
                wo: p("wo", d, d, Init::Normal),
                bo: p("bo", 1, d, Init::Zeros),
                ln1_g: p("ln1.g", 1, d, Init::Ones),
                ln1_b: p("ln1.b", 1, d, Init::Zeros),
                w1: p("w1", d, f, Init::Normal),
                b1: p("b1", 1, f, Init::Zeros),
                w2: p("w2", f, d, Init::Normal),
                b2: p("b2", 1, d, Init::Zeros),
                ln2_g: p("ln2.g", 1, d, Init::Ones),
                ln2_b: p("ln2.b", 1, d, Init::Zeros),
            });
        }
        let mlm_w = add("mlm.w".into(), d, v, Init::Normal);
        let mlm_b = add("mlm.b".into(), 1, v, Init::Zeros);
        let cls_w = add("cls.w".into(), d, 1, Init::Normal);
        let cls_b = add("cls.b".into(), 1, 1, Init::Zeros);
        (
            Self {
                tok_emb,
                pos_emb,
                emb_ln_g,
                emb_ln_b,
                layers,
                mlm_w,
                mlm_b,
                cls_w,
                cls_b,
                named,
                total: off,
            },
            inits,
        )
    }
}

/// Encoder parameters plus configuration.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: EncoderConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for EncoderModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl EncoderModel {
    /// Fresh model: weights and embeddings ~ N(0, 0.02²), biases 0, norm gains 1.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let (layout, inits) = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = SeededRng::derive(config.seed, "init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for ((_, slot), init) in layout.named.iter().zip(inits) {
            let dst = &mut params[slot.range()];
            match init {
                Init::Normal => dst.iter_mut().for_each(|x| *x = normal.sample(&mut rng)),
                Init::Ones => dst.fill(1.0),
                Init::Zeros => {}
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Tensor names with their offsets and shapes, in buffer order.
    pub fn tensor_index(&self) -> Vec<(String, usize, usize, usize)> {
        self.layout
            .named
            .iter()
            .map(|(n, s)| (n.clone(), s.off, s.rows, s.cols))
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| &self.params[s.range()])
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn mat(&self, s: Slot) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((s.rows, s.cols), &self.params[s.range()]).expect("slot shape")
    }

    pub(crate) fn row(&self, s: Slot) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[s.range()])
    }

    /// Zero the relevance head so every score is exactly 0.5.
    pub fn zero_classifier_head(&mut self) {
        for s in [self.layout.cls_w, self.layout.cls_b] {
            self.params[s.range()].fill(0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    /// Hidden states (per sequence, one row per position) and `[CLS]` vectors,
    /// without dropout.
    pub fn forward(&self, batch: &[EncodedSequence]) -> Result<ForwardOutput> {
        let inputs: Vec<SeqInput> = batch.iter().map(SeqInput::from_encoded).collect();
        self.forward_inputs(&inputs)
    }

    pub fn forward_inputs(&self, inputs: &[SeqInput]) -> Result<ForwardOutput> {
        let packed = self.pack(inputs)?;
        let cache = self.encode(&packed, None);
        Ok(ForwardOutput::from_cache(&packed, &cache))
    }

    /// Attention probabilities for one sequence, indexed `[layer][head]`.
    pub fn attention_maps(&self, seq: &EncodedSequence) -> Result<Vec<Vec<Array2<f64>>>> {
        let packed = self.pack(&[SeqInput::from_encoded(seq)])?;
        let cache = self.encode(&packed, None);
        Ok(cache
            .layers
            .iter()
            .map(|l| l.probs.clone())
            .collect())
    }

    /// Relevance logits for encoded sequences.
    pub fn logits(&self, batch: &[SeqInput]) -> Result<Array1<f64>> {
        let packed = self.pack(batch)?;
        let cache = self.encode(&packed, None);
        Ok(self.cls_logits(&packed, &cache))
    }

    /// Relevance probability `sigmoid(logit)` of one query/code pair.
    pub fn score(&self, vocab: &Vocabulary, query: &str, code: &str) -> f64 {
        self.score_pairs(vocab, &[(query, code)])[0]
    }

    /// Scores for many pairs, packed into one forward pass per chunk.
    pub fn score_pairs(&self, vocab: &Vocabulary, pairs: &[(&str, &str)]) -> Vec<f64> {
        const CHUNK: usize = 128;
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(CHUNK) {
            let inputs: Vec<SeqInput> = chunk
                .iter()
                .map(|(q, c)| SeqInput::from_encoded(&vocab.encode_pair(q, c, self.config.max_len)).trimmed())
                .collect();
            let logits = self.logits(&inputs).expect("encoder accepts its own encodings");
            out.extend(logits.iter().map(|&z| sigmoid(z)));
        }
        out
    }

    /// Checkpoint layout: magic line, optional artifact header, `config <json>`,
    /// one `tensor <name> <offset> <rows> <cols>` line per tensor, then
    /// `params <count>` followed by the raw little-endian `f64` buffer.
    pub fn write_checkpoint<W: Write>(&self, mut w: W, header: Option<&ArtifactHeader>) -> io::Result<()> {
        if let Some(h) = header {
            writeln!(w, "{h}")?;
        }
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "config {}", serde_json::to_string(&self.config)?)?;
        for (name, s) in &self.layout.named {
            writeln!(w, "tensor {name} {} {} {}", s.off, s.rows, s.cols)?;
        }
        writeln!(w, "params {}", self.params.len())?;
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&bytes)
    }

    pub fn save(&self, path: &Path, header: Option<&ArtifactHeader>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf, header)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(&fs::read(path)?)
    }

    pub fn read_checkpoint(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| ModelError::Checkpoint(m);
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<String> {
            let end = bytes[*pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            let line = std::str::from_utf8(&bytes[*pos..*pos + end])
                .map_err(|e| bad(e.to_string()))?
                .to_string();
            *pos += end + 1;
            Ok(line)
        };
        let mut first = next_line(&mut pos)?;
        while first.starts_with('#') {
            first = next_line(&mut pos)?;
        }
        if first != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut config: Option<EncoderConfig> = None;
        let mut tensors = Vec::new();
        let count = loop {
            let line = next_line(&mut pos)?;
            if line.starts_with('#') {
                continue;
            }
            if let Some(json) = line.strip_prefix("config ") {
                config = Some(serde_json::from_str(json).map_err(|e| bad(e.to_string()))?);
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                tensors.push(rest.to_string());
            } else if let Some(n) = line.strip_prefix("params ") {
                break n.parse::<usize>().map_err(|e| bad(e.to_string()))?;
            } else {
                return Err(bad(format!("unexpected line {line:?}")));
            }
        };
        let config = config.ok_or_else(|| bad("missing config".into()))?;
        let mut model = Self::new(config)?;
        let index: Vec<String> = model
            .layout
            .named
            .iter()
            .map(|(n, s)| format!("{n} {} {} {}", s.off, s.rows, s.cols))
            .collect();
        if index != tensors {
            return Err(bad("tensor index does not match config".into()));
        }
        if count != model.params.len() || bytes.len() - pos != count * 8 {
            return Err(bad(format!(
                "expected {} parameters, header says {count} and body holds {}",
                model.params.len(),
                (bytes.len() - pos) / 8
            )));
        }
        for (p, chunk) in model.params.iter_mut().zip(bytes[pos..].chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        if !model.all_finite() {
            return Err(ModelError::NonFinite("checkpoint parameters".into()));
        }
        Ok(model)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests;
