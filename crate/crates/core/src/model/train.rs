//! MLM pre-training, relevance fine-tuning and the Adam optimizer.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoder::{LossParts, Objective, SeqInput};
use super::{EncoderModel, ModelError, Result};
use crate::artifact::ArtifactHeader;
use crate::corpus::PairExample;
use crate::rng::SeededRng;
use crate::tokenizer::{EncodedSequence, Vocabulary, MASK, NUM_SPECIAL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mask_rate: f64,
    pub seed: u64,
    /// Gradient shards per batch, computed in parallel and summed in shard
    /// order. Results are bit-reproducible for a fixed shard count.
    pub shards: usize,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            batch_size: 64,
            learning_rate: 2e-4,
            max_epochs: 1,
            max_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mask_rate: 0.15,
            seed: 0,
            shards: 1,
        }
    }

    pub fn finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            batch_size: 16,
            learning_rate: 1e-5,
            max_epochs: 3,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive");
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return bad("mask_rate must lie in (0, 1]");
        }
        if self.shards == 0 {
            return bad("shards must be positive");
        }
        Ok(())
    }
}

/// Adam with constant learning rate and bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn from_config(n: usize, cfg: &TrainConfig) -> Self {
        Self::new(n, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len(), "gradient length");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One training sequence with its loss targets: MLM `(position, token)`
/// pairs and/or a relevance label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub input: SeqInput,
    pub mlm_targets: Vec<(usize, u32)>,
    pub label: Option<f64>,
}

/// A sequence after MLM corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub input: SeqInput,
    /// Selected positions with their original tokens.
    pub targets: Vec<(usize, u32)>,
}

/// Positions to select out of `maskable`: `round_half_up(rate * maskable)`,
/// at least one whenever anything is maskable.
pub fn masked_count(maskable: usize, rate: f64) -> usize {
    if maskable == 0 {
        return 0;
    }
    let raw = (rate * maskable as f64 + 0.5).floor() as usize;
    raw.clamp(1, maskable)
}

/// Select `masked_count` non-special, non-padding positions; replace 80% of
/// them with MASK, 10% with a random non-special token, keep 10%.
/// Returns `None` when the sequence has no maskable position.
pub fn mask_tokens(seq: &SeqInput, rate: f64, vocab_size: usize, rng: &mut SeededRng) -> Option<MaskedSequence> {
    let maskable: Vec<usize> = (0..seq.ids.len())
        .filter(|&i| seq.mask[i] && !Vocabulary::is_special(seq.ids[i]))
        .collect();
    let count = masked_count(maskable.len(), rate);
    if count == 0 {
        return None;
    }
    let mut chosen: Vec<usize> = rng.sample_indices(maskable.len(), count).into_iter().map(|i| maskable[i]).collect();
    chosen.sort_unstable();
    let mut input = seq.clone();
    let mut targets = Vec::with_capacity(count);
    for pos in chosen {
        targets.push((pos, seq.ids[pos]));
        let r = rng.unit_f64();
        if r < 0.8 {
            input.ids[pos] = MASK;
        } else if r < 0.9 {
            input.ids[pos] = (NUM_SPECIAL + rng.below(vocab_size - NUM_SPECIAL)) as u32;
        }
    }
    Some(MaskedSequence { input, targets })
}

fn norm(count: usize) -> f64 {
    count.max(1) as f64
}

/// MLM targets as (example, position, token) and labels as (example, label).
type BatchTargets = (Vec<(usize, usize, u32)>, Vec<(usize, f64)>);

fn batch_objective(examples: &[TrainExample]) -> BatchTargets {
    let mut mlm = Vec::new();
    let mut labels = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        mlm.extend(ex.mlm_targets.iter().map(|&(p, t)| (i, p, t)));
        if let Some(y) = ex.label {
            labels.push((i, y));
        }
    }
    (mlm, labels)
}

/// Mean loss over a batch: MLM cross-entropy averaged over selected positions
/// plus binary cross-entropy averaged over labelled sequences.
pub fn batch_loss(model: &EncoderModel, examples: &[TrainExample]) -> Result<f64> {
    let (mlm, labels) = batch_objective(examples);
    let obj = Objective { mlm_targets: &mlm, labels: &labels, mlm_norm: norm(mlm.len()), cls_norm: norm(labels.len()) };
    let inputs: Vec<SeqInput> = examples.iter().map(|e| e.input.clone()).collect();
    let parts = model.loss(&inputs, &obj)?;
    let loss = parts.mlm_sum / obj.mlm_norm + parts.cls_sum / obj.cls_norm;
    if !loss.is_finite() {
        return Err(ModelError::NonFinite("loss".into()));
    }
    Ok(loss)
}

/// [`batch_loss`] and its gradient with respect to every parameter, without dropout.
pub fn loss_and_gradient(model: &EncoderModel, examples: &[TrainExample]) -> Result<(f64, Vec<f64>)> {
    gradient(model, examples, None, 1)
}

#[cfg(test)]
pub(crate) fn gradient_sharded(model: &EncoderModel, examples: &[TrainExample], shards: usize) -> (f64, Vec<f64>) {
    gradient(model, examples, None, shards).unwrap()
}

fn gradient(
    model: &EncoderModel,
    examples: &[TrainExample],
    dropout_seed: Option<u64>,
    shards: usize,
) -> Result<(f64, Vec<f64>)> {
    let (mlm_all, labels_all) = batch_objective(examples);
    let mlm_norm = norm(mlm_all.len());
    let cls_norm = norm(labels_all.len());
    let shard_len = examples.len().div_ceil(shards.max(1)).max(1);
    let run = |(si, chunk): (usize, &[TrainExample])| -> Result<(LossParts, Vec<f64>)> {
        let (mlm, labels) = batch_objective(chunk);
        let obj = Objective { mlm_targets: &mlm, labels: &labels, mlm_norm, cls_norm };
        let inputs: Vec<SeqInput> = chunk.iter().map(|e| e.input.clone()).collect();
        let mut grad = vec![0.0; model.num_params()];
        let mut rng = dropout_seed.map(|s| SeededRng::derive(s, &format!("dropout-shard-{si}")));
        let parts = model.loss_and_grad(&inputs, &obj, rng.as_mut(), &mut grad)?;
        Ok((parts, grad))
    };
    let results: Vec<Result<(LossParts, Vec<f64>)>> = if shards > 1 {
        examples.par_chunks(shard_len).enumerate().map(run).collect()
    } else {
        examples.chunks(shard_len).enumerate().map(run).collect()
    };
    let mut total = LossParts::default();
    let mut grad: Option<Vec<f64>> = None;
    for r in results {
        let (parts, g) = r?;
        total.mlm_sum += parts.mlm_sum;
        total.cls_sum += parts.cls_sum;
        match grad.as_mut() {
            None => grad = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        }
    }
    let grad = grad.unwrap_or_else(|| vec![0.0; model.num_params()]);
    let loss = total.mlm_sum / mlm_norm + total.cls_sum / cls_norm;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(ModelError::NonFinite("loss or gradient".into()));
    }
    Ok((loss, grad))
}

fn apply_step(
    model: &mut EncoderModel,
    adam: &mut Adam,
    batch: &[TrainExample],
    dropout_seed: u64,
    shards: usize,
) -> Result<f64> {
    let (loss, grad) = gradient(model, batch, Some(dropout_seed), shards)?;
    adam.step(model.params_mut(), &grad);
    if !model.all_finite() {
        return Err(ModelError::NonFinite(format!("parameters after step {}", adam.steps())));
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean masked-token cross-entropy per optimizer step.
    pub losses: Vec<f64>,
    pub steps: usize,
    /// Sequences without any maskable position.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    /// Mean binary cross-entropy per optimizer step.
    pub losses: Vec<f64>,
    pub steps: usize,
    pub epochs: usize,
}

/// Masked language model pre-training. Each epoch visits the corpus in a
/// seeded order and draws fresh masks per sequence.
pub fn pretrain_mlm(model: &mut EncoderModel, corpus: &[EncodedSequence], cfg: &TrainConfig) -> Result<PretrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let vocab_size = model.config().vocab_size;
    let inputs: Vec<SeqInput> = corpus.iter().map(|e| SeqInput::from_encoded(e).trimmed()).collect();
    // Validate shapes and ids once, before any update.
    model.pack(&inputs)?;
    let mut order_rng = SeededRng::derive(cfg.seed, "pretrain-order");
    let mut mask_rng = SeededRng::derive(cfg.seed, "mlm-mask");
    let mut dropout_rng = SeededRng::derive(cfg.seed, "dropout");
    let mut adam = Adam::from_config(model.num_params(), cfg);
    let mut report = PretrainReport { losses: Vec::new(), steps: 0, skipped: 0 };
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order_rng.shuffle(&mut order);
        let mut examples = Vec::with_capacity(order.len());
        for i in order {
            match mask_tokens(&inputs[i], cfg.mask_rate, vocab_size, &mut mask_rng) {
                Some(m) => examples.push(TrainExample { input: m.input, mlm_targets: m.targets, label: None }),
                None if epoch == 0 => report.skipped += 1,
                None => {}
            }
        }
        if examples.is_empty() {
            break;
        }
        for batch in examples.chunks(cfg.batch_size) {
            if report.steps >= max_steps {
                break 'epochs;
            }
            let loss = apply_step(model, &mut adam, batch, dropout_rng.next_u64(), cfg.shards)?;
            log::debug!("pretrain step {} loss {loss:.6}", report.steps);
            report.losses.push(loss);
            report.steps += 1;
        }
    }
    Ok(report)
}

/// Encode labelled pairs as `[CLS] query [SEP] code [SEP]` training examples.
pub fn pair_examples(vocab: &Vocabulary, pairs: &[PairExample], max_len: usize) -> Vec<TrainExample> {
    pairs
        .iter()
        .map(|p| TrainExample {
            input: SeqInput::from_encoded(&vocab.encode_pair(&p.query, &p.code, max_len)).trimmed(),
            mlm_targets: Vec::new(),
            label: Some(f64::from(p.label)),
        })
        .collect()
}

/// Fine-tune the relevance head (and the encoder beneath it) with binary
/// cross-entropy. All pairs must share one (nl, pl).
pub fn finetune_pairs(
    model: &mut EncoderModel,
    vocab: &Vocabulary,
    pairs: &[PairExample],
    cfg: &TrainConfig,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    let first = pairs.first().ok_or(ModelError::EmptyCorpus)?;
    if let Some(other) = pairs.iter().find(|p| p.nl != first.nl || p.pl != first.pl) {
        return Err(ModelError::MixedLanguages {
            first: format!("{}/{}", first.nl, first.pl),
            other: format!("{}/{}", other.nl, other.pl),
        });
    }
    let examples = pair_examples(vocab, pairs, model.config().max_len);
    let inputs: Vec<SeqInput> = examples.iter().map(|e| e.input.clone()).collect();
    model.pack(&inputs)?;
    let mut order_rng = SeededRng::derive(cfg.seed, "finetune-order");
    let mut dropout_rng = SeededRng::derive(cfg.seed, "dropout");
    let mut adam = Adam::from_config(model.num_params(), cfg);
    let mut report = FinetuneReport { losses: Vec::new(), steps: 0, epochs: 0 };
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for _ in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if report.steps >= max_steps {
                break 'epochs;
            }
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let loss = apply_step(model, &mut adam, &batch, dropout_rng.next_u64(), cfg.shards)?;
            log::debug!("finetune step {} loss {loss:.6}", report.steps);
            report.losses.push(loss);
            report.steps += 1;
        }
        report.epochs += 1;
    }
    Ok(report)
}

/// Loss curve as tab-separated `step\tloss` lines.
pub fn write_loss_curve<W: Write>(mut w: W, losses: &[f64], header: Option<&ArtifactHeader>) -> io::Result<()> {
    if let Some(h) = header {
        writeln!(w, "{h}")?;
    }
    writeln!(w, "step\tloss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i}\t{l}")?;
    }
    Ok(())
}
