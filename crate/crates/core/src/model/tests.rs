use super::*;
use crate::tokenizer::{CLS, MASK, PAD, SEP};

fn toy_model(layers: usize, seed: u64) -> EncoderModel {
    let cfg = EncoderConfig { layers, seed, dropout: 0.0, ..EncoderConfig::toy(300) };
    EncoderModel::new(cfg).unwrap()
}

fn ids(rng: &mut SeededRng, len: usize) -> Vec<u32> {
    let mut v = vec![CLS];
    v.extend((1..len - 1).map(|_| 5 + rng.below(295) as u32));
    v.push(SEP);
    v
}

fn mixed_batch(seed: u64) -> Vec<TrainExample> {
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();
    for (i, len) in [7usize, 12, 5].into_iter().enumerate() {
        let mut input = SeqInput::new(ids(&mut rng, len));
        // padded tail on the second sequence
        if i == 1 {
            for j in 9..12 {
                input.ids[j] = PAD;
                input.mask[j] = false;
            }
        }
        out.push(TrainExample {
            input,
            mlm_targets: vec![(1, 5 + rng.below(295) as u32), (3, 5 + rng.below(295) as u32)],
            label: Some((i % 2) as f64),
        });
    }
    out
}

fn perturbed(layers: usize) -> EncoderModel {
    let mut model = toy_model(layers, 3);
    let mut rng = SeededRng::new(9);
    for p in model.params_mut() {
        *p += 0.05 * (rng.unit_f64() - 0.5);
    }
    model
}

fn encoded(ids: Vec<u32>, content: usize) -> EncodedSequence {
    let mask = (0..ids.len()).map(|i| u8::from(i < content)).collect();
    EncodedSequence { ids, attention_mask: mask }
}

#[test]
fn config_validation() {
    assert!(EncoderConfig::default().validate().is_ok());
    let bad = EncoderConfig { hidden: 30, heads: 4, ..EncoderConfig::default() };
    assert!(matches!(bad.validate(), Err(ModelError::InvalidConfig(_))));
    let zero = EncoderConfig { ffn: 0, ..EncoderConfig::default() };
    assert!(zero.validate().is_err());
    assert!(EncoderModel::new(EncoderConfig::toy(300)).unwrap().num_params() < 100_000);
}

#[test]
fn parameter_shapes_follow_config() {
    let model = toy_model(2, 0);
    let cfg = model.config().clone();
    assert_eq!(model.tensor("tok_emb").unwrap().len(), cfg.vocab_size * cfg.hidden);
    assert_eq!(model.tensor("layer1.w1").unwrap().len(), cfg.hidden * cfg.ffn);
    assert_eq!(model.tensor("cls.w").unwrap().len(), cfg.hidden);
    assert!(model.tensor("emb_ln.g").unwrap().iter().all(|&g| g == 1.0));
    let total: usize = model.tensor_index().iter().map(|(_, _, r, c)| r * c).sum();
    assert_eq!(total, model.num_params());
}

#[test]
fn all_pad_tail_gives_finite_deterministic_cls() {
    let model = toy_model(2, 1);
    let seq = encoded(vec![CLS, PAD, PAD, PAD, PAD], 1);
    let a = model.forward(std::slice::from_ref(&seq)).unwrap();
    let b = model.forward(std::slice::from_ref(&seq)).unwrap();
    assert!(a.cls.iter().all(|x| x.is_finite()));
    assert_eq!(a.cls, b.cls);
}

#[test]
fn pad_tail_content_does_not_change_cls() {
    let model = toy_model(2, 1);
    let a = encoded(vec![CLS, 10, 11, SEP, PAD, PAD, PAD], 4);
    let b = encoded(vec![CLS, 10, 11, SEP, 77, 120, 9], 4);
    let oa = model.forward(&[a]).unwrap();
    let ob = model.forward(&[b]).unwrap();
    assert_eq!(oa.cls, ob.cls);
    // trimming the tail leaves the content rows untouched too
    let trimmed = model.forward_inputs(&[SeqInput::new(vec![CLS, 10, 11, SEP])]).unwrap();
    assert_eq!(trimmed.hidden[0], oa.hidden[0].slice(ndarray::s![0..4, ..]));
}

#[test]
fn identical_sequences_give_identical_rows() {
    let model = toy_model(2, 2);
    let s = encoded(vec![CLS, 40, 41, 42, SEP], 5);
    let out = model.forward(&[s.clone(), s]).unwrap();
    assert_eq!(out.cls.row(0), out.cls.row(1));
}

#[test]
fn forward_rejects_bad_shapes() {
    let model = toy_model(1, 0);
    let long = SeqInput::new(vec![CLS; model.config().max_len + 1]);
    assert!(matches!(model.forward_inputs(&[long]), Err(ModelError::SequenceTooLong { .. })));
    let oob = SeqInput::new(vec![CLS, 300]);
    assert!(matches!(model.forward_inputs(&[oob]), Err(ModelError::TokenOutOfRange { .. })));
    let ragged = SeqInput { ids: vec![CLS, 5], mask: vec![true] };
    assert!(matches!(model.forward_inputs(&[ragged]), Err(ModelError::Shape(_))));
}

#[test]
fn attention_rows_sum_to_one_and_skip_padding() {
    let model = perturbed(2);
    let seq = encoded(vec![CLS, 10, 20, 30, SEP, PAD, PAD], 5);
    for layer in model.attention_maps(&seq).unwrap() {
        for head in layer {
            for row in head.outer_iter() {
                assert!((row.iter().take(5).sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().skip(5).all(|&p| p == 0.0));
            }
        }
    }
}

#[test]
fn zeroed_head_scores_one_half() {
    let vocab = Vocabulary::train(&["set status field", "return the value"], 300).unwrap();
    let mut model = toy_model(2, 4);
    model.zero_classifier_head();
    assert_eq!(model.score(&vocab, "set status", "func Set() {}"), 0.5);
}

#[test]
fn score_is_independent_of_batch_context() {
    let vocab = Vocabulary::train(&["set status field", "return the value", "func main"], 300).unwrap();
    let model = perturbed(2);
    let pairs = [("set status", "func Set() {}"), ("return value", "return x"), ("main", "func main() { loop {} }")];
    let batched = model.score_pairs(&vocab, &pairs);
    for (i, (q, c)) in pairs.iter().enumerate() {
        let alone = model.score(&vocab, q, c);
        assert!((alone - batched[i]).abs() < 1e-12, "{alone} vs {}", batched[i]);
        assert!(alone > 0.0 && alone < 1.0);
    }
}

#[test]
fn sigmoid_is_stable() {
    assert_eq!(sigmoid(0.0), 0.5);
    assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
    assert_eq!(sigmoid(800.0), 1.0);
}

#[test]
fn gradient_check_zero_layer() {
    let model = perturbed(0);
    let rep = grad_check(&model, &mixed_batch(1), &GradCheckOptions::default()).unwrap();
    assert!(rep.checks.len() >= 200);
    assert!(rep.passes(1e-6), "{:?}", rep.worst());
}

#[test]
fn gradient_check_two_layers() {
    let model = perturbed(2);
    let rep = grad_check(&model, &mixed_batch(2), &GradCheckOptions { seed: 5, ..Default::default() }).unwrap();
    assert!(rep.passes(1e-3), "{:?}", rep.worst());
    let tensors: std::collections::BTreeSet<_> = rep.checks.iter().map(|c| c.tensor.as_str()).collect();
    assert_eq!(tensors.len(), model.tensor_index().len(), "every tensor probed");
}

#[test]
fn no_mlm_targets_means_zero_mlm_head_gradient() {
    let model = perturbed(2);
    let mut batch = mixed_batch(3);
    for ex in &mut batch {
        ex.mlm_targets.clear();
    }
    let (_, grad) = loss_and_gradient(&model, &batch).unwrap();
    for name in ["mlm.w", "mlm.b"] {
        let (_, off, r, c) = model.tensor_index().into_iter().find(|t| t.0 == name).unwrap();
        assert!(grad[off..off + r * c].iter().all(|&g| g == 0.0));
    }
}

#[test]
fn unselected_positions_get_no_mlm_gradient() {
    // Without attention layers each position is independent, so embedding rows
    // used only at unselected positions must receive exactly zero gradient.
    let model = perturbed(0);
    let ex = TrainExample {
        input: SeqInput::new(vec![CLS, 100, 101, 102, SEP]),
        mlm_targets: vec![(2, 50)],
        label: None,
    };
    let (_, grad) = loss_and_gradient(&model, &[ex]).unwrap();
    let d = model.config().hidden;
    let (_, off, _, _) = model.tensor_index().into_iter().find(|t| t.0 == "tok_emb").unwrap();
    let row = |t: usize| &grad[off + t * d..off + (t + 1) * d];
    for t in [CLS as usize, 100, 102, SEP as usize] {
        assert!(row(t).iter().all(|&g| g == 0.0), "token {t}");
    }
    assert!(row(101).iter().any(|&g| g != 0.0));
}

#[test]
fn masked_count_rounds_half_up() {
    assert_eq!(masked_count(100, 0.15), 15);
    assert_eq!(masked_count(10, 0.15), 2);
    assert_eq!(masked_count(3, 0.15), 1);
    assert_eq!(masked_count(0, 0.15), 0);
    assert_eq!(masked_count(4, 1.0), 4);
}

#[test]
fn masking_selects_only_content_and_splits_80_10_10() {
    let mut rng = SeededRng::new(11);
    let mut ids = vec![CLS];
    ids.extend((0..100).map(|i| 5 + i as u32));
    ids.push(SEP);
    ids.extend([PAD; 4]);
    let mut seq = SeqInput::new(ids);
    for m in seq.mask.iter_mut().skip(102) {
        *m = false;
    }
    let (mut masked, mut random, mut kept) = (0, 0, 0);
    for _ in 0..2000 {
        let m = mask_tokens(&seq, 0.15, 300, &mut rng).unwrap();
        assert_eq!(m.targets.len(), 15);
        for &(p, orig) in &m.targets {
            assert!((1..=100).contains(&p));
            assert_eq!(seq.ids[p], orig);
            match m.input.ids[p] {
                MASK => masked += 1,
                t if t == orig => kept += 1,
                t => {
                    assert!(t as usize >= crate::tokenizer::NUM_SPECIAL && (t as usize) < 300);
                    random += 1;
                }
            }
        }
        let changed = (0..seq.ids.len()).filter(|&i| seq.ids[i] != m.input.ids[i]).count();
        assert!(changed <= 15);
    }
    let total = f64::from(masked + random + kept);
    assert!((f64::from(masked) / total - 0.8).abs() < 0.01);
    // random replacements occasionally hit the original token
    assert!((f64::from(random + kept) / total - 0.2).abs() < 0.01);
    assert!(mask_tokens(&SeqInput::new(vec![CLS, SEP]), 0.15, 300, &mut rng).is_none());
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut adam = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
    let mut p = vec![1.0, -1.0];
    adam.step(&mut p, &[2.0, -0.5]);
    assert!((p[0] - 0.9).abs() < 1e-7);
    assert!((p[1] + 0.9).abs() < 1e-7);
}

fn mlm_corpus(n: usize, seed: u64) -> Vec<EncodedSequence> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| {
            let len = 6 + rng.below(6);
            let start = 5 + rng.below(40) as u32;
            let mut ids = vec![CLS];
            ids.extend((0..len as u32).map(|k| start + k));
            ids.push(SEP);
            let content = ids.len();
            ids.resize(16, PAD);
            encoded(ids, content)
        })
        .collect()
}

#[test]
fn pretraining_is_deterministic_and_reduces_loss() {
    let corpus = mlm_corpus(64, 1);
    let cfg = TrainConfig { batch_size: 16, learning_rate: 3e-3, max_epochs: 8, seed: 2, ..TrainConfig::pretrain() };
    let mut a = toy_model(1, 0);
    let mut b = toy_model(1, 0);
    let ra = pretrain_mlm(&mut a, &corpus, &cfg).unwrap();
    let rb = pretrain_mlm(&mut b, &corpus, &cfg).unwrap();
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(a, b);
    assert_eq!(ra.steps, 32);
    assert_eq!(ra.skipped, 0);
    let ln_v = (300f64).ln();
    assert!((ra.losses[0] - ln_v).abs() / ln_v < 0.2, "{}", ra.losses[0]);
    assert!(ra.losses.last().unwrap() < &ra.losses[0]);
}

#[test]
fn pretraining_counts_unmaskable_sequences() {
    let mut corpus = mlm_corpus(4, 2);
    corpus.push(encoded(vec![CLS, SEP, PAD], 2));
    let cfg = TrainConfig { batch_size: 2, ..TrainConfig::pretrain() };
    let report = pretrain_mlm(&mut toy_model(1, 0), &corpus, &cfg).unwrap();
    assert_eq!(report.skipped, 1);
    assert_eq!(report.steps, 2);
    assert!(matches!(pretrain_mlm(&mut toy_model(1, 0), &[], &cfg), Err(ModelError::EmptyCorpus)));
}

#[test]
fn sharded_gradients_match_serial_ones() {
    let model = perturbed(2);
    let batch = mixed_batch(4);
    let (l1, g1) = train::gradient_sharded(&model, &batch, 1);
    let (l3, g3) = train::gradient_sharded(&model, &batch, 3);
    assert!((l1 - l3).abs() < 1e-12);
    assert!(g1.iter().zip(&g3).all(|(a, b)| (a - b).abs() < 1e-12));
}

fn pairs(nl: crate::corpus::NatLang) -> Vec<crate::corpus::PairExample> {
    use crate::corpus::{PairExample, ProgLang};
    (0..8)
        .map(|i| PairExample {
            label: (i % 2) as u8,
            query: format!("query {i}"),
            code: format!("code {i}"),
            nl,
            pl: ProgLang::Go,
        })
        .collect()
}

#[test]
fn finetune_contracts() {
    use crate::corpus::NatLang;
    let vocab = Vocabulary::train(&["query code 0 1 2 3 4 5 6 7"], 300).unwrap();
    let base = toy_model(1, 5);

    let mut m = base.clone();
    let zero = TrainConfig { max_epochs: 0, ..TrainConfig::finetune() };
    let r = finetune_pairs(&mut m, &vocab, &pairs(NatLang::En), &zero).unwrap();
    assert_eq!(r.steps, 0);
    assert_eq!(m, base);

    let mut mixed = pairs(NatLang::En);
    mixed[3].nl = NatLang::Ja;
    assert!(matches!(
        finetune_pairs(&mut m, &vocab, &mixed, &TrainConfig::finetune()),
        Err(ModelError::MixedLanguages { .. })
    ));

    let cfg = TrainConfig { batch_size: 4, seed: 3, ..TrainConfig::finetune() };
    let mut a = base.clone();
    let mut b = base.clone();
    let ra = finetune_pairs(&mut a, &vocab, &pairs(NatLang::En), &cfg).unwrap();
    finetune_pairs(&mut b, &vocab, &pairs(NatLang::En), &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, base);
    assert_eq!((ra.steps, ra.epochs), (6, 3));
}

#[test]
fn checkpoint_round_trip() {
    let model = perturbed(2);
    let header = ArtifactHeader::new("abcd", 7);
    let mut buf = Vec::new();
    model.write_checkpoint(&mut buf, Some(&header)).unwrap();
    let back = EncoderModel::read_checkpoint(&buf).unwrap();
    assert_eq!(back, model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path, None).unwrap();
    assert_eq!(EncoderModel::load(&path).unwrap(), model);
    assert!(EncoderModel::read_checkpoint(&buf[..buf.len() - 8]).is_err());
    assert!(EncoderModel::read_checkpoint(b"nonsense\n").is_err());
}

#[test]
fn loss_curve_format() {
    let mut out = Vec::new();
    write_loss_curve(&mut out, &[2.5, 1.25], None).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), "step\tloss\n0\t2.5\n1\t1.25\n");
}
