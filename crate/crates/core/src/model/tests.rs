use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::check_gradients;
use crate::autodiff::{Tape, Tensor};
use crate::error::Error;
use crate::pruning::{prune_to, Mask, PruningSchedule, SparsityMasks};

fn micro() -> TransformerConfig {
    TransformerConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        filter: 16,
        max_len: 16,
        dropout: 0.0,
        label_smoothing: 0.1,
        shared_embeddings: true,
    }
}

fn pairs() -> Vec<(Vec<usize>, Vec<usize>)> {
    vec![(vec![4, 5, 6], vec![6, 5, 4]), (vec![7, 4], vec![4, 7])]
}

fn batch_of(pairs: &[(Vec<usize>, Vec<usize>)]) -> Batch {
    let refs: Vec<(&[usize], &[usize])> = pairs.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    Batch::from_pairs(&refs)
}

fn loss_of(config: &TransformerConfig, params: &ModelParams<f32>, batch: &Batch) -> f32 {
    let vocab = vocab_size(config, params).unwrap();
    let mut tape = Tape::new();
    let (bound, _) = Bound::dense(&mut tape, params, false);
    let loss = Transformer::new(config, vocab).loss(&mut tape, &bound, batch).unwrap();
    tape.value(loss).data()[0]
}

fn logits_of(config: &TransformerConfig, params: &ModelParams<f32>, batch: &Batch) -> Vec<f32> {
    let vocab = vocab_size(config, params).unwrap();
    let net = Transformer::new(config, vocab);
    let mut tape = Tape::new();
    let (bound, _) = Bound::dense(&mut tape, params, false);
    let memory = net.encode(&mut tape, &bound, &batch.src).unwrap();
    let logits = net.decode(&mut tape, &bound, memory, &batch.src, &batch.tgt_in).unwrap();
    tape.value(logits).data().to_vec()
}

#[test]
fn base_parameter_count_near_published_total() {
    let params = build_model::<f32>(&TransformerConfig::base(), 4096, 1).unwrap();
    let counts = count_params(&params, None);
    assert_eq!(counts, expected_param_count(&TransformerConfig::base(), 4096));
    assert_eq!(counts.total, params.size());
    assert!((counts.total as f64 / 46.1e6 - 1.0).abs() < 0.01, "{}", counts.total);
    assert!((counts.attention as f64 / 18.6e6 - 1.0).abs() < 0.02, "{}", counts.attention);
}

#[test]
fn closed_form_matches_built_model() {
    for shared in [true, false] {
        for cfg in [TransformerConfig::tiny(), micro()] {
            let cfg = TransformerConfig {
                shared_embeddings: shared,
                ..cfg
            };
            let params = build_model::<f32>(&cfg, 300, 3).unwrap();
            assert_eq!(count_params(&params, None), expected_param_count(&cfg, 300));
        }
    }
}

#[test]
fn tiny_attention_block_is_four_d_squared() {
    let params = build_model::<f32>(&TransformerConfig::tiny(), 100, 1).unwrap();
    let block: usize = params
        .iter()
        .filter(|(n, _)| n.starts_with("encoder.0.self_attn."))
        .map(|(_, t)| t.len())
        .sum();
    assert_eq!(block, 4 * 128 * 128);
}

#[test]
fn zero_masks_leave_only_unprunable() {
    let cfg = micro();
    let params = build_model::<f32>(&cfg, 12, 1).unwrap();
    let mut masks = SparsityMasks::default();
    for (name, t) in params.prunable() {
        masks.insert(name, Mask::new(t.shape().to_vec(), vec![false; t.len()]));
    }
    let unprunable: usize = params.iter().filter(|(_, t)| !is_prunable(t)).map(|(_, t)| t.len()).sum();
    assert_eq!(count_params(&params, Some(&masks)).total, unprunable);
}

#[test]
fn build_is_deterministic_and_validates() {
    let a = build_model::<f32>(&micro(), 10, 5).unwrap();
    let b = build_model::<f32>(&micro(), 10, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, build_model::<f32>(&micro(), 10, 6).unwrap());
    let bad = TransformerConfig { heads: 3, ..micro() };
    assert!(matches!(build_model::<f32>(&bad, 10, 1), Err(Error::Config(_))));
}

#[test]
fn noam_schedule_values() {
    let lr = noam_lr(8000, 0.2, 512, 8000);
    assert!((lr - 9.882e-5).abs() < 1e-8, "{lr}");
    let arm_a = 8000f64.powf(-0.5);
    let arm_b = 8000.0 * 8000f64.powf(-1.5);
    assert!((arm_a - arm_b).abs() < 1e-15);
    let trace: Vec<f64> = (1..20_000).map(|s| noam_lr(s, 0.2, 512, 8000)).collect();
    assert!(trace[..7999].windows(2).all(|w| w[0] <= w[1]));
    assert!(trace[7999..].windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn micro_transformer_gradients_match_finite_differences() {
    let cfg = micro();
    let mut params = build_model::<f64>(&cfg, 9, 11).unwrap();
    // Perturb gains and biases so they are not all at special values.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let batch = batch_of(&pairs());
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let report = check_gradients(&inputs, 1e-4, |tape, vars| {
        let bound = Bound::from_vars(&params, vars)?;
        Transformer::new(&cfg, 9).loss(tape, &bound, &batch)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn decoder_is_causal() {
    let cfg = micro();
    let params = build_model::<f32>(&cfg, 12, 4).unwrap();
    let a = batch_of(&[(vec![4, 5, 6], vec![7, 8, 9, 10])]);
    let b = batch_of(&[(vec![4, 5, 6], vec![7, 8, 11, 4])]);
    let (la, lb) = (logits_of(&cfg, &params, &a), logits_of(&cfg, &params, &b));
    // Decoder inputs are BOS,7,8,x,y: positions 0..=2 see identical prefixes.
    assert_eq!(la[..3 * 12], lb[..3 * 12]);
    assert_ne!(la[3 * 12..4 * 12], lb[3 * 12..4 * 12]);
}

#[test]
fn padding_does_not_change_loss() {
    let cfg = micro();
    let params = build_model::<f32>(&cfg, 12, 4).unwrap();
    let batch = batch_of(&pairs());
    let pad = |s: &SeqBatch, extra: usize| {
        let rows: Vec<Vec<usize>> = (0..s.batch)
            .map(|r| {
                let mut row = s.row(r).to_vec();
                row.resize(s.len + extra, PAD);
                row
            })
            .collect();
        SeqBatch::from_rows(&rows)
    };
    let padded = Batch {
        src: pad(&batch.src, 3),
        tgt_in: pad(&batch.tgt_in, 2),
        tgt_out: pad(&batch.tgt_out, 2),
    };
    let (a, b) = (loss_of(&cfg, &params, &batch), loss_of(&cfg, &params, &padded));
    assert!((a - b).abs() < 1e-5, "{a} vs {b}");
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        batch_tokens: 64,
        base_lr: 1.0,
        warmup_steps: 10,
        total_steps: 50,
        seed: 3,
        optimizer: OptimizerKind::Adam,
    }
}

#[test]
fn overfits_a_single_pair() {
    let cfg = micro();
    let params = build_model::<f32>(&cfg, 12, 1).unwrap();
    let train = TrainConfig { base_lr: 0.3, ..quick_train() };
    let mut trainer = Trainer::new(cfg.clone(), train, 12, params, None).unwrap();
    let batch = batch_of(&pairs()[..1]);
    let trace: Vec<f32> = (0..50).map(|_| trainer.train_step(&batch).unwrap()).collect();
    assert!(trace.windows(2).all(|w| w[1] < w[0]), "{trace:?}");
    let floor = smoothed_entropy_floor(12, cfg.label_smoothing);
    assert!(trace.iter().all(|&l| l as f64 >= floor - 1e-5));
}

#[test]
fn adafactor_also_reduces_loss() {
    let cfg = micro();
    let params = build_model::<f32>(&cfg, 12, 1).unwrap();
    let train = TrainConfig {
        optimizer: OptimizerKind::Adafactor,
        base_lr: 0.5,
        ..quick_train()
    };
    let mut trainer = Trainer::new(cfg, train, 12, params, None).unwrap();
    let batch = batch_of(&pairs());
    let first = trainer.train_step(&batch).unwrap();
    let last = (0..49).map(|_| trainer.train_step(&batch).unwrap()).last().unwrap();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn smoothed_floor_matches_direct_entropy() {
    // V = 4, eps = 0.1: q = (0.925, 0.025, 0.025, 0.025).
    let direct = -(0.925f64 * 0.925f64.ln() + 3.0 * 0.025 * 0.025f64.ln());
    assert!((smoothed_entropy_floor(4, 0.1) - direct).abs() < 1e-12);
    assert_eq!(smoothed_entropy_floor(4, 0.0), 0.0);
}

#[test]
fn equal_seeds_give_identical_traces() {
    let cfg = TransformerConfig { dropout: 0.1, ..micro() };
    let run = || {
        let params = build_model::<f32>(&cfg, 12, 1).unwrap();
        let schedule = PruningSchedule::new(5, 20, 5, 0.5).unwrap();
        let mut trainer = Trainer::new(cfg.clone(), TrainConfig { total_steps: 30, ..quick_train() }, 12, params, Some(schedule)).unwrap();
        let trace = trainer.fit(&pairs()).unwrap();
        (trace, trainer.into_parts())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 30);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn pruned_training_reaches_end_sparsity() {
    let cfg = micro();
    let params = build_model::<f32>(&cfg, 12, 1).unwrap();
    let schedule = PruningSchedule::new(5, 20, 5, 0.5).unwrap();
    let train = TrainConfig { total_steps: 25, ..quick_train() };
    let mut trainer = Trainer::new(cfg, train, 12, params, Some(schedule)).unwrap();
    trainer.fit(&pairs()).unwrap();
    let (params, masks) = trainer.into_parts();
    let report = crate::pruning::sparsity_report(&params, &masks);
    assert!((report.global_nonzero_fraction() - 0.5).abs() < 0.01);
    for (name, mask) in masks.iter() {
        let t = params.get(name).unwrap();
        for (v, k) in t.data().iter().zip(mask.keep()) {
            if !k {
                assert_eq!(*v, 0.0);
            }
        }
    }
}

#[test]
fn nan_loss_names_the_step() {
    let cfg = micro();
    let mut params = build_model::<f32>(&cfg, 12, 1).unwrap();
    params.get_mut(SHARED_EMBEDDING).unwrap().data_mut()[0] = f32::NAN;
    let mut trainer = Trainer::new(cfg, quick_train(), 12, params, None).unwrap();
    match trainer.train_step(&batch_of(&pairs())) {
        Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected non-finite loss error, got {other:?}"),
    }
}

#[test]
fn token_batches_respect_budget() {
    let lengths: Vec<(usize, usize)> = (0..100).map(|i| (i % 13 + 1, i % 7 + 2)).collect();
    let batches = batch_by_tokens(&lengths, 40, 9);
    let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..100).collect::<Vec<_>>());
    for b in &batches {
        let longest = b.iter().map(|&i| lengths[i].0.max(lengths[i].1) + 1).max().unwrap();
        assert!(b.len() == 1 || b.len() * longest <= 40);
    }
    assert_eq!(batches, batch_by_tokens(&lengths, 40, 9));
}

fn trained_micro() -> (TransformerConfig, ModelParams<f32>) {
    let cfg = micro();
    let params = build_model::<f32>(&cfg, 12, 1).unwrap();
    let mut trainer = Trainer::new(cfg.clone(), TrainConfig { total_steps: 60, ..quick_train() }, 12, params, None).unwrap();
    trainer.fit(&pairs()).unwrap();
    let (params, _) = trainer.into_parts();
    (cfg, params)
}

#[test]
fn beam_of_one_equals_greedy() {
    let (cfg, params) = trained_micro();
    for (src, _) in pairs() {
        let greedy = decode_greedy(&cfg, &params, std::slice::from_ref(&src), 10).unwrap();
        let beam = decode_beam(&cfg, &params, &src, 1, 10).unwrap();
        assert_eq!(greedy[0], beam);
    }
}

#[test]
fn decoded_length_is_bounded() {
    let cfg = micro();
    let params = build_model::<f32>(&cfg, 12, 7).unwrap();
    let srcs = vec![vec![4, 5, 6, 7], vec![], vec![8]];
    for max_len in [0, 1, 3, 40] {
        let out = decode_greedy(&cfg, &params, &srcs, max_len).unwrap();
        assert!(out.iter().all(|o| o.len() <= max_len.min(cfg.max_len)));
        assert!(out[1].is_empty());
        let beam = decode_beam(&cfg, &params, &srcs[0], DEFAULT_BEAM, max_len).unwrap();
        assert!(beam.len() <= max_len);
    }
}

#[test]
fn batched_greedy_matches_single() {
    let (cfg, params) = trained_micro();
    let srcs: Vec<Vec<usize>> = pairs().into_iter().map(|(s, _)| s).collect();
    let batched = decode_greedy(&cfg, &params, &srcs, 10).unwrap();
    for (s, b) in srcs.iter().zip(&batched) {
        assert_eq!(&decode_greedy(&cfg, &params, std::slice::from_ref(s), 10).unwrap()[0], b);
    }
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let (cfg, params) = trained_micro();
    let mut masks = SparsityMasks::dense(&params);
    prune_to(&params, &mut masks, 0.7).unwrap();
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            model: cfg.clone(),
            step: 60,
            seed: 3,
            end_sparsity: 0.7,
        },
        params,
        masks,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let batch = batch_of(&pairs());
    let a = logits_of(&cfg, &ckpt.params, &batch);
    let b = logits_of(&cfg, &loaded.params, &batch);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (cfg, params) = trained_micro();
    let masks = SparsityMasks::dense(&params);
    let ckpt = Checkpoint {
        meta: CheckpointMeta { model: cfg, step: 0, seed: 0, end_sparsity: 0.0 },
        params,
        masks,
    };
    let bytes = ckpt.to_bytes().unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
    let mut extra = bytes;
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}
