use fusemt::checkpoint::Container;
use fusemt::model::{FusedModel, FusedModelConfig};
use fusemt::training::{make_batches, shifted, token_loss, Example, TrainConfig, TrainRunLog, Trainer};
use fusemt::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn copy_examples(n: usize, vocab: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(2..6);
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(4..vocab)).collect();
            Example {
                tgt: src.clone(),
                src,
                provider: None,
            }
        })
        .collect()
}

fn small_trainer(seed: u64) -> Trainer {
    let cfg = FusedModelConfig {
        layers: 1,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        src_vocab: 12,
        tgt_vocab: 12,
        variant: "no_provider_baseline".into(),
        dropout: 0.1,
        ..FusedModelConfig::default()
    };
    let tc = TrainConfig {
        max_steps: 12,
        batch_tokens: 24,
        eval_every: 4,
        eval_decode: 4,
        seed,
        ..TrainConfig::default()
    };
    Trainer::new(FusedModel::new(cfg, seed).unwrap(), tc).unwrap()
}

#[test]
fn uniform_logits_cost_log_of_vocabulary() {
    let logits = Tensor::new(vec![3, 4], vec![0.7; 12]).unwrap();
    let l = token_loss(&logits, &[Some(0), Some(3), Some(2)], 0.0).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-15);
    let smoothed = token_loss(&logits, &[Some(1), None, Some(2)], 0.1).unwrap();
    assert!((smoothed - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn smoothed_loss_matches_hand_value() {
    // probabilities 1/6, 2/6, 3/6 with the middle word as target
    let logits = Tensor::new(vec![1, 3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
    let eps = 0.1;
    let p: [f64; 3] = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
    let expected = -(1.0 - eps) * p[1].ln() - eps * (p[0].ln() + p[1].ln() + p[2].ln()) / 3.0;
    let l = token_loss(&logits, &[Some(1)], eps).unwrap();
    assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
}

#[test]
fn padding_rows_do_not_count() {
    let logits = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 9.0, -9.0, 4.0]).unwrap();
    let only_first = Tensor::new(vec![1, 3], vec![0.0, 1.0, 2.0]).unwrap();
    let a = token_loss(&logits, &[Some(2), None], 0.1).unwrap();
    let b = token_loss(&only_first, &[Some(2)], 0.1).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn targets_end_with_eos_and_inputs_start_with_bos() {
    let (input, output) = shifted(&[7, 8, 9]);
    assert_eq!(input, vec![fusemt::tokenizer::WordVocab::BOS, 7, 8, 9]);
    assert_eq!(output, vec![7, 8, 9, fusemt::tokenizer::WordVocab::EOS]);
}

#[test]
fn batches_cover_every_example_once_within_budget() {
    let ex = copy_examples(50, 12, 3);
    let batches = make_batches(&ex, 20, 9);
    let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..50).collect::<Vec<_>>());
    for b in &batches {
        let width = b.iter().map(|&i| ex[i].src.len().max(ex[i].tgt.len() + 1)).max().unwrap();
        assert!(b.len() == 1 || width * b.len() <= 20);
    }
    assert_eq!(batches, make_batches(&ex, 20, 9));
    assert_ne!(batches, make_batches(&ex, 20, 10));
}

#[test]
fn training_is_deterministic() {
    let train = copy_examples(40, 12, 1);
    let valid = copy_examples(8, 12, 2);
    let mut a = small_trainer(5);
    let mut b = small_trainer(5);
    a.run(&train, &valid, None).unwrap();
    b.run(&train, &valid, None).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.model.params().hash(), b.model.params().hash());
    assert!(a.log.series("train", "loss").len() == 12);
    let mut c = small_trainer(6);
    c.run(&train, &valid, None).unwrap();
    assert_ne!(a.log.to_csv(), c.log.to_csv());
}

#[test]
fn resumed_run_matches_unbroken_run() {
    let train = copy_examples(40, 12, 1);
    let valid = copy_examples(8, 12, 2);
    let mut whole = small_trainer(3);
    whole.run(&train, &valid, None).unwrap();

    let mut first = small_trainer(3);
    first.run(&train, &valid, Some(7)).unwrap();
    assert_eq!(first.step(), 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pause.ckpt");
    first.save(&path).unwrap();
    let mut resumed = Trainer::load(&path).unwrap();
    resumed.run(&train, &valid, None).unwrap();

    assert_eq!(resumed.log.to_csv(), whole.log.to_csv());
    assert_eq!(resumed.model.params().hash(), whole.model.params().hash());
    assert_eq!(resumed.to_container().to_bytes(), whole.to_container().to_bytes());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let train = copy_examples(20, 12, 1);
    let valid = copy_examples(4, 12, 2);
    let mut t = small_trainer(2);
    t.run(&train, &valid, Some(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    t.save(&a).unwrap();
    Trainer::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn checkpoint_with_mismatched_config_is_rejected() {
    let t = small_trainer(2);
    let mut c = t.to_container();
    c.set_meta("model.d_ff", "20");
    let err = Trainer::from_container(&c).unwrap_err().to_string();
    assert!(err.contains("enc.0.ffn"), "{err}");

    let mut c = t.to_container();
    c.set_meta("train.max_lr", "not-a-number");
    assert!(Trainer::from_container(&c).is_err());

    let mut bytes = t.to_container().to_bytes();
    bytes[20] ^= 1;
    assert!(Container::from_bytes(&bytes).is_err());
}

#[test]
fn run_log_round_trips_through_csv() {
    let mut log = TrainRunLog::default();
    log.push(1, "train", "loss", 0.1 + 0.2);
    log.push(2, "valid", "bleu", 1e-300);
    let back = TrainRunLog::from_csv(&log.to_csv()).unwrap();
    assert_eq!(back, log);
    assert!(TrainRunLog::from_csv("step,split\n1,train\n").is_err());
}

#[test]
fn loss_falls_on_a_small_copy_task() {
    let train = copy_examples(60, 12, 11);
    let valid = copy_examples(10, 12, 12);
    let mut t = small_trainer(4);
    t.config.max_steps = 200;
    t.config.eval_every = 50;
    t.config.label_smoothing = 0.0;
    t.config.schedule.max_lr = 1e-2;
    t.config.schedule.warmup_updates = 20;
    t.run(&train, &valid, None).unwrap();
    let losses = t.log.series("train", "loss");
    let head: f64 = losses[..5].iter().map(|v| v.1).sum::<f64>() / 5.0;
    let tail: f64 = losses[losses.len() - 5..].iter().map(|v| v.1).sum::<f64>() / 5.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
}
