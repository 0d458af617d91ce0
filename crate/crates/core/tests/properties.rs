use fusemt::checkpoint::Container;
use fusemt::config::{derive_seed, parse_kv};
use fusemt::decode::{bleu, seq_accuracy};
use fusemt::tensor::{log_softmax, softmax};
use fusemt::tokenizer::{PieceTokenizer, WordVocab};
use fusemt::Tensor;
use proptest::prelude::*;

fn sentence() -> impl Strategy<Value = String> {
    words(1)
}

fn words(min: usize) -> impl Strategy<Value = String> {
    prop::collection::vec("[a-f]{1,4}", min..8).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = softmax(&x).unwrap();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        let lp = log_softmax(&x).unwrap();
        for (a, b) in p.iter().zip(&lp) {
            prop_assert!((a.ln() - b).abs() < 1e-9 || *a == 0.0);
        }
    }

    #[test]
    fn softmax_ignores_a_constant_shift(x in prop::collection::vec(-10.0f64..10.0, 1..10), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let (a, b) = (softmax(&x).unwrap(), softmax(&shifted).unwrap());
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn pieces_round_trip_known_text(s in sentence()) {
        let tok = PieceTokenizer::from_alphabet("abcdef".chars()).unwrap();
        let seq = tok.tokenize(&s);
        prop_assert!(!seq.ids.contains(&PieceTokenizer::UNK));
        prop_assert_eq!(tok.detokenize(&seq.ids), s.clone());
        prop_assert!(seq.len() >= s.split_whitespace().count());
    }

    #[test]
    fn words_round_trip_known_text(lines in prop::collection::vec(sentence(), 1..5)) {
        let vocab = WordVocab::build(lines.iter().map(String::as_str)).unwrap();
        for s in &lines {
            let seq = vocab.encode(s);
            prop_assert_eq!(seq.len(), s.split_whitespace().count());
            prop_assert_eq!(vocab.decode(&seq.ids), s.clone());
        }
        prop_assert_eq!(WordVocab::from_text(&vocab.to_text()).unwrap(), vocab);
    }

    #[test]
    fn bleu_is_bounded_and_perfect_on_identity(refs in prop::collection::vec(words(4), 1..6), hyps in prop::collection::vec(sentence(), 6)) {
        prop_assert!((bleu(&refs, &refs, 4).unwrap() - 100.0).abs() < 1e-9);
        prop_assert_eq!(seq_accuracy(&refs, &refs).unwrap(), 1.0);
        let hyps = &hyps[..refs.len()];
        let b = bleu(hyps, &refs, 4).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
    }

    #[test]
    fn containers_round_trip(
        meta in prop::collection::vec(("[a-z.]{1,8}", "[ -~]{0,12}"), 0..5),
        rows in 1usize..4,
        values in prop::collection::vec(any::<f64>(), 12),
    ) {
        let mut c = Container::new();
        for (k, v) in &meta {
            c.push_meta(k.clone(), v.clone());
        }
        let t = Tensor::new(vec![rows, 12 / rows], values[..rows * (12 / rows)].to_vec()).unwrap();
        c.push_tensor("w", t.clone());
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert!(back.tensor("w").unwrap().bit_eq(&t));
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn kv_lines_parse_in_order(keys in prop::collection::btree_set("[a-z]{1,6}", 1..6)) {
        let text: String = keys.iter().map(|k| format!("{k} = v{k}\n")).collect();
        let parsed = parse_kv(&text).unwrap();
        prop_assert_eq!(parsed.len(), keys.len());
        for ((k, v), key) in parsed.iter().zip(&keys) {
            prop_assert_eq!(k, key);
            prop_assert_eq!(v, &format!("v{key}"));
        }
    }

    #[test]
    fn derived_seeds_depend_on_every_input(seed in any::<u64>(), i in 0u64..1000) {
        let s = derive_seed(seed, "stage1", i);
        prop_assert_eq!(s, derive_seed(seed, "stage1", i));
        prop_assert_ne!(s, derive_seed(seed, "stage2", i));
        prop_assert_ne!(s, derive_seed(seed, "stage1", i + 1));
        prop_assert_ne!(s, derive_seed(seed.wrapping_add(1), "stage1", i));
    }
}
