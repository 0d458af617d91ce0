use fusemt::graph::Graph;
use fusemt::model::{FusedModel, FusedModelConfig, LinearOperand, Variant, Wiring};
use fusemt::nn::{AttentionBlock, AttnMask, EmbeddingBlock, EncoderLayer, FfnBlock, LayerNormBlock};
use fusemt::provider::ProviderOutput;
use fusemt::tensor::log_softmax;
use fusemt::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(variant: &str) -> FusedModelConfig {
    FusedModelConfig {
        layers: 2,
        d_model: 8,
        d_ff: 12,
        heads: 2,
        src_vocab: 9,
        tgt_vocab: 10,
        provider_dim: 6,
        p_net: 1.0,
        variant: variant.into(),
        dropout: 0.0,
        ..FusedModelConfig::default()
    }
}

fn provider_states(len: usize, dim: usize, rng: &mut ChaCha8Rng) -> ProviderOutput {
    let states = Tensor::normal(&[len, dim], 1.0, rng);
    let mut in_source = vec![true; len];
    in_source[0] = false;
    in_source[len - 1] = false;
    ProviderOutput {
        states,
        mask: vec![true; len],
        pieces: vec![5; len],
        in_source,
    }
}

fn ids(n: usize, lo: usize, hi: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

#[test]
fn variants_resolve_and_contradictions_are_rejected() {
    let w = Wiring::parse("full").unwrap();
    assert!(w.uses_provider());
    assert!(!Wiring::parse("no_provider_baseline").unwrap().uses_provider());
    assert!(Wiring::parse("stacked_decoder+drop_dec_attnB").is_err());
    assert!(Wiring::parse("linear_feed+embedding_feed").is_err());
    assert!(Wiring::parse("drop_enc_attnB+drop_dec_attnB").is_ok());
    assert!(Wiring::parse("nonsense").is_err());
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        FusedModel::new(tiny(v.name()), 1).unwrap();
    }
    let mut bad = tiny("full");
    bad.p_net = 1.5;
    assert!(FusedModel::new(bad, 1).is_err());
    let mut bad = tiny("full");
    bad.layers = 0;
    assert!(FusedModel::new(bad, 1).is_err());
}

#[test]
fn provider_dimension_mismatch_is_rejected() {
    let m = FusedModel::new(tiny("full"), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let hb = provider_states(5, 7, &mut rng);
    assert!(m.encode(&[4, 5], Some(&hb)).is_err());
    assert!(m.encode(&[4, 5], None).is_err());
}

#[test]
fn incremental_decoding_matches_full_forward_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut variants: Vec<String> = Variant::ALL.iter().map(|v| v.name().to_string()).collect();
    variants.push("drop_enc_attnB+drop_dec_attnB".into());
    for (k, variant) in variants.iter().enumerate() {
        for tie in [false, true] {
            let mut cfg = tiny(variant);
            cfg.tie_output = tie;
            let m = FusedModel::new(cfg, k as u64).unwrap();
            let src = ids(4, 4, 9, &mut rng);
            let hb = provider_states(7, 6, &mut rng);
            let mut tgt_in = vec![1];
            tgt_in.extend(ids(4, 3, 10, &mut rng));
            let full = m.forward_logits(&src, Some(&hb), &tgt_in).unwrap();
            let enc = m.encode(&src, Some(&hb)).unwrap();
            let mut st = m.start_decoding(&enc, Some(&hb)).unwrap();
            for t in 1..tgt_in.len() {
                m.decode_step(&mut st, tgt_in[t]).unwrap();
            }
            for t in 0..tgt_in.len() {
                let expected = log_softmax(full.row(t)).unwrap();
                assert_eq!(st.log_probs_at(t).unwrap(), expected.as_slice(), "{variant} t={t}");
                let total: f64 = expected.iter().map(|v| v.exp()).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
            assert!(st.log_probs_at(tgt_in.len()).is_err());
        }
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let m = FusedModel::new(tiny("full"), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hb = provider_states(6, 6, &mut rng);
    let a = m.forward_logits(&[4, 5, 6], Some(&hb), &[1, 4, 7]).unwrap();
    let b = m.forward_logits(&[4, 5, 6], Some(&hb), &[1, 4, 7]).unwrap();
    assert!(a.bit_eq(&b));
}

/// Plain post-norm Transformer assembled directly from the building blocks.
struct Reference {
    params: ParamStore,
    src: EmbeddingBlock,
    enc: Vec<EncoderLayer>,
    tgt: EmbeddingBlock,
    dec: Vec<[AttentionBlock; 2]>,
    dec_ln: Vec<[LayerNormBlock; 3]>,
    dec_ffn: Vec<FfnBlock>,
    out: (fusemt::params::ParamId, fusemt::params::ParamId),
}

impl Reference {
    fn new(c: &FusedModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = c.d_model;
        let src = EmbeddingBlock::register(&mut s, "src_embed.weight", c.src_vocab, d, &mut rng).unwrap();
        let enc = (0..c.layers)
            .map(|l| EncoderLayer::register(&mut s, &format!("enc.{l}"), d, c.d_ff, c.heads, true, &mut rng).unwrap())
            .collect();
        let tgt = EmbeddingBlock::register(&mut s, "tgt_embed.weight", c.tgt_vocab, d, &mut rng).unwrap();
        let (mut dec, mut dec_ln, mut dec_ffn) = (vec![], vec![], vec![]);
        for l in 0..c.layers {
            let p = format!("dec.{l}");
            let sa = AttentionBlock::register(&mut s, &format!("{p}.self_attn"), d, d, d, d, c.heads, true, &mut rng).unwrap();
            let ln1 = LayerNormBlock::register(&mut s, &format!("{p}.ln1"), d).unwrap();
            let ea = AttentionBlock::register(&mut s, &format!("{p}.enc_attn"), d, d, d, d, c.heads, true, &mut rng).unwrap();
            let ln2 = LayerNormBlock::register(&mut s, &format!("{p}.ln2"), d).unwrap();
            let ffn = FfnBlock::register(&mut s, &format!("{p}.ffn"), d, c.d_ff, &mut rng).unwrap();
            let ln3 = LayerNormBlock::register(&mut s, &format!("{p}.ln3"), d).unwrap();
            dec.push([sa, ea]);
            dec_ln.push([ln1, ln2, ln3]);
            dec_ffn.push(ffn);
        }
        let w = s.add("out_proj.w", Tensor::xavier(d, c.tgt_vocab, &mut rng)).unwrap();
        let b = s.add("out_proj.b", Tensor::zeros(&[c.tgt_vocab])).unwrap();
        Reference {
            params: s,
            src,
            enc,
            tgt,
            dec,
            dec_ln,
            dec_ffn,
            out: (w, b),
        }
    }

    fn logits(&self, src: &[usize], tgt_in: &[usize]) -> Tensor {
        let mut g = Graph::no_grad();
        let p = self.params.bind_frozen(&mut g);
        let none = AttnMask::none();
        let mut h = self.src.forward(&mut g, &p, src).unwrap();
        for layer in &self.enc {
            h = layer.forward(&mut g, &p, h, &none).unwrap();
        }
        let mut s = self.tgt.forward(&mut g, &p, tgt_in).unwrap();
        for l in 0..self.dec.len() {
            let [sa, ea] = &self.dec[l];
            let [ln1, ln2, ln3] = &self.dec_ln[l];
            let a = sa.forward(&mut g, &p, s, s, &AttnMask::causal()).unwrap();
            let r = g.add(s, a).unwrap();
            let x = ln1.forward(&mut g, &p, r).unwrap();
            let e = ea.forward(&mut g, &p, x, h, &none).unwrap();
            let r = g.add(x, e).unwrap();
            let x = ln2.forward(&mut g, &p, r).unwrap();
            let f = self.dec_ffn[l].forward(&mut g, &p, x).unwrap();
            let r = g.add(x, f).unwrap();
            s = ln3.forward(&mut g, &p, r).unwrap();
        }
        let o = g.matmul(s, p[self.out.0]).unwrap();
        let o = g.add_row(o, p[self.out.1]).unwrap();
        g.value(o).clone()
    }
}

#[test]
fn baseline_is_a_plain_transformer() {
    let cfg = tiny("no_provider_baseline");
    let m = FusedModel::new(cfg.clone(), 21).unwrap();
    let r = Reference::new(&cfg, 21);
    let names: Vec<&str> = m.params().iter().map(|(_, n, _)| n).collect();
    let ref_names: Vec<&str> = r.params.iter().map(|(_, n, _)| n).collect();
    assert_eq!(names, ref_names);
    assert_eq!(m.params().hash(), r.params.hash());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let src = ids(rng.gen_range(1..6), 0, 9, &mut rng);
        let mut tgt_in = vec![1];
        tgt_in.extend(ids(rng.gen_range(0..5), 0, 10, &mut rng));
        let a = m.forward_logits(&src, None, &tgt_in).unwrap();
        assert!(a.bit_eq(&r.logits(&src, &tgt_in)));
    }
}

fn copy_shared(from: &ParamStore, to: &mut ParamStore) {
    let mut values = to.tensors().to_vec();
    for (id, name, _) in to.iter() {
        if let Some(t) = from.by_name(name) {
            values[id.index()] = t.clone();
        }
    }
    to.set_tensors(values).unwrap();
}

fn scale_param(store: &mut ParamStore, name: &str, s: f64) {
    let id = store.id(name).unwrap();
    for v in store.get_mut(id).data_mut() {
        *v *= s;
    }
}

#[test]
fn removing_encoder_provider_attention_drops_the_average() {
    // With the provider branch's values at zero the averaged sublayer is
    // half the self-attention, so doubling W_v of self-attention must
    // reproduce the single-branch wiring exactly.
    let mut enc_cfg = tiny("drop_enc_attnB");
    enc_cfg.p_net = 0.0;
    let dropped = FusedModel::new(enc_cfg, 8).unwrap();
    let mut full_cfg = tiny("full");
    full_cfg.p_net = 0.0;
    let mut full = FusedModel::new(full_cfg, 9).unwrap();
    copy_shared(dropped.params(), full.params_mut());
    for l in 0..2 {
        scale_param(full.params_mut(), &format!("enc.{l}.bert_attn.wv"), 0.0);
        scale_param(full.params_mut(), &format!("enc.{l}.self_attn.wv"), 2.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let hb = provider_states(6, 6, &mut rng);
    let src = [4, 7, 5, 8];
    let a = dropped.encode(&src, Some(&hb)).unwrap();
    let b = full.encode(&src, Some(&hb)).unwrap();
    for (x, y) in a.layers.iter().zip(&b.layers) {
        assert!(x.bit_eq(y));
    }
}

#[test]
fn identical_branches_average_to_self_attention() {
    // Provider states equal to the layer input and shared attention weights
    // make both branches identical, so the layer is a plain encoder layer.
    let mut cfg = tiny("full");
    cfg.layers = 1;
    cfg.provider_dim = cfg.d_model;
    let mut m = FusedModel::new(cfg.clone(), 3).unwrap();
    for w in ["wq", "wk", "wv"] {
        let t = m.params().by_name(&format!("enc.0.self_attn.{w}")).unwrap().clone();
        let id = m.params().id(&format!("enc.0.bert_attn.{w}")).unwrap();
        *m.params_mut().get_mut(id) = t;
    }
    let mut base_cfg = cfg.clone();
    base_cfg.variant = "no_provider_baseline".into();
    let mut base = FusedModel::new(base_cfg, 4).unwrap();
    copy_shared(m.params(), base.params_mut());
    let src = [4, 6, 5];
    let h0 = base.encode(&src, None).unwrap().layers[0].clone();
    let hb = ProviderOutput {
        mask: vec![true; 3],
        pieces: vec![5; 3],
        in_source: vec![true; 3],
        states: h0,
    };
    let a = m.encode(&src, Some(&hb)).unwrap();
    let b = base.encode(&src, None).unwrap();
    assert!(a.output().max_abs_diff(b.output()) < 1e-12);
}

#[test]
fn linear_feed_operands_differ_in_shape() {
    let mut cfg = tiny("linear_feed");
    let m = FusedModel::new(cfg.clone(), 1).unwrap();
    assert_eq!(m.params().by_name("enc.0.linear_feed.w").unwrap().shape(), &[6, 8]);
    cfg.linear_operand = LinearOperand::Hidden;
    let m = FusedModel::new(cfg, 1).unwrap();
    assert_eq!(m.params().by_name("enc.0.linear_feed.w").unwrap().shape(), &[8, 8]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hb = provider_states(4, 6, &mut rng);
    m.forward_logits(&[4, 5, 6, 7, 8], Some(&hb), &[1, 3]).unwrap();
}

#[test]
fn warm_start_copies_shared_and_keeps_fresh_provider_modules() {
    let base = FusedModel::new(tiny("no_provider_baseline"), 1).unwrap();
    let mut fused = FusedModel::new(tiny("full"), 2).unwrap();
    let before = fused.params().clone();
    let report = fused.warm_start_from(base.params()).unwrap();
    assert!(report.unused.is_empty());
    for name in &report.copied {
        assert_eq!(fused.params().hash_of(name), base.params().hash_of(name));
    }
    for name in &report.fresh {
        assert!(name.contains("bert_attn"));
        assert_eq!(fused.params().hash_of(name), before.hash_of(name));
    }
    let mut wide = tiny("full");
    wide.d_ff = 16;
    let mut other = FusedModel::new(wide, 2).unwrap();
    let err = other.warm_start_from(base.params()).unwrap_err().to_string();
    assert!(err.contains("enc.0.ffn"), "{err}");
}
