//! The frozen context provider: a small Transformer encoder over character
//! pieces, pretrained by masked-piece prediction and then only ever read.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Container;
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Reduction, Var};
use crate::nn::{AttnMask, EmbeddingBlock, EncoderLayer};
use crate::optim::{Adam, AdamConfig, InverseSqrtSchedule};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;
use crate::tokenizer::PieceTokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SourceMode {
    Sentence,
    Document,
}

impl std::str::FromStr for SourceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence" => Ok(SourceMode::Sentence),
            "document" => Ok(SourceMode::Document),
            other => Err(Error::Config(format!("unknown source mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for SourceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SourceMode::Sentence => "sentence",
            SourceMode::Document => "document",
        })
    }
}

/// Last-layer provider states for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct ProviderOutput {
    /// `len × d_B`.
    pub states: Tensor,
    /// `true` for real pieces, `false` for padding.
    pub mask: Vec<bool>,
    pub pieces: Vec<usize>,
    /// `true` for pieces of the current sentence (as opposed to the
    /// preceding one or a special token).
    pub in_source: Vec<bool>,
}

impl ProviderOutput {
    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.cols()
    }

    /// Appends `extra` masked PAD positions with arbitrary state values.
    pub fn padded(&self, extra: usize, fill: f64) -> ProviderOutput {
        if extra == 0 {
            return self.clone();
        }
        let pad = Tensor::filled(&[extra, self.dim()], fill);
        let mut out = self.clone();
        out.states = self.states.vstack(&pad).expect("same width");
        out.mask.extend(std::iter::repeat_n(false, extra));
        out.pieces.extend(std::iter::repeat_n(PieceTokenizer::PAD, extra));
        out.in_source.extend(std::iter::repeat_n(false, extra));
        out
    }

    /// States of the current sentence's pieces with specials stripped,
    /// truncated or zero-padded to `len` rows.
    pub fn aligned(&self, len: usize) -> Result<Tensor> {
        if len == 0 {
            return Err(invalid("cannot align provider states to zero positions"));
        }
        let d = self.dim();
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| self.mask[i] && self.in_source[i])
            .take(len)
            .collect();
        let mut data = Vec::with_capacity(len * d);
        for &r in &rows {
            data.extend_from_slice(self.states.row(r));
        }
        data.resize(len * d, 0.0);
        Tensor::new(vec![len, d], data)
    }
}

/// Piece embeddings start small so the position signal dominates early
/// pretraining.
pub const PIECE_EMBED_STD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProviderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            layers: 4,
            dim: 32,
            heads: 1,
            ff_dim: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ContextProvider {
    config: ProviderConfig,
    tokenizer: PieceTokenizer,
    params: ParamStore,
    embed: EmbeddingBlock,
    layers: Vec<EncoderLayer>,
    head_w: crate::params::ParamId,
    head_b: crate::params::ParamId,
}

/// Input to the provider: the sentence and, in document mode, its predecessor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProviderText {
    pub text: String,
    pub prev: Option<String>,
}

impl ProviderText {
    pub fn sentence(text: impl Into<String>) -> Self {
        ProviderText {
            text: text.into(),
            prev: None,
        }
    }

    pub fn document(text: impl Into<String>, prev: impl Into<String>) -> Self {
        ProviderText {
            text: text.into(),
            prev: Some(prev.into()),
        }
    }

    pub fn mode(&self) -> SourceMode {
        if self.prev.is_some() {
            SourceMode::Document
        } else {
            SourceMode::Sentence
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub mask_rate: f64,
    pub schedule: InverseSqrtSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 7000,
            batch: 8,
            mask_rate: 0.15,
            schedule: InverseSqrtSchedule {
                warmup_init_lr: 1e-7,
                max_lr: 3e-3,
                warmup_updates: 100,
            },
            adam: AdamConfig::default(),
            seed: 7,
        }
    }
}

/// Masked-piece loss per pretraining step.
pub type PretrainReport = Vec<f64>;

impl ContextProvider {
    pub fn new(config: ProviderConfig, tokenizer: PieceTokenizer, seed: u64) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config("provider needs at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, v) = (config.dim, tokenizer.len());
        let embed = EmbeddingBlock::register_with_std(&mut params, "provider.embed", v, d, PIECE_EMBED_STD, &mut rng)?;
        let layers = (0..config.layers)
            .map(|l| EncoderLayer::register(&mut params, &format!("provider.{l}"), d, config.ff_dim, config.heads, true, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_w = params.add("provider.head.w", Tensor::xavier(d, v, &mut rng))?;
        let head_b = params.add("provider.head.b", Tensor::zeros(&[v]))?;
        Ok(ContextProvider {
            config,
            tokenizer,
            params,
            embed,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> ProviderConfig {
        self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn tokenizer(&self) -> &PieceTokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn param_hash(&self) -> String {
        self.params.hash()
    }

    /// Piece ids with framing, plus which ids belong to the current sentence.
    pub fn frame(&self, x: &str, mode: SourceMode, prev: Option<&str>) -> Result<(Vec<usize>, Vec<bool>)> {
        if x.split_whitespace().next().is_none() {
            return Err(invalid("provider input is empty"));
        }
        let mut ids = vec![PieceTokenizer::CLS];
        let mut in_source = vec![false];
        if mode == SourceMode::Document {
            let prev = prev.ok_or_else(|| invalid("document mode needs the preceding sentence"))?;
            let p = self.tokenizer.tokenize(prev);
            in_source.extend(std::iter::repeat_n(false, p.len() + 1));
            ids.extend(p.ids);
            ids.push(PieceTokenizer::SEP);
        }
        let t = self.tokenizer.tokenize(x);
        in_source.extend(std::iter::repeat_n(true, t.len()));
        ids.extend(t.ids);
        ids.push(PieceTokenizer::SEP);
        in_source.push(false);
        Ok((ids, in_source))
    }

    fn hidden(&self, g: &mut Graph, p: &Bindings, ids: &[usize]) -> Result<Var> {
        let mut h = self.embed.forward(g, p, ids)?;
        for layer in &self.layers {
            h = layer.forward(g, p, h, &AttnMask::none())?;
        }
        Ok(h)
    }

    /// Last-layer states for already framed piece ids.
    pub fn encode_ids(&self, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let p = self.params.bind_frozen(&mut g);
        let h = self.hidden(&mut g, &p, ids)?;
        Ok(g.value(h).clone())
    }

    pub fn encode(&self, x: &str, mode: SourceMode, prev: Option<&str>) -> Result<ProviderOutput> {
        let (pieces, in_source) = self.frame(x, mode, prev)?;
        let states = self.encode_ids(&pieces)?;
        Ok(ProviderOutput {
            states,
            mask: vec![true; pieces.len()],
            pieces,
            in_source,
        })
    }

    pub fn encode_text(&self, input: &ProviderText) -> Result<ProviderOutput> {
        self.encode(&input.text, input.mode(), input.prev.as_deref())
    }

    /// Replaces a random `rate` share of non-special pieces (at least one) by MASK.
    fn mask_pieces<R: Rng + ?Sized>(ids: &[usize], rate: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
        let candidates: Vec<usize> = (0..ids.len()).filter(|&i| !PieceTokenizer::is_special(ids[i])).collect();
        let mut chosen: Vec<usize> = candidates.iter().copied().filter(|_| rng.gen::<f64>() < rate).collect();
        if chosen.is_empty() && !candidates.is_empty() {
            chosen.push(*candidates.choose(rng).expect("non-empty"));
        }
        let mut masked = ids.to_vec();
        for &i in &chosen {
            masked[i] = PieceTokenizer::MASK;
        }
        (masked, chosen)
    }

    fn mlm_logits(&self, g: &mut Graph, p: &Bindings, masked: &[usize], positions: &[usize]) -> Result<Var> {
        let h = self.hidden(g, p, masked)?;
        let rows = g.select_rows(h, positions)?;
        let logits = g.matmul(rows, p[self.head_w])?;
        g.add_row(logits, p[self.head_b])
    }

    /// Trains a fresh provider on `texts` by masked-piece prediction.
    pub fn pretrain(
        config: ProviderConfig,
        tokenizer: PieceTokenizer,
        texts: &[ProviderText],
        opts: &PretrainConfig,
    ) -> Result<(ContextProvider, PretrainReport)> {
        if texts.is_empty() {
            return Err(invalid("pretraining corpus is empty"));
        }
        if opts.batch == 0 {
            return Err(Error::Config("pretraining batch must be positive".into()));
        }
        let mut provider = ContextProvider::new(config, tokenizer, opts.seed)?;
        let framed = texts
            .iter()
            .map(|t| provider.frame(&t.text, t.mode(), t.prev.as_deref()).map(|f| f.0))
            .collect::<Result<Vec<_>>>()?;
        let mut adam = Adam::new(opts.adam, &provider.params);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6d6c_6d00);
        let mut losses = Vec::with_capacity(opts.steps as usize);
        for step in 1..=opts.steps {
            let mut grads: Vec<Tensor> = provider.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut total_loss = 0.0;
            let mut count = 0usize;
            for _ in 0..opts.batch {
                let ids = &framed[rng.gen_range(0..framed.len())];
                let (masked, positions) = ContextProvider::mask_pieces(ids, opts.mask_rate, &mut rng);
                if positions.is_empty() {
                    continue;
                }
                let targets: Vec<Option<usize>> = positions.iter().map(|&i| Some(ids[i])).collect();
                let mut g = Graph::new();
                let p = provider.params.bind(&mut g);
                let logits = provider.mlm_logits(&mut g, &p, &masked, &positions)?;
                let loss = g.cross_entropy(logits, &targets, 0.0, Reduction::Sum)?;
                total_loss += g.value(loss).item()?;
                count += positions.len();
                g.backward(loss)?;
                for (acc, gr) in grads.iter_mut().zip(p.grads(&g, &provider.params)) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gr.data()) {
                        *a += b;
                    }
                }
            }
            if count == 0 {
                return Err(invalid("pretraining corpus has no maskable pieces"));
            }
            let norm = 1.0 / count as f64;
            for gr in &mut grads {
                gr.data_mut().iter_mut().for_each(|v| *v *= norm);
            }
            adam.step(&mut provider.params, &grads, opts.schedule.lr_at(step))?;
            losses.push(total_loss * norm);
            if step % 100 == 0 {
                log::debug!("provider pretrain step {step} loss {:.4}", total_loss * norm);
            }
        }
        Ok((provider, losses))
    }

    /// Share of masked pieces predicted correctly, with masks drawn from `seed`.
    pub fn masked_accuracy(&self, texts: &[ProviderText], mask_rate: f64, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut hit, mut total) = (0usize, 0usize);
        for t in texts {
            let (ids, _) = self.frame(&t.text, t.mode(), t.prev.as_deref())?;
            let (masked, positions) = ContextProvider::mask_pieces(&ids, mask_rate, &mut rng);
            if positions.is_empty() {
                continue;
            }
            let mut g = Graph::no_grad();
            let p = self.params.bind_frozen(&mut g);
            let logits = self.mlm_logits(&mut g, &p, &masked, &positions)?;
            let lv = g.value(logits);
            for (r, &pos) in positions.iter().enumerate() {
                let row = lv.row(r);
                let best = (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .expect("non-empty vocabulary");
                hit += usize::from(best == ids[pos]);
                total += 1;
            }
        }
        if total == 0 {
            return Err(invalid("no maskable pieces in evaluation texts"));
        }
        Ok(hit as f64 / total as f64)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.push_meta("kind", "context-provider");
        c.push_meta("provider.layers", self.config.layers.to_string());
        c.push_meta("provider.dim", self.config.dim.to_string());
        c.push_meta("provider.heads", self.config.heads.to_string());
        c.push_meta("provider.ff_dim", self.config.ff_dim.to_string());
        c.push_meta("provider.pieces", self.tokenizer.to_text());
        for (_, name, t) in self.params.iter() {
            c.push_tensor(name, t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind") != Some("context-provider") {
            return Err(Error::Checkpoint("not a context-provider checkpoint".into()));
        }
        let num = |key: &str| -> Result<usize> {
            c.require_meta(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad `{key}`")))
        };
        let config = ProviderConfig {
            layers: num("provider.layers")?,
            dim: num("provider.dim")?,
            heads: num("provider.heads")?,
            ff_dim: num("provider.ff_dim")?,
        };
        let tokenizer = PieceTokenizer::from_text(c.require_meta("provider.pieces")?)?;
        let mut provider = ContextProvider::new(config, tokenizer, 0)?;
        let mut values = Vec::with_capacity(provider.params.len());
        for (_, name, t) in provider.params.iter() {
            let stored = c
                .tensor(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}", stored.shape())));
            }
            values.push(stored.clone());
        }
        provider.params.set_tensors(values)?;
        Ok(provider)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ContextProvider::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn provider() -> ContextProvider {
        let tok = PieceTokenizer::build(["abc de", "fgh"]).unwrap();
        let config = ProviderConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            ff_dim: 16,
        };
        ContextProvider::new(config, tok, 3).unwrap()
    }

    #[test]
    fn masked_loss_gradient() {
        let p = provider();
        let ids = p.frame("abc de", SourceMode::Sentence, None).unwrap().0;
        let mut masked = ids.clone();
        masked[2] = PieceTokenizer::MASK;
        masked[5] = PieceTokenizer::MASK;
        let positions = [2, 5];
        let targets = [Some(ids[2]), Some(ids[5])];
        let report = crate::gradcheck::grad_check(
            |g, v| {
                let b = Bindings::from_vars(v.to_vec());
                let logits = p.mlm_logits(g, &b, &masked, &positions)?;
                g.cross_entropy(logits, &targets, 0.0, Reduction::Sum)
            },
            p.params.tensors(),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn document_framing() {
        let p = provider();
        let tok = p.tokenizer();
        let (ids, in_source) = p.frame("c", SourceMode::Document, Some("ab")).unwrap();
        let a = tok.tokenize("ab").ids;
        let c = tok.tokenize("c").ids;
        assert_eq!(
            ids,
            vec![PieceTokenizer::CLS, a[0], a[1], PieceTokenizer::SEP, c[0], PieceTokenizer::SEP]
        );
        assert_eq!(in_source, vec![false, false, false, false, true, false]);
    }

    #[test]
    fn sentence_framing_length() {
        let p = provider();
        let out = p.encode("abc", SourceMode::Sentence, None).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out.states.shape(), &[5, 8]);
    }

    #[test]
    fn encoding_is_deterministic() {
        let p = provider();
        let a = p.encode("abc de", SourceMode::Sentence, None).unwrap();
        let b = p.encode("abc de", SourceMode::Sentence, None).unwrap();
        assert!(a.states.bit_eq(&b.states));
    }

    #[test]
    fn bad_inputs() {
        let p = provider();
        assert!(p.encode("", SourceMode::Sentence, None).is_err());
        assert!(p.encode("abc", SourceMode::Document, None).is_err());
        let out = p.encode("aqz", SourceMode::Sentence, None).unwrap();
        assert!(out.pieces.contains(&PieceTokenizer::UNK));
    }

    #[test]
    fn aligned_strips_specials_and_pads() {
        let p = provider();
        let out = p.encode("ab", SourceMode::Document, Some("fgh")).unwrap();
        let al = out.aligned(4).unwrap();
        let first = out.in_source.iter().position(|&b| b).unwrap();
        assert_eq!(al.row(0), out.states.row(first));
        assert_eq!(al.row(1), out.states.row(first + 1));
        assert!(al.row(2).iter().chain(al.row(3)).all(|&v| v == 0.0));
        assert_eq!(out.aligned(1).unwrap().rows(), 1);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let p = provider();
        p.save(&path).unwrap();
        let q = ContextProvider::load(&path).unwrap();
        assert_eq!(q.param_hash(), p.param_hash());
        q.save(dir.path().join("q.ckpt")).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("q.ckpt")).unwrap());
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        provider().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(ContextProvider::load(&path), Err(Error::Checksum { .. })));
    }
}
