//! The fused encoder-decoder.
//!
//! Every encoder layer combines self-attention with attention over the
//! provider's last-layer states; every decoder layer combines attention over
//! the provider states with encoder-decoder attention. The two branches are
//! averaged at inference and mixed by drop-net during training. Residual
//! connections wrap each combined sublayer and each feed-forward sublayer,
//! each followed by layer normalisation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Container;
use crate::config::parse_value;
use crate::dropnet::{combine, Branch, DropNetSample};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Reduction, Var};
use crate::nn::{add_positions, dropout, AttentionBlock, AttnMask, EmbeddingBlock, FfnBlock, LayerNormBlock};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::provider::ProviderOutput;
use crate::tensor::{log_softmax, Tensor};
use crate::tokenizer::WordVocab;

/// How encoder layers consume provider states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderFusion {
    Attention,
    Linear,
    None,
}

/// How decoder layers consume provider states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderFusion {
    Parallel,
    Stacked,
    None,
}

/// What the encoder's layer-0 states are built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SourceInput {
    Words,
    ProviderFeatures,
}

/// Operand of the per-layer linear map in the `linear_feed` variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LinearOperand {
    /// Provider state aligned to the source position.
    Provider,
    /// The layer's own input state, as the formula is printed.
    Hidden,
}

impl FromStr for LinearOperand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "provider" => Ok(LinearOperand::Provider),
            "hidden" => Ok(LinearOperand::Hidden),
            other => Err(Error::Config(format!("unknown linear_feed operand `{other}`"))),
        }
    }
}

impl fmt::Display for LinearOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LinearOperand::Provider => "provider",
            LinearOperand::Hidden => "hidden",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoProviderBaseline,
    EmbeddingFeed,
    LinearFeed,
    DropEncAttnB,
    DropDecAttnB,
    StackedDecoder,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoProviderBaseline,
        Variant::EmbeddingFeed,
        Variant::LinearFeed,
        Variant::DropEncAttnB,
        Variant::DropDecAttnB,
        Variant::StackedDecoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoProviderBaseline => "no_provider_baseline",
            Variant::EmbeddingFeed => "embedding_feed",
            Variant::LinearFeed => "linear_feed",
            Variant::DropEncAttnB => "drop_enc_attnB",
            Variant::DropDecAttnB => "drop_dec_attnB",
            Variant::StackedDecoder => "stacked_decoder",
        }
    }

    /// Axis settings this variant pins; `None` leaves the axis alone.
    fn pins(self) -> (Option<EncoderFusion>, Option<DecoderFusion>, Option<SourceInput>) {
        use DecoderFusion as D;
        use EncoderFusion as E;
        match self {
            Variant::Full => (None, None, None),
            Variant::NoProviderBaseline => (Some(E::None), Some(D::None), Some(SourceInput::Words)),
            Variant::EmbeddingFeed => (Some(E::None), Some(D::None), Some(SourceInput::ProviderFeatures)),
            Variant::LinearFeed => (Some(E::Linear), Some(D::None), None),
            Variant::DropEncAttnB => (Some(E::None), None, None),
            Variant::DropDecAttnB => (None, Some(D::None), None),
            Variant::StackedDecoder => (None, Some(D::Stacked), None),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Resolved wiring of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Wiring {
    pub encoder: EncoderFusion,
    pub decoder: DecoderFusion,
    pub input: SourceInput,
}

impl Wiring {
    /// Resolves a `+`-joined list of variants. Two entries that pin the same
    /// axis to different settings are a contradiction.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut enc: Option<(EncoderFusion, Variant)> = None;
        let mut dec: Option<(DecoderFusion, Variant)> = None;
        let mut input: Option<(SourceInput, Variant)> = None;
        fn pin<T: PartialEq + Copy>(slot: &mut Option<(T, Variant)>, value: Option<T>, v: Variant) -> Result<()> {
            let Some(value) = value else { return Ok(()) };
            match slot {
                Some((prev, by)) if *prev != value => Err(Error::Config(format!("variants `{by}` and `{v}` contradict each other"))),
                _ => {
                    *slot = Some((value, v));
                    Ok(())
                }
            }
        }
        for part in spec.split('+') {
            let v: Variant = part.trim().parse()?;
            let (e, d, i) = v.pins();
            pin(&mut enc, e, v)?;
            pin(&mut dec, d, v)?;
            pin(&mut input, i, v)?;
        }
        Ok(Wiring {
            encoder: enc.map_or(EncoderFusion::Attention, |p| p.0),
            decoder: dec.map_or(DecoderFusion::Parallel, |p| p.0),
            input: input.map_or(SourceInput::Words, |p| p.0),
        })
    }

    pub fn uses_provider(&self) -> bool {
        self.encoder != EncoderFusion::None || self.decoder != DecoderFusion::None || self.input == SourceInput::ProviderFeatures
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub provider_dim: usize,
    pub p_net: f64,
    pub variant: String,
    pub attention_scaling: bool,
    pub dropout: f64,
    pub tie_output: bool,
    pub shared_dropnet: bool,
    pub linear_operand: LinearOperand,
}

impl Default for FusedModelConfig {
    fn default() -> Self {
        FusedModelConfig {
            layers: 2,
            d_model: 32,
            d_ff: 64,
            heads: 4,
            src_vocab: 0,
            tgt_vocab: 0,
            provider_dim: 32,
            p_net: 1.0,
            variant: "full".into(),
            attention_scaling: true,
            dropout: 0.3,
            tie_output: false,
            shared_dropnet: false,
            linear_operand: LinearOperand::Provider,
        }
    }
}

impl FusedModelConfig {
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("heads", self.heads.to_string()),
            ("src_vocab", self.src_vocab.to_string()),
            ("tgt_vocab", self.tgt_vocab.to_string()),
            ("provider_dim", self.provider_dim.to_string()),
            ("p_net", self.p_net.to_string()),
            ("variant", self.variant.clone()),
            ("attention_scaling", self.attention_scaling.to_string()),
            ("dropout", self.dropout.to_string()),
            ("tie_output", self.tie_output.to_string()),
            ("shared_dropnet", self.shared_dropnet.to_string()),
            ("linear_operand", self.linear_operand.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "layers" => self.layers = parse_value(key, value)?,
            "d_model" => self.d_model = parse_value(key, value)?,
            "d_ff" => self.d_ff = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "src_vocab" => self.src_vocab = parse_value(key, value)?,
            "tgt_vocab" => self.tgt_vocab = parse_value(key, value)?,
            "provider_dim" => self.provider_dim = parse_value(key, value)?,
            "p_net" => self.p_net = parse_value(key, value)?,
            "variant" => self.variant = value.to_string(),
            "attention_scaling" => self.attention_scaling = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "tie_output" => self.tie_output = parse_value(key, value)?,
            "shared_dropnet" => self.shared_dropnet = parse_value(key, value)?,
            "linear_operand" => self.linear_operand = value.parse()?,
            other => return Err(Error::Config(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<Wiring> {
        if self.layers == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if !(0.0..=1.0).contains(&self.p_net) {
            return Err(Error::Config(format!("p_net {} outside [0, 1]", self.p_net)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide d_model {}", self.heads, self.d_model)));
        }
        if self.d_model < 2 || self.d_ff == 0 {
            return Err(Error::Config("d_model must be at least 2 and d_ff positive".into()));
        }
        if self.src_vocab <= WordVocab::EOS || self.tgt_vocab <= WordVocab::EOS {
            return Err(Error::Config("vocabularies must include the special tokens".into()));
        }
        let wiring = Wiring::parse(&self.variant)?;
        if wiring.uses_provider() && self.provider_dim == 0 {
            return Err(Error::Config("provider_dim must be positive".into()));
        }
        Ok(wiring)
    }
}

/// Training-time noise sources. `Eval` uses the averaged combination and
/// no dropout.
pub enum Mode<'a> {
    Eval,
    Train {
        dropnet: &'a DropNetSample,
        rng: &'a mut ChaCha8Rng,
    },
}


#[derive(Clone, Debug)]
enum EncFusionBlock {
    None,
    Attention(AttentionBlock),
    Linear(ParamId),
}

#[derive(Clone, Debug)]
struct EncLayer {
    self_attn: AttentionBlock,
    fusion: EncFusionBlock,
    ln1: LayerNormBlock,
    ffn: FfnBlock,
    ln2: LayerNormBlock,
}

#[derive(Clone, Debug)]
struct DecLayer {
    self_attn: AttentionBlock,
    ln1: LayerNormBlock,
    enc_attn: AttentionBlock,
    bert_attn: Option<AttentionBlock>,
    ln2: LayerNormBlock,
    ln_bert: Option<LayerNormBlock>,
    ffn: FfnBlock,
    ln3: LayerNormBlock,
}

/// Provider-side inputs as placed on a tape.
#[derive(Clone, Copy)]
pub struct ProviderVars<'a> {
    pub states: Var,
    pub mask: &'a AttnMask,
    pub aligned: Option<Var>,
}

/// Per-layer encoder states, `H_E^0 ..= H_E^L`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub layers: Vec<Tensor>,
    pub mask: Vec<bool>,
}

impl EncoderState {
    pub fn output(&self) -> &Tensor {
        self.layers.last().expect("at least one layer")
    }
}

/// Incremental decoder state: per-layer rows for the prefix generated so far.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub tokens: Vec<usize>,
    layer_inputs: Vec<Tensor>,
    memory: Tensor,
    provider: Option<(Tensor, Vec<bool>)>,
    log_probs: Vec<Vec<f64>>,
}

impl DecoderState {
    /// Next-token log-distribution after `tokens[..=t]`.
    pub fn log_probs_at(&self, t: usize) -> Result<&[f64]> {
        self.log_probs.get(t).map(Vec::as_slice).ok_or_else(|| {
            invalid(format!("position {t} is beyond the generated prefix of length {}", self.log_probs.len()))
        })
    }

    pub fn last_log_probs(&self) -> Option<&[f64]> {
        self.log_probs.last().map(Vec::as_slice)
    }
}

#[derive(Clone, Debug)]
pub struct FusedModel {
    config: FusedModelConfig,
    wiring: Wiring,
    params: ParamStore,
    src_embed: Option<EmbeddingBlock>,
    embed_feed: Option<(ParamId, ParamId)>,
    enc: Vec<EncLayer>,
    tgt_embed: EmbeddingBlock,
    dec: Vec<DecLayer>,
    out_w: Option<ParamId>,
    out_b: ParamId,
}

/// Parameter-name fragments of modules that only exist to consume provider
/// states. These are freshly initialised when warm-starting from a baseline.
pub const PROVIDER_MODULES: [&str; 4] = ["bert_attn", "ln_bert", "linear_feed", "embed_feed"];

pub fn is_provider_module(name: &str) -> bool {
    PROVIDER_MODULES.iter().any(|m| name.split('.').any(|part| part == *m))
}

impl FusedModel {
    pub fn new(config: FusedModelConfig, seed: u64) -> Result<Self> {
        let wiring = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = &config;
        let (d, db) = (c.d_model, c.provider_dim);
        let mut store = ParamStore::new();
        let s = &mut store;

        let (src_embed, embed_feed) = match wiring.input {
            SourceInput::Words => (Some(EmbeddingBlock::register(s, "src_embed.weight", c.src_vocab, d, rng)?), None),
            SourceInput::ProviderFeatures => {
                let w = s.add("embed_feed.w", Tensor::xavier(db, d, rng))?;
                let b = s.add("embed_feed.b", Tensor::zeros(&[d]))?;
                (None, Some((w, b)))
            }
        };
        let mut enc = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let pre = format!("enc.{l}");
            let self_attn = AttentionBlock::register(s, &format!("{pre}.self_attn"), d, d, d, d, c.heads, c.attention_scaling, rng)?;
            let fusion = match wiring.encoder {
                EncoderFusion::None => EncFusionBlock::None,
                EncoderFusion::Attention => EncFusionBlock::Attention(AttentionBlock::register(
                    s,
                    &format!("{pre}.bert_attn"),
                    d,
                    db,
                    db,
                    d,
                    c.heads,
                    c.attention_scaling,
                    rng,
                )?),
                EncoderFusion::Linear => {
                    let fan_in = match c.linear_operand {
                        LinearOperand::Provider => db,
                        LinearOperand::Hidden => d,
                    };
                    EncFusionBlock::Linear(s.add(format!("{pre}.linear_feed.w"), Tensor::xavier(fan_in, d, rng))?)
                }
            };
            enc.push(EncLayer {
                self_attn,
                fusion,
                ln1: LayerNormBlock::register(s, &format!("{pre}.ln1"), d)?,
                ffn: FfnBlock::register(s, &format!("{pre}.ffn"), d, c.d_ff, rng)?,
                ln2: LayerNormBlock::register(s, &format!("{pre}.ln2"), d)?,
            });
        }
        let tgt_embed = EmbeddingBlock::register(s, "tgt_embed.weight", c.tgt_vocab, d, rng)?;
        let mut dec = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let pre = format!("dec.{l}");
            let self_attn = AttentionBlock::register(s, &format!("{pre}.self_attn"), d, d, d, d, c.heads, c.attention_scaling, rng)?;
            let ln1 = LayerNormBlock::register(s, &format!("{pre}.ln1"), d)?;
            let enc_attn = AttentionBlock::register(s, &format!("{pre}.enc_attn"), d, d, d, d, c.heads, c.attention_scaling, rng)?;
            let bert_attn = match wiring.decoder {
                DecoderFusion::None => None,
                _ => Some(AttentionBlock::register(
                    s,
                    &format!("{pre}.bert_attn"),
                    d,
                    db,
                    db,
                    d,
                    c.heads,
                    c.attention_scaling,
                    rng,
                )?),
            };
            let ln2 = LayerNormBlock::register(s, &format!("{pre}.ln2"), d)?;
            let ln_bert = match wiring.decoder {
                DecoderFusion::Stacked => Some(LayerNormBlock::register(s, &format!("{pre}.ln_bert"), d)?),
                _ => None,
            };
            dec.push(DecLayer {
                self_attn,
                ln1,
                enc_attn,
                bert_attn,
                ln2,
                ln_bert,
                ffn: FfnBlock::register(s, &format!("{pre}.ffn"), d, c.d_ff, rng)?,
                ln3: LayerNormBlock::register(s, &format!("{pre}.ln3"), d)?,
            });
        }
        let out_w = if c.tie_output {
            None
        } else {
            Some(s.add("out_proj.w", Tensor::xavier(d, c.tgt_vocab, rng))?)
        };
        let out_b = s.add("out_proj.b", Tensor::zeros(&[c.tgt_vocab]))?;
        Ok(FusedModel {
            config,
            wiring,
            params: store,
            src_embed,
            embed_feed,
            enc,
            tgt_embed,
            dec,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &FusedModelConfig {
        &self.config
    }

    pub fn wiring(&self) -> Wiring {
        self.wiring
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn uses_provider(&self) -> bool {
        self.wiring.uses_provider()
    }

    fn needs_aligned(&self) -> bool {
        self.wiring.input == SourceInput::ProviderFeatures
            || (self.wiring.encoder == EncoderFusion::Linear && self.config.linear_operand == LinearOperand::Provider)
    }

    /// Puts provider states on the tape as constants.
    pub fn provider_vars<'m>(
        &self,
        g: &mut Graph,
        hb: Option<&ProviderOutput>,
        src_len: usize,
        mask: &'m AttnMask,
    ) -> Result<Option<ProviderVars<'m>>> {
        if !self.uses_provider() {
            return Ok(None);
        }
        let hb = hb.ok_or_else(|| invalid(format!("variant `{}` needs provider states", self.config.variant)))?;
        if hb.dim() != self.config.provider_dim {
            return Err(Error::Shape {
                op: "provider states",
                lhs: vec![hb.len(), hb.dim()],
                rhs: vec![self.config.provider_dim],
            });
        }
        let aligned = if self.needs_aligned() {
            Some(g.constant(hb.aligned(src_len)?))
        } else {
            None
        };
        Ok(Some(ProviderVars {
            states: g.constant(hb.states.clone()),
            mask,
            aligned,
        }))
    }

    fn drop(&self, g: &mut Graph, x: Var, mode: &mut Mode) -> Var {
        match mode {
            Mode::Train { rng, .. } => dropout(g, x, self.config.dropout, *rng),
            Mode::Eval => x,
        }
    }

    fn branch(&self, mode: &Mode, layer: usize, encoder: bool) -> Result<Branch> {
        match mode {
            Mode::Eval => Ok(Branch::Both),
            Mode::Train { dropnet, .. } => {
                if encoder {
                    dropnet.encoder_branch(layer, self.config.p_net)
                } else {
                    dropnet.decoder_branch(layer, self.config.p_net)
                }
            }
        }
    }

    fn check_ids(ids: &[usize], vocab: usize, side: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(invalid(format!("{side} sequence is empty")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(invalid(format!("{side} id {bad} outside vocabulary of size {vocab}")));
        }
        Ok(())
    }

    /// Encoder stack on a tape; returns `H_E^0 ..= H_E^L`.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        p: &Bindings,
        src: &[usize],
        pv: Option<ProviderVars>,
        mode: &mut Mode,
    ) -> Result<Vec<Var>> {
        FusedModel::check_ids(src, self.config.src_vocab, "source")?;
        let h0 = match (&self.src_embed, self.embed_feed) {
            (Some(e), _) => e.forward(g, p, src)?,
            (None, Some((w, b))) => {
                let feats = pv.and_then(|v| v.aligned).ok_or_else(|| invalid("embedding feed needs provider states"))?;
                let x = g.matmul(feats, p[w])?;
                let x = g.add_row(x, p[b])?;
                add_positions(g, x)?
            }
            (None, None) => unreachable!("a source input is always configured"),
        };
        let mut h = self.drop(g, h0, mode);
        let mut states = vec![h];
        let none = AttnMask::none();
        for (l, layer) in self.enc.iter().enumerate() {
            let a = layer.self_attn.forward(g, p, h, h, &none)?;
            let mixed = match &layer.fusion {
                EncFusionBlock::None => a,
                EncFusionBlock::Attention(ba) => {
                    let pv = pv.ok_or_else(|| invalid("encoder fusion needs provider states"))?;
                    let b = ba.forward(g, p, h, pv.states, pv.mask)?;
                    combine(g, a, b, self.branch(mode, l, true)?)?
                }
                EncFusionBlock::Linear(w) => {
                    let operand = match self.config.linear_operand {
                        LinearOperand::Hidden => h,
                        LinearOperand::Provider => pv
                            .and_then(|v| v.aligned)
                            .ok_or_else(|| invalid("linear feed needs provider states"))?,
                    };
                    let b = g.matmul(operand, p[*w])?;
                    combine(g, a, b, self.branch(mode, l, true)?)?
                }
            };
            let mixed = self.drop(g, mixed, mode);
            let r = g.add(h, mixed)?;
            let h1 = layer.ln1.forward(g, p, r)?;
            let f = layer.ffn.forward(g, p, h1)?;
            let f = self.drop(g, f, mode);
            let r = g.add(h1, f)?;
            h = layer.ln2.forward(g, p, r)?;
            states.push(h);
        }
        Ok(states)
    }

    /// One decoder layer. `queries` are the rows being computed and
    /// `prefix` the rows they may attend to under `self_mask`.
    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &self,
        g: &mut Graph,
        p: &Bindings,
        l: usize,
        queries: Var,
        prefix: Var,
        self_mask: &AttnMask,
        memory: Var,
        pv: Option<ProviderVars>,
        mode: &mut Mode,
    ) -> Result<Var> {
        let layer = &self.dec[l];
        let none = AttnMask::none();
        let a = layer.self_attn.forward(g, p, queries, prefix, self_mask)?;
        let a = self.drop(g, a, mode);
        let r = g.add(queries, a)?;
        let s_hat = layer.ln1.forward(g, p, r)?;
        let s_tilde = match self.wiring.decoder {
            DecoderFusion::None => {
                let e = layer.enc_attn.forward(g, p, s_hat, memory, &none)?;
                let e = self.drop(g, e, mode);
                let r = g.add(s_hat, e)?;
                layer.ln2.forward(g, p, r)?
            }
            DecoderFusion::Parallel => {
                let pv = pv.ok_or_else(|| invalid("decoder fusion needs provider states"))?;
                let ba = layer.bert_attn.as_ref().expect("parallel wiring has provider attention");
                let b = ba.forward(g, p, s_hat, pv.states, pv.mask)?;
                let e = layer.enc_attn.forward(g, p, s_hat, memory, &none)?;
                let mixed = combine(g, b, e, self.branch(mode, l, false)?)?;
                let mixed = self.drop(g, mixed, mode);
                let r = g.add(s_hat, mixed)?;
                layer.ln2.forward(g, p, r)?
            }
            DecoderFusion::Stacked => {
                let pv = pv.ok_or_else(|| invalid("decoder fusion needs provider states"))?;
                let e = layer.enc_attn.forward(g, p, s_hat, memory, &none)?;
                let e = self.drop(g, e, mode);
                let r = g.add(s_hat, e)?;
                let s_bar = layer.ln2.forward(g, p, r)?;
                let ba = layer.bert_attn.as_ref().expect("stacked wiring has provider attention");
                let b = ba.forward(g, p, s_bar, pv.states, pv.mask)?;
                let b = self.drop(g, b, mode);
                let r = g.add(s_bar, b)?;
                layer.ln_bert.as_ref().expect("stacked wiring has its own norm").forward(g, p, r)?
            }
        };
        let f = layer.ffn.forward(g, p, s_tilde)?;
        let f = self.drop(g, f, mode);
        let r = g.add(s_tilde, f)?;
        layer.ln3.forward(g, p, r)
    }

    fn project(&self, g: &mut Graph, p: &Bindings, s: Var) -> Result<Var> {
        let logits = match self.out_w {
            Some(w) => g.matmul(s, p[w])?,
            None => g.matmul_bt(s, p[self.tgt_embed.table])?,
        };
        g.add_row(logits, p[self.out_b])
    }

    /// Teacher-forced decoder over `tgt_in` (BOS followed by the target
    /// prefix); returns logits `[len × tgt_vocab]`.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        p: &Bindings,
        tgt_in: &[usize],
        memory: Var,
        pv: Option<ProviderVars>,
        mode: &mut Mode,
    ) -> Result<Var> {
        FusedModel::check_ids(tgt_in, self.config.tgt_vocab, "target")?;
        let x = self.tgt_embed.forward(g, p, tgt_in)?;
        let mut s = self.drop(g, x, mode);
        let causal = AttnMask::causal();
        for l in 0..self.dec.len() {
            s = self.decoder_layer(g, p, l, s, s, &causal, memory, pv, mode)?;
        }
        self.project(g, p, s)
    }

    /// Summed token cross-entropy of `tgt` given `src`; returns the loss and
    /// the number of predicted tokens (target words plus EOS).
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        p: &Bindings,
        src: &[usize],
        tgt: &[usize],
        hb: Option<&ProviderOutput>,
        mode: &mut Mode,
        smoothing: f64,
    ) -> Result<(Var, usize)> {
        let mask = provider_mask(hb);
        let pv = self.provider_vars(g, hb, src.len(), &mask)?;
        let states = self.encode_graph(g, p, src, pv, mode)?;
        let memory = *states.last().expect("encoder output");
        let mut tgt_in = Vec::with_capacity(tgt.len() + 1);
        tgt_in.push(WordVocab::BOS);
        tgt_in.extend_from_slice(tgt);
        let mut targets: Vec<Option<usize>> = tgt.iter().map(|&t| Some(t)).collect();
        targets.push(Some(WordVocab::EOS));
        let logits = self.decode_graph(g, p, &tgt_in, memory, pv, mode)?;
        let loss = g.cross_entropy(logits, &targets, smoothing, Reduction::Sum)?;
        Ok((loss, targets.len()))
    }

    /// Eval-mode encoder states as plain tensors.
    pub fn encode(&self, src: &[usize], hb: Option<&ProviderOutput>) -> Result<EncoderState> {
        let mut g = Graph::no_grad();
        let p = self.params.bind_frozen(&mut g);
        let mask = provider_mask(hb);
        let pv = self.provider_vars(&mut g, hb, src.len(), &mask)?;
        let states = self.encode_graph(&mut g, &p, src, pv, &mut Mode::Eval)?;
        Ok(EncoderState {
            layers: states.iter().map(|&v| g.value(v).clone()).collect(),
            mask: vec![true; src.len()],
        })
    }

    /// Eval-mode teacher-forced logits.
    pub fn forward_logits(&self, src: &[usize], hb: Option<&ProviderOutput>, tgt_in: &[usize]) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let p = self.params.bind_frozen(&mut g);
        let mask = provider_mask(hb);
        let pv = self.provider_vars(&mut g, hb, src.len(), &mask)?;
        let mut mode = Mode::Eval;
        let states = self.encode_graph(&mut g, &p, src, pv, &mut mode)?;
        let memory = *states.last().expect("encoder output");
        let logits = self.decode_graph(&mut g, &p, tgt_in, memory, pv, &mut mode)?;
        Ok(g.value(logits).clone())
    }

    /// Starts incremental decoding: feeds BOS and computes the first
    /// next-token distribution.
    pub fn start_decoding(&self, enc: &EncoderState, hb: Option<&ProviderOutput>) -> Result<DecoderState> {
        let provider = if self.uses_provider() {
            let hb = hb.ok_or_else(|| invalid("this variant needs provider states"))?;
            Some((hb.states.clone(), hb.mask.clone()))
        } else {
            None
        };
        let mut state = DecoderState {
            tokens: Vec::new(),
            layer_inputs: vec![Tensor::zeros(&[0]); self.dec.len() + 1],
            memory: enc.output().clone(),
            provider,
            log_probs: Vec::new(),
        };
        self.decode_step(&mut state, WordVocab::BOS)?;
        Ok(state)
    }

    /// Appends `token` to the prefix and returns the log-distribution over
    /// the following token.
    pub fn decode_step(&self, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        FusedModel::check_ids(&[token], self.config.tgt_vocab, "target")?;
        let t = state.tokens.len();
        let mut g = Graph::no_grad();
        let p = self.params.bind_frozen(&mut g);
        let table = g.value(p[self.tgt_embed.table]);
        let mut row = table.row(token).to_vec();
        let pe = crate::tensor::sinusoid_table(t + 1, self.config.d_model);
        for (v, e) in row.iter_mut().zip(pe.row(t)) {
            *v += e;
        }
        let row = Tensor::new(vec![1, self.config.d_model], row)?;
        let mask_storage;
        let pv = match &state.provider {
            Some((states, mask)) => {
                mask_storage = AttnMask::keys(mask.clone());
                Some(ProviderVars {
                    states: g.constant(states.clone()),
                    mask: &mask_storage,
                    aligned: None,
                })
            }
            None => None,
        };
        let memory = g.constant(state.memory.clone());
        let none = AttnMask::none();
        let mut current = row;
        for l in 0..=self.dec.len() {
            let stacked = if t == 0 {
                current.clone()
            } else {
                state.layer_inputs[l].vstack(&current)?
            };
            state.layer_inputs[l] = stacked;
            if l == self.dec.len() {
                break;
            }
            let q = g.constant(current.clone());
            let prefix = g.constant(state.layer_inputs[l].clone());
            let out = self.decoder_layer(&mut g, &p, l, q, prefix, &none, memory, pv, &mut Mode::Eval)?;
            current = g.value(out).clone();
        }
        let s = g.constant(current);
        let logits = self.project(&mut g, &p, s)?;
        let lp = log_softmax(g.value(logits).data())?;
        state.tokens.push(token);
        state.log_probs.push(lp.clone());
        Ok(lp)
    }

    /// Model configuration as `model.*` metadata plus one tensor per
    /// parameter.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        self.write_to(&mut c);
        c
    }

    pub fn write_to(&self, c: &mut Container) {
        c.push_meta("kind", "fused-model");
        for (k, v) in self.config.entries() {
            c.push_meta(format!("model.{k}"), v);
        }
        for (_, name, t) in self.params.iter() {
            c.push_tensor(name, t.clone());
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind") != Some("fused-model") {
            return Err(Error::Checkpoint("not a fused-model checkpoint".into()));
        }
        let mut config = FusedModelConfig::default();
        for (k, _) in FusedModelConfig::default().entries() {
            let v = c.require_meta(&format!("model.{k}"))?;
            config.set(k, v)?;
        }
        let mut model = FusedModel::new(config, 0)?;
        let mut values = Vec::with_capacity(model.params.len());
        for (_, name, t) in model.params.iter() {
            let stored = c
                .tensor(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            values.push(stored.clone());
        }
        model.params.set_tensors(values)?;
        Ok(model)
    }

    /// Shared parameters copied from `baseline` by name; modules that only
    /// consume provider states keep their fresh initialisation.
    pub fn warm_start_from(&mut self, baseline: &ParamStore) -> Result<WarmStartReport> {
        let mut diffs = Vec::new();
        let mut copied = Vec::new();
        let mut fresh = Vec::new();
        let mut values = self.params.tensors().to_vec();
        for (id, name, t) in self.params.iter() {
            if is_provider_module(name) {
                fresh.push(name.to_string());
                continue;
            }
            match baseline.by_name(name) {
                None => diffs.push(format!("{name}: missing from stage-1 checkpoint")),
                Some(b) if b.shape() != t.shape() => {
                    diffs.push(format!("{name}: stage-1 shape {:?}, stage-2 shape {:?}", b.shape(), t.shape()))
                }
                Some(b) => {
                    values[id.index()] = b.clone();
                    copied.push(name.to_string());
                }
            }
        }
        if !diffs.is_empty() {
            return Err(Error::Config(format!("stage-1 checkpoint is incompatible:\n  {}", diffs.join("\n  "))));
        }
        let unused = baseline
            .iter()
            .map(|(_, n, _)| n.to_string())
            .filter(|n| self.params.id(n).is_none())
            .collect();
        self.params.set_tensors(values)?;
        Ok(WarmStartReport { copied, fresh, unused })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WarmStartReport {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
    /// Stage-1 parameters that the stage-2 wiring has no slot for.
    pub unused: Vec<String>,
}

pub fn provider_mask(hb: Option<&ProviderOutput>) -> AttnMask {
    match hb {
        Some(h) => AttnMask::keys(h.mask.clone()),
        None => AttnMask::none(),
    }
}
