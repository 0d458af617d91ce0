//! Training loop for the fused model: token-count batching, drop-net
//! sampling, early stopping, run logs and resumable checkpoints.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{f64_from_meta, f64_to_meta, Container};
use crate::config::{derive_seed, parse_value};
use crate::decode::{bleu, greedy, seq_accuracy, FusedStepper};
use crate::dropnet::DropNetSample;
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Reduction};
use crate::model::{FusedModel, Mode};
use crate::optim::{Adam, AdamConfig, InverseSqrtSchedule};
use crate::provider::ProviderOutput;
use crate::tensor::Tensor;
use crate::tokenizer::WordVocab;

/// One training pair with its cached provider states.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub provider: Option<ProviderOutput>,
}

impl Example {
    /// Padded cost of the pair inside a batch.
    fn tokens(&self) -> usize {
        self.src.len().max(self.tgt.len() + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_steps: u64,
    pub batch_tokens: usize,
    pub accumulate: usize,
    pub eval_every: u64,
    pub patience: usize,
    pub label_smoothing: f64,
    pub schedule: InverseSqrtSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Validation examples decoded for BLEU and sequence accuracy; 0 skips
    /// decoding.
    pub eval_decode: usize,
    /// Updates already taken under `schedule` before this run started.
    pub schedule_offset: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 2000,
            batch_tokens: 256,
            accumulate: 1,
            eval_every: 100,
            patience: 5,
            label_smoothing: 0.1,
            schedule: InverseSqrtSchedule::default(),
            adam: AdamConfig::default(),
            seed: 1,
            eval_decode: 200,
            schedule_offset: 0,
        }
    }
}

impl TrainConfig {
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("max_steps", self.max_steps.to_string()),
            ("batch_tokens", self.batch_tokens.to_string()),
            ("accumulate", self.accumulate.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("patience", self.patience.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("warmup_init_lr", self.schedule.warmup_init_lr.to_string()),
            ("max_lr", self.schedule.max_lr.to_string()),
            ("warmup_updates", self.schedule.warmup_updates.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("weight_decay", self.adam.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_decode", self.eval_decode.to_string()),
            ("schedule_offset", self.schedule_offset.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "max_steps" => self.max_steps = parse_value(key, value)?,
            "batch_tokens" => self.batch_tokens = parse_value(key, value)?,
            "accumulate" => self.accumulate = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "label_smoothing" => self.label_smoothing = parse_value(key, value)?,
            "warmup_init_lr" => self.schedule.warmup_init_lr = parse_value(key, value)?,
            "max_lr" => self.schedule.max_lr = parse_value(key, value)?,
            "warmup_updates" => self.schedule.warmup_updates = parse_value(key, value)?,
            "beta1" => self.adam.beta1 = parse_value(key, value)?,
            "beta2" => self.adam.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam.eps = parse_value(key, value)?,
            "weight_decay" => self.adam.weight_decay = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "eval_decode" => self.eval_decode = parse_value(key, value)?,
            "schedule_offset" => self.schedule_offset = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 || self.accumulate == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_tokens, accumulate and eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.schedule.warmup_updates == 0 || !(self.schedule.max_lr > 0.0) {
            return Err(Error::Config("schedule needs positive warm-up and peak rate".into()));
        }
        Ok(())
    }
}

/// Length-bucketed batches bounded by padded token count, in shuffled order.
pub fn make_batches(examples: &[Example], batch_tokens: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| examples[i].tokens());
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut width = 0;
    for i in order {
        let w = width.max(examples[i].tokens());
        if !current.is_empty() && w * (current.len() + 1) > batch_tokens {
            batches.push(std::mem::take(&mut current));
            width = 0;
        }
        width = width.max(examples[i].tokens());
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    batches
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Training curves as `step,split,metric,value` rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainRunLog {
    pub rows: Vec<LogRow>,
}

impl TrainRunLog {
    pub const HEADER: &'static str = "step,split,metric,value";

    pub fn push(&mut self, step: u64, split: &str, metric: &str, value: f64) {
        self.rows.push(LogRow {
            step,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TrainRunLog::HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.step, r.split, r.metric, r.value));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(TrainRunLog::HEADER) {
            return Err(invalid("run log lacks its header"));
        }
        let mut log = TrainRunLog::default();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(invalid(format!("bad run log row `{line}`")));
            }
            log.push(parse_value("step", f[0])?, f[1], f[2], parse_value("value", f[3])?);
        }
        Ok(log)
    }

    /// Values of one series in order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub bleu: Option<f64>,
    pub seq_acc: Option<f64>,
}

fn ids_text(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

/// Per-token validation NLL without smoothing, and greedy-decoding scores
/// on the first `decode` examples.
pub fn evaluate(model: &FusedModel, examples: &[Example], decode: usize) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let mut total = 0.0;
    let mut count = 0;
    for ex in examples {
        let mut g = Graph::no_grad();
        let p = model.params().bind_frozen(&mut g);
        let (loss, n) = model.loss_graph(&mut g, &p, &ex.src, &ex.tgt, ex.provider.as_ref(), &mut Mode::Eval, 0.0)?;
        total += g.value(loss).item()?;
        count += n;
    }
    let (mut bleu_score, mut acc) = (None, None);
    if decode > 0 {
        let (hyps, refs) = decode_ids(model, &examples[..decode.min(examples.len())])?;
        let (hyps, refs): (Vec<String>, Vec<String>) =
            (hyps.iter().map(|h| ids_text(h)).collect(), refs.iter().map(|r| ids_text(r)).collect());
        bleu_score = Some(bleu(&hyps, &refs, 4)?);
        acc = Some(seq_accuracy(&hyps, &refs)?);
    }
    Ok(EvalMetrics {
        loss: total / count as f64,
        bleu: bleu_score,
        seq_acc: acc,
    })
}

/// Decoding budget for a source sentence.
pub fn max_output_len(src_len: usize) -> usize {
    2 * src_len + 5
}

/// Greedy outputs (without EOS) next to the references.
pub fn decode_ids(model: &FusedModel, examples: &[Example]) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let mut hyps = Vec::with_capacity(examples.len());
    for ex in examples {
        let st = FusedStepper::new(model, &ex.src, ex.provider.as_ref())?;
        hyps.push(greedy(&st, max_output_len(ex.src.len()))?.output().to_vec());
    }
    Ok((hyps, examples.iter().map(|e| e.tgt.clone()).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub stopped_early: bool,
    pub best_valid_loss: f64,
    pub last_eval: Option<EvalMetrics>,
}

/// Holds the model, optimiser and loop position; everything needed to
/// resume is in [`Trainer::to_container`].
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FusedModel,
    pub adam: Adam,
    pub config: TrainConfig,
    pub log: TrainRunLog,
    step: u64,
    epoch: u64,
    cursor: usize,
    best_valid: f64,
    bad_evals: usize,
    stopped: bool,
    last_eval: Option<EvalMetrics>,
}

impl Trainer {
    pub fn new(model: FusedModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam, model.params());
        Ok(Trainer {
            model,
            adam,
            config,
            log: TrainRunLog::default(),
            step: 0,
            epoch: 0,
            cursor: 0,
            best_valid: f64::INFINITY,
            bad_evals: 0,
            stopped: false,
            last_eval: None,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    fn next_batch(&mut self, train: &[Example]) -> Vec<usize> {
        loop {
            let batches = make_batches(train, self.config.batch_tokens, derive_seed(self.config.seed, "batches", self.epoch));
            if self.cursor < batches.len() {
                self.cursor += 1;
                return batches[self.cursor - 1].clone();
            }
            self.epoch += 1;
            self.cursor = 0;
        }
    }

    /// One optimiser update; returns the per-token training loss.
    pub fn train_step(&mut self, train: &[Example]) -> Result<f64> {
        if train.is_empty() {
            return Err(invalid("training set is empty"));
        }
        let next = self.step + 1;
        let layers = self.model.config().layers;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, "dropnet", next));
        let sample = DropNetSample::draw(layers, self.model.config().shared_dropnet, &mut drop_rng);
        let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, "dropout", next));
        let mut grads: Vec<Tensor> = self.model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for _ in 0..self.config.accumulate {
            for i in self.next_batch(train) {
                let ex = &train[i];
                let mut g = Graph::new();
                let p = self.model.params().bind(&mut g);
                let mut mode = Mode::Train {
                    dropnet: &sample,
                    rng: &mut noise,
                };
                let (loss, n) = self.model.loss_graph(
                    &mut g,
                    &p,
                    &ex.src,
                    &ex.tgt,
                    ex.provider.as_ref(),
                    &mut mode,
                    self.config.label_smoothing,
                )?;
                g.backward(loss)?;
                loss_sum += g.value(loss).item()?;
                tokens += n;
                for (acc, gr) in grads.iter_mut().zip(p.grads(&g, self.model.params())) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gr.data()) {
                        *a += b;
                    }
                }
            }
        }
        let scale = 1.0 / tokens as f64;
        for gr in &mut grads {
            for v in gr.data_mut() {
                *v *= scale;
            }
        }
        let lr = self.config.schedule.lr_at(next + self.config.schedule_offset);
        self.adam.step(self.model.params_mut(), &grads, lr)?;
        self.step = next;
        let loss = loss_sum * scale;
        self.log.push(next, "train", "loss", loss);
        Ok(loss)
    }

    /// Evaluates, logs and updates the early-stopping state.
    pub fn evaluate(&mut self, valid: &[Example]) -> Result<EvalMetrics> {
        let m = evaluate(&self.model, valid, self.config.eval_decode)?;
        self.log.push(self.step, "valid", "loss", m.loss);
        if let Some(b) = m.bleu {
            self.log.push(self.step, "valid", "bleu", b);
        }
        if let Some(a) = m.seq_acc {
            self.log.push(self.step, "valid", "seq_acc", a);
        }
        if m.loss < self.best_valid {
            self.best_valid = m.loss;
            self.bad_evals = 0;
        } else {
            self.bad_evals += 1;
            if self.bad_evals >= self.config.patience {
                self.stopped = true;
            }
        }
        info!(
            "step {} valid loss {:.4} bleu {:?} seq_acc {:?}",
            self.step, m.loss, m.bleu, m.seq_acc
        );
        self.last_eval = Some(m);
        Ok(m)
    }

    /// Trains until `max_steps`, early stopping, or `pause_at` (exclusive
    /// upper bound on the step counter, for interrupted runs).
    pub fn run(&mut self, train: &[Example], valid: &[Example], pause_at: Option<u64>) -> Result<TrainOutcome> {
        let limit = pause_at.map_or(self.config.max_steps, |p| p.min(self.config.max_steps));
        while !self.stopped && self.step < limit {
            let loss = self.train_step(train)?;
            if self.step.is_multiple_of(50) {
                debug!("step {} loss {:.4}", self.step, loss);
            }
            if self.step.is_multiple_of(self.config.eval_every) || self.step == self.config.max_steps {
                self.evaluate(valid)?;
            }
        }
        Ok(TrainOutcome {
            steps: self.step,
            stopped_early: self.stopped,
            best_valid_loss: self.best_valid,
            last_eval: self.last_eval,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = self.model.to_container();
        for (k, v) in self.config.entries() {
            c.push_meta(format!("train.{k}"), v);
        }
        c.push_meta("trainer.step", self.step.to_string());
        c.push_meta("trainer.epoch", self.epoch.to_string());
        c.push_meta("trainer.cursor", self.cursor.to_string());
        c.push_meta("trainer.best_valid", f64_to_meta(self.best_valid));
        c.push_meta("trainer.bad_evals", self.bad_evals.to_string());
        c.push_meta("trainer.stopped", self.stopped.to_string());
        if let Some(m) = self.last_eval {
            c.push_meta("trainer.last_loss", f64_to_meta(m.loss));
            if let (Some(b), Some(a)) = (m.bleu, m.seq_acc) {
                c.push_meta("trainer.last_bleu", f64_to_meta(b));
                c.push_meta("trainer.last_seq_acc", f64_to_meta(a));
            }
        }
        c.push_meta("trainer.log", self.log.to_csv());
        self.adam.write_to(&mut c);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let model = FusedModel::from_container(c)?;
        let mut config = TrainConfig::default();
        for (k, _) in TrainConfig::default().entries() {
            config.set(k, c.require_meta(&format!("train.{k}"))?)?;
        }
        let num = |key: &str| -> Result<u64> {
            c.require_meta(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad `{key}`")))
        };
        let adam = Adam::read_from(config.adam, model.params(), c)?;
        let last_eval = match c.meta("trainer.last_loss") {
            None => None,
            Some(l) => Some(EvalMetrics {
                loss: f64_from_meta(l)?,
                bleu: c.meta("trainer.last_bleu").map(f64_from_meta).transpose()?,
                seq_acc: c.meta("trainer.last_seq_acc").map(f64_from_meta).transpose()?,
            }),
        };
        Ok(Trainer {
            model,
            adam,
            log: TrainRunLog::from_csv(c.require_meta("trainer.log")?)?,
            step: num("trainer.step")?,
            epoch: num("trainer.epoch")?,
            cursor: num("trainer.cursor")? as usize,
            best_valid: f64_from_meta(c.require_meta("trainer.best_valid")?)?,
            bad_evals: num("trainer.bad_evals")? as usize,
            stopped: c.require_meta("trainer.stopped")? == "true",
            last_eval,
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Trainer::from_container(&Container::load(path)?)
    }
}

/// Mean token-level loss of a logits matrix against `targets`; `None`
/// entries are padding.
pub fn token_loss(logits: &Tensor, targets: &[Option<usize>], smoothing: f64) -> Result<f64> {
    let mut g = Graph::no_grad();
    let x = g.constant(logits.clone());
    let l = g.cross_entropy(x, targets, smoothing, Reduction::Mean)?;
    g.value(l).item()
}

/// Teacher-forcing targets for `tgt`: the words followed by EOS.
pub fn shifted(tgt: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = vec![WordVocab::BOS];
    input.extend_from_slice(tgt);
    let mut out = tgt.to_vec();
    out.push(WordVocab::EOS);
    (input, out)
}
