//! Experiment configuration and the pipelines behind each subcommand.
//!
//! An [`ExperimentConfig`] is a flat `key=value` file with dotted
//! namespaces. Every run writes its resolved configuration next to its
//! outputs, and re-running that snapshot reproduces the run bit for bit:
//! all randomness derives from the single top-level `seed`.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::checkpoint::Container;
use crate::config::{derive_seed, parse_kv, parse_value};
use crate::data::{generate, Dataset, ParallelCorpus, RuleTable, SyntheticTaskSpec, TaskKind};
use crate::decode::{beam_search, bleu, seq_accuracy, time_runs, BeamConfig, FusedStepper, TimingReport};
use crate::error::{invalid, Error, Result};
use crate::model::{FusedModel, FusedModelConfig, Wiring};
use crate::optim::InverseSqrtSchedule;
use crate::provider::{ContextProvider, PretrainConfig, ProviderConfig, ProviderOutput, ProviderText, SourceMode};
use crate::tokenizer::{PieceTokenizer, WordVocab};
use crate::training::{max_output_len, Example, TrainConfig, TrainRunLog, Trainer};

/// Which model `train` produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// The plain baseline, trained to convergence.
    Stage1,
    /// The fused model warm-started from a stage-1 checkpoint.
    Stage2,
    /// The fused model with every parameter freshly initialised.
    JointRandomInit,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "joint-random-init" => Ok(Stage::JointRandomInit),
            other => Err(Error::Config(format!(
                "unknown stage `{other}` (expected stage1, stage2 or joint-random-init)"
            ))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::JointRandomInit => "joint-random-init",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeSettings {
    pub beam: BeamConfig,
    /// `0` means the per-sentence budget `2·|x| + 5`.
    pub max_len: usize,
}

impl DecodeSettings {
    pub fn for_source(&self, src_len: usize) -> BeamConfig {
        BeamConfig {
            max_len: if self.max_len == 0 { max_output_len(src_len) } else { self.max_len },
            ..self.beam
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub reps: usize,
    pub warmup: usize,
    pub sentences: usize,
}

/// Everything a run needs. Sub-configuration seeds are not settable; they
/// derive from `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub stage: Stage,
    pub task: SyntheticTaskSpec,
    pub provider: ProviderConfig,
    pub provider_mode: SourceMode,
    pub pretrain: PretrainConfig,
    pub model: FusedModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Continue the stage-1 learning-rate schedule in stage 2 instead of
    /// restarting it.
    pub continue_schedule: bool,
    pub decode: DecodeSettings,
    pub bench: BenchConfig,
    pub sweep_p_net: Vec<f64>,
    pub ablate_variants: Vec<String>,
    /// Reuse a stage-1 checkpoint instead of training one.
    pub stage1_checkpoint: Option<PathBuf>,
    /// Reuse a provider checkpoint instead of pretraining one.
    pub provider_checkpoint: Option<PathBuf>,
}

/// Learning-rate schedule used for desk-scale runs.
pub const DESK_SCHEDULE: InverseSqrtSchedule = InverseSqrtSchedule {
    warmup_init_lr: 1e-7,
    max_lr: 1e-2,
    warmup_updates: 200,
};

pub const SWEEP_P_NET: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Table rows of the ablation, in order. `random_init` is the full model
/// without the stage-1 warm start.
pub const ABLATE_ROWS: [&str; 8] = [
    "full",
    "random_init",
    "linear_feed",
    "drop_enc_attnB",
    "drop_dec_attnB",
    "embedding_feed",
    "stacked_decoder",
    "no_provider_baseline",
];

const DERIVED_MODEL_KEYS: [&str; 3] = ["src_vocab", "tgt_vocab", "provider_dim"];

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig {
            max_steps: 3000,
            batch_tokens: 512,
            eval_every: 100,
            schedule: DESK_SCHEDULE,
            ..TrainConfig::default()
        };
        ExperimentConfig {
            seed: 1,
            stage: Stage::Stage1,
            task: SyntheticTaskSpec {
                train_size: 2000,
                valid_size: 200,
                test_size: 200,
                ..SyntheticTaskSpec::default()
            },
            provider: ProviderConfig::default(),
            provider_mode: SourceMode::Sentence,
            pretrain: PretrainConfig::default(),
            model: FusedModelConfig {
                heads: 1,
                ..FusedModelConfig::default()
            },
            stage1: train.clone(),
            stage2: train,
            continue_schedule: false,
            decode: DecodeSettings {
                beam: BeamConfig::DEFAULT,
                max_len: 0,
            },
            bench: BenchConfig {
                reps: 5,
                warmup: 1,
                sentences: 50,
            },
            sweep_p_net: SWEEP_P_NET.to_vec(),
            ablate_variants: ABLATE_ROWS.iter().map(|s| s.to_string()).collect(),
            stage1_checkpoint: None,
            provider_checkpoint: None,
        }
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn path_or_empty(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        ExperimentConfig::from_kv(&text)
    }

    /// Applies one `namespace.key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (ns, sub) = key.split_once('.').unwrap_or(("", key));
        match (ns, sub) {
            ("", "seed") => self.seed = parse_value(key, value)?,
            ("", "stage") => self.stage = value.parse()?,
            ("", "continue_schedule") => self.continue_schedule = parse_value(key, value)?,
            ("", "stage1_checkpoint") => self.stage1_checkpoint = Some(value).filter(|v| !v.is_empty()).map(PathBuf::from),
            ("", "provider_checkpoint") => {
                self.provider_checkpoint = Some(value).filter(|v| !v.is_empty()).map(PathBuf::from)
            }
            ("data", "seed") | ("stage1", "seed") | ("stage2", "seed") | ("pretrain", "seed") => {
                return Err(Error::Config(format!("`{key}` is derived from the top-level seed")))
            }
            ("stage1", "schedule_offset") | ("stage2", "schedule_offset") => {
                return Err(Error::Config(format!("`{key}` is set by `continue_schedule`")))
            }
            ("data", k) => self.task.set(k, value)?,
            ("provider", "mode") => self.provider_mode = value.parse()?,
            ("provider", "layers") => self.provider.layers = parse_value(key, value)?,
            ("provider", "dim") => self.provider.dim = parse_value(key, value)?,
            ("provider", "heads") => self.provider.heads = parse_value(key, value)?,
            ("provider", "ff_dim") => self.provider.ff_dim = parse_value(key, value)?,
            ("pretrain", "steps") => self.pretrain.steps = parse_value(key, value)?,
            ("pretrain", "batch") => self.pretrain.batch = parse_value(key, value)?,
            ("pretrain", "mask_rate") => self.pretrain.mask_rate = parse_value(key, value)?,
            ("pretrain", "max_lr") => self.pretrain.schedule.max_lr = parse_value(key, value)?,
            ("pretrain", "warmup_updates") => self.pretrain.schedule.warmup_updates = parse_value(key, value)?,
            ("pretrain", "warmup_init_lr") => self.pretrain.schedule.warmup_init_lr = parse_value(key, value)?,
            ("model", k) if DERIVED_MODEL_KEYS.contains(&k) => {
                return Err(Error::Config(format!("`{key}` is derived from the data and provider")))
            }
            ("model", k) => self.model.set(k, value)?,
            ("stage1", k) => self.stage1.set(k, value)?,
            ("stage2", k) => self.stage2.set(k, value)?,
            ("decode", "preset") => self.decode.beam = BeamConfig::preset(value)?,
            ("decode", "width") => self.decode.beam.width = parse_value(key, value)?,
            ("decode", "alpha") => self.decode.beam.alpha = parse_value(key, value)?,
            ("decode", "max_len") => self.decode.max_len = parse_value(key, value)?,
            ("bench", "reps") => self.bench.reps = parse_value(key, value)?,
            ("bench", "warmup") => self.bench.warmup = parse_value(key, value)?,
            ("bench", "sentences") => self.bench.sentences = parse_value(key, value)?,
            ("sweep", "p_net") => {
                self.sweep_p_net = value
                    .split(',')
                    .map(|v| parse_value::<f64>(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            ("ablate", "variants") => {
                self.ablate_variants = value.split(',').map(|v| v.trim().to_string()).collect()
            }
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical serialisation; `from_kv(to_kv())` is the identity.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k}={v}\n"));
        put("seed", self.seed.to_string());
        put("stage", self.stage.to_string());
        put("continue_schedule", self.continue_schedule.to_string());
        put("stage1_checkpoint", path_or_empty(&self.stage1_checkpoint));
        put("provider_checkpoint", path_or_empty(&self.provider_checkpoint));
        for line in self.task.to_kv().lines().filter(|l| !l.starts_with("seed=")) {
            let (k, v) = line.split_once('=').expect("task lines are key=value");
            put(&format!("data.{k}"), v.to_string());
        }
        put("provider.mode", self.provider_mode.to_string());
        put("provider.layers", self.provider.layers.to_string());
        put("provider.dim", self.provider.dim.to_string());
        put("provider.heads", self.provider.heads.to_string());
        put("provider.ff_dim", self.provider.ff_dim.to_string());
        put("pretrain.steps", self.pretrain.steps.to_string());
        put("pretrain.batch", self.pretrain.batch.to_string());
        put("pretrain.mask_rate", self.pretrain.mask_rate.to_string());
        put("pretrain.warmup_init_lr", self.pretrain.schedule.warmup_init_lr.to_string());
        put("pretrain.max_lr", self.pretrain.schedule.max_lr.to_string());
        put("pretrain.warmup_updates", self.pretrain.schedule.warmup_updates.to_string());
        for (k, v) in self.model.entries() {
            if !DERIVED_MODEL_KEYS.contains(&k) {
                put(&format!("model.{k}"), v);
            }
        }
        for (ns, t) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            for (k, v) in t.entries() {
                if k != "seed" && k != "schedule_offset" {
                    put(&format!("{ns}.{k}"), v);
                }
            }
        }
        put("decode.width", self.decode.beam.width.to_string());
        put("decode.alpha", self.decode.beam.alpha.to_string());
        put("decode.max_len", self.decode.max_len.to_string());
        put("bench.reps", self.bench.reps.to_string());
        put("bench.warmup", self.bench.warmup.to_string());
        put("bench.sentences", self.bench.sentences.to_string());
        put("sweep.p_net", join_f64(&self.sweep_p_net));
        put("ablate.variants", self.ablate_variants.join(","));
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.decode.beam.validate()?;
        Wiring::parse(&self.model.variant)?;
        if !(0.0..=1.0).contains(&self.model.p_net) {
            return Err(Error::Config(format!("p_net {} outside [0, 1]", self.model.p_net)));
        }
        if self.provider_mode == SourceMode::Document && self.task.task != TaskKind::ContextDisambiguation {
            return Err(Error::Config(format!(
                "document mode needs a task with preceding sentences, not `{}`",
                self.task.task
            )));
        }
        if let Some(p) = self.sweep_p_net.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("sweep p_net {p} outside [0, 1]")));
        }
        for v in &self.ablate_variants {
            if v != "random_init" {
                Wiring::parse(v)?;
            }
        }
        if self.bench.reps <= self.bench.warmup || self.bench.sentences == 0 {
            return Err(Error::Config("bench needs more repetitions than warm-up runs and at least one sentence".into()));
        }
        Ok(())
    }

    /// Task spec with its derived seed.
    pub fn task_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            seed: derive_seed(self.seed, "data", 0),
            ..self.task.clone()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: derive_seed(self.seed, "pretrain", 0),
            ..self.pretrain.clone()
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let (base, label) = match stage {
            Stage::Stage1 => (&self.stage1, "stage1"),
            Stage::Stage2 => (&self.stage2, "stage2"),
            Stage::JointRandomInit => (&self.stage2, "joint"),
        };
        TrainConfig {
            seed: derive_seed(self.seed, label, 0),
            ..base.clone()
        }
    }

    pub fn init_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, "init", label.len() as u64) ^ derive_seed(self.seed, label, 1)
    }
}

/// Source and target word vocabularies built from the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabs {
    pub src: WordVocab,
    pub tgt: WordVocab,
}

impl Vocabs {
    pub fn build(train: &ParallelCorpus) -> Result<Self> {
        Ok(Vocabs {
            src: WordVocab::build(train.source.iter().map(String::as_str))?,
            tgt: WordVocab::build(train.target.iter().map(String::as_str))?,
        })
    }

    pub fn write_to(&self, c: &mut Container) {
        c.push_meta("vocab.src", self.src.to_text());
        c.push_meta("vocab.tgt", self.tgt.to_text());
    }

    pub fn read_from(c: &Container) -> Result<Self> {
        Ok(Vocabs {
            src: WordVocab::from_text(c.require_meta("vocab.src")?)?,
            tgt: WordVocab::from_text(c.require_meta("vocab.tgt")?)?,
        })
    }
}

/// Provider inputs for every sentence of a corpus.
pub fn provider_texts(corpus: &ParallelCorpus, mode: SourceMode) -> Result<Vec<ProviderText>> {
    (0..corpus.len())
        .map(|i| match mode {
            SourceMode::Sentence => Ok(ProviderText::sentence(corpus.source[i].clone())),
            SourceMode::Document => corpus
                .prev_of(i)
                .map(|p| ProviderText::document(corpus.source[i].clone(), p))
                .ok_or_else(|| Error::Data("document mode needs preceding sentences".into())),
        })
        .collect()
}

/// Pretrains a provider on the source side of the training split.
pub fn pretrain_provider(cfg: &ExperimentConfig, data: &Dataset) -> Result<(ContextProvider, Vec<f64>)> {
    let texts = provider_texts(&data.train, cfg.provider_mode)?;
    let all = texts.iter().flat_map(|t| std::iter::once(t.text.as_str()).chain(t.prev.as_deref()));
    let tokenizer = PieceTokenizer::build(all)?;
    ContextProvider::pretrain(cfg.provider, tokenizer, &texts, &cfg.pretrain_config())
}

/// Frozen provider outputs, computed once per sentence.
pub fn provider_outputs(provider: &ContextProvider, corpus: &ParallelCorpus, mode: SourceMode) -> Result<Vec<ProviderOutput>> {
    provider_texts(corpus, mode)?
        .iter()
        .map(|t| provider.encode_text(t))
        .collect()
}

pub fn examples(corpus: &ParallelCorpus, vocabs: &Vocabs, provider: Option<&[ProviderOutput]>) -> Vec<Example> {
    (0..corpus.len())
        .map(|i| Example {
            src: vocabs.src.encode(&corpus.source[i]).ids,
            tgt: vocabs.tgt.encode(&corpus.target[i]).ids,
            provider: provider.map(|p| p[i].clone()),
        })
        .collect()
}

/// Data, vocabularies, provider and encoded splits shared by the stages of
/// an experiment.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub data: Dataset,
    pub vocabs: Vocabs,
    pub provider: ContextProvider,
    pub mode: SourceMode,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl Workspace {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        let data = generate(&cfg.task_spec())?;
        let provider = match &cfg.provider_checkpoint {
            Some(p) => ContextProvider::load(p)?,
            None => pretrain_provider(cfg, &data)?.0,
        };
        Workspace::with_provider(cfg, data, provider)
    }

    pub fn with_provider(cfg: &ExperimentConfig, data: Dataset, provider: ContextProvider) -> Result<Self> {
        let vocabs = Vocabs::build(&data.train)?;
        let enc = |c: &ParallelCorpus| -> Result<Vec<Example>> {
            let outs = provider_outputs(&provider, c, cfg.provider_mode)?;
            Ok(examples(c, &vocabs, Some(&outs)))
        };
        let (train, valid, test) = (enc(&data.train)?, enc(&data.valid)?, enc(&data.test)?);
        Ok(Workspace {
            mode: cfg.provider_mode,
            data,
            vocabs,
            provider,
            train,
            valid,
            test,
        })
    }

    pub fn model_config(&self, cfg: &ExperimentConfig, variant: &str) -> FusedModelConfig {
        FusedModelConfig {
            src_vocab: self.vocabs.src.len(),
            tgt_vocab: self.vocabs.tgt.len(),
            provider_dim: self.provider.dim(),
            variant: variant.to_string(),
            ..cfg.model.clone()
        }
    }
}

/// Trains the plain baseline.
pub fn train_stage1(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Trainer> {
    let model = FusedModel::new(ws.model_config(cfg, "no_provider_baseline"), cfg.init_seed("stage1"))?;
    let mut t = Trainer::new(model, cfg.train_config(Stage::Stage1))?;
    let outcome = t.run(&ws.train, &ws.valid, None)?;
    info!("stage 1 finished after {} steps (early stop: {})", outcome.steps, outcome.stopped_early);
    Ok(t)
}

/// Builds the fused model of `variant`, optionally warm-started from
/// `stage1`, ready to train.
pub fn fused_trainer(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    variant: &str,
    p_net: f64,
    stage1: Option<&Trainer>,
) -> Result<Trainer> {
    let mc = FusedModelConfig {
        p_net,
        ..ws.model_config(cfg, variant)
    };
    let stage = if stage1.is_some() { Stage::Stage2 } else { Stage::JointRandomInit };
    let mut model = FusedModel::new(mc, cfg.init_seed(&format!("{stage}.{variant}")))?;
    let mut tc = cfg.train_config(stage);
    if let Some(s1) = stage1 {
        let report = model.warm_start_from(s1.model.params())?;
        info!(
            "warm start: {} copied, {} fresh, {} unused",
            report.copied.len(),
            report.fresh.len(),
            report.unused.len()
        );
        if cfg.continue_schedule {
            tc.schedule_offset = s1.step();
        }
    }
    Trainer::new(model, tc)
}

/// Test-split scores of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct TestMetrics {
    pub bleu: f64,
    pub seq_acc: f64,
    /// Accuracy on ambiguous source positions, for the disambiguation task.
    pub ambiguous_acc: Option<f64>,
}

/// Beam-decodes `examples` and returns detokenised outputs.
pub fn translate(model: &FusedModel, vocabs: &Vocabs, examples: &[Example], decode: &DecodeSettings) -> Result<Vec<String>> {
    examples
        .iter()
        .map(|ex| {
            let st = FusedStepper::new(model, &ex.src, ex.provider.as_ref())?;
            let h = beam_search(&st, decode.for_source(ex.src.len()))?;
            Ok(vocabs.tgt.decode(h.output()))
        })
        .collect()
}

/// Share of ambiguous source positions whose output word is correct.
pub fn ambiguous_accuracy(hyps: &[String], corpus: &ParallelCorpus, rules: &RuleTable) -> Result<f64> {
    if hyps.len() != corpus.len() {
        return Err(invalid("one hypothesis per sentence is required"));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, positions) in corpus.ambiguous_positions(rules).iter().enumerate() {
        let h: Vec<&str> = hyps[i].split_whitespace().collect();
        let r: Vec<&str> = corpus.target[i].split_whitespace().collect();
        for &p in positions {
            total += 1;
            hit += usize::from(h.get(p) == r.get(p));
        }
    }
    if total == 0 {
        return Err(invalid("corpus has no ambiguous positions"));
    }
    Ok(hit as f64 / total as f64)
}

pub fn test_metrics(model: &FusedModel, ws: &Workspace, decode: &DecodeSettings) -> Result<(Vec<String>, TestMetrics)> {
    let hyps = translate(model, &ws.vocabs, &ws.test, decode)?;
    let refs = &ws.data.test.target;
    let ambiguous_acc = if ws.data.spec.task == TaskKind::ContextDisambiguation {
        Some(ambiguous_accuracy(&hyps, &ws.data.test, &RuleTable::standard())?)
    } else {
        None
    };
    let m = TestMetrics {
        bleu: bleu(&hyps, refs, 4)?,
        seq_acc: seq_accuracy(&hyps, refs)?,
        ambiguous_acc,
    };
    Ok((hyps, m))
}

/// `key=value` lines describing a finished run.
pub fn metrics_block(trainer: &Trainer, test: &TestMetrics, decode: &DecodeSettings) -> String {
    let mut s = String::new();
    s.push_str(&format!("steps={}\n", trainer.step()));
    s.push_str(&format!("stopped_early={}\n", trainer.stopped()));
    if let Some(v) = trainer.log.series("valid", "loss").last() {
        s.push_str(&format!("valid_loss={}\n", v.1));
    }
    s.push_str(&format!("test_bleu={}\n", test.bleu));
    s.push_str(&format!("test_seq_acc={}\n", test.seq_acc));
    if let Some(a) = test.ambiguous_acc {
        s.push_str(&format!("test_ambiguous_acc={a}\n"));
    }
    s.push_str(&format!(
        "decode.width={}\ndecode.alpha={}\ndecode.max_len={}\n",
        decode.beam.width, decode.beam.alpha, decode.max_len
    ));
    s.push_str("bleu.tokenization=whitespace\nbleu.max_n=4\nbleu.smoothing=none\n");
    s
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::Config(format!("output directory {} is not writable: {e}", dir.display())))?;
    fs::remove_file(probe)?;
    Ok(())
}

/// Saves a trainer checkpoint with its vocabularies and provider settings.
pub fn save_model(trainer: &Trainer, ws: &Workspace, path: &Path) -> Result<()> {
    let mut c = trainer.to_container();
    ws.vocabs.write_to(&mut c);
    c.push_meta("provider.mode", ws.mode.to_string());
    c.save(path)
}

/// Writes the outputs every training run leaves behind.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, trainer: &Trainer, ws: &Workspace, decode: &DecodeSettings) -> Result<TestMetrics> {
    ensure_dir(dir)?;
    fs::write(dir.join("config.cfg"), cfg.to_kv())?;
    fs::write(dir.join("log.csv"), trainer.log.to_csv())?;
    let (hyps, test) = test_metrics(&trainer.model, ws, decode)?;
    fs::write(dir.join("test.hyp"), hyps.join("\n") + "\n")?;
    fs::write(dir.join("metrics.txt"), metrics_block(trainer, &test, decode))?;
    save_model(trainer, ws, &dir.join("model.ckpt"))?;
    Ok(test)
}

pub fn run_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    ensure_dir(out)?;
    let data = generate(&cfg.task_spec())?;
    data.write_dir(out.join("data"))?;
    fs::write(out.join("config.cfg"), cfg.to_kv())?;
    Ok(data)
}

pub fn run_pretrain_provider(cfg: &ExperimentConfig, out: &Path) -> Result<ContextProvider> {
    ensure_dir(out)?;
    fs::write(out.join("config.cfg"), cfg.to_kv())?;
    let data = generate(&cfg.task_spec())?;
    let (provider, losses) = pretrain_provider(cfg, &data)?;
    let mut log = TrainRunLog::default();
    for (i, l) in losses.iter().enumerate() {
        log.push(i as u64 + 1, "train", "mlm_loss", *l);
    }
    let held_out = provider_texts(&data.valid, cfg.provider_mode)?;
    let acc = provider.masked_accuracy(&held_out, cfg.pretrain.mask_rate, derive_seed(cfg.seed, "mlm-eval", 0))?;
    log.push(losses.len() as u64, "valid", "masked_acc", acc);
    fs::write(out.join("log.csv"), log.to_csv())?;
    fs::write(
        out.join("metrics.txt"),
        format!("steps={}\nvalid_masked_acc={acc}\nparam_hash={}\n", losses.len(), provider.param_hash()),
    )?;
    provider.save(out.join("provider.ckpt"))?;
    Ok(provider)
}

/// Stage 1 from scratch, or loaded from `stage1_checkpoint`.
pub fn stage1_trainer(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Trainer> {
    match &cfg.stage1_checkpoint {
        Some(p) => {
            let t = Trainer::load(p)?;
            if Vocabs::read_from(&Container::load(p)?)? != ws.vocabs {
                return Err(Error::Config(format!("{} was trained on different vocabularies", p.display())));
            }
            Ok(t)
        }
        None => train_stage1(cfg, ws),
    }
}

pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<TestMetrics> {
    ensure_dir(out)?;
    let ws = Workspace::prepare(cfg)?;
    ws.provider.save(out.join("provider.ckpt"))?;
    match cfg.stage {
        Stage::Stage1 => {
            let t = train_stage1(cfg, &ws)?;
            write_run(out, cfg, &t, &ws, &cfg.decode)
        }
        Stage::Stage2 => {
            let s1 = stage1_trainer(cfg, &ws)?;
            save_model(&s1, &ws, &out.join("stage1.ckpt"))?;
            let mut t = fused_trainer(cfg, &ws, &cfg.model.variant, cfg.model.p_net, Some(&s1))?;
            t.run(&ws.train, &ws.valid, None)?;
            write_run(out, cfg, &t, &ws, &cfg.decode)
        }
        Stage::JointRandomInit => {
            let mut t = fused_trainer(cfg, &ws, &cfg.model.variant, cfg.model.p_net, None)?;
            t.run(&ws.train, &ws.valid, None)?;
            write_run(out, cfg, &t, &ws, &cfg.decode)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub valid_loss: f64,
    pub metrics: TestMetrics,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,valid_loss,test_bleu,test_seq_acc,test_ambiguous_acc\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variant,
            r.valid_loss,
            r.metrics.bleu,
            r.metrics.seq_acc,
            r.metrics.ambiguous_acc.map(|a| a.to_string()).unwrap_or_default()
        ));
    }
    s
}

fn last_valid_loss(t: &Trainer) -> f64 {
    t.log.series("valid", "loss").last().map_or(f64::NAN, |v| v.1)
}

/// One stage-1 baseline shared by every row; each fused row is
/// warm-started from it except `random_init`.
pub fn run_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    ensure_dir(out)?;
    fs::write(out.join("config.cfg"), cfg.to_kv())?;
    let ws = Workspace::prepare(cfg)?;
    let s1 = stage1_trainer(cfg, &ws)?;
    let mut rows = Vec::new();
    for v in &cfg.ablate_variants {
        let dir = out.join(v);
        let t = match v.as_str() {
            "no_provider_baseline" => s1.clone(),
            "random_init" => {
                let mut t = fused_trainer(cfg, &ws, "full", cfg.model.p_net, None)?;
                t.run(&ws.train, &ws.valid, None)?;
                t
            }
            variant => {
                let mut t = fused_trainer(cfg, &ws, variant, cfg.model.p_net, Some(&s1))?;
                t.run(&ws.train, &ws.valid, None)?;
                t
            }
        };
        let metrics = write_run(&dir, cfg, &t, &ws, &cfg.decode)?;
        rows.push(AblationRow {
            variant: v.clone(),
            valid_loss: last_valid_loss(&t),
            metrics,
        });
    }
    fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}

/// Merged curves of a drop-net sweep: `p_net,step,metric,value`.
pub fn sweep_csv(runs: &[(f64, TrainRunLog)]) -> String {
    let mut s = String::from("p_net,step,metric,value\n");
    for (p, log) in runs {
        for r in &log.rows {
            let metric = match (r.split.as_str(), r.metric.as_str()) {
                ("train", "loss") => "train_loss",
                ("valid", "loss") => "valid_loss",
                ("valid", "bleu") => "valid_bleu",
                _ => continue,
            };
            s.push_str(&format!("{p},{},{metric},{}\n", r.step, r.value));
        }
    }
    s
}

/// Stage-2 training of the full model once per drop-net rate.
pub fn run_dropnet_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(f64, TrainRunLog)>> {
    ensure_dir(out)?;
    fs::write(out.join("config.cfg"), cfg.to_kv())?;
    let ws = Workspace::prepare(cfg)?;
    let s1 = stage1_trainer(cfg, &ws)?;
    let mut runs = Vec::new();
    for &p in &cfg.sweep_p_net {
        let mut t = fused_trainer(cfg, &ws, &cfg.model.variant, p, Some(&s1))?;
        t.run(&ws.train, &ws.valid, None)?;
        write_run(&out.join(format!("p_net_{p}")), cfg, &t, &ws, &cfg.decode)?;
        runs.push((p, t.log.clone()));
    }
    fs::write(out.join("sweep.csv"), sweep_csv(&runs))?;
    Ok(runs)
}

/// Decoding-time comparison of the baseline and the fused model on the
/// same sentences. The fused timing includes running the provider.
pub fn bench_inference(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    baseline: &FusedModel,
    fused: &FusedModel,
) -> Result<TimingReport> {
    let n = cfg.bench.sentences.min(ws.test.len());
    let corpus = &ws.data.test;
    let texts = provider_texts(corpus, ws.mode)?;
    let decode_all = |model: &FusedModel, with_provider: bool| -> Result<()> {
        for (i, ex) in ws.test[..n].iter().enumerate() {
            let hb = if with_provider { Some(ws.provider.encode_text(&texts[i])?) } else { None };
            let st = FusedStepper::new(model, &ex.src, hb.as_ref())?;
            beam_search(&st, cfg.decode.for_source(ex.src.len()))?;
        }
        Ok(())
    };
    let mut base = Vec::new();
    let mut fuse = Vec::new();
    // interleave so that drift in machine load affects both equally
    for _ in 0..cfg.bench.reps {
        base.extend(time_runs(1, || decode_all(baseline, false))?);
        fuse.extend(time_runs(1, || decode_all(fused, true))?);
    }
    TimingReport::from_samples(&base, &fuse, cfg.bench.warmup)
}

pub fn run_bench_inference(cfg: &ExperimentConfig, out: &Path) -> Result<TimingReport> {
    ensure_dir(out)?;
    fs::write(out.join("config.cfg"), cfg.to_kv())?;
    let ws = Workspace::prepare(cfg)?;
    let s1 = stage1_trainer(cfg, &ws)?;
    let mut t = fused_trainer(cfg, &ws, &cfg.model.variant, cfg.model.p_net, Some(&s1))?;
    t.run(&ws.train, &ws.valid, None)?;
    let report = bench_inference(cfg, &ws, &s1.model, &t.model)?;
    fs::write(out.join("timing.csv"), report.to_csv())?;
    info!("{report}");
    Ok(report)
}

/// A trained checkpoint with what is needed to run it on raw text.
pub struct LoadedModel {
    pub model: FusedModel,
    pub vocabs: Vocabs,
    pub mode: SourceMode,
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        Ok(LoadedModel {
            model: FusedModel::from_container(&c)?,
            vocabs: Vocabs::read_from(&c)?,
            mode: c.require_meta("provider.mode")?.parse()?,
        })
    }

    /// Beam-decodes raw sentences; `prev` is required in document mode.
    pub fn translate(
        &self,
        provider: Option<&ContextProvider>,
        sources: &[String],
        prev: Option<&[String]>,
        decode: &DecodeSettings,
    ) -> Result<Vec<String>> {
        if self.model.uses_provider() && provider.is_none() {
            return Err(invalid("this model needs a provider checkpoint"));
        }
        if prev.is_some_and(|p| p.len() != sources.len()) {
            return Err(invalid("one preceding sentence per source sentence is required"));
        }
        sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let src = self.vocabs.src.encode(s).ids;
                let hb = match provider {
                    Some(p) if self.model.uses_provider() => Some(p.encode(s, self.mode, prev.map(|v| v[i].as_str()))?),
                    _ => None,
                };
                let st = FusedStepper::new(&self.model, &src, hb.as_ref())?;
                let h = beam_search(&st, decode.for_source(src.len()))?;
                Ok(self.vocabs.tgt.decode(h.output()))
            })
            .collect()
    }
}

/// BLEU and sequence accuracy as a metadata block.
pub fn score_block(hyps: &[String], refs: &[String], decode: Option<&DecodeSettings>) -> Result<String> {
    let mut s = format!("bleu={}\nseq_acc={}\n", bleu(hyps, refs, 4)?, seq_accuracy(hyps, refs)?);
    if let Some(d) = decode {
        s.push_str(&format!(
            "decode.width={}\ndecode.alpha={}\ndecode.max_len={}\n",
            d.beam.width, d.beam.alpha, d.max_len
        ));
    }
    s.push_str("bleu.tokenization=whitespace\nbleu.max_n=4\nbleu.smoothing=none\n");
    Ok(s)
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}
