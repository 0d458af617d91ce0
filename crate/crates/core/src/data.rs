//! Deterministic synthetic parallel corpora.
//!
//! Words are drawn from a fixed lexicon whose spellings are redundant: every
//! character of a word identifies the whole word given its position. That
//! keeps masked-piece prediction for the context provider well posed while
//! still making the provider's character pieces outnumber the translation
//! model's word tokens.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Copy,
    Reverse,
    Substitute,
    ContextDisambiguation,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Substitute => "substitute",
            TaskKind::ContextDisambiguation => "context_disambiguation",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "copy" => TaskKind::Copy,
            "reverse" => TaskKind::Reverse,
            "substitute" => TaskKind::Substitute,
            "context_disambiguation" => TaskKind::ContextDisambiguation,
            other => return Err(Error::Config(format!("unknown task `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub task: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            task: TaskKind::Copy,
            vocab_size: 64,
            min_len: 3,
            max_len: 12,
            train_size: 10_000,
            valid_size: 1_000,
            test_size: 1_000,
            seed: 1,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "length range {}..={} is empty or inverted",
                self.min_len, self.max_len
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocabulary needs at least 4 words".into()));
        }
        if self.vocab_size > ALPHABET_LEN {
            return Err(Error::Config(format!(
                "at most {ALPHABET_LEN} synthetic words are available"
            )));
        }
        if self.task == TaskKind::ContextDisambiguation && self.vocab_size < CONTEXT_RESERVED + 1 {
            return Err(Error::Config(format!(
                "context disambiguation needs at least {} words",
                CONTEXT_RESERVED + 1
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "task={}\nvocab_size={}\nmin_len={}\nmax_len={}\ntrain_size={}\nvalid_size={}\ntest_size={}\nseed={}\n",
            self.task,
            self.vocab_size,
            self.min_len,
            self.max_len,
            self.train_size,
            self.valid_size,
            self.test_size,
            self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = SyntheticTaskSpec::default();
        for (k, v) in crate::config::parse_kv(text)? {
            spec.set(&k, &v)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Sets one field by its key name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}` expects an integer, got `{v}`")))
        };
        match key {
            "task" => self.task = value.parse()?,
            "vocab_size" => self.vocab_size = num(value)?,
            "min_len" => self.min_len = num(value)?,
            "max_len" => self.max_len = num(value)?,
            "train_size" => self.train_size = num(value)?,
            "valid_size" => self.valid_size = num(value)?,
            "test_size" => self.test_size = num(value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("`seed` expects an integer, got `{value}`")))?
            }
            other => return Err(Error::Config(format!("unknown task key `{other}`"))),
        }
        Ok(())
    }
}

/// Lowercase Latin, uppercase Latin, then lowercase Greek.
fn alphabet() -> Vec<char> {
    ('a'..='z').chain('A'..='Z').chain('\u{3b1}'..='\u{3c9}').collect()
}

pub const ALPHABET_LEN: usize = 26 + 26 + 25;

/// Spelling of lexicon word `k`: three characters, each of which
/// identifies `k` given its position within the word.
pub fn word_form(k: usize) -> String {
    let a = alphabet();
    let n = a.len();
    [a[k % n], a[(5 * k + 11) % n], a[(13 * k + 29) % n]].iter().collect()
}

pub fn lexicon(size: usize) -> Vec<String> {
    (0..size).map(word_form).collect()
}

/// Number of lexicon entries reserved by the disambiguation task.
pub const CONTEXT_RESERVED: usize = 5;

/// The fixed rendering rule of the disambiguation task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuleTable {
    pub markers: [String; 2],
    pub ambiguous: String,
    pub renderings: [String; 2],
}

impl RuleTable {
    pub fn standard() -> Self {
        RuleTable {
            markers: [word_form(0), word_form(1)],
            ambiguous: word_form(2),
            renderings: [word_form(3), word_form(4)],
        }
    }

    /// Target word for the ambiguous token given the preceding sentence.
    pub fn render(&self, prev: &str) -> Option<&str> {
        let words: Vec<&str> = prev.split_whitespace().collect();
        let has = |m: &str| words.contains(&m);
        match (has(&self.markers[0]), has(&self.markers[1])) {
            (true, false) => Some(&self.renderings[0]),
            (false, true) => Some(&self.renderings[1]),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub prev: Option<Vec<String>>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Word positions in each source sentence holding the ambiguous token.
    pub fn ambiguous_positions(&self, rules: &RuleTable) -> Vec<Vec<usize>> {
        self.source
            .iter()
            .map(|s| {
                s.split_whitespace()
                    .enumerate()
                    .filter(|(_, w)| *w == rules.ambiguous)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect()
    }

    pub fn prev_of(&self, i: usize) -> Option<&str> {
        self.prev.as_ref().map(|p| p[i].as_str())
    }

    fn write(&self, dir: &Path, split: &str) -> Result<()> {
        fs::write(dir.join(format!("{split}.src")), lines(&self.source))?;
        fs::write(dir.join(format!("{split}.tgt")), lines(&self.target))?;
        if let Some(prev) = &self.prev {
            fs::write(dir.join(format!("{split}.prev")), lines(prev))?;
        }
        Ok(())
    }

    fn read(dir: &Path, split: &str) -> Result<Self> {
        let read_lines = |ext: &str| -> Result<Vec<String>> {
            let path = dir.join(format!("{split}.{ext}"));
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
            Ok(text.lines().map(str::to_string).collect())
        };
        let source = read_lines("src")?;
        let target = read_lines("tgt")?;
        let prev_path = dir.join(format!("{split}.prev"));
        let prev = if prev_path.exists() {
            Some(read_lines("prev")?)
        } else {
            None
        };
        if source.len() != target.len() || prev.as_ref().is_some_and(|p| p.len() != source.len()) {
            return Err(Error::Data(format!("{split} files have different line counts")));
        }
        Ok(ParallelCorpus { source, target, prev })
    }
}

fn lines(v: &[String]) -> String {
    let mut s = v.join("\n");
    s.push('\n');
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
}

impl Dataset {
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("task.cfg"), self.spec.to_kv())?;
        self.train.write(dir, "train")?;
        self.valid.write(dir, "valid")?;
        self.test.write(dir, "test")?;
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec_text = fs::read_to_string(dir.join("task.cfg"))
            .map_err(|e| Error::Data(format!("cannot read task.cfg in {}: {e}", dir.display())))?;
        Ok(Dataset {
            spec: SyntheticTaskSpec::from_kv(&spec_text)?,
            train: ParallelCorpus::read(dir, "train")?,
            valid: ParallelCorpus::read(dir, "valid")?,
            test: ParallelCorpus::read(dir, "test")?,
        })
    }

    pub fn split(&self, name: &str) -> Result<&ParallelCorpus> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

struct Generator<'a> {
    spec: &'a SyntheticTaskSpec,
    words: Vec<String>,
    substitution: Vec<usize>,
    rules: RuleTable,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn length(&mut self) -> usize {
        self.rng.gen_range(self.spec.min_len..=self.spec.max_len)
    }

    fn filler(&mut self, offset: usize) -> String {
        let k = self.rng.gen_range(offset..self.words.len());
        self.words[k].clone()
    }

    fn pair(&mut self) -> (String, String, Option<String>) {
        match self.spec.task {
            TaskKind::ContextDisambiguation => self.context_pair(),
            task => {
                let n = self.length();
                let ks: Vec<usize> = (0..n).map(|_| self.rng.gen_range(0..self.words.len())).collect();
                let src: Vec<&str> = ks.iter().map(|&k| self.words[k].as_str()).collect();
                let tgt: Vec<&str> = match task {
                    TaskKind::Copy => src.clone(),
                    TaskKind::Reverse => src.iter().rev().copied().collect(),
                    TaskKind::Substitute => ks.iter().map(|&k| self.words[self.substitution[k]].as_str()).collect(),
                    TaskKind::ContextDisambiguation => unreachable!(),
                };
                (src.join(" "), tgt.join(" "), None)
            }
        }
    }

    fn context_pair(&mut self) -> (String, String, Option<String>) {
        let n = self.length();
        let slot = self.rng.gen_range(0..n);
        let mut src: Vec<String> = (0..n).map(|_| self.filler(CONTEXT_RESERVED)).collect();
        src[slot] = self.rules.ambiguous.clone();

        let m = self.length();
        let marker_slot = self.rng.gen_range(0..m);
        let which = self.rng.gen_range(0..2);
        let mut prev: Vec<String> = (0..m).map(|_| self.filler(CONTEXT_RESERVED)).collect();
        prev[marker_slot] = self.rules.markers[which].clone();

        let mut tgt = src.clone();
        tgt[slot] = self.rules.renderings[which].clone();
        (src.join(" "), tgt.join(" "), Some(prev.join(" ")))
    }

    fn corpus(&mut self, size: usize) -> ParallelCorpus {
        let mut c = ParallelCorpus::default();
        let mut prev = Vec::new();
        for _ in 0..size {
            let (s, t, p) = self.pair();
            c.source.push(s);
            c.target.push(t);
            if let Some(p) = p {
                prev.push(p);
            }
        }
        if self.spec.task == TaskKind::ContextDisambiguation {
            c.prev = Some(prev);
        }
        c
    }
}

/// Builds train/valid/test splits. A pure function of `spec`.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut substitution: Vec<usize> = (0..spec.vocab_size).collect();
    substitution.shuffle(&mut rng);
    let mut g = Generator {
        spec,
        words: lexicon(spec.vocab_size),
        substitution,
        rules: RuleTable::standard(),
        rng,
    };
    let train = g.corpus(spec.train_size);
    let valid = g.corpus(spec.valid_size);
    let test = g.corpus(spec.test_size);
    Ok(Dataset {
        spec: spec.clone(),
        train,
        valid,
        test,
    })
}

/// Fraction of ambiguous positions covered by the most frequent rendering.
pub fn majority_rate(corpus: &ParallelCorpus, rules: &RuleTable) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut total = 0;
    for (positions, tgt) in corpus.ambiguous_positions(rules).iter().zip(&corpus.target) {
        let words: Vec<&str> = tgt.split_whitespace().collect();
        for &p in positions {
            *counts.entry(words[p]).or_default() += 1;
            total += 1;
        }
    }
    counts.values().copied().max().unwrap_or(0) as f64 / total.max(1) as f64
}
