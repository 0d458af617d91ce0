//! Greedy and beam-search decoding, corpus BLEU, sequence accuracy and
//! inference timing.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

use crate::error::{invalid, Error, Result};
use crate::model::{DecoderState, EncoderState, FusedModel};
use crate::provider::ProviderOutput;
use crate::tokenizer::WordVocab;

/// Anything that yields next-token log-probabilities for a growing prefix.
pub trait StepModel {
    type State: Clone;

    fn eos(&self) -> usize;

    /// State after the start symbol plus the first next-token distribution.
    fn start(&self) -> Result<(Self::State, Vec<f64>)>;

    /// Extends the prefix by `token` and returns the following distribution.
    fn step(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>>;
}

/// A fused model bound to one encoded source sentence.
pub struct FusedStepper<'a> {
    pub model: &'a FusedModel,
    pub encoder: EncoderState,
    pub provider: Option<&'a ProviderOutput>,
}

impl<'a> FusedStepper<'a> {
    pub fn new(model: &'a FusedModel, src: &[usize], provider: Option<&'a ProviderOutput>) -> Result<Self> {
        let encoder = model.encode(src, provider)?;
        Ok(FusedStepper { model, encoder, provider })
    }
}

impl StepModel for FusedStepper<'_> {
    type State = DecoderState;

    fn eos(&self) -> usize {
        WordVocab::EOS
    }

    fn start(&self) -> Result<(DecoderState, Vec<f64>)> {
        let st = self.model.start_decoding(&self.encoder, self.provider)?;
        let lp = st.last_log_probs().expect("start symbol was fed").to_vec();
        Ok((st, lp))
    }

    fn step(&self, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        self.model.decode_step(state, token)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, including the final EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the closing EOS.
    pub fn output(&self) -> &[usize] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.tokens.len(), alpha)
    }
}

/// `((5 + len) / 6)^α`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub alpha: f64,
    /// Longest output, counting the closing EOS.
    pub max_len: usize,
}

impl BeamConfig {
    pub const DEFAULT: BeamConfig = BeamConfig {
        width: 5,
        alpha: 1.0,
        max_len: 64,
    };
    pub const TRANSLATION: BeamConfig = BeamConfig {
        width: 4,
        alpha: 0.6,
        max_len: 64,
    };

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(BeamConfig::DEFAULT),
            "translation" => Ok(BeamConfig::TRANSLATION),
            other => Err(Error::Config(format!("unknown beam preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("length penalty {} must be a finite non-negative number", self.alpha)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig::DEFAULT
    }
}

/// Higher score first, then shorter, then lexicographically smaller.
fn rank(a: &Hypothesis, b: &Hypothesis, score: impl Fn(&Hypothesis) -> f64) -> Ordering {
    score(b)
        .total_cmp(&score(a))
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn check_distribution(lp: &[f64], eos: usize) -> Result<()> {
    if eos >= lp.len() {
        return Err(invalid(format!("EOS id {eos} outside distribution of size {}", lp.len())));
    }
    if lp.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(invalid("model produced an invalid log-probability"));
    }
    Ok(())
}

/// Argmax decoding, lowest id on ties; the last allowed position may only
/// hold EOS.
pub fn greedy<M: StepModel>(model: &M, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let eos = model.eos();
    let (mut state, mut lp) = model.start()?;
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    for t in 1..=max_len {
        check_distribution(&lp, eos)?;
        let best = if t == max_len {
            Some(eos).filter(|_| lp[eos] > f64::NEG_INFINITY)
        } else {
            lp.iter()
                .enumerate()
                .filter(|(_, l)| **l > f64::NEG_INFINITY)
                .fold(None, |acc: Option<(usize, f64)>, (i, &l)| match acc {
                    Some((_, b)) if b >= l => acc,
                    _ => Some((i, l)),
                })
                .map(|(i, _)| i)
        };
        let Some(tok) = best else { break };
        h.tokens.push(tok);
        h.log_prob += lp[tok];
        if tok == eos {
            h.finished = true;
            break;
        }
        lp = model.step(&mut state, tok)?;
    }
    Ok(h)
}

/// Beam search with a pool of finished hypotheses.
///
/// Each step expands every live hypothesis by every token and keeps the
/// `width` best candidates by cumulative log-probability; those ending in
/// EOS move to the finished pool. At the last allowed position only EOS may
/// be emitted. The result is the finished hypothesis with the highest
/// length-normalised score. If none finished (EOS was never possible), the
/// best unfinished one is returned with `finished == false`.
pub fn beam_search<M: StepModel>(model: &M, config: BeamConfig) -> Result<Hypothesis> {
    config.validate()?;
    let eos = model.eos();
    let (state, lp) = model.start()?;
    let mut alive: Vec<(Hypothesis, M::State, Vec<f64>)> = vec![(
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        state,
        lp,
    )];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut stranded: Vec<Hypothesis> = Vec::new();
    for t in 1..=config.max_len {
        let last = t == config.max_len;
        let mut cands: Vec<(Hypothesis, usize)> = Vec::new();
        for (k, (h, _, lp)) in alive.iter().enumerate() {
            check_distribution(lp, eos)?;
            if last && lp[eos] == f64::NEG_INFINITY {
                stranded.push(h.clone());
            }
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY || (last && tok != eos) {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                cands.push((
                    Hypothesis {
                        tokens,
                        log_prob: h.log_prob + l,
                        finished: tok == eos,
                    },
                    k,
                ));
            }
        }
        if cands.is_empty() {
            stranded.extend(alive.drain(..).map(|(h, _, _)| h));
            break;
        }
        cands.sort_by(|a, b| rank(&a.0, &b.0, |h| h.log_prob));
        cands.truncate(config.width);
        let mut next = Vec::with_capacity(cands.len());
        for (h, k) in cands {
            if h.finished {
                finished.push(h);
            } else {
                let mut state = alive[k].1.clone();
                let lp = model.step(&mut state, *h.tokens.last().expect("non-empty"))?;
                next.push((h, state, lp));
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    stranded.extend(alive.into_iter().map(|(h, _, _)| h));
    let pick = |pool: &mut Vec<Hypothesis>| {
        pool.sort_by(|a, b| rank(a, b, |h| h.score(config.alpha)));
        pool.first().cloned()
    };
    if let Some(best) = pick(&mut finished) {
        return Ok(best);
    }
    pick(&mut stranded).ok_or_else(|| invalid("beam search produced no hypothesis"))
}

/// Exhaustive search over every output of length `1..=max_len`, used as a
/// reference for small vocabularies. Scores outputs exactly as
/// [`beam_search`] ranks its finished pool.
pub fn exhaustive_best<M: StepModel>(model: &M, max_len: usize, alpha: f64) -> Result<Hypothesis> {
    let eos = model.eos();
    let (state, lp) = model.start()?;
    let mut best: Option<Hypothesis> = None;
    let mut stack = vec![(Vec::<usize>::new(), 0.0f64, state, lp)];
    while let Some((prefix, logp, state, lp)) = stack.pop() {
        for (tok, &l) in lp.iter().enumerate() {
            let mut tokens = prefix.clone();
            tokens.push(tok);
            let len = tokens.len();
            if tok == eos {
                let h = Hypothesis {
                    tokens,
                    log_prob: logp + l,
                    finished: true,
                };
                let better = match &best {
                    None => true,
                    Some(b) => rank(&h, b, |x| x.score(alpha)) == Ordering::Less,
                };
                if better {
                    best = Some(h);
                }
            } else if len < max_len {
                let mut s = state.clone();
                let next = model.step(&mut s, tok)?;
                stack.push((tokens, logp + l, s, next));
            }
        }
    }
    best.ok_or_else(|| invalid("no finished output exists"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn score(&self, max_n: usize) -> f64 {
        let mut log_sum = 0.0;
        for n in 0..max_n {
            if self.matches[n] == 0 || self.totals[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        if self.hyp_len == 0 {
            return 0.0;
        }
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * (log_sum / max_n as f64).exp()
    }
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

pub fn bleu_stats(hypotheses: &[String], references: &[String], max_n: usize) -> Result<BleuStats> {
    if hypotheses.is_empty() {
        return Err(invalid("BLEU of an empty corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(invalid(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if !(1..=4).contains(&max_n) {
        return Err(invalid(format!("max n-gram order {max_n} outside 1..=4")));
    }
    let mut s = BleuStats {
        matches: [0; 4],
        totals: [0; 4],
        hyp_len: 0,
        ref_len: 0,
    };
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        s.hyp_len += h.len();
        s.ref_len += r.len();
        for n in 1..=max_n {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            s.totals[n - 1] += h.len().saturating_sub(n - 1);
            s.matches[n - 1] += hc.iter().map(|(g, &c)| c.min(*rc.get(g).unwrap_or(&0))).sum::<usize>();
        }
    }
    Ok(s)
}

/// Corpus BLEU in `[0, 100]`: geometric mean of clipped n-gram precisions
/// up to `max_n`, times the brevity penalty, without smoothing.
pub fn bleu(hypotheses: &[String], references: &[String], max_n: usize) -> Result<f64> {
    Ok(bleu_stats(hypotheses, references, max_n)?.score(max_n))
}

/// Fraction of exact sentence matches after whitespace normalisation.
pub fn seq_accuracy(hypotheses: &[String], references: &[String]) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(invalid("sequence accuracy needs equal, non-empty corpora"));
    }
    let hits = hypotheses
        .iter()
        .zip(references)
        .filter(|(h, r)| h.split_whitespace().eq(r.split_whitespace()))
        .count();
    Ok(hits as f64 / hypotheses.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingReport {
    pub baseline_seconds: f64,
    pub fused_seconds: f64,
    pub ratio: f64,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl TimingReport {
    /// Medians of the measured repetitions after dropping `warmup` leading
    /// runs from each list.
    pub fn from_samples(baseline: &[f64], fused: &[f64], warmup: usize) -> Result<Self> {
        let (b, f) = (baseline.get(warmup..).unwrap_or(&[]), fused.get(warmup..).unwrap_or(&[]));
        if b.is_empty() || f.is_empty() {
            return Err(invalid("no timing repetitions left after warm-up"));
        }
        if b.iter().chain(f).any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(invalid("timings must be positive"));
        }
        let (bs, fs) = (median(b), median(f));
        Ok(TimingReport {
            baseline_seconds: bs,
            fused_seconds: fs,
            ratio: fs / bs - 1.0,
        })
    }

    pub fn to_csv(&self) -> String {
        format!(
            "baseline_seconds,fused_seconds,increase_ratio\n{:.9},{:.9},{:.6}\n",
            self.baseline_seconds, self.fused_seconds, self.ratio
        )
    }
}

impl fmt::Display for TimingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "baseline {:.4}s, fused {:.4}s, increase {:+.1}%",
            self.baseline_seconds,
            self.fused_seconds,
            100.0 * self.ratio
        )
    }
}

/// Wall time of `reps` calls to `run`, one sample per call.
pub fn time_runs(reps: usize, mut run: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run()?;
        out.push(start.elapsed().as_secs_f64());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let c = s(&["a b c d e", "f g h i"]);
        assert!((bleu(&c, &c, 4).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn no_four_gram_overlap_scores_zero() {
        let h = s(&["a b c x e f g"]);
        let r = s(&["a b c d e f g"]);
        assert_eq!(bleu(&h, &r, 4).unwrap(), 0.0);
    }

    #[test]
    fn hand_counted_toy_corpus() {
        // hyp 1 "the cat sat on mat" vs "the cat sat on the mat":
        //   1-gram 5/5, 2-gram 3/4, 3-gram 2/3, 4-gram 1/2
        // hyp 2 "a dog runs fast" vs "a dog runs":
        //   1-gram 3/4, 2-gram 2/3, 3-gram 1/2, 4-gram 0/1
        // totals: 8/9, 5/7, 3/5, 1/3; lengths 9 vs 9
        let h = s(&["the cat sat on mat", "a dog runs fast"]);
        let r = s(&["the cat sat on the mat", "a dog runs"]);
        let st = bleu_stats(&h, &r, 4).unwrap();
        assert_eq!(st.matches, [8, 5, 3, 1]);
        assert_eq!(st.totals, [9, 7, 5, 3]);
        let expected = 100.0 * ((8.0 / 9.0) * (5.0 / 7.0) * (3.0 / 5.0) * (1.0 / 3.0f64)).powf(0.25);
        assert!((st.score(4) - expected).abs() < 1e-9);
    }

    #[test]
    fn brevity_penalty_applies_to_short_output() {
        let h = s(&["a b c d"]);
        let r = s(&["a b c d e f"]);
        let expected = 100.0 * (1.0 - 6.0 / 4.0f64).exp();
        assert!((bleu(&h, &r, 4).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn bleu_rejects_bad_corpora() {
        assert!(bleu(&[], &[], 4).is_err());
        assert!(bleu(&s(&["a"]), &s(&["a", "b"]), 4).is_err());
    }

    #[test]
    fn seq_accuracy_counts_exact_matches() {
        let acc = seq_accuracy(&s(&["a b", "c", "d  e"]), &s(&["a b", "x", "d e"])).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn length_penalty_reference_values() {
        assert_eq!(length_penalty(1, 0.0), 1.0);
        assert_eq!(length_penalty(1, 1.0), 1.0);
        assert!((length_penalty(7, 0.6) - 2f64.powf(0.6)).abs() < 1e-15);
    }

    #[test]
    fn timing_report_medians_and_ratio() {
        let r = TimingReport::from_samples(&[9.0, 1.0, 3.0, 2.0], &[9.0, 3.0, 2.0, 4.0], 1).unwrap();
        assert_eq!(r.baseline_seconds, 2.0);
        assert_eq!(r.fused_seconds, 3.0);
        assert_eq!(r.ratio, 0.5);
        assert!(TimingReport::from_samples(&[1.0], &[1.0], 1).is_err());
        assert!(TimingReport::from_samples(&[0.0], &[1.0], 0).is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(BeamConfig::preset("default").unwrap().width, 5);
        assert_eq!(BeamConfig::preset("default").unwrap().alpha, 1.0);
        assert_eq!(BeamConfig::preset("translation").unwrap().width, 4);
        assert_eq!(BeamConfig::preset("translation").unwrap().alpha, 0.6);
        assert!(BeamConfig::preset("wide").is_err());
    }
}
