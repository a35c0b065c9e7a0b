//! Inference: beam search with tri-gram blocking and a minimum length,
//! nucleus / top-k / delayed-beam sampling, classifier re-ranking of
//! complete beams, step-wise token re-scoring (partial-only, PACER and the
//! exhaustive FUDGE reference), a retrieval responder and the cost ledger.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use charkeeper_neural::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{classifier_context, RpaClassifier};
use crate::corpus::PovContext;
use crate::error::{CoreError, Result};
use crate::model::{Encoded, GenInput, Seq2Seq};
use crate::tokenizer::{is_reserved, TokenSeq, BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Beam,
    Nucleus,
    Topk,
    DelayedBeam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reranker {
    None,
    Complete,
    PartialOnly,
    Pacer,
    FudgeOracle,
}

/// Which decoding steps re-score tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescoreSchedule {
    /// Steps 1, 1 + s, 1 + 2s, … with s = ⌈1/Freq⌉.
    Stride,
    /// Each step independently with probability Freq (seeded).
    Bernoulli,
}

/// How partial re-scoring feeds into beam selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescoreEffect {
    /// Renormalized FUDGE product added in log space to the beam score.
    LogProduct,
    /// Only the order of the re-scored tokens changes: their LM
    /// log-probabilities are reassigned by classifier-adjusted rank.
    ReorderOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub block_context_trigram: bool,
    pub block_self_trigram: bool,
    pub top_p: f64,
    pub top_k: usize,
    pub delay: usize,
    pub reranker: Reranker,
    pub pacer_toks: usize,
    pub pacer_freq: f64,
    pub schedule: RescoreSchedule,
    pub effect: RescoreEffect,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Beam,
            beam_size: 10,
            min_len: 5,
            max_len: 20,
            block_context_trigram: true,
            block_self_trigram: true,
            top_p: 0.3,
            top_k: 50,
            delay: 10,
            reranker: Reranker::None,
            pacer_toks: 10,
            pacer_freq: 1.0,
            schedule: RescoreSchedule::Stride,
            effect: RescoreEffect::LogProduct,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    /// The paper-scale minimum length.
    pub const PAPER_MIN_LEN: usize = 20;

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(CoreError::Config("beam_size must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(CoreError::Config("top_p must lie in (0, 1]".into()));
        }
        if self.top_k == 0 {
            return Err(CoreError::Config("top_k must be at least 1".into()));
        }
        if matches!(self.reranker, Reranker::PartialOnly | Reranker::Pacer)
            && !(self.pacer_freq > 0.0 && self.pacer_freq <= 1.0)
        {
            return Err(CoreError::Config("pacer_freq must lie in (0, 1]".into()));
        }
        if self.max_len == 0 {
            return Err(CoreError::Config("max_len must be at least 1".into()));
        }
        if self.min_len > self.max_len {
            return Err(CoreError::Config("min_len exceeds max_len".into()));
        }
        Ok(())
    }

    /// Distance between re-scoring steps.
    pub fn stride(&self) -> usize {
        (1.0 / self.pacer_freq).ceil().max(1.0) as usize
    }

    /// Whether step `step` (1-based) re-scores under the stride schedule.
    pub fn is_rescore_step(&self, step: usize) -> bool {
        step >= 1 && (step - 1).is_multiple_of(self.stride())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    /// Generated tokens without BOS; ends with EOS when finished.
    pub tokens: TokenSeq,
    pub lm_logprob: f64,
    pub adjusted_score: f64,
    pub finished: bool,
    /// Classifier probability of the self character, once re-ranked.
    pub p_self: Option<f64>,
    /// Set when decoding stopped because every continuation was blocked.
    pub blocked: bool,
}

impl BeamHypothesis {
    fn root() -> Self {
        Self {
            tokens: TokenSeq::default(),
            lm_logprob: 0.0,
            adjusted_score: 0.0,
            finished: false,
            p_self: None,
            blocked: false,
        }
    }

    /// Tokens without the trailing EOS.
    pub fn text_tokens(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub classifier_calls: usize,
    pub lm_steps: usize,
    /// Live beams at each re-scoring step.
    pub rescore_live: Vec<usize>,
    /// Re-scoring steps where every classifier probability was zero.
    pub fallback_events: usize,
    pub wall_ms: f64,
}

impl CostLedger {
    /// Deterministic cost in LM-step units: every classifier call counts
    /// `classifier_weight` LM steps.
    pub fn cost_units(&self, classifier_weight: f64) -> f64 {
        self.lm_steps as f64 + classifier_weight * self.classifier_calls as f64
    }

    /// Cost relative to a baseline run without re-ranking.
    pub fn relative_cost(&self, baseline: &CostLedger, classifier_weight: f64) -> f64 {
        self.cost_units(classifier_weight) / baseline.cost_units(classifier_weight).max(1.0)
    }

    pub fn absorb(&mut self, other: &CostLedger) {
        self.classifier_calls += other.classifier_calls;
        self.lm_steps += other.lm_steps;
        self.rescore_live.extend_from_slice(&other.rescore_live);
        self.fallback_events += other.fallback_events;
        self.wall_ms += other.wall_ms;
    }
}

/// Probability that a candidate continuation is spoken by the self character.
pub trait SelfScorer {
    fn p_self(&self, candidate: &[usize]) -> Result<f64>;
}

/// Scores candidates for one context with the speaker classifier against the
/// participant pair.
pub struct CharacterJudge<'a> {
    clf: &'a RpaClassifier,
    base: Vec<usize>,
    pool: [String; 2],
}

impl<'a> CharacterJudge<'a> {
    pub fn new(clf: &'a RpaClassifier, ctx: &PovContext) -> Self {
        Self {
            clf,
            base: classifier_context(ctx, &clf.vocab, clf.config.n_prior),
            pool: [ctx.self_name.clone(), ctx.partner_name.clone()],
        }
    }

    pub fn input(&self, candidate: &[usize]) -> Vec<usize> {
        let mut c = self.base.clone();
        c.extend(candidate.iter().copied().filter(|&t| t != EOS));
        c
    }
}

impl SelfScorer for CharacterJudge<'_> {
    fn p_self(&self, candidate: &[usize]) -> Result<f64> {
        Ok(self.clf.probabilities(&self.input(candidate), &self.pool)?[0] as f64)
    }
}

/// Everything a decode needs about its context.
pub struct DecodeContext<'a> {
    pub model: &'a Seq2Seq,
    pub encoded: Encoded<f32>,
    /// Tri-grams of the visible context.
    pub context_trigrams: HashSet<[usize; 3]>,
}

impl<'a> DecodeContext<'a> {
    pub fn new(model: &'a Seq2Seq, input: &GenInput) -> Result<Self> {
        Ok(Self {
            model,
            encoded: model.prepare(input)?,
            context_trigrams: trigrams(&input.context),
        })
    }

    fn step(&self, tokens: &[usize], ledger: &mut CostLedger) -> Result<Vec<f64>> {
        let mut prefix = Vec::with_capacity(tokens.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(tokens);
        ledger.lm_steps += 1;
        Ok(self
            .model
            .decode_step(&self.encoded, &prefix)?
            .into_iter()
            .map(|x| x as f64)
            .collect())
    }
}

pub fn trigrams(seq: &[usize]) -> HashSet<[usize; 3]> {
    seq.windows(3).map(|w| [w[0], w[1], w[2]]).collect()
}

/// Sets disallowed continuations of `tokens` to −∞: every reserved token
/// except EOS, EOS before `min_len`, and tri-gram repeats.
pub fn apply_constraints(logp: &mut [f64], tokens: &[usize], cfg: &DecodeConfig, context: &HashSet<[usize; 3]>) {
    for (t, lp) in logp.iter_mut().enumerate() {
        if is_reserved(t) && t != EOS {
            *lp = f64::NEG_INFINITY;
        }
    }
    if tokens.len() < cfg.min_len {
        logp[EOS] = f64::NEG_INFINITY;
    }
    if tokens.len() >= 2 && (cfg.block_self_trigram || cfg.block_context_trigram) {
        let (a, b) = (tokens[tokens.len() - 2], tokens[tokens.len() - 1]);
        let own = if cfg.block_self_trigram { trigrams(tokens) } else { HashSet::new() };
        for (t, lp) in logp.iter_mut().enumerate() {
            if t == EOS {
                continue;
            }
            let tri = [a, b, t];
            if own.contains(&tri) || (cfg.block_context_trigram && context.contains(&tri)) {
                *lp = f64::NEG_INFINITY;
            }
        }
    }
}

/// Renormalized FUDGE product over `set`: p'(t) = M·p(t)·c(t) / Σ p·c with
/// M the LM mass of the set. Tokens outside the set keep their value.
/// Returns `true` when every product was zero and the LM values were kept.
pub fn fudge_adjust(logp: &mut [f64], set: &[usize], clf: &[f64]) -> bool {
    let p: Vec<f64> = set.iter().map(|&t| logp[t].exp()).collect();
    let mass: f64 = p.iter().sum();
    let z: f64 = p.iter().zip(clf).map(|(a, b)| a * b).sum();
    if !(z > 0.0) {
        return true;
    }
    for ((&t, pi), ci) in set.iter().zip(&p).zip(clf) {
        logp[t] = (mass * pi * ci / z).ln();
    }
    false
}

/// Re-scores `set` after `prefix` with the classifier; counts one call per
/// token of the set.
pub fn fudge_rescore_step(
    logp: &[f64],
    scorer: &dyn SelfScorer,
    prefix: &[usize],
    set: &[usize],
    ledger: &mut CostLedger,
) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(CoreError::Input("empty re-scoring set".into()));
    }
    let mut cand = prefix.to_vec();
    let mut clf = Vec::with_capacity(set.len());
    for &t in set {
        cand.push(t);
        clf.push(scorer.p_self(&cand)?);
        cand.pop();
    }
    ledger.classifier_calls += set.len();
    let mut out = logp.to_vec();
    if fudge_adjust(&mut out, set, &clf) {
        ledger.fallback_events += 1;
    }
    Ok(out)
}

/// The `n` highest entries of `logp`, ties to the lower id.
pub fn top_tokens(logp: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logp.len()).collect();
    idx.sort_by(|&a, &b| logp[b].partial_cmp(&logp[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(n.min(logp.len()));
    idx
}

struct Rescoring<'s> {
    scorer: &'s dyn SelfScorer,
    toks: usize,
    steps: Box<dyn FnMut(usize) -> bool + 's>,
    effect: RescoreEffect,
}

/// Beam search from `start`, optionally re-scoring tokens at some steps.
fn beam_core(
    dc: &DecodeContext<'_>,
    cfg: &DecodeConfig,
    start: BeamHypothesis,
    mut rescoring: Option<Rescoring<'_>>,
    ledger: &mut CostLedger,
) -> Result<Vec<BeamHypothesis>> {
    let mut live = vec![start];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    let first_step = live[0].tokens.len() + 1;
    for step in first_step..=cfg.max_len {
        let rescore_now = rescoring.as_mut().is_some_and(|r| (r.steps)(step));
        if rescore_now {
            ledger.rescore_live.push(live.len());
        }
        let mut cands: Vec<(f64, f64, usize, usize)> = Vec::new();
        for (bi, b) in live.iter().enumerate() {
            let mut logp = dc.step(&b.tokens, ledger)?;
            apply_constraints(&mut logp, &b.tokens, cfg, &dc.context_trigrams);
            let mut adj = logp.clone();
            if rescore_now {
                let r = rescoring.as_ref().unwrap();
                let set = top_tokens(&logp, r.toks);
                let fudged = fudge_rescore_step(&logp, r.scorer, &b.tokens, &set, ledger)?;
                match r.effect {
                    RescoreEffect::LogProduct => adj = fudged,
                    RescoreEffect::ReorderOnly => {
                        let mut by_adj = set.clone();
                        by_adj.sort_by(|&x, &y| {
                            fudged[y].partial_cmp(&fudged[x]).unwrap_or(std::cmp::Ordering::Equal).then(x.cmp(&y))
                        });
                        for (slot, &t) in by_adj.iter().enumerate() {
                            adj[t] = logp[set[slot]];
                        }
                    }
                }
            }
            for t in 0..logp.len() {
                if adj[t].is_finite() && logp[t].is_finite() {
                    cands.push((b.adjusted_score + adj[t], b.lm_logprob + logp[t], bi, t));
                }
            }
        }
        if cands.is_empty() {
            for b in &mut live {
                b.blocked = true;
            }
            finished.extend(live);
            live = Vec::new();
            break;
        }
        cands.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(x.2.cmp(&y.2))
                .then(x.3.cmp(&y.3))
        });
        cands.truncate(cfg.beam_size);
        let mut next = Vec::with_capacity(cands.len());
        for (adj, lm, bi, t) in cands {
            let mut tokens = live[bi].tokens.clone();
            tokens.0.push(t);
            let h = BeamHypothesis {
                tokens,
                lm_logprob: lm,
                adjusted_score: adj,
                finished: t == EOS,
                p_self: None,
                blocked: false,
            };
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= cfg.beam_size {
            break;
        }
    }
    if finished.is_empty() {
        finished = live;
    }
    Ok(finished)
}

fn sort_by_lm(h: &mut [BeamHypothesis]) {
    h.sort_by(|a, b| b.lm_logprob.partial_cmp(&a.lm_logprob).unwrap_or(std::cmp::Ordering::Equal));
}

fn sort_by_adjusted(h: &mut [BeamHypothesis]) {
    h.sort_by(|a, b| {
        b.adjusted_score
            .partial_cmp(&a.adjusted_score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.lm_logprob.partial_cmp(&a.lm_logprob).unwrap_or(std::cmp::Ordering::Equal))
    });
}

/// Plain beam search; hypotheses sorted by LM log-probability.
pub fn beam_search(dc: &DecodeContext<'_>, cfg: &DecodeConfig) -> Result<(Vec<BeamHypothesis>, CostLedger)> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mut ledger = CostLedger::default();
    let mut out = beam_core(dc, cfg, BeamHypothesis::root(), None, &mut ledger)?;
    sort_by_lm(&mut out);
    ledger.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok((out, ledger))
}

/// Greedy generation without the EOS, used for unlikelihood candidates.
pub fn greedy_decode(model: &Seq2Seq, input: &GenInput, max_len: usize) -> Result<Vec<usize>> {
    let dc = DecodeContext::new(model, input)?;
    let cfg = DecodeConfig {
        beam_size: 1,
        min_len: 1,
        max_len,
        ..DecodeConfig::default()
    };
    let (hyps, _) = beam_search(&dc, &cfg)?;
    Ok(hyps[0].text_tokens().to_vec())
}

/// Samples from `probs` restricted to `kept` (in order) by inverse CDF.
fn sample_from(probs: &[f64], kept: &[usize], u: f64) -> usize {
    let mass: f64 = kept.iter().map(|&t| probs[t]).sum();
    let threshold = u * mass;
    let mut acc = 0.0;
    for &t in kept {
        acc += probs[t];
        if threshold < acc {
            return t;
        }
    }
    *kept.last().unwrap()
}

/// Candidate tokens a sampler may draw, in descending probability order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleRule {
    Full,
    Nucleus(f64),
    TopK(usize),
}

/// Draws one token after applying `rule` to constrained log-probabilities.
pub fn sample_token(logp: &[f64], rule: SampleRule, u: f64) -> usize {
    let mx = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = logp.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = probs.iter().sum();
    let probs: Vec<f64> = probs.iter().map(|p| p / z).collect();
    let mut order: Vec<usize> = (0..probs.len()).filter(|&t| probs[t] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let kept: &[usize] = match rule {
        SampleRule::Full => &order,
        SampleRule::TopK(k) => &order[..k.min(order.len())],
        SampleRule::Nucleus(p) => {
            let mut acc = 0.0;
            let mut n = order.len();
            for (i, &t) in order.iter().enumerate() {
                acc += probs[t];
                if acc >= p {
                    n = i + 1;
                    break;
                }
            }
            &order[..n]
        }
    };
    sample_from(&probs, kept, u)
}

fn sample_steps(
    dc: &DecodeContext<'_>,
    cfg: &DecodeConfig,
    rule: SampleRule,
    steps: usize,
    rng: &mut ChaCha8Rng,
    ledger: &mut CostLedger,
) -> Result<BeamHypothesis> {
    let mut h = BeamHypothesis::root();
    while h.tokens.len() < steps && !h.finished {
        let mut logp = dc.step(&h.tokens, ledger)?;
        apply_constraints(&mut logp, &h.tokens, cfg, &dc.context_trigrams);
        if logp.iter().all(|l| !l.is_finite()) {
            h.blocked = true;
            break;
        }
        let t = sample_token(&logp, rule, rng.gen::<f64>());
        h.lm_logprob += logp[t];
        h.adjusted_score += logp[t];
        h.tokens.0.push(t);
        h.finished = t == EOS;
    }
    Ok(h)
}

/// Nucleus, top-k or delayed-beam decoding of one hypothesis.
pub fn sample_decode(dc: &DecodeContext<'_>, cfg: &DecodeConfig) -> Result<(BeamHypothesis, CostLedger)> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ledger = CostLedger::default();
    let out = match cfg.strategy {
        Strategy::Nucleus => sample_steps(dc, cfg, SampleRule::Nucleus(cfg.top_p), cfg.max_len, &mut rng, &mut ledger)?,
        Strategy::Topk => sample_steps(dc, cfg, SampleRule::TopK(cfg.top_k), cfg.max_len, &mut rng, &mut ledger)?,
        Strategy::DelayedBeam => {
            let prefix = sample_steps(dc, cfg, SampleRule::TopK(cfg.top_k), cfg.delay.min(cfg.max_len), &mut rng, &mut ledger)?;
            if prefix.finished || prefix.blocked {
                prefix
            } else {
                let mut beams = beam_core(dc, cfg, prefix, None, &mut ledger)?;
                sort_by_lm(&mut beams);
                beams.swap_remove(0)
            }
        }
        Strategy::Beam => {
            return Err(CoreError::Config("sample_decode needs a sampling strategy".into()));
        }
    };
    ledger.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok((out, ledger))
}

/// Stable sort by descending classifier self-probability, LM log-probability
/// as tiebreak. Token content is untouched.
pub fn rerank_complete(
    mut hyps: Vec<BeamHypothesis>,
    scorer: &dyn SelfScorer,
    ledger: &mut CostLedger,
) -> Result<Vec<BeamHypothesis>> {
    for h in &mut hyps {
        h.p_self = Some(scorer.p_self(h.text_tokens())?);
    }
    ledger.classifier_calls += hyps.len();
    hyps.sort_by(|a, b| {
        b.p_self
            .partial_cmp(&a.p_self)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.lm_logprob.partial_cmp(&a.lm_logprob).unwrap_or(std::cmp::Ordering::Equal))
    });
    Ok(hyps)
}

fn partial_rescoring<'s>(cfg: &DecodeConfig, scorer: &'s dyn SelfScorer, vocab: usize) -> Rescoring<'s> {
    let toks = cfg.pacer_toks.min(vocab);
    let steps: Box<dyn FnMut(usize) -> bool + 's> = match cfg.schedule {
        RescoreSchedule::Stride => {
            let c = cfg.clone();
            Box::new(move |s| c.is_rescore_step(s))
        }
        RescoreSchedule::Bernoulli => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let f = cfg.pacer_freq;
            Box::new(move |_| rng.gen_bool(f))
        }
    };
    Rescoring {
        scorer,
        toks,
        steps,
        effect: cfg.effect,
    }
}

/// Beam search with token re-scoring at the scheduled steps, without a
/// final re-ranking; hypotheses sorted by adjusted score.
pub fn partial_only_decode(
    dc: &DecodeContext<'_>,
    scorer: &dyn SelfScorer,
    cfg: &DecodeConfig,
) -> Result<(Vec<BeamHypothesis>, CostLedger)> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mut ledger = CostLedger::default();
    let r = partial_rescoring(cfg, scorer, dc.model.config.vocab_size);
    let mut out = beam_core(dc, cfg, BeamHypothesis::root(), Some(r), &mut ledger)?;
    sort_by_adjusted(&mut out);
    ledger.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok((out, ledger))
}

/// Partial re-scoring followed by complete re-ranking of the final beams.
pub fn pacer_decode(
    dc: &DecodeContext<'_>,
    scorer: &dyn SelfScorer,
    cfg: &DecodeConfig,
) -> Result<(Vec<BeamHypothesis>, CostLedger)> {
    let t0 = Instant::now();
    let (hyps, mut ledger) = partial_only_decode(dc, scorer, cfg)?;
    let out = rerank_complete(hyps, scorer, &mut ledger)?;
    ledger.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok((out, ledger))
}

/// Re-scoring of every allowed token at every step.
pub fn fudge_oracle_decode(
    dc: &DecodeContext<'_>,
    scorer: &dyn SelfScorer,
    cfg: &DecodeConfig,
) -> Result<(Vec<BeamHypothesis>, CostLedger)> {
    let cfg = DecodeConfig {
        pacer_freq: 1.0,
        pacer_toks: dc.model.config.vocab_size,
        schedule: RescoreSchedule::Stride,
        effect: RescoreEffect::LogProduct,
        ..cfg.clone()
    };
    partial_only_decode(dc, scorer, &cfg)
}

/// Runs the configured strategy and re-ranker.
pub fn decode(
    dc: &DecodeContext<'_>,
    scorer: Option<&dyn SelfScorer>,
    cfg: &DecodeConfig,
) -> Result<(Vec<BeamHypothesis>, CostLedger)> {
    let need = || scorer.ok_or_else(|| CoreError::Config("this re-ranker needs a classifier".into()));
    let t0 = Instant::now();
    let (hyps, mut ledger) = match cfg.strategy {
        Strategy::Beam => match cfg.reranker {
            Reranker::None | Reranker::Complete => beam_search(dc, cfg)?,
            Reranker::PartialOnly => partial_only_decode(dc, need()?, cfg)?,
            Reranker::Pacer => return pacer_decode(dc, need()?, cfg),
            Reranker::FudgeOracle => fudge_oracle_decode(dc, need()?, cfg)?,
        },
        _ => {
            if matches!(cfg.reranker, Reranker::PartialOnly | Reranker::Pacer | Reranker::FudgeOracle) {
                return Err(CoreError::Config("token re-scoring needs beam search".into()));
            }
            let (h, l) = sample_decode(dc, cfg)?;
            (vec![h], l)
        }
    };
    let hyps = if cfg.reranker == Reranker::Complete {
        rerank_complete(hyps, need()?, &mut ledger)?
    } else {
        hyps
    };
    ledger.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok((hyps, ledger))
}

/// One row of the cost report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub context_id: usize,
    pub lm_steps: usize,
    pub classifier_calls: usize,
    pub wall_ms: f64,
    pub relative_cost: f64,
}

pub fn write_cost_csv(mut w: impl Write, rows: &[CostRow]) -> Result<()> {
    writeln!(w, "context_id,lm_steps,classifier_calls,wall_ms,relative_cost")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.3},{:.6}",
            r.context_id, r.lm_steps, r.classifier_calls, r.wall_ms, r.relative_cost
        )?;
    }
    Ok(())
}

pub fn save_cost_csv(path: impl AsRef<Path>, rows: &[CostRow]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_cost_csv(std::io::BufWriter::new(f), rows)
}

/// An utterance available to the retrieval responder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankEntry {
    pub text: String,
    pub tokens: TokenSeq,
    /// Name of the character who originally said it.
    pub speaker: String,
}

/// A bank with cached candidate encodings.
pub struct ResponseBank {
    pub entries: Vec<BankEntry>,
    vectors: Tensor<f32>,
}

impl ResponseBank {
    pub fn new(ranker: &RpaClassifier, entries: Vec<BankEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(CoreError::Input("empty utterance bank".into()));
        }
        let texts: Vec<String> = entries.iter().map(|e| e.text.clone()).collect();
        let vectors = ranker.candidate_vectors(&texts)?;
        Ok(Self { entries, vectors })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub index: usize,
    pub text: String,
    /// The chosen utterance was originally spoken by the partner's character.
    pub partner_said: bool,
}

/// Ranks the bank for a context and returns the best utterance; with a
/// judge, the top `k` are re-ordered by self-probability first.
pub fn retrieval_respond(
    ranker: &RpaClassifier,
    bank: &ResponseBank,
    ctx: &PovContext,
    rerank: Option<(&dyn SelfScorer, usize)>,
) -> Result<Retrieved> {
    let context = classifier_context(ctx, &ranker.vocab, ranker.config.n_prior);
    let scores = ranker.score_encoded(&context, &bank.vectors)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut best = order[0];
    if let Some((judge, k)) = rerank {
        let mut top_p = f64::NEG_INFINITY;
        for &i in order.iter().take(k.max(1)) {
            let p = judge.p_self(&bank.entries[i].tokens)?;
            if p > top_p {
                top_p = p;
                best = i;
            }
        }
    }
    let e = &bank.entries[best];
    Ok(Retrieved {
        index: best,
        text: e.text.clone(),
        partner_said: e.speaker == ctx.partner_name,
    })
}
