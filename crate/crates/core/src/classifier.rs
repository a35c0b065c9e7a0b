//! Speaker classifiers: dataset construction (full and left-to-right), the
//! poly-encoder ranking model and hits@1 evaluation.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use charkeeper_neural::layers::{Dims, TransformerEncoder};
use charkeeper_neural::{Checkpoint, Graph, Mask, ParamId, ParamStore, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{flatten_context, Dialogue, PovContext, Prior};
use crate::error::{CoreError, Result};
use crate::tokenizer::{serialize_context, truncate_left, FieldSet, TokenSeq, Vocabulary, PAD, SEP};

/// One classification example: a serialized context ending in SEP plus the
/// candidate utterance (or a prefix of it).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpaExample {
    pub context: TokenSeq,
    pub label: String,
    pub pool: Vec<String>,
    pub is_partial: bool,
    pub prefix_len: usize,
    /// The two characters of the source dialogue.
    pub participants: [String; 2],
    /// Index of the first candidate token in `context`.
    #[serde(default)]
    pub candidate_start: usize,
    #[serde(default)]
    pub dialogue: usize,
    #[serde(default)]
    pub pov: usize,
    /// Index of the candidate utterance in its dialogue.
    #[serde(default)]
    pub turn: usize,
}

impl RpaExample {
    pub fn candidate(&self) -> &[usize] {
        &self.context[self.candidate_start..]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_prior: Prior,
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_prior: Prior::Count(4),
            pool_size: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub examples: Vec<RpaExample>,
    pub warnings: Vec<String>,
}

/// Every distinct character name, sorted.
pub fn character_catalog(corpus: &[Dialogue]) -> Vec<String> {
    corpus
        .iter()
        .flat_map(|d| d.characters.iter().map(|c| c.name.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// `(history start, history end, candidate)` triples for one POV of a
/// dialogue with `n` utterances.
pub fn rpa_windows(n: usize, n_prior: Prior) -> Vec<(usize, usize, usize)> {
    match n_prior {
        Prior::Count(0) => (0..n).map(|j| (j, j, j)).collect(),
        Prior::All => (n.saturating_sub(2)..n).map(|j| (0, j, j)).collect(),
        Prior::Count(w) => {
            let mut out = Vec::new();
            for i in 0..n.saturating_sub(w) {
                for j in i + w..n {
                    out.push((i, i + w, j));
                }
            }
            out
        }
    }
}

/// Classifier input for scoring a candidate spoken in `ctx`: all fields, the
/// last `n_prior` history utterances and a trailing SEP.
pub fn classifier_context(ctx: &PovContext, vocab: &Vocabulary, n_prior: Prior) -> Vec<usize> {
    let keep = match n_prior {
        Prior::All => ctx.history.len(),
        Prior::Count(n) => n.min(ctx.history.len()),
    };
    let view = PovContext {
        history: ctx.history[ctx.history.len() - keep..].to_vec(),
        ..ctx.clone()
    };
    let mut out = serialize_context(&view, vocab, FieldSet::ALL).into_vec();
    out.push(SEP);
    out
}

pub fn build_rpa_dataset(corpus: &[Dialogue], vocab: &Vocabulary, cfg: &DatasetConfig) -> Result<Dataset> {
    let catalog = character_catalog(corpus);
    build_rpa_dataset_with_catalog(corpus, vocab, cfg, &catalog)
}

/// Builds examples in (dialogue, POV, window, candidate) order. Negatives
/// are drawn from `catalog`.
pub fn build_rpa_dataset_with_catalog(
    corpus: &[Dialogue],
    vocab: &Vocabulary,
    cfg: &DatasetConfig,
    catalog: &[String],
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Dataset::default();
    for (di, d) in corpus.iter().enumerate() {
        if let Prior::Count(w) = cfg.n_prior {
            if w > 0 && w + 1 > d.len() {
                out.warnings.push(format!(
                    "dialogue {di}: {} utterances cannot hold a window of {w} plus a candidate; skipped",
                    d.len()
                ));
                continue;
            }
        }
        let participants = [d.characters[0].name.clone(), d.characters[1].name.clone()];
        for pov in 0..2 {
            for (start, end, j) in rpa_windows(d.len(), cfg.n_prior) {
                let window = Prior::Count(end - start);
                let ctx = flatten_context(d, pov, end, window)?;
                let mut context = serialize_context(&ctx, vocab, FieldSet::ALL).into_vec();
                context.push(SEP);
                let candidate_start = context.len();
                context.extend(vocab.encode(&d.utterances[j].text).iter());
                let label = d.speaker_name(j).to_string();
                let pool = sample_pool(&mut rng, &participants, catalog, cfg.pool_size);
                out.examples.push(RpaExample {
                    prefix_len: context.len() - candidate_start,
                    context: TokenSeq(context),
                    label,
                    pool,
                    is_partial: false,
                    participants: participants.clone(),
                    candidate_start,
                    dialogue: di,
                    pov,
                    turn: j,
                });
            }
        }
    }
    Ok(out)
}

/// Participants plus seeded negatives from `catalog`, shuffled.
fn sample_pool(rng: &mut ChaCha8Rng, participants: &[String; 2], catalog: &[String], size: usize) -> Vec<String> {
    let mut pool: Vec<String> = participants.to_vec();
    let mut others: Vec<&String> = catalog.iter().filter(|c| !participants.contains(c)).collect();
    others.shuffle(rng);
    pool.extend(others.into_iter().take(size.saturating_sub(2)).cloned());
    pool.shuffle(rng);
    pool
}

/// Expands every full example into its non-empty candidate prefixes.
pub fn build_ltr_dataset(full: &[RpaExample]) -> Vec<RpaExample> {
    let mut out = Vec::new();
    for ex in full {
        let w = ex.context.len() - ex.candidate_start;
        for len in 1..=w {
            out.push(RpaExample {
                context: TokenSeq(ex.context[..ex.candidate_start + len].to_vec()),
                is_partial: true,
                prefix_len: len,
                ..ex.clone()
            });
        }
    }
    out
}

/// Replaces every pool by the two participants (in dialogue order).
pub fn with_participant_pools(examples: &[RpaExample]) -> Vec<RpaExample> {
    examples
        .iter()
        .map(|e| RpaExample {
            pool: e.participants.to_vec(),
            ..e.clone()
        })
        .collect()
}

pub fn write_examples(mut w: impl Write, examples: &[RpaExample]) -> Result<()> {
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_examples(r: impl BufRead) -> Result<Vec<RpaExample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: RpaExample = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub dims: Dims,
    pub vocab_size: usize,
    /// Learned context codes.
    pub codes: usize,
    /// Longest context scored; longer inputs are left-truncated.
    pub max_len: usize,
    /// Prior utterances the classifier was trained with.
    pub n_prior: Prior,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn new(vocab_size: usize, dims: Dims) -> Self {
        Self {
            dims,
            vocab_size,
            codes: 4,
            max_len: 128,
            n_prior: Prior::Count(4),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct PolyLayout {
    context: TransformerEncoder,
    candidate: TransformerEncoder,
    codes: ParamId,
    /// Added to every token after the last SEP, i.e. the candidate segment.
    segment: ParamId,
}

/// Per-token context weights, averaged over codes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierAttentionExport {
    pub weights: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ScoredPool {
    pub scores: Vec<f32>,
    pub probs: Vec<f32>,
    pub attention: ClassifierAttentionExport,
    pub truncated: bool,
}

impl ScoredPool {
    /// Index of the best candidate; ties go to the earlier pool entry.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, s) in self.scores.iter().enumerate() {
            if *s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Poly-encoder speaker classifier.
#[derive(Debug, Clone)]
pub struct RpaClassifier<T: Real = f32> {
    pub config: ClassifierConfig,
    pub params: ParamStore<T>,
    pub vocab: Arc<Vocabulary>,
    layout: PolyLayout,
}

impl<T: Real> RpaClassifier<T> {
    pub fn new(config: ClassifierConfig, vocab: Arc<Vocabulary>) -> Result<Self> {
        if config.codes == 0 {
            return Err(CoreError::Config("code count must be at least 1".into()));
        }
        if config.vocab_size != vocab.len() {
            return Err(CoreError::Config(format!(
                "classifier vocabulary size {} does not match vocabulary of {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = config.dims.d_model;
        let embedding = params.add_uniform("embedding", &[config.vocab_size, d], 0.5, &mut rng);
        let context = TransformerEncoder::with_embedding(&mut params, "context", embedding, config.dims, &mut rng);
        let candidate = TransformerEncoder::with_embedding(&mut params, "candidate", embedding, config.dims, &mut rng);
        let codes = params.add_uniform("codes", &[config.codes, d], 0.5, &mut rng);
        let segment = params.add_uniform("segment", &[1, d], 0.5, &mut rng);
        Ok(Self {
            config,
            params,
            vocab,
            layout: PolyLayout {
                context,
                candidate,
                codes,
                segment,
            },
        })
    }

    pub fn cast<U: Real>(&self) -> RpaClassifier<U> {
        RpaClassifier {
            config: self.config.clone(),
            params: self.params.cast(),
            vocab: self.vocab.clone(),
            layout: self.layout.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn clip<'c>(&self, context: &'c [usize]) -> (std::borrow::Cow<'c, [usize]>, bool) {
        if context.is_empty() {
            (vec![PAD].into(), false)
        } else if context.len() > self.config.max_len {
            (truncate_left(context, self.config.max_len).into_vec().into(), true)
        } else {
            (context.into(), false)
        }
    }

    /// Code outputs `[m × d]`; the node also holds the code attention.
    fn encode_context(&self, g: &mut Graph<'_, T>, context: &[usize]) -> Result<Var> {
        if let Some(bad) = context.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(CoreError::Input(format!("token id {bad} outside vocabulary")));
        }
        let start = context.iter().rposition(|&t| t == SEP).map_or(context.len(), |i| i + 1);
        let flags: Vec<T> = (0..context.len()).map(|i| if i >= start { T::one() } else { T::zero() }).collect();
        let x = self.layout.context.embed(g, context)?;
        let flags = g.input(Tensor::new(vec![context.len(), 1], flags)?);
        let seg = g.param(self.layout.segment);
        let seg = g.matmul(flags, seg)?;
        let x = g.add(x, seg)?;
        let states = self.layout.context.forward_embedded(g, x)?;
        let codes = g.param(self.layout.codes);
        Ok(g.attention(codes, states, states, 1, &Mask::None)?)
    }

    fn encode_names(&self, g: &mut Graph<'_, T>, pool: &[String]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for name in pool {
            let mut ids = self.vocab.encode(name).into_vec();
            if ids.is_empty() {
                ids.push(PAD);
            }
            let states = self.layout.candidate.forward(g, &ids)?;
            let v = g.mean_rows(states);
            acc = Some(match acc {
                None => v,
                Some(a) => g.concat_rows(a, v)?,
            });
        }
        acc.ok_or_else(|| CoreError::Input("empty candidate pool".into()))
    }

    /// Scores `[1 × |pool|]`, the code-attention node and the truncation flag.
    pub fn score_graph(&self, g: &mut Graph<'_, T>, context: &[usize], pool: &[String]) -> Result<(Var, Var, bool)> {
        if pool.is_empty() {
            return Err(CoreError::Input("empty candidate pool".into()));
        }
        let names = self.encode_names(g, pool)?;
        self.score_against(g, context, names)
    }

    fn score_against(&self, g: &mut Graph<'_, T>, context: &[usize], names: Var) -> Result<(Var, Var, bool)> {
        let (context, truncated) = self.clip(context);
        let code_out = self.encode_context(g, &context)?;
        let ctx_emb = g.attention(names, code_out, code_out, 1, &Mask::None)?;
        let prod = g.mul(ctx_emb, names)?;
        let ones = g.input(Tensor::filled(&[self.config.dims.d_model, 1], T::one()));
        let scores = g.matmul(prod, ones)?;
        let scores = g.transpose(scores);
        Ok((scores, code_out, truncated))
    }

    /// Cross-entropy of the true label over the pool.
    pub fn loss(&self, g: &mut Graph<'_, T>, ex: &RpaExample) -> Result<Var> {
        let label = ex
            .pool
            .iter()
            .position(|p| *p == ex.label)
            .ok_or_else(|| CoreError::Input(format!("label `{}` not in pool", ex.label)))?;
        let (scores, _, _) = self.score_graph(g, &ex.context, &ex.pool)?;
        Ok(g.nll_sum(scores, &[(0, label)])?)
    }

    pub fn score_candidates(&self, context: &[usize], pool: &[String]) -> Result<ScoredPool> {
        let mut g = Graph::new(&self.params);
        let (scores, attn, truncated) = self.score_graph(&mut g, context, pool)?;
        let scores: Vec<f32> = g.value(scores).data().iter().map(|x| x.as_f32()).collect();
        let mut probs = scores.clone();
        charkeeper_neural::softmax_in_place(&mut probs);
        let attention = self.export(&g, attn, context.len().max(1));
        Ok(ScoredPool {
            scores,
            probs,
            attention,
            truncated,
        })
    }

    /// Code attention over `context`, aligned to its positions (positions
    /// dropped by truncation get weight 0).
    pub fn context_attention(&self, context: &[usize]) -> Result<ClassifierAttentionExport> {
        let mut g = Graph::new(&self.params);
        let (ctx, _) = self.clip(context);
        let attn = self.encode_context(&mut g, &ctx)?;
        Ok(self.export(&g, attn, context.len().max(1)))
    }

    fn export(&self, g: &Graph<'_, T>, attn: Var, len: usize) -> ClassifierAttentionExport {
        let (w, _, m, nk) = g.attention_weights(attn).expect("attention node");
        let mut weights = vec![0f32; len];
        let offset = len - nk;
        for c in 0..m {
            for j in 0..nk {
                weights[offset + j] += w[c * nk + j].as_f32() / m as f32;
            }
        }
        ClassifierAttentionExport { weights }
    }

    /// Probability of each pool entry.
    pub fn probabilities(&self, context: &[usize], pool: &[String]) -> Result<Vec<f32>> {
        Ok(self.score_candidates(context, pool)?.probs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = Checkpoint::from_store(serde_json::to_value(&self.config)?, self.vocab.hash(), &self.params);
        Ok(ckpt.save(path)?)
    }
}

impl RpaClassifier<f32> {
    /// Pooled encodings `[n × d]` of candidate texts, for repeated scoring.
    pub fn candidate_vectors(&self, texts: &[String]) -> Result<Tensor<f32>> {
        let mut g = Graph::new(&self.params);
        let names = self.encode_names(&mut g, texts)?;
        Ok(g.value(names).clone())
    }

    /// Scores against vectors from [`Self::candidate_vectors`].
    pub fn score_encoded(&self, context: &[usize], vectors: &Tensor<f32>) -> Result<Vec<f32>> {
        let mut g = Graph::new(&self.params);
        let names = g.input(vectors.clone());
        let (scores, _, _) = self.score_against(&mut g, context, names)?;
        Ok(g.value(scores).data().to_vec())
    }

    /// Loads a checkpoint, refusing one built for a different vocabulary.
    pub fn load(path: impl AsRef<Path>, vocab: Arc<Vocabulary>) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.vocab_hash != vocab.hash() {
            return Err(CoreError::VocabMismatch {
                expected: vocab.hash(),
                found: ckpt.vocab_hash,
            });
        }
        let config: ClassifierConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut clf = Self::new(config, vocab)?;
        ckpt.load_into(&mut clf.params)?;
        Ok(clf)
    }
}

#[derive(Debug, Clone)]
pub enum PoolMode {
    /// Every name in the given catalog.
    Catalog(Vec<String>),
    Participants,
}

/// Fraction of examples whose label strictly outscores every other pool
/// entry.
pub fn hits_at_1(clf: &RpaClassifier, examples: &[RpaExample], mode: &PoolMode) -> Result<f64> {
    if examples.is_empty() {
        return Err(CoreError::Input("empty evaluation set".into()));
    }
    let mut hits = 0usize;
    for ex in examples {
        let pool: Vec<String> = match mode {
            PoolMode::Catalog(c) => c.clone(),
            PoolMode::Participants => ex.participants.to_vec(),
        };
        let label = pool
            .iter()
            .position(|p| *p == ex.label)
            .ok_or_else(|| CoreError::Input(format!("label `{}` not in pool", ex.label)))?;
        let scored = clf.score_candidates(&ex.context, &pool)?;
        let s = scored.scores[label];
        if scored.scores.iter().enumerate().all(|(i, x)| i == label || *x < s) {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}
