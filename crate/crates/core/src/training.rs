//! Training loops: generator likelihood, unlikelihood against
//! classifier-flagged tokens, the two-stage character head and classifier
//! training.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use charkeeper_neural::{AdamW, AdamWConfig, Gradients, Graph, ParamId, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{classifier_context, RpaClassifier, RpaExample};
use crate::corpus::{flatten_context, Dialogue, PovContext, Prior};
use crate::decoding::greedy_decode;
use crate::error::{CoreError, Result};
use crate::model::{build_gen_input, GenInput, Seq2Seq};
use crate::tokenizer::{TokenSeq, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UlMode {
    Top1,
    All,
    Random3,
}

impl std::str::FromStr for UlMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(UlMode::Top1),
            "all" => Ok(UlMode::All),
            "random3" => Ok(UlMode::Random3),
            _ => Err(CoreError::Config(format!("unknown UL mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Chance that an example of a batch also gets an unlikelihood term.
    pub ul_probability: f64,
    pub ul_mode: UlMode,
    pub ul_weight: f64,
    /// Weight of the character objective in stage 2.
    pub mo_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            max_steps: 500,
            seed: 0,
            ul_probability: 0.25,
            ul_mode: UlMode::Top1,
            ul_weight: 0.5,
            mo_loss_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ul_probability) {
            return Err(CoreError::Config("ul_probability must lie in [0, 1]".into()));
        }
        if self.mo_loss_weight < 0.0 {
            return Err(CoreError::Config("mo_loss_weight must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One generator training pair with the view it was built from.
#[derive(Debug, Clone)]
pub struct GenExample {
    pub input: GenInput,
    pub target: TokenSeq,
    pub ctx: PovContext,
    pub dialogue: usize,
    pub turn: usize,
}

/// Every utterance becomes a target for its speaker, with all earlier
/// utterances as history.
pub fn build_gen_examples(
    corpus: &[Dialogue],
    vocab: &Vocabulary,
    model: &Seq2Seq,
    classifier: Option<&RpaClassifier>,
) -> Result<Vec<GenExample>> {
    let mut out = Vec::new();
    for (di, d) in corpus.iter().enumerate() {
        for (j, u) in d.utterances.iter().enumerate() {
            let ctx = flatten_context(d, u.speaker, j, Prior::All)?;
            let (input, _) = build_gen_input(&model.config, &ctx, vocab, classifier)?;
            out.push(GenExample {
                input,
                target: vocab.encode(&u.text),
                ctx,
                dialogue: di,
                turn: j,
            });
        }
    }
    Ok(out)
}

/// Mean token NLL over a batch (teacher forcing) and its gradients.
pub fn nll_step(model: &Seq2Seq, batch: &[&GenExample]) -> Result<(f64, Gradients<f32>)> {
    if batch.is_empty() {
        return Err(CoreError::Input("empty batch".into()));
    }
    let mut g = Graph::new(&model.params);
    let (loss, _) = batch_nll(model, &mut g, batch)?;
    let value = g.value(loss).scalar() as f64;
    Ok((value, g.backward(loss)?))
}

fn batch_nll(model: &Seq2Seq, g: &mut Graph<'_, f32>, batch: &[&GenExample]) -> Result<(Var, usize)> {
    let mut total: Option<Var> = None;
    let mut tokens = 0;
    for ex in batch {
        let (l, n) = model.nll(g, &ex.input, &ex.target)?;
        tokens += n;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let mean = g.scale(total.unwrap(), 1.0 / tokens as f32);
    Ok((mean, tokens))
}

/// Flagged positions of one generation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UlFlagSet {
    /// Indices into the generation (token `t` completes prefix `t + 1`).
    pub positions: Vec<usize>,
    /// Wrong-character probability of each flagged prefix.
    pub p_wrong: Vec<f32>,
}

impl UlFlagSet {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Scores every prefix of a generation with the left-to-right classifier
/// against the participant pair and picks tokens to push down. Nothing is
/// flagged when the whole generation reads as the self character.
pub fn ul_flag_tokens(
    clf: &RpaClassifier,
    ctx: &PovContext,
    generation: &[usize],
    mode: UlMode,
    rng: &mut impl Rng,
) -> Result<UlFlagSet> {
    if generation.is_empty() {
        return Ok(UlFlagSet::default());
    }
    let pool = [ctx.self_name.clone(), ctx.partner_name.clone()];
    let base = classifier_context(ctx, &clf.vocab, clf.config.n_prior);
    let score = |len: usize| -> Result<f32> {
        let mut c = base.clone();
        c.extend_from_slice(&generation[..len]);
        Ok(clf.probabilities(&c, &pool)?[1])
    };
    let full = score(generation.len())?;
    if full <= 0.5 {
        return Ok(UlFlagSet::default());
    }
    let p_wrong: Vec<f32> = (1..=generation.len()).map(score).collect::<Result<_>>()?;
    let wrong: Vec<usize> = (0..p_wrong.len()).filter(|&t| p_wrong[t] > 0.5).collect();
    let positions = match mode {
        UlMode::Top1 => {
            let mut best = 0;
            for t in 1..p_wrong.len() {
                if p_wrong[t] > p_wrong[best] {
                    best = t;
                }
            }
            vec![best]
        }
        UlMode::All => wrong,
        UlMode::Random3 => {
            let mut pick: Vec<usize> = wrong.choose_multiple(rng, 3.min(wrong.len())).copied().collect();
            pick.sort_unstable();
            pick
        }
    };
    Ok(UlFlagSet {
        p_wrong: positions.iter().map(|&t| p_wrong[t]).collect(),
        positions,
    })
}

/// Σ −log(1 − p(y_t)) over the flagged positions of a generation.
pub fn ul_loss<T: charkeeper_neural::Real>(
    model: &Seq2Seq<T>,
    g: &mut Graph<'_, T>,
    input: &GenInput,
    generation: &[usize],
    flags: &UlFlagSet,
) -> Result<Var> {
    if flags.is_empty() {
        return Err(CoreError::Input("no flagged tokens".into()));
    }
    let (_, pass) = model.forward_teacher(g, input, generation)?;
    let targets: Vec<(usize, usize)> = flags.positions.iter().map(|&t| (t, generation[t])).collect();
    Ok(g.unlikelihood_sum(pass.logits, &targets)?)
}

/// Teacher-forced probability of `generation[t]` for each `t` in `positions`.
pub fn token_probabilities(model: &Seq2Seq, input: &GenInput, generation: &[usize], positions: &[usize]) -> Result<Vec<f64>> {
    let mut g = Graph::new(&model.params);
    let (_, pass) = model.forward_teacher(&mut g, input, generation)?;
    let logits = g.value(pass.logits);
    Ok(positions
        .iter()
        .map(|&t| {
            let lp = charkeeper_neural::log_softmax(logits.row(t));
            (lp[generation[t]] as f64).exp()
        })
        .collect())
}

/// A single plain gradient step on the unlikelihood term alone; returns the
/// term before the step.
pub fn ul_sgd_step(model: &mut Seq2Seq, input: &GenInput, generation: &[usize], flags: &UlFlagSet, lr: f32) -> Result<f64> {
    let mut g = Graph::new(&model.params);
    let term = ul_loss(model, &mut g, input, generation, flags)?;
    let value = g.value(term).scalar() as f64;
    let grads = g.backward(term)?;
    drop(g);
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        if let Some(d) = grads.get(id) {
            let d = d.data().to_vec();
            for (w, dw) in model.params.value_mut(id).data_mut().iter_mut().zip(d) {
                *w -= lr * dw;
            }
        }
    }
    Ok(value)
}

/// One CSV row of a training log.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub nll: f64,
    pub ul: f64,
    pub character: f64,
    pub total: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub ul_generations: usize,
    pub ul_flagged: usize,
    pub clamp_events: usize,
}

impl TrainLog {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "step,nll,ul,character,total,wall_ms")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{}", r.step, r.nll, r.ul, r.character, r.total, r.wall_ms)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Seeded epoch-shuffled batches of indices.
pub struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, cursor: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Unlikelihood inputs: the left-to-right classifier used to flag tokens.
pub struct UlSetup<'c> {
    pub classifier: &'c RpaClassifier,
}

/// Generator training with maximum likelihood and, when `ul` is given,
/// unlikelihood on greedy generations the classifier attributes to the
/// partner.
pub fn train_generator(
    model: &mut Seq2Seq,
    examples: &[GenExample],
    cfg: &TrainConfig,
    ul: Option<UlSetup<'_>>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(CoreError::Input("no training examples".into()));
    }
    let mut opt = AdamW::new(cfg.adamw(), &model.params);
    let mut batcher = Batcher::new(examples.len(), cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ u64::MAX);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for step in 0..cfg.max_steps {
        let batch: Vec<&GenExample> = batcher.next_batch(cfg.batch_size).into_iter().map(|i| &examples[i]).collect();
        let mut ul_cases = Vec::new();
        if let Some(setup) = &ul {
            for ex in &batch {
                if rng.gen_bool(cfg.ul_probability) {
                    let gen = greedy_decode(model, &ex.input, ex.target.len() + 4)?;
                    log.ul_generations += 1;
                    let flags = ul_flag_tokens(setup.classifier, &ex.ctx, &gen, cfg.ul_mode, &mut rng)?;
                    if !flags.is_empty() {
                        log.ul_flagged += flags.positions.len();
                        ul_cases.push((*ex, gen, flags));
                    }
                }
            }
        }
        let mut g = Graph::new(&model.params);
        let (nll, _) = batch_nll(model, &mut g, &batch)?;
        let mut total = nll;
        let mut ul_value = 0.0;
        for (ex, gen, flags) in &ul_cases {
            let term = ul_loss(model, &mut g, &ex.input, gen, flags)?;
            ul_value += g.value(term).scalar() as f64;
            let weighted = g.scale(term, cfg.ul_weight as f32);
            total = g.add(total, weighted)?;
        }
        log.clamp_events += g.clamp_events();
        let nll_value = g.value(nll).scalar() as f64;
        let total_value = g.value(total).scalar() as f64;
        let grads = g.backward(total)?;
        drop(g);
        model.params.zero_grad();
        model.params.accumulate(&grads);
        opt.step(&mut model.params, None)?;
        log.rows.push(LogRow {
            step,
            nll: nll_value,
            ul: ul_value,
            character: 0.0,
            total: total_value,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    Ok(log)
}

/// Example for the character head: a gold response, a pool of encoded names
/// and the index of the self name in it.
#[derive(Debug, Clone)]
pub struct CharacterExample {
    pub gen: GenExample,
    pub pool: Vec<TokenSeq>,
    pub label: usize,
}

/// Pools of `pool_size` names (self, partner and seeded fill from
/// `catalog`) for each generator example.
pub fn build_character_examples(
    examples: &[GenExample],
    vocab: &Vocabulary,
    catalog: &[String],
    pool_size: usize,
    seed: u64,
) -> Vec<CharacterExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples
        .iter()
        .map(|ex| {
            let mut names = vec![ex.ctx.self_name.clone(), ex.ctx.partner_name.clone()];
            let mut rest: Vec<&String> = catalog.iter().filter(|c| !names.contains(c)).collect();
            rest.shuffle(&mut rng);
            names.extend(rest.into_iter().take(pool_size.saturating_sub(2)).cloned());
            names.shuffle(&mut rng);
            let label = names.iter().position(|n| *n == ex.ctx.self_name).unwrap();
            CharacterExample {
                gen: ex.clone(),
                pool: names.iter().map(|n| vocab.encode(n)).collect(),
                label,
            }
        })
        .collect()
}

/// Cross-entropy of the character head on one example.
pub fn character_loss<T: charkeeper_neural::Real>(
    model: &Seq2Seq<T>,
    g: &mut Graph<'_, T>,
    ex: &CharacterExample,
) -> Result<(Var, Var)> {
    let (enc, pass) = model.forward_teacher(g, &ex.gen.input, &ex.gen.target)?;
    let scores = model.mo_character_score(g, enc, pass.states, &ex.pool)?;
    Ok((g.nll_sum(scores, &[(0, ex.label)])?, scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoStage {
    /// Only the head, only the character objective.
    HeadOnly,
    /// Everything, likelihood plus weighted character objective.
    Joint,
}

/// Staged training of the character head. Stage 2 refuses to run unless
/// stage 1 completed on this model, or `force` is set.
pub fn mo_staged_train(
    model: &mut Seq2Seq,
    examples: &[CharacterExample],
    stage: MoStage,
    cfg: &TrainConfig,
    force: bool,
) -> Result<TrainLog> {
    cfg.validate()?;
    if model.config.mo.is_none() {
        return Err(CoreError::Config("model has no character head".into()));
    }
    if stage == MoStage::Joint && !model.config.mo_stage1_done && !force {
        return Err(CoreError::Config("stage 2 needs a stage-1 trained model".into()));
    }
    if examples.is_empty() {
        return Err(CoreError::Input("no training examples".into()));
    }
    let trainable: Option<Vec<ParamId>> = match stage {
        MoStage::HeadOnly => Some(model.mo_params()),
        MoStage::Joint => None,
    };
    let mut opt = AdamW::new(cfg.adamw(), &model.params);
    let mut batcher = Batcher::new(examples.len(), cfg.seed);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for step in 0..cfg.max_steps {
        let batch: Vec<&CharacterExample> =
            batcher.next_batch(cfg.batch_size).into_iter().map(|i| &examples[i]).collect();
        let mut g = Graph::new(&model.params);
        let mut ce: Option<Var> = None;
        for ex in &batch {
            let (l, _) = character_loss(model, &mut g, ex)?;
            ce = Some(match ce {
                None => l,
                Some(a) => g.add(a, l)?,
            });
        }
        let ce = g.scale(ce.unwrap(), 1.0 / batch.len() as f32);
        let (total, nll_value) = match stage {
            MoStage::HeadOnly => (ce, 0.0),
            MoStage::Joint => {
                let gens: Vec<&GenExample> = batch.iter().map(|e| &e.gen).collect();
                let (nll, _) = batch_nll(model, &mut g, &gens)?;
                let weighted = g.scale(ce, cfg.mo_loss_weight as f32);
                let v = g.value(nll).scalar() as f64;
                (g.add(nll, weighted)?, v)
            }
        };
        let ce_value = g.value(ce).scalar() as f64;
        let total_value = g.value(total).scalar() as f64;
        let grads = g.backward(total)?;
        drop(g);
        model.params.zero_grad();
        model.params.accumulate(&grads);
        opt.step(&mut model.params, trainable.as_deref())?;
        log.rows.push(LogRow {
            step,
            nll: nll_value,
            ul: 0.0,
            character: ce_value,
            total: total_value,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    if stage == MoStage::HeadOnly {
        model.config.mo_stage1_done = true;
    }
    Ok(log)
}

/// Fraction of examples where the character head ranks the self name
/// strictly first.
pub fn character_hits_at_1(model: &Seq2Seq, examples: &[CharacterExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(CoreError::Input("empty evaluation set".into()));
    }
    let mut hits = 0;
    for ex in examples {
        let mut g = Graph::new(&model.params);
        let (_, scores) = character_loss(model, &mut g, ex)?;
        let s = g.value(scores).data();
        if s.iter().enumerate().all(|(i, x)| i == ex.label || *x < s[ex.label]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Classifier training with cross-entropy over each example's pool.
pub fn train_classifier(clf: &mut RpaClassifier, examples: &[RpaExample], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(CoreError::Input("no training examples".into()));
    }
    let mut opt = AdamW::new(cfg.adamw(), &clf.params);
    let mut batcher = Batcher::new(examples.len(), cfg.seed);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for step in 0..cfg.max_steps {
        let batch = batcher.next_batch(cfg.batch_size);
        let mut g = Graph::new(&clf.params);
        let mut total: Option<Var> = None;
        for &i in &batch {
            let l = clf.loss(&mut g, &examples[i])?;
            total = Some(match total {
                None => l,
                Some(a) => g.add(a, l)?,
            });
        }
        let loss = g.scale(total.unwrap(), 1.0 / batch.len() as f32);
        let value = g.value(loss).scalar() as f64;
        let grads = g.backward(loss)?;
        drop(g);
        clf.params.zero_grad();
        clf.params.accumulate(&grads);
        opt.step(&mut clf.params, None)?;
        log.rows.push(LogRow {
            step,
            character: value,
            total: value,
            wall_ms: start.elapsed().as_millis(),
            ..LogRow::default()
        });
    }
    Ok(log)
}
