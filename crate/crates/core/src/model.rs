//! The generator: a transformer encoder–decoder whose decoder layers can run
//! extra rounds of (shared) cross-attention over a grounding context, plus an
//! optional character-scoring head.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use charkeeper_neural::layers::{
    sinusoidal, Dims, FeedForward, LayerNorm, Linear, MultiHeadAttention, ResidualBlock, TransformerEncoder,
};
use charkeeper_neural::{Checkpoint, Graph, Mask, ParamId, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::RpaClassifier;
use crate::corpus::PovContext;
use crate::error::{CoreError, Result};
use crate::tokenizer::{serialize_context, truncate_left, FieldSet, TokenSeq, Vocabulary, BOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpandedMode {
    None,
    Profile,
    DecoderAttn,
    TrainableMask,
    ClassifierAttnTop,
    ClassifierAttnBottom,
}

impl ExpandedMode {
    pub fn uses_classifier(self) -> bool {
        matches!(self, ExpandedMode::ClassifierAttnTop | ExpandedMode::ClassifierAttnBottom)
    }

    pub fn is_automated(self) -> bool {
        !matches!(self, ExpandedMode::None | ExpandedMode::Profile)
    }
}

impl std::str::FromStr for ExpandedMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| CoreError::Config(format!("unknown expanded-attention mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpandedAttentionConfig {
    pub mode: ExpandedMode,
    /// Fields serialized for the profile mode.
    pub subset: FieldSet,
    pub rounds: usize,
    /// Tokens re-attended by the automated modes.
    pub k: usize,
}

impl Default for ExpandedAttentionConfig {
    fn default() -> Self {
        Self {
            mode: ExpandedMode::None,
            subset: FieldSet::NONE,
            rounds: 1,
            k: 8,
        }
    }
}

impl ExpandedAttentionConfig {
    pub fn profile(subset: FieldSet, rounds: usize) -> Self {
        Self {
            mode: ExpandedMode::Profile,
            subset,
            rounds,
            ..Self::default()
        }
    }

    pub fn automated(mode: ExpandedMode, k: usize, rounds: usize) -> Self {
        Self {
            mode,
            rounds,
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == ExpandedMode::Profile && self.subset.is_empty() {
            return Err(CoreError::Config("profile mode needs a non-empty subset".into()));
        }
        if self.mode.is_automated() && self.k == 0 {
            return Err(CoreError::Config("k must be at least 1".into()));
        }
        if self.mode != ExpandedMode::None && !(1..=3).contains(&self.rounds) {
            return Err(CoreError::Config(format!("rounds must be 1..=3, got {}", self.rounds)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoInput {
    DecOnly,
    EncDec,
}

/// Character-scoring head. `layers` is 0 or 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoConfig {
    pub layers: usize,
    pub input: MoInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: Dims,
    pub vocab_size: usize,
    pub max_ctx_tokens: usize,
    pub expanded: ExpandedAttentionConfig,
    pub mo: Option<MoConfig>,
    pub seed: u64,
    /// Set once the character head finished its head-only stage.
    #[serde(default)]
    pub mo_stage1_done: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, dims: Dims) -> Self {
        Self {
            dims,
            vocab_size,
            max_ctx_tokens: 64,
            expanded: ExpandedAttentionConfig::default(),
            mo: None,
            seed: 0,
            mo_stage1_done: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.expanded.validate()?;
        if self.max_ctx_tokens == 0 {
            return Err(CoreError::Config("max_ctx_tokens must be at least 1".into()));
        }
        if !self.dims.d_model.is_multiple_of(self.dims.heads) {
            return Err(CoreError::Config("d_model must be divisible by heads".into()));
        }
        if let Some(mo) = self.mo {
            if mo.layers != 0 && mo.layers != 2 {
                return Err(CoreError::Config(format!("n_MO must be 0 or 2, got {}", mo.layers)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

#[derive(Debug, Clone)]
struct MoHead {
    blocks: Vec<ResidualBlock>,
    head: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: ParamId,
    encoder: TransformerEncoder,
    decoder: Vec<DecoderLayer>,
    out: Linear,
    mask_proj: Option<Linear>,
    mo: Option<MoHead>,
}

/// Calls into the optional code paths, for asserting which ones ran.
#[derive(Debug, Default)]
pub struct TraceCounters {
    pub expanded_rounds: AtomicUsize,
    pub mask_scorings: AtomicUsize,
    pub mo_scorings: AtomicUsize,
}

impl TraceCounters {
    pub fn snapshot(&self) -> [usize; 3] {
        [
            self.expanded_rounds.load(Ordering::Relaxed),
            self.mask_scorings.load(Ordering::Relaxed),
            self.mo_scorings.load(Ordering::Relaxed),
        ]
    }
}

impl Clone for TraceCounters {
    fn clone(&self) -> Self {
        let [a, b, c] = self.snapshot();
        Self {
            expanded_rounds: AtomicUsize::new(a),
            mask_scorings: AtomicUsize::new(b),
            mo_scorings: AtomicUsize::new(c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Profile,
    DecoderAttn,
    TrainableMask,
    ClassifierTop,
    ClassifierBottom,
}

/// Positions chosen for the expanded attention step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingSelection {
    /// Indices into the encoded context, or into the separately serialized
    /// profile for [`Selector::Profile`].
    pub positions: Vec<usize>,
    pub source: Selector,
}

/// What the generator reads for one response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenInput {
    /// Serialized, truncated context.
    pub context: TokenSeq,
    /// Separately serialized profile subset (profile mode).
    pub profile: Option<TokenSeq>,
    /// Context positions to re-encode (classifier modes).
    pub selection: Option<GroundingSelection>,
}

impl GenInput {
    pub fn plain(context: TokenSeq) -> Self {
        Self {
            context,
            profile: None,
            selection: None,
        }
    }
}

/// Encoder states computed once per context and reused across decode steps.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    pub states: Tensor<T>,
    pub extra: Option<Tensor<T>>,
    pub selection: Option<GroundingSelection>,
}

enum Extra {
    None,
    States(Var),
    /// Per-row masks over the encoder states derived from cross-attention.
    DecoderAttn,
}

/// Output of one decoder pass.
pub struct DecoderPass {
    pub logits: Var,
    pub states: Var,
    /// Cross-attention node per layer.
    pub cross: Vec<Var>,
    /// Expanded-attention nodes per layer and round.
    pub expanded: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct Seq2Seq<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub vocab_hash: String,
    layout: Layout,
    pub counters: TraceCounters,
}

impl<T: Real> Seq2Seq<T> {
    pub fn new(config: ModelConfig, vocab_hash: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let dims = config.dims;
        let d = dims.d_model;
        let embedding = params.add_uniform("embedding", &[config.vocab_size, d], 0.5, &mut rng);
        let encoder = TransformerEncoder::with_embedding(&mut params, "encoder", embedding, dims, &mut rng);
        let decoder = (0..dims.layers)
            .map(|i| {
                let n = format!("decoder.layer{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(&mut params, &format!("{n}.self"), d, dims.heads, &mut rng),
                    norm1: LayerNorm::new(&mut params, &format!("{n}.norm1"), d),
                    cross: MultiHeadAttention::new(&mut params, &format!("{n}.cross"), d, dims.heads, &mut rng),
                    norm2: LayerNorm::new(&mut params, &format!("{n}.norm2"), d),
                    ffn: FeedForward::new(&mut params, &format!("{n}.ffn"), d, dims.ffn, &mut rng),
                    norm3: LayerNorm::new(&mut params, &format!("{n}.norm3"), d),
                }
            })
            .collect();
        let out = Linear::new(&mut params, "out", d, config.vocab_size, &mut rng);
        let mask_proj = (config.expanded.mode == ExpandedMode::TrainableMask)
            .then(|| Linear::new(&mut params, "mask_proj", d, 1, &mut rng));
        let mo = config.mo.map(|mo| {
            let blocks = (0..mo.layers)
                .map(|i| ResidualBlock::new(&mut params, &format!("mo.layer{i}"), dims, &mut rng))
                .collect();
            let head = Linear::zeros(&mut params, "mo.head", d, d);
            let w = params.value_mut(head.weight).data_mut();
            for i in 0..d {
                w[i * d + i] = T::one();
            }
            MoHead { blocks, head }
        });
        Ok(Self {
            config,
            params,
            vocab_hash: vocab_hash.into(),
            layout: Layout {
                embedding,
                encoder,
                decoder,
                out,
                mask_proj,
                mo,
            },
            counters: TraceCounters::default(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Seq2Seq<U> {
        Seq2Seq {
            config: self.config.clone(),
            params: self.params.cast(),
            vocab_hash: self.vocab_hash.clone(),
            layout: self.layout.clone(),
            counters: TraceCounters::default(),
        }
    }

    /// Parameters of the character-scoring head.
    pub fn mo_params(&self) -> Vec<ParamId> {
        match &self.layout.mo {
            None => Vec::new(),
            Some(_) => self
                .params
                .ids()
                .filter(|id| self.params.name(*id).starts_with("mo."))
                .collect(),
        }
    }

    /// Every parameter outside the character-scoring head.
    pub fn base_params(&self) -> Vec<ParamId> {
        let mo = self.mo_params();
        self.params.ids().filter(|id| !mo.contains(id)).collect()
    }

    /// Number of scalars the expanded attention adds on top of mode `none`.
    pub fn expanded_param_overhead(&self) -> usize {
        self.layout.mask_proj.as_ref().map_or(0, |l| l.num_scalars(&self.params))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.config.vocab_size) {
            Some(bad) => Err(CoreError::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Final encoder states `[n × d]`; an empty context encodes as one PAD.
    pub fn encode_context(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        let ids: &[usize] = if ids.is_empty() { &[PAD] } else { ids };
        Ok(self.layout.encoder.forward(g, ids)?)
    }

    /// Builds the extra states of the expanded step (if any) on top of the
    /// encoded context.
    fn extra_states(&self, g: &mut Graph<'_, T>, input: &GenInput, enc: Var) -> Result<(Extra, Option<GroundingSelection>)> {
        let cfg = self.config.expanded;
        match cfg.mode {
            ExpandedMode::None => Ok((Extra::None, None)),
            ExpandedMode::Profile => {
                let profile = input
                    .profile
                    .as_ref()
                    .ok_or_else(|| CoreError::Input("profile mode needs a serialized profile".into()))?;
                let states = self.encode_context(g, profile)?;
                let n = g.value(states).rows();
                Ok((
                    Extra::States(states),
                    Some(GroundingSelection {
                        positions: (0..n).collect(),
                        source: Selector::Profile,
                    }),
                ))
            }
            ExpandedMode::DecoderAttn => Ok((Extra::DecoderAttn, None)),
            ExpandedMode::TrainableMask => {
                self.counters.mask_scorings.fetch_add(1, Ordering::Relaxed);
                let proj = self.layout.mask_proj.as_ref().expect("mask projection exists in this mode");
                let scores = proj.forward(g, enc)?;
                let scores = g.transpose(scores);
                let weights = g.softmax_rows(scores);
                let n = g.value(weights).cols();
                let k = cfg.k.min(n);
                let positions = top_k_positions(g.value(weights).data(), k, false);
                let ctx: Vec<usize> = if input.context.is_empty() { vec![PAD] } else { input.context.to_vec() };
                let ids: Vec<usize> = positions.iter().map(|&p| ctx[p]).collect();
                let column = g.transpose(weights);
                let picked = g.gather_rows(column, &positions)?;
                let factor = g.scale(picked, T::of(k as f64));
                let table = g.param(self.layout.embedding);
                let emb = g.embed(table, &ids)?;
                let emb = g.scale_rows(emb, factor)?;
                let pos = g.input(sinusoidal(ids.len(), self.config.dims.d_model));
                let x = g.add(emb, pos)?;
                let states = self.layout.encoder.forward_embedded(g, x)?;
                Ok((
                    Extra::States(states),
                    Some(GroundingSelection {
                        positions,
                        source: Selector::TrainableMask,
                    }),
                ))
            }
            ExpandedMode::ClassifierAttnTop | ExpandedMode::ClassifierAttnBottom => {
                let sel = input
                    .selection
                    .as_ref()
                    .ok_or_else(|| CoreError::Input("classifier mode needs a selection".into()))?;
                let ids: Vec<usize> = sel
                    .positions
                    .iter()
                    .map(|&p| {
                        input
                            .context
                            .get(p)
                            .copied()
                            .ok_or_else(|| CoreError::Input(format!("selected position {p} outside context")))
                    })
                    .collect::<Result<_>>()?;
                let states = self.encode_context(g, &ids)?;
                Ok((Extra::States(states), Some(sel.clone())))
            }
        }
    }

    fn run_decoder(
        &self,
        g: &mut Graph<'_, T>,
        enc: Var,
        extra: &Extra,
        dec_in: &[usize],
        last_only: bool,
    ) -> Result<DecoderPass> {
        self.check_ids(dec_in)?;
        if matches!(extra, Extra::None) && self.config.expanded.mode != ExpandedMode::None {
            return Err(CoreError::Input("extra states missing for expanded attention".into()));
        }
        let rounds = self.config.expanded.rounds;
        let mut x = self.layout.encoder.embed(g, dec_in)?;
        let mut cross = Vec::new();
        let mut expanded = Vec::new();
        for layer in &self.layout.decoder {
            let a = layer.self_attn.forward(g, x, x, &Mask::Causal)?;
            let h = g.add(x, a.values)?;
            x = layer.norm1.forward(g, h)?;
            let c = layer.cross.forward(g, x, enc, &Mask::None)?;
            let h = g.add(x, c.values)?;
            x = layer.norm2.forward(g, h)?;
            cross.push(c.weights);
            let (memory, mask) = match extra {
                Extra::None => (None, Mask::None),
                Extra::States(s) => (Some(*s), Mask::None),
                Extra::DecoderAttn => (Some(enc), self.decoder_attn_mask(g, c.weights)),
            };
            let mut per_round = Vec::new();
            if let Some(memory) = memory {
                self.counters.expanded_rounds.fetch_add(rounds, Ordering::Relaxed);
                for _ in 0..rounds {
                    let e = layer.cross.forward(g, x, memory, &mask)?;
                    let h = g.add(x, e.values)?;
                    x = layer.norm2.forward(g, h)?;
                    per_round.push(e.weights);
                }
            }
            expanded.push(per_round);
            let f = layer.ffn.forward(g, x)?;
            let h = g.add(x, f)?;
            x = layer.norm3.forward(g, h)?;
        }
        let states = x;
        let head_in = if last_only {
            let t = g.value(x).rows();
            g.gather_rows(x, &[t - 1])?
        } else {
            x
        };
        let logits = self.layout.out.forward(g, head_in)?;
        Ok(DecoderPass {
            logits,
            states,
            cross,
            expanded,
        })
    }

    /// Row `t` may attend to the top-k encoder positions of row `t − 1` of
    /// this layer's cross-attention (max over heads); row 0 sees everything.
    fn decoder_attn_mask(&self, g: &Graph<'_, T>, cross: Var) -> Mask<T> {
        let (w, heads, nq, nk) = g.attention_weights(cross).expect("cross-attention node");
        let k = self.config.expanded.k.min(nk);
        let mut allowed = vec![false; nq * nk];
        allowed[..nk].iter_mut().for_each(|a| *a = true);
        for t in 1..nq {
            let prev: Vec<T> = (0..nk)
                .map(|j| (0..heads).map(|h| w[(h * nq + t - 1) * nk + j]).fold(T::neg_infinity(), T::max))
                .collect();
            for p in top_k_positions(&prev, k, false) {
                allowed[t * nk + p] = true;
            }
        }
        Mask::from_allowed(&allowed)
    }

    /// Encodes the context and grounding input in `g`.
    pub fn forward_context(&self, g: &mut Graph<'_, T>, input: &GenInput) -> Result<(Var, Option<Var>, Option<GroundingSelection>)> {
        let enc = self.encode_context(g, &input.context)?;
        let (extra, sel) = self.extra_states(g, input, enc)?;
        let extra = match extra {
            Extra::States(s) => Some(s),
            Extra::DecoderAttn => Some(enc),
            Extra::None => None,
        };
        Ok((enc, extra, sel))
    }

    fn extra_kind(&self, extra: Option<Var>) -> Extra {
        match (self.config.expanded.mode, extra) {
            (ExpandedMode::None, _) | (_, None) => Extra::None,
            (ExpandedMode::DecoderAttn, _) => Extra::DecoderAttn,
            (_, Some(s)) => Extra::States(s),
        }
    }

    /// Teacher-forced pass: decoder input is `BOS + target`.
    pub fn forward_teacher(&self, g: &mut Graph<'_, T>, input: &GenInput, target: &[usize]) -> Result<(Var, DecoderPass)> {
        let (enc, extra, _) = self.forward_context(g, input)?;
        let mut dec_in = Vec::with_capacity(target.len() + 1);
        dec_in.push(BOS);
        dec_in.extend_from_slice(target);
        let extra = self.extra_kind(extra);
        let pass = self.run_decoder(g, enc, &extra, &dec_in, false)?;
        Ok((enc, pass))
    }

    /// Summed token NLL of `target + EOS` and the number of scored tokens.
    pub fn nll(&self, g: &mut Graph<'_, T>, input: &GenInput, target: &[usize]) -> Result<(Var, usize)> {
        let (_, pass) = self.forward_teacher(g, input, target)?;
        let labels: Vec<(usize, usize)> = target
            .iter()
            .copied()
            .chain(std::iter::once(crate::tokenizer::EOS))
            .enumerate()
            .filter(|(_, t)| *t != PAD)
            .collect();
        let n = labels.len();
        Ok((g.nll_sum(pass.logits, &labels)?, n))
    }

    /// Character scores `[1 × P]` of the scoring head against encoded names.
    pub fn mo_character_score(&self, g: &mut Graph<'_, T>, enc: Var, dec: Var, candidates: &[TokenSeq]) -> Result<Var> {
        let mo_cfg = self
            .config
            .mo
            .ok_or_else(|| CoreError::Config("model has no character head".into()))?;
        let head = self.layout.mo.as_ref().expect("head exists when configured");
        if candidates.is_empty() {
            return Err(CoreError::Input("empty candidate set".into()));
        }
        self.counters.mo_scorings.fetch_add(1, Ordering::Relaxed);
        let mut x = match mo_cfg.input {
            MoInput::DecOnly => dec,
            MoInput::EncDec => g.concat_rows(enc, dec)?,
        };
        for b in &head.blocks {
            x = b.forward(g, x)?;
        }
        let pooled = g.mean_rows(x);
        let pooled = head.head.forward(g, pooled)?;
        let mut names: Option<Var> = None;
        for c in candidates {
            let states = self.encode_context(g, c)?;
            let v = g.mean_rows(states);
            names = Some(match names {
                None => v,
                Some(acc) => g.concat_rows(acc, v)?,
            });
        }
        Ok(g.matmul_bt(pooled, names.unwrap())?)
    }

    /// Encodes once for step-wise decoding.
    pub fn prepare(&self, input: &GenInput) -> Result<Encoded<T>> {
        let mut g = Graph::new(&self.params);
        let (enc, extra, selection) = self.forward_context(&mut g, input)?;
        Ok(Encoded {
            states: g.value(enc).clone(),
            extra: match self.config.expanded.mode {
                ExpandedMode::None | ExpandedMode::DecoderAttn => None,
                _ => extra.map(|e| g.value(e).clone()),
            },
            selection,
        })
    }

    fn replay<'g>(&self, g: &mut Graph<'g, T>, encoded: &Encoded<T>) -> (Var, Extra) {
        let enc = g.input(encoded.states.clone());
        let extra = match (self.config.expanded.mode, &encoded.extra) {
            (ExpandedMode::None, _) => Extra::None,
            (ExpandedMode::DecoderAttn, _) => Extra::DecoderAttn,
            (_, Some(e)) => Extra::States(g.input(e.clone())),
            (_, None) => Extra::None,
        };
        (enc, extra)
    }

    /// Next-token log-probabilities after `prefix` (which starts with BOS).
    pub fn decode_step(&self, encoded: &Encoded<T>, prefix: &[usize]) -> Result<Vec<T>> {
        if prefix.first() != Some(&BOS) {
            return Err(CoreError::Input("prefix must start with BOS".into()));
        }
        let mut g = Graph::new(&self.params);
        let (enc, extra) = self.replay(&mut g, encoded);
        let pass = self.run_decoder(&mut g, enc, &extra, prefix, true)?;
        Ok(charkeeper_neural::log_softmax(g.value(pass.logits).data()))
    }

    /// Teacher-forced attention traces for `response`: per layer, the
    /// `[heads × (|response|+1) × keys]` cross weights and, per round, the
    /// expanded weights.
    pub fn attention_traces(&self, encoded: &Encoded<T>, response: &[usize]) -> Result<AttentionTraces<T>> {
        let mut g = Graph::new(&self.params);
        let (enc, extra) = self.replay(&mut g, encoded);
        let mut dec_in = vec![BOS];
        dec_in.extend_from_slice(response);
        let pass = self.run_decoder(&mut g, enc, &extra, &dec_in, false)?;
        let grab = |v: Var| {
            let (w, heads, nq, nk) = g.attention_weights(v).expect("attention node");
            Tensor::new(vec![heads, nq, nk], w.to_vec()).unwrap()
        };
        Ok(AttentionTraces {
            cross: pass.cross.iter().map(|&v| grab(v)).collect(),
            expanded: pass
                .expanded
                .iter()
                .map(|rounds| rounds.iter().map(|&v| grab(v)).collect())
                .collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = Checkpoint::from_store(serde_json::to_value(&self.config)?, self.vocab_hash.clone(), &self.params);
        Ok(ckpt.save(path)?)
    }
}

impl Seq2Seq<f32> {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let config: ModelConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = Self::new(config, ckpt.vocab_hash.clone())?;
        ckpt.load_into(&mut model.params)?;
        Ok(model)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionTraces<T> {
    pub cross: Vec<Tensor<T>>,
    pub expanded: Vec<Vec<Tensor<T>>>,
}

/// Indices of the `k` largest (or smallest) values, returned in ascending
/// position order. Ties go to the lower position.
pub fn top_k_positions<T: Real>(values: &[T], k: usize, smallest: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal);
        let ord = if smallest { ord } else { ord.reverse() };
        ord.then(a.cmp(&b))
    });
    idx.truncate(k.min(values.len()));
    idx.sort_unstable();
    idx
}

/// Builds the generator input for one context: serialization, left
/// truncation and, depending on the mode, the grounding subset. Returns any
/// warnings raised (such as `k` clamped to the context length).
pub fn build_gen_input(
    config: &ModelConfig,
    ctx: &PovContext,
    vocab: &Vocabulary,
    classifier: Option<&RpaClassifier>,
) -> Result<(GenInput, Vec<String>)> {
    let mode = config.expanded.mode;
    if mode.uses_classifier() != classifier.is_some() {
        return Err(CoreError::Input(
            "a classifier is needed exactly for the classifier-attention modes".into(),
        ));
    }
    let mut warnings = Vec::new();
    let full = serialize_context(ctx, vocab, FieldSet::ALL);
    let mut context = truncate_left(&full, config.max_ctx_tokens);
    if context.is_empty() {
        context = TokenSeq(vec![PAD]);
    }
    let mut input = GenInput::plain(context);
    let k = config.expanded.k;
    if mode.is_automated() && k > input.context.len() {
        warnings.push(format!(
            "k = {k} exceeds context length {}; clamped",
            input.context.len()
        ));
    }
    match mode {
        ExpandedMode::Profile => {
            input.profile = Some(serialize_context(ctx, vocab, config.expanded.subset));
        }
        ExpandedMode::ClassifierAttnTop | ExpandedMode::ClassifierAttnBottom => {
            let clf = classifier.unwrap();
            let export = clf.context_attention(&input.context)?;
            let positions = top_k_positions(&export.weights, k, mode == ExpandedMode::ClassifierAttnBottom);
            input.selection = Some(GroundingSelection {
                positions,
                source: if mode == ExpandedMode::ClassifierAttnTop {
                    Selector::ClassifierTop
                } else {
                    Selector::ClassifierBottom
                },
            });
        }
        _ => {}
    }
    Ok((input, warnings))
}
