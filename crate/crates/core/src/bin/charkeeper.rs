use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;

use charkeeper::classifier::*;
use charkeeper::corpus::*;
use charkeeper::decoding::*;
use charkeeper::eval::*;
use charkeeper::model::*;
use charkeeper::neural::layers::Dims;
use charkeeper::tokenizer::*;
use charkeeper::training::*;
use charkeeper::{CoreError, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "charkeeper", about = "Character-consistent role-playing dialogue toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic corpus generation and validation.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Vocabulary construction.
    Vocab {
        #[command(subcommand)]
        cmd: VocabCmd,
    },
    /// Speaker classifier data, training and evaluation.
    Rpa {
        #[command(subcommand)]
        cmd: RpaCmd,
    },
    /// Model training.
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// Decode responses for held-out contexts.
    Decode(DecodeArgs),
    /// Automatic metrics.
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// Talk to a generator in the terminal.
    Chat(ChatArgs),
}

#[derive(Subcommand)]
enum CorpusCmd {
    Gen {
        /// JSON corpus spec; missing fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    Validate {
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum VocabCmd {
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Catalog,
    Participants,
}

#[derive(Subcommand)]
enum RpaCmd {
    BuildData {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// 0, a window size, or `all`.
        #[arg(long, default_value = "4")]
        n_prior: Prior,
        #[arg(long)]
        ltr: bool,
        #[arg(long, default_value_t = 100)]
        pool_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Train(RpaTrainArgs),
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = PoolArg::Participants)]
        pool: PoolArg,
    },
}

#[derive(clap::Args)]
struct RpaTrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value = "4")]
    n_prior: Prior,
    /// Train against the two participants instead of each example's pool.
    #[arg(long)]
    participants: bool,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 1500)]
    steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum UlArg {
    Top1,
    All,
    Random3,
}

#[derive(Subcommand)]
enum TrainCmd {
    Gen {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// JSON job file: model and training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Speaker classifier, needed for unlikelihood and classifier-attention modes.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long, value_enum)]
        ul: Option<UlArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    Mo {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 10)]
        pool_size: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        weight: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Same as `rpa train`.
    Rpa(RpaTrainArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Beam,
    Nucleus,
    Topk,
    DelayedBeam,
}

#[derive(Clone, Copy, ValueEnum)]
enum RerankerArg {
    None,
    Complete,
    PartialOnly,
    Pacer,
    FudgeOracle,
}

#[derive(clap::Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Dialogues whose turns serve as contexts.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = StrategyArg::Beam)]
    strategy: StrategyArg,
    #[arg(long, value_enum, default_value_t = RerankerArg::None)]
    reranker: RerankerArg,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long, default_value_t = 0.3)]
    top_p: f64,
    #[arg(long, default_value_t = 50)]
    top_k: usize,
    #[arg(long, default_value_t = 10)]
    delay: usize,
    #[arg(long, default_value_t = 10)]
    pacer_toks: usize,
    #[arg(long, default_value_t = 1.0)]
    pacer_freq: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Decode at most this many contexts.
    #[arg(long, default_value_t = 20)]
    limit: usize,
    /// Cost CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// PPL, F1 and RPA per model, one CSV row each.
    Table4 {
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long, default_value_t = 20)]
        max_len: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct ChatArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Re-rank replies with this speaker classifier.
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long, default_value = "traveler")]
    partner: String,
    #[arg(long, default_value = "guide")]
    name: String,
    #[arg(long, default_value = "i help people find their way .")]
    persona: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Deserialize)]
#[serde(default)]
struct GenJob {
    dims: Dims,
    max_ctx_tokens: usize,
    expanded: ExpandedAttentionConfig,
    mo: Option<MoConfig>,
    train: TrainConfig,
}

impl Default for GenJob {
    fn default() -> Self {
        Self {
            dims: Dims::default(),
            max_ctx_tokens: 64,
            expanded: ExpandedAttentionConfig::default(),
            mo: None,
            train: TrainConfig::default(),
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &PathBuf) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn load_vocab(path: &PathBuf) -> Result<Arc<Vocabulary>> {
    Ok(Arc::new(Vocabulary::load(path)?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Corpus { cmd } => match cmd {
            CorpusCmd::Gen { spec, seed, out } => {
                let mut spec: CorpusSpec = match spec {
                    Some(p) => read_json(&p)?,
                    None => CorpusSpec::default(),
                };
                if let Some(s) = seed {
                    spec.seed = s;
                }
                let corpus = generate_synthetic_corpus(&spec)?;
                save_dialogues(&out, &corpus)?;
                println!("wrote {} dialogues to {}", corpus.len(), out.display());
            }
            CorpusCmd::Validate { input } => {
                let corpus = load_dialogues(&input)?;
                let utterances: usize = corpus.iter().map(Dialogue::len).sum();
                println!("{} dialogues, {utterances} utterances: ok", corpus.len());
            }
        },
        Cmd::Vocab {
            cmd: VocabCmd::Build { corpus, min_count, out },
        } => {
            let vocab = build_vocab(&load_dialogues(&corpus)?, min_count)?;
            vocab.save(&out)?;
            println!("{} tokens, hash {}", vocab.len(), vocab.hash());
        }
        Cmd::Rpa { cmd } => match cmd {
            RpaCmd::BuildData {
                corpus,
                vocab,
                n_prior,
                ltr,
                pool_size,
                seed,
                out,
            } => {
                let vocab = load_vocab(&vocab)?;
                let cfg = DatasetConfig {
                    n_prior,
                    pool_size,
                    seed,
                };
                let ds = build_rpa_dataset(&load_dialogues(&corpus)?, &vocab, &cfg)?;
                for w in &ds.warnings {
                    eprintln!("warning: {w}");
                }
                let examples = if ltr { build_ltr_dataset(&ds.examples) } else { ds.examples };
                write_examples(BufWriter::new(File::create(&out)?), &examples)?;
                println!("wrote {} examples", examples.len());
            }
            RpaCmd::Train(args) => rpa_train(args)?,
            RpaCmd::Eval { data, vocab, ckpt, pool } => {
                let vocab = load_vocab(&vocab)?;
                let clf = RpaClassifier::load(&ckpt, vocab)?;
                let examples = read_examples(BufReader::new(File::open(&data)?))?;
                let mode = match pool {
                    PoolArg::Participants => PoolMode::Participants,
                    PoolArg::Catalog => {
                        let mut names: Vec<String> = examples.iter().flat_map(|e| e.participants.clone()).collect();
                        names.sort();
                        names.dedup();
                        PoolMode::Catalog(names)
                    }
                };
                println!("hits@1 {:.4}", hits_at_1(&clf, &examples, &mode)?);
            }
        },
        Cmd::Train { cmd } => match cmd {
            TrainCmd::Gen {
                corpus,
                vocab,
                config,
                classifier,
                ul,
                seed,
                log,
                out,
            } => {
                let vocab = load_vocab(&vocab)?;
                let job: GenJob = match config {
                    Some(p) => read_json(&p)?,
                    None => GenJob::default(),
                };
                let mut train_cfg = job.train;
                if let Some(s) = seed {
                    train_cfg.seed = s;
                }
                if let Some(mode) = ul {
                    train_cfg.ul_mode = match mode {
                        UlArg::Top1 => UlMode::Top1,
                        UlArg::All => UlMode::All,
                        UlArg::Random3 => UlMode::Random3,
                    };
                }
                let mut mc = ModelConfig::new(vocab.len(), job.dims);
                mc.max_ctx_tokens = job.max_ctx_tokens;
                mc.expanded = job.expanded;
                mc.mo = job.mo;
                mc.seed = train_cfg.seed;
                let clf = classifier.map(|p| RpaClassifier::load(p, vocab.clone())).transpose()?;
                let mut model = Seq2Seq::new(mc, vocab.hash())?;
                let grounding = clf.as_ref().filter(|_| model.config.expanded.mode.uses_classifier());
                let examples = build_gen_examples(&load_dialogues(&corpus)?, &vocab, &model, grounding)?;
                let setup = match (ul, clf.as_ref()) {
                    (Some(_), Some(c)) => Some(UlSetup { classifier: c }),
                    (Some(_), None) => return Err(CoreError::Config("--ul needs --classifier".into())),
                    _ => None,
                };
                let tlog = train_generator(&mut model, &examples, &train_cfg, setup)?;
                if let Some(p) = log {
                    tlog.save_csv(p)?;
                }
                model.save(&out)?;
                let last = tlog.rows.last().map_or(0.0, |r| r.total);
                println!("trained {} steps, final loss {last:.4}", tlog.rows.len());
            }
            TrainCmd::Mo {
                model,
                corpus,
                vocab,
                stage,
                force,
                pool_size,
                steps,
                weight,
                seed,
                out,
            } => {
                let vocab = load_vocab(&vocab)?;
                let mut m = Seq2Seq::load(&model)?;
                let dialogues = load_dialogues(&corpus)?;
                let gens = build_gen_examples(&dialogues, &vocab, &m, None)?;
                let catalog = character_catalog(&dialogues);
                let examples = build_character_examples(&gens, &vocab, &catalog, pool_size, seed);
                let stage = match stage {
                    1 => MoStage::HeadOnly,
                    2 => MoStage::Joint,
                    s => return Err(CoreError::Config(format!("stage must be 1 or 2, got {s}"))),
                };
                let cfg = TrainConfig {
                    max_steps: steps,
                    mo_loss_weight: weight,
                    seed,
                    ..TrainConfig::default()
                };
                mo_staged_train(&mut m, &examples, stage, &cfg, force)?;
                m.save(&out)?;
                println!("character hits@1 {:.4}", character_hits_at_1(&m, &examples)?);
            }
            TrainCmd::Rpa(args) => rpa_train(args)?,
        },
        Cmd::Decode(args) => decode_cmd(args)?,
        Cmd::Eval {
            cmd:
                EvalCmd::Table4 {
                    models,
                    corpus,
                    vocab,
                    classifier,
                    max_len,
                    out,
                },
        } => {
            let vocab = load_vocab(&vocab)?;
            let clf = RpaClassifier::load(&classifier, vocab.clone())?;
            let dialogues = load_dialogues(&corpus)?;
            let mut rows = Vec::new();
            for path in &models {
                let model = Seq2Seq::load(path)?;
                if model.vocab_hash != vocab.hash() {
                    return Err(CoreError::VocabMismatch {
                        expected: vocab.hash(),
                        found: model.vocab_hash.clone(),
                    });
                }
                let examples = build_gen_examples(&dialogues, &vocab, &model, None)?;
                let set: Vec<(GenInput, Vec<usize>)> =
                    examples.iter().map(|e| (e.input.clone(), e.target.0.clone())).collect();
                let ppl = perplexity(&model, &set)?;
                let mut items = Vec::new();
                let mut f1 = 0.0;
                for (i, ex) in examples.iter().enumerate() {
                    let response = greedy_decode(&model, &ex.input, max_len)?;
                    f1 += f1_metric(&vocab.decode_text(&response), &vocab.decode_text(&ex.target));
                    items.push(EvalItem {
                        context_id: i,
                        turn: ex.turn + 1,
                        ctx: ex.ctx.clone(),
                        response,
                    });
                }
                let report = rpa_metric(&items, &clf, &vocab)?;
                rows.push(MetricRow {
                    model: path.display().to_string(),
                    ppl,
                    f1: 100.0 * f1 / examples.len() as f64,
                    rpa: report.rpa,
                    decode: "greedy".into(),
                });
            }
            match out {
                Some(p) => write_metric_csv(BufWriter::new(File::create(p)?), &rows)?,
                None => write_metric_csv(std::io::stdout().lock(), &rows)?,
            }
        }
        Cmd::Chat(args) => chat(args)?,
    }
    Ok(())
}

fn rpa_train(args: RpaTrainArgs) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let mut examples = read_examples(BufReader::new(File::open(&args.data)?))?;
    if args.participants {
        examples = with_participant_pools(&examples);
    }
    let mut cc = ClassifierConfig::new(
        vocab.len(),
        Dims {
            d_model: args.d_model,
            heads: 2,
            layers: 1,
            ffn: 2 * args.d_model,
        },
    );
    cc.n_prior = args.n_prior;
    cc.seed = args.seed;
    let mut clf = RpaClassifier::new(cc, vocab)?;
    let cfg = TrainConfig {
        max_steps: args.steps,
        lr: args.lr,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let log = train_classifier(&mut clf, &examples, &cfg)?;
    if let Some(p) = args.log {
        log.save_csv(p)?;
    }
    clf.save(&args.out)?;
    println!("trained on {} examples, final loss {:.4}", examples.len(), log.rows.last().map_or(0.0, |r| r.total));
    Ok(())
}

fn decode_cmd(a: DecodeArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let model = Seq2Seq::load(&a.model)?;
    let clf = a.classifier.as_ref().map(|p| RpaClassifier::load(p, vocab.clone())).transpose()?;
    let cfg = DecodeConfig {
        strategy: match a.strategy {
            StrategyArg::Beam => Strategy::Beam,
            StrategyArg::Nucleus => Strategy::Nucleus,
            StrategyArg::Topk => Strategy::Topk,
            StrategyArg::DelayedBeam => Strategy::DelayedBeam,
        },
        reranker: match a.reranker {
            RerankerArg::None => Reranker::None,
            RerankerArg::Complete => Reranker::Complete,
            RerankerArg::PartialOnly => Reranker::PartialOnly,
            RerankerArg::Pacer => Reranker::Pacer,
            RerankerArg::FudgeOracle => Reranker::FudgeOracle,
        },
        beam_size: a.beam,
        min_len: a.min_len,
        max_len: a.max_len,
        top_p: a.top_p,
        top_k: a.top_k,
        delay: a.delay,
        pacer_toks: a.pacer_toks,
        pacer_freq: a.pacer_freq,
        seed: a.seed,
        ..DecodeConfig::default()
    };
    let baseline_cfg = DecodeConfig {
        reranker: Reranker::None,
        ..cfg.clone()
    };
    let dialogues = load_dialogues(&a.corpus)?;
    let grounding = clf.as_ref().filter(|_| model.config.expanded.mode.uses_classifier());
    let mut rows = Vec::new();
    let mut id = 0;
    'outer: for d in &dialogues {
        for (j, u) in d.utterances.iter().enumerate() {
            if id == a.limit {
                break 'outer;
            }
            let ctx = flatten_context(d, u.speaker, j, Prior::All)?;
            let (input, warnings) = build_gen_input(&model.config, &ctx, &vocab, grounding)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            let dc = DecodeContext::new(&model, &input)?;
            let judge = clf.as_ref().map(|c| CharacterJudge::new(c, &ctx));
            let scorer = judge.as_ref().map(|j| j as &dyn SelfScorer);
            let (hyps, ledger) = decode(&dc, scorer, &cfg)?;
            let (_, base) = decode(&dc, None, &baseline_cfg)?;
            println!("[{id}] {} > {}", ctx.self_name, vocab.decode_text(hyps[0].text_tokens()));
            rows.push(CostRow {
                context_id: id,
                lm_steps: ledger.lm_steps,
                classifier_calls: ledger.classifier_calls,
                wall_ms: ledger.wall_ms,
                relative_cost: ledger.relative_cost(&base, 1.0),
            });
            id += 1;
        }
    }
    if let Some(p) = a.report {
        save_cost_csv(p, &rows)?;
    }
    Ok(())
}

fn chat(a: ChatArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let model = Seq2Seq::load(&a.model)?;
    let clf = a.classifier.as_ref().map(|p| RpaClassifier::load(p, vocab.clone())).transpose()?;
    let mut ctx = PovContext {
        self_name: a.name.clone(),
        self_persona: a.persona.clone(),
        partner_name: a.partner.clone(),
        setting_name: "the road".into(),
        setting_desc: "a long road".into(),
        history: Vec::new(),
        pov: 0,
    };
    let cfg = DecodeConfig {
        beam_size: 5,
        reranker: if clf.is_some() { Reranker::Complete } else { Reranker::None },
        seed: a.seed,
        ..DecodeConfig::default()
    };
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    write!(out, "{} > ", a.partner)?;
    out.flush()?;
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            break;
        }
        ctx.history.push((1, line.trim().to_lowercase()));
        let grounding = clf.as_ref().filter(|_| model.config.expanded.mode.uses_classifier());
        let (input, _) = build_gen_input(&model.config, &ctx, &vocab, grounding)?;
        let dc = DecodeContext::new(&model, &input)?;
        let judge = clf.as_ref().map(|c| CharacterJudge::new(c, &ctx));
        let (hyps, _) = decode(&dc, judge.as_ref().map(|j| j as &dyn SelfScorer), &cfg)?;
        let reply = vocab.decode_text(hyps[0].text_tokens());
        writeln!(out, "{} > {reply}", a.name)?;
        ctx.history.push((0, reply));
        write!(out, "{} > ", a.partner)?;
        out.flush()?;
    }
    Ok(())
}
