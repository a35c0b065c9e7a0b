use std::collections::HashSet;
use std::sync::Arc;

use charkeeper::classifier::*;
use charkeeper::corpus::*;
use charkeeper::decoding::Strategy as Search;
use charkeeper::decoding::*;
use charkeeper::model::*;
use charkeeper::neural::layers::Dims;
use charkeeper::tokenizer::*;
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig, Strategy as _};

struct Tiny {
    vocab: Arc<Vocabulary>,
    model: Seq2Seq,
    clf: RpaClassifier,
    contexts: Vec<PovContext>,
}

fn tiny() -> Tiny {
    let corpus = generate_synthetic_corpus(&CorpusSpec {
        n_roles: 4,
        role_lexicon_size: 2,
        n_dialogues: 4,
        turns_per_dialogue: 4,
        ..CorpusSpec::default()
    })
    .unwrap();
    let vocab = Arc::new(build_vocab(&corpus, 1).unwrap());
    let dims = Dims {
        d_model: 8,
        heads: 2,
        layers: 1,
        ffn: 16,
    };
    let mut mc = ModelConfig::new(vocab.len(), dims);
    mc.max_ctx_tokens = 16;
    let model = Seq2Seq::new(mc, vocab.hash()).unwrap();
    let clf = RpaClassifier::new(ClassifierConfig::new(vocab.len(), dims), vocab.clone()).unwrap();
    let contexts = corpus
        .iter()
        .flat_map(|d| (0..d.len()).map(move |j| flatten_context(d, d.utterances[j].speaker, j, Prior::All).unwrap()))
        .collect();
    Tiny {
        vocab,
        model,
        clf,
        contexts,
    }
}

fn repeated_trigram(tokens: &[usize], context: &[usize]) -> bool {
    let ctx: HashSet<&[usize]> = context.windows(3).collect();
    let mut seen = HashSet::new();
    tokens
        .windows(3)
        .any(|w| w[2] != EOS && (ctx.contains(w) || !seen.insert(w)))
}

/// (strategy, reranker) indices; token re-scoring only runs under beam search.
fn pairing() -> impl proptest::strategy::Strategy<Value = (usize, usize)> {
    (0usize..4, 0usize..4).prop_map(|(s, r)| (s, if s == 0 { r } else { r % 2 }))
}

fn config(s: usize, r: usize, seed: u64, min_len: usize, beam: usize) -> DecodeConfig {
    DecodeConfig {
        strategy: [Search::Beam, Search::Nucleus, Search::Topk, Search::DelayedBeam][s],
        reranker: [Reranker::None, Reranker::Complete, Reranker::PartialOnly, Reranker::Pacer][r],
        beam_size: beam,
        min_len,
        max_len: 9,
        top_p: 0.6,
        top_k: 5,
        delay: 2,
        pacer_toks: 4,
        pacer_freq: 0.5,
        seed,
        ..DecodeConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn decodes_respect_constraints(
        (s, r) in pairing(),
        seed in 0u64..1000,
        min_len in 1usize..7,
        beam in 1usize..5,
        which in 0usize..16,
    ) {
        let t = tiny();
        let ctx = &t.contexts[which];
        let (input, _) = build_gen_input(&t.model.config, ctx, &t.vocab, None).unwrap();
        let dc = DecodeContext::new(&t.model, &input).unwrap();
        let judge = CharacterJudge::new(&t.clf, ctx);
        let cfg = config(s, r, seed, min_len, beam);
        let (hyps, ledger) = decode(&dc, Some(&judge), &cfg).unwrap();
        prop_assert!(!hyps.is_empty());
        for h in &hyps {
            let body = h.text_tokens();
            prop_assert!(body.len() >= min_len);
            prop_assert!(h.tokens.len() <= cfg.max_len);
            prop_assert!(!repeated_trigram(&h.tokens, &input.context));
            prop_assert!(body.iter().all(|&tok| !is_reserved(tok)));
        }
        if r == 0 {
            prop_assert_eq!(ledger.classifier_calls, 0);
        }

        let (again, _) = decode(&dc, Some(&judge), &cfg).unwrap();
        let a: Vec<&TokenSeq> = hyps.iter().map(|h| &h.tokens).collect();
        let b: Vec<&TokenSeq> = again.iter().map(|h| &h.tokens).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn greedy_is_beam_of_one(which in 0usize..16) {
        let t = tiny();
        let (input, _) = build_gen_input(&t.model.config, &t.contexts[which], &t.vocab, None).unwrap();
        let greedy = greedy_decode(&t.model, &input, 8).unwrap();
        let dc = DecodeContext::new(&t.model, &input).unwrap();
        let cfg = DecodeConfig { beam_size: 1, min_len: 1, max_len: 8, ..DecodeConfig::default() };
        let (hyps, _) = decode(&dc, None, &cfg).unwrap();
        prop_assert_eq!(hyps[0].text_tokens(), &greedy[..]);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        DecodeConfig { beam_size: 0, ..DecodeConfig::default() },
        DecodeConfig { min_len: 30, max_len: 20, ..DecodeConfig::default() },
        DecodeConfig { top_p: 0.0, ..DecodeConfig::default() },
        DecodeConfig { pacer_freq: 0.0, reranker: Reranker::Pacer, ..DecodeConfig::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    assert!(DecodeConfig::default().validate().is_ok());
}

#[test]
fn rerankers_need_a_scorer() {
    let t = tiny();
    let (input, _) = build_gen_input(&t.model.config, &t.contexts[0], &t.vocab, None).unwrap();
    let dc = DecodeContext::new(&t.model, &input).unwrap();
    let cfg = DecodeConfig { reranker: Reranker::Pacer, ..DecodeConfig::default() };
    assert!(decode(&dc, None, &cfg).is_err());
}
