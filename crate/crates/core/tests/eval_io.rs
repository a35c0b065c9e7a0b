use std::path::PathBuf;
use std::sync::Arc;

use charkeeper::classifier::*;
use charkeeper::corpus::*;
use charkeeper::decoding::*;
use charkeeper::eval::*;
use charkeeper::model::*;
use charkeeper::neural::layers::Dims;
use charkeeper::tokenizer::*;
use charkeeper::CoreError;

fn dims() -> Dims {
    Dims {
        d_model: 8,
        heads: 2,
        layers: 1,
        ffn: 16,
    }
}

fn corpus(seed: u64) -> Vec<Dialogue> {
    generate_synthetic_corpus(&CorpusSpec {
        n_roles: 4,
        n_dialogues: 4,
        turns_per_dialogue: 4,
        seed,
        ..CorpusSpec::default()
    })
    .unwrap()
}

/// Compares with the file under tests/golden; `UPDATE_GOLDEN=1` rewrites it.
fn check_golden(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{name} differs from the golden copy");
}

#[test]
fn per_turn_outputs_match_golden() {
    let rows: Vec<PerTurnRow> = [(0.9, 0.95), (0.8, 0.9), (0.7, 0.92), (0.65, 0.9)]
        .iter()
        .enumerate()
        .map(|(i, &(m, g))| PerTurnRow {
            turn: i + 1,
            model: m,
            gold: g,
            delta: m - g,
        })
        .collect();
    let mut csv = Vec::new();
    write_per_turn_csv(&mut csv, &rows).unwrap();
    check_golden("per_turn.csv", &String::from_utf8(csv).unwrap());
    check_golden("per_turn.svg", &per_turn_svg(&rows));
}

#[test]
fn heatmap_svg_matches_golden() {
    let map = Heatmap {
        rows: 3,
        cols: 2,
        values: vec![0.0, 1.0, 0.5, 0.25, 1.0, 0.0],
    };
    let labels = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    check_golden("heatmap.svg", &map.to_svg(&labels(&["a", "<b>", "c"]), &labels(&["x", "y"])));
    assert!((map.mass_on_rows(&[1]) - 0.75 / 2.75).abs() < 1e-12);
}

#[test]
fn cost_csv_format() {
    let rows = [CostRow {
        context_id: 3,
        lm_steps: 40,
        classifier_calls: 12,
        wall_ms: 1.5,
        relative_cost: 1.3,
    }];
    let mut out = Vec::new();
    write_cost_csv(&mut out, &rows).unwrap();
    assert_eq!(
        String::from_utf8(out).unwrap(),
        "context_id,lm_steps,classifier_calls,wall_ms,relative_cost\n3,40,12,1.500,1.300000\n"
    );
}

#[test]
fn generator_checkpoint_round_trip() {
    let c = corpus(1);
    let vocab = build_vocab(&c, 1).unwrap();
    let mut mc = ModelConfig::new(vocab.len(), dims());
    mc.max_ctx_tokens = 16;
    mc.expanded = ExpandedAttentionConfig::profile(FieldSet::parse("AB").unwrap(), 2);
    mc.seed = 5;
    let model = Seq2Seq::<f32>::new(mc, vocab.hash()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gen.json");
    model.save(&path).unwrap();
    let back = Seq2Seq::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.vocab_hash, model.vocab_hash);

    let ctx = flatten_context(&c[0], 1, 3, Prior::All).unwrap();
    let (input, _) = build_gen_input(&model.config, &ctx, &vocab, None).unwrap();
    let a = model.decode_step(&model.prepare(&input).unwrap(), &[BOS]).unwrap();
    let b = back.decode_step(&back.prepare(&input).unwrap(), &[BOS]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn classifier_checkpoint_checks_vocabulary() {
    let vocab = Arc::new(build_vocab(&corpus(1), 1).unwrap());
    let other = Arc::new(build_vocab(&corpus(2), 1).unwrap());
    assert_ne!(vocab.hash(), other.hash());
    let clf = RpaClassifier::<f32>::new(ClassifierConfig::new(vocab.len(), dims()), vocab.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clf.json");
    clf.save(&path).unwrap();

    let back = RpaClassifier::load(&path, vocab.clone()).unwrap();
    let pool = ["a".to_string(), "b".to_string()];
    let context = vocab.encode("hello there").into_vec();
    assert_eq!(
        back.score_candidates(&context, &pool).unwrap().scores,
        clf.score_candidates(&context, &pool).unwrap().scores
    );
    assert!(matches!(RpaClassifier::load(&path, other), Err(CoreError::VocabMismatch { .. })));
}

#[test]
fn rpa_metric_rejects_foreign_vocabulary() {
    let c = corpus(1);
    let vocab = Arc::new(build_vocab(&c, 1).unwrap());
    let other = build_vocab(&corpus(2), 1).unwrap();
    let clf = RpaClassifier::<f32>::new(ClassifierConfig::new(vocab.len(), dims()), vocab.clone()).unwrap();
    let ctx = flatten_context(&c[0], 0, 1, Prior::All).unwrap();
    let items = [EvalItem {
        context_id: 0,
        turn: 2,
        response: vocab.encode(&c[0].utterances[1].text).into_vec(),
        ctx,
    }];
    assert!(matches!(rpa_metric(&items, &clf, &other), Err(CoreError::VocabMismatch { .. })));
    let report = rpa_metric(&items, &clf, &vocab).unwrap();
    assert_eq!(report.per_turn_counts, vec![0, 1]);
    assert!(report.per_turn[0].is_nan());
}

#[test]
fn perplexity_of_a_flat_model_is_vocab_size() {
    let c = corpus(3);
    let vocab = build_vocab(&c, 1).unwrap();
    let mut model = Seq2Seq::<f32>::new(ModelConfig::new(vocab.len(), dims()), vocab.hash()).unwrap();
    for name in ["out.weight", "out.bias"] {
        let id = model.params.find(name).unwrap();
        let shape = model.params.value(id).shape().to_vec();
        model.params.set(id, charkeeper::neural::Tensor::zeros(&shape)).unwrap();
    }
    let ctx = flatten_context(&c[0], 1, 1, Prior::All).unwrap();
    let (input, _) = build_gen_input(&model.config, &ctx, &vocab, None).unwrap();
    let target = vocab.encode(&c[0].utterances[1].text).into_vec();
    let ppl = perplexity(&model.cast::<f64>(), &[(input, target)]).unwrap();
    assert!((ppl - vocab.len() as f64).abs() < 1e-9 * vocab.len() as f64);
}
