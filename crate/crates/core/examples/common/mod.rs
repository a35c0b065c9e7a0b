//! Small trained setup shared by the decoding and evaluation examples.

#![allow(dead_code)]

use std::sync::Arc;

use charkeeper::classifier::*;
use charkeeper::corpus::*;
use charkeeper::model::*;
use charkeeper::neural::layers::Dims;
use charkeeper::tokenizer::*;
use charkeeper::training::*;

pub struct Setup {
    pub train: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    pub vocab: Arc<Vocabulary>,
    pub clf: RpaClassifier,
}

pub fn dims() -> Dims {
    Dims {
        d_model: 32,
        heads: 2,
        layers: 1,
        ffn: 64,
    }
}

pub fn setup(n_dialogues: usize, clf_steps: usize) -> charkeeper::Result<Setup> {
    let corpus = generate_synthetic_corpus(&CorpusSpec {
        n_dialogues,
        ..CorpusSpec::default()
    })?;
    let (train, test) = split_corpus(&corpus, 0.2, 1);
    let vocab = Arc::new(build_vocab(&train, 1)?);
    let full = build_rpa_dataset(&train, &vocab, &DatasetConfig::default())?;
    let ltr = build_ltr_dataset(&with_participant_pools(&full.examples));
    let mut clf = RpaClassifier::new(ClassifierConfig::new(vocab.len(), dims()), vocab.clone())?;
    if clf_steps > 0 {
        train_classifier(&mut clf, &ltr, &TrainConfig {
            max_steps: clf_steps,
            lr: 3e-3,
            ..TrainConfig::default()
        })?;
    }
    Ok(Setup { train, test, vocab, clf })
}

/// Trains a generator with the given context truncation and grounding.
pub fn generator(s: &Setup, max_ctx: usize, expanded: ExpandedAttentionConfig, steps: usize) -> charkeeper::Result<Seq2Seq> {
    let mut mc = ModelConfig::new(s.vocab.len(), dims());
    mc.max_ctx_tokens = max_ctx;
    mc.expanded = expanded;
    let mut model = Seq2Seq::new(mc, s.vocab.hash())?;
    let examples = build_gen_examples(&s.train, &s.vocab, &model, None)?;
    train_generator(&mut model, &examples, &TrainConfig {
        max_steps: steps,
        lr: 3e-3,
        ..TrainConfig::default()
    }, None)?;
    Ok(model)
}

/// Every held-out turn, seen by its speaker: (dialogue, 1-based turn, context).
pub fn held_out(s: &Setup) -> Vec<(usize, usize, PovContext)> {
    let mut out = Vec::new();
    for (di, d) in s.test.iter().enumerate() {
        for (j, u) in d.utterances.iter().enumerate() {
            out.push((di, j + 1, flatten_context(d, u.speaker, j, Prior::All).expect("valid turn")));
        }
    }
    out
}
