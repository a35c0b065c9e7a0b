//! Finite-difference check of the generator and classifier gradients in f64.

use std::sync::Arc;

use charkeeper::classifier::*;
use charkeeper::corpus::*;
use charkeeper::model::*;
use charkeeper::neural::layers::Dims;
use charkeeper::neural::{grad_check, GradCheckConfig, NeuralError};
use charkeeper::tokenizer::*;

fn main() -> charkeeper::Result<()> {
    let corpus = generate_synthetic_corpus(&CorpusSpec {
        n_dialogues: 6,
        n_roles: 4,
        turns_per_dialogue: 4,
        ..CorpusSpec::default()
    })?;
    let vocab = Arc::new(build_vocab(&corpus, 1)?);
    let dims = Dims {
        d_model: 8,
        heads: 2,
        layers: 1,
        ffn: 16,
    };
    let d = &corpus[0];
    let ctx = flatten_context(d, d.utterances[2].speaker, 2, Prior::All)?;
    let target = vocab.encode(&d.utterances[2].text).into_vec();
    let cfg = GradCheckConfig::default();
    let to_neural = |e: charkeeper::CoreError| NeuralError::Shape(e.to_string());

    for (label, expanded) in [
        ("baseline", ExpandedAttentionConfig::default()),
        ("profile r=2", ExpandedAttentionConfig::profile(FieldSet::parse("ABCD")?, 2)),
    ] {
        let mut mc = ModelConfig::new(vocab.len(), dims);
        mc.max_ctx_tokens = 24;
        mc.expanded = expanded;
        let model = Seq2Seq::<f32>::new(mc, vocab.hash())?;
        let (input, _) = build_gen_input(&model.config, &ctx, &vocab, None)?;
        let m64 = model.cast::<f64>();
        let report = grad_check(&m64.params, |g| Ok(m64.nll(g, &input, &target).map_err(to_neural)?.0), &cfg)?;
        println!("{label:<12} {} entries, max relative error {:.2e}", report.checked, report.max_rel_error);
    }

    let full = build_rpa_dataset(&corpus, &vocab, &DatasetConfig {
        n_prior: Prior::Count(1),
        ..DatasetConfig::default()
    })?;
    let clf = RpaClassifier::<f32>::new(ClassifierConfig::new(vocab.len(), dims), vocab.clone())?.cast::<f64>();
    let ex = &with_participant_pools(&full.examples)[0];
    let report = grad_check(&clf.params, |g| clf.loss(g, ex).map_err(to_neural), &cfg)?;
    println!("{:<12} {} entries, max relative error {:.2e}", "classifier", report.checked, report.max_rel_error);
    Ok(())
}
