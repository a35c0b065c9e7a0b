//! Trains a left-to-right speaker classifier and evaluates it against the
//! two participants and against the whole character catalog.

use std::sync::Arc;

use charkeeper::classifier::*;
use charkeeper::corpus::*;
use charkeeper::neural::layers::Dims;
use charkeeper::tokenizer::*;
use charkeeper::training::*;

fn main() -> charkeeper::Result<()> {
    let corpus = generate_synthetic_corpus(&CorpusSpec {
        n_dialogues: 120,
        ..CorpusSpec::default()
    })?;
    let (train, test) = split_corpus(&corpus, 0.2, 1);
    let vocab = Arc::new(build_vocab(&train, 1)?);

    let full = build_rpa_dataset(&train, &vocab, &DatasetConfig::default())?;
    let ltr = build_ltr_dataset(&with_participant_pools(&full.examples));
    println!("{} full examples, {} prefixes", full.examples.len(), ltr.len());

    let dims = Dims {
        d_model: 32,
        heads: 2,
        layers: 1,
        ffn: 64,
    };
    let mut clf = RpaClassifier::new(ClassifierConfig::new(vocab.len(), dims), vocab.clone())?;
    let log = train_classifier(&mut clf, &ltr, &TrainConfig {
        max_steps: 1200,
        lr: 3e-3,
        ..TrainConfig::default()
    })?;
    for row in log.rows.iter().step_by(200) {
        println!("step {:>4} loss {:.4}", row.step, row.total);
    }

    let held_out = build_rpa_dataset(&test, &vocab, &DatasetConfig::default())?;
    let pairs = with_participant_pools(&held_out.examples);
    println!("hits@1/2   {:.3}", hits_at_1(&clf, &pairs, &PoolMode::Participants)?);
    let catalog = PoolMode::Catalog(character_catalog(&corpus));
    println!("hits@1/all {:.3}", hits_at_1(&clf, &pairs, &catalog)?);

    // Watch the prediction settle as an addressed candidate grows.
    let greetings = vocab.id(ADDRESS_WORD);
    let ex = pairs.iter().find(|e| e.candidate().first().copied() == greetings).unwrap_or(&pairs[0]);
    for len in 1..=ex.candidate().len() {
        let context = &ex.context[..ex.candidate_start + len];
        let p = clf.probabilities(context, &ex.pool)?;
        println!("{:<40} {} {:.2}", vocab.decode(&ex.candidate()[..len]), ex.pool[0], p[0]);
    }
    println!("true speaker: {}", ex.label);
    Ok(())
}
