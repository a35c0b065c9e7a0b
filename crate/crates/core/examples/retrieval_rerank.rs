//! Retrieval dialogue: rank a bank of training utterances for each context,
//! optionally re-ranking the top 10 by the speaker classifier.

mod common;

use std::collections::HashSet;

use charkeeper::classifier::*;
use charkeeper::corpus::*;
use charkeeper::decoding::*;
use charkeeper::tokenizer::TokenSeq;
use charkeeper::training::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> charkeeper::Result<()> {
    let s = common::setup(200, 1200)?;
    let mut entries = Vec::new();
    let mut examples = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for d in &s.train {
        for (j, u) in d.utterances.iter().enumerate() {
            entries.push(BankEntry {
                text: u.text.clone(),
                tokens: s.vocab.encode(&u.text),
                speaker: d.speaker_name(j).to_string(),
            });
        }
    }

    // The ranker is a poly-encoder over utterance text: the true next
    // utterance against 7 random bank lines.
    let mut ranker = RpaClassifier::new(ClassifierConfig::new(s.vocab.len(), common::dims()), s.vocab.clone())?;
    for d in &s.train {
        for (j, u) in d.utterances.iter().enumerate().skip(1) {
            let ctx = flatten_context(d, u.speaker, j, Prior::All)?;
            let mut pool = vec![u.text.clone()];
            while pool.len() < 8 {
                let other = &entries[rng.gen_range(0..entries.len())].text;
                if !pool.contains(other) {
                    pool.push(other.clone());
                }
            }
            pool.shuffle(&mut rng);
            let context = TokenSeq(classifier_context(&ctx, &s.vocab, ranker.config.n_prior));
            examples.push(RpaExample {
                candidate_start: context.len(),
                prefix_len: 0,
                context,
                label: u.text.clone(),
                pool,
                is_partial: false,
                participants: [ctx.self_name.clone(), ctx.partner_name.clone()],
                dialogue: 0,
                pov: 0,
                turn: j,
            });
        }
    }
    train_classifier(&mut ranker, &examples, &TrainConfig {
        max_steps: 100,
        lr: 3e-3,
        ..TrainConfig::default()
    })?;

    let mut seen = HashSet::new();
    entries.retain(|e| seen.insert(e.text.clone()));
    let bank = ResponseBank::new(&ranker, entries)?;
    let contexts: Vec<_> = common::held_out(&s).into_iter().filter(|c| c.1 > 1).take(100).collect();
    let (mut plain, mut reranked) = (0, 0);
    for (i, (_, _, ctx)) in contexts.iter().enumerate() {
        let judge = CharacterJudge::new(&s.clf, ctx);
        let a = retrieval_respond(&ranker, &bank, ctx, None)?;
        let b = retrieval_respond(&ranker, &bank, ctx, Some((&judge, 10)))?;
        plain += a.partner_said as usize;
        reranked += b.partner_said as usize;
        if i < 3 {
            println!("{} to {}", ctx.self_name, ctx.partner_name);
            println!("  ranker   {}", a.text);
            println!("  reranked {}", b.text);
        }
    }
    println!("partner-said responses: {plain}/{} plain, {reranked}/{} re-ranked", contexts.len(), contexts.len());
    Ok(())
}
