//! Flags tokens of greedy generations that the classifier attributes to the
//! partner, then fine-tunes with the unlikelihood term.

mod common;

use charkeeper::decoding::*;
use charkeeper::eval::*;
use charkeeper::model::*;
use charkeeper::training::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rpa(model: &Seq2Seq, s: &common::Setup) -> charkeeper::Result<f64> {
    let mut items = Vec::new();
    for (i, (_, turn, ctx)) in common::held_out(s).into_iter().enumerate() {
        let (input, _) = build_gen_input(&model.config, &ctx, &s.vocab, None)?;
        items.push(EvalItem {
            context_id: i,
            turn,
            response: greedy_decode(model, &input, 12)?,
            ctx,
        });
    }
    Ok(rpa_metric(&items, &s.clf, &s.vocab)?.rpa)
}

fn main() -> charkeeper::Result<()> {
    let s = common::setup(120, 1200)?;
    let mut model = common::generator(&s, 8, ExpandedAttentionConfig::default(), 600)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let mut shown = 0;
    for (_, _, ctx) in common::held_out(&s) {
        let (input, _) = build_gen_input(&model.config, &ctx, &s.vocab, None)?;
        let gen = greedy_decode(&model, &input, 12)?;
        let all = ul_flag_tokens(&s.clf, &ctx, &gen, UlMode::All, &mut rng)?;
        if all.is_empty() {
            continue;
        }
        println!("{} > {}", ctx.self_name, s.vocab.decode_text(&gen));
        for mode in [UlMode::Top1, UlMode::All, UlMode::Random3] {
            let flags = ul_flag_tokens(&s.clf, &ctx, &gen, mode, &mut rng)?;
            let words: Vec<String> = flags.positions.iter().map(|&t| s.vocab.decode(&gen[t..=t])).collect();
            println!("  {mode:?}: {words:?}");
        }
        shown += 1;
        if shown == 3 {
            break;
        }
    }

    println!("\nRPA before fine-tuning {:.1}", rpa(&model, &s)?);
    let examples = build_gen_examples(&s.train, &s.vocab, &model, None)?;
    let cfg = TrainConfig {
        max_steps: 200,
        lr: 1e-3,
        ul_mode: UlMode::Top1,
        ul_probability: 0.5,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut plain = model.clone();
    train_generator(&mut plain, &examples, &cfg, None)?;
    println!("likelihood only        {:.1}", rpa(&plain, &s)?);
    let log = train_generator(&mut model, &examples, &cfg, Some(UlSetup { classifier: &s.clf }))?;
    let ul: f64 = log.rows.iter().map(|r| r.ul).sum::<f64>() / log.rows.len() as f64;
    println!("with unlikelihood      {:.1} (mean UL term {ul:.3})", rpa(&model, &s)?);
    Ok(())
}
