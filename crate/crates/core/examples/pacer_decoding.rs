//! Compares plain beam search, complete re-ranking and PACER at several
//! re-scoring frequencies, with the classifier-call cost of each.

mod common;

use charkeeper::decoding::*;
use charkeeper::model::*;

fn main() -> charkeeper::Result<()> {
    let s = common::setup(120, 1200)?;
    let model = common::generator(&s, 8, ExpandedAttentionConfig::default(), 600)?;
    let contexts: Vec<_> = common::held_out(&s).into_iter().filter(|c| c.1 > 2).take(3).collect();

    let configs = [
        ("beam", Reranker::None, 1.0),
        ("complete", Reranker::Complete, 1.0),
        ("pacer .05", Reranker::Pacer, 0.05),
        ("pacer .33", Reranker::Pacer, 0.33),
        ("pacer 1.0", Reranker::Pacer, 1.0),
    ];
    for (_, _, ctx) in &contexts {
        let (input, _) = build_gen_input(&model.config, ctx, &s.vocab, None)?;
        let dc = DecodeContext::new(&model, &input)?;
        let judge = CharacterJudge::new(&s.clf, ctx);
        println!("{} speaking to {}", ctx.self_name, ctx.partner_name);
        let mut baseline = None;
        for (label, reranker, freq) in configs {
            let cfg = DecodeConfig {
                beam_size: 5,
                max_len: 12,
                reranker,
                pacer_freq: freq,
                pacer_toks: 10,
                ..DecodeConfig::default()
            };
            let (hyps, ledger) = decode(&dc, Some(&judge), &cfg)?;
            let base = baseline.get_or_insert_with(|| ledger.clone());
            let best = &hyps[0];
            println!(
                "  {label:<10} cost {:>5.2}x  p(self) {:.2}  {}",
                ledger.relative_cost(base, 1.0),
                judge.p_self(best.text_tokens())?,
                s.vocab.decode_text(best.text_tokens())
            );
        }
    }
    Ok(())
}
