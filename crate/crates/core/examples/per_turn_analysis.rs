//! RPA per dialogue turn for a short-context generator with and without
//! profile grounding, written as CSV and SVG.

mod common;

use charkeeper::decoding::*;
use charkeeper::eval::*;
use charkeeper::model::*;
use charkeeper::tokenizer::FieldSet;

fn report(model: &Seq2Seq, s: &common::Setup) -> charkeeper::Result<RpaReport> {
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
    rpa_metric(&items, &s.clf, &s.vocab)
}

fn main() -> charkeeper::Result<()> {
    let s = common::setup(200, 1200)?;
    let baseline = common::generator(&s, 8, ExpandedAttentionConfig::default(), 1000)?;
    let grounded = common::generator(&s, 8, ExpandedAttentionConfig::profile(FieldSet::parse("ABCD")?, 1), 1000)?;
    let rb = report(&baseline, &s)?;
    let rg = report(&grounded, &s)?;
    println!("RPA baseline {:.1}, profile-grounded {:.1}", rb.rpa, rg.rpa);

    let rows = per_turn_report(&rb, &rg)?;
    let mut csv = Vec::new();
    write_per_turn_csv(&mut csv, &rows)?;
    print!("{}", String::from_utf8_lossy(&csv));
    let dir = std::env::temp_dir();
    save_text(dir.join("per_turn.csv"), &String::from_utf8_lossy(&csv))?;
    save_text(dir.join("per_turn.svg"), &per_turn_svg(&rows))?;
    println!("wrote per_turn.csv and per_turn.svg to {}", dir.display());
    Ok(())
}
