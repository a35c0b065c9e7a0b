//! Exports cross-attention and expanded-attention heatmaps for one reply.

mod common;

use charkeeper::decoding::*;
use charkeeper::eval::*;
use charkeeper::model::*;
use charkeeper::tokenizer::*;

fn main() -> charkeeper::Result<()> {
    let s = common::setup(80, 0)?;
    let model = common::generator(&s, 16, ExpandedAttentionConfig::profile(FieldSet::parse("AB")?, 1), 500)?;
    let (_, _, ctx) = common::held_out(&s).swap_remove(5);
    let (input, _) = build_gen_input(&model.config, &ctx, &s.vocab, None)?;
    let reply = greedy_decode(&model, &input, 10)?;
    let encoded = model.prepare(&input)?;
    let cols: Vec<String> = reply.iter().map(|&t| s.vocab.decode(&[t])).collect();
    let dir = std::env::temp_dir();

    let cross = export_attention_heatmap(&model, &encoded, &reply, HeatmapKind::Cross)?;
    let rows: Vec<String> = input.context.iter().map(|&t| s.vocab.decode(&[t])).collect();
    save_text(dir.join("cross.svg"), &cross.to_svg(&rows, &cols))?;

    let expanded = export_attention_heatmap(&model, &encoded, &reply, HeatmapKind::Expanded)?;
    let subset = input.profile.clone().unwrap_or_default();
    let rows: Vec<String> = subset.iter().map(|&t| s.vocab.decode(&[t])).collect();
    save_text(dir.join("expanded.svg"), &expanded.to_svg(&rows, &cols))?;
    let mut csv = Vec::new();
    expanded.write_csv(&mut csv)?;
    save_text(dir.join("expanded.csv"), &String::from_utf8_lossy(&csv))?;

    println!("reply: {}", s.vocab.decode_text(&reply));
    for (r, label) in rows.iter().enumerate() {
        let peak = (0..expanded.cols).map(|c| expanded.get(r, c)).fold(0.0, f64::max);
        println!("{label:>12} {}", "#".repeat((peak * 40.0).round() as usize));
    }
    println!("heatmaps written to {}", dir.display());
    Ok(())
}
