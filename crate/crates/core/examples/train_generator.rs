//! Trains a small encoder-decoder on synthetic dialogue and samples replies.

use charkeeper::corpus::*;
use charkeeper::decoding::*;
use charkeeper::eval::*;
use charkeeper::model::*;
use charkeeper::neural::layers::Dims;
use charkeeper::tokenizer::*;
use charkeeper::training::*;

fn main() -> charkeeper::Result<()> {
    let corpus = generate_synthetic_corpus(&CorpusSpec {
        n_dialogues: 120,
        ..CorpusSpec::default()
    })?;
    let (train, test) = split_corpus(&corpus, 0.2, 1);
    let vocab = build_vocab(&train, 1)?;

    let mut mc = ModelConfig::new(
        vocab.len(),
        Dims {
            d_model: 32,
            heads: 2,
            layers: 1,
            ffn: 64,
        },
    );
    mc.max_ctx_tokens = 32;
    let mut model = Seq2Seq::new(mc, vocab.hash())?;
    println!("{} parameters", model.num_params());

    let examples = build_gen_examples(&train, &vocab, &model, None)?;
    let held_out = build_gen_examples(&test, &vocab, &model, None)?;
    let set: Vec<(GenInput, Vec<usize>)> = held_out.iter().map(|e| (e.input.clone(), e.target.0.clone())).collect();
    println!("held-out ppl before {:.2}", perplexity(&model, &set)?);
    train_generator(&mut model, &examples, &TrainConfig {
        max_steps: 800,
        lr: 3e-3,
        ..TrainConfig::default()
    }, None)?;
    println!("held-out ppl after  {:.2}\n", perplexity(&model, &set)?);

    for ex in held_out.iter().take(4) {
        let reply = greedy_decode(&model, &ex.input, 12)?;
        let hyp = vocab.decode_text(&reply);
        let gold = vocab.decode_text(&ex.target);
        println!("{:>8} said  {gold}", ex.ctx.self_name);
        println!("{:>8} model {hyp}  (F1 {:.2})", "", f1_metric(&hyp, &gold));
    }
    let path = std::env::temp_dir().join("charkeeper_generator.json");
    model.save(&path)?;
    println!("\nsaved to {}", path.display());
    Ok(())
}
