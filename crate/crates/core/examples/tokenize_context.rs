//! Builds a vocabulary and shows how a speaker's view of a dialogue is
//! serialized, field by field.

use charkeeper::corpus::*;
use charkeeper::tokenizer::*;

fn main() -> charkeeper::Result<()> {
    let corpus = generate_synthetic_corpus(&CorpusSpec {
        n_dialogues: 20,
        ..CorpusSpec::default()
    })?;
    let vocab = build_vocab(&corpus, 1)?;
    println!("{} tokens ({} reserved), hash {}", vocab.len(), RESERVED.len(), &vocab.hash()[..16]);

    let d = &corpus[0];
    let speaker = d.utterances[3].speaker;
    let ctx = flatten_context(d, speaker, 3, Prior::All)?;
    let (seq, spans) = serialize_with_spans(&ctx, &vocab, FieldSet::ALL);
    for span in &spans {
        println!("{:?}: {}", span.kind, vocab.decode(&seq[span.range.clone()]));
    }

    for subset in ["A", "BC", "ABCD"] {
        let fields = FieldSet::parse(subset)?;
        let s = serialize_context(&ctx, &vocab, fields);
        println!("{subset:>4} -> {} tokens", s.len());
    }

    let short = truncate_left(&seq, 8);
    println!("last 8 tokens: {}", vocab.decode(&short));
    println!("unknown word -> {:?}", vocab.encode("zzyzx").into_vec());
    Ok(())
}
