//! Generates a small synthetic corpus, checks it and prints one dialogue.

use charkeeper::corpus::*;

fn main() -> charkeeper::Result<()> {
    let spec = CorpusSpec {
        n_dialogues: 40,
        n_roles: 6,
        ..CorpusSpec::default()
    };
    let world = SyntheticWorld::new(&spec)?;
    for role in &world.roles {
        println!("{:<8} lexicon {:?}", role.name, role.lexicon);
    }

    let corpus = generate_synthetic_corpus(&spec)?;
    for d in &corpus {
        d.validate().expect("generated dialogues are well formed");
    }
    let (train, test) = split_corpus(&corpus, 0.2, spec.seed);
    println!("\n{} dialogues: {} train, {} held out\n", corpus.len(), train.len(), test.len());

    let d = &corpus[0];
    println!("{} ({})", d.setting_name, d.setting_desc);
    for c in &d.characters {
        println!("  {}: {}", c.name, c.persona);
    }
    for (i, u) in d.utterances.iter().enumerate() {
        println!("  {:>8}: {}", d.speaker_name(i), u.text);
    }

    let path = std::env::temp_dir().join("charkeeper_corpus.jsonl");
    save_dialogues(&path, &corpus)?;
    assert_eq!(load_dialogues(&path)?, corpus);
    println!("\nround-tripped through {}", path.display());
    Ok(())
}
