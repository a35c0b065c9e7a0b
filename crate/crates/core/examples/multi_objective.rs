//! Adds a character-scoring head to a generator: stage 1 trains the head
//! alone, stage 2 trains everything jointly.

mod common;

use charkeeper::classifier::character_catalog;
use charkeeper::model::*;
use charkeeper::training::*;

fn main() -> charkeeper::Result<()> {
    let s = common::setup(80, 0)?;
    let mut mc = ModelConfig::new(s.vocab.len(), common::dims());
    mc.max_ctx_tokens = 64;
    mc.mo = Some(MoConfig {
        layers: 2,
        input: MoInput::EncDec,
    });
    let mut model = Seq2Seq::new(mc, s.vocab.hash())?;
    let train = build_gen_examples(&s.train, &s.vocab, &model, None)?;
    train_generator(&mut model, &train, &TrainConfig {
        max_steps: 400,
        lr: 3e-3,
        ..TrainConfig::default()
    }, None)?;

    let catalog = character_catalog(&s.train);
    let pools = build_character_examples(&train, &s.vocab, &catalog, 10, 0);
    let test = build_gen_examples(&s.test, &s.vocab, &model, None)?;
    let test_pools = build_character_examples(&test, &s.vocab, &catalog, 10, 1);
    println!("hits@1/10 untrained head {:.3}", character_hits_at_1(&model, &test_pools)?);

    let err = mo_staged_train(&mut model.clone(), &pools, MoStage::Joint, &TrainConfig::default(), false);
    println!("stage 2 before stage 1: {}", err.err().map(|e| e.to_string()).unwrap_or_default());

    let base = model.base_params();
    let snapshot: Vec<Vec<f32>> = base.iter().map(|&id| model.params.value(id).data().to_vec()).collect();
    mo_staged_train(&mut model, &pools, MoStage::HeadOnly, &TrainConfig {
        max_steps: 300,
        lr: 3e-3,
        ..TrainConfig::default()
    }, false)?;
    let untouched = base.iter().zip(&snapshot).all(|(&id, v)| model.params.value(id).data() == v.as_slice());
    println!("stage 1: hits@1/10 {:.3}, base parameters untouched: {untouched}", character_hits_at_1(&model, &test_pools)?);

    mo_staged_train(&mut model, &pools, MoStage::Joint, &TrainConfig {
        max_steps: 100,
        lr: 1e-3,
        mo_loss_weight: 0.5,
        ..TrainConfig::default()
    }, false)?;
    println!("stage 2: hits@1/10 {:.3}", character_hits_at_1(&model, &test_pools)?);
    Ok(())
}
