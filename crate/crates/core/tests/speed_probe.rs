// temporary sizing probe (removed before finalizing)
use scenegcn_core::config::ExperimentConfig;
use scenegcn_core::relation::{RelationEncoderSpec, RelationGenConfig, SyntheticRelationData};
use scenegcn_core::rng;
use scenegcn_core::synthetic::{generate_dataset, EdgeProvider, QuestionFamily, SceneGenConfig};
use scenegcn_core::train::{prepare_scenes, train_vqa, RelationData};
use std::time::Instant;

#[test]
#[ignore]
fn probe_vqa_epoch_speed() {
    let ds = generate_dataset(&SceneGenConfig {
        scenes: 400,
        objects_min: 4,
        objects_max: 5,
        families: vec![QuestionFamily::Relation],
        questions_per_scene: 1,
        holdout_fraction: 0.1,
        seed: 1,
        ..SceneGenConfig::default()
    })
    .unwrap();
    println!("train questions: {} val: {}", ds.train.len(), ds.val.len());
    let provider = EdgeProvider::Idealized { width: 512 };
    let t0 = Instant::now();
    let prepared = prepare_scenes(&ds, &provider).unwrap();
    println!("prepare (idealized): {:?}", t0.elapsed());
    let cfg = ExperimentConfig::from_json(
        r#"{
        "variant": "scenegcn", "d": 32, "d_q": 32, "d_f": 32,
        "batch_size": 32, "epochs": 1, "lr": 0.002, "seed": 1,
        "data_dir": "/tmp/x", "out_dir": "/tmp/x", "edge_source": "idealized"
    }"#,
    )
    .unwrap();
    let t0 = Instant::now();
    let out = train_vqa(&cfg, &ds, &prepared, None, None).unwrap();
    println!(
        "one epoch over {} examples: {:?}  loss {:.4} val acc {:.3}",
        ds.train.len(),
        t0.elapsed(),
        out.logs[0].mean_loss,
        out.logs[0].eval.as_ref().unwrap().overall_accuracy
    );
}

#[test]
#[ignore]
fn probe_encoder_speed() {
    let preds: Vec<String> = (0..20).map(|i| format!("pred {i:02}")).collect();
    let cats: Vec<String> = (0..12).map(|i| format!("cat{i}")).collect();
    let data = SyntheticRelationData::generate(RelationGenConfig {
        predicates: preds,
        categories: cats,
        samples_per_predicate: 32,
        channels: 16,
        noise: 0.1,
        seed: 2,
    })
    .unwrap();
    let spec = RelationEncoderSpec::default();
    let mut params = scenegcn_core::params::ModelParams::new();
    let mut stream = rng::seeded(3);
    // vocab over all tokens
    let rd = RelationData::Synthetic(data.clone());
    let vocab = scenegcn_core::text::Vocabulary::from_corpus(
        data.cfg.predicates.iter().chain(data.cfg.categories.iter()).flat_map(|s| s.split_whitespace()),
    );
    spec.init(&mut params, vocab.len(), &mut stream);
    let cfg_loss = scenegcn_core::relation::RelationLossConfig { n_pos: 64, n_neg: 32, ..Default::default() };
    let samples: Vec<_> = (0..64).map(|i| rd.get(i)).collect();
    let t0 = Instant::now();
    let mut tape = scenegcn_core::tape::Tape::new();
    let bound = params.bind(&mut tape);
    let branches = scenegcn_core::relation::batch_forward(&spec, &mut tape, &bound, &samples, &vocab).unwrap();
    let (loss, _) = scenegcn_core::relation::total_relation_loss(
        &mut tape,
        [&branches[0], &branches[1], &branches[2]],
        &cfg_loss,
        &mut stream,
    )
    .unwrap();
    tape.backward(loss).unwrap();
    println!("one 64-sample batch fwd+bwd (n_neg 32): {:?}, nodes {}", t0.elapsed(), tape.num_nodes());
}
