use gpn::checkpoint::Checkpoint;
use gpn::synthdata::{generate_corpus, read_corpus, write_corpus, Vocabulary};
use gpn::trainer::{checkpoint_for, evaluate, model_from_checkpoint, train, EvalOptions, TrainSettings};
use gpn::ModelConfig;

fn setup() -> (Vocabulary, ModelConfig, TrainSettings) {
    let vocab = Vocabulary::standard();
    let cfg = ModelConfig {
        d_model: 16,
        vocab: vocab.len(),
        answers: vocab.num_answers(),
        ..ModelConfig::default()
    };
    let settings = TrainSettings {
        batch_size: 8,
        max_steps: 30,
        validate_every: 10,
        ..TrainSettings::default()
    };
    (vocab, cfg, settings)
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let (vocab, cfg, settings) = setup();
    let data = generate_corpus(&vocab, 0, 0..40, 0.1).unwrap();
    let run = || {
        let out = train(cfg.clone(), &settings, &data, None, &vocab, None).unwrap();
        Checkpoint::from_store(&out.model.store).to_bytes().unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    let other = TrainSettings {
        seed: 2,
        ..settings.clone()
    };
    let out = train(cfg.clone(), &other, &data, None, &vocab, None).unwrap();
    assert_ne!(a, Checkpoint::from_store(&out.model.store).to_bytes().unwrap());
}

#[test]
fn reloaded_checkpoint_evaluates_identically() {
    let (vocab, cfg, settings) = setup();
    let data = generate_corpus(&vocab, 0, 0..40, 0.1).unwrap();
    let test = generate_corpus(&vocab, 0, 500..520, 0.1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(cfg, &settings, &data, Some(&test), &vocab, Some(dir.path())).unwrap();
    let best = out.best.unwrap();
    let path = dir.path().join("kept.gpn");
    best.save(&path).unwrap();

    let before = model_from_checkpoint(&best, &vocab).unwrap();
    let after = model_from_checkpoint(&Checkpoint::load(&path).unwrap(), &vocab).unwrap();
    let opts = EvalOptions::default();
    let (r1, g1) = evaluate(&before, &vocab, &test, &opts).unwrap();
    let (r2, g2) = evaluate(&after, &vocab, &test, &opts).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(g1, g2);
    assert!(dir.path().join("run_record.jsonl").exists());
}

#[test]
fn corpus_file_round_trip_is_bitwise() {
    let vocab = Vocabulary::standard();
    let corpus = generate_corpus(&vocab, 4, 0..25, 0.3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.gpnc");
    write_corpus(&corpus, &path).unwrap();
    let back = read_corpus(&path).unwrap();
    assert_eq!(back.examples.len(), corpus.examples.len());
    for (a, b) in back.examples.iter().zip(&corpus.examples) {
        assert_eq!(a.features.frames.data(), b.features.frames.data());
        assert_eq!(a.features.objects.data(), b.features.objects.data());
        assert_eq!(
            (a.scene_id, a.question_type, a.answer),
            (b.scene_id, b.question_type, b.answer)
        );
        assert_eq!(a.question, b.question);
    }
    assert_eq!(back.scenes, corpus.scenes);
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let (vocab, cfg, _) = setup();
    let model = gpn::Gpn::new(
        ModelConfig {
            vocab: cfg.vocab + 1,
            ..cfg
        },
        1,
    )
    .unwrap();
    let ck = checkpoint_for(&model, &vocab, 0).unwrap();
    let err = model_from_checkpoint(&ck, &vocab).unwrap_err();
    assert!(err.to_string().contains("vocab"), "{err}");
}
