use gpn::synthdata::{
    corpus_from_bytes, corpus_to_bytes, gen_qa, gen_scene, generate_corpus, oracle_answer, OracleVerdict, Vocabulary,
    QUESTION_TYPES, TAGS,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn oracle_answers_every_generated_question(seed in 0u64..1000, id in 0u64..1_000_000) {
        let vocab = Vocabulary::standard();
        let scene = gen_scene(seed, id);
        scene.validate().unwrap();
        for t in 0..QUESTION_TYPES {
            if let Some((q, a)) = gen_qa(&vocab, &scene, t).unwrap() {
                prop_assert_eq!(oracle_answer(&vocab, &scene, &q), OracleVerdict::Answer(a));
            }
        }
    }
}

#[test]
fn corpus_oracle_round_trip_is_total() {
    let vocab = Vocabulary::standard();
    let corpus = generate_corpus(&vocab, 3, 0..400, 0.1).unwrap();
    for e in &corpus.examples {
        let scene = corpus.scene(e.scene_id).unwrap();
        assert_eq!(
            oracle_answer(&vocab, scene, &e.question),
            OracleVerdict::Answer(e.answer)
        );
    }
}

#[test]
fn generation_is_a_pure_function_of_its_inputs() {
    let vocab = Vocabulary::standard();
    let bytes = |seed, sigma| corpus_to_bytes(&generate_corpus(&vocab, seed, 10..40, sigma).unwrap()).unwrap();
    let a = bytes(5, 0.1);
    assert_eq!(a, bytes(5, 0.1));
    assert_ne!(a, bytes(6, 0.1));
    assert_ne!(a, bytes(5, 0.2));
    assert_eq!(corpus_to_bytes(&corpus_from_bytes(&a).unwrap()).unwrap(), a);
}

/// Mean-pooled frame and object features of every scene, and its tag.
fn pooled(vocab: &Vocabulary, ids: std::ops::Range<u64>) -> (Vec<Vec<f64>>, Vec<usize>) {
    let corpus = generate_corpus(vocab, 0, ids, 0.1).unwrap();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for scene in &corpus.scenes {
        let e = corpus.examples.iter().find(|e| e.scene_id == scene.scene_id).unwrap();
        let f = &e.features;
        let n = f.n() as f64;
        let mut x = vec![0.0; f.frames.cols() + f.objects.cols()];
        for r in 0..f.n() {
            let row = f.frames.row_slice(r).iter().chain(f.objects.row_slice(r));
            x.iter_mut().zip(row).for_each(|(a, b)| *a += b / n);
        }
        xs.push(x);
        ys.push(scene.tag);
    }
    (xs, ys)
}

#[test]
fn scene_tag_is_linearly_decodable() {
    let vocab = Vocabulary::standard();
    let (train_x, train_y) = pooled(&vocab, 0..2000);
    let (test_x, test_y) = pooled(&vocab, 100_000..100_500);
    let (dim, k) = (train_x[0].len(), TAGS.len());

    // multinomial logistic regression, full-batch gradient descent
    let mut w = vec![0.0; dim * k];
    let lr = 0.5;
    for _ in 0..150 {
        let mut grad = vec![0.0; dim * k];
        for (x, &y) in train_x.iter().zip(&train_y) {
            let mut z: Vec<f64> = (0..k).map(|c| (0..dim).map(|d| x[d] * w[d * k + c]).sum()).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            z.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s: f64 = z.iter().sum();
            for c in 0..k {
                let err = z[c] / s - f64::from(u8::from(c == y));
                for d in 0..dim {
                    grad[d * k + c] += err * x[d];
                }
            }
        }
        let n = train_x.len() as f64;
        w.iter_mut().zip(&grad).for_each(|(a, g)| *a -= lr * g / n);
    }
    let predict = |x: &[f64]| {
        (0..k)
            .map(|c| (0..dim).map(|d| x[d] * w[d * k + c]).sum::<f64>())
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0
    };
    let hits = test_x.iter().zip(&test_y).filter(|(x, &y)| predict(x) == y).count();
    let acc = hits as f64 / test_x.len() as f64;
    assert!(acc >= 0.95, "held-out tag accuracy {acc}");
}
