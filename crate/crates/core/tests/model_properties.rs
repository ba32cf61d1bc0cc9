mod common;

use common::*;
use gpn::jqag::{select_answer, AnswerDistribution, TokenSequence};
use gpn::optim::{AdamConfig, AdamState};
use gpn::pretester::{kl_divergence, LossWeights};
use gpn::{Ablation, Batch, Gpn, Graph, ModelConfig, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn softmax(x: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.input(Tensor::row(x));
    let p = g.softmax(v).unwrap();
    g.value(p).data().to_vec()
}

fn v_final(model: &Gpn, frames: &Tensor, objects: &Tensor, ty: usize, n: usize) -> Tensor {
    let mut g = Graph::new();
    let f = g.constant(frames.clone());
    let o = g.constant(objects.clone());
    let sw = Ablation::default().switches(model.config.positional_encoding);
    let out = model.encoder.forward(&mut g, &model.store, f, o, &[ty], n, sw).unwrap();
    g.value(out.v_final).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn proposal_and_sheet_are_on_the_simplex(seed in 0u64..10_000, b in 1usize..4, n in 1usize..5) {
        let model = Gpn::new(small_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let batch = batch(&mut rng, b, n);
        let mut g = Graph::new();
        let f = model.forward_train(&mut g, &batch, LossWeights::default(), Ablation::default()).unwrap();
        for v in [f.ap, f.aq.unwrap()] {
            let t = g.value(v);
            for r in 0..t.rows() {
                let row = t.row_slice(r);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn select_answer_ignores_shifts_and_monotone_maps(
        logits in prop::collection::vec(-5.0f64..5.0, 2..40),
        shift in -50.0f64..50.0,
        scale in 0.1f64..5.0,
    ) {
        let mut sorted = logits.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assume!(sorted[0] - sorted[1] > 1e-6);
        let pick = |x: Vec<f64>| select_answer(&AnswerDistribution::new(softmax(&x)).unwrap());
        let base = pick(logits.clone());
        prop_assert_eq!(base, pick(logits.iter().map(|x| x + shift).collect()));
        prop_assert_eq!(base, pick(logits.iter().map(|x| scale * x - shift).collect()));
        prop_assert_eq!(base, pick(logits.iter().map(|x| x * x * x + x).collect()));
        prop_assert_eq!(base, pick(logits.iter().map(|x| x.tanh()).collect()));
    }

    #[test]
    fn encoder_without_pe_is_permutation_invariant(seed in 0u64..10_000, n in 2usize..7) {
        let cfg = ModelConfig { positional_encoding: false, ..small_config() };
        let model = Gpn::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = features(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let a = v_final(&model, &feat.frames, &feat.objects, 1, n);
        let b = v_final(&model, &permute_rows(&feat.frames, &perm), &permute_rows(&feat.objects, &perm), 1, n);
        prop_assert!(a.max_abs_diff(&b) <= 1e-9);
    }

    #[test]
    fn clip_embedding_has_model_width_for_any_length(seed in 0u64..1000, n in 1usize..9) {
        let model = Gpn::new(small_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = features(&mut rng, n);
        let v = v_final(&model, &feat.frames, &feat.objects, 0, n);
        prop_assert_eq!(v.shape(), &[1, 16][..]);
    }
}

#[test]
fn positional_encoding_breaks_permutation_invariance() {
    let mut changed = 0;
    for seed in 0..100u64 {
        let model = Gpn::new(small_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let feat = features(&mut rng, n);
        let perm = [1, 0, 2, 3, 4];
        let a = v_final(&model, &feat.frames, &feat.objects, 2, n);
        let b = v_final(
            &model,
            &permute_rows(&feat.frames, &perm),
            &permute_rows(&feat.objects, &perm),
            2,
            n,
        );
        changed += usize::from(a.max_abs_diff(&b) > 1e-12);
    }
    assert!(changed >= 99, "{changed}/100");
}

#[test]
fn controller_columns_select_different_embeddings() {
    for seed in 0..20u64 {
        let model = Gpn::new(small_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = features(&mut rng, 4);
        let outs: Vec<Tensor> = (0..5)
            .map(|t| v_final(&model, &feat.frames, &feat.objects, t, 4))
            .collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert!(outs[i].max_abs_diff(&outs[j]) > 1e-12, "seed {seed}: types {i} and {j}");
            }
        }
    }
}

#[test]
fn one_backward_reaches_every_parameter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = Gpn::new(small_config(), 3).unwrap();
    let batch = batch(&mut rng, 3, 4);
    model
        .loss_and_grad(&batch, LossWeights::default(), Ablation::default())
        .unwrap();
    assert!(model.store.untouched().is_empty(), "{:?}", model.store.untouched());
}

#[test]
fn question_embedding_depends_on_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Gpn::new(small_config(), 5).unwrap();
    let feat = features(&mut rng, 3);
    let q_emb = |q: &TokenSequence| {
        let batch = Batch::from_examples([(&feat, 0, q, 1)]).unwrap();
        let mut g = Graph::new();
        let f = model
            .forward_train(&mut g, &batch, LossWeights::default(), Ablation::default())
            .unwrap();
        g.value(f.q_emb).clone()
    };
    let a = q_emb(&TokenSequence::from_words(&[4, 5, 6]));
    let b = q_emb(&TokenSequence::from_words(&[7, 5, 6]));
    assert!(a.max_abs_diff(&b) > 1e-9);
}

#[test]
fn repeated_example_is_memorized() {
    for seed in 1..=3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Gpn::new(small_config(), seed).unwrap();
        let batch = batch(&mut rng, 1, 3);
        let mut adam = AdamState::for_store(AdamConfig::default(), &model.store).unwrap();
        let mut last = f64::INFINITY;
        for step in 0..100 {
            model.store.zero_grad();
            let r = model
                .loss_and_grad(&batch, LossWeights::default(), Ablation::default())
                .unwrap();
            assert!(r.l_qg < last, "seed {seed} step {step}: {} then {}", last, r.l_qg);
            last = r.l_qg;
            adam.step_store(&mut model.store).unwrap();
        }
    }
}

#[test]
fn loss_reports_compose_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = Gpn::new(small_config(), 8).unwrap();
    for (c, a) in [(0.25, 0.75), (0.0, 1.0), (1.0, 0.0), (0.5, 0.5)] {
        let w = LossWeights::new(c, a).unwrap();
        let batch = batch(&mut rng, 4, 3);
        let mut g = Graph::new();
        let f = model.forward_train(&mut g, &batch, w, Ablation::default()).unwrap();
        let r = Gpn::report(&g, &f, w);
        assert!(r.identities_hold(), "{r:?}");
        assert!(r.l_c.unwrap() >= 0.0);
    }
}

#[test]
fn kl_is_nonnegative_on_model_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = Gpn::new(small_config(), 9).unwrap();
    let batch = batch(&mut rng, 16, 3);
    let mut g = Graph::new();
    let f = model
        .forward_train(&mut g, &batch, LossWeights::default(), Ablation::default())
        .unwrap();
    let (ap, aq) = (g.value(f.ap), g.value(f.aq.unwrap()));
    for r in 0..ap.rows() {
        assert!(kl_divergence(aq.row_slice(r), ap.row_slice(r)) >= 0.0);
        assert!(kl_divergence(ap.row_slice(r), aq.row_slice(r)) >= 0.0);
        assert_eq!(kl_divergence(ap.row_slice(r), ap.row_slice(r)), 0.0);
    }
}

#[test]
fn consistency_gradient_reaches_both_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = Gpn::new(small_config(), 10).unwrap();
    let batch = batch(&mut rng, 3, 3);
    let mut g = Graph::new();
    let f = model
        .forward_train(&mut g, &batch, LossWeights::default(), Ablation::default())
        .unwrap();
    let grads = g.backward(f.l_c.unwrap()).unwrap();
    let norm = |name: &str| -> f64 {
        let id = model.store.id(name).unwrap();
        grads
            .param_grads()
            .find(|(p, _)| *p == id)
            .map_or(0.0, |(_, g)| g.iter().map(|x| x.abs()).sum())
    };
    assert!(norm("enc.proj.w") > 0.0);
    assert!(norm("jqag.ag1.w") > 0.0);
    assert!(norm("pt.al1.w") > 0.0);
}

#[test]
fn ablated_pretester_matches_generator_only_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = Gpn::new(small_config(), 11).unwrap();
    let batch = batch(&mut rng, 3, 3);

    let mut g = Graph::new();
    let full = model
        .forward_train(&mut g, &batch, LossWeights::default(), Ablation::default())
        .unwrap();
    let gen_only = g.add(full.l_qg, full.l_ap).unwrap();
    let expected = g.backward(gen_only).unwrap();

    let mut h = Graph::new();
    let abl = Ablation {
        no_pretester: true,
        ..Ablation::default()
    };
    let cut = model
        .forward_train(&mut h, &batch, LossWeights::default(), abl)
        .unwrap();
    let got = h.backward(cut.l_total).unwrap();

    let collect = |gr: &gpn::Gradients| {
        let mut v: Vec<(usize, Vec<f64>)> = gr.param_grads().map(|(p, g)| (p.index(), g.to_vec())).collect();
        v.sort_by_key(|(i, _)| *i);
        v
    };
    let (e, o) = (collect(&expected), collect(&got));
    assert_eq!(e, o);
    for (id, p) in model.store.iter() {
        if p.name.starts_with("pt.") {
            assert!(o.iter().all(|(i, _)| *i != id.index()), "{} has a gradient", p.name);
        }
    }
}
