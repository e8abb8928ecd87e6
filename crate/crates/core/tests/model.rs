use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgcap_core::decoder::argmax;
use sgcap_core::features::{FeatureBundle, BOS, EOS};
use sgcap_core::{Captioner, ModelConfig, Tape, Tensor};

fn config() -> ModelConfig {
    ModelConfig {
        vocab_size: 10,
        spatial_dim: 5,
        word_dim: 4,
        d_model: 6,
        heads: 2,
        embed_dim: 4,
        max_triplets: 4,
        max_len: 7,
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn setup(seed: u64) -> (Captioner, FeatureBundle, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Captioner::new(config(), &mut rng).unwrap();
    let bundle = FeatureBundle::new(random(&mut rng, 5, 5), random(&mut rng, 4, 4), vec![true, false, true, false]).unwrap();
    (model, bundle, rng)
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let data = perm.iter().flat_map(|&r| t.row_slice(r).to_vec()).collect();
    Tensor::matrix(t.rows(), t.cols(), data).unwrap()
}

#[test]
fn spatial_refinement_is_permutation_equivariant() {
    let (model, bundle, _) = setup(1);
    let perm = [3, 0, 4, 1, 2];
    let shuffled = FeatureBundle::new(permute_rows(&bundle.spatial, &perm), bundle.relationships.clone(), bundle.rel_mask.clone()).unwrap();

    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let a = model.encode(&mut tape, &p, &bundle).unwrap();
    let b = model.encode(&mut tape, &p, &shuffled).unwrap();
    let expected = permute_rows(tape.value(a.spatial), &perm);
    assert!(expected.max_abs_diff(tape.value(b.spatial)) < 1e-12);
    assert!(tape.value(a.a_bar).max_abs_diff(tape.value(b.a_bar)) < 1e-12);
}

#[test]
fn masked_triplets_do_not_change_predictions() {
    let (model, bundle, mut rng) = setup(2);
    let mut noisy = bundle.clone();
    for r in [1, 3] {
        for c in 0..4 {
            noisy.relationships.data_mut()[r * 4 + c] = rng.gen_range(-50.0..50.0);
        }
    }
    let caption = [BOS, 5, 6, 7, EOS];
    assert_eq!(
        model.score_sequence(&bundle, &caption).unwrap(),
        model.score_sequence(&noisy, &caption).unwrap()
    );

    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let enc = model.encode(&mut tape, &p, &noisy).unwrap();
    let rel = tape.value(enc.relationships);
    assert!(rel.row_slice(1).iter().chain(rel.row_slice(3)).all(|&v| v == 0.0));
}

#[test]
fn all_masked_relationships_still_decode() {
    let (model, bundle, _) = setup(3);
    let empty = FeatureBundle::new(bundle.spatial.clone(), bundle.relationships.clone(), vec![false; 4]).unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let enc = model.encode(&mut tape, &p, &empty).unwrap();
    assert!(enc.rel_valid.is_none());
    assert!(tape.value(enc.a_bar).row_slice(0)[6..].iter().all(|&v| v == 0.0));
    let out = model.generate_greedy(&empty, 7).unwrap();
    assert!(!out.is_empty() && out.len() <= 7);
}

/// The first step's scores, recomputed from the context vector and the
/// output weights by hand.
#[test]
fn first_step_matches_hand_readout() {
    let (model, bundle, _) = setup(4);
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let enc = model.encode(&mut tape, &p, &bundle).unwrap();
    let state = model.decoder.init_state(&mut tape, &p, enc.a_bar).unwrap();
    let out = model.decoder.step(&mut tape, &p, state, BOS, &enc).unwrap();

    let context = tape.value(out.context).data().to_vec();
    assert_eq!(context.len(), 12);
    let w = model.params.get(model.decoder.logits.weight);
    let logits: Vec<f64> = (0..10).map(|k| w.row_slice(k).iter().zip(&context).map(|(a, b)| a * b).sum()).collect();
    for (a, b) in logits.iter().zip(tape.value(out.logits).data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    for (l, lp) in logits.iter().zip(tape.value(out.log_probs).data()) {
        assert!((l - z.ln() - lp).abs() < 1e-12);
    }
}

#[test]
fn greedy_rollout_agrees_with_teacher_forcing() {
    let (model, bundle, _) = setup(5);
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let enc = model.encode(&mut tape, &p, &bundle).unwrap();
    let roll = model.decoder.rollout(&mut tape, &p, &enc, 7, argmax).unwrap();
    let mut tokens = vec![BOS];
    tokens.extend(&roll.tokens);
    let scored = model.score_sequence(&bundle, &tokens).unwrap();
    for (a, &b) in scored.iter().zip(&roll.log_probs) {
        assert!((a - tape.value(b).data()[0]).abs() < 1e-12);
    }
    assert_eq!(model.generate_greedy(&bundle, 7).unwrap(), roll.tokens);
}

#[test]
fn sampling_is_reproducible_per_seed() {
    let (model, bundle, _) = setup(6);
    let draw = |seed| model.sample_sequence(&bundle, 7, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(draw(9), draw(9));
    let (tokens, log_probs) = draw(9);
    assert_eq!(tokens.len(), log_probs.len());
    assert!(log_probs.iter().all(|l| *l <= 0.0));
}

#[test]
fn rejects_mismatched_features_and_tokens() {
    let (model, bundle, mut rng) = setup(7);
    let wide = FeatureBundle::new(random(&mut rng, 5, 6), bundle.relationships.clone(), bundle.rel_mask.clone()).unwrap();
    assert!(model.generate_greedy(&wide, 5).is_err());
    assert!(model.score_sequence(&bundle, &[BOS, 42, EOS]).is_err());
    assert!(model.teacher_forced_logprobs(&bundle, &[5, 6]).is_err());
    let bad = ModelConfig { heads: 4, ..config() };
    assert!(Captioner::new(bad, &mut rng).is_err());
}
