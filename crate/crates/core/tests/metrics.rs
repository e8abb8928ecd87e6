use proptest::prelude::*;
use sgcap_core::metrics::{bleu, cider, corpus_cider, evaluate_corpus, rouge_l, CiderVariant, IdfTable};

fn w(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn bleu2_hand_case() {
    // Unigrams 5/5, bigrams 3/4 ("on mat" is unmatched), c = 5, r = 6.
    let scores = bleu(&[w("the cat sat on mat")], &[vec![w("the cat sat on the mat")]], 2).unwrap();
    let bp = (1.0f64 - 6.0 / 5.0).exp();
    assert!((scores[0] - bp).abs() < 1e-12);
    assert!((scores[1] - bp * 0.75f64.sqrt()).abs() < 1e-12);
}

#[test]
fn bleu_clips_repeated_words() {
    // "the" appears seven times but the reference allows two.
    let scores = bleu(&[w("the the the the the the the")], &[vec![w("the cat is on the mat ok")]], 1).unwrap();
    assert!((scores[0] - 2.0 / 7.0).abs() < 1e-12);
}

#[test]
fn bleu_uses_closest_reference_length() {
    let refs = vec![w("a b c d e f g h"), w("a b c x")];
    let scores = bleu(&[w("a b c")], &[refs], 1).unwrap();
    assert!((scores[0] - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
}

#[test]
fn bleu_rejects_empty_candidate_set() {
    let none: Vec<Vec<String>> = Vec::new();
    assert!(bleu(&none, &[], 4).is_err());
}

#[test]
fn rouge_takes_best_reference() {
    let r = rouge_l(&w("a b c d"), &[w("x y"), w("a c b d"), w("q")]).unwrap();
    assert!((r - 0.75).abs() < 1e-12);
    assert_eq!(rouge_l(&w("a b"), &[w("c d")]).unwrap(), 0.0);
}

#[test]
fn idf_matches_hand_document_frequencies() {
    let corpus = vec![
        vec![w("a dog runs"), w("a dog")],
        vec![w("a cat sleeps")],
        vec![w("the dog sleeps")],
    ];
    let idf = IdfTable::compute(&corpus).unwrap();
    let ln = |x: f64| x.ln();
    assert_eq!(idf.images(), 3);
    // df counts images, not captions.
    assert_eq!(idf.df(&w("dog")), 2);
    assert_eq!(idf.df(&w("a")), 2);
    assert_eq!(idf.df(&w("sleeps")), 2);
    assert_eq!(idf.df(&w("a dog")), 1);
    assert_eq!(idf.df(&w("dog sleeps")), 1);
    assert!((idf.idf(&w("dog")) - ln(1.5)).abs() < 1e-15);
    assert!((idf.idf(&w("a dog runs")) - ln(3.0)).abs() < 1e-15);
    // Unseen n-grams count as appearing once.
    assert!((idf.idf(&w("zebra")) - ln(3.0)).abs() < 1e-15);
    assert!(IdfTable::<String>::compute(&[]).is_err());
}

#[test]
fn cider_d_penalizes_length_and_repetition() {
    let corpus = vec![vec![w("a red car on a road")], vec![w("two birds in a tree")], vec![w("a man with a hat")]];
    let idf = IdfTable::compute(&corpus).unwrap();
    let refs = &corpus[0];
    let exact = cider(&w("a red car on a road"), refs, &idf, CiderVariant::CiderD);
    let repeated = cider(&w("red car red car red car on a road"), refs, &idf, CiderVariant::CiderD);
    assert!(exact > repeated);
    assert!(cider(&w("a red car on a road"), refs, &idf, CiderVariant::Cider) <= 10.0 + 1e-12);
}

#[test]
fn corpus_cider_is_mean_of_image_scores() {
    let refs = vec![vec![w("a b c")], vec![w("d e f")], vec![w("a e g")]];
    let cands = vec![w("a b"), w("d e f"), w("g")];
    let idf = IdfTable::compute(&refs).unwrap();
    let each: f64 = cands.iter().zip(&refs).map(|(c, r)| cider(c, r, &idf, CiderVariant::Cider)).sum::<f64>() / 3.0;
    assert!((corpus_cider(&cands, &refs, &idf, CiderVariant::Cider) - each).abs() < 1e-15);
}

#[test]
fn evaluation_report_agrees_with_individual_metrics() {
    let refs = vec![vec![w("a small dog"), w("a dog")], vec![w("the big cat")]];
    let cands = vec![w("a dog"), w("a big cat")];
    let r = evaluate_corpus(&cands, &refs).unwrap();
    let b = bleu(&cands, &refs, 4).unwrap();
    assert_eq!(r.bleu.to_vec(), b);
    let rouge = (rouge_l(&cands[0], &refs[0]).unwrap() + rouge_l(&cands[1], &refs[1]).unwrap()) / 2.0;
    assert!((r.rouge_l - rouge).abs() < 1e-15);
    let idf = IdfTable::compute(&refs).unwrap();
    assert_eq!(r.cider, corpus_cider(&cands, &refs, &idf, CiderVariant::Cider));
    assert_eq!(r.cider_d, corpus_cider(&cands, &refs, &idf, CiderVariant::CiderD));
}

/// Each image has one caption of distinctive words; replacing any one word
/// of the matching candidate must not raise any metric.
#[test]
fn exact_match_beats_every_single_token_edit() {
    let refs: Vec<Vec<Vec<u32>>> = vec![vec![vec![1, 2, 3, 4, 5]], vec![vec![6, 7, 8, 9]], vec![vec![10, 11, 12, 13, 14, 15]]];
    let idf = IdfTable::compute(&refs).unwrap();
    for (img, r) in refs.iter().enumerate() {
        let exact = &r[0];
        let scores = |c: &Vec<u32>| {
            let mut cands: Vec<Vec<u32>> = refs.iter().map(|r| r[0].clone()).collect();
            cands[img] = c.clone();
            let b = bleu(&cands, &refs, 4).unwrap();
            (b, rouge_l(c, r).unwrap(), cider(c, r, &idf, CiderVariant::Cider), cider(c, r, &idf, CiderVariant::CiderD))
        };
        let best = scores(exact);
        for pos in 0..exact.len() {
            for tok in 0..17u32 {
                let mut edited = exact.clone();
                edited[pos] = tok;
                let s = scores(&edited);
                for n in 0..4 {
                    assert!(s.0[n] <= best.0[n] + 1e-12, "bleu{} image {img} pos {pos} tok {tok}", n + 1);
                }
                assert!(s.1 <= best.1 + 1e-12);
                assert!(s.2 <= best.2 + 1e-12);
                assert!(s.3 <= best.3 + 1e-12);
            }
        }
    }
}

fn sentence() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..8, 1..9)
}

proptest! {
    #[test]
    fn metrics_stay_in_range(
        cand in sentence(),
        refs in prop::collection::vec(prop::collection::vec(sentence(), 1..4), 1..5),
        pick in 0usize..4,
    ) {
        let target = pick % refs.len();
        let idf = IdfTable::compute(&refs).unwrap();
        let b = bleu(std::slice::from_ref(&cand), &[refs[target].clone()], 4).unwrap();
        prop_assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
        let r = rouge_l(&cand, &refs[target]).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        for variant in [CiderVariant::Cider, CiderVariant::CiderD] {
            let c = cider(&cand, &refs[target], &idf, variant);
            prop_assert!((0.0..=10.0 + 1e-9).contains(&c), "{c}");
            prop_assert_eq!(c.to_bits(), cider(&cand, &refs[target], &idf, variant).to_bits());
        }
    }

    #[test]
    fn idf_is_non_negative(refs in prop::collection::vec(prop::collection::vec(sentence(), 1..3), 1..6)) {
        let idf = IdfTable::compute(&refs).unwrap();
        for (gram, df) in idf.iter() {
            prop_assert!(df >= 1 && df <= refs.len());
            prop_assert!(idf.idf(gram) >= 0.0);
        }
    }
}
