//! Caption metrics: corpus BLEU-1..4, ROUGE-L and CIDEr / CIDEr-D.
//!
//! All functions are generic over the token type so they score word
//! strings and vocabulary ids alike.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const MAX_N: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_D_SIGMA: f64 = 6.0;

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *out.entry(g).or_default() += 1;
        }
    }
    out
}

/// Corpus-level BLEU-1..`n_max` with clipped n-gram precision, uniform
/// weights and the closest-reference brevity penalty.
pub fn bleu<T: Ord>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>], n_max: usize) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::Empty("bleu"));
    }
    if candidates.len() != references.len() {
        return Err(Error::shape("bleu", &[candidates.len()], &[references.len()]));
    }
    let mut matched = vec![0usize; n_max];
    let mut total = vec![0usize; n_max];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Empty("bleu references"));
        }
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("non-empty");
        for n in 1..=n_max {
            let mut max_ref: BTreeMap<&[T], usize> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(c);
                }
            }
            for (g, c) in ngram_counts(cand, n) {
                total[n - 1] += c;
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len < ref_len {
        libm::exp(1.0 - ref_len as f64 / cand_len as f64)
    } else {
        1.0
    };
    let mut scores = Vec::with_capacity(n_max);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..n_max {
        if matched[n] == 0 {
            zero = true;
        } else {
            log_sum += libm::log(matched[n] as f64 / total[n] as f64);
        }
        scores.push(if zero { 0.0 } else { bp * libm::exp(log_sum / (n + 1) as f64) });
    }
    Ok(scores)
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure (β = 1.2), best over references.
pub fn rouge_l<T: Eq>(candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::Empty("rouge_l"));
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let best = references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let lcs = lcs_len(candidate, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let p = lcs / candidate.len() as f64;
            let rec = lcs / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max);
    Ok(best)
}

/// Document frequencies of 1..4-grams over a reference corpus, one
/// document per image.
#[derive(Clone, Debug, PartialEq)]
pub struct IdfTable<T: Ord> {
    df: BTreeMap<Vec<T>, usize>,
    images: usize,
}

impl<T: Ord + Clone> IdfTable<T> {
    pub fn compute(references: &[Vec<Vec<T>>]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Empty("compute_idf"));
        }
        let mut df: BTreeMap<Vec<T>, usize> = BTreeMap::new();
        for refs in references {
            let mut seen: BTreeSet<&[T]> = BTreeSet::new();
            for r in refs {
                for n in 1..=MAX_N {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g.to_vec()).or_default() += 1;
            }
        }
        Ok(IdfTable {
            df,
            images: references.len(),
        })
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn df(&self, ngram: &[T]) -> usize {
        self.df.get(ngram).copied().unwrap_or(0)
    }

    /// `ln(N / df)`, with unseen n-grams treated as `df = 1`.
    pub fn idf(&self, ngram: &[T]) -> f64 {
        libm::log(self.images as f64 / self.df(ngram).max(1) as f64)
    }

    pub fn len(&self) -> usize {
        self.df.len()
    }

    pub fn is_empty(&self) -> bool {
        self.df.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[T], usize)> {
        self.df.iter().map(|(k, &v)| (k.as_slice(), v))
    }

    /// Rebuilds a table from stored document frequencies.
    pub fn from_parts(images: usize, df: BTreeMap<Vec<T>, usize>) -> Result<Self> {
        if images == 0 || df.values().any(|&d| d == 0 || d > images) {
            return Err(Error::Contract("document frequencies must lie in 1..=N".into()));
        }
        Ok(IdfTable { df, images })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CiderVariant {
    Cider,
    /// Count clipping plus the Gaussian length penalty (σ = 6).
    CiderD,
}

struct TfIdf<'a, T> {
    vecs: Vec<BTreeMap<&'a [T], f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf<'a, T: Ord + Clone>(tokens: &'a [T], idf: &IdfTable<T>) -> TfIdf<'a, T> {
    let mut vecs = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let v: BTreeMap<&[T], f64> = ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, c)| (g, c as f64 * idf.idf(g)))
            .collect();
        norms.push(libm::sqrt(v.values().map(|x| x * x).sum()));
        vecs.push(v);
    }
    TfIdf {
        vecs,
        norms,
        len: tokens.len(),
    }
}

/// Consensus score of `candidate` against `references`, in `[0, 10]`.
pub fn cider<T: Ord + Clone>(candidate: &[T], references: &[Vec<T>], idf: &IdfTable<T>, variant: CiderVariant) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    let hyp = tfidf(candidate, idf);
    let mut per_n = [0.0f64; MAX_N];
    for r in references {
        let rv = tfidf(r, idf);
        let delta = hyp.len as f64 - rv.len as f64;
        for n in 0..MAX_N {
            let mut val = 0.0;
            for (g, &h) in &hyp.vecs[n] {
                if let Some(&x) = rv.vecs[n].get(g) {
                    val += match variant {
                        CiderVariant::Cider => h * x,
                        CiderVariant::CiderD => h.min(x) * x,
                    };
                }
            }
            if hyp.norms[n] != 0.0 && rv.norms[n] != 0.0 {
                val /= hyp.norms[n] * rv.norms[n];
            }
            if variant == CiderVariant::CiderD {
                val *= libm::exp(-(delta * delta) / (2.0 * CIDER_D_SIGMA * CIDER_D_SIGMA));
            }
            per_n[n] += val;
        }
    }
    let mean_n = per_n.iter().sum::<f64>() / MAX_N as f64;
    10.0 * mean_n / references.len() as f64
}

/// Mean CIDEr over a corpus.
pub fn corpus_cider<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>], idf: &IdfTable<T>, variant: CiderVariant) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| cider(c, r, idf, variant))
        .sum();
    total / candidates.len() as f64
}

/// Scores of one split. IDF statistics come from the split's own references.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bleu: [f64; MAX_N],
    pub rouge_l: f64,
    pub cider: f64,
    pub cider_d: f64,
}

pub fn evaluate_corpus<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<EvalReport> {
    let b = bleu(candidates, references, MAX_N)?;
    let idf = IdfTable::compute(references)?;
    let mut rouge = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        rouge += if c.is_empty() { 0.0 } else { rouge_l(c, r)? };
    }
    Ok(EvalReport {
        bleu: [b[0], b[1], b[2], b[3]],
        rouge_l: rouge / candidates.len() as f64,
        cider: corpus_cider(candidates, references, &idf, CiderVariant::Cider),
        cider_d: corpus_cider(candidates, references, &idf, CiderVariant::CiderD),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::{String, ToString};

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(ToString::to_string).collect()
    }

    #[test]
    fn identical_candidate_scores_one() {
        let c = w("a man rides a horse on the beach");
        let s = bleu(core::slice::from_ref(&c), &[vec![c.clone()]], 4).unwrap();
        assert!(s.iter().all(|&v| (v - 1.0).abs() < 1e-15), "{s:?}");
        assert_eq!(rouge_l(&c, core::slice::from_ref(&c)).unwrap(), 1.0);
    }

    #[test]
    fn bleu_hand_case_and_zero_overlap() {
        let s = bleu(&[w("the cat sat")], &[vec![w("the cat sat on the mat")]], 4).unwrap();
        assert!((s[0] - libm::exp(1.0 - 6.0 / 3.0)).abs() < 1e-12);
        let z = bleu(&[w("dog runs")], &[vec![w("a cat sleeps")]], 4).unwrap();
        assert_eq!(z[0], 0.0);
        assert!(bleu::<String>(&[], &[], 4).is_err());
    }

    #[test]
    fn rouge_lcs_hand_case() {
        let f = rouge_l(&w("a b c d"), &[w("a c b d")]).unwrap();
        assert!((f - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l(&w("x y"), &[w("a b")]).unwrap(), 0.0);
    }

    #[test]
    fn idf_extremes() {
        let corpus = vec![vec![w("a dog")], vec![w("a cat")], vec![w("a cow")]];
        let idf = IdfTable::compute(&corpus).unwrap();
        assert_eq!(idf.idf(&w("a")), 0.0);
        assert!((idf.idf(&w("dog")) - libm::log(3.0)).abs() < 1e-15);
        assert!((idf.idf(&w("zebra")) - libm::log(3.0)).abs() < 1e-15);
        assert!(IdfTable::<String>::compute(&[]).is_err());
    }

    #[test]
    fn single_image_corpus_gives_zero_cider() {
        let refs = vec![w("a dog on a mat")];
        let idf = IdfTable::compute(core::slice::from_ref(&refs)).unwrap();
        for v in [CiderVariant::Cider, CiderVariant::CiderD] {
            assert_eq!(cider(&w("a dog on a mat"), &refs, &idf, v), 0.0);
            assert_eq!(cider(&w("zebra"), &refs, &idf, v), 0.0);
        }
    }

    #[test]
    fn no_overlap_gives_zero_cider() {
        let corpus = vec![vec![w("a dog on a mat")], vec![w("two cats play")]];
        let idf = IdfTable::compute(&corpus).unwrap();
        assert_eq!(cider(&w("horse grazing field"), &corpus[0], &idf, CiderVariant::Cider), 0.0);
    }
}
