//! Shared test support: an independent brute-force CIDEr-D oracle built
//! from explicit n-gram enumeration and linear scans (no shared code with
//! the library implementation), plus small corpus generators.

#![allow(dead_code)]

use decap::corpus::TokenSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// All n-grams of one order as explicit vectors.
fn enumerate_ngrams(tokens: &[usize], n: usize) -> Vec<Vec<usize>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

fn count_of(list: &[Vec<usize>], g: &[usize]) -> f64 {
    list.iter().filter(|x| x.as_slice() == g).count() as f64
}

fn dedup(list: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for g in list {
        if !out.iter().any(|x| x == g) {
            out.push(g.clone());
        }
    }
    out
}

/// Document frequency of `g` over the reference sets: the number of items
/// where any reference contains it.
fn doc_freq(reference_sets: &[Vec<Vec<usize>>], g: &[usize]) -> f64 {
    let n = g.len();
    reference_sets
        .iter()
        .filter(|set| {
            set.iter()
                .any(|r| enumerate_ngrams(r, n).iter().any(|x| x.as_slice() == g))
        })
        .count() as f64
}

/// Reference CIDEr-D: TF-IDF n-gram cosine with candidate-count clipping,
/// n = 1..4 equally weighted, Gaussian length penalty sigma = 6, x10.
/// Everything is recomputed from scratch on every call.
pub fn cider_d_oracle(
    candidate: &[usize],
    refs: &[Vec<usize>],
    reference_sets: &[Vec<Vec<usize>>],
) -> f64 {
    let n_items = reference_sets.len() as f64;
    let log_ref_len = n_items.ln();
    let sigma = 6.0;

    let weight = |tokens: &[usize], g: &[usize]| -> f64 {
        let tf = count_of(&enumerate_ngrams(tokens, g.len()), g);
        let df = doc_freq(reference_sets, g).max(1.0);
        tf * (log_ref_len - df.ln())
    };
    let norm = |tokens: &[usize], n: usize| -> f64 {
        dedup(&enumerate_ngrams(tokens, n))
            .iter()
            .map(|g| weight(tokens, g).powi(2))
            .sum::<f64>()
            .sqrt()
    };

    let mut total = 0.0;
    for r in refs {
        let delta = candidate.len() as f64 - r.len() as f64;
        let penalty = (-delta * delta / (2.0 * sigma * sigma)).exp();
        for n in 1..=4usize {
            let cn = norm(candidate, n);
            let rn = norm(r, n);
            if cn == 0.0 || rn == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for g in dedup(&enumerate_ngrams(candidate, n)) {
                let cw = weight(candidate, &g);
                let rw = weight(r, &g);
                dot += cw.min(rw) * rw;
            }
            total += penalty * dot / (cn * rn);
        }
    }
    10.0 * total / (4.0 * refs.len() as f64)
}

/// Wrap content ids with framing the way the tokenizer does.
pub fn framed(ids: &[usize]) -> TokenSequence {
    let mut v = vec![decap::corpus::BOS];
    v.extend_from_slice(ids);
    v.push(decap::corpus::EOS);
    TokenSequence { ids: v }
}

/// A random micro-corpus: token ids stay clear of the reserved range.
pub fn random_micro_corpus(seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<Vec<usize>>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_items = rng.random_range(2..=6);
    let vocab: Vec<usize> = (4..14).collect();
    let mut sentence = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.random_range(1..=9);
        (0..len).map(|_| vocab[rng.random_range(0..vocab.len())]).collect()
    };
    let mut reference_sets = Vec::new();
    let mut candidates = Vec::new();
    for _ in 0..n_items {
        let n_refs = rng.random_range(1..=3);
        let refs: Vec<Vec<usize>> = (0..n_refs).map(|_| sentence(&mut rng)).collect();
        // half the time the candidate plagiarizes a reference
        let cand = if rng.random_bool(0.5) {
            refs[rng.random_range(0..refs.len())].clone()
        } else {
            sentence(&mut rng)
        };
        candidates.push(cand);
        reference_sets.push(refs);
    }
    (candidates, reference_sets)
}
