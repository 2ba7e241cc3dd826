//! Caption evaluation kernels: CIDEr-D (the reinforcement reward), corpus
//! BLEU@4, and ROUGE-L.
//!
//! CIDEr-D follows the canonical published variant: TF-IDF n-gram cosine
//! per n = 1..4 with candidate counts clipped to the reference counts,
//! averaged over n, a Gaussian length penalty with sigma = 6, and a x10
//! scale. Document frequencies are counted per reference set (one document
//! per clip). All scores operate on content tokens: `<pad>`, `<bos>` and
//! `<eos>` are stripped before counting.

use std::collections::BTreeMap;

use crate::corpus::TokenSequence;

pub const CIDER_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;
pub const ROUGE_BETA: f64 = 1.2;

type Ngram = Vec<usize>;

/// Document-frequency tables over the evaluation reference sets.
#[derive(Debug, Clone)]
pub struct CorpusStats {
    df: BTreeMap<Ngram, f64>,
    n_items: usize,
}

fn ngram_counts(tokens: &[usize], max_n: usize) -> BTreeMap<Ngram, f64> {
    let mut counts = BTreeMap::new();
    for n in 1..=max_n {
        if tokens.len() < n {
            break;
        }
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    counts
}

impl CorpusStats {
    /// Build from one reference set per item. An n-gram's df is the number
    /// of items in which it appears in at least one reference.
    pub fn build(reference_sets: &[Vec<TokenSequence>]) -> Self {
        let mut df = BTreeMap::new();
        for refs in reference_sets {
            let mut seen: BTreeMap<Ngram, ()> = BTreeMap::new();
            for r in refs {
                for g in ngram_counts(&r.content(), CIDER_N).into_keys() {
                    seen.insert(g, ());
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        CorpusStats {
            df,
            n_items: reference_sets.len(),
        }
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn df(&self, g: &[usize]) -> f64 {
        self.df.get(g).copied().unwrap_or(0.0)
    }
}

/// Per-n TF-IDF vector, its norms, and the token length.
struct TfIdf {
    vec: Vec<BTreeMap<Ngram, f64>>,
    norm: [f64; CIDER_N],
    len: usize,
}

fn tfidf(tokens: &[usize], stats: &CorpusStats) -> TfIdf {
    let log_ref_len = (stats.n_items() as f64).ln();
    let mut vec: Vec<BTreeMap<Ngram, f64>> = vec![BTreeMap::new(); CIDER_N];
    let mut norm = [0.0; CIDER_N];
    for (g, tf) in ngram_counts(tokens, CIDER_N) {
        let n = g.len() - 1;
        let idf = log_ref_len - stats.df(&g).max(1.0).ln();
        let v = tf * idf;
        norm[n] += v * v;
        vec[n].insert(g, v);
    }
    for n in &mut norm {
        *n = n.sqrt();
    }
    TfIdf {
        vec,
        norm,
        len: tokens.len(),
    }
}

fn clipped_cosine(cand: &TfIdf, reference: &TfIdf) -> [f64; CIDER_N] {
    let delta = cand.len as f64 - reference.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut vals = [0.0; CIDER_N];
    for n in 0..CIDER_N {
        let mut dot = 0.0;
        for (g, &cv) in &cand.vec[n] {
            if let Some(&rv) = reference.vec[n].get(g) {
                dot += cv.min(rv) * rv;
            }
        }
        if cand.norm[n] > 0.0 && reference.norm[n] > 0.0 {
            vals[n] = dot / (cand.norm[n] * reference.norm[n]);
        }
        vals[n] *= penalty;
    }
    vals
}

/// CIDEr-D for one candidate against its reference set; range [0, 10].
pub fn cider_d(candidate: &TokenSequence, refs: &[TokenSequence], stats: &CorpusStats) -> f64 {
    let cand_tokens = candidate.content();
    if cand_tokens.is_empty() {
        eprintln!("warning: empty candidate scored as 0.0");
        return 0.0;
    }
    let cand = tfidf(&cand_tokens, stats);
    let mut acc = [0.0; CIDER_N];
    for r in refs {
        let rv = tfidf(&r.content(), stats);
        let vals = clipped_cosine(&cand, &rv);
        for n in 0..CIDER_N {
            acc[n] += vals[n];
        }
    }
    let mean_over_n: f64 = acc.iter().sum::<f64>() / CIDER_N as f64;
    mean_over_n / refs.len() as f64 * 10.0
}

/// Corpus-level BLEU@4: geometric mean of clipped n-gram precisions times
/// the brevity penalty. Unsmoothed: any zero precision zeroes the score.
pub fn bleu4(candidates: &[TokenSequence], refs: &[Vec<TokenSequence>]) -> f64 {
    assert!(
        !candidates.is_empty() && candidates.len() == refs.len(),
        "bleu4: need one reference set per candidate, got {} candidates and {} sets",
        candidates.len(),
        refs.len()
    );
    let mut matched = [0.0f64; 4];
    let mut total = [0.0f64; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, rset) in candidates.iter().zip(refs) {
        let c = cand.content();
        cand_len += c.len();
        // closest reference length; ties break toward the shorter one
        let closest = rset
            .iter()
            .map(|r| r.content().len())
            .min_by_key(|&l| ((l as i64 - c.len() as i64).abs(), l as i64))
            .unwrap_or(0);
        ref_len += closest;
        for n in 1..=4usize {
            if c.len() < n {
                continue;
            }
            let cc = ngram_counts_of_order(&c, n);
            let mut max_ref: BTreeMap<Ngram, f64> = BTreeMap::new();
            for r in rset {
                for (g, v) in ngram_counts_of_order(&r.content(), n) {
                    let e = max_ref.entry(g).or_insert(0.0);
                    if v > *e {
                        *e = v;
                    }
                }
            }
            for (g, v) in cc {
                total[n - 1] += v;
                matched[n - 1] += v.min(max_ref.get(&g).copied().unwrap_or(0.0));
            }
        }
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        if total[n] == 0.0 || matched[n] == 0.0 {
            return 0.0;
        }
        log_sum += (matched[n] / total[n]).ln();
    }
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / 4.0).exp()
}

fn ngram_counts_of_order(tokens: &[usize], n: usize) -> BTreeMap<Ngram, f64> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    counts
}

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L for one candidate: max over references of the LCS F-score with
/// beta = 1.2.
pub fn rouge_l(candidate: &TokenSequence, refs: &[TokenSequence]) -> f64 {
    let c = candidate.content();
    if c.is_empty() {
        return 0.0;
    }
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    let mut best: f64 = 0.0;
    for r in refs {
        let rt = r.content();
        if rt.is_empty() {
            continue;
        }
        let l = lcs_len(&c, &rt) as f64;
        if l == 0.0 {
            continue;
        }
        let p = l / c.len() as f64;
        let rec = l / rt.len() as f64;
        let f = (1.0 + beta2) * p * rec / (rec + beta2 * p);
        best = best.max(f);
    }
    best
}

/// Scores for one evaluated split.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub per_item_cider: Vec<f64>,
}

impl MetricReport {
    /// Fixed key order: bleu4, rougeL, ciderD.
    pub fn format_block(&self) -> String {
        format!(
            "bleu4 = {:.6}\nrougeL = {:.6}\nciderD = {:.6}\n",
            self.bleu4, self.rouge_l, self.cider_d
        )
    }
}

/// Score a whole split: corpus BLEU@4, mean per-item ROUGE-L, mean per-item
/// CIDEr-D with df built over `refs`.
pub fn evaluate_corpus(candidates: &[TokenSequence], refs: &[Vec<TokenSequence>]) -> MetricReport {
    let stats = CorpusStats::build(refs);
    let per_item_cider: Vec<f64> = candidates
        .iter()
        .zip(refs)
        .map(|(c, r)| cider_d(c, r, &stats))
        .collect();
    let rouge: f64 = candidates
        .iter()
        .zip(refs)
        .map(|(c, r)| rouge_l(c, r))
        .sum::<f64>()
        / candidates.len() as f64;
    MetricReport {
        bleu4: bleu4(candidates, refs),
        rouge_l: rouge,
        cider_d: per_item_cider.iter().sum::<f64>() / per_item_cider.len() as f64,
        per_item_cider,
    }
}
