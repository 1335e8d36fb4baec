//! Caption metrics over pre-tokenised sequences: BLEU, ROUGE-L, CIDEr-D.
//!
//! Every function is generic over the token type so scores depend only on
//! token identity, never on how tokens are numbered.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::{BuildHasherDefault, Hash};

use crate::error::{contract, Result};

/// Fixed-key hashing: iteration order, and with it the rounding of every
/// floating-point sum below, is the same in every run.
type Map<K, V> = HashMap<K, V, BuildHasherDefault<DefaultHasher>>;
type Counts<W> = Map<Vec<W>, usize>;

fn ngrams<W: Hash + Eq + Clone>(words: &[W], n: usize) -> Counts<W> {
    let mut c = Counts::default();
    if words.len() >= n {
        for w in words.windows(n) {
            *c.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    c
}

/// Length of the reference closest to `hyp_len`; ties go to the shorter.
fn closest_ref_len<W>(hyp_len: usize, refs: &[Vec<W>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(hyp_len), r))
        .expect("refs checked nonempty")
}

/// Clipped n-gram matches and candidate totals for `n = 1..=max_n`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn of<W: Hash + Eq + Clone>(hyp: &[W], refs: &[Vec<W>], max_n: usize) -> Result<Self> {
        if refs.is_empty() {
            return contract("BLEU needs at least one reference");
        }
        if max_n == 0 {
            return contract("BLEU order must be at least 1");
        }
        let mut s = Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            hyp_len: hyp.len(),
            ref_len: closest_ref_len(hyp.len(), refs),
        };
        for n in 1..=max_n {
            let h = ngrams(hyp, n);
            let mut max_ref = Counts::default();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &h {
                s.matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                s.totals[n - 1] += c;
            }
        }
        Ok(s)
    }

    fn add(&mut self, o: &Self) {
        for n in 0..self.matches.len() {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// Geometric mean of the clipped precisions times the brevity penalty;
    /// zero when any precision is zero (no smoothing).
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        bp * (log_sum / self.matches.len() as f64).exp()
    }
}

/// Sentence-level BLEU@N.
pub fn bleu_n<W: Hash + Eq + Clone>(hyp: &[W], refs: &[Vec<W>], n: usize) -> Result<f64> {
    Ok(BleuStats::of(hyp, refs, n)?.score())
}

/// Corpus-level BLEU@N: counts and lengths are summed before combining.
pub fn corpus_bleu<W: Hash + Eq + Clone>(hyps: &[Vec<W>], refs: &[Vec<Vec<W>>], n: usize) -> Result<f64> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return contract("corpus BLEU needs one reference set per hypothesis");
    }
    let mut total = BleuStats {
        matches: vec![0; n],
        totals: vec![0; n],
        ..BleuStats::default()
    };
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&BleuStats::of(h, r, n)?);
    }
    Ok(total.score())
}

fn lcs<W: Eq>(a: &[W], b: &[W]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure with `β = 1.2`, best over references.
pub fn rouge_l<W: Eq>(hyp: &[W], refs: &[Vec<W>]) -> Result<f64> {
    if refs.is_empty() {
        return contract("ROUGE-L needs at least one reference");
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let mut best = 0.0f64;
    for r in refs {
        let l = lcs(hyp, r) as f64;
        if l == 0.0 {
            continue;
        }
        let p = l / hyp.len() as f64;
        let rec = l / r.len() as f64;
        best = best.max((1.0 + b2) * p * rec / (rec + b2 * p));
    }
    Ok(best)
}

pub const CIDER_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;

/// Document frequencies of n-grams (n = 1..4) over a reference corpus,
/// where each image's reference set counts as one document.
#[derive(Clone, Debug)]
pub struct IdfTable<W: Hash + Eq> {
    df: Map<Vec<W>, usize>,
    corpus_size: usize,
}

impl<W: Hash + Eq + Clone> IdfTable<W> {
    pub fn new(refs: &[Vec<Vec<W>>]) -> Result<Self> {
        if refs.is_empty() {
            return contract("CIDEr-D needs a nonempty reference corpus");
        }
        let mut df = Map::default();
        for image in refs {
            let mut seen: HashSet<Vec<W>, BuildHasherDefault<DefaultHasher>> = HashSet::default();
            for r in image {
                for n in 1..=CIDER_N {
                    for g in ngrams(r, n).into_keys() {
                        seen.insert(g);
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        Ok(Self {
            df,
            corpus_size: refs.len(),
        })
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn df(&self, gram: &[W]) -> usize {
        self.df.get(gram).copied().unwrap_or(0)
    }
}

struct TfIdf<W> {
    vec: Vec<Map<Vec<W>, f64>>,
    norm: Vec<f64>,
    /// Bigram count, the length measure of the reference implementation.
    len: f64,
}

fn tfidf<W: Hash + Eq + Clone>(words: &[W], idf: &IdfTable<W>) -> TfIdf<W> {
    let log_n = (idf.corpus_size as f64).ln();
    let mut vec = Vec::with_capacity(CIDER_N);
    let mut norm = Vec::with_capacity(CIDER_N);
    let mut len = 0.0;
    for n in 1..=CIDER_N {
        let mut v = Map::default();
        let mut sq = 0.0;
        for (g, tf) in ngrams(words, n) {
            let df = (idf.df(&g) as f64).max(1.0).ln();
            let w = tf as f64 * (log_n - df);
            sq += w * w;
            if n == 2 {
                len += tf as f64;
            }
            v.insert(g, w);
        }
        vec.push(v);
        norm.push(sq.sqrt());
    }
    TfIdf { vec, norm, len }
}

fn cider_sim<W: Hash + Eq>(h: &TfIdf<W>, r: &TfIdf<W>) -> [f64; CIDER_N] {
    let delta = h.len - r.len;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut out = [0.0; CIDER_N];
    for n in 0..CIDER_N {
        let mut val = 0.0;
        for (g, &hv) in &h.vec[n] {
            let rv = r.vec[n].get(g).copied().unwrap_or(0.0);
            val += hv.min(rv) * rv;
        }
        if h.norm[n] != 0.0 && r.norm[n] != 0.0 {
            val /= h.norm[n] * r.norm[n];
        }
        out[n] = val * penalty;
    }
    out
}

/// CIDEr-D of one hypothesis against its references: clipped tf-idf cosine
/// per n-gram order with a Gaussian length penalty, averaged over orders and
/// references, times 10.
pub fn cider_d_one<W: Hash + Eq + Clone>(hyp: &[W], refs: &[Vec<W>], idf: &IdfTable<W>) -> Result<f64> {
    if refs.is_empty() {
        return contract("CIDEr-D needs at least one reference");
    }
    let h = tfidf(hyp, idf);
    let mut total = [0.0; CIDER_N];
    for r in refs {
        let s = cider_sim(&h, &tfidf(r, idf));
        for n in 0..CIDER_N {
            total[n] += s[n];
        }
    }
    let mean = total.iter().sum::<f64>() / CIDER_N as f64;
    Ok(mean / refs.len() as f64 * 10.0)
}

/// Per-image CIDEr-D scores and their mean.
pub fn cider_d<W: Hash + Eq + Clone>(
    hyps: &[Vec<W>],
    refs: &[Vec<Vec<W>>],
    idf: &IdfTable<W>,
) -> Result<(Vec<f64>, f64)> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return contract("CIDEr-D needs one reference set per hypothesis");
    }
    let scores = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| cider_d_one(h, r, idf))
        .collect::<Result<Vec<_>>>()?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((scores, mean))
}

/// Per-image metric row.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub exact: bool,
}

/// Corpus metrics. BLEU is corpus-level; ROUGE-L, CIDEr-D and exact match
/// are means over images.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    /// Fraction of hypotheses equal to one of their references.
    pub exact_match: f64,
    pub per_image: Vec<ImageScore>,
}

impl ScoreReport {
    /// Scores `hyps[i]` against `refs[i]`, with CIDEr-D document frequencies
    /// taken from `refs` itself.
    pub fn compute<W: Hash + Eq + Clone>(hyps: &[Vec<W>], refs: &[Vec<Vec<W>>]) -> Result<Self> {
        let idf = IdfTable::new(refs)?;
        let (cider, cider_mean) = cider_d(hyps, refs, &idf)?;
        let mut per_image = Vec::with_capacity(hyps.len());
        for ((h, r), c) in hyps.iter().zip(refs).zip(cider) {
            per_image.push(ImageScore {
                bleu1: bleu_n(h, r, 1)?,
                bleu4: bleu_n(h, r, 4)?,
                rouge_l: rouge_l(h, r)?,
                cider_d: c,
                exact: r.iter().any(|x| x == h),
            });
        }
        let n = hyps.len() as f64;
        Ok(Self {
            bleu1: corpus_bleu(hyps, refs, 1)?,
            bleu4: corpus_bleu(hyps, refs, 4)?,
            rouge_l: per_image.iter().map(|s| s.rouge_l).sum::<f64>() / n,
            cider_d: cider_mean,
            exact_match: per_image.iter().filter(|s| s.exact).count() as f64 / n,
            per_image,
        })
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!(
            "bleu1={:.6}\nbleu4={:.6}\nrougeL={:.6}\nciderD={:.6}\nexact={:.6}\n",
            self.bleu1, self.bleu4, self.rouge_l, self.cider_d, self.exact_match
        )
    }

    /// Tab-separated per-image rows with a header; `captions[i]` is the
    /// decoded hypothesis of image `i`.
    pub fn to_tsv(&self, captions: &[String]) -> String {
        let mut s = String::from("image\tcaption\tbleu1\tbleu4\trougeL\tciderD\texact\n");
        for (i, (row, cap)) in self.per_image.iter().zip(captions).enumerate() {
            let _ = writeln!(
                s,
                "{i}\t{cap}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                row.bleu1, row.bleu4, row.rouge_l, row.cider_d, row.exact as u8
            );
        }
        s
    }
}
