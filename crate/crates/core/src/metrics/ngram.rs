//! Reference-based n-gram metrics.

use std::collections::{BTreeMap, BTreeSet};

pub fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngrams<'a>(w: &[&'a str], n: usize) -> BTreeMap<Vec<&'a str>, usize> {
    let mut m = BTreeMap::new();
    if w.len() >= n {
        for g in w.windows(n) {
            *m.entry(g.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bleu {
    /// 0–100.
    pub score: f64,
    /// The candidate had no tokens.
    pub empty: bool,
}

/// Sentence BLEU@n with clipped n-gram precision, a uniform geometric mean
/// over orders 1..=n and the brevity penalty against the closest reference
/// length.
pub fn bleu(candidate: &str, references: &[&str], n: usize) -> Bleu {
    assert!((1..=4).contains(&n), "BLEU order must be 1..4");
    let c = words(candidate);
    if c.is_empty() {
        return Bleu { score: 0.0, empty: true };
    }
    let refs: Vec<Vec<&str>> = references.iter().map(|r| words(r)).collect();
    let mut log_sum = 0.0;
    for k in 1..=n {
        let cand = ngrams(&c, k);
        let total: usize = cand.values().sum();
        if total == 0 {
            return Bleu { score: 0.0, empty: false };
        }
        let mut max_ref: BTreeMap<&Vec<&str>, usize> = BTreeMap::new();
        for r in &refs {
            let rg = ngrams(r, k);
            for g in cand.keys() {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(rg.get(g).copied().unwrap_or(0));
            }
        }
        let clipped: usize = cand.iter().map(|(g, &cnt)| cnt.min(max_ref[g])).sum();
        if clipped == 0 {
            return Bleu { score: 0.0, empty: false };
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let cl = c.len() as i64;
    let rl = refs
        .iter()
        .map(|r| r.len() as i64)
        .min_by_key(|&r| ((r - cl).abs(), r))
        .unwrap_or(0);
    let bp = if cl > rl { 1.0 } else { (1.0 - rl as f64 / cl as f64).exp() };
    Bleu { score: 100.0 * bp * (log_sum / n as f64).exp(), empty: false }
}

fn lcs(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L F-measure in [0,1]. Precision and recall each take their best
/// value over the references.
pub fn rouge_l(candidate: &str, references: &[&str]) -> f64 {
    let c = words(candidate);
    if c.is_empty() || references.is_empty() {
        return 0.0;
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for reference in references {
        let rw = words(reference);
        if rw.is_empty() {
            continue;
        }
        let l = lcs(&c, &rw) as f64;
        p = p.max(l / c.len() as f64);
        r = r.max(l / rw.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiderScores {
    /// Per-candidate CIDEr-D on the conventional ×10 scale.
    pub scores: Vec<f64>,
    /// Every IDF weight was zero because the corpus has one document.
    pub degenerate_idf: bool,
}

pub const CIDER_SIGMA: f64 = 6.0;

type TfIdf = Vec<BTreeMap<Vec<String>, f64>>;

fn tfidf(w: &[&str], df: &BTreeMap<Vec<String>, f64>, log_n: f64) -> (TfIdf, [f64; 4]) {
    let mut vecs: TfIdf = vec![BTreeMap::new(); 4];
    let mut norms = [0.0; 4];
    for k in 1..=4 {
        for (g, cnt) in ngrams(w, k) {
            let key: Vec<String> = g.iter().map(|s| s.to_string()).collect();
            let d = df.get(&key).copied().unwrap_or(0.0).max(1.0).ln();
            let v = cnt as f64 * (log_n - d);
            norms[k - 1] += v * v;
            vecs[k - 1].insert(key, v);
        }
    }
    (vecs, norms.map(f64::sqrt))
}

/// CIDEr-D. Document frequencies count each n-gram once per reference set;
/// candidate weights are clipped at the reference weights and a Gaussian
/// penalty on the length difference is applied.
pub fn cider_d(candidates: &[&str], references: &[Vec<&str>]) -> CiderScores {
    assert_eq!(candidates.len(), references.len(), "one reference set per candidate");
    let n_docs = references.len();
    let mut df: BTreeMap<Vec<String>, f64> = BTreeMap::new();
    for refs in references {
        let mut seen = BTreeSet::new();
        for r in refs {
            let w = words(r);
            for k in 1..=4 {
                for g in ngrams(&w, k).into_keys() {
                    seen.insert(g.iter().map(|s| s.to_string()).collect::<Vec<_>>());
                }
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let degenerate = n_docs < 2;
    if degenerate {
        log::warn!("CIDEr-D over a single-document corpus: every IDF weight is zero");
    }
    let log_n = (n_docs.max(1) as f64).ln();
    let scores = candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| {
            let cw = words(cand);
            let (cv, cn) = tfidf(&cw, &df, log_n);
            let mut total = [0.0; 4];
            for r in refs {
                let rw = words(r);
                let (rv, rn) = tfidf(&rw, &df, log_n);
                let delta = cw.len() as f64 - rw.len() as f64;
                let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                for k in 0..4 {
                    let mut val = 0.0;
                    for (g, &a) in &cv[k] {
                        if let Some(&b) = rv[k].get(g) {
                            val += a.min(b) * b;
                        }
                    }
                    if cn[k] != 0.0 && rn[k] != 0.0 {
                        val /= cn[k] * rn[k];
                    }
                    total[k] += val * penalty;
                }
            }
            let mean = total.iter().sum::<f64>() / 4.0;
            10.0 * mean / refs.len().max(1) as f64
        })
        .collect();
    CiderScores { scores, degenerate_idf: degenerate }
}

/// Chunk count of the alignment with the fewest chunks among those with the
/// most exact matches. Searches exhaustively up to a budget, then falls back
/// to a greedy left-to-right alignment.
fn align(c: &[&str], r: &[&str]) -> (usize, usize) {
    let mut cnt_r: BTreeMap<&str, usize> = BTreeMap::new();
    for w in r {
        *cnt_r.entry(w).or_insert(0) += 1;
    }
    let mut cnt_c: BTreeMap<&str, usize> = BTreeMap::new();
    for w in c {
        *cnt_c.entry(w).or_insert(0) += 1;
    }
    let matches: usize = cnt_c.iter().map(|(w, &n)| n.min(cnt_r.get(w).copied().unwrap_or(0))).sum();
    if matches == 0 {
        return (0, 0);
    }
    struct Search<'s> {
        c: &'s [&'s str],
        r: &'s [&'s str],
        used: Vec<bool>,
        pairs: Vec<(usize, usize)>,
        remaining_c: BTreeMap<&'s str, usize>,
        remaining_r: BTreeMap<&'s str, usize>,
        best: usize,
        budget: usize,
    }
    fn chunks(pairs: &[(usize, usize)]) -> usize {
        let mut n = 0;
        let mut last: Option<(usize, usize)> = None;
        for &(i, j) in pairs {
            match last {
                Some((pi, pj)) if i == pi + 1 && j == pj + 1 => {}
                _ => n += 1,
            }
            last = Some((i, j));
        }
        n
    }
    impl Search<'_> {
        fn go(&mut self, i: usize) {
            if self.budget == 0 {
                return;
            }
            self.budget -= 1;
            if chunks(&self.pairs) >= self.best {
                return;
            }
            if i == self.c.len() {
                self.best = chunks(&self.pairs);
                return;
            }
            let w = self.c[i];
            let need_c = self.remaining_c.get(w).copied().unwrap_or(0);
            let avail_r = self.remaining_r.get(w).copied().unwrap_or(0);
            if avail_r > 0 {
                *self.remaining_c.get_mut(w).unwrap() -= 1;
                *self.remaining_r.get_mut(w).unwrap() -= 1;
                for j in 0..self.r.len() {
                    if !self.used[j] && self.r[j] == w {
                        self.used[j] = true;
                        self.pairs.push((i, j));
                        self.go(i + 1);
                        self.pairs.pop();
                        self.used[j] = false;
                    }
                }
                *self.remaining_c.get_mut(w).unwrap() += 1;
                *self.remaining_r.get_mut(w).unwrap() += 1;
            }
            // skipping is allowed only while enough copies remain to keep the match count maximal
            if need_c > avail_r {
                if let Some(x) = self.remaining_c.get_mut(w) {
                    *x -= 1;
                }
                self.go(i + 1);
                if let Some(x) = self.remaining_c.get_mut(w) {
                    *x += 1;
                }
            }
        }
    }
    let mut s = Search {
        c,
        r,
        used: vec![false; r.len()],
        pairs: Vec::new(),
        remaining_c: cnt_c,
        remaining_r: cnt_r,
        best: usize::MAX,
        budget: 200_000,
    };
    s.go(0);
    if s.best == usize::MAX {
        let mut used = vec![false; r.len()];
        let mut pairs = Vec::new();
        for (i, w) in c.iter().enumerate() {
            if let Some(j) = (0..r.len()).find(|&j| !used[j] && r[j] == *w) {
                used[j] = true;
                pairs.push((i, j));
            }
        }
        s.best = chunks(&pairs);
    }
    (matches, s.best)
}

/// METEOR restricted to exact unigram matches: recall-weighted harmonic mean
/// `10PR/(R+9P)` times `1 − 0.5·(chunks/matches)³`.
pub fn meteor_exact(candidate: &str, reference: &str) -> f64 {
    let c = words(candidate);
    let r = words(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let (m, ch) = align(&c, &r);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let f = 10.0 * p * rec / (rec + 9.0 * p);
    let frag = ch as f64 / m as f64;
    f * (1.0 - 0.5 * frag.powi(3))
}
