//! Noun- and verb-phrase coverage between a candidate and a reference.

use std::collections::{BTreeMap, BTreeSet};

use crate::scenegen::grammar::{Pos, STOPWORDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhraseKind {
    Noun,
    Verb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    Exact,
    Fuzzy,
}

/// Phrases of one kind. A noun phrase is a run of modifier words ending in a
/// noun; a verb phrase is a verb followed by its modifier words. Stopwords
/// end a run and never join one. Words missing from the lexicon count as
/// modifiers.
pub fn extract_phrases(sentence: &str, lexicon: &BTreeMap<String, Pos>, kind: PhraseKind) -> BTreeSet<String> {
    let pos = |w: &str| lexicon.get(w).copied().unwrap_or(Pos::Other);
    let stop = |w: &str| STOPWORDS.contains(&w);
    let words: Vec<&str> = sentence.split_whitespace().collect();
    let mut out = BTreeSet::new();
    match kind {
        PhraseKind::Noun => {
            let mut run: Vec<&str> = Vec::new();
            for w in words {
                if stop(w) {
                    run.clear();
                    continue;
                }
                match pos(w) {
                    Pos::Noun => {
                        run.push(w);
                        out.insert(run.join(" "));
                        run.clear();
                    }
                    Pos::Verb => run.clear(),
                    Pos::Other => run.push(w),
                }
            }
        }
        PhraseKind::Verb => {
            let mut i = 0;
            while i < words.len() {
                if pos(words[i]) == Pos::Verb {
                    let mut phrase = vec![words[i]];
                    let mut j = i + 1;
                    while j < words.len() && !stop(words[j]) && pos(words[j]) == Pos::Other {
                        phrase.push(words[j]);
                        j += 1;
                    }
                    out.insert(phrase.join(" "));
                    i = j;
                } else {
                    i += 1;
                }
            }
        }
    }
    out
}

pub const EMBED_BUCKETS: u64 = 1 << 20;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Sparse unit vector over hashed character trigrams of `#phrase#`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhraseEmbedding {
    pub entries: BTreeMap<u64, f64>,
    /// The phrase was empty and the vector is zero.
    pub empty: bool,
}

impl PhraseEmbedding {
    pub fn cosine(&self, other: &PhraseEmbedding) -> f64 {
        self.entries.iter().filter_map(|(k, a)| other.entries.get(k).map(|b| a * b)).sum()
    }
}

pub fn phrase_embed(phrase: &str) -> PhraseEmbedding {
    let p = phrase.split_whitespace().collect::<Vec<_>>().join(" ");
    if p.is_empty() {
        return PhraseEmbedding { entries: BTreeMap::new(), empty: true };
    }
    let chars: Vec<char> = format!("#{p}#").chars().collect();
    let mut entries = BTreeMap::new();
    for w in chars.windows(3) {
        let tri: String = w.iter().collect();
        *entries.entry(fnv1a(&tri) % EMBED_BUCKETS).or_insert(0.0) += 1.0;
    }
    let norm = entries.values().map(|v: &f64| v * v).sum::<f64>().sqrt();
    entries.values_mut().for_each(|v| *v /= norm);
    PhraseEmbedding { entries, empty: false }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub score: f64,
    /// Both phrase sets were empty; the score is the vacuous 1.0.
    pub vacuous: bool,
}

/// IoU of two phrase sets; fuzzy mode greedily pairs phrases by embedding
/// cosine and treats the summed similarity as the intersection.
pub fn set_coverage(a: &BTreeSet<String>, b: &BTreeSet<String>, mode: MatchMode) -> Coverage {
    if a.is_empty() && b.is_empty() {
        return Coverage { score: 1.0, vacuous: true };
    }
    let inter = match mode {
        MatchMode::Exact => a.intersection(b).count() as f64,
        MatchMode::Fuzzy => {
            let ea: Vec<_> = a.iter().map(|p| phrase_embed(p)).collect();
            let eb: Vec<_> = b.iter().map(|p| phrase_embed(p)).collect();
            let mut pairs = Vec::new();
            for (i, x) in ea.iter().enumerate() {
                for (j, y) in eb.iter().enumerate() {
                    pairs.push((x.cosine(y), i, j));
                }
            }
            pairs.sort_by(|p, q| q.0.total_cmp(&p.0));
            let (mut ua, mut ub) = (vec![false; ea.len()], vec![false; eb.len()]);
            let mut total = 0.0;
            for (c, i, j) in pairs {
                if !ua[i] && !ub[j] && c > 0.0 {
                    ua[i] = true;
                    ub[j] = true;
                    total += c;
                }
            }
            total
        }
    };
    let union = a.len() as f64 + b.len() as f64 - inter;
    Coverage { score: inter / union, vacuous: false }
}

pub fn phrase_coverage(
    candidate: &str,
    reference: &str,
    lexicon: &BTreeMap<String, Pos>,
    kind: PhraseKind,
    mode: MatchMode,
) -> Coverage {
    let a = extract_phrases(candidate, lexicon, kind);
    let b = extract_phrases(reference, lexicon, kind);
    set_coverage(&a, &b, mode)
}
