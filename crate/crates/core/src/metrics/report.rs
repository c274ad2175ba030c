use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::ngram::{bleu, cider_d, meteor_exact, rouge_l};
use super::phrases::{phrase_coverage, MatchMode, PhraseKind};
use crate::scenegen::grammar::Pos;

pub const HIST_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    /// `HIST_BINS + 1` edges spanning the observed range.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Fisher's moment coefficient `m3 / m2^1.5`; `None` for zero variance.
    pub skewness: Option<f64>,
    pub zero_fraction: f64,
}

pub fn distribution_report(scores: &[f64]) -> Distribution {
    assert!(!scores.is_empty(), "distribution of an empty score list");
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let m2 = scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = scores.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let skewness = if m2 > 0.0 { Some(m3 / m2.powf(1.5)) } else { None };
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / HIST_BINS as f64;
    let edges = (0..=HIST_BINS).map(|i| if i == HIST_BINS { hi } else { lo + width * i as f64 }).collect();
    let mut counts = vec![0usize; HIST_BINS];
    for &x in scores {
        let bin = if width > 0.0 { (((x - lo) / width) as usize).min(HIST_BINS - 1) } else { 0 };
        counts[bin] += 1;
    }
    Distribution {
        count: scores.len(),
        mean,
        edges,
        counts,
        skewness,
        zero_fraction: scores.iter().filter(|&&x| x == 0.0).count() as f64 / n,
    }
}

/// Per-sample scores for every metric, their means and the CIDEr-D
/// distribution. N-gram metrics are on the ×100 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub per_sample: BTreeMap<String, Vec<f64>>,
    pub means: BTreeMap<String, f64>,
    pub cider_distribution: Distribution,
    pub exact_match: f64,
    /// Samples whose phrase sets were both empty, per coverage column.
    pub vacuous: BTreeMap<String, usize>,
}

pub const COLUMNS: [&str; 13] = [
    "CIDEr-D", "METEOR-exact", "BLEU@1", "BLEU@2", "BLEU@3", "BLEU@4", "ROUGE-L", "Noun(E)", "Noun(F)", "Verb(E)", "Verb(F)",
    "ExactMatch", "SPICE",
];

/// Scores candidates against one reference each.
pub fn evaluate(candidates: &[String], references: &[String], lexicon: &BTreeMap<String, Pos>) -> ScoreReport {
    assert_eq!(candidates.len(), references.len());
    assert!(!candidates.is_empty(), "evaluation needs at least one sample");
    let mut per: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut vacuous: BTreeMap<String, usize> = BTreeMap::new();
    let cands: Vec<&str> = candidates.iter().map(String::as_str).collect();
    let refs: Vec<Vec<&str>> = references.iter().map(|r| vec![r.as_str()]).collect();
    let cider = cider_d(&cands, &refs);
    per.insert("CIDEr-D".into(), cider.scores.iter().map(|s| s * 100.0).collect());
    for (c, r) in candidates.iter().zip(references) {
        let mut push = |k: &str, v: f64| per.entry(k.to_string()).or_default().push(v);
        for n in 1..=4 {
            push(&format!("BLEU@{n}"), bleu(c, &[r], n).score);
        }
        push("ROUGE-L", 100.0 * rouge_l(c, &[r]));
        push("METEOR-exact", 100.0 * meteor_exact(c, r));
        push("ExactMatch", if c.split_whitespace().eq(r.split_whitespace()) { 100.0 } else { 0.0 });
        for (kind, kn) in [(PhraseKind::Noun, "Noun"), (PhraseKind::Verb, "Verb")] {
            for (mode, mn) in [(MatchMode::Exact, "E"), (MatchMode::Fuzzy, "F")] {
                let key = format!("{kn}({mn})");
                let cov = phrase_coverage(c, r, lexicon, kind, mode);
                if cov.vacuous {
                    *vacuous.entry(key.clone()).or_insert(0) += 1;
                }
                push(&key, 100.0 * cov.score);
            }
        }
    }
    let means = per.iter().map(|(k, v)| (k.clone(), v.iter().sum::<f64>() / v.len() as f64)).collect::<BTreeMap<_, _>>();
    ScoreReport {
        cider_distribution: distribution_report(&per["CIDEr-D"]),
        exact_match: means["ExactMatch"],
        per_sample: per,
        means,
        vacuous,
    }
}

impl ScoreReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let n = self.cider_distribution.count;
        let _ = writeln!(s, "samples: {n}");
        for col in COLUMNS {
            match self.means.get(col) {
                Some(v) => {
                    let _ = writeln!(s, "{col:<14}{v:>10.2}");
                }
                None => {
                    let _ = writeln!(s, "{col:<14}{:>10}", "absent");
                }
            }
        }
        let d = &self.cider_distribution;
        let skew = d.skewness.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(s, "CIDEr-D skewness {skew}, zero fraction {:.4}", d.zero_fraction);
        s
    }

    /// `key=value` lines for machines.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples={}", self.cider_distribution.count);
        for (k, v) in &self.means {
            let _ = writeln!(s, "mean.{k}={v}");
        }
        let _ = writeln!(s, "mean.SPICE=absent");
        for (k, v) in &self.vacuous {
            let _ = writeln!(s, "vacuous.{k}={v}");
        }
        let d = &self.cider_distribution;
        let _ = writeln!(s, "cider.skewness={}", d.skewness.map_or("undefined".to_string(), |v| v.to_string()));
        let _ = writeln!(s, "cider.zero_fraction={}", d.zero_fraction);
        let _ = writeln!(s, "cider.hist_edges={}", d.edges.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","));
        let _ = writeln!(s, "cider.hist_counts={}", d.counts.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","));
        s
    }
}
