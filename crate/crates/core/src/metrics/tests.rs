use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::*;
use crate::scenegen::grammar::lexicon;
use crate::scenegen::SceneConfig;

fn lex() -> BTreeMap<String, crate::scenegen::grammar::Pos> {
    lexicon(&SceneConfig::default().color_names())
}

#[test]
fn bleu_cases() {
    assert_eq!(bleu("a red triangle sits left", &["a red triangle sits left"], 4).score, 100.0);
    assert_eq!(bleu("x y z", &["a b c"], 1).score, 0.0);
    let b = bleu("the cat sat", &["the cat sat down"], 2);
    assert!((b.score - 100.0 * (-1.0f64 / 3.0).exp()).abs() < 1e-9);
    assert!((b.score - 71.653).abs() < 1e-3);
    let e = bleu("", &["a b"], 2);
    assert!(e.empty && e.score == 0.0);
    // clipping: "the the the" vs "the cat" has P1 = 1/3
    let c = bleu("the the the", &["the cat the"], 1);
    assert!((c.score - 100.0 * 2.0 / 3.0).abs() < 1e-9);
}

#[test]
fn rouge_cases() {
    assert_eq!(rouge_l("a red triangle", &["a red triangle"]), 1.0);
    assert_eq!(rouge_l("x y", &["a b"]), 0.0);
    let (p, r, b2) = (0.75, 1.0, 1.44);
    let expect = (1.0 + b2) * p * r / (r + b2 * p);
    assert!((rouge_l("a b c d", &["a c d"]) - expect).abs() < 1e-10);
    assert_eq!(rouge_l("", &["a"]), 0.0);
}

/// Dense re-implementation over an explicit n-gram index.
fn brute_cider(cands: &[&str], refs: &[Vec<&str>]) -> Vec<f64> {
    let grams = |s: &str, n: usize| -> Vec<String> {
        let w: Vec<&str> = s.split_whitespace().collect();
        if w.len() < n {
            return vec![];
        }
        (0..=w.len() - n).map(|i| w[i..i + n].join(" ")).collect()
    };
    let mut out = vec![];
    let nd = refs.len() as f64;
    for (c, rs) in cands.iter().zip(refs) {
        let mut total = 0.0;
        for r in rs {
            let mut sim = 0.0;
            for n in 1..=4 {
                let mut index: Vec<String> = grams(c, n).into_iter().chain(grams(r, n)).collect();
                index.sort();
                index.dedup();
                let df = |g: &String| refs.iter().filter(|set| set.iter().any(|x| grams(x, n).contains(g))).count() as f64;
                let vec_of = |s: &str| -> Vec<f64> {
                    let gs = grams(s, n);
                    index.iter().map(|g| gs.iter().filter(|x| *x == g).count() as f64 * (nd.ln() - df(g).max(1.0).ln())).collect()
                };
                let (vc, vr) = (vec_of(c), vec_of(r));
                let nc = vc.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nr = vr.iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut v: f64 = vc.iter().zip(&vr).map(|(a, b)| a.min(*b) * b).sum();
                if nc > 0.0 && nr > 0.0 {
                    v /= nc * nr;
                }
                let delta = c.split_whitespace().count() as f64 - r.split_whitespace().count() as f64;
                sim += v * (-(delta * delta) / 72.0).exp();
            }
            total += sim / 4.0;
        }
        out.push(10.0 * total / rs.len() as f64);
    }
    out
}

#[test]
fn cider_toy_corpus_matches_brute_force() {
    let cands = ["a red circle sits left of a blue square", "a green triangle", "a red square floats above a red circle"];
    let refs = vec![
        vec!["a red circle sits left of a green square", "a red circle"],
        vec!["a green triangle"],
        vec!["a red square floats above a blue circle"],
    ];
    let got = cider_d(&cands, &refs);
    let want = brute_cider(&cands, &refs);
    for (g, w) in got.scores.iter().zip(&want) {
        assert!((g - w).abs() < 1e-9, "{g} vs {w}");
    }
    assert!(!got.degenerate_idf);
}

#[test]
fn cider_hand_values() {
    let refs = vec![vec!["a b"], vec!["c d"], vec!["e f"]];
    let s = cider_d(&["a b", "x y", "c d"], &refs);
    // unigram and bigram cosines are 1, orders 3 and 4 are empty: 10 · 2/4
    assert!((s.scores[0] - 5.0).abs() < 1e-12);
    assert_eq!(s.scores[1], 0.0);
    let single = cider_d(&["a b"], &[vec!["a b"]]);
    assert!(single.degenerate_idf);
    assert_eq!(single.scores[0], 0.0);
}

#[test]
fn cider_is_order_invariant() {
    let cands = ["a red circle", "a blue square sits left of a red circle", "a green triangle"];
    let refs = vec![vec!["a red circle"], vec!["a blue square sits left of a red circle"], vec!["a green square"]];
    let a = cider_d(&cands, &refs);
    let rc = [cands[2], cands[0], cands[1]];
    let rr = vec![refs[2].clone(), refs[0].clone(), refs[1].clone()];
    let b = cider_d(&rc, &rr);
    assert_eq!(a.scores[0], b.scores[1]);
    assert_eq!(a.scores[1], b.scores[2]);
    assert_eq!(a.scores[2], b.scores[0]);
}

#[test]
fn meteor_cases() {
    let m: f64 = 4.0;
    assert!((meteor_exact("a red triangle sits", "a red triangle sits") - (1.0 - 0.5 / m.powi(3))).abs() < 1e-12);
    assert_eq!(meteor_exact("x y", "a b"), 0.0);
    // the→the, red→red, cat→cat gives three chunks: F = 1, penalty 0.5
    assert!((meteor_exact("the red cat", "the cat red") - 0.5).abs() < 1e-10);
    // repeated words: the alignment keeping "a red" and "a blue" contiguous wins
    let s = meteor_exact("a red circle sits left of a blue square", "a blue square sits left of a red circle");
    let (p, r) = (1.0, 1.0);
    let f = 10.0 * p * r / (r + 9.0 * p);
    assert!((s - f * (1.0 - 0.5 * (3.0f64 / 9.0).powi(3))).abs() < 1e-10, "{s}");
}

#[test]
fn phrase_extraction_and_coverage() {
    let l = lex();
    let nouns = extract_phrases("a red triangle sits left of a blue circle", &l, PhraseKind::Noun);
    assert_eq!(nouns, BTreeSet::from(["red triangle".to_string(), "blue circle".to_string()]));
    let verbs = extract_phrases("a red triangle sits left of a blue circle", &l, PhraseKind::Verb);
    assert_eq!(verbs, BTreeSet::from(["sits left".to_string()]));
    let c = phrase_coverage("a red triangle", "a red triangle", &l, PhraseKind::Noun, MatchMode::Exact);
    assert_eq!(c.score, 1.0);
    let c = phrase_coverage("a red triangle", "a blue circle", &l, PhraseKind::Noun, MatchMode::Exact);
    assert_eq!(c.score, 0.0);
    let v = phrase_coverage("a red triangle", "a blue circle", &l, PhraseKind::Verb, MatchMode::Exact);
    assert!(v.vacuous && v.score == 1.0);
    let a = BTreeSet::from(["red triangle".to_string()]);
    let b = BTreeSet::from(["red triangles".to_string()]);
    let exact = set_coverage(&a, &b, MatchMode::Exact).score;
    let fuzzy = set_coverage(&a, &b, MatchMode::Fuzzy).score;
    assert_eq!(exact, 0.0);
    assert!(fuzzy > exact);
    assert!((set_coverage(&a, &a, MatchMode::Fuzzy).score - 1.0).abs() < 1e-12);
}

fn trigram_counts(p: &str) -> HashMap<String, f64> {
    let chars: Vec<char> = format!("#{p}#").chars().collect();
    let mut m = HashMap::new();
    for w in chars.windows(3) {
        *m.entry(w.iter().collect::<String>()).or_insert(0.0) += 1.0;
    }
    m
}

#[test]
fn phrase_embedding_matches_counting() {
    let a = phrase_embed("triangle");
    let b = phrase_embed("triangles");
    let (ca, cb) = (trigram_counts("triangle"), trigram_counts("triangles"));
    let dot: f64 = ca.iter().map(|(k, v)| v * cb.get(k).unwrap_or(&0.0)).sum();
    let na = ca.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = cb.values().map(|v| v * v).sum::<f64>().sqrt();
    assert!((a.cosine(&b) - dot / (na * nb)).abs() < 1e-12);
    assert!((a.cosine(&b) - 7.0 / 72f64.sqrt()).abs() < 1e-12);
    assert!((a.cosine(&a) - 1.0).abs() < 1e-12);
    assert_eq!(phrase_embed("xyz").cosine(&phrase_embed("abc")), 0.0);
    let e = phrase_embed("  ");
    assert!(e.empty && e.entries.is_empty());
}

#[test]
fn distribution_cases() {
    let d = distribution_report(&[0.0, 0.0, 0.0, 10.0]);
    assert!((d.skewness.unwrap() - 2.0 / 3f64.sqrt()).abs() < 1e-12);
    assert_eq!(d.zero_fraction, 0.75);
    assert_eq!(d.counts.iter().sum::<usize>(), 4);
    assert_eq!(d.edges.len(), 21);
    let c = distribution_report(&[3.0; 5]);
    assert!(c.skewness.is_none());
    assert_eq!(c.counts.iter().sum::<usize>(), 5);
}

#[test]
fn identical_captions_score_perfectly() {
    let l = lex();
    let s = vec!["a red triangle sits left of a blue circle".to_string(), "a green square".to_string()];
    let spaced = vec!["a  red triangle sits left of a blue   circle".to_string(), " a green square ".to_string()];
    let r = evaluate(&spaced, &s, &l);
    for k in ["BLEU@1", "BLEU@2", "ROUGE-L", "Noun(E)", "Noun(F)", "Verb(E)", "ExactMatch"] {
        assert!((r.means[k] - 100.0).abs() < 1e-9, "{k} {}", r.means[k]);
    }
    assert!(r.table().contains("SPICE"));
    assert!(r.key_values().contains("mean.SPICE=absent"));
}
