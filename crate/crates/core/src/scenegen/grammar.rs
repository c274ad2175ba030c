//! Caption grammar and its part-of-speech lexicon.
//!
//! Captions follow `a <color> <shape> [<verb> <relation> a <color> <shape>]`
//! where the relation is taken from the geometry of the nearest other
//! object. The verb is fixed per relation so a caption is a function of the
//! scene.

use std::collections::BTreeMap;

use super::{Object, Scene, ShapeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Pos {
    Noun,
    Verb,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["sits", "left", "of"],
            Relation::RightOf => &["sits", "right", "of"],
            Relation::Above => &["floats", "above"],
            Relation::Below => &["rests", "below"],
        }
    }
}

const FUNCTION_WORDS: [&str; 7] = ["a", "of", "left", "right", "above", "below", "the"];
const VERBS: [&str; 3] = ["sits", "floats", "rests"];

/// Words that never start or extend a phrase.
pub const STOPWORDS: [&str; 3] = ["a", "the", "of"];

/// Maps every word the grammar can emit to its part of speech.
pub fn lexicon(color_names: &[String]) -> BTreeMap<String, Pos> {
    let mut lex = BTreeMap::new();
    for w in FUNCTION_WORDS {
        lex.insert(w.to_string(), Pos::Other);
    }
    for w in VERBS {
        lex.insert(w.to_string(), Pos::Verb);
    }
    for s in ShapeKind::ALL {
        lex.insert(s.name().to_string(), Pos::Noun);
    }
    for c in color_names {
        lex.insert(c.clone(), Pos::Other);
    }
    lex
}

/// Where `target` sits relative to `other`.
pub fn relation(target: &Object, other: &Object) -> Relation {
    let dx = other.cx - target.cx;
    let dy = other.cy - target.cy;
    if dx.abs() >= dy.abs() {
        if dx > 0.0 {
            Relation::LeftOf
        } else {
            Relation::RightOf
        }
    } else if dy > 0.0 {
        Relation::Above
    } else {
        Relation::Below
    }
}

/// Nearest other object by center distance, ties broken by index.
pub fn nearest_other(scene: &Scene, index: usize) -> Option<usize> {
    let me = &scene.objects[index];
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != index)
        .map(|(i, o)| (i, (o.cx - me.cx).powi(2) + (o.cy - me.cy).powi(2)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

/// Bare category name used as the weak-supervision target.
pub fn class_label(scene: &Scene, object: &Object) -> Vec<String> {
    vec![scene.color_name(object).to_string(), object.kind.name().to_string()]
}

pub fn caption(scene: &Scene, index: usize) -> Vec<String> {
    let obj = &scene.objects[index];
    let mut words = vec!["a".to_string()];
    words.extend(class_label(scene, obj));
    if let Some(j) = nearest_other(scene, index) {
        let other = &scene.objects[j];
        words.extend(relation(obj, other).words().iter().map(|w| w.to_string()));
        words.push("a".to_string());
        words.extend(class_label(scene, other));
    }
    words
}
