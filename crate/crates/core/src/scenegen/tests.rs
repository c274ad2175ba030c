use super::grammar::{lexicon, Pos};
use super::*;

fn one_object() -> SceneConfig {
    SceneConfig {
        min_objects: 1,
        max_objects: 1,
        ..SceneConfig::default()
    }
}

#[test]
fn single_object_scene_is_deterministic() {
    let cfg = one_object();
    let a = generate_scene(0, &cfg).unwrap();
    let b = generate_scene(0, &cfg).unwrap();
    assert_eq!(a.objects.len(), 1);
    assert_eq!(a.image.data(), b.image.data());
    assert_eq!(a.objects, b.objects);
}

#[test]
fn images_stay_in_unit_range_and_objects_fit() {
    let cfg = SceneConfig::default();
    for seed in 0..50 {
        let s = generate_scene(seed, &cfg).unwrap();
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(!s.objects.is_empty() && s.objects.len() <= cfg.max_objects);
        for o in &s.objects {
            assert!(o.cx - o.radius >= 0.0 && o.cx + o.radius <= 64.0);
            assert!(o.cy - o.radius >= 0.0 && o.cy + o.radius <= 64.0);
        }
    }
}

#[test]
fn impossible_placement_is_a_generation_error() {
    let cfg = SceneConfig {
        min_objects: 12,
        max_objects: 12,
        small_radius: (9.0, 9.0),
        large_radius: (11.0, 11.0),
        max_retries: 20,
        ..SceneConfig::default()
    };
    assert!(matches!(generate_scene(1, &cfg), Err(Error::Generation(_))));
}

#[test]
fn class_distribution_matches_palette() {
    let cfg = SceneConfig::default();
    let probs = cfg.color_probabilities();
    let shape_probs = cfg.shape_probabilities();
    let mut colors = vec![0usize; probs.len()];
    let mut shapes = [0usize; 3];
    let mut total = 0usize;
    for seed in 0..1000 {
        for o in generate_scene(seed, &cfg).unwrap().objects {
            colors[o.color] += 1;
            shapes[ShapeKind::ALL.iter().position(|&k| k == o.kind).unwrap()] += 1;
            total += 1;
        }
    }
    for (c, p) in colors.iter().zip(&probs) {
        assert!((*c as f64 / total as f64 - p).abs() < 0.05, "{colors:?} vs {probs:?}");
    }
    for (c, p) in shapes.iter().zip(&shape_probs) {
        assert!((*c as f64 / total as f64 - p).abs() < 0.05);
    }
}

#[test]
fn region_box_is_tight_mask_bbox_and_point_inside() {
    let cfg = SceneConfig::default();
    let vocab = cfg.vocabulary();
    for seed in 0..40 {
        let scene = generate_scene(seed, &cfg).unwrap();
        let regions = regions_of(&scene, &vocab);
        assert_eq!(regions.len(), scene.objects.len());
        for r in &regions {
            assert_eq!(mask_bbox(&r.mask), Some(r.bbox));
            assert!(r.bbox.x0 < r.bbox.x1 && r.bbox.y0 < r.bbox.y1);
            assert_eq!(r.mask.data()[r.point.1 * 64 + r.point.0], 1.0);
            assert!(r.mask_area() >= MIN_REGION_AREA);
            assert_eq!(*r.target(TargetKind::Caption).last().unwrap(), crate::lm::vocab::EOS);
        }
    }
}

#[test]
fn mask_area_matches_analytic_area() {
    let cfg = SceneConfig::default();
    let vocab = cfg.vocabulary();
    for seed in 0..100 {
        let scene = generate_scene(seed, &cfg).unwrap();
        for (r, o) in regions_of(&scene, &vocab).iter().zip(&scene.objects) {
            let analytic = o.kind.area(o.radius);
            let diff = (r.mask_area() as f64 - analytic).abs();
            assert!(diff <= o.kind.perimeter(o.radius), "{:?} area {} vs {analytic}", o.kind, r.mask_area());
        }
    }
}

#[test]
fn lone_object_caption_has_no_relation() {
    let cfg = one_object();
    let vocab = cfg.vocabulary();
    for seed in 0..30 {
        let scene = generate_scene(seed, &cfg).unwrap();
        let o = &scene.objects[0];
        let expect = format!("a {} {}", scene.color_name(o), o.kind.name());
        let r = &regions_of(&scene, &vocab)[0];
        assert_eq!(vocab.detokenize(&r.caption), expect);
        assert_eq!(vocab.detokenize(&r.label), format!("{} {}", scene.color_name(o), o.kind.name()));
    }
    let scene = Scene {
        seed: 0,
        image: Arc::new(Tensor::zeros(&[64, 64, 3])),
        objects: vec![Object { kind: ShapeKind::Triangle, color: 0, size: SizeClass::Small, cx: 20.0, cy: 20.0, radius: 5.0 }],
        palette: cfg.color_names(),
    };
    assert_eq!(grammar::caption(&scene, 0).join(" "), "a red triangle");
}

#[test]
fn multi_object_captions_have_one_verb_and_closed_lexicon() {
    let cfg = SceneConfig::default();
    let lex = lexicon(&cfg.color_names());
    let vocab = cfg.vocabulary();
    let mut checked = 0;
    let mut seed = 0;
    while checked < 1000 {
        let scene = generate_scene(seed, &cfg).unwrap();
        for i in 0..scene.objects.len() {
            let words = grammar::caption(&scene, i);
            assert!(words.iter().all(|w| lex.contains_key(w)), "{words:?}");
            let verbs = words.iter().filter(|w| lex[*w] == Pos::Verb).count();
            assert_eq!(verbs, usize::from(scene.objects.len() > 1));
            let text = words.join(" ");
            assert_eq!(vocab.detokenize(&vocab.tokenize(&text)), text);
            checked += 1;
        }
        seed += 1;
    }
}

#[test]
fn relation_follows_geometry() {
    let mk = |cx, cy| Object { kind: ShapeKind::Circle, color: 0, size: SizeClass::Small, cx, cy, radius: 5.0 };
    use grammar::{relation, Relation};
    assert_eq!(relation(&mk(10.0, 30.0), &mk(40.0, 32.0)), Relation::LeftOf);
    assert_eq!(relation(&mk(40.0, 30.0), &mk(10.0, 32.0)), Relation::RightOf);
    assert_eq!(relation(&mk(30.0, 10.0), &mk(32.0, 40.0)), Relation::Above);
    assert_eq!(relation(&mk(30.0, 40.0), &mk(32.0, 10.0)), Relation::Below);
}
