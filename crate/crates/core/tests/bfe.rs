use std::path::Path;
use std::sync::Mutex;

use erase_core::bfe::*;
use erase_core::clients::{
    Detection, FixtureTag2Mask, FixtureVisionClient, Tag2MaskClient, VisionLanguageClient,
};
use erase_core::fixtures::FixtureSet;
use erase_core::scene::generate_scene;
use erase_core::segment::PromptEvent;
use erase_core::types::{BinaryMask, ImageTensor, Label};
use erase_core::{Error, ErrorClass, Result};

/// Answers from a queue, one per call.
struct Scripted(Mutex<Vec<Result<String>>>);

impl Scripted {
    fn new(answers: Vec<Result<String>>) -> Self {
        Self(Mutex::new(answers.into_iter().rev().collect()))
    }
}

impl VisionLanguageClient for Scripted {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn complete(&self, _: &str, _: &[ImageTensor]) -> Result<String> {
        self.0
            .lock()
            .unwrap()
            .pop()
            .expect("no scripted answer left")
    }
}

type Rect = (f64, [usize; 4]);

/// Fixed detections per tag, as rectangles.
struct Boxes(Vec<(&'static str, Vec<Rect>)>);

impl Tag2MaskClient for Boxes {
    fn name(&self) -> String {
        "boxes".into()
    }

    fn detect(&self, image: &ImageTensor, tag: &str) -> Result<Vec<Detection>> {
        let (h, w) = image.dims();
        let dets = self
            .0
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, d)| d.clone())
            .unwrap_or_default();
        Ok(dets
            .into_iter()
            .map(|(score, [y0, x0, y1, x1])| Detection {
                score,
                height: h,
                width: w,
                probs: (0..h * w)
                    .map(|i| {
                        f64::from(u8::from(
                            (y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w)),
                        ))
                    })
                    .collect(),
            })
            .collect())
    }

    fn segment(
        &self,
        _: &ImageTensor,
        current: &BinaryMask,
        _: &PromptEvent,
    ) -> Result<BinaryMask> {
        Ok(current.clone())
    }
}

fn grey(h: usize, w: usize) -> ImageTensor {
    ImageTensor::filled(h, w, 3, 0.5).unwrap()
}

const DOG: &str = r#"{"target":"dog","non_target":["person"],"background":["grass","fence"]}"#;

#[test]
fn fixed_answer_passes_through() {
    let client = Scripted::new(vec![Ok(DOG.into())]);
    let mask = BinaryMask::from_fn(8, 8, |y, _| y < 2);
    let mut audit = Vec::new();
    let report = classify_tags(&client, DEFAULT_PROMPT, &grey(8, 8), &mask, &mut audit).unwrap();
    assert_eq!(report.target_tag, "dog");
    assert_eq!(report.non_target_tags, ["person"]);
    assert_eq!(report.background_tags, ["grass", "fence"]);
    assert_eq!(report.raw_response, DOG);
    assert_eq!(audit.len(), 1);
}

#[test]
fn overlapping_lists_are_a_parse_error() {
    let raw = r#"{"target":"dog","non_target":["Grass"],"background":["grass"]}"#;
    match parse_tag_response(raw) {
        Err(Error::Parse { raw: r, .. }) => assert_eq!(r, raw),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn one_retry_on_unparseable_answer() {
    let mask = BinaryMask::from_fn(8, 8, |_, x| x == 0);
    let client = Scripted::new(vec![Ok("no idea".into()), Ok(DOG.into())]);
    let mut audit = Vec::new();
    assert!(classify_tags(&client, "p", &grey(8, 8), &mask, &mut audit).is_ok());
    assert_eq!(audit.len(), 2);

    let client = Scripted::new(vec![Ok("nope".into()), Ok("{still not".into())]);
    let err = classify_tags(&client, "p", &grey(8, 8), &mask, &mut Vec::new()).unwrap_err();
    assert!(matches!(&err, Error::Parse { raw, .. } if raw == "{still not"));
    assert_eq!(err.class(), ErrorClass::Client);

    let client = Scripted::new(vec![Err(Error::Transport {
        client: "x".into(),
        message: "down".into(),
    })]);
    let err = classify_tags(&client, "p", &grey(8, 8), &mask, &mut Vec::new()).unwrap_err();
    assert!(err.is_retryable());
}

#[test]
fn recorded_stadium_scene() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/stadium");
    let fixtures = FixtureSet::load(&dir.join("fixtures.jsonl")).unwrap();
    let mllm = FixtureVisionClient {
        kind: "mllm".into(),
        fixtures: fixtures.clone(),
    };
    let t2m = FixtureTag2Mask { fixtures };
    let image = grey(32, 32);
    let target = BinaryMask::from_fn(32, 32, |y, x| {
        (12..28).contains(&y) && (14..20).contains(&x)
    });
    let result = run_bfe(&mllm, &t2m, &BfeConfig::default(), &image, &target).unwrap();
    let bg = result.background_tags();
    for tag in ["spectator stand", "advertisement", "grass"] {
        assert!(bg.iter().any(|t| t == tag), "{tag} missing from {bg:?}");
    }
    // the ball scores below the box threshold and is dropped
    let dispositions = result.dispositions();
    assert!(dispositions.contains(&("ball".to_owned(), Disposition::Discarded)));
    assert_eq!(result.per_tag_masks["advertisement"].area(), 3 * 32 + 12);
    assert_eq!(result.label_map.count(Label::NonTarget), 16 * 6);
    assert_eq!(result.label_map.count(Label::Target), target.area());
    result.check_consistency().unwrap();
}

#[test]
fn localized_areas_and_union() {
    let client = Boxes(vec![
        ("a", vec![(0.9, [0, 0, 2, 5])]),
        ("b", vec![(0.9, [4, 4, 8, 8]), (0.8, [6, 6, 10, 8])]),
        ("ghost", vec![]),
    ]);
    let tags = [
        ("a".to_owned(), TagRole::NonTarget),
        ("b".to_owned(), TagRole::Background),
        ("ghost".to_owned(), TagRole::NonTarget),
    ];
    let out = localize_tags(&client, &grey(16, 16), &tags, &BfeConfig::default()).unwrap();
    let areas: Vec<usize> = out.iter().map(|(m, _)| m.area()).collect();
    // b is the union 16 + 8 - 4 overlapping pixels
    assert_eq!(areas, [10, 20, 0]);
    assert_eq!(out[2].1.disposition, Some(Disposition::Discarded));
    assert_eq!(out[0].1.disposition, Some(Disposition::Localized));
}

#[test]
fn target_wins_over_covered_detection_and_unseen_background_is_kept() {
    let answer = r#"{"target":"cat","non_target":["toy"],"background":["sofa","fence"]}"#;
    let mllm = Scripted::new(vec![Ok(answer.into())]);
    let t2m = Boxes(vec![
        ("toy", vec![(0.9, [2, 2, 4, 4])]),
        ("sofa", vec![(0.9, [0, 0, 8, 8])]),
    ]);
    let target = BinaryMask::from_fn(8, 8, |y, x| (1..5).contains(&y) && (1..5).contains(&x));
    let r = run_bfe(&mllm, &t2m, &BfeConfig::default(), &grey(8, 8), &target).unwrap();
    assert_eq!(r.label_map.count(Label::NonTarget), 0);
    assert_eq!(r.label_map.count(Label::Target), 16);
    assert!(r.background_tags().iter().any(|t| t == "fence"));
    assert!(r
        .dispositions()
        .contains(&("fence".to_owned(), Disposition::OccludedKept)));
    assert!(r.warnings.is_empty());
}

#[test]
fn missing_background_is_a_warning() {
    let mllm = Scripted::new(vec![Ok(
        r#"{"target":"cat","non_target":[],"background":[]}"#.into(),
    )]);
    let target = BinaryMask::from_fn(8, 8, |y, _| y == 0);
    let r = run_bfe(
        &mllm,
        &Boxes(vec![]),
        &BfeConfig::default(),
        &grey(8, 8),
        &target,
    )
    .unwrap();
    assert_eq!(r.warnings.len(), 1);
}

#[test]
fn scene_fixtures_give_a_stable_result() {
    let scene = generate_scene(4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    scene.write_to(dir.path()).unwrap();
    let run = || {
        let fixtures = FixtureSet::load(&dir.path().join("fixtures.jsonl")).unwrap();
        let mllm = FixtureVisionClient {
            kind: "mllm".into(),
            fixtures: fixtures.clone(),
        };
        run_bfe(
            &mllm,
            &FixtureTag2Mask { fixtures },
            &BfeConfig::default(),
            &scene.image,
            &scene.target_mask,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.label_map, scene.labels);
    assert_eq!(BfeResult::from_json(&a.to_json()).unwrap(), a);
}
