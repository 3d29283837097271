//! Seeded synthetic removal scene.
//!
//! 64x64 pixels. Left of a vertical seam: horizontal green stripes
//! ("grass"); right of it: an 8-pixel brick checker ("brick wall"). A solid
//! red square (the target) straddles the seam and a blue disc (a
//! non-target foreground object) sits in the other vertical half. The
//! ground truth is the same picture without the square.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::Result;
use crate::fixtures::{FixtureRecord, WILDCARD};
use crate::io;
use crate::region::build_label_map;
use crate::types::{BinaryMask, ImageTensor, LabelMap, TagReport};

pub const SCENE_SIDE: usize = 64;
pub const TARGET_SIDE: usize = 16;
pub const DISC_RADIUS: usize = 6;
pub const TARGET_TAG: &str = "red box";
pub const NON_TARGET_TAG: &str = "blue ball";
pub const LEFT_TAG: &str = "grass";
pub const RIGHT_TAG: &str = "brick wall";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGeometry {
    /// Column where the right-hand texture starts.
    pub seam: usize,
    /// Top-left corner of the target square.
    pub target_y: usize,
    pub target_x: usize,
    /// Disc centre.
    pub disc_y: usize,
    pub disc_x: usize,
}

impl SceneGeometry {
    pub fn in_target(&self, y: usize, x: usize) -> bool {
        (self.target_y..self.target_y + TARGET_SIDE).contains(&y)
            && (self.target_x..self.target_x + TARGET_SIDE).contains(&x)
    }

    pub fn in_disc(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.disc_y as f64;
        let dx = x as f64 + 0.5 - self.disc_x as f64;
        dy * dy + dx * dx <= (DISC_RADIUS * DISC_RADIUS) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub geometry: SceneGeometry,
    pub image: ImageTensor,
    pub ground_truth: ImageTensor,
    pub target_mask: BinaryMask,
    pub non_target_mask: BinaryMask,
    pub left_mask: BinaryMask,
    pub right_mask: BinaryMask,
    pub labels: LabelMap,
}

const STRIPE_A: [f64; 3] = [0.22, 0.52, 0.18];
const STRIPE_B: [f64; 3] = [0.40, 0.72, 0.30];
const BRICK_A: [f64; 3] = [0.62, 0.30, 0.22];
const BRICK_B: [f64; 3] = [0.86, 0.66, 0.48];
const TARGET_RGB: [f64; 3] = [0.90, 0.10, 0.12];
const DISC_RGB: [f64; 3] = [0.15, 0.25, 0.85];
const GRAIN: f64 = 0.03;

pub fn generate_scene(seed: u64) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seam = 8 * rng.random_range(3..=5);
    let target_y = rng.random_range(6..=SCENE_SIDE - TARGET_SIDE - 6);
    let target_x = seam - rng.random_range(4..=TARGET_SIDE - 4);
    let disc_y = if target_y + TARGET_SIDE / 2 < SCENE_SIDE / 2 {
        rng.random_range(46..=54)
    } else {
        rng.random_range(10..=17)
    };
    let disc_x = rng.random_range(10..=SCENE_SIDE - 10);
    let geometry = SceneGeometry {
        seam,
        target_y,
        target_x,
        disc_y,
        disc_x,
    };

    let n = SCENE_SIDE * SCENE_SIDE;
    let mut truth = Vec::with_capacity(n * 3);
    for y in 0..SCENE_SIDE {
        for x in 0..SCENE_SIDE {
            let base = if geometry.in_disc(y, x) {
                DISC_RGB
            } else if x < seam {
                if (y / 4) % 2 == 0 {
                    STRIPE_A
                } else {
                    STRIPE_B
                }
            } else if (y / 8 + x / 8) % 2 == 0 {
                BRICK_A
            } else {
                BRICK_B
            };
            for v in base {
                truth.push((v + rng.random_range(-GRAIN..=GRAIN)).clamp(0.0, 1.0));
            }
        }
    }
    let mut data = truth.clone();
    for y in 0..SCENE_SIDE {
        for x in 0..SCENE_SIDE {
            if geometry.in_target(y, x) {
                data[(y * SCENE_SIDE + x) * 3..][..3].copy_from_slice(&TARGET_RGB);
            }
        }
    }
    let target_mask = BinaryMask::from_fn(SCENE_SIDE, SCENE_SIDE, |y, x| geometry.in_target(y, x));
    let non_target_mask =
        BinaryMask::from_fn(SCENE_SIDE, SCENE_SIDE, |y, x| geometry.in_disc(y, x));
    let left_mask = BinaryMask::from_fn(SCENE_SIDE, SCENE_SIDE, |y, x| {
        x < seam && !geometry.in_disc(y, x) && !geometry.in_target(y, x)
    });
    let right_mask = BinaryMask::from_fn(SCENE_SIDE, SCENE_SIDE, |y, x| {
        x >= seam && !geometry.in_disc(y, x) && !geometry.in_target(y, x)
    });
    let labels = build_label_map(&target_mask, &non_target_mask)?;
    Ok(SyntheticScene {
        seed,
        geometry,
        image: ImageTensor::new(SCENE_SIDE, SCENE_SIDE, 3, data)?,
        ground_truth: ImageTensor::new(SCENE_SIDE, SCENE_SIDE, 3, truth)?,
        target_mask,
        non_target_mask,
        left_mask,
        right_mask,
        labels,
    })
}

impl SyntheticScene {
    pub fn background_tags(&self) -> Vec<String> {
        vec![LEFT_TAG.to_owned(), RIGHT_TAG.to_owned()]
    }

    pub fn tag_report(&self) -> TagReport {
        TagReport {
            target_tag: TARGET_TAG.into(),
            non_target_tags: vec![NON_TARGET_TAG.into()],
            background_tags: self.background_tags(),
            raw_response: self.tag_response(),
        }
    }

    /// The answer a well-behaved tag classifier would give.
    pub fn tag_response(&self) -> String {
        json!({
            "target": TARGET_TAG,
            "non_target": [NON_TARGET_TAG],
            "background": [LEFT_TAG, RIGHT_TAG],
        })
        .to_string()
    }

    /// Wildcard fixtures answering tag classification and localization for
    /// this scene. Masks are referenced by the file names
    /// [`write_to`](Self::write_to) uses.
    pub fn fixture_records(&self) -> Vec<FixtureRecord> {
        let det = |file: &str| json!({"detections": [{"score": 0.9, "mask": file}]});
        vec![
            FixtureRecord {
                kind: "mllm".into(),
                key: WILDCARD.into(),
                tag: None,
                response: self.tag_response().into(),
            },
            FixtureRecord {
                kind: "tag2mask".into(),
                key: WILDCARD.into(),
                tag: Some(NON_TARGET_TAG.into()),
                response: det("ball_mask.png"),
            },
            FixtureRecord {
                kind: "tag2mask".into(),
                key: WILDCARD.into(),
                tag: Some(LEFT_TAG.into()),
                response: det("grass_mask.png"),
            },
            FixtureRecord {
                kind: "tag2mask".into(),
                key: WILDCARD.into(),
                tag: Some(RIGHT_TAG.into()),
                response: det("wall_mask.png"),
            },
        ]
    }

    /// Writes `image.png`, `target_mask.png`, `labels.png`,
    /// `ground_truth.png`, the localization masks and `fixtures.jsonl`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        io::write_image(&dir.join("image.png"), &self.image)?;
        io::write_image(&dir.join("ground_truth.png"), &self.ground_truth)?;
        io::write_binary_mask(&dir.join("target_mask.png"), &self.target_mask)?;
        io::write_label_mask(&dir.join("labels.png"), &self.labels)?;
        io::write_binary_mask(&dir.join("ball_mask.png"), &self.non_target_mask)?;
        io::write_binary_mask(&dir.join("grass_mask.png"), &self.left_mask)?;
        io::write_binary_mask(&dir.join("wall_mask.png"), &self.right_mask)?;
        let mut lines = String::new();
        for r in self.fixture_records() {
            lines.push_str(&serde_json::to_string(&r)?);
            lines.push('\n');
        }
        io::write_bytes(&dir.join("fixtures.jsonl"), lines.as_bytes())
    }
}
