//! Point and box prompts, plus a model-free segmenter that answers them by
//! colour flood fill.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::clients::{Detection, Tag2MaskClient};
use crate::error::{Error, Result};
use crate::types::{BinaryMask, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Include,
    Exclude,
}

/// A user prompt. Coordinates are pixels; boxes are `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PromptEvent {
    Point {
        x: usize,
        y: usize,
        polarity: Polarity,
    },
    Bbox {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        polarity: Polarity,
    },
}

impl PromptEvent {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        match *self {
            PromptEvent::Point { x, y, .. } if x >= width || y >= height => Err(Error::Invalid(
                format!("point ({x}, {y}) outside {width}x{height} image"),
            )),
            PromptEvent::Bbox { x0, y0, x1, y1, .. }
                if x0 >= x1 || y0 >= y1 || x1 > width || y1 > height =>
            {
                Err(Error::Invalid(format!(
                    "box [{x0},{x1})x[{y0},{y1}) is empty or outside {width}x{height} image"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Flood-fill segmenter. Include-point grows the mask by the colour region
/// around the point; exclude-point removes the mask component under it;
/// include-box fills from the box centre without leaving the box;
/// exclude-box clears the box. It finds nothing for text tags.
#[derive(Debug, Clone, Copy)]
pub struct LocalSegmenter {
    /// Largest per-channel difference from the seed colour that still
    /// counts as the same region.
    pub tolerance: f64,
}

impl Default for LocalSegmenter {
    fn default() -> Self {
        Self { tolerance: 0.08 }
    }
}

fn neighbours(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    [(0isize, 1isize), (1, 0), (0, -1), (-1, 0)]
        .into_iter()
        .filter_map(move |(dy, dx)| {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w)
                .then_some((ny as usize, nx as usize))
        })
}

fn flood(
    h: usize,
    w: usize,
    seed: (usize, usize),
    inside: impl Fn(usize, usize) -> bool,
) -> BinaryMask {
    let mut out = BinaryMask::empty(h, w);
    if !inside(seed.0, seed.1) {
        return out;
    }
    let mut queue = VecDeque::from([seed]);
    out.set(seed.0, seed.1, true);
    while let Some((y, x)) = queue.pop_front() {
        for (ny, nx) in neighbours(y, x, h, w) {
            if !out.get(ny, nx) && inside(ny, nx) {
                out.set(ny, nx, true);
                queue.push_back((ny, nx));
            }
        }
    }
    out
}

impl LocalSegmenter {
    fn similar(&self, image: &ImageTensor, a: (usize, usize), b: (usize, usize)) -> bool {
        (0..image.channels())
            .all(|c| (image.get(a.0, a.1, c) - image.get(b.0, b.1, c)).abs() <= self.tolerance)
    }

    pub fn apply(
        &self,
        image: &ImageTensor,
        current: &BinaryMask,
        event: &PromptEvent,
    ) -> Result<BinaryMask> {
        let (h, w) = image.dims();
        if current.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "mask {:?} does not match image {:?}",
                current.dims(),
                (h, w)
            )));
        }
        event.validate(h, w)?;
        match *event {
            PromptEvent::Point {
                x,
                y,
                polarity: Polarity::Include,
            } => current.union(&flood(h, w, (y, x), |py, px| {
                self.similar(image, (y, x), (py, px))
            })),
            PromptEvent::Point {
                x,
                y,
                polarity: Polarity::Exclude,
            } => current.minus(&flood(h, w, (y, x), |py, px| current.get(py, px))),
            PromptEvent::Bbox {
                x0,
                y0,
                x1,
                y1,
                polarity,
            } => {
                let in_box =
                    |py: usize, px: usize| (y0..y1).contains(&py) && (x0..x1).contains(&px);
                match polarity {
                    Polarity::Include => {
                        let seed = ((y0 + y1 - 1) / 2, (x0 + x1 - 1) / 2);
                        current.union(&flood(h, w, seed, |py, px| {
                            in_box(py, px) && self.similar(image, seed, (py, px))
                        }))
                    }
                    Polarity::Exclude => current.minus(&BinaryMask::from_fn(h, w, in_box)),
                }
            }
        }
    }
}

impl Tag2MaskClient for LocalSegmenter {
    fn name(&self) -> String {
        "local-flood-fill".into()
    }

    fn detect(&self, _image: &ImageTensor, _tag: &str) -> Result<Vec<Detection>> {
        Ok(Vec::new())
    }

    fn segment(
        &self,
        image: &ImageTensor,
        current: &BinaryMask,
        event: &PromptEvent,
    ) -> Result<BinaryMask> {
        self.apply(image, current, event)
    }
}
