//! Low-rank adapters on attention projections.
//!
//! Each adapted weight `W` (`out x in`) gains a pair of factors: `down`
//! (`r x in`) and `up` (`out x r`). The effective weight is
//! `W + scale * up * down`. `up` starts at zero, so a freshly injected state
//! leaves every forward pass unchanged.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Mat;
use crate::backbone::{standard_normal, DiffusionBackbone};
use crate::error::{Error, Result};
use crate::tensor::{decode_archive, encode_archive, NamedTensor};

pub const DEFAULT_RANK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub down: Mat,
    pub up: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraState {
    pub rank: usize,
    pub scale: f64,
    pub adapters: BTreeMap<String, Adapter>,
    merged: bool,
}

impl LoraState {
    pub fn new(rank: usize, scale: f64, adapters: BTreeMap<String, Adapter>) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Invalid("adapter rank must be at least 1".into()));
        }
        for (name, a) in &adapters {
            if a.down.rows != rank || a.up.cols != rank {
                return Err(Error::Shape(format!(
                    "adapter {name} factors {}x{} / {}x{} do not have rank {rank}",
                    a.down.rows, a.down.cols, a.up.rows, a.up.cols
                )));
            }
        }
        Ok(Self {
            rank,
            scale,
            adapters,
            merged: false,
        })
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn parameter_count(&self) -> usize {
        self.adapters
            .values()
            .map(|a| a.down.data.len() + a.up.data.len())
            .sum()
    }

    /// `scale * up * down` for one projection.
    pub fn delta(&self, name: &str) -> Option<Mat> {
        self.adapters
            .get(name)
            .map(|a| a.up.matmul(&a.down).scale(self.scale))
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = vec![NamedTensor {
            name: "lora.scale".into(),
            shape: vec![1],
            data: vec![self.scale],
        }];
        for (name, a) in &self.adapters {
            out.push(NamedTensor {
                name: format!("{name}.lora_down"),
                shape: vec![a.down.rows, a.down.cols],
                data: a.down.data.clone(),
            });
            out.push(NamedTensor {
                name: format!("{name}.lora_up"),
                shape: vec![a.up.rows, a.up.cols],
                data: a.up.data.clone(),
            });
        }
        out
    }

    pub fn from_tensors(tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut scale = None;
        let mut downs = BTreeMap::new();
        let mut ups = BTreeMap::new();
        for t in tensors {
            let as_mat = |t: &NamedTensor| -> Result<Mat> {
                match t.shape[..] {
                    [r, c] => Ok(Mat::from_vec(r, c, t.data.clone())),
                    _ => Err(Error::Wire(format!("{} is not a matrix", t.name))),
                }
            };
            if t.name == "lora.scale" && t.data.len() == 1 {
                scale = Some(t.data[0]);
            } else if let Some(base) = t.name.strip_suffix(".lora_down") {
                downs.insert(base.to_owned(), as_mat(&t)?);
            } else if let Some(base) = t.name.strip_suffix(".lora_up") {
                ups.insert(base.to_owned(), as_mat(&t)?);
            } else {
                return Err(Error::Wire(format!("unexpected tensor {}", t.name)));
            }
        }
        let scale = scale.ok_or_else(|| Error::Wire("archive has no lora.scale".into()))?;
        if downs.len() != ups.len() {
            return Err(Error::Wire("unpaired adapter factors".into()));
        }
        let mut adapters = BTreeMap::new();
        let mut rank = None;
        for (name, down) in downs {
            let up = ups
                .remove(&name)
                .ok_or_else(|| Error::Wire(format!("{name} has no up factor")))?;
            if *rank.get_or_insert(down.rows) != down.rows {
                return Err(Error::Wire("adapters disagree on rank".into()));
            }
            adapters.insert(name, Adapter { down, up });
        }
        Self::new(rank.unwrap_or(1), scale, adapters)
    }

    /// Archive bytes; factor values are stored as f32.
    pub fn to_archive(&self) -> Vec<u8> {
        encode_archive(&self.to_tensors())
    }

    pub fn from_archive(bytes: &[u8]) -> Result<Self> {
        Self::from_tensors(decode_archive(bytes)?)
    }

    /// SHA-256 of the archive encoding.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        crate::hex(&Sha256::digest(self.to_archive()))
    }

    /// Adds `step[name] = (d_down, d_up)` scaled by `-1`, i.e. `self -= step`.
    pub(crate) fn apply_update(&mut self, step: &BTreeMap<String, (Mat, Mat)>) {
        for (name, (dd, du)) in step {
            if let Some(a) = self.adapters.get_mut(name) {
                for (w, d) in a.down.data.iter_mut().zip(&dd.data) {
                    *w -= d;
                }
                for (w, d) in a.up.data.iter_mut().zip(&du.data) {
                    *w -= d;
                }
            }
        }
    }
}

/// Wraps every attention projection of `backbone` with a rank-`rank`
/// adapter. `down` is drawn from `N(0, 1/in)`, `up` is zero, and the scale
/// is `1/rank`.
pub fn inject_adapters(
    backbone: &dyn DiffusionBackbone,
    rank: usize,
    seed: u64,
) -> Result<LoraState> {
    if rank == 0 {
        return Err(Error::Invalid("adapter rank must be at least 1".into()));
    }
    let projections = backbone.attention_projections()?;
    if projections.is_empty() {
        return Err(Error::Invalid(
            "backbone exposes no attention projections to adapt".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapters = BTreeMap::new();
    for p in projections {
        let std = 1.0 / (p.cols as f64).sqrt();
        let down = standard_normal(&mut rng, rank * p.cols)
            .into_iter()
            .map(|v| v * std)
            .collect();
        adapters.insert(
            p.name,
            Adapter {
                down: Mat::from_vec(rank, p.cols, down),
                up: Mat::zeros(p.rows, rank),
            },
        );
    }
    LoraState::new(rank, 1.0 / rank as f64, adapters)
}

/// Folds the adapters into the backbone weights. A state can be merged
/// exactly once.
pub fn merge_adapters(backbone: &mut dyn DiffusionBackbone, lora: &mut LoraState) -> Result<()> {
    if lora.merged {
        return Err(Error::AlreadyMerged);
    }
    backbone.merge_weights(lora)?;
    lora.merged = true;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_state() -> LoraState {
        let mut adapters = BTreeMap::new();
        adapters.insert(
            "blk.q".to_owned(),
            Adapter {
                down: Mat::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]),
                up: Mat::zeros(4, 1),
            },
        );
        LoraState::new(1, 1.0, adapters).unwrap()
    }

    #[test]
    fn rank_one_on_four_by_four_adds_eight_parameters() {
        assert_eq!(small_state().parameter_count(), 8);
    }

    #[test]
    fn archive_roundtrip() {
        let s = small_state();
        let back = LoraState::from_archive(&s.to_archive()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.digest(), s.digest());
    }

    #[test]
    fn zero_rank_rejected() {
        assert!(LoraState::new(0, 1.0, BTreeMap::new()).is_err());
    }
}
