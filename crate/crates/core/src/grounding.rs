//! Auxiliary caption grounding: pick the proposal a region caption describes,
//! scored through the same object-scoring function used for counting.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::nn::Affine;

/// Minimum IoU for a caption to be matched to a proposal.
pub const ASSIGN_IOU: f64 = 0.5;
/// Weight of the grounding loss relative to the counting loss.
pub const GROUNDING_WEIGHT: f64 = 0.1;
/// Images per batch that contribute grounding examples.
pub const GROUNDING_IMAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub text: String,
    pub tokens: Vec<String>,
    pub bbox: BBox,
    /// Matched proposal, `None` when no proposal reaches [`ASSIGN_IOU`].
    pub assigned: Option<usize>,
}

/// Proposal with the largest IoU against `caption_box`, if that IoU is at least 0.5.
/// Ties go to the smaller index.
pub fn assign_caption(caption_box: &BBox, proposals: &[BBox]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in proposals.iter().enumerate() {
        let v = iou(caption_box, b);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best.filter(|&(_, v)| v >= ASSIGN_IOU).map(|(i, _)| i)
}

/// Projects caption-conditioned score rows to per-proposal logits.
#[derive(Clone, Debug)]
pub struct GroundingHead {
    pub proj: Affine,
}

impl GroundingHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, score_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj: Affine::new(store, "grounding.proj", score_dim, 1, rng)?,
        })
    }

    /// Logits `[N]` from scores `[N × n]`.
    pub fn logits(&self, g: &mut Graph, scores: Var) -> Result<Var> {
        let n = g.value(scores).rows();
        if n == 0 || g.value(scores).is_empty() {
            return Err(Error::Empty("caption grounding needs at least one proposal"));
        }
        let a = self.proj.forward(g, scores)?;
        g.reshape(a, vec![n])
    }
}

/// Chooses `images` batch positions to supply grounding examples, without replacement.
pub fn choose_grounding_images<R: Rng + ?Sized>(batch_len: usize, images: usize, rng: &mut R) -> Vec<usize> {
    let k = images.min(batch_len);
    let mut picked = sample(rng, batch_len, k).into_vec();
    picked.sort_unstable();
    picked
}
