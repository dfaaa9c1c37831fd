use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// What a proposal actually covers, when known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalLabel {
    /// Category name, or `None` for background clutter.
    pub category: Option<String>,
    /// Index of the proposal this one duplicates, if it is a redundant detection.
    pub duplicate_of: Option<usize>,
}

/// Ground-truth annotated object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub category: String,
}

/// Detected objects of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub boxes: Vec<BBox>,
    /// `[N × d_v]`.
    pub features: Tensor,
    pub labels: Option<Vec<ProposalLabel>>,
    pub ground_truth: Vec<LabeledBox>,
}

impl SceneRecord {
    pub fn new(
        image_id: impl Into<String>,
        width: f64,
        height: f64,
        boxes: Vec<BBox>,
        features: Tensor,
    ) -> Result<Self> {
        let s = Self {
            image_id: image_id.into(),
            width,
            height,
            boxes,
            features,
            labels: None,
            ground_truth: Vec::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn num_objects(&self) -> usize {
        self.boxes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.boxes.len();
        if self.features.rank() != 2 || self.features.shape()[0] != n {
            return Err(shape_err(
                "scene",
                format!("{}: {n} boxes but features {:?}", self.image_id, self.features.shape()),
            ));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(shape_err(
                    "scene",
                    format!("{}: {n} boxes but {} labels", self.image_id, labels.len()),
                ));
            }
        }
        if !self.features.is_finite() {
            return Err(Error::NonFinite(format!("features of scene {}", self.image_id)));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scene {} has image size {}x{}",
                self.image_id, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Copy with proposals reordered so that new index `k` holds old proposal `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.num_objects();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
        let mut inverse = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        let d = self.feature_dim();
        let mut feats = Vec::with_capacity(n * d);
        for &i in order {
            feats.extend_from_slice(self.feature(i));
        }
        Ok(Self {
            image_id: self.image_id.clone(),
            width: self.width,
            height: self.height,
            boxes: order.iter().map(|&i| self.boxes[i]).collect(),
            features: Tensor::new(vec![n, d], feats)?,
            labels: self.labels.as_ref().map(|ls| {
                order
                    .iter()
                    .map(|&i| {
                        let mut l = ls[i].clone();
                        l.duplicate_of = l.duplicate_of.map(|j| inverse[j]);
                        l
                    })
                    .collect()
            }),
            ground_truth: self.ground_truth.clone(),
        })
    }
}

/// One counting question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question_id: u64,
    pub image_id: String,
    pub question: String,
    pub tokens: Vec<String>,
    /// Consensus ground-truth count in `[0, 20]`.
    pub count: u32,
    /// The ten human answers.
    pub answers: Vec<String>,
    pub subject: String,
    /// Frequency bin, `0..=5` (bin 5 holds subjects unseen in training).
    pub bin: Option<usize>,
}
