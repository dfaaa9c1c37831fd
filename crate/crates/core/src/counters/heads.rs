//! The three counting heads and the question-only baseline.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::data::SceneRecord;
use crate::error::{Error, Result};
use crate::geometry::{pair_features, PAIR_FEATURES};
use crate::nn::{Affine, Gtu, Mlp2};
use crate::tensor::{dot, l2_normalized, Tensor};

/// Number of count classes, `0..=20`.
pub const NUM_CLASSES: usize = 21;

/// Per-object sigmoid count values summed into a fractional count.
#[derive(Clone, Debug)]
pub struct SoftCountHead {
    pub proj: Affine,
}

impl SoftCountHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, score_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj: Affine::new(store, "softcount.proj", score_dim, 1, rng)?,
        })
    }

    /// Returns `(w [N], raw count scalar)`.
    pub fn forward(&self, g: &mut Graph, scores: Var) -> Result<(Var, Var)> {
        let n = g.value(scores).rows();
        let logits = self.proj.forward(g, scores)?;
        let logits = g.reshape(logits, vec![n])?;
        let w = g.sigmoid(logits);
        let raw = g.sum(w);
        Ok((w, raw))
    }
}

/// Rounds a fractional count and limits it to `[0, 20]`.
pub fn round_count(raw: f64) -> u32 {
    raw.round().clamp(0.0, (NUM_CLASSES - 1) as f64) as u32
}

/// Huber loss on the absolute count error.
pub fn softcount_loss(raw: f64, gt: u32) -> f64 {
    crate::nn::huber((raw - gt as f64).abs()).expect("absolute error is non-negative")
}

/// Graph version of [`softcount_loss`].
pub fn huber_count_loss(g: &mut Graph, raw: Var, gt: u32) -> Var {
    let err = g.offset(raw, -(gt as f64));
    g.huber_abs(err)
}

/// Question-guided attention over objects followed by a count classifier.
#[derive(Clone, Debug)]
pub struct UpDownHead {
    pub attend: Affine,
    pub visual: Gtu,
    pub question: Gtu,
    pub joint: Gtu,
    pub classify: Affine,
}

impl UpDownHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        score_dim: usize,
        feature_dim: usize,
        question_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attend: Affine::new(store, "updown.attend", score_dim, 1, rng)?,
            visual: Gtu::new(store, "updown.visual", feature_dim, hidden, rng)?,
            question: Gtu::new(store, "updown.question", question_dim, hidden, rng)?,
            joint: Gtu::new(store, "updown.joint", hidden, hidden, rng)?,
            classify: Affine::new(store, "updown.classify", hidden, NUM_CLASSES, rng)?,
        })
    }

    /// `α = softmax(W s + b)` and `v̂ = Σ αᵢ vᵢ`. Needs at least one object.
    pub fn attend(&self, g: &mut Graph, scores: Var, features: &Tensor) -> Result<(Var, Var)> {
        let n = g.value(scores).rows();
        if n == 0 || g.value(scores).is_empty() {
            return Err(Error::Empty("UpDown attention needs at least one proposal"));
        }
        let logits = self.attend.forward(g, scores)?;
        let logits = g.reshape(logits, vec![n])?;
        let alpha = g.softmax(logits)?;
        let v = g.constant(features.clone());
        let v_hat = g.vec_mat(alpha, v)?;
        Ok((alpha, v_hat))
    }

    /// Count logits `[21]` from the attended visual vector and the question.
    pub fn classify(&self, g: &mut Graph, v_hat: Var, q: Var) -> Result<Var> {
        let v = self.visual.forward(g, v_hat)?;
        let qq = self.question.forward(g, q)?;
        let joint = g.mul(v, qq)?;
        let h = self.joint.forward(g, joint)?;
        self.classify.forward(g, h)
    }
}

/// Logit projection, terminal logit and interaction network of IRLC.
#[derive(Clone, Debug)]
pub struct IrlcHead {
    pub logit: Affine,
    pub zeta: ParamId,
    pub compress: Affine,
    pub interaction: Mlp2,
}

/// Constant per-pair inputs: cosine similarity of features plus box statistics.
pub const PAIR_CONSTANTS: usize = 1 + PAIR_FEATURES;

impl IrlcHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        score_dim: usize,
        question_dim: usize,
        compressed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            logit: Affine::new(store, "irlc.logit", score_dim, 1, rng)?,
            zeta: store.add("irlc.zeta", Tensor::vector(vec![0.0]))?,
            compress: Affine::new(store, "irlc.compress", question_dim, compressed_dim, rng)?,
            interaction: Mlp2::new(store, "irlc.interaction", compressed_dim + PAIR_CONSTANTS, hidden, 1, rng)?,
        })
    }

    /// `κ⁰ [N]`, one scalar per score row.
    pub fn initial_logits(&self, g: &mut Graph, scores: Var) -> Result<Var> {
        let n = g.value(scores).rows();
        let k = self.logit.forward(g, scores)?;
        g.reshape(k, vec![n])
    }

    /// `ρ [N × N]`, `ρᵢⱼ` being the change to `κⱼ` when object `i` is counted.
    pub fn interactions(&self, g: &mut Graph, q: Var, scene: &SceneRecord) -> Result<Var> {
        let n = scene.num_objects();
        let pairs = pair_inputs(scene)?;
        let wq = self.compress.forward(g, q)?;
        let wq_rows = g.broadcast_rows(wq, n * n)?;
        let consts = g.constant(pairs);
        let x = g.concat_cols(wq_rows, consts)?;
        let rho = self.interaction.forward(g, x)?;
        g.reshape(rho, vec![n, n])
    }

    pub fn zeta(&self, g: &mut Graph) -> Var {
        g.param(self.zeta)
    }
}

/// `[N² × 12]` rows `[v̂ᵢᵀv̂ⱼ, pair_features(bᵢ, bⱼ)]`, row-major over `(i, j)`.
pub fn pair_inputs(scene: &SceneRecord) -> Result<Tensor> {
    let n = scene.num_objects();
    let normed: Vec<Vec<f64>> = (0..n).map(|i| l2_normalized(scene.feature(i))).collect();
    let mut data = Vec::with_capacity(n * n * PAIR_CONSTANTS);
    for i in 0..n {
        for j in 0..n {
            data.push(dot(&normed[i], &normed[j]));
            data.extend_from_slice(&pair_features(&scene.boxes[i], &scene.boxes[j], scene.width, scene.height)?);
        }
    }
    Tensor::new(vec![n * n, PAIR_CONSTANTS], data)
}

/// Count regressed from the question encoding alone.
#[derive(Clone, Debug)]
pub struct LstmBaselineHead {
    pub proj: Affine,
}

impl LstmBaselineHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, question_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj: Affine::new(store, "lstm_baseline.proj", question_dim, 1, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, q: Var) -> Result<Var> {
        let y = self.proj.forward(g, q)?;
        Ok(g.sum(y))
    }
}

/// Most common ground-truth count of a training split; ties go to the smaller count.
pub fn guess1_mode(counts: &[u32]) -> Result<u32> {
    if counts.is_empty() {
        return Err(Error::Empty("training split for the Guess1 baseline"));
    }
    let mut hist = [0usize; NUM_CLASSES];
    for &c in counts {
        hist[(c as usize).min(NUM_CLASSES - 1)] += 1;
    }
    let best = crate::tensor::argmax(&hist.iter().map(|&h| h as f64).collect::<Vec<_>>())
        .expect("non-empty histogram");
    Ok(best as u32)
}
