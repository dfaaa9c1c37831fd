//! A complete counting model: shared language front end plus one head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::heads::{
    huber_count_loss, round_count, IrlcHead, LstmBaselineHead, SoftCountHead, UpDownHead, NUM_CLASSES,
};
use super::rollout::{default_cap, episode_terms, greedy_rollout, reward, sample_rollout, Episode};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::checkpoint::Checkpoint;
use crate::data::SceneRecord;
use crate::error::{format_err, Error, Result};
use crate::grounding::GroundingHead;
use crate::language::{EmbeddingTable, ObjectScorer, TextEncoder, Vocabulary};
use crate::nn::dropout;
use crate::tensor::{argmax, softmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    SoftCount,
    UpDown,
    Irlc,
    Guess1,
    Lstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::SoftCount,
        ModelKind::UpDown,
        ModelKind::Irlc,
        ModelKind::Guess1,
        ModelKind::Lstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SoftCount => "softcount",
            ModelKind::UpDown => "updown",
            ModelKind::Irlc => "irlc",
            ModelKind::Guess1 => "guess1",
            ModelKind::Lstm => "lstm",
        }
    }

    /// Whether the model scores objects (and so can take part in caption grounding).
    pub fn uses_scene(self) -> bool {
        matches!(self, ModelKind::SoftCount | ModelKind::UpDown | ModelKind::Irlc)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model kind {s:?}")))
    }
}

/// Layer sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_emb: usize,
    pub d_hid: usize,
    /// Width `n` of each object score vector.
    pub score_dim: usize,
    pub d_v: usize,
    pub interaction_hidden: usize,
    /// Size of the compressed question fed to the interaction network.
    pub compressed_question: usize,
}

impl ModelDims {
    /// Small sizes for synthetic scenes.
    pub fn desk(kind: ModelKind) -> Self {
        Self {
            d_emb: 32,
            d_hid: 64,
            score_dim: if kind == ModelKind::Irlc { 128 } else { 64 },
            d_v: 64,
            interaction_hidden: 32,
            compressed_question: 16,
        }
    }

    /// Sizes for real detector features.
    pub fn paper(kind: ModelKind) -> Self {
        Self {
            d_emb: 300,
            d_hid: 1024,
            score_dim: if kind == ModelKind::Irlc { 2048 } else { 512 },
            d_v: 2048,
            interaction_hidden: 256,
            compressed_question: 256,
        }
    }
}

/// Knobs of the training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub dropout: f64,
    /// Sampled rollouts per question.
    pub samples: usize,
    pub entropy_weight: f64,
    pub interaction_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            dropout: 0.3,
            samples: 5,
            entropy_weight: 0.005,
            interaction_weight: 0.005,
        }
    }
}

/// Per-question inputs and randomness while training.
pub struct TrainContext<'a> {
    pub objective: &'a ObjectiveConfig,
    pub rng: &'a mut ChaCha8Rng,
}

/// Output of one counting question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountPrediction {
    pub count: u32,
    /// Unrounded count (SoftCount / LSTM), expected count (UpDown) or the count itself (IRLC).
    pub raw: f64,
    /// Per-object weights: sigmoid values, attention weights, or 0/1 selections.
    pub weights: Vec<f64>,
    /// UpDown class probabilities over `0..=20`.
    pub probabilities: Option<Vec<f64>>,
    /// IRLC selection order.
    pub selected: Option<Vec<usize>>,
}

/// Loss node plus component values for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub counting: f64,
    pub entropy: f64,
    pub interaction: f64,
}

/// IRLC quantities for one question, evaluated without dropout.
#[derive(Clone, Debug)]
pub struct IrlcState {
    pub kappa0: Vec<f64>,
    pub zeta: f64,
    pub rho: Tensor,
    pub greedy: Episode,
}

#[derive(Clone, Debug)]
pub struct Language {
    pub embed: EmbeddingTable,
    pub question: TextEncoder,
    pub caption: TextEncoder,
    pub scorer: ObjectScorer,
    pub grounding: GroundingHead,
}

#[derive(Clone, Debug)]
enum Head {
    SoftCount(SoftCountHead),
    UpDown(UpDownHead),
    Irlc(IrlcHead),
    Lstm(LstmBaselineHead),
    Guess1(ParamId),
}

#[derive(Serialize, Deserialize)]
struct ModelSpec {
    kind: ModelKind,
    dims: ModelDims,
    vocab: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct CountingModel {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    language: Option<Language>,
    head: Head,
}

impl CountingModel {
    pub fn new(kind: ModelKind, dims: ModelDims, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let language = if kind == ModelKind::Guess1 {
            None
        } else {
            let embed = EmbeddingTable::new(&mut store, "embedding", vocab.len(), dims.d_emb, &mut rng)?;
            let question = TextEncoder::new(&mut store, "question_lstm", dims.d_emb, dims.d_hid, &mut rng)?;
            let caption = TextEncoder::new(&mut store, "caption_lstm", dims.d_emb, dims.d_hid, &mut rng)?;
            let scorer = ObjectScorer::new(&mut store, "scorer", dims.d_hid, dims.d_v, dims.score_dim, &mut rng)?;
            let grounding = GroundingHead::new(&mut store, dims.score_dim, &mut rng)?;
            Some(Language {
                embed,
                question,
                caption,
                scorer,
                grounding,
            })
        };
        let head = match kind {
            ModelKind::SoftCount => Head::SoftCount(SoftCountHead::new(&mut store, dims.score_dim, &mut rng)?),
            ModelKind::UpDown => Head::UpDown(UpDownHead::new(
                &mut store,
                dims.score_dim,
                dims.d_v,
                dims.d_hid,
                dims.score_dim,
                &mut rng,
            )?),
            ModelKind::Irlc => Head::Irlc(IrlcHead::new(
                &mut store,
                dims.score_dim,
                dims.d_hid,
                dims.compressed_question,
                dims.interaction_hidden,
                &mut rng,
            )?),
            ModelKind::Lstm => Head::Lstm(LstmBaselineHead::new(&mut store, dims.d_hid, &mut rng)?),
            ModelKind::Guess1 => {
                let id = store.add("guess1.mode", Tensor::vector(vec![1.0]))?;
                store.get_mut(id).trainable = false;
                Head::Guess1(id)
            }
        };
        Ok(Self {
            kind,
            dims,
            vocab,
            store,
            language,
            head,
        })
    }

    pub fn language(&self) -> Option<&Language> {
        self.language.as_ref()
    }

    fn lang(&self) -> Result<&Language> {
        self.language
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no language module", self.kind)))
    }

    pub fn irlc_head(&self) -> Option<&IrlcHead> {
        match &self.head {
            Head::Irlc(h) => Some(h),
            _ => None,
        }
    }

    pub fn softcount_head(&self) -> Option<&SoftCountHead> {
        match &self.head {
            Head::SoftCount(h) => Some(h),
            _ => None,
        }
    }

    pub fn lstm_head(&self) -> Option<&LstmBaselineHead> {
        match &self.head {
            Head::Lstm(h) => Some(h),
            _ => None,
        }
    }

    pub fn set_guess(&mut self, count: u32) -> Result<()> {
        match self.head {
            Head::Guess1(id) => {
                self.store.value_mut(id).data_mut()[0] = count as f64;
                Ok(())
            }
            _ => Err(Error::InvalidArgument(format!("{} is not the Guess1 baseline", self.kind))),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let spec = ModelSpec {
            kind: self.kind,
            dims: self.dims.clone(),
            vocab: (0..self.vocab.len()).map(|i| self.vocab.token(i).unwrap().to_owned()).collect(),
        };
        Checkpoint::from_store(&self.store, serde_json::to_string(&spec).expect("spec serializes"))
    }

    fn spec_of(ck: &Checkpoint) -> Result<(ModelSpec, Vocabulary)> {
        let spec: ModelSpec = serde_json::from_str(&ck.metadata)
            .map_err(|e| format_err("checkpoint metadata", e.to_string()))?;
        let vocab = Vocabulary::from_json(&serde_json::to_string(&spec.vocab)?)?;
        Ok((spec, vocab))
    }

    /// Rebuilds the model described by the checkpoint's own metadata.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (spec, vocab) = Self::spec_of(ck)?;
        let mut model = Self::new(spec.kind, spec.dims, vocab, 0)?;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }

    /// Builds a `kind` model with `dims` and loads the checkpoint into it; any
    /// parameter whose name or shape disagrees is an error.
    pub fn from_checkpoint_as(ck: &Checkpoint, kind: ModelKind, dims: ModelDims) -> Result<Self> {
        let (spec, vocab) = Self::spec_of(ck)?;
        if spec.kind != kind {
            return Err(Error::InvalidArgument(format!("checkpoint holds a {} model, config asks for {kind}", spec.kind)));
        }
        let mut model = Self::new(kind, dims, vocab, 0)?;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }

    /// Overwrites word embeddings from a GloVe-format source; returns the rows filled.
    pub fn load_glove<B: std::io::BufRead>(&mut self, reader: B) -> Result<usize> {
        let embed = self.lang()?.embed.clone();
        embed.load_glove(&mut self.store, &self.vocab, reader)
    }

    pub fn token_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        self.vocab.encode(tokens)
    }

    fn check_scene(&self, scene: &SceneRecord) -> Result<()> {
        if self.kind.uses_scene() && scene.feature_dim() != self.dims.d_v && scene.num_objects() > 0 {
            return Err(crate::error::shape_err(
                "model",
                format!("scene {} has d_v = {}, model expects {}", scene.image_id, scene.feature_dim(), self.dims.d_v),
            ));
        }
        Ok(())
    }

    fn encode_question(&self, g: &mut Graph, ids: &[usize], train: &mut Option<TrainContext>) -> Result<Var> {
        let lang = self.lang()?;
        let q = lang.question.encode(g, &lang.embed, ids)?;
        match train {
            Some(ctx) => dropout(g, q, ctx.objective.dropout, true, ctx.rng),
            None => Ok(q),
        }
    }

    fn score(&self, g: &mut Graph, q: Var, scene: &SceneRecord, train: &mut Option<TrainContext>) -> Result<Var> {
        let lang = self.lang()?;
        let features = if scene.num_objects() == 0 {
            Tensor::zeros(&[0, self.dims.d_v])
        } else {
            scene.features.clone()
        };
        let s = lang.scorer.score(g, q, &features)?;
        match train {
            Some(ctx) => dropout(g, s, ctx.objective.dropout, true, ctx.rng),
            None => Ok(s),
        }
    }

    /// Score matrix `[N × n]` for a question, without dropout.
    pub fn score_matrix(&self, scene: &SceneRecord, ids: &[usize]) -> Result<Tensor> {
        self.check_scene(scene)?;
        let mut g = Graph::new(&self.store);
        let q = self.encode_question(&mut g, ids, &mut None)?;
        let s = self.score(&mut g, q, scene, &mut None)?;
        Ok(g.value(s).clone())
    }

    /// Question encoding `q`, without dropout.
    pub fn question_encoding(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let q = self.encode_question(&mut g, ids, &mut None)?;
        Ok(g.value(q).data().to_vec())
    }

    /// Evaluation-mode prediction.
    pub fn predict(&self, scene: &SceneRecord, ids: &[usize]) -> Result<CountPrediction> {
        self.check_scene(scene)?;
        let n = scene.num_objects();
        if let Head::Guess1(id) = self.head {
            let count = self.store.value(id).item() as u32;
            return Ok(CountPrediction {
                count,
                raw: count as f64,
                weights: vec![0.0; n],
                probabilities: None,
                selected: None,
            });
        }
        let mut g = Graph::new(&self.store);
        let q = self.encode_question(&mut g, ids, &mut None)?;
        match &self.head {
            Head::SoftCount(h) => {
                let s = self.score(&mut g, q, scene, &mut None)?;
                let (w, raw) = h.forward(&mut g, s)?;
                let raw = g.scalar(raw);
                Ok(CountPrediction {
                    count: round_count(raw),
                    raw,
                    weights: g.value(w).data().to_vec(),
                    probabilities: None,
                    selected: None,
                })
            }
            Head::UpDown(h) => {
                if n == 0 {
                    let mut p = vec![0.0; NUM_CLASSES];
                    p[0] = 1.0;
                    return Ok(CountPrediction {
                        count: 0,
                        raw: 0.0,
                        weights: Vec::new(),
                        probabilities: Some(p),
                        selected: None,
                    });
                }
                let s = self.score(&mut g, q, scene, &mut None)?;
                let (alpha, v_hat) = h.attend(&mut g, s, &scene.features)?;
                let logits = h.classify(&mut g, v_hat, q)?;
                let p = softmax(g.value(logits).data());
                let count = argmax(&p).expect("21 classes") as u32;
                let expected = p.iter().enumerate().map(|(c, pc)| c as f64 * pc).sum();
                Ok(CountPrediction {
                    count,
                    raw: expected,
                    weights: g.value(alpha).data().to_vec(),
                    probabilities: Some(p),
                    selected: None,
                })
            }
            Head::Irlc(_) => {
                drop(g);
                let state = self.irlc_state(scene, ids)?;
                let ep = &state.greedy;
                Ok(CountPrediction {
                    count: ep.count as u32,
                    raw: ep.count as f64,
                    weights: ep.weights(n),
                    probabilities: None,
                    selected: Some(ep.selected.clone()),
                })
            }
            Head::Lstm(h) => {
                let raw = h.forward(&mut g, q)?;
                let raw = g.scalar(raw);
                Ok(CountPrediction {
                    count: round_count(raw),
                    raw,
                    weights: vec![0.0; n],
                    probabilities: None,
                    selected: None,
                })
            }
            Head::Guess1(_) => unreachable!("handled above"),
        }
    }

    fn irlc_forward(
        &self,
        g: &mut Graph,
        h: &IrlcHead,
        scene: &SceneRecord,
        ids: &[usize],
        train: &mut Option<TrainContext>,
    ) -> Result<(Var, Var, Var)> {
        let q = self.encode_question(g, ids, train)?;
        let s = self.score(g, q, scene, train)?;
        let kappa0 = h.initial_logits(g, s)?;
        let rho = h.interactions(g, q, scene)?;
        let zeta = h.zeta(g);
        Ok((kappa0, zeta, rho))
    }

    /// `κ⁰`, `ζ`, `ρ` and the greedy episode for one question.
    pub fn irlc_state(&self, scene: &SceneRecord, ids: &[usize]) -> Result<IrlcState> {
        self.check_scene(scene)?;
        let Head::Irlc(h) = &self.head else {
            return Err(Error::InvalidArgument(format!("{} is not IRLC", self.kind)));
        };
        let mut g = Graph::new(&self.store);
        let (k, z, r) = self.irlc_forward(&mut g, h, scene, ids, &mut None)?;
        let kappa0 = g.value(k).data().to_vec();
        let zeta = g.scalar(z);
        let rho = g.value(r).clone();
        let greedy = greedy_rollout(&kappa0, zeta, &rho, default_cap(kappa0.len()))?;
        Ok(IrlcState {
            kappa0,
            zeta,
            rho,
            greedy,
        })
    }

    /// Records the training loss of one counting question on `g`.
    pub fn counting_loss(
        &self,
        g: &mut Graph,
        scene: &SceneRecord,
        ids: &[usize],
        gt: u32,
        ctx: TrainContext,
    ) -> Result<LossTerms> {
        self.check_scene(scene)?;
        let mut train = Some(ctx);
        match &self.head {
            Head::Guess1(_) => Err(Error::InvalidArgument("Guess1 has no trainable loss".into())),
            Head::SoftCount(h) => {
                let q = self.encode_question(g, ids, &mut train)?;
                let s = self.score(g, q, scene, &mut train)?;
                let (_, raw) = h.forward(g, s)?;
                let loss = huber_count_loss(g, raw, gt);
                Ok(plain_terms(g, loss))
            }
            Head::Lstm(h) => {
                let q = self.encode_question(g, ids, &mut train)?;
                let raw = h.forward(g, q)?;
                let loss = huber_count_loss(g, raw, gt);
                Ok(plain_terms(g, loss))
            }
            Head::UpDown(h) => {
                let q = self.encode_question(g, ids, &mut train)?;
                let v_hat = if scene.num_objects() == 0 {
                    g.constant(Tensor::zeros(&[self.dims.d_v]))
                } else {
                    let s = self.score(g, q, scene, &mut train)?;
                    h.attend(g, s, &scene.features)?.1
                };
                let logits = h.classify(g, v_hat, q)?;
                let target = (gt as usize).min(NUM_CLASSES - 1);
                let loss = g.cross_entropy_logits(logits, target)?;
                Ok(plain_terms(g, loss))
            }
            Head::Irlc(h) => {
                let (kappa0, zeta, rho) = self.irlc_forward(g, h, scene, ids, &mut train)?;
                let ctx = train.expect("training context present");
                let k0 = g.value(kappa0).data().to_vec();
                let z = g.scalar(zeta);
                let rv = g.value(rho).clone();
                let cap = default_cap(k0.len());
                let greedy = greedy_rollout(&k0, z, &rv, cap)?;
                let samples = ctx.objective.samples.max(1);
                let mut per_sample = Vec::with_capacity(samples);
                let (mut lc_sum, mut ph_sum, mut pi_sum) = (0.0, 0.0, 0.0);
                for _ in 0..samples {
                    let ep = sample_rollout(&k0, z, &rv, cap, ctx.rng)?;
                    let terms = episode_terms(g, kappa0, zeta, rho, &ep)?;
                    let r = reward(&ep, &greedy, gt);
                    let lc = g.scale(terms.log_prob_sum, -r);
                    let ph = g.scale(terms.entropy_penalty, ctx.objective.entropy_weight);
                    let pi = g.scale(terms.interaction_penalty, ctx.objective.interaction_weight);
                    let parts = g.concat(&[lc, ph, pi]);
                    let total = g.sum(parts);
                    let norm = 1.0 / ep.steps() as f64;
                    lc_sum += g.scalar(lc) * norm;
                    ph_sum += g.scalar(terms.entropy_penalty) * norm;
                    pi_sum += g.scalar(terms.interaction_penalty) * norm;
                    per_sample.push(g.scale(total, norm));
                }
                let all = g.concat(&per_sample);
                let total = g.mean(all);
                let k = samples as f64;
                Ok(LossTerms {
                    total,
                    counting: lc_sum / k,
                    entropy: ph_sum / k,
                    interaction: pi_sum / k,
                })
            }
        }
    }

    /// Mean cross-entropy of caption grounding over `(caption token ids, target proposal)`
    /// pairs of one scene; `None` when there is nothing to ground.
    pub fn grounding_loss(
        &self,
        g: &mut Graph,
        scene: &SceneRecord,
        captions: &[(Vec<usize>, usize)],
    ) -> Result<Option<Var>> {
        if captions.is_empty() || scene.num_objects() == 0 {
            return Ok(None);
        }
        self.check_scene(scene)?;
        let mut losses = Vec::with_capacity(captions.len());
        for (ids, target) in captions {
            let logits = self.grounding_logits(g, scene, ids)?;
            losses.push(g.cross_entropy_logits(logits, *target)?);
        }
        let all = g.concat(&losses);
        Ok(Some(g.mean(all)))
    }

    fn grounding_logits(&self, g: &mut Graph, scene: &SceneRecord, ids: &[usize]) -> Result<Var> {
        let lang = self.lang()?;
        let h = lang.caption.encode(g, &lang.embed, ids)?;
        let s = lang.scorer.score(g, h, &scene.features)?;
        lang.grounding.logits(g, s)
    }

    /// Grounding probabilities over the scene's proposals for one caption.
    pub fn grounding_forward(&self, scene: &SceneRecord, ids: &[usize]) -> Result<Vec<f64>> {
        self.check_scene(scene)?;
        let mut g = Graph::new(&self.store);
        let logits = self.grounding_logits(&mut g, scene, ids)?;
        Ok(softmax(g.value(logits).data()))
    }
}

fn plain_terms(g: &Graph, loss: Var) -> LossTerms {
    LossTerms {
        total: loss,
        counting: g.scalar(loss),
        entropy: 0.0,
        interaction: 0.0,
    }
}

/// Fresh RNG for a `(seed, stream, index)` triple, independent of evaluation order.
pub fn derive_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}
