//! Synthetic scenes for counting with redundant proposals.
//!
//! Each scene holds a few true objects of named shape categories. Some true objects
//! receive a second, shifted proposal (a duplicate) whose IoU with the original
//! lies in a configured range, and some scenes gain proposals of categories that
//! are never asked about. Questions ask for the number of true objects of one
//! category, so duplicates must be suppressed to answer correctly.
//!
//! Feature layout per proposal: a scaled one-hot code over all categories
//! (counted ones first, then distractors), one objectness channel, and Gaussian
//! noise everywhere. Every value passes through `f32` so that a scene written to
//! a feature container reads back identical.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{LabeledBox, ProposalLabel, QaRecord, SceneRecord};
use super::subject::extract_subject;
use crate::counters::derive_rng;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::grounding::CaptionRecord;
use crate::language::tokenize;
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 10] =
    ["square", "circle", "triangle", "star", "diamond", "ring", "arrow", "heart", "moon", "cross"];
pub const DISTRACTOR_NAMES: [&str; 4] = ["blob", "smudge", "stripe", "speck"];

const STREAM_SCENE: u64 = 0x5CE7E;
const STREAM_QA: u64 = 0x9A;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Number of countable categories, at most [`SHAPE_NAMES`]`.len()`.
    pub categories: usize,
    /// Number of distractor categories, at most [`DISTRACTOR_NAMES`]`.len()`.
    pub distractor_categories: usize,
    /// True objects per scene, drawn uniformly from this inclusive range.
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that a true object gets a duplicate proposal.
    pub duplicate_rate: f64,
    /// IoU between a duplicate and its original, drawn uniformly.
    pub duplicate_iou: (f64, f64),
    /// Probability that a scene gains one distractor proposal (tried twice per scene).
    pub distractor_rate: f64,
    /// Probability that a question asks about a category absent from the scene.
    pub zero_count_rate: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// Height of the one-hot category code.
    pub code_scale: f64,
    /// Objectness channel means for true objects and for duplicates.
    pub objectness_true: f64,
    pub objectness_duplicate: f64,
    /// Side length range of object boxes in the unit square.
    pub box_size: (f64, f64),
    pub questions_per_scene: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            categories: 3,
            distractor_categories: 2,
            min_objects: 0,
            max_objects: 6,
            duplicate_rate: 0.5,
            duplicate_iou: (0.6, 0.9),
            distractor_rate: 0.3,
            zero_count_rate: 0.15,
            feature_dim: 64,
            feature_noise: 0.1,
            code_scale: 1.0,
            objectness_true: 1.0,
            objectness_duplicate: 0.5,
            box_size: (0.12, 0.25),
            questions_per_scene: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("duplicate_rate", self.duplicate_rate),
            ("distractor_rate", self.distractor_rate),
            ("zero_count_rate", self.zero_count_rate),
            ("duplicate_iou.0", self.duplicate_iou.0),
            ("duplicate_iou.1", self.duplicate_iou.1),
        ] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if self.duplicate_iou.0 > self.duplicate_iou.1 || self.duplicate_iou.0 <= 0.0 {
            problems.push(format!("duplicate_iou {:?} is not a positive range", self.duplicate_iou));
        }
        if self.categories == 0 || self.categories > SHAPE_NAMES.len() {
            problems.push(format!("categories must be in 1..={}", SHAPE_NAMES.len()));
        }
        if self.distractor_categories > DISTRACTOR_NAMES.len() {
            problems.push(format!("distractor_categories must be at most {}", DISTRACTOR_NAMES.len()));
        }
        if self.min_objects > self.max_objects {
            problems.push("min_objects exceeds max_objects".into());
        }
        if self.feature_dim < self.categories + self.distractor_categories + 1 {
            problems.push(format!(
                "feature_dim {} cannot hold {} category codes and objectness",
                self.feature_dim,
                self.categories + self.distractor_categories
            ));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            problems.push("feature_noise must be finite and non-negative".into());
        }
        if !(self.box_size.0 > 0.0 && self.box_size.0 <= self.box_size.1 && self.box_size.1 <= 0.5) {
            problems.push(format!("box_size {:?} must satisfy 0 < lo <= hi <= 0.5", self.box_size));
        }
        if self.questions_per_scene == 0 {
            problems.push("questions_per_scene must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn category_names(&self) -> &[&'static str] {
        &SHAPE_NAMES[..self.categories]
    }

    fn objectness_channel(&self) -> usize {
        self.feature_dim - 1
    }
}

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

fn q32_box(b: BBox) -> BBox {
    BBox { x1: q32(b.x1), y1: q32(b.y1), x2: q32(b.x2), y2: q32(b.y2) }
}

struct Proposal {
    bbox: BBox,
    feature: Vec<f64>,
    label: ProposalLabel,
}

fn category_feature<R: Rng + ?Sized>(cfg: &SynthConfig, code: usize, objectness: f64, noise: &Normal<f64>, rng: &mut R) -> Vec<f64> {
    let mut f: Vec<f64> = (0..cfg.feature_dim).map(|_| noise.sample(rng)).collect();
    f[code] += cfg.code_scale;
    f[cfg.objectness_channel()] += objectness;
    f
}

fn place_box<R: Rng + ?Sized>(cfg: &SynthConfig, existing: &[BBox], rng: &mut R) -> BBox {
    let mut best: Option<(f64, BBox)> = None;
    for _ in 0..64 {
        let w = rng.random_range(cfg.box_size.0..=cfg.box_size.1);
        let h = rng.random_range(cfg.box_size.0..=cfg.box_size.1);
        let x = rng.random_range(0.0..=1.0 - w);
        let y = rng.random_range(0.0..=1.0 - h);
        let b = BBox { x1: x, y1: y, x2: x + w, y2: y + h };
        let worst = existing.iter().map(|e| iou(e, &b)).fold(0.0, f64::max);
        if worst < 0.05 {
            return b;
        }
        if best.is_none_or(|(w0, _)| worst < w0) {
            best = Some((worst, b));
        }
    }
    best.expect("at least one candidate").1
}

/// Copy of `b` shifted along one axis so that the IoU of the two equals `u`.
pub fn shifted_duplicate<R: Rng + ?Sized>(b: &BBox, u: f64, rng: &mut R) -> BBox {
    let horizontal = rng.random_bool(0.5);
    let extent = if horizontal { b.width() } else { b.height() };
    // Equal-size boxes offset by d along one axis: IoU = (extent - d) / (extent + d).
    let d = extent * (1.0 - u) / (1.0 + u);
    let (lo, hi) = if horizontal { (b.x1, b.x2) } else { (b.y1, b.y2) };
    let d = match (lo - d >= 0.0, hi + d <= 1.0) {
        (true, true) => if rng.random_bool(0.5) { d } else { -d },
        (true, false) => -d,
        _ => d,
    };
    if horizontal {
        BBox { x1: b.x1 + d, x2: b.x2 + d, ..*b }
    } else {
        BBox { y1: b.y1 + d, y2: b.y2 + d, ..*b }
    }
}

/// One labeled scene. Pure function of the config and the RNG state.
pub fn generate_synthetic_scene<R: Rng + ?Sized>(cfg: &SynthConfig, image_id: &str, rng: &mut R) -> Result<SceneRecord> {
    cfg.validate()?;
    let noise = Normal::new(0.0, cfg.feature_noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let dup_noise = Normal::new(0.0, cfg.feature_noise * 0.5).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let k = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut placed: Vec<BBox> = Vec::new();
    let mut proposals: Vec<Proposal> = Vec::new();
    let mut ground_truth = Vec::new();

    for _ in 0..k {
        let cat = rng.random_range(0..cfg.categories);
        let bbox = place_box(cfg, &placed, rng);
        placed.push(bbox);
        let obj = cfg.objectness_true;
        proposals.push(Proposal {
            bbox,
            feature: category_feature(cfg, cat, obj, &noise, rng),
            label: ProposalLabel { category: Some(SHAPE_NAMES[cat].to_owned()), duplicate_of: None },
        });
        ground_truth.push(LabeledBox { bbox: q32_box(bbox), category: SHAPE_NAMES[cat].to_owned() });
    }
    let n_true = proposals.len();
    for i in 0..n_true {
        if !rng.random_bool(cfg.duplicate_rate) {
            continue;
        }
        let u = rng.random_range(cfg.duplicate_iou.0..=cfg.duplicate_iou.1);
        let bbox = shifted_duplicate(&proposals[i].bbox, u, rng);
        let mut feature: Vec<f64> = proposals[i].feature.iter().map(|v| v + dup_noise.sample(rng)).collect();
        let ch = cfg.objectness_channel();
        feature[ch] += cfg.objectness_duplicate - cfg.objectness_true;
        proposals.push(Proposal {
            bbox,
            feature,
            label: ProposalLabel { category: proposals[i].label.category.clone(), duplicate_of: Some(i) },
        });
    }
    if cfg.distractor_categories > 0 {
        for _ in 0..2 {
            if !rng.random_bool(cfg.distractor_rate) {
                continue;
            }
            let d = rng.random_range(0..cfg.distractor_categories);
            let bbox = place_box(cfg, &placed, rng);
            placed.push(bbox);
            let name = DISTRACTOR_NAMES[d];
            proposals.push(Proposal {
                bbox,
                feature: category_feature(cfg, cfg.categories + d, cfg.objectness_true, &noise, rng),
                label: ProposalLabel { category: Some(name.to_owned()), duplicate_of: None },
            });
            ground_truth.push(LabeledBox { bbox: q32_box(bbox), category: name.to_owned() });
        }
    }

    let n = proposals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut inverse = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        inverse[old] = new;
    }
    let mut boxes = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * cfg.feature_dim);
    let mut labels = Vec::with_capacity(n);
    for &old in &order {
        let p = &proposals[old];
        boxes.push(q32_box(p.bbox));
        feats.extend(p.feature.iter().map(|&v| q32(v)));
        let mut l = p.label.clone();
        l.duplicate_of = l.duplicate_of.map(|j| inverse[j]);
        labels.push(l);
    }
    let mut scene = SceneRecord::new(image_id, 1.0, 1.0, boxes, Tensor::new(vec![n, cfg.feature_dim], feats)?)?;
    scene.labels = Some(labels);
    scene.ground_truth = ground_truth;
    Ok(scene)
}

/// Number of true (non-duplicate) proposals of `category`.
pub fn true_count(scene: &SceneRecord, category: &str) -> usize {
    scene
        .labels
        .as_ref()
        .map(|ls| ls.iter().filter(|l| l.duplicate_of.is_none() && l.category.as_deref() == Some(category)).count())
        .unwrap_or(0)
}

pub fn question_text(category: &str) -> String {
    format!("how many {category}s are there")
}

/// A templated counting question about one scene.
pub fn generate_synthetic_qa<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    scene: &SceneRecord,
    question_id: u64,
    rng: &mut R,
) -> Result<QaRecord> {
    let names = cfg.category_names();
    let (present, absent): (Vec<&str>, Vec<&str>) = names.iter().partition(|c| true_count(scene, c) > 0);
    let pick_absent = present.is_empty() || (!absent.is_empty() && rng.random_bool(cfg.zero_count_rate));
    let pool = if pick_absent { &absent } else { &present };
    let category = pool[rng.random_range(0..pool.len())];
    let count = true_count(scene, category) as u32;
    let question = question_text(category);
    let tokens = tokenize(&question);
    Ok(QaRecord {
        question_id,
        image_id: scene.image_id.clone(),
        subject: extract_subject(&tokens),
        question,
        tokens,
        count,
        answers: vec![count.to_string(); 10],
        bin: None,
    })
}

/// One caption per ground-truth object, naming its category.
pub fn synthetic_captions(scene: &SceneRecord) -> Vec<CaptionRecord> {
    scene
        .ground_truth
        .iter()
        .map(|gt| {
            let text = format!("a {}", gt.category);
            CaptionRecord { tokens: tokenize(&text), text, bbox: gt.bbox, assigned: None }
        })
        .collect()
}

/// Scenes with their questions for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplit {
    pub scenes: Vec<SceneRecord>,
    pub questions: Vec<QaRecord>,
}

/// Generates `num_scenes` scenes for a named split. Scene `i` depends only on
/// `(cfg.seed, split, i)`, so results do not depend on evaluation order.
pub fn generate_split(cfg: &SynthConfig, split: &str, split_index: u64, num_scenes: usize) -> Result<SyntheticSplit> {
    cfg.validate()?;
    let mut scenes = Vec::with_capacity(num_scenes);
    let mut questions = Vec::with_capacity(num_scenes * cfg.questions_per_scene);
    for i in 0..num_scenes {
        let index = (split_index << 32) | i as u64;
        let id = format!("{split}-{i:06}");
        let scene = generate_synthetic_scene(cfg, &id, &mut derive_rng(cfg.seed, STREAM_SCENE, index))?;
        let mut qrng = derive_rng(cfg.seed, STREAM_QA, index);
        for k in 0..cfg.questions_per_scene {
            let qid = (split_index + 1) * 100_000_000 + (i * cfg.questions_per_scene + k) as u64;
            questions.push(generate_synthetic_qa(cfg, &scene, qid, &mut qrng)?);
        }
        scenes.push(scene);
    }
    Ok(SyntheticSplit { scenes, questions })
}
