//! A set of scenes with train/dev/test questions and optional region captions,
//! plus its on-disk directory form.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bins::frequency_bins;
use super::features::{read_features, write_features};
use super::scene::{LabeledBox, ProposalLabel, QaRecord, SceneRecord};
use super::synth::{generate_split, synthetic_captions, SynthConfig};
use super::vqa::{read_region_captions, write_region_captions, ImageRegions, RegionRecord};
use crate::error::{format_err, Error, Result};
use crate::grounding::{assign_caption, CaptionRecord};
use crate::language::tokenize;

pub const FEATURES_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.json";
pub const CAPTIONS_FILE: &str = "captions.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn qa_file(self) -> String {
        format!("{}_qa.json", self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?}")))
    }
}

/// Proposal labels and annotated objects of one image, stored beside the feature container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLabels {
    pub image_id: String,
    pub labels: Vec<ProposalLabel>,
    pub ground_truth: Vec<LabeledBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<SceneRecord>,
    index: HashMap<String, usize>,
    pub train: Vec<QaRecord>,
    pub dev: Vec<QaRecord>,
    pub test: Vec<QaRecord>,
    /// Captions per image with proposal assignments filled in.
    pub captions: HashMap<String, Vec<CaptionRecord>>,
}

impl Dataset {
    /// Checks that every question refers to a known scene, assigns captions to
    /// proposals, and computes frequency bins for dev and test.
    pub fn new(
        scenes: Vec<SceneRecord>,
        train: Vec<QaRecord>,
        dev: Vec<QaRecord>,
        test: Vec<QaRecord>,
        mut captions: HashMap<String, Vec<CaptionRecord>>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(scenes.len());
        for (i, s) in scenes.iter().enumerate() {
            if index.insert(s.image_id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("image {} appears twice", s.image_id)));
            }
        }
        for q in train.iter().chain(&dev).chain(&test) {
            if !index.contains_key(&q.image_id) {
                return Err(Error::MissingKey(format!(
                    "question {} refers to image {} which has no features",
                    q.question_id, q.image_id
                )));
            }
        }
        captions.retain(|id, _| index.contains_key(id));
        for (id, caps) in captions.iter_mut() {
            let boxes = &scenes[index[id]].boxes;
            for c in caps.iter_mut() {
                c.assigned = assign_caption(&c.bbox, boxes);
            }
        }
        let mut ds = Self { scenes, index, train, dev, test, captions };
        ds.assign_bins()?;
        Ok(ds)
    }

    fn assign_bins(&mut self) -> Result<()> {
        if self.train.is_empty() {
            return Ok(());
        }
        let train_subjects: Vec<&str> = self.train.iter().map(|q| q.subject.as_str()).collect();
        for split in [&mut self.dev, &mut self.test] {
            let subjects: Vec<&str> = split.iter().map(|q| q.subject.as_str()).collect();
            let bins = frequency_bins(&train_subjects, &subjects)?;
            for (q, b) in split.iter_mut().zip(bins) {
                q.bin = Some(b);
            }
        }
        Ok(())
    }

    pub fn scene(&self, image_id: &str) -> Result<&SceneRecord> {
        self.index
            .get(image_id)
            .map(|&i| &self.scenes[i])
            .ok_or_else(|| Error::MissingKey(format!("image {image_id}")))
    }

    pub fn split(&self, split: Split) -> &[QaRecord] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Captions with an assigned proposal.
    pub fn grounded_captions(&self, image_id: &str) -> Vec<&CaptionRecord> {
        self.captions
            .get(image_id)
            .map(|cs| cs.iter().filter(|c| c.assigned.is_some()).collect())
            .unwrap_or_default()
    }

    /// Every token used by questions and captions of the training split images.
    pub fn training_tokens(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.train.iter().flat_map(|q| q.tokens.iter().map(String::as_str)).collect();
        for q in &self.train {
            if let Some(cs) = self.captions.get(&q.image_id) {
                out.extend(cs.iter().flat_map(|c| c.tokens.iter().map(String::as_str)));
            }
        }
        out
    }

    /// Synthetic dataset: scene counts per split, captions from ground truth.
    pub fn synthetic(cfg: &SynthConfig, train: usize, dev: usize, test: usize) -> Result<Self> {
        let mut scenes = Vec::new();
        let mut qas = Vec::new();
        for (k, (split, n)) in Split::ALL.into_iter().zip([train, dev, test]).enumerate() {
            let s = generate_split(cfg, split.name(), k as u64, n)?;
            scenes.extend(s.scenes);
            qas.push(s.questions);
        }
        let captions = scenes.iter().map(|s| (s.image_id.clone(), synthetic_captions(s))).collect();
        let test = qas.pop().unwrap_or_default();
        let dev = qas.pop().unwrap_or_default();
        let train = qas.pop().unwrap_or_default();
        Self::new(scenes, train, dev, test, captions)
    }

    /// Writes the directory form and returns the files produced.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let p = dir.join(FEATURES_FILE);
        write_features(&p, &self.scenes)?;
        written.push(p);
        let labels: Vec<SceneLabels> = self
            .scenes
            .iter()
            .filter_map(|s| {
                s.labels.as_ref().map(|l| SceneLabels {
                    image_id: s.image_id.clone(),
                    labels: l.clone(),
                    ground_truth: s.ground_truth.clone(),
                })
            })
            .collect();
        if !labels.is_empty() {
            let p = dir.join(LABELS_FILE);
            serde_json::to_writer(BufWriter::new(File::create(&p)?), &labels)?;
            written.push(p);
        }
        for split in Split::ALL {
            let p = dir.join(split.qa_file());
            serde_json::to_writer(BufWriter::new(File::create(&p)?), self.split(split))?;
            written.push(p);
        }
        if !self.captions.is_empty() {
            let mut ids: Vec<&String> = self.captions.keys().collect();
            ids.sort();
            let regions: Vec<ImageRegions> = ids
                .into_iter()
                .map(|id| ImageRegions {
                    id: id.clone(),
                    regions: self.captions[id]
                        .iter()
                        .map(|c| RegionRecord {
                            phrase: c.text.clone(),
                            x: c.bbox.x1,
                            y: c.bbox.y1,
                            width: c.bbox.width(),
                            height: c.bbox.height(),
                        })
                        .collect(),
                })
                .collect();
            let p = dir.join(CAPTIONS_FILE);
            write_region_captions(BufWriter::new(File::create(&p)?), &regions)?;
            written.push(p);
        }
        Ok(written)
    }

    /// Reads a directory written by [`Dataset::write_dir`] (or assembled by hand).
    /// Only the feature container is mandatory; missing question files give empty splits.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut scenes = read_features(&dir.join(FEATURES_FILE))?;
        let labels_path = dir.join(LABELS_FILE);
        if labels_path.exists() {
            let labels: Vec<SceneLabels> = serde_json::from_reader(BufReader::new(File::open(&labels_path)?))
                .map_err(|e| format_err("labels file", e.to_string()))?;
            let mut by_id: HashMap<String, SceneLabels> = labels.into_iter().map(|l| (l.image_id.clone(), l)).collect();
            for s in &mut scenes {
                if let Some(l) = by_id.remove(&s.image_id) {
                    if l.labels.len() != s.num_objects() {
                        return Err(format_err(
                            "labels file",
                            format!("image {}: {} labels for {} proposals", s.image_id, l.labels.len(), s.num_objects()),
                        ));
                    }
                    s.labels = Some(l.labels);
                    s.ground_truth = l.ground_truth;
                }
            }
        }
        let mut splits = Vec::new();
        for split in Split::ALL {
            let p = dir.join(split.qa_file());
            splits.push(if p.exists() {
                let qs: Vec<QaRecord> = serde_json::from_reader(BufReader::new(File::open(&p)?))
                    .map_err(|e| format_err("question file", format!("{}: {e}", p.display())))?;
                qs
            } else {
                Vec::new()
            });
        }
        let cap_path = dir.join(CAPTIONS_FILE);
        let captions = if cap_path.exists() {
            read_region_captions(BufReader::new(File::open(&cap_path)?))?
                .into_iter()
                .map(|(id, regions)| {
                    let caps = regions
                        .into_iter()
                        .map(|(text, bbox)| CaptionRecord { tokens: tokenize(&text), text, bbox, assigned: None })
                        .collect();
                    (id, caps)
                })
                .collect()
        } else {
            HashMap::new()
        };
        let test = splits.pop().unwrap_or_default();
        let dev = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Self::new(scenes, train, dev, test, captions)
    }
}
