//! Run configuration: a flat JSON object whose missing keys take profile defaults.
//!
//! Precedence, lowest first: profile defaults, config file, command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::counters::{ModelDims, ModelKind, ObjectiveConfig};
use crate::data::SynthConfig;
use crate::error::{format_err, Error, Result};
use crate::exec::Execution;
use crate::grounding::{GROUNDING_IMAGES, GROUNDING_WEIGHT};
use crate::optim::LrSchedule;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small layers for synthetic scenes on a laptop.
    #[default]
    Desk,
    /// Layer sizes for 2048-d detector features.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::InvalidArgument(format!("unknown profile {s:?}"))),
        }
    }
}

/// User-facing configuration. Every key is optional in the JSON file.
///
/// | key | default |
/// |---|---|
/// | `model` | `irlc` (`softcount`, `updown`, `irlc`, `guess1`, `lstm`) |
/// | `profile` | `desk` |
/// | `d_emb`, `d_hid`, `score_dim`, `d_v`, `interaction_hidden`, `compressed_question` | from the profile |
/// | `learning_rate` | desk: `3e-3`; paper: `5e-4` for IRLC, `3e-4` otherwise |
/// | `lr_schedule` | IRLC: ×0.99999 per iteration; others: ×0.8 after 1 epoch without training-accuracy gain |
/// | `batch_size` | 32 |
/// | `dropout` | 0.3 |
/// | `samples` | 5 sampled episodes per question (IRLC) |
/// | `entropy_weight`, `interaction_weight` | 0.005 |
/// | `grounding`, `grounding_weight`, `grounding_images` | `true`, 0.1, 4 |
/// | `data_dir` | none: generate synthetic data from `synth` |
/// | `synth`, `train_scenes`, `dev_scenes`, `test_scenes` | default generator, 2000 / 500 / 500 |
/// | `glove` | none |
/// | `seed` | 0 |
/// | `max_epochs` | 30 (desk), 100 (paper) |
/// | `patience` | 5 epochs without dev-accuracy gain |
/// | `parallel` | `true` |
/// | `out` | `runs/latest` |
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub profile: Profile,
    pub d_emb: Option<usize>,
    pub d_hid: Option<usize>,
    pub score_dim: Option<usize>,
    pub d_v: Option<usize>,
    pub interaction_hidden: Option<usize>,
    pub compressed_question: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lr_schedule: Option<LrSchedule>,
    pub batch_size: usize,
    pub dropout: f64,
    pub samples: usize,
    pub entropy_weight: f64,
    pub interaction_weight: f64,
    pub grounding: bool,
    pub grounding_weight: f64,
    pub grounding_images: usize,
    pub data_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train_scenes: usize,
    pub dev_scenes: usize,
    pub test_scenes: usize,
    pub glove: Option<PathBuf>,
    pub seed: u64,
    pub max_epochs: Option<usize>,
    pub patience: usize,
    pub parallel: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let objective = ObjectiveConfig::default();
        Self {
            model: ModelKind::Irlc,
            profile: Profile::Desk,
            d_emb: None,
            d_hid: None,
            score_dim: None,
            d_v: None,
            interaction_hidden: None,
            compressed_question: None,
            learning_rate: None,
            lr_schedule: None,
            batch_size: 32,
            dropout: objective.dropout,
            samples: objective.samples,
            entropy_weight: objective.entropy_weight,
            interaction_weight: objective.interaction_weight,
            grounding: true,
            grounding_weight: GROUNDING_WEIGHT,
            grounding_images: GROUNDING_IMAGES,
            data_dir: None,
            synth: SynthConfig::default(),
            train_scenes: 2000,
            dev_scenes: 500,
            test_scenes: 500,
            glove: None,
            seed: 0,
            max_epochs: None,
            patience: 5,
            parallel: true,
            out: PathBuf::from("runs/latest"),
        }
    }
}

/// Default learning rate of a model kind. The desk profile trains far fewer
/// iterations than full-scale runs and uses a larger step.
pub fn default_learning_rate(kind: ModelKind, profile: Profile) -> f64 {
    match (profile, kind) {
        (Profile::Desk, _) => 3e-3,
        (Profile::Paper, ModelKind::Irlc) => 5e-4,
        (Profile::Paper, _) => 3e-4,
    }
}

pub fn default_schedule(kind: ModelKind) -> LrSchedule {
    match kind {
        ModelKind::Irlc => LrSchedule::PerIteration { factor: 0.99999 },
        _ => LrSchedule::Plateau { factor: 0.8, patience: 1 },
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| format_err("config file", format!("{}: {e}", path.display())))
    }

    /// Fills profile defaults and validates. All problems are reported together.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let base = match self.profile {
            Profile::Desk => ModelDims::desk(self.model),
            Profile::Paper => ModelDims::paper(self.model),
        };
        let dims = ModelDims {
            d_emb: self.d_emb.unwrap_or(base.d_emb),
            d_hid: self.d_hid.unwrap_or(base.d_hid),
            score_dim: self.score_dim.unwrap_or(base.score_dim),
            d_v: self.d_v.unwrap_or(base.d_v),
            interaction_hidden: self.interaction_hidden.unwrap_or(base.interaction_hidden),
            compressed_question: self.compressed_question.unwrap_or(base.compressed_question),
        };
        let mut synth = self.synth.clone();
        if self.data_dir.is_none() && self.d_v.is_none() {
            // Synthetic features follow the model width unless both are given.
            synth.feature_dim = dims.d_v;
        }
        let r = ResolvedConfig {
            model: self.model,
            profile: self.profile,
            d_emb: dims.d_emb,
            d_hid: dims.d_hid,
            score_dim: dims.score_dim,
            d_v: dims.d_v,
            interaction_hidden: dims.interaction_hidden,
            compressed_question: dims.compressed_question,
            learning_rate: self.learning_rate.unwrap_or(default_learning_rate(self.model, self.profile)),
            lr_schedule: self.lr_schedule.clone().unwrap_or(default_schedule(self.model)),
            batch_size: self.batch_size,
            dropout: self.dropout,
            samples: self.samples,
            entropy_weight: self.entropy_weight,
            interaction_weight: self.interaction_weight,
            grounding: self.grounding,
            grounding_weight: self.grounding_weight,
            grounding_images: self.grounding_images,
            data_dir: self.data_dir.clone(),
            synth,
            train_scenes: self.train_scenes,
            dev_scenes: self.dev_scenes,
            test_scenes: self.test_scenes,
            glove: self.glove.clone(),
            seed: self.seed,
            max_epochs: self.max_epochs.unwrap_or(match self.profile {
                Profile::Desk => 30,
                Profile::Paper => 100,
            }),
            patience: self.patience,
            parallel: self.parallel,
            out: self.out.clone(),
        };
        r.validate()?;
        Ok(r)
    }
}

/// A configuration with every value decided. Serializes with the same keys as
/// [`RunConfig`], so a written resolved config can be fed back as a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub model: ModelKind,
    pub profile: Profile,
    pub d_emb: usize,
    pub d_hid: usize,
    pub score_dim: usize,
    pub d_v: usize,
    pub interaction_hidden: usize,
    pub compressed_question: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub dropout: f64,
    pub samples: usize,
    pub entropy_weight: f64,
    pub interaction_weight: f64,
    pub grounding: bool,
    pub grounding_weight: f64,
    pub grounding_images: usize,
    pub data_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train_scenes: usize,
    pub dev_scenes: usize,
    pub test_scenes: usize,
    pub glove: Option<PathBuf>,
    pub seed: u64,
    pub max_epochs: usize,
    pub patience: usize,
    pub parallel: bool,
    pub out: PathBuf,
}

impl ResolvedConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_emb: self.d_emb,
            d_hid: self.d_hid,
            score_dim: self.score_dim,
            d_v: self.d_v,
            interaction_hidden: self.interaction_hidden,
            compressed_question: self.compressed_question,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            dropout: self.dropout,
            samples: self.samples,
            entropy_weight: self.entropy_weight,
            interaction_weight: self.interaction_weight,
        }
    }

    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        for (name, v) in [
            ("d_emb", self.d_emb),
            ("d_hid", self.d_hid),
            ("score_dim", self.score_dim),
            ("d_v", self.d_v),
            ("interaction_hidden", self.interaction_hidden),
            ("compressed_question", self.compressed_question),
            ("batch_size", self.batch_size),
            ("samples", self.samples),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ] {
            if v == 0 {
                p.push(format!("{name} must be positive"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            p.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        match self.lr_schedule {
            LrSchedule::PerIteration { factor } | LrSchedule::Plateau { factor, .. }
                if !(factor > 0.0 && factor <= 1.0) =>
            {
                p.push(format!("lr_schedule factor {factor} must be in (0, 1]"))
            }
            LrSchedule::Plateau { patience: 0, .. } => p.push("lr_schedule patience must be positive".into()),
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout) {
            p.push(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        for (name, v) in [
            ("entropy_weight", self.entropy_weight),
            ("interaction_weight", self.interaction_weight),
            ("grounding_weight", self.grounding_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("{name} {v} must be finite and non-negative"));
            }
        }
        if self.data_dir.is_none() {
            if let Err(Error::Config(mut sp)) = self.synth.validate() {
                p.extend(sp.drain(..).map(|s| format!("synth.{s}")));
            }
            if self.synth.feature_dim != self.d_v {
                p.push(format!("synth.feature_dim {} differs from d_v {}", self.synth.feature_dim, self.d_v));
            }
            if self.train_scenes == 0 {
                p.push("train_scenes must be positive".into());
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// JSON text of the resolved config.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
