//! Scenes, counting questions, and everything needed to build them from
//! synthetic generators or VQA-format files.

pub mod bins;
pub mod dataset;
pub mod features;
pub mod filter;
pub mod scene;
pub mod splits;
pub mod subject;
pub mod synth;
pub mod vqa;

pub use bins::{frequency_bins, NUM_BINS, UNSEEN_BIN};
pub use dataset::{Dataset, SceneLabels, Split};
pub use features::{decode_features, encode_features, load_features, read_features, write_features};
pub use filter::{filter_howmany, parse_answer_number, FilterReason};
pub use scene::{LabeledBox, ProposalLabel, QaRecord, SceneRecord};
pub use splits::{build_howmany_splits, FilterHistogram, HowManySplits, SplitInputs};
pub use subject::{extract_subject, UNKNOWN_SUBJECT};
pub use synth::{generate_split, generate_synthetic_qa, generate_synthetic_scene, SynthConfig};
pub use vqa::{load_vg_qas, load_vqa_annotations, read_manifest, write_manifest, RawQa};
