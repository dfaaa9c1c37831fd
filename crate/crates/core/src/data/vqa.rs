//! Readers and writers for the public VQA question/annotation JSON schema,
//! Visual Genome QA lists, region captions, and split manifests.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::scene::QaRecord;
use super::subject::extract_subject;
use crate::error::{format_err, Error, Result};
use crate::geometry::BBox;
use crate::language::tokenize;

/// Number of human answers per VQA question.
pub const HUMAN_ANSWERS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaQuestion {
    pub image_id: u64,
    pub question: String,
    pub question_id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaQuestionFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_subtype: Option<String>,
    pub questions: Vec<VqaQuestion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaAnswer {
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_confidence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_id: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaAnnotation {
    pub question_id: u64,
    pub image_id: u64,
    pub answers: Vec<VqaAnswer>,
    pub multiple_choice_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_type: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaAnnotationFile {
    pub annotations: Vec<VqaAnnotation>,
}

/// A joined VQA question with all of its human answers, before count filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct RawQa {
    pub question_id: u64,
    pub image_id: u64,
    pub question: String,
    pub consensus: String,
    pub answers: Vec<String>,
}

/// Non-fatal problems found while loading.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadWarning {
    pub question_id: u64,
    pub message: String,
}

fn parse_json<T: for<'de> Deserialize<'de>, R: Read>(reader: R, what: &'static str) -> Result<T> {
    serde_json::from_reader(reader).map_err(|e| {
        format_err(what, format!("line {} column {}: {e}", e.line(), e.column()))
    })
}

/// Joins a questions file and an annotations file by question id.
///
/// Questions whose answer list is not exactly ten long are excluded with a warning.
pub fn load_vqa_annotations<Q: Read, A: Read>(questions: Q, annotations: A) -> Result<(Vec<RawQa>, Vec<LoadWarning>)> {
    let qf: VqaQuestionFile = parse_json(questions, "VQA questions file")?;
    let af: VqaAnnotationFile = parse_json(annotations, "VQA annotations file")?;
    let mut by_id: HashMap<u64, VqaAnnotation> = HashMap::with_capacity(af.annotations.len());
    for a in af.annotations {
        by_id.insert(a.question_id, a);
    }
    let mut out = Vec::with_capacity(qf.questions.len());
    let mut warnings = Vec::new();
    for q in qf.questions {
        let ann = by_id
            .remove(&q.question_id)
            .ok_or_else(|| Error::MissingKey(format!("no annotation for question id {}", q.question_id)))?;
        if ann.image_id != q.image_id {
            return Err(format_err(
                "VQA annotations file",
                format!("question {} has image {} but annotation says {}", q.question_id, q.image_id, ann.image_id),
            ));
        }
        if ann.answers.len() != HUMAN_ANSWERS {
            warnings.push(LoadWarning {
                question_id: q.question_id,
                message: format!("{} human answers instead of {HUMAN_ANSWERS}; excluded", ann.answers.len()),
            });
            continue;
        }
        out.push(RawQa {
            question_id: q.question_id,
            image_id: q.image_id,
            question: q.question,
            consensus: ann.multiple_choice_answer,
            answers: ann.answers.into_iter().map(|a| a.answer).collect(),
        });
    }
    Ok((out, warnings))
}

impl RawQa {
    /// Converts a pair that passed the count filter into a [`QaRecord`].
    pub fn into_record(self) -> Result<QaRecord> {
        let count = super::filter::parse_answer_number(&self.consensus)
            .filter(|v| (0..=super::filter::MAX_ANSWER).contains(v))
            .ok_or_else(|| Error::InvalidArgument(format!("question {} has no count answer", self.question_id)))?;
        let tokens = tokenize(&self.question);
        Ok(QaRecord {
            question_id: self.question_id,
            image_id: self.image_id.to_string(),
            subject: extract_subject(&tokens),
            question: self.question,
            tokens,
            count: count as u32,
            answers: self.answers,
            bin: None,
        })
    }
}

/// Writes records back out as a VQA questions/annotations pair.
pub fn write_vqa<W1: Write, W2: Write>(records: &[QaRecord], questions: W1, annotations: W2) -> Result<()> {
    let qf = VqaQuestionFile {
        data_subtype: None,
        questions: records
            .iter()
            .map(|r| {
                Ok(VqaQuestion {
                    image_id: r.image_id.parse().map_err(|_| {
                        Error::InvalidArgument(format!("image id {:?} is not numeric", r.image_id))
                    })?,
                    question: r.question.clone(),
                    question_id: r.question_id,
                })
            })
            .collect::<Result<_>>()?,
    };
    let af = VqaAnnotationFile {
        annotations: records
            .iter()
            .zip(&qf.questions)
            .map(|(r, q)| VqaAnnotation {
                question_id: r.question_id,
                image_id: q.image_id,
                answers: r
                    .answers
                    .iter()
                    .enumerate()
                    .map(|(i, a)| VqaAnswer {
                        answer: a.clone(),
                        answer_confidence: Some("yes".into()),
                        answer_id: Some(i as u32 + 1),
                    })
                    .collect(),
                multiple_choice_answer: r.count.to_string(),
                answer_type: Some("number".into()),
                question_type: Some("how many".into()),
            })
            .collect(),
    };
    serde_json::to_writer(questions, &qf)?;
    serde_json::to_writer(annotations, &af)?;
    Ok(())
}

#[derive(Clone, Debug, Deserialize)]
struct VgQa {
    #[serde(alias = "qa_id")]
    id: Option<u64>,
    question: String,
    answer: String,
}

#[derive(Clone, Debug, Deserialize)]
struct VgImageQas {
    #[serde(alias = "image_id")]
    id: u64,
    #[serde(default)]
    coco_id: Option<u64>,
    qas: Vec<VgQa>,
}

/// Visual Genome QA pairs keyed by COCO image id. Images without a COCO id are
/// dropped. The single VG answer stands in for all ten human answers.
pub fn load_vg_qas<R: Read>(reader: R, coco_ids: Option<&HashMap<u64, u64>>) -> Result<Vec<RawQa>> {
    let images: Vec<VgImageQas> = parse_json(reader, "Visual Genome QA file")?;
    let mut out = Vec::new();
    for img in images {
        let coco = img.coco_id.or_else(|| coco_ids.and_then(|m| m.get(&img.id).copied()));
        let Some(coco) = coco else { continue };
        for (k, qa) in img.qas.into_iter().enumerate() {
            let answer = qa.answer.trim().trim_end_matches('.').to_owned();
            out.push(RawQa {
                question_id: qa.id.unwrap_or(img.id * 1000 + k as u64),
                image_id: coco,
                question: qa.question,
                consensus: answer.clone(),
                answers: vec![answer; HUMAN_ANSWERS],
            });
        }
    }
    Ok(out)
}

/// Newline-delimited question ids.
pub fn read_manifest<R: BufRead>(reader: R) -> Result<Vec<u64>> {
    let mut ids = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        ids.push(t.parse().map_err(|_| format_err("split manifest", format!("line {}: {t:?}", i + 1)))?);
    }
    Ok(ids)
}

pub fn write_manifest<W: Write>(mut w: W, ids: &[u64]) -> Result<()> {
    for id in ids {
        writeln!(w, "{id}")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub phrase: String,
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRegions {
    #[serde(alias = "image_id")]
    pub id: String,
    pub regions: Vec<RegionRecord>,
}

/// Region captions per image id.
pub fn read_region_captions<R: Read>(reader: R) -> Result<HashMap<String, Vec<(String, BBox)>>> {
    let raw: Vec<serde_json::Value> = parse_json(reader, "region caption file")?;
    let mut out = HashMap::new();
    for (i, mut v) in raw.into_iter().enumerate() {
        // Image ids may be numbers (Visual Genome) or strings.
        if let Some(id) = v.get("id").or_else(|| v.get("image_id")).cloned() {
            let id = match id {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            v["id"] = serde_json::Value::String(id);
        }
        let img: ImageRegions = serde_json::from_value(v)
            .map_err(|e| format_err("region caption file", format!("entry {i}: {e}")))?;
        let regions = img
            .regions
            .into_iter()
            .map(|r| Ok((r.phrase, BBox::from_xywh(r.x, r.y, r.width, r.height)?)))
            .collect::<Result<Vec<_>>>()?;
        out.insert(img.id, regions);
    }
    Ok(out)
}

pub fn write_region_captions<W: Write>(w: W, images: &[ImageRegions]) -> Result<()> {
    serde_json::to_writer(w, images)?;
    Ok(())
}

/// Image ids referenced by a list of raw pairs.
pub fn image_ids(qas: &[RawQa]) -> HashSet<u64> {
    qas.iter().map(|q| q.image_id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUESTIONS: &str = r#"{"questions":[{"image_id":7,"question":"How many dogs?","question_id":70}]}"#;

    fn annotations(n_answers: usize) -> String {
        let answers: Vec<String> = (0..n_answers)
            .map(|i| format!(r#"{{"answer":"2","answer_confidence":"yes","answer_id":{}}}"#, i + 1))
            .collect();
        format!(
            r#"{{"annotations":[{{"question_id":70,"image_id":7,"answers":[{}],"multiple_choice_answer":"2","answer_type":"number"}}]}}"#,
            answers.join(",")
        )
    }

    #[test]
    fn minimal_fixture_round_trips() {
        let (qas, warnings) = load_vqa_annotations(QUESTIONS.as_bytes(), annotations(10).as_bytes()).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(qas.len(), 1);
        let rec = qas[0].clone().into_record().unwrap();
        assert_eq!(rec.count, 2);
        assert_eq!(rec.subject, "dog");
        let (mut q, mut a) = (Vec::new(), Vec::new());
        write_vqa(&[rec.clone()], &mut q, &mut a).unwrap();
        let (back, _) = load_vqa_annotations(q.as_slice(), a.as_slice()).unwrap();
        assert_eq!(back[0].clone().into_record().unwrap(), rec);
    }

    #[test]
    fn missing_annotation_names_the_id() {
        let err = load_vqa_annotations(QUESTIONS.as_bytes(), r#"{"annotations":[]}"#.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("70"), "{err}");
    }

    #[test]
    fn wrong_answer_count_is_excluded_with_warning() {
        let (qas, warnings) = load_vqa_annotations(QUESTIONS.as_bytes(), annotations(9).as_bytes()).unwrap();
        assert!(qas.is_empty());
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].question_id, 70);
    }

    #[test]
    fn schema_errors_report_position() {
        let err = load_vqa_annotations(r#"{"questions": [{"image_id": "x"}]}"#.as_bytes(), annotations(10).as_bytes())
            .unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn manifest_round_trip() {
        let mut buf = Vec::new();
        write_manifest(&mut buf, &[3, 1, 2]).unwrap();
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), vec![3, 1, 2]);
        assert!(read_manifest("12\nabc\n".as_bytes()).is_err());
    }

    #[test]
    fn region_captions_accept_numeric_ids() {
        let text = r#"[{"id": 5, "regions": [{"phrase": "a dog", "x": 1, "y": 2, "width": 3, "height": 4}]}]"#;
        let caps = read_region_captions(text.as_bytes()).unwrap();
        let (phrase, b) = &caps["5"][0];
        assert_eq!(phrase, "a dog");
        assert_eq!(b.to_array(), [1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn vg_pairs_need_a_coco_image() {
        let text = r#"[{"id": 1, "qas": [{"qa_id": 9, "question": "How many cats?", "answer": "3."}]},
                      {"id": 2, "coco_id": 77, "qas": [{"qa_id": 10, "question": "How many cats?", "answer": "1"}]}]"#;
        let qas = load_vg_qas(text.as_bytes(), None).unwrap();
        assert_eq!(qas.len(), 1);
        assert_eq!(qas[0].image_id, 77);
        let mut map = HashMap::new();
        map.insert(1, 55);
        let qas = load_vg_qas(text.as_bytes(), Some(&map)).unwrap();
        assert_eq!(qas.len(), 2);
        assert_eq!(qas[0].consensus, "3");
        assert_eq!(qas[0].answers.len(), HUMAN_ANSWERS);
    }
}
