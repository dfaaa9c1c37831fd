//! Running a trained model over a split: predictions, metrics, grounding
//! quality, and the per-question dump.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use serde::Serialize;

use crate::counters::{CountPrediction, CountingModel, ModelKind};
use crate::data::synth::question_text;
use crate::data::{Dataset, QaRecord, SceneRecord};
use crate::error::Result;
use crate::eval::{grounding_quality, ordinality_gap, GroundingObservation, MetricReport, Quality};
use crate::exec::Execution;
use crate::geometry::BBox;
use crate::language::{read_glove, tokenize};
use crate::tensor::l2_normalized;

pub fn predict_questions(
    model: &CountingModel,
    data: &Dataset,
    questions: &[QaRecord],
    exec: Execution,
) -> Result<Vec<CountPrediction>> {
    exec.map(questions, |_, q| {
        let scene = data.scene(&q.image_id)?;
        model.predict(scene, &model.token_ids(&q.tokens))
    })
    .into_iter()
    .collect()
}

/// Predictions and metrics; UpDown reports also carry the top-2 gap statistics.
pub fn evaluate_split(
    model: &CountingModel,
    data: &Dataset,
    split: &str,
    questions: &[QaRecord],
    exec: Execution,
) -> Result<(Vec<CountPrediction>, MetricReport)> {
    let preds = predict_questions(model, data, questions, exec)?;
    let counts: Vec<u32> = preds.iter().map(|p| p.count).collect();
    let mut report = MetricReport::from_predictions(split, model.kind.name(), &counts, questions)?;
    if model.kind == ModelKind::UpDown {
        let probs: Vec<Vec<f64>> = preds.iter().filter_map(|p| p.probabilities.clone()).collect();
        if !probs.is_empty() {
            report.ordinality = Some(ordinality_gap(&probs)?);
        }
    }
    Ok((preds, report))
}

/// Unit embedding per category: from a GloVe-format file when given, else the
/// model's own word embedding. Categories without a vector are left out.
pub fn category_embeddings(
    model: &CountingModel,
    categories: &BTreeSet<String>,
    glove: Option<&mut dyn std::io::BufRead>,
) -> Result<HashMap<String, Vec<f64>>> {
    let mut out = HashMap::new();
    if let Some(reader) = glove {
        for (w, v) in read_glove(reader, None, |w| categories.contains(w))? {
            out.insert(w, l2_normalized(&v));
        }
        return Ok(out);
    }
    let Some(lang) = model.language() else { return Ok(out) };
    let table = model.store.value(lang.embed.table);
    let d = lang.embed.dim;
    for c in categories {
        if let Some(i) = model.vocab.get(c) {
            out.insert(c.clone(), l2_normalized(&table.data()[i * d..(i + 1) * d]));
        }
    }
    Ok(out)
}

/// Per-object count weights for the grounding metric. UpDown attention is
/// scaled by its predicted count so that the weights sum to the count.
pub fn count_weights(kind: ModelKind, p: &CountPrediction) -> Vec<f64> {
    match kind {
        ModelKind::UpDown => p.weights.iter().map(|w| w * p.count as f64).collect(),
        _ => p.weights.clone(),
    }
}

/// Grounding quality per category over labeled scenes: for every scene and every
/// category the templated question is asked and its count weights are scored.
pub fn grounding_report(
    model: &CountingModel,
    scenes: &[&SceneRecord],
    categories: &BTreeSet<String>,
    embeddings: &HashMap<String, Vec<f64>>,
    exec: Execution,
) -> Result<std::collections::BTreeMap<String, Quality>> {
    let cats: Vec<&String> = categories.iter().filter(|c| embeddings.contains_key(*c)).collect();
    let labeled: Vec<&SceneRecord> = scenes.iter().copied().filter(|s| !s.ground_truth.is_empty()).collect();
    let jobs: Vec<(usize, usize)> =
        (0..labeled.len()).flat_map(|s| (0..cats.len()).map(move |c| (s, c))).collect();
    let weights: Vec<Vec<f64>> = exec
        .map(&jobs, |_, &(s, c)| -> Result<Vec<f64>> {
            let ids = model.token_ids(&tokenize(&question_text(cats[c])));
            let p = model.predict(labeled[s], &ids)?;
            Ok(count_weights(model.kind, &p))
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let obs: Vec<GroundingObservation<'_>> = jobs
        .iter()
        .zip(&weights)
        .map(|(&(s, c), w)| GroundingObservation {
            category: cats[c].as_str(),
            weights: w,
            boxes: &labeled[s].boxes,
            ground_truth: &labeled[s].ground_truth,
        })
        .collect();
    grounding_quality(&obs, embeddings)
}

/// One line of the per-question dump.
#[derive(Serialize)]
pub struct DumpRecord<'a> {
    pub question_id: u64,
    pub image_id: &'a str,
    pub question: &'a str,
    pub ground_truth: u32,
    pub prediction: u32,
    pub raw: f64,
    pub weights: &'a [f64],
    pub boxes: &'a [BBox],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected: Option<&'a [usize]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<&'a [f64]>,
}

/// JSON lines, one per question.
pub fn write_dump<W: Write>(
    mut w: W,
    data: &Dataset,
    questions: &[QaRecord],
    predictions: &[CountPrediction],
) -> Result<()> {
    for (q, p) in questions.iter().zip(predictions) {
        let scene = data.scene(&q.image_id)?;
        let rec = DumpRecord {
            question_id: q.question_id,
            image_id: &q.image_id,
            question: &q.question,
            ground_truth: q.count,
            prediction: p.count,
            raw: p.raw,
            weights: &p.weights,
            boxes: &scene.boxes,
            selected: p.selected.as_deref(),
            probabilities: p.probabilities.as_deref(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Whether proposals `i` and `j` are the same labeled object detected twice.
fn duplicate_pair(scene: &SceneRecord, i: usize, j: usize) -> bool {
    let Some(labels) = &scene.labels else { return false };
    let (a, b) = (&labels[i], &labels[j]);
    a.category.is_some()
        && a.category == b.category
        && (a.duplicate_of == Some(j) || b.duplicate_of == Some(i) || (a.duplicate_of.is_some() && a.duplicate_of == b.duplicate_of))
}

/// Mean IRLC interaction `ρ[i][j]` over greedy-selected proposals `i` and every
/// duplicate `j` of the same object. `None` if no such pair occurs or the model is not IRLC.
pub fn duplicate_interaction(
    model: &CountingModel,
    data: &Dataset,
    questions: &[QaRecord],
    exec: Execution,
) -> Result<Option<f64>> {
    if model.kind != ModelKind::Irlc {
        return Ok(None);
    }
    let per_q = exec.map(questions, |_, q| -> Result<(f64, usize)> {
        let scene = data.scene(&q.image_id)?;
        let state = model.irlc_state(scene, &model.token_ids(&q.tokens))?;
        let n = scene.num_objects();
        let mut sum = 0.0;
        let mut count = 0;
        for &i in &state.greedy.selected {
            for j in (0..n).filter(|&j| j != i && duplicate_pair(scene, i, j)) {
                sum += state.rho.row(i)[j];
                count += 1;
            }
        }
        Ok((sum, count))
    });
    let (mut sum, mut count) = (0.0, 0);
    for r in per_q {
        let (s, c) = r?;
        sum += s;
        count += c;
    }
    Ok((count > 0).then(|| sum / count as f64))
}
