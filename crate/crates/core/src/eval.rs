//! Counting metrics: VQA accuracy against ten human answers, RMSE, grounding
//! quality, per-frequency-bin breakdowns, and the top-2 gap analysis of
//! classifier outputs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::bins::NUM_BINS;
use crate::data::filter::number_word;
use crate::data::scene::{LabeledBox, QaRecord};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::tensor::{argmax, l2_normalized};

pub const ANSWERS_PER_QUESTION: usize = 10;
/// Number of agreeing humans that gives full credit.
const FULL_CREDIT: usize = 3;
/// Label boxes must exceed this IoU for a proposal to take their category.
pub const LABEL_IOU: f64 = 0.5;
pub const ORDINALITY_CLASSES: usize = 21;
/// Boundary between small and large counts in the top-2 gap analysis.
pub const LARGE_COUNT: usize = 5;

/// Whether a human answer names the integer `count`.
pub fn answer_matches(answer: &str, count: u32) -> bool {
    let a = answer.trim().to_lowercase();
    a == count.to_string() || number_word(count).is_some_and(|w| a == w)
}

/// Mean over the ten leave-one-out subsets of `min(matches, 3) / 3`.
pub fn vqa_accuracy<S: AsRef<str>>(predicted: u32, human_answers: &[S]) -> Result<f64> {
    if human_answers.len() != ANSWERS_PER_QUESTION {
        return Err(Error::InvalidArgument(format!(
            "expected {ANSWERS_PER_QUESTION} human answers, got {}",
            human_answers.len()
        )));
    }
    let k = human_answers.iter().filter(|a| answer_matches(a.as_ref(), predicted)).count();
    // Dropping a matching answer leaves k - 1 matches, dropping another leaves k.
    // Summing integer credits first keeps the result independent of answer order.
    let credits = k * (k.saturating_sub(1)).min(FULL_CREDIT) + (ANSWERS_PER_QUESTION - k) * k.min(FULL_CREDIT);
    Ok(credits as f64 / (FULL_CREDIT * ANSWERS_PER_QUESTION) as f64)
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions for RMSE"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mse = predictions.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / predictions.len() as f64;
    Ok(mse.sqrt())
}

/// Metric value that may be undefined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Quality {
    Defined(f64),
    Undefined,
}

impl Quality {
    pub fn value(self) -> Option<f64> {
        match self {
            Quality::Defined(v) => Some(v),
            Quality::Undefined => None,
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Quality::Defined(v) => write!(f, "{v}"),
            Quality::Undefined => f.write_str("UNDEFINED"),
        }
    }
}

/// Count weights a model assigned to the proposals of one image for one category.
#[derive(Clone, Debug)]
pub struct GroundingObservation<'a> {
    pub category: &'a str,
    pub weights: &'a [f64],
    pub boxes: &'a [BBox],
    pub ground_truth: &'a [LabeledBox],
}

/// Category of the label box with largest IoU above [`LABEL_IOU`], else background (`None`).
pub fn proposal_category<'a>(proposal: &BBox, labels: &'a [LabeledBox]) -> Option<&'a str> {
    let mut best: Option<(&LabeledBox, f64)> = None;
    for l in labels {
        let v = iou(proposal, &l.bbox);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((l, v));
        }
    }
    best.filter(|&(_, v)| v > LABEL_IOU).map(|(l, _)| l.category.as_str())
}

/// Per-category grounding quality: counted mass weighted by the cosine similarity
/// between each proposal's label embedding and the question category, divided by
/// the total counted mass. Background proposals contribute zero similarity.
/// Categories whose counted mass is zero are [`Quality::Undefined`].
pub fn grounding_quality(
    observations: &[GroundingObservation<'_>],
    embeddings: &HashMap<String, Vec<f64>>,
) -> Result<BTreeMap<String, Quality>> {
    let unit = |c: &str| -> Result<Vec<f64>> {
        embeddings
            .get(c)
            .map(|v| l2_normalized(v))
            .ok_or_else(|| Error::MissingKey(format!("no embedding for category {c:?}")))
    };
    let mut sums: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for o in observations {
        if o.weights.len() != o.boxes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} proposals",
                o.weights.len(),
                o.boxes.len()
            )));
        }
        let q = unit(o.category)?;
        let entry = sums.entry(o.category.to_owned()).or_default();
        for (w, b) in o.weights.iter().zip(o.boxes) {
            entry.1 += w;
            if *w == 0.0 {
                continue;
            }
            if let Some(k) = proposal_category(b, o.ground_truth) {
                let sim = if k == o.category {
                    1.0
                } else {
                    unit(k)?.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>()
                };
                entry.0 += w * sim;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(c, (s, mass))| (c, if mass > 0.0 { Quality::Defined(s / mass) } else { Quality::Undefined }))
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub n: usize,
    pub accuracy: Option<f64>,
    pub rmse: Option<f64>,
}

/// Per-question outcome used by the aggregate reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredQuestion {
    pub question_id: u64,
    pub count: u32,
    pub predicted: u32,
    pub accuracy: f64,
    pub bin: Option<usize>,
}

pub fn score_questions(predictions: &[u32], questions: &[QaRecord]) -> Result<Vec<ScoredQuestion>> {
    if predictions.len() != questions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} questions",
            predictions.len(),
            questions.len()
        )));
    }
    predictions
        .iter()
        .zip(questions)
        .map(|(&p, q)| {
            Ok(ScoredQuestion {
                question_id: q.question_id,
                count: q.count,
                predicted: p,
                accuracy: vqa_accuracy(p, &q.answers)?,
                bin: q.bin,
            })
        })
        .collect()
}

/// Accuracy and RMSE per frequency bin. Questions without a bin are ignored.
pub fn per_bin_report(scored: &[ScoredQuestion]) -> Result<[BinRow; NUM_BINS]> {
    let mut rows = [BinRow::default(); NUM_BINS];
    for (b, row) in rows.iter_mut().enumerate() {
        let members: Vec<&ScoredQuestion> = scored.iter().filter(|s| s.bin == Some(b)).collect();
        row.n = members.len();
        if members.is_empty() {
            continue;
        }
        row.accuracy = Some(members.iter().map(|s| s.accuracy).sum::<f64>() / members.len() as f64);
        let p: Vec<f64> = members.iter().map(|s| s.predicted as f64).collect();
        let t: Vec<f64> = members.iter().map(|s| s.count as f64).collect();
        row.rmse = Some(rmse(&p, &t)?);
    }
    Ok(rows)
}

/// Distribution of `|top1 − top2|` for classifier outputs over counts `0..=20`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrdinalityStats {
    /// `cdf_small[g]` = fraction of predictions with top1 < 5 whose gap is at most `g`.
    pub cdf_small: Vec<f64>,
    pub cdf_large: Vec<f64>,
    pub n_small: usize,
    pub n_large: usize,
    /// Mean probability vector per predicted count (`None` where no prediction had that count).
    pub mean_by_prediction: Vec<Option<Vec<f64>>>,
}

/// Largest and second-largest entries; ties go to the smaller count.
pub fn top_two(p: &[f64]) -> Result<(usize, usize)> {
    if p.len() < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    let first = argmax(p).expect("non-empty");
    let mut second: Option<usize> = None;
    for (i, &v) in p.iter().enumerate() {
        if i != first && second.is_none_or(|s| v > p[s]) {
            second = Some(i);
        }
    }
    Ok((first, second.expect("two classes")))
}

pub fn ordinality_gap(probabilities: &[Vec<f64>]) -> Result<OrdinalityStats> {
    let mut hist_small = vec![0usize; ORDINALITY_CLASSES];
    let mut hist_large = vec![0usize; ORDINALITY_CLASSES];
    let mut sums = vec![(vec![0.0; ORDINALITY_CLASSES], 0usize); ORDINALITY_CLASSES];
    for p in probabilities {
        if p.len() != ORDINALITY_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "probability vector of length {}, expected {ORDINALITY_CLASSES}",
                p.len()
            )));
        }
        let (a, b) = top_two(p)?;
        let gap = a.abs_diff(b);
        if a < LARGE_COUNT {
            hist_small[gap] += 1;
        } else {
            hist_large[gap] += 1;
        }
        let (s, n) = &mut sums[a];
        for (acc, v) in s.iter_mut().zip(p) {
            *acc += v;
        }
        *n += 1;
    }
    let cdf = |h: &[usize]| -> (Vec<f64>, usize) {
        let n: usize = h.iter().sum();
        let mut run = 0;
        let c = h
            .iter()
            .map(|&k| {
                run += k;
                if n == 0 { 0.0 } else { run as f64 / n as f64 }
            })
            .collect();
        (c, n)
    };
    let (cdf_small, n_small) = cdf(&hist_small);
    let (cdf_large, n_large) = cdf(&hist_large);
    let mean_by_prediction = sums
        .into_iter()
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    Ok(OrdinalityStats { cdf_small, cdf_large, n_small, n_large, mean_by_prediction })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub mean_difference: f64,
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
}

/// Paired t-test of `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Empty("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(PairedTTest { mean_difference: mean, t, df, p_value: p });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p_value = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(PairedTTest { mean_difference: mean, t, df, p_value })
}

/// Everything reported for one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub model: String,
    pub n: usize,
    pub accuracy: f64,
    pub rmse: f64,
    pub bins: [BinRow; NUM_BINS],
    pub grounding: BTreeMap<String, Quality>,
    pub ordinality: Option<OrdinalityStats>,
    /// IRLC only: mean interaction from counted proposals onto their duplicates.
    pub duplicate_interaction: Option<f64>,
}

impl MetricReport {
    /// Accuracy, RMSE and bins from integer count predictions.
    pub fn from_predictions(split: &str, model: &str, predictions: &[u32], questions: &[QaRecord]) -> Result<Self> {
        if questions.is_empty() {
            return Err(Error::Empty("evaluation split"));
        }
        let scored = score_questions(predictions, questions)?;
        let accuracy = scored.iter().map(|s| s.accuracy).sum::<f64>() / scored.len() as f64;
        let p: Vec<f64> = predictions.iter().map(|&v| v as f64).collect();
        let t: Vec<f64> = questions.iter().map(|q| q.count as f64).collect();
        Ok(Self {
            split: split.to_owned(),
            model: model.to_owned(),
            n: questions.len(),
            accuracy,
            rmse: rmse(&p, &t)?,
            bins: per_bin_report(&scored)?,
            grounding: BTreeMap::new(),
            ordinality: None,
            duplicate_interaction: None,
        })
    }

    /// Rows of the metric CSV.
    pub fn rows(&self) -> Vec<MetricRow> {
        let row = |metric: &str, group: String, value: String, n: usize| MetricRow {
            split: self.split.clone(),
            model: self.model.clone(),
            metric: metric.to_owned(),
            group,
            value,
            n,
        };
        let mut out = vec![
            row("accuracy", "all".into(), self.accuracy.to_string(), self.n),
            row("rmse", "all".into(), self.rmse.to_string(), self.n),
        ];
        for (b, r) in self.bins.iter().enumerate() {
            let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
            out.push(row("accuracy", format!("bin{}", b + 1), fmt(r.accuracy), r.n));
            out.push(row("rmse", format!("bin{}", b + 1), fmt(r.rmse), r.n));
        }
        for (c, q) in &self.grounding {
            out.push(row("grounding_quality", c.clone(), q.to_string(), 0));
        }
        if let Some(v) = self.duplicate_interaction {
            out.push(row("duplicate_interaction", "all".into(), v.to_string(), self.n));
        }
        if let Some(o) = &self.ordinality {
            for (g, v) in o.cdf_small.iter().enumerate() {
                out.push(row("top2_gap_cdf_lt5", g.to_string(), v.to_string(), o.n_small));
            }
            for (g, v) in o.cdf_large.iter().enumerate() {
                out.push(row("top2_gap_cdf_ge5", g.to_string(), v.to_string(), o.n_large));
            }
        }
        out
    }
}

/// One CSV row. Columns: `split`, `model`, `metric`, `group` (`all`, `bin1`..`bin6`, a
/// category name, or a gap value), `value` (empty when the group has no questions,
/// `UNDEFINED` for grounding quality without counted mass), `n` (questions in the group).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub split: String,
    pub model: String,
    pub metric: String,
    pub group: String,
    pub value: String,
    pub n: usize,
}

pub const METRIC_CSV_HEADER: &str = "split,model,metric,group,value,n";

pub fn write_metric_csv<W: Write>(mut w: W, reports: &[MetricReport]) -> Result<()> {
    writeln!(w, "{METRIC_CSV_HEADER}")?;
    for r in reports {
        for row in r.rows() {
            writeln!(w, "{},{},{},{},{},{}", row.split, row.model, row.metric, row.group, row.value, row.n)?;
        }
    }
    Ok(())
}
