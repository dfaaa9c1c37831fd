//! Mini-batch training with early stopping on dev accuracy.
//!
//! Per-question forward/backward passes run through [`Execution`]; their
//! gradients are summed in batch order, so parallel and sequential runs agree
//! bit for bit.

use std::fs::File;
use std::io::BufReader;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::ResolvedConfig;
use super::evaluate::evaluate_split;
use crate::autodiff::{Grads, Graph};
use crate::counters::{derive_rng, CountingModel, ModelKind, TrainContext};
use crate::data::{Dataset, QaRecord};
use crate::error::{Error, Result};
use crate::grounding::choose_grounding_images;
use crate::language::Vocabulary;
use crate::optim::{Adam, Scheduler};

const STREAM_SHUFFLE: u64 = 1;
const STREAM_QUESTION: u64 = 2;
const STREAM_GROUNDING: u64 = 3;

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub counting_loss: f64,
    pub entropy_penalty: f64,
    pub interaction_penalty: f64,
    pub grounding_loss: f64,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
    pub dev_rmse: f64,
    pub learning_rate: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,counting_loss,entropy_penalty,interaction_penalty,grounding_loss,train_accuracy,dev_accuracy,dev_rmse,learning_rate";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.counting_loss,
            self.entropy_penalty,
            self.interaction_penalty,
            self.grounding_loss,
            self.train_accuracy,
            self.dev_accuracy,
            self.dev_rmse,
            self.learning_rate
        )
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best dev accuracy.
    pub model: CountingModel,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub log: Vec<EpochRecord>,
}

/// Vocabulary over training questions and captions.
pub fn build_vocabulary(data: &Dataset) -> Vocabulary {
    let mut v = Vocabulary::new();
    for t in data.training_tokens() {
        v.insert(t);
    }
    v
}

/// Most frequent training count; ties go to the smaller count.
pub fn modal_count(questions: &[QaRecord]) -> Result<u32> {
    let counts: Vec<u32> = questions.iter().map(|q| q.count).collect();
    crate::counters::guess1_mode(&counts)
}

pub fn new_model(cfg: &ResolvedConfig, data: &Dataset) -> Result<CountingModel> {
    let mut model = CountingModel::new(cfg.model, cfg.dims(), build_vocabulary(data), cfg.seed)?;
    if let Some(path) = &cfg.glove {
        model.load_glove(BufReader::new(File::open(path)?))?;
    }
    Ok(model)
}

struct QuestionGrad {
    grads: Grads,
    total: f64,
    counting: f64,
    entropy: f64,
    interaction: f64,
}

/// Trains according to `cfg`. `on_epoch` sees every log row as it is produced.
pub fn train_model(
    cfg: &ResolvedConfig,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if data.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if data.dev.is_empty() {
        return Err(Error::Empty("dev split"));
    }
    let exec = cfg.execution();
    let mut model = new_model(cfg, data)?;

    if cfg.model == ModelKind::Guess1 {
        model.set_guess(modal_count(&data.train)?)?;
        let (_, train_rep) = evaluate_split(&model, data, "train", &data.train, exec)?;
        let (_, dev) = evaluate_split(&model, data, "dev", &data.dev, exec)?;
        let rec = EpochRecord {
            epoch: 0,
            train_loss: 0.0,
            counting_loss: 0.0,
            entropy_penalty: 0.0,
            interaction_penalty: 0.0,
            grounding_loss: 0.0,
            train_accuracy: train_rep.accuracy,
            dev_accuracy: dev.accuracy,
            dev_rmse: dev.rmse,
            learning_rate: 0.0,
        };
        on_epoch(&rec);
        return Ok(TrainOutcome { model, best_epoch: 0, best_dev_accuracy: dev.accuracy, log: vec![rec] });
    }

    let objective = cfg.objective();
    let train_ids: Vec<Vec<usize>> = data.train.iter().map(|q| model.token_ids(&q.tokens)).collect();
    let use_grounding = cfg.grounding && cfg.model.uses_scene() && cfg.grounding_weight > 0.0;

    let mut opt = Adam::new(&model.store, cfg.learning_rate);
    let mut sched = Scheduler::new(cfg.lr_schedule.clone());
    let mut best: Option<(usize, f64, CountingModel)> = None;
    let mut stale = 0;
    let mut log = Vec::new();
    let mut step: u64 = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, STREAM_SHUFFLE, epoch as u64));
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = exec.map(batch, |k, &qi| -> Result<QuestionGrad> {
                let q = &data.train[qi];
                let scene = data.scene(&q.image_id)?;
                let mut rng = derive_rng(cfg.seed, STREAM_QUESTION, (step << 16) | k as u64);
                let mut g = Graph::new(&model.store);
                let ctx = TrainContext { objective: &objective, rng: &mut rng };
                let terms = model.counting_loss(&mut g, scene, &train_ids[qi], q.count, ctx)?;
                let total = g.scalar(terms.total);
                Ok(QuestionGrad {
                    grads: g.backward(terms.total)?,
                    total,
                    counting: terms.counting,
                    entropy: terms.entropy,
                    interaction: terms.interaction,
                })
            });
            let mut grads = Grads::new(model.store.len());
            let (mut loss, mut lc, mut ph, mut pi) = (0.0, 0.0, 0.0, 0.0);
            for r in results {
                let r = r?;
                grads.add_assign(&r.grads);
                loss += r.total;
                lc += r.counting;
                ph += r.entropy;
                pi += r.interaction;
            }
            let n = batch.len() as f64;
            grads.scale(1.0 / n);
            let (mut loss, lc, ph, pi) = (loss / n, lc / n, ph / n, pi / n);

            let mut ground = 0.0;
            if use_grounding {
                let chosen = choose_grounding_images(
                    batch.len(),
                    cfg.grounding_images,
                    &mut derive_rng(cfg.seed, STREAM_GROUNDING, step),
                );
                let parts = exec.map(&chosen, |_, &pos| -> Result<Option<(Grads, f64)>> {
                    let image = &data.train[batch[pos]].image_id;
                    let scene = data.scene(image)?;
                    let caps: Vec<(Vec<usize>, usize)> = data
                        .grounded_captions(image)
                        .into_iter()
                        .filter(|c| !c.tokens.is_empty())
                        .map(|c| (model.token_ids(&c.tokens), c.assigned.expect("grounded")))
                        .collect();
                    let mut g = Graph::new(&model.store);
                    match model.grounding_loss(&mut g, scene, &caps)? {
                        Some(l) => {
                            let v = g.scalar(l);
                            Ok(Some((g.backward(l)?, v)))
                        }
                        None => Ok(None),
                    }
                });
                let mut gg = Grads::new(model.store.len());
                let mut used = 0usize;
                for p in parts {
                    if let Some((gr, v)) = p? {
                        gg.add_assign(&gr);
                        ground += v;
                        used += 1;
                    }
                }
                if used > 0 {
                    ground /= used as f64;
                    gg.scale(cfg.grounding_weight / used as f64);
                    grads.add_assign(&gg);
                    loss += cfg.grounding_weight * ground;
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {loss} at epoch {epoch}, batch {b}")));
            }
            model.store.accumulate(&grads);
            opt.step(&mut model.store);
            sched.after_iteration(&mut opt);
            step += 1;
            for (s, v) in sums.iter_mut().zip([loss, lc, ph, pi, ground]) {
                *s += v;
            }
            batches += 1;
        }
        let (_, train_rep) = evaluate_split(&model, data, "train", &data.train, exec)?;
        let (_, dev) = evaluate_split(&model, data, "dev", &data.dev, exec)?;
        let lr_used = opt.lr;
        sched.after_window(&mut opt, train_rep.accuracy);
        let m = batches.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            train_loss: sums[0] / m,
            counting_loss: sums[1] / m,
            entropy_penalty: sums[2] / m,
            interaction_penalty: sums[3] / m,
            grounding_loss: sums[4] / m,
            train_accuracy: train_rep.accuracy,
            dev_accuracy: dev.accuracy,
            dev_rmse: dev.rmse,
            learning_rate: lr_used,
        };
        on_epoch(&rec);
        log.push(rec);
        if best.as_ref().is_none_or(|(_, acc, _)| dev.accuracy > *acc) {
            best = Some((epoch, dev.accuracy, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_dev_accuracy, model) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, best_epoch, best_dev_accuracy, log })
}
