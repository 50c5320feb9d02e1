//! Optimization loop: Adam over the joint objective with fresh negatives and
//! optional history masking every step.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, ParamStore};
use crate::data::{mask_history, sample_excluding, sample_logic_negatives, DatasetSplit, SequenceExample, MAX_LOGIC_NEGATIVES};
use crate::error::{Error, Result};
use crate::eval::{evaluate_full_rank, EvalProtocol};
use crate::model::{Batch, SrplrModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub logic_negatives: usize,
    pub mask_r: f64,
    pub seed: u64,
    pub eval_ks: Vec<usize>,
    pub exclude_history: bool,
    /// Evaluate on the validation split every this many epochs (0 = never).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs (0 = only the final one).
    pub checkpoint_every: usize,
    /// Restore the parameters of the best validation epoch after training.
    pub keep_best_valid: bool,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 2048,
            learning_rate: 0.002,
            logic_negatives: 1,
            mask_r: 0.0,
            seed: 2023,
            eval_ks: vec![5, 10],
            exclude_history: false,
            eval_every: 1,
            checkpoint_every: 0,
            keep_best_valid: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: field.into(),
                message,
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("{} must be positive", self.learning_rate));
        }
        if self.logic_negatives > MAX_LOGIC_NEGATIVES {
            return bad(
                "logic_negatives",
                format!("{} is outside 0..={MAX_LOGIC_NEGATIVES}", self.logic_negatives),
            );
        }
        if !(0.0..=1.0).contains(&self.mask_r) {
            return bad("mask_r", format!("{} is outside [0, 1]", self.mask_r));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return bad("eval_ks", "needs one or more positive cutoffs".into());
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad("grad_clip", format!("{c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            ks: self.eval_ks.clone(),
            exclude_history: self.exclude_history,
        }
    }
}

/// Adam with the usual decay constants.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_rec: f64,
    pub loss_logic: f64,
    pub loss_total: f64,
    pub valid_hit10: Option<f64>,
    pub valid_ndcg10: Option<f64>,
}

pub const EPOCH_LOG_HEADER: &str = "epoch\tloss_rec\tloss_logic\tloss_total\tvalid_hit@10\tvalid_ndcg@10";

pub fn format_epoch_log(rows: &[EpochLog]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    let opt = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{v:.6}"));
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            r.epoch,
            r.loss_rec,
            r.loss_logic,
            r.loss_total,
            opt(r.valid_hit10),
            opt(r.valid_ndcg10)
        );
    }
    out
}

/// Where and how to write checkpoints during training.
#[derive(Clone, Debug)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub item_fingerprint: String,
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

fn batch_for(
    examples: &[&SequenceExample],
    item_count: usize,
    cfg: &TrainConfig,
    need_loss_negative: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let mut b = Batch {
        width: examples[0].history.len(),
        negatives_per_example: cfg.logic_negatives,
        ..Default::default()
    };
    for ex in examples {
        let negs = sample_logic_negatives(ex, cfg.logic_negatives, item_count, rng)?;
        let shown = if cfg.mask_r > 0.0 {
            mask_history(ex, cfg.mask_r, rng)
        } else {
            (*ex).clone()
        };
        b.histories.extend_from_slice(&shown.history);
        b.targets.push(ex.target);
        if need_loss_negative {
            let mut excluded: Vec<usize> = ex.items().collect();
            excluded.push(ex.target);
            let base = excluded.len();
            excluded.extend_from_slice(&negs);
            let neg = match sample_excluding(&excluded, 1, item_count, rng) {
                Ok(v) => v[0],
                // tiny catalogues: allow overlap with the reasoning negatives
                Err(Error::InfeasibleSampling { .. }) => sample_excluding(&excluded[..base], 1, item_count, rng)?[0],
                Err(e) => return Err(e),
            };
            b.loss_negatives.push(neg);
        }
        b.reasoning_negatives.extend(negs);
    }
    Ok(b)
}

fn clip_gradients(grads: &mut Gradients, store: &ParamStore, max_norm: f64) {
    let ids: Vec<_> = store.ids().collect();
    let total: f64 = ids
        .iter()
        .filter_map(|&id| grads.get(id))
        .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = max_norm / total;
        for id in ids {
            if let Some(t) = grads.get_mut(id) {
                t.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
}

/// Trains `model` on `split.train` for `cfg.epochs` epochs.
pub fn train(
    model: &mut SrplrModel,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    checkpoints: Option<&CheckpointSink>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.item_count != model.item_count() {
        return Err(Error::Invalid(format!(
            "model scores {} items, dataset has {}",
            model.item_count(),
            split.item_count
        )));
    }
    if cfg.epochs > 0 && split.train.is_empty() {
        return Err(Error::Empty("training split has no examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg.learning_rate);
    let need_loss_negative = model.variant().use_logic;
    let protocol = cfg.protocol();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut rec_sum, mut logic_sum, mut total_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let examples: Vec<&SequenceExample> = chunk.iter().map(|&i| &split.train[i]).collect();
            let batch = batch_for(&examples, split.item_count, cfg, need_loss_negative, &mut rng)?;
            let mut g = Graph::new();
            let losses = model.loss(&mut g, &batch, Some(&mut rng))?;
            let rec = g.value(losses.rec).item();
            let logic = losses.logic.map_or(0.0, |l| g.value(l).item());
            let total = g.value(losses.total).item();
            if !(rec.is_finite() && logic.is_finite() && total.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    detail: format!("loss_rec {rec}, loss_logic {logic}, loss_total {total}"),
                });
            }
            let mut grads = g.backward(losses.total, model.params());
            if !grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    detail: format!("non-finite gradient at loss_total {total}"),
                });
            }
            model.item_table().freeze_padding(&mut grads);
            if let Some(c) = cfg.grad_clip {
                clip_gradients(&mut grads, model.params(), c);
            }
            adam.step(model.params_mut(), &grads);
            let w = chunk.len() as f64;
            rec_sum += rec * w;
            logic_sum += logic * w;
            total_sum += total * w;
            seen += chunk.len();
        }
        let n = seen.max(1) as f64;
        let mut row = EpochLog {
            epoch,
            loss_rec: rec_sum / n,
            loss_logic: logic_sum / n,
            loss_total: total_sum / n,
            valid_hit10: None,
            valid_ndcg10: None,
        };
        let eval_now = cfg.eval_every > 0 && epoch % cfg.eval_every == 0 && !split.valid.is_empty();
        if eval_now {
            let mut p10 = protocol.clone();
            if !p10.ks.contains(&10) {
                p10.ks.push(10);
            }
            let m = evaluate_full_rank(model, &split.valid, &p10, cfg.batch_size.min(1024))?;
            row.valid_hit10 = m.hit.get(&10).copied();
            row.valid_ndcg10 = m.ndcg.get(&10).copied();
            if cfg.keep_best_valid {
                let score = row.valid_ndcg10.unwrap_or(0.0);
                if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
                    best = Some((epoch, score, model.params().clone()));
                }
            }
        }
        log::info!(
            "epoch {epoch}: rec {:.5} logic {:.5} total {:.5}",
            row.loss_rec,
            row.loss_logic,
            row.loss_total
        );
        log.push(row);
        if let Some(sink) = checkpoints {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                let p = sink.dir.join(format!("checkpoint_epoch{epoch}.json"));
                model.save(&p, &sink.item_fingerprint, sink.config_hash.as_deref())?;
            }
        }
    }

    let best_epoch = match best {
        Some((epoch, _, params)) => {
            *model.params_mut() = params;
            Some(epoch)
        }
        None => None,
    };
    Ok(TrainOutcome { log, best_epoch })
}
