//! The dual feature/logic recommender: an encoder over the history plus a
//! Beta-embedding reasoning head, scored jointly against every item.

use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{self, log_sigmoid_scalar, Graph, ParamId, ParamStore, Unary, Var};
use crate::data::{SequenceExample, PAD};
use crate::encoder::{Encoder, EncoderConfig, ItemEmbeddingTable, INIT_STD};
use crate::error::{Error, Result};
use crate::logic::graph::{self as lg, AttentionVars};
use crate::logic::{self, AttentionNet, BetaEmbedding, Projection, TransferParams};
use crate::tensor::Tensor;

pub const PROB_CLIP: f64 = 1e-8;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelVariant {
    pub use_attention: bool,
    pub use_negation: bool,
    pub use_feature: bool,
    /// Off gives the plain backbone: scores from the feature path only and no logic loss.
    pub use_logic: bool,
    pub lambda: f64,
}

impl Default for ModelVariant {
    fn default() -> Self {
        ModelVariant {
            use_attention: true,
            use_negation: true,
            use_feature: true,
            use_logic: true,
            lambda: 0.1,
        }
    }
}

impl ModelVariant {
    pub fn full(lambda: f64) -> Self {
        ModelVariant {
            lambda,
            ..Default::default()
        }
    }

    pub fn backbone() -> Self {
        ModelVariant {
            use_logic: false,
            lambda: 0.0,
            ..Default::default()
        }
    }

    pub fn label(&self) -> String {
        if !self.use_logic {
            return "backbone".into();
        }
        let mut off = Vec::new();
        if !self.use_attention {
            off.push("w/o att");
        }
        if !self.use_negation {
            off.push("w/o neg_oper");
        }
        if !self.use_feature {
            off.push("w/o feat");
        }
        if off.is_empty() {
            "full".into()
        } else {
            off.join(", ")
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config {
                field: "lambda".into(),
                message: format!("{} must be a finite value >= 0", self.lambda),
            });
        }
        if !self.use_logic && !self.use_feature {
            return Err(Error::Config {
                field: "use_feature".into(),
                message: "disabling both the feature and logic paths leaves nothing to score".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogicLossForm {
    /// `log σ(D⁺ − D⁻)`.
    #[default]
    Literal,
    /// `−log σ(D⁻ − D⁺)`, bounded below by zero.
    Bounded,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecLossForm {
    #[default]
    Bce,
    SoftmaxCe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub item_count: usize,
    pub encoder: EncoderConfig,
    pub variant: ModelVariant,
    pub projection: Projection,
    pub logic_loss: LogicLossForm,
    pub rec_loss: RecLossForm,
}

impl ModelConfig {
    /// Full model with default projection and loss forms.
    pub fn new(item_count: usize, encoder: EncoderConfig) -> Self {
        ModelConfig {
            item_count,
            encoder,
            variant: ModelVariant::default(),
            projection: Projection::default(),
            logic_loss: LogicLossForm::default(),
            rec_loss: RecLossForm::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.hidden_size
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.variant.validate()?;
        if self.item_count == 0 {
            return Err(Error::Config {
                field: "item_count".into(),
                message: "must be positive".into(),
            });
        }
        let b = self.projection.bounds;
        if !(b.lo > 0.0 && b.lo < b.hi) {
            return Err(Error::Config {
                field: "projection".into(),
                message: format!("clamp bounds [{}, {}] are invalid", b.lo, b.hi),
            });
        }
        Ok(())
    }
}

/// Item ids entering the reasoning expression for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ReasoningInput {
    pub positive_ids: Vec<usize>,
    pub negative_ids: Vec<usize>,
}

/// Flattened training or scoring batch.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    /// `len() × width` left-padded ids.
    pub histories: Vec<usize>,
    pub width: usize,
    pub targets: Vec<usize>,
    /// `len() × negatives_per_example` ids for the reasoning expression.
    pub reasoning_negatives: Vec<usize>,
    pub negatives_per_example: usize,
    /// One pair-wise negative per example for the logic loss; may be empty.
    pub loss_negatives: Vec<usize>,
}

impl Batch {
    /// Scoring batch: histories and targets only.
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a SequenceExample>) -> Self {
        let mut b = Batch::default();
        for ex in examples {
            if b.width == 0 {
                b.width = ex.history.len();
            }
            b.histories.extend_from_slice(&ex.history);
            b.targets.push(ex.target);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Empty("batch has no examples".into()));
        }
        if self.histories.len() != n * self.width {
            return Err(Error::Shape(format!(
                "{} history ids for {n} examples of width {}",
                self.histories.len(),
                self.width
            )));
        }
        if self.reasoning_negatives.len() != n * self.negatives_per_example {
            return Err(Error::Shape("reasoning negatives do not match the batch".into()));
        }
        if !self.loss_negatives.is_empty() && self.loss_negatives.len() != n {
            return Err(Error::Shape("need one loss negative per example".into()));
        }
        Ok(())
    }
}

/// Graph nodes of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub rec: Var,
    pub logic: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Debug)]
struct LogicIds {
    w_alpha: ParamId,
    w_beta: ParamId,
    att: [ParamId; 4],
}

/// Model state: configuration plus every learnable array.
#[derive(Clone, Debug)]
pub struct SrplrModel {
    config: ModelConfig,
    store: ParamStore,
    table: ItemEmbeddingTable,
    encoder: Encoder,
    logic: LogicIds,
}

const LOGIC_NAMES: [&str; 6] = [
    "transfer.w_alpha",
    "transfer.w_beta",
    "attention.w1",
    "attention.b1",
    "attention.w2",
    "attention.b2",
];

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: ModelConfig,
    item_fingerprint: String,
    config_hash: Option<String>,
    params: ParamStore,
}

impl SrplrModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim();
        let mut store = ParamStore::new();
        ItemEmbeddingTable::init(&mut store, config.item_count, d, rng);
        Encoder::init(config.encoder.clone(), &mut store, rng)?;
        let net = AttentionNet::init(d, INIT_STD, rng);
        let normal = rand_distr::Normal::new(0.0, INIT_STD).expect("valid std");
        let mut square = || {
            let data = (0..d * d).map(|_| rand_distr::Distribution::sample(&normal, rng)).collect();
            Tensor::new(vec![d, d], data)
        };
        let (wa, wb) = (square(), square());
        for (name, t) in LOGIC_NAMES.iter().zip([wa, wb, net.w1, net.b1, net.w2, net.b2]) {
            store.add(*name, t);
        }
        Self::from_store(config, store)
    }

    fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let table = ItemEmbeddingTable::bind(&store)?;
        let d = config.dim();
        if table.dim() != d || table.item_count() != config.item_count {
            return Err(Error::Shape(format!(
                "item table holds {} items of dim {}, config wants {} of dim {d}",
                table.item_count(),
                table.dim(),
                config.item_count
            )));
        }
        let encoder = Encoder::bind(config.encoder.clone(), &store)?;
        let shapes: [&[usize]; 6] = [&[d, d], &[d, d], &[2 * d, 2 * d], &[2 * d], &[2 * d, d], &[d]];
        let mut ids = Vec::with_capacity(6);
        for (name, shape) in LOGIC_NAMES.iter().zip(shapes) {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if store.get(id).shape() != shape {
                return Err(Error::Shape(format!("parameter {name} is not {shape:?}")));
            }
            ids.push(id);
        }
        Ok(SrplrModel {
            config,
            store,
            table,
            encoder,
            logic: LogicIds {
                w_alpha: ids[0],
                w_beta: ids[1],
                att: [ids[2], ids[3], ids[4], ids[5]],
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> &ModelVariant {
        &self.config.variant
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn item_count(&self) -> usize {
        self.config.item_count
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn item_table(&self) -> &ItemEmbeddingTable {
        &self.table
    }

    /// Parameter ids of the reasoning head (transfer matrices and attention MLP).
    pub fn logic_param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.logic.w_alpha, self.logic.w_beta];
        v.extend_from_slice(&self.logic.att);
        v
    }

    pub fn transfer(&self) -> TransferParams {
        TransferParams {
            w_alpha: self.store.get(self.logic.w_alpha).clone(),
            w_beta: self.store.get(self.logic.w_beta).clone(),
        }
    }

    pub fn attention_net(&self) -> AttentionNet {
        let [w1, b1, w2, b2] = self.logic.att.map(|id| self.store.get(id).clone());
        AttentionNet { w1, b1, w2, b2 }
    }

    /// Beta embeddings of the given items from the live parameters.
    pub fn item_betas(&self, ids: &[usize]) -> Result<Vec<BetaEmbedding>> {
        let rows = self.table.embed(&self.store, ids)?;
        logic::project_to_beta(&rows, &self.transfer(), &self.config.projection)
    }

    /// The reasoning expression on plain values.
    pub fn reason_sequence(&self, input: &ReasoningInput) -> Result<BetaEmbedding> {
        if input.positive_ids.is_empty() {
            return Err(Error::Empty("reasoning needs at least one positive item".into()));
        }
        let bounds = self.config.projection.bounds;
        let v = &self.config.variant;
        let mut participants = self.item_betas(&input.positive_ids)?;
        if v.use_negation && !input.negative_ids.is_empty() {
            for n in self.item_betas(&input.negative_ids)? {
                participants.push(logic::negate(&n, bounds));
            }
        }
        let weights = if v.use_attention {
            logic::attention_weights(&participants, &self.attention_net())?
        } else {
            let u = 1.0 / participants.len() as f64;
            vec![vec![u; self.dim()]; participants.len()]
        };
        logic::conjoin(&participants, &weights, bounds)
    }

    /// Pair-wise logic loss for one reasoned sequence, on plain values.
    pub fn logic_loss(&self, reasoned: &BetaEmbedding, target: usize, negative: usize) -> Result<f64> {
        if target == negative {
            return Err(Error::Invalid(format!("loss negative {negative} equals the target")));
        }
        let items = self.item_betas(&[target, negative])?;
        let pos = logic::kl_distance(&items[0], reasoned)?;
        let neg = logic::kl_distance(&items[1], reasoned)?;
        Ok(logic_loss_value(pos, neg, self.config.logic_loss))
    }

    /// Mean vectors of every item's Beta embedding, rows for items 1..=N.
    pub fn item_means(&self) -> Result<Tensor> {
        let ids: Vec<usize> = (1..=self.item_count()).collect();
        let betas = self.item_betas(&ids)?;
        let d = self.dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        for b in &betas {
            data.extend(b.mean());
        }
        Ok(Tensor::new(vec![ids.len(), d], data))
    }

    /// Raw scores for items 1..=N (index j holds item j + 1).
    pub fn predict_scores(&self, h_f: &[f64], h_l: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if h_f.len() != d || h_l.len() != d {
            return Err(Error::Shape(format!(
                "feature {} and logic {} representations, dim {d}",
                h_f.len(),
                h_l.len()
            )));
        }
        let v = &self.config.variant;
        let m = self.store.get(self.table.id());
        let e = if v.use_logic { Some(self.item_means()?) } else { None };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        Ok((1..=self.item_count())
            .map(|j| {
                let mut s = 0.0;
                if v.use_feature || !v.use_logic {
                    s += dot(h_f, m.row(j));
                }
                if let Some(e) = &e {
                    s += dot(h_l, e.row(j - 1));
                }
                s
            })
            .collect())
    }

    /// Builds the scoring graph. Returns `[B, N]` scores and, when the logic
    /// path is on, the reasoned `(α, β)` plus the projected item table.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, rng: Option<&mut dyn RngCore>) -> Result<Forward> {
        batch.check()?;
        self.table.check_ids(&batch.histories)?;
        self.table.check_ids(&batch.reasoning_negatives)?;
        let v = &self.config.variant;
        let n = batch.len();
        let l = batch.width;
        let items: Vec<usize> = (1..=self.item_count()).collect();
        let table = g.param(&self.store, self.table.id());
        let item_rows = g.gather(table, &items, &[items.len()]);

        let mut feature = None;
        if v.use_feature || !v.use_logic {
            let emb = self.table.embed_sequence(g, table, &batch.histories, n)?;
            feature = Some(self.encoder.encode(g, &self.store, emb, &batch.histories, rng)?);
        }

        if !v.use_logic {
            let hf = feature.expect("feature path is on");
            let scores = g.matmul(hf, item_rows, true);
            return Ok(Forward {
                scores,
                feature: Some(hf),
                logic_repr: None,
                reasoned: None,
                item_params: None,
            });
        }

        let bounds = self.config.projection.bounds;
        let wa = g.param(&self.store, self.logic.w_alpha);
        let wb = g.param(&self.store, self.logic.w_beta);
        let all_a = lg::project(g, table, wa, &self.config.projection);
        let all_b = lg::project(g, table, wb, &self.config.projection);

        let mut pa = g.gather(all_a, &batch.histories, &[n, l]);
        let mut pb = g.gather(all_b, &batch.histories, &[n, l]);
        let mut keep: Vec<bool> = batch.histories.iter().map(|&i| i != PAD).collect();
        let k = batch.negatives_per_example;
        if v.use_negation && k > 0 {
            let na = g.gather(all_a, &batch.reasoning_negatives, &[n, k]);
            let nb = g.gather(all_b, &batch.reasoning_negatives, &[n, k]);
            let na = lg::negate(g, na, bounds);
            let nb = lg::negate(g, nb, bounds);
            pa = g.concat(pa, na, 1);
            pb = g.concat(pb, nb, 1);
            keep = (0..n)
                .flat_map(|r| {
                    let hist = &batch.histories[r * l..(r + 1) * l];
                    hist.iter().map(|&i| i != PAD).chain(std::iter::repeat_n(true, k))
                })
                .collect();
        }
        let p = keep.len() / n;
        if let Some(r) = (0..n).find(|&r| !keep[r * p..(r + 1) * p].iter().any(|&x| x)) {
            return Err(Error::Empty(format!("example {r} has no reasoning participants")));
        }
        let d = self.dim();
        let weights = if v.use_attention {
            let [w1, b1, w2, b2] = self.logic.att.map(|id| g.param(&self.store, id));
            let logits = lg::attention_logits(g, pa, pb, AttentionVars { w1, b1, w2, b2 });
            lg::participant_softmax(g, logits, Some(&keep))
        } else {
            let mut w = Vec::with_capacity(n * p * d);
            for r in 0..n {
                let row = &keep[r * p..(r + 1) * p];
                let u = 1.0 / row.iter().filter(|&&x| x).count() as f64;
                for &kp in row {
                    w.extend(std::iter::repeat_n(if kp { u } else { 0.0 }, d));
                }
            }
            g.constant(Tensor::new(vec![n, p, d], w))
        };
        let (ca, cb) = lg::conjoin(g, weights, pa, pb, bounds);
        let h_l = lg::mean(g, ca, cb);

        let item_a = g.gather(all_a, &items, &[items.len()]);
        let item_b = g.gather(all_b, &items, &[items.len()]);
        let e = lg::mean(g, item_a, item_b);
        let scores = match feature {
            Some(hf) if v.use_feature => {
                let h = g.concat(hf, h_l, 1);
                let cand = g.concat(item_rows, e, 1);
                g.matmul(h, cand, true)
            }
            _ => g.matmul(h_l, e, true),
        };
        Ok(Forward {
            scores,
            feature,
            logic_repr: Some(h_l),
            reasoned: Some((ca, cb)),
            item_params: Some((all_a, all_b)),
        })
    }

    /// Joint objective `rec + λ·logic` averaged over the batch.
    pub fn loss(&self, g: &mut Graph, batch: &Batch, rng: Option<&mut dyn RngCore>) -> Result<Losses> {
        for &t in &batch.targets {
            if t == PAD || t > self.item_count() {
                return Err(Error::IdOutOfRange {
                    id: t,
                    max: self.item_count(),
                });
            }
        }
        self.table.check_ids(&batch.loss_negatives)?;
        let fwd = self.forward(g, batch, rng)?;
        let cols: Vec<usize> = batch.targets.iter().map(|t| t - 1).collect();
        let per_row = match self.config.rec_loss {
            RecLossForm::Bce => g.bce_with_logits(fwd.scores, &cols, PROB_CLIP),
            RecLossForm::SoftmaxCe => g.softmax_ce(fwd.scores, &cols),
        };
        let rec = g.mean(per_row);
        let mut logic = None;
        if let (Some(reasoned), Some((all_a, all_b))) = (fwd.reasoned, fwd.item_params) {
            if !batch.loss_negatives.is_empty() {
                if let Some(i) = (0..batch.len()).find(|&i| batch.loss_negatives[i] == batch.targets[i]) {
                    return Err(Error::Invalid(format!("loss negative equals the target in example {i}")));
                }
                let n = batch.len();
                let ta = g.gather(all_a, &batch.targets, &[n]);
                let tb = g.gather(all_b, &batch.targets, &[n]);
                let na = g.gather(all_a, &batch.loss_negatives, &[n]);
                let nb = g.gather(all_b, &batch.loss_negatives, &[n]);
                let pos = lg::kl_distance(g, (ta, tb), reasoned);
                let neg = lg::kl_distance(g, (na, nb), reasoned);
                let gap = g.sub(pos, neg);
                let per = match self.config.logic_loss {
                    LogicLossForm::Literal => g.unary(gap, Unary::LogSigmoid),
                    LogicLossForm::Bounded => g.unary(gap, Unary::Softplus),
                };
                logic = Some(g.mean(per));
            }
        }
        let lambda = self.config.variant.lambda;
        let total = match logic {
            Some(lv) if lambda > 0.0 => {
                let w = g.scale(lv, lambda);
                g.add(rec, w)
            }
            _ => rec,
        };
        Ok(Losses { rec, logic, total })
    }

    /// Scores for a batch in evaluation mode (no dropout, no sampled negatives): `B × N`.
    pub fn score_batch(&self, examples: &[&SequenceExample]) -> Result<Tensor> {
        let batch = Batch::from_examples(examples.iter().copied());
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, &batch, None)?;
        Ok(g.value(fwd.scores).clone())
    }

    pub fn save(&self, path: &Path, item_fingerprint: &str, config_hash: Option<&str>) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            item_fingerprint: item_fingerprint.to_string(),
            config_hash: config_hash.map(str::to_string),
            params: self.store.clone(),
        };
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), &ck)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Loads a checkpoint, refusing a different model config or item id map.
    pub fn load(path: &Path, expected: Option<&ModelConfig>, item_fingerprint: &str) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
        }
        if let Some(cfg) = expected {
            if *cfg != ck.config {
                return Err(Error::Checkpoint("checkpoint was written with a different model config".into()));
            }
        }
        if ck.item_fingerprint != item_fingerprint {
            return Err(Error::Checkpoint("checkpoint item id map does not match the dataset".into()));
        }
        Self::from_store(ck.config, ck.params)
    }
}

/// Outputs of [`SrplrModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub scores: Var,
    /// `[B, d]` encoder output.
    pub feature: Option<Var>,
    /// `[B, d]` mean of the reasoned distribution.
    pub logic_repr: Option<Var>,
    pub reasoned: Option<(Var, Var)>,
    pub item_params: Option<(Var, Var)>,
}

pub fn logic_loss_value(pos_dist: f64, neg_dist: f64, form: LogicLossForm) -> f64 {
    match form {
        LogicLossForm::Literal => log_sigmoid_scalar(pos_dist - neg_dist),
        LogicLossForm::Bounded => -log_sigmoid_scalar(neg_dist - pos_dist),
    }
}

/// Recommendation loss of one score vector (index j is item j + 1).
pub fn rec_loss(scores: &[f64], target: usize, form: RecLossForm) -> Result<f64> {
    if target == PAD || target > scores.len() {
        return Err(Error::IdOutOfRange {
            id: target,
            max: scores.len(),
        });
    }
    Ok(match form {
        RecLossForm::Bce => autograd::bce_row(scores, target - 1, PROB_CLIP),
        RecLossForm::SoftmaxCe => {
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + scores.iter().map(|s| (s - mx).exp()).sum::<f64>().ln();
            lse - scores[target - 1]
        }
    })
}

pub fn total_loss(rec: f64, logic: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        rec
    } else {
        rec + lambda * logic
    }
}
