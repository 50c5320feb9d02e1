//! Acceptance gate. Each test prints exactly one status line straight to
//! stderr (bypassing the test harness capture) and then asserts.

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srplr_core::autograd::{Graph, ParamId, ParamStore};
use srplr_core::data::{
    build_splits, generate_synthetic, k_core_filter, load_interactions_with, read_split, Column, DatasetStats, Format,
    LoadOptions, SyntheticRule, SyntheticSpec,
};
use srplr_core::encoder::{EncoderConfig, EncoderKind};
use srplr_core::eval::{evaluate_full_rank, hit_at, metrics_from_ranks, ndcg_at, rank_of, EvalProtocol, Metric};
use srplr_core::experiment::run_experiment;
use srplr_core::logic::{self, attention_weights, conjoin, disjoin, kl_distance, negate, AttentionNet, BetaEmbedding, ClampBounds};
use srplr_core::model::{Batch, LogicLossForm, ModelConfig, ModelVariant, SrplrModel};
use srplr_core::special::beta_pdf;
use srplr_core::tensor::Tensor;
use srplr_core::train::{train, TrainConfig};
use srplr_core::ExperimentConfig;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Status {
    Pass,
    Fail,
    SoftPass,
    SoftFail,
    Skipped,
}

fn report(id: &str, name: &str, status: Status, detail: &str) {
    let tag = match status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::SoftPass => "SOFT-PASS",
        Status::SoftFail => "SOFT-FAIL",
        Status::Skipped => "SKIPPED",
    };
    let line = format!("[acceptance {id}] {tag:<9} {name}: {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn gate(id: &str, name: &str, ok: bool, detail: String, limit: Duration, elapsed: Duration) {
    let in_time = elapsed <= limit;
    let detail = format!("{detail}; {:.1}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs());
    report(id, name, if ok && in_time { Status::Pass } else { Status::Fail }, &detail);
    assert!(ok && in_time, "criterion {id} failed: {detail}");
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn random_beta<R: Rng>(rng: &mut R, d: usize, lo: f64, hi: f64) -> BetaEmbedding {
    let a = (0..d).map(|_| log_uniform(rng, lo, hi)).collect();
    let b = (0..d).map(|_| log_uniform(rng, lo, hi)).collect();
    BetaEmbedding::new(a, b).unwrap()
}

fn bits(v: &BetaEmbedding) -> Vec<u64> {
    v.alpha().iter().chain(&v.beta()).map(|x| x.to_bits()).collect()
}

#[test]
fn criterion_1_operator_properties() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let bounds = ClampBounds::default();
    let d = 8;

    let mut involution_ok = 0;
    for _ in 0..1000 {
        let v = random_beta(&mut rng, d, 1e-3, 1e3);
        let n = v.negate();
        let reciprocal = (0..d).all(|j| n.alpha_at(j) == 1.0 / v.alpha_at(j) && n.beta_at(j) == 1.0 / v.beta_at(j));
        if reciprocal && bits(&n.negate()) == bits(&v) {
            involution_ok += 1;
        }
    }

    let mut idem_err: f64 = 0.0;
    let mut col_err: f64 = 0.0;
    let mut demorgan_ok = 0;
    let cases = 200;
    for c in 0..cases {
        let net = AttentionNet::init(d, 0.5, &mut rng);
        let v = random_beta(&mut rng, d, bounds.lo, 1.0 / bounds.lo);
        let copies = vec![v.clone(); 2 + c % 5];
        let w = attention_weights(&copies, &net).unwrap();
        let out = conjoin(&copies, &w, bounds).unwrap();
        for j in 0..d {
            idem_err = idem_err
                .max((out.alpha_at(j) - v.alpha_at(j)).abs())
                .max((out.beta_at(j) - v.beta_at(j)).abs());
        }

        let participants: Vec<BetaEmbedding> =
            (0..1 + c % 6).map(|_| random_beta(&mut rng, d, bounds.lo, 1.0 / bounds.lo)).collect();
        let w = attention_weights(&participants, &net).unwrap();
        for j in 0..d {
            col_err = col_err.max((w.iter().map(|row| row[j]).sum::<f64>() - 1.0).abs());
        }

        let negated: Vec<BetaEmbedding> = participants.iter().map(|p| negate(p, bounds)).collect();
        let wn = attention_weights(&negated, &net).unwrap();
        let by_hand = negate(&conjoin(&negated, &wn, bounds).unwrap(), bounds);
        if bits(&disjoin(&participants, &net, bounds).unwrap()) == bits(&by_hand) {
            demorgan_ok += 1;
        }
    }

    let ok = involution_ok == 1000 && idem_err <= 1e-6 && col_err <= 1e-6 && demorgan_ok == cases;
    gate(
        "1",
        "operator properties",
        ok,
        format!(
            "involution exact {involution_ok}/1000, idempotence max err {idem_err:.2e}, \
             weight column max err {col_err:.2e}, De Morgan bit-exact {demorgan_ok}/{cases}"
        ),
        Duration::from_secs(60),
        start.elapsed(),
    );
}

/// Integrates `f(ln x, ln(1 - x))` over (0, 1) by the trapezoid rule after
/// the double-exponential substitution x = (1 + tanh(π/2 · sinh t)) / 2.
/// `f` returns the log of the integrand; the result is the plain integral.
fn de_quadrature(f: impl Fn(f64, f64) -> (f64, f64)) -> f64 {
    let h = 1.0 / 64.0;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let softplus = |z: f64| if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    let mut total = 0.0;
    for k in -(7 * 64)..=(7 * 64) {
        let t = k as f64 * h;
        let u = half_pi * t.sinh();
        let ln_x = -softplus(-2.0 * u);
        let ln_1mx = -softplus(2.0 * u);
        // dx/dt = 2 x (1 - x) · π/2 · cosh t
        let ln_jac = std::f64::consts::LN_2 + ln_x + ln_1mx + (half_pi * t.cosh()).ln();
        let (ln_mag, factor) = f(ln_x, ln_1mx);
        total += (ln_mag + ln_jac).exp() * factor;
    }
    total * h
}

fn ln_unnormalized(a: f64, b: f64, ln_x: f64, ln_1mx: f64) -> f64 {
    (a - 1.0) * ln_x + (b - 1.0) * ln_1mx
}

fn kl_by_quadrature(p: (f64, f64), q: (f64, f64)) -> f64 {
    let ln_zp = de_quadrature(|lx, l1| (ln_unnormalized(p.0, p.1, lx, l1), 1.0)).ln();
    let ln_zq = de_quadrature(|lx, l1| (ln_unnormalized(q.0, q.1, lx, l1), 1.0)).ln();
    de_quadrature(|lx, l1| {
        let ln_p = ln_unnormalized(p.0, p.1, lx, l1) - ln_zp;
        let ln_q = ln_unnormalized(q.0, q.1, lx, l1) - ln_zq;
        (ln_p, ln_p - ln_q)
    })
}

fn beta1(a: f64, b: f64) -> BetaEmbedding {
    BetaEmbedding::new(vec![a], vec![b]).unwrap()
}

#[test]
fn criterion_2_kl_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut self_worst: f64 = 0.0;
    for _ in 0..100 {
        let p = (rng.random_range(0.1..10.0), rng.random_range(0.1..10.0));
        let q = (rng.random_range(0.1..10.0), rng.random_range(0.1..10.0));
        let closed = kl_distance(&beta1(p.0, p.1), &beta1(q.0, q.1)).unwrap();
        worst = worst.max((closed - kl_by_quadrature(p, q)).abs());
        self_worst = self_worst.max(kl_distance(&beta1(p.0, p.1), &beta1(p.0, p.1)).unwrap().abs());
    }
    // Beta(1,1) against Beta(2,2): 2 - ln 6 one way, ln 6 - 5/3 the other
    let uni_tri = kl_distance(&beta1(1.0, 1.0), &beta1(2.0, 2.0)).unwrap();
    let tri_uni = kl_distance(&beta1(2.0, 2.0), &beta1(1.0, 1.0)).unwrap();
    let anchors = (uni_tri - (2.0 - 6f64.ln())).abs() < 1e-12
        && (tri_uni - (6f64.ln() - 5.0 / 3.0)).abs() < 1e-12
        && (uni_tri - 0.2082).abs() < 1e-4
        && (tri_uni - 0.1251).abs() < 1e-4;
    let ok = worst <= 1e-4 && self_worst < 1e-9 && anchors;
    gate(
        "2",
        "KL closed form vs quadrature",
        ok,
        format!(
            "100 pairs max abs err {worst:.2e}, KL(p,p) max {self_worst:.1e}, \
             anchors {uni_tri:.4}/{tri_uni:.4}"
        ),
        Duration::from_secs(60),
        start.elapsed(),
    );
}

#[test]
fn criterion_3_density_product() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let bounds = ClampBounds::default();
    let n_grid = 10_000;
    let grid: Vec<f64> = (0..n_grid).map(|i| (i as f64 + 0.5) / n_grid as f64).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..=5);
        let parts: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(1.0..10.0), rng.random_range(1.0..10.0)))
            .collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();

        let ln_product: Vec<f64> = grid
            .iter()
            .map(|&x| {
                parts
                    .iter()
                    .zip(&weights)
                    .map(|(&(a, b), w)| w * ln_unnormalized(a, b, x.ln(), (1.0 - x).ln()))
                    .sum()
            })
            .collect();
        let z: f64 = ln_product.iter().map(|l| l.exp()).sum::<f64>() / n_grid as f64;

        let embeddings: Vec<BetaEmbedding> = parts.iter().map(|&(a, b)| beta1(a, b)).collect();
        let w_cols: Vec<Vec<f64>> = weights.iter().map(|&w| vec![w]).collect();
        let out = conjoin(&embeddings, &w_cols, bounds).unwrap();
        for (x, l) in grid.iter().zip(&ln_product) {
            worst = worst.max((l.exp() / z - beta_pdf(*x, out.alpha_at(0), out.beta_at(0))).abs());
        }
    }
    gate(
        "3",
        "density product equals conjoined density",
        worst < 1e-3,
        format!("50 cases on a 10^4-point grid, max abs err {worst:.2e}"),
        Duration::from_secs(60),
        start.elapsed(),
    );
}

/// Largest relative error between analytic and central-difference gradients,
/// with the number of coordinates compared.
struct GradCheck {
    worst: f64,
    checked: usize,
}

fn fd_check(store: &mut ParamStore, step: f64, f: impl Fn(&mut Graph, &ParamStore) -> srplr_core::autograd::Var) -> GradCheck {
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out, store);
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let v = f(&mut g, s);
        g.value(v).item()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut res = GradCheck { worst: 0.0, checked: 0 };
    for id in ids {
        let n = store.get(id).len();
        let analytic = grads.get(id).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; n]);
        for k in 0..n {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + step;
            let up = eval(store);
            store.get_mut(id).data_mut()[k] = orig - step;
            let down = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let scale = numeric.abs().max(analytic[k].abs());
            if scale > 1e-5 {
                res.worst = res.worst.max((numeric - analytic[k]).abs() / scale);
                res.checked += 1;
            }
        }
    }
    res
}

const TOY_ITEMS: usize = 12;
const TOY_WIDTH: usize = 5;

fn toy_model(kind: EncoderKind, form: LogicLossForm, seed: u64) -> SrplrModel {
    let mut enc = match kind {
        EncoderKind::Gru => EncoderConfig::gru(4, TOY_WIDTH),
        EncoderKind::SelfAttention => EncoderConfig::self_attention(4, TOY_WIDTH),
    };
    enc.dropout = 0.0;
    let mut cfg = ModelConfig::new(TOY_ITEMS, enc);
    cfg.variant = ModelVariant::full(0.5);
    cfg.logic_loss = form;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = SrplrModel::new(cfg, &mut rng).unwrap();
    // spread parameters out so the toy is far from its linear regime
    let ids: Vec<ParamId> = m.params().ids().collect();
    for id in ids {
        if m.params().name(id).ends_with("_g") {
            continue;
        }
        for x in m.params_mut().get_mut(id).data_mut() {
            *x = *x * 25.0 + rng.random_range(-0.2..0.2);
        }
    }
    let table = m.item_table().id();
    m.params_mut().get_mut(table).row_mut(0).fill(0.0);
    m
}

fn toy_batch() -> Batch {
    Batch {
        histories: vec![0, 0, 3, 5, 7, 1, 2, 9, 4, 6],
        width: TOY_WIDTH,
        targets: vec![8, 11],
        reasoning_negatives: vec![10, 12, 3, 5],
        negatives_per_example: 2,
        loss_negatives: vec![2, 7],
    }
}

fn away_from_clamp(m: &SrplrModel) -> bool {
    let ids: Vec<usize> = (1..=TOY_ITEMS).collect();
    let lo = m.config().projection.bounds.lo;
    m.item_betas(&ids).unwrap().iter().all(|b| {
        (0..b.dim()).all(|j| [b.alpha_at(j), b.beta_at(j)].iter().all(|&x| x > lo * 1.2 && 1.0 / x > lo * 1.2))
    })
}

fn model_check(m: &mut SrplrModel, step: f64, logic_only: bool) -> GradCheck {
    let b = toy_batch();
    let eval = |m: &SrplrModel| {
        let mut g = Graph::new();
        let l = m.loss(&mut g, &b, None).unwrap();
        let v = if logic_only { l.logic.unwrap() } else { l.total };
        g.value(v).item()
    };
    let mut g = Graph::new();
    let l = m.loss(&mut g, &b, None).unwrap();
    let grads = g.backward(if logic_only { l.logic.unwrap() } else { l.total }, m.params());
    let ids: Vec<ParamId> = m.params().ids().collect();
    let mut res = GradCheck { worst: 0.0, checked: 0 };
    for id in ids {
        let n = m.params().get(id).len();
        let analytic = grads.get(id).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; n]);
        for k in (0..n).step_by(2) {
            let orig = m.params().get(id).data()[k];
            m.params_mut().get_mut(id).data_mut()[k] = orig + step;
            let up = eval(m);
            m.params_mut().get_mut(id).data_mut()[k] = orig - step;
            let down = eval(m);
            m.params_mut().get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let scale = numeric.abs().max(analytic[k].abs());
            if scale > 1e-5 {
                res.worst = res.worst.max((numeric - analytic[k]).abs() / scale);
                res.checked += 1;
            }
        }
    }
    res
}

#[test]
fn criterion_4_gradients() {
    let start = Instant::now();
    let step = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut store = ParamStore::new();
    for name in ["target_alpha", "target_beta", "seq_alpha", "seq_beta"] {
        let data = (0..4).map(|_| rng.random_range(0.2..5.0)).collect();
        store.add(name, Tensor::new(vec![1, 4], data));
    }
    let kl = fd_check(&mut store, step, |g, s| {
        let p: Vec<_> = s.ids().map(|id| g.param(s, id)).collect();
        let d = logic::graph::kl_distance(g, (p[0], p[1]), (p[2], p[3]));
        g.sum(d)
    });

    let mut parts = vec![format!("kl_distance max rel {:.1e} over {}", kl.worst, kl.checked)];
    let mut ok = kl.worst < 1e-3 && kl.checked == 16;
    for (kind, form, seed) in [
        (EncoderKind::SelfAttention, LogicLossForm::Literal, 21),
        (EncoderKind::Gru, LogicLossForm::Bounded, 22),
    ] {
        let mut m = toy_model(kind, form, seed);
        ok &= away_from_clamp(&m);
        let logic = model_check(&mut m, step, true);
        let total = model_check(&mut m, step, false);
        ok &= logic.worst < 1e-3 && total.worst < 1e-3 && logic.checked > 20 && total.checked > 100;
        parts.push(format!(
            "{kind:?}/{form:?} logic_loss {:.1e} over {}, total_loss {:.1e} over {}",
            logic.worst, logic.checked, total.worst, total.checked
        ));
    }
    gate(
        "4",
        "analytic vs finite-difference gradients",
        ok,
        parts.join("; "),
        Duration::from_secs(120),
        start.elapsed(),
    );
}

#[test]
fn criterion_5_overfit() {
    let start = Instant::now();
    let mut spec = SyntheticSpec::new(50, 20, SyntheticRule::Markov, 7);
    spec.deterministic_transitions = true;
    let split = build_splits(&generate_synthetic(&spec), 20);

    let mut enc = EncoderConfig::self_attention(32, 20);
    enc.dropout = 0.0;
    let mut cfg = ModelConfig::new(split.item_count, enc);
    cfg.variant = ModelVariant::full(0.1);
    cfg.logic_loss = LogicLossForm::Bounded;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = SrplrModel::new(cfg, &mut rng).unwrap();

    let protocol = EvalProtocol {
        ks: vec![1],
        exclude_history: false,
    };
    let mut epochs = 0;
    let mut hit1 = 0.0;
    while epochs < 200 {
        let tc = TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.005,
            eval_every: 0,
            seed: epochs as u64,
            ..Default::default()
        };
        train(&mut model, &split, &tc, None).unwrap();
        epochs += 10;
        hit1 = evaluate_full_rank(&model, &split.train, &protocol, 256).unwrap().hit[&1];
        if hit1 >= 0.9 {
            break;
        }
    }
    gate(
        "5",
        "overfit deterministic markov corpus",
        hit1 >= 0.9,
        format!("train HIT@1 {hit1:.3} after {epochs} epochs ({} examples)", split.train.len()),
        Duration::from_secs(600),
        start.elapsed(),
    );
}

#[test]
fn criterion_6_conjunctive_direction() {
    let start = Instant::now();
    let spec = SyntheticSpec::new(200, 30, SyntheticRule::Conjunctive, 3);
    let split = build_splits(&generate_synthetic(&spec), 20);
    let mut means = [0.0; 2];
    let mut per_seed = vec![];
    for seed in 0..3u64 {
        let mut row = [0.0; 2];
        for (slot, variant) in [ModelVariant::full(0.1), ModelVariant::backbone()].into_iter().enumerate() {
            let mut enc = EncoderConfig::self_attention(32, 20);
            enc.dropout = 0.2;
            let mut cfg = ModelConfig::new(split.item_count, enc);
            cfg.logic_loss = LogicLossForm::Bounded;
            cfg.variant = variant;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = SrplrModel::new(cfg, &mut rng).unwrap();
            let tc = TrainConfig {
                epochs: 40,
                batch_size: 64,
                learning_rate: 0.005,
                eval_every: 0,
                seed,
                ..Default::default()
            };
            train(&mut model, &split, &tc, None).unwrap();
            let m = evaluate_full_rank(&model, &split.test, &tc.protocol(), 256).unwrap();
            row[slot] = m.hit[&10];
            means[slot] += m.hit[&10] / 3.0;
        }
        per_seed.push(format!("{:.3}/{:.3}", row[0], row[1]));
    }
    let elapsed = start.elapsed();
    let pass = means[0] >= means[1] && elapsed <= Duration::from_secs(1800);
    let detail = format!(
        "mean test HIT@10 full {:.4} vs backbone {:.4} (per seed full/backbone {}); {:.1}s (limit 1800s)",
        means[0],
        means[1],
        per_seed.join(", "),
        elapsed.as_secs_f64()
    );
    // soft criterion: a miss is reported, not asserted
    report(
        "6",
        "conjunctive corpus full model vs backbone",
        if pass { Status::SoftPass } else { Status::SoftFail },
        &detail,
    );
}

fn naive_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.iter().position(|&i| i == target).unwrap() + 1
}

#[test]
fn criterion_7_metrics() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let ks = [1, 5, 10, 20];

    let mut rank_mismatch = 0;
    let mut ranks = vec![];
    for _ in 0..100 {
        // coarse scores so ties are common
        let scores: Vec<f64> = (0..60).map(|_| (rng.random_range(0.0..1.0f64) * 20.0).round()).collect();
        let target = rng.random_range(0..scores.len());
        let fast = rank_of(&scores, target, None);
        let slow = naive_rank(&scores, target);
        rank_mismatch += usize::from(fast != slow);
        ranks.push(slow);
    }
    let m = metrics_from_ranks(&ranks, &ks);
    let mut worst: f64 = 0.0;
    for &k in &ks {
        let hit = ranks.iter().filter(|&&r| r <= k).count() as f64 / 100.0;
        let ndcg = ranks
            .iter()
            .map(|&r| if r <= k { std::f64::consts::LN_2 / ((r + 1) as f64).ln() } else { 0.0 })
            .sum::<f64>()
            / 100.0;
        worst = worst.max((m.hit[&k] - hit).abs()).max((m.ndcg[&k] - ndcg).abs());
    }

    // the same over a real model's full-rank scores
    let spec = SyntheticSpec::new(100, 15, SyntheticRule::Markov, 9);
    let split = build_splits(&generate_synthetic(&spec), 10);
    let mut enc = EncoderConfig::self_attention(8, 10);
    enc.dropout = 0.0;
    let model = SrplrModel::new(ModelConfig::new(split.item_count, enc), &mut rng).unwrap();
    let examples = &split.test[..100];
    let protocol = EvalProtocol {
        ks: ks.to_vec(),
        exclude_history: false,
    };
    let fast = evaluate_full_rank(&model, examples, &protocol, 16).unwrap();
    let refs: Vec<_> = examples.iter().collect();
    let scores = model.score_batch(&refs).unwrap();
    let model_ranks: Vec<usize> = examples
        .iter()
        .enumerate()
        .map(|(r, ex)| naive_rank(scores.row(r), ex.target - 1))
        .collect();
    for &k in &ks {
        let hit = model_ranks.iter().filter(|&&r| r <= k).count() as f64 / 100.0;
        let ndcg = model_ranks
            .iter()
            .map(|&r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 })
            .sum::<f64>()
            / 100.0;
        worst = worst.max((fast.hit[&k] - hit).abs()).max((fast.ndcg[&k] - ndcg).abs());
    }

    let anchors = hit_at(1, 5) == 1.0
        && ndcg_at(1, 5) == 1.0
        && (ndcg_at(3, 5) - 0.5).abs() < 1e-15
        && hit_at(11, 10) == 0.0
        && ndcg_at(11, 10) == 0.0
        && rank_of(&[0.1, 0.9, 0.5, 0.5], 2, None) == 2
        && rank_of(&[0.1, 0.9, 0.5, 0.5], 3, None) == 3;
    gate(
        "7",
        "HIT/NDCG vs naive reimplementation",
        rank_mismatch == 0 && worst <= 1e-10 && anchors,
        format!("rank mismatches {rank_mismatch}/100, max metric err {worst:.1e}, anchors ok {anchors}"),
        Duration::from_secs(60),
        start.elapsed(),
    );
}

/// Raw Amazon-style rating files: `user,item,rating,timestamp`, no header.
fn raw_options() -> LoadOptions {
    LoadOptions {
        format: Format::Csv,
        delimiter: None,
        has_header: false,
        user_col: Column::Index(0),
        item_col: Column::Index(1),
        time_col: Some(Column::Index(3)),
    }
}

#[test]
fn criterion_8_preprocessing_reproduction() {
    let start = Instant::now();
    let expected = [
        ("SRPLR_RAW_SPORTS", "Sports", (35_598, 18_357, 296_337)),
        ("SRPLR_RAW_TOYS", "Toys", (19_413, 11_925, 167_597)),
        ("SRPLR_RAW_YELP", "Yelp", (30_499, 20_068, 317_182)),
    ];
    let mut parts = vec![];
    let mut all_ok = true;
    let mut any = false;
    for (var, name, want) in expected {
        let Some(path) = std::env::var_os(var).map(PathBuf::from) else {
            parts.push(format!("{name} skipped ({var} unset)"));
            continue;
        };
        any = true;
        let rows = load_interactions_with(&path, &raw_options()).unwrap();
        let s = DatasetStats::from_interactions(&k_core_filter(&rows, 5));
        let got = (s.users, s.items, s.interactions);
        all_ok &= got == want;
        parts.push(format!("{name} {got:?} expected {want:?}"));
    }
    if !any {
        report("8", "5-core statistics", Status::Skipped, &parts.join("; "));
        return;
    }
    gate(
        "8",
        "5-core statistics",
        all_ok,
        parts.join("; "),
        Duration::from_secs(3600),
        start.elapsed(),
    );
}

#[test]
#[ignore = "extended: needs a preprocessed Toys split in SRPLR_TOYS_SPLIT and hours of CPU"]
fn criterion_9_toys_reproduction() {
    let Some(dir) = std::env::var_os("SRPLR_TOYS_SPLIT") else {
        report("9", "Toys reproduction", Status::Skipped, "SRPLR_TOYS_SPLIT unset");
        return;
    };
    let split = read_split(&PathBuf::from(&dir)).unwrap();
    let base = ExperimentConfig {
        dataset: dir.to_string_lossy().into_owned(),
        backbone: EncoderKind::SelfAttention,
        dim: 64,
        max_len: split.max_len,
        epochs: 50,
        batch_size: 2048,
        learning_rate: 0.002,
        logic_loss_form: LogicLossForm::Bounded,
        ..Default::default()
    };
    let out = tempfile::tempdir().unwrap();
    let full = run_experiment(&base, &split, &out.path().join("full"), false).unwrap();
    let mut backbone_cfg = base.clone();
    backbone_cfg.set_variant(&ModelVariant::backbone());
    let backbone = run_experiment(&backbone_cfg, &split, &out.path().join("backbone"), false).unwrap();

    let hit10 = full.get("test", Metric::Hit, 10).unwrap();
    let within = (hit10 - 0.0919).abs() <= 0.2 * 0.0919;
    let mut wins = 0;
    for k in [5, 10] {
        for metric in [Metric::Hit, Metric::Ndcg] {
            wins += usize::from(full.get("test", metric, k) > backbone.get("test", metric, k));
        }
    }
    let ok = within && wins >= 3;
    report(
        "9",
        "Toys reproduction",
        if ok { Status::Pass } else { Status::Fail },
        &format!("test HIT@10 {hit10:.4} (target 0.0919 within 20%), beats backbone on {wins}/4 metrics"),
    );
    assert!(ok);
}
