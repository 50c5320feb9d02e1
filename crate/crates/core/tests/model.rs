use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srplr_core::autograd::{Graph, ParamId};
use srplr_core::encoder::{EncoderConfig, EncoderKind};
use srplr_core::logic::{self, BetaEmbedding};
use srplr_core::model::{
    rec_loss, total_loss, Batch, LogicLossForm, ModelConfig, ModelVariant, ReasoningInput, RecLossForm, SrplrModel,
};

const ITEMS: usize = 12;
const WIDTH: usize = 5;

fn config(kind: EncoderKind, variant: ModelVariant) -> ModelConfig {
    let mut enc = match kind {
        EncoderKind::Gru => EncoderConfig::gru(4, WIDTH),
        EncoderKind::SelfAttention => EncoderConfig::self_attention(4, WIDTH),
    };
    enc.dropout = 0.0;
    let mut cfg = ModelConfig::new(ITEMS, enc);
    cfg.variant = variant;
    cfg
}

/// A small model with parameters scaled up so every path is well away from
/// linear behaviour and the gradients are not vanishingly small.
fn toy(kind: EncoderKind, variant: ModelVariant, seed: u64) -> SrplrModel {
    toy_from(config(kind, variant), seed)
}

fn toy_from(cfg: ModelConfig, seed: u64) -> SrplrModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = SrplrModel::new(cfg, &mut rng).unwrap();
    let ids: Vec<ParamId> = m.params().ids().collect();
    for id in ids {
        let name = m.params().name(id).to_string();
        if name.ends_with("_g") {
            continue;
        }
        let t = m.params_mut().get_mut(id);
        for x in t.data_mut() {
            *x = *x * 25.0 + rng.random_range(-0.2..0.2);
        }
    }
    let table = m.item_table().id();
    m.params_mut().get_mut(table).row_mut(0).fill(0.0);
    m
}

fn batch() -> Batch {
    Batch {
        histories: vec![0, 0, 3, 5, 7, 1, 2, 9, 4, 6],
        width: WIDTH,
        targets: vec![8, 11],
        reasoning_negatives: vec![10, 12, 3, 5],
        negatives_per_example: 2,
        loss_negatives: vec![2, 7],
    }
}

fn positives(b: &Batch, r: usize) -> Vec<usize> {
    b.histories[r * b.width..(r + 1) * b.width]
        .iter()
        .copied()
        .filter(|&i| i != 0)
        .collect()
}

fn assert_away_from_clamp(m: &SrplrModel) {
    let ids: Vec<usize> = (1..=ITEMS).collect();
    let bounds = m.config().projection.bounds;
    for b in m.item_betas(&ids).unwrap() {
        for j in 0..b.dim() {
            for x in [b.alpha_at(j), b.beta_at(j)] {
                assert!(x > bounds.lo * 1.2 && 1.0 / x > bounds.lo * 1.2, "parameter {x} near the clamp");
            }
        }
    }
}

#[test]
fn singleton_reasoning_is_the_item() {
    let m = toy(EncoderKind::Gru, ModelVariant::default(), 1);
    let r = m
        .reason_sequence(&ReasoningInput {
            positive_ids: vec![4],
            negative_ids: vec![],
        })
        .unwrap();
    assert_eq!(r, m.item_betas(&[4]).unwrap()[0]);
}

#[test]
fn negation_off_ignores_negatives() {
    let variant = ModelVariant {
        use_negation: false,
        ..Default::default()
    };
    let m = toy(EncoderKind::Gru, variant, 2);
    let with = m
        .reason_sequence(&ReasoningInput {
            positive_ids: vec![1, 2, 3],
            negative_ids: vec![7, 8],
        })
        .unwrap();
    let without = m
        .reason_sequence(&ReasoningInput {
            positive_ids: vec![1, 2, 3],
            negative_ids: vec![],
        })
        .unwrap();
    assert_eq!(with, without);
}

#[test]
fn uniform_weights_compose_by_hand() {
    let variant = ModelVariant {
        use_attention: false,
        ..Default::default()
    };
    let m = toy(EncoderKind::Gru, variant, 3);
    let r = m
        .reason_sequence(&ReasoningInput {
            positive_ids: vec![2],
            negative_ids: vec![9],
        })
        .unwrap();
    let v = m.item_betas(&[2, 9]).unwrap();
    for j in 0..4 {
        let a = 0.5 * (v[0].alpha_at(j) + 1.0 / v[1].alpha_at(j));
        let b = 0.5 * (v[0].beta_at(j) + 1.0 / v[1].beta_at(j));
        assert_abs_diff_eq!(r.alpha_at(j), a, epsilon = 1e-12);
        assert_abs_diff_eq!(r.beta_at(j), b, epsilon = 1e-12);
    }
}

#[test]
fn repeated_item_reasons_to_itself() {
    let m = toy(EncoderKind::Gru, ModelVariant::default(), 4);
    let r = m
        .reason_sequence(&ReasoningInput {
            positive_ids: vec![6; 5],
            negative_ids: vec![],
        })
        .unwrap();
    let item = &m.item_betas(&[6]).unwrap()[0];
    for j in 0..4 {
        assert_abs_diff_eq!(r.alpha_at(j), item.alpha_at(j), epsilon = 1e-12);
        assert_abs_diff_eq!(r.beta_at(j), item.beta_at(j), epsilon = 1e-12);
    }
}

#[test]
fn uniform_reasoning_is_permutation_invariant() {
    let variant = ModelVariant {
        use_attention: false,
        ..Default::default()
    };
    let m = toy(EncoderKind::Gru, variant, 5);
    let a = m
        .reason_sequence(&ReasoningInput {
            positive_ids: vec![1, 4, 7],
            negative_ids: vec![10, 11],
        })
        .unwrap();
    let b = m
        .reason_sequence(&ReasoningInput {
            positive_ids: vec![7, 1, 4],
            negative_ids: vec![11, 10],
        })
        .unwrap();
    for j in 0..4 {
        assert_abs_diff_eq!(a.alpha_at(j), b.alpha_at(j), epsilon = 1e-12);
        assert_abs_diff_eq!(a.beta_at(j), b.beta_at(j), epsilon = 1e-12);
    }
}

#[test]
fn empty_positives_are_rejected() {
    let m = toy(EncoderKind::Gru, ModelVariant::default(), 6);
    assert!(m
        .reason_sequence(&ReasoningInput {
            positive_ids: vec![],
            negative_ids: vec![3],
        })
        .is_err());
}

#[test]
fn graph_route_matches_value_route() {
    for variant in [
        ModelVariant::default(),
        ModelVariant {
            use_attention: false,
            ..Default::default()
        },
        ModelVariant {
            use_negation: false,
            ..Default::default()
        },
        ModelVariant {
            use_feature: false,
            ..Default::default()
        },
        ModelVariant::backbone(),
    ] {
        let m = toy(EncoderKind::SelfAttention, variant.clone(), 7);
        let b = batch();
        let mut g = Graph::new();
        let fwd = m.forward(&mut g, &b, None).unwrap();
        let scores = g.value(fwd.scores).clone();
        assert_eq!(scores.shape(), &[2, ITEMS]);
        for r in 0..2 {
            let h_f = fwd
                .feature
                .map(|v| g.value(v).row(r).to_vec())
                .unwrap_or(vec![0.0; 4]);
            let h_l = match fwd.logic_repr {
                Some(v) => {
                    let negs = b.reasoning_negatives[r * 2..r * 2 + 2].to_vec();
                    let reasoned = m
                        .reason_sequence(&ReasoningInput {
                            positive_ids: positives(&b, r),
                            negative_ids: negs,
                        })
                        .unwrap();
                    let from_graph = g.value(v).row(r).to_vec();
                    for (x, y) in from_graph.iter().zip(reasoned.mean()) {
                        assert_abs_diff_eq!(*x, y, epsilon = 1e-12);
                    }
                    from_graph
                }
                None => vec![0.0; 4],
            };
            let value = m.predict_scores(&h_f, &h_l).unwrap();
            for (x, y) in scores.row(r).iter().zip(&value) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-10);
            }
        }
    }
}

#[test]
fn logic_loss_matches_value_route() {
    for form in [LogicLossForm::Literal, LogicLossForm::Bounded] {
        let mut cfg = config(EncoderKind::Gru, ModelVariant::full(0.7));
        cfg.logic_loss = form;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = SrplrModel::new(cfg, &mut rng).unwrap();
        let b = batch();
        let mut g = Graph::new();
        let losses = m.loss(&mut g, &b, None).unwrap();
        let mut expected_logic = 0.0;
        let mut expected_rec = 0.0;
        let fwd_scores = {
            let mut g2 = Graph::new();
            let f = m.forward(&mut g2, &b, None).unwrap();
            g2.value(f.scores).clone()
        };
        for r in 0..2 {
            let reasoned = m
                .reason_sequence(&ReasoningInput {
                    positive_ids: positives(&b, r),
                    negative_ids: b.reasoning_negatives[r * 2..r * 2 + 2].to_vec(),
                })
                .unwrap();
            expected_logic += m.logic_loss(&reasoned, b.targets[r], b.loss_negatives[r]).unwrap() / 2.0;
            expected_rec += rec_loss(fwd_scores.row(r), b.targets[r], RecLossForm::Bce).unwrap() / 2.0;
        }
        assert_abs_diff_eq!(g.value(losses.logic.unwrap()).item(), expected_logic, epsilon = 1e-10);
        assert_abs_diff_eq!(g.value(losses.rec).item(), expected_rec, epsilon = 1e-10);
        assert_abs_diff_eq!(
            g.value(losses.total).item(),
            total_loss(expected_rec, expected_logic, 0.7),
            epsilon = 1e-10
        );
    }
}

#[test]
fn logic_loss_at_equal_distances() {
    let m = toy(EncoderKind::Gru, ModelVariant::default(), 9);
    // reasoning from the uniform distribution against two copies of one item
    let v = &m.item_betas(&[3]).unwrap()[0];
    let d1 = logic::kl_distance(v, &BetaEmbedding::uniform(4)).unwrap();
    let loss = srplr_core::model::logic_loss_value(d1, d1, LogicLossForm::Literal);
    assert_abs_diff_eq!(loss, -std::f64::consts::LN_2, epsilon = 1e-15);
    let far = srplr_core::model::logic_loss_value(0.0, 50.0, LogicLossForm::Literal);
    assert!(far < -49.0);
    assert!(m.logic_loss(v, 3, 3).is_err());
}

#[test]
fn score_shape_argmax_and_feature_invariance() {
    let mut m = toy(EncoderKind::Gru, ModelVariant::backbone(), 10);
    let table = m.item_table().id();
    // orthonormal rows for items 1..4
    {
        let t = m.params_mut().get_mut(table);
        for i in 1..=ITEMS {
            t.row_mut(i).fill(0.0);
            if i <= 4 {
                t.row_mut(i)[i - 1] = 1.0;
            }
        }
    }
    let scores = m.predict_scores(&[0.0, 0.0, 1.0, 0.0], &[0.0; 4]).unwrap();
    assert_eq!(scores.len(), ITEMS);
    let best = (0..ITEMS).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
    assert_eq!(best + 1, 3);

    let variant = ModelVariant {
        use_feature: false,
        ..Default::default()
    };
    let mut m = toy(EncoderKind::Gru, variant, 11);
    let h_l = [0.3, 0.1, 0.9, 0.5];
    let a = m.predict_scores(&[1.0, 2.0, 3.0, 4.0], &h_l).unwrap();
    let b = m.predict_scores(&[-5.0, 0.0, 0.0, 7.0], &h_l).unwrap();
    assert_eq!(a, b);
    // changing encoder weights does not move graph scores either
    let bt = batch();
    let mut g = Graph::new();
    let s1 = {
        let f = m.forward(&mut g, &bt, None).unwrap();
        g.value(f.scores).clone()
    };
    let enc_ids: Vec<ParamId> = m
        .params()
        .ids()
        .filter(|&id| m.params().name(id).starts_with("encoder."))
        .collect();
    for id in enc_ids {
        for x in m.params_mut().get_mut(id).data_mut() {
            *x += 0.5;
        }
    }
    let mut g = Graph::new();
    let f = m.forward(&mut g, &bt, None).unwrap();
    assert_eq!(g.value(f.scores), &s1);
}

#[test]
fn rec_loss_values() {
    assert_abs_diff_eq!(
        rec_loss(&[0.0; 4], 2, RecLossForm::Bce).unwrap(),
        4.0 * std::f64::consts::LN_2,
        epsilon = 1e-12
    );
    let perfect = rec_loss(&[-1e3, 1e3, -1e3], 2, RecLossForm::Bce).unwrap();
    assert!(perfect < 1e-6);
    assert!(rec_loss(&[0.0; 4], 0, RecLossForm::Bce).is_err());
    assert!(rec_loss(&[0.0; 4], 5, RecLossForm::Bce).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let scores: Vec<f64> = (0..30).map(|_| rng.random_range(-8.0..8.0)).collect();
        let target = rng.random_range(1..=30);
        let mut oracle = 0.0;
        for (j, &s) in scores.iter().enumerate() {
            let p = (1.0 / (1.0 + (-s).exp())).clamp(1e-8, 1.0 - 1e-8);
            oracle -= if j + 1 == target { p.ln() } else { (1.0 - p).ln() };
        }
        assert_abs_diff_eq!(rec_loss(&scores, target, RecLossForm::Bce).unwrap(), oracle, epsilon = 1e-10);
    }
}

#[test]
fn total_loss_arithmetic() {
    assert_eq!(total_loss(2.0, -0.5, 0.0), 2.0);
    assert_eq!(total_loss(2.0, -0.5, 1.0), 1.5);
}

#[test]
fn logic_parameters_get_gradient_at_zero_lambda() {
    let m = toy(EncoderKind::Gru, ModelVariant::full(0.0), 13);
    let b = batch();
    let mut g = Graph::new();
    let losses = m.loss(&mut g, &b, None).unwrap();
    let grads = g.backward(losses.total, m.params());
    let norm: f64 = m
        .logic_param_ids()
        .iter()
        .filter_map(|&id| grads.get(id))
        .map(|t| t.norm())
        .sum();
    assert!(norm > 1e-6, "logic head gradient {norm}");
}

#[test]
fn checkpoint_round_trip_and_refusals() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let m = toy(EncoderKind::SelfAttention, ModelVariant::default(), 14);
    m.save(&path, "abc", Some("h1")).unwrap();
    let back = SrplrModel::load(&path, Some(m.config()), "abc").unwrap();
    let b = batch();
    let (mut g1, mut g2) = (Graph::new(), Graph::new());
    let s1 = m.forward(&mut g1, &b, None).unwrap().scores;
    let s2 = back.forward(&mut g2, &b, None).unwrap().scores;
    assert_eq!(g1.value(s1), g2.value(s2));
    assert!(SrplrModel::load(&path, Some(m.config()), "other").is_err());
    let mut other = m.config().clone();
    other.encoder.layers = 1;
    assert!(SrplrModel::load(&path, Some(&other), "abc").is_err());
}

fn finite_difference_check(kind: EncoderKind, variant: ModelVariant, form: LogicLossForm, seed: u64) {
    let mut cfg = config(kind, variant);
    cfg.logic_loss = form;
    let mut m = toy_from(cfg, seed);
    assert_away_from_clamp(&m);
    let b = batch();
    let eval = |m: &SrplrModel| {
        let mut g = Graph::new();
        let l = m.loss(&mut g, &b, None).unwrap();
        g.value(l.total).item()
    };
    let mut g = Graph::new();
    let losses = m.loss(&mut g, &b, None).unwrap();
    let grads = g.backward(losses.total, m.params());
    let step = 1e-5;
    let ids: Vec<ParamId> = m.params().ids().collect();
    let mut checked = 0;
    for id in ids {
        let n = m.params().get(id).len();
        let analytic = grads.get(id).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; n]);
        for k in (0..n).step_by(3) {
            let orig = m.params().get(id).data()[k];
            m.params_mut().get_mut(id).data_mut()[k] = orig + step;
            let up = eval(&m);
            m.params_mut().get_mut(id).data_mut()[k] = orig - step;
            let down = eval(&m);
            m.params_mut().get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let scale = numeric.abs().max(analytic[k].abs());
            if scale > 1e-5 {
                let rel = (numeric - analytic[k]).abs() / scale;
                assert!(
                    rel < 1e-3,
                    "{} [{k}]: numeric {numeric} analytic {}",
                    m.params().name(id),
                    analytic[k]
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 50, "only {checked} coordinates checked");
}

#[test]
fn end_to_end_gradients_self_attention() {
    finite_difference_check(EncoderKind::SelfAttention, ModelVariant::full(0.5), LogicLossForm::Literal, 21);
}

#[test]
fn end_to_end_gradients_gru() {
    finite_difference_check(EncoderKind::Gru, ModelVariant::full(1.0), LogicLossForm::Literal, 22);
}

#[test]
fn end_to_end_gradients_bounded_form_without_attention() {
    let variant = ModelVariant {
        use_attention: false,
        ..ModelVariant::full(0.3)
    };
    finite_difference_check(EncoderKind::Gru, variant, LogicLossForm::Bounded, 23);
}
