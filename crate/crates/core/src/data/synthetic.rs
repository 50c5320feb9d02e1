//! Seeded synthetic corpora with known sequential structure.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Interaction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticRule {
    /// Next item drawn from a fixed item-to-item transition table.
    Markov,
    /// A consequent item follows whenever both items of a planted pair
    /// occurred within the recent window.
    Conjunctive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub rule: SyntheticRule,
    pub seed: u64,
    /// Markov only: every row of the transition table is one-hot.
    pub deterministic_transitions: bool,
    pub min_len: usize,
    pub max_len: usize,
    /// Conjunctive only: look-back window for the planted pairs.
    pub window: usize,
}

impl SyntheticSpec {
    pub fn new(users: usize, items: usize, rule: SyntheticRule, seed: u64) -> Self {
        SyntheticSpec {
            users,
            items,
            rule,
            seed,
            deterministic_transitions: false,
            min_len: 8,
            max_len: 16,
            window: 4,
        }
    }

    /// The planted (first, second) → consequent rules, as raw item ids.
    pub fn planted_rules(&self) -> Vec<ConjunctiveRule> {
        let layout = ConjunctiveLayout::new(self, &mut self.rng());
        layout.rules.iter().map(|r| r.named()).collect()
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConjunctiveRule {
    pub first: String,
    pub second: String,
    pub consequent: String,
}

fn item_name(i: usize) -> String {
    format!("i{i}")
}

#[derive(Clone, Copy)]
struct RuleIdx {
    first: usize,
    second: usize,
    consequent: usize,
}

impl RuleIdx {
    fn named(&self) -> ConjunctiveRule {
        ConjunctiveRule {
            first: item_name(self.first),
            second: item_name(self.second),
            consequent: item_name(self.consequent),
        }
    }
}

struct ConjunctiveLayout {
    rules: Vec<RuleIdx>,
    antecedents: Vec<usize>,
    fillers: Vec<usize>,
}

impl ConjunctiveLayout {
    fn new(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut ids: Vec<usize> = (1..=spec.items).collect();
        ids.shuffle(rng);
        let n_rules = (spec.items / 6).max(1);
        let rules: Vec<RuleIdx> = (0..n_rules)
            .map(|k| RuleIdx {
                first: ids[3 * k],
                second: ids[3 * k + 1],
                consequent: ids[3 * k + 2],
            })
            .collect();
        let antecedents = rules.iter().flat_map(|r| [r.first, r.second]).collect();
        let fillers = ids[3 * n_rules..].to_vec();
        ConjunctiveLayout {
            rules,
            antecedents,
            fillers,
        }
    }
}

/// Generates a corpus deterministically from `spec.seed`. Users are named
/// `u0..`, items `i1..=i{items}`, timestamps are per-user step indices.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Vec<Interaction> {
    assert!(spec.users >= 5 && spec.items >= 5, "synthetic corpora need >= 5 users and items");
    assert!(spec.min_len >= 1 && spec.min_len <= spec.max_len);
    let mut rng = spec.rng();
    let mut out = Vec::new();
    match spec.rule {
        SyntheticRule::Markov => {
            let table = transition_table(spec, &mut rng);
            for u in 0..spec.users {
                let len = rng.random_range(spec.min_len..=spec.max_len);
                let mut cur = rng.random_range(1..=spec.items);
                for t in 0..len {
                    out.push(Interaction::new(format!("u{u}"), item_name(cur), t as i64));
                    cur = draw(&table[cur], &mut rng);
                }
            }
        }
        SyntheticRule::Conjunctive => {
            let layout = ConjunctiveLayout::new(spec, &mut rng);
            for u in 0..spec.users {
                let len = rng.random_range(spec.min_len..=spec.max_len);
                let mut since: Vec<usize> = Vec::new();
                for t in 0..len {
                    let recent = &since[since.len().saturating_sub(spec.window)..];
                    let fired = layout
                        .rules
                        .iter()
                        .find(|r| recent.contains(&r.first) && recent.contains(&r.second));
                    let item = match fired {
                        Some(r) => {
                            since.clear();
                            r.consequent
                        }
                        None => {
                            let pick = if layout.fillers.is_empty() || rng.random_bool(0.5) {
                                *layout.antecedents.choose(&mut rng).unwrap()
                            } else {
                                *layout.fillers.choose(&mut rng).unwrap()
                            };
                            since.push(pick);
                            pick
                        }
                    };
                    out.push(Interaction::new(format!("u{u}"), item_name(item), t as i64));
                }
            }
        }
    }
    out
}

/// Row `i` lists (successor, probability) pairs for item `i`; row 0 is unused.
fn transition_table(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, f64)>> {
    let n = spec.items;
    let mut table = vec![Vec::new(); n + 1];
    if spec.deterministic_transitions {
        // a single random cycle through all items
        let mut cycle: Vec<usize> = (1..=n).collect();
        cycle.shuffle(rng);
        for k in 0..n {
            table[cycle[k]] = vec![(cycle[(k + 1) % n], 1.0)];
        }
    } else {
        let fanout = 3.min(n);
        for row in table.iter_mut().skip(1) {
            let succ: Vec<usize> = (1..=n).collect::<Vec<_>>().choose_multiple(rng, fanout).copied().collect();
            let w: Vec<f64> = (0..fanout).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = w.iter().sum();
            *row = succ.into_iter().zip(w.into_iter().map(|x| x / total)).collect();
        }
    }
    table
}

fn draw(row: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let mut u: f64 = rng.random();
    for &(item, p) in row {
        if u < p {
            return item;
        }
        u -= p;
    }
    row.last().unwrap().0
}
