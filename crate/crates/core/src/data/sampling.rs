use rand::seq::SliceRandom;
use rand::Rng;

use super::{SequenceExample, PAD};
use crate::error::{Error, Result};

/// Upper bound on reasoning negatives per example.
pub const MAX_LOGIC_NEGATIVES: usize = 10;

/// Draws `count` distinct items uniformly from `1..=item_count` minus `excluded`.
pub fn sample_excluding<R: Rng + ?Sized>(
    excluded: &[usize],
    count: usize,
    item_count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut banned = excluded.to_vec();
    banned.retain(|&i| i != PAD && i <= item_count);
    banned.sort_unstable();
    banned.dedup();
    let eligible = item_count - banned.len();
    if count > eligible {
        return Err(Error::InfeasibleSampling {
            requested: count,
            eligible,
        });
    }

    if eligible >= 4 * count && eligible * 2 >= item_count {
        // rejection sampling; expected draws stay small in this regime
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let cand = rng.random_range(1..=item_count);
            if banned.binary_search(&cand).is_err() && !out.contains(&cand) {
                out.push(cand);
            }
        }
        Ok(out)
    } else {
        let mut pool: Vec<usize> = (1..=item_count)
            .filter(|i| banned.binary_search(i).is_err())
            .collect();
        let (chosen, _) = pool.partial_shuffle(rng, count);
        Ok(chosen.to_vec())
    }
}

/// Samples reasoning negatives for `example`: distinct items outside its
/// history and target.
pub fn sample_logic_negatives<R: Rng + ?Sized>(
    example: &SequenceExample,
    count: usize,
    item_count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if count > MAX_LOGIC_NEGATIVES {
        return Err(Error::Invalid(format!(
            "logic negative count {count} exceeds {MAX_LOGIC_NEGATIVES}"
        )));
    }
    let mut excluded: Vec<usize> = example.items().collect();
    excluded.push(example.target);
    sample_excluding(&excluded, count, item_count, rng)
}

/// Replaces each history item with padding with probability `r`. If every
/// item would be masked the most recent one is kept.
pub fn mask_history<R: Rng + ?Sized>(example: &SequenceExample, r: f64, rng: &mut R) -> SequenceExample {
    let mut out = example.clone();
    if r <= 0.0 {
        return out;
    }
    let r = r.min(1.0);
    let last = out.history.iter().rposition(|&i| i != PAD);
    for slot in out.history.iter_mut() {
        if *slot != PAD && rng.random_bool(r) {
            *slot = PAD;
        }
    }
    if out.history.iter().all(|&i| i == PAD) {
        if let Some(pos) = last {
            out.history[pos] = example.history[pos];
        }
    }
    out.history_len = out.history.iter().filter(|&&i| i != PAD).count();
    out
}
