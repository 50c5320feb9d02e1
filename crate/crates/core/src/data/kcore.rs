use std::collections::HashMap;

use super::Interaction;

/// Repeatedly drops users and items with fewer than `k` interactions until
/// every remaining user and item has at least `k`. File order is preserved.
pub fn k_core_filter(interactions: &[Interaction], k: usize) -> Vec<Interaction> {
    let mut alive = vec![true; interactions.len()];
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for (row, keep) in interactions.iter().zip(&alive) {
            if *keep {
                *users.entry(&row.user_id).or_default() += 1;
                *items.entry(&row.item_id).or_default() += 1;
            }
        }
        let mut changed = false;
        for (row, keep) in interactions.iter().zip(alive.iter_mut()) {
            if *keep && (users[row.user_id.as_str()] < k || items[row.item_id.as_str()] < k) {
                *keep = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    interactions
        .iter()
        .zip(&alive)
        .filter(|(_, keep)| **keep)
        .map(|(row, _)| row.clone())
        .collect()
}
