//! Identity-balanced batch sampling: each batch holds `p` distinct
//! identities with `k` instances each.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One epoch of batches; each batch is a list of dataset indices.
pub type EpochPlan = Vec<Vec<usize>>;

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Draw `k` indices for one identity. Samples without replacement while the
/// pool lasts, then reuses members for identities with fewer than `k` images.
fn draw_k(pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = pool.to_vec();
    shuffle(&mut order, rng);
    if order.len() >= k {
        order.truncate(k);
        return order;
    }
    let mut out = order;
    while out.len() < k {
        out.push(pool[rng.gen_range(0..pool.len())]);
    }
    out
}

/// Build the batch plan for one epoch of PK sampling.
///
/// `ids[i]` is the identity label of dataset item `i`. Every identity
/// appears in at least one batch, every batch holds exactly `p` distinct
/// identities, and the plan is a pure function of `(seed, epoch)`.
pub fn pk_epoch(ids: &[usize], p: usize, k: usize, seed: u64, epoch: u64) -> Result<EpochPlan> {
    if p == 0 || k == 0 {
        return Err(Error::Config("sampler needs p >= 1 and k >= 1".into()));
    }
    let mut distinct: Vec<usize> = Vec::new();
    for &y in ids {
        if !distinct.contains(&y) {
            distinct.push(y);
        }
    }
    if distinct.len() < p {
        return Err(Error::Config(format!(
            "need at least {} identities for p={}, found {}",
            p,
            p,
            distinct.len()
        )));
    }
    let members = |y: usize| -> Vec<usize> {
        ids.iter().enumerate().filter(|(_, &v)| v == y).map(|(i, _)| i).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order = distinct.clone();
    shuffle(&mut order, &mut rng);

    // pad the tail so the final batch still has p distinct identities
    let remainder = order.len() % p;
    if remainder != 0 {
        let deficit = p - remainder;
        let tail: Vec<usize> = order[order.len() - remainder..].to_vec();
        let mut fillers: Vec<usize> =
            order[..order.len() - remainder].iter().copied().filter(|y| !tail.contains(y)).collect();
        shuffle(&mut fillers, &mut rng);
        order.extend(fillers.into_iter().take(deficit));
    }

    let mut plan = EpochPlan::new();
    for chunk in order.chunks(p) {
        let mut batch = Vec::with_capacity(p * k);
        for &y in chunk {
            batch.extend(draw_k(&members(y), k, &mut rng));
        }
        plan.push(batch);
    }
    Ok(plan)
}
