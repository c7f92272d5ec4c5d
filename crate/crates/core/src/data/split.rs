use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{SampleRecord, Split};
use crate::error::{Error, Result};

/// Stratified, seeded train/validation split.
///
/// The training side receives exactly `floor(train_fraction * N)` records.
/// Per-class quotas are the floored per-class shares, with the remaining
/// slots handed to the classes with the largest fractional remainders, so
/// every class ratio stays within one sample of the input ratio. Both
/// outputs preserve input order.
pub fn split_manifest(
    records: &[SampleRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, r) in records.iter().enumerate() {
        by_class[r.label as usize].push(i);
    }
    if records.is_empty() {
        return Err(Error::SplitTooSmall { label: 0, count: 0 });
    }
    for (label, idx) in by_class.iter().enumerate() {
        if !idx.is_empty() && idx.len() < 2 {
            return Err(Error::SplitTooSmall {
                label: label as u8,
                count: idx.len(),
            });
        }
    }

    let total_train = (train_fraction * records.len() as f64).floor() as usize;
    let shares: Vec<f64> = by_class.iter().map(|c| train_fraction * c.len() as f64).collect();
    let mut quota: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let mut remaining = total_train - quota.iter().sum::<usize>();
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            remaining -= 1;
        }
    }

    let mut in_train = vec![false; records.len()];
    for (label, idx) in by_class.iter().enumerate() {
        let mut shuffled = idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label as u64);
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..quota[label]] {
            in_train[i] = true;
        }
    }

    let mut train = Vec::with_capacity(total_train);
    let mut val = Vec::with_capacity(records.len() - total_train);
    for (rec, &t) in records.iter().zip(&in_train) {
        let mut rec = rec.clone();
        if t {
            rec.split = Split::Train;
            train.push(rec);
        } else {
            rec.split = Split::Val;
            val.push(rec);
        }
    }
    Ok((train, val))
}
