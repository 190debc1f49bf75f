//! Corpus transforms: shuffled negatives, additive label noise, few-shot
//! subsampling, class imbalance and stratified folds. All are pure functions
//! of their inputs and seed.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{PairSample, Provenance};
use crate::error::{Error, Result};

type Key = (String, String);

fn key(p: &PairSample) -> Key {
    (p.deposit_id.clone(), p.withdrawal_id.clone())
}

/// Samples `count` distinct cross pairs `(deposit of i, withdrawal of j)`,
/// i ≠ j, over `positives`, avoiding every key in `exclude`.
fn sample_cross_pairs(
    positives: &[&PairSample],
    count: usize,
    exclude: &HashSet<Key>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Key>> {
    let mut candidates = Vec::new();
    let mut seen = HashSet::new();
    for (i, a) in positives.iter().enumerate() {
        for (j, b) in positives.iter().enumerate() {
            if i == j || a.deposit_id == b.withdrawal_id {
                continue;
            }
            let k = (a.deposit_id.clone(), b.withdrawal_id.clone());
            if !exclude.contains(&k) && seen.insert(k.clone()) {
                candidates.push(k);
            }
        }
    }
    if count > candidates.len() {
        return Err(Error::Capacity(format!(
            "requested {count} unassociated pairs but only {} distinct shuffles exist",
            candidates.len()
        )));
    }
    Ok(index::sample(rng, candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect())
}

/// `ratio × |positives|` negatives built by pairing the deposit of one
/// positive with the withdrawal of a different one.
pub fn make_unassociated_negatives(positives: &[PairSample], ratio: usize, seed: u64) -> Result<Vec<PairSample>> {
    let pos: Vec<&PairSample> = positives.iter().filter(|p| p.label == 1).collect();
    if pos.len() < 2 {
        return Err(Error::Capacity(format!(
            "shuffled negatives need at least 2 positives, got {}",
            pos.len()
        )));
    }
    let exclude: HashSet<Key> = pos.iter().map(|p| key(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_cross_pairs(&pos, ratio * pos.len(), &exclude, &mut rng)?
        .into_iter()
        .map(|(d, w)| PairSample::new(d, w, 0, Provenance::ShuffledNegative))
        .collect())
}

/// Adds `⌈eta·P⌉` pseudo-positives labeled 1, where P counts the positives in
/// `train`. Pseudo-positives avoid every pair already in `train`.
pub fn inject_label_noise(train: &[PairSample], eta: f64, seed: u64) -> Result<Vec<PairSample>> {
    inject_label_noise_excluding(train, eta, seed, &[])
}

/// Like [`inject_label_noise`], additionally avoiding the `ground_truth`
/// associations (for instance positives held out in other folds).
pub fn inject_label_noise_excluding(
    train: &[PairSample],
    eta: f64,
    seed: u64,
    ground_truth: &[PairSample],
) -> Result<Vec<PairSample>> {
    if !(0.0..=0.5).contains(&eta) {
        return Err(Error::Range {
            name: "eta",
            value: eta,
            allowed: "[0, 0.5]",
        });
    }
    let pos: Vec<&PairSample> = train
        .iter()
        .filter(|p| p.label == 1 && p.provenance != Provenance::InjectedNoise)
        .collect();
    let count = noise_count(eta, train.iter().filter(|p| p.label == 1).count());
    let mut out = train.to_vec();
    if count == 0 {
        return Ok(out);
    }
    let mut exclude: HashSet<Key> = train.iter().map(key).collect();
    exclude.extend(ground_truth.iter().filter(|p| p.label == 1).map(key));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = sample_cross_pairs(&pos, count, &exclude, &mut rng)?;
    out.extend(
        noise
            .into_iter()
            .map(|(d, w)| PairSample::new(d, w, 1, Provenance::InjectedNoise)),
    );
    Ok(out)
}

/// `⌈eta·p⌉`, robust to representation error in `eta`.
pub(crate) fn noise_count(eta: f64, p: usize) -> usize {
    let x = eta * p as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<PairSample>,
    pub test: Vec<PairSample>,
}

/// `n` positives and `n` negatives drawn without replacement for training;
/// every other pair is held out.
pub fn subsample_few_shot(pairs: &[PairSample], n: usize, trial_seed: u64) -> Result<Split> {
    if n == 0 {
        return Err(Error::Argument("few-shot size must be at least 1".into()));
    }
    let pos: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].label == 1).collect();
    let neg: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].label == 0).collect();
    if pos.len() < n || neg.len() < n {
        return Err(Error::Capacity(format!(
            "few-shot N={n} needs {n} positives and {n} negatives, have {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    let mut chosen = vec![false; pairs.len()];
    let mut train = Vec::with_capacity(2 * n);
    for class in [&pos, &neg] {
        for i in index::sample(&mut rng, class.len(), n) {
            chosen[class[i]] = true;
            train.push(pairs[class[i]].clone());
        }
    }
    let test = (0..pairs.len())
        .filter(|&i| !chosen[i])
        .map(|i| pairs[i].clone())
        .collect();
    Ok(Split { train, test })
}

/// Parses `"1:k"` (or a bare `k`) into `k ≥ 1`.
pub fn parse_ratio(s: &str) -> Result<usize> {
    let k = match s.split_once(':') {
        Some((one, k)) if one.trim() == "1" => k.trim(),
        Some(_) => return Err(Error::Argument(format!("ratio `{s}` must have the form 1:k"))),
        None => s.trim(),
    };
    match k.parse::<usize>() {
        Ok(k) if k >= 1 => Ok(k),
        _ => Err(Error::Argument(format!("ratio `{s}` must have the form 1:k with k >= 1"))),
    }
}

/// Keeps every positive and tops negatives up (or trims them) to `k` per
/// positive. Existing pairs keep their relative order; new negatives follow.
pub fn make_imbalanced(pairs: &[PairSample], k: usize, seed: u64) -> Result<Vec<PairSample>> {
    if k == 0 {
        return Err(Error::Argument("imbalance ratio must be at least 1".into()));
    }
    let pos: Vec<&PairSample> = pairs.iter().filter(|p| p.label == 1).collect();
    let target = k * pos.len();
    let mut kept_neg = 0;
    let mut out = Vec::with_capacity(pos.len() + target);
    for p in pairs {
        if p.label == 1 {
            out.push(p.clone());
        } else if kept_neg < target {
            kept_neg += 1;
            out.push(p.clone());
        }
    }
    if kept_neg < target {
        let exclude: HashSet<Key> = pairs.iter().map(key).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extra = sample_cross_pairs(&pos, target - kept_neg, &exclude, &mut rng)?;
        out.extend(
            extra
                .into_iter()
                .map(|(d, w)| PairSample::new(d, w, 0, Provenance::ShuffledNegative)),
        );
    }
    Ok(out)
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin.
/// Returns, for each fold, the indices of its held-out pairs.
pub fn kfold(pairs: &[PairSample], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > pairs.len() {
        return Err(Error::Argument(format!(
            "cannot split {} pairs into {folds} folds",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); folds];
    let mut next = 0;
    for label in [1u8, 0] {
        let mut idx: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].label == label).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            out[next % folds].push(i);
            next += 1;
        }
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}
