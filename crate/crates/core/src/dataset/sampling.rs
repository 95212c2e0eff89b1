use rand::seq::SliceRandom;

use super::CohortSplit;
use crate::error::{Error, Result};
use crate::rng;
use crate::stats;

/// Quartile (0..4) of `score` given the three interior cut points. A score equal
/// to a cut point belongs to the lower quartile.
pub fn quartile_of(score: f64, cuts: &[f64; 3]) -> usize {
    cuts.iter().position(|&c| score <= c).unwrap_or(3)
}

/// Draw `n_per_quartile` ids uniformly without replacement from each score
/// quartile. Output is grouped by quartile, lowest first.
pub fn quartile_stratified_sample(
    scores: &[(String, f64)],
    n_per_quartile: usize,
    seed: u64,
) -> Result<Vec<String>> {
    if scores.len() < 4 * n_per_quartile {
        return Err(Error::validation(format!(
            "need at least {} households for {n_per_quartile} per quartile, have {}",
            4 * n_per_quartile,
            scores.len()
        )));
    }
    let values: Vec<f64> = scores.iter().map(|(_, s)| *s).collect();
    let cuts = [
        stats::quantile(&values, 0.25),
        stats::quantile(&values, 0.5),
        stats::quantile(&values, 0.75),
    ];
    let mut members: [Vec<&str>; 4] = Default::default();
    for (id, s) in scores {
        members[quartile_of(*s, &cuts)].push(id.as_str());
    }
    let mut out = Vec::with_capacity(4 * n_per_quartile);
    for (q, ids) in members.iter_mut().enumerate() {
        if ids.len() < n_per_quartile {
            return Err(Error::validation(format!(
                "quartile Q{} has {} households, {n_per_quartile} requested",
                q + 1,
                ids.len()
            )));
        }
        ids.sort_unstable();
        let mut stream = rng::stream(seed, "quartile-sample", q as u64);
        let picked = rand::seq::index::sample(&mut stream, ids.len(), n_per_quartile);
        let mut chosen: Vec<&str> = picked.into_iter().map(|i| ids[i]).collect();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(str::to_string));
    }
    Ok(out)
}

/// Random disjoint train/test subsets of the requested sizes.
pub fn train_test_split(
    ids: &[String],
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<CohortSplit> {
    if n_train + n_test > ids.len() {
        return Err(Error::validation(format!(
            "split {n_train}+{n_test} exceeds cohort of {}",
            ids.len()
        )));
    }
    let mut pool: Vec<String> = ids.to_vec();
    pool.sort_unstable();
    pool.dedup();
    if pool.len() != ids.len() {
        return Err(Error::validation("split: duplicate household ids"));
    }
    pool.shuffle(&mut rng::stream(seed, "train-test-split", 0));
    let mut train_ids = pool[..n_train].to_vec();
    let mut test_ids = pool[n_train..n_train + n_test].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    Ok(CohortSplit {
        seed,
        train_ids,
        test_ids,
    })
}
