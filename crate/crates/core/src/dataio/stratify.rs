use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{SplitManifest, Stratum};
use crate::error::{Error, Result};

pub const MAX_HALVINGS: u32 = 7;

/// The `k` with `fraction == 2^-k`, for `k` in `0..=7`.
pub fn halvings(fraction: f64) -> Result<u32> {
    (0..=MAX_HALVINGS)
        .find(|&k| fraction == 0.5f64.powi(k as i32))
        .ok_or_else(|| {
            Error::InvalidParameter(format!("fraction {fraction} is not 1/2^k with k in 0..=7"))
        })
}

/// Keeps `round(fraction * n)` of the train and of the val records each,
/// preserving stratum proportions. Test is untouched.
pub fn stratified_subsample(manifest: &SplitManifest, fraction: f64, seed: u64) -> Result<SplitManifest> {
    let k = halvings(fraction)?;
    if k == 0 {
        return Ok(manifest.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = subsample_ids(&manifest.train, &manifest.strata, fraction, &mut rng);
    let val = subsample_ids(&manifest.val, &manifest.strata, fraction, &mut rng);
    let keep: BTreeSet<&String> = train.iter().chain(&val).chain(&manifest.test).collect();
    let out = SplitManifest {
        strata: manifest
            .strata
            .iter()
            .filter(|(id, _)| keep.contains(id))
            .map(|(id, s)| (id.clone(), s.clone()))
            .collect(),
        subjects: manifest
            .subjects
            .iter()
            .filter(|(id, _)| keep.contains(id))
            .map(|(id, s)| (id.clone(), s.clone()))
            .collect(),
        train,
        val,
        test: manifest.test.clone(),
    };
    out.validate(None)?;
    Ok(out)
}

fn subsample_ids<R: Rng>(
    ids: &[String],
    strata: &BTreeMap<String, Stratum>,
    fraction: f64,
    rng: &mut R,
) -> Vec<String> {
    let tags: Vec<Vec<String>> = ids
        .iter()
        .map(|id| strata.get(id).map(Stratum::tags).unwrap_or_default())
        .collect();
    let m = (fraction * ids.len() as f64).round() as usize;
    let chosen = iterative_stratification(&tags, m, rng);
    ids.iter()
        .zip(&chosen)
        .filter(|(_, &c)| c)
        .map(|(id, _)| id.clone())
        .collect()
}

/// Greedy two-way iterative stratification. Returns a membership flag per
/// item with exactly `m` items selected.
///
/// The rarest tag with unassigned items is processed first; each of its items
/// goes to the side with the largest remaining demand for that tag, then the
/// largest remaining capacity, then a coin flip.
pub fn iterative_stratification<R: Rng>(tags: &[Vec<String>], m: usize, rng: &mut R) -> Vec<bool> {
    let n = tags.len();
    let m = m.min(n);
    let mut capacity = [m as f64, (n - m) as f64];
    let share = [m as f64 / n.max(1) as f64, 1.0 - m as f64 / n.max(1) as f64];

    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in tags.iter().enumerate() {
        for tag in t {
            members.entry(tag.as_str()).or_default().push(i);
        }
    }
    let mut demand: BTreeMap<&str, [f64; 2]> = members
        .iter()
        .map(|(&t, v)| (t, [v.len() as f64 * share[0], v.len() as f64 * share[1]]))
        .collect();

    let mut side: Vec<Option<usize>> = vec![None; n];
    fn assign(
        i: usize,
        s: usize,
        tags: &[Vec<String>],
        side: &mut [Option<usize>],
        capacity: &mut [f64; 2],
        demand: &mut BTreeMap<&str, [f64; 2]>,
    ) {
        side[i] = Some(s);
        capacity[s] -= 1.0;
        for tag in &tags[i] {
            if let Some(d) = demand.get_mut(tag.as_str()) {
                d[s] -= 1.0;
            }
        }
    }
    let pick = |want: [f64; 2], capacity: &[f64; 2], rng: &mut R| -> usize {
        let open: Vec<usize> = (0..2).filter(|&s| capacity[s] > 0.0).collect();
        if open.len() == 1 {
            return open[0];
        }
        let key = |s: usize| (want[s], capacity[s]);
        match key(0).partial_cmp(&key(1)) {
            Some(std::cmp::Ordering::Greater) => 0,
            Some(std::cmp::Ordering::Less) => 1,
            _ => usize::from(rng.random_bool(0.5)),
        }
    };

    loop {
        // Rarest tag by count of unassigned members; ties broken at random.
        let mut best: Vec<(&str, usize)> = Vec::new();
        for (&tag, items) in &members {
            let left = items.iter().filter(|&&i| side[i].is_none()).count();
            if left == 0 {
                continue;
            }
            match best.first() {
                Some(&(_, b)) if left > b => {}
                Some(&(_, b)) if left == b => best.push((tag, left)),
                _ => best = vec![(tag, left)],
            }
        }
        let Some(&(tag, _)) = best.get(rng.random_range(0..best.len().max(1))) else {
            break;
        };
        let mut items: Vec<usize> = members[tag].iter().copied().filter(|&i| side[i].is_none()).collect();
        items.shuffle(rng);
        for i in items {
            let s = pick(demand[tag], &capacity, rng);
            assign(i, s, tags, &mut side, &mut capacity, &mut demand);
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| side[i].is_none()).collect();
    rest.shuffle(rng);
    for i in rest {
        let s = pick(capacity, &capacity, rng);
        assign(i, s, tags, &mut side, &mut capacity, &mut demand);
    }
    side.into_iter().map(|s| s == Some(0)).collect()
}
