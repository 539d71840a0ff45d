use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// Indices of each class, in ascending order.
fn class_members(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    members
}

/// Integer parts of `total × weights` summing to `total`; leftover units go to
/// the largest fractional parts (ties to the lower index).
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let ideal: Vec<f64> = weights.iter().map(|w| total as f64 * w).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn check_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split_ratios", format!("{ratios:?} must be in [0,1] and sum to 1")));
    }
    Ok(())
}

/// Per-class split sizes whose row sums are the class sizes and whose column
/// sums are the global largest-remainder targets.
///
/// Each cell starts at `floor(n_c · r_s)`. The remaining units are placed one
/// per cell, handling classes with the most leftovers first and giving each
/// unit to the split with the most unmet demand, which realizes the targets
/// whenever they are realizable.
fn allocate(class_sizes: &[usize], ratios: &[f64]) -> Vec<Vec<usize>> {
    let total: usize = class_sizes.iter().sum();
    let targets = largest_remainder(total, ratios);
    let mut alloc: Vec<Vec<usize>> = class_sizes
        .iter()
        .map(|&n| ratios.iter().map(|r| (n as f64 * r).floor() as usize).collect())
        .collect();
    let mut demand: Vec<isize> = (0..ratios.len())
        .map(|s| targets[s] as isize - alloc.iter().map(|row| row[s]).sum::<usize>() as isize)
        .collect();
    let mut extra: Vec<(usize, usize)> = class_sizes
        .iter()
        .enumerate()
        .map(|(c, &n)| (c, n - alloc[c].iter().sum::<usize>()))
        .collect();
    extra.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for (c, e) in extra {
        let mut order: Vec<usize> = (0..ratios.len()).filter(|&s| ratios[s] > 0.0).collect();
        order.sort_by(|&a, &b| demand[b].cmp(&demand[a]).then(a.cmp(&b)));
        for &s in order.iter().cycle().take(e) {
            alloc[c][s] += 1;
            demand[s] -= 1;
        }
    }
    alloc
}

/// Stratified train / validation / test index sets, each sorted ascending.
pub fn split_train_val_test(labels: &[usize], ratios: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    check_ratios(&ratios)?;
    let members = class_members(labels);
    let present: Vec<&Vec<usize>> = members.iter().filter(|m| !m.is_empty()).collect();
    if present.len() < 2 {
        return Err(Error::Stratification(format!(
            "need at least two classes, found {}",
            present.len()
        )));
    }
    if let Some((c, m)) = members.iter().enumerate().find(|(_, m)| !m.is_empty() && m.len() < 3) {
        return Err(Error::Stratification(format!("class {c} has {} samples, need at least 3", m.len())));
    }
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let alloc = allocate(&sizes, &ratios);
    let mut rng = rng::stream(seed, rng::STREAM_SPLIT);
    let mut out: [Vec<usize>; 3] = Default::default();
    for (c, m) in members.iter().enumerate() {
        let mut idx = m.clone();
        idx.shuffle(&mut rng);
        let mut pos = 0;
        for (s, split) in out.iter_mut().enumerate() {
            split.extend_from_slice(&idx[pos..pos + alloc[c][s]]);
            pos += alloc[c][s];
        }
    }
    for split in out.iter_mut() {
        split.sort_unstable();
    }
    Ok(out)
}

/// `k` stratified folds, each sorted ascending.
///
/// Every class is shuffled, the classes are laid end to end, and position
/// `j` goes to fold `j mod k`; fold sizes and per-class counts per fold
/// therefore differ by at most one.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::param("folds", format!("need at least 2, got {k}")));
    }
    let members = class_members(labels);
    if let Some((c, m)) = members.iter().enumerate().find(|(_, m)| !m.is_empty() && m.len() < k) {
        return Err(Error::Stratification(format!(
            "class {c} has {} samples, fewer than {k} folds",
            m.len()
        )));
    }
    let mut rng = rng::stream(seed, rng::STREAM_FOLDS);
    let mut folds = vec![Vec::new(); k];
    let mut pos = 0;
    for m in &members {
        let mut idx = m.clone();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[pos % k].push(i);
            pos += 1;
        }
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_sums() {
        assert_eq!(largest_remainder(100, &[0.7, 0.15, 0.15]), vec![70, 15, 15]);
        assert_eq!(largest_remainder(11, &[0.7, 0.15, 0.15]), vec![8, 2, 1]);
        assert_eq!(largest_remainder(7, &[0.85, 0.15, 0.0]), vec![6, 1, 0]);
    }

    #[test]
    fn allocation_hits_targets() {
        let alloc = allocate(&[50, 50], &[0.7, 0.15, 0.15]);
        let cols: Vec<usize> = (0..3).map(|s| alloc.iter().map(|r| r[s]).sum()).collect();
        assert_eq!(cols, vec![70, 15, 15]);
        assert_eq!(alloc[0].iter().sum::<usize>(), 50);
    }
}
