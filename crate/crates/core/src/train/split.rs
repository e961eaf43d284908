use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::phantom::largest_remainder;
use crate::seed;
use crate::volio::{Group, MaskVolume};

/// Majority (≥ 2 of 3) vote of three annotator masks.
pub fn vote_masks(a: &MaskVolume, b: &MaskVolume, c: &MaskVolume) -> Result<MaskVolume> {
    a.geometry().ensure_same(b.geometry())?;
    a.geometry().ensure_same(c.geometry())?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| (x + y + z >= 2) as u8)
        .collect();
    a.rebuild(a.geometry().clone(), data)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldCase {
    pub id: String,
    pub stratum: String,
    pub fold: usize,
}

/// Fold assignment of a cohort, in input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    pub cases: Vec<FoldCase>,
}

impl FoldSplit {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.cases.iter().find(|c| c.id == id).map(|c| c.fold)
    }

    pub fn dev_ids(&self, fold: usize) -> Vec<&str> {
        self.cases
            .iter()
            .filter(|c| c.fold == fold)
            .map(|c| c.id.as_str())
            .collect()
    }

    pub fn train_ids(&self, fold: usize) -> Vec<&str> {
        self.cases
            .iter()
            .filter(|c| c.fold != fold)
            .map(|c| c.id.as_str())
            .collect()
    }

    /// `counts[fold][stratum]`, strata in sorted order.
    pub fn stratum_counts(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for c in &self.cases {
            out.entry(c.stratum.clone()).or_insert_with(|| vec![0; self.k])[c.fold] += 1;
        }
        out
    }
}

/// Stratified k-fold split over `(id, stratum)` pairs: each stratum is
/// shuffled and dealt round-robin, continuing the deal where the previous
/// stratum stopped so fold sizes stay within one of each other.
pub fn stratified_kfold<S: AsRef<str>>(cases: &[(S, S)], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k must be >= 2, got {k}")));
    }
    if cases.is_empty() {
        return Err(Error::EmptyStratum("<all>".into()));
    }
    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (id, s)) in cases.iter().enumerate() {
        if s.as_ref().is_empty() {
            return Err(Error::EmptyStratum(format!("case {:?} has no stratum", id.as_ref())));
        }
        strata.entry(s.as_ref()).or_default().push(i);
    }
    let mut fold = vec![0usize; cases.len()];
    let mut dealt = 0usize;
    for (name, mut members) in strata {
        members.shuffle(&mut seed::rng(seed::derive(seed, &format!("kfold/{name}"))));
        for i in members {
            fold[i] = dealt % k;
            dealt += 1;
        }
    }
    Ok(FoldSplit {
        k,
        cases: cases
            .iter()
            .zip(fold)
            .map(|((id, s), fold)| FoldCase {
                id: id.as_ref().to_string(),
                stratum: s.as_ref().to_string(),
                fold,
            })
            .collect(),
    })
}

/// Reference held-out test counts (LD, SD, CTA, AN, ANNC) for a 587-scan cohort.
pub const HOLDOUT_REFERENCE: [usize; 5] = [15, 15, 15, 12, 3];
const REFERENCE_COHORT: usize = 587;

/// Reference held-out counts scaled to a cohort of `n_total` scans.
pub fn scaled_holdout_counts(n_total: usize) -> [usize; 5] {
    let ref_total: usize = HOLDOUT_REFERENCE.iter().sum();
    let n = ((n_total * ref_total) as f64 / REFERENCE_COHORT as f64).round() as usize;
    let c = largest_remainder(n, &HOLDOUT_REFERENCE);
    [c[0], c[1], c[2], c[3], c[4]]
}

/// Samples `counts[g]` ids per group without replacement; returns
/// `(test, remainder)`, each in input order.
pub fn holdout_test<S: AsRef<str>>(
    cases: &[(S, Group)],
    counts: [usize; 5],
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    let mut is_test = vec![false; cases.len()];
    for g in Group::ALL {
        let mut members: Vec<usize> = (0..cases.len()).filter(|&i| cases[i].1 == g).collect();
        let want = counts[g.index()];
        if members.len() < want {
            return Err(Error::InsufficientGroup {
                group: g.to_string(),
                available: members.len(),
                requested: want,
            });
        }
        members.shuffle(&mut seed::rng(seed::derive(seed, &format!("holdout/{g}"))));
        for &i in &members[..want] {
            is_test[i] = true;
        }
    }
    let (mut test, mut rest) = (Vec::new(), Vec::new());
    for ((id, _), t) in cases.iter().zip(is_test) {
        if t { &mut test } else { &mut rest }.push(id.as_ref().to_string());
    }
    Ok((test, rest))
}

/// Randomly drops class-0 records down to the class-1 count; class 1 is never
/// touched and nothing is upsampled. Input order is preserved.
pub fn balance_downsample<R: Clone>(records: &[R], label: impl Fn(&R) -> u8, seed: u64) -> Result<Vec<R>> {
    let zeros: Vec<usize> = (0..records.len()).filter(|&i| label(&records[i]) == 0).collect();
    let ones = records.len() - zeros.len();
    if zeros.is_empty() {
        return Err(Error::MissingClass(0));
    }
    if ones == 0 {
        return Err(Error::MissingClass(1));
    }
    let mut keep = vec![true; records.len()];
    if zeros.len() > ones {
        let mut shuffled = zeros.clone();
        shuffled.shuffle(&mut seed::rng(seed::derive(seed, "balance")));
        for &i in &shuffled[ones..] {
            keep[i] = false;
        }
    }
    Ok(records
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| r.clone())
        .collect())
}
