//! Herding selection and exemplar memory under per-class or total budgets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Greedy herding over one class.
///
/// `features[i]` belongs to sample `ids[i]`. At step `s` the sample whose
/// addition brings the running mean of the selection closest (Euclidean) to
/// the class mean is taken; ties go to the lowest sample id. With
/// `normalize` every feature is scaled to unit length first.
pub fn herding_select(ids: &[usize], features: &[Vec<f64>], k: usize, normalize: bool) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Err(Error::contract("herding on an empty class"));
    }
    if ids.len() != features.len() {
        return Err(Error::contract(format!("{} ids for {} feature rows", ids.len(), features.len())));
    }
    if k > ids.len() {
        return Err(Error::contract(format!("asked for {k} exemplars from {} samples", ids.len())));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::dim("herding", "feature rows differ in length"));
    }

    // Work in id order so the result does not depend on how the caller
    // happened to order the samples.
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| ids[i]);
    let rows: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| {
            let mut f = features[i].clone();
            if normalize {
                let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    f.iter_mut().for_each(|x| *x /= n);
                }
            }
            f
        })
        .collect();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in &rows {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut taken = vec![false; rows.len()];
    let mut running = vec![0.0; dim];
    let mut picked = Vec::with_capacity(k);
    for step in 1..=k {
        let mut best: Option<(usize, f64)> = None;
        for (j, r) in rows.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let d: f64 = mean
                .iter()
                .zip(&running)
                .zip(r)
                .map(|((m, s), x)| {
                    let e = m - (s + x) / step as f64;
                    e * e
                })
                .sum();
            // Strict comparison keeps the earliest (lowest id) row on ties.
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        let (j, _) = best.expect("k <= sample count");
        taken[j] = true;
        running.iter_mut().zip(&rows[j]).for_each(|(s, x)| *s += x);
        picked.push(ids[order[j]]);
    }
    Ok(picked)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemoryPolicy {
    /// A fixed number of exemplars for every class.
    PerClass(usize),
    /// A fixed total shared equally by all seen classes.
    Budget(usize),
}

impl MemoryPolicy {
    /// Per-class quotas for `classes` (any order). Under a total budget the
    /// remainder goes one each to the lowest class ids.
    pub fn quotas(&self, classes: &[u32]) -> Result<BTreeMap<u32, usize>> {
        let mut sorted = classes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() {
            return Ok(BTreeMap::new());
        }
        match *self {
            MemoryPolicy::PerClass(k) => {
                if k == 0 {
                    return Err(Error::contract("per-class exemplar count is zero"));
                }
                Ok(sorted.into_iter().map(|c| (c, k)).collect())
            }
            MemoryPolicy::Budget(total) => {
                let base = total / sorted.len();
                let extra = total % sorted.len();
                if base == 0 {
                    return Err(Error::contract(format!(
                        "budget {total} leaves no exemplar for some of {} classes",
                        sorted.len()
                    )));
                }
                Ok(sorted
                    .into_iter()
                    .enumerate()
                    .map(|(i, c)| (c, base + usize::from(i < extra)))
                    .collect())
            }
        }
    }
}

/// Retained sample ids per class, each list in herding order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarStore {
    policy: MemoryPolicy,
    classes: BTreeMap<u32, Vec<usize>>,
}

impl ExemplarStore {
    pub fn new(policy: MemoryPolicy) -> Self {
        ExemplarStore {
            policy,
            classes: BTreeMap::new(),
        }
    }

    pub fn policy(&self) -> MemoryPolicy {
        self.policy
    }

    pub fn classes(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.classes
    }

    pub fn get(&self, class: u32) -> Option<&[usize]> {
        self.classes.get(&class).map(Vec::as_slice)
    }

    pub fn total(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    /// All stored ids, class by class.
    pub fn ids(&self) -> Vec<usize> {
        self.classes.values().flatten().copied().collect()
    }

    /// Quota each class would get once `new` classes join the store.
    pub fn quotas_with(&self, new: &[u32]) -> Result<BTreeMap<u32, usize>> {
        let mut all: Vec<u32> = self.classes.keys().copied().collect();
        all.extend_from_slice(new);
        self.policy.quotas(&all)
    }

    /// Store the herding order for a class not yet present.
    pub fn insert(&mut self, class: u32, ordered: Vec<usize>) -> Result<()> {
        if self.classes.contains_key(&class) {
            return Err(Error::contract(format!("class {class} already has exemplars")));
        }
        if ordered.is_empty() {
            return Err(Error::contract(format!("class {class} given no exemplars")));
        }
        self.classes.insert(class, ordered);
        Ok(())
    }

    /// Truncate every class to its quota. Herding order is a prefix order,
    /// so shrinking never needs a new selection.
    pub fn rebalance(&mut self) -> Result<()> {
        let keys: Vec<u32> = self.classes.keys().copied().collect();
        let quotas = self.policy.quotas(&keys)?;
        for (c, list) in self.classes.iter_mut() {
            list.truncate(quotas[c]);
        }
        Ok(())
    }
}
