use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub classes: Vec<u32>,
    /// Training sample ids of this task's classes.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Tasks `0..=T` over disjoint class sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub class_order: Vec<u32>,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    /// Index of the last task, `T`.
    pub fn last(&self) -> usize {
        self.tasks.len() - 1
    }

    /// Classes of tasks `0..=t`.
    pub fn seen(&self, t: usize) -> Vec<u32> {
        self.tasks[..=t].iter().flat_map(|s| s.classes.iter().copied()).collect()
    }

    pub fn task_of(&self, class: u32) -> Option<usize> {
        self.tasks.iter().position(|s| s.classes.contains(&class))
    }
}

/// Split the dataset's classes into a base task followed by equal
/// increments, in an order shuffled by `order_seed`.
pub fn build_stream(ds: &Dataset, base: usize, increment: usize, order_seed: u64) -> Result<TaskStream> {
    if increment == 0 {
        return Err(Error::contract("class increment must be positive"));
    }
    let total = ds.classes;
    if base == 0 || base > total || !(total - base).is_multiple_of(increment) {
        return Err(Error::contract(format!(
            "{total} classes cannot be split into a base of {base} plus increments of {increment}"
        )));
    }
    let mut train: Vec<Vec<usize>> = vec![Vec::new(); total];
    let mut test: Vec<Vec<usize>> = vec![Vec::new(); total];
    for id in 0..ds.len() {
        let c = ds.label(id) as usize;
        match ds.split(id) {
            Split::Train => train[c].push(id),
            Split::Test => test[c].push(id),
        }
    }
    if let Some(c) = (0..total).find(|&c| train[c].is_empty() || test[c].is_empty()) {
        return Err(Error::contract(format!("class {c} lacks train or test samples")));
    }

    let mut order: Vec<u32> = (0..total as u32).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
    let mut tasks = Vec::new();
    let mut start = 0;
    while start < total {
        let len = if start == 0 { base } else { increment };
        let classes = order[start..start + len].to_vec();
        let mut tr: Vec<usize> = classes.iter().flat_map(|&c| train[c as usize].clone()).collect();
        let mut te: Vec<usize> = classes.iter().flat_map(|&c| test[c as usize].clone()).collect();
        tr.sort_unstable();
        te.sort_unstable();
        tasks.push(Task {
            classes,
            train: tr,
            test: te,
        });
        start += len;
    }
    Ok(TaskStream {
        class_order: order,
        tasks,
    })
}

/// Distillation weight `base · sqrt(seen / new)`.
pub fn lambda_schedule(base: f64, classes_seen: usize, classes_new: usize) -> Result<f64> {
    if classes_new == 0 {
        return Err(Error::contract("lambda schedule with no new classes"));
    }
    if classes_seen < classes_new {
        return Err(Error::contract(format!("{classes_seen} seen classes but {classes_new} new")));
    }
    Ok(base * (classes_seen as f64 / classes_new as f64).sqrt())
}
