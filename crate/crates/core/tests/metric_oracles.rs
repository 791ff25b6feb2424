mod common;

use proptest::prelude::*;
use rand::Rng;
use s2il::metrics::{aia, bt, fgt, oracle_deviation};

#[test]
fn random_matrices_match_reference_formulas() {
    let mut rng = common::rng(17);
    for _ in 0..100 {
        let tasks = rng.random_range(2..12);
        let acc = common::random_triangle(&mut rng, tasks);
        let overall: Vec<f64> = acc.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
        assert!((aia(&overall).unwrap() - common::aia_ref(&overall)).abs() < 1e-10);
        assert!((bt(&acc).unwrap() - common::bt_ref(&acc)).abs() < 1e-10);
        assert!((fgt(&acc).unwrap() - common::fgt_ref(&acc)).abs() < 1e-10);
        let n = rng.random_range(1..16);
        let v: Vec<Vec<f64>> = (0..4).map(|_| common::uniform(&mut rng, n, 0.0, 1.0)).collect();
        let d = oracle_deviation(&v[0], &v[1], &v[2], &v[3]).unwrap();
        assert!((d.value - common::deviation_ref(&v[0], &v[1], &v[2], &v[3])).abs() < 1e-10);
    }
}

#[test]
fn forgetting_equals_negative_transfer_when_diagonal_is_best() {
    let mut rng = common::rng(23);
    for _ in 0..100 {
        let tasks = rng.random_range(2..10);
        let mut acc = common::random_triangle(&mut rng, tasks);
        for i in 0..tasks {
            for t in i + 1..tasks {
                acc[t][i] = acc[t][i].min(acc[i][i]);
            }
        }
        assert!((fgt(&acc).unwrap() + bt(&acc).unwrap()).abs() < 1e-10);
    }
}

proptest! {
    #[test]
    fn forgetting_is_nonnegative(seed in 0u64..5000, tasks in 2usize..10) {
        let acc = common::random_triangle(&mut common::rng(seed), tasks);
        prop_assert!(fgt(&acc).unwrap() >= 0.0);
    }

    #[test]
    fn metrics_ignore_class_relabeling(seed in 0u64..5000, tasks in 2usize..8) {
        // Relabeling classes within a task leaves every per-task entry as is;
        // permuting per-class accuracies before averaging is the same thing.
        let mut rng = common::rng(seed);
        let per_class: Vec<Vec<Vec<f64>>> = (0..tasks)
            .map(|t| (0..=t).map(|_| common::uniform(&mut rng, 3, 0.0, 1.0)).collect())
            .collect();
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let acc: Vec<Vec<f64>> = per_class.iter().map(|r| r.iter().map(mean).collect()).collect();
        let shuffled: Vec<Vec<f64>> = per_class
            .iter()
            .map(|r| r.iter().map(|c| mean(&vec![c[2], c[0], c[1]])).collect())
            .collect();
        prop_assert!((fgt(&acc).unwrap() - fgt(&shuffled).unwrap()).abs() < 1e-12);
        prop_assert!((bt(&acc).unwrap() - bt(&shuffled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn deviation_is_scale_free(seed in 0u64..5000, k in 0.01f64..100.0) {
        let mut rng = common::rng(seed);
        let v: Vec<Vec<f64>> = (0..4).map(|_| common::uniform(&mut rng, 6, 0.0, 1.0)).collect();
        let s: Vec<Vec<f64>> = v.iter().map(|x| x.iter().map(|a| a * k).collect()).collect();
        let a = oracle_deviation(&v[0], &v[1], &v[2], &v[3]).unwrap().value;
        let b = oracle_deviation(&s[0], &s[1], &s[2], &s[3]).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }
}
