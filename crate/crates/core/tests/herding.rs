mod common;

use proptest::prelude::*;
use s2il::exemplar::{herding_select, ExemplarStore, MemoryPolicy};

fn instance() -> impl Strategy<Value = (Vec<usize>, Vec<Vec<f64>>, usize)> {
    (1usize..30, 1usize..6).prop_flat_map(|(n, dim)| {
        (
            Just((0..n).map(|i| i * 3 + 1).collect::<Vec<_>>()).prop_shuffle(),
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, dim), n),
            0..=n.min(10),
        )
    })
}

proptest! {
    #[test]
    fn matches_brute_force((ids, feats, k) in instance(), normalize: bool) {
        let got = herding_select(&ids, &feats, k, normalize).unwrap();
        prop_assert_eq!(got, common::herding_brute(&ids, &feats, k, normalize));
    }

    #[test]
    fn selections_are_prefixes((ids, feats, k) in instance()) {
        let full = herding_select(&ids, &feats, ids.len(), true).unwrap();
        let part = herding_select(&ids, &feats, k, true).unwrap();
        prop_assert_eq!(&full[..k], &part[..]);
        let mut sorted = full.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), ids.len());
    }

    #[test]
    fn budget_quotas_sum_to_budget(classes in prop::collection::btree_set(0u32..200, 1..40), extra in 0usize..500) {
        let classes: Vec<u32> = classes.into_iter().collect();
        let total = classes.len() + extra;
        let q = MemoryPolicy::Budget(total).quotas(&classes).unwrap();
        prop_assert_eq!(q.values().sum::<usize>(), total);
        let (lo, hi) = (q.values().min().unwrap(), q.values().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn rebalance_keeps_herding_prefixes(lens in prop::collection::vec(1usize..30, 1..8), budget in 8usize..60) {
        let mut store = ExemplarStore::new(MemoryPolicy::Budget(budget));
        let mut lists = Vec::new();
        let mut next = 0;
        for (c, &len) in lens.iter().enumerate() {
            let list: Vec<usize> = (next..next + len).collect();
            next += len;
            store.insert(c as u32, list.clone()).unwrap();
            lists.push(list);
        }
        prop_assume!(budget >= lens.len());
        store.rebalance().unwrap();
        prop_assert!(store.total() <= budget);
        for (c, list) in lists.iter().enumerate() {
            let kept = store.get(c as u32).unwrap();
            prop_assert_eq!(kept, &list[..kept.len()]);
        }
    }
}

#[test]
fn normalization_changes_the_choice() {
    // Raw mean (1, 1) sits at distance 1 from both axes; after scaling to
    // unit length the diagonal sample is the one nearest the mean.
    let feats = vec![vec![2.0, 2.0], vec![1.0, 0.0], vec![0.0, 1.0]];
    let ids = [0, 1, 2];
    assert_eq!(herding_select(&ids, &feats, 1, false).unwrap(), vec![1]);
    assert_eq!(herding_select(&ids, &feats, 1, true).unwrap(), vec![0]);
}
