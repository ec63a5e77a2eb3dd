use std::collections::HashSet;

use cbff_data::partition::{format_partition, partition};
use proptest::prelude::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i}")).collect()
}

#[test]
fn same_seed_gives_identical_partitions() {
    let a = partition(&ids(100), 0.05, 42).unwrap();
    let b = partition(&ids(100), 0.05, 42).unwrap();
    assert_eq!(format_partition(&a), format_partition(&b));
    let c = partition(&ids(100), 0.05, 43).unwrap();
    assert_ne!(a.labeled_ids, c.labeled_ids);
}

proptest! {
    #[test]
    fn sets_are_disjoint_and_cover_the_input(n in 1usize..300, ratio in 0.001f64..0.999, seed in any::<u64>()) {
        let train = ids(n);
        let p = partition(&train, ratio, seed).unwrap();
        prop_assert_eq!(p.labeled_ids.len(), (ratio * n as f64).round() as usize);
        let l: HashSet<_> = p.labeled_ids.iter().collect();
        let u: HashSet<_> = p.unlabeled_ids.iter().collect();
        prop_assert!(l.is_disjoint(&u));
        let all: HashSet<_> = l.union(&u).cloned().collect();
        prop_assert_eq!(all, train.iter().collect::<HashSet<_>>());
        prop_assert_eq!(l.len() + u.len(), n);
    }
}
