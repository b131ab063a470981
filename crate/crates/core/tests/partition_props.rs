//! Partition invariants over randomized complexity profiles, with a
//! brute-force balance oracle over all atomic, ordered boundary placements.

use mlo_core::partition::{assign_buckets, count_by_length};
use mlo_core::synth::{Descriptor, Level, Sample, SceneObject};
use proptest::prelude::*;

fn sample(id: usize, length: usize) -> Sample {
    Sample {
        id: format!("s{id}"),
        level: Level::Train,
        triplet_id: None,
        query: vec![Descriptor { size: Some(0), color: None, shape: None }],
        phrase_lengths: vec![length],
        scene: vec![SceneObject { size: 0, color: 3, shape: 9 }],
        answer: true,
        novel_composition: None,
        extra: Default::default(),
    }
}

/// All ways to cut `class_sizes` into `k` ordered (possibly empty) runs;
/// returns the minimum over placements of the worst deviation of a cumulative
/// boundary from its ideal quantile.
fn best_boundary_deviation(class_sizes: &[usize], k: usize) -> usize {
    let n: usize = class_sizes.iter().sum();
    let m = class_sizes.len();
    let cum: Vec<usize> = class_sizes
        .iter()
        .scan(0usize, |acc, &s| {
            *acc += s;
            Some(*acc)
        })
        .collect();
    // choose k-1 cut points in 0..=m (cut after class index), nondecreasing
    fn rec(cuts: &mut Vec<usize>, start: usize, left: usize, m: usize, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cuts.clone());
            return;
        }
        for c in start..=m {
            cuts.push(c);
            rec(cuts, c, left - 1, m, out);
            cuts.pop();
        }
    }
    let mut placements = Vec::new();
    rec(&mut Vec::new(), 0, k - 1, m, &mut placements);

    let mut best = usize::MAX;
    for cuts in placements {
        let mut worst = 0usize;
        for (bi, &cut) in cuts.iter().enumerate() {
            let boundary = if cut == 0 { 0 } else { cum[cut - 1] };
            let ideal = (bi + 1) * n / k;
            worst = worst.max(boundary.abs_diff(ideal));
        }
        best = best.min(worst);
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn partition_invariants_hold(
        class_sizes in proptest::collection::vec(1usize..40, 1..8),
        k in 1usize..6,
    ) {
        // materialize a dataset with the given length histogram, shuffled
        // deterministically by interleaving
        let mut lengths = Vec::new();
        for (li, &n) in class_sizes.iter().enumerate() {
            for _ in 0..n {
                lengths.push(li + 1);
            }
        }
        let samples: Vec<Sample> = lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| sample(i, l))
            .collect();

        let profile = count_by_length(&samples).unwrap();
        let partition = assign_buckets(&profile, k).unwrap();
        prop_assert_eq!(partition.k(), k);

        // disjoint cover at the id level
        let mut seen = std::collections::BTreeSet::new();
        for b in &partition.buckets {
            for id in &b.ids {
                prop_assert!(seen.insert(id.clone()), "duplicate id {}", id);
            }
        }
        prop_assert_eq!(seen.len(), samples.len());

        // atomicity and order
        let of = partition.bucket_of_sample();
        let mut class_bucket = std::collections::BTreeMap::new();
        for (i, &l) in lengths.iter().enumerate() {
            let b = class_bucket.entry(l).or_insert(of[i]);
            prop_assert_eq!(*b, of[i], "length {} split across buckets", l);
        }
        let assigned: Vec<usize> = class_bucket.values().copied().collect();
        for w in assigned.windows(2) {
            prop_assert!(w[0] <= w[1], "bucket index decreased with length");
        }

        // length ranges strictly increase across nonempty buckets
        let ranges: Vec<(usize, usize)> = partition
            .buckets
            .iter()
            .filter_map(|b| b.length_range)
            .collect();
        for w in ranges.windows(2) {
            prop_assert!(w[0].1 < w[1].0, "ranges overlap: {:?} then {:?}", w[0], w[1]);
        }

        // balance: each realized cumulative boundary is within one length
        // class of the ideal quantile, i.e. no further than the best atomic
        // ordered placement plus the largest class straddling the boundary
        let n: usize = class_sizes.iter().sum();
        let mut boundary = 0usize;
        let best = best_boundary_deviation(&class_sizes, k);
        for (bi, b) in partition.buckets.iter().enumerate().take(k - 1) {
            boundary += b.indices.len();
            let ideal = (bi + 1) * n / k;
            let dev = boundary.abs_diff(ideal);
            let max_class = class_sizes.iter().copied().max().unwrap();
            prop_assert!(
                dev <= best + max_class,
                "boundary {} after bucket {} deviates {} (best {}, class cap {})",
                boundary, bi, dev, best, max_class
            );
        }
    }
}

#[test]
fn produced_boundaries_are_quantile_optimal_on_small_profiles() {
    // Exhaustive comparison against the brute-force oracle on every profile
    // with up to 4 classes of size 1..=5 and k in 2..=3: the closed-form rule
    // must match the best atomic placement's worst deviation.
    for a in 1..=5usize {
        for b in 1..=5usize {
            for c in 1..=5usize {
                for k in 2..=3usize {
                    let class_sizes = [a, b, c];
                    let mut lengths = Vec::new();
                    for (li, &n) in class_sizes.iter().enumerate() {
                        lengths.extend(std::iter::repeat(li + 1).take(n));
                    }
                    let samples: Vec<Sample> = lengths
                        .iter()
                        .enumerate()
                        .map(|(i, &l)| sample(i, l))
                        .collect();
                    let profile = count_by_length(&samples).unwrap();
                    let partition = assign_buckets(&profile, k).unwrap();
                    let n: usize = class_sizes.iter().sum();

                    let mut worst = 0usize;
                    let mut boundary = 0usize;
                    for (bi, bucket) in partition.buckets.iter().enumerate().take(k - 1) {
                        boundary += bucket.indices.len();
                        worst = worst.max(boundary.abs_diff((bi + 1) * n / k));
                    }
                    let best = best_boundary_deviation(&class_sizes, k);
                    // within one class of optimal: a boundary can always be
                    // moved past at most one class to reach the oracle's cut
                    let max_class = class_sizes.iter().copied().max().unwrap();
                    assert!(
                        worst <= best + max_class,
                        "profile {class_sizes:?} k {k}: worst {worst} vs best {best}"
                    );
                }
            }
        }
    }
}
