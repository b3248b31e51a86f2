//! Deterministic 1-D Lloyd's k-means for weight sharing.

/// Clusters `values` into `k` groups. Centroids start at the k equally
/// spaced quantiles of the sorted values (positions `(i + 0.5) / k`), then
/// Lloyd iterations run until the assignment set stops changing or 50
/// iterations elapse. Ties in distance go to the lower cluster index; a
/// cluster that loses all members keeps its previous centroid.
///
/// Assignment is a binary search — O(n log k) per iteration instead of the
/// naive O(n·k) — whenever the centroids are sorted, which the mean update
/// almost always preserves. It can break order, though: under leftmost tie
/// breaking a duplicate centroid never receives members, keeps its stale
/// value, and its twin's mean may move past it. Each pass therefore checks
/// order first and falls back to a linear nearest scan; both paths pick
/// exactly the nearest centroid with ties to the lowest index.
///
/// Returns `(centroids, assignments)` with `assignments[i] < k`.
pub fn kmeans_1d(values: &[f64], k: usize) -> (Vec<f64>, Vec<u8>) {
    assert!(k >= 1 && k <= 256, "k must be in [1, 256]");
    assert!(values.len() >= k, "need at least k values");

    let n = values.len();
    let mut by_value: Vec<usize> = (0..n).collect();
    by_value.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let mut centroids: Vec<f64> = (0..k)
        .map(|i| {
            let pos = ((i as f64 + 0.5) / k as f64 * n as f64).floor() as usize;
            values[by_value[pos.min(n - 1)]]
        })
        .collect();

    // Each pass ends with assignments computed against the returned
    // centroids: the mean update is skipped once assignments stop changing
    // (it would be a no-op) and on the final capped pass.
    let mut assignments = vec![0u8; n];
    for pass in 0..50 {
        let sorted = centroids.windows(2).all(|w| w[0] <= w[1]);
        let mut changed = false;
        for (i, &v) in values.iter().enumerate() {
            let best = if sorted {
                nearest_sorted(&centroids, v)
            } else {
                nearest_scan(&centroids, v)
            };
            if assignments[i] != best as u8 {
                assignments[i] = best as u8;
                changed = true;
            }
        }
        // The initial assignment vector is arbitrary, so pass 0 always counts
        // as changed.
        if pass > 0 && !changed {
            break;
        }
        if pass + 1 == 50 {
            break;
        }

        let mut sums = vec![0.0f64; k];
        let mut counts = vec![0usize; k];
        for (&a, &v) in assignments.iter().zip(values) {
            sums[a as usize] += v;
            counts[a as usize] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }
    }
    (centroids, assignments)
}

/// Index of the centroid nearest to `v`, ties to the lowest index; exact for
/// sorted (possibly duplicated) centroids.
fn nearest_sorted(centroids: &[f64], v: f64) -> usize {
    let k = centroids.len();
    let at = centroids.partition_point(|c| *c < v);
    let best = if at == 0 {
        0
    } else if at == k || (v - centroids[at - 1]).abs() <= (v - centroids[at]).abs() {
        at - 1
    } else {
        at
    };
    // Equal centroids share a distance; the tie goes to the first of them.
    centroids.partition_point(|c| *c < centroids[best])
}

/// Reference nearest-centroid scan for unsorted centroids.
fn nearest_scan(centroids: &[f64], v: f64) -> usize {
    let mut best = 0usize;
    for c in 1..centroids.len() {
        if (v - centroids[c]).abs() < (v - centroids[best]).abs() {
            best = c;
        }
    }
    best
}

/// Within-cluster sum of squared errors; the quantity Lloyd's descends on.
pub fn kmeans_sse(values: &[f64], centroids: &[f64], assignments: &[u8]) -> f64 {
    values
        .iter()
        .zip(assignments)
        .map(|(&v, &a)| {
            let d = v - centroids[a as usize];
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn two_point_masses_recovered_exactly() {
        let values: Vec<f64> = [1.0; 5].iter().chain([2.0; 5].iter()).copied().collect();
        let (centroids, assignments) = kmeans_1d(&values, 2);
        let mut sorted = centroids.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, vec![1.0, 2.0]);
        assert_eq!(kmeans_sse(&values, &centroids, &assignments), 0.0);
    }

    #[test]
    fn k1_is_the_mean() {
        let values = vec![1.0, 2.0, 3.0, 6.0];
        let (centroids, assignments) = kmeans_1d(&values, 1);
        assert_eq!(centroids, vec![3.0]);
        assert!(assignments.iter().all(|a| *a == 0));
    }

    #[test]
    fn more_clusters_never_increase_sse() {
        let mut rng = SplitMix64::new(17);
        let values: Vec<f64> = (0..400).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let (c16, a16) = kmeans_1d(&values, 16);
        let (c32, a32) = kmeans_1d(&values, 32);
        let sse16 = kmeans_sse(&values, &c16, &a16);
        let sse32 = kmeans_sse(&values, &c32, &a32);
        assert!(sse32 <= sse16, "SSE(k=32) {sse32} > SSE(k=16) {sse16}");
    }

    #[test]
    fn sse_monotone_across_manual_iterations() {
        // Re-run Lloyd's by hand and watch SSE after every assignment and
        // every update phase; both must be non-increasing.
        let mut rng = SplitMix64::new(5);
        let values: Vec<f64> = (0..200).map(|_| rng.uniform(0.0, 1.0)).collect();
        let k = 8;
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let mut centroids: Vec<f64> = (0..k)
            .map(|i| sorted[((i as f64 + 0.5) / k as f64 * 200.0) as usize])
            .collect();
        let mut assignments = vec![0u8; values.len()];
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            for (i, &v) in values.iter().enumerate() {
                let mut best = 0;
                for c in 1..k {
                    if (v - centroids[c]).abs() < (v - centroids[best]).abs() {
                        best = c;
                    }
                }
                assignments[i] = best as u8;
            }
            let after_assign = kmeans_sse(&values, &centroids, &assignments);
            assert!(after_assign <= last + 1e-12);

            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for (&a, &v) in assignments.iter().zip(&values) {
                sums[a as usize] += v;
                counts[a as usize] += 1;
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centroids[c] = sums[c] / counts[c] as f64;
                }
            }
            let after_update = kmeans_sse(&values, &centroids, &assignments);
            assert!(after_update <= after_assign + 1e-12);
            last = after_update;
        }
    }

    #[test]
    fn assignments_match_brute_force_nearest_scan() {
        // The cursor walk must agree exactly with "nearest centroid, ties to
        // the lower index" evaluated independently per value.
        let mut rng = SplitMix64::new(101);
        for k in [1usize, 2, 7, 32] {
            let values: Vec<f64> = (0..500)
                .map(|i| {
                    // Mix continuous values with exact repeats to exercise ties.
                    if i % 5 == 0 {
                        (i % 10) as f64 / 10.0
                    } else {
                        rng.uniform(-1.0, 1.0)
                    }
                })
                .collect();
            let (centroids, assignments) = kmeans_1d(&values, k);
            for (i, &v) in values.iter().enumerate() {
                let mut best = 0usize;
                for c in 1..k {
                    if (v - centroids[c]).abs() < (v - centroids[best]).abs() {
                        best = c;
                    }
                }
                assert_eq!(assignments[i] as usize, best, "value {v} (k={k})");
            }
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = SplitMix64::new(33);
        let values: Vec<f64> = (0..300).map(|_| rng.uniform(-1.0, 1.0)).collect();
        assert_eq!(kmeans_1d(&values, 16), kmeans_1d(&values, 16));
    }

    #[test]
    fn k_equals_n_gives_zero_sse() {
        let values = vec![0.5, 1.5, -2.0, 7.0];
        let (c, a) = kmeans_1d(&values, 4);
        assert_eq!(kmeans_sse(&values, &c, &a), 0.0);
    }
}
