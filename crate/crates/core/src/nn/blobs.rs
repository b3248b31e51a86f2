//! Synthetic 2-D gaussian-blob classification data for tests and demos.

use super::Dataset;
use crate::rng::SplitMix64;

/// Gaussian blobs around class means evenly spaced on a circle of radius 3.
///
/// Samples are emitted class-major (all of class 0, then class 1, ...) with
/// both coordinates of a sample drawn as one Box-Muller pair, so the stream
/// consumption — and therefore the dataset — is fixed for a given seed.
pub fn gen_blobs(seed: u64, n_per_class: usize, n_classes: usize, spread: f64) -> Dataset {
    assert!(n_classes >= 2, "need at least two classes");
    assert!(n_per_class >= 1, "need at least one sample per class");
    assert!(spread >= 0.0, "spread must be non-negative");

    let mut rng = SplitMix64::new(seed);
    let mut features = Vec::with_capacity(n_per_class * n_classes * 2);
    let mut labels = Vec::with_capacity(n_per_class * n_classes);

    for class in 0..n_classes {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / n_classes as f64;
        let (cx, cy) = (3.0 * angle.cos(), 3.0 * angle.sin());
        for _ in 0..n_per_class {
            let (gx, gy) = rng.next_gaussian_pair();
            features.push(cx + spread * gx);
            features.push(cy + spread * gy);
            labels.push(class as u32);
        }
    }

    Dataset::new(2, n_classes as u32, features, labels).expect("generated dataset is well-formed")
}
