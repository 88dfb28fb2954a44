//! Nearest-centroid baseline on handcrafted velocity features. A sanity
//! oracle: if this cannot separate a dataset, no network result on it is
//! trustworthy.

use crate::data::sample::SkeletonSequence;

/// Per-sample feature vector: mean signed frame-to-frame velocity per
/// (channel, joint), then mean speed per joint. Person 0 only.
pub fn velocity_features(seq: &SkeletonSequence) -> Vec<f64> {
    let (c, t, n) = (seq.channels(), seq.frames(), seq.joints());
    let steps = (t - 1).max(1) as f64;
    let mut features = Vec::with_capacity(c * n + n);
    for ch in 0..c {
        for j in 0..n {
            let mut v = 0.0f64;
            for tt in 1..t {
                v += (seq.get(ch, tt, j, 0) - seq.get(ch, tt - 1, j, 0)) as f64;
            }
            features.push(v / steps);
        }
    }
    for j in 0..n {
        let mut speed = 0.0f64;
        for tt in 1..t {
            let mut d2 = 0.0f64;
            for ch in 0..c {
                let d = (seq.get(ch, tt, j, 0) - seq.get(ch, tt - 1, j, 0)) as f64;
                d2 += d * d;
            }
            speed += d2.sqrt();
        }
        features.push(speed / steps);
    }
    features
}

/// Trains per-class centroids on `train` and reports accuracy on `eval`.
pub fn nearest_centroid_accuracy(train: &[SkeletonSequence], eval: &[SkeletonSequence]) -> f64 {
    if train.is_empty() || eval.is_empty() {
        return 0.0;
    }
    let num_classes = train.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let dim = velocity_features(&train[0]).len();
    let mut centroids = vec![vec![0.0f64; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for s in train {
        let f = velocity_features(s);
        for (acc, v) in centroids[s.label].iter_mut().zip(&f) {
            *acc += v;
        }
        counts[s.label] += 1;
    }
    for (centroid, &count) in centroids.iter_mut().zip(&counts) {
        if count > 0 {
            for v in centroid.iter_mut() {
                *v /= count as f64;
            }
        }
    }
    let mut correct = 0usize;
    for s in eval {
        let f = velocity_features(s);
        let mut best = (f64::INFINITY, 0usize);
        for (class, centroid) in centroids.iter().enumerate() {
            if counts[class] == 0 {
                continue;
            }
            let d2: f64 = centroid
                .iter()
                .zip(&f)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2 < best.0 {
                best = (d2, class);
            }
        }
        if best.1 == s.label {
            correct += 1;
        }
    }
    correct as f64 / eval.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthConfig};
    use crate::graph::builtin;

    #[test]
    fn synthetic_classes_are_separable() {
        let dir = std::env::temp_dir().join("agcn_baseline_test");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let manifest = synth_generate(
            &builtin("toy9").unwrap(),
            &SynthConfig {
                train_per_class: 10,
                val_per_class: 5,
                frames: 16,
                seed: 23,
            },
            &dir,
        )
        .unwrap();
        let train = manifest.load_split("train").unwrap();
        let val = manifest.load_split("val").unwrap();
        let acc = nearest_centroid_accuracy(&train, &val);
        assert!(acc > 0.9, "nearest-centroid accuracy {acc}");
    }
}
