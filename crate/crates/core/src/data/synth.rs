//! Deterministic synthetic motion dataset on the toy9 body.
//!
//! Four classes: standing still with small jitter, a sinusoidal left-arm
//! tip wave, a linear whole-body walk, and a whole-body spin about the
//! center joint. Per-sample phase/speed jitter is ±20%; every sample also
//! carries σ=0.01 Gaussian coordinate noise.

use crate::data::manifest::{DatasetManifest, ManifestRecord};
use crate::data::sample::{write_sample, SkeletonSequence};
use crate::error::{Error, Result};
use crate::graph::SkeletonSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::path::Path;

pub const CLASS_NAMES: [&str; 4] = ["still", "wave", "walk", "spin"];

/// Rest pose of the toy9 body, `[joint][xyz]`, roughly unit scale.
const BASE_POSE: [[f64; 3]; 9] = [
    [0.0, 0.0, 0.0],    // 0 trunk base
    [0.0, 0.5, 0.0],    // 1 trunk middle (center joint)
    [0.0, 1.0, 0.0],    // 2 trunk top
    [0.4, 0.5, 0.0],    // 3 left arm
    [0.8, 0.5, 0.0],    // 4 left arm tip
    [-0.4, 0.5, 0.0],   // 5 right arm
    [-0.8, 0.5, 0.0],   // 6 right arm tip
    [0.25, -0.5, 0.0],  // 7 left leg
    [-0.25, -0.5, 0.0], // 8 right leg
];

const NOISE_SIGMA: f64 = 0.01;
const WAVE_JOINT: usize = 4;
const WAVE_AMPLITUDE: f64 = 0.5;
const WALK_DISTANCE: f64 = 1.0;
const SPIN_ANGLE: f64 = PI / 2.0;
const JITTER: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub frames: usize,
    pub seed: u64,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn generate_sample(
    id: String,
    class: usize,
    frames: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SkeletonSequence> {
    let speed = 1.0 + rng.gen_range(-JITTER..JITTER);
    let phase = rng.gen_range(-JITTER..JITTER) * 2.0 * PI;
    let mut seq = SkeletonSequence::zeros(id, class, 3, frames, 9, 1)?;
    let center = BASE_POSE[1];
    for t in 0..frames {
        let progress = if frames > 1 {
            t as f64 / (frames - 1) as f64
        } else {
            0.0
        };
        for (n, base) in BASE_POSE.iter().enumerate() {
            let mut p = *base;
            match class {
                0 => {}
                1 => {
                    if n == WAVE_JOINT {
                        p[1] += WAVE_AMPLITUDE
                            * (2.0 * PI * speed * t as f64 / frames as f64 + phase).sin();
                    }
                }
                2 => {
                    p[0] += WALK_DISTANCE * speed * progress;
                }
                3 => {
                    let angle = SPIN_ANGLE * speed * progress;
                    let (sa, ca) = angle.sin_cos();
                    let dx = p[0] - center[0];
                    let dy = p[1] - center[1];
                    p[0] = center[0] + ca * dx - sa * dy;
                    p[1] = center[1] + sa * dx + ca * dy;
                }
                _ => return Err(Error::invalid(format!("synthetic class {class} unknown"))),
            }
            let jittered = [
                (p[0] + NOISE_SIGMA * gauss(rng)) as f32,
                (p[1] + NOISE_SIGMA * gauss(rng)) as f32,
                (p[2] + NOISE_SIGMA * gauss(rng)) as f32,
            ];
            seq.set_joint(t, n, 0, &jittered);
        }
    }
    Ok(seq)
}

/// Generates the dataset into `out_dir` (sample files plus
/// `manifest.tsv`) and returns the manifest. Byte-identical for a fixed
/// seed.
pub fn synth_generate(
    spec: &SkeletonSpec,
    cfg: &SynthConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if spec.name() != "toy9" || spec.num_joints() != 9 {
        return Err(Error::invalid(format!(
            "synthetic generator knows only the toy9 body, got '{}'",
            spec.name()
        )));
    }
    if cfg.frames < 2 {
        return Err(Error::invalid("synthetic generator needs at least 2 frames"));
    }
    if cfg.train_per_class == 0 {
        return Err(Error::invalid(
            "synthetic generator: empty split (train_per_class = 0)",
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    for (split, count) in [("train", cfg.train_per_class), ("val", cfg.val_per_class)] {
        for class in 0..CLASS_NAMES.len() {
            for idx in 0..count {
                let name = format!("{split}_c{class}_{idx:04}");
                let seq = generate_sample(name.clone(), class, cfg.frames, &mut rng)?;
                let file = format!("{name}.skl");
                write_sample(&out_dir.join(&file), &seq)?;
                records.push(ManifestRecord {
                    path: file,
                    label: class,
                    split: split.to_string(),
                });
            }
        }
    }
    let manifest = DatasetManifest {
        spec_name: spec.name().to_string(),
        channels: 3,
        frames: cfg.frames,
        persons: 1,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        records,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
