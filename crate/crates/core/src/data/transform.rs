//! Temporal padding and train-time augmentation.

use crate::data::sample::SkeletonSequence;
use crate::error::{Error, Result};
use rand::Rng;

/// Rotation angle bound per axis, radians.
pub const AUGMENT_MAX_ROTATION: f64 = 0.3;
/// Translation bound per axis.
pub const AUGMENT_MAX_SHIFT: f64 = 0.1;

/// Tiles the sequence cyclically until it reaches `t_target` frames, then
/// truncates. Idempotent at the target length.
pub fn pad_repeat(seq: &SkeletonSequence, t_target: usize) -> Result<SkeletonSequence> {
    if t_target == 0 {
        return Err(Error::invalid("pad_repeat: target length must be positive"));
    }
    if t_target == seq.frames() {
        return Ok(seq.clone());
    }
    let mut out = SkeletonSequence::zeros(
        seq.id.clone(),
        seq.label,
        seq.channels(),
        t_target,
        seq.joints(),
        seq.persons(),
    )?;
    for t in 0..t_target {
        let src = t % seq.frames();
        for m in 0..seq.persons() {
            for n in 0..seq.joints() {
                for c in 0..seq.channels() {
                    out.set(c, t, n, m, seq.get(c, src, n, m));
                }
            }
        }
    }
    Ok(out)
}

/// A drawn augmentation: a contiguous frame window plus one rigid motion
/// shared by the whole sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub window_start: usize,
    pub crop_frames: usize,
    /// Rotation angles (radians). 3D data rotates about x, then y, then z;
    /// 2D data rotates in-plane by the first angle only.
    pub angles: [f64; 3],
    pub shift: [f64; 3],
}

/// Draws a random window, rotation, and translation, then applies them.
pub fn augment(
    seq: &SkeletonSequence,
    crop_frames: usize,
    rng: &mut impl Rng,
) -> Result<SkeletonSequence> {
    if crop_frames > seq.frames() || crop_frames == 0 {
        return Err(Error::invalid(format!(
            "augment: crop of {crop_frames} frames from a {}-frame sequence",
            seq.frames()
        )));
    }
    let window_start = if crop_frames == seq.frames() {
        0
    } else {
        rng.gen_range(0..=seq.frames() - crop_frames)
    };
    let mut angles = [0.0; 3];
    let mut shift = [0.0; 3];
    for d in 0..3 {
        angles[d] = rng.gen_range(-AUGMENT_MAX_ROTATION..AUGMENT_MAX_ROTATION);
        shift[d] = rng.gen_range(-AUGMENT_MAX_SHIFT..AUGMENT_MAX_SHIFT);
    }
    apply_augment(
        seq,
        &AugmentParams {
            window_start,
            crop_frames,
            angles,
            shift,
        },
    )
}

fn rotation_3d(angles: &[f64; 3]) -> [[f64; 3]; 3] {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sc, cc) = angles[2].sin_cos();
    // Rz(c) · Ry(b) · Rx(a)
    [
        [cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa],
        [sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa],
        [-sb, cb * sa, cb * ca],
    ]
}

/// Deterministic core of [`augment`]: crops the window and applies the
/// rigid motion to every nonzero joint, leaving zero padding untouched.
pub fn apply_augment(seq: &SkeletonSequence, params: &AugmentParams) -> Result<SkeletonSequence> {
    if params.window_start + params.crop_frames > seq.frames() || params.crop_frames == 0 {
        return Err(Error::invalid(format!(
            "augment: window [{}, {}) outside {} frames",
            params.window_start,
            params.window_start + params.crop_frames,
            seq.frames()
        )));
    }
    let c = seq.channels();
    let mut out = SkeletonSequence::zeros(
        seq.id.clone(),
        seq.label,
        c,
        params.crop_frames,
        seq.joints(),
        seq.persons(),
    )?;
    let rot3 = rotation_3d(&params.angles);
    let (s2, c2) = params.angles[0].sin_cos();
    for t in 0..params.crop_frames {
        let src_t = params.window_start + t;
        for m in 0..seq.persons() {
            for n in 0..seq.joints() {
                let joint = seq.joint(src_t, n, m);
                if joint.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let mut moved = vec![0.0f32; c];
                if c == 3 {
                    for (row, mv) in rot3.iter().zip(moved.iter_mut()) {
                        let v = row[0] * joint[0] as f64
                            + row[1] * joint[1] as f64
                            + row[2] * joint[2] as f64;
                        *mv = v as f32;
                    }
                } else {
                    moved[0] = (c2 * joint[0] as f64 - s2 * joint[1] as f64) as f32;
                    moved[1] = (s2 * joint[0] as f64 + c2 * joint[1] as f64) as f32;
                }
                for (d, mv) in moved.iter_mut().enumerate() {
                    *mv += params.shift[d] as f32;
                }
                out.set_joint(t, n, m, &moved);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> SkeletonSequence {
        let mut s = SkeletonSequence::zeros("a", 1, 3, 4, 3, 1).unwrap();
        for t in 0..4 {
            for n in 0..3 {
                s.set_joint(
                    t,
                    n,
                    0,
                    &[t as f32 + 0.5, n as f32 - 1.0, 0.25 * (t * n) as f32 + 0.1],
                );
            }
        }
        s
    }

    #[test]
    fn pad_repeat_noop_at_target() {
        let s = sample();
        let out = pad_repeat(&s, 4).unwrap();
        assert_eq!(s, out);
    }

    #[test]
    fn pad_repeat_tiles_cyclically() {
        let mut s = SkeletonSequence::zeros("ab", 0, 2, 2, 1, 1).unwrap();
        s.set_joint(0, 0, 0, &[1.0, 1.0]);
        s.set_joint(1, 0, 0, &[2.0, 2.0]);
        let out = pad_repeat(&s, 5).unwrap();
        let got: Vec<f32> = (0..5).map(|t| out.get(0, t, 0, 0)).collect();
        assert_eq!(got, vec![1.0, 2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn pad_repeat_doubles_exactly() {
        let s = sample();
        let out = pad_repeat(&s, 8).unwrap();
        for t in 0..8 {
            assert_eq!(out.joint(t, 1, 0), s.joint(t % 4, 1, 0));
        }
    }

    #[test]
    fn pad_repeat_rejects_zero_target() {
        assert!(pad_repeat(&sample(), 0).is_err());
    }

    #[test]
    fn identity_params_leave_sequence_unchanged() {
        let s = sample();
        let out = apply_augment(
            &s,
            &AugmentParams {
                window_start: 0,
                crop_frames: 4,
                angles: [0.0; 3],
                shift: [0.0; 3],
            },
        )
        .unwrap();
        assert_eq!(s, out);
    }

    #[test]
    fn pure_translation_shifts_every_nonzero_joint() {
        let s = sample();
        let shift = [0.05, -0.03, 0.08];
        let out = apply_augment(
            &s,
            &AugmentParams {
                window_start: 0,
                crop_frames: 4,
                angles: [0.0; 3],
                shift,
            },
        )
        .unwrap();
        for t in 0..4 {
            for n in 0..3 {
                let a = s.joint(t, n, 0);
                let b = out.joint(t, n, 0);
                for c in 0..3 {
                    assert!((b[c] - (a[c] + shift[c] as f32)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_padding_stays_zero() {
        let mut s = sample();
        s.set_joint(2, 1, 0, &[0.0, 0.0, 0.0]);
        let out = augment(&s, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out.joint(2, 1, 0), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn fixed_seed_replays_bit_identically() {
        let s = sample();
        let a = augment(&s, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment(&s, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_longer_than_sequence_rejected() {
        assert!(augment(&sample(), 5, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn rigid_motion_preserves_pairwise_distances() {
        let s = sample();
        let out = augment(&s, 4, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        for t in 0..4 {
            for a in 0..3 {
                for b in (a + 1)..3 {
                    let d0: f32 = s
                        .joint(t, a, 0)
                        .iter()
                        .zip(s.joint(t, b, 0))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f32>()
                        .sqrt();
                    let d1: f32 = out
                        .joint(t, a, 0)
                        .iter()
                        .zip(out.joint(t, b, 0))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f32>()
                        .sqrt();
                    assert!((d0 - d1).abs() < 1e-5, "t={t} pair=({a},{b})");
                }
            }
        }
    }
}
