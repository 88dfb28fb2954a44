//! Second-order features: the bone vector stored at each joint slot points
//! from the joint's parent (the unique neighbor closer to the center) to
//! the joint itself. The center joint keeps an empty zero bone so bone
//! sequences share the joint layout.

use crate::data::sample::SkeletonSequence;
use crate::error::{Error, Result};
use crate::graph::SkeletonSpec;

pub fn joints_to_bones(seq: &SkeletonSequence, spec: &SkeletonSpec) -> Result<SkeletonSequence> {
    if seq.joints() != spec.num_joints() {
        return Err(Error::invalid(format!(
            "bones: sample has {} joints, skeleton '{}' has {}",
            seq.joints(),
            spec.name(),
            spec.num_joints()
        )));
    }
    let parents = spec.parents()?;
    let mut out = SkeletonSequence::zeros(
        seq.id.clone(),
        seq.label,
        seq.channels(),
        seq.frames(),
        seq.joints(),
        seq.persons(),
    )?;
    for m in 0..seq.persons() {
        for t in 0..seq.frames() {
            for (j, parent) in parents.iter().enumerate() {
                if let Some(p) = parent {
                    for c in 0..seq.channels() {
                        out.set(c, t, j, m, seq.get(c, t, j, m) - seq.get(c, t, *p, m));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::builtin;

    #[test]
    fn bone_vector_formula() {
        // Source (1,2,3) at the parent, target (4,6,8) -> bone (3,4,5).
        let spec = SkeletonSpec::new("pair", 2, vec![(0, 1)], 0).unwrap();
        let mut seq = SkeletonSequence::zeros("s", 0, 3, 1, 2, 1).unwrap();
        seq.set_joint(0, 0, 0, &[1.0, 2.0, 3.0]);
        seq.set_joint(0, 1, 0, &[4.0, 6.0, 8.0]);
        let bones = joints_to_bones(&seq, &spec).unwrap();
        assert_eq!(bones.joint(0, 1, 0), vec![3.0, 4.0, 5.0]);
        assert_eq!(bones.joint(0, 0, 0), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn coincident_joints_give_zero_bones() {
        let spec = builtin("toy9").unwrap();
        let mut seq = SkeletonSequence::zeros("s", 0, 3, 2, 9, 1).unwrap();
        for t in 0..2 {
            for n in 0..9 {
                seq.set_joint(t, n, 0, &[0.5, -0.25, 1.0]);
            }
        }
        let bones = joints_to_bones(&seq, &spec).unwrap();
        assert!(bones.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn toy9_has_eight_bones_and_a_zero_center() {
        let spec = builtin("toy9").unwrap();
        let mut seq = SkeletonSequence::zeros("s", 0, 3, 1, 9, 1).unwrap();
        for n in 0..9 {
            seq.set_joint(0, n, 0, &[n as f32 + 1.0, 2.0 * n as f32 + 1.0, 0.5]);
        }
        let bones = joints_to_bones(&seq, &spec).unwrap();
        let nonzero = (0..9)
            .filter(|&n| bones.joint(0, n, 0).iter().any(|&v| v != 0.0))
            .count();
        assert_eq!(nonzero, 8);
        assert_eq!(bones.joint(0, spec.center(), 0), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn path_sum_reconstructs_leaf_minus_center() {
        let spec = builtin("toy9").unwrap();
        let parents = spec.parents().unwrap();
        let mut seq = SkeletonSequence::zeros("s", 0, 3, 1, 9, 1).unwrap();
        for n in 0..9 {
            seq.set_joint(0, n, 0, &[0.3 * n as f32, 1.0 - 0.1 * n as f32, n as f32 * n as f32]);
        }
        let bones = joints_to_bones(&seq, &spec).unwrap();
        for leaf in [2usize, 4, 6, 7, 8] {
            let mut sum = vec![0.0f32; 3];
            let mut j = leaf;
            while let Some(p) = parents[j] {
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += bones.get(c, 0, j, 0);
                }
                j = p;
            }
            for c in 0..3 {
                let want = seq.get(c, 0, leaf, 0) - seq.get(c, 0, spec.center(), 0);
                assert!((sum[c] - want).abs() < 1e-6, "leaf {leaf} channel {c}");
            }
        }
    }

    #[test]
    fn cyclic_spec_is_rejected() {
        let tri = SkeletonSpec::new("tri", 3, vec![(0, 1), (0, 2), (1, 2)], 0).unwrap();
        let seq = SkeletonSequence::zeros("s", 0, 3, 1, 3, 1).unwrap();
        assert!(joints_to_bones(&seq, &tri).is_err());
    }
}
