//! Brute-force loop oracles. These share no code with the tape's fast
//! paths: everything here is explicit nested-loop arithmetic over f64
//! slices, so agreement with the layer implementations is evidence, not
//! tautology.

use crate::error::{Error, Result};
use crate::graph::{SkeletonSpec, NUM_SUBSETS};
use crate::tensor::Tensor;

/// The matrix-form layer `Σ_k W_k · f_in · G_k` by seven nested loops over
/// batch, subset, output channel, input channel, time, target vertex, and
/// source vertex. Each `G_k` is either shared `[N, N]` or per-sample
/// `[B, N, N]`. Small instances only.
pub fn oracle_matrix_layer(
    f_in: &Tensor<f64>,
    weights: &[Tensor<f64>],
    graphs: &[Tensor<f64>],
) -> Result<Tensor<f64>> {
    let xs = f_in.shape();
    if xs.len() != 4 {
        return Err(Error::invalid(format!(
            "oracle_matrix_layer: input must be [B, C, T, N], got {xs:?}"
        )));
    }
    if weights.len() != graphs.len() || weights.is_empty() {
        return Err(Error::invalid(
            "oracle_matrix_layer: need one graph per weight",
        ));
    }
    let (b, c, t, n) = (xs[0], xs[1], xs[2], xs[3]);
    let co = weights[0].shape()[0];
    for w in weights {
        if w.shape() != [co, c] {
            return Err(Error::ShapeMismatch {
                op: "oracle_matrix_layer",
                lhs: w.shape().to_vec(),
                rhs: vec![co, c],
            });
        }
    }
    let mut out = Tensor::<f64>::zeros(&[b, co, t, n]);
    for bi in 0..b {
        for (k, w) in weights.iter().enumerate() {
            let g = &graphs[k];
            let per_sample = match g.shape() {
                s if s == [n, n] => false,
                s if s == [b, n, n] => true,
                s => {
                    return Err(Error::ShapeMismatch {
                        op: "oracle_matrix_layer",
                        lhs: s.to_vec(),
                        rhs: vec![n, n],
                    })
                }
            };
            for o in 0..co {
                for ci in 0..c {
                    let w_oc = w.at(&[o, ci]);
                    for tt in 0..t {
                        for i in 0..n {
                            let mut acc = 0.0;
                            for j in 0..n {
                                let gji = if per_sample {
                                    g.at(&[bi, j, i])
                                } else {
                                    g.at(&[j, i])
                                };
                                acc += f_in.at(&[bi, ci, tt, j]) * gji;
                            }
                            let cur = out.at(&[bi, o, tt, i]);
                            out.set(&[bi, o, tt, i], cur + w_oc * acc);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The similarity graph by explicit loops: embed with θ and φ, form the
/// `N×N` logits, row-softmax with max stabilization.
pub fn oracle_embedded_gaussian(
    f_in: &Tensor<f64>,
    w_theta: &Tensor<f64>,
    w_phi: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let xs = f_in.shape();
    if xs.len() != 4 {
        return Err(Error::invalid(format!(
            "oracle_embedded_gaussian: input must be [B, C, T, N], got {xs:?}"
        )));
    }
    let (b, c, t, n) = (xs[0], xs[1], xs[2], xs[3]);
    let ce = w_theta.shape()[0];
    if w_theta.shape() != [ce, c] || w_phi.shape() != [ce, c] {
        return Err(Error::ShapeMismatch {
            op: "oracle_embedded_gaussian",
            lhs: w_theta.shape().to_vec(),
            rhs: w_phi.shape().to_vec(),
        });
    }
    let embed = |w: &Tensor<f64>, bi: usize, e: usize, tt: usize, j: usize| {
        let mut acc = 0.0;
        for ci in 0..c {
            acc += w.at(&[e, ci]) * f_in.at(&[bi, ci, tt, j]);
        }
        acc
    };
    let mut out = Tensor::<f64>::zeros(&[b, n, n]);
    for bi in 0..b {
        for i in 0..n {
            let mut logits = vec![0.0f64; n];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut acc = 0.0;
                for e in 0..ce {
                    for tt in 0..t {
                        acc += embed(w_theta, bi, e, tt, i) * embed(w_phi, bi, e, tt, j);
                    }
                }
                *l = acc;
            }
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - mx).exp();
                sum += *l;
            }
            for (j, l) in logits.iter().enumerate() {
                out.set(&[bi, i, j], l / sum);
            }
        }
    }
    Ok(out)
}

/// Literal vertex-wise convolution: for each target vertex, sum its
/// 1-neighborhood (itself included) weighted by the subset's weight matrix
/// and divided by the subset cardinality `Z_ij`. Subsets are taken from the
/// target vertex's own partition of its neighbors.
pub fn oracle_vertexwise(
    f_in: &Tensor<f64>,
    spec: &SkeletonSpec,
    weights: &[Tensor<f64>],
) -> Result<Tensor<f64>> {
    let xs = f_in.shape();
    if xs.len() != 4 || xs[3] != spec.num_joints() {
        return Err(Error::invalid(format!(
            "oracle_vertexwise: input {xs:?} does not match skeleton of {} joints",
            spec.num_joints()
        )));
    }
    if weights.len() != NUM_SUBSETS {
        return Err(Error::invalid(format!(
            "oracle_vertexwise: need {NUM_SUBSETS} weight matrices"
        )));
    }
    let (b, c, t, n) = (xs[0], xs[1], xs[2], xs[3]);
    let co = weights[0].shape()[0];
    let hops = spec.hop_distance()?;
    let subset_of = |i: usize, j: usize| -> usize {
        if i == j {
            return crate::graph::SUBSET_ROOT;
        }
        match hops[j].cmp(&hops[i]) {
            std::cmp::Ordering::Less => crate::graph::SUBSET_CENTRIPETAL,
            std::cmp::Ordering::Greater => crate::graph::SUBSET_CENTRIFUGAL,
            std::cmp::Ordering::Equal => crate::graph::SUBSET_ROOT,
        }
    };
    let mut out = Tensor::<f64>::zeros(&[b, co, t, n]);
    for bi in 0..b {
        for tt in 0..t {
            for i in 0..n {
                let mut sampling = vec![i];
                sampling.extend(spec.neighbors(i));
                for &j in &sampling {
                    let k = subset_of(i, j);
                    let z = sampling
                        .iter()
                        .filter(|&&j2| subset_of(i, j2) == k)
                        .count() as f64;
                    let w = &weights[k];
                    for o in 0..co {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            acc += w.at(&[o, ci]) * f_in.at(&[bi, ci, tt, j]);
                        }
                        let cur = out.at(&[bi, o, tt, i]);
                        out.set(&[bi, o, tt, i], cur + acc / z);
                    }
                }
            }
        }
    }
    Ok(out)
}
