//! Spatial graph convolutions: the adaptive A+B+C layer and the masked
//! baseline layer.

use crate::error::{Error, Result};
use crate::graph::{NormalizedAdjacency, NUM_SUBSETS};
use crate::model::config::GraphToggles;
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// Residual path of a spatial layer.
#[derive(Debug, Clone, Copy)]
pub enum LayerResidual {
    Off,
    /// Input added unchanged; channels must already match.
    Identity,
    /// 1×1 channel transform of the input.
    Transform(Var),
}

/// Tape handles of one adaptive layer.
pub struct AdaptiveLayerVars {
    pub w: Vec<Var>,
    pub b: Option<Vec<Var>>,
    pub theta: Option<Vec<Var>>,
    pub phi: Option<Vec<Var>>,
    pub residual: LayerResidual,
}

/// Tape handles of one baseline layer.
pub struct BaselineLayerVars {
    pub w: Vec<Var>,
    pub mask: Option<Vec<Var>>,
    pub residual: LayerResidual,
}

/// Registers the fixed normalized adjacency stack as tape constants.
pub fn register_adjacency<E: Real>(tape: &mut Tape<E>, adj: &NormalizedAdjacency) -> Vec<Var> {
    adj.matrices
        .iter()
        .map(|m| tape.constant(m.cast::<E>()))
        .collect()
}

/// 1×1 convolution over the channel axis: `w [C_out, C_in]` applied to
/// `x [B, C_in, T, N]`.
pub fn channel_mix<E: Real>(tape: &mut Tape<E>, w: Var, x: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    if xs.len() != 4 || ws.len() != 2 || ws[1] != xs[1] {
        return Err(Error::ShapeMismatch {
            op: "channel_mix",
            lhs: xs,
            rhs: ws,
        });
    }
    let (b, _c, t, n) = (xs[0], xs[1], xs[2], xs[3]);
    let flat = tape.reshape(x, &[b, xs[1], t * n])?;
    let y = tape.matmul(w, flat)?;
    tape.reshape(y, &[b, ws[0], t, n])
}

/// Data-dependent similarity graph: embeds `f_in [B, C, T, N]` with θ and φ
/// (`[C_e, C]` each), flattens to `N×(C_e·T)` and `(C_e·T)×N` per sample,
/// multiplies, and row-softmaxes. Every row of the result sums to 1; with
/// zero embeddings every entry is exactly `1/N`.
pub fn embedded_gaussian<E: Real>(
    tape: &mut Tape<E>,
    f_in: Var,
    w_theta: Var,
    w_phi: Var,
) -> Result<Var> {
    let xs = tape.shape(f_in).to_vec();
    if xs.len() != 4 {
        return Err(Error::invalid(format!(
            "embedded_gaussian: input must be [B, C, T, N], got {xs:?}"
        )));
    }
    let (b, t, n) = (xs[0], xs[2], xs[3]);
    let th = channel_mix(tape, w_theta, f_in)?;
    let ph = channel_mix(tape, w_phi, f_in)?;
    let ce = tape.shape(th)[1];
    if tape.shape(ph)[1] != ce {
        return Err(Error::ShapeMismatch {
            op: "embedded_gaussian",
            lhs: tape.shape(th).to_vec(),
            rhs: tape.shape(ph).to_vec(),
        });
    }
    let th = tape.permute(th, &[0, 3, 1, 2])?; // [B, N, Ce, T]
    let th = tape.reshape(th, &[b, n, ce * t])?;
    let ph = tape.reshape(ph, &[b, ce * t, n])?;
    let logits = tape.matmul(th, ph)?; // [B, N, N]
    tape.softmax_axis(logits, 2)
}

fn apply_residual<E: Real>(
    tape: &mut Tape<E>,
    y: Var,
    f_in: Var,
    residual: LayerResidual,
) -> Result<Var> {
    match residual {
        LayerResidual::Off => Ok(y),
        LayerResidual::Identity => {
            if tape.shape(y) != tape.shape(f_in) {
                return Err(Error::ShapeMismatch {
                    op: "layer_residual",
                    lhs: tape.shape(y).to_vec(),
                    rhs: tape.shape(f_in).to_vec(),
                });
            }
            tape.add(y, f_in)
        }
        LayerResidual::Transform(w) => {
            let r = channel_mix(tape, w, f_in)?;
            tape.add(y, r)
        }
    }
}

/// Adaptive spatial convolution: `Σ_k W_k · f_in · (A_k + B_k + C_k)`,
/// disabled terms dropped per the toggles, plus the layer residual. The
/// graph product is a right multiplication: output vertex i collects
/// `Σ_j f[.., j] · G[j, i]`.
pub fn adaptive_spatial_forward<E: Real>(
    tape: &mut Tape<E>,
    f_in: Var,
    layer: &AdaptiveLayerVars,
    adjacency: Option<&[Var]>,
    toggles: GraphToggles,
) -> Result<Var> {
    if !toggles.any() {
        return Err(Error::invalid(
            "adaptive layer: A, B and C all disabled leaves no graph term",
        ));
    }
    if layer.w.len() != NUM_SUBSETS {
        return Err(Error::invalid(format!(
            "adaptive layer: expected {NUM_SUBSETS} channel weights, got {}",
            layer.w.len()
        )));
    }
    let xs = tape.shape(f_in).to_vec();
    if xs.len() != 4 {
        return Err(Error::invalid(format!(
            "adaptive layer: input must be [B, C, T, N], got {xs:?}"
        )));
    }
    let (b, c, t, n) = (xs[0], xs[1], xs[2], xs[3]);
    let adj = if toggles.use_a {
        Some(adjacency.ok_or_else(|| {
            Error::invalid("adaptive layer: A term enabled but no adjacency supplied")
        })?)
    } else {
        None
    };
    let bs = if toggles.use_b {
        Some(
            layer
                .b
                .as_deref()
                .ok_or_else(|| Error::invalid("adaptive layer: B term enabled but no B_k vars"))?,
        )
    } else {
        None
    };
    let embeds = if toggles.use_c {
        let theta = layer
            .theta
            .as_deref()
            .ok_or_else(|| Error::invalid("adaptive layer: C term enabled but no θ vars"))?;
        let phi = layer
            .phi
            .as_deref()
            .ok_or_else(|| Error::invalid("adaptive layer: C term enabled but no φ vars"))?;
        Some((theta, phi))
    } else {
        None
    };

    let x_flat = tape.reshape(f_in, &[b, c * t, n])?;
    let mut acc: Option<Var> = None;
    for k in 0..NUM_SUBSETS {
        // Static [N, N] part first, then the per-sample [B, N, N] term on
        // the left so the suffix broadcast lines up.
        let mut graph: Option<Var> = None;
        if let Some(adj) = adj {
            graph = Some(adj[k]);
        }
        if let Some(bs) = bs {
            graph = Some(match graph {
                Some(g) => tape.add(g, bs[k])?,
                None => bs[k],
            });
        }
        if let Some((theta, phi)) = embeds {
            let ck = embedded_gaussian(tape, f_in, theta[k], phi[k])?;
            graph = Some(match graph {
                Some(g) => tape.add(ck, g)?,
                None => ck,
            });
        }
        let g = graph.expect("at least one term enabled");
        let xg = tape.matmul(x_flat, g)?;
        let xg = tape.reshape(xg, &[b, c, t, n])?;
        let yk = channel_mix(tape, layer.w[k], xg)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, yk)?,
            None => yk,
        });
    }
    apply_residual(tape, acc.expect("three subsets"), f_in, layer.residual)
}

/// Baseline spatial convolution: `Σ_k W_k · f_in · (A_k ⊙ M_k)`. Without
/// the mask, M_k is the all-ones matrix; a zero in A_k stays zero whatever
/// the mask holds, so the mask can scale but never create connections.
pub fn baseline_spatial_forward<E: Real>(
    tape: &mut Tape<E>,
    f_in: Var,
    layer: &BaselineLayerVars,
    adjacency: &[Var],
) -> Result<Var> {
    if layer.w.len() != NUM_SUBSETS || adjacency.len() != NUM_SUBSETS {
        return Err(Error::invalid(format!(
            "baseline layer: expected {NUM_SUBSETS} subsets, got {} weights and {} adjacencies",
            layer.w.len(),
            adjacency.len()
        )));
    }
    let xs = tape.shape(f_in).to_vec();
    if xs.len() != 4 {
        return Err(Error::invalid(format!(
            "baseline layer: input must be [B, C, T, N], got {xs:?}"
        )));
    }
    let (b, c, t, n) = (xs[0], xs[1], xs[2], xs[3]);
    let x_flat = tape.reshape(f_in, &[b, c * t, n])?;
    let mut acc: Option<Var> = None;
    for k in 0..NUM_SUBSETS {
        let g = match &layer.mask {
            Some(mask) => tape.mul(adjacency[k], mask[k])?,
            None => adjacency[k],
        };
        let xg = tape.matmul(x_flat, g)?;
        let xg = tape.reshape(xg, &[b, c, t, n])?;
        let yk = channel_mix(tape, layer.w[k], xg)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, yk)?,
            None => yk,
        });
    }
    apply_residual(tape, acc.expect("three subsets"), f_in, layer.residual)
}
