//! The 9-block network: data batch norm, the block stack with persons
//! folded into the batch, global average pooling, and the linear
//! classifier. Cross-entropy consumes the logits during training; softmax
//! is applied only at evaluation and fusion time.

use crate::error::{Error, Result};
use crate::model::block::block_forward;
use crate::model::config::NetworkConfig;
use crate::model::params::{BufStore, NetLayout, ParamVars};
use crate::model::{BN_EPS, BN_MOMENTUM};
use crate::tape::{Phase, Tape, Var};
use crate::tensor::Real;

fn check_input<E: Real>(tape: &Tape<E>, x: Var, cfg: &NetworkConfig) -> Result<[usize; 5]> {
    let xs = tape.shape(x);
    let n = cfg.skeleton.num_joints();
    if xs.len() != 5 || xs[1] != cfg.in_channels || xs[3] != n || xs[4] != cfg.persons {
        return Err(Error::ShapeMismatch {
            op: "network_forward",
            lhs: xs.to_vec(),
            rhs: vec![0, cfg.in_channels, 0, n, cfg.persons],
        });
    }
    Ok([xs[0], xs[1], xs[2], xs[3], xs[4]])
}

/// Data BN over the flattened (M·C·N) channel axis, then the block stack
/// with persons folded into the batch. Stops before block `stop_before`
/// when given, returning that block's input `[B·M, C, T', N]`.
pub fn network_trunk<E: Real>(
    tape: &mut Tape<E>,
    x: Var,
    layout: &NetLayout,
    vars: &ParamVars,
    bufs: &mut BufStore<E>,
    cfg: &NetworkConfig,
    phase: Phase,
    dropout_seeds: &[u64],
    stop_before: Option<usize>,
) -> Result<Var> {
    let [b, c, t, n, m] = check_input(tape, x, cfg)?;
    if dropout_seeds.len() < cfg.blocks.len() {
        return Err(Error::invalid(format!(
            "network_forward: need {} dropout seeds, got {}",
            cfg.blocks.len(),
            dropout_seeds.len()
        )));
    }
    // [B, C, T, N, M] -> [B, M, C, N, T] -> [B, M·C·N, T]
    let h = tape.permute(x, &[0, 4, 1, 3, 2])?;
    let h = tape.reshape(h, &[b, m * c * n, t])?;
    let h = tape.batch_norm(
        h,
        vars.get(layout.data_bn.gamma),
        vars.get(layout.data_bn.beta),
        bufs.get_mut(layout.data_bn.stats),
        phase,
        BN_MOMENTUM,
        BN_EPS,
    )?;
    // -> [B, M, C, T, N] -> [B·M, C, T, N]
    let h = tape.reshape(h, &[b, m, c, n, t])?;
    let h = tape.permute(h, &[0, 1, 2, 4, 3])?;
    let mut h = tape.reshape(h, &[b * m, c, t, n])?;
    let adjacency = crate::model::layers::register_adjacency(tape, &cfg.adjacency()?);
    for (i, (block, bc)) in layout.blocks.iter().zip(&cfg.blocks).enumerate() {
        if stop_before == Some(i) {
            return Ok(h);
        }
        h = block_forward(
            tape,
            h,
            block,
            vars,
            bufs,
            bc,
            &adjacency,
            phase,
            dropout_seeds[i],
        )?;
    }
    if let Some(stop) = stop_before {
        if stop >= cfg.blocks.len() {
            return Err(Error::invalid(format!(
                "network_forward: block index {stop} out of range"
            )));
        }
    }
    Ok(h)
}

/// Full forward pass to class logits `[B, num_classes]`: trunk, global
/// average pooling over time and joints, mean over persons, classifier.
pub fn network_forward<E: Real>(
    tape: &mut Tape<E>,
    x: Var,
    layout: &NetLayout,
    vars: &ParamVars,
    bufs: &mut BufStore<E>,
    cfg: &NetworkConfig,
    phase: Phase,
    dropout_seeds: &[u64],
) -> Result<Var> {
    let [b, _, _, _, m] = check_input(tape, x, cfg)?;
    let h = network_trunk(tape, x, layout, vars, bufs, cfg, phase, dropout_seeds, None)?;
    let pooled = tape.mean_axes(h, &[2, 3])?; // [B·M, C_head]
    let c_head = tape.shape(pooled)[1];
    let per_person = tape.reshape(pooled, &[b, m, c_head])?;
    let features = tape.mean_axes(per_person, &[1])?; // [B, C_head]
    let logits = tape.matmul(features, vars.get(layout.fc_w))?;
    tape.add(logits, vars.get(layout.fc_b))
}

/// Row softmax of logits, for evaluation and score files.
pub fn softmax_scores<E: Real>(tape: &mut Tape<E>, logits: Var) -> Result<Var> {
    tape.softmax_axis(logits, 1)
}
