//! One spatial+temporal block:
//! `y = ReLU(BN(Convt(Dropout(ReLU(BN(Spatial(x)))))) + BlockResidual(x))`.
//! The block residual is the identity when shapes match and a strided 1×1
//! convolution followed by BN otherwise.

use crate::error::Result;
use crate::model::config::BlockConfig;
use crate::model::layers::{
    adaptive_spatial_forward, baseline_spatial_forward, AdaptiveLayerVars, BaselineLayerVars,
    LayerResidual,
};
use crate::model::params::{BlockParams, BufStore, ParamVars, SpatialParams};
use crate::model::{BN_EPS, BN_MOMENTUM};
use crate::tape::{Phase, Tape, Var};
use crate::tensor::Real;

fn layer_residual(cfg: &BlockConfig, residual: &Option<crate::model::params::Param>, vars: &ParamVars) -> LayerResidual {
    if !cfg.residual {
        LayerResidual::Off
    } else {
        match residual {
            Some(p) => LayerResidual::Transform(vars.get(*p)),
            None => LayerResidual::Identity,
        }
    }
}

pub fn block_forward<E: Real>(
    tape: &mut Tape<E>,
    x: Var,
    block: &BlockParams,
    vars: &ParamVars,
    bufs: &mut BufStore<E>,
    cfg: &BlockConfig,
    adjacency: &[Var],
    phase: Phase,
    dropout_seed: u64,
) -> Result<Var> {
    let s = match &block.spatial {
        SpatialParams::Adaptive {
            w,
            b,
            theta,
            phi,
            residual,
        } => {
            let lv = AdaptiveLayerVars {
                w: w.iter().map(|p| vars.get(*p)).collect(),
                b: b.as_ref().map(|ps| ps.iter().map(|p| vars.get(*p)).collect()),
                theta: theta
                    .as_ref()
                    .map(|ps| ps.iter().map(|p| vars.get(*p)).collect()),
                phi: phi
                    .as_ref()
                    .map(|ps| ps.iter().map(|p| vars.get(*p)).collect()),
                residual: layer_residual(cfg, residual, vars),
            };
            let adj = cfg.toggles.use_a.then_some(adjacency);
            adaptive_spatial_forward(tape, x, &lv, adj, cfg.toggles)?
        }
        SpatialParams::Baseline { w, mask, residual } => {
            let lv = BaselineLayerVars {
                w: w.iter().map(|p| vars.get(*p)).collect(),
                mask: mask
                    .as_ref()
                    .map(|ps| ps.iter().map(|p| vars.get(*p)).collect()),
                residual: layer_residual(cfg, residual, vars),
            };
            baseline_spatial_forward(tape, x, &lv, adjacency)?
        }
    };
    let s = tape.batch_norm(
        s,
        vars.get(block.bn_s.gamma),
        vars.get(block.bn_s.beta),
        bufs.get_mut(block.bn_s.stats),
        phase,
        BN_MOMENTUM,
        BN_EPS,
    )?;
    let s = tape.relu(s);
    let s = tape.dropout(s, cfg.dropout, phase, dropout_seed)?;
    let pad = (cfg.kernel_t - 1) / 2;
    let t = tape.temporal_conv(s, vars.get(block.w_t), cfg.stride, pad)?;
    let t = tape.batch_norm(
        t,
        vars.get(block.bn_t.gamma),
        vars.get(block.bn_t.beta),
        bufs.get_mut(block.bn_t.stats),
        phase,
        BN_MOMENTUM,
        BN_EPS,
    )?;
    let shortcut = match &block.shortcut {
        None => x,
        Some((w, bn)) => {
            let r = tape.temporal_conv(x, vars.get(*w), cfg.stride, 0)?;
            tape.batch_norm(
                r,
                vars.get(bn.gamma),
                vars.get(bn.beta),
                bufs.get_mut(bn.stats),
                phase,
                BN_MOMENTUM,
                BN_EPS,
            )?
        }
    };
    let y = tape.add(t, shortcut)?;
    Ok(tape.relu(y))
}
