//! Central-difference gradient checking. Double precision only: the
//! truncation/rounding balance at h = 1e-5 needs f64 headroom, so
//! single-precision invocations are rejected outright.

use crate::error::{Error, Result};
use crate::graph::builtin;
use crate::model::block::block_forward;
use crate::model::config::{BlockConfig, GraphToggles, LayerKind, NetworkConfig};
use crate::model::layers::{
    adaptive_spatial_forward, embedded_gaussian, register_adjacency, AdaptiveLayerVars,
    LayerResidual,
};
use crate::model::network::network_forward;
use crate::model::params::{
    build_block, Gradmap, NetParams, Param, ParamStore, ParamVars,
};
use crate::tape::{Phase, Tape, Var};
use crate::tensor::{Precision, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// One checked coordinate.
#[derive(Debug, Clone, Copy)]
pub struct CoordSample {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub samples: Vec<CoordSample>,
    pub h: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    /// Line-oriented text: one line per parameter plus a verdict line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.params {
            let verdict = if p.max_rel_err < self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            out.push_str(&format!(
                "param {} checked {} max_rel_err {:.3e} {}\n",
                p.name, p.checked, p.max_rel_err, verdict
            ));
        }
        out.push_str(&format!(
            "gradcheck h {:.1e} tolerance {:.1e} max_rel_err {:.3e} {}\n",
            self.h,
            self.tolerance,
            self.max_rel_err(),
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Aggregates coordinate samples into per-parameter maxima.
pub fn build_report(
    names: Vec<String>,
    samples: Vec<CoordSample>,
    h: f64,
    tolerance: f64,
) -> GradCheckReport {
    let mut params: Vec<ParamCheck> = names
        .into_iter()
        .map(|name| ParamCheck {
            name,
            max_rel_err: 0.0,
            checked: 0,
        })
        .collect();
    for s in &samples {
        let p = &mut params[s.param];
        p.checked += 1;
        p.max_rel_err = p.max_rel_err.max(relative_error(s.analytic, s.numeric));
    }
    GradCheckReport {
        params,
        samples,
        h,
        tolerance,
    }
}

/// Checks analytic gradients of a scalar-valued function of a parameter
/// store against central differences. The closure is called with
/// `want_grads = true` once, then twice per probed coordinate for values
/// only; it must be pure given the store (fresh batch-norm buffers, fixed
/// dropout seeds). At most `max_coords` coordinates are probed, drawn
/// without replacement from all parameters.
pub fn gradcheck<E, F>(
    store: &mut ParamStore<E>,
    mut f: F,
    h: f64,
    tolerance: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    E: Real,
    F: FnMut(&ParamStore<E>, bool) -> Result<(f64, Option<Gradmap<E>>)>,
{
    if E::PRECISION != Precision::Double {
        return Err(Error::invalid(
            "gradcheck requires double precision; finite differences are unreliable in single",
        ));
    }
    let (_, grads) = f(store, true)?;
    let grads = grads.ok_or_else(|| Error::invalid("gradcheck: closure returned no gradients"))?;
    let mut coords: Vec<(usize, usize)> = (0..store.len())
        .flat_map(|p| (0..store.value(Param(p)).numel()).map(move |i| (p, i)))
        .collect();
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::seq::SliceRandom;
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
        coords.sort_unstable();
    }
    let mut samples = Vec::with_capacity(coords.len());
    let he = E::from_f64(h);
    for (p, i) in coords {
        let original = store.value(Param(p)).data()[i];
        store.value_mut(Param(p)).data_mut()[i] = original + he;
        let plus = f(store, false)?.0;
        store.value_mut(Param(p)).data_mut()[i] = original - he;
        let minus = f(store, false)?.0;
        store.value_mut(Param(p)).data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads
            .get(p)
            .map(|t| t.data()[i].to_f64())
            .unwrap_or(0.0);
        samples.push(CoordSample {
            param: p,
            coord: i,
            analytic,
            numeric,
        });
    }
    let names = (0..store.len())
        .map(|p| store.name(Param(p)).to_string())
        .collect();
    Ok(build_report(names, samples, h, tolerance))
}

// ── Ready-made fragments ────────────────────────────────────────────────

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-amp..amp)).collect()).unwrap()
}

/// Scalar head shared by the non-classifier fragments:
/// `mean(y ⊙ R)` with a fixed random weighting R.
fn weighted_mean<E: Real>(tape: &mut Tape<E>, y: Var, r: Var) -> Result<Var> {
    let w = tape.mul(y, r)?;
    let axes: Vec<usize> = (0..tape.shape(w).len()).collect();
    tape.mean_axes(w, &axes)
}

/// Gradient check of the similarity-graph parameters θ and φ.
pub fn check_embedded_gaussian(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 5], 1.0);
    let r = rand_tensor(&mut rng, &[2, 5, 5], 1.0);
    let mut store = ParamStore::<f64>::new();
    store.add("w_theta", rand_tensor(&mut rng, &[2, 3], 0.5));
    store.add("w_phi", rand_tensor(&mut rng, &[2, 3], 0.5));
    gradcheck(
        &mut store,
        |store, want| {
            let mut tape = Tape::new();
            let vars = ParamVars::register(&mut tape, store, want);
            let xv = tape.constant(x.clone());
            let rv = tape.constant(r.clone());
            let c = embedded_gaussian(&mut tape, xv, vars.get(Param(0)), vars.get(Param(1)))?;
            let loss = weighted_mean(&mut tape, c, rv)?;
            let value = tape.value(loss).item();
            if want {
                let mut g = tape.backward(loss)?;
                Ok((value, Some(Gradmap::collect(store, &vars, &mut g))))
            } else {
                Ok((value, None))
            }
        },
        DEFAULT_H,
        DEFAULT_TOLERANCE,
        usize::MAX,
        seed,
    )
}

/// Gradient check of one adaptive layer with all three graph terms and a
/// 1×1 residual.
pub fn check_adaptive_layer(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = builtin("toy9")?;
    let adj = crate::graph::normalize(&crate::graph::build_partitions(&spec)?, 0.001)?;
    let n = spec.num_joints();
    let x = rand_tensor(&mut rng, &[2, 3, 4, n], 1.0);
    let r = rand_tensor(&mut rng, &[2, 4, 4, n], 1.0);
    let mut store = ParamStore::<f64>::new();
    for k in 0..3 {
        store.add(format!("w{k}"), rand_tensor(&mut rng, &[4, 3], 0.5));
    }
    for k in 0..3 {
        store.add(format!("b{k}"), rand_tensor(&mut rng, &[n, n], 0.3));
    }
    for k in 0..3 {
        store.add(format!("theta{k}"), rand_tensor(&mut rng, &[1, 3], 0.5));
    }
    for k in 0..3 {
        store.add(format!("phi{k}"), rand_tensor(&mut rng, &[1, 3], 0.5));
    }
    store.add("residual", rand_tensor(&mut rng, &[4, 3], 0.5));
    gradcheck(
        &mut store,
        |store, want| {
            let mut tape = Tape::new();
            let vars = ParamVars::register(&mut tape, store, want);
            let xv = tape.constant(x.clone());
            let rv = tape.constant(r.clone());
            let adj_vars = register_adjacency(&mut tape, &adj);
            let lv = AdaptiveLayerVars {
                w: (0..3).map(|k| vars.get(Param(k))).collect(),
                b: Some((3..6).map(|k| vars.get(Param(k))).collect()),
                theta: Some((6..9).map(|k| vars.get(Param(k))).collect()),
                phi: Some((9..12).map(|k| vars.get(Param(k))).collect()),
                residual: LayerResidual::Transform(vars.get(Param(12))),
            };
            let y = adaptive_spatial_forward(
                &mut tape,
                xv,
                &lv,
                Some(&adj_vars),
                GraphToggles::all(),
            )?;
            let loss = weighted_mean(&mut tape, y, rv)?;
            let value = tape.value(loss).item();
            if want {
                let mut g = tape.backward(loss)?;
                Ok((value, Some(Gradmap::collect(store, &vars, &mut g))))
            } else {
                Ok((value, None))
            }
        },
        DEFAULT_H,
        DEFAULT_TOLERANCE,
        usize::MAX,
        seed,
    )
}

/// Gradient check of one full block (train phase, dropout seed frozen).
pub fn check_block(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = builtin("toy9")?;
    let adj = crate::graph::normalize(&crate::graph::build_partitions(&spec)?, 0.001)?;
    let n = spec.num_joints();
    let cfg = BlockConfig {
        c_in: 3,
        c_out: 4,
        stride: 2,
        kernel_t: 3,
        dropout: 0.5,
        kind: LayerKind::Adaptive,
        toggles: GraphToggles::all(),
        use_mask: true,
        residual: true,
    };
    let mut store = ParamStore::<f64>::new();
    let mut bufs = crate::model::params::BufStore::new();
    let block = build_block(&mut store, &mut bufs, &cfg, n, "block", &mut rng)?;
    crate::model::params::perturb_uniform(&mut store, &mut rng, 0.2);
    let x = rand_tensor(&mut rng, &[2, 3, 6, n], 1.0);
    let r = rand_tensor(&mut rng, &[2, 4, 3, n], 1.0);
    gradcheck(
        &mut store,
        |store, want| {
            let mut tape = Tape::new();
            let vars = ParamVars::register(&mut tape, store, want);
            let xv = tape.constant(x.clone());
            let rv = tape.constant(r.clone());
            let adj_vars = register_adjacency(&mut tape, &adj);
            let mut bufs = bufs.clone();
            let y = block_forward(
                &mut tape,
                xv,
                &block,
                &vars,
                &mut bufs,
                &cfg,
                &adj_vars,
                Phase::Train,
                0x5eed,
            )?;
            let loss = weighted_mean(&mut tape, y, rv)?;
            let value = tape.value(loss).item();
            if want {
                let mut g = tape.backward(loss)?;
                Ok((value, Some(Gradmap::collect(store, &vars, &mut g))))
            } else {
                Ok((value, None))
            }
        },
        DEFAULT_H,
        DEFAULT_TOLERANCE,
        200,
        seed,
    )
}

/// Gradient check of the full toy network on a 2-sample batch through the
/// cross-entropy loss, 200 random coordinates.
pub fn check_network(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = builtin("toy9")?;
    let cfg = NetworkConfig::compact(spec, 3, 4, 1)?;
    let params = NetParams::<f64>::init(&cfg, seed)?;
    let NetParams {
        mut store,
        bufs,
        layout,
    } = params;
    crate::model::params::perturb_uniform(&mut store, &mut rng, 0.2);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 9, 1], 1.0);
    let labels = vec![rng.gen_range(0..4usize), rng.gen_range(0..4usize)];
    let seeds: Vec<u64> = (0..cfg.blocks.len()).map(|_| rng.gen()).collect();
    gradcheck(
        &mut store,
        |store, want| {
            let mut tape = Tape::new();
            let vars = ParamVars::register(&mut tape, store, want);
            let xv = tape.constant(x.clone());
            let mut bufs = bufs.clone();
            let logits = network_forward(
                &mut tape,
                xv,
                &layout,
                &vars,
                &mut bufs,
                &cfg,
                Phase::Train,
                &seeds,
            )?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss).item();
            if want {
                let mut g = tape.backward(loss)?;
                Ok((value, Some(Gradmap::collect(store, &vars, &mut g))))
            } else {
                Ok((value, None))
            }
        },
        DEFAULT_H,
        DEFAULT_TOLERANCE,
        200,
        seed,
    )
}

/// Every model operation and the check that exercises it. The coverage
/// test fails when an operation is missing from this table.
pub const MODEL_OP_CHECKS: &[(&str, &str)] = &[
    ("embedded_gaussian", "oracle_embedded_gaussian + check_embedded_gaussian"),
    ("adaptive_spatial_forward", "oracle_matrix_layer + check_adaptive_layer"),
    ("baseline_spatial_forward", "oracle_matrix_layer comparison"),
    ("block_forward", "check_block"),
    ("network_forward", "check_network + toy training"),
    ("count_params", "parameter-count delta assertions"),
];

pub const MODEL_OPS: &[&str] = &[
    "embedded_gaussian",
    "adaptive_spatial_forward",
    "baseline_spatial_forward",
    "block_forward",
    "network_forward",
    "count_params",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_single_precision() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::scalar(1.0f32));
        let err = gradcheck(
            &mut store,
            |_, _| Ok((0.0, None)),
            DEFAULT_H,
            DEFAULT_TOLERANCE,
            10,
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("double precision"), "{err}");
    }

    #[test]
    fn linear_layer_error_is_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 2], 1.0);
        let r = rand_tensor(&mut rng, &[3, 4], 1.0);
        let mut store = ParamStore::<f64>::new();
        store.add("w", rand_tensor(&mut rng, &[2, 4], 1.0));
        let report = gradcheck(
            &mut store,
            |store, want| {
                let mut tape = Tape::new();
                let vars = ParamVars::register(&mut tape, store, want);
                let xv = tape.constant(x.clone());
                let rv = tape.constant(r.clone());
                let y = tape.matmul(xv, vars.get(Param(0)))?;
                let loss = weighted_mean(&mut tape, y, rv)?;
                let value = tape.value(loss).item();
                if want {
                    let mut g = tape.backward(loss)?;
                    Ok((value, Some(Gradmap::collect(store, &vars, &mut g))))
                } else {
                    Ok((value, None))
                }
            },
            DEFAULT_H,
            DEFAULT_TOLERANCE,
            usize::MAX,
            4,
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_err() < 1e-8, "{}", report.max_rel_err());
    }

    #[test]
    fn sign_flipped_adjoint_fails_with_error_near_two() {
        let report = check_embedded_gaussian(11).unwrap();
        assert!(report.passed());
        let corrupted: Vec<CoordSample> = report
            .samples
            .iter()
            .map(|s| CoordSample {
                analytic: -s.analytic,
                ..*s
            })
            .collect();
        let names = report.params.iter().map(|p| p.name.clone()).collect();
        let bad = build_report(names, corrupted, report.h, report.tolerance);
        assert!(!bad.passed());
        assert!(
            (bad.max_rel_err() - 2.0).abs() < 0.05,
            "max err {}",
            bad.max_rel_err()
        );
    }

    #[test]
    fn op_inventory_covers_every_model_op() {
        for op in MODEL_OPS {
            assert!(
                MODEL_OP_CHECKS.iter().any(|(name, _)| name == op),
                "model op '{op}' has no registered check"
            );
        }
        assert_eq!(MODEL_OP_CHECKS.len(), MODEL_OPS.len());
    }
}
