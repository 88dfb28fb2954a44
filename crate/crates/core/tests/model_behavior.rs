//! Behavioral checks of the spatial layers, block, and network against
//! hand-computed cases and the loop oracles.

use agcn_core::graph::{build_partitions, builtin, normalize, SkeletonSpec, NUM_SUBSETS};
use agcn_core::model::{
    adaptive_spatial_forward, baseline_spatial_forward, block_forward, build_block,
    embedded_gaussian, network_forward, register_adjacency, AdaptiveLayerVars, BaselineLayerVars,
    BlockConfig, BufStore, GraphToggles, Gradmap, LayerKind, LayerResidual, NetParams,
    NetworkConfig, Param, ParamStore, ParamVars,
};
use agcn_core::tape::{Phase, Tape};
use agcn_core::tensor::Tensor;
use agcn_core::verify::{gradcheck, oracle_embedded_gaussian, oracle_matrix_layer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rnd(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-amp..amp)).collect()).unwrap()
}

fn eye(n: usize) -> Tensor<f64> {
    let mut t = Tensor::<f64>::zeros(&[n, n]);
    for i in 0..n {
        t.set(&[i, i], 1.0);
    }
    t
}

#[test]
fn embedded_gaussian_zero_weights_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rnd(&mut rng, &[2, 3, 4, 6], 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let th = tape.constant(Tensor::zeros(&[2, 3]));
    let ph = tape.constant(Tensor::zeros(&[2, 3]));
    let c = embedded_gaussian(&mut tape, xv, th, ph).unwrap();
    for &v in tape.value(c).data() {
        assert!((v - 1.0 / 6.0).abs() < 1e-7);
    }
}

#[test]
fn embedded_gaussian_single_vertex_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rnd(&mut rng, &[1, 2, 3, 1], 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let th = tape.constant(rnd(&mut rng, &[1, 2], 0.5));
    let ph = tape.constant(rnd(&mut rng, &[1, 2], 0.5));
    let c = embedded_gaussian(&mut tape, xv, th, ph).unwrap();
    assert_eq!(tape.shape(c), &[1, 1, 1]);
    assert_eq!(tape.value(c).item(), 1.0);
}

#[test]
fn embedded_gaussian_matches_loop_oracle_and_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (b, c, t, n, ce) = (
            rng.gen_range(1..3usize),
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
            4,
            rng.gen_range(1..3usize),
        );
        let x = rnd(&mut rng, &[b, c, t, n], 1.0);
        let wt = rnd(&mut rng, &[ce, c], 0.7);
        let wp = rnd(&mut rng, &[ce, c], 0.7);
        let want = oracle_embedded_gaussian(&x, &wt, &wp).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let tv = tape.constant(wt);
        let pv = tape.constant(wp);
        let got = embedded_gaussian(&mut tape, xv, tv, pv).unwrap();
        assert!(tape.value(got).max_abs_diff(&want) < 1e-12);
        let gv = tape.value(got);
        for bi in 0..b {
            for i in 0..n {
                let sum: f64 = (0..n).map(|j| gv.at(&[bi, i, j])).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }
}

fn adaptive_vars_a_only(tape: &mut Tape<f64>, w: &[Tensor<f64>]) -> AdaptiveLayerVars {
    AdaptiveLayerVars {
        w: w.iter().map(|t| tape.constant(t.clone())).collect(),
        b: None,
        theta: None,
        phi: None,
        residual: LayerResidual::Off,
    }
}

#[test]
fn adaptive_a_only_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = builtin("toy9").unwrap();
    let adj = normalize(&build_partitions(&spec).unwrap(), 0.001).unwrap();
    let x = rnd(&mut rng, &[2, 3, 4, 9], 0.3);
    let w: Vec<Tensor<f64>> = (0..NUM_SUBSETS).map(|_| rnd(&mut rng, &[4, 3], 0.3)).collect();
    let want = oracle_matrix_layer(&x, &w, &adj.matrices).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let adj_vars = register_adjacency(&mut tape, &adj);
    let lv = adaptive_vars_a_only(&mut tape, &w);
    let got = adaptive_spatial_forward(
        &mut tape,
        xv,
        &lv,
        Some(&adj_vars),
        GraphToggles {
            use_a: true,
            use_b: false,
            use_c: false,
        },
    )
    .unwrap();
    assert!(tape.value(got).max_abs_diff(&want) < 1e-12);
}

#[test]
fn fresh_init_b_and_c_terms_give_uniform_mixing() {
    // B = 0 contributes nothing; zero embeddings make C exactly 1/N, so
    // the output is Σ_k W_k · f_in · (1/N) · ones plus the residual.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 5;
    let x = rnd(&mut rng, &[1, 2, 3, n], 1.0);
    let w: Vec<Tensor<f64>> = (0..NUM_SUBSETS).map(|_| rnd(&mut rng, &[2, 2], 0.5)).collect();
    let uniform = Tensor::full(&[n, n], 1.0 / n as f64);
    let want = oracle_matrix_layer(&x, &w, &vec![uniform; NUM_SUBSETS]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let lv = AdaptiveLayerVars {
        w: w.iter().map(|t| tape.constant(t.clone())).collect(),
        b: Some((0..NUM_SUBSETS).map(|_| tape.constant(Tensor::zeros(&[n, n]))).collect()),
        theta: Some((0..NUM_SUBSETS).map(|_| tape.constant(Tensor::zeros(&[1, 2]))).collect()),
        phi: Some((0..NUM_SUBSETS).map(|_| tape.constant(Tensor::zeros(&[1, 2]))).collect()),
        residual: LayerResidual::Identity,
    };
    let got = adaptive_spatial_forward(
        &mut tape,
        xv,
        &lv,
        None,
        GraphToggles {
            use_a: false,
            use_b: true,
            use_c: true,
        },
    )
    .unwrap();
    let gv = tape.value(got);
    for (i, (&g, &w_)) in gv.data().iter().zip(want.data()).enumerate() {
        let with_residual = w_ + x.data()[i];
        assert!((g - with_residual).abs() < 1e-9, "element {i}");
    }
}

#[test]
fn single_vertex_scalar_case() {
    // N = 1, A = 1/(1+α): each subset scales f by W_k/(1+α) except the
    // non-root subsets whose Ā is zero.
    let alpha = 0.001;
    let spec = SkeletonSpec::new("one", 1, vec![], 0).unwrap();
    let adj = normalize(&build_partitions(&spec).unwrap(), alpha).unwrap();
    let x = Tensor::from_vec(&[1, 1, 2, 1], vec![3.0, -2.0]).unwrap();
    let w: Vec<Tensor<f64>> = (1..=3)
        .map(|k| Tensor::from_vec(&[1, 1], vec![k as f64]).unwrap())
        .collect();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let adj_vars = register_adjacency(&mut tape, &adj);
    let lv = adaptive_vars_a_only(&mut tape, &w);
    let got = adaptive_spatial_forward(
        &mut tape,
        xv,
        &lv,
        Some(&adj_vars),
        GraphToggles {
            use_a: true,
            use_b: false,
            use_c: false,
        },
    )
    .unwrap();
    // Only the root subset has support on a single vertex; W_root = 1.
    for (g, x_) in tape.value(got).data().iter().zip(x.data()) {
        assert!((g - x_ * 1.0 / (1.0 + alpha)).abs() < 1e-12);
    }
}

#[test]
fn all_toggles_off_is_a_configuration_error() {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(Tensor::zeros(&[1, 1, 1, 2]));
    let lv = adaptive_vars_a_only(&mut tape, &[eye(1), eye(1), eye(1)]);
    let err = adaptive_spatial_forward(
        &mut tape,
        xv,
        &lv,
        None,
        GraphToggles {
            use_a: false,
            use_b: false,
            use_c: false,
        },
    );
    assert!(err.is_err());
}

#[test]
fn baseline_ones_mask_equals_adaptive_a_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = builtin("toy9").unwrap();
    let adj = normalize(&build_partitions(&spec).unwrap(), 0.001).unwrap();
    let x = rnd(&mut rng, &[2, 3, 4, 9], 0.4);
    let w: Vec<Tensor<f64>> = (0..NUM_SUBSETS).map(|_| rnd(&mut rng, &[3, 3], 0.4)).collect();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let adj_vars = register_adjacency(&mut tape, &adj);
    let alv = AdaptiveLayerVars {
        w: w.iter().map(|t| tape.constant(t.clone())).collect(),
        b: None,
        theta: None,
        phi: None,
        residual: LayerResidual::Identity,
    };
    let a_out = adaptive_spatial_forward(
        &mut tape,
        xv,
        &alv,
        Some(&adj_vars),
        GraphToggles {
            use_a: true,
            use_b: false,
            use_c: false,
        },
    )
    .unwrap();
    let blv = BaselineLayerVars {
        w: w.iter().map(|t| tape.constant(t.clone())).collect(),
        mask: Some(
            (0..NUM_SUBSETS)
                .map(|_| tape.constant(Tensor::full(&[9, 9], 1.0)))
                .collect(),
        ),
        residual: LayerResidual::Identity,
    };
    let b_out = baseline_spatial_forward(&mut tape, xv, &blv, &adj_vars).unwrap();
    let diff = tape.value(a_out).max_abs_diff(tape.value(b_out));
    assert!(diff < 1e-6, "diff {diff}");
    // Argmax agreement too.
    let av = tape.value(a_out).data();
    let bv = tape.value(b_out).data();
    let am = av.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
    let bm = bv.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
    assert_eq!(am, bm);
}

#[test]
fn baseline_random_mask_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = builtin("toy9").unwrap();
    let adj = normalize(&build_partitions(&spec).unwrap(), 0.001).unwrap();
    let x = rnd(&mut rng, &[1, 2, 3, 9], 0.4);
    let w: Vec<Tensor<f64>> = (0..NUM_SUBSETS).map(|_| rnd(&mut rng, &[2, 2], 0.4)).collect();
    let masks: Vec<Tensor<f64>> = (0..NUM_SUBSETS).map(|_| rnd(&mut rng, &[9, 9], 1.0)).collect();
    // Per-edge scaled graphs for the oracle.
    let graphs: Vec<Tensor<f64>> = adj
        .matrices
        .iter()
        .zip(&masks)
        .map(|(a, m)| {
            let data: Vec<f64> = a
                .data()
                .iter()
                .zip(m.data())
                .map(|(&av, &mv)| av * mv)
                .collect();
            Tensor::from_vec(&[9, 9], data).unwrap()
        })
        .collect();
    let want = oracle_matrix_layer(&x, &w, &graphs).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let adj_vars = register_adjacency(&mut tape, &adj);
    let blv = BaselineLayerVars {
        w: w.iter().map(|t| tape.constant(t.clone())).collect(),
        mask: Some(masks.iter().map(|m| tape.constant(m.clone())).collect()),
        residual: LayerResidual::Off,
    };
    let got = baseline_spatial_forward(&mut tape, xv, &blv, &adj_vars).unwrap();
    assert!(tape.value(got).max_abs_diff(&want) < 1e-6);
}

#[test]
fn masking_a_zero_edge_removes_influence() {
    // Two vertices, one edge. Zeroing the mask on every subset's (0, 1)
    // entry makes output vertex 1 invariant to input vertex 0.
    let spec = SkeletonSpec::new("pair", 2, vec![(0, 1)], 0).unwrap();
    let adj = normalize(&build_partitions(&spec).unwrap(), 0.001).unwrap();
    let w: Vec<Tensor<f64>> = (0..NUM_SUBSETS).map(|_| eye(1)).collect();
    let run = |x0: f64, masked: bool| {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![x0, 5.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let adj_vars = register_adjacency(&mut tape, &adj);
        let mut mask = Tensor::full(&[2, 2], 1.0);
        if masked {
            mask.set(&[0, 1], 0.0);
        }
        let blv = BaselineLayerVars {
            w: w.iter().map(|t| tape.constant(t.clone())).collect(),
            mask: Some((0..NUM_SUBSETS).map(|_| tape.constant(mask.clone())).collect()),
            residual: LayerResidual::Off,
        };
        let y = baseline_spatial_forward(&mut tape, xv, &blv, &adj_vars).unwrap();
        tape.value(y).at(&[0, 0, 0, 1])
    };
    // Unmasked, vertex 1 sees vertex 0 through the (0, 1) column.
    assert!((run(1.0, false) - run(9.0, false)).abs() > 1e-6);
    // Masked, it does not.
    assert!((run(1.0, true) - run(9.0, true)).abs() < 1e-12);
}

#[test]
fn baseline_mask_and_weight_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = builtin("toy9").unwrap();
    let adj = normalize(&build_partitions(&spec).unwrap(), 0.001).unwrap();
    let x = rnd(&mut rng, &[2, 3, 4, 9], 0.5);
    let r = rnd(&mut rng, &[2, 2, 4, 9], 1.0);
    let mut store = ParamStore::<f64>::new();
    for k in 0..NUM_SUBSETS {
        store.add(format!("w{k}"), rnd(&mut rng, &[2, 3], 0.5));
    }
    for k in 0..NUM_SUBSETS {
        store.add(format!("m{k}"), rnd(&mut rng, &[9, 9], 1.0));
    }
    let report = gradcheck(
        &mut store,
        |store, want| {
            let mut tape = Tape::new();
            let vars = ParamVars::register(&mut tape, store, want);
            let xv = tape.constant(x.clone());
            let rv = tape.constant(r.clone());
            let adj_vars = register_adjacency(&mut tape, &adj);
            let blv = BaselineLayerVars {
                w: (0..3).map(|k| vars.get(Param(k))).collect(),
                mask: Some((3..6).map(|k| vars.get(Param(k))).collect()),
                residual: LayerResidual::Off,
            };
            let y = baseline_spatial_forward(&mut tape, xv, &blv, &adj_vars)?;
            let prod = tape.mul(y, rv)?;
            let loss = tape.mean_axes(prod, &[0, 1, 2, 3])?;
            let value = tape.value(loss).item();
            if want {
                let mut g = tape.backward(loss)?;
                Ok((value, Some(Gradmap::collect(store, &vars, &mut g))))
            } else {
                Ok((value, None))
            }
        },
        1e-5,
        1e-4,
        400,
        8,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.to_text());
}

fn toy_block_cfg(c_in: usize, c_out: usize, stride: usize, residual: bool) -> BlockConfig {
    BlockConfig {
        c_in,
        c_out,
        stride,
        kernel_t: 3,
        dropout: 0.5,
        kind: LayerKind::Adaptive,
        toggles: GraphToggles::all(),
        use_mask: true,
        residual,
    }
}

#[test]
fn block_eval_mode_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = builtin("toy9").unwrap();
    let adj = normalize(&build_partitions(&spec).unwrap(), 0.001).unwrap();
    let cfg = toy_block_cfg(3, 4, 1, true);
    let mut store = ParamStore::<f64>::new();
    let mut bufs = BufStore::new();
    let block = build_block(&mut store, &mut bufs, &cfg, 9, "b", &mut rng).unwrap();
    agcn_core::model::perturb_uniform(&mut store, &mut rng, 0.2);
    let x = rnd(&mut rng, &[2, 3, 4, 9], 1.0);
    let run = |seed: u64| {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &store, false);
        let xv = tape.constant(x.clone());
        let adj_vars = register_adjacency(&mut tape, &adj);
        let mut bufs = bufs.clone();
        let y = block_forward(
            &mut tape, xv, &block, &vars, &mut bufs, &cfg, &adj_vars, Phase::Eval, seed,
        )
        .unwrap();
        tape.value(y).data().to_vec()
    };
    // Dropout is inert in eval mode, so even different seeds agree.
    assert_eq!(run(1), run(2));
}

#[test]
fn block_stride_two_halves_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let spec = builtin("toy9").unwrap();
    let adj = normalize(&build_partitions(&spec).unwrap(), 0.001).unwrap();
    let cfg = toy_block_cfg(3, 4, 2, true);
    let mut store = ParamStore::<f64>::new();
    let mut bufs = BufStore::new();
    let block = build_block(&mut store, &mut bufs, &cfg, 9, "b", &mut rng).unwrap();
    let x = rnd(&mut rng, &[1, 3, 8, 9], 1.0);
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &store, false);
    let xv = tape.constant(x);
    let adj_vars = register_adjacency(&mut tape, &adj);
    let y = block_forward(
        &mut tape, xv, &block, &vars, &mut bufs, &cfg, &adj_vars, Phase::Eval, 0,
    )
    .unwrap();
    assert_eq!(tape.shape(y), &[1, 4, 4, 9]);
}

#[test]
fn zeroed_branch_leaves_relu_of_identity_shortcut() {
    // Same channels, stride 1: the block shortcut is the identity. With
    // the spatial BN's γ and β zeroed the whole branch collapses to zero,
    // leaving y = ReLU(x).
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = builtin("toy9").unwrap();
    let adj = normalize(&build_partitions(&spec).unwrap(), 0.001).unwrap();
    let cfg = toy_block_cfg(3, 3, 1, true);
    let mut store = ParamStore::<f64>::new();
    let mut bufs = BufStore::new();
    let block = build_block(&mut store, &mut bufs, &cfg, 9, "b", &mut rng).unwrap();
    for i in 0..store.len() {
        let name = store.name(Param(i)).to_string();
        if name == "b.bn_s.gamma" || name == "b.bn_s.beta" {
            let t = store.value_mut(Param(i));
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
    }
    let x = rnd(&mut rng, &[2, 3, 4, 9], 1.0);
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &store, false);
    let xv = tape.constant(x.clone());
    let adj_vars = register_adjacency(&mut tape, &adj);
    let y = block_forward(
        &mut tape, xv, &block, &vars, &mut bufs, &cfg, &adj_vars, Phase::Train, 5,
    )
    .unwrap();
    for (got, x_) in tape.value(y).data().iter().zip(x.data()) {
        assert!((got - x_.max(0.0)).abs() < 1e-12);
    }
}

#[test]
fn network_zero_input_gives_classifier_bias() {
    let spec = builtin("toy9").unwrap();
    let cfg = NetworkConfig::compact(spec, 3, 4, 1).unwrap();
    let mut params = NetParams::<f64>::init(&cfg, 3).unwrap();
    // Nonzero bias so the assertion is informative.
    let fc_b = params.layout.fc_b;
    for (i, v) in params
        .store
        .value_mut(fc_b)
        .data_mut()
        .iter_mut()
        .enumerate()
    {
        *v = 0.25 * (i as f64 + 1.0);
    }
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &params.store, false);
    let xv = tape.leaf(Tensor::zeros(&[2, 3, 16, 9, 1]), false);
    let seeds = vec![0u64; 9];
    let NetParams { store: _, bufs, layout } = &mut params;
    let logits = network_forward(
        &mut tape,
        xv,
        layout,
        &vars,
        bufs,
        &cfg,
        Phase::Train,
        &seeds,
    )
    .unwrap();
    let lv = tape.value(logits);
    for b in 0..2 {
        for k in 0..4 {
            assert!((lv.at(&[b, k]) - 0.25 * (k as f64 + 1.0)).abs() < 1e-9);
        }
    }
}

#[test]
fn network_identical_samples_give_identical_rows_and_right_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let spec = builtin("toy9").unwrap();
    let cfg = NetworkConfig::compact(spec, 3, 4, 1).unwrap();
    let mut params = NetParams::<f64>::init(&cfg, 4).unwrap();
    agcn_core::model::perturb_uniform(&mut params.store, &mut rng, 0.2);
    let one = rnd(&mut rng, &[1, 3, 16, 9, 1], 1.0);
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    data.extend_from_slice(one.data());
    let x = Tensor::from_vec(&[3, 3, 16, 9, 1], data).unwrap();
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &params.store, false);
    let xv = tape.leaf(x, false);
    let seeds = vec![0u64; 9];
    let NetParams { store: _, bufs, layout } = &mut params;
    let logits = network_forward(
        &mut tape,
        xv,
        layout,
        &vars,
        bufs,
        &cfg,
        Phase::Eval,
        &seeds,
    )
    .unwrap();
    let lv = tape.value(logits);
    assert_eq!(lv.shape(), &[3, 4]);
    for k in 0..4 {
        assert_eq!(lv.at(&[0, k]), lv.at(&[1, k]));
        assert_eq!(lv.at(&[0, k]), lv.at(&[2, k]));
    }
}
