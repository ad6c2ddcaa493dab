use dar_lab::backbone::{Model, ModelConfig};
use dar_lab::data;
use dar_lab::router::{
    final_source_set, run_network, source_set, unet_pair, Bump, Pooling, QueryVariant, RouteMode,
    RouterConfig, RunOpts, Trace,
};
use proptest::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tensor_core::{Graph, TensorId};

// ---- source-set construction ------------------------------------------------

#[test]
fn chunked_sets_worked_examples() {
    // L=8, S=4: sublayer 6 sees checkpoints {0, 4} plus the tail {5}.
    assert_eq!(source_set(6, 4, 8), vec![0, 4, 5]);
    assert_eq!(source_set(1, 4, 8), vec![0]);
    assert_eq!(source_set(4, 4, 8), vec![0, 1, 2, 3]);
    assert_eq!(source_set(5, 4, 8), vec![0, 4]);
    // S=2 on a 6-sublayer net.
    assert_eq!(source_set(5, 2, 6), vec![0, 2, 4]);
    assert_eq!(source_set(6, 2, 6), vec![0, 2, 4, 5]);
}

#[test]
fn chunk_one_degenerates_to_dense() {
    for l in 1..=12 {
        let want: Vec<usize> = (0..l).collect();
        assert_eq!(source_set(l, 1, 12), want);
    }
    let want: Vec<usize> = (0..=12).collect();
    assert_eq!(final_source_set(1, 12), want);
}

#[test]
fn final_sets_by_construction() {
    assert_eq!(final_source_set(4, 8), vec![0, 4, 5, 6, 7, 8]);
    assert_eq!(final_source_set(4, 16), vec![0, 4, 8, 12, 13, 14, 15, 16]);
    let f56 = final_source_set(4, 56);
    assert_eq!(f56.len(), 14 + 4);
    assert_eq!(&f56[..14], (0..14).map(|j| j * 4).collect::<Vec<_>>().as_slice());
    assert_eq!(&f56[14..], &[53, 54, 55, 56]);
}

#[test]
fn set_sizes_bounded_with_equality_only_at_final() {
    for (l_total, s) in [(8usize, 4usize), (16, 4), (56, 4), (12, 2), (12, 3), (56, 7)] {
        let n = l_total / s;
        let bound = s + n;
        for l in 1..=l_total {
            let set = source_set(l, s, l_total);
            assert!(set.len() < bound, "interior set hit the bound at l={l}, S={s}");
            // Sorted, unique, all indices strictly below l.
            assert!(set.windows(2).all(|w| w[0] < w[1]));
            assert!(set.iter().all(|&i| i < l));
        }
        assert_eq!(final_source_set(s, l_total).len(), bound);
    }
}

proptest! {
    #[test]
    fn sets_cover_recent_history_and_checkpoints(
        n_chunks in 1usize..12,
        s in 1usize..9,
        l_off in 0usize..64,
    ) {
        let l_total = n_chunks * s;
        let l = 1 + l_off % l_total;
        let set = source_set(l, s, l_total);
        // Every completed chunk boundary at or below l is present...
        let n = l.div_ceil(s);
        for j in 0..n {
            prop_assert!(set.contains(&(j * s)));
        }
        // ...as is the uncheckpointed tail right behind l.
        for i in (n - 1) * s + 1..l {
            prop_assert!(set.contains(&i));
        }
        prop_assert_eq!(set.len(), n + (l - 1 - (n - 1) * s));
    }
}

#[test]
fn unet_pairing() {
    // K=6: only the deep half gets a skip partner, mirrored.
    assert_eq!(unet_pair(1, 6), None);
    assert_eq!(unet_pair(3, 6), None);
    assert_eq!(unet_pair(4, 6), Some(3));
    assert_eq!(unet_pair(5, 6), Some(2));
    assert_eq!(unet_pair(6, 6), Some(1));
    // Odd K: middle block stays unpaired.
    assert_eq!(unet_pair(3, 5), None);
    assert_eq!(unet_pair(4, 5), Some(2));
    assert_eq!(unet_pair(5, 5), Some(1));
}

// ---- forward traces ----------------------------------------------------------

fn cfg(n_blocks: usize) -> ModelConfig {
    ModelConfig {
        n_blocks,
        d: 16,
        head_dim: 8,
        ..ModelConfig::default()
    }
}

fn forward(model: &Model<f64>, seed: u64, opts: &RunOpts) -> (Graph<f64>, Trace) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<f64> = (0..data::TOKENS * data::TOKEN_DIM)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut g: Graph<f64> = Graph::new();
    let staged = model.store.stage(&mut g, true);
    let x = g.constant(data::TOKENS, data::TOKEN_DIM, tokens);
    let trace = run_network(&mut g, model, &staged, x, 1, 0.4, opts);
    (g, trace)
}

#[test]
fn trace_shapes_per_mode() {
    for route in [
        RouterConfig::default(),
        RouterConfig { mode: RouteMode::UnetSkip, ..RouterConfig::default() },
        RouterConfig { mode: RouteMode::Dar, chunk: 2, ..RouterConfig::default() },
    ] {
        let is_dar = route.mode == RouteMode::Dar;
        let model: Model<f64> = Model::new(cfg(3), route, 5);
        let (g, trace) = forward(&model, 1, &RunOpts::default());
        let l_total = model.cfg.sublayers();
        assert_eq!(trace.v.len(), l_total + 1, "embedding plus one output per sublayer");
        assert_eq!(trace.h.len(), l_total);
        assert_eq!(trace.z.len(), model.cfg.n_blocks);
        if is_dar {
            // One aggregation per sublayer plus the final one.
            assert_eq!(trace.alphas.len(), l_total + 1);
            for (l, a) in trace.alphas.iter().enumerate().take(l_total) {
                assert_eq!(a.consumer, l + 1);
                assert_eq!(a.origins, source_set(l + 1, 2, l_total));
            }
            let fin = trace.alphas.last().unwrap();
            assert_eq!(fin.consumer, l_total + 1);
            assert_eq!(fin.origins, final_source_set(2, l_total));
        } else {
            assert!(trace.alphas.is_empty());
        }
        assert_eq!(g.shape(trace.out), (data::TOKENS, data::TOKEN_DIM));
    }
}

#[test]
fn forward_is_deterministic() {
    let model: Model<f64> = Model::new(
        cfg(2),
        RouterConfig { mode: RouteMode::Dar, query: QueryVariant::Dynamic, ..RouterConfig::default() },
        5,
    );
    let (g1, t1) = forward(&model, 3, &RunOpts::default());
    let (g2, t2) = forward(&model, 3, &RunOpts::default());
    assert_eq!(g1.values(t1.out), g2.values(t2.out));
    for (a, b) in t1.h.iter().zip(&t2.h) {
        assert_eq!(g1.values(*a), g2.values(*b));
    }
}

#[test]
fn routing_weights_uniform_at_zero_init() {
    let model: Model<f64> = Model::new(
        cfg(3),
        RouterConfig { mode: RouteMode::Dar, chunk: 2, ..RouterConfig::default() },
        7,
    );
    let (g, trace) = forward(&model, 2, &RunOpts::default());
    for a in &trace.alphas {
        let (rows, cols) = g.shape(a.weights);
        let w = g.values(a.weights);
        let want = 1.0 / cols as f64;
        assert!(
            w.iter().all(|&x| x == want),
            "consumer {} not uniform over {} sources at init",
            a.consumer,
            cols
        );
        assert_eq!(rows, data::TOKENS);
    }
}

fn randomized_dar(query: QueryVariant, pooling: Pooling, chunk: usize, seed: u64) -> Model<f64> {
    let mut model: Model<f64> = Model::new(
        cfg(3),
        RouterConfig { mode: RouteMode::Dar, query, chunk, pooling },
        seed,
    );
    model.randomize(seed ^ 0xa5a5, 0.25);
    model
}

#[test]
fn weights_form_a_simplex_after_randomization() {
    for (query, pooling) in [
        (QueryVariant::Static, Pooling::PerToken),
        (QueryVariant::ExplicitT, Pooling::PerToken),
        (QueryVariant::Dynamic, Pooling::PerToken),
        (QueryVariant::Dynamic, Pooling::MeanPooled),
    ] {
        let model = randomized_dar(query, pooling, 2, 11);
        let (g, trace) = forward(&model, 4, &RunOpts::default());
        for a in &trace.alphas {
            let (rows, cols) = g.shape(a.weights);
            if pooling == Pooling::MeanPooled {
                assert_eq!(rows, 1, "pooled routing shares one weight row");
            }
            let w = g.values(a.weights);
            for row in w.chunks(cols) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
                assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
            assert!(w.chunks(cols).count() == rows);
        }
    }
}

#[test]
fn gradient_reaches_every_source() {
    for query in [QueryVariant::Static, QueryVariant::ExplicitT, QueryVariant::Dynamic] {
        let model = randomized_dar(query, Pooling::PerToken, 2, 13);
        let (mut g, trace) = forward(&model, 5, &RunOpts::default());
        let loss = g.sum(trace.out);
        g.backward(loss);
        for (i, &v) in trace.v.iter().enumerate() {
            let grad = g.grad(v);
            assert!(
                grad.iter().any(|&x| x != 0.0),
                "no gradient reached source {i} under {query:?}"
            );
        }
    }
}

#[test]
fn explicit_t_matches_static_at_init_exactly() {
    let make = |query| -> Model<f64> {
        Model::new(cfg(3), RouterConfig { mode: RouteMode::Dar, query, ..RouterConfig::default() }, 17)
    };
    let stat = make(QueryVariant::Static);
    let expl = make(QueryVariant::ExplicitT);
    // Same parameter schema, same seed, same values.
    assert_eq!(stat.flat_values(), expl.flat_values());

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let tokens: Vec<f64> = (0..data::TOKENS * data::TOKEN_DIM)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    for k in 0..=10 {
        let t = k as f64 / 10.0;
        let eval = |model: &Model<f64>| -> (Vec<f64>, Vec<Vec<f64>>) {
            let mut g: Graph<f64> = Graph::new();
            let staged = model.store.stage(&mut g, false);
            let x = g.constant(data::TOKENS, data::TOKEN_DIM, tokens.clone());
            let trace = run_network(&mut g, model, &staged, x, 2, t, &RunOpts::default());
            let hs = trace.h.iter().map(|&h| g.values(h).to_vec()).collect();
            (g.values(trace.out).to_vec(), hs)
        };
        let (out_s, h_s) = eval(&stat);
        let (out_e, h_e) = eval(&expl);
        assert_eq!(out_s, out_e, "outputs diverge at t={t}");
        assert_eq!(h_s, h_e, "hidden aggregates diverge at t={t}");
    }
}

#[test]
fn unet_fusion_is_identity_at_init() {
    // Identity-initialized fusion makes the skip network equal the plain
    // stream, checkpoint for checkpoint.
    let std_model: Model<f64> = Model::new(cfg(3), RouterConfig::default(), 19);
    let unet: Model<f64> = Model::new(
        cfg(3),
        RouterConfig { mode: RouteMode::UnetSkip, ..RouterConfig::default() },
        19,
    );
    let (gs, ts) = forward(&std_model, 6, &RunOpts::default());
    let (gu, tu) = forward(&unet, 6, &RunOpts::default());
    for (a, b) in ts.z.iter().zip(&tu.z) {
        assert_eq!(gs.values(*a), gu.values(*b));
    }
    assert_eq!(gs.values(ts.final_input), gu.values(tu.final_input));
    assert_eq!(gs.values(ts.out), gu.values(tu.out));
}

#[test]
fn all_modes_agree_at_zero_init() {
    // adaLN-Zero leaves every branch silent, so every routing mode computes
    // the same (zero) velocity.
    let outs: Vec<Vec<f64>> = [
        RouterConfig::default(),
        RouterConfig { mode: RouteMode::UnetSkip, ..RouterConfig::default() },
        RouterConfig { mode: RouteMode::Dar, chunk: 2, ..RouterConfig::default() },
        RouterConfig { mode: RouteMode::Dar, query: QueryVariant::Dynamic, chunk: 1, ..RouterConfig::default() },
    ]
    .into_iter()
    .map(|route| {
        let model: Model<f64> = Model::new(cfg(3), route, 29);
        let (g, t) = forward(&model, 7, &RunOpts::default());
        g.values(t.out).to_vec()
    })
    .collect();
    for o in &outs {
        assert_eq!(o, &outs[0]);
        assert!(o.iter().all(|&v| v == 0.0));
    }
}

// ---- gates and bumps ---------------------------------------------------------

fn gate_nodes(trace: &Trace) -> Vec<(usize, usize, TensorId)> {
    trace.gates.iter().map(|gt| (gt.consumer, gt.source, gt.node)).collect()
}

#[test]
fn gates_preserve_forward_bitwise() {
    let mut model: Model<f64> = Model::new(cfg(3), RouterConfig::default(), 31);
    model.randomize(37, 0.3);
    let (g0, t0) = forward(&model, 8, &RunOpts::default());
    let (g1, t1) = forward(&model, 8, &RunOpts { gates: true, ..RunOpts::default() });
    assert_eq!(g0.values(t0.out), g1.values(t1.out));
    assert_eq!(g0.values(t0.final_input), g1.values(t1.final_input));

    // One gate per (consumer, source) edge of the dense history.
    let l_total = model.cfg.sublayers();
    let want: usize = (1..=l_total).sum::<usize>() + (l_total + 1);
    assert_eq!(t1.gates.len(), want);
    let nodes = gate_nodes(&t1);
    for (consumer, source, _) in &nodes {
        assert!(source < consumer);
    }
}

#[test]
fn gate_gradients_exist_on_randomized_model() {
    let mut model: Model<f64> = Model::new(cfg(2), RouterConfig::default(), 41);
    model.randomize(43, 0.3);
    let (mut g, trace) = forward(&model, 9, &RunOpts { gates: true, ..RunOpts::default() });
    let loss = g.sum(trace.out);
    g.backward(loss);
    let grads: Vec<f64> = trace.gates.iter().map(|gt| g.grad(gt.node)[0]).collect();
    assert!(grads.iter().any(|&x| x != 0.0));
    assert!(grads.iter().all(|x| x.is_finite()));
}

#[test]
fn bump_shifts_only_from_its_block_on() {
    let mut model: Model<f64> = Model::new(cfg(3), RouterConfig::default(), 47);
    model.randomize(53, 0.3);
    let bump = Bump { block: 2, token: 1, dim: 3, delta: 1e-3 };
    let (g0, t0) = forward(&model, 10, &RunOpts::default());
    let (g1, t1) = forward(&model, 10, &RunOpts { bump: Some(bump), ..RunOpts::default() });
    // z_1 is untouched; z_2 differs by exactly the bump; output moves.
    assert_eq!(g0.values(t0.z[0]), g1.values(t1.z[0]));
    let a = g0.values(t0.z[1]);
    let b = g1.values(t1.z[1]);
    let mut diffs = 0;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x != y {
            diffs += 1;
            assert_eq!(i, data::TOKENS * 0 + model.cfg.d + 3, "bump landed on the wrong coordinate");
            assert!((y - x - 1e-3).abs() < 1e-15);
        }
    }
    assert_eq!(diffs, 1);
    assert_ne!(g0.values(t0.out), g1.values(t1.out));
}

#[test]
#[should_panic(expected = "bump and gates")]
fn bump_and_gates_are_mutually_exclusive() {
    let model: Model<f64> = Model::new(cfg(2), RouterConfig::default(), 1);
    let opts = RunOpts {
        gates: true,
        bump: Some(Bump { block: 1, token: 0, dim: 0, delta: 1e-3 }),
    };
    let _ = forward(&model, 0, &opts);
}

#[test]
#[should_panic(expected = "chunk")]
fn chunk_must_divide_depth() {
    // 3 blocks -> 6 sublayers; 4 does not divide 6.
    let _: Model<f64> = Model::new(
        cfg(3),
        RouterConfig { mode: RouteMode::Dar, chunk: 4, ..RouterConfig::default() },
        1,
    );
}
