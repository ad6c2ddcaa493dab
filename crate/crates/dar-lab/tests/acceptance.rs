//! Release gate. Each test covers one acceptance criterion end to end and
//! prints a single verdict line (visible under `--nocapture`); the assert
//! carries the same detail, so a plain `cargo test` failure names the
//! criterion and the measurement that broke it.
//!
//! The three trained fixtures (baseline, softmax-routing static, dynamic)
//! are built lazily and shared: 2000 steps each on three seeds, identical
//! data and schedule across arms.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dar_lab::backbone::{Model, ModelConfig, NORM_EPS};
use dar_lab::checkpoint::{load_checkpoint, save_checkpoint};
use dar_lab::config::Config;
use dar_lab::cost;
use dar_lab::data;
use dar_lab::diagnostics::{make_diag_batch, routing_map, state_profiles, t_grid, timestep_probe};
use dar_lab::fused::{self, Reference};
use dar_lab::router::{
    final_source_set, run_network, source_set, Pooling, QueryVariant, RouteMode, RouterConfig,
    RunOpts,
};
use dar_lab::sample::{guided_velocity, sample_ode, velocity};
use dar_lab::train::{self, steps_to_reach, TrainRun};
use tensor_core::{grad_check, Graph, Tensor};

fn verdict(name: &str, ok: bool, detail: &str) {
    println!("[{name}] {} — {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "[{name}] FAIL — {detail}");
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

// ---- shared trained fixtures ------------------------------------------------

const FIX_SEEDS: [u64; 3] = [0, 1, 2];
const FIX_LR: &str = "1e-3";
const FIX_STEPS: u64 = 2000;

fn fixture_run(mode: &str, query: &str, seed: u64) -> TrainRun<f32> {
    let mut cfg = Config::default();
    cfg.set("router.mode", mode).unwrap();
    cfg.set("router.query", query).unwrap();
    cfg.set("router.chunk", "1").unwrap();
    cfg.set("train.lr", FIX_LR).unwrap();
    cfg.set("train.seed", &seed.to_string()).unwrap();
    train::train(&cfg.settings().unwrap()).expect("fixture training run")
}

fn arm(
    cell: &'static OnceLock<Vec<TrainRun<f32>>>,
    mode: &'static str,
    query: &'static str,
) -> &'static [TrainRun<f32>] {
    cell.get_or_init(|| {
        FIX_SEEDS
            .iter()
            .map(|&s| fixture_run(mode, query, s))
            .collect()
    })
}

static BASELINE: OnceLock<Vec<TrainRun<f32>>> = OnceLock::new();
static DAR_STATIC: OnceLock<Vec<TrainRun<f32>>> = OnceLock::new();
static DAR_DYNAMIC: OnceLock<Vec<TrainRun<f32>>> = OnceLock::new();

fn baseline_arm() -> &'static [TrainRun<f32>] {
    arm(&BASELINE, "standard", "static")
}

fn static_arm() -> &'static [TrainRun<f32>] {
    arm(&DAR_STATIC, "dar", "static")
}

fn dynamic_arm() -> &'static [TrainRun<f32>] {
    arm(&DAR_DYNAMIC, "dar", "dynamic")
}

// ---- 1: gradient correctness -------------------------------------------------

#[test]
fn c01_full_network_gradients_match_finite_differences() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_at = String::new();

    let queries = [
        QueryVariant::Static,
        QueryVariant::ExplicitT,
        QueryVariant::Dynamic,
    ];
    for (qi, &query) in queries.iter().enumerate() {
        for (ci, chunk) in [1usize, 2, 3].into_iter().enumerate() {
            let cfg = ModelConfig {
                n_blocks: 3,
                d: 8,
                head_dim: 4,
                ..ModelConfig::default()
            };
            let rc = RouterConfig {
                mode: RouteMode::Dar,
                query,
                chunk,
                pooling: Pooling::PerToken,
            };
            let mut model: Model<f64> = Model::new(cfg, rc, 3 * qi as u64 + ci as u64);
            model.randomize(100 + 3 * qi as u64 + ci as u64, 0.1);

            let mut rng = ChaCha8Rng::seed_from_u64(40 + ci as u64);
            let tokens = randn(&mut rng, data::TOKENS * data::TOKEN_DIM);
            let target = randn(&mut rng, data::TOKENS * data::TOKEN_DIM);
            let t = 0.15 + 0.1 * (3 * qi + ci) as f64;
            let class = (qi + ci) % data::N_CLASSES;

            let flat = Tensor::new(&[1, model.store.numel()], model.flat_values());
            let err = grad_check(
                |g, leaf| {
                    let staged = model.stage_from_flat(g, leaf);
                    let x = g.constant(data::TOKENS, data::TOKEN_DIM, tokens.clone());
                    let trace =
                        run_network(g, &model, &staged, x, class, t, &RunOpts::default());
                    let tgt = g.constant(data::TOKENS, data::TOKEN_DIM, target.clone());
                    g.mse(trace.out, tgt)
                },
                &flat,
                1e-5,
            );
            if err > worst {
                worst = err;
                worst_at = format!("query {query:?} chunk {chunk}");
            }
        }
    }

    let secs = started.elapsed().as_secs_f64();
    verdict(
        "c01 gradient-check",
        worst < 1e-5 && secs < 30.0,
        &format!("max rel err {worst:.3e} ({worst_at}), 9 variants, {secs:.1} s"),
    );
}

// ---- 2: routing-weight simplex ------------------------------------------------

#[test]
fn c02_routing_weights_stay_on_the_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let queries = [
        QueryVariant::Static,
        QueryVariant::ExplicitT,
        QueryVariant::Dynamic,
    ];
    let mut forwards = 0usize;
    let mut rows = 0usize;
    let mut worst_sum = 0.0f64;

    for trial in 0..100 {
        let cfg = ModelConfig {
            n_blocks: 2,
            d: 16,
            head_dim: 8,
            mlp_ratio: 2,
            ..ModelConfig::default()
        };
        let rc = RouterConfig {
            mode: RouteMode::Dar,
            query: queries[trial % 3],
            chunk: [1usize, 2, 4][trial % 3],
            pooling: if trial % 4 == 0 {
                Pooling::MeanPooled
            } else {
                Pooling::PerToken
            },
        };
        let mut model: Model<f64> = Model::new(cfg, rc, trial as u64);
        model.randomize(1000 + trial as u64, 0.4);

        for _ in 0..10 {
            let tokens_v = randn(&mut rng, data::TOKENS * data::TOKEN_DIM);
            let t: f64 = rng.random();
            let class = rng.random_range(0..=data::N_CLASSES);
            let mut g: Graph<f64> = Graph::new();
            let staged = model.store.stage(&mut g, false);
            let x = g.constant(data::TOKENS, data::TOKEN_DIM, tokens_v.clone());
            let trace = run_network(&mut g, &model, &staged, x, class, t, &RunOpts::default());
            forwards += 1;
            for a in &trace.alphas {
                let (r, c) = g.shape(a.weights);
                let w = g.values(a.weights);
                for row in 0..r {
                    let s: f64 = w[row * c..(row + 1) * c].iter().sum();
                    worst_sum = worst_sum.max((s - 1.0).abs());
                    assert!(
                        w[row * c..(row + 1) * c].iter().all(|&x| (0.0..=1.0).contains(&x)),
                        "weight outside [0,1] in consumer {}",
                        a.consumer
                    );
                    rows += 1;
                }
            }
        }
    }

    verdict(
        "c02 routing-simplex",
        forwards == 1000 && worst_sum < 1e-6,
        &format!("{rows} rows over {forwards} forwards, worst |sum-1| {worst_sum:.2e}"),
    );
}

// ---- 3: zero-init equivalences -------------------------------------------------

#[test]
fn c03_zero_init_equivalences_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens_v = randn(&mut rng, data::TOKENS * data::TOKEN_DIM);
    let build = |mode: RouteMode, query: QueryVariant| -> Model<f64> {
        let cfg = ModelConfig {
            n_blocks: 3,
            d: 32,
            head_dim: 16,
            mlp_ratio: 2,
            ..ModelConfig::default()
        };
        let rc = RouterConfig {
            mode,
            query,
            chunk: 2,
            pooling: Pooling::PerToken,
        };
        Model::new(cfg, rc, 17)
    };

    // (a) explicit-t and static are the same function at init: the t-embedder
    // output layer starts at zero, so the query term e(t) vanishes.
    let m_static = build(RouteMode::Dar, QueryVariant::Static);
    let m_expl = build(RouteMode::Dar, QueryVariant::ExplicitT);
    let mut pairs_equal = true;
    for &t in &t_grid(11) {
        let run_states = |m: &Model<f64>| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
            let mut g: Graph<f64> = Graph::new();
            let staged = m.store.stage(&mut g, false);
            let x = g.constant(data::TOKENS, data::TOKEN_DIM, tokens_v.clone());
            let trace = run_network(&mut g, m, &staged, x, 1, t, &RunOpts::default());
            let hs = trace.h.iter().map(|&h| g.values(h).to_vec()).collect();
            let ws = trace
                .alphas
                .iter()
                .map(|a| g.values(a.weights).to_vec())
                .collect();
            (hs, ws)
        };
        let (h_s, w_s) = run_states(&m_static);
        let (h_e, w_e) = run_states(&m_expl);
        pairs_equal &= h_s == h_e && w_s == w_e;
    }

    // (b) at init every routing mode computes the same (zero) velocity: the
    // output head starts at zero, and all branch outputs are gated shut.
    let wirings = [
        (RouteMode::Standard, QueryVariant::Static),
        (RouteMode::UnetSkip, QueryVariant::Static),
        (RouteMode::Dar, QueryVariant::Static),
        (RouteMode::Dar, QueryVariant::ExplicitT),
        (RouteMode::Dar, QueryVariant::Dynamic),
    ];
    let mut x_img = [0.0f64; data::PIXELS];
    for (i, v) in randn(&mut rng, data::PIXELS).into_iter().enumerate() {
        x_img[i] = v;
    }
    let mut modes_equal = true;
    let mut all_zero = true;
    for &t in &[0.0, 0.33, 0.77, 1.0] {
        let outs: Vec<[f64; data::PIXELS]> = wirings
            .iter()
            .map(|&(mode, query)| velocity(&build(mode, query), &x_img, 2, t))
            .collect();
        all_zero &= outs[0].iter().all(|&v| v == 0.0);
        modes_equal &= outs.iter().all(|o| o == &outs[0]);
    }

    // (c) unit gates leave the standard stream bit-identical, on a randomized
    // model where anything short of exact equality would show.
    let mut m_std = build(RouteMode::Standard, QueryVariant::Static);
    m_std.randomize(23, 0.15);
    let l_total = m_std.cfg.sublayers();
    let mut gates_equal = true;
    let mut gate_count_ok = true;
    for trial in 0..3 {
        let tokens_v = randn(&mut rng, data::TOKENS * data::TOKEN_DIM);
        let t = [0.1, 0.5, 0.9][trial];
        let mut out_with = |gates: bool| -> Vec<f64> {
            let mut g: Graph<f64> = Graph::new();
            let staged = m_std.store.stage(&mut g, false);
            let x = g.constant(data::TOKENS, data::TOKEN_DIM, tokens_v.clone());
            let trace = run_network(
                &mut g,
                &m_std,
                &staged,
                x,
                0,
                t,
                &RunOpts { gates, bump: None },
            );
            if gates {
                gate_count_ok &=
                    trace.gates.len() == l_total * (l_total + 1) / 2 + (l_total + 1);
            }
            g.values(trace.out).to_vec()
        };
        gates_equal &= out_with(false) == out_with(true);
    }

    verdict(
        "c03 zero-init-equivalence",
        pairs_equal && modes_equal && all_zero && gates_equal && gate_count_ok,
        &format!(
            "explicit-t==static over 11 t ({pairs_equal}), 5 wirings identical at init \
             ({modes_equal}, outputs zero {all_zero}), gates bit-neutral ({gates_equal})"
        ),
    );
}

// ---- 4: chunked source sets ----------------------------------------------------

#[test]
fn c04_chunked_source_sets_match_their_definition() {
    // Independent reconstruction: completed chunks are represented by their
    // last output v_{j·S} (chunk 0 collapses to the embedding), the open
    // chunk contributes raw outputs; the final aggregator sees every chunk
    // summary plus the whole last chunk raw.
    let expect_set = |l: usize, s: usize| -> Vec<usize> {
        let n = l.div_ceil(s);
        let mut v: Vec<usize> = (0..n).map(|j| j * s).collect();
        v.extend((n - 1) * s + 1..l);
        v
    };
    let expect_final = |total: usize, s: usize| -> Vec<usize> {
        let n = total / s;
        let mut v: Vec<usize> = (0..n).map(|j| j * s).collect();
        v.extend((n - 1) * s + 1..=total);
        v
    };

    let mut max_size = 0usize;
    for l in 1..=56usize {
        let set = source_set(l, 4, 56);
        assert_eq!(set, expect_set(l, 4), "consumer {l}, S=4");
        max_size = max_size.max(set.len());
        assert!(set.windows(2).all(|w| w[0] < w[1]), "sorted, duplicate-free");
    }
    let bound_ok = max_size <= 18;

    let mut dense_ok = true;
    for l in 1..=12usize {
        dense_ok &= source_set(l, 1, 12) == (0..l).collect::<Vec<_>>();
    }

    let mut final_ok = true;
    let mut cases = 0usize;
    for total in [8usize, 16, 56] {
        for s in 1..=total {
            if total % s != 0 {
                continue;
            }
            let n = total / s;
            let set = final_source_set(s, total);
            final_ok &= set == expect_final(total, s);
            final_ok &= set.len() == n + s;
            for l in 1..=total {
                final_ok &= source_set(l, s, total) == expect_set(l, s);
            }
            cases += 1;
        }
    }

    verdict(
        "c04 source-sets",
        bound_ok && dense_ok && final_ok,
        &format!(
            "L=56,S=4 max |set| {max_size} ≤ 18; S=1 dense; {cases} (L,S) pairs \
             rebuilt exhaustively"
        ),
    );
}

// ---- 5: chunk-size cost model ---------------------------------------------------

#[test]
fn c05_cost_model_minimizer_and_u_shape() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_gap = 0.0f64;
    for _ in 0..20 {
        let l = rng.random_range(8.0..120.0);
        let alpha = rng.random_range(0.1..0.7);
        let report = cost::verify_unimodal(l, alpha, 0.01)
            .unwrap_or_else(|e| panic!("L={l:.1} alpha={alpha:.2}: {e}"));
        worst_gap = worst_gap.max((report.argmin - report.s_star).abs());
    }

    // The working-point U-shape: at L=56 the recommended divisor 4 beats its
    // neighbours 1 and 8 across the plausible re-read cost range.
    let mut u_ok = true;
    let mut a = 0.4;
    while a <= 0.7 + 1e-9 {
        let c1 = cost::cost(1.0, 56.0, a).unwrap();
        let c4 = cost::cost(4.0, 56.0, a).unwrap();
        let c8 = cost::cost(8.0, 56.0, a).unwrap();
        u_ok &= c4 < c1 && c4 < c8;
        a += 0.01;
    }

    let secs = started.elapsed().as_secs_f64();
    verdict(
        "c05 cost-model",
        worst_gap <= 0.01 + 1e-9 && u_ok && secs < 10.0,
        &format!(
            "20 random (L,α): argmin within {worst_gap:.4} of closed form; \
             L=56 U-shape over α∈[0.4,0.7]; {secs:.2} s"
        ),
    );
}

// ---- 6: fused aggregation kernel ---------------------------------------------

#[test]
fn c06_fused_aggregator_matches_reference_with_minimal_reads() {
    fn max_abs_diff<F: tensor_core::Real>(a: &[F], b: &[F]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    fn check<F: tensor_core::Real>(tol: f64, label: &str) -> (f64, bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let eps = F::from_f64(NORM_EPS);
        let mut worst = 0.0f64;
        let mut reads_ok = true;
        for &n in &[1usize, 4, 16, 57] {
            for &d in &[8usize, 64] {
                let f = |v: f64| F::from_f64(v);
                let q: Vec<F> = randn(&mut rng, d).into_iter().map(f).collect();
                let gain: Vec<F> = randn(&mut rng, d).into_iter().map(f).collect();
                let sources: Vec<Vec<F>> = (0..n)
                    .map(|_| randn(&mut rng, d).into_iter().map(f).collect())
                    .collect();
                let upstream: Vec<F> = randn(&mut rng, d).into_iter().map(f).collect();

                let (h, stats, fwd_audit) =
                    fused::fused_forward(&q, &gain, &sources, eps).unwrap();
                let reference = Reference::forward(&q, &gain, &sources, eps).unwrap();
                worst = worst.max(max_abs_diff(&h, &reference.h));
                reads_ok &= fwd_audit.reads == vec![1usize; n];

                let grads =
                    fused::fused_backward(&upstream, &q, &gain, &sources, eps, Some(&stats))
                        .unwrap();
                let ref_grads = reference.backward(&upstream, &q, &gain, &sources);
                worst = worst.max(max_abs_diff(&grads.d_query, &ref_grads.d_query));
                worst = worst.max(max_abs_diff(&grads.d_gain, &ref_grads.d_gain));
                for (a, b) in grads.d_sources.iter().zip(&ref_grads.d_sources) {
                    worst = worst.max(max_abs_diff(a, b));
                }
                reads_ok &= grads.audit.reads == vec![2usize; n];
            }
        }
        assert!(worst < tol, "{label}: max abs diff {worst:.3e} ≥ {tol:.0e}");
        (worst, reads_ok)
    }

    let (w32, r32) = check::<f32>(1e-5, "f32");
    let (w64, r64) = check::<f64>(1e-9, "f64");
    verdict(
        "c06 fused-aggregator",
        r32 && r64,
        &format!(
            "max abs diff {w32:.2e} (f32) / {w64:.2e} (f64) over N∈{{1,4,16,57}}, \
             d∈{{8,64}}; reads N forward, 2N backward"
        ),
    );
}

// ---- 7: baseline depth profiles -------------------------------------------------

#[test]
fn c07_baseline_profiles_show_dilution_and_redundancy() {
    let started = Instant::now();
    let runs = baseline_arm();
    let batch = make_diag_batch(77, 16);

    let mut monotone_pairs = 0usize;
    let mut total_pairs = 0usize;
    let mut grad_ok = true;
    let mut cos_ok = true;
    let mut details = Vec::new();
    for (seed, run) in FIX_SEEDS.iter().zip(runs) {
        let p = state_profiles(&run.model, &batch, 1.0, 1.0);
        for w in p.rms_fwd.windows(2) {
            total_pairs += 1;
            if w[1] >= w[0] {
                monotone_pairs += 1;
            }
        }
        let deep_grad = *p.rms_grad.last().unwrap();
        let shallow_grad = p.rms_grad[0];
        grad_ok &= deep_grad <= shallow_grad;

        let k = p.cos_sim.len();
        let shallow_cos = (p.cos_sim[0] + p.cos_sim[1]) / 2.0;
        let deep_cos = (p.cos_sim[k - 2] + p.cos_sim[k - 1]) / 2.0;
        cos_ok &= deep_cos > shallow_cos;
        details.push(format!(
            "seed {seed}: grad {shallow_grad:.3e}→{deep_grad:.3e}, cos {shallow_cos:.3}→{deep_cos:.3}"
        ));
    }
    let frac = monotone_pairs as f64 / total_pairs as f64;
    let secs = started.elapsed().as_secs_f64();

    verdict(
        "c07 depth-profiles",
        frac >= 0.9 && grad_ok && cos_ok && secs < 1200.0,
        &format!(
            "rms_fwd nondecreasing {monotone_pairs}/{total_pairs}; {}; {secs:.0} s",
            details.join("; ")
        ),
    );
}

// ---- 8: convergence vs the baseline --------------------------------------------

#[test]
fn c08_routing_reaches_baseline_quality_within_its_step_budget() {
    let base = baseline_arm();
    let thresholds: Vec<f64> = base
        .iter()
        .map(|r| r.val_curve.last().unwrap().1)
        .collect();

    let mut lines = Vec::new();
    let mut all_ok = true;
    for (label, runs) in [("static", static_arm()), ("dynamic", dynamic_arm())] {
        let reaches: Vec<Option<u64>> = runs
            .iter()
            .zip(&thresholds)
            .map(|(r, &th)| steps_to_reach(&r.val_curve, th))
            .collect();
        let mut sortable: Vec<u64> = reaches
            .iter()
            .map(|r| r.unwrap_or(u64::MAX))
            .collect();
        sortable.sort_unstable();
        let median = sortable[1];
        let ok = median <= FIX_STEPS;
        all_ok &= ok;
        let ratio = if median == u64::MAX {
            "∞".to_string()
        } else {
            format!("{:.2}", median as f64 / FIX_STEPS as f64)
        };
        lines.push(format!(
            "{label}: reached at {:?}, median ratio {ratio}",
            reaches
        ));
    }

    verdict(
        "c08 convergence",
        all_ok,
        &format!(
            "baseline finals {:?}; {}",
            thresholds
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>(),
            lines.join("; ")
        ),
    );
}

// ---- 9: timestep probe ----------------------------------------------------------

#[test]
fn c09_trained_dynamic_model_encodes_the_timestep() {
    let run = &dynamic_arm()[0];
    let probe = timestep_probe(&run.model, &make_diag_batch(9, 128), &t_grid(11), 1e-3, 0.7);

    let mut per_depth: BTreeMap<usize, f64> = BTreeMap::new();
    for row in &probe.rows {
        let best = per_depth.entry(row.block).or_insert(f64::NEG_INFINITY);
        *best = best.max(row.r2);
    }
    let depth_ok = per_depth.values().all(|&r2| r2 > probe.baseline_r2);
    let control_ok = (probe.control_r2 - 1.0).abs() < 1e-6;

    // The learned routing itself must move along t, not just the features.
    let cells = routing_map(&run.model, &make_diag_batch(11, 8), &t_grid(5));
    let mut spans: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for c in &cells {
        let e = spans
            .entry((c.consumer, c.origin))
            .or_insert((f64::INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.min(c.weight);
        e.1 = e.1.max(c.weight);
    }
    let max_span = spans
        .values()
        .map(|(lo, hi)| hi - lo)
        .fold(0.0f64, f64::max);
    let span_ok = max_span > 0.01;

    let depths: Vec<String> = per_depth
        .iter()
        .map(|(b, r2)| format!("{b}:{r2:.3}"))
        .collect();
    verdict(
        "c09 timestep-probe",
        depth_ok && control_ok && span_ok,
        &format!(
            "per-depth best R² [{}] vs baseline {:.4}; control {:.6}; max routing span {max_span:.3}",
            depths.join(" "),
            probe.baseline_r2,
            probe.control_r2
        ),
    );
}

// ---- 10: determinism and persistence ---------------------------------------------

#[test]
fn c10_runs_are_reproducible_and_persistable() {
    let mut cfg = Config::default();
    for (k, v) in [
        ("train.steps", "60"),
        ("train.eval_every", "20"),
        ("router.mode", "dar"),
        ("router.query", "dynamic"),
        ("router.chunk", "2"),
        ("train.seed", "4"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let settings = cfg.settings().unwrap();
    let a: TrainRun<f32> = train::train(&settings).unwrap();
    let b: TrainRun<f32> = train::train(&settings).unwrap();
    let replay_ok = a.loss_curve == b.loss_curve && a.val_curve == b.val_curve;

    cfg.set("train.seed", "5").unwrap();
    let c: TrainRun<f32> = train::train(&cfg.settings().unwrap()).unwrap();
    let seed_matters = a.loss_curve != c.loss_curve;

    // Round trip through the on-disk format.
    let mut path = std::env::temp_dir();
    path.push(format!("dar-acceptance-{}.bin", std::process::id()));
    save_checkpoint(&path, &a.model, Some(&a.opt), 60, Some(&a.rng), &cfg.schema_echo())
        .unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    let _ = std::fs::remove_file(&path);

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut restore_ok = true;
    let mut cfg_ok = true;
    for trial in 0..5 {
        let mut x = [0.0f64; data::PIXELS];
        for (i, v) in randn(&mut rng, data::PIXELS).into_iter().enumerate() {
            x[i] = v;
        }
        let t = 0.1 + 0.2 * trial as f64;
        let class = trial % data::N_CLASSES;
        restore_ok &= velocity(&a.model, &x, class, t) == velocity(&loaded.model, &x, class, t);
        // Guidance at weight 1 is the conditional path, bit for bit.
        cfg_ok &= guided_velocity(&a.model, &x, class, t, 1.0) == velocity(&a.model, &x, class, t);
    }

    // Whole trajectory: w=1 sampling equals a hand-rolled conditional Euler loop.
    let mut eps = [0.0f64; data::PIXELS];
    for (i, v) in randn(&mut rng, data::PIXELS).into_iter().enumerate() {
        eps[i] = v;
    }
    let steps = 8;
    let guided = sample_ode(&a.model, &eps, 1, 1.0, steps);
    let mut x = eps;
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = velocity(&a.model, &x, 1, t);
        for i in 0..data::PIXELS {
            x[i] -= dt * v[i];
        }
    }
    cfg_ok &= guided == x;

    verdict(
        "c10 determinism",
        replay_ok && seed_matters && restore_ok && cfg_ok,
        &format!(
            "fixed-seed replay bit-identical ({replay_ok}), checkpoint restore bit-exact \
             ({restore_ok}), w=1 guidance == conditional ({cfg_ok})"
        ),
    );
}
