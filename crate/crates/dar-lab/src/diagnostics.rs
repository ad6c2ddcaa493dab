//! Measurement suite over trained (or fresh) models: depth profiles of the
//! block states, counterfactual gate gradients on the standard stream,
//! routing-weight maps over timesteps, and the ridge probe that decodes t
//! from aggregated hidden states.
//!
//! Conventions: z_k is the state passed onward at block boundary k (the head
//! input for k = K). Profile RMS is computed per (sample, token) over the
//! width and then averaged; gradients are of the per-sample MSE loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tensor_core::{Graph, Real, TensorId};

use crate::backbone::Model;
use crate::data::{self, PIXELS, TOKENS, TOKEN_DIM};
use crate::router::{run_network, RouteMode, RunOpts};
use crate::train::interpolant;

#[derive(Debug, Clone)]
pub struct DiagItem {
    pub x0: [f64; PIXELS],
    pub eps: [f64; PIXELS],
    pub class: usize,
}

/// Fixed (image, noise, class) items for diagnostics, deterministic in seed.
pub fn make_diag_batch(seed: u64, n: usize) -> Vec<DiagItem> {
    let ds = data::make_dataset(seed ^ 0x4449_4147, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4449_4147_4e4f_4953);
    (0..n)
        .map(|i| {
            let mut eps = [0.0f64; PIXELS];
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            DiagItem {
                x0: ds.images[i],
                eps,
                class: ds.labels[i],
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DiagnosticReport {
    /// RMS of z_k, blocks 1..=K.
    pub rms_fwd: Vec<f64>,
    /// RMS of ∂L/∂z_k, blocks 1..=K.
    pub rms_grad: Vec<f64>,
    /// Mean per-token cosine between z_k and z_{k+1}, pairs 1..K.
    pub cos_sim: Vec<f64>,
    /// Token pairs skipped in the cosine average because one side was zero.
    pub skipped_pairs: usize,
    pub samples: usize,
    pub t: f64,
}

fn rms(row: &[f64]) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64).sqrt()
}

/// Forward-magnitude, gradient-magnitude, and adjacent-similarity profiles
/// in one pass. `loss_scale` multiplies the per-sample loss (gradients are
/// linear in it; profiles use 1.0).
pub fn state_profiles<F: Real>(
    model: &Model<F>,
    batch: &[DiagItem],
    t: f64,
    loss_scale: f64,
) -> DiagnosticReport {
    assert!(!batch.is_empty(), "empty diagnostic batch");
    let k_blocks = model.cfg.n_blocks;
    let d = model.cfg.d;
    let mut fwd_sums = vec![0.0f64; k_blocks];
    let mut grad_sums = vec![0.0f64; k_blocks];
    let mut cos_sums = vec![0.0f64; k_blocks.saturating_sub(1)];
    let mut cos_counts = vec![0usize; k_blocks.saturating_sub(1)];
    let mut skipped = 0usize;

    for item in batch {
        let (x_t, target) = interpolant(&item.x0, &item.eps, t);
        let mut g: Graph<F> = Graph::new();
        let staged = model.store.stage(&mut g, false);
        let tokens = g.leaf_values(
            TOKENS,
            TOKEN_DIM,
            data::patchify(&x_t).iter().map(|&v| F::from_f64(v)).collect(),
            true,
        );
        let trace = run_network(&mut g, model, &staged, tokens, item.class, t, &RunOpts::default());
        let tgt = g.constant(
            TOKENS,
            TOKEN_DIM,
            data::patchify(&target).iter().map(|&v| F::from_f64(v)).collect(),
        );
        let mut loss = g.mse(trace.out, tgt);
        if loss_scale != 1.0 {
            loss = g.scale(loss, F::from_f64(loss_scale));
        }
        g.backward(loss);

        let states: Vec<Vec<f64>> = trace
            .z
            .iter()
            .map(|&z| g.values(z).iter().map(|v| v.as_f64()).collect())
            .collect();
        let grads: Vec<Vec<f64>> = trace
            .z
            .iter()
            .map(|&z| g.grad(z).iter().map(|v| v.as_f64()).collect())
            .collect();
        assert_eq!(states.len(), k_blocks, "one state per block");

        for (k, state) in states.iter().enumerate() {
            for tok in 0..TOKENS {
                fwd_sums[k] += rms(&state[tok * d..(tok + 1) * d]);
                grad_sums[k] += rms(&grads[k][tok * d..(tok + 1) * d]);
            }
        }
        for k in 0..k_blocks.saturating_sub(1) {
            for tok in 0..TOKENS {
                let a = &states[k][tok * d..(tok + 1) * d];
                let b = &states[k + 1][tok * d..(tok + 1) * d];
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    skipped += 1;
                    continue;
                }
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                cos_sums[k] += dot / (na * nb);
                cos_counts[k] += 1;
            }
        }
    }

    let denom = (batch.len() * TOKENS) as f64;
    DiagnosticReport {
        rms_fwd: fwd_sums.iter().map(|s| s / denom).collect(),
        rms_grad: grad_sums.iter().map(|s| s / denom).collect(),
        cos_sim: cos_sums
            .iter()
            .zip(&cos_counts)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect(),
        skipped_pairs: skipped,
        samples: batch.len(),
        t,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateCell {
    /// Consuming sublayer 1..=L, or L+1 for the head input.
    pub consumer: usize,
    /// Source index: 0 is the embedding, i ≥ 1 is branch output i.
    pub source: usize,
    pub t: f64,
    pub grad: f64,
}

/// Counterfactual source importances on the standard stream: unit gates on
/// every (source → consumer) edge, batch-averaged loss gradients per gate,
/// swept over a t grid. Forward values are untouched by construction.
pub fn gate_gradients<F: Real>(
    model: &Model<F>,
    batch: &[DiagItem],
    t_grid: &[f64],
) -> Vec<GateCell> {
    assert!(
        model.route_cfg.mode == RouteMode::Standard,
        "counterfactual gates are defined on the standard stream"
    );
    assert!(!batch.is_empty(), "empty diagnostic batch");
    let mut cells = Vec::new();
    for &t in t_grid {
        let mut keys: Vec<(usize, usize)> = Vec::new();
        let mut sums: Vec<f64> = Vec::new();
        for item in batch {
            let (x_t, target) = interpolant(&item.x0, &item.eps, t);
            let mut g: Graph<F> = Graph::new();
            let staged = model.store.stage(&mut g, false);
            let tokens = g.constant(
                TOKENS,
                TOKEN_DIM,
                data::patchify(&x_t).iter().map(|&v| F::from_f64(v)).collect(),
            );
            let opts = RunOpts {
                gates: true,
                bump: None,
            };
            let trace = run_network(&mut g, model, &staged, tokens, item.class, t, &opts);
            let tgt = g.constant(
                TOKENS,
                TOKEN_DIM,
                data::patchify(&target).iter().map(|&v| F::from_f64(v)).collect(),
            );
            let loss = g.mse(trace.out, tgt);
            g.backward(loss);
            if keys.is_empty() {
                keys = trace.gates.iter().map(|gt| (gt.consumer, gt.source)).collect();
                sums = vec![0.0; keys.len()];
            }
            for (i, gt) in trace.gates.iter().enumerate() {
                debug_assert_eq!(keys[i], (gt.consumer, gt.source));
                sums[i] += g.grad(gt.node)[0].as_f64();
            }
        }
        for (i, &(consumer, source)) in keys.iter().enumerate() {
            cells.push(GateCell {
                consumer,
                source,
                t,
                grad: sums[i] / batch.len() as f64,
            });
        }
    }
    cells
}

#[derive(Debug, Clone, Copy)]
pub struct RouteCell {
    /// Consuming aggregator 1..=L, or L+1 for the final one.
    pub consumer: usize,
    pub origin: usize,
    pub t: f64,
    pub weight: f64,
}

/// Routing weights averaged over batch and tokens, per (aggregator, origin,
/// t). Requires a softmax-routing model.
pub fn routing_map<F: Real>(model: &Model<F>, batch: &[DiagItem], t_grid: &[f64]) -> Vec<RouteCell> {
    assert!(
        model.route_cfg.mode == RouteMode::Dar,
        "routing maps require softmax routing"
    );
    assert!(!batch.is_empty(), "empty diagnostic batch");
    let mut cells = Vec::new();
    for &t in t_grid {
        let mut keys: Vec<(usize, usize)> = Vec::new();
        let mut sums: Vec<f64> = Vec::new();
        for item in batch {
            let (x_t, _) = interpolant(&item.x0, &item.eps, t);
            let mut g: Graph<F> = Graph::new();
            let staged = model.store.stage(&mut g, false);
            let tokens = g.constant(
                TOKENS,
                TOKEN_DIM,
                data::patchify(&x_t).iter().map(|&v| F::from_f64(v)).collect(),
            );
            let trace = run_network(&mut g, model, &staged, tokens, item.class, t, &RunOpts::default());
            if keys.is_empty() {
                for at in &trace.alphas {
                    for &o in &at.origins {
                        keys.push((at.consumer, o));
                    }
                }
                sums = vec![0.0; keys.len()];
            }
            let mut cursor = 0;
            for at in &trace.alphas {
                let (rows, cols) = g.shape(at.weights);
                let w = g.values(at.weights);
                assert_eq!(cols, at.origins.len());
                for col in 0..cols {
                    let mut mean = 0.0;
                    for row in 0..rows {
                        mean += w[row * cols + col].as_f64();
                    }
                    sums[cursor] += mean / rows as f64;
                    cursor += 1;
                }
            }
        }
        for (i, &(consumer, origin)) in keys.iter().enumerate() {
            cells.push(RouteCell {
                consumer,
                origin,
                t,
                weight: sums[i] / batch.len() as f64,
            });
        }
    }
    cells
}

// ---- ridge probe -----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub block: usize,
    /// "attn" or "mlp": which aggregator input within the block.
    pub stream: &'static str,
    pub r2: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub rows: Vec<ProbeRow>,
    /// Ridge R² from token-pooled raw x_t.
    pub baseline_r2: f64,
    /// Ridge R² from the replicated-t control feature (should be ≈ 1).
    pub control_r2: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Decode t from token-mean pooled aggregated states. Pairs are split
/// train/test as whole pairs; every (pair, t) grid point contributes one
/// regression row.
pub fn timestep_probe<F: Real>(
    model: &Model<F>,
    pairs: &[DiagItem],
    t_grid: &[f64],
    lambda: f64,
    train_frac: f64,
) -> ProbeResult {
    assert!(lambda > 0.0, "ridge needs a positive lambda");
    assert!(pairs.len() >= 4, "need at least a few pairs to split");
    let l_total = model.cfg.sublayers();
    let d = model.cfg.d;

    // features[l] has one row per (pair, t); baseline gets the raw tokens.
    let mut features: Vec<Vec<Vec<f64>>> = vec![Vec::new(); l_total];
    let mut baseline: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut pair_of_row: Vec<usize> = Vec::new();

    for (pi, item) in pairs.iter().enumerate() {
        for &t in t_grid {
            let (x_t, _) = interpolant(&item.x0, &item.eps, t);
            let raw = data::patchify(&x_t);
            let mut pooled_raw = vec![0.0; TOKEN_DIM];
            for tok in 0..TOKENS {
                for j in 0..TOKEN_DIM {
                    pooled_raw[j] += raw[tok * TOKEN_DIM + j] / TOKENS as f64;
                }
            }
            baseline.push(pooled_raw);

            let mut g: Graph<F> = Graph::new();
            let staged = model.store.stage(&mut g, false);
            let tokens = g.constant(TOKENS, TOKEN_DIM, raw.iter().map(|&v| F::from_f64(v)).collect());
            let trace = run_network(&mut g, model, &staged, tokens, item.class, t, &RunOpts::default());
            for (l, &h) in trace.h.iter().enumerate() {
                features[l].push(pool_tokens(&g, h, d));
            }
            ys.push(t);
            pair_of_row.push(pi);
        }
    }

    let n_train_pairs = ((pairs.len() as f64) * train_frac).ceil() as usize;
    let is_train: Vec<bool> = pair_of_row.iter().map(|&p| p < n_train_pairs).collect();
    let n_train = is_train.iter().filter(|&&b| b).count();
    let n_test = is_train.len() - n_train;
    assert!(n_test > 0, "train fraction leaves no test pairs");

    let rows = features
        .iter()
        .enumerate()
        .map(|(l0, cols)| {
            let l = l0 + 1;
            ProbeRow {
                block: l.div_ceil(2),
                stream: if l % 2 == 1 { "attn" } else { "mlp" },
                r2: ridge_r2(cols, &ys, &is_train, lambda),
            }
        })
        .collect();

    let control: Vec<Vec<f64>> = ys.iter().map(|&t| vec![t; 4]).collect();

    ProbeResult {
        rows,
        baseline_r2: ridge_r2(&baseline, &ys, &is_train, lambda),
        control_r2: ridge_r2(&control, &ys, &is_train, lambda),
        n_train,
        n_test,
    }
}

fn pool_tokens<F: Real>(g: &Graph<F>, node: TensorId, d: usize) -> Vec<f64> {
    let (rows, cols) = g.shape(node);
    assert_eq!(cols, d);
    let vals = g.values(node);
    let mut pooled = vec![0.0; d];
    for r in 0..rows {
        for c in 0..d {
            pooled[c] += vals[r * d + c].as_f64() / rows as f64;
        }
    }
    pooled
}

/// Closed-form ridge on standardized features: fit (XᵀX + λI)β = Xᵀy on the
/// train rows, report R² on the test rows (1 − SSres/SStot around the test
/// mean).
pub fn ridge_r2(features: &[Vec<f64>], ys: &[f64], is_train: &[bool], lambda: f64) -> f64 {
    assert_eq!(features.len(), ys.len());
    assert_eq!(features.len(), is_train.len());
    let dim = features[0].len();

    let train_rows: Vec<usize> = (0..ys.len()).filter(|&i| is_train[i]).collect();
    let test_rows: Vec<usize> = (0..ys.len()).filter(|&i| !is_train[i]).collect();
    assert!(!train_rows.is_empty() && !test_rows.is_empty());

    // Standardize with train statistics; constant columns collapse to zero.
    let mut mean = vec![0.0; dim];
    for &r in &train_rows {
        for j in 0..dim {
            mean[j] += features[r][j];
        }
    }
    for m in mean.iter_mut() {
        *m /= train_rows.len() as f64;
    }
    let mut std = vec![0.0; dim];
    for &r in &train_rows {
        for j in 0..dim {
            let dlt = features[r][j] - mean[j];
            std[j] += dlt * dlt;
        }
    }
    for s in std.iter_mut() {
        *s = (*s / train_rows.len() as f64).sqrt().max(1e-8);
    }
    let y_mean = train_rows.iter().map(|&r| ys[r]).sum::<f64>() / train_rows.len() as f64;

    let zrow = |r: usize| -> Vec<f64> {
        (0..dim).map(|j| (features[r][j] - mean[j]) / std[j]).collect()
    };

    // Normal equations.
    let mut xtx = vec![0.0; dim * dim];
    let mut xty = vec![0.0; dim];
    for &r in &train_rows {
        let z = zrow(r);
        let yc = ys[r] - y_mean;
        for i in 0..dim {
            xty[i] += z[i] * yc;
            for j in i..dim {
                xtx[i * dim + j] += z[i] * z[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            xtx[i * dim + j] = xtx[j * dim + i];
        }
        xtx[i * dim + i] += lambda;
    }
    let beta = cholesky_solve(&mut xtx, &xty, dim);

    let mut ss_res = 0.0;
    let test_y_mean = test_rows.iter().map(|&r| ys[r]).sum::<f64>() / test_rows.len() as f64;
    let mut ss_tot = 0.0;
    for &r in &test_rows {
        let z = zrow(r);
        let pred = y_mean + z.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
        ss_res += (ys[r] - pred) * (ys[r] - pred);
        ss_tot += (ys[r] - test_y_mean) * (ys[r] - test_y_mean);
    }
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

/// Solve A x = b for symmetric positive-definite A (in place Cholesky).
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Vec<f64> {
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                assert!(sum > 0.0, "matrix not positive definite");
                a[i * n + j] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    // Forward then backward substitution on the lower factor.
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= a[i * n + k] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            x[i] -= a[k * n + i] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    x
}

/// Uniform grid of `points` values over [0, 1].
pub fn t_grid(points: usize) -> Vec<f64> {
    assert!(points >= 2, "grid needs at least two points");
    (0..points).map(|i| i as f64 / (points - 1) as f64).collect()
}
