//! Cross-layer routing. Three interchangeable ways to feed each sublayer
//! from the depth history:
//!
//! * `standard`  — the plain residual stream, h_l = h_0 + Σ_{i<l} f_i;
//! * `unet_skip` — residual stream plus long skips that fuse each deep
//!   block's input with its mirrored shallow block's input;
//! * `dar`       — every sublayer input is a softmax-weighted mixture over
//!   the stored sublayer outputs, with a learned query per aggregator and
//!   RMS-normalized keys. A dedicated final aggregator feeds the head.
//!
//! Sublayer outputs v_1..v_L are pure branch outputs (nothing is added back
//! here); v_0 is the input embedding. Chunking keeps DAR source sets small:
//! with chunk size S, an aggregator sees one summary per completed chunk
//! (the chunk's last output) plus the raw outputs of its own chunk so far.

use rand_chacha::ChaCha8Rng;
use tensor_core::{Graph, Real, TensorId};

use crate::backbone::{self, Model, ModelConfig, NORM_EPS};
use crate::params::{self, ParamId, ParamStore, Staged};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteMode {
    Standard,
    UnetSkip,
    Dar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryVariant {
    Static,
    ExplicitT,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    PerToken,
    MeanPooled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouterConfig {
    pub mode: RouteMode,
    pub query: QueryVariant,
    /// Chunk size S; 1 means dense (every prior source kept raw).
    pub chunk: usize,
    pub pooling: Pooling,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            mode: RouteMode::Standard,
            query: QueryVariant::Static,
            chunk: 2,
            pooling: Pooling::PerToken,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self, sublayers: usize) {
        assert!(self.chunk >= 1, "chunk size must be positive");
        assert!(
            self.chunk <= sublayers,
            "chunk size {} exceeds sublayer count {sublayers}",
            self.chunk
        );
        assert!(
            sublayers % self.chunk == 0,
            "chunk size {} must divide sublayer count {sublayers}",
            self.chunk
        );
    }
}

/// Origin indices visible to aggregator l (1..=total). Completed chunks are
/// represented by their last output (origin j·S for chunk j, with chunk 0
/// collapsing to the embedding v_0); the current chunk contributes raw
/// outputs.
pub fn source_set(l: usize, chunk: usize, total: usize) -> Vec<usize> {
    assert!(l >= 1 && l <= total, "sublayer index {l} out of 1..={total}");
    assert!(chunk >= 1 && total % chunk == 0, "invalid chunk size {chunk} for {total}");
    let n = l.div_ceil(chunk);
    let mut set: Vec<usize> = (0..n).map(|j| j * chunk).collect();
    set.extend((n - 1) * chunk + 1..l);
    set
}

/// Origins for the final aggregator: every chunk summary plus the raw
/// outputs of the last chunk (including v_L itself).
pub fn final_source_set(chunk: usize, total: usize) -> Vec<usize> {
    assert!(chunk >= 1 && total % chunk == 0, "invalid chunk size {chunk} for {total}");
    let n = total / chunk;
    let mut set: Vec<usize> = (0..n).map(|j| j * chunk).collect();
    set.extend((n - 1) * chunk + 1..=total);
    set
}

/// Mirror pairing for long skips at block granularity; only the deep half
/// (strictly past the midpoint) receives a skip.
pub fn unet_pair(block: usize, n_blocks: usize) -> Option<usize> {
    assert!(block >= 1 && block <= n_blocks, "block {block} out of 1..={n_blocks}");
    if 2 * block > n_blocks + 1 {
        Some(n_blocks - block + 1)
    } else {
        None
    }
}

#[derive(Debug, Clone)]
pub struct AggParams {
    /// Static query vector; also the base of the explicit-t query.
    pub q: Option<ParamId>,
    /// Dynamic query projection from the previous sublayer output.
    pub wq: Option<ParamId>,
    /// Key RMSNorm gain, shared across an aggregator's sources.
    pub gain: ParamId,
}

#[derive(Debug, Clone)]
pub enum RouteParams {
    Standard,
    UnetSkip {
        /// (deep block index, fusion weight [2d, d]) pairs.
        fuse: Vec<(usize, ParamId)>,
    },
    Dar {
        /// One per sublayer 1..=L, then the final aggregator at index L.
        aggs: Vec<AggParams>,
    },
}

/// Router parameters live after the backbone in registration order and are
/// drawn from their own RNG stream. Queries start at zero (uniform routing);
/// key gains start at one; skip fusions start as [I; 0] (identity on the
/// running stream).
pub fn register_route_params<F: Real>(
    store: &mut ParamStore<F>,
    cfg: &ModelConfig,
    rc: &RouterConfig,
    _rng: &mut ChaCha8Rng,
) -> RouteParams {
    let d = cfg.d;
    match rc.mode {
        RouteMode::Standard => RouteParams::Standard,
        RouteMode::UnetSkip => {
            let fuse = (1..=cfg.n_blocks)
                .filter(|&k| unet_pair(k, cfg.n_blocks).is_some())
                .map(|k| {
                    let w = store.add(
                        &format!("route.skip.{k}.w"),
                        &[2 * d, d],
                        params::identity_over_zeros(d),
                    );
                    (k, w)
                })
                .collect();
            RouteParams::UnetSkip { fuse }
        }
        RouteMode::Dar => {
            let mut aggs: Vec<AggParams> = (1..=cfg.sublayers())
                .map(|l| make_agg(store, rc, d, &format!("route.agg{l}")))
                .collect();
            aggs.push(make_agg(store, rc, d, "route.final"));
            RouteParams::Dar { aggs }
        }
    }
}

fn make_agg<F: Real>(
    store: &mut ParamStore<F>,
    rc: &RouterConfig,
    d: usize,
    prefix: &str,
) -> AggParams {
    let (q, wq) = match rc.query {
        QueryVariant::Static | QueryVariant::ExplicitT => (
            Some(store.add(&format!("{prefix}.q"), &[1, d], params::zeros(d))),
            None,
        ),
        QueryVariant::Dynamic => (
            None,
            Some(store.add(&format!("{prefix}.wq"), &[d, d], params::zeros(d * d))),
        ),
    };
    let gain = store.add(&format!("{prefix}.gain"), &[1, d], params::ones(d));
    AggParams { q, wq, gain }
}

// ---- forward assembly ------------------------------------------------------

/// Add `delta` to one coordinate of a block state. Used by diagnostics to
/// finite-difference-check the analytic state gradients.
#[derive(Debug, Clone, Copy)]
pub struct Bump {
    pub block: usize,
    pub token: usize,
    pub dim: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOpts {
    /// Insert a unit scalar gate on every (source → consumer) edge of the
    /// standard stream. Forward-preserving; the gate gradients are the
    /// counterfactual source-importance measurements.
    pub gates: bool,
    pub bump: Option<Bump>,
}

#[derive(Debug, Clone)]
pub struct AlphaTrace {
    /// Consuming aggregator: 1..=L for sublayers, L+1 for the final one.
    pub consumer: usize,
    pub origins: Vec<usize>,
    /// Routing-weight node, rows × |origins| (one row under mean pooling).
    pub weights: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct GateTrace {
    pub consumer: usize,
    pub source: usize,
    pub node: TensorId,
}

#[derive(Debug, Clone)]
pub struct Trace {
    /// v_0 (embedding) then the L branch outputs.
    pub v: Vec<TensorId>,
    /// Input actually consumed by each sublayer, h_1..h_L.
    pub h: Vec<TensorId>,
    /// State passed onward at each block boundary; z_K is the head input.
    pub z: Vec<TensorId>,
    pub final_input: TensorId,
    pub alphas: Vec<AlphaTrace>,
    pub gates: Vec<GateTrace>,
    /// Velocity prediction, tokens × token_dim.
    pub out: TensorId,
}

fn maybe_bump<F: Real>(g: &mut Graph<F>, opts: &RunOpts, block: usize, state: TensorId) -> TensorId {
    match &opts.bump {
        Some(b) if b.block == block => {
            let (r, c) = g.shape(state);
            assert!(b.token < r && b.dim < c, "bump coordinate out of range");
            let mut delta = vec![F::zero(); r * c];
            delta[b.token * c + b.dim] = F::from_f64(b.delta);
            let dnode = g.constant(r, c, delta);
            g.add(state, dnode)
        }
        _ => state,
    }
}

fn gated_sum<F: Real>(
    g: &mut Graph<F>,
    vs: &[TensorId],
    n_sources: usize,
    consumer: usize,
    gates: &mut Vec<GateTrace>,
) -> TensorId {
    let mut acc: Option<TensorId> = None;
    for (i, &src) in vs.iter().take(n_sources).enumerate() {
        let gate = g.scalar(F::one(), true);
        gates.push(GateTrace {
            consumer,
            source: i,
            node: gate,
        });
        let term = g.scale_by(src, gate);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    acc.expect("consumer with no sources")
}

fn unit_key<F: Real>(
    g: &mut Graph<F>,
    vs: &[TensorId],
    cache: &mut [Option<TensorId>],
    i: usize,
    pooling: Pooling,
) -> TensorId {
    if let Some(u) = cache[i] {
        return u;
    }
    let base = match pooling {
        Pooling::PerToken => vs[i],
        Pooling::MeanPooled => g.mean_rows(vs[i]),
    };
    let u = g.rms_norm(base, F::from_f64(NORM_EPS));
    cache[i] = Some(u);
    u
}

/// Softmax aggregation over the given origins: query per variant, keys from
/// the unit-RMS cache scaled by this aggregator's gain, logits scaled by
/// 1/√d of the model width.
#[allow(clippy::too_many_arguments)]
fn dar_mix<F: Real>(
    g: &mut Graph<F>,
    staged: &Staged,
    agg: &AggParams,
    rc: &RouterConfig,
    d: usize,
    e_t: TensorId,
    v_prev: TensorId,
    origins: &[usize],
    vs: &[TensorId],
    cache: &mut [Option<TensorId>],
) -> (TensorId, TensorId) {
    assert!(!origins.is_empty(), "empty source set");
    let query = match rc.query {
        QueryVariant::Static => staged.get(agg.q.expect("static query param")),
        QueryVariant::ExplicitT => {
            let q = staged.get(agg.q.expect("static query param"));
            g.add(q, e_t)
        }
        QueryVariant::Dynamic => {
            let prev = match rc.pooling {
                Pooling::PerToken => v_prev,
                Pooling::MeanPooled => g.mean_rows(v_prev),
            };
            g.matmul(prev, staged.get(agg.wq.expect("dynamic query param")))
        }
    };
    let gain = staged.get(agg.gain);
    let inv = F::from_f64(1.0 / (d as f64).sqrt());
    let logits: Vec<TensorId> = origins
        .iter()
        .map(|&i| {
            let unit = unit_key(g, vs, cache, i, rc.pooling);
            let key = g.mul_row(unit, gain);
            g.dot_rows(query, key, inv)
        })
        .collect();
    let stacked = g.stack_cols(&logits);
    let weights = g.softmax_rows(stacked);
    let srcs: Vec<TensorId> = origins.iter().map(|&i| vs[i]).collect();
    let h = g.weighted_sum_rows(weights, &srcs);
    (h, weights)
}

/// Full forward pass under the model's routing mode. Returns graph handles
/// for everything diagnostics might want; the caller decides what to read.
pub fn run_network<F: Real>(
    g: &mut Graph<F>,
    model: &Model<F>,
    staged: &Staged,
    tokens: TensorId,
    class: usize,
    t: f64,
    opts: &RunOpts,
) -> Trace {
    let cfg = &model.cfg;
    let l_total = cfg.sublayers();
    let k_blocks = cfg.n_blocks;
    if let Some(b) = &opts.bump {
        assert!(
            b.block >= 1 && b.block <= k_blocks,
            "bump block {} out of 1..={k_blocks}",
            b.block
        );
        assert!(!opts.gates, "bump and gates are separate instruments");
    }

    let e_t = backbone::timestep_embed(g, staged, model, t);
    let cls = backbone::class_embed(g, staged, model, class);
    let cond = g.add(e_t, cls);
    let silu_cond = g.silu(cond);
    let v0 = backbone::embed(g, staged, model, tokens, class);

    let mut vs = vec![v0];
    let mut hs = Vec::with_capacity(l_total);
    let mut zs = Vec::with_capacity(k_blocks);
    let mut alphas = Vec::new();
    let mut gate_trace = Vec::new();

    let final_input = match &model.route {
        RouteParams::Standard if !opts.gates => {
            let mut stream = v0;
            for l in 1..=l_total {
                hs.push(stream);
                let vl = backbone::sublayer(g, staged, model, l - 1, stream, silu_cond);
                vs.push(vl);
                stream = g.add(stream, vl);
                if l % 2 == 0 {
                    stream = maybe_bump(g, opts, l / 2, stream);
                    zs.push(stream);
                }
            }
            stream
        }
        RouteParams::Standard => {
            // Gated variant: each consumer rebuilds its input as the same
            // left-fold sum with a unit gate on every term, so values (and
            // even bits) match the plain stream while every edge gets its
            // own gradient.
            for l in 1..=l_total {
                let h = gated_sum(g, &vs, l, l, &mut gate_trace);
                hs.push(h);
                if l % 2 == 1 && l > 1 {
                    zs.push(h);
                }
                let vl = backbone::sublayer(g, staged, model, l - 1, h, silu_cond);
                vs.push(vl);
            }
            let fin = gated_sum(g, &vs, l_total + 1, l_total + 1, &mut gate_trace);
            zs.push(fin);
            fin
        }
        RouteParams::UnetSkip { fuse } => {
            assert!(!opts.gates, "counterfactual gates require standard routing");
            let mut stream = v0;
            let mut block_inputs = Vec::with_capacity(k_blocks);
            for k in 1..=k_blocks {
                block_inputs.push(stream);
                let mut cur = stream;
                if let Some(shallow_block) = unet_pair(k, k_blocks) {
                    let w = fuse
                        .iter()
                        .find(|(b, _)| *b == k)
                        .map(|(_, w)| *w)
                        .unwrap_or_else(|| panic!("block {k} has no skip fusion"));
                    let shallow = block_inputs[shallow_block - 1];
                    let cat = g.concat_cols(cur, shallow);
                    cur = g.matmul(cat, staged.get(w));
                }
                for half in 0..2 {
                    let l = 2 * k - 1 + half;
                    hs.push(cur);
                    let vl = backbone::sublayer(g, staged, model, l - 1, cur, silu_cond);
                    vs.push(vl);
                    cur = g.add(cur, vl);
                }
                cur = maybe_bump(g, opts, k, cur);
                zs.push(cur);
                stream = cur;
            }
            stream
        }
        RouteParams::Dar { aggs } => {
            assert!(!opts.gates, "counterfactual gates require standard routing");
            let rc = &model.route_cfg;
            let mut cache = vec![None; l_total + 1];
            for l in 1..=l_total {
                let origins = source_set(l, rc.chunk, l_total);
                let v_prev = vs[l - 1];
                let (mut h, w) = dar_mix(
                    g, staged, &aggs[l - 1], rc, cfg.d, e_t, v_prev, &origins, &vs, &mut cache,
                );
                alphas.push(AlphaTrace {
                    consumer: l,
                    origins,
                    weights: w,
                });
                if l % 2 == 1 && l > 1 {
                    h = maybe_bump(g, opts, (l - 1) / 2, h);
                    zs.push(h);
                }
                hs.push(h);
                let vl = backbone::sublayer(g, staged, model, l - 1, h, silu_cond);
                vs.push(vl);
            }
            let origins = final_source_set(rc.chunk, l_total);
            let v_prev = vs[l_total];
            let (mut fin, w) = dar_mix(
                g, staged, &aggs[l_total], rc, cfg.d, e_t, v_prev, &origins, &vs, &mut cache,
            );
            alphas.push(AlphaTrace {
                consumer: l_total + 1,
                origins,
                weights: w,
            });
            fin = maybe_bump(g, opts, k_blocks, fin);
            zs.push(fin);
            fin
        }
    };

    let out = backbone::velocity_head(g, staged, model, final_input, silu_cond);
    Trace {
        v: vs,
        h: hs,
        z: zs,
        final_input,
        alphas,
        gates: gate_trace,
        out,
    }
}
