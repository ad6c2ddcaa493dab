//! Toy flow-matching transformer in the DiT/SiT mold.
//!
//! 8x8 blob images are patchified into 16 tokens, embedded, and pushed
//! through n_blocks blocks of (attention, MLP) sublayers with adaLN-Zero
//! conditioning on timestep + class. The network predicts the flow velocity
//! per token. How hidden states travel *between* sublayers is owned entirely
//! by the router module; this file only knows how to produce one branch
//! output f_l(h; t) from one sublayer input.
//!
//! Init conventions follow the adaLN-Zero recipe: every conditioning
//! projection, the final layer of the t-embedder, the null-class embedding
//! row, and the output head start at exactly zero, so a fresh network is the
//! zero function regardless of routing mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensor_core::{Graph, Real, TensorId};

use crate::params::{self, ParamId, ParamStore, Staged};
use crate::router::{self, RouteParams, RouterConfig};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub n_classes: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_blocks: 6,
            d: 64,
            tokens: crate::data::TOKENS,
            token_dim: crate::data::TOKEN_DIM,
            n_classes: crate::data::N_CLASSES,
            head_dim: 64,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// Two sublayers (attention, MLP) per block.
    pub fn sublayers(&self) -> usize {
        2 * self.n_blocks
    }

    pub fn heads(&self) -> usize {
        assert!(
            self.head_dim > 0 && self.d % self.head_dim == 0,
            "width {} not divisible by head_dim {}",
            self.d,
            self.head_dim
        );
        self.d / self.head_dim
    }

    /// The reserved label that means "unconditional" for CFG.
    pub fn null_class(&self) -> usize {
        self.n_classes
    }
}

#[derive(Debug, Clone)]
pub enum SublayerKind {
    Attn {
        qkv_w: ParamId,
        qkv_b: ParamId,
        proj_w: ParamId,
        proj_b: ParamId,
    },
    Mlp {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

#[derive(Debug, Clone)]
pub struct SublayerParams {
    pub ada_w: ParamId,
    pub ada_b: ParamId,
    pub kind: SublayerKind,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos: ParamId,
    pub class_emb: ParamId,
    pub t_fc1_w: ParamId,
    pub t_fc1_b: ParamId,
    pub t_fc2_w: ParamId,
    pub t_fc2_b: ParamId,
    pub sublayers: Vec<SublayerParams>,
    pub head_ada_w: ParamId,
    pub head_ada_b: ParamId,
    pub head_out_w: ParamId,
    pub head_out_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    pub cfg: ModelConfig,
    pub route_cfg: RouterConfig,
    pub store: ParamStore<F>,
    pub bb: Backbone,
    pub route: RouteParams,
}

impl<F: Real> Model<F> {
    /// Build and initialize. The backbone and the router draw from separate
    /// RNG streams so that switching routing mode leaves backbone init
    /// untouched for a given seed.
    pub fn new(cfg: ModelConfig, route_cfg: RouterConfig, seed: u64) -> Self {
        route_cfg.validate(cfg.sublayers());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = register_backbone(&mut store, &cfg, &mut rng);
        let mut route_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x524f_5554_4552_5345);
        let route = router::register_route_params(&mut store, &cfg, &route_cfg, &mut route_rng);
        Model {
            cfg,
            route_cfg,
            store,
            bb,
            route,
        }
    }

    /// Overwrite every parameter with N(0, std) draws. Gradient checks need
    /// this: the careful zero-init above makes most directional derivatives
    /// vanish at a fresh model.
    pub fn randomize(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in self.store.iter_mut() {
            let n = t.numel();
            t.values = params::normal_init(&mut rng, n, std);
        }
    }

    /// Stage every parameter, replacing `target` with a reshape of `flat`
    /// sliced at the parameter's offset. Lets finite-difference drivers treat
    /// the whole parameter vector as a single leaf.
    pub fn stage_from_flat(&self, g: &mut Graph<F>, flat: TensorId) -> Staged {
        let (fr, fc) = g.shape(flat);
        assert_eq!(fr, 1, "flat parameter leaf must be a single row");
        assert_eq!(fc, self.store.numel(), "flat leaf length mismatch");
        let mut offset = 0;
        let mut nodes = Vec::new();
        for id in self.store.ids() {
            let t = self.store.tensor(id);
            let (r, c) = t.dims2();
            let n = t.numel();
            let piece = g.slice_cols(flat, offset, offset + n);
            nodes.push(g.reshape(piece, r, c));
            offset += n;
        }
        Staged::from_nodes(nodes)
    }

    /// All parameter values flattened in registration order, as f64.
    pub fn flat_values(&self) -> Vec<f64> {
        self.store
            .iter()
            .flat_map(|(_, t)| t.values.iter().map(|v| v.as_f64()))
            .collect()
    }
}

fn register_backbone<F: Real>(
    store: &mut ParamStore<F>,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Backbone {
    let d = cfg.d;
    let din = cfg.token_dim;
    let hidden = cfg.mlp_ratio * d;

    let patch_w = store.add("embed.patch.w", &[din, d], params::xavier_uniform(rng, din, d));
    let patch_b = store.add("embed.patch.b", &[d], params::zeros(d));
    let pos = store.add(
        "embed.pos",
        &[cfg.tokens, d],
        params::normal_init(rng, cfg.tokens * d, 0.02),
    );
    // One extra row for the null class; that row starts (and the others do
    // not) at zero so unconditional behavior is the fresh-network default.
    let mut class_rows: Vec<F> = params::normal_init(rng, (cfg.n_classes + 1) * d, 0.02);
    for v in class_rows[cfg.n_classes * d..].iter_mut() {
        *v = F::zero();
    }
    let class_emb = store.add("embed.class", &[cfg.n_classes + 1, d], class_rows);

    let t_fc1_w = store.add("temb.fc1.w", &[d, d], params::xavier_uniform(rng, d, d));
    let t_fc1_b = store.add("temb.fc1.b", &[d], params::zeros(d));
    let t_fc2_w = store.add("temb.fc2.w", &[d, d], params::zeros(d * d));
    let t_fc2_b = store.add("temb.fc2.b", &[d], params::zeros(d));

    let mut sublayers = Vec::with_capacity(cfg.sublayers());
    for k in 1..=cfg.n_blocks {
        let qkv_w = store.add(
            &format!("blocks.{k}.attn.qkv.w"),
            &[d, 3 * d],
            params::xavier_uniform(rng, d, 3 * d),
        );
        let qkv_b = store.add(&format!("blocks.{k}.attn.qkv.b"), &[3 * d], params::zeros(3 * d));
        let proj_w = store.add(
            &format!("blocks.{k}.attn.proj.w"),
            &[d, d],
            params::xavier_uniform(rng, d, d),
        );
        let proj_b = store.add(&format!("blocks.{k}.attn.proj.b"), &[d], params::zeros(d));
        let ada_w = store.add(&format!("blocks.{k}.attn.ada.w"), &[d, 3 * d], params::zeros(d * 3 * d));
        let ada_b = store.add(&format!("blocks.{k}.attn.ada.b"), &[3 * d], params::zeros(3 * d));
        sublayers.push(SublayerParams {
            ada_w,
            ada_b,
            kind: SublayerKind::Attn {
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
            },
        });

        let w1 = store.add(
            &format!("blocks.{k}.mlp.fc1.w"),
            &[d, hidden],
            params::xavier_uniform(rng, d, hidden),
        );
        let b1 = store.add(&format!("blocks.{k}.mlp.fc1.b"), &[hidden], params::zeros(hidden));
        let w2 = store.add(
            &format!("blocks.{k}.mlp.fc2.w"),
            &[hidden, d],
            params::xavier_uniform(rng, hidden, d),
        );
        let b2 = store.add(&format!("blocks.{k}.mlp.fc2.b"), &[d], params::zeros(d));
        let ada_w = store.add(&format!("blocks.{k}.mlp.ada.w"), &[d, 3 * d], params::zeros(d * 3 * d));
        let ada_b = store.add(&format!("blocks.{k}.mlp.ada.b"), &[3 * d], params::zeros(3 * d));
        sublayers.push(SublayerParams {
            ada_w,
            ada_b,
            kind: SublayerKind::Mlp { w1, b1, w2, b2 },
        });
    }

    let head_ada_w = store.add("head.ada.w", &[d, 2 * d], params::zeros(d * 2 * d));
    let head_ada_b = store.add("head.ada.b", &[2 * d], params::zeros(2 * d));
    let head_out_w = store.add("head.out.w", &[d, din], params::zeros(d * din));
    let head_out_b = store.add("head.out.b", &[din], params::zeros(din));

    Backbone {
        patch_w,
        patch_b,
        pos,
        class_emb,
        t_fc1_w,
        t_fc1_b,
        t_fc2_w,
        t_fc2_b,
        sublayers,
        head_ada_w,
        head_ada_b,
        head_out_w,
        head_out_b,
    }
}

// ---- graph builders -------------------------------------------------------

/// Sinusoidal timestep features, computed off-graph. t is scaled by 1000 so
/// the [0,1] range spans the frequency table the way step indices do in the
/// discrete-time parents of this architecture.
pub fn timestep_features<F: Real>(t: f64, d: usize) -> Vec<F> {
    assert!(d % 2 == 0, "feature width must be even");
    let half = d / 2;
    let mut out = Vec::with_capacity(d);
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
        out.push(F::from_f64((t * 1000.0 * freq).cos()));
    }
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
        out.push(F::from_f64((t * 1000.0 * freq).sin()));
    }
    out
}

/// e(t): sinusoidal features through a two-layer MLP whose final layer is
/// zero-initialized, so e(t) == 0 for every t until training moves it.
pub fn timestep_embed<F: Real>(
    g: &mut Graph<F>,
    staged: &Staged,
    model: &Model<F>,
    t: f64,
) -> TensorId {
    assert!((0.0..=1.0).contains(&t), "timestep {t} outside [0,1]");
    let feats = timestep_features::<F>(t, model.cfg.d);
    let x = g.constant(1, model.cfg.d, feats);
    let h = g.matmul(x, staged.get(model.bb.t_fc1_w));
    let h = g.add_row(h, staged.get(model.bb.t_fc1_b));
    let h = g.silu(h);
    let h = g.matmul(h, staged.get(model.bb.t_fc2_w));
    g.add_row(h, staged.get(model.bb.t_fc2_b))
}

/// Class embedding row; `class == n_classes` selects the null row.
pub fn class_embed<F: Real>(
    g: &mut Graph<F>,
    staged: &Staged,
    model: &Model<F>,
    class: usize,
) -> TensorId {
    assert!(
        class <= model.cfg.n_classes,
        "class {class} out of range (null class is {})",
        model.cfg.n_classes
    );
    g.select_row(staged.get(model.bb.class_emb), class)
}

/// v0: patch embedding + positional embedding + class embedding row.
pub fn embed<F: Real>(
    g: &mut Graph<F>,
    staged: &Staged,
    model: &Model<F>,
    tokens: TensorId,
    class: usize,
) -> TensorId {
    let (r, c) = g.shape(tokens);
    assert_eq!(
        (r, c),
        (model.cfg.tokens, model.cfg.token_dim),
        "token matrix is {r}x{c}, expected {}x{}",
        model.cfg.tokens,
        model.cfg.token_dim
    );
    let x = g.matmul(tokens, staged.get(model.bb.patch_w));
    let x = g.add_row(x, staged.get(model.bb.patch_b));
    let x = g.add(x, staged.get(model.bb.pos));
    let cls = class_embed(g, staged, model, class);
    g.add_row(x, cls)
}

/// Split an adaLN projection of the conditioning vector into row chunks.
fn ada_chunks<F: Real>(
    g: &mut Graph<F>,
    silu_cond: TensorId,
    w: TensorId,
    b: TensorId,
    n: usize,
    d: usize,
) -> Vec<TensorId> {
    let proj = g.matmul(silu_cond, w);
    let proj = g.add_row(proj, b);
    (0..n).map(|i| g.slice_cols(proj, i * d, (i + 1) * d)).collect()
}

/// LayerNorm then (1 + scale) ⊙ x + shift with row-broadcast modulation.
fn modulate<F: Real>(g: &mut Graph<F>, x: TensorId, shift: TensorId, scale: TensorId) -> TensorId {
    let normed = g.layer_norm(x, F::from_f64(NORM_EPS));
    let (_, d) = g.shape(scale);
    let one = g.constant(1, d, vec![F::one(); d]);
    let gain = g.add(one, scale);
    let scaled = g.mul_row(normed, gain);
    g.add_row(scaled, shift)
}

fn attention<F: Real>(
    g: &mut Graph<F>,
    staged: &Staged,
    model: &Model<F>,
    x: TensorId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
) -> TensorId {
    let d = model.cfg.d;
    let hd = model.cfg.head_dim;
    let heads = model.cfg.heads();
    let qkv = g.matmul(x, staged.get(qkv_w));
    let qkv = g.add_row(qkv, staged.get(qkv_b));
    let q = g.slice_cols(qkv, 0, d);
    let k = g.slice_cols(qkv, d, 2 * d);
    let v = g.slice_cols(qkv, 2 * d, 3 * d);

    let scale = F::from_f64(1.0 / (hd as f64).sqrt());
    let mut head_outs = Vec::with_capacity(heads);
    for hh in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, hh * hd, (hh + 1) * hd),
                g.slice_cols(k, hh * hd, (hh + 1) * hd),
                g.slice_cols(v, hh * hd, (hh + 1) * hd),
            )
        };
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        head_outs.push(g.matmul(attn, vh));
    }
    let merged = head_outs
        .into_iter()
        .reduce(|a, b| g.concat_cols(a, b))
        .expect("at least one head");
    let out = g.matmul(merged, staged.get(proj_w));
    g.add_row(out, staged.get(proj_b))
}

fn mlp<F: Real>(
    g: &mut Graph<F>,
    staged: &Staged,
    x: TensorId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
) -> TensorId {
    let h = g.matmul(x, staged.get(w1));
    let h = g.add_row(h, staged.get(b1));
    let h = g.gelu(h);
    let h = g.matmul(h, staged.get(w2));
    g.add_row(h, staged.get(b2))
}

/// One sublayer's branch output f_l(h; cond): adaLN-modulated norm into the
/// attention or MLP body, output gated. The caller owns stream/aggregation
/// semantics — nothing is added back to the input here.
pub fn sublayer<F: Real>(
    g: &mut Graph<F>,
    staged: &Staged,
    model: &Model<F>,
    index: usize, // 0-based into bb.sublayers
    h: TensorId,
    silu_cond: TensorId,
) -> TensorId {
    let d = model.cfg.d;
    let p = &model.bb.sublayers[index];
    let chunks = ada_chunks(g, silu_cond, staged.get(p.ada_w), staged.get(p.ada_b), 3, d);
    let (shift, scale, gate) = (chunks[0], chunks[1], chunks[2]);
    let modulated = modulate(g, h, shift, scale);
    let body = match &p.kind {
        SublayerKind::Attn {
            qkv_w,
            qkv_b,
            proj_w,
            proj_b,
        } => attention(g, staged, model, modulated, *qkv_w, *qkv_b, *proj_w, *proj_b),
        SublayerKind::Mlp { w1, b1, w2, b2 } => mlp(g, staged, modulated, *w1, *b1, *w2, *b2),
    };
    g.mul_row(body, gate)
}

/// Final modulated norm and zero-initialized projection to velocity tokens.
pub fn velocity_head<F: Real>(
    g: &mut Graph<F>,
    staged: &Staged,
    model: &Model<F>,
    h_final: TensorId,
    silu_cond: TensorId,
) -> TensorId {
    let d = model.cfg.d;
    let chunks = ada_chunks(
        g,
        silu_cond,
        staged.get(model.bb.head_ada_w),
        staged.get(model.bb.head_ada_b),
        2,
        d,
    );
    let (shift, scale) = (chunks[0], chunks[1]);
    let modulated = modulate(g, h_final, shift, scale);
    let out = g.matmul(modulated, staged.get(model.bb.head_out_w));
    g.add_row(out, staged.get(model.bb.head_out_b))
}
