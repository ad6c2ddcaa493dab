//! Flow-matching training loop. Linear interpolant x_t = (1−t)·x₀ + t·ε
//! (t=0 data, t=1 noise), velocity target v* = ε − x₀, masked-class dropout
//! for CFG, and a momentum-free adaptive optimizer (second-moment
//! normalization with bias correction) with global gradient-norm clipping.
//!
//! Determinism contract: everything a run does flows from (train.seed,
//! data.seed) through fixed draw order — per sample: dataset index, t,
//! 64 noise values, class-dropout uniform. Loss and validation curves are
//! bit-reproducible for a fixed config on the same build.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use tensor_core::{Graph, Real};

use crate::backbone::Model;
use crate::config::Settings;
use crate::data::{self, Dataset, PIXELS, TOKENS, TOKEN_DIM};
use crate::params::ParamStore;
use crate::router::{run_network, RunOpts};

pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at step {step}; aborting run")]
    NonFinite { step: u64, loss: f64 },
}

/// Second-moment accumulators, one slot per parameter in store order.
#[derive(Debug, Clone)]
pub struct OptState<F: Real> {
    pub v: Vec<Vec<F>>,
    pub step: u64,
}

impl<F: Real> OptState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        OptState {
            v: store.iter().map(|(_, t)| vec![F::zero(); t.numel()]).collect(),
            step: 0,
        }
    }

    /// One update from the gradients accumulated in the store. Clips by
    /// global norm first, then per-coordinate: v ← β₂v + (1−β₂)g²,
    /// p ← p − lr·g/(√(v/(1−β₂^step)) + ε). Gradients are cleared.
    pub fn apply(&mut self, store: &mut ParamStore<F>, lr: f64, clip: f64) {
        self.step += 1;
        let mut norm_sq = 0.0f64;
        for (_, t) in store.iter() {
            if let Some(g) = &t.grad {
                norm_sq += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
        }
        let norm = norm_sq.sqrt();
        let rescale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        let bias = 1.0 - ADAM_BETA2.powi(self.step as i32);

        for (idx, (_, t)) in store.iter_mut().enumerate() {
            let Some(grad) = t.grad.take() else { continue };
            let slot = &mut self.v[idx];
            for (j, gv) in grad.iter().enumerate() {
                let g = gv.as_f64() * rescale;
                let v_new = ADAM_BETA2 * slot[j].as_f64() + (1.0 - ADAM_BETA2) * g * g;
                slot[j] = F::from_f64(v_new);
                let denom = (v_new / bias).sqrt() + ADAM_EPS;
                let p = t.values[j].as_f64() - lr * g / denom;
                t.values[j] = F::from_f64(p);
            }
        }
    }
}

/// x_t and the velocity target for one image/noise pair.
pub fn interpolant(x0: &[f64; PIXELS], eps: &[f64; PIXELS], t: f64) -> ([f64; PIXELS], [f64; PIXELS]) {
    let mut x_t = [0.0; PIXELS];
    let mut target = [0.0; PIXELS];
    for i in 0..PIXELS {
        x_t[i] = (1.0 - t) * x0[i] + t * eps[i];
        target[i] = eps[i] - x0[i];
    }
    (x_t, target)
}

/// A frozen validation item: interpolated input tokens, target tokens,
/// conditioning class, timestep.
#[derive(Debug, Clone)]
pub struct ValTriple {
    pub tokens: Vec<f64>,
    pub target: Vec<f64>,
    pub class: usize,
    pub t: f64,
}

/// Fixed (x₀, ε, t) triples derived from the data seed alone, so every run
/// of every routing mode is scored against the same yardstick.
pub fn make_val_set(data_seed: u64, n: usize) -> Vec<ValTriple> {
    let ds = data::make_dataset(data_seed ^ 0x56414c5f44531u64, n);
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed ^ 0x56414c5f524e47u64);
    (0..n)
        .map(|i| {
            let t: f64 = rng.random();
            let mut eps = [0.0f64; PIXELS];
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            let (x_t, target) = interpolant(&ds.images[i], &eps, t);
            ValTriple {
                tokens: data::patchify(&x_t),
                target: data::patchify(&target),
                class: ds.labels[i],
                t,
            }
        })
        .collect()
}

/// Mean squared velocity error over the validation triples, forward-only.
pub fn val_mse<F: Real>(model: &Model<F>, val: &[ValTriple]) -> f64 {
    assert!(!val.is_empty(), "empty validation set");
    let mut total = 0.0f64;
    for triple in val {
        let mut g = Graph::new();
        let staged = model.store.stage(&mut g, false);
        let tokens = g.constant(
            TOKENS,
            TOKEN_DIM,
            triple.tokens.iter().map(|&v| F::from_f64(v)).collect(),
        );
        let trace = run_network(&mut g, model, &staged, tokens, triple.class, triple.t, &RunOpts::default());
        let out = g.values(trace.out);
        let se: f64 = out
            .iter()
            .zip(&triple.target)
            .map(|(o, t)| {
                let d = o.as_f64() - t;
                d * d
            })
            .sum();
        total += se / triple.target.len() as f64;
    }
    total / val.len() as f64
}

#[derive(Debug)]
pub struct TrainRun<F: Real> {
    pub model: Model<F>,
    pub opt: OptState<F>,
    pub rng: ChaCha8Rng,
    /// (step, training loss) at every log_every-th step.
    pub loss_curve: Vec<(u64, f64)>,
    /// (step, validation MSE); includes step 0 and the final step.
    pub val_curve: Vec<(u64, f64)>,
}

/// First logged step at which validation MSE reaches `threshold`.
pub fn steps_to_reach(val_curve: &[(u64, f64)], threshold: f64) -> Option<u64> {
    val_curve
        .iter()
        .find(|(_, mse)| *mse <= threshold)
        .map(|(step, _)| *step)
}

pub fn train<F: Real>(settings: &Settings) -> Result<TrainRun<F>, TrainError> {
    let mut model: Model<F> = Model::new(
        settings.model.clone(),
        settings.route.clone(),
        settings.train.seed,
    );
    let ds = data::make_dataset(settings.data.seed, settings.data.train_n);
    let val = make_val_set(settings.data.seed, settings.data.val_n);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.train.seed);
    let mut opt = OptState::new(&model.store);

    let mut loss_curve = Vec::new();
    let mut val_curve = vec![(0u64, val_mse(&model, &val))];

    let tc = &settings.train;
    for step in 1..=tc.steps as u64 {
        let loss = train_step(&mut model, &ds, &mut rng, tc.batch, tc.null_drop);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step, loss });
        }
        opt.apply(&mut model.store, tc.lr, tc.clip);
        if tc.log_every > 0 && step % tc.log_every as u64 == 0 {
            loss_curve.push((step, loss));
        }
        if (tc.eval_every > 0 && step % tc.eval_every as u64 == 0) || step == tc.steps as u64 {
            val_curve.push((step, val_mse(&model, &val)));
        }
    }

    Ok(TrainRun {
        model,
        opt,
        rng,
        loss_curve,
        val_curve,
    })
}

/// One batch: builds a single graph, accumulates parameter gradients, and
/// returns the batch loss. The optimizer step is the caller's business.
pub fn train_step<F: Real>(
    model: &mut Model<F>,
    ds: &Dataset,
    rng: &mut ChaCha8Rng,
    batch: usize,
    null_drop: f64,
) -> f64 {
    assert!(batch > 0, "batch size must be positive");
    let mut g: Graph<F> = Graph::new();
    let staged = model.store.stage(&mut g, true);
    let mut losses = Vec::with_capacity(batch);
    for _ in 0..batch {
        let idx = rng.random_range(0..ds.images.len());
        let t: f64 = rng.random();
        let mut eps = [0.0f64; PIXELS];
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let drop: f64 = rng.random();
        let class = if drop < null_drop {
            model.cfg.null_class()
        } else {
            ds.labels[idx]
        };
        let (x_t, target) = interpolant(&ds.images[idx], &eps, t);
        let tokens = g.constant(
            TOKENS,
            TOKEN_DIM,
            data::patchify(&x_t).iter().map(|&v| F::from_f64(v)).collect(),
        );
        let trace = run_network(&mut g, model, &staged, tokens, class, t, &RunOpts::default());
        let tgt = g.constant(
            TOKENS,
            TOKEN_DIM,
            data::patchify(&target).iter().map(|&v| F::from_f64(v)).collect(),
        );
        losses.push(g.mse(trace.out, tgt));
    }
    let total = losses
        .into_iter()
        .reduce(|a, b| g.add(a, b))
        .expect("non-empty batch");
    let loss = g.scale(total, F::from_f64(1.0 / batch as f64));
    let lv = g.values(loss)[0].as_f64();
    g.backward(loss);
    model.store.harvest_grads(&g, &staged);
    lv
}
