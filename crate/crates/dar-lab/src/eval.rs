//! Sample-quality evaluation without pretrained feature extractors:
//! validation velocity MSE plus two-sample distances (RBF MMD² and energy
//! distance) between generated and held-out images, overall and per class.

use crate::backbone::Model;
use crate::config::Settings;
use crate::data;
use crate::sample;
use crate::train::{make_val_set, val_mse};
use tensor_core::Real;

#[derive(Debug, Clone)]
pub struct ClassStats {
    pub class: usize,
    pub mmd: f64,
    pub energy: f64,
    pub n_gen: usize,
    pub n_ref: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub val_mse: f64,
    pub mmd: f64,
    pub energy: f64,
    pub per_class: Vec<ClassStats>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Biased (V-statistic) squared MMD with an RBF kernel; bandwidth from the
/// median heuristic over the pooled pairwise squared distances. Zero for
/// identical sets.
pub fn rbf_mmd2(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "empty sample set");
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b.iter()).collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
    let median = if dists.is_empty() { 0.0 } else { dists[dists.len() / 2] };
    let sigma2 = (median / 2.0).max(1e-12);
    let k = |x: &[f64], y: &[f64]| (-sq_dist(x, y) / (2.0 * sigma2)).exp();

    let mean_kernel = |xs: &[Vec<f64>], ys: &[Vec<f64>]| {
        let mut total = 0.0;
        for x in xs {
            for y in ys {
                total += k(x, y);
            }
        }
        total / (xs.len() * ys.len()) as f64
    };
    mean_kernel(a, a) + mean_kernel(b, b) - 2.0 * mean_kernel(a, b)
}

/// Energy distance 2·E‖x−y‖ − E‖x−x'‖ − E‖y−y'‖ (V-statistics).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "empty sample set");
    let mean_dist = |xs: &[Vec<f64>], ys: &[Vec<f64>]| {
        let mut total = 0.0;
        for x in xs {
            for y in ys {
                total += sq_dist(x, y).sqrt();
            }
        }
        total / (xs.len() * ys.len()) as f64
    };
    2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)
}

/// Full evaluation of a model under the given settings: validation MSE,
/// and distribution distances between `eval.gen_n` generated samples and an
/// equally sized held-out set drawn from a reserved data stream.
pub fn evaluate<F: Real>(model: &Model<F>, settings: &Settings) -> EvalReport {
    let n = settings.eval_gen_n;
    let heldout = data::make_dataset(settings.data.seed ^ 0x4845_4c44_4f55_54, n);
    let generated = sample::generate(
        model,
        n,
        settings.sample.seed,
        settings.sample.cfg,
        settings.sample.steps,
    );

    let gen_vecs: Vec<Vec<f64>> = generated.iter().map(|(_, img)| img.to_vec()).collect();
    let ref_vecs: Vec<Vec<f64>> = heldout.images.iter().map(|img| img.to_vec()).collect();

    let per_class = (0..settings.model.n_classes)
        .map(|c| {
            let g: Vec<Vec<f64>> = generated
                .iter()
                .filter(|(cls, _)| *cls == c)
                .map(|(_, img)| img.to_vec())
                .collect();
            let r: Vec<Vec<f64>> = heldout
                .images
                .iter()
                .zip(&heldout.labels)
                .filter(|(_, &l)| l == c)
                .map(|(img, _)| img.to_vec())
                .collect();
            ClassStats {
                class: c,
                mmd: rbf_mmd2(&g, &r),
                energy: energy_distance(&g, &r),
                n_gen: g.len(),
                n_ref: r.len(),
            }
        })
        .collect();

    let val = make_val_set(settings.data.seed, settings.data.val_n);
    EvalReport {
        val_mse: val_mse(model, &val),
        mmd: rbf_mmd2(&gen_vecs, &ref_vecs),
        energy: energy_distance(&gen_vecs, &ref_vecs),
        per_class,
    }
}

pub const MMD_SELF_TOLERANCE: f64 = 1e-6;
