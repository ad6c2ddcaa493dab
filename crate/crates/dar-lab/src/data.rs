//! Procedural toy dataset: 8x8 single-channel blob images in four classes.
//!
//! Each class plants an anisotropic Gaussian bump in its own quadrant; per
//! sample the center, radius, and amplitude jitter, and a little pixel noise
//! is added. The whole dataset is normalized to zero mean / unit variance so
//! the flow-matching endpoints (data, standard normal) live on one scale.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const IMG: usize = 8;
pub const PIXELS: usize = IMG * IMG;
pub const PATCH: usize = 2;
pub const TOKENS: usize = (IMG / PATCH) * (IMG / PATCH);
pub const TOKEN_DIM: usize = PATCH * PATCH;
pub const N_CLASSES: usize = 4;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<[f64; PIXELS]>,
    pub labels: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

// Class centers sit in distinct quadrants; sigma pairs make two classes
// horizontal and two vertical so shape, not just position, separates them.
const CENTERS: [(f64, f64); N_CLASSES] = [(2.0, 2.0), (2.0, 5.0), (5.0, 2.0), (5.0, 5.0)];
const SIGMAS: [(f64, f64); N_CLASSES] = [(1.3, 0.7), (0.7, 1.3), (1.0, 1.0), (1.4, 1.4)];

pub fn make_dataset(seed: u64, n: usize) -> Dataset {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("finite");

    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % N_CLASSES;
        let (cy, cx) = CENTERS[class];
        let (sy, sx) = SIGMAS[class];
        let cy = cy + rng.random_range(-0.8..0.8);
        let cx = cx + rng.random_range(-0.8..0.8);
        let scale = rng.random_range(0.8..1.2);
        let amp = rng.random_range(0.8..1.2);

        let mut img = [0.0f64; PIXELS];
        for y in 0..IMG {
            for x in 0..IMG {
                let dy = (y as f64 - cy) / (sy * scale);
                let dx = (x as f64 - cx) / (sx * scale);
                img[y * IMG + x] = amp * (-0.5 * (dy * dy + dx * dx)).exp() + noise.sample(&mut rng);
            }
        }
        images.push(img);
        labels.push(class);
    }

    // Dataset-level standardization.
    let count = (n * PIXELS) as f64;
    let mean = images.iter().flat_map(|im| im.iter()).sum::<f64>() / count;
    let var = images
        .iter()
        .flat_map(|im| im.iter())
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / count;
    let std = var.sqrt();
    for im in &mut images {
        for v in im.iter_mut() {
            *v = (*v - mean) / std;
        }
    }

    Dataset {
        images,
        labels,
        mean,
        std,
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Mean image of one class, in normalized units.
    pub fn class_mean(&self, class: usize) -> [f64; PIXELS] {
        let mut acc = [0.0f64; PIXELS];
        let mut count = 0usize;
        for (im, lab) in self.images.iter().zip(&self.labels) {
            if *lab == class {
                for (a, v) in acc.iter_mut().zip(im.iter()) {
                    *a += v;
                }
                count += 1;
            }
        }
        for a in acc.iter_mut() {
            *a /= count.max(1) as f64;
        }
        acc
    }
}

/// Non-overlapping 2x2 patches in row-major patch order: token (py, px)
/// holds pixels [(2py+dy, 2px+dx)], giving a TOKENS x TOKEN_DIM matrix.
pub fn patchify(img: &[f64; PIXELS]) -> Vec<f64> {
    let side = IMG / PATCH;
    let mut out = Vec::with_capacity(TOKENS * TOKEN_DIM);
    for py in 0..side {
        for px in 0..side {
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    out.push(img[(py * PATCH + dy) * IMG + px * PATCH + dx]);
                }
            }
        }
    }
    out
}

/// Inverse of `patchify`.
pub fn unpatchify(tokens: &[f64]) -> [f64; PIXELS] {
    assert_eq!(tokens.len(), TOKENS * TOKEN_DIM);
    let side = IMG / PATCH;
    let mut img = [0.0f64; PIXELS];
    for py in 0..side {
        for px in 0..side {
            let tok = &tokens[(py * side + px) * TOKEN_DIM..(py * side + px + 1) * TOKEN_DIM];
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    img[(py * PATCH + dy) * IMG + px * PATCH + dx] = tok[dy * PATCH + dx];
                }
            }
        }
    }
    img
}
