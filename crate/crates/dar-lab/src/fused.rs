//! Streaming softmax aggregation over depth sources.
//!
//! The routed hidden state h = sum_i softmax_i(q . k_i / sqrt(d)) v_i with
//! k_i = gain ⊙ v_i / rms(v_i) can be formed in one pass per source row using
//! the online-softmax recurrence: carry (m, Z, s) = (running max logit,
//! normalizer, weighted accumulator) and rescale both Z and s whenever a new
//! max appears. Nothing per-source outlives the loop iteration, so peak
//! intermediate storage is two d-vectors regardless of source count, versus
//! the materializing reference which holds all N keys at once.
//!
//! The backward runs as two further streaming passes: the first replays the
//! forward to recover (m, Z, s) — validating caller-supplied stats if given —
//! and the second recomputes each source's key on the fly and emits gradients
//! for the sources, the query, and the key gain. Every source row is read
//! exactly once in forward and exactly twice in backward; `ReadAudit` counts
//! the accesses so tests can pin the traffic pattern down.

use tensor_core::Real;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FusedError {
    #[error("source {index} has width {got}, aggregator is width {want}")]
    WidthMismatch { index: usize, got: usize, want: usize },
    #[error("no sources to aggregate")]
    Empty,
    #[error("caller-supplied stream stats do not match these sources")]
    StatsMismatch,
}

/// Running online-softmax state: max logit, normalizer, weighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamStats<F> {
    pub m: F,
    pub z: F,
    pub s: Vec<F>,
}

/// Exact per-source access counts for one invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadAudit {
    pub reads: Vec<usize>,
}

impl ReadAudit {
    fn new(n: usize) -> Self {
        ReadAudit { reads: vec![0; n] }
    }

    pub fn total(&self) -> usize {
        self.reads.iter().sum()
    }
}

/// Source rows behind a counting accessor. One `read` models one streaming
/// load of the row; the returned slice stands in for the loaded registers.
struct Audited<'a, F> {
    rows: &'a [Vec<F>],
    audit: ReadAudit,
}

impl<'a, F> Audited<'a, F> {
    fn new(rows: &'a [Vec<F>]) -> Self {
        let audit = ReadAudit::new(rows.len());
        Audited { rows, audit }
    }

    fn read(&mut self, i: usize) -> &'a [F] {
        self.audit.reads[i] += 1;
        &self.rows[i]
    }
}

/// rms and scaled key logit of one source row: q . (gain ⊙ v / r) / sqrt(d).
fn rms_and_logit<F: Real>(q: &[F], gain: &[F], v: &[F], eps: F) -> (F, F) {
    let d = F::from_f64(v.len() as f64);
    let ms = v.iter().map(|x| *x * *x).sum::<F>() / d;
    let r = (ms + eps).sqrt();
    let inv_sqrt_d = d.sqrt().recip();
    let dot = q
        .iter()
        .zip(gain)
        .zip(v)
        .map(|((qj, gj), vj)| *qj * *gj * *vj)
        .sum::<F>();
    (r, dot / r * inv_sqrt_d)
}

/// Incremental aggregator; `push` consumes one source row, `finalize` yields
/// the softmax-weighted sum of everything pushed so far.
#[derive(Debug, Clone)]
pub struct OnlineAgg<F: Real> {
    pub eps: F,
    m: F,
    z: F,
    s: Vec<F>,
}

impl<F: Real> OnlineAgg<F> {
    pub fn new(d: usize, eps: F) -> Self {
        OnlineAgg {
            eps,
            m: F::neg_infinity(),
            z: F::zero(),
            s: vec![F::zero(); d],
        }
    }

    pub fn push(&mut self, q: &[F], gain: &[F], v: &[F]) {
        let (_, logit) = rms_and_logit(q, gain, v, self.eps);
        if logit > self.m {
            let rescale = (self.m - logit).exp(); // exp(-inf) = 0 on first push
            self.z = self.z * rescale;
            for sj in self.s.iter_mut() {
                *sj = *sj * rescale;
            }
            self.m = logit;
        }
        let w = (logit - self.m).exp();
        self.z = self.z + w;
        for (sj, vj) in self.s.iter_mut().zip(v) {
            *sj = *sj + w * *vj;
        }
    }

    pub fn finalize(&self) -> Vec<F> {
        self.s.iter().map(|sj| *sj / self.z).collect()
    }

    pub fn stats(&self) -> StreamStats<F> {
        StreamStats {
            m: self.m,
            z: self.z,
            s: self.s.clone(),
        }
    }
}

fn check_widths<F>(d: usize, sources: &[Vec<F>]) -> Result<(), FusedError> {
    if sources.is_empty() {
        return Err(FusedError::Empty);
    }
    for (i, v) in sources.iter().enumerate() {
        if v.len() != d {
            return Err(FusedError::WidthMismatch {
                index: i,
                got: v.len(),
                want: d,
            });
        }
    }
    Ok(())
}

/// One streaming pass: h, the final stats, and the per-source read counts.
pub fn fused_forward<F: Real>(
    q: &[F],
    gain: &[F],
    sources: &[Vec<F>],
    eps: F,
) -> Result<(Vec<F>, StreamStats<F>, ReadAudit), FusedError> {
    check_widths(q.len(), sources)?;
    let mut acc = OnlineAgg::new(q.len(), eps);
    let mut audited = Audited::new(sources);
    for i in 0..sources.len() {
        let v = audited.read(i);
        acc.push(q, gain, v);
    }
    Ok((acc.finalize(), acc.stats(), audited.audit))
}

#[derive(Debug, Clone)]
pub struct FusedGrads<F> {
    pub d_sources: Vec<Vec<F>>,
    pub d_query: Vec<F>,
    pub d_gain: Vec<F>,
    pub audit: ReadAudit,
}

/// Two streaming passes: recover (m, Z, s), then emit all gradients.
///
/// Pass one always replays the sources; stats handed in from the forward are
/// cross-checked against the replay (identical code path, so equality is
/// exact) and a mismatch is a contract error rather than silent corruption.
pub fn fused_backward<F: Real>(
    upstream: &[F],
    q: &[F],
    gain: &[F],
    sources: &[Vec<F>],
    eps: F,
    given: Option<&StreamStats<F>>,
) -> Result<FusedGrads<F>, FusedError> {
    let d = q.len();
    check_widths(d, sources)?;
    let mut audited = Audited::new(sources);

    // Pass 1: stats.
    let mut acc = OnlineAgg::new(d, eps);
    for i in 0..sources.len() {
        let v = audited.read(i);
        acc.push(q, gain, v);
    }
    let stats = acc.stats();
    if let Some(g) = given {
        if g.m != stats.m || g.z != stats.z || g.s != stats.s {
            return Err(FusedError::StatsMismatch);
        }
    }
    let h: Vec<F> = stats.s.iter().map(|sj| *sj / stats.z).collect();
    // Softmax-jacobian contraction: sum_j alpha_j (u . v_j) = u . h.
    let u_dot_h = upstream.iter().zip(&h).map(|(a, b)| *a * *b).sum::<F>();

    // Pass 2: per-source gradients, recomputing keys on the fly.
    let df = F::from_f64(d as f64);
    let inv_sqrt_d = df.sqrt().recip();
    let mut d_query = vec![F::zero(); d];
    let mut d_gain = vec![F::zero(); d];
    let mut d_sources = Vec::with_capacity(sources.len());
    for i in 0..sources.len() {
        let v = audited.read(i);
        let (r, logit) = rms_and_logit(q, gain, v, eps);
        let alpha = (logit - stats.m).exp() / stats.z;

        let u_dot_v = upstream.iter().zip(v).map(|(a, b)| *a * *b).sum::<F>();
        // d(logit_i) after the softmax jacobian.
        let dlogit = alpha * (u_dot_v - u_dot_h);

        // logit = q . k_i / sqrt(d) with k_i = gain ⊙ v / r.
        let mut c = F::zero(); // dk . (gain ⊙ v), reused by the rms term
        let mut dv = vec![F::zero(); d];
        for j in 0..d {
            let kj = gain[j] * v[j] / r;
            let dkj = dlogit * q[j] * inv_sqrt_d;
            d_query[j] = d_query[j] + dlogit * kj * inv_sqrt_d;
            d_gain[j] = d_gain[j] + dkj * v[j] / r;
            c = c + dkj * gain[j] * v[j];
            // direct value path + the straight-through part of the key path
            dv[j] = alpha * upstream[j] + dkj * gain[j] / r;
        }
        // rms part of the key path: -v (dk . (gain ⊙ v)) / (d r^3)
        let coef = c / (df * r * r * r);
        for j in 0..d {
            dv[j] = dv[j] - v[j] * coef;
        }
        d_sources.push(dv);
    }

    Ok(FusedGrads {
        d_sources,
        d_query,
        d_gain,
        audit: audited.audit,
    })
}

/// Stream epilogue: LayerNorm (no affine) then modulate with (shift, scale),
/// fused onto the finalized h without another trip through memory.
pub fn fused_forward_modulated<F: Real>(
    q: &[F],
    gain: &[F],
    sources: &[Vec<F>],
    eps: F,
    ln_eps: F,
    shift: &[F],
    scale: &[F],
) -> Result<(Vec<F>, StreamStats<F>, ReadAudit), FusedError> {
    let (mut h, stats, audit) = fused_forward(q, gain, sources, eps)?;
    modulate_in_place(&mut h, ln_eps, shift, scale);
    Ok((h, stats, audit))
}

pub fn modulate_in_place<F: Real>(h: &mut [F], ln_eps: F, shift: &[F], scale: &[F]) {
    let d = F::from_f64(h.len() as f64);
    let mean = h.iter().copied().sum::<F>() / d;
    let var = h.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / d;
    let inv = (var + ln_eps).sqrt().recip();
    for (j, hj) in h.iter_mut().enumerate() {
        let normed = (*hj - mean) * inv;
        *hj = normed * (F::one() + scale[j]) + shift[j];
    }
}

// ---- materializing reference ----------------------------------------------

/// Reference forward: builds the full key matrix, all logits, and the dense
/// weight row before mixing. Holds N keys live at once — the traffic and
/// memory pattern the fused path exists to avoid — and is kept deliberately
/// naive as an independent check.
pub struct Reference<F> {
    pub h: Vec<F>,
    pub weights: Vec<F>,
    keys: Vec<Vec<F>>,
    rms: Vec<F>,
    pub audit: ReadAudit,
}

impl<F: Real> Reference<F> {
    pub fn forward(q: &[F], gain: &[F], sources: &[Vec<F>], eps: F) -> Result<Self, FusedError> {
        let d = q.len();
        check_widths(d, sources)?;
        let mut audited = Audited::new(sources);
        let df = F::from_f64(d as f64);
        let inv_sqrt_d = df.sqrt().recip();

        // Materialize every key (N*d floats live from here on).
        let mut keys = Vec::with_capacity(sources.len());
        let mut rms = Vec::with_capacity(sources.len());
        for i in 0..sources.len() {
            let v = audited.read(i);
            let ms = v.iter().map(|x| *x * *x).sum::<F>() / df;
            let r = (ms + eps).sqrt();
            keys.push(v.iter().zip(gain).map(|(vj, gj)| *gj * *vj / r).collect::<Vec<F>>());
            rms.push(r);
        }

        let logits: Vec<F> = keys
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| *a * *b).sum::<F>() * inv_sqrt_d)
            .collect();
        let m = logits.iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = logits.iter().map(|l| (*l - m).exp()).collect();
        let z = exps.iter().copied().sum::<F>();
        let weights: Vec<F> = exps.iter().map(|e| *e / z).collect();

        let mut h = vec![F::zero(); d];
        for (i, w) in weights.iter().enumerate() {
            let v = audited.read(i);
            for (hj, vj) in h.iter_mut().zip(v) {
                *hj = *hj + *w * *vj;
            }
        }

        Ok(Reference {
            h,
            weights,
            keys,
            rms,
            audit: audited.audit,
        })
    }

    /// Backward from the materialized intermediates. Reads each source once
    /// per gradient term that mentions it (four in total), mirroring how an
    /// unfused implementation would go back to memory.
    pub fn backward(&self, upstream: &[F], q: &[F], gain: &[F], sources: &[Vec<F>]) -> FusedGrads<F> {
        let d = q.len();
        let df = F::from_f64(d as f64);
        let inv_sqrt_d = df.sqrt().recip();
        let mut audited = Audited::new(sources);

        let u_dot_h = upstream.iter().zip(&self.h).map(|(a, b)| *a * *b).sum::<F>();
        let mut d_query = vec![F::zero(); d];
        let mut d_gain = vec![F::zero(); d];
        let mut d_sources = Vec::with_capacity(sources.len());
        for i in 0..sources.len() {
            let alpha = self.weights[i];
            let r = self.rms[i];

            let v1 = audited.read(i);
            let u_dot_v = upstream.iter().zip(v1).map(|(a, b)| *a * *b).sum::<F>();
            let dlogit = alpha * (u_dot_v - u_dot_h);

            for j in 0..d {
                d_query[j] = d_query[j] + dlogit * self.keys[i][j] * inv_sqrt_d;
            }
            let v2 = audited.read(i);
            for j in 0..d {
                d_gain[j] = d_gain[j] + dlogit * q[j] * inv_sqrt_d * v2[j] / r;
            }

            let v3 = audited.read(i);
            let c = (0..d)
                .map(|j| dlogit * q[j] * inv_sqrt_d * gain[j] * v3[j])
                .sum::<F>();
            let coef = c / (df * r * r * r);

            let v4 = audited.read(i);
            let dv: Vec<F> = (0..d)
                .map(|j| {
                    alpha * upstream[j] + dlogit * q[j] * inv_sqrt_d * gain[j] / r - v4[j] * coef
                })
                .collect();
            d_sources.push(dv);
        }

        FusedGrads {
            d_sources,
            d_query,
            d_gain,
            audit: audited.audit,
        }
    }
}

/// Peak live width-d intermediate floats held by each path, the accounting
/// behind the bench CSV: the reference keeps all N keys, the fused path keeps
/// only the running accumulator and one key scratch row.
pub fn reference_live(n: usize, d: usize) -> usize {
    n * d
}

pub fn fused_live(d: usize) -> usize {
    2 * d
}

/// One row of the streaming-vs-materializing comparison table.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub n: usize,
    pub d: usize,
    pub ref_live: usize,
    pub fused_live: usize,
    pub ref_ns: u64,
    pub fused_ns: u64,
}

/// Time one forward of each path at f32 for every source count in `ns`,
/// reporting the minimum over `reps` runs alongside the live-intermediate
/// accounting. Inputs are drawn once per N from a fixed stream so the two
/// paths see identical data.
pub fn bench(ns: &[usize], d: usize, reps: usize) -> Vec<BenchRow> {
    use rand::prelude::*;
    use rand_distr::StandardNormal;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xbe6c);
    let mut draw = |len: usize| -> Vec<f32> {
        (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
    };
    let eps = 1e-6f32;

    ns.iter()
        .map(|&n| {
            let q = draw(d);
            let gain = draw(d);
            let sources: Vec<Vec<f32>> = (0..n).map(|_| draw(d)).collect();

            let mut ref_ns = u64::MAX;
            let mut fused_ns = u64::MAX;
            for _ in 0..reps.max(1) {
                let t0 = std::time::Instant::now();
                let out = Reference::forward(&q, &gain, &sources, eps).expect("bench inputs valid");
                std::hint::black_box(&out.h);
                ref_ns = ref_ns.min(t0.elapsed().as_nanos() as u64);

                let t0 = std::time::Instant::now();
                let out = fused_forward(&q, &gain, &sources, eps).expect("bench inputs valid");
                std::hint::black_box(&out.0);
                fused_ns = fused_ns.min(t0.elapsed().as_nanos() as u64);
            }

            BenchRow {
                n,
                d,
                ref_live: reference_live(n, d),
                fused_live: fused_live(d),
                ref_ns,
                fused_ns,
            }
        })
        .collect()
}
