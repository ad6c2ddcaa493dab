//! Chunk-size cost model for the routed source set.
//!
//! With L sublayers split into chunks of size S, an aggregator attends to at
//! most L/S + S sources, while coarser summaries lose detail; weighting the
//! two pressures gives cost(S) = ln(L/S + S) + alpha * ln S, minimized at
//! S* = sqrt(L (1 - alpha) / (1 + alpha)). The routing layer restricts S to
//! integer divisors of L; here S is real-valued.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("S must be positive, got {0}")]
    BadChunk(f64),
    #[error("L must be positive, got {0}")]
    BadDepth(f64),
    #[error("alpha must lie strictly inside (0,1), got {0}")]
    BadAlpha(f64),
}

fn check_domain(l: f64, alpha: f64) -> Result<(), CostError> {
    if !(l > 0.0) {
        return Err(CostError::BadDepth(l));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CostError::BadAlpha(alpha));
    }
    Ok(())
}

/// cost(S) = ln(L/S + S) + alpha * ln S  (natural log).
pub fn cost(s: f64, l: f64, alpha: f64) -> Result<f64, CostError> {
    check_domain(l, alpha)?;
    if !(s > 0.0) {
        return Err(CostError::BadChunk(s));
    }
    Ok((l / s + s).ln() + alpha * s.ln())
}

/// Closed-form minimizer S* = sqrt(L (1 - alpha) / (1 + alpha)).
pub fn s_star(l: f64, alpha: f64) -> Result<f64, CostError> {
    check_domain(l, alpha)?;
    Ok((l * (1.0 - alpha) / (1.0 + alpha)).sqrt())
}

/// Sign of d(cost)/dS at S, per the rule (1+alpha) S^2 - (1-alpha) L:
/// negative below S*, positive above.
pub fn derivative_sign(s: f64, l: f64, alpha: f64) -> f64 {
    ((1.0 + alpha) * s * s - (1.0 - alpha) * l).signum()
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Domain(#[from] CostError),
    #[error("grid argmin {argmin} is {gap} away from closed form {s_star}, more than one step {step}")]
    ArgminOff {
        argmin: f64,
        s_star: f64,
        gap: f64,
        step: f64,
    },
    #[error("discrete derivative sign disagrees with the sign rule at S={s}")]
    SignMismatch { s: f64 },
    #[error("cost not strictly decreasing before the minimizer at S={s}")]
    NotDecreasing { s: f64 },
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub l: f64,
    pub alpha: f64,
    pub step: f64,
    pub s_star: f64,
    pub argmin: f64,
    pub pairs_checked: usize,
}

/// Grid search over (0, L] checking the U-shape: the numeric argmin must sit
/// within one grid step of the closed form, and the discrete derivative must
/// match the sign rule everywhere except the cell containing the minimizer.
pub fn verify_unimodal(l: f64, alpha: f64, step: f64) -> Result<VerifyReport, VerifyError> {
    let star = s_star(l, alpha)?;
    let n = (l / step).ceil() as usize;
    let grid: Vec<f64> = (1..=n).map(|k| k as f64 * step).collect();
    let costs: Vec<f64> = grid
        .iter()
        .map(|s| cost(*s, l, alpha))
        .collect::<Result<_, _>>()?;

    let argmin_idx = costs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite costs"))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let argmin = grid[argmin_idx];
    let gap = (argmin - star).abs();
    if gap > step + 1e-12 {
        return Err(VerifyError::ArgminOff {
            argmin,
            s_star: star,
            gap,
            step,
        });
    }

    let mut pairs_checked = 0;
    for k in 0..grid.len() - 1 {
        let (s0, s1) = (grid[k], grid[k + 1]);
        // The cell straddling S* legitimately changes sign inside it.
        if s0 <= star && star <= s1 {
            continue;
        }
        let diff = costs[k + 1] - costs[k];
        let want = derivative_sign((s0 + s1) / 2.0, l, alpha);
        if diff.signum() != want {
            return Err(VerifyError::SignMismatch { s: s0 });
        }
        if s1 < star && diff >= 0.0 {
            return Err(VerifyError::NotDecreasing { s: s0 });
        }
        pairs_checked += 1;
    }

    Ok(VerifyReport {
        l,
        alpha,
        step,
        s_star: star,
        argmin,
        pairs_checked,
    })
}

/// Divisor of `l` closest to the real-valued minimizer; ties break low.
pub fn recommended_chunk(l: usize, alpha: f64) -> Result<usize, CostError> {
    let star = s_star(l as f64, alpha)?;
    let best = (1..=l)
        .filter(|s| l % s == 0)
        .min_by(|a, b| {
            let da = (*a as f64 - star).abs();
            let db = (*b as f64 - star).abs();
            da.partial_cmp(&db).expect("finite").then(a.cmp(b))
        })
        .expect("1 always divides l");
    Ok(best)
}

/// (S, cost) samples across a uniform grid, for reports and plots.
pub fn cost_curve(l: f64, alpha: f64, points: usize) -> Result<Vec<(f64, f64)>, CostError> {
    check_domain(l, alpha)?;
    let step = l / points as f64;
    (1..=points)
        .map(|k| {
            let s = k as f64 * step;
            cost(s, l, alpha).map(|c| (s, c))
        })
        .collect()
}
