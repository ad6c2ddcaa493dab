use crate::{Graph, Real, Tensor, TensorId};

/// Compare the backward pass of `build` against central finite differences.
///
/// `build` maps a leaf to a scalar output; it is re-run from scratch for
/// every perturbed coordinate, so it must be deterministic. Returns the max
/// over coordinates of |analytic − numeric| / max(|analytic| + |numeric|,
/// 1e-4). The denominator floor keeps coordinates whose true gradient is
/// exactly zero (where both sides see only roundoff, central differences at
/// the 1e-11 scale) from reading as huge relative errors.
pub fn grad_check<F, B>(build: B, x: &Tensor<F>, h: F) -> F
where
    F: Real,
    B: Fn(&mut Graph<F>, TensorId) -> TensorId,
{
    let mut probe = x.clone();
    probe.requires_grad = true;
    let (rows, cols) = probe.dims2();

    let mut g = Graph::new();
    let leaf = g.leaf(&probe);
    let out = build(&mut g, leaf);
    assert_eq!(g.values(out).len(), 1, "grad_check target must be scalar");
    g.backward(out);
    let analytic = g.grad(leaf).to_vec();

    let eval = |values: &[F]| -> F {
        let mut g = Graph::new();
        let leaf = g.leaf_values(rows, cols, values.to_vec(), false);
        let out = build(&mut g, leaf);
        g.values(out)[0]
    };

    let two_h = h + h;
    let floor = F::from_f64(1e-4);
    let mut worst = F::zero();
    let mut values = probe.values.clone();
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + h;
        let fp = eval(&values);
        values[i] = orig - h;
        let fm = eval(&values);
        values[i] = orig;
        let numeric = (fp - fm) / two_h;
        let scale = (analytic[i].abs() + numeric.abs()).max(floor);
        let err = (analytic[i] - numeric).abs() / scale;
        if err > worst {
            worst = err;
        }
    }
    worst
}
