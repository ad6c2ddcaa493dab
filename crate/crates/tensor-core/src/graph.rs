use crate::{Real, Tensor};

/// Handle to a node on a [`Graph`]. Valid only for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, F),
    /// Multiply by a scalar node (shape 1x1); the scalar gets a gradient.
    ScaleBy {
        x: TensorId,
        s: TensorId,
    },
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    /// Add a row vector to every row.
    AddRow(TensorId, TensorId),
    /// Multiply every row elementwise by a row vector.
    MulRow(TensorId, TensorId),
    /// Per-row standardization (x - mean) / sqrt(var + eps), no affine.
    LayerNorm {
        x: TensorId,
        eps: F,
    },
    /// Per-row x / sqrt(mean(x^2) + eps); apply a gain via `MulRow`.
    RmsNorm {
        x: TensorId,
        eps: F,
    },
    SoftmaxRows(TensorId),
    Silu(TensorId),
    Gelu(TensorId),
    Sum(TensorId),
    /// Per-row dot product scaled by a constant; `a` may have one row that
    /// is shared across all rows of `b`.
    DotRows {
        a: TensorId,
        b: TensorId,
        scale: F,
    },
    /// Column-stack single-column tensors into (rows, n).
    StackCols(Vec<TensorId>),
    /// out[t] = sum_i weights[t or 0, i] * sources[i][t]; weights may have a
    /// single row shared across all token rows.
    WeightedSumRows {
        weights: TensorId,
        sources: Vec<TensorId>,
    },
    MeanRows(TensorId),
    /// Same buffer, new (rows, cols) of equal product.
    Reshape(TensorId),
    ConcatCols(TensorId, TensorId),
    SelectRow {
        x: TensorId,
        row: usize,
    },
    SliceCols {
        x: TensorId,
        from: usize,
        to: usize,
    },
}

#[derive(Debug)]
struct Node<F> {
    values: Vec<F>,
    rows: usize,
    cols: usize,
    grad: Vec<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Reverse-mode tape. Construction order is topological by definition, so
/// backward is a single reverse sweep; gradients accumulate additively when
/// a node fans out into several consumers.
#[derive(Debug, Default)]
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].values
    }

    /// (rows, cols) of a node; rank-1 inputs are stored as a single row.
    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` target w.r.t. this node.
    pub fn grad(&self, id: TensorId) -> &[F] {
        let n = &self.nodes[id.0];
        assert!(n.requires_grad, "node {} does not track gradients", id.0);
        &n.grad
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<F>, requires_grad: bool, op: Op<F>) -> TensorId {
        debug_assert_eq!(values.len(), rows * cols);
        let grad = if requires_grad {
            vec![F::zero(); values.len()]
        } else {
            Vec::new()
        };
        self.nodes.push(Node {
            values,
            rows,
            cols,
            grad,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---- leaves ---------------------------------------------------------

    /// Copy a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor<F>) -> TensorId {
        let (r, c) = t.dims2();
        self.push(r, c, t.values.clone(), t.requires_grad, Op::Leaf)
    }

    pub fn leaf_values(&mut self, rows: usize, cols: usize, values: Vec<F>, requires_grad: bool) -> TensorId {
        assert_eq!(values.len(), rows * cols, "leaf buffer length mismatch");
        self.push(rows, cols, values, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<F>) -> TensorId {
        self.leaf_values(rows, cols, values, false)
    }

    pub fn scalar(&mut self, v: F, requires_grad: bool) -> TensorId {
        self.push(1, 1, vec![v], requires_grad, Op::Leaf)
    }

    // ---- elementwise ----------------------------------------------------

    fn assert_same_shape(&self, a: TensorId, b: TensorId, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "add");
        let v = self.zip(a, b, |x, y| x + y);
        let (r, c) = self.shape(a);
        let rg = self.rg(a) || self.rg(b);
        self.push(r, c, v, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "sub");
        let v = self.zip(a, b, |x, y| x - y);
        let (r, c) = self.shape(a);
        let rg = self.rg(a) || self.rg(b);
        self.push(r, c, v, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "mul");
        let v = self.zip(a, b, |x, y| x * y);
        let (r, c) = self.shape(a);
        let rg = self.rg(a) || self.rg(b);
        self.push(r, c, v, rg, Op::Mul(a, b))
    }

    fn zip(&self, a: TensorId, b: TensorId, f: impl Fn(F, F) -> F) -> Vec<F> {
        self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| f(*x, *y))
            .collect()
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> TensorId {
        let v: Vec<F> = self.nodes[a.0].values.iter().map(|x| *x * c).collect();
        let (r, cols) = self.shape(a);
        let rg = self.rg(a);
        self.push(r, cols, v, rg, Op::Scale(a, c))
    }

    /// Multiply a tensor by a 1x1 scalar node.
    pub fn scale_by(&mut self, x: TensorId, s: TensorId) -> TensorId {
        assert_eq!(self.shape(s), (1, 1), "scale_by wants a scalar node");
        let sv = self.nodes[s.0].values[0];
        let v: Vec<F> = self.nodes[x.0].values.iter().map(|a| *a * sv).collect();
        let (r, c) = self.shape(x);
        let rg = self.rg(x) || self.rg(s);
        self.push(r, c, v, rg, Op::ScaleBy { x, s })
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2} disagree");
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            &self.nodes[a.0].values,
            k as isize,
            1,
            &self.nodes[b.0].values,
            n as isize,
            1,
            F::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(m, n, out, rg, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let src = &self.nodes[a.0].values;
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(c, r, out, rg, Op::Transpose(a))
    }

    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        assert!(rr == 1 && rc == c, "add_row: row shape ({rr},{rc}) vs cols {c}");
        let mut v = self.nodes[a.0].values.clone();
        for chunk in v.chunks_exact_mut(c) {
            for (x, y) in chunk.iter_mut().zip(&self.nodes[row.0].values) {
                *x = *x + *y;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(r, c, v, rg, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: TensorId, row: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        assert!(rr == 1 && rc == c, "mul_row: row shape ({rr},{rc}) vs cols {c}");
        let mut v = self.nodes[a.0].values.clone();
        for chunk in v.chunks_exact_mut(c) {
            for (x, y) in chunk.iter_mut().zip(&self.nodes[row.0].values) {
                *x = *x * *y;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(r, c, v, rg, Op::MulRow(a, row))
    }

    // ---- normalization and nonlinearity ---------------------------------

    pub fn layer_norm(&mut self, x: TensorId, eps: F) -> TensorId {
        let (r, c) = self.shape(x);
        assert!(c >= 1, "layer_norm on empty rows");
        let d = F::from_f64(c as f64);
        let mut out = vec![F::zero(); r * c];
        for (orow, xrow) in out.chunks_exact_mut(c).zip(self.nodes[x.0].values.chunks_exact(c)) {
            let mean = xrow.iter().copied().sum::<F>() / d;
            let var = xrow.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / d;
            let inv = (var + eps).sqrt().recip();
            for (o, v) in orow.iter_mut().zip(xrow) {
                *o = (*v - mean) * inv;
            }
        }
        let rg = self.rg(x);
        self.push(r, c, out, rg, Op::LayerNorm { x, eps })
    }

    /// Normalize each row to unit RMS: x / sqrt(mean(x^2) + eps).
    pub fn rms_norm(&mut self, x: TensorId, eps: F) -> TensorId {
        let (r, c) = self.shape(x);
        assert!(c >= 1, "rms_norm on empty rows");
        let d = F::from_f64(c as f64);
        let mut out = vec![F::zero(); r * c];
        for (orow, xrow) in out.chunks_exact_mut(c).zip(self.nodes[x.0].values.chunks_exact(c)) {
            let ms = xrow.iter().map(|v| *v * *v).sum::<F>() / d;
            let inv = (ms + eps).sqrt().recip();
            for (o, v) in orow.iter_mut().zip(xrow) {
                *o = *v * inv;
            }
        }
        let rg = self.rg(x);
        self.push(r, c, out, rg, Op::RmsNorm { x, eps })
    }

    /// RMSNorm with a learned gain: gain ⊙ x / sqrt(mean(x^2) + eps).
    pub fn rms_norm_scaled(&mut self, x: TensorId, gain: TensorId, eps: F) -> TensorId {
        let unit = self.rms_norm(x, eps);
        self.mul_row(unit, gain)
    }

    /// Row-wise softmax, max-subtracted for stability.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.shape(x);
        assert!(c >= 1, "softmax over empty rows");
        let mut out = vec![F::zero(); r * c];
        for (orow, xrow) in out.chunks_exact_mut(c).zip(self.nodes[x.0].values.chunks_exact(c)) {
            let m = xrow.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (o, v) in orow.iter_mut().zip(xrow) {
                *o = (*v - m).exp();
                z = z + *o;
            }
            for o in orow.iter_mut() {
                *o = *o / z;
            }
        }
        let rg = self.rg(x);
        self.push(r, c, out, rg, Op::SoftmaxRows(x))
    }

    pub fn silu(&mut self, x: TensorId) -> TensorId {
        let v: Vec<F> = self.nodes[x.0]
            .values
            .iter()
            .map(|a| *a / (F::one() + (-*a).exp()))
            .collect();
        let (r, c) = self.shape(x);
        let rg = self.rg(x);
        self.push(r, c, v, rg, Op::Silu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let half = F::from_f64(0.5);
        let v: Vec<F> = self.nodes[x.0]
            .values
            .iter()
            .map(|a| {
                let u = gelu_inner(*a);
                half * *a * (F::one() + u.tanh())
            })
            .collect();
        let (r, c) = self.shape(x);
        let rg = self.rg(x);
        self.push(r, c, v, rg, Op::Gelu(x))
    }

    // ---- reductions and reshuffles --------------------------------------

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s = self.nodes[x.0].values.iter().copied().sum::<F>();
        let rg = self.rg(x);
        self.push(1, 1, vec![s], rg, Op::Sum(x))
    }

    /// Mean squared error between two same-shape tensors, as a scalar node.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "mse");
        let n = self.nodes[a.0].values.len();
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        let s = self.sum(sq);
        self.scale(s, F::from_f64(1.0 / n as f64))
    }

    /// Per-row scaled dot product. `a` is either the same shape as `b` or a
    /// single row shared across all rows of `b`. Output has one column.
    pub fn dot_rows(&mut self, a: TensorId, b: TensorId, scale: F) -> TensorId {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, bc, "dot_rows: column mismatch {ac} vs {bc}");
        assert!(ar == br || ar == 1, "dot_rows: rows {ar} vs {br}");
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![F::zero(); br];
        for (i, o) in out.iter_mut().enumerate() {
            let arow = if ar == 1 { &av[..ac] } else { &av[i * ac..(i + 1) * ac] };
            let brow = &bv[i * bc..(i + 1) * bc];
            *o = arow.iter().zip(brow).map(|(x, y)| *x * *y).sum::<F>() * scale;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(br, 1, out, rg, Op::DotRows { a, b, scale })
    }

    /// Stack single-column tensors as the columns of a (rows, n) tensor.
    pub fn stack_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "stack_cols on empty list");
        let (r, c) = self.shape(parts[0]);
        assert_eq!(c, 1, "stack_cols wants single-column parts");
        for p in parts {
            assert_eq!(self.shape(*p), (r, 1), "stack_cols: ragged parts");
        }
        let n = parts.len();
        let mut out = vec![F::zero(); r * n];
        for (j, p) in parts.iter().enumerate() {
            for (i, v) in self.nodes[p.0].values.iter().enumerate() {
                out[i * n + j] = *v;
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(r, n, out, rg, Op::StackCols(parts.to_vec()))
    }

    /// Per-row mixture of sources: out[t] = sum_i w[t, i] * sources[i][t].
    /// Weights with a single row are shared across all rows.
    pub fn weighted_sum_rows(&mut self, weights: TensorId, sources: &[TensorId]) -> TensorId {
        assert!(!sources.is_empty(), "weighted_sum_rows with no sources");
        let (t, d) = self.shape(sources[0]);
        for s in sources {
            assert_eq!(self.shape(*s), (t, d), "weighted_sum_rows: ragged sources");
        }
        let (wr, wc) = self.shape(weights);
        assert_eq!(wc, sources.len(), "weights cols {} vs {} sources", wc, sources.len());
        assert!(wr == t || wr == 1, "weights rows {wr} vs {t}");
        let mut out = vec![F::zero(); t * d];
        for (i, src) in sources.iter().enumerate() {
            let wv = &self.nodes[weights.0].values;
            let sv = &self.nodes[src.0].values;
            for r in 0..t {
                let w = if wr == 1 { wv[i] } else { wv[r * wc + i] };
                let orow = &mut out[r * d..(r + 1) * d];
                let srow = &sv[r * d..(r + 1) * d];
                for (o, s) in orow.iter_mut().zip(srow) {
                    *o = *o + w * *s;
                }
            }
        }
        let rg = self.rg(weights) || sources.iter().any(|s| self.rg(*s));
        self.push(
            t,
            d,
            out,
            rg,
            Op::WeightedSumRows {
                weights,
                sources: sources.to_vec(),
            },
        )
    }

    pub fn mean_rows(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.shape(x);
        let inv = F::from_f64(1.0 / r as f64);
        let mut out = vec![F::zero(); c];
        for row in self.nodes[x.0].values.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o = *o + *v;
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        let rg = self.rg(x);
        self.push(1, c, out, rg, Op::MeanRows(x))
    }

    pub fn reshape(&mut self, x: TensorId, rows: usize, cols: usize) -> TensorId {
        let (r, c) = self.shape(x);
        assert_eq!(r * c, rows * cols, "reshape: {r}x{c} -> {rows}x{cols}");
        let v = self.nodes[x.0].values.clone();
        let rg = self.rg(x);
        self.push(rows, cols, v, rg, Op::Reshape(x))
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ar, br, "concat_cols: row mismatch {ar} vs {br}");
        let mut out = Vec::with_capacity(ar * (ac + bc));
        for i in 0..ar {
            out.extend_from_slice(&self.nodes[a.0].values[i * ac..(i + 1) * ac]);
            out.extend_from_slice(&self.nodes[b.0].values[i * bc..(i + 1) * bc]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(ar, ac + bc, out, rg, Op::ConcatCols(a, b))
    }

    pub fn select_row(&mut self, x: TensorId, row: usize) -> TensorId {
        let (r, c) = self.shape(x);
        assert!(row < r, "select_row: row {row} out of {r}");
        let v = self.nodes[x.0].values[row * c..(row + 1) * c].to_vec();
        let rg = self.rg(x);
        self.push(1, c, v, rg, Op::SelectRow { x, row })
    }

    pub fn slice_cols(&mut self, x: TensorId, from: usize, to: usize) -> TensorId {
        let (r, c) = self.shape(x);
        assert!(from < to && to <= c, "slice_cols: [{from},{to}) out of {c}");
        let w = to - from;
        let mut out = Vec::with_capacity(r * w);
        for row in self.nodes[x.0].values.chunks_exact(c) {
            out.extend_from_slice(&row[from..to]);
        }
        let rg = self.rg(x);
        self.push(r, w, out, rg, Op::SliceCols { x, from, to })
    }

    // ---- backward --------------------------------------------------------

    /// Populate gradients of every reachable grad-tracking node with
    /// d(loss)/d(node). `loss` must be a scalar.
    pub fn backward(&mut self, loss: TensorId) {
        let n = &self.nodes[loss.0];
        assert_eq!(
            n.values.len(),
            1,
            "backward target must be scalar, got ({}, {})",
            n.rows,
            n.cols
        );
        assert!(
            n.requires_grad,
            "backward target does not depend on any grad-tracking leaf"
        );

        // Mark the subgraph that actually feeds the loss so the sweep skips
        // dead branches (e.g. diagnostic nodes recorded past the loss).
        let mut live = vec![false; loss.0 + 1];
        live[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !live[i] {
                continue;
            }
            for input in op_inputs(&self.nodes[i].op) {
                live[input.0] = true;
            }
        }

        self.nodes[loss.0].grad[0] = F::one();
        for i in (0..=loss.0).rev() {
            if !live[i] || !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i);
        }
    }

    fn propagate(&mut self, i: usize) {
        // Inputs always precede their consumer on the tape, so splitting at i
        // gives the consumer (tail[0], read-only) and all candidates for
        // gradient accumulation (head, mutable) without aliasing.
        let (head, tail) = self.nodes.split_at_mut(i);
        let node = &tail[0];
        let dout: &[F] = &node.grad;
        let rows = node.rows;
        let cols = node.cols;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if head[a.0].requires_grad {
                    add_into(&mut head[a.0].grad, dout);
                }
                if head[b.0].requires_grad {
                    add_into(&mut head[b.0].grad, dout);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if head[a.0].requires_grad {
                    add_into(&mut head[a.0].grad, dout);
                }
                if head[b.0].requires_grad {
                    sub_into(&mut head[b.0].grad, dout);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if a == b {
                    let two = F::from_f64(2.0);
                    let t = &mut head[a.0];
                    if t.requires_grad {
                        let (grad, values) = (&mut t.grad, &t.values);
                        for ((g, d), x) in grad.iter_mut().zip(dout).zip(values) {
                            *g = *g + two * *d * *x;
                        }
                    }
                } else {
                    if head[a.0].requires_grad {
                        let bv = head[b.0].values.clone();
                        for ((g, d), y) in head[a.0].grad.iter_mut().zip(dout).zip(&bv) {
                            *g = *g + *d * *y;
                        }
                    }
                    if head[b.0].requires_grad {
                        let av = head[a.0].values.clone();
                        for ((g, d), x) in head[b.0].grad.iter_mut().zip(dout).zip(&av) {
                            *g = *g + *d * *x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                if head[a.0].requires_grad {
                    for (g, d) in head[a.0].grad.iter_mut().zip(dout) {
                        *g = *g + c * *d;
                    }
                }
            }
            Op::ScaleBy { x, s } => {
                let (x, s) = (*x, *s);
                let sv = head[s.0].values[0];
                if head[x.0].requires_grad {
                    for (g, d) in head[x.0].grad.iter_mut().zip(dout) {
                        *g = *g + sv * *d;
                    }
                }
                if head[s.0].requires_grad {
                    let xv = head[x.0].values.clone();
                    let mut acc = F::zero();
                    for (d, v) in dout.iter().zip(&xv) {
                        acc = acc + *d * *v;
                    }
                    head[s.0].grad[0] = head[s.0].grad[0] + acc;
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (head[a.0].rows, head[a.0].cols);
                let n = head[b.0].cols;
                if head[a.0].requires_grad {
                    // dA += dC · B^T, via strides on B (no explicit transpose)
                    let bv = head[b.0].values.clone();
                    F::gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        dout,
                        n as isize,
                        1,
                        &bv,
                        1,
                        n as isize,
                        F::one(),
                        &mut head[a.0].grad,
                    );
                }
                if head[b.0].requires_grad {
                    // dB += A^T · dC
                    let av = head[a.0].values.clone();
                    F::gemm(
                        k,
                        m,
                        n,
                        F::one(),
                        &av,
                        1,
                        k as isize,
                        dout,
                        n as isize,
                        1,
                        F::one(),
                        &mut head[b.0].grad,
                    );
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                if head[a.0].requires_grad {
                    let t = &mut head[a.0];
                    for i2 in 0..rows {
                        for j in 0..cols {
                            t.grad[j * rows + i2] = t.grad[j * rows + i2] + dout[i2 * cols + j];
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                if head[a.0].requires_grad {
                    add_into(&mut head[a.0].grad, dout);
                }
                if head[row.0].requires_grad {
                    for drow in dout.chunks_exact(cols) {
                        add_into(&mut head[row.0].grad, drow);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (a, row) = (*a, *row);
                if head[a.0].requires_grad {
                    let rv = head[row.0].values.clone();
                    for (grow, drow) in head[a.0].grad.chunks_exact_mut(cols).zip(dout.chunks_exact(cols)) {
                        for ((g, d), r) in grow.iter_mut().zip(drow).zip(&rv) {
                            *g = *g + *d * *r;
                        }
                    }
                }
                if head[row.0].requires_grad {
                    let av = head[a.0].values.clone();
                    for (arow, drow) in av.chunks_exact(cols).zip(dout.chunks_exact(cols)) {
                        for ((g, d), x) in head[row.0].grad.iter_mut().zip(drow).zip(arow) {
                            *g = *g + *d * *x;
                        }
                    }
                }
            }
            Op::LayerNorm { x, eps } => {
                let (x, eps) = (*x, *eps);
                let yv = &node.values;
                let d = F::from_f64(cols as f64);
                if head[x.0].requires_grad {
                    let t = &mut head[x.0];
                    for r in 0..rows {
                        let xr = &t.values[r * cols..(r + 1) * cols];
                        let yr = &yv[r * cols..(r + 1) * cols];
                        let dr = &dout[r * cols..(r + 1) * cols];
                        let mean = xr.iter().copied().sum::<F>() / d;
                        let var = xr.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / d;
                        let inv = (var + eps).sqrt().recip();
                        let mean_d = dr.iter().copied().sum::<F>() / d;
                        let mean_dy = dr.iter().zip(yr).map(|(p, q)| *p * *q).sum::<F>() / d;
                        let gr = &mut t.grad[r * cols..(r + 1) * cols];
                        for ((g, dv), y) in gr.iter_mut().zip(dr).zip(yr) {
                            *g = *g + inv * (*dv - mean_d - *y * mean_dy);
                        }
                    }
                }
            }
            Op::RmsNorm { x, eps } => {
                let (x, eps) = (*x, *eps);
                let d = F::from_f64(cols as f64);
                if head[x.0].requires_grad {
                    let t = &mut head[x.0];
                    for r in 0..rows {
                        let xr = &t.values[r * cols..(r + 1) * cols];
                        let dr = &dout[r * cols..(r + 1) * cols];
                        let ms = xr.iter().map(|v| *v * *v).sum::<F>() / d;
                        let rms = (ms + eps).sqrt();
                        let inv = rms.recip();
                        // dx = du / rms - x * (du · x) / (d * rms^3)
                        let dot = dr.iter().zip(xr).map(|(p, q)| *p * *q).sum::<F>();
                        let coef = dot / (d * rms * rms * rms);
                        let gr = &mut t.grad[r * cols..(r + 1) * cols];
                        for ((g, dv), xv) in gr.iter_mut().zip(dr).zip(xr) {
                            *g = *g + *dv * inv - *xv * coef;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let x = *x;
                let yv = &node.values;
                if head[x.0].requires_grad {
                    let t = &mut head[x.0];
                    for r in 0..rows {
                        let yr = &yv[r * cols..(r + 1) * cols];
                        let dr = &dout[r * cols..(r + 1) * cols];
                        let dot = dr.iter().zip(yr).map(|(p, q)| *p * *q).sum::<F>();
                        let gr = &mut t.grad[r * cols..(r + 1) * cols];
                        for ((g, dv), y) in gr.iter_mut().zip(dr).zip(yr) {
                            *g = *g + *y * (*dv - dot);
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let x = *x;
                if head[x.0].requires_grad {
                    let t = &mut head[x.0];
                    let (grad, values) = (&mut t.grad, &t.values);
                    for ((g, d), a) in grad.iter_mut().zip(dout).zip(values) {
                        let s = F::one() / (F::one() + (-*a).exp());
                        *g = *g + *d * s * (F::one() + *a * (F::one() - s));
                    }
                }
            }
            Op::Gelu(x) => {
                let x = *x;
                let half = F::from_f64(0.5);
                let c = F::from_f64(SQRT_2_OVER_PI);
                let a3 = F::from_f64(3.0 * GELU_COEF);
                if head[x.0].requires_grad {
                    let t = &mut head[x.0];
                    let (grad, values) = (&mut t.grad, &t.values);
                    for ((g, d), xv) in grad.iter_mut().zip(dout).zip(values) {
                        let u = gelu_inner(*xv);
                        let th = u.tanh();
                        let sech2 = F::one() - th * th;
                        let du = c * (F::one() + a3 * *xv * *xv);
                        *g = *g + *d * (half * (F::one() + th) + half * *xv * sech2 * du);
                    }
                }
            }
            Op::Sum(x) => {
                let x = *x;
                let d = dout[0];
                if head[x.0].requires_grad {
                    for g in head[x.0].grad.iter_mut() {
                        *g = *g + d;
                    }
                }
            }
            Op::DotRows { a, b, scale } => {
                let (a, b, scale) = (*a, *b, *scale);
                let (ar, ac) = (head[a.0].rows, head[a.0].cols);
                let br = head[b.0].rows;
                if head[a.0].requires_grad {
                    let bv = head[b.0].values.clone();
                    let t = &mut head[a.0];
                    for i2 in 0..br {
                        let d = dout[i2] * scale;
                        let brow = &bv[i2 * ac..(i2 + 1) * ac];
                        let goff = if ar == 1 { 0 } else { i2 * ac };
                        let grow = &mut t.grad[goff..goff + ac];
                        for (g, y) in grow.iter_mut().zip(brow) {
                            *g = *g + d * *y;
                        }
                    }
                }
                if head[b.0].requires_grad {
                    let av = head[a.0].values.clone();
                    let t = &mut head[b.0];
                    for (i2, d0) in dout.iter().enumerate().take(br) {
                        let d = *d0 * scale;
                        let aoff = if ar == 1 { 0 } else { i2 * ac };
                        let arow = &av[aoff..aoff + ac];
                        let grow = &mut t.grad[i2 * ac..(i2 + 1) * ac];
                        for (g, xv) in grow.iter_mut().zip(arow) {
                            *g = *g + d * *xv;
                        }
                    }
                }
            }
            Op::StackCols(parts) => {
                let parts = parts.clone();
                for (j, p) in parts.iter().enumerate() {
                    if head[p.0].requires_grad {
                        for (i2, g) in head[p.0].grad.iter_mut().enumerate() {
                            *g = *g + dout[i2 * cols + j];
                        }
                    }
                }
            }
            Op::WeightedSumRows { weights, sources } => {
                let weights = *weights;
                let sources = sources.clone();
                let (wr, wc) = (head[weights.0].rows, head[weights.0].cols);
                let wv = head[weights.0].values.clone();
                let d = cols;
                for (i2, src) in sources.iter().enumerate() {
                    if head[src.0].requires_grad {
                        let t = &mut head[src.0];
                        for r in 0..rows {
                            let w = if wr == 1 { wv[i2] } else { wv[r * wc + i2] };
                            let drow = &dout[r * d..(r + 1) * d];
                            let grow = &mut t.grad[r * d..(r + 1) * d];
                            for (g, dv) in grow.iter_mut().zip(drow) {
                                *g = *g + w * *dv;
                            }
                        }
                    }
                    if head[weights.0].requires_grad {
                        let sv = head[src.0].values.clone();
                        let t = &mut head[weights.0];
                        for r in 0..rows {
                            let drow = &dout[r * d..(r + 1) * d];
                            let srow = &sv[r * d..(r + 1) * d];
                            let dot = drow.iter().zip(srow).map(|(p, q)| *p * *q).sum::<F>();
                            let gi = if wr == 1 { i2 } else { r * wc + i2 };
                            t.grad[gi] = t.grad[gi] + dot;
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                let x = *x;
                let xr = head[x.0].rows;
                let inv = F::from_f64(1.0 / xr as f64);
                if head[x.0].requires_grad {
                    for grow in head[x.0].grad.chunks_exact_mut(cols) {
                        for (g, d) in grow.iter_mut().zip(dout) {
                            *g = *g + *d * inv;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let x = *x;
                if head[x.0].requires_grad {
                    add_into(&mut head[x.0].grad, dout);
                }
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (*a, *b);
                let ac = head[a.0].cols;
                let bc = head[b.0].cols;
                if head[a.0].requires_grad {
                    for (r, drow) in dout.chunks_exact(cols).enumerate() {
                        let grow = &mut head[a.0].grad[r * ac..(r + 1) * ac];
                        add_into(grow, &drow[..ac]);
                    }
                }
                if head[b.0].requires_grad {
                    for (r, drow) in dout.chunks_exact(cols).enumerate() {
                        let grow = &mut head[b.0].grad[r * bc..(r + 1) * bc];
                        add_into(grow, &drow[ac..]);
                    }
                }
            }
            Op::SelectRow { x, row } => {
                let (x, row) = (*x, *row);
                if head[x.0].requires_grad {
                    let grow = &mut head[x.0].grad[row * cols..(row + 1) * cols];
                    add_into(grow, dout);
                }
            }
            Op::SliceCols { x, from, to } => {
                let (x, from, to) = (*x, *from, *to);
                let xc = head[x.0].cols;
                if head[x.0].requires_grad {
                    for (r, drow) in dout.chunks_exact(cols).enumerate() {
                        let grow = &mut head[x.0].grad[r * xc + from..r * xc + to];
                        add_into(grow, drow);
                    }
                }
            }
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_COEF: f64 = 0.044715;

fn gelu_inner<F: Real>(x: F) -> F {
    let c = F::from_f64(SQRT_2_OVER_PI);
    let a = F::from_f64(GELU_COEF);
    c * (x + a * x * x * x)
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn sub_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d - *s;
    }
}

fn op_inputs<F>(op: &Op<F>) -> Vec<TensorId> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Matmul(a, b)
        | Op::ConcatCols(a, b)
        | Op::AddRow(a, b)
        | Op::MulRow(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::SoftmaxRows(a)
        | Op::Silu(a)
        | Op::Gelu(a)
        | Op::Sum(a)
        | Op::MeanRows(a)
        | Op::Reshape(a) => vec![*a],
        Op::ScaleBy { x, s } => vec![*x, *s],
        Op::LayerNorm { x, .. } | Op::RmsNorm { x, .. } | Op::SelectRow { x, .. } | Op::SliceCols { x, .. } => {
            vec![*x]
        }
        Op::DotRows { a, b, .. } => vec![*a, *b],
        Op::StackCols(parts) => parts.clone(),
        Op::WeightedSumRows { weights, sources } => {
            let mut v = vec![*weights];
            v.extend_from_slice(sources);
            v
        }
    }
}
