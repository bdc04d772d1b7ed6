//! Dense 2-D tensor engine with reverse-mode automatic differentiation.
//!
//! Every value is a row-major `[rows, cols]` matrix of `T` (f32 or f64) owned
//! by a [`Tape`]. Operations append a node recording the primitive and its
//! input ids; the node list is therefore in topological order by construction
//! and [`Tape::backward`] replays it in reverse to accumulate adjoints on
//! every `requires_grad` leaf.
//!
//! One tape corresponds to one forward pass (typically one training step).
//! Tapes are not shared across threads; independent tapes may run in
//! parallel. Gradients accumulate additively across fan-out and are owned by
//! the tape, so a fresh tape per step is also the gradient zeroing step.

mod backward;

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar element type: f32 for training speed, f64 for gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64c(v: f64) -> Self;
    fn to_f64c(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64c(v: f64) -> Self {
        v as f32
    }
    fn to_f64c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64c(v: f64) -> Self {
        v
    }
    fn to_f64c(self) -> f64 {
        self
    }
}

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Recorded primitive. Input ids always precede the node that holds the op.
#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Reshape { a: TensorId },
    Concat { parts: Vec<TensorId>, axis: u8 },
    SliceCols { a: TensorId, start: usize },
    GatherRows { a: TensorId, idx: Vec<usize> },
    RepeatRows { a: TensorId, times: usize },
    GroupSumRows { a: TensorId, group: usize },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Maximum { a: TensorId, b: TensorId },
    Minimum { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: T },
    AddScalar { a: TensorId },
    Relu { a: TensorId },
    Gelu { a: TensorId },
    Sigmoid { a: TensorId },
    AddRow { a: TensorId, b: TensorId },
    MulRow { a: TensorId, b: TensorId },
    ScaleRows { a: TensorId, s: TensorId },
    Softmax { a: TensorId, axis: u8 },
    LayerNorm { a: TensorId, eps: T },
    Mean { a: TensorId },
    Sum { a: TensorId },
    BilinearSample { grid: TensorId, points: TensorId, h: usize, w: usize },
    CrossEntropyLogits { logits: TensorId, targets: Vec<usize>, weights: Vec<T> },
    SmoothL1 { a: TensorId, b: TensorId, beta: T },
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// The computation record: appends on forward, replays in reverse on
/// [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    check_finite: bool,
}

pub(crate) const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_C: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), check_finite: false }
    }

    /// Enable the NaN/Inf assertion on every operation output (debug mode).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, t: TensorId) -> (usize, usize) {
        let n = &self.nodes[t.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, t: TensorId) -> &[T] {
        &self.nodes[t.0].data
    }

    /// Gradient of the last `backward` call w.r.t. `t`, if any was produced.
    pub fn grad(&self, t: TensorId) -> Option<&[T]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<T>, op: Op<T>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(rows * cols, data.len());
        if self.check_finite {
            for &v in &data {
                assert!(v.is_finite(), "non-finite value produced by {:?}", op_name(&op));
            }
        }
        self.nodes.push(Node { rows, cols, data, requires_grad, op });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    // ── leaves ───────────────────────────────────────────────────────

    /// Insert a leaf tensor. `requires_grad` marks it as a parameter.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<T>, requires_grad: bool) -> Result<TensorId> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::dim(
                "leaf",
                format!("shape {rows}x{cols} does not match data length {}", data.len()),
            ));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, requires_grad))
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<TensorId> {
        self.leaf(rows, cols, data, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> TensorId {
        self.push(rows, cols, vec![T::zero(); rows * cols], Op::Leaf, false)
    }

    /// Copy of `t` severed from the record: no gradient flows into or out of it.
    pub fn detach(&mut self, t: TensorId) -> TensorId {
        let n = &self.nodes[t.0];
        let (rows, cols, data) = (n.rows, n.cols, n.data.clone());
        self.push(rows, cols, data, Op::Leaf, false)
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} . {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.data(a), self.data(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::Matmul { a, b }, rg))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let src = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(c, r, out, Op::Transpose { a }, rg))
    }

    pub fn reshape(&mut self, a: TensorId, rows: usize, cols: usize) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::dim("reshape", format!("{r}x{c} -> {rows}x{cols}")));
        }
        let data = self.data(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(rows, cols, data, Op::Reshape { a }, rg))
    }

    /// Concatenate along `axis` (0 = stack rows, 1 = widen columns).
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::dim("concat", format!("axis {axis} out of range")));
        }
        let (r0, c0) = self.shape(parts[0]);
        if axis == 0 {
            let mut rows = 0;
            for &p in parts {
                let (r, c) = self.shape(p);
                if c != c0 {
                    return Err(Error::dim("concat", format!("column mismatch {c} vs {c0}")));
                }
                rows += r;
            }
            let mut out = Vec::with_capacity(rows * c0);
            for &p in parts {
                out.extend_from_slice(self.data(p));
            }
            let rg = parts.iter().any(|&p| self.rg(p));
            Ok(self.push(rows, c0, out, Op::Concat { parts: parts.to_vec(), axis: 0 }, rg))
        } else {
            let mut cols = 0;
            for &p in parts {
                let (r, c) = self.shape(p);
                if r != r0 {
                    return Err(Error::dim("concat", format!("row mismatch {r} vs {r0}")));
                }
                cols += c;
            }
            let mut out = vec![T::zero(); r0 * cols];
            let mut at = 0;
            for &p in parts {
                let (_, c) = self.shape(p);
                let src = self.data(p);
                for i in 0..r0 {
                    out[i * cols + at..i * cols + at + c].copy_from_slice(&src[i * c..(i + 1) * c]);
                }
                at += c;
            }
            let rg = parts.iter().any(|&p| self.rg(p));
            Ok(self.push(r0, cols, out, Op::Concat { parts: parts.to_vec(), axis: 1 }, rg))
        }
    }

    /// Columns `[start, start+width)`.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, width: usize) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if start + width > c || width == 0 {
            return Err(Error::dim("slice_cols", format!("[{start}, {}) of {c} cols", start + width)));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        let rg = self.rg(a);
        Ok(self.push(r, width, out, Op::SliceCols { a, start }, rg))
    }

    /// Row selection; indices may repeat. Adjoint scatter-adds.
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if idx.is_empty() {
            return Err(Error::Usage("gather_rows with empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", format!("index {bad} out of {r} rows")));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(idx.len(), c, out, Op::GatherRows { a, idx: idx.to_vec() }, rg))
    }

    /// Each row repeated `times` consecutively: `[r, c] -> [r*times, c]`.
    pub fn repeat_rows(&mut self, a: TensorId, times: usize) -> Result<TensorId> {
        if times == 0 {
            return Err(Error::Usage("repeat_rows with times = 0".into()));
        }
        let (r, c) = self.shape(a);
        let src = self.data(a);
        let mut out = Vec::with_capacity(r * times * c);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(r * times, c, out, Op::RepeatRows { a, times }, rg))
    }

    /// Sum consecutive groups of `group` rows: `[r*group, c] -> [r, c]`.
    pub fn group_sum_rows(&mut self, a: TensorId, group: usize) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if group == 0 || r % group != 0 {
            return Err(Error::dim("group_sum_rows", format!("{r} rows not divisible by group {group}")));
        }
        let src = self.data(a);
        let rout = r / group;
        let mut out = vec![T::zero(); rout * c];
        for i in 0..r {
            let dst = (i / group) * c;
            for j in 0..c {
                out[dst + j] += src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(rout, c, out, Op::GroupSumRows { a, group }, rg))
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<TensorId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::dim(name, format!("{ra}x{ca} vs {rb}x{cb}")));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(ra, ca, out, op, rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    /// Elementwise max; gradient splits evenly on exact ties.
    pub fn maximum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("maximum", a, b, |x, y| if x > y { x } else { y }, Op::Maximum { a, b })
    }

    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("minimum", a, b, |x, y| if x < y { x } else { y }, Op::Minimum { a, b })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let (r, cc) = self.shape(a);
        let k = T::from_f64c(c);
        let out: Vec<T> = self.data(a).iter().map(|&x| x * k).collect();
        let rg = self.rg(a);
        Ok(self.push(r, cc, out, Op::Scale { a, c: k }, rg))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let (r, cc) = self.shape(a);
        let k = T::from_f64c(c);
        let out: Vec<T> = self.data(a).iter().map(|&x| x + k).collect();
        let rg = self.rg(a);
        Ok(self.push(r, cc, out, Op::AddScalar { a }, rg))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let out: Vec<T> = self.data(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let rg = self.rg(a);
        Ok(self.push(r, c, out, Op::Relu { a }, rg))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let half = T::from_f64c(0.5);
        let one = T::one();
        let kk = T::from_f64c(GELU_K);
        let cc = T::from_f64c(GELU_C);
        let out: Vec<T> = self
            .data(a)
            .iter()
            .map(|&x| {
                let u = kk * (x + cc * x * x * x);
                half * x * (one + u.tanh())
            })
            .collect();
        let rg = self.rg(a);
        Ok(self.push(r, c, out, Op::Gelu { a }, rg))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let one = T::one();
        let out: Vec<T> = self
            .data(a)
            .iter()
            .map(|&x| {
                if x >= T::zero() {
                    one / (one + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (one + e)
                }
            })
            .collect();
        let rg = self.rg(a);
        Ok(self.push(r, c, out, Op::Sigmoid { a }, rg))
    }

    // ── broadcasts (row bias only, by design) ────────────────────────

    /// `a[r,c] + b[1,c]` broadcast over rows.
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if rb != 1 || cb != c {
            return Err(Error::dim("add_row", format!("{r}x{c} + {rb}x{cb}")));
        }
        let bias = self.data(b).to_vec();
        let src = self.data(a);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(src[i * c + j] + bias[j]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, Op::AddRow { a, b }, rg))
    }

    /// `a[r,c] * b[1,c]` broadcast over rows.
    pub fn mul_row(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if rb != 1 || cb != c {
            return Err(Error::dim("mul_row", format!("{r}x{c} * {rb}x{cb}")));
        }
        let scale = self.data(b).to_vec();
        let src = self.data(a);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(src[i * c + j] * scale[j]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, Op::MulRow { a, b }, rg))
    }

    /// `a[r,c]` with row i multiplied by `s[i,0]`.
    pub fn scale_rows(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let (rs, cs) = self.shape(s);
        if rs != r || cs != 1 {
            return Err(Error::dim("scale_rows", format!("{r}x{c} rows * {rs}x{cs}")));
        }
        let sv = self.data(s).to_vec();
        let src = self.data(a);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(src[i * c + j] * sv[i]);
            }
        }
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(r, c, out, Op::ScaleRows { a, s }, rg))
    }

    // ── normalizations and reductions ────────────────────────────────

    /// Numerically stable softmax along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        if axis > 1 {
            return Err(Error::dim("softmax", format!("axis {axis} out of range")));
        }
        let (r, c) = self.shape(a);
        let src = self.data(a);
        let mut out = vec![T::zero(); r * c];
        let (outer, inner, os, is) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
        for o in 0..outer {
            let mut mx = T::neg_infinity();
            for i in 0..inner {
                mx = mx.max(src[o * os + i * is]);
            }
            let mut sum = T::zero();
            for i in 0..inner {
                let e = (src[o * os + i * is] - mx).exp();
                out[o * os + i * is] = e;
                sum += e;
            }
            for i in 0..inner {
                out[o * os + i * is] = out[o * os + i * is] / sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(r, c, out, Op::Softmax { a, axis: axis as u8 }, rg))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine.
    pub fn layer_norm(&mut self, a: TensorId, eps: f64) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let src = self.data(a);
        let epst = T::from_f64c(eps);
        let nc = T::from_f64c(c as f64);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mut mean = T::zero();
            for &x in row {
                mean += x;
            }
            mean = mean / nc;
            let mut var = T::zero();
            for &x in row {
                let d = x - mean;
                var += d * d;
            }
            var = var / nc;
            let inv = T::one() / (var + epst).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(r, c, out, Op::LayerNorm { a, eps: epst }, rg))
    }

    /// Mean of all elements, as a 1x1 tensor.
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let mut s = T::zero();
        for &x in self.data(a) {
            s += x;
        }
        let m = s / T::from_f64c((r * c) as f64);
        let rg = self.rg(a);
        Ok(self.push(1, 1, vec![m], Op::Mean { a }, rg))
    }

    /// Sum of all elements, as a 1x1 tensor.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let mut s = T::zero();
        for &x in self.data(a) {
            s += x;
        }
        let rg = self.rg(a);
        Ok(self.push(1, 1, vec![s], Op::Sum { a }, rg))
    }

    // ── sampling ─────────────────────────────────────────────────────

    /// Bilinear interpolation of `grid` (an `h*w x c` token grid, row-major
    /// by grid row) at `points` (`p x 2` of `(x, y)` in the unit square,
    /// clamped). Half-pixel centers: token `(gr, gc)` sits at
    /// `((gc+0.5)/w, (gr+0.5)/h)`; out-of-lattice samples replicate the
    /// border. Differentiable in grid values and point coordinates.
    pub fn bilinear_sample(&mut self, grid: TensorId, h: usize, w: usize, points: TensorId) -> Result<TensorId> {
        let (gr, gc) = self.shape(grid);
        if gr != h * w {
            return Err(Error::dim("bilinear_sample", format!("grid {gr} rows vs {h}x{w}")));
        }
        let (p, two) = self.shape(points);
        if two != 2 {
            return Err(Error::dim("bilinear_sample", format!("points {p}x{two}, expected px2")));
        }
        let pts = self.data(points).to_vec();
        let g = self.data(grid);
        let mut out = vec![T::zero(); p * gc];
        for i in 0..p {
            let x = clamp01(pts[i * 2].to_f64c());
            let y = clamp01(pts[i * 2 + 1].to_f64c());
            let BilinearCell { r0, r1, c0, c1, fx, fy } = bilinear_cell(x, y, h, w);
            let w00 = T::from_f64c((1.0 - fy) * (1.0 - fx));
            let w01 = T::from_f64c((1.0 - fy) * fx);
            let w10 = T::from_f64c(fy * (1.0 - fx));
            let w11 = T::from_f64c(fy * fx);
            let (b00, b01) = (&g[(r0 * w + c0) * gc..], &g[(r0 * w + c1) * gc..]);
            let (b10, b11) = (&g[(r1 * w + c0) * gc..], &g[(r1 * w + c1) * gc..]);
            for j in 0..gc {
                out[i * gc + j] = w00 * b00[j] + w01 * b01[j] + w10 * b10[j] + w11 * b11[j];
            }
        }
        let rg = self.rg(grid) || self.rg(points);
        Ok(self.push(p, gc, out, Op::BilinearSample { grid, points, h, w }, rg))
    }

    // ── losses ───────────────────────────────────────────────────────

    /// Weighted-mean cross entropy of `logits[r,c]` against integer class
    /// targets: `sum_i w_i * (logsumexp(row_i) - logit[i, t_i]) / sum_i w_i`.
    pub fn cross_entropy_with_logits(&mut self, logits: TensorId, targets: &[usize], weights: &[f64]) -> Result<TensorId> {
        let (r, c) = self.shape(logits);
        if targets.len() != r || weights.len() != r {
            return Err(Error::dim(
                "cross_entropy_with_logits",
                format!("{r} rows vs {} targets / {} weights", targets.len(), weights.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Usage(format!("class target {bad} out of {c} classes")));
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(Error::Usage("cross entropy weights sum to zero".into()));
        }
        let src = self.data(logits);
        let mut acc = 0.0;
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64c()));
            let lse = mx + row.iter().map(|&v| (v.to_f64c() - mx).exp()).sum::<f64>().ln();
            acc += weights[i] * (lse - row[targets[i]].to_f64c());
        }
        let val = T::from_f64c(acc / wsum);
        let rg = self.rg(logits);
        let wts: Vec<T> = weights.iter().map(|&w| T::from_f64c(w / wsum)).collect();
        Ok(self.push(1, 1, vec![val], Op::CrossEntropyLogits { logits, targets: targets.to_vec(), weights: wts }, rg))
    }

    /// Elementwise smooth-L1 (Huber, transition `beta`) of `a - b`.
    pub fn smooth_l1(&mut self, a: TensorId, b: TensorId, beta: f64) -> Result<TensorId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::dim("smooth_l1", format!("{ra}x{ca} vs {rb}x{cb}")));
        }
        if beta <= 0.0 {
            return Err(Error::Usage("smooth_l1 beta must be positive".into()));
        }
        let bt = T::from_f64c(beta);
        let half = T::from_f64c(0.5);
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| {
                let r = x - y;
                if r.abs() < bt {
                    half * r * r / bt
                } else {
                    r.abs() - half * bt
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(ra, ca, out, Op::SmoothL1 { a, b, beta: bt }, rg))
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Accumulate adjoints of the scalar `loss` onto every reachable
    /// `requires_grad` tensor. Re-running replaces previous gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::Usage(format!("backward requires a scalar loss, got {r}x{c}")));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            backward::apply_adjoint(&self.nodes, &mut self.grads, id, &g);
            self.grads[id] = Some(g);
        }
        if self.check_finite {
            for (i, g) in self.grads.iter().enumerate() {
                if let Some(g) = g {
                    for &v in g {
                        if !v.is_finite() {
                            return Err(Error::Numerical(format!("non-finite gradient at node {i}")));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Reshape { .. } => "reshape",
        Op::Concat { .. } => "concat",
        Op::SliceCols { .. } => "slice_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::RepeatRows { .. } => "repeat_rows",
        Op::GroupSumRows { .. } => "group_sum_rows",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Div { .. } => "div",
        Op::Maximum { .. } => "maximum",
        Op::Minimum { .. } => "minimum",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Relu { .. } => "relu",
        Op::Gelu { .. } => "gelu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::AddRow { .. } => "add_row",
        Op::MulRow { .. } => "mul_row",
        Op::ScaleRows { .. } => "scale_rows",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Mean { .. } => "mean",
        Op::Sum { .. } => "sum",
        Op::BilinearSample { .. } => "bilinear_sample",
        Op::CrossEntropyLogits { .. } => "cross_entropy_with_logits",
        Op::SmoothL1 { .. } => "smooth_l1",
    }
}

#[inline]
fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

pub(crate) struct BilinearCell {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
    pub fx: f64,
    pub fy: f64,
}

/// Half-pixel-center cell lookup shared by forward and backward.
pub(crate) fn bilinear_cell(x: f64, y: f64, h: usize, w: usize) -> BilinearCell {
    let u = x * w as f64 - 0.5;
    let v = y * h as f64 - 0.5;
    let cf = u.floor();
    let rf = v.floor();
    let clampi = |i: f64, n: usize| -> usize { (i.max(0.0) as usize).min(n - 1) };
    BilinearCell {
        r0: clampi(rf, h),
        r1: clampi(rf + 1.0, h),
        c0: clampi(cf, w),
        c1: clampi(cf + 1.0, w),
        fx: u - cf,
        fy: v - rf,
    }
}

/// `out += a . b` for row-major `a[m,k]`, `b[k,n]`.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bv;
            }
        }
    }
}
