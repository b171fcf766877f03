use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Value, b: Value },
    Bmm { a: Value, b: Value },
    Add { a: Value, b: Value },
    Sub { a: Value, b: Value },
    Mul { a: Value, b: Value },
    AddRowBias { x: Value, bias: Value },
    Sigmoid { x: Value },
    Relu { x: Value },
    Exp { x: Value },
    Log { x: Value },
    Neg { x: Value },
    Abs { x: Value },
    Cos { x: Value },
    Scale { x: Value, k: f64 },
    Powf { x: Value, k: f64 },
    Clamp { x: Value, lo: f64, hi: f64 },
    Sum { x: Value, axis: Option<usize> },
    Mean { x: Value, axis: Option<usize> },
    Softmax { x: Value, axis: usize, temp: f64 },
    LogSoftmax { x: Value, axis: usize, temp: f64 },
    Reshape { x: Value },
    AppendOnesCol { x: Value },
    Transpose2 { x: Value },
    TransposeLast2 { x: Value },
    Conv5x5 { x: Value, kernel: Value, bias: Value },
    AvgPool2 { x: Value },
    Resize { x: Value, bilinear: bool },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Recorded computation: an append-only list of operations in topological
/// order (every input of a node was pushed before the node itself).
///
/// Gradients accumulate additively: a second `backward` without
/// [`Tape::zero_grads`] in between doubles every leaf gradient.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    scratch: Vec<Option<Vec<f64>>>,
}

pub(crate) fn matmul_slices(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, axis_len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Value {
        self.push(tensor, Op::Leaf)
    }

    /// Records a trainable leaf.
    pub fn var(&mut self, tensor: Tensor) -> Value {
        self.push(tensor.with_requires_grad(true), Op::Leaf)
    }

    /// Records a leaf that never receives gradient (stop-gradient input).
    pub fn constant(&mut self, tensor: Tensor) -> Value {
        self.push(tensor.with_requires_grad(false), Op::Leaf)
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Value {
        self.nodes.push(Node { tensor, op });
        Value(self.nodes.len() - 1)
    }

    fn push_result(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Value {
        let tensor = Tensor::new(shape, data)
            .expect("internal op produced inconsistent shape")
            .with_requires_grad(requires_grad);
        self.push(tensor, op)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn data(&self, v: Value) -> &[f64] {
        self.nodes[v.0].tensor.data()
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    /// Copies a recorded value out of the tape as a fresh non-grad tensor.
    pub fn detach(&self, v: Value) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.data(v).to_vec()).expect("detach")
    }

    pub fn scalar_value(&self, v: Value) -> Result<f64> {
        let t = self.tensor(v);
        if !t.is_scalar() {
            return Err(Error::Contract(format!(
                "expected scalar, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.zero_grad();
        }
    }

    fn requires(&self, v: Value) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    // ── elementwise and structural ops ─────────────────────────────────

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_slices(self.data(a), self.data(b), m, k, n, &mut out);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push_result(vec![m, n], out, Op::Matmul { a, b }, rg))
    }

    /// Batched matmul over matching leading dimension: `[B,m,k]·[B,k,n]`.
    pub fn bmm(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dimension("bmm", &sa, &sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        for i in 0..bt {
            matmul_slices(
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push_result(vec![bt, m, n], out, Op::Bmm { a, b }, rg))
    }

    fn binary(&mut self, op_name: &'static str, a: Value, b: Value, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dimension(op_name, sa, sb));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((sa.to_vec(), data, self.requires(a) || self.requires(b)))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (shape, data, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push_result(shape, data, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let (shape, data, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push_result(shape, data, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (shape, data, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push_result(shape, data, Op::Mul { a, b }, rg))
    }

    /// Adds a length-`c` bias row to every row of a `[r,c]` matrix. The one
    /// sanctioned non-scalar broadcast.
    pub fn add_row_bias(&mut self, x: Value, bias: Value) -> Result<Value> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::dimension("add_row_bias", &sx, &sb));
        }
        let c = sx[1];
        let bdat = self.data(bias).to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bdat[i % c])
            .collect();
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push_result(sx, data, Op::AddRowBias { x, bias }, rg))
    }

    fn unary(&mut self, x: Value, op: Op, f: impl Fn(f64) -> f64) -> Value {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let rg = self.requires(x);
        self.push_result(shape, data, op, rg)
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        self.unary(x, Op::Sigmoid { x }, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn relu(&mut self, x: Value) -> Value {
        self.unary(x, Op::Relu { x }, |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Value) -> Value {
        self.unary(x, Op::Exp { x }, f64::exp)
    }

    pub fn log(&mut self, x: Value) -> Result<Value> {
        if let Some(&bad) = self.data(x).iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("log requires strictly positive inputs, got {bad}")));
        }
        Ok(self.unary(x, Op::Log { x }, f64::ln))
    }

    pub fn neg(&mut self, x: Value) -> Value {
        self.unary(x, Op::Neg { x }, |v| -v)
    }

    /// Absolute value; subgradient 0 at exact zero.
    pub fn abs(&mut self, x: Value) -> Value {
        self.unary(x, Op::Abs { x }, f64::abs)
    }

    pub fn cos(&mut self, x: Value) -> Value {
        self.unary(x, Op::Cos { x }, f64::cos)
    }

    /// Multiplies every element by the scalar `k`.
    pub fn scale(&mut self, x: Value, k: f64) -> Value {
        self.unary(x, Op::Scale { x, k }, |v| v * k)
    }

    pub fn powf(&mut self, x: Value, k: f64) -> Result<Value> {
        if k.fract() != 0.0 {
            if let Some(&bad) = self.data(x).iter().find(|&&v| v < 0.0) {
                return Err(Error::Domain(format!(
                    "powf with fractional exponent {k} requires nonnegative inputs, got {bad}"
                )));
            }
        }
        Ok(self.unary(x, Op::Powf { x, k }, |v| v.powf(k)))
    }

    /// Clamps into `[lo, hi]`; gradient passes through strictly inside the
    /// interval and is zero on the clamped set.
    pub fn clamp(&mut self, x: Value, lo: f64, hi: f64) -> Result<Value> {
        if !(lo <= hi) {
            return Err(Error::Parameter(format!("clamp bounds inverted: [{lo}, {hi}]")));
        }
        Ok(self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi)))
    }

    // ── reductions ─────────────────────────────────────────────────────

    fn check_axis(&self, x: Value, axis: Option<usize>) -> Result<()> {
        if let Some(ax) = axis {
            let rank = self.shape(x).len();
            if ax >= rank {
                return Err(Error::dimension("reduce_axis", ax, self.shape(x)));
            }
        }
        Ok(())
    }

    pub fn sum(&mut self, x: Value, axis: Option<usize>) -> Result<Value> {
        self.check_axis(x, axis)?;
        let rg = self.requires(x);
        let shape = self.shape(x).to_vec();
        let out = match axis {
            None => {
                let s: f64 = self.data(x).iter().sum();
                self.push_result(vec![1], vec![s], Op::Sum { x, axis }, rg)
            }
            Some(ax) => {
                let (outer, alen, inner) = axis_split(&shape, ax);
                let mut data = vec![0.0; outer * inner];
                let src = self.data(x);
                for o in 0..outer {
                    for a in 0..alen {
                        for i in 0..inner {
                            data[o * inner + i] += src[(o * alen + a) * inner + i];
                        }
                    }
                }
                self.push_result(reduced_shape(&shape, ax), data, Op::Sum { x, axis }, rg)
            }
        };
        Ok(out)
    }

    pub fn mean(&mut self, x: Value, axis: Option<usize>) -> Result<Value> {
        self.check_axis(x, axis)?;
        let rg = self.requires(x);
        let shape = self.shape(x).to_vec();
        let out = match axis {
            None => {
                let n = self.data(x).len() as f64;
                let s: f64 = self.data(x).iter().sum();
                self.push_result(vec![1], vec![s / n], Op::Mean { x, axis }, rg)
            }
            Some(ax) => {
                let (outer, alen, inner) = axis_split(&shape, ax);
                let mut data = vec![0.0; outer * inner];
                let src = self.data(x);
                for o in 0..outer {
                    for a in 0..alen {
                        for i in 0..inner {
                            data[o * inner + i] += src[(o * alen + a) * inner + i];
                        }
                    }
                }
                for v in &mut data {
                    *v /= alen as f64;
                }
                self.push_result(reduced_shape(&shape, ax), data, Op::Mean { x, axis }, rg)
            }
        };
        Ok(out)
    }

    // ── softmax family ─────────────────────────────────────────────────

    /// Temperature softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Value, axis: usize, temp: f64) -> Result<Value> {
        if !(temp > 0.0) {
            return Err(Error::Parameter(format!("softmax temperature must be > 0, got {temp}")));
        }
        self.check_axis(x, Some(axis))?;
        let shape = self.shape(x).to_vec();
        let (outer, alen, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * alen + a) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for a in 0..alen {
                    mx = mx.max(src[idx(a)]);
                }
                let mut sum = 0.0;
                for a in 0..alen {
                    let e = ((src[idx(a)] - mx) / temp).exp();
                    data[idx(a)] = e;
                    sum += e;
                }
                for a in 0..alen {
                    data[idx(a)] /= sum;
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push_result(shape, data, Op::Softmax { x, axis, temp }, rg))
    }

    /// `log(softmax(x / temp))` computed without intermediate underflow.
    pub fn log_softmax(&mut self, x: Value, axis: usize, temp: f64) -> Result<Value> {
        if !(temp > 0.0) {
            return Err(Error::Parameter(format!(
                "log_softmax temperature must be > 0, got {temp}"
            )));
        }
        self.check_axis(x, Some(axis))?;
        let shape = self.shape(x).to_vec();
        let (outer, alen, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * alen + a) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for a in 0..alen {
                    mx = mx.max(src[idx(a)]);
                }
                let mut sum = 0.0;
                for a in 0..alen {
                    sum += ((src[idx(a)] - mx) / temp).exp();
                }
                let lse = sum.ln();
                for a in 0..alen {
                    data[idx(a)] = (src[idx(a)] - mx) / temp - lse;
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push_result(shape, data, Op::LogSoftmax { x, axis, temp }, rg))
    }

    // ── shape ops ──────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Value, shape: Vec<usize>) -> Result<Value> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != self.data(x).len() {
            return Err(Error::dimension("reshape", self.shape(x), &shape));
        }
        let data = self.data(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push_result(shape, data, Op::Reshape { x }, rg))
    }

    /// Appends a constant 1 column to a `[r,c]` matrix, the augmented-input
    /// form that folds a bias into the weight matrix.
    pub fn append_ones_col(&mut self, x: Value) -> Result<Value> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dimension("append_ones_col", &s, "rank 2"));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(x);
        let mut data = Vec::with_capacity(r * (c + 1));
        for row in src.chunks(c) {
            data.extend_from_slice(row);
            data.push(1.0);
        }
        let rg = self.requires(x);
        Ok(self.push_result(vec![r, c + 1], data, Op::AppendOnesCol { x }, rg))
    }

    pub fn transpose2(&mut self, x: Value) -> Result<Value> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dimension("transpose2", &s, "rank 2"));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires(x);
        Ok(self.push_result(vec![c, r], data, Op::Transpose2 { x }, rg))
    }

    pub fn transpose_last2(&mut self, x: Value) -> Result<Value> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dimension("transpose_last2", &s, "rank 3"));
        }
        let (bt, m, n) = (s[0], s[1], s[2]);
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for b in 0..bt {
            for i in 0..m {
                for j in 0..n {
                    data[(b * n + j) * m + i] = src[(b * m + i) * n + j];
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push_result(vec![bt, n, m], data, Op::TransposeLast2 { x }, rg))
    }

    // ── spatial ops ────────────────────────────────────────────────────

    /// 5×5 convolution, stride 1, padding 2: spatial size is preserved.
    pub fn conv5x5(&mut self, x: Value, kernel: Value, bias: Value) -> Result<Value> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 4 || sk.len() != 4 || sk[2] != 5 || sk[3] != 5 {
            return Err(Error::dimension("conv5x5", &sx, &sk));
        }
        if sx[1] != sk[1] {
            return Err(Error::dimension("conv5x5_channels", sx[1], sk[1]));
        }
        let (bt, ic, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let oc = sk[0];
        if sb != [oc] {
            return Err(Error::dimension("conv5x5_bias", &sb, oc));
        }
        let src = self.data(x);
        let ker = self.data(kernel);
        let bs = self.data(bias);
        let mut data = vec![0.0; bt * oc * h * w];
        for b in 0..bt {
            for o in 0..oc {
                for y in 0..h {
                    for xp in 0..w {
                        let mut acc = bs[o];
                        for c in 0..ic {
                            for ky in 0..5usize {
                                let iy = y as isize + ky as isize - 2;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..5usize {
                                    let ix = xp as isize + kx as isize - 2;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += src[((b * ic + c) * h + iy as usize) * w + ix as usize]
                                        * ker[((o * ic + c) * 5 + ky) * 5 + kx];
                                }
                            }
                        }
                        data[((b * oc + o) * h + y) * w + xp] = acc;
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(kernel) || self.requires(bias);
        Ok(self.push_result(vec![bt, oc, h, w], data, Op::Conv5x5 { x, kernel, bias }, rg))
    }

    /// 2×2 average pooling with stride 2. Requires even spatial dims.
    pub fn avg_pool2(&mut self, x: Value) -> Result<Value> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::dimension("avg_pool2", &s, "rank 4 with even H, W"));
        }
        let (bt, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(x);
        let mut data = vec![0.0; bt * c * oh * ow];
        for bc in 0..bt * c {
            for y in 0..oh {
                for xp in 0..ow {
                    let base = bc * h * w;
                    let sum = src[base + (2 * y) * w + 2 * xp]
                        + src[base + (2 * y) * w + 2 * xp + 1]
                        + src[base + (2 * y + 1) * w + 2 * xp]
                        + src[base + (2 * y + 1) * w + 2 * xp + 1];
                    data[bc * oh * ow + y * ow + xp] = sum * 0.25;
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push_result(vec![bt, c, oh, ow], data, Op::AvgPool2 { x }, rg))
    }

    /// Spatial resize of a `[b,c,H,W]` map to exactly `th × tw`.
    pub fn resize(&mut self, x: Value, th: usize, tw: usize, bilinear: bool) -> Result<Value> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || th == 0 || tw == 0 {
            return Err(Error::dimension("resize", &s, (th, tw)));
        }
        let (bt, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = self.data(x);
        let mut data = vec![0.0; bt * c * th * tw];
        for bc in 0..bt * c {
            let plane = &src[bc * h * w..(bc + 1) * h * w];
            let out = &mut data[bc * th * tw..(bc + 1) * th * tw];
            if bilinear {
                for oy in 0..th {
                    let (y0, y1, fy) = sample_coord(oy, th, h);
                    for ox in 0..tw {
                        let (x0, x1, fx) = sample_coord(ox, tw, w);
                        let tl = plane[y0 * w + x0];
                        let tr = plane[y0 * w + x1];
                        let bl = plane[y1 * w + x0];
                        let br = plane[y1 * w + x1];
                        let top = tl + fx * (tr - tl);
                        let bot = bl + fx * (br - bl);
                        out[oy * tw + ox] = top + fy * (bot - top);
                    }
                }
            } else {
                for oy in 0..th {
                    let sy = nearest_coord(oy, th, h);
                    for ox in 0..tw {
                        let sx = nearest_coord(ox, tw, w);
                        out[oy * tw + ox] = plane[sy * w + sx];
                    }
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push_result(vec![bt, c, th, tw], data, Op::Resize { x, bilinear }, rg))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Each pass computes fresh gradients
    /// and adds them into the nodes, so repeated calls without
    /// [`Tape::zero_grads`] accumulate.
    pub fn backward(&mut self, root: Value) -> Result<()> {
        if !self.tensor(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.requires(root) {
            return Ok(());
        }
        self.scratch = vec![None; root.0 + 1];
        self.scratch[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].tensor.requires_grad() {
                continue;
            }
            let Some(grad) = self.scratch[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &grad);
            self.nodes[i].tensor.accumulate_grad(&grad);
        }
        self.scratch.clear();
        Ok(())
    }

    fn send(&mut self, v: Value, delta: &[f64]) {
        if self.nodes[v.0].tensor.requires_grad() {
            let slot = self.scratch[v.0].get_or_insert_with(|| vec![0.0; delta.len()]);
            for (s, d) in slot.iter_mut().zip(delta) {
                *s += d;
            }
        }
    }

    fn propagate(&mut self, node: usize, op: &Op, grad: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires(a) {
                    // dA = dC · Bᵀ
                    let bd = self.data(b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = grad[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += g * bd[p * n + j];
                            }
                        }
                    }
                    self.send(a, &da);
                }
                if self.requires(b) {
                    // dB = Aᵀ · dC
                    let ad = self.data(a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * grad[i * n + j];
                            }
                        }
                    }
                    self.send(b, &db);
                }
            }
            Op::Bmm { a, b } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.requires(a) {
                    let bd = self.data(b).to_vec();
                    let mut da = vec![0.0; bt * m * k];
                    for t in 0..bt {
                        for i in 0..m {
                            for j in 0..n {
                                let g = grad[(t * m + i) * n + j];
                                for p in 0..k {
                                    da[(t * m + i) * k + p] += g * bd[(t * k + p) * n + j];
                                }
                            }
                        }
                    }
                    self.send(a, &da);
                }
                if self.requires(b) {
                    let ad = self.data(a).to_vec();
                    let mut db = vec![0.0; bt * k * n];
                    for t in 0..bt {
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[(t * m + i) * k + p];
                                for j in 0..n {
                                    db[(t * k + p) * n + j] += av * grad[(t * m + i) * n + j];
                                }
                            }
                        }
                    }
                    self.send(b, &db);
                }
            }
            Op::Add { a, b } => {
                self.send(a, grad);
                self.send(b, grad);
            }
            Op::Sub { a, b } => {
                self.send(a, grad);
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.send(b, &neg);
            }
            Op::Mul { a, b } => {
                if self.requires(a) {
                    let da: Vec<f64> = grad.iter().zip(self.data(b)).map(|(g, y)| g * y).collect();
                    self.send(a, &da);
                }
                if self.requires(b) {
                    let db: Vec<f64> = grad.iter().zip(self.data(a)).map(|(g, x)| g * x).collect();
                    self.send(b, &db);
                }
            }
            Op::AddRowBias { x, bias } => {
                self.send(x, grad);
                if self.requires(bias) {
                    let c = self.shape(bias)[0];
                    let mut db = vec![0.0; c];
                    for (i, g) in grad.iter().enumerate() {
                        db[i % c] += g;
                    }
                    self.send(bias, &db);
                }
            }
            Op::Sigmoid { x } => {
                let out = self.nodes[node].tensor.data().to_vec();
                let dx: Vec<f64> = grad.iter().zip(&out).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.send(x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(self.data(x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.send(x, &dx);
            }
            Op::Exp { x } => {
                let out = self.nodes[node].tensor.data().to_vec();
                let dx: Vec<f64> = grad.iter().zip(&out).map(|(g, e)| g * e).collect();
                self.send(x, &dx);
            }
            Op::Log { x } => {
                let dx: Vec<f64> = grad.iter().zip(self.data(x)).map(|(g, v)| g / v).collect();
                self.send(x, &dx);
            }
            Op::Neg { x } => {
                let dx: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.send(x, &dx);
            }
            Op::Abs { x } => {
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(self.data(x))
                    .map(|(g, &v)| {
                        if v > 0.0 {
                            *g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.send(x, &dx);
            }
            Op::Cos { x } => {
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(self.data(x))
                    .map(|(g, &v)| -g * v.sin())
                    .collect();
                self.send(x, &dx);
            }
            Op::Scale { x, k } => {
                let dx: Vec<f64> = grad.iter().map(|g| g * k).collect();
                self.send(x, &dx);
            }
            Op::Powf { x, k } => {
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(self.data(x))
                    .map(|(g, &v)| g * k * v.powf(k - 1.0))
                    .collect();
                self.send(x, &dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(self.data(x))
                    .map(|(g, &v)| if v > lo && v < hi { *g } else { 0.0 })
                    .collect();
                self.send(x, &dx);
            }
            Op::Sum { x, axis } => {
                let shape = self.shape(x).to_vec();
                match axis {
                    None => {
                        let dx = vec![grad[0]; shape.iter().product()];
                        self.send(x, &dx);
                    }
                    Some(ax) => {
                        let (outer, alen, inner) = axis_split(&shape, ax);
                        let mut dx = vec![0.0; outer * alen * inner];
                        for o in 0..outer {
                            for a in 0..alen {
                                for i in 0..inner {
                                    dx[(o * alen + a) * inner + i] = grad[o * inner + i];
                                }
                            }
                        }
                        self.send(x, &dx);
                    }
                }
            }
            Op::Mean { x, axis } => {
                let shape = self.shape(x).to_vec();
                match axis {
                    None => {
                        let n: usize = shape.iter().product();
                        let dx = vec![grad[0] / n as f64; n];
                        self.send(x, &dx);
                    }
                    Some(ax) => {
                        let (outer, alen, inner) = axis_split(&shape, ax);
                        let mut dx = vec![0.0; outer * alen * inner];
                        for o in 0..outer {
                            for a in 0..alen {
                                for i in 0..inner {
                                    dx[(o * alen + a) * inner + i] = grad[o * inner + i] / alen as f64;
                                }
                            }
                        }
                        self.send(x, &dx);
                    }
                }
            }
            Op::Softmax { x, axis, temp } => {
                let out = self.nodes[node].tensor.data().to_vec();
                let shape = self.shape(x).to_vec();
                let (outer, alen, inner) = axis_split(&shape, axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * alen + a) * inner + i;
                        let mut dot = 0.0;
                        for a in 0..alen {
                            dot += grad[idx(a)] * out[idx(a)];
                        }
                        for a in 0..alen {
                            dx[idx(a)] = out[idx(a)] * (grad[idx(a)] - dot) / temp;
                        }
                    }
                }
                self.send(x, &dx);
            }
            Op::LogSoftmax { x, axis, temp } => {
                let out = self.nodes[node].tensor.data().to_vec();
                let shape = self.shape(x).to_vec();
                let (outer, alen, inner) = axis_split(&shape, axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * alen + a) * inner + i;
                        let mut gsum = 0.0;
                        for a in 0..alen {
                            gsum += grad[idx(a)];
                        }
                        for a in 0..alen {
                            let p = out[idx(a)].exp();
                            dx[idx(a)] = (grad[idx(a)] - p * gsum) / temp;
                        }
                    }
                }
                self.send(x, &dx);
            }
            Op::Reshape { x } => {
                self.send(x, grad);
            }
            Op::AppendOnesCol { x } => {
                let c = self.shape(x)[1];
                let dx: Vec<f64> = grad
                    .chunks(c + 1)
                    .flat_map(|row| row[..c].iter().copied())
                    .collect();
                self.send(x, &dx);
            }
            Op::Transpose2 { x } => {
                let s = self.shape(x).to_vec();
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = grad[j * r + i];
                    }
                }
                self.send(x, &dx);
            }
            Op::TransposeLast2 { x } => {
                let s = self.shape(x).to_vec();
                let (bt, m, n) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; bt * m * n];
                for b in 0..bt {
                    for i in 0..m {
                        for j in 0..n {
                            dx[(b * m + i) * n + j] = grad[(b * n + j) * m + i];
                        }
                    }
                }
                self.send(x, &dx);
            }
            Op::Conv5x5 { x, kernel, bias } => {
                let sx = self.shape(x).to_vec();
                let sk = self.shape(kernel).to_vec();
                let (bt, ic, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let oc = sk[0];
                if self.requires(x) {
                    let ker = self.data(kernel).to_vec();
                    let mut dx = vec![0.0; bt * ic * h * w];
                    for b in 0..bt {
                        for o in 0..oc {
                            for y in 0..h {
                                for xp in 0..w {
                                    let g = grad[((b * oc + o) * h + y) * w + xp];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for c in 0..ic {
                                        for ky in 0..5usize {
                                            let iy = y as isize + ky as isize - 2;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..5usize {
                                                let ix = xp as isize + kx as isize - 2;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                dx[((b * ic + c) * h + iy as usize) * w + ix as usize] +=
                                                    g * ker[((o * ic + c) * 5 + ky) * 5 + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.send(x, &dx);
                }
                if self.requires(kernel) {
                    let src = self.data(x).to_vec();
                    let mut dk = vec![0.0; oc * ic * 25];
                    for b in 0..bt {
                        for o in 0..oc {
                            for y in 0..h {
                                for xp in 0..w {
                                    let g = grad[((b * oc + o) * h + y) * w + xp];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for c in 0..ic {
                                        for ky in 0..5usize {
                                            let iy = y as isize + ky as isize - 2;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..5usize {
                                                let ix = xp as isize + kx as isize - 2;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                dk[((o * ic + c) * 5 + ky) * 5 + kx] +=
                                                    g * src[((b * ic + c) * h + iy as usize) * w + ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.send(kernel, &dk);
                }
                if self.requires(bias) {
                    let mut db = vec![0.0; oc];
                    for b in 0..bt {
                        for o in 0..oc {
                            for s in 0..h * w {
                                db[o] += grad[(b * oc + o) * h * w + s];
                            }
                        }
                    }
                    self.send(bias, &db);
                }
            }
            Op::AvgPool2 { x } => {
                let s = self.shape(x).to_vec();
                let (bt, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; bt * c * h * w];
                for bc in 0..bt * c {
                    for y in 0..oh {
                        for xp in 0..ow {
                            let g = grad[bc * oh * ow + y * ow + xp] * 0.25;
                            let base = bc * h * w;
                            dx[base + (2 * y) * w + 2 * xp] += g;
                            dx[base + (2 * y) * w + 2 * xp + 1] += g;
                            dx[base + (2 * y + 1) * w + 2 * xp] += g;
                            dx[base + (2 * y + 1) * w + 2 * xp + 1] += g;
                        }
                    }
                }
                self.send(x, &dx);
            }
            Op::Resize { x, bilinear } => {
                let s = self.shape(x).to_vec();
                let so = self.nodes[node].tensor.shape().to_vec();
                let (bt, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (th, tw) = (so[2], so[3]);
                let mut dx = vec![0.0; bt * c * h * w];
                for bc in 0..bt * c {
                    let gplane = &grad[bc * th * tw..(bc + 1) * th * tw];
                    let dplane = &mut dx[bc * h * w..(bc + 1) * h * w];
                    if bilinear {
                        for oy in 0..th {
                            let (y0, y1, fy) = sample_coord(oy, th, h);
                            for ox in 0..tw {
                                let (x0, x1, fx) = sample_coord(ox, tw, w);
                                let g = gplane[oy * tw + ox];
                                dplane[y0 * w + x0] += g * (1.0 - fx) * (1.0 - fy);
                                dplane[y0 * w + x1] += g * fx * (1.0 - fy);
                                dplane[y1 * w + x0] += g * (1.0 - fx) * fy;
                                dplane[y1 * w + x1] += g * fx * fy;
                            }
                        }
                    } else {
                        for oy in 0..th {
                            let sy = nearest_coord(oy, th, h);
                            for ox in 0..tw {
                                let sx = nearest_coord(ox, tw, w);
                                dplane[sy * w + sx] += gplane[oy * tw + ox];
                            }
                        }
                    }
                }
                self.send(x, &dx);
            }
        }
    }
}

/// Half-pixel source coordinate for bilinear sampling: returns the two
/// neighbouring source indices and the interpolation fraction.
fn sample_coord(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, s - lo as f64)
}

fn nearest_coord(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let scale = src_len as f64 / dst_len as f64;
    (((dst as f64 + 0.5) * scale).floor() as usize).min(src_len - 1)
}
