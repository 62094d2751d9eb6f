use super::params::{ParamId, ParamStore};
use super::{broadcast_shape, Result, TensorError};

/// Handle to one node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation selector, mirroring the individual methods on [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Log,
    Pow(f64),
    Max(f64),
    Negate,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Div(Value, Value),
    Minimum(Value, Value),
    Maximum(Value, Value),
    Neg(Value),
    Sigmoid(Value),
    Log(Value),
    Exp(Value),
    Sin(Value),
    Cos(Value),
    Abs(Value),
    MaxConst(Value, f64),
    PowConst(Value, f64),
    Scale(Value, f64),
    AddConst(Value),
    Clamp(Value, f64, f64),
    MatMul(Value, Value),
    Transpose(Value),
    Softmax(Value, usize),
    /// Row normalisation; keeps `1 / std` per row.
    LayerNorm(Value, Vec<f64>),
    Rows(Value, Vec<usize>),
    Concat(Value, Value),
    SliceCols(Value, usize),
    Sum(Value),
    SumRows(Value),
    Reshape(Value),
}

impl Op {
    fn inputs(&self) -> [Option<Value>; 2] {
        use Op::*;
        match self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Minimum(a, b) | Maximum(a, b)
            | MatMul(a, b) | Concat(a, b) => [Some(*a), Some(*b)],
            Neg(a) | Sigmoid(a) | Log(a) | Exp(a) | Sin(a) | Cos(a) | Abs(a) | AddConst(a)
            | MaxConst(a, _) | PowConst(a, _) | Scale(a, _) | Clamp(a, _, _) | Transpose(a)
            | Softmax(a, _) | LayerNorm(a, _) | Rows(a, _) | SliceCols(a, _) | Sum(a) | SumRows(a) | Reshape(a) => {
                [Some(*a), None]
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

/// Append-only computation tape.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Output of every `detach` call, in call order.
    detached: Vec<Vec<f64>>,
    pinned: Option<Vec<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `c = alpha * op(a) * op(b) + c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: callers pass buffers of at least m*k, k*n and m*n elements laid out
    // with the given strides; `c` is row-major m×n and does not alias a or b.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `i`-th `detach` returns `pinned[i]` instead of the
    /// current data. Replaying [`Graph::detached_values`] of a reference pass
    /// holds stop-gradient inputs fixed, which is what finite differences of
    /// the analytic gradient need.
    pub fn with_pinned_detach(pinned: Vec<Vec<f64>>) -> Self {
        Self {
            pinned: Some(pinned),
            ..Self::default()
        }
    }

    pub fn detached_values(&self) -> &[Vec<f64>] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Value {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            param: None,
            op,
        });
        Value(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Value> {
        if numel(shape) != data.len() {
            return Err(TensorError::Invalid {
                op: "leaf",
                msg: format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            });
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad,
            param: None,
            op: Op::Leaf,
        });
        Ok(Value(self.nodes.len() - 1))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Value> {
        self.leaf(shape, data, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Value> {
        self.leaf(shape, data, true)
    }

    pub fn scalar(&mut self, x: f64) -> Value {
        self.leaf(&[], vec![x], false).expect("scalar shape")
    }

    /// Binds a stored parameter into this graph as a gradient-requiring leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Value {
        let p = store.get(id);
        let v = self
            .leaf(&p.shape, p.data.clone(), true)
            .expect("parameter shape is validated on creation");
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Copy of `v`'s forward data with no gradient path.
    pub fn detach(&mut self, v: Value) -> Value {
        let n = &self.nodes[v.0];
        let shape = n.shape.clone();
        let pinned = self.pinned.as_ref().and_then(|p| p.get(self.detached.len()));
        let data = match pinned {
            Some(p) if p.len() == n.data.len() => p.clone(),
            _ => n.data.clone(),
        };
        self.detached.push(data.clone());
        self.leaf(&shape, data, false).expect("same shape")
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The single element of a one-element value.
    pub fn item(&self, v: Value) -> f64 {
        let d = self.data(v);
        assert_eq!(d.len(), 1, "item() on a value with {} elements", d.len());
        d[0]
    }

    fn dims2(&self, op: &'static str, v: Value) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::Invalid {
                op,
                msg: format!("expected a 2-d value, got shape {s:?}"),
            }),
        }
    }

    // ---------------------------------------------------------------- binary

    fn binary(
        &mut self,
        name: &'static str,
        a: Value,
        b: Value,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Value> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let n = numel(&shape);
        let (na, nb) = (da.len(), db.len());
        let data = if na == n && nb == n {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(da[i % na], db[i % nb])).collect()
        };
        Ok(self.push(shape, data, op))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, a: Value, f: impl Fn(f64) -> f64, op: Op) -> Value {
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(shape, data, op)
    }

    pub fn neg(&mut self, a: Value) -> Value {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Value) -> Value {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Value) -> Value {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sin(&mut self, a: Value) -> Value {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Value) -> Value {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn abs(&mut self, a: Value) -> Value {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `max(x, c)` against a constant.
    pub fn max_const(&mut self, a: Value, c: f64) -> Value {
        self.unary(a, |x| x.max(c), Op::MaxConst(a, c))
    }

    pub fn relu(&mut self, a: Value) -> Value {
        self.max_const(a, 0.0)
    }

    pub fn pow_const(&mut self, a: Value, p: f64) -> Value {
        self.unary(a, |x| powf(x, p), Op::PowConst(a, p))
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Value, c: f64) -> Value {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Value, lo: f64, hi: f64) -> Value {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Dispatches an [`ElementwiseOp`]; binary kinds require `b`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Value, b: Option<Value>) -> Result<Value> {
        let need_b = || {
            b.ok_or(TensorError::Invalid {
                op: "elementwise",
                msg: format!("{op:?} needs a second operand"),
            })
        };
        Ok(match op {
            ElementwiseOp::Add => self.add(a, need_b()?)?,
            ElementwiseOp::Sub => self.sub(a, need_b()?)?,
            ElementwiseOp::Mul => self.mul(a, need_b()?)?,
            ElementwiseOp::Sigmoid => self.sigmoid(a),
            ElementwiseOp::Log => self.log(a),
            ElementwiseOp::Pow(p) => self.pow_const(a, p),
            ElementwiseOp::Max(c) => self.max_const(a, c),
            ElementwiseOp::Negate => self.neg(a),
        })
    }

    // ---------------------------------------------------------------- matrix

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), (k, 1), self.data(b), (n, 1), &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let (r, c) = self.dims2("transpose", a)?;
        let d = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a)))
    }

    /// Softmax along `axis` of a 1-d or 2-d value, stabilised by max-subtraction.
    pub fn softmax(&mut self, a: Value, axis: usize) -> Result<Value> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape.len() > 2 {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} invalid for shape {shape:?}"),
            });
        }
        let d = self.data(a);
        let mut out = vec![0.0; d.len()];
        for_each_lane(&shape, axis, |idx| {
            let m = idx.clone().map(|i| d[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in idx.clone() {
                out[i] = (d[i] - m).exp();
                z += out[i];
            }
            for i in idx {
                out[i] /= z;
            }
        });
        Ok(self.push(shape, out, Op::Softmax(a, axis)))
    }

    /// Normalises every row of a 2-d value to zero mean and unit variance,
    /// `(x - mean) / sqrt(var + eps)`, with no affine part.
    pub fn layer_norm(&mut self, a: Value, eps: f64) -> Result<Value> {
        let (r, c) = self.dims2("layer_norm", a)?;
        let d = self.data(a);
        let mut out = vec![0.0; r * c];
        let mut inv = Vec::with_capacity(r);
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (x - mean) * s;
            }
            inv.push(s);
        }
        Ok(self.push(vec![r, c], out, Op::LayerNorm(a, inv)))
    }

    /// Reorders rows by a permutation: output row `i` is input row `perm[i]`.
    pub fn gather_rows(&mut self, a: Value, perm: &[usize]) -> Result<Value> {
        let (r, _) = self.dims2("gather_rows", a)?;
        if perm.len() != r || !is_permutation(perm) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("{perm:?} is not a permutation of 0..{r}"),
            });
        }
        self.take_rows(a, perm)
    }

    /// Selects rows by index (repeats allowed); gradients scatter-add back.
    pub fn take_rows(&mut self, a: Value, idx: &[usize]) -> Result<Value> {
        let (r, c) = self.dims2("take_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::Invalid {
                op: "take_rows",
                msg: format!("row {bad} out of range for {r} rows"),
            });
        }
        let d = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        Ok(self.push(vec![idx.len(), c], out, Op::Rows(a, idx.to_vec())))
    }

    /// Feature-axis concatenation of two 2-d values with equal row counts.
    pub fn concat(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ra, ca) = self.dims2("concat", a)?;
        let (rb, cb) = self.dims2("concat", b)?;
        if ra != rb {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(vec![ra, ca + cb], out, Op::Concat(a, b)))
    }

    /// Columns `start..start + len` of a 2-d value.
    pub fn slice_cols(&mut self, a: Value, start: usize, len: usize) -> Result<Value> {
        let (r, c) = self.dims2("slice_cols", a)?;
        if start + len > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for {c}", start + len),
            });
        }
        let d = self.data(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        Ok(self.push(vec![r, len], out, Op::SliceCols(a, start)))
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let s = self.data(a).iter().sum();
        self.push(vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Value) -> Value {
        let n = self.data(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along the last axis of a 2-d value: `[r, c] -> [r]`.
    pub fn sum_rows(&mut self, a: Value) -> Result<Value> {
        let (r, c) = self.dims2("sum_rows", a)?;
        let d = self.data(a);
        let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
        Ok(self.push(vec![r], out, Op::SumRows(a)))
    }

    pub fn reshape(&mut self, a: Value, shape: &[usize]) -> Result<Value> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a)))
    }

    // -------------------------------------------------------------- backward

    /// Clears every stored gradient.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse-mode sweep from a one-element root. Stored gradients accumulate
    /// across calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, root: Value) -> Result<()> {
        if self.data(root).len() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        let end = root.0 + 1;
        let mut live = vec![false; end];
        live[root.0] = self.nodes[root.0].requires_grad;
        for i in (0..end).rev() {
            if live[i] {
                for p in self.nodes[i].op.inputs().into_iter().flatten() {
                    if self.nodes[p.0].requires_grad {
                        live[p.0] = true;
                    }
                }
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; end];
        if live[root.0] {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, &live);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Gradients of every bound parameter, in binding order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], live: &[bool]) {
        let node = &self.nodes[i];
        let y = &node.data;
        let mut acc = |v: Value, f: &mut dyn FnMut(&mut [f64])| {
            if !live[v.0] {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
            f(buf);
        };
        // broadcast-aware accumulation for binary ops
        let bcast = |buf: &mut [f64], h: &dyn Fn(usize) -> f64| {
            let n = buf.len();
            if n == g.len() {
                for (k, (b, gk)) in buf.iter_mut().zip(g).enumerate() {
                    *b += gk * h(k);
                }
            } else {
                for (k, gk) in g.iter().enumerate() {
                    buf[k % n] += gk * h(k);
                }
            }
        };
        use Op::*;
        match &node.op {
            Leaf => {}
            Add(a, b) => {
                acc(*a, &mut |buf| bcast(buf, &|_| 1.0));
                acc(*b, &mut |buf| bcast(buf, &|_| 1.0));
            }
            Sub(a, b) => {
                acc(*a, &mut |buf| bcast(buf, &|_| 1.0));
                acc(*b, &mut |buf| bcast(buf, &|_| -1.0));
            }
            Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |buf| bcast(buf, &|k| db[k % db.len()]));
                acc(*b, &mut |buf| bcast(buf, &|k| da[k % da.len()]));
            }
            Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |buf| bcast(buf, &|k| 1.0 / db[k % db.len()]));
                acc(*b, &mut |buf| {
                    bcast(buf, &|k| {
                        let q = db[k % db.len()];
                        -da[k % da.len()] / (q * q)
                    })
                });
            }
            Minimum(a, b) | Maximum(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let is_min = matches!(node.op, Minimum(..));
                let pick_a = |k: usize| {
                    let (x, z) = (da[k % da.len()], db[k % db.len()]);
                    if is_min {
                        x <= z
                    } else {
                        x >= z
                    }
                };
                acc(*a, &mut |buf| bcast(buf, &|k| if pick_a(k) { 1.0 } else { 0.0 }));
                acc(*b, &mut |buf| bcast(buf, &|k| if pick_a(k) { 0.0 } else { 1.0 }));
            }
            Neg(a) => acc(*a, &mut |buf| zip_acc(buf, g, |_, gk| -gk)),
            Sigmoid(a) => acc(*a, &mut |buf| zip_acc(buf, g, |k, gk| gk * y[k] * (1.0 - y[k]))),
            Log(a) => {
                let x = self.data(*a);
                acc(*a, &mut |buf| zip_acc(buf, g, |k, gk| gk / x[k]))
            }
            Exp(a) => acc(*a, &mut |buf| zip_acc(buf, g, |k, gk| gk * y[k])),
            Sin(a) => {
                let x = self.data(*a);
                acc(*a, &mut |buf| zip_acc(buf, g, |k, gk| gk * x[k].cos()))
            }
            Cos(a) => {
                let x = self.data(*a);
                acc(*a, &mut |buf| zip_acc(buf, g, |k, gk| -gk * x[k].sin()))
            }
            Abs(a) => {
                let x = self.data(*a);
                acc(*a, &mut |buf| {
                    zip_acc(buf, g, |k, gk| {
                        if x[k] > 0.0 {
                            gk
                        } else if x[k] < 0.0 {
                            -gk
                        } else {
                            0.0
                        }
                    })
                })
            }
            MaxConst(a, c) => {
                let x = self.data(*a);
                acc(*a, &mut |buf| zip_acc(buf, g, |k, gk| if x[k] > *c { gk } else { 0.0 }))
            }
            PowConst(a, p) => {
                let x = self.data(*a);
                acc(*a, &mut |buf| {
                    zip_acc(buf, g, |k, gk| {
                        if *p == 0.0 {
                            0.0
                        } else {
                            gk * p * powf(x[k], p - 1.0)
                        }
                    })
                })
            }
            Scale(a, c) => acc(*a, &mut |buf| zip_acc(buf, g, |_, gk| gk * c)),
            AddConst(a) | Reshape(a) => acc(*a, &mut |buf| zip_acc(buf, g, |_, gk| gk)),
            Clamp(a, lo, hi) => {
                let x = self.data(*a);
                acc(*a, &mut |buf| {
                    zip_acc(buf, g, |k, gk| if x[k] >= *lo && x[k] <= *hi { gk } else { 0.0 })
                })
            }
            MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let (da, db) = (self.data(*a), self.data(*b));
                // dA = G · Bᵀ,  dB = Aᵀ · G
                acc(*a, &mut |buf| gemm(m, n, k, g, (n, 1), db, (1, n), buf));
                acc(*b, &mut |buf| gemm(k, m, n, da, (1, k), g, (n, 1), buf));
            }
            Transpose(a) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                })
            }
            Softmax(a, axis) => {
                let shape = &node.shape;
                acc(*a, &mut |buf| {
                    for_each_lane(shape, *axis, |idx| {
                        let dot: f64 = idx.clone().map(|t| g[t] * y[t]).sum();
                        for t in idx {
                            buf[t] += y[t] * (g[t] - dot);
                        }
                    })
                })
            }
            LayerNorm(a, inv) => {
                let c = node.shape[1];
                acc(*a, &mut |buf| {
                    for (i, &s) in inv.iter().enumerate() {
                        let (gr, yr) = (&g[i * c..(i + 1) * c], &y[i * c..(i + 1) * c]);
                        let gm = gr.iter().sum::<f64>() / c as f64;
                        let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            buf[i * c + j] += s * (gr[j] - gm - yr[j] * gy);
                        }
                    }
                })
            }
            Rows(a, idx) => {
                let c = node.shape[1];
                acc(*a, &mut |buf| {
                    for (i, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[src * c + j] += g[i * c + j];
                        }
                    }
                })
            }
            Concat(a, b) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let ca = self.nodes[a.0].shape[1];
                let cb = c - ca;
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..ca {
                            buf[i * ca + j] += g[i * c + j];
                        }
                    }
                });
                acc(*b, &mut |buf| {
                    for i in 0..r {
                        for j in 0..cb {
                            buf[i * cb + j] += g[i * c + ca + j];
                        }
                    }
                });
            }
            SliceCols(a, start) => {
                let (r, len) = (node.shape[0], node.shape[1]);
                let c = self.nodes[a.0].shape[1];
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..len {
                            buf[i * c + start + j] += g[i * len + j];
                        }
                    }
                })
            }
            Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|b| *b += g[0])),
            SumRows(a) => {
                let c = self.nodes[a.0].shape[1];
                acc(*a, &mut |buf| {
                    for (k, b) in buf.iter_mut().enumerate() {
                        *b += g[k / c];
                    }
                })
            }
        }
    }
}

fn zip_acc(buf: &mut [f64], g: &[f64], f: impl Fn(usize, f64) -> f64) {
    for (k, (b, &gk)) in buf.iter_mut().zip(g).enumerate() {
        *b += f(k, gk);
    }
}

/// Calls `f` with the flat indices of every lane along `axis` (1-d or 2-d).
fn for_each_lane(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    match (shape.len(), axis) {
        (1, _) => f((0..shape[0]).step_by(1)),
        (2, 1) => {
            let (r, c) = (shape[0], shape[1]);
            for i in 0..r {
                f((i * c..(i + 1) * c).step_by(1));
            }
        }
        (2, 0) => {
            let (r, c) = (shape[0], shape[1]);
            for j in 0..c {
                f((j..r * c).step_by(c.max(1)));
            }
        }
        _ => {}
    }
}

/// `x.powf(p)` with cheaper paths for the exponents the models use.
fn powf(x: f64, p: f64) -> f64 {
    if p == 1.0 {
        x
    } else if p == 2.0 {
        x * x
    } else if p == 0.0 {
        1.0
    } else if p == -0.5 {
        1.0 / x.sqrt()
    } else if p == 0.5 {
        x.sqrt()
    } else {
        x.powf(p)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true))
}
