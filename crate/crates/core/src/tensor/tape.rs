use std::borrow::Cow;

use super::{GradSet, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Tensor times a one-element tensor.
    Scale(Var, Var),
    /// `a * x + c`; only the slope matters for the gradient.
    Affine(Var, f64),
    MatMul(Var, Var),
    VecMat(Var, Var),
    Dot(Var, Var),
    AddBias(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Softmax(Var),
    LogAddExp(Var, Var),
    Sum(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Slice(Var, usize),
    Lookup(Var, Vec<usize>),
    Pick(Var, usize),
    ScatterAdd(Var, Vec<usize>),
    Windows(Var, usize),
    /// Column-wise maximum; stores the flat input index of each winner.
    MaxOverTime(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Affine(..) => "affine",
            Op::MatMul(..) => "matmul",
            Op::VecMat(..) => "vecmat",
            Op::Dot(..) => "dot",
            Op::AddBias(..) => "add_bias",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Softmax(_) => "softmax",
            Op::LogAddExp(..) => "log_add_exp",
            Op::Sum(_) => "sum",
            Op::Concat(_) => "concat",
            Op::Stack(_) => "stack",
            Op::Slice(..) => "slice",
            Op::Lookup(..) => "lookup",
            Op::Pick(..) => "pick",
            Op::ScatterAdd(..) => "scatter_add",
            Op::Windows(..) => "windows",
            Op::MaxOverTime(..) => "max_over_time",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of a forward computation.
///
/// Parameters are borrowed from their [`ParamSet`] for the tape's lifetime;
/// every other value is owned by the tape. Nodes are appended in evaluation
/// order, so the node list is always topologically sorted.
#[derive(Clone, Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.value(v).len(), 1);
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("recorded shape")
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'p, [f64]>, op: Op, needs_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_owned(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(shape, Cow::Owned(value), op, needs)
    }

    /// Trainable leaf borrowing its value from `params`.
    pub fn param(&mut self, params: &'p ParamSet, id: ParamId) -> Var {
        let t = params.get(id);
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Param(id), true)
            .expect("parameters are finite")
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Constant, false)
    }

    pub fn constant_vec(&mut self, values: Vec<f64>) -> Result<Var> {
        self.constant(Tensor::vector(values))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<Var> {
        self.constant(Tensor::zeros(shape))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(Error::InvalidShape {
                op,
                msg: format!("expected rank {rank}, got shape {:?}", self.shape(v)),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_owned(shape, out, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_owned(shape, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::LogAddExp(a, b), |x, y| {
            let m = x.max(y);
            m + ((x - m).exp() + (y - m).exp()).ln()
        })
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let k = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * k).collect();
        let shape = self.shape(x).to_vec();
        self.push_owned(shape, out, Op::Scale(x, s), &[x, s])
    }

    /// `slope * x + offset` with constant coefficients.
    pub fn affine(&mut self, x: Var, slope: f64, offset: f64) -> Result<Var> {
        self.map(x, Op::Affine(x, slope), |v| slope * v + offset)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Ln(x), f64::ln)
    }

    /// Softmax over the last axis of a 1-D or 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() > 2 {
            return Err(Error::InvalidShape {
                op: "softmax",
                msg: format!("expected rank 1 or 2, got {shape:?}"),
            });
        }
        let width = *shape.last().expect("non-empty shape");
        let mut out = self.value(x).to_vec();
        out.chunks_mut(width).for_each(softmax_in_place);
        self.push_owned(shape, out, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push_owned(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.affine(s, 1.0 / n, 0.0)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.rank("dot", a, 1)?;
        self.same_shape("dot", a, b)?;
        let d = dot(self.value(a), self.value(b));
        self.push_owned(vec![1], vec![d], Op::Dot(a, b), &[a, b])
    }

    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.rank("matmul", a, 2)?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let bs = self.shape(b).to_vec();
        if bs[0] != k || bs.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: bs,
            });
        }
        let (shape, out) = if bs.len() == 1 {
            let (av, bv) = (self.value(a), self.value(b));
            let out = av.chunks_exact(k).map(|row| dot(row, bv)).collect();
            (vec![m], out)
        } else {
            let n = bs[1];
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), &mut out);
            (vec![m, n], out)
        };
        self.push_owned(shape, out, Op::MatMul(a, b), &[a, b])
    }

    /// `[n] x [n,d] -> [d]`, i.e. a weighted sum of rows.
    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var> {
        self.rank("vecmat", v, 1)?;
        self.rank("vecmat", m, 2)?;
        let (n, d) = (self.shape(m)[0], self.shape(m)[1]);
        if self.shape(v)[0] != n {
            return Err(Error::ShapeMismatch {
                op: "vecmat",
                lhs: self.shape(v).to_vec(),
                rhs: self.shape(m).to_vec(),
            });
        }
        let mut out = vec![0.0; d];
        for (w, row) in self.value(v).iter().zip(self.value(m).chunks_exact(d)) {
            axpy(*w, row, &mut out);
        }
        self.push_owned(vec![d], out, Op::VecMat(v, m), &[v, m])
    }

    /// Adds a `[n]` bias to every row of a `[m,n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.rank("add_bias", x, 2)?;
        let n = self.shape(x)[1];
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_owned(shape, out, Op::AddBias(x, bias), &[x, bias])
    }

    /// Concatenates 1-D tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidShape {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let mut out = Vec::new();
        for &p in parts {
            self.rank("concat", p, 1)?;
            out.extend_from_slice(self.value(p));
        }
        let len = out.len();
        self.push_owned(vec![len], out, Op::Concat(parts.to_vec()), parts)
    }

    /// Stacks equal-length 1-D tensors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::InvalidShape {
                op: "stack",
                msg: "no inputs".into(),
            });
        };
        self.rank("stack", first, 1)?;
        let mut out = Vec::with_capacity(rows.len() * self.value(first).len());
        for &r in rows {
            self.same_shape("stack", first, r)?;
            out.extend_from_slice(self.value(r));
        }
        let shape = vec![rows.len(), self.value(first).len()];
        self.push_owned(shape, out, Op::Stack(rows.to_vec()), rows)
    }

    /// Contiguous sub-range of a 1-D tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.rank("slice", x, 1)?;
        if len == 0 || start + len > self.value(x).len() {
            return Err(Error::InvalidShape {
                op: "slice",
                msg: format!("range {start}..{} outside {:?}", start + len, self.shape(x)),
            });
        }
        let out = self.value(x)[start..start + len].to_vec();
        self.push_owned(vec![len], out, Op::Slice(x, start), &[x])
    }

    /// Gathers rows of a `[V,d]` table into a `[len,d]` matrix.
    pub fn lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, out) = self.gather(table, ids)?;
        let d = self.shape(table)[1];
        self.push_owned(vec![rows, d], out, Op::Lookup(table, ids.to_vec()), &[table])
    }

    /// One row of a `[V,d]` table as a `[d]` vector.
    pub fn lookup_row(&mut self, table: Var, id: usize) -> Result<Var> {
        let (_, out) = self.gather(table, &[id])?;
        let d = out.len();
        self.push_owned(vec![d], out, Op::Lookup(table, vec![id]), &[table])
    }

    fn gather(&self, table: Var, ids: &[usize]) -> Result<(usize, Vec<f64>)> {
        self.rank("lookup", table, 2)?;
        let (v, d) = (self.shape(table)[0], self.shape(table)[1]);
        if ids.is_empty() {
            return Err(Error::InvalidShape {
                op: "lookup",
                msg: "no ids".into(),
            });
        }
        let data = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IdOutOfRange { id, size: v });
            }
            out.extend_from_slice(&data[id * d..(id + 1) * d]);
        }
        Ok((ids.len(), out))
    }

    /// Element `index` of a 1-D tensor as a one-element tensor.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        self.rank("pick", x, 1)?;
        let len = self.value(x).len();
        if index >= len {
            return Err(Error::IdOutOfRange { id: index, size: len });
        }
        let out = vec![self.value(x)[index]];
        self.push_owned(vec![1], out, Op::Pick(x, index), &[x])
    }

    /// `out[indices[i]] += x[i]` into a fresh zero vector of length `out_len`.
    pub fn scatter_add(&mut self, x: Var, indices: &[usize], out_len: usize) -> Result<Var> {
        self.rank("scatter_add", x, 1)?;
        if indices.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_add",
                lhs: self.shape(x).to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let mut out = vec![0.0; out_len];
        for (&i, &v) in indices.iter().zip(self.value(x)) {
            if i >= out_len {
                return Err(Error::IdOutOfRange { id: i, size: out_len });
            }
            out[i] += v;
        }
        self.push_owned(vec![out_len], out, Op::ScatterAdd(x, indices.to_vec()), &[x])
    }

    /// Sliding windows of `h` consecutive rows of a `[T,k]` matrix, each
    /// flattened: `[T-h+1, h*k]`.
    pub fn windows(&mut self, x: Var, h: usize) -> Result<Var> {
        self.rank("windows", x, 2)?;
        let (t, k) = (self.shape(x)[0], self.shape(x)[1]);
        if h == 0 || h > t {
            return Err(Error::InvalidShape {
                op: "windows",
                msg: format!("window {h} does not fit sequence length {t}"),
            });
        }
        let rows = t - h + 1;
        let data = self.value(x);
        let mut out = Vec::with_capacity(rows * h * k);
        for i in 0..rows {
            out.extend_from_slice(&data[i * k..(i + h) * k]);
        }
        self.push_owned(vec![rows, h * k], out, Op::Windows(x, h), &[x])
    }

    /// Maximum over the leading (time) axis: `[m] -> [1]`, `[m,n] -> [n]`.
    pub fn max_over_time(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (m, n) = match shape.as_slice() {
            [m] => (*m, 1),
            [m, n] => (*m, *n),
            _ => {
                return Err(Error::InvalidShape {
                    op: "max_over_time",
                    msg: format!("expected rank 1 or 2, got {shape:?}"),
                })
            }
        };
        let data = self.value(x);
        let mut winners = vec![0usize; n];
        let mut out = vec![f64::NEG_INFINITY; n];
        for i in 0..m {
            for j in 0..n {
                let v = data[i * n + j];
                if v > out[j] {
                    out[j] = v;
                    winners[j] = i * n + j;
                }
            }
        }
        self.push_owned(vec![n], out, Op::MaxOverTime(x, winners), &[x])
    }

    /// Reverse pass from a scalar `loss`, accumulating into `grads` for every
    /// parameter leaf. Parameters not reachable from `loss` receive nothing.
    pub fn backward(&self, loss: Var, grads: &mut GradSet) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.needs(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let dst = grads.get_mut(*id);
                    if dst.shape() != node.shape.as_slice() {
                        return Err(Error::ShapeMismatch {
                            op: "backward",
                            lhs: node.shape.clone(),
                            rhs: dst.shape().to_vec(),
                        });
                    }
                    add_into(dst.data_mut(), &g);
                }
                Op::Add(a, b) => {
                    self.acc(&mut adj, *a, |d| add_into(d, &g));
                    self.acc(&mut adj, *b, |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut adj, *a, |d| add_into(d, &g));
                    self.acc(&mut adj, *b, |d| axpy(-1.0, &g, d));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut adj, *a, |d| {
                        d.iter_mut().zip(&g).zip(bv).for_each(|((d, g), b)| *d += g * b)
                    });
                    self.acc(&mut adj, *b, |d| {
                        d.iter_mut().zip(&g).zip(av).for_each(|((d, g), a)| *d += g * a)
                    });
                }
                Op::Scale(x, s) => {
                    let k = self.value(*s)[0];
                    let xv = self.value(*x);
                    self.acc(&mut adj, *x, |d| axpy(k, &g, d));
                    self.acc(&mut adj, *s, |d| d[0] += dot(&g, xv));
                }
                Op::Affine(x, slope) => self.acc(&mut adj, *x, |d| axpy(*slope, &g, d)),
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.shape(*b).len() == 1 {
                        // y = A x: dA += g x^T, dx += A^T g
                        self.acc(&mut adj, *a, |d| {
                            for (row, gi) in d.chunks_exact_mut(k).zip(&g) {
                                axpy(*gi, bv, row);
                            }
                        });
                        self.acc(&mut adj, *b, |d| {
                            for (row, gi) in av.chunks_exact(k).zip(&g) {
                                axpy(*gi, row, d);
                            }
                        });
                    } else {
                        let n = self.shape(*b)[1];
                        // dA += G B^T, dB += A^T G
                        self.acc(&mut adj, *a, |d| gemm(m, n, k, &g, (n, 1), bv, (1, n), d));
                        self.acc(&mut adj, *b, |d| gemm(k, m, n, av, (1, k), &g, (n, 1), d));
                    }
                }
                Op::VecMat(v, mat) => {
                    let d_cols = self.shape(*mat)[1];
                    let (vv, mv) = (self.value(*v), self.value(*mat));
                    self.acc(&mut adj, *v, |d| {
                        for (di, row) in d.iter_mut().zip(mv.chunks_exact(d_cols)) {
                            *di += dot(row, &g);
                        }
                    });
                    self.acc(&mut adj, *mat, |d| {
                        for (row, w) in d.chunks_exact_mut(d_cols).zip(vv) {
                            axpy(*w, &g, row);
                        }
                    });
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut adj, *a, |d| axpy(g[0], bv, d));
                    self.acc(&mut adj, *b, |d| axpy(g[0], av, d));
                }
                Op::AddBias(x, b) => {
                    let n = self.shape(*b)[0];
                    self.acc(&mut adj, *x, |d| add_into(d, &g));
                    self.acc(&mut adj, *b, |d| {
                        for row in g.chunks_exact(n) {
                            add_into(d, row);
                        }
                    });
                }
                Op::Tanh(x) => self.acc(&mut adj, *x, |d| {
                    d.iter_mut().zip(&g).zip(y.iter()).for_each(|((d, g), y)| *d += g * (1.0 - y * y))
                }),
                Op::Sigmoid(x) => self.acc(&mut adj, *x, |d| {
                    d.iter_mut().zip(&g).zip(y.iter()).for_each(|((d, g), y)| *d += g * y * (1.0 - y))
                }),
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    self.acc(&mut adj, *x, |d| {
                        d.iter_mut()
                            .zip(&g)
                            .zip(xv)
                            .for_each(|((d, g), x)| if *x > 0.0 { *d += g })
                    })
                }
                Op::Exp(x) => self.acc(&mut adj, *x, |d| {
                    d.iter_mut().zip(&g).zip(y.iter()).for_each(|((d, g), y)| *d += g * y)
                }),
                Op::Ln(x) => {
                    let xv = self.value(*x);
                    self.acc(&mut adj, *x, |d| {
                        d.iter_mut().zip(&g).zip(xv).for_each(|((d, g), x)| *d += g / x)
                    })
                }
                Op::Softmax(x) => {
                    let width = *node.shape.last().expect("non-empty shape");
                    self.acc(&mut adj, *x, |d| {
                        for ((d, g), y) in d
                            .chunks_exact_mut(width)
                            .zip(g.chunks_exact(width))
                            .zip(y.chunks_exact(width))
                        {
                            let gy = dot(g, y);
                            d.iter_mut()
                                .zip(g)
                                .zip(y)
                                .for_each(|((d, g), y)| *d += y * (g - gy));
                        }
                    })
                }
                Op::LogAddExp(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut adj, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * (av[i] - y[i]).exp();
                        }
                    });
                    self.acc(&mut adj, *b, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * (bv[i] - y[i]).exp();
                        }
                    });
                }
                Op::Sum(x) => self.acc(&mut adj, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        self.acc(&mut adj, p, |d| add_into(d, &g[offset..offset + len]));
                        offset += len;
                    }
                }
                Op::Stack(rows) => {
                    let width = node.shape[1];
                    for (r, chunk) in rows.iter().zip(g.chunks_exact(width)) {
                        self.acc(&mut adj, *r, |d| add_into(d, chunk));
                    }
                }
                Op::Slice(x, start) => {
                    let start = *start;
                    self.acc(&mut adj, *x, |d| add_into(&mut d[start..start + g.len()], &g));
                }
                Op::Lookup(table, ids) => {
                    let width = self.shape(*table)[1];
                    self.acc(&mut adj, *table, |d| {
                        for (id, chunk) in ids.iter().zip(g.chunks_exact(width)) {
                            add_into(&mut d[id * width..(id + 1) * width], chunk);
                        }
                    });
                }
                Op::Pick(x, index) => self.acc(&mut adj, *x, |d| d[*index] += g[0]),
                Op::ScatterAdd(x, indices) => self.acc(&mut adj, *x, |d| {
                    for (di, &i) in d.iter_mut().zip(indices) {
                        *di += g[i];
                    }
                }),
                Op::Windows(x, h) => {
                    let k = self.shape(*x)[1];
                    let span = h * k;
                    self.acc(&mut adj, *x, |d| {
                        for (i, chunk) in g.chunks_exact(span).enumerate() {
                            add_into(&mut d[i * k..i * k + span], chunk);
                        }
                    });
                }
                Op::MaxOverTime(x, winners) => self.acc(&mut adj, *x, |d| {
                    for (&w, gi) in winners.iter().zip(&g) {
                        d[w] += gi;
                    }
                }),
            }
        }
        Ok(())
    }

    fn acc(&self, adj: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let buf = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }
}

/// Weights of one LSTM layer bound on a tape: `w` is `[4H, I+H]`, `b` is
/// `[4H]`, gate blocks ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w: Var,
    pub b: Var,
}

/// One step of a standard four-gate LSTM cell. Returns `(h', c')`.
pub fn lstm_cell(tape: &mut Tape<'_>, p: &LstmVars, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let hidden = tape.shape(h)[0];
    let xh = tape.concat(&[x, h])?;
    let z = tape.matmul(p.w, xh)?;
    let z = tape.add(z, p.b)?;
    let zi = tape.slice(z, 0, hidden)?;
    let zf = tape.slice(z, hidden, hidden)?;
    let zg = tape.slice(z, 2 * hidden, hidden)?;
    let zo = tape.slice(z, 3 * hidden, hidden)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let g = tape.tanh(zg)?;
    let o = tape.sigmoid(zo)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next)?;
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `c += A B` with `A: m×k`, `B: k×n`, `c` row-major `m×n`. Strides are
/// `(row, col)` so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: operand lengths are checked above against the strides used.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
