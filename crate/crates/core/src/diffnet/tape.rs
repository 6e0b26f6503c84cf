//! Reverse-mode differentiation over row-major matrices.
//!
//! Every operation appends a node holding its forward value; `backward`
//! replays the nodes in reverse, accumulating vector-Jacobian products.
//! Parameter leaves push their gradients into the owning [`ParamStore`].

use crate::error::{LexError, Result};

use super::{ParamId, ParamStore, Real};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    BroadcastCol(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    MulConst(Var, Vec<T>),
    Neg(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    LogAddExp(Var, Var),
    ClampMin(Var, T),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    MaskedLseRows(Var, Vec<T>),
    SumAll(Var),
    SumRows(Var),
    Gather(Var, Vec<usize>),
    RepeatRows(Var, usize),
    Reshape(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    rows: usize,
    cols: usize,
    value: Vec<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn logaddexp<T: Real>(a: T, b: T) -> T {
    let m = a.max(b);
    if m == T::neg_infinity() {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn row_softmax<T: Real>(row: &[T], out: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        s = s + *o;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

fn row_lse<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op<T>, rows: usize, cols: usize, value: Vec<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(LexError::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    fn check_len(rows: usize, cols: usize, len: usize) -> Result<()> {
        if rows * cols != len {
            return Err(LexError::Dimension(format!(
                "{rows}x{cols} leaf given {len} values"
            )));
        }
        Ok(())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        Self::check_len(rows, cols, data.len())?;
        Ok(self.push(Op::Leaf, rows, cols, data, false))
    }

    /// Leaf whose gradient is retained after `backward` (see [`Tape::grad`]).
    pub fn variable(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        Self::check_len(rows, cols, data.len())?;
        Ok(self.push(Op::Leaf, rows, cols, data, true))
    }

    /// Copies a stored parameter onto the tape. Frozen parameters behave as
    /// constants; trainable ones accumulate into the store on `backward`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        let t = store.tensor(id);
        let (rows, cols) = t.as_matrix_dims();
        let value = t.data().to_vec();
        if trainable {
            self.push(Op::Param(id), rows, cols, value, true)
        } else {
            self.push(Op::Leaf, rows, cols, value, false)
        }
    }

    /// Stop-gradient copy of `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).to_vec();
        self.push(Op::Leaf, r, c, v, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(LexError::Dimension(format!(
                "matmul {m}x{k} by {k2}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), m, n, out, ng))
    }

    /// Adds a 1×c row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(LexError::Dimension(format!(
                "add_row: {r}x{c} with {:?}",
                self.dims(row)
            )));
        }
        let b = self.value(row);
        let out: Vec<T> = self
            .value(a)
            .chunks(c)
            .flat_map(|x| x.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Op::AddRow(a, row), r, c, out, ng))
    }

    fn check_col(&self, a: Var, col: Var, what: &str) -> Result<(usize, usize)> {
        let (r, c) = self.dims(a);
        if self.dims(col) != (r, 1) {
            return Err(LexError::Dimension(format!(
                "{what}: {r}x{c} with {:?}",
                self.dims(col)
            )));
        }
        Ok((r, c))
    }

    /// Adds an r×1 column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.check_col(a, col, "add_col")?;
        let cv = self.value(col);
        let out: Vec<T> = self
            .value(a)
            .chunks(c)
            .zip(cv)
            .flat_map(|(x, &s)| x.iter().map(move |&x| x + s))
            .collect();
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(Op::AddCol(a, col), r, c, out, ng))
    }

    /// Scales row i of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.check_col(a, col, "mul_col")?;
        let cv = self.value(col);
        let out: Vec<T> = self
            .value(a)
            .chunks(c)
            .zip(cv)
            .flat_map(|(x, &s)| x.iter().map(move |&x| x * s))
            .collect();
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(Op::MulCol(a, col), r, c, out, ng))
    }

    /// Repeats an r×1 column into an r×cols matrix.
    pub fn broadcast_col(&mut self, col: Var, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(col);
        if c != 1 {
            return Err(LexError::Dimension(format!("broadcast_col on {r}x{c}")));
        }
        let out: Vec<T> = self
            .value(col)
            .iter()
            .flat_map(|&s| std::iter::repeat_n(s, cols))
            .collect();
        let ng = self.ng(col);
        Ok(self.push(Op::BroadcastCol(col), r, cols, out, ng))
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.check_same(a, b, what)?;
        let (r, c) = self.dims(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(op, r, c, out, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise log(exp(a) + exp(b)).
    pub fn logaddexp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "logaddexp", logaddexp, Op::LogAddExp(a, b))
    }

    fn map_op(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(op, r, c, out, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.map_op(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.map_op(a, |x| x + s, Op::Shift(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.map_op(a, |x| -x, Op::Neg(a))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, k: Vec<T>) -> Result<Var> {
        let (r, c) = self.dims(a);
        Self::check_len(r, c, k.len())?;
        let out = self.value(a).iter().zip(&k).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a);
        Ok(self.push(Op::MulConst(a, k), r, c, out, ng))
    }

    /// Elementwise sum with a constant of the same shape.
    pub fn add_const(&mut self, a: Var, k: &[T]) -> Result<Var> {
        let (r, c) = self.dims(a);
        Self::check_len(r, c, k.len())?;
        let out = self.value(a).iter().zip(k).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a);
        Ok(self.push(Op::Shift(a), r, c, out, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_op(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map_op(a, T::ln, Op::Log(a))
    }

    /// Elementwise log(1 + exp(a)), stable for large |a|.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map_op(a, softplus, Op::Softplus(a))
    }

    /// Elementwise max(a, lo); no gradient flows through clamped entries.
    pub fn clamp_min(&mut self, a: Var, lo: T) -> Var {
        self.map_op(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![T::zero(); r * c];
        for (row, o) in self.value(a).chunks(c).zip(out.chunks_mut(c)) {
            row_softmax(row, o);
        }
        let ng = self.ng(a);
        self.push(Op::SoftmaxRows(a), r, c, out, ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out: Vec<T> = self
            .value(a)
            .chunks(c)
            .flat_map(|row| {
                let l = row_lse(row);
                row.iter().map(move |&x| x - l)
            })
            .collect();
        let ng = self.ng(a);
        self.push(Op::LogSoftmaxRows(a), r, c, out, ng)
    }

    /// Row-wise log-sum-exp, producing an r×1 column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).chunks(c).map(row_lse).collect();
        let ng = self.ng(a);
        self.push(Op::LogSumExpRows(a), r, 1, out, ng)
    }

    /// Row-wise log-sum-exp restricted to entries where `mask` is non-zero.
    pub fn masked_logsumexp_rows(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        let (r, c) = self.dims(a);
        Self::check_len(r, c, mask.len())?;
        let out = self
            .value(a)
            .chunks(c)
            .zip(mask.chunks(c))
            .map(|(row, m)| {
                let mx = row
                    .iter()
                    .zip(m)
                    .filter(|(_, &m)| m > T::zero())
                    .map(|(&x, _)| x)
                    .fold(T::neg_infinity(), T::max);
                if mx == T::neg_infinity() {
                    return mx;
                }
                mx + row
                    .iter()
                    .zip(m)
                    .filter(|(_, &m)| m > T::zero())
                    .map(|(&x, _)| (x - mx).exp())
                    .sum::<T>()
                    .ln()
            })
            .collect();
        let ng = self.ng(a);
        Ok(self.push(Op::MaskedLseRows(a, mask), r, 1, out, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(Op::SumAll(a), 1, 1, vec![s], ng)
    }

    /// Row sums as an r×1 column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).chunks(c).map(|x| x.iter().copied().sum()).collect();
        let ng = self.ng(a);
        self.push(Op::SumRows(a), r, 1, out, ng)
    }

    /// Picks column `idx[i]` from row i, producing an r×1 column.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(LexError::Dimension(format!(
                "gather: {} indices into {r}x{c}",
                idx.len()
            )));
        }
        let v = self.value(a);
        let out = idx.iter().enumerate().map(|(i, &j)| v[i * c + j]).collect();
        let ng = self.ng(a);
        Ok(self.push(Op::Gather(a, idx), r, 1, out, ng))
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let (r, c) = self.dims(a);
        let out: Vec<T> = self
            .value(a)
            .chunks(c)
            .flat_map(|row| std::iter::repeat_n(row, times).flatten().copied())
            .collect();
        let ng = self.ng(a);
        self.push(Op::RepeatRows(a, times), r * times, c, out, ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r * c != rows * cols {
            return Err(LexError::Dimension(format!(
                "reshape {r}x{c} to {rows}x{cols}"
            )));
        }
        let v = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(Op::Reshape(a), rows, cols, v, ng))
    }

    /// Forward value `hard`, backward as if the value were `relaxed`.
    pub fn straight_through(&mut self, hard: Vec<T>, relaxed: Var) -> Result<Var> {
        let (r, c) = self.dims(relaxed);
        Self::check_len(r, c, hard.len())?;
        let ng = self.ng(relaxed);
        Ok(self.push(Op::StraightThrough(relaxed), r, c, hard, ng))
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients to
    /// `store`. Every parameter in the store ends with a gradient buffer,
    /// zero-filled when the parameter does not reach `loss`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.dims(loss) != (1, 1) {
            return Err(LexError::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(loss)
            )));
        }
        store.ensure_grads();
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            let g = match if is_leaf { grads[i].clone() } else { grads[i].take() } {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads, store);
            if is_leaf {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>], store: &mut ParamStore<T>) {
        let node = &self.nodes[i];
        let c = node.cols;
        let y = &node.value;
        let nodes = &self.nodes;

        // Accumulates into the gradient buffer of `v` if it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let n = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.as_slice();

        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let pg = store.grad_buffer(*id);
                for (p, &x) in pg.iter_mut().zip(g) {
                    *p = *p + x;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let n = nodes[b.0].cols;
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, bv, 1, n as isize, T::one(), ga, k as isize, 1)
                });
                acc(*b, &mut |gb| {
                    T::gemm(k, m, n, T::one(), av, 1, k as isize, g, n as isize, 1, T::one(), gb, n as isize, 1)
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*row, &mut |gb| {
                    for chunk in g.chunks(c) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::AddCol(a, col) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*col, &mut |gc| {
                    for (o, chunk) in gc.iter_mut().zip(g.chunks(c)) {
                        *o = *o + chunk.iter().copied().sum();
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (val(*a), val(*col));
                acc(*a, &mut |ga| {
                    for ((o, gi), &s) in ga.chunks_mut(c).zip(g.chunks(c)).zip(cv) {
                        for (o, &gi) in o.iter_mut().zip(gi) {
                            *o = *o + gi * s;
                        }
                    }
                });
                acc(*col, &mut |gc| {
                    for ((o, gi), ai) in gc.iter_mut().zip(g.chunks(c)).zip(av.chunks(c)) {
                        *o = *o + gi.iter().zip(ai).map(|(&x, &y)| x * y).sum();
                    }
                });
            }
            Op::BroadcastCol(col) => {
                acc(*col, &mut |gc| {
                    for (o, chunk) in gc.iter_mut().zip(g.chunks(c)) {
                        *o = *o + chunk.iter().copied().sum();
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o = *o - x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| fma_into(ga, g, bv));
                acc(*b, &mut |gb| fma_into(gb, g, av));
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                for (o, &x) in ga.iter_mut().zip(g) {
                    *o = *o + x * *s;
                }
            }),
            Op::Shift(a) | Op::Reshape(a) | Op::StraightThrough(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::MulConst(a, k) => acc(*a, &mut |ga| fma_into(ga, g, k)),
            Op::Neg(a) => acc(*a, &mut |ga| {
                for (o, &x) in ga.iter_mut().zip(g) {
                    *o = *o - x;
                }
            }),
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, &x), &gi) in ga.iter_mut().zip(av).zip(g) {
                        if x > T::zero() {
                            *o = *o + gi;
                        }
                    }
                })
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((o, &s), &gi) in ga.iter_mut().zip(y).zip(g) {
                    *o = *o + gi * s * (T::one() - s);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| fma_into(ga, g, y)),
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, &x), &gi) in ga.iter_mut().zip(av).zip(g) {
                        *o = *o + gi / x;
                    }
                })
            }
            Op::Softplus(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, &x), &gi) in ga.iter_mut().zip(av).zip(g) {
                        *o = *o + gi * sigmoid(x);
                    }
                })
            }
            Op::LogAddExp(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for (((o, &x), &out), &gi) in ga.iter_mut().zip(av).zip(y).zip(g) {
                        if out != T::neg_infinity() {
                            *o = *o + gi * (x - out).exp();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (((o, &x), &out), &gi) in gb.iter_mut().zip(bv).zip(y).zip(g) {
                        if out != T::neg_infinity() {
                            *o = *o + gi * (x - out).exp();
                        }
                    }
                });
            }
            Op::ClampMin(a, lo) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, &x), &gi) in ga.iter_mut().zip(av).zip(g) {
                        if x > *lo {
                            *o = *o + gi;
                        }
                    }
                })
            }
            Op::SoftmaxRows(a) => acc(*a, &mut |ga| {
                for ((o, yr), gr) in ga.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in o.iter_mut().zip(yr).zip(gr) {
                        *o = *o + p * (q - dot);
                    }
                }
            }),
            Op::LogSoftmaxRows(a) => acc(*a, &mut |ga| {
                for ((o, yr), gr) in ga.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let gs: T = gr.iter().copied().sum();
                    for ((o, &ly), &q) in o.iter_mut().zip(yr).zip(gr) {
                        *o = *o + q - ly.exp() * gs;
                    }
                }
            }),
            Op::LogSumExpRows(a) => {
                let av = val(*a);
                let ca = nodes[a.0].cols;
                acc(*a, &mut |ga| {
                    for (((o, xr), &l), &gi) in ga.chunks_mut(ca).zip(av.chunks(ca)).zip(y).zip(g) {
                        if l == T::neg_infinity() {
                            continue;
                        }
                        for (o, &x) in o.iter_mut().zip(xr) {
                            *o = *o + gi * (x - l).exp();
                        }
                    }
                })
            }
            Op::MaskedLseRows(a, mask) => {
                let av = val(*a);
                let ca = nodes[a.0].cols;
                acc(*a, &mut |ga| {
                    for ((((o, xr), mr), &l), &gi) in ga
                        .chunks_mut(ca)
                        .zip(av.chunks(ca))
                        .zip(mask.chunks(ca))
                        .zip(y)
                        .zip(g)
                    {
                        if l == T::neg_infinity() {
                            continue;
                        }
                        for ((o, &x), &m) in o.iter_mut().zip(xr).zip(mr) {
                            if m > T::zero() {
                                *o = *o + gi * (x - l).exp();
                            }
                        }
                    }
                })
            }
            Op::SumAll(a) => acc(*a, &mut |ga| {
                for o in ga.iter_mut() {
                    *o = *o + g[0];
                }
            }),
            Op::SumRows(a) => {
                let ca = nodes[a.0].cols;
                acc(*a, &mut |ga| {
                    for (o, &gi) in ga.chunks_mut(ca).zip(g) {
                        for o in o.iter_mut() {
                            *o = *o + gi;
                        }
                    }
                })
            }
            Op::Gather(a, idx) => {
                let ca = nodes[a.0].cols;
                acc(*a, &mut |ga| {
                    for (i, (&j, &gi)) in idx.iter().zip(g).enumerate() {
                        ga[i * ca + j] = ga[i * ca + j] + gi;
                    }
                })
            }
            Op::RepeatRows(a, times) => {
                let times = *times;
                acc(*a, &mut |ga| {
                    for (o, block) in ga.chunks_mut(c).zip(g.chunks(c * times)) {
                        for chunk in block.chunks(c) {
                            add_into(o, chunk);
                        }
                    }
                })
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o = *o + x;
    }
}

fn fma_into<T: Real>(dst: &mut [T], a: &[T], b: &[T]) {
    for ((o, &x), &y) in dst.iter_mut().zip(a).zip(b) {
        *o = *o + x * y;
    }
}

/// Scalar helpers shared with the sampling code.
pub mod scalar {
    use super::Real;

    pub fn sigmoid<T: Real>(x: T) -> T {
        super::sigmoid(x)
    }

    pub fn softplus<T: Real>(x: T) -> T {
        super::softplus(x)
    }

    pub fn logaddexp<T: Real>(a: T, b: T) -> T {
        super::logaddexp(a, b)
    }

    pub fn logsumexp<T: Real>(xs: &[T]) -> T {
        super::row_lse(xs)
    }
}
