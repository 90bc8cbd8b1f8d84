//! Wengert tape: primitive nodes recorded during the forward pass and
//! replayed in exact reverse order by `backward`.
//!
//! Values used more than once receive the sum of all incoming gradient
//! contributions; leaves registered from [`Param`] handles scatter their
//! accumulated gradient back into the persistent tensor at the end of
//! the backward pass.

use super::kernels;
use super::{Param, Tensor};
use crate::real::Real;
use crate::{Error, Result};

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Node<T: Real> {
    Leaf { param: Option<Param<T>> },
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatmulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    ScaleVar { x: Var, s: Var },
    AddRowVec { x: Var, v: Var, rows: usize, cols: usize },
    MulRowVec { x: Var, v: Var, rows: usize, cols: usize },
    // Mask is not stored: masked outputs are exact zeros, so their
    // gradient contribution vanishes on its own.
    SoftmaxRows { x: Var, rows: usize, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, rows: usize, cols: usize },
    Gelu { x: Var },
    Embed { table: Var, ids: Vec<usize>, dim: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, rows: usize, cols: usize },
    L1Norm { x: Var },
    L2Norm { x: Var },
    SumColL2 { x: Var, rows: usize, cols: usize },
    SumRowL2 { x: Var, rows: usize, cols: usize },
    Sum { x: Var },
    SliceCols { x: Var, rows: usize, cols: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    Reshape { x: Var },
}

struct Slot<T: Real> {
    node: Node<T>,
    shape: Vec<usize>,
    data: Vec<T>,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-5;

/// Recording tape. One training context owns one tape at a time; a tape
/// supports a single backward pass.
pub struct Tape<T: Real> {
    slots: Vec<Slot<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { slots: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn push(&mut self, node: Node<T>, shape: Vec<usize>, data: Vec<T>, needs_grad: bool) -> Var {
        self.slots.push(Slot { node, shape, data, needs_grad });
        Var(self.slots.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.slots[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.slots[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        let s = &self.slots[v.0];
        if s.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar, found shape {:?}",
                s.shape
            )));
        }
        Ok(s.data[0])
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let s = &self.slots[v.0];
        Tensor::new(s.shape.clone(), s.data.clone()).expect("tape slot is shape-consistent")
    }

    fn needs(&self, v: Var) -> bool {
        self.slots[v.0].needs_grad
    }

    fn dims2(&self, prim: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.slots[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                primitive: prim,
                detail: format!("expected a matrix, got shape {other:?}"),
            }),
        }
    }

    fn dims1(&self, prim: &'static str, v: Var) -> Result<usize> {
        match self.slots[v.0].shape.as_slice() {
            [n] => Ok(*n),
            other => Err(Error::Shape {
                primitive: prim,
                detail: format!("expected a vector, got shape {other:?}"),
            }),
        }
    }

    // ---- leaves -------------------------------------------------------

    /// Copies a plain tensor onto the tape; gradients never flow out of it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(Node::Leaf { param: None }, t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Registers a parameter leaf; after `backward`, the accumulated
    /// gradient is added into the handle's tensor (when it requires grad).
    pub fn param(&mut self, p: &Param<T>) -> Var {
        let (shape, data, rg) = {
            let t = p.borrow();
            (t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
        };
        self.push(Node::Leaf { param: Some(p.clone()) }, shape, data, rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar_const(&mut self, v: T) -> Var {
        self.push(Node::Leaf { param: None }, vec![], vec![v], false)
    }

    /// Identity matrix leaf, used by penalty terms.
    pub fn identity(&mut self, n: usize) -> Var {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        self.push(Node::Leaf { param: None }, vec![n, n], data, false)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                primitive: "matmul",
                detail: format!("[{m}x{k}] * [{k2}x{n}]: inner dimensions differ"),
            });
        }
        let data = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Node::Matmul { a, b, m, k, n }, vec![m, n], data, ng))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::Shape {
                primitive: "matmul_nt",
                detail: format!("[{m}x{k}] * [{n}x{k2}]^T: inner dimensions differ"),
            });
        }
        let data = kernels::matmul_nt(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Node::MatmulNt { a, b, m, k, n }, vec![m, n], data, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("transpose", x)?;
        let data = kernels::transpose(self.value(x), rows, cols);
        let ng = self.needs(x);
        Ok(self.push(Node::Transpose { x, rows, cols }, vec![cols, rows], data, ng))
    }

    // ---- elementwise ---------------------------------------------------

    fn same_shape(&self, prim: &'static str, a: Var, b: Var) -> Result<()> {
        if self.slots[a.0].shape != self.slots[b.0].shape {
            return Err(Error::Shape {
                primitive: prim,
                detail: format!(
                    "{:?} vs {:?}",
                    self.slots[a.0].shape, self.slots[b.0].shape
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.slots[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Node::Add { a, b }, shape, data, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let shape = self.slots[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Node::Sub { a, b }, shape, data, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.slots[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Node::Mul { a, b }, shape, data, ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data: Vec<T> = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.slots[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(Node::Scale { x, c }, shape, data, ng)
    }

    /// Multiplies every entry of `x` by the scalar variable `s`.
    pub fn scale_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.slots[s.0].data.len() != 1 {
            return Err(Error::Shape {
                primitive: "scale_var",
                detail: format!("scale must be scalar, got {:?}", self.slots[s.0].shape),
            });
        }
        let sv = self.slots[s.0].data[0];
        let data: Vec<T> = self.value(x).iter().map(|&v| v * sv).collect();
        let shape = self.slots[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(Node::ScaleVar { x, s }, shape, data, ng))
    }

    /// Row-broadcast addition: `x[r,c] + v[c]` (bias add).
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("add_row_vec", x)?;
        let vc = self.dims1("add_row_vec", v)?;
        if vc != cols {
            return Err(Error::Shape {
                primitive: "add_row_vec",
                detail: format!("matrix [{rows}x{cols}] vs vector [{vc}]"),
            });
        }
        let vv = self.value(v).to_vec();
        let mut data = self.value(x).to_vec();
        for row in data.chunks_exact_mut(cols) {
            for (o, &b) in row.iter_mut().zip(&vv) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(v);
        Ok(self.push(Node::AddRowVec { x, v, rows, cols }, vec![rows, cols], data, ng))
    }

    /// Row-broadcast elementwise multiply: `x[r,c] ⊙ v[c]`. Equivalent to
    /// `x · diag(v)`, so it also serves as the diagonal-scale primitive.
    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("mul_row_vec", x)?;
        let vc = self.dims1("mul_row_vec", v)?;
        if vc != cols {
            return Err(Error::Shape {
                primitive: "mul_row_vec",
                detail: format!("matrix [{rows}x{cols}] vs vector [{vc}]"),
            });
        }
        let vv = self.value(v).to_vec();
        let mut data = self.value(x).to_vec();
        for row in data.chunks_exact_mut(cols) {
            for (o, &b) in row.iter_mut().zip(&vv) {
                *o *= b;
            }
        }
        let ng = self.needs(x) || self.needs(v);
        Ok(self.push(Node::MulRowVec { x, v, rows, cols }, vec![rows, cols], data, ng))
    }

    /// `x · diag(s)`: scales column j of `x` by `s[j]`.
    pub fn col_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        self.mul_row_vec(x, s)
    }

    // ---- nonlinearities ------------------------------------------------

    /// Row softmax; `mask[i*cols + j] == false` entries are excluded and
    /// come out as exact zeros.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (rows, cols) = self.dims2("softmax", x)?;
        if let Some(m) = &mask {
            if m.len() != rows * cols {
                return Err(Error::Shape {
                    primitive: "softmax",
                    detail: format!("mask len {} vs {rows}x{cols}", m.len()),
                });
            }
        }
        let data = kernels::softmax_rows(self.value(x), rows, cols, mask.as_deref());
        let ng = self.needs(x);
        Ok(self.push(Node::SoftmaxRows { x, rows, cols }, vec![rows, cols], data, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("layer_norm", x)?;
        let gc = self.dims1("layer_norm", gamma)?;
        let bc = self.dims1("layer_norm", beta)?;
        if gc != cols || bc != cols {
            return Err(Error::Shape {
                primitive: "layer_norm",
                detail: format!("x [{rows}x{cols}] vs gamma [{gc}], beta [{bc}]"),
            });
        }
        let g = self.value(gamma).to_vec();
        let b = self.value(beta).to_vec();
        let mut data = self.value(x).to_vec();
        for row in data.chunks_exact_mut(cols) {
            let (mu, sigma) = row_stats(row);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) / sigma * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Node::LayerNorm { x, gamma, beta, rows, cols }, vec![rows, cols], data, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.slots[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(Node::Gelu { x }, shape, data, ng)
    }

    // ---- lookups and reductions -----------------------------------------

    /// Gathers rows of `table[vocab, dim]` at `ids`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.dims2("embed", table)?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Validation(format!(
                "token id {bad} out of range for vocab {vocab}"
            )));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            Node::Embed { table, ids: ids.to_vec(), dim },
            vec![ids.len(), dim],
            data,
            ng,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`; scalar output.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(Error::Shape {
                primitive: "cross_entropy",
                detail: format!("{} targets for {rows} rows", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Validation(format!(
                "target id {bad} out of range for vocab {cols}"
            )));
        }
        let probs = kernels::softmax_rows(self.value(logits), rows, cols, None);
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            total -= probs[i * cols + t].max(T::min_positive_value()).ln();
        }
        let loss = total / T::from_f64(rows as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            Node::CrossEntropy { logits, targets: targets.to_vec(), rows, cols },
            vec![],
            vec![loss],
            ng,
        ))
    }

    /// Sum of absolute values; subgradient at zero is zero.
    pub fn l1_norm(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().fold(T::zero(), |acc, &v| acc + v.abs());
        let ng = self.needs(x);
        self.push(Node::L1Norm { x }, vec![], vec![total], ng)
    }

    pub fn l2_norm(&mut self, x: Var) -> Var {
        let sq = self.value(x).iter().fold(T::zero(), |acc, &v| acc + v * v);
        let ng = self.needs(x);
        self.push(Node::L2Norm { x }, vec![], vec![sq.sqrt()], ng)
    }

    /// Sum over columns j of the Euclidean norm of column j.
    pub fn sum_col_l2(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("sum_col_l2", x)?;
        let xv = self.value(x);
        let mut total = T::zero();
        for j in 0..cols {
            let mut sq = T::zero();
            for i in 0..rows {
                let v = xv[i * cols + j];
                sq += v * v;
            }
            total += sq.sqrt();
        }
        let ng = self.needs(x);
        Ok(self.push(Node::SumColL2 { x, rows, cols }, vec![], vec![total], ng))
    }

    /// Sum over rows i of the Euclidean norm of row i.
    pub fn sum_row_l2(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("sum_row_l2", x)?;
        let xv = self.value(x);
        let mut total = T::zero();
        for row in xv.chunks_exact(cols) {
            let sq = row.iter().fold(T::zero(), |acc, &v| acc + v * v);
            total += sq.sqrt();
        }
        let ng = self.needs(x);
        Ok(self.push(Node::SumRowL2 { x, rows, cols }, vec![], vec![total], ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().fold(T::zero(), |acc, &v| acc + v);
        let ng = self.needs(x);
        self.push(Node::Sum { x }, vec![], vec![total], ng)
    }

    // ---- shape surgery ---------------------------------------------------

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_cols", x)?;
        if start + len > cols {
            return Err(Error::Shape {
                primitive: "slice_cols",
                detail: format!("slice {start}..{} of {cols} columns", start + len),
            });
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&xv[i * cols + start..i * cols + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Node::SliceCols { x, rows, cols, start, len },
            vec![rows, len],
            data,
            ng,
        ))
    }

    /// Same data, new shape; the element count must match.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.slots[x.0].data.len() {
            return Err(Error::Shape {
                primitive: "reshape",
                detail: format!(
                    "cannot view {:?} as {shape:?}",
                    self.slots[x.0].shape
                ),
            });
        }
        let data = self.value(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(Node::Reshape { x }, shape, data, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape {
                primitive: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let (rows, _) = self.dims2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != rows {
                return Err(Error::Shape {
                    primitive: "concat_cols",
                    detail: format!("row counts differ: {rows} vs {r}"),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p);
                data.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let parts: Vec<(Var, usize)> = parts.iter().copied().zip(widths).collect();
        Ok(self.push(Node::ConcatCols { parts, rows }, vec![rows, total], data, ng))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass seeded at a scalar output. Gradients land in the
    /// registered [`Param`] leaves; leaves that do not require grad are
    /// left untouched.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.slots[out.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.slots[out.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.slots.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);

        for i in (0..=out.0).rev() {
            if !self.slots[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads);
            if let Node::Leaf { param: Some(p) } = &self.slots[i].node {
                p.borrow_mut().accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let acc = |grads: &mut [Option<Vec<T>>], slots: &[Slot<T>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !slots[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); slots[v.0].data.len()]);
            f(buf);
        };
        let slots = &self.slots;
        match &slots[i].node {
            Node::Leaf { .. } => {}
            Node::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                acc(grads, slots, *a, &mut |buf| {
                    kernels::matmul_nt_acc(g, &slots[b.0].data, buf, m, n, k);
                });
                acc(grads, slots, *b, &mut |buf| {
                    kernels::matmul_tn_acc(&slots[a.0].data, g, buf, m, k, n);
                });
            }
            Node::MatmulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                acc(grads, slots, *a, &mut |buf| {
                    kernels::matmul_acc(g, &slots[b.0].data, buf, m, n, k);
                });
                acc(grads, slots, *b, &mut |buf| {
                    kernels::matmul_tn_acc(g, &slots[a.0].data, buf, m, n, k);
                });
            }
            Node::Transpose { x, rows, cols } => {
                let gt = kernels::transpose(g, *cols, *rows);
                acc(grads, slots, *x, &mut |buf| {
                    for (o, &v) in buf.iter_mut().zip(&gt) {
                        *o += v;
                    }
                });
            }
            Node::Add { a, b } => {
                for v in [a, b] {
                    acc(grads, slots, *v, &mut |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                }
            }
            Node::Sub { a, b } => {
                acc(grads, slots, *a, &mut |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
                acc(grads, slots, *b, &mut |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o -= gv;
                    }
                });
            }
            Node::Mul { a, b } => {
                acc(grads, slots, *a, &mut |buf| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(&slots[b.0].data) {
                        *o += gv * bv;
                    }
                });
                acc(grads, slots, *b, &mut |buf| {
                    for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(&slots[a.0].data) {
                        *o += gv * av;
                    }
                });
            }
            Node::Scale { x, c } => {
                let c = *c;
                acc(grads, slots, *x, &mut |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                });
            }
            Node::ScaleVar { x, s } => {
                let sv = slots[s.0].data[0];
                acc(grads, slots, *x, &mut |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv * sv;
                    }
                });
                acc(grads, slots, *s, &mut |buf| {
                    let mut total = T::zero();
                    for (&gv, &xv) in g.iter().zip(&slots[x.0].data) {
                        total += gv * xv;
                    }
                    buf[0] += total;
                });
            }
            Node::AddRowVec { x, v, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                acc(grads, slots, *x, &mut |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
                acc(grads, slots, *v, &mut |buf| {
                    for i in 0..rows {
                        for (o, &gv) in buf.iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                            *o += gv;
                        }
                    }
                });
            }
            Node::MulRowVec { x, v, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let vv = &slots[v.0].data;
                let xv = &slots[x.0].data;
                acc(grads, slots, *x, &mut |buf| {
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[i * cols + j] += g[i * cols + j] * vv[j];
                        }
                    }
                });
                acc(grads, slots, *v, &mut |buf| {
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[j] += g[i * cols + j] * xv[i * cols + j];
                        }
                    }
                });
            }
            Node::SoftmaxRows { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let y = &slots[i].data;
                acc(grads, slots, *x, &mut |buf| {
                    for r in 0..rows {
                        let y_row = &y[r * cols..(r + 1) * cols];
                        let g_row = &g[r * cols..(r + 1) * cols];
                        let mut dot = T::zero();
                        for (&gv, &yv) in g_row.iter().zip(y_row) {
                            dot += gv * yv;
                        }
                        for j in 0..cols {
                            buf[r * cols + j] += y_row[j] * (g_row[j] - dot);
                        }
                    }
                });
            }
            Node::LayerNorm { x, gamma, beta, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let xv = &slots[x.0].data;
                let gam = &slots[gamma.0].data;
                let inv_cols = T::from_f64(1.0 / cols as f64);
                acc(grads, slots, *beta, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[j] += g[r * cols + j];
                        }
                    }
                });
                acc(grads, slots, *gamma, &mut |buf| {
                    for r in 0..rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let (mu, sigma) = row_stats(row);
                        for j in 0..cols {
                            buf[j] += g[r * cols + j] * (row[j] - mu) / sigma;
                        }
                    }
                });
                acc(grads, slots, *x, &mut |buf| {
                    for r in 0..rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let (mu, sigma) = row_stats(row);
                        let mut mean_dy = T::zero();
                        let mut mean_dy_xhat = T::zero();
                        for j in 0..cols {
                            let xhat = (row[j] - mu) / sigma;
                            let dy = g[r * cols + j] * gam[j];
                            mean_dy += dy;
                            mean_dy_xhat += dy * xhat;
                        }
                        mean_dy *= inv_cols;
                        mean_dy_xhat *= inv_cols;
                        for j in 0..cols {
                            let xhat = (row[j] - mu) / sigma;
                            let dy = g[r * cols + j] * gam[j];
                            buf[r * cols + j] += (dy - mean_dy - xhat * mean_dy_xhat) / sigma;
                        }
                    }
                });
            }
            Node::Gelu { x } => {
                let xv = &slots[x.0].data;
                acc(grads, slots, *x, &mut |buf| {
                    for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *o += gv * kernels::gelu_grad(v);
                    }
                });
            }
            Node::Embed { table, ids, dim } => {
                let dim = *dim;
                acc(grads, slots, *table, &mut |buf| {
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            buf[id * dim + j] += g[t * dim + j];
                        }
                    }
                });
            }
            Node::CrossEntropy { logits, targets, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let probs =
                    kernels::softmax_rows(&slots[logits.0].data, rows, cols, None);
                let scale = g[0] / T::from_f64(rows as f64);
                acc(grads, slots, *logits, &mut |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..cols {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            buf[r * cols + j] += scale * (probs[r * cols + j] - onehot);
                        }
                    }
                });
            }
            Node::L1Norm { x } => {
                let xv = &slots[x.0].data;
                acc(grads, slots, *x, &mut |buf| {
                    for (o, &v) in buf.iter_mut().zip(xv) {
                        let s = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *o += g[0] * s;
                    }
                });
            }
            Node::L2Norm { x } => {
                let norm = slots[i].data[0];
                let xv = &slots[x.0].data;
                acc(grads, slots, *x, &mut |buf| {
                    if norm > T::zero() {
                        for (o, &v) in buf.iter_mut().zip(xv) {
                            *o += g[0] * v / norm;
                        }
                    }
                });
            }
            Node::SumColL2 { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let xv = &slots[x.0].data;
                acc(grads, slots, *x, &mut |buf| {
                    for j in 0..cols {
                        let mut sq = T::zero();
                        for i2 in 0..rows {
                            let v = xv[i2 * cols + j];
                            sq += v * v;
                        }
                        let norm = sq.sqrt();
                        if norm > T::zero() {
                            for i2 in 0..rows {
                                buf[i2 * cols + j] += g[0] * xv[i2 * cols + j] / norm;
                            }
                        }
                    }
                });
            }
            Node::SumRowL2 { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let xv = &slots[x.0].data;
                acc(grads, slots, *x, &mut |buf| {
                    for i2 in 0..rows {
                        let row = &xv[i2 * cols..(i2 + 1) * cols];
                        let sq = row.iter().fold(T::zero(), |a, &v| a + v * v);
                        let norm = sq.sqrt();
                        if norm > T::zero() {
                            for j in 0..cols {
                                buf[i2 * cols + j] += g[0] * row[j] / norm;
                            }
                        }
                    }
                });
            }
            Node::Sum { x } => {
                acc(grads, slots, *x, &mut |buf| {
                    for o in buf.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Node::SliceCols { x, rows, cols, start, len } => {
                let (rows, cols, start, len) = (*rows, *cols, *start, *len);
                acc(grads, slots, *x, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..len {
                            buf[r * cols + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Node::Reshape { x } => {
                acc(grads, slots, *x, &mut |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
            }
            Node::ConcatCols { parts, rows } => {
                let rows = *rows;
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let mut offset = 0;
                for (p, w) in parts {
                    let (p, w) = (*p, *w);
                    acc(grads, slots, p, &mut |buf| {
                        for r in 0..rows {
                            for j in 0..w {
                                buf[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
        }
    }
}

fn row_stats<T: Real>(row: &[T]) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mu = T::zero();
    for &v in row {
        mu += v;
    }
    mu /= n;
    let mut var = T::zero();
    for &v in row {
        let d = v - mu;
        var += d * d;
    }
    var /= n;
    (mu, (var + T::from_f64(LN_EPS)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Param<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Param::trainable(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn matmul_identity_via_tape() {
        let mut tape: Tape<f64> = Tape::new();
        let eye = tape.identity(3);
        let m = tape
            .constant(vec![3, 3], vec![2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 1.0, 7.0])
            .unwrap();
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out), tape.value(m));
    }

    #[test]
    fn matmul_hand_product_2x2() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn grad_of_sum_of_elementwise_product_is_other_factor() {
        let x = Param::trainable(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y_data = vec![5.0, -6.0, 7.0, 0.5];
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.param(&x);
        let yv = tape.constant(vec![2, 2], y_data.clone()).unwrap();
        let prod = tape.mul(xv, yv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        assert_eq!(x.grad_vec(), y_data);
    }

    #[test]
    fn grad_of_sum_ba_with_ones_a_is_row_sums_of_a() {
        // d/dB of sum(B*A) with A[i,j] = 1 gives B-grad[i,k] = sum_j A[k,j].
        let b = Param::trainable(Tensor::new(vec![2, 3], vec![0.3; 6]).unwrap());
        let mut tape: Tape<f64> = Tape::new();
        let bv = tape.param(&b);
        let av = tape.constant(vec![3, 4], vec![1.0; 12]).unwrap();
        let prod = tape.matmul(bv, av).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        assert_eq!(b.grad_vec(), vec![4.0; 6]);
    }

    #[test]
    fn reused_value_accumulates_both_contributions() {
        // loss = sum(x ⊙ x) uses x twice; gradient must be 2x.
        let x = Param::trainable(Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap());
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.param(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(x.grad_vec(), vec![3.0, -4.0, 0.5]);
    }

    #[test]
    fn off_path_param_gets_exactly_zero_gradient() {
        let x = Param::trainable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = Param::trainable(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.param(&x);
        let _uv = tape.param(&unused);
        let loss = tape.sum(xv);
        tape.backward(loss).unwrap();
        assert!(unused.borrow().grad().is_none());
        assert_eq!(unused.grad_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn non_requires_grad_tensor_never_accumulates() {
        let x = Param::new(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(!x.requires_grad());
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.param(&x);
        let loss = tape.sum(xv);
        tape.backward(loss).unwrap();
        assert!(x.borrow().grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1.0; 4]).unwrap();
        let err = tape.backward(a).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn l1_subgradient_at_zero_is_zero() {
        let x = Param::trainable(Tensor::new(vec![3], vec![2.0, 0.0, -3.0]).unwrap());
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.param(&x);
        let loss = tape.l1_norm(xv);
        assert_eq!(tape.scalar_value(loss).unwrap(), 5.0);
        tape.backward(loss).unwrap();
        assert_eq!(x.grad_vec(), vec![1.0, 0.0, -1.0]);
    }

    #[test]
    fn shape_mismatch_names_the_primitive() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "message should name the primitive: {msg}");
        assert!(msg.contains("2x3") || msg.contains("[2, 3]"), "message should carry shapes: {msg}");
    }

    #[test]
    fn quadratic_finite_diff_within_1e8() {
        // loss = x^2 at x = 3: analytic and numeric derivative are both 6.
        let x = Param::trainable(Tensor::new(vec![1], vec![3.0]).unwrap());
        let report = finite_diff_check(
            |with_grad| {
                let mut tape: Tape<f64> = Tape::new();
                let xv = tape.param(&x);
                let sq = tape.mul(xv, xv).unwrap();
                let loss = tape.sum(sq);
                if with_grad {
                    tape.backward(loss)?;
                }
                tape.scalar_value(loss)
            },
            &[("x".into(), x.clone())],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passes(), "max rel err {}", report.max_rel_err);
        assert!((x.grad_vec()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn four_param_network_matches_finite_differences() {
        // y = gelu(a*x + b) * c + d, loss = y^2, all four scalars trainable.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params: Vec<(String, Param<f64>)> = ["a", "b", "c", "d"]
            .iter()
            .map(|n| (n.to_string(), randn(&mut rng, vec![1, 1])))
            .collect();
        let x = 0.7;
        let report = finite_diff_check(
            |with_grad| {
                let mut tape: Tape<f64> = Tape::new();
                let xv = tape.constant(vec![1, 1], vec![x])?;
                let a = tape.param(&params[0].1);
                let b = tape.param(&params[1].1);
                let c = tape.param(&params[2].1);
                let d = tape.param(&params[3].1);
                let ax = tape.matmul(xv, a)?;
                let pre = tape.add(ax, b)?;
                let act = tape.gelu(pre);
                let scaled = tape.mul(act, c)?;
                let y = tape.add(scaled, d)?;
                let sq = tape.mul(y, y)?;
                let loss = tape.sum(sq);
                if with_grad {
                    tape.backward(loss)?;
                }
                tape.scalar_value(loss)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passes(), "max rel err {}", report.max_rel_err);
    }

    /// Every differentiable primitive, finite-difference checked on
    /// randomized shapes up to 8x8.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for round in 0..4 {
            let m = rng.gen_range(2..=8);
            let k = rng.gen_range(2..=8);
            let n = rng.gen_range(2..=8);
            check_primitive(&mut rng, round, "matmul", vec![vec![m, k], vec![k, n]], |t, v| {
                t.matmul(v[0], v[1])
            });
            check_primitive(&mut rng, round, "matmul_nt", vec![vec![m, k], vec![n, k]], |t, v| {
                t.matmul_nt(v[0], v[1])
            });
            check_primitive(&mut rng, round, "transpose", vec![vec![m, n]], |t, v| {
                t.transpose(v[0])
            });
            check_primitive(&mut rng, round, "add", vec![vec![m, n], vec![m, n]], |t, v| {
                t.add(v[0], v[1])
            });
            check_primitive(&mut rng, round, "sub", vec![vec![m, n], vec![m, n]], |t, v| {
                t.sub(v[0], v[1])
            });
            check_primitive(&mut rng, round, "mul", vec![vec![m, n], vec![m, n]], |t, v| {
                t.mul(v[0], v[1])
            });
            check_primitive(&mut rng, round, "scale", vec![vec![m, n]], |t, v| {
                Ok(t.scale(v[0], 1.7))
            });
            check_primitive(&mut rng, round, "scale_var", vec![vec![m, n], vec![]], |t, v| {
                t.scale_var(v[0], v[1])
            });
            check_primitive(&mut rng, round, "add_row_vec", vec![vec![m, n], vec![n]], |t, v| {
                t.add_row_vec(v[0], v[1])
            });
            check_primitive(&mut rng, round, "mul_row_vec", vec![vec![m, n], vec![n]], |t, v| {
                t.mul_row_vec(v[0], v[1])
            });
            check_primitive(&mut rng, round, "softmax", vec![vec![m, n]], |t, v| {
                t.softmax_rows(v[0], None)
            });
            let mask: Vec<bool> = (0..m * n).map(|i| i % n != 1).collect();
            check_primitive(&mut rng, round, "softmax_masked", vec![vec![m, n]], move |t, v| {
                t.softmax_rows(v[0], Some(mask.clone()))
            });
            check_primitive(
                &mut rng,
                round,
                "layer_norm",
                vec![vec![m, n], vec![n], vec![n]],
                |t, v| t.layer_norm(v[0], v[1], v[2]),
            );
            check_primitive(&mut rng, round, "gelu", vec![vec![m, n]], |t, v| Ok(t.gelu(v[0])));
            let ids: Vec<usize> = (0..k).map(|_| rng.gen_range(0..m)).collect();
            check_primitive(&mut rng, round, "embed", vec![vec![m, n]], move |t, v| {
                t.embed(v[0], &ids)
            });
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
            check_primitive(&mut rng, round, "cross_entropy", vec![vec![m, n]], move |t, v| {
                t.cross_entropy(v[0], &targets)
            });
            check_primitive(&mut rng, round, "l1_norm", vec![vec![m, n]], |t, v| {
                Ok(t.l1_norm(v[0]))
            });
            check_primitive(&mut rng, round, "l2_norm", vec![vec![m, n]], |t, v| {
                Ok(t.l2_norm(v[0]))
            });
            check_primitive(&mut rng, round, "sum_col_l2", vec![vec![m, n]], |t, v| {
                t.sum_col_l2(v[0])
            });
            check_primitive(&mut rng, round, "sum_row_l2", vec![vec![m, n]], |t, v| {
                t.sum_row_l2(v[0])
            });
            check_primitive(&mut rng, round, "reshape", vec![vec![m, n]], move |t, v| {
                t.reshape(v[0], vec![n, m])
            });
            let start = rng.gen_range(0..n / 2);
            let len = rng.gen_range(1..=n - start);
            check_primitive(&mut rng, round, "slice_cols", vec![vec![m, n]], move |t, v| {
                t.slice_cols(v[0], start, len)
            });
            check_primitive(
                &mut rng,
                round,
                "concat_cols",
                vec![vec![m, n], vec![m, k]],
                |t, v| t.concat_cols(v),
            );
        }
    }

    fn check_primitive(
        rng: &mut ChaCha8Rng,
        round: usize,
        name: &str,
        shapes: Vec<Vec<usize>>,
        op: impl Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>,
    ) {
        let params: Vec<(String, Param<f64>)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let p = randn(rng, s.clone());
                // Keep L1 inputs away from the non-differentiable point.
                for v in p.borrow_mut().data_mut() {
                    if v.abs() < 0.15 {
                        *v += 0.3 * v.signum() + if *v == 0.0 { 0.3 } else { 0.0 };
                    }
                }
                (format!("{name}.arg{i}"), p)
            })
            .collect();
        // Fixed random weights make the downstream scalar non-degenerate.
        let report = finite_diff_check(
            |with_grad| {
                let mut tape: Tape<f64> = Tape::new();
                let vars: Vec<Var> = params.iter().map(|(_, p)| tape.param(p)).collect();
                let out = op(&mut tape, &vars)?;
                let loss = if tape.value(out).len() == 1 {
                    out
                } else {
                    let w: Vec<f64> =
                        (0..tape.value(out).len()).map(|i| ((i % 7) as f64) * 0.31 - 0.9).collect();
                    let wv = tape.constant(tape.shape(out).to_vec(), w)?;
                    let prod = tape.mul(out, wv)?;
                    tape.sum(prod)
                };
                if with_grad {
                    tape.backward(loss)?;
                }
                tape.scalar_value(loss)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passes(),
            "{name} (round {round}): max rel err {} at {:?}",
            report.max_rel_err,
            report.worst_param
        );
    }
}
