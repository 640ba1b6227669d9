//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] is an append-only tape: every operation evaluates eagerly and
//! records its inputs, so insertion order is a topological order. [`Graph::backward`]
//! walks the tape once in reverse and returns one adjoint per node; nodes
//! that do not reach the output keep a zero adjoint.

use std::rc::Rc;

use super::tensor::{gelu, gelu_grad, gemm_acc, layer_norm_row, masked_softmax_row, matmul, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `a + row` with `row` a `1 × cols` tensor broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv: Vec<f64> },
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp { a: Var, lo: f64, hi: f64 },
    Slice { a: Var, r0: usize, c0: usize },
    SelectRows(Var, Rc<[usize]>),
    ScatterRows(Var, Rc<[usize]>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Mean over consecutive blocks of `group` rows.
    GroupMean(Var, usize),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar");
        t.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf: a parameter or a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let v = matmul(self.value(a), ta, self.value(b), tb);
        self.push(v, Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((rv.rows, rv.cols), (1, av.cols), "broadcast row shape");
        let mut v = av.clone();
        for r in 0..v.rows {
            for (x, b) in v.row_mut(r).iter_mut().zip(&rv.data) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a))
    }

    /// Row softmax restricted to `mask` (row-major, same shape as `a`).
    pub fn masked_softmax(&mut self, a: Var, mask: Rc<[bool]>) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(mask.len(), v.len(), "mask shape");
        let cols = v.cols;
        for r in 0..v.rows {
            masked_softmax_row(v.row_mut(r), &mask[r * cols..(r + 1) * cols]);
        }
        self.push(v, Op::MaskedSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv = Vec::with_capacity(rows);
        let ones = vec![1.0; cols];
        let zeros = vec![0.0; cols];
        let mut xhat = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let i = layer_norm_row(xv.row(r), &ones, &zeros, xhat.row_mut(r));
            inv.push(i);
            for c in 0..cols {
                *out.at_mut(r, c) = xhat.at(r, c) * g[c] + b[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Clamps into `[lo, hi]`; the adjoint is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp { a, lo, hi })
    }

    /// The `rows × cols` block starting at `(r0, c0)`.
    pub fn slice(&mut self, a: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert!(r0 + rows <= av.rows && c0 + cols <= av.cols, "slice out of range");
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            v.row_mut(r).copy_from_slice(&av.row(r0 + r)[c0..c0 + cols]);
        }
        self.push(v, Op::Slice { a, r0, c0 })
    }

    pub fn select_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let av = self.value(a);
        let mut v = Tensor::zeros(idx.len(), av.cols);
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).copy_from_slice(av.row(r));
        }
        self.push(v, Op::SelectRows(a, idx))
    }

    /// Zero tensor with `rows` rows where row `idx[i]` is row `i` of `a`.
    pub fn scatter_rows(&mut self, a: Var, idx: Rc<[usize]>, rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(idx.len(), av.rows);
        let mut v = Tensor::zeros(rows, av.cols);
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(av.row(i));
        }
        self.push(v, Op::ScatterRows(a, idx))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[c0..c0 + pv.cols].copy_from_slice(pv.row(r));
            }
            c0 += pv.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&pv.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn group_mean(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        assert!(group > 0 && av.rows % group == 0, "group size must divide rows");
        let n = av.rows / group;
        let mut v = Tensor::zeros(n, av.cols);
        for g in 0..n {
            for r in g * group..(g + 1) * group {
                for (o, x) in v.row_mut(g).iter_mut().zip(av.row(r)) {
                    *o += x;
                }
            }
            v.row_mut(g).iter_mut().for_each(|o| *o /= group as f64);
        }
        self.push(v, Op::GroupMean(a, group))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Adjoints of `output` (which must be a scalar) with respect to every
    /// node on the tape.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                // C = op(A) op(B); dop(A) = G op(B)ᵀ, dop(B) = op(A)ᵀ G.
                let mut ga = Tensor::zeros(av.rows, av.cols);
                if *ta {
                    gemm_acc(bv, *tb, g, true, &mut ga);
                } else {
                    gemm_acc(g, false, bv, !*tb, &mut ga);
                }
                accumulate(grads, *a, ga);
                let mut gb = Tensor::zeros(bv.rows, bv.cols);
                if *tb {
                    gemm_acc(g, true, av, *ta, &mut gb);
                } else {
                    gemm_acc(av, !*ta, g, false, &mut gb);
                }
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                accumulate(grads, *a, g.zip_map(bv, |x, y| x / y));
                let out = &node.value;
                let gb = Tensor::from_vec(
                    bv.rows,
                    bv.cols,
                    (0..bv.len()).map(|k| -g.data[k] * out.data[k] / bv.data[k]).collect(),
                );
                accumulate(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                let mut gr = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, x) in gr.data.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate(grads, *row, gr);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::Offset(a) => accumulate(grads, *a, g.clone()),
            Op::MaskedSoftmax(a) => {
                let p = &node.value;
                let mut ga = Tensor::zeros(p.rows, p.cols);
                for r in 0..p.rows {
                    let (pr, gr) = (p.row(r), g.row(r));
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = pr[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv } => {
                let gv = &val(*gain).data;
                let (rows, cols) = xhat.shape();
                let n = cols as f64;
                let mut gx = Tensor::zeros(rows, cols);
                let mut gg = Tensor::zeros(1, cols);
                let mut gbias = Tensor::zeros(1, cols);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let (xh, gr) = (xhat.row(r), g.row(r));
                    for c in 0..cols {
                        dxhat[c] = gr[c] * gv[c];
                        gg.data[c] += gr[c] * xh[c];
                        gbias.data[c] += gr[c];
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = inv[r] / n * (n * dxhat[c] - s1 - xh[c] * s2);
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gain, gg);
                accumulate(grads, *bias, gbias);
            }
            Op::Gelu(a) => accumulate(grads, *a, g.zip_map(val(*a), |x, y| x * gelu_grad(y))),
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Log(a) => accumulate(grads, *a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Square(a) => accumulate(grads, *a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
            Op::Clamp { a, lo, hi } => accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |x, y| if y < *lo || y > *hi { 0.0 } else { x }),
            ),
            Op::Slice { a, r0, c0 } => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..g.rows {
                    ga.row_mut(r0 + r)[*c0..c0 + g.cols].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, ga);
            }
            Op::SelectRows(a, idx) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for (i, &r) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ScatterRows(a, idx) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for (i, &r) in idx.iter().enumerate() {
                    ga.row_mut(i).copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let pc = val(*p).cols;
                    let mut gp = Tensor::zeros(g.rows, pc);
                    for r in 0..g.rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + pc]);
                    }
                    c0 += pc;
                    accumulate(grads, *p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    let pv = val(*p);
                    accumulate(grads, *p, Tensor::from_vec(pv.rows, pv.cols, g.data[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::GroupMean(a, group) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                let w = 1.0 / *group as f64;
                for r in 0..av.rows {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(r / group)) {
                        *o = x * w;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let av = val(*a);
                accumulate(grads, *a, Tensor::filled(av.rows, av.cols, g.data[0]));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The adjoint of `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The adjoint of `v`, materializing zeros for disconnected nodes.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}
