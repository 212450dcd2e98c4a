//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation appends a node holding its value and the indices of its
//! inputs. The reverse sweep in [`Tape::grad`] builds the adjoints out of the
//! same primitive operations, so with `create_graph = true` the returned
//! gradients are ordinary tracked nodes and can be differentiated again.
//! This is what lets the meta-gradient flow through inner SGD steps.
//!
//! Shape mismatches inside primitive ops are programming errors and panic;
//! callers validate user-facing shapes before touching the tape.

use std::sync::atomic::{AtomicU32, Ordering};

use super::matrix::Matrix;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Act {
    Elu,
    /// First derivative of ELU.
    EluGrad,
    /// Second derivative of ELU; closed under differentiation.
    EluGrad2,
    Sigmoid,
    Softplus,
    Exp,
    Tanh,
}

impl Act {
    fn apply(self, x: f64) -> f64 {
        match self {
            Act::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Act::EluGrad => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Act::EluGrad2 => {
                if x > 0.0 {
                    0.0
                } else {
                    x.exp()
                }
            }
            Act::Sigmoid => sigmoid(x),
            Act::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Act::Exp => x.exp(),
            Act::Tanh => x.tanh(),
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { a: usize, scale: f64, shift: f64 },
    Transpose(usize),
    BroadcastRows { a: usize, rows: usize },
    BroadcastCols { a: usize, cols: usize },
    Fill { a: usize, rows: usize, cols: usize },
    SumRows(usize),
    SumCols(usize),
    SumAll(usize),
    Act(usize, Act),
}

impl Op {
    fn parents(&self) -> ([usize; 2], usize) {
        match *self {
            Op::Leaf => ([0, 0], 0),
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => ([a, b], 2),
            Op::Affine { a, .. }
            | Op::Transpose(a)
            | Op::BroadcastRows { a, .. }
            | Op::BroadcastCols { a, .. }
            | Op::Fill { a, .. }
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::SumAll(a)
            | Op::Act(a, _) => ([a, 0], 1),
        }
    }
}

fn compute<'a>(op: &Op, get: impl Fn(usize) -> &'a Matrix) -> Matrix {
    match *op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul { a, b, ta, tb } => get(a)
            .matmul_t(get(b), ta, tb)
            .expect("matmul shape mismatch on tape"),
        Op::Add(a, b) => {
            let (x, y) = (get(a), get(b));
            assert_eq!(x.shape(), y.shape(), "add shape mismatch");
            x.zip_map(y, |p, q| p + q)
        }
        Op::Sub(a, b) => {
            let (x, y) = (get(a), get(b));
            assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
            x.zip_map(y, |p, q| p - q)
        }
        Op::Mul(a, b) => {
            let (x, y) = (get(a), get(b));
            assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
            x.zip_map(y, |p, q| p * q)
        }
        Op::Affine { a, scale, shift } => get(a).map(|v| v * scale + shift),
        Op::Transpose(a) => get(a).transpose(),
        Op::BroadcastRows { a, rows } => {
            let x = get(a);
            assert_eq!(x.rows(), 1, "broadcast_rows expects a row vector");
            let mut data = Vec::with_capacity(rows * x.cols());
            for _ in 0..rows {
                data.extend_from_slice(x.data());
            }
            Matrix::raw(rows, x.cols(), data)
        }
        Op::BroadcastCols { a, cols } => {
            let x = get(a);
            assert_eq!(x.cols(), 1, "broadcast_cols expects a column vector");
            let mut data = Vec::with_capacity(x.rows() * cols);
            for &v in x.data() {
                data.extend(std::iter::repeat_n(v, cols));
            }
            Matrix::raw(x.rows(), cols, data)
        }
        Op::Fill { a, rows, cols } => {
            let x = get(a);
            assert_eq!(x.shape(), (1, 1), "fill expects a scalar");
            Matrix::filled(rows, cols, x.item())
        }
        Op::SumRows(a) => {
            let x = get(a);
            let mut out = vec![0.0; x.cols()];
            for r in 0..x.rows() {
                for (o, v) in out.iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            Matrix::raw(1, x.cols(), out)
        }
        Op::SumCols(a) => {
            let x = get(a);
            let out = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
            Matrix::raw(x.rows(), 1, out)
        }
        Op::SumAll(a) => Matrix::scalar(get(a).sum()),
        Op::Act(a, f) => get(a).map(|v| f.apply(v)),
    }
}

struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Recording of matrix operations supporting nested reverse sweeps.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn var(&self, idx: usize) -> Var {
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::NotOnTape { index: v.idx });
        }
        Ok(())
    }

    fn leaf(&mut self, value: Matrix, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        self.var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        debug_assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Whether the node depends on any differentiable input.
    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.idx].tracked
    }

    fn push(&mut self, op: Op) -> Var {
        let value = compute(&op, |i| &self.nodes[i].value);
        let (ps, np) = op.parents();
        let tracked = self.recording && ps[..np].iter().any(|&p| self.nodes[p].tracked);
        self.nodes.push(Node {
            value,
            op: if tracked { op } else { Op::Leaf },
            tracked,
        });
        self.var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` with optional transposition of either side.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        self.push(Op::MatMul { a: a.idx, b: b.idx, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a.idx, b.idx))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a.idx, b.idx))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a.idx, b.idx))
    }

    /// `a * scale + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.push(Op::Affine { a: a.idx, scale, shift })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.push(Op::Transpose(a.idx))
    }

    /// Repeats a `1 x c` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        self.push(Op::BroadcastRows { a: a.idx, rows })
    }

    /// Repeats an `r x 1` column `cols` times.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        self.push(Op::BroadcastCols { a: a.idx, cols })
    }

    pub fn fill(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        self.push(Op::Fill { a: a.idx, rows, cols })
    }

    /// Column sums as a `1 x c` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.push(Op::SumRows(a.idx))
    }

    /// Row sums as an `r x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        self.push(Op::SumCols(a.idx))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.push(Op::SumAll(a.idx))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.push(Op::Act(a.idx, Act::Elu))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push(Op::Act(a.idx, Act::Sigmoid))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.push(Op::Act(a.idx, Act::Softplus))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Act(a.idx, Act::Exp))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Act(a.idx, Act::Tanh))
    }

    /// `x * w + b` with `b` a `1 x out` row broadcast over the batch.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let rows = self.value(x).rows();
        let xw = self.matmul(x, w);
        let bb = self.broadcast_rows(b, rows);
        self.add(xw, bb)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the adjoints are recorded as tracked nodes, so any
    /// quantity built from them can be differentiated by a later call.
    /// Inputs that `output` does not depend on get an untracked zero.
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        let (r, c) = self.shape(output);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarOutput { rows: r, cols: c });
        }

        let end = output.idx + 1;
        let lo = wrt.iter().map(|w| w.idx).min().unwrap_or(end).min(end);
        // Nodes in lo..end that lie on a path from some wrt node.
        let mut dep = vec![false; end - lo];
        for w in wrt {
            if w.idx < end && self.nodes[w.idx].tracked {
                dep[w.idx - lo] = true;
            }
        }
        for i in lo..end {
            if dep[i - lo] || !self.nodes[i].tracked {
                continue;
            }
            let (ps, np) = self.nodes[i].op.parents();
            if ps[..np].iter().any(|&p| p >= lo && dep[p - lo]) {
                dep[i - lo] = true;
            }
        }

        let prev = self.recording;
        self.recording = create_graph;
        let mut adj: Vec<Option<Var>> = vec![None; end - lo];
        if end > lo && dep[output.idx - lo] {
            adj[output.idx - lo] = Some(self.constant(Matrix::scalar(1.0)));
        }

        for i in (lo..end).rev() {
            let Some(g) = adj[i - lo] else { continue };
            let op = self.nodes[i].op;
            let need = |p: usize| p >= lo && dep[p - lo];
            let node = self.var(i);
            let mut contrib: [(usize, Option<Var>); 2] = [(0, None), (0, None)];
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b, ta, tb } => {
                    if need(a) {
                        let vb = self.var(b);
                        let ga = if ta {
                            self.matmul_t(vb, g, tb, true)
                        } else {
                            self.matmul_t(g, vb, false, !tb)
                        };
                        contrib[0] = (a, Some(ga));
                    }
                    if need(b) {
                        let va = self.var(a);
                        let gb = if tb {
                            self.matmul_t(g, va, true, ta)
                        } else {
                            self.matmul_t(va, g, !ta, false)
                        };
                        contrib[1] = (b, Some(gb));
                    }
                }
                Op::Add(a, b) => {
                    contrib[0] = (a, need(a).then_some(g));
                    contrib[1] = (b, need(b).then_some(g));
                }
                Op::Sub(a, b) => {
                    contrib[0] = (a, need(a).then_some(g));
                    if need(b) {
                        contrib[1] = (b, Some(self.scale(g, -1.0)));
                    }
                }
                Op::Mul(a, b) => {
                    if need(a) {
                        let vb = self.var(b);
                        contrib[0] = (a, Some(self.mul(g, vb)));
                    }
                    if need(b) {
                        let va = self.var(a);
                        contrib[1] = (b, Some(self.mul(g, va)));
                    }
                }
                Op::Affine { a, scale, .. } => {
                    if need(a) {
                        contrib[0] = (a, Some(self.scale(g, scale)));
                    }
                }
                Op::Transpose(a) => {
                    if need(a) {
                        contrib[0] = (a, Some(self.transpose(g)));
                    }
                }
                Op::BroadcastRows { a, .. } => {
                    if need(a) {
                        contrib[0] = (a, Some(self.sum_rows(g)));
                    }
                }
                Op::BroadcastCols { a, .. } => {
                    if need(a) {
                        contrib[0] = (a, Some(self.sum_cols(g)));
                    }
                }
                Op::Fill { a, .. } => {
                    if need(a) {
                        contrib[0] = (a, Some(self.sum_all(g)));
                    }
                }
                Op::SumRows(a) => {
                    if need(a) {
                        let rows = self.nodes[a].value.rows();
                        contrib[0] = (a, Some(self.broadcast_rows(g, rows)));
                    }
                }
                Op::SumCols(a) => {
                    if need(a) {
                        let cols = self.nodes[a].value.cols();
                        contrib[0] = (a, Some(self.broadcast_cols(g, cols)));
                    }
                }
                Op::SumAll(a) => {
                    if need(a) {
                        let (r, c) = self.nodes[a].value.shape();
                        contrib[0] = (a, Some(self.fill(g, r, c)));
                    }
                }
                Op::Act(a, f) => {
                    if need(a) {
                        let va = self.var(a);
                        let local = match f {
                            Act::Elu => self.push(Op::Act(a, Act::EluGrad)),
                            Act::EluGrad => self.push(Op::Act(a, Act::EluGrad2)),
                            Act::EluGrad2 | Act::Exp => node,
                            Act::Sigmoid => {
                                let one_minus = self.affine(node, -1.0, 1.0);
                                self.mul(node, one_minus)
                            }
                            Act::Softplus => self.sigmoid(va),
                            Act::Tanh => {
                                let sq = self.square(node);
                                self.affine(sq, -1.0, 1.0)
                            }
                        };
                        contrib[0] = (a, Some(self.mul(g, local)));
                    }
                }
            }
            for (p, c) in contrib {
                let Some(c) = c else { continue };
                let slot = &mut adj[p - lo];
                *slot = Some(match *slot {
                    None => c,
                    Some(prev) => self.add(prev, c),
                });
            }
        }
        self.recording = prev;

        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.idx.wrapping_sub(lo)).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(*w);
                    self.constant(Matrix::zeros(r, c))
                }
            })
            .collect())
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                op => compute(&op, |i| &out[i]),
            };
            out.push(v);
        }
        out
    }

    /// True when [`Tape::replay`] reproduces every recorded value bit for bit.
    pub fn replay_matches(&self) -> bool {
        self.replay().iter().zip(&self.nodes).all(|(r, n)| {
            r.shape() == n.value.shape()
                && r.data().iter().zip(n.value.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }
}
