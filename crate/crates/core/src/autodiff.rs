//! Reverse-mode automatic differentiation over dense vectors and matrices.
//!
//! A [`Graph`] is an append-only list of nodes. Every node stores its value
//! and the operation that produced it; parents always have smaller indices
//! than their children, so walking the list backwards is a valid reverse
//! topological order.
//!
//! The operation set is deliberately small: affine maps, elementwise
//! activations, addition, scalar scaling, squaring, summation,
//! concatenation, contiguous slicing, the reparameterized weight
//! `mean + std * noise`, and a scalar node with externally supplied local
//! gradients (used for the assignment-based losses, whose matching is held
//! fixed during backward).

use std::borrow::Cow;
use std::fmt;

use thiserror::Error;

/// Row-major shape. Vectors are `n x 1`, scalars `1 x 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn vector(n: usize) -> Self {
        Shape { rows: n, cols: 1 }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("backward requires a scalar loss, got shape {0}")]
    NotScalar(Shape),
    #[error("data length {len} does not match shape {shape}")]
    BadData { len: usize, shape: Shape },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Elu,
    Identity,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Some(Activation::Relu),
            "elu" => Some(Activation::Elu),
            "identity" | "linear" => Some(Activation::Identity),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(&self, t: f64) -> f64 {
        match self {
            Activation::Relu => {
                if t > 0.0 {
                    t
                } else {
                    0.0
                }
            }
            // alpha = 1
            Activation::Elu => {
                if t >= 0.0 {
                    t
                } else {
                    t.exp() - 1.0
                }
            }
            Activation::Identity => t,
        }
    }

    /// Derivative given the input `t` and output `y = apply(t)`.
    /// ReLU uses 0 as the subgradient at the kink.
    #[inline]
    pub fn derivative(&self, t: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if t >= 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Plain kernels shared by the graph and by the tape-free evaluation paths,
/// so both produce bitwise-identical values.
pub mod kernels {
    use super::Activation;

    /// `out = w * x + b` for a row-major `rows x cols` matrix `w`.
    #[inline]
    pub fn affine(w: &[f64], cols: usize, x: &[f64], b: &[f64], out: &mut [f64]) {
        debug_assert_eq!(w.len(), out.len() * cols);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            *o = acc + b[r];
        }
    }

    /// `out += w * x`.
    #[inline]
    pub fn matvec_add(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            *o += acc;
        }
    }

    #[inline]
    pub fn reparameterize(mean: &[f64], std: &[f64], noise: &[f64], out: &mut [f64]) {
        for (((o, m), s), e) in out.iter_mut().zip(mean).zip(std).zip(noise) {
            *o = m + s * e;
        }
    }

    #[inline]
    pub fn activate(kind: Activation, x: &[f64], out: &mut [f64]) {
        for (o, &t) in out.iter_mut().zip(x) {
            *o = kind.apply(t);
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<'p> {
    Leaf,
    Affine { w: Var, x: Var, b: Var },
    Activation { x: Var, kind: Activation },
    Add(Var, Var),
    Scale { x: Var, factor: f64 },
    Square(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Slice { x: Var, offset: usize },
    Reparameterize { mean: Var, std: Var, noise: Cow<'p, [f64]> },
    External { inputs: Vec<(Var, Vec<f64>)> },
}

#[derive(Debug)]
struct Node<'p> {
    data: Cow<'p, [f64]>,
    shape: Shape,
    op: Op<'p>,
    grad: Option<Vec<f64>>,
}

/// A single-threaded computation graph. Distinct graphs share nothing and
/// may live on different threads.
#[derive(Debug, Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Cow<'p, [f64]>, shape: Shape, op: Op<'p>) -> Var {
        debug_assert_eq!(data.len(), shape.len());
        self.nodes.push(Node {
            data,
            shape,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf (input, parameter copy, or constant).
    pub fn leaf(&mut self, data: Vec<f64>, shape: Shape) -> Result<Var, AutodiffError> {
        if data.len() != shape.len() {
            return Err(AutodiffError::BadData {
                len: data.len(),
                shape,
            });
        }
        Ok(self.push(Cow::Owned(data), shape, Op::Leaf))
    }

    /// Leaf that borrows its values; used for parameters shared by many graphs.
    pub fn borrowed_leaf(&mut self, data: &'p [f64], shape: Shape) -> Result<Var, AutodiffError> {
        if data.len() != shape.len() {
            return Err(AutodiffError::BadData {
                len: data.len(),
                shape,
            });
        }
        Ok(self.push(Cow::Borrowed(data), shape, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Cow::Owned(vec![v]), Shape::SCALAR, Op::Leaf)
    }

    pub fn vector(&mut self, v: Vec<f64>) -> Var {
        let n = v.len();
        self.push(Cow::Owned(v), Shape::vector(n), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// Accumulated gradient (zeros if no backward pass has reached `v`).
    pub fn grad(&self, v: Var) -> Cow<'_, [f64]> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Cow::Borrowed(g.as_slice()),
            None => Cow::Owned(vec![0.0; node.shape.len()]),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// `weights * input + bias`.
    pub fn matvec_affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let ws = self.shape(w);
        let xs = self.shape(x);
        let bs = self.shape(b);
        if xs.cols != 1 || ws.cols != xs.rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "matvec_affine",
                left: ws,
                right: xs,
            });
        }
        if bs != Shape::vector(ws.rows) {
            return Err(AutodiffError::ShapeMismatch {
                op: "matvec_affine",
                left: ws,
                right: bs,
            });
        }
        let mut out = vec![0.0; ws.rows];
        kernels::affine(self.value(w), ws.cols, self.value(x), self.value(b), &mut out);
        Ok(self.push(Cow::Owned(out), Shape::vector(ws.rows), Op::Affine { w, x, b }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let shape = self.shape(x);
        let mut out = vec![0.0; shape.len()];
        kernels::activate(kind, self.value(x), &mut out);
        self.push(Cow::Owned(out), shape, Op::Activation { x, kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                left: sa,
                right: sb,
            });
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(Cow::Owned(out), sa, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let shape = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| v * factor).collect();
        self.push(Cow::Owned(out), shape, Op::Scale { x, factor })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| v * v).collect();
        self.push(Cow::Owned(out), shape, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        self.push(Cow::Owned(vec![s]), Shape::SCALAR, Op::Sum(x))
    }

    /// Stacks vectors (or matrices with equal column counts) vertically.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::BadData {
                len: 0,
                shape: Shape::vector(0),
            });
        };
        let cols = self.shape(first).cols;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.cols != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    left: self.shape(first),
                    right: s,
                });
            }
            rows += s.rows;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(Cow::Owned(out), Shape::matrix(rows, cols), Op::Concat(parts.to_vec())))
    }

    /// Contiguous range of `x`'s row-major buffer starting at `offset`,
    /// viewed with `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: Shape) -> Result<Var, AutodiffError> {
        let sx = self.shape(x);
        if offset + shape.len() > sx.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                left: sx,
                right: shape,
            });
        }
        let out = self.value(x)[offset..offset + shape.len()].to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Slice { x, offset }))
    }

    /// `mean + std * noise`, the reparameterized weight draw. `noise` is a
    /// constant of the graph.
    pub fn reparameterize(
        &mut self,
        mean: Var,
        std: Var,
        noise: Cow<'p, [f64]>,
    ) -> Result<Var, AutodiffError> {
        let (sm, ss) = (self.shape(mean), self.shape(std));
        if sm != ss {
            return Err(AutodiffError::ShapeMismatch {
                op: "reparameterize",
                left: sm,
                right: ss,
            });
        }
        if noise.len() != sm.len() {
            return Err(AutodiffError::BadData {
                len: noise.len(),
                shape: sm,
            });
        }
        let mut out = vec![0.0; sm.len()];
        kernels::reparameterize(self.value(mean), self.value(std), &noise, &mut out);
        Ok(self.push(Cow::Owned(out), sm, Op::Reparameterize { mean, std, noise }))
    }

    /// Scalar node with a known value and known local gradients with respect
    /// to each input. Backward treats the local gradients as constants.
    pub fn external_scalar(
        &mut self,
        value: f64,
        inputs: Vec<(Var, Vec<f64>)>,
    ) -> Result<Var, AutodiffError> {
        for (v, g) in &inputs {
            let s = self.shape(*v);
            if g.len() != s.len() {
                return Err(AutodiffError::BadData { len: g.len(), shape: s });
            }
        }
        Ok(self.push(Cow::Owned(vec![value]), Shape::SCALAR, Op::External { inputs }))
    }

    /// Accumulates d(loss)/d(node) into every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(AutodiffError::NotScalar(shape));
        }
        let n = loss.0 + 1;
        let mut upstream: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        upstream.resize_with(n, || None);
        upstream[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = upstream[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut upstream);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], up: &mut [Option<Vec<f64>>]) {
        fn slot<'a>(up: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
            up[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Affine { w, x, b } => {
                let ws = self.shape(*w);
                let wv = self.value(*w);
                let xv = self.value(*x);
                {
                    let gw = slot(up, *w, ws.len());
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            let row = &mut gw[r * ws.cols..(r + 1) * ws.cols];
                            for (d, &xc) in row.iter_mut().zip(xv) {
                                *d += gr * xc;
                            }
                        }
                    }
                }
                {
                    let gx = slot(up, *x, ws.cols);
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            let row = &wv[r * ws.cols..(r + 1) * ws.cols];
                            for (d, &wc) in gx.iter_mut().zip(row) {
                                *d += gr * wc;
                            }
                        }
                    }
                }
                let gb = slot(up, *b, ws.rows);
                gb.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x);
                let yv = &node.data;
                let gx = slot(up, *x, xv.len());
                for (((d, &gi), &t), &y) in gx.iter_mut().zip(g).zip(xv).zip(yv.iter()) {
                    *d += gi * kind.derivative(t, y);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    let gv = slot(up, *v, g.len());
                    gv.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            Op::Scale { x, factor } => {
                let gx = slot(up, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * factor);
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let gx = slot(up, *x, g.len());
                for ((d, gi), t) in gx.iter_mut().zip(g).zip(xv) {
                    *d += 2.0 * t * gi;
                }
            }
            Op::Sum(x) => {
                let len = self.shape(*x).len();
                let gx = slot(up, *x, len);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p).len();
                    let gp = slot(up, *p, len);
                    gp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(d, gi)| *d += gi);
                    offset += len;
                }
            }
            Op::Slice { x, offset } => {
                let len = self.shape(*x).len();
                let gx = slot(up, *x, len);
                gx[*offset..*offset + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, gi)| *d += gi);
            }
            Op::Reparameterize { mean, std, noise } => {
                {
                    let gm = slot(up, *mean, g.len());
                    gm.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                let gs = slot(up, *std, g.len());
                for ((d, gi), e) in gs.iter_mut().zip(g).zip(noise.iter()) {
                    *d += gi * e;
                }
            }
            Op::External { inputs } => {
                for (v, local) in inputs {
                    let gv = slot(up, *v, local.len());
                    gv.iter_mut().zip(local).for_each(|(d, l)| *d += g[0] * l);
                }
            }
        }
    }
}

/// Maximum over coordinates of `|analytic - central difference| / max(1, |analytic|)`
/// for a scalar function of a parameter vector built on a graph.
pub fn grad_check<F>(f: F, theta: &[f64], h: f64) -> Result<f64, AutodiffError>
where
    F: for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var, AutodiffError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let eval = |t: &[f64]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let v = g.vector(t.to_vec());
        let out = f(&mut g, v)?;
        let val = g.value(out)[0];
        if !val.is_finite() {
            return Err(AutodiffError::NonFinite(format!("f(theta) = {val}")));
        }
        Ok(val)
    };

    let mut g = Graph::new();
    let v = g.vector(theta.to_vec());
    let out = f(&mut g, v)?;
    let val = g.value(out)[0];
    if !val.is_finite() {
        return Err(AutodiffError::NonFinite(format!("f(theta) = {val}")));
    }
    g.backward(out)?;
    let analytic = g.grad(v).into_owned();

    let mut worst: f64 = 0.0;
    let mut t = theta.to_vec();
    for i in 0..theta.len() {
        t[i] = theta[i] + h;
        let fp = eval(&t)?;
        t[i] = theta[i] - h;
        let fm = eval(&t)?;
        t[i] = theta[i];
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
