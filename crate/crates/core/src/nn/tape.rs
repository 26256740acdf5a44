//! A small reverse-mode differentiation tape.
//!
//! Every node is a dense row-major matrix; a scalar is a `1 x 1` node. The
//! tape owns one flat parameter vector, and the only differentiable leaves are
//! the affine layers that read from it. Everything else is either a constant
//! or derived from those layers.

use crate::error::{Error, Result};

use super::mlp::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Affine {
        x: Var,
        offset: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Act(Var, Activation),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    RowSqNorm(Var),
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    Log(Var),
    LogSigmoid(Var),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Clone)]
pub struct Tape {
    params: Vec<f64>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new(params: Vec<f64>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// The value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.rows * n.cols != 1 {
            return Err(Error::Mismatch(format!(
                "node is {}x{}, not a scalar",
                n.rows, n.cols
            )));
        }
        Ok(n.value[0])
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(Error::dim("tape constant", rows * cols, value.len()));
        }
        Ok(self.push(rows, cols, value, Op::Const))
    }

    pub fn scalar_constant(&mut self, c: f64) -> Var {
        self.push(1, 1, vec![c], Op::Const)
    }

    /// `x W^T + b` with `W` (`fan_out x fan_in`, row-major) followed by `b`
    /// stored at `offset` in the parameter vector.
    pub fn affine(&mut self, x: Var, offset: usize, fan_in: usize, fan_out: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if cols != fan_in {
            return Err(Error::dim("affine input", fan_in, cols));
        }
        let end = offset + fan_in * fan_out + fan_out;
        if end > self.params.len() {
            return Err(Error::dim("affine parameters", end, self.params.len()));
        }
        let w = &self.params[offset..offset + fan_in * fan_out];
        let b = &self.params[offset + fan_in * fan_out..end];
        let mut out = vec![0.0; rows * fan_out];
        affine_forward(&self.node(x).value, rows, w, b, fan_in, fan_out, &mut out);
        Ok(self.push(
            rows,
            fan_out,
            out,
            Op::Affine {
                x,
                offset,
                fan_in,
                fan_out,
            },
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let (r, c) = self.shape(x);
        let value = self.node(x).value.iter().map(|&v| kind.apply(v)).collect();
        self.push(r, c, value, Op::Act(x, kind))
    }

    fn same_shape(&self, a: Var, b: Var, ctx: &'static str) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::dim(ctx, sa.0 * sa.1, sb.0 * sb.1));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(r, c, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(r, c, value, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().map(|x| k * x).collect();
        self.push(r, c, value, Op::Scale(a, k))
    }

    /// Squared Euclidean norm of every row: `rows x cols -> rows x 1`.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let value = self
            .value(a)
            .chunks(c.max(1))
            .map(|row| row.iter().map(|x| x * x).sum())
            .collect();
        self.push(r, 1, value, Op::RowSqNorm(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(1, 1, vec![m], Op::Mean(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(r, c, value, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().map(|x| x.ln()).collect();
        self.push(r, c, value, Op::Log(a))
    }

    /// `log(sigmoid(x))`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().map(|&x| log_sigmoid(x)).collect();
        self.push(r, c, value, Op::LogSigmoid(a))
    }

    /// Gradient of the scalar node `loss` with respect to the parameter vector.
    pub fn gradient(&self, loss: Var) -> Result<Vec<f64>> {
        let n = self.node(loss);
        if n.rows * n.cols != 1 {
            return Err(Error::Mismatch(format!(
                "tape not finalized to a scalar: gradient requested of a {}x{} node",
                n.rows, n.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut pgrad = vec![0.0; self.params.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Const => {}
                Op::Affine {
                    x,
                    offset,
                    fan_in,
                    fan_out,
                } => {
                    let xv = &self.node(x).value;
                    let rows = node.rows;
                    let (pw, pb) = pgrad[offset..offset + fan_in * fan_out + fan_out]
                        .split_at_mut(fan_in * fan_out);
                    for r in 0..rows {
                        let gr = &g[r * fan_out..(r + 1) * fan_out];
                        let xr = &xv[r * fan_in..(r + 1) * fan_in];
                        for (o, &go) in gr.iter().enumerate() {
                            pb[o] += go;
                            let wrow = &mut pw[o * fan_in..(o + 1) * fan_in];
                            for (wg, &xi) in wrow.iter_mut().zip(xr) {
                                *wg += go * xi;
                            }
                        }
                    }
                    if !matches!(self.node(x).op, Op::Const) {
                        let w = &self.params[offset..offset + fan_in * fan_out];
                        let mut gx = vec![0.0; rows * fan_in];
                        for r in 0..rows {
                            let gr = &g[r * fan_out..(r + 1) * fan_out];
                            let gxr = &mut gx[r * fan_in..(r + 1) * fan_in];
                            for (o, &go) in gr.iter().enumerate() {
                                for (gxi, &wi) in
                                    gxr.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in])
                                {
                                    *gxi += go * wi;
                                }
                            }
                        }
                        accumulate(&mut grads, x, gx);
                    }
                }
                Op::Act(x, kind) => {
                    let xv = &self.node(x).value;
                    let gx = zip_map(&g, xv, |gi, xi| gi * kind.derivative(xi));
                    accumulate(&mut grads, x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, g.iter().map(|x| -x).collect());
                    accumulate(&mut grads, a, g);
                }
                Op::Scale(a, k) => {
                    accumulate(&mut grads, a, g.iter().map(|x| k * x).collect());
                }
                Op::RowSqNorm(a) => {
                    let an = self.node(a);
                    let c = an.cols;
                    let gx = an
                        .value
                        .iter()
                        .enumerate()
                        .map(|(k, &x)| 2.0 * x * g[k / c])
                        .collect();
                    accumulate(&mut grads, a, gx);
                }
                Op::Sum(a) => {
                    let len = self.node(a).value.len();
                    accumulate(&mut grads, a, vec![g[0]; len]);
                }
                Op::Mean(a) => {
                    let len = self.node(a).value.len();
                    accumulate(&mut grads, a, vec![g[0] / len as f64; len]);
                }
                Op::Sigmoid(a) => {
                    let gx = zip_map(&g, &node.value, |gi, s| gi * s * (1.0 - s));
                    accumulate(&mut grads, a, gx);
                }
                Op::Log(a) => {
                    let gx = zip_map(&g, &self.node(a).value, |gi, x| gi / x);
                    accumulate(&mut grads, a, gx);
                }
                Op::LogSigmoid(a) => {
                    // d/dx log sigmoid(x) = sigmoid(-x)
                    let gx = zip_map(&g, &self.node(a).value, |gi, x| gi * sigmoid(-x));
                    accumulate(&mut grads, a, gx);
                }
            }
        }
        Ok(pgrad)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Shared by the tape and the tape-free forward pass so both produce
/// identical values.
pub(crate) fn affine_forward(
    x: &[f64],
    rows: usize,
    w: &[f64],
    b: &[f64],
    fan_in: usize,
    fan_out: usize,
    out: &mut [f64],
) {
    for r in 0..rows {
        let xr = &x[r * fan_in..(r + 1) * fan_in];
        let yr = &mut out[r * fan_out..(r + 1) * fan_out];
        for (o, y) in yr.iter_mut().enumerate() {
            let wrow = &w[o * fan_in..(o + 1) * fan_in];
            let dot: f64 = wrow.iter().zip(xr).map(|(a, b)| a * b).sum();
            *y = dot + b[o];
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
