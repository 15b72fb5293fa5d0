//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! Feature maps are `(channels, height · width)` matrices; token sequences are
//! `(tokens, features)`. Every op records enough of its forward state to
//! produce input gradients in [`Tape::backward`].

use super::matrix::{gemm_into, matmul, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        ta: bool,
        b: Var,
        tb: bool,
    },
    Add(Var, Var),
    /// `(rows, 1)` bias added to every column.
    AddRowBias {
        a: Var,
        bias: Var,
    },
    /// `(1, cols)` bias added to every row.
    AddColBias {
        a: Var,
        bias: Var,
    },
    Scale(Var, f64),
    Silu(Var),
    Transpose(Var),
    GroupNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        normed: Matrix,
        rstd: Vec<f64>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        height: usize,
        width: usize,
        cols: Matrix,
    },
    AvgPool2 {
        x: Var,
        height: usize,
        width: usize,
    },
    Upsample2 {
        x: Var,
        height: usize,
        width: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    SoftmaxRows(Var),
    Reshape(Var),
    Mse {
        a: Var,
        target: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that do not need one.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = matmul(self.value(a), ta, self.value(b), tb);
        self.push(value, Op::MatMul { a, ta, b, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let bv = self.value(bias);
        let mut value = self.value(a).clone();
        assert_eq!(bv.shape(), (value.rows(), 1));
        for r in 0..value.rows() {
            let b = bv.get(r, 0);
            value.row_mut(r).iter_mut().for_each(|v| *v += b);
        }
        self.push(value, Op::AddRowBias { a, bias }, &[a, bias])
    }

    pub fn add_col_bias(&mut self, a: Var, bias: Var) -> Var {
        let bv = self.value(bias).clone();
        let mut value = self.value(a).clone();
        assert_eq!(bv.shape(), (1, value.cols()));
        for r in 0..value.rows() {
            value
                .row_mut(r)
                .iter_mut()
                .zip(bv.as_slice())
                .for_each(|(v, b)| *v += b);
        }
        self.push(value, Op::AddColBias { a, bias }, &[a, bias])
    }

    /// `x · w + b` over token rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, false, w, false);
        self.add_col_bias(y, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale(k);
        self.push(value, Op::Scale(a, k), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = {
            let src = self.value(a);
            let data = src.as_slice().iter().map(|&x| x * sigmoid(x)).collect();
            Matrix::from_vec(src.rows(), src.cols(), data).expect("shape")
        };
        self.push(value, Op::Silu(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshaped(rows, cols)
            .expect("reshape size");
        self.push(value, Op::Reshape(a), &[a])
    }

    /// Group normalization over rows of a `(channels, positions)` map,
    /// followed by a per-channel affine `gamma, beta` of shape `(channels, 1)`.
    pub fn group_norm(&mut self, a: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-5;
        let x = self.value(a);
        let (c, n) = x.shape();
        assert!(
            groups > 0 && c % groups == 0,
            "channels {c} not divisible by {groups} groups"
        );
        let per = c / groups;
        let mut normed = Matrix::zeros(c, n);
        let mut rstd = vec![0.0; groups];
        for (g, rs) in rstd.iter_mut().enumerate() {
            let rows = g * per..(g + 1) * per;
            let count = (per * n) as f64;
            let mean = rows
                .clone()
                .map(|r| x.row(r).iter().sum::<f64>())
                .sum::<f64>()
                / count;
            let var = rows
                .clone()
                .map(|r| {
                    x.row(r)
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / count;
            *rs = 1.0 / (var + EPS).sqrt();
            for r in rows {
                for (o, v) in normed.row_mut(r).iter_mut().zip(x.row(r)) {
                    *o = (v - mean) * *rs;
                }
            }
        }
        let gv = self.value(gamma);
        let bv = self.value(beta);
        assert_eq!(gv.shape(), (c, 1));
        let mut value = normed.clone();
        for r in 0..c {
            let (gm, bt) = (gv.get(r, 0), bv.get(r, 0));
            value.row_mut(r).iter_mut().for_each(|v| *v = *v * gm + bt);
        }
        self.push(
            value,
            Op::GroupNorm {
                a,
                gamma,
                beta,
                groups,
                normed,
                rstd,
            },
            &[a, gamma, beta],
        )
    }

    /// 3×3 convolution, stride 1, zero padding 1. `x` is `(cin, h·w)`,
    /// `w` is `(cout, cin·9)` and `b` is `(cout, 1)`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, height: usize, width: usize) -> Var {
        let cols = im2col(self.value(x), height, width);
        let wv = self.value(w);
        let mut value = Matrix::zeros(wv.rows(), height * width);
        gemm_into(1.0, wv, false, &cols, false, 0.0, &mut value);
        let bv = self.value(b);
        for r in 0..value.rows() {
            let bb = bv.get(r, 0);
            value.row_mut(r).iter_mut().for_each(|v| *v += bb);
        }
        self.push(
            value,
            Op::Conv3x3 {
                x,
                w,
                b,
                height,
                width,
                cols,
            },
            &[x, w, b],
        )
    }

    pub fn avg_pool2(&mut self, x: Var, height: usize, width: usize) -> Var {
        let src = self.value(x);
        let (oh, ow) = (height / 2, width / 2);
        let mut value = Matrix::zeros(src.rows(), oh * ow);
        for c in 0..src.rows() {
            let row = src.row(c);
            let out = value.row_mut(c);
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * width + 2 * xx;
                    out[y * ow + xx] =
                        0.25 * (row[i] + row[i + 1] + row[i + width] + row[i + width + 1]);
                }
            }
        }
        self.push(value, Op::AvgPool2 { x, height, width }, &[x])
    }

    /// Nearest-neighbour 2× upsampling of an `(channels, h·w)` map.
    pub fn upsample2(&mut self, x: Var, height: usize, width: usize) -> Var {
        let src = self.value(x);
        let ow = width * 2;
        let mut value = Matrix::zeros(src.rows(), 4 * height * width);
        for c in 0..src.rows() {
            let row = src.row(c);
            let out = value.row_mut(c);
            for y in 0..2 * height {
                for xx in 0..ow {
                    out[y * ow + xx] = row[(y / 2) * width + xx / 2];
                }
            }
        }
        self.push(value, Op::Upsample2 { x, height, width }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::vstack(&refs).expect("column counts agree");
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&v| self.value(v).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows);
            for r in 0..rows {
                value.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        self.push(value, Op::SliceCols { a, start }, &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Mean squared error against a constant target, as a `1 × 1` node.
    pub fn mse(&mut self, a: Var, target: Matrix) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), target.shape());
        let n = av.as_slice().len() as f64;
        let loss = av
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(x, t)| (x - t) * (x - t))
            .sum::<f64>()
            / n;
        let value = Matrix::from_vec(1, 1, vec![loss]).expect("scalar");
        self.push(value, Op::Mse { a, target }, &[a])
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let seed = Matrix::from_vec(1, 1, vec![1.0]).expect("scalar");
        self.backward_from(loss, seed)
    }

    /// Backpropagates an explicit upstream gradient for `root`.
    pub fn backward_from(&self, root: Var, seed: Matrix) -> Gradients {
        assert_eq!(seed.shape(), self.value(root).shape());
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, ta, b, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs_grad(a) {
                    let ga = if ta {
                        matmul(bv, tb, g, true)
                    } else {
                        matmul(g, false, bv, !tb)
                    };
                    self.accumulate(grads, a, ga);
                }
                if self.needs_grad(b) {
                    let gb = if tb {
                        matmul(g, true, av, ta)
                    } else {
                        matmul(av, !ta, g, false)
                    };
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::AddRowBias { a, bias } => {
                self.accumulate(grads, a, g.clone());
                if self.needs_grad(bias) {
                    let gb = Matrix::from_fn(g.rows(), 1, |r, _| g.row(r).iter().sum());
                    self.accumulate(grads, bias, gb);
                }
            }
            &Op::AddColBias { a, bias } => {
                self.accumulate(grads, a, g.clone());
                if self.needs_grad(bias) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        gb.as_mut_slice()
                            .iter_mut()
                            .zip(g.row(r))
                            .for_each(|(o, v)| *o += v);
                    }
                    self.accumulate(grads, bias, gb);
                }
            }
            &Op::Scale(a, k) => {
                let mut ga = g.clone();
                ga.scale(k);
                self.accumulate(grads, a, ga);
            }
            &Op::Silu(a) => {
                let x = self.value(a);
                let data = x
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(&x, &gy)| {
                        let s = sigmoid(x);
                        gy * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(
                    grads,
                    a,
                    Matrix::from_vec(x.rows(), x.cols(), data).expect("shape"),
                );
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.transpose()),
            &Op::Reshape(a) => {
                let (r, c) = self.value(a).shape();
                self.accumulate(grads, a, g.clone().reshaped(r, c).expect("shape"));
            }
            Op::GroupNorm {
                a,
                gamma,
                beta,
                groups,
                normed,
                rstd,
            } => {
                let (c, n) = normed.shape();
                let gv = self.value(*gamma);
                if self.needs_grad(*beta) {
                    let gb = Matrix::from_fn(c, 1, |r, _| g.row(r).iter().sum());
                    self.accumulate(grads, *beta, gb);
                }
                if self.needs_grad(*gamma) {
                    let gg = Matrix::from_fn(c, 1, |r, _| {
                        g.row(r).iter().zip(normed.row(r)).map(|(a, b)| a * b).sum()
                    });
                    self.accumulate(grads, *gamma, gg);
                }
                if self.needs_grad(*a) {
                    let per = c / groups;
                    let count = (per * n) as f64;
                    let mut ga = Matrix::zeros(c, n);
                    for (grp, &rs) in rstd.iter().enumerate() {
                        let rows = grp * per..(grp + 1) * per;
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for r in rows.clone() {
                            let gm = gv.get(r, 0);
                            for (gy, xh) in g.row(r).iter().zip(normed.row(r)) {
                                let dxh = gy * gm;
                                m1 += dxh;
                                m2 += dxh * xh;
                            }
                        }
                        m1 /= count;
                        m2 /= count;
                        for r in rows {
                            let gm = gv.get(r, 0);
                            let dst = ga.row_mut(r);
                            for ((o, gy), xh) in dst.iter_mut().zip(g.row(r)).zip(normed.row(r)) {
                                *o = rs * (gy * gm - m1 - xh * m2);
                            }
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::Conv3x3 {
                x,
                w,
                b,
                height,
                width,
                cols,
            } => {
                if self.needs_grad(*b) {
                    let gb = Matrix::from_fn(g.rows(), 1, |r, _| g.row(r).iter().sum());
                    self.accumulate(grads, *b, gb);
                }
                if self.needs_grad(*w) {
                    self.accumulate(grads, *w, matmul(g, false, cols, true));
                }
                if self.needs_grad(*x) {
                    let gcols = matmul(self.value(*w), true, g, false);
                    self.accumulate(grads, *x, col2im(&gcols, *height, *width));
                }
            }
            &Op::AvgPool2 { x, height, width } => {
                let (oh, ow) = (height / 2, width / 2);
                let mut gx = Matrix::zeros(g.rows(), height * width);
                for c in 0..g.rows() {
                    let src = g.row(c);
                    let dst = gx.row_mut(c);
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = 0.25 * src[y * ow + xx];
                            let i = 2 * y * width + 2 * xx;
                            dst[i] += v;
                            dst[i + 1] += v;
                            dst[i + width] += v;
                            dst[i + width + 1] += v;
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::Upsample2 { x, height, width } => {
                let ow = 2 * width;
                let mut gx = Matrix::zeros(g.rows(), height * width);
                for c in 0..g.rows() {
                    let src = g.row(c);
                    let dst = gx.row_mut(c);
                    for y in 0..2 * height {
                        for xx in 0..ow {
                            dst[(y / 2) * width + xx / 2] += src[y * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs_grad(p) {
                        let data = g.as_slice()[off * cols..(off + rows) * cols].to_vec();
                        self.accumulate(
                            grads,
                            p,
                            Matrix::from_vec(rows, cols, data).expect("shape"),
                        );
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.needs_grad(p) {
                        self.accumulate(grads, p, g.slice_cols(off, cols));
                    }
                    off += cols;
                }
            }
            &Op::SliceCols { a, start } => {
                let (r, c) = self.value(a).shape();
                let mut ga = Matrix::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row)[start..start + g.cols()].copy_from_slice(g.row(row));
                }
                self.accumulate(grads, a, ga);
            }
            &Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::Mse { a, target } => {
                let av = self.value(*a);
                let k = 2.0 * g.get(0, 0) / av.as_slice().len() as f64;
                let data = av
                    .as_slice()
                    .iter()
                    .zip(target.as_slice())
                    .map(|(x, t)| k * (x - t))
                    .collect();
                self.accumulate(
                    grads,
                    *a,
                    Matrix::from_vec(av.rows(), av.cols(), data).expect("shape"),
                );
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// `(cin, h·w)` → `(cin·9, h·w)` patch matrix for a padded 3×3 kernel.
fn im2col(x: &Matrix, height: usize, width: usize) -> Matrix {
    let cin = x.rows();
    let n = height * width;
    assert_eq!(x.cols(), n);
    let mut cols = Matrix::zeros(cin * 9, n);
    for c in 0..cin {
        let src = x.row(c);
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = cols.row_mut(c * 9 + ky * 3 + kx);
                for y in 0..height {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * width..(sy as usize + 1) * width];
                    let drow = &mut dst[y * width..(y + 1) * width];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..width - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..width - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Matrix, height: usize, width: usize) -> Matrix {
    let cin = cols.rows() / 9;
    let mut x = Matrix::zeros(cin, height * width);
    for c in 0..cin {
        let dst = x.row_mut(c);
        for ky in 0..3 {
            for kx in 0..3 {
                let src = cols.row(c * 9 + ky * 3 + kx);
                for y in 0..height {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let srow = &src[y * width..(y + 1) * width];
                    let drow = &mut dst[sy as usize * width..(sy as usize + 1) * width];
                    match kx {
                        0 => drow[..width - 1]
                            .iter_mut()
                            .zip(&srow[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => drow.iter_mut().zip(srow).for_each(|(d, s)| *d += s),
                        _ => drow[1..]
                            .iter_mut()
                            .zip(&srow[..width - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    x
}
