use std::borrow::Cow;

use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Negative slope used by the leaky rectifier unless configured otherwise.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Neg,
    Exp,
    /// Square root; the derivative at exactly zero is taken as zero.
    Sqrt,
    Square,
    LeakyRelu(f64),
    Softplus,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
    Min,
}

// ---------------------------------------------------------------------------
// broadcasting

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        match (da, db) {
            (x, y) if x == y => out.push(x),
            (1, y) => out.push(y),
            (x, 1) => out.push(x),
            _ => return None,
        }
    }
    Some(out)
}

/// How the flat index of a broadcast output maps back onto an input.
enum Layout {
    Same,
    Scalar,
    /// input repeats with period `len` (matches the trailing output dims)
    Cycle(usize),
    /// each input element covers `inner` consecutive output elements
    Spread(usize),
    General(Vec<usize>),
}

impl Layout {
    fn new(out: &[usize], inp: &[usize]) -> Layout {
        let total = numel(out);
        let len = numel(inp);
        if len == total {
            return Layout::Same;
        }
        if len == 1 {
            return Layout::Scalar;
        }
        let n = out.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, n - inp.len())
            .chain(inp.iter().copied())
            .collect();
        // trailing dims equal, leading dims all 1
        if let Some(p) = (0..=n).find(|&p| padded[p..] == out[p..]) {
            if padded[..p].iter().all(|&d| d == 1) {
                return Layout::Cycle(len);
            }
        }
        // leading dims equal, trailing dims all 1
        if let Some(p) = (0..=n).rev().find(|&p| padded[..p] == out[..p]) {
            if padded[p..].iter().all(|&d| d == 1) {
                return Layout::Spread(numel(&out[p..]));
            }
        }
        Layout::General(broadcast_index(out, &padded))
    }

    /// Sums `grad` (output-shaped) back onto an input of `len` elements.
    fn reduce(&self, grad: &[f64], len: usize) -> Vec<f64> {
        match self {
            Layout::Same => grad.to_vec(),
            Layout::Scalar => vec![grad.iter().sum()],
            Layout::Cycle(n) => {
                let mut acc = vec![0.0; len];
                for chunk in grad.chunks_exact(*n) {
                    for (a, g) in acc.iter_mut().zip(chunk) {
                        *a += g;
                    }
                }
                acc
            }
            Layout::Spread(inner) => grad.chunks_exact(*inner).map(|c| c.iter().sum()).collect(),
            Layout::General(map) => {
                let mut acc = vec![0.0; len];
                for (o, g) in grad.iter().enumerate() {
                    acc[map[o]] += g;
                }
                acc
            }
        }
    }

    /// Materializes `x` broadcast to `total` output elements.
    fn expand<'a>(&self, x: &'a [f64], total: usize) -> Cow<'a, [f64]> {
        match self {
            Layout::Same => Cow::Borrowed(x),
            Layout::Scalar => Cow::Owned(vec![x[0]; total]),
            Layout::Cycle(n) => Cow::Owned(x[..*n].iter().copied().cycle().take(total).collect()),
            Layout::Spread(inner) => Cow::Owned(
                x.iter()
                    .flat_map(|v| std::iter::repeat_n(*v, *inner))
                    .collect(),
            ),
            Layout::General(map) => Cow::Owned(map.iter().map(|&i| x[i]).collect()),
        }
    }
}

fn broadcast_index(out: &[usize], padded_inp: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..n).rev() {
        if padded_inp[i] != 1 {
            strides[i] = s;
        }
        s *= padded_inp[i];
    }
    let total = numel(out);
    let mut res = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    let mut cur = 0usize;
    for _ in 0..total {
        res.push(cur);
        let mut d = n;
        while d > 0 {
            d -= 1;
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < out[d] {
                break;
            }
            cur -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    res
}

// ---------------------------------------------------------------------------
// dense kernels

/// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    match n {
        1 => gemm_nn_fixed::<1>(a, b, c, m, k),
        2 => gemm_nn_fixed::<2>(a, b, c, m, k),
        3 => gemm_nn_fixed::<3>(a, b, c, m, k),
        4 => gemm_nn_fixed::<4>(a, b, c, m, k),
        6 => gemm_nn_fixed::<6>(a, b, c, m, k),
        8 => gemm_nn_fixed::<8>(a, b, c, m, k),
        16 => gemm_nn_fixed::<16>(a, b, c, m, k),
        32 => gemm_nn_fixed::<32>(a, b, c, m, k),
        _ => gemm_nn_any(a, b, c, m, k, n),
    }
}

fn gemm_nn_fixed<const N: usize>(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize) {
    if k == 0 {
        return;
    }
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(N)).take(m) {
        let mut acc = [0.0; N];
        acc.copy_from_slice(crow);
        for (aip, brow) in arow.iter().zip(b.chunks_exact(N)) {
            for j in 0..N {
                acc[j] += aip * brow[j];
            }
        }
        crow.copy_from_slice(&acc);
    }
}

fn gemm_nn_any(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// da[m×k] += g[m×n] · b[k×n]ᵀ
fn gemm_nt(g: &[f64], b: &[f64], da: &mut [f64], m: usize, n: usize, k: usize) {
    if n == 0 || k == 0 {
        return;
    }
    // transposing b turns the row dot products into a plain product
    let mut bt = vec![0.0; k * n];
    transpose_into(b, &mut bt, 1, k, n);
    gemm_nn(&g[..m * n], &bt, &mut da[..m * k], m, n, k);
}

/// db[k×n] += a[m×k]ᵀ · g[m×n]
fn gemm_tn(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    match n {
        1 => gemm_tn_fixed::<1>(a, g, db, m, k),
        2 => gemm_tn_fixed::<2>(a, g, db, m, k),
        3 => gemm_tn_fixed::<3>(a, g, db, m, k),
        4 => gemm_tn_fixed::<4>(a, g, db, m, k),
        6 => gemm_tn_fixed::<6>(a, g, db, m, k),
        8 => gemm_tn_fixed::<8>(a, g, db, m, k),
        16 => gemm_tn_fixed::<16>(a, g, db, m, k),
        32 => gemm_tn_fixed::<32>(a, g, db, m, k),
        _ => gemm_tn_any(a, g, db, m, k, n),
    }
}

fn gemm_tn_fixed<const N: usize>(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize) {
    if k == 0 {
        return;
    }
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(N)).take(m) {
        let gv: [f64; N] = grow.try_into().unwrap();
        for (aip, drow) in arow.iter().zip(db.chunks_exact_mut(N)) {
            for j in 0..N {
                drow[j] += aip * gv[j];
            }
        }
    }
}

fn gemm_tn_any(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, gv) in drow.iter_mut().zip(grow) {
                *d += aip * gv;
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn unary(&self, kind: UnaryKind) -> Result<Tensor> {
        let x = self.data();
        let data: Vec<f64> = match kind {
            UnaryKind::Neg => x.iter().map(|v| -v).collect(),
            UnaryKind::Exp => x.iter().map(|v| v.exp()).collect(),
            UnaryKind::Sqrt => {
                if let Some(v) = x.iter().find(|v| **v < 0.0) {
                    return Err(Error::Computation {
                        op: "sqrt",
                        msg: format!("negative input {v}"),
                    });
                }
                x.iter().map(|v| v.sqrt()).collect()
            }
            UnaryKind::Square => x.iter().map(|v| v * v).collect(),
            UnaryKind::LeakyRelu(s) => x.iter().map(|&v| if v > 0.0 { v } else { s * v }).collect(),
            UnaryKind::Softplus => x.iter().map(|&v| softplus(v)).collect(),
            UnaryKind::Scale(c) => x.iter().map(|v| c * v).collect(),
            UnaryKind::AddScalar(c) => x.iter().map(|v| c + v).collect(),
        };
        let name = match kind {
            UnaryKind::Neg => "neg",
            UnaryKind::Exp => "exp",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Square => "square",
            UnaryKind::LeakyRelu(_) => "leaky_relu",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::AddScalar(_) => "add_scalar",
        };
        Tensor::from_op(
            name,
            vec![self.clone()],
            self.shape().to_vec(),
            data,
            move |inputs, out, g| {
                let x = inputs[0].data();
                let y = out.data();
                let dx: Vec<f64> = match kind {
                    UnaryKind::Neg => g.iter().map(|v| -v).collect(),
                    UnaryKind::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    UnaryKind::Sqrt => g
                        .iter()
                        .zip(y)
                        .map(|(g, y)| if *y > 0.0 { 0.5 * g / y } else { 0.0 })
                        .collect(),
                    UnaryKind::Square => g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect(),
                    UnaryKind::LeakyRelu(s) => g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { s * g })
                        .collect(),
                    UnaryKind::Softplus => {
                        g.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect()
                    }
                    UnaryKind::Scale(c) => g.iter().map(|g| c * g).collect(),
                    UnaryKind::AddScalar(_) => g.to_vec(),
                };
                Ok(vec![Some(dx)])
            },
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Neg)
    }
    pub fn exp(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Exp)
    }
    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Sqrt)
    }
    pub fn square(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Square)
    }
    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        self.unary(UnaryKind::LeakyRelu(slope))
    }
    pub fn softplus(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Softplus)
    }
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.unary(UnaryKind::Scale(c))
    }
    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary(UnaryKind::AddScalar(c))
    }

    pub fn binary(&self, kind: BinaryKind, rhs: &Tensor) -> Result<Tensor> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let out_shape = broadcast_shape(self.shape(), rhs.shape()).ok_or_else(|| {
            Error::shape(
                name,
                format!("cannot broadcast {:?} with {:?}", self.shape(), rhs.shape()),
            )
        })?;
        if kind == BinaryKind::Div && rhs.data().contains(&0.0) {
            return Err(Error::Computation {
                op: "div",
                msg: "division by exact zero".into(),
            });
        }
        let la = Layout::new(&out_shape, self.shape());
        let lb = Layout::new(&out_shape, rhs.shape());
        let (a, b) = (self.data(), rhs.data());
        let total = numel(&out_shape);
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let data: Vec<f64> = match (&la, &lb) {
            (Layout::Same, Layout::Same) => a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect(),
            (Layout::Same, Layout::Scalar) => a.iter().map(|x| f(*x, b[0])).collect(),
            (Layout::Same, Layout::Cycle(n)) => a
                .chunks_exact(*n)
                .flat_map(|row| row.iter().zip(b).map(|(x, y)| f(*x, *y)))
                .collect(),
            (Layout::Same, Layout::Spread(inner)) => a
                .chunks_exact(*inner)
                .zip(b)
                .flat_map(|(row, y)| row.iter().map(move |x| f(*x, *y)))
                .collect(),
            _ => {
                let (ea, eb) = (la.expand(a, total), lb.expand(b, total));
                ea.iter().zip(eb.iter()).map(|(x, y)| f(*x, *y)).collect()
            }
        };
        let sa = self.shape().to_vec();
        let sb = rhs.shape().to_vec();
        let so = out_shape.clone();
        Tensor::from_op(name, vec![self.clone(), rhs.clone()], out_shape, data, move |inputs, _out, g| {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let la = Layout::new(&so, &sa);
            let lb = Layout::new(&so, &sb);
            let need_a = inputs[0].tracks_grad();
            let need_b = inputs[1].tracks_grad();
            let (ga, gb) = match kind {
                BinaryKind::Add => (
                    need_a.then(|| la.reduce(g, a.len())),
                    need_b.then(|| lb.reduce(g, b.len())),
                ),
                BinaryKind::Sub => (
                    need_a.then(|| la.reduce(g, a.len())),
                    need_b.then(|| {
                        let mut r = lb.reduce(g, b.len());
                        r.iter_mut().for_each(|v| *v = -*v);
                        r
                    }),
                ),
                BinaryKind::Mul => (
                    need_a.then(|| {
                        let eb = lb.expand(b, g.len());
                        let t: Vec<f64> = g.iter().zip(eb.iter()).map(|(g, y)| g * y).collect();
                        la.reduce(&t, a.len())
                    }),
                    need_b.then(|| {
                        let ea = la.expand(a, g.len());
                        let t: Vec<f64> = g.iter().zip(ea.iter()).map(|(g, x)| g * x).collect();
                        lb.reduce(&t, b.len())
                    }),
                ),
                BinaryKind::Div => (
                    need_a.then(|| {
                        let eb = lb.expand(b, g.len());
                        let t: Vec<f64> = g.iter().zip(eb.iter()).map(|(g, y)| g / y).collect();
                        la.reduce(&t, a.len())
                    }),
                    need_b.then(|| {
                        let (ea, eb) = (la.expand(a, g.len()), lb.expand(b, g.len()));
                        let t: Vec<f64> = g
                            .iter()
                            .zip(ea.iter().zip(eb.iter()))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect();
                        lb.reduce(&t, b.len())
                    }),
                ),
            };
            Ok(vec![ga, gb])
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Add, rhs)
    }
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Sub, rhs)
    }
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Mul, rhs)
    }
    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Div, rhs)
    }

    /// Matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() < 2 || rhs.rank() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands must be at least 2-d, got {:?} and {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (ra, rb) = (self.rank(), rhs.rank());
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (rhs.shape()[rb - 2], rhs.shape()[rb - 1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let ba = self.shape()[..ra - 2].to_vec();
        let bb = rhs.shape()[..rb - 2].to_vec();
        let bo = broadcast_shape(&ba, &bb).ok_or_else(|| {
            Error::shape(
                "matmul",
                format!("batch dims {ba:?} and {bb:?} do not broadcast"),
            )
        })?;
        let nb = numel(&bo);
        let amap: Vec<usize> = batch_map(&bo, &ba);
        let bmap: Vec<usize> = batch_map(&bo, &bb);
        let (a, b) = (self.data(), rhs.data());
        let mut data = vec![0.0; nb * m * n];
        // rhs shared by every batch: one tall product
        let fast = numel(&bb) == 1 && numel(&ba) == nb;
        if fast {
            gemm_nn(a, b, &mut data, nb * m, k, n);
        } else {
            for bi in 0..nb {
                let ao = amap[bi] * m * k;
                let bo_ = bmap[bi] * k * n;
                gemm_nn(
                    &a[ao..ao + m * k],
                    &b[bo_..bo_ + k * n],
                    &mut data[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = bo.clone();
        shape.push(m);
        shape.push(n);
        Tensor::from_op("matmul", vec![self.clone(), rhs.clone()], shape, data, move |inputs, _out, g| {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let ga = inputs[0].tracks_grad().then(|| {
                let mut da = vec![0.0; a.len()];
                if fast {
                    gemm_nt(g, b, &mut da, nb * m, n, k);
                } else {
                    for bi in 0..nb {
                        let ao = amap[bi] * m * k;
                        let bo_ = bmap[bi] * k * n;
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &b[bo_..bo_ + k * n],
                            &mut da[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                da
            });
            let gb = inputs[1].tracks_grad().then(|| {
                let mut db = vec![0.0; b.len()];
                if fast {
                    gemm_tn(a, g, &mut db, nb * m, k, n);
                } else {
                    for bi in 0..nb {
                        let ao = amap[bi] * m * k;
                        let bo_ = bmap[bi] * k * n;
                        gemm_tn(
                            &a[ao..ao + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bo_..bo_ + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
                db
            });
            Ok(vec![ga, gb])
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", "needs at least 2 axes"));
        }
        let (m, n) = (self.shape()[r - 2], self.shape()[r - 1]);
        let batch = numel(&self.shape()[..r - 2]);
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        transpose_into(x, &mut data, batch, m, n);
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Tensor::from_op("transpose", vec![self.clone()], shape, data, move |_inputs, _out, g| {
            let mut dx = vec![0.0; g.len()];
            transpose_into(g, &mut dx, batch, n, m);
            Ok(vec![Some(dx)])
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape()),
            ));
        }
        Tensor::from_op(
            "reshape",
            vec![self.clone()],
            shape.to_vec(),
            self.to_vec(),
            |_inputs, _out, g| Ok(vec![Some(g.to_vec())]),
        )
    }

    /// Reduction along `axis`. For max/min the gradient flows to the first
    /// occurrence of the extreme value only.
    pub fn reduce(&self, kind: ReduceKind, axis: usize, keepdim: bool) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::shape(
                "reduce",
                format!("axis {axis} invalid for shape {:?}", self.shape()),
            ));
        }
        let shape = self.shape();
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        if len == 0 {
            return Err(Error::shape("reduce", "cannot reduce an empty axis"));
        }
        let x = self.data();
        let mut data = vec![0.0; outer * inner];
        let mut arg = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        let row = &mut data[o * inner..(o + 1) * inner];
                        for (r, v) in row.iter_mut().zip(&x[base..base + inner]) {
                            *r += v;
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let c = 1.0 / len as f64;
                    data.iter_mut().for_each(|v| *v *= c);
                }
            }
            ReduceKind::Max | ReduceKind::Min => {
                arg = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = x[o * len * inner + i];
                        let mut bi = 0;
                        for l in 1..len {
                            let v = x[(o * len + l) * inner + i];
                            let better = if kind == ReduceKind::Max { v > best } else { v < best };
                            if better {
                                best = v;
                                bi = l;
                            }
                        }
                        data[o * inner + i] = best;
                        arg[o * inner + i] = bi;
                    }
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        Tensor::from_op("reduce", vec![self.clone()], out_shape, data, move |inputs, _out, g| {
            let mut dx = vec![0.0; inputs[0].numel()];
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    let c = if kind == ReduceKind::Mean { 1.0 / len as f64 } else { 1.0 };
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                dx[base + i] = c * g[o * inner + i];
                            }
                        }
                    }
                }
                ReduceKind::Max | ReduceKind::Min => {
                    for o in 0..outer {
                        for i in 0..inner {
                            let l = arg[o * inner + i];
                            dx[(o * len + l) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Ok(vec![Some(dx)])
        })
    }

    pub fn sum(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.reduce(ReduceKind::Sum, axis, keepdim)
    }
    pub fn mean(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.reduce(ReduceKind::Mean, axis, keepdim)
    }
    pub fn max(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.reduce(ReduceKind::Max, axis, keepdim)
    }
    pub fn min(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.reduce(ReduceKind::Min, axis, keepdim)
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        self.reshape(&[self.numel()])?.sum(0, false)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        self.reshape(&[self.numel()])?.mean(0, false)
    }

    /// Gathers rows of the leading axis. `idx_shape` is the shape of the
    /// index array; the output shape is `idx_shape ++ self.shape()[1..]`.
    /// Gradients scatter-add back onto the source rows.
    pub fn gather_rows(&self, idx: &[usize], idx_shape: &[usize]) -> Result<Tensor> {
        if self.rank() < 1 {
            return Err(Error::shape("gather_rows", "source must have a leading axis"));
        }
        if numel(idx_shape) != idx.len() {
            return Err(Error::shape(
                "gather_rows",
                format!("index shape {idx_shape:?} does not match {} indices", idx.len()),
            ));
        }
        let rows = self.shape()[0];
        let row = numel(&self.shape()[1..]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let x = self.data();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut shape = idx_shape.to_vec();
        shape.extend_from_slice(&self.shape()[1..]);
        let idx = idx.to_vec();
        Tensor::from_op("gather_rows", vec![self.clone()], shape, data, move |inputs, _out, g| {
            let mut dx = vec![0.0; inputs[0].numel()];
            for (slot, &i) in idx.iter().enumerate() {
                let src = &g[slot * row..(slot + 1) * row];
                for (d, s) in dx[i * row..(i + 1) * row].iter_mut().zip(src) {
                    *d += s;
                }
            }
            Ok(vec![Some(dx)])
        })
    }

    /// Concatenates tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "nothing to concatenate"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        for p in parts {
            if p.rank() != rank
                || p.shape()[..axis] != first.shape()[..axis]
                || p.shape()[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible shapes {:?} and {:?}", first.shape(), p.shape()),
                ));
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let chunks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total_chunk: usize = chunks.iter().sum();
        let mut data = Vec::with_capacity(outer * total_chunk);
        for o in 0..outer {
            for (p, &c) in parts.iter().zip(&chunks) {
                data.extend_from_slice(&p.data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let inputs: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Tensor::from_op("concat", inputs, shape, data, move |inputs, _out, g| {
            let mut grads: Vec<Vec<f64>> = chunks.iter().map(|c| Vec::with_capacity(c * outer)).collect();
            for o in 0..outer {
                let mut off = o * total_chunk;
                for (gi, &c) in grads.iter_mut().zip(&chunks) {
                    gi.extend_from_slice(&g[off..off + c]);
                    off += c;
                }
            }
            Ok(grads
                .into_iter()
                .zip(inputs)
                .map(|(gi, t)| t.tracks_grad().then_some(gi))
                .collect())
        })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!(
                    "range {start}..{} invalid on axis {axis} of {:?}",
                    start + len,
                    self.shape()
                ),
            ));
        }
        let outer = numel(&self.shape()[..axis]);
        let inner = numel(&self.shape()[axis + 1..]);
        let full = self.shape()[axis] * inner;
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op("narrow", vec![self.clone()], shape, data, move |inputs, _out, g| {
            let mut dx = vec![0.0; inputs[0].numel()];
            for o in 0..outer {
                let base = o * full + start * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            Ok(vec![Some(dx)])
        })
    }
}

fn batch_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let total = numel(out);
    if numel(inp) == 1 {
        return vec![0; total];
    }
    let n = out.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, n - inp.len())
        .chain(inp.iter().copied())
        .collect();
    broadcast_index(out, &padded)
}

fn transpose_into(x: &[f64], out: &mut [f64], batch: usize, m: usize, n: usize) {
    for b in 0..batch {
        let src = &x[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
}
