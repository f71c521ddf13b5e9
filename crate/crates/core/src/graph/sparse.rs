//! Sparse symmetric propagation operators stored in CSR form.
//!
//! The sparsity pattern is fixed per graph build; the values are a
//! differentiable tensor, so gradients reach the edge weights.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-compressed layout of the symmetrized neighbour graph plus self loops.
#[derive(Debug)]
pub struct CsrPattern {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    /// Position of the directed weight (`i·k + slot`) feeding each entry;
    /// `None` on the diagonal.
    src: Vec<Option<usize>>,
}

impl CsrPattern {
    pub fn nnz(&self) -> usize {
        self.col.len()
    }

    fn entries(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.n).flat_map(move |r| (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |e| (r, self.col[e], e)))
    }
}

/// `values` laid out along `pattern`.
#[derive(Clone, Debug)]
pub struct SparseOp {
    pub pattern: Arc<CsrPattern>,
    pub values: Tensor,
}

impl SparseOp {
    pub fn n(&self) -> usize {
        self.pattern.n
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.pattern.n;
        let mut m = vec![0.0; n * n];
        for (r, c, e) in self.pattern.entries() {
            m[r * n + c] = self.values.data()[e];
        }
        m
    }

    /// `op · z` for `z` of shape `N×c`.
    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        spmm(&self.values, &self.pattern, z)
    }

    /// Identity operator of size `n` (diagonal only).
    pub fn identity(n: usize) -> Self {
        let pattern = CsrPattern {
            n,
            row_ptr: (0..=n).collect(),
            col: (0..n).collect(),
            src: vec![None; n],
        };
        SparseOp {
            pattern: Arc::new(pattern),
            values: Tensor::ones(&[n]),
        }
    }
}

pub fn validate_neighbors(idx: &[usize], n: usize, k: usize) -> Result<()> {
    if idx.len() != n * k {
        return Err(Error::shape("neighbors", format!("{} indices for N={n}, k={k}", idx.len())));
    }
    for i in 0..n {
        let row = &idx[i * k..(i + 1) * k];
        for (s, &j) in row.iter().enumerate() {
            if j >= n {
                return Err(Error::Index {
                    op: "neighbors",
                    index: j,
                    bound: n,
                });
            }
            if j == i {
                return Err(Error::Contract(format!("point {i} lists itself as a neighbour")));
            }
            if row[..s].contains(&j) {
                return Err(Error::Contract(format!("point {i} lists neighbour {j} twice")));
            }
        }
    }
    Ok(())
}

/// Symmetrize `W ← max(W, Wᵀ)`, add unit self loops and return
/// `(D^{-1/2}(W+I)D^{-1/2} + I)/2`, whose spectrum lies in `[0,1]`.
///
/// `weights` is `N×k`, aligned with `idx`.
pub fn build_operator(idx: &[usize], weights: &Tensor) -> Result<SparseOp> {
    if weights.rank() != 2 {
        return Err(Error::shape("build_operator", format!("weights must be N×k, got {:?}", weights.shape())));
    }
    let (n, k) = (weights.dim(0), weights.dim(1));
    validate_neighbors(idx, n, k)?;
    let w = weights.data();
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Computation {
            op: "build_operator",
            msg: "edge weights must be finite and non-negative".into(),
        });
    }

    // union edge set; per undirected edge keep the winning directed weight
    let mut fill = vec![0usize; n + 1];
    for (i, chunk) in idx.chunks_exact(k.max(1)).enumerate().take(n) {
        fill[i + 1] += k;
        for &j in chunk {
            fill[j + 1] += 1;
        }
    }
    for i in 0..n {
        fill[i + 1] += fill[i];
    }
    let seg = fill.clone();
    let mut pairs = vec![(0usize, 0usize); 2 * n * k];
    for i in 0..n {
        for s in 0..k {
            let j = idx[i * k + s];
            pairs[fill[i]] = (j, i * k + s);
            fill[i] += 1;
            pairs[fill[j]] = (i, i * k + s);
            fill[j] += 1;
        }
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col = Vec::with_capacity(2 * n * k + n);
    let mut src = Vec::with_capacity(2 * n * k + n);
    row_ptr.push(0);
    for i in 0..n {
        let list = &mut pairs[seg[i]..seg[i + 1]];
        list.sort_unstable();
        let mut diag_done = false;
        let mut e = 0;
        while e < list.len() {
            let j = list[e].0;
            let mut best = list[e].1;
            e += 1;
            while e < list.len() && list[e].0 == j {
                let cand = list[e].1;
                // larger weight wins; equal weights keep the lower flat index
                if w[cand] > w[best] || (w[cand] == w[best] && cand < best) {
                    best = cand;
                }
                e += 1;
            }
            if !diag_done && j > i {
                col.push(i);
                src.push(None);
                diag_done = true;
            }
            col.push(j);
            src.push(Some(best));
        }
        if !diag_done {
            col.push(i);
            src.push(None);
        }
        row_ptr.push(col.len());
    }
    let pattern = Arc::new(CsrPattern { n, row_ptr, col, src });

    let sym = |e: usize| pattern.src[e].map_or(1.0, |s| w[s]);
    let mut deg = vec![0.0; n];
    for (r, _, e) in pattern.entries() {
        deg[r] += sym(e);
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    // fixed factor order keeps the result bitwise symmetric
    let a0: Vec<f64> = pattern
        .entries()
        .map(|(r, c, e)| sym(e) * (inv_sqrt[r.min(c)] * inv_sqrt[r.max(c)]))
        .collect();
    let values: Vec<f64> = pattern
        .entries()
        .map(|(r, c, e)| 0.5 * a0[e] + if r == c { 0.5 } else { 0.0 })
        .collect();

    let pat = pattern.clone();
    let values = Tensor::from_op("build_operator", vec![weights.clone()], vec![pattern.nnz()], values, move |_, _, g| {
        let g0: Vec<f64> = g.iter().map(|v| 0.5 * v).collect();
        let mut gdeg = vec![0.0; pat.n];
        for (r, c, e) in pat.entries() {
            let t = g0[e] * a0[e];
            gdeg[r] -= 0.5 * t / deg[r];
            gdeg[c] -= 0.5 * t / deg[c];
        }
        let mut gw = vec![0.0; n * k];
        for (r, c, e) in pat.entries() {
            if let Some(s) = pat.src[e] {
                gw[s] += g0[e] * inv_sqrt[r] * inv_sqrt[c] + gdeg[r];
            }
        }
        Ok(vec![Some(gw)])
    })?;
    Ok(SparseOp { pattern, values })
}

/// Sparse-dense product `A·Z`, differentiable in both the values and `Z`.
pub fn spmm(values: &Tensor, pattern: &Arc<CsrPattern>, z: &Tensor) -> Result<Tensor> {
    if values.numel() != pattern.nnz() {
        return Err(Error::shape("spmm", format!("{} values for {} entries", values.numel(), pattern.nnz())));
    }
    if z.rank() != 2 || z.dim(0) != pattern.n {
        return Err(Error::shape("spmm", format!("operand {:?} for an operator of size {}", z.shape(), pattern.n)));
    }
    let c = z.dim(1);
    let (v, zd) = (values.data(), z.data());
    let mut out = vec![0.0; pattern.n * c];
    gather_rows_into(pattern, v, zd, &mut out, c);
    let pat = pattern.clone();
    Tensor::from_op("spmm", vec![values.clone(), z.clone()], vec![pattern.n, c], out, move |inp, _, g| {
        let (v, zd) = (inp[0].data(), inp[1].data());
        let gv = inp[0].tracks_grad().then(|| {
            let mut gv = vec![0.0; pat.nnz()];
            edge_dots(&pat, g, zd, &mut gv, c);
            gv
        });
        let gz = inp[1].tracks_grad().then(|| {
            let mut gz = vec![0.0; pat.n * c];
            scatter_rows_into(&pat, v, g, &mut gz, c);
            gz
        });
        Ok(vec![gv, gz])
    })
}

macro_rules! by_width {
    ($c:expr, $f:ident, $($arg:expr),*) => {
        match $c {
            1 => $f::<1>($($arg),*),
            2 => $f::<2>($($arg),*),
            3 => $f::<3>($($arg),*),
            4 => $f::<4>($($arg),*),
            8 => $f::<8>($($arg),*),
            16 => $f::<16>($($arg),*),
            32 => $f::<32>($($arg),*),
            64 => $f::<64>($($arg),*),
            c => {
                let _ = c;
                $f::<0>($($arg),*)
            }
        }
    };
}

/// Width `C` fixed at compile time; `C = 0` means "use `c`".
#[inline(always)]
fn width<const C: usize>(c: usize) -> usize {
    if C == 0 {
        c
    } else {
        C
    }
}

/// `out[r] += Σ_e v[e]·z[col(e)]`
fn gather_rows_into(pat: &CsrPattern, v: &[f64], z: &[f64], out: &mut [f64], c: usize) {
    by_width!(c, gather_rows_w, pat, v, z, out, c)
}

fn gather_rows_w<const C: usize>(pat: &CsrPattern, v: &[f64], z: &[f64], out: &mut [f64], c: usize) {
    let c = width::<C>(c);
    for (r, orow) in out.chunks_exact_mut(c).enumerate() {
        for e in pat.row_ptr[r]..pat.row_ptr[r + 1] {
            let a = v[e];
            let col = pat.col[e];
            let zrow = &z[col * c..(col + 1) * c];
            for (o, x) in orow.iter_mut().zip(zrow) {
                *o += a * x;
            }
        }
    }
}

/// `gv[e] = g[row(e)] · z[col(e)]`
fn edge_dots(pat: &CsrPattern, g: &[f64], z: &[f64], gv: &mut [f64], c: usize) {
    by_width!(c, edge_dots_w, pat, g, z, gv, c)
}

fn edge_dots_w<const C: usize>(pat: &CsrPattern, g: &[f64], z: &[f64], gv: &mut [f64], c: usize) {
    let c = width::<C>(c);
    for (r, grow) in g.chunks_exact(c).enumerate() {
        for e in pat.row_ptr[r]..pat.row_ptr[r + 1] {
            let col = pat.col[e];
            let zrow = &z[col * c..(col + 1) * c];
            gv[e] = grow.iter().zip(zrow).map(|(a, b)| a * b).sum();
        }
    }
}

/// `gz[col(e)] += v[e]·g[row(e)]`
fn scatter_rows_into(pat: &CsrPattern, v: &[f64], g: &[f64], gz: &mut [f64], c: usize) {
    by_width!(c, scatter_rows_w, pat, v, g, gz, c)
}

fn scatter_rows_w<const C: usize>(pat: &CsrPattern, v: &[f64], g: &[f64], gz: &mut [f64], c: usize) {
    let c = width::<C>(c);
    for (r, grow) in g.chunks_exact(c).enumerate() {
        for e in pat.row_ptr[r]..pat.row_ptr[r + 1] {
            let a = v[e];
            let col = pat.col[e];
            for (o, x) in gz[col * c..(col + 1) * c].iter_mut().zip(grow) {
                *o += a * x;
            }
        }
    }
}
