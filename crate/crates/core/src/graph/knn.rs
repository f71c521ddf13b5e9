//! Exact k-nearest-neighbour search.
//!
//! Small inputs are scanned exhaustively. Larger ones are bucketed on a
//! uniform grid over the first (up to) three coordinates and searched ring by
//! ring; the projected distance is a lower bound on the full distance, so the
//! result is identical to the exhaustive scan, tie order included.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Point counts at or above this use the grid index.
pub const GRID_THRESHOLD: usize = 4096;

#[cfg(test)]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance, or `None` once the running sum exceeds `bound`.
/// Partial sums only grow, so skipping never changes the result.
#[inline]
fn dist2_within(a: &[f64], b: &[f64], bound: f64) -> Option<f64> {
    let mut s = 0.0;
    for (ca, cb) in a.chunks(4).zip(b.chunks(4)) {
        for (x, y) in ca.iter().zip(cb) {
            s += (x - y) * (x - y);
        }
        if s > bound {
            return None;
        }
    }
    Some(s)
}

#[inline]
fn before(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Sorted bounded buffer of the best `(dist², index)` pairs seen so far.
struct TopK {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn worst(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.k - 1].0
        }
    }

    #[inline]
    fn offer(&mut self, cand: (f64, usize)) {
        if self.items.len() == self.k {
            if !before(cand, self.items[self.k - 1]) {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|&e| before(e, cand));
        self.items.insert(pos, cand);
    }
}

/// For each point, the `k` nearest other points (ascending distance, ties by
/// lower index). `points` is row-major `n×c`. Returns `n·k` indices.
pub fn knn(points: &[f64], c: usize, k: usize) -> Result<Vec<usize>> {
    let n = check_layout(points, c)?;
    if k == 0 || n <= k {
        return Err(Error::Argument(format!("knn needs N > k >= 1, got N={n}, k={k}")));
    }
    search(points, c, points, k, true)
}

/// For each query row, the `k` nearest rows of `data` (self matches allowed).
pub fn knn_query(data: &[f64], queries: &[f64], c: usize, k: usize) -> Result<Vec<usize>> {
    let n = check_layout(data, c)?;
    check_layout(queries, c)?;
    if k == 0 || k > n {
        return Err(Error::Argument(format!("knn query needs 1 <= k <= N, got N={n}, k={k}")));
    }
    search(data, c, queries, k, false)
}

fn check_layout(points: &[f64], c: usize) -> Result<usize> {
    if c == 0 || !points.len().is_multiple_of(c) {
        return Err(Error::shape("knn", format!("{} values do not form rows of width {c}", points.len())));
    }
    Ok(points.len() / c)
}

fn search(data: &[f64], c: usize, queries: &[f64], k: usize, exclude_self: bool) -> Result<Vec<usize>> {
    let n = data.len() / c;
    let nq = queries.len() / c;
    let mut out = vec![0usize; nq * k];
    if n >= GRID_THRESHOLD {
        let grid = Grid::new(data, c, k);
        out.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
            let q = &queries[i * c..(i + 1) * c];
            let skip = exclude_self.then_some(i);
            fill(row, &grid.query(data, c, q, k, skip));
        });
    } else {
        let sweep = Sweep::new(data, c);
        out.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
            let q = &queries[i * c..(i + 1) * c];
            let skip = exclude_self.then_some(i);
            fill(row, &sweep.query(data, c, q, k, skip));
        });
    }
    Ok(out)
}

/// Points sorted along their widest axis. Scanning outward from the query's
/// position and stopping once the axis gap alone exceeds the current k-th
/// distance visits every point that could qualify.
struct Sweep {
    axis: usize,
    keys: Vec<f64>,
    order: Vec<usize>,
}

impl Sweep {
    fn new(data: &[f64], c: usize) -> Self {
        let n = data.len() / c;
        let var = |a: usize| {
            let m = (0..n).map(|i| data[i * c + a]).sum::<f64>() / n as f64;
            (0..n).map(|i| (data[i * c + a] - m).powi(2)).sum::<f64>()
        };
        let axis = (0..c).map(|a| (var(a), a)).fold((f64::NEG_INFINITY, 0), |b, x| if x.0 > b.0 { x } else { b }).1;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| data[x * c + axis].total_cmp(&data[y * c + axis]).then(x.cmp(&y)));
        let keys = order.iter().map(|&i| data[i * c + axis]).collect();
        Sweep { axis, keys, order }
    }

    fn query(&self, data: &[f64], c: usize, q: &[f64], k: usize, skip: Option<usize>) -> TopK {
        let x = q[self.axis];
        let n = self.keys.len();
        let mid = self.keys.partition_point(|&v| v < x);
        let (mut lo, mut hi) = (mid, mid);
        let mut top = TopK::new(k);
        loop {
            let gl = if lo > 0 { x - self.keys[lo - 1] } else { f64::INFINITY };
            let gh = if hi < n { self.keys[hi] - x } else { f64::INFINITY };
            let (gap, slot) = if gl <= gh {
                (gl, lo.wrapping_sub(1))
            } else {
                (gh, hi)
            };
            if gap == f64::INFINITY || gap * gap > top.worst() {
                break;
            }
            if gl <= gh {
                lo -= 1;
            } else {
                hi += 1;
            }
            let j = self.order[slot];
            if Some(j) == skip {
                continue;
            }
            if let Some(d) = dist2_within(q, &data[j * c..(j + 1) * c], top.worst()) {
                top.offer((d, j));
            }
        }
        top
    }
}

fn fill(row: &mut [usize], top: &TopK) {
    for (slot, &(_, j)) in row.iter_mut().zip(&top.items) {
        *slot = j;
    }
}

struct Grid {
    dims: usize,
    lo: [f64; 3],
    cell: f64,
    res: [usize; 3],
    start: Vec<usize>,
    members: Vec<usize>,
}

impl Grid {
    fn new(data: &[f64], c: usize, k: usize) -> Self {
        let n = data.len() / c;
        let dims = c.min(3);
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..dims {
            lo[a] = f64::INFINITY;
            hi[a] = f64::NEG_INFINITY;
            for i in 0..n {
                lo[a] = lo[a].min(data[i * c + a]);
                hi[a] = hi[a].max(data[i * c + a]);
            }
        }
        // aim for roughly k points per occupied cell on a surface-like set
        let target_cells = (n / k.max(2)).max(1) as f64;
        let extent: Vec<f64> = (0..dims).map(|a| (hi[a] - lo[a]).max(0.0)).collect();
        let spread: Vec<f64> = extent.iter().copied().filter(|e| *e > 0.0).collect();
        let cell = if spread.is_empty() {
            1.0
        } else {
            let vol: f64 = spread.iter().product();
            (vol / target_cells).powf(1.0 / spread.len() as f64).max(f64::MIN_POSITIVE)
        };
        let mut res = [1usize; 3];
        for a in 0..dims {
            res[a] = ((extent[a] / cell).floor() as usize + 1).min(1 << 10);
        }
        let cell_of = |p: &[f64]| -> usize {
            let mut id = 0;
            for a in 0..dims {
                let ca = (((p[a] - lo[a]) / cell) as usize).min(res[a] - 1);
                id = id * res[a] + ca;
            }
            id
        };
        let total: usize = res[..dims].iter().product();
        let mut counts = vec![0usize; total + 1];
        let ids: Vec<usize> = (0..n).map(|i| cell_of(&data[i * c..(i + 1) * c])).collect();
        for &id in &ids {
            counts[id + 1] += 1;
        }
        for i in 0..total {
            counts[i + 1] += counts[i];
        }
        let start = counts.clone();
        let mut fillp = counts;
        let mut members = vec![0usize; n];
        for (i, &id) in ids.iter().enumerate() {
            members[fillp[id]] = i;
            fillp[id] += 1;
        }
        Grid {
            dims,
            lo,
            cell,
            res,
            start,
            members,
        }
    }

    fn query(&self, data: &[f64], c: usize, q: &[f64], k: usize, skip: Option<usize>) -> TopK {
        let dims = self.dims;
        let mut home = [0isize; 3];
        for a in 0..dims {
            let f = ((q[a] - self.lo[a]) / self.cell).floor();
            home[a] = f.clamp(-1.0, self.res[a] as f64) as isize;
        }
        let mut top = TopK::new(k);
        let max_ring = (0..dims)
            .map(|a| (home[a].max(self.res[a] as isize - 1 - home[a]).max(0)) as usize + 1)
            .max()
            .unwrap_or(1);
        for ring in 0..=max_ring {
            self.visit_ring(ring as isize, &home, |cell| {
                for &j in &self.members[self.start[cell]..self.start[cell + 1]] {
                    if Some(j) == skip {
                        continue;
                    }
                    if let Some(d) = dist2_within(q, &data[j * c..(j + 1) * c], top.worst()) {
                    top.offer((d, j));
                }
                }
            });
            // every unvisited point is at least `ring·cell` away in projection
            let bound = ring as f64 * self.cell;
            if top.worst() < bound * bound {
                break;
            }
        }
        top
    }

    fn visit_ring(&self, ring: isize, home: &[isize; 3], mut f: impl FnMut(usize)) {
        let dims = self.dims;
        let mut off = [0isize; 3];
        let range = |a: usize| if a < dims { -ring..=ring } else { 0..=0 };
        for o0 in range(0) {
            off[0] = o0;
            for o1 in range(1) {
                off[1] = o1;
                for o2 in range(2) {
                    off[2] = o2;
                    let cheb = off.iter().map(|v| v.abs()).max().unwrap_or(0);
                    if cheb != ring {
                        continue;
                    }
                    let mut id = 0usize;
                    let mut inside = true;
                    for a in 0..dims {
                        let v = home[a] + off[a];
                        if v < 0 || v >= self.res[a] as isize {
                            inside = false;
                            break;
                        }
                        id = id * self.res[a] + v as usize;
                    }
                    if inside {
                        f(id);
                    }
                }
            }
        }
    }
}

/// Brute-force reference: full sort of all candidates.
#[cfg(test)]
pub(crate) fn knn_oracle(points: &[f64], c: usize, k: usize) -> Vec<usize> {
    let n = points.len() / c;
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut all: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (dist2(&points[i * c..(i + 1) * c], &points[j * c..(j + 1) * c]), j))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(all[..k].iter().map(|e| e.1));
    }
    out
}
