use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

use super::{NdiffError, Real, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    graph: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Axis-aligned node lattice used by the trilinear primitives. Node `(i, j, k)`
/// sits at `origin + (i, j, k) * cell` and has linear index `(i * ny + j) * nz + k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub origin: [f64; 3],
    pub cell: [f64; 3],
    pub dims: [usize; 3],
}

impl Lattice {
    pub fn node_count(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn upper(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + self.cell[a] * (self.dims[a] - 1) as f64)
    }

    /// Corner node indices, trilinear weights and the per-axis local
    /// coordinate derivative (zero on axes where the point was clamped).
    #[inline]
    pub fn locate(&self, p: [f64; 3]) -> ([u32; 8], [f64; 8], [f64; 3], [f64; 3]) {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        let mut dfrac = [0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let mut u = (p[a] - self.origin[a]) / self.cell[a];
            let hi = (n - 1) as f64;
            let mut slope = 1.0 / self.cell[a];
            if u <= 0.0 {
                if u < 0.0 {
                    slope = 0.0;
                }
                u = 0.0;
            } else if u >= hi {
                if u > hi {
                    slope = 0.0;
                }
                u = hi;
            }
            let i0 = (u.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = u - i0 as f64;
            dfrac[a] = slope;
        }
        let mut idx = [0u32; 8];
        let mut w = [0f64; 8];
        for c in 0..8 {
            let (a, b, d) = ((c >> 2) & 1, (c >> 1) & 1, c & 1);
            idx[c] = self.node_index(base[0] + a, base[1] + b, base[2] + d) as u32;
            let wx = if a == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if b == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if d == 1 { frac[2] } else { 1.0 - frac[2] };
            w[c] = wx * wy * wz;
        }
        (idx, w, frac, dfrac)
    }
}

/// Node-major index of a scatter target list: entries feeding node `n` are
/// `entries[offsets[n]..offsets[n + 1]]`, in ascending source order.
#[derive(Debug)]
pub struct ScatterPlan {
    offsets: Vec<u32>,
    entries: Vec<u32>,
}

impl ScatterPlan {
    pub fn build(idx: &[u32], n_out: usize) -> Self {
        let mut offsets = vec![0u32; n_out + 1];
        for &n in idx {
            offsets[n as usize + 1] += 1;
        }
        for n in 0..n_out {
            offsets[n + 1] += offsets[n];
        }
        let mut cursor: Vec<u32> = offsets[..n_out].to_vec();
        let mut entries = vec![0u32; idx.len()];
        for (e, &n) in idx.iter().enumerate() {
            let c = &mut cursor[n as usize];
            entries[*c as usize] = e as u32;
            *c += 1;
        }
        Self { offsets, entries }
    }

    pub fn entries_for(&self, node: usize) -> &[u32] {
        &self.entries[self.offsets[node] as usize..self.offsets[node + 1] as usize]
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddConst(usize),
    MulConstRows(usize, Arc<Vec<T>>),
    MatMul(usize, usize),
    Relu(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Sigmoid(usize),
    Clamp(usize, T, T),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    SumGroups(usize, usize),
    CumsumExclusive(usize, usize),
    Concat(Vec<usize>),
    Gather(usize, Arc<Vec<u32>>),
    WeightedGather {
        src: usize,
        weights: usize,
        idx: Arc<Vec<u32>>,
    },
    WeightedScatter {
        values: usize,
        weights: usize,
        idx: Arc<Vec<u32>>,
    },
    TrilinearWeights {
        pos: usize,
        dfrac: Arc<Vec<T>>,
    },
    RowNorm(usize),
    Detach,
    Reshape(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddConst(..) => "add_const",
            Op::MulConstRows(..) => "mul_const_rows",
            Op::MatMul(..) => "matmul",
            Op::Relu(..) => "relu",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::SumGroups(..) => "sum_groups",
            Op::CumsumExclusive(..) => "cumsum_exclusive",
            Op::Concat(..) => "concat",
            Op::Gather(..) => "gather",
            Op::WeightedGather { .. } => "weighted_gather",
            Op::WeightedScatter { .. } => "weighted_scatter_add",
            Op::TrilinearWeights { .. } => "trilinear_weights",
            Op::RowNorm(..) => "row_norm",
            Op::Detach => "detach",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run computation graph. Every primitive evaluates eagerly when it
/// is recorded; [`Graph::backward`] then sweeps the nodes in reverse order.
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> NdiffError {
    NdiffError::Shape { op, detail }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            index,
            graph: self.id,
        }
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.graph, self.id, "variable belongs to another graph");
        &self.nodes[v.index]
    }

    fn ng(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Records a leaf. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    /// Scans recorded values and reports the first node holding a NaN or an
    /// infinity.
    pub fn check_finite(&self) -> Result<(), NdiffError> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.all_finite() {
                return Err(NdiffError::NonFinite {
                    node: i,
                    op: n.op.name(),
                });
            }
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NdiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var, NdiffError> {
        self.same_shape(op.name(), a, b)?;
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    fn unary(&mut self, op: Op<T>, a: Var, f: impl Fn(T) -> T) -> Var {
        let value = self.node(a).value.map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        self.binary(Op::Add(a.index, b.index), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        self.binary(Op::Sub(a.index, b.index), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        self.binary(Op::Mul(a.index, b.index), a, b, |x, y| x * y)
    }

    /// `a [m, n] + b [n]` with `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        let n = va.cols();
        if vb.len() != n {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", va.shape(), vb.shape())));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (x, &y) in row.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::AddRow(a.index, b.index), ng))
    }

    /// `a [m, n] * s [m, 1]` with `s` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var, NdiffError> {
        let (va, vs) = (&self.node(a).value, &self.node(s).value);
        let (m, n) = (va.rows(), va.cols());
        if vs.len() != m {
            return Err(shape_err("mul_col", format!("{:?} * col {:?}", va.shape(), vs.shape())));
        }
        let mut data = va.data().to_vec();
        if n > 0 {
            for (row, &c) in data.chunks_mut(n).zip(vs.data()) {
                for x in row {
                    *x *= c;
                }
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(value, Op::MulCol(a.index, s.index), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(Op::Scale(a.index, c), a, |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::ONE)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(Op::AddScalar(a.index), a, |x| x + c)
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var, NdiffError> {
        let va = &self.node(a).value;
        if va.shape() != c.shape() {
            return Err(shape_err("add_const", format!("{:?} vs {:?}", va.shape(), c.shape())));
        }
        let data = va.data().iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::AddConst(a.index), ng))
    }

    /// Scales row `i` by the constant `c[i]`; no gradient flows to `c`.
    pub fn mul_const_rows(&mut self, a: Var, c: Arc<Vec<T>>) -> Result<Var, NdiffError> {
        let va = &self.node(a).value;
        let (m, n) = (va.rows(), va.cols());
        if c.len() != m {
            return Err(shape_err("mul_const_rows", format!("{m} rows vs {} factors", c.len())));
        }
        let mut data = va.data().to_vec();
        if n > 0 {
            for (row, &s) in data.chunks_mut(n).zip(c.iter()) {
                for x in row {
                    *x *= s;
                }
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::MulConstRows(a.index, c), ng))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m, k, n, T::ONE, va.data(), k as isize, 1, vb.data(), n as isize, 1, T::ZERO, &mut out,
            n as isize, 1,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a.index, b.index), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Op::Relu(a.index), a, |x| if x > T::ZERO { x } else { T::ZERO })
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Op::Sin(a.index), a, |x| x.sin())
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Op::Cos(a.index), a, |x| x.cos())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a.index), a, |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a.index), a, |x| x.ln())
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Op::Softplus(a.index), a, softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a.index), a, sigmoid)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(Op::Clamp(a.index, lo, hi), a, move |x| x.max(lo).min(hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.node(a).value.data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a.index), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.node(a).value;
        let n = v.len().max(1);
        let s: T = v.data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s / T::from_f64(n as f64)), Op::Mean(a.index), ng)
    }

    /// Row sums: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = &self.node(a).value;
        let (m, n) = (v.rows(), v.cols());
        let data: Vec<T> = if n == 0 {
            vec![T::ZERO; m]
        } else {
            v.data().chunks(n).map(|r| r.iter().copied().sum()).collect()
        };
        let ng = self.ng(a);
        self.push(Tensor::matrix(m, 1, data), Op::SumCols(a.index), ng)
    }

    /// Sums consecutive groups of `group` rows: `[g * m, n] -> [m, n]`.
    pub fn sum_groups(&mut self, a: Var, group: usize) -> Result<Var, NdiffError> {
        let v = &self.node(a).value;
        let (rows, n) = (v.rows(), v.cols());
        if group == 0 || rows % group != 0 {
            return Err(shape_err("sum_groups", format!("{rows} rows not divisible into groups of {group}")));
        }
        let m = rows / group;
        let mut out = vec![T::ZERO; m * n];
        for g in 0..m {
            let dst = &mut out[g * n..(g + 1) * n];
            for r in 0..group {
                for (d, &x) in dst.iter_mut().zip(v.row(g * group + r)) {
                    *d += x;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(m, n, out), Op::SumGroups(a.index, group), ng))
    }

    /// Exclusive prefix sum down the rows of each consecutive group of
    /// `group` rows (row `k` of a group receives the sum of rows `0..k`).
    pub fn cumsum_exclusive(&mut self, a: Var, group: usize) -> Result<Var, NdiffError> {
        let v = &self.node(a).value;
        let (rows, n) = (v.rows(), v.cols());
        if group == 0 || rows % group != 0 {
            return Err(shape_err(
                "cumsum_exclusive",
                format!("{rows} rows not divisible into groups of {group}"),
            ));
        }
        let mut out = vec![T::ZERO; rows * n];
        for g in 0..rows / group {
            let mut acc = vec![T::ZERO; n];
            for r in 0..group {
                let row = g * group + r;
                out[row * n..(row + 1) * n].copy_from_slice(&acc);
                for (s, &x) in acc.iter_mut().zip(v.row(row)) {
                    *s += x;
                }
            }
        }
        let ng = self.ng(a);
        let value = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(value, Op::CumsumExclusive(a.index, group), ng))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NdiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no operands".into()));
        }
        let m = self.node(parts[0]).value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.node(p).value;
            if v.rows() != m {
                return Err(shape_err("concat", format!("row count {} vs {m}", v.rows())));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.node(p).value.row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let op = Op::Concat(parts.iter().map(|p| p.index).collect());
        Ok(self.push(Tensor::matrix(m, total, out), op, ng))
    }

    /// Selects rows: `out[r] = a[idx[r]]`.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<u32>>) -> Result<Var, NdiffError> {
        let v = &self.node(a).value;
        let (m, n) = (v.rows(), v.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= m) {
            return Err(shape_err("gather", format!("row {bad} out of {m}")));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            out.extend_from_slice(v.row(i as usize));
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(idx.len(), n, out), Op::Gather(a.index, idx), ng))
    }

    /// `out[q] = sum_j w[q, j] * src[idx[q * k + j]]` with `k = w.cols()`.
    pub fn weighted_gather(&mut self, src: Var, weights: Var, idx: Arc<Vec<u32>>) -> Result<Var, NdiffError> {
        let (vs, vw) = (&self.node(src).value, &self.node(weights).value);
        let (q, k, n, c) = (vw.rows(), vw.cols(), vs.rows(), vs.cols());
        if idx.len() != q * k {
            return Err(shape_err("weighted_gather", format!("{} indices for weights {:?}", idx.len(), vw.shape())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= n) {
            return Err(shape_err("weighted_gather", format!("row {bad} out of {n}")));
        }
        let mut out = vec![T::ZERO; q * c];
        out.par_chunks_mut(c.max(1)).enumerate().for_each(|(r, dst)| {
            for j in 0..k {
                let w = vw.data()[r * k + j];
                let s = vs.row(idx[r * k + j] as usize);
                for (d, &x) in dst.iter_mut().zip(s) {
                    *d += w * x;
                }
            }
        });
        let ng = self.ng(src) || self.ng(weights);
        let op = Op::WeightedGather {
            src: src.index,
            weights: weights.index,
            idx,
        };
        Ok(self.push(Tensor::matrix(q, c, out), op, ng))
    }

    /// Weighted scatter-add: `out[n] = sum over (p, j) with idx[p * k + j] = n
    /// of w[p, j] * values[p]`. Each output row accumulates its contributions
    /// in ascending `(p, j)` order, so the result does not depend on the
    /// number of worker threads.
    pub fn weighted_scatter_add(
        &mut self,
        values: Var,
        weights: Var,
        idx: Arc<Vec<u32>>,
        n_out: usize,
    ) -> Result<Var, NdiffError> {
        let (vv, vw) = (&self.node(values).value, &self.node(weights).value);
        let (p, k, c) = (vw.rows(), vw.cols(), vv.cols());
        if vv.rows() != p || idx.len() != p * k {
            return Err(shape_err(
                "weighted_scatter_add",
                format!("values {:?}, weights {:?}, {} indices", vv.shape(), vw.shape(), idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= n_out) {
            return Err(shape_err("weighted_scatter_add", format!("target {bad} out of {n_out}")));
        }
        let out = scatter_binned(vv.data(), c, vw.data(), k, &idx, n_out);
        let ng = self.ng(values) || self.ng(weights);
        let op = Op::WeightedScatter {
            values: values.index,
            weights: weights.index,
            idx,
        };
        Ok(self.push(Tensor::matrix(n_out, c, out), op, ng))
    }

    /// Trilinear tent weights of points `[p, 3]` on `lattice`, as `[p, 8]`,
    /// plus the corner node indices. Points outside the lattice are clamped to
    /// its boundary; clamped axes carry zero gradient.
    pub fn trilinear_weights(&mut self, pos: Var, lattice: &Lattice) -> Result<(Var, Arc<Vec<u32>>), NdiffError> {
        let vp = &self.node(pos).value;
        if vp.cols() != 3 {
            return Err(shape_err("trilinear_weights", format!("positions {:?}", vp.shape())));
        }
        if lattice.dims.iter().any(|&d| d < 2) {
            return Err(shape_err("trilinear_weights", format!("lattice {:?}", lattice.dims)));
        }
        let p = vp.rows();
        let mut idx = vec![0u32; p * 8];
        let mut w = vec![T::ZERO; p * 8];
        let mut dfrac = vec![T::ZERO; p * 6];
        for r in 0..p {
            let row = vp.row(r);
            let x = [row[0].to_f64(), row[1].to_f64(), row[2].to_f64()];
            if x.iter().any(|v| v.is_nan()) {
                return Err(NdiffError::NonFinite {
                    node: self.nodes.len(),
                    op: "trilinear_weights",
                });
            }
            let (ci, cw, frac, df) = lattice.locate(x);
            idx[r * 8..r * 8 + 8].copy_from_slice(&ci);
            for c in 0..8 {
                w[r * 8 + c] = T::from_f64(cw[c]);
            }
            for a in 0..3 {
                dfrac[r * 6 + a] = T::from_f64(frac[a]);
                dfrac[r * 6 + 3 + a] = T::from_f64(df[a]);
            }
        }
        let ng = self.ng(pos);
        let op = Op::TrilinearWeights {
            pos: pos.index,
            dfrac: Arc::new(dfrac),
        };
        let v = self.push(Tensor::matrix(p, 8, w), op, ng);
        Ok((v, Arc::new(idx)))
    }

    /// Euclidean norm of each row, `[m, n] -> [m, 1]`. The subgradient at a
    /// zero row is zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let v = &self.node(a).value;
        let (m, n) = (v.rows(), v.cols());
        let data: Vec<T> = (0..m)
            .map(|r| {
                if n == 0 {
                    T::ZERO
                } else {
                    v.row(r).iter().map(|&x| x * x).sum::<T>().sqrt()
                }
            })
            .collect();
        let ng = self.ng(a);
        self.push(Tensor::matrix(m, 1, data), Op::RowNorm(a.index), ng)
    }

    /// Copies the value and cuts gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.node(a).value.clone();
        self.push(value, Op::Detach, false)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var, NdiffError> {
        let value = self.node(a).value.clone().reshaped(shape).map_err(|e| match e {
            NdiffError::BadTensor { shape, len } => shape_err("reshape", format!("{shape:?} for {len} elements")),
            other => other,
        })?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a.index), ng))
    }

    /// Reverse sweep from `output` seeded with `seed`. Every `requires_grad`
    /// leaf that the output depends on receives a gradient; contributions from
    /// several consumers accumulate.
    pub fn backward(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>, NdiffError> {
        if output.graph != self.id || output.index >= self.nodes.len() {
            return Err(NdiffError::NotForwarded);
        }
        let out_shape = self.nodes[output.index].value.shape();
        if seed.shape() != out_shape {
            return Err(NdiffError::SeedShape {
                seed: seed.shape().to_vec(),
                output: out_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.index + 1];
        if self.nodes[output.index].needs_grad {
            grads[output.index] = Some(seed.clone());
        }
        for i in (0..=output.index).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: usize, g: Tensor<T>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, target: usize) -> bool {
        self.nodes[target].needs_grad
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn like(&self, i: usize, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.val(i).shape().to_vec(), data).expect("gradient shape")
    }

    fn elementwise_grad(&self, a: usize, g: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(g.data())
            .map(|(&x, &gy)| f(x, gy))
            .collect();
        self.like(a, data)
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, self.like(*a, g.data().to_vec()));
                self.accumulate(grads, *b, self.like(*b, g.data().to_vec()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, self.like(*a, g.data().to_vec()));
                let neg = g.data().iter().map(|&x| -x).collect();
                self.accumulate(grads, *b, self.like(*b, neg));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = self.val(*b).data().iter().zip(g.data()).map(|(&y, &gy)| y * gy).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.wants(*b) {
                    let d = self.val(*a).data().iter().zip(g.data()).map(|(&x, &gy)| x * gy).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, self.like(*a, g.data().to_vec()));
                if self.wants(*b) {
                    let n = self.val(*b).len();
                    let mut d = vec![T::ZERO; n];
                    if n > 0 {
                        for row in g.data().chunks(n) {
                            for (s, &x) in d.iter_mut().zip(row) {
                                *s += x;
                            }
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::MulCol(a, s) => {
                let (va, vs) = (self.val(*a), self.val(*s));
                let n = va.cols();
                if self.wants(*a) {
                    let mut d = g.data().to_vec();
                    if n > 0 {
                        for (row, &c) in d.chunks_mut(n).zip(vs.data()) {
                            for x in row {
                                *x *= c;
                            }
                        }
                    }
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.wants(*s) {
                    let d: Vec<T> = (0..va.rows())
                        .map(|r| {
                            va.row(r)
                                .iter()
                                .zip(&g.data()[r * n..(r + 1) * n])
                                .map(|(&x, &gy)| x * gy)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *s, self.like(*s, d));
                }
            }
            Op::Scale(a, c) => {
                let d = g.data().iter().map(|&x| x * *c).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::AddScalar(a) | Op::AddConst(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, self.like(*a, g.data().to_vec()));
            }
            Op::MulConstRows(a, c) => {
                let n = self.val(*a).cols();
                let mut d = g.data().to_vec();
                if n > 0 {
                    for (row, &s) in d.chunks_mut(n).zip(c.iter()) {
                        for x in row {
                            *x *= s;
                        }
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let mut d = vec![T::ZERO; m * k];
                    T::gemm(
                        m, n, k, T::ONE, g.data(), n as isize, 1, vb.data(), 1, n as isize, T::ZERO, &mut d,
                        k as isize, 1,
                    );
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let mut d = vec![T::ZERO; k * n];
                    T::gemm(
                        k, m, n, T::ONE, va.data(), 1, k as isize, g.data(), n as isize, 1, T::ZERO, &mut d,
                        n as isize, 1,
                    );
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::Relu(a) => {
                let d = self.elementwise_grad(*a, g, |x, gy| if x > T::ZERO { gy } else { T::ZERO });
                self.accumulate(grads, *a, d);
            }
            Op::Sin(a) => {
                let d = self.elementwise_grad(*a, g, |x, gy| x.cos() * gy);
                self.accumulate(grads, *a, d);
            }
            Op::Cos(a) => {
                let d = self.elementwise_grad(*a, g, |x, gy| -x.sin() * gy);
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = node.value.data().iter().zip(g.data()).map(|(&y, &gy)| y * gy).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Log(a) => {
                let d = self.elementwise_grad(*a, g, |x, gy| gy / x);
                self.accumulate(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = self.elementwise_grad(*a, g, |x, gy| sigmoid(x) * gy);
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gy)| y * (T::ONE - y) * gy)
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = self.elementwise_grad(*a, g, |x, gy| if x < lo || x > hi { T::ZERO } else { gy });
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.val(*a).len();
                self.accumulate(grads, *a, self.like(*a, vec![g.item(); n]));
            }
            Op::Mean(a) => {
                let n = self.val(*a).len();
                let s = g.item() / T::from_f64(n.max(1) as f64);
                self.accumulate(grads, *a, self.like(*a, vec![s; n]));
            }
            Op::SumCols(a) => {
                let n = self.val(*a).cols();
                let mut d = Vec::with_capacity(self.val(*a).len());
                for &gy in g.data() {
                    d.extend(std::iter::repeat_n(gy, n));
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::SumGroups(a, group) => {
                let va = self.val(*a);
                let n = va.cols();
                let mut d = Vec::with_capacity(va.len());
                for r in 0..va.rows() {
                    let gr = r / group;
                    d.extend_from_slice(&g.data()[gr * n..(gr + 1) * n]);
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::CumsumExclusive(a, group) => {
                // out[k] = sum_{j<k} x[j]  =>  dx[j] = sum_{k>j} dout[k]
                let va = self.val(*a);
                let (rows, n) = (va.rows(), va.cols());
                let mut d = vec![T::ZERO; rows * n];
                for grp in 0..rows / group {
                    let mut acc = vec![T::ZERO; n];
                    for r in (0..*group).rev() {
                        let row = grp * group + r;
                        d[row * n..(row + 1) * n].copy_from_slice(&acc);
                        for (s, &x) in acc.iter_mut().zip(&g.data()[row * n..(row + 1) * n]) {
                            *s += x;
                        }
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, self.like(p, d));
                    }
                    offset += w;
                }
            }
            Op::Gather(a, idx) => {
                let va = self.val(*a);
                let n = va.cols();
                let mut d = vec![T::ZERO; va.len()];
                for (r, &src) in idx.iter().enumerate() {
                    let s = src as usize;
                    for (dst, &x) in d[s * n..(s + 1) * n].iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                        *dst += x;
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::WeightedGather { src, weights, idx } => {
                let (vs, vw) = (self.val(*src), self.val(*weights));
                let (q, k, c) = (vw.rows(), vw.cols(), vs.cols());
                if self.wants(*src) {
                    let mut d = vec![T::ZERO; vs.len()];
                    for r in 0..q {
                        let gy = &g.data()[r * c..(r + 1) * c];
                        for j in 0..k {
                            let w = vw.data()[r * k + j];
                            let s = idx[r * k + j] as usize;
                            for (dst, &x) in d[s * c..(s + 1) * c].iter_mut().zip(gy) {
                                *dst += w * x;
                            }
                        }
                    }
                    self.accumulate(grads, *src, self.like(*src, d));
                }
                if self.wants(*weights) {
                    let mut d = vec![T::ZERO; q * k];
                    for r in 0..q {
                        let gy = &g.data()[r * c..(r + 1) * c];
                        for j in 0..k {
                            let s = vs.row(idx[r * k + j] as usize);
                            d[r * k + j] = s.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, *weights, self.like(*weights, d));
                }
            }
            Op::WeightedScatter { values, weights, idx } => {
                let (vv, vw) = (self.val(*values), self.val(*weights));
                let (p, k, c) = (vw.rows(), vw.cols(), vv.cols());
                if self.wants(*values) {
                    let mut d = vec![T::ZERO; p * c];
                    d.par_chunks_mut(c.max(1)).enumerate().for_each(|(r, dst)| {
                        for j in 0..k {
                            let w = vw.data()[r * k + j];
                            let n = idx[r * k + j] as usize;
                            for (o, &x) in dst.iter_mut().zip(&g.data()[n * c..(n + 1) * c]) {
                                *o += w * x;
                            }
                        }
                    });
                    self.accumulate(grads, *values, self.like(*values, d));
                }
                if self.wants(*weights) {
                    let mut d = vec![T::ZERO; p * k];
                    d.par_chunks_mut(k.max(1)).enumerate().for_each(|(r, dst)| {
                        let v = vv.row(r);
                        for (j, o) in dst.iter_mut().enumerate() {
                            let n = idx[r * k + j] as usize;
                            *o = v.iter().zip(&g.data()[n * c..(n + 1) * c]).map(|(&a, &b)| a * b).sum();
                        }
                    });
                    self.accumulate(grads, *weights, self.like(*weights, d));
                }
            }
            Op::TrilinearWeights { pos, dfrac } => {
                let p = self.val(*pos).rows();
                let mut d = vec![T::ZERO; p * 3];
                for r in 0..p {
                    let f = &dfrac[r * 6..r * 6 + 3];
                    let slope = &dfrac[r * 6 + 3..r * 6 + 6];
                    let gw = &g.data()[r * 8..r * 8 + 8];
                    for c in 0..8 {
                        let bits = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
                        let w1: [T; 3] = std::array::from_fn(|a| if bits[a] == 1 { f[a] } else { T::ONE - f[a] });
                        let dw: [T; 3] = std::array::from_fn(|a| if bits[a] == 1 { T::ONE } else { -T::ONE });
                        d[r * 3] += gw[c] * dw[0] * w1[1] * w1[2] * slope[0];
                        d[r * 3 + 1] += gw[c] * w1[0] * dw[1] * w1[2] * slope[1];
                        d[r * 3 + 2] += gw[c] * w1[0] * w1[1] * dw[2] * slope[2];
                    }
                }
                self.accumulate(grads, *pos, self.like(*pos, d));
            }
            Op::RowNorm(a) => {
                let va = self.val(*a);
                let n = va.cols();
                let mut d = vec![T::ZERO; va.len()];
                for r in 0..va.rows() {
                    let norm = node.value.data()[r];
                    if norm > T::ZERO {
                        let s = g.data()[r] / norm;
                        for (o, &x) in d[r * n..(r + 1) * n].iter_mut().zip(va.row(r)) {
                            *o = x * s;
                        }
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
        }
    }
}

/// Binned weighted scatter-add kernel used by [`Graph::weighted_scatter_add`].
pub fn scatter_binned<T: Real>(values: &[T], c: usize, weights: &[T], k: usize, idx: &[u32], n_out: usize) -> Vec<T> {
    let plan = ScatterPlan::build(idx, n_out);
    let mut out = vec![T::ZERO; n_out * c];
    if c == 0 {
        return out;
    }
    out.par_chunks_mut(c).enumerate().for_each(|(n, dst)| {
        for &e in plan.entries_for(n) {
            let e = e as usize;
            let w = weights[e];
            let src = &values[(e / k) * c..(e / k + 1) * c];
            for (d, &x) in dst.iter_mut().zip(src) {
                *d += w * x;
            }
        }
    });
    out
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    let xf = x.to_f64();
    if xf > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}
