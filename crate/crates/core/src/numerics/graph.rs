//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output value and whatever it
//! needs for its backward rule. `backward` walks the tape once, from the root
//! down, so nodes are visited in reverse topological order.

use std::rc::Rc;

use rand::Rng;

use super::float::{gemm, MatView};
use super::{Float, NumericsError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    Transpose,
    Softmax,
    LogSumExp,
    LayerNorm,
    Gelu,
    Dropout,
    GatherRows,
    Gather,
    SplitHeads,
    MergeHeads,
    RowDot,
    SegmentSoftmax,
    SegmentLogSoftmax,
    SegmentLogSumExp,
    SegmentWeightedSum,
    SegmentCosine,
    ClampMin,
    Sum,
    Mean,
    StopGradient,
}

impl OpKind {
    pub const ALL: [OpKind; 28] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddBias,
        OpKind::Scale,
        OpKind::Transpose,
        OpKind::Softmax,
        OpKind::LogSumExp,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Dropout,
        OpKind::GatherRows,
        OpKind::Gather,
        OpKind::SplitHeads,
        OpKind::MergeHeads,
        OpKind::RowDot,
        OpKind::SegmentSoftmax,
        OpKind::SegmentLogSoftmax,
        OpKind::SegmentLogSumExp,
        OpKind::SegmentWeightedSum,
        OpKind::SegmentCosine,
        OpKind::ClampMin,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::StopGradient,
    ];
}

impl std::str::FromStr for OpKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        OpKind::ALL
            .into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown op kind {s:?}"))
    }
}

/// Contiguous variable-length groups over a flat axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths<I: IntoIterator<Item = usize>>(lengths: I) -> Self {
        let mut offsets = vec![0];
        let mut acc = 0;
        for l in lengths {
            assert!(l > 0, "empty segment");
            acc += l;
            offsets.push(acc);
        }
        Segments { offsets }
    }

    /// Number of segments.
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of elements covered.
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }
}

#[derive(Clone, Debug)]
pub(crate) struct KeyMask {
    /// Valid key count per row group.
    key_len: Vec<usize>,
    rows_per_group: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, av: MatView, bv: MatView },
    BatchMatMul { a: Var, b: Var, batch: usize, av: MatView, bv: MatView },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, c: T },
    Transpose { a: Var, rows: usize, cols: usize },
    Softmax { a: Var, mask: Option<KeyMask> },
    LogSumExp { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    Dropout { a: Var, mask: Vec<T> },
    GatherRows { table: Var, ids: Rc<Vec<usize>> },
    Gather { a: Var, idx: Rc<Vec<usize>> },
    SplitHeads { a: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { a: Var, batch: usize, seq: usize, heads: usize },
    RowDot { a: Var, b: Var },
    SegmentSoftmax { a: Var, seg: Rc<Segments> },
    SegmentLogSoftmax { a: Var, seg: Rc<Segments> },
    SegmentLogSumExp { a: Var, seg: Rc<Segments> },
    SegmentWeightedSum { w: Var, rows: Var, seg: Rc<Segments> },
    SegmentCosine { a: Var, b: Var, seg: Rc<Segments> },
    ClampMin { a: Var, min: T },
    Sum { a: Var },
    Mean { a: Var },
    StopGradient,
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Scale { .. } => OpKind::Scale,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSumExp { .. } => OpKind::LogSumExp,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Gather { .. } => OpKind::Gather,
            Op::SplitHeads { .. } => OpKind::SplitHeads,
            Op::MergeHeads { .. } => OpKind::MergeHeads,
            Op::RowDot { .. } => OpKind::RowDot,
            Op::SegmentSoftmax { .. } => OpKind::SegmentSoftmax,
            Op::SegmentLogSoftmax { .. } => OpKind::SegmentLogSoftmax,
            Op::SegmentLogSumExp { .. } => OpKind::SegmentLogSumExp,
            Op::SegmentWeightedSum { .. } => OpKind::SegmentWeightedSum,
            Op::SegmentCosine { .. } => OpKind::SegmentCosine,
            Op::ClampMin { .. } => OpKind::ClampMin,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::StopGradient => OpKind::StopGradient,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::Dim { op: op.to_string(), left: a.to_vec(), right: b.to_vec() }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: scales the upstream gradient seen by every backward rule
    /// of `kind` by 1.5, so a checker run against this graph must fail.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First node (in execution order) whose output holds NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(Var, OpKind)> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.is_finite()).map(|(i, n)| (Var(i), n.op.kind()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// `a·b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let av = MatView::new(sa[0], sa[1]);
        let mut bv = MatView::new(sb[0], sb[1]);
        if trans_b {
            bv = bv.t();
        }
        let (m, k) = av.dims();
        let (k2, n) = bv.dims();
        if k != k2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), self.data(a), av, self.data(b), bv, T::zero(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, av, bv }, rg))
    }

    /// Batched product over the leading axis: `[B×m×k]·[B×k×n]`, or with
    /// `trans_b` the second operand is `[B×n×k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let batch = sa[0];
        let av = MatView::new(sa[1], sa[2]);
        let mut bv = MatView::new(sb[1], sb[2]);
        if trans_b {
            bv = bv.t();
        }
        let (m, k) = av.dims();
        let (k2, n) = bv.dims();
        if k != k2 {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            let (asz, bsz) = (m * k, k * n);
            for i in 0..batch {
                gemm(
                    T::one(),
                    &ad[i * asz..(i + 1) * asz],
                    av,
                    &bd[i * bsz..(i + 1) * bsz],
                    bv,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![batch, m, n], out), Op::BatchMatMul { a, b, batch, av, bv }, rg))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> (Tensor<T>, bool) {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        (Tensor::from_parts(self.shape(a).to_vec(), data), self.rg(&[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let (t, rg) = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let (t, rg) = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let (t, rg) = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// Adds a length-`n` vector to every slice of the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let n = self.value(a).last_dim();
        if self.shape(bias) != [n] {
            return Err(shape_err("add_bias", self.shape(a), self.shape(bias)));
        }
        let bd = self.data(bias);
        let data: Vec<T> =
            self.data(a).chunks_exact(n).flat_map(|row| row.iter().zip(bd).map(|(&x, &b)| x + b)).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddBias { a, bias }, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale { a, c }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::Shape(format!("transpose needs a matrix, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let ad = self.data(a);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = ad[i * cols + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![cols, rows], out), Op::Transpose { a, rows, cols }, rg))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last axis where row `r` only sees its first
    /// `key_len[r / rows_per_group]` entries; the rest get probability 0.
    pub fn masked_softmax(&mut self, a: Var, key_len: Vec<usize>, rows_per_group: usize) -> Result<Var, NumericsError> {
        let outer = self.value(a).outer();
        if rows_per_group == 0 || key_len.len() * rows_per_group != outer {
            return Err(NumericsError::Shape(format!(
                "masked_softmax: {} groups of {rows_per_group} rows do not cover {outer} rows",
                key_len.len()
            )));
        }
        let n = self.value(a).last_dim();
        if key_len.iter().any(|&l| l == 0 || l > n) {
            return Err(NumericsError::Shape(format!("masked_softmax: key lengths must lie in 1..={n}")));
        }
        Ok(self.softmax_impl(a, Some(KeyMask { key_len, rows_per_group })))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<KeyMask>) -> Var {
        let n = self.value(a).last_dim();
        let mut out = vec![T::zero(); self.value(a).len()];
        for (r, (row, o)) in self.data(a).chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
            let valid = match &mask {
                Some(m) => m.key_len[r / m.rows_per_group],
                None => n,
            };
            softmax_into(&row[..valid], &mut o[..valid]);
        }
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax { a, mask }, rg)
    }

    /// log Σ exp over the last axis; the output drops that axis.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let n = self.value(a).last_dim();
        let out: Vec<T> = self.data(a).chunks_exact(n).map(lse).collect();
        let s = self.shape(a);
        let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        let t = Tensor::from_parts(shape, out);
        let rg = self.rg(&[a]);
        self.push(t, Op::LogSumExp { a }, rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        let n = self.value(a).last_dim();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", self.shape(a), self.shape(gamma)));
        }
        let eps = T::cst(eps);
        let nf = T::cst(n as f64);
        let outer = self.value(a).outer();
        let mut xhat = vec![T::zero(); outer * n];
        let mut rstd = vec![T::zero(); outer];
        let mut out = vec![T::zero(); outer * n];
        let (g, b) = (self.data(gamma), self.data(beta));
        for (r, row) in self.data(a).chunks_exact(n).enumerate() {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(&[a, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { a, gamma, beta, xhat, rstd }, rg))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let half = T::cst(0.5);
        let inv_sqrt2 = T::cst(std::f64::consts::FRAC_1_SQRT_2);
        let data = self.data(a).iter().map(|&x| half * x * (T::one() + (x * inv_sqrt2).erf())).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu { a }, rg)
    }

    /// Inverted dropout. Outside training, or with `p == 0`, returns `a`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Var {
        if !train || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let scale = T::cst(1.0 / keep);
        let mask: Vec<T> =
            (0..self.value(a).len()).map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() }).collect();
        let data = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::Dropout { a, mask }, rg)
    }

    /// Row lookup: `table: [R×d]` → `[ids.len()×d]`.
    pub fn gather_rows(&mut self, table: Var, ids: Rc<Vec<usize>>) -> Result<Var, NumericsError> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::Shape(format!("gather_rows needs a matrix, got {s:?}")));
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::Index { index: bad, bound: rows });
        }
        if ids.is_empty() {
            return Err(NumericsError::Shape("gather_rows with no ids".into()));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids.iter() {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        let rg = self.rg(&[table]);
        Ok(self.push(t, Op::GatherRows { table, ids }, rg))
    }

    /// Flat element lookup → `[idx.len()]`.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var, NumericsError> {
        let len = self.value(a).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(NumericsError::Index { index: bad, bound: len });
        }
        if idx.is_empty() {
            return Err(NumericsError::Shape("gather with no indices".into()));
        }
        let ad = self.data(a);
        let out = idx.iter().map(|&i| ad[i]).collect();
        let t = Tensor::from_parts(vec![idx.len()], out);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Gather { a, idx }, rg))
    }

    /// `[B·T × H·dh]` → `[B·H × T × dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != batch * seq || heads == 0 || !s[1].is_multiple_of(heads) {
            return Err(NumericsError::Shape(format!(
                "split_heads: shape {s:?} incompatible with batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let d = s[1];
        let dh = d / heads;
        let ad = self.data(a);
        let mut out = vec![T::zero(); ad.len()];
        for b in 0..batch {
            for t in 0..seq {
                let src = &ad[(b * seq + t) * d..(b * seq + t + 1) * d];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let t = Tensor::from_parts(vec![batch * heads, seq, dh], out);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SplitHeads { a, batch, seq, heads }, rg))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return Err(NumericsError::Shape(format!(
                "merge_heads: shape {s:?} incompatible with batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let dh = s[2];
        let d = dh * heads;
        let ad = self.data(a);
        let mut out = vec![T::zero(); ad.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let src = ((b * heads + h) * seq + t) * dh;
                    let dst = (b * seq + t) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&ad[src..src + dh]);
                }
            }
        }
        let t = Tensor::from_parts(vec![batch * seq, d], out);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::MergeHeads { a, batch, seq, heads }, rg))
    }

    /// Row-wise dot products of two `[n×d]` matrices → `[n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("row_dot", a, b)?;
        let d = self.value(a).last_dim();
        let out: Vec<T> = self
            .data(a)
            .chunks_exact(d)
            .zip(self.data(b).chunks_exact(d))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        let t = Tensor::from_parts(vec![out.len()], out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::RowDot { a, b }, rg))
    }

    fn check_seg(&self, op: &str, a: Var, seg: &Segments) -> Result<(), NumericsError> {
        if self.value(a).len() != seg.total() || self.shape(a).len() != 1 {
            return Err(NumericsError::Shape(format!(
                "{op}: vector of shape {:?} does not match segments covering {}",
                self.shape(a),
                seg.total()
            )));
        }
        Ok(())
    }

    /// Softmax within each segment of a flat vector.
    pub fn segment_softmax(&mut self, a: Var, seg: Rc<Segments>) -> Result<Var, NumericsError> {
        self.check_seg("segment_softmax", a, &seg)?;
        let ad = self.data(a);
        let mut out = vec![T::zero(); ad.len()];
        for r in seg.iter() {
            softmax_into(&ad[r.clone()], &mut out[r]);
        }
        let t = Tensor::from_parts(vec![out.len()], out);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SegmentSoftmax { a, seg }, rg))
    }

    /// Log-softmax within each segment.
    pub fn segment_log_softmax(&mut self, a: Var, seg: Rc<Segments>) -> Result<Var, NumericsError> {
        self.check_seg("segment_log_softmax", a, &seg)?;
        let ad = self.data(a);
        let mut out = vec![T::zero(); ad.len()];
        for r in seg.iter() {
            let z = lse(&ad[r.clone()]);
            for j in r {
                out[j] = ad[j] - z;
            }
        }
        let t = Tensor::from_parts(vec![out.len()], out);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SegmentLogSoftmax { a, seg }, rg))
    }

    /// log Σ exp within each segment → `[segments]`.
    pub fn segment_log_sum_exp(&mut self, a: Var, seg: Rc<Segments>) -> Result<Var, NumericsError> {
        self.check_seg("segment_log_sum_exp", a, &seg)?;
        let ad = self.data(a);
        let out: Vec<T> = seg.iter().map(|r| lse(&ad[r])).collect();
        let t = Tensor::from_parts(vec![out.len()], out);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SegmentLogSumExp { a, seg }, rg))
    }

    /// Per segment, `Σ_j w_j · rows_j` → `[segments × d]`.
    pub fn segment_weighted_sum(&mut self, w: Var, rows: Var, seg: Rc<Segments>) -> Result<Var, NumericsError> {
        self.check_seg("segment_weighted_sum", w, &seg)?;
        let rs = self.shape(rows).to_vec();
        if rs.len() != 2 || rs[0] != seg.total() {
            return Err(shape_err("segment_weighted_sum", self.shape(w), &rs));
        }
        let d = rs[1];
        let (wd, rd) = (self.data(w), self.data(rows));
        let mut out = vec![T::zero(); seg.len() * d];
        for (s, r) in seg.iter().enumerate() {
            let o = &mut out[s * d..(s + 1) * d];
            for j in r {
                let wj = wd[j];
                for (acc, &x) in o.iter_mut().zip(&rd[j * d..(j + 1) * d]) {
                    *acc += wj * x;
                }
            }
        }
        let t = Tensor::from_parts(vec![seg.len(), d], out);
        let rg = self.rg(&[w, rows]);
        Ok(self.push(t, Op::SegmentWeightedSum { w, rows, seg }, rg))
    }

    /// Cosine similarity of the two vectors restricted to each segment.
    pub fn segment_cosine(&mut self, a: Var, b: Var, seg: Rc<Segments>) -> Result<Var, NumericsError> {
        self.check_seg("segment_cosine", a, &seg)?;
        self.same_shape("segment_cosine", a, b)?;
        let (ad, bd) = (self.data(a), self.data(b));
        let out: Vec<T> = seg.iter().map(|r| cosine_parts(&ad[r.clone()], &bd[r]).0).collect();
        let t = Tensor::from_parts(vec![out.len()], out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::SegmentCosine { a, b, seg }, rg))
    }

    pub fn clamp_min(&mut self, a: Var, min: T) -> Var {
        let data = self.data(a).iter().map(|&x| if x < min { min } else { x }).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::ClampMin { a, min }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Sum divided by the element count.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::cst(self.value(a).len() as f64);
        let s = self.data(a).iter().copied().sum::<T>() / n;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    /// Identity in the forward pass; blocks all gradient flow to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(t, Op::StopGradient, false)
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, NumericsError> {
        if self.value(root).len() != 1 {
            return Err(NumericsError::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        let mut invocations = vec![0u32; n];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else { continue };
            let faulted: Vec<T>;
            let g = if self.fault == Some(node.op.kind()) {
                faulted = g.iter().map(|&x| x * T::cst(1.5)).collect();
                &faulted[..]
            } else {
                g
            };
            invocations[i] += 1;
            self.backward_node(i, g, lower);
        }
        Ok(Gradients { grads, invocations })
    }

    fn backward_node(&self, i: usize, g: &[T], lower: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul { a, b, av, bv } => {
                let (m, _) = av.dims();
                let (_, n) = bv.dims();
                let gv = MatView::new(m, n);
                if let Some(ga) = self.acc(lower, *a) {
                    gemm(T::one(), g, gv, self.data(*b), bv.t(), T::one(), ga);
                }
                if let Some(gb) = self.acc(lower, *b) {
                    if bv.transposed {
                        gemm(T::one(), g, gv.t(), self.data(*a), *av, T::one(), gb);
                    } else {
                        gemm(T::one(), self.data(*a), av.t(), g, gv, T::one(), gb);
                    }
                }
            }
            Op::BatchMatMul { a, b, batch, av, bv } => {
                let (m, k) = av.dims();
                let (_, n) = bv.dims();
                let gv = MatView::new(m, n);
                let (asz, bsz, gsz) = (m * k, k * n, m * n);
                if let Some(ga) = self.acc(lower, *a) {
                    let bd = self.data(*b);
                    for t in 0..*batch {
                        gemm(
                            T::one(),
                            &g[t * gsz..(t + 1) * gsz],
                            gv,
                            &bd[t * bsz..(t + 1) * bsz],
                            bv.t(),
                            T::one(),
                            &mut ga[t * asz..(t + 1) * asz],
                        );
                    }
                }
                if let Some(gb) = self.acc(lower, *b) {
                    let ad = self.data(*a);
                    for t in 0..*batch {
                        let gs = &g[t * gsz..(t + 1) * gsz];
                        let as_ = &ad[t * asz..(t + 1) * asz];
                        let out = &mut gb[t * bsz..(t + 1) * bsz];
                        if bv.transposed {
                            gemm(T::one(), gs, gv.t(), as_, *av, T::one(), out);
                        } else {
                            gemm(T::one(), as_, av.t(), gs, gv, T::one(), out);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.acc(lower, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(lower, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.acc(lower, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(lower, *b) {
                    for (d, &x) in gb.iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = self.acc(lower, *a) {
                    for ((d, &x), &bv) in ga.iter_mut().zip(g).zip(self.data(*b)) {
                        *d += x * bv;
                    }
                }
                if let Some(gb) = self.acc(lower, *b) {
                    for ((d, &x), &av) in gb.iter_mut().zip(g).zip(self.data(*a)) {
                        *d += x * av;
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if let Some(ga) = self.acc(lower, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(lower, *bias) {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = self.acc(lower, *a) {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x * *c;
                    }
                }
            }
            Op::Transpose { a, rows, cols } => {
                if let Some(ga) = self.acc(lower, *a) {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            ga[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            Op::Softmax { a, mask } => {
                if let Some(ga) = self.acc(lower, *a) {
                    let n = node.value.last_dim();
                    for (r, ((yr, gr), dr)) in
                        y.chunks_exact(n).zip(g.chunks_exact(n)).zip(ga.chunks_exact_mut(n)).enumerate()
                    {
                        let valid = match mask {
                            Some(m) => m.key_len[r / m.rows_per_group],
                            None => n,
                        };
                        softmax_backward(&yr[..valid], &gr[..valid], &mut dr[..valid]);
                    }
                }
            }
            Op::LogSumExp { a } => {
                if let Some(ga) = self.acc(lower, *a) {
                    let x = self.data(*a);
                    let n = self.value(*a).last_dim();
                    for (r, (xr, dr)) in x.chunks_exact(n).zip(ga.chunks_exact_mut(n)).enumerate() {
                        for (d, &xv) in dr.iter_mut().zip(xr) {
                            *d += g[r] * (xv - y[r]).exp();
                        }
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta, xhat, rstd } => {
                let n = node.value.last_dim();
                let gam = self.data(*gamma);
                if let Some(ga) = self.acc(lower, *a) {
                    let nf = T::cst(n as f64);
                    for (r, dr) in ga.chunks_exact_mut(n).enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            let dxh = gr[j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 /= nf;
                        m2 /= nf;
                        for j in 0..n {
                            let dxh = gr[j] * gam[j];
                            dr[j] += rstd[r] * (dxh - m1 - xr[j] * m2);
                        }
                    }
                }
                if let Some(gg) = self.acc(lower, *gamma) {
                    for (gr, xr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(lower, *beta) {
                    for gr in g.chunks_exact(n) {
                        add_into(gb, gr);
                    }
                }
            }
            Op::Gelu { a } => {
                if let Some(ga) = self.acc(lower, *a) {
                    let half = T::cst(0.5);
                    let inv_sqrt2 = T::cst(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = T::cst(0.398_942_280_401_432_7);
                    for ((d, &x), &gv) in ga.iter_mut().zip(self.data(*a)).zip(g) {
                        let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                        *d += gv * (cdf + x * pdf);
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(ga) = self.acc(lower, *a) {
                    for ((d, &x), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *d += x * m;
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if let Some(gt) = self.acc(lower, *table) {
                    let d = node.value.last_dim();
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Gather { a, idx } => {
                if let Some(ga) = self.acc(lower, *a) {
                    for (&i, &x) in idx.iter().zip(g) {
                        ga[i] += x;
                    }
                }
            }
            Op::SplitHeads { a, batch, seq, heads } => {
                if let Some(ga) = self.acc(lower, *a) {
                    let dh = node.value.last_dim();
                    let d = dh * heads;
                    for b in 0..*batch {
                        for t in 0..*seq {
                            for h in 0..*heads {
                                let src = ((b * heads + h) * seq + t) * dh;
                                let dst = (b * seq + t) * d + h * dh;
                                add_into(&mut ga[dst..dst + dh], &g[src..src + dh]);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { a, batch, seq, heads } => {
                if let Some(ga) = self.acc(lower, *a) {
                    let d = node.value.last_dim();
                    let dh = d / heads;
                    for b in 0..*batch {
                        for t in 0..*seq {
                            for h in 0..*heads {
                                let dst = ((b * heads + h) * seq + t) * dh;
                                let src = (b * seq + t) * d + h * dh;
                                add_into(&mut ga[dst..dst + dh], &g[src..src + dh]);
                            }
                        }
                    }
                }
            }
            Op::RowDot { a, b } => {
                let d = self.value(*a).last_dim();
                if let Some(ga) = self.acc(lower, *a) {
                    let bd = self.data(*b);
                    for (r, &gv) in g.iter().enumerate() {
                        for j in r * d..(r + 1) * d {
                            ga[j] += gv * bd[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(lower, *b) {
                    let ad = self.data(*a);
                    for (r, &gv) in g.iter().enumerate() {
                        for j in r * d..(r + 1) * d {
                            gb[j] += gv * ad[j];
                        }
                    }
                }
            }
            Op::SegmentSoftmax { a, seg } => {
                if let Some(ga) = self.acc(lower, *a) {
                    for r in seg.iter() {
                        softmax_backward(&y[r.clone()], &g[r.clone()], &mut ga[r]);
                    }
                }
            }
            Op::SegmentLogSoftmax { a, seg } => {
                if let Some(ga) = self.acc(lower, *a) {
                    for r in seg.iter() {
                        let gs: T = g[r.clone()].iter().copied().sum();
                        for j in r {
                            ga[j] += g[j] - y[j].exp() * gs;
                        }
                    }
                }
            }
            Op::SegmentLogSumExp { a, seg } => {
                if let Some(ga) = self.acc(lower, *a) {
                    let x = self.data(*a);
                    for (s, r) in seg.iter().enumerate() {
                        for j in r {
                            ga[j] += g[s] * (x[j] - y[s]).exp();
                        }
                    }
                }
            }
            Op::SegmentWeightedSum { w, rows, seg } => {
                let d = node.value.last_dim();
                if let Some(gw) = self.acc(lower, *w) {
                    let rd = self.data(*rows);
                    for (s, r) in seg.iter().enumerate() {
                        let gs = &g[s * d..(s + 1) * d];
                        for j in r {
                            gw[j] += gs.iter().zip(&rd[j * d..(j + 1) * d]).map(|(&p, &q)| p * q).sum::<T>();
                        }
                    }
                }
                if let Some(gr) = self.acc(lower, *rows) {
                    let wd = self.data(*w);
                    for (s, r) in seg.iter().enumerate() {
                        let gs = &g[s * d..(s + 1) * d];
                        for j in r {
                            for (acc, &x) in gr[j * d..(j + 1) * d].iter_mut().zip(gs) {
                                *acc += wd[j] * x;
                            }
                        }
                    }
                }
            }
            Op::SegmentCosine { a, b, seg } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                for (target, other) in [(*a, bd), (*b, ad)] {
                    let Some(gt) = self.acc(lower, target) else { continue };
                    let own = self.data(target);
                    for (s, r) in seg.iter().enumerate() {
                        let (cos, na, nb) = cosine_parts(&own[r.clone()], &other[r.clone()]);
                        if na == T::zero() || nb == T::zero() {
                            continue;
                        }
                        for j in r {
                            gt[j] += g[s] * (other[j] / (na * nb) - cos * own[j] / (na * na));
                        }
                    }
                }
            }
            Op::ClampMin { a, min } => {
                if let Some(ga) = self.acc(lower, *a) {
                    for ((d, &x), &gv) in ga.iter_mut().zip(self.data(*a)).zip(g) {
                        if x >= *min {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.acc(lower, *a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = self.acc(lower, *a) {
                    let gv = g[0] / T::cst(ga.len() as f64);
                    for d in ga.iter_mut() {
                        *d += gv;
                    }
                }
            }
        }
    }

    /// Lazily-allocated gradient buffer for `v`, or `None` when `v` does
    /// not take gradients.
    fn acc<'a>(&self, lower: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(lower[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    invocations: Vec<u32>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the root with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a dense vector, zero where nothing flowed.
    pub fn dense(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// How many times each node's backward rule ran.
    pub fn rule_invocations(&self) -> &[u32] {
        &self.invocations
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn lse<T: Float>(x: &[T]) -> T {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    let s: T = x.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_into<T: Float>(x: &[T], out: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn softmax_backward<T: Float>(y: &[T], g: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
        *d += yv * (gv - dot);
    }
}

/// (cosine, ‖a‖, ‖b‖); cosine is 0 when either norm vanishes.
pub(crate) fn cosine_parts<T: Float>(a: &[T], b: &[T]) -> (T, T, T) {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return (T::zero(), na, nb);
    }
    (dot / (na * nb), na, nb)
}
