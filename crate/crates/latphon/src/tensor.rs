//! Dense tensor operations with tape-based reverse-mode automatic
//! differentiation: exactly the op set the transducer needs.
//!
//! Every node on a [`Tape`] is rank-2 (`rows × cols`, row-major); callers
//! flatten higher-rank data, e.g. a `[B, T, d]` activation becomes
//! `[B·T, d]`. Parameter leaves borrow their data from the owning model
//! (`Storage::View`), so a tape can be built and dropped per step without
//! copying weights. Gradients accumulate with `+=` and are never cleared by
//! [`Tape::backward`]; running backward twice doubles them.

use crate::scalar::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Epsilon added to the variance in layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("target id {id} at position {pos} out of range for {n_classes} classes")]
    TargetOutOfRange { id: u32, pos: usize, n_classes: usize },
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Storage<'a, F> {
    Owned(Vec<F>),
    View(&'a [F]),
}

impl<F> Storage<'_, F> {
    fn as_slice(&self) -> &[F] {
        match self {
            Storage::Owned(v) => v,
            Storage::View(s) => s,
        }
    }
}

enum Op<F> {
    Leaf,
    /// C = A·B
    Matmul { a: TensorId, b: TensorId },
    /// C = A·Bᵀ
    MatmulBt { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    /// [m,n] + broadcast [1,n]
    AddRow { a: TensorId, row: TensorId },
    Scale { a: TensorId, k: F },
    Gelu { a: TensorId },
    SoftmaxRows { a: TensorId },
    LayerNorm { a: TensorId, gain: TensorId, bias: TensorId, mu: Vec<F>, rstd: Vec<F> },
    /// Gather rows of `table` by id.
    Embed { table: TensorId, ids: Vec<u32> },
    Rope { a: TensorId, positions: Vec<usize>, theta: f64 },
    Dropout { a: TensorId, keep: Vec<bool>, scale: F },
    SliceRows { a: TensorId, start: usize },
    ConcatRows { parts: Vec<TensorId> },
    SliceCols { a: TensorId, start: usize },
    ConcatCols { parts: Vec<TensorId> },
    CrossEntropyMasked { logits: TensorId, mask: Vec<bool>, probs: Vec<F>, n_unmasked: usize },
    SumAll { a: TensorId },
}

struct Node<'a, F> {
    rows: usize,
    cols: usize,
    data: Storage<'a, F>,
    grad: Option<Vec<F>>,
    op: Op<F>,
}

/// Records executed operations for reverse-mode differentiation.
pub struct Tape<'a, F: Scalar> {
    nodes: Vec<Node<'a, F>>,
}

impl<'a, F: Scalar> Default for Tape<'a, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, F: Scalar> Tape<'a, F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<F>, op: Op<F>) -> TensorId {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node { rows, cols, data: Storage::Owned(data), grad: None, op });
        TensorId(self.nodes.len() - 1)
    }

    /// New owned leaf (inputs, constants).
    pub fn leaf(&mut self, data: Vec<F>, rows: usize, cols: usize) -> TensorId {
        assert_eq!(rows * cols, data.len(), "leaf data length must match shape");
        self.push(rows, cols, data, Op::Leaf)
    }

    /// New leaf borrowing parameter data owned elsewhere.
    pub fn leaf_view(&mut self, data: &'a [F], rows: usize, cols: usize) -> TensorId {
        assert_eq!(rows * cols, data.len(), "leaf data length must match shape");
        self.nodes.push(Node { rows, cols, data: Storage::View(data), grad: None, op: Op::Leaf });
        TensorId(self.nodes.len() - 1)
    }

    pub fn data(&self, t: TensorId) -> &[F] {
        self.nodes[t.0].data.as_slice()
    }

    pub fn shape(&self, t: TensorId) -> (usize, usize) {
        let n = &self.nodes[t.0];
        (n.rows, n.cols)
    }

    /// Gradient accumulated by [`Tape::backward`], if any reached this node.
    pub fn grad(&self, t: TensorId) -> Option<&[F]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, t: TensorId) -> F {
        let n = &self.nodes[t.0];
        assert_eq!((n.rows, n.cols), (1, 1), "scalar_value on non-scalar node");
        n.data.as_slice()[0]
    }

    /// C[m,n] = A[m,k] · B[k,n]
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul {m}x{ka} by {kb}x{n}: inner dimensions differ"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        mm_acc(self.data(a), m, ka, self.data(b), n, &mut out);
        Ok(self.push(m, n, out, Op::Matmul { a, b }))
    }

    /// C[m,n] = A[m,k] · B[n,k]ᵀ
    pub fn matmul_bt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        if ka != kb {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul_bt {m}x{ka} by transposed {n}x{kb}: inner dimensions differ"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        mm_bt_acc(self.data(a), m, ka, self.data(b), n, &mut out);
        Ok(self.push(m, n, out, Op::MatmulBt { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        assert_eq!((m, n), self.shape(b), "add requires equal shapes");
        let out: Vec<F> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        self.push(m, n, out, Op::Add { a, b })
    }

    /// Broadcast-add a 1xN row (bias) to every row of A.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row requires a 1x{n} row");
        let r = self.data(row).to_vec();
        let mut out = self.data(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += r[j];
            }
        }
        self.push(m, n, out, Op::AddRow { a, row })
    }

    pub fn scale(&mut self, a: TensorId, k: F) -> TensorId {
        let (m, n) = self.shape(a);
        let out: Vec<F> = self.data(a).iter().map(|&x| x * k).collect();
        self.push(m, n, out, Op::Scale { a, k })
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let out: Vec<F> = self.data(a).iter().map(|&x| gelu_fwd(x)).collect();
        self.push(m, n, out, Op::Gelu { a })
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        assert!(n >= 1, "softmax_rows requires at least one column");
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_row_inplace(row);
        }
        self.push(m, n, out, Op::SoftmaxRows { a })
    }

    /// Per-row normalization to zero mean / unit variance, then affine.
    pub fn layernorm(&mut self, a: TensorId, gain: TensorId, bias: TensorId) -> TensorId {
        let (m, d) = self.shape(a);
        assert_eq!(self.shape(gain), (1, d), "layernorm gain must be 1x{d}");
        assert_eq!(self.shape(bias), (1, d), "layernorm bias must be 1x{d}");
        let eps = F::from_f64_c(LAYERNORM_EPS);
        let inv_d = F::one() / F::from_f64_c(d as f64);
        let mut out = vec![F::zero(); m * d];
        let mut mu = vec![F::zero(); m];
        let mut rstd = vec![F::zero(); m];
        {
            let x = self.data(a);
            let g = self.data(gain);
            let b = self.data(bias);
            for i in 0..m {
                let row = &x[i * d..(i + 1) * d];
                let mean = row.iter().copied().sum::<F>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
                let r = (var + eps).sqrt().recip();
                mu[i] = mean;
                rstd[i] = r;
                for j in 0..d {
                    out[i * d + j] = (row[j] - mean) * r * g[j] + b[j];
                }
            }
        }
        self.push(m, d, out, Op::LayerNorm { a, gain, bias, mu, rstd })
    }

    /// Gather rows of an embedding table: out[i] = table[ids[i]].
    pub fn embed(&mut self, table: TensorId, ids: &[u32]) -> TensorId {
        let (v, d) = self.shape(table);
        let mut out = vec![F::zero(); ids.len() * d];
        {
            let t = self.data(table);
            for (i, &id) in ids.iter().enumerate() {
                assert!((id as usize) < v, "embedding id {id} out of range for {v} rows");
                out[i * d..(i + 1) * d].copy_from_slice(&t[id as usize * d..(id as usize + 1) * d]);
            }
        }
        self.push(ids.len(), d, out, Op::Embed { table, ids: ids.to_vec() })
    }

    /// Rotate dimension pairs of each row by its position-dependent angles:
    /// pair (2i, 2i+1) of the row at position p turns by p·theta^(−2i/cols).
    pub fn rope(&mut self, a: TensorId, positions: &[usize], theta: f64) -> TensorId {
        let (m, d) = self.shape(a);
        assert_eq!(positions.len(), m, "one position per row");
        assert_eq!(d % 2, 0, "rope requires an even per-head dimension");
        let mut out = self.data(a).to_vec();
        rope_rotate(&mut out, m, d, positions, theta, false);
        self.push(m, d, out, Op::Rope { a, positions: positions.to_vec(), theta })
    }

    /// Inverted dropout driven by an explicit RNG stream; kept activations
    /// scale by 1/(1−p). `p = 0` is the identity.
    pub fn dropout(&mut self, a: TensorId, p: f64, rng: &mut ChaCha8Rng) -> TensorId {
        if p == 0.0 {
            return a;
        }
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
        let (m, n) = self.shape(a);
        let keep: Vec<bool> = (0..m * n).map(|_| rng.random::<f64>() >= p).collect();
        let scale = F::from_f64_c(1.0 / (1.0 - p));
        let out: Vec<F> = self
            .data(a)
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x * scale } else { F::zero() })
            .collect();
        self.push(m, n, out, Op::Dropout { a, keep, scale })
    }

    /// Rows start..start+len of A.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let (m, n) = self.shape(a);
        assert!(start + len <= m, "slice_rows {start}+{len} exceeds {m} rows");
        let out = self.data(a)[start * n..(start + len) * n].to_vec();
        self.push(len, n, out, Op::SliceRows { a, start })
    }

    /// Vertical concatenation of parts with equal column counts.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let (_, n) = self.shape(parts[0]);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            assert_eq!(pn, n, "concat_rows requires equal column counts");
            rows += pm;
            out.extend_from_slice(self.data(p));
        }
        self.push(rows, n, out, Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Columns start..start+len of A.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let (m, n) = self.shape(a);
        assert!(start + len <= n, "slice_cols {start}+{len} exceeds {n} cols");
        let mut out = vec![F::zero(); m * len];
        {
            let x = self.data(a);
            for i in 0..m {
                out[i * len..(i + 1) * len]
                    .copy_from_slice(&x[i * n + start..i * n + start + len]);
            }
        }
        self.push(m, len, out, Op::SliceCols { a, start })
    }

    /// Horizontal concatenation of parts with equal row counts.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (m, _) = self.shape(parts[0]);
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = vec![F::zero(); m * total];
        let mut col = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            assert_eq!(pm, m, "concat_cols requires equal row counts");
            let x = self.data(p);
            for i in 0..m {
                out[i * total + col..i * total + col + pn]
                    .copy_from_slice(&x[i * pn..(i + 1) * pn]);
            }
            col += pn;
        }
        self.push(m, total, out, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, averaged over positions where `mask` is true. A fully
    /// masked batch yields 0 with zero gradients.
    pub fn cross_entropy_masked(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<TensorId, TensorError> {
        let (m, v) = self.shape(logits);
        if targets.len() != m || mask.len() != m {
            return Err(TensorError::ShapeMismatch(format!(
                "cross_entropy: {m} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let mut probs = vec![F::zero(); m * v];
        let mut total = F::zero();
        let mut n_unmasked = 0usize;
        {
            let x = self.data(logits);
            for i in 0..m {
                if !mask[i] {
                    continue;
                }
                let t = targets[i];
                if t as usize >= v {
                    return Err(TensorError::TargetOutOfRange { id: t, pos: i, n_classes: v });
                }
                let row = &x[i * v..(i + 1) * v];
                let p_row = &mut probs[i * v..(i + 1) * v];
                p_row.copy_from_slice(row);
                softmax_row_inplace(p_row);
                // -log p[target], recomputed stably from the logits.
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let lse = row.iter().map(|&l| (l - mx).exp()).sum::<F>().ln() + mx;
                total += lse - row[t as usize];
                n_unmasked += 1;
            }
        }
        let loss = if n_unmasked == 0 {
            F::zero()
        } else {
            total / F::from_f64_c(n_unmasked as f64)
        };
        let op = Op::CrossEntropyMasked {
            logits,
            mask: mask.iter().zip(targets).map(|(&m, _)| m).collect(),
            probs: probs
                .iter()
                .enumerate()
                .map(|(idx, &p)| {
                    // Store p − onehot so backward is a plain scaled add.
                    let (row, col) = (idx / v, idx % v);
                    if mask[row] && targets[row] as usize == col { p - F::one() } else { p }
                })
                .collect(),
            n_unmasked,
        };
        Ok(self.push(1, 1, vec![loss], op))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.data(a).iter().copied().sum::<F>();
        self.push(1, 1, vec![s], Op::SumAll { a })
    }

    /// Reverse-mode sweep from a scalar loss. Each call propagates through
    /// fresh buffers and then adds the result into every node's persistent
    /// grad, so running backward twice doubles all gradients exactly.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        {
            let n = &self.nodes[loss.0];
            if (n.rows, n.cols) != (1, 1) {
                return Err(TensorError::NotScalar { rows: n.rows, cols: n.cols });
            }
        }
        let mut local: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let g = match local[i].take() {
                Some(g) => g,
                None => continue,
            };
            let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = cols;
                    let mut da = vec![F::zero(); m * k];
                    mm_bt_acc(&g, m, n, self.data(*b), k, &mut da);
                    let mut db = vec![F::zero(); k * n];
                    mm_tn_acc(self.data(*a), m, k, &g, n, &mut db);
                    accum(&mut local,*a, da);
                    accum(&mut local,*b, db);
                }
                Op::MatmulBt { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = cols;
                    let mut da = vec![F::zero(); m * k];
                    mm_acc(&g, m, n, self.data(*b), k, &mut da);
                    let mut db = vec![F::zero(); n * k];
                    mm_tn_acc(&g, m, n, self.data(*a), k, &mut db);
                    accum(&mut local,*a, da);
                    accum(&mut local,*b, db);
                }
                Op::Add { a, b } => {
                    accum(&mut local,*a, g.clone());
                    accum(&mut local,*b, g.clone());
                }
                Op::AddRow { a, row } => {
                    let mut dr = vec![F::zero(); cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dr[j] += g[i * cols + j];
                        }
                    }
                    accum(&mut local,*a, g.clone());
                    accum(&mut local,*row, dr);
                }
                Op::Scale { a, k } => {
                    accum(&mut local,*a, g.iter().map(|&v| v * *k).collect());
                }
                Op::Gelu { a } => {
                    let da: Vec<F> = self
                        .data(*a)
                        .iter()
                        .zip(&g)
                        .map(|(&x, &dy)| gelu_bwd(x) * dy)
                        .collect();
                    accum(&mut local,*a, da);
                }
                Op::SoftmaxRows { a } => {
                    let y = self.nodes[i].data.as_slice();
                    let mut da = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>();
                        for c in 0..cols {
                            da[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accum(&mut local,*a, da);
                }
                Op::LayerNorm { a, gain, bias, mu, rstd } => {
                    let d = cols;
                    let inv_d = F::one() / F::from_f64_c(d as f64);
                    let mut da = vec![F::zero(); rows * d];
                    let mut dg = vec![F::zero(); d];
                    let mut db = vec![F::zero(); d];
                    {
                        let x = self.data(*a);
                        let gn = self.data(*gain);
                        for r in 0..rows {
                            let xr = &x[r * d..(r + 1) * d];
                            let gr = &g[r * d..(r + 1) * d];
                            let (m_r, s_r) = (mu[r], rstd[r]);
                            let mut sum_dxhat = F::zero();
                            let mut sum_dxhat_xhat = F::zero();
                            for j in 0..d {
                                let xhat = (xr[j] - m_r) * s_r;
                                let dy = gr[j];
                                db[j] += dy;
                                dg[j] += dy * xhat;
                                let dxhat = dy * gn[j];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            sum_dxhat *= inv_d;
                            sum_dxhat_xhat *= inv_d;
                            for j in 0..d {
                                let xhat = (xr[j] - m_r) * s_r;
                                let dxhat = gr[j] * gn[j];
                                da[r * d + j] = s_r * (dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                            }
                        }
                    }
                    accum(&mut local,*a, da);
                    accum(&mut local,*gain, dg);
                    accum(&mut local,*bias, db);
                }
                Op::Embed { table, ids } => {
                    let (v, d) = self.shape(*table);
                    let mut dt = vec![F::zero(); v * d];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        for (j, slot) in dst.iter_mut().enumerate() {
                            *slot += g[r * d + j];
                        }
                    }
                    accum(&mut local,*table, dt);
                }
                Op::Rope { a, positions, theta } => {
                    // Rotations are orthogonal: the adjoint is the inverse
                    // rotation applied to the incoming gradient.
                    let mut da = g.clone();
                    rope_rotate(&mut da, rows, cols, positions, *theta, true);
                    accum(&mut local,*a, da);
                }
                Op::Dropout { a, keep, scale } => {
                    let da: Vec<F> = g
                        .iter()
                        .zip(keep)
                        .map(|(&dy, &k)| if k { dy * *scale } else { F::zero() })
                        .collect();
                    accum(&mut local,*a, da);
                }
                Op::SliceRows { a, start } => {
                    let (am, an) = self.shape(*a);
                    let mut da = vec![F::zero(); am * an];
                    da[start * an..start * an + g.len()].copy_from_slice(&g);
                    accum(&mut local,*a, da);
                }
                Op::ConcatRows { parts } => {
                    let mut row = 0;
                    for &p in parts {
                        let (pm, pn) = self.shape(p);
                        let dp = g[row * pn..(row + pm) * pn].to_vec();
                        row += pm;
                        accum(&mut local,p, dp);
                    }
                }
                Op::SliceCols { a, start } => {
                    let (am, an) = self.shape(*a);
                    let mut da = vec![F::zero(); am * an];
                    for r in 0..rows {
                        da[r * an + start..r * an + start + cols]
                            .copy_from_slice(&g[r * cols..(r + 1) * cols]);
                    }
                    accum(&mut local,*a, da);
                }
                Op::ConcatCols { parts } => {
                    let mut col = 0;
                    for &p in parts {
                        let (pm, pn) = self.shape(p);
                        let mut dp = vec![F::zero(); pm * pn];
                        for r in 0..pm {
                            dp[r * pn..(r + 1) * pn]
                                .copy_from_slice(&g[r * cols + col..r * cols + col + pn]);
                        }
                        col += pn;
                        accum(&mut local,p, dp);
                    }
                }
                Op::CrossEntropyMasked { logits, mask, probs, n_unmasked } => {
                    if *n_unmasked > 0 {
                        let (m, v) = self.shape(*logits);
                        let scale = g[0] / F::from_f64_c(*n_unmasked as f64);
                        let mut dl = vec![F::zero(); m * v];
                        for r in 0..m {
                            if !mask[r] {
                                continue;
                            }
                            for c in 0..v {
                                dl[r * v + c] = probs[r * v + c] * scale;
                            }
                        }
                        accum(&mut local,*logits, dl);
                    }
                }
                Op::SumAll { a } => {
                    let (am, an) = self.shape(*a);
                    accum(&mut local,*a, vec![g[0]; am * an]);
                }
            }
            // Fold this node's share into its persistent gradient.
            match &mut self.nodes[i].grad {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(g) {
                        *e += v;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accum<F: Scalar>(slots: &mut [Option<Vec<F>>], t: TensorId, contrib: Vec<F>) {
    match &mut slots[t.0] {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// out[m,n] += a[m,k] · b[k,n]
fn mm_acc<F: Scalar>(a: &[F], m: usize, k: usize, b: &[F], n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
fn mm_bt_acc<F: Scalar>(a: &[F], m: usize, k: usize, b: &[F], n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum::<F>();
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
fn mm_tn_acc<F: Scalar>(a: &[F], m: usize, k: usize, b: &[F], n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

fn softmax_row_inplace<F: Scalar>(row: &mut [F]) {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64_c(0.7978845608028654); // sqrt(2/pi)
    let k = F::from_f64_c(0.044715);
    let half = F::from_f64_c(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64_c(0.7978845608028654);
    let k = F::from_f64_c(0.044715);
    let half = F::from_f64_c(0.5);
    let three = F::from_f64_c(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * k * x * x)
}

/// Rotate (or counter-rotate, for the adjoint) dimension pairs in place.
/// Position 0 is skipped outright so it is the identity at the bit level.
pub(crate) fn rope_rotate<F: Scalar>(
    data: &mut [F],
    rows: usize,
    cols: usize,
    positions: &[usize],
    theta: f64,
    invert: bool,
) {
    let half = cols / 2;
    for r in 0..rows {
        if positions[r] == 0 {
            continue;
        }
        let p = positions[r] as f64;
        let row = &mut data[r * cols..(r + 1) * cols];
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / cols as f64);
            let angle = if invert { -p * freq } else { p * freq };
            let (sin, cos) = (F::from_f64_c(angle.sin()), F::from_f64_c(angle.cos()));
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * cos - x1 * sin;
            row[2 * i + 1] = x0 * sin + x1 * cos;
        }
    }
}
