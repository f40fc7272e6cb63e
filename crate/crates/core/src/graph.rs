//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! The graph is an eager tape: every op computes its value when recorded, so
//! data-dependent control flow (convergence checks, guard branches) can
//! inspect concrete values while building. Backward walks the tape in
//! reverse and accumulates gradients only into subtrees that contain
//! trainable parameters.
//!
//! The op set is deliberately small and fused where it matters (attention,
//! layer norm, log-sum-exp): enough to express the encoders, density heads,
//! and every training objective, nothing more.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

use crate::tensor::{gemm, Matrix};

// ── Parameters ───────────────────────────────────────────────────────────────

static PARAM_UID: AtomicU64 = AtomicU64::new(1);

/// A named trainable tensor. The value lives behind an `Arc` so graphs can
/// reference it without copying; the optimizer mutates it between steps when
/// no graph is alive.
#[derive(Debug, Clone)]
pub struct Param {
    pub uid: u64,
    pub name: String,
    pub value: Arc<Matrix>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        Param {
            uid: PARAM_UID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value: Arc::new(value),
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.value
    }

    pub fn set(&mut self, value: Matrix) {
        self.value = Arc::new(value);
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    /// rows x cols + 1 x cols, broadcast over rows
    AddRowBroadcast(Var, Var),
    ScaleConst(Var, f64),
    AddConst(Var),
    /// x * s where s is a 1x1 node
    ScaleByScalar(Var, Var),
    Recip(Var),
    Gemm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    /// ln(max(x, floor)); gradient is zero where the clamp is active
    LnClamped(Var, f64),
    Abs(Var),
    ClampMin(Var, f64),
    SumAll(Var),
    MeanAll(Var),
    RowwiseSum(Var),
    SoftmaxRows(Var),
    /// y[r] = x[r] * s[r], s is rows x 1
    RowwiseScale(Var, Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    /// fused multi-head self-attention over `batch` segments of `seq` rows
    Mha {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<Matrix>,
    },
    /// mean over each segment of `seq` rows -> batch x cols
    SegmentMeanRows {
        x: Var,
        seq: usize,
    },
    /// contiguous row range [start, start+len)
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    /// x (b*s x c) + tile (s x c) repeated per segment
    AddTileRows(Var, Var),
    /// rows x 1 of cos(a_r, b_r); rows where either norm < floor emit 0 with no gradient
    RowwiseCosine {
        a: Var,
        b: Var,
        floor: f64,
    },
    /// rows x 1 of mean_c smoothL1(a_rc - b_rc), transition point 1
    SmoothL1RowMean(Var, Var),
    /// rows x 1 of x[r, idx[r]]
    SelectCols {
        x: Var,
        idx: Vec<usize>,
    },
    /// k x 1 from k scalar nodes
    ConcatScalars(Vec<Var>),
    /// out_i = logsumexp_j((g_j - C[i,j]) / eps); g is m x 1, C is n x m
    LseShift {
        g: Var,
        cost: Arc<Matrix>,
        eps: f64,
    },
    /// sum_ij exp((f_i + g_j - C_ij)/eps) * C_ij
    TransportCost {
        f: Var,
        g: Var,
        cost: Arc<Matrix>,
        eps: f64,
    },
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, keyed by parameter uid.
pub struct Gradients {
    by_uid: BTreeMap<u64, Matrix>,
}

impl Gradients {
    pub fn get(&self, p: &Param) -> Option<&Matrix> {
        self.by_uid.get(&p.uid)
    }

    pub fn take(&mut self, p: &Param) -> Option<Matrix> {
        self.by_uid.remove(&p.uid)
    }

    pub fn is_empty(&self) -> bool {
        self.by_uid.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<(u64, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = self.value(v);
        (m.rows, m.cols)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf: no gradient ever flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant leaf sharing an existing allocation.
    pub fn constant_arc(&mut self, value: Arc<Matrix>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Matrix::scalar(v))
    }

    /// Leaf that participates in differentiation but is not a registered
    /// parameter (used by loss-level gradient checks).
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable parameter leaf; its gradient is retrievable by uid.
    pub fn param(&mut self, p: &Param) -> Var {
        let var = self.constant_arc(p.value.clone());
        self.nodes[var.0].requires_grad = true;
        self.param_vars.push((p.uid, var));
        var
    }

    // ── elementwise / structural ops ─────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "add shape");
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "sub shape");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let out = Matrix::from_vec(av.rows, av.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "mul_elem shape");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(av.rows, av.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MulElem(a, b), rg)
    }

    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows, 1, "bias must be 1 x cols");
        assert_eq!(av.cols, bv.cols, "bias width");
        let mut out = av.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += bv.data[c];
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddRowBroadcast(a, bias), rg)
    }

    pub fn scale_const(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        let rg = self.rg(a);
        self.push(out, Op::ScaleConst(a, s), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v += c;
        }
        let rg = self.rg(a);
        self.push(out, Op::AddConst(a), rg)
    }

    pub fn scale_by_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale_by_scalar needs 1x1");
        let sv = self.value(s).item();
        let mut out = self.value(x).clone();
        out.scale_assign(sv);
        let rg = self.rg(x) || self.rg(s);
        self.push(out, Op::ScaleByScalar(x, s), rg)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let out = Matrix::from_vec(
            self.value(x).rows,
            self.value(x).cols,
            self.value(x).data.iter().map(|v| 1.0 / v).collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::Recip(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.gemm(false, false, a, b)
    }

    pub fn gemm(&mut self, ta: bool, tb: bool, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = if ta { av.cols } else { av.rows };
        let n = if tb { bv.rows } else { bv.cols };
        let mut out = Matrix::zeros(m, n);
        gemm(ta, tb, av, bv, &mut out, 1.0, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Gemm { a, b, ta, tb }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = Matrix::from_vec(
            self.value(x).rows,
            self.value(x).cols,
            self.value(x).data.iter().map(|v| v.max(0.0)).collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = Matrix::from_vec(
            self.value(x).rows,
            self.value(x).cols,
            self.value(x).data.iter().map(|&v| gelu_tanh(v)).collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = Matrix::from_vec(
            self.value(x).rows,
            self.value(x).cols,
            self.value(x).data.iter().map(|&v| sigmoid(v)).collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = Matrix::from_vec(
            self.value(x).rows,
            self.value(x).cols,
            self.value(x).data.iter().map(|v| v.exp()).collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Var {
        let out = Matrix::from_vec(
            self.value(x).rows,
            self.value(x).cols,
            self.value(x).data.iter().map(|v| v.max(floor).ln()).collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::LnClamped(x, floor), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = Matrix::from_vec(
            self.value(x).rows,
            self.value(x).cols,
            self.value(x).data.iter().map(|v| v.abs()).collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::Abs(x), rg)
    }

    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        let out = Matrix::from_vec(
            self.value(x).rows,
            self.value(x).cols,
            self.value(x).data.iter().map(|v| v.max(c)).collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::ClampMin(x, c), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Matrix::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Matrix::scalar(s), Op::MeanAll(x), rg)
    }

    pub fn rowwise_sum(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Matrix::from_vec(v.rows, 1, (0..v.rows).map(|r| v.row(r).iter().sum()).collect());
        let rg = self.rg(x);
        self.push(out, Op::RowwiseSum(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = Matrix::zeros(v.rows, v.cols);
        for r in 0..v.rows {
            softmax_into(v.row(r), out.row_mut(r));
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn rowwise_scale(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        assert_eq!(sv.cols, 1, "rowwise_scale needs rows x 1 scale");
        assert_eq!(xv.rows, sv.rows, "rowwise_scale rows");
        let mut out = xv.clone();
        for r in 0..out.rows {
            let f = sv.data[r];
            for c in 0..out.cols {
                out.data[r * out.cols + c] *= f;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(out, Op::RowwiseScale(x, s), rg)
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        assert_eq!(gv.rows, 1);
        assert_eq!(bv.rows, 1);
        assert_eq!(gv.cols, xv.cols);
        assert_eq!(bv.cols, xv.cols);
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..xv.cols {
                out.data[r * xv.cols + c] = (row[c] - mean) * inv * gv.data[c] + bv.data[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNormRows { x, gamma, beta, eps }, rg)
    }

    /// Multi-head self-attention on `batch` independent segments of `seq`
    /// rows. `qkv` is (batch*seq) x 3d laid out [q | k | v].
    pub fn mha(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let qv = self.value(qkv);
        assert_eq!(qv.rows, batch * seq, "mha rows");
        assert_eq!(qv.cols % 3, 0);
        let d = qv.cols / 3;
        assert_eq!(d % heads, 0, "head split");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let results: Vec<(Matrix, Vec<Matrix>)> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let mut out_b = Matrix::zeros(seq, d);
                let mut probs_b = Vec::with_capacity(heads);
                for h in 0..heads {
                    let mut scores = Matrix::zeros(seq, seq);
                    for i in 0..seq {
                        let qi = &qv.row(b * seq + i)[h * dh..(h + 1) * dh];
                        for j in 0..seq {
                            let kj = &qv.row(b * seq + j)[d + h * dh..d + (h + 1) * dh];
                            let dot: f64 = qi.iter().zip(kj).map(|(x, y)| x * y).sum();
                            scores.data[i * seq + j] = dot * scale;
                        }
                    }
                    let mut probs = Matrix::zeros(seq, seq);
                    for i in 0..seq {
                        softmax_into(scores.row(i), probs.row_mut(i));
                    }
                    for i in 0..seq {
                        for j in 0..seq {
                            let p = probs.data[i * seq + j];
                            if p == 0.0 {
                                continue;
                            }
                            let vj = &qv.row(b * seq + j)[2 * d + h * dh..2 * d + (h + 1) * dh];
                            let orow = &mut out_b.row_mut(i)[h * dh..(h + 1) * dh];
                            for (o, v) in orow.iter_mut().zip(vj) {
                                *o += p * v;
                            }
                        }
                    }
                    probs_b.push(probs);
                }
                (out_b, probs_b)
            })
            .collect();

        let mut out = Matrix::zeros(batch * seq, d);
        let mut probs = Vec::with_capacity(batch * heads);
        for (b, (out_b, probs_b)) in results.into_iter().enumerate() {
            for i in 0..seq {
                out.row_mut(b * seq + i).copy_from_slice(out_b.row(i));
            }
            probs.extend(probs_b);
        }
        let rg = self.rg(qkv);
        self.push(
            out,
            Op::Mha {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        )
    }

    pub fn segment_mean_rows(&mut self, x: Var, seq: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows % seq, 0, "segment size must divide rows");
        let batch = xv.rows / seq;
        let mut out = Matrix::zeros(batch, xv.cols);
        for b in 0..batch {
            for s in 0..seq {
                let row = xv.row(b * seq + s);
                for c in 0..xv.cols {
                    out.data[b * xv.cols + c] += row[c];
                }
            }
            for c in 0..xv.cols {
                out.data[b * xv.cols + c] /= seq as f64;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SegmentMeanRows { x, seq }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows, "slice_rows out of range");
        let mut out = Matrix::zeros(len, xv.cols);
        out.data
            .copy_from_slice(&xv.data[start * xv.cols..(start + len) * xv.cols]);
        let rg = self.rg(x);
        self.push(out, Op::SliceRows { x, start, len }, rg)
    }

    /// Adds `tile` (s x c) to each consecutive s-row segment of `x`.
    pub fn add_tile_rows(&mut self, x: Var, tile: Var) -> Var {
        let (xv, tv) = (self.value(x), self.value(tile));
        assert_eq!(xv.cols, tv.cols, "tile cols");
        assert_eq!(xv.rows % tv.rows, 0, "tile rows must divide");
        let mut out = xv.clone();
        let s = tv.rows;
        for r in 0..out.rows {
            let tr = r % s;
            for c in 0..out.cols {
                out.data[r * out.cols + c] += tv.at(tr, c);
            }
        }
        let rg = self.rg(x) || self.rg(tile);
        self.push(out, Op::AddTileRows(x, tile), rg)
    }

    pub fn rowwise_cosine(&mut self, a: Var, b: Var, floor: f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "cosine shape");
        let mut out = Matrix::zeros(av.rows, 1);
        for r in 0..av.rows {
            let (ar, br) = (av.row(r), bv.row(r));
            let na = norm(ar);
            let nb = norm(br);
            out.data[r] = if na < floor || nb < floor {
                0.0
            } else {
                dot(ar, br) / (na * nb)
            };
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::RowwiseCosine { a, b, floor }, rg)
    }

    pub fn smooth_l1_row_mean(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "smoothl1 shape");
        let mut out = Matrix::zeros(av.rows, 1);
        for r in 0..av.rows {
            let mut acc = 0.0;
            for (x, y) in av.row(r).iter().zip(bv.row(r)) {
                let d = x - y;
                acc += if d.abs() <= 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                };
            }
            out.data[r] = acc / av.cols as f64;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::SmoothL1RowMean(a, b), rg)
    }

    pub fn select_cols(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        assert_eq!(idx.len(), xv.rows, "one index per row");
        let mut out = Matrix::zeros(xv.rows, 1);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < xv.cols, "select index in range");
            out.data[r] = xv.at(r, i);
        }
        let rg = self.rg(x);
        self.push(out, Op::SelectCols { x, idx }, rg)
    }

    pub fn concat_scalars(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            assert_eq!(self.value(p).len(), 1, "concat_scalars wants 1x1 nodes");
            data.push(self.value(p).item());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Matrix::from_vec(parts.len(), 1, data),
            Op::ConcatScalars(parts.to_vec()),
            rg,
        )
    }

    pub fn lse_shift(&mut self, g: Var, cost: Arc<Matrix>, eps: f64) -> Var {
        let gv = self.value(g);
        assert_eq!(gv.cols, 1);
        assert_eq!(cost.cols, gv.rows, "cost cols must match g rows");
        let n = cost.rows;
        let mut out = Matrix::zeros(n, 1);
        for i in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..cost.cols {
                let y = (gv.data[j] - cost.at(i, j)) / eps;
                if y > mx {
                    mx = y;
                }
            }
            let mut s = 0.0;
            for j in 0..cost.cols {
                s += (((gv.data[j] - cost.at(i, j)) / eps) - mx).exp();
            }
            out.data[i] = mx + s.ln();
        }
        let rg = self.rg(g);
        self.push(out, Op::LseShift { g, cost, eps }, rg)
    }

    pub fn transport_cost(&mut self, f: Var, g: Var, cost: Arc<Matrix>, eps: f64) -> Var {
        let (fv, gv) = (self.value(f), self.value(g));
        assert_eq!(fv.cols, 1);
        assert_eq!(gv.cols, 1);
        assert_eq!(cost.rows, fv.rows);
        assert_eq!(cost.cols, gv.rows);
        let mut total = 0.0;
        for i in 0..cost.rows {
            for j in 0..cost.cols {
                let p = ((fv.data[i] + gv.data[j] - cost.at(i, j)) / eps).exp();
                total += p * cost.at(i, j);
            }
        }
        let rg = self.rg(f) || self.rg(g);
        self.push(Matrix::scalar(total), Op::TransportCost { f, g, cost, eps }, rg)
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a scalar node. Returns gradients for every
    /// registered parameter that the loss depends on.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g); // keep leaf gradients for extraction
            }
        }

        let mut by_uid = BTreeMap::new();
        for &(uid, var) in &self.param_vars {
            if let Some(g) = grads[var.0].take() {
                by_uid
                    .entry(uid)
                    .and_modify(|acc: &mut Matrix| acc.add_assign(&g))
                    .or_insert(g);
            }
        }
        Gradients { by_uid }
    }

    /// Gradient of `loss` w.r.t. an `input` leaf (gradient-check path).
    pub fn grad_of_input(&self, loss: Var, input: Var) -> Matrix {
        assert_eq!(self.value(loss).len(), 1);
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let v = self.value(input);
        grads[input.0]
            .take()
            .unwrap_or_else(|| Matrix::zeros(v.rows, v.cols))
    }

    fn add_grad(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                let mut neg = g.clone();
                neg.scale_assign(-1.0);
                self.add_grad(grads, *b, neg);
            }
            Op::MulElem(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = Matrix::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
                );
                let gb = Matrix::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect(),
                );
                self.add_grad(grads, *a, ga);
                self.add_grad(grads, *b, gb);
            }
            Op::AddRowBroadcast(a, bias) => {
                self.add_grad(grads, *a, g.clone());
                let mut gb = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        gb.data[c] += g.at(r, c);
                    }
                }
                self.add_grad(grads, *bias, gb);
            }
            Op::ScaleConst(a, s) => {
                let mut ga = g.clone();
                ga.scale_assign(*s);
                self.add_grad(grads, *a, ga);
            }
            Op::AddConst(a) => self.add_grad(grads, *a, g.clone()),
            Op::ScaleByScalar(x, s) => {
                let sv = self.value(*s).item();
                let xv = self.value(*x);
                let mut gx = g.clone();
                gx.scale_assign(sv);
                self.add_grad(grads, *x, gx);
                let gs: f64 = g.data.iter().zip(&xv.data).map(|(a, b)| a * b).sum();
                self.add_grad(grads, *s, Matrix::scalar(gs));
            }
            Op::Recip(x) => {
                let xv = self.value(*x);
                let gx = Matrix::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gv, v)| -gv / (v * v))
                        .collect(),
                );
                self.add_grad(grads, *x, gx);
            }
            Op::Gemm { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut ga = Matrix::zeros(av.rows, av.cols);
                    match (ta, tb) {
                        (false, false) => gemm(false, true, g, bv, &mut ga, 1.0, 0.0),
                        (false, true) => gemm(false, false, g, bv, &mut ga, 1.0, 0.0),
                        (true, false) => gemm(false, true, bv, g, &mut ga, 1.0, 0.0),
                        (true, true) => gemm(true, true, bv, g, &mut ga, 1.0, 0.0),
                    }
                    self.add_grad(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Matrix::zeros(bv.rows, bv.cols);
                    match (ta, tb) {
                        (false, false) => gemm(true, false, av, g, &mut gb, 1.0, 0.0),
                        (false, true) => gemm(true, false, g, av, &mut gb, 1.0, 0.0),
                        (true, false) => gemm(false, false, av, g, &mut gb, 1.0, 0.0),
                        (true, true) => gemm(true, true, g, av, &mut gb, 1.0, 0.0),
                    }
                    self.add_grad(grads, *b, gb);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = Matrix::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
                self.add_grad(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = Matrix::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gv, v)| gv * gelu_tanh_grad(*v))
                        .collect(),
                );
                self.add_grad(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let yv = &self.nodes[id].value;
                let gx = Matrix::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&yv.data)
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect(),
                );
                self.add_grad(grads, *x, gx);
            }
            Op::Exp(x) => {
                let yv = &self.nodes[id].value;
                let gx = Matrix::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&yv.data).map(|(gv, y)| gv * y).collect(),
                );
                self.add_grad(grads, *x, gx);
            }
            Op::LnClamped(x, floor) => {
                let xv = self.value(*x);
                let gx = Matrix::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gv, v)| if *v > *floor { gv / v } else { 0.0 })
                        .collect(),
                );
                self.add_grad(grads, *x, gx);
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let gx = Matrix::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gv, v)| gv * v.signum())
                        .collect(),
                );
                self.add_grad(grads, *x, gx);
            }
            Op::ClampMin(x, c) => {
                let xv = self.value(*x);
                let gx = Matrix::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gv, v)| if *v > *c { *gv } else { 0.0 })
                        .collect(),
                );
                self.add_grad(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                let s = g.item();
                self.add_grad(
                    grads,
                    *x,
                    Matrix::from_vec(xv.rows, xv.cols, vec![s; xv.len()]),
                );
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let s = g.item() / xv.len() as f64;
                self.add_grad(
                    grads,
                    *x,
                    Matrix::from_vec(xv.rows, xv.cols, vec![s; xv.len()]),
                );
            }
            Op::RowwiseSum(x) => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    let gr = g.data[r];
                    for c in 0..xv.cols {
                        gx.data[r * xv.cols + c] = gr;
                    }
                }
                self.add_grad(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let yv = &self.nodes[id].value;
                let mut gx = Matrix::zeros(yv.rows, yv.cols);
                for r in 0..yv.rows {
                    let dot: f64 = g.row(r).iter().zip(yv.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..yv.cols {
                        gx.data[r * yv.cols + c] = yv.at(r, c) * (g.at(r, c) - dot);
                    }
                }
                self.add_grad(grads, *x, gx);
            }
            Op::RowwiseScale(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                if self.rg(*x) {
                    let mut gx = g.clone();
                    for r in 0..gx.rows {
                        let f = sv.data[r];
                        for c in 0..gx.cols {
                            gx.data[r * gx.cols + c] *= f;
                        }
                    }
                    self.add_grad(grads, *x, gx);
                }
                if self.rg(*s) {
                    let mut gs = Matrix::zeros(sv.rows, 1);
                    for r in 0..xv.rows {
                        gs.data[r] = g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                    }
                    self.add_grad(grads, *s, gs);
                }
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let (xv, gv) = (self.value(*x), self.value(*gamma));
                let n = xv.cols as f64;
                let mut gx = Matrix::zeros(xv.rows, xv.cols);
                let mut ggamma = Matrix::zeros(1, xv.cols);
                let mut gbeta = Matrix::zeros(1, xv.cols);
                for r in 0..xv.rows {
                    let row = xv.row(r);
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for c in 0..xv.cols {
                        let xhat = (row[c] - mean) * inv;
                        let dxhat = g.at(r, c) * gv.data[c];
                        ggamma.data[c] += g.at(r, c) * xhat;
                        gbeta.data[c] += g.at(r, c);
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= n;
                    mean_dxhat_xhat /= n;
                    for c in 0..xv.cols {
                        let xhat = (row[c] - mean) * inv;
                        let dxhat = g.at(r, c) * gv.data[c];
                        gx.data[r * xv.cols + c] =
                            inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.add_grad(grads, *x, gx);
                self.add_grad(grads, *gamma, ggamma);
                self.add_grad(grads, *beta, gbeta);
            }
            Op::Mha {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let qv = self.value(*qkv);
                let d = qv.cols / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (batch, seq, heads) = (*batch, *seq, *heads);

                let parts: Vec<Matrix> = (0..batch)
                    .into_par_iter()
                    .map(|b| {
                        let mut gqkv_b = Matrix::zeros(seq, 3 * d);
                        for h in 0..heads {
                            let p = &probs[b * heads + h];
                            // grad wrt V and probs
                            let mut gprobs = Matrix::zeros(seq, seq);
                            for i in 0..seq {
                                let go = &g.row(b * seq + i)[h * dh..(h + 1) * dh];
                                for j in 0..seq {
                                    let vj =
                                        &qv.row(b * seq + j)[2 * d + h * dh..2 * d + (h + 1) * dh];
                                    gprobs.data[i * seq + j] =
                                        go.iter().zip(vj).map(|(a, c)| a * c).sum();
                                    let pij = p.data[i * seq + j];
                                    if pij != 0.0 {
                                        let gv_row = &mut gqkv_b.row_mut(j)
                                            [2 * d + h * dh..2 * d + (h + 1) * dh];
                                        for (t, a) in gv_row.iter_mut().zip(go) {
                                            *t += pij * a;
                                        }
                                    }
                                }
                            }
                            // softmax backward -> scores grad
                            let mut gscores = Matrix::zeros(seq, seq);
                            for i in 0..seq {
                                let dot: f64 = gprobs
                                    .row(i)
                                    .iter()
                                    .zip(p.row(i))
                                    .map(|(a, c)| a * c)
                                    .sum();
                                for j in 0..seq {
                                    gscores.data[i * seq + j] =
                                        p.at(i, j) * (gprobs.at(i, j) - dot) * scale;
                                }
                            }
                            // scores = q k^T -> grads for q and k
                            for i in 0..seq {
                                for j in 0..seq {
                                    let gs = gscores.at(i, j);
                                    if gs == 0.0 {
                                        continue;
                                    }
                                    let kj = &qv.row(b * seq + j)[d + h * dh..d + (h + 1) * dh];
                                    let qi = &qv.row(b * seq + i)[h * dh..(h + 1) * dh];
                                    {
                                        let gq =
                                            &mut gqkv_b.row_mut(i)[h * dh..(h + 1) * dh];
                                        for (t, kv) in gq.iter_mut().zip(kj) {
                                            *t += gs * kv;
                                        }
                                    }
                                    {
                                        let gk = &mut gqkv_b.row_mut(j)
                                            [d + h * dh..d + (h + 1) * dh];
                                        for (t, qv_) in gk.iter_mut().zip(qi) {
                                            *t += gs * qv_;
                                        }
                                    }
                                }
                            }
                        }
                        gqkv_b
                    })
                    .collect();

                let mut gqkv = Matrix::zeros(batch * seq, 3 * d);
                for (b, part) in parts.into_iter().enumerate() {
                    for i in 0..seq {
                        gqkv.row_mut(b * seq + i).copy_from_slice(part.row(i));
                    }
                }
                self.add_grad(grads, *qkv, gqkv);
            }
            Op::SegmentMeanRows { x, seq } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows, xv.cols);
                let inv = 1.0 / *seq as f64;
                for r in 0..xv.rows {
                    let b = r / seq;
                    for c in 0..xv.cols {
                        gx.data[r * xv.cols + c] = g.at(b, c) * inv;
                    }
                }
                self.add_grad(grads, *x, gx);
            }
            Op::SliceRows { x, start, len } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows, xv.cols);
                gx.data[start * xv.cols..(start + len) * xv.cols].copy_from_slice(&g.data);
                self.add_grad(grads, *x, gx);
            }
            Op::AddTileRows(x, tile) => {
                self.add_grad(grads, *x, g.clone());
                if self.rg(*tile) {
                    let tv = self.value(*tile);
                    let mut gt = Matrix::zeros(tv.rows, tv.cols);
                    for r in 0..g.rows {
                        let tr = r % tv.rows;
                        for c in 0..g.cols {
                            gt.data[tr * g.cols + c] += g.at(r, c);
                        }
                    }
                    self.add_grad(grads, *tile, gt);
                }
            }
            Op::RowwiseCosine { a, b, floor } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(av.rows, av.cols);
                let mut gb = Matrix::zeros(bv.rows, bv.cols);
                for r in 0..av.rows {
                    let (ar, br) = (av.row(r), bv.row(r));
                    let na = norm(ar);
                    let nb = norm(br);
                    if na < *floor || nb < *floor {
                        continue; // guarded rows carry no gradient
                    }
                    let cosv = dot(ar, br) / (na * nb);
                    let gr = g.data[r];
                    for c in 0..av.cols {
                        ga.data[r * av.cols + c] =
                            gr * (br[c] / (na * nb) - cosv * ar[c] / (na * na));
                        gb.data[r * bv.cols + c] =
                            gr * (ar[c] / (na * nb) - cosv * br[c] / (nb * nb));
                    }
                }
                self.add_grad(grads, *a, ga);
                self.add_grad(grads, *b, gb);
            }
            Op::SmoothL1RowMean(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let inv = 1.0 / av.cols as f64;
                let mut ga = Matrix::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    let gr = g.data[r] * inv;
                    for c in 0..av.cols {
                        let d = av.at(r, c) - bv.at(r, c);
                        ga.data[r * av.cols + c] = gr * d.clamp(-1.0, 1.0);
                    }
                }
                let mut gb = ga.clone();
                gb.scale_assign(-1.0);
                self.add_grad(grads, *a, ga);
                self.add_grad(grads, *b, gb);
            }
            Op::SelectCols { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows, xv.cols);
                for (r, &i) in idx.iter().enumerate() {
                    gx.data[r * xv.cols + i] = g.data[r];
                }
                self.add_grad(grads, *x, gx);
            }
            Op::ConcatScalars(parts) => {
                for (r, &p) in parts.iter().enumerate() {
                    self.add_grad(grads, p, Matrix::scalar(g.data[r]));
                }
            }
            Op::LseShift { g: gvar, cost, eps } => {
                let gv = self.value(*gvar);
                let out = &self.nodes[id].value;
                let mut gg = Matrix::zeros(gv.rows, 1);
                for i in 0..cost.rows {
                    let go = g.data[i];
                    if go == 0.0 {
                        continue;
                    }
                    for j in 0..cost.cols {
                        let w = (((gv.data[j] - cost.at(i, j)) / eps) - out.data[i]).exp();
                        gg.data[j] += go * w / eps;
                    }
                }
                self.add_grad(grads, *gvar, gg);
            }
            Op::TransportCost { f, g: gvar, cost, eps } => {
                let (fv, gv) = (self.value(*f), self.value(*gvar));
                let go = g.item();
                let mut gf = Matrix::zeros(fv.rows, 1);
                let mut gg = Matrix::zeros(gv.rows, 1);
                for i in 0..cost.rows {
                    for j in 0..cost.cols {
                        let c = cost.at(i, j);
                        let p = ((fv.data[i] + gv.data[j] - c) / eps).exp();
                        let t = go * p * c / eps;
                        gf.data[i] += t;
                        gg.data[j] += t;
                    }
                }
                self.add_grad(grads, *f, gf);
                self.add_grad(grads, *gvar, gg);
            }
        }
    }
}

// ── scalar helpers ───────────────────────────────────────────────────────────

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff;

    /// FD-checks grad of a scalar-valued graph function at `x0`.
    fn check(
        x0: Matrix,
        build: impl Fn(&mut Graph, Var) -> Var,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let loss = build(&mut g, x);
        let analytic = g.grad_of_input(loss, x);

        let f = |data: &[f64]| {
            let mut g2 = Graph::new();
            let xv = g2.input(Matrix::from_vec(x0.rows, x0.cols, data.to_vec()));
            let l = build(&mut g2, xv);
            g2.value(l).item()
        };
        let numeric = central_diff(&f, &x0.data, 1e-6);
        for (i, (a, n)) in analytic.data.iter().zip(&numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!(
                (a - n).abs() / denom < tol,
                "entry {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    fn test_input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = crate::rng::SplitMix64::new(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.next_gaussian())
    }

    #[test]
    fn grad_gemm_chain() {
        let w = test_input(4, 3, 1);
        check(
            test_input(2, 4, 2),
            move |g, x| {
                let wv = g.constant(w.clone());
                let y = g.matmul(x, wv);
                let y = g.gelu(y);
                g.sum_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_gemm_transposes() {
        let b = test_input(5, 3, 7);
        // x^T b with x 5x2 -> 2x3
        check(
            test_input(5, 2, 3),
            move |g, x| {
                let bv = g.constant(b.clone());
                let y = g.gemm(true, false, x, bv);
                g.sum_all(y)
            },
            1e-6,
        );
        let b2 = test_input(4, 3, 8);
        // x b2^T with x 2x3 -> 2x4
        check(
            test_input(2, 3, 4),
            move |g, x| {
                let bv = g.constant(b2.clone());
                let y = g.gemm(false, true, x, bv);
                let y = g.relu(y);
                g.sum_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_softmax_layernorm() {
        check(
            test_input(3, 5, 11),
            |g, x| {
                let s = g.softmax_rows(x);
                let l = g.ln_clamped(s, 1e-12);
                g.mean_all(l)
            },
            1e-5,
        );
        let gamma = test_input(1, 6, 12);
        let beta = test_input(1, 6, 13);
        check(
            test_input(4, 6, 14),
            move |g, x| {
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                let y = g.layer_norm_rows(x, ga, be, 1e-5);
                let y = g.mul_elem(y, y);
                g.sum_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_layernorm_params() {
        let x0 = test_input(4, 6, 20);
        check(
            test_input(1, 6, 21),
            move |g, gamma| {
                let x = g.constant(x0.clone());
                let beta = g.input(Matrix::zeros(1, 6));
                let y = g.layer_norm_rows(x, gamma, beta, 1e-5);
                let y = g.mul_elem(y, y);
                g.sum_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_mha() {
        // 2 segments of 3 tokens, 2 heads over d=4 -> qkv is 6x12
        check(
            test_input(6, 12, 15),
            |g, qkv| {
                let y = g.mha(qkv, 2, 3, 2);
                let y = g.mul_elem(y, y);
                g.sum_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_cosine_smoothl1() {
        let b = test_input(4, 5, 17);
        check(
            test_input(4, 5, 16),
            move |g, a| {
                let bv = g.constant(b.clone());
                let c = g.rowwise_cosine(a, bv, 1e-8);
                let s = g.smooth_l1_row_mean(a, bv);
                let t = g.add(c, s);
                g.sum_all(t)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_segment_mean_select() {
        check(
            test_input(6, 4, 18),
            |g, x| {
                let m = g.segment_mean_rows(x, 3);
                let s = g.softmax_rows(m);
                let picked = g.select_cols(s, vec![1, 2]);
                let l = g.ln_clamped(picked, 1e-12);
                g.sum_all(l)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_slice_and_tile() {
        let tile = test_input(2, 3, 30);
        check(
            test_input(6, 3, 31),
            move |g, x| {
                let t = g.constant(tile.clone());
                let y = g.add_tile_rows(x, t);
                let top = g.slice_rows(y, 0, 2);
                let bot = g.slice_rows(y, 4, 2);
                let m = g.mul_elem(top, bot);
                g.sum_all(m)
            },
            1e-6,
        );
        // gradient to the tile parameter itself
        let base = test_input(6, 3, 32);
        check(
            test_input(2, 3, 33),
            move |g, t| {
                let x = g.constant(base.clone());
                let y = g.add_tile_rows(x, t);
                let sq = g.mul_elem(y, y);
                g.sum_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_misc_elementwise() {
        check(
            test_input(3, 4, 19),
            |g, x| {
                let a = g.sigmoid(x);
                let b = g.exp(x);
                let c = g.abs(x);
                let t = g.add(a, b);
                let t = g.add(t, c);
                let t = g.scale_const(t, 0.3);
                let rs = g.rowwise_sum(t);
                let s = g.sum_all(rs);
                let s2 = g.mean_all(x);
                g.add(s, s2)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_scalar_ops() {
        check(test_input(1, 1, 22), |g, x| {
            let r = g.recip(x);
            let y = g.scale_by_scalar(r, x); // x * 1/x = 1, grad should be ~0
            g.sum_all(y)
        }, 1e-4);
        check(test_input(3, 1, 23), |g, x| {
            let s = g.sum_all(x);
            let r = g.recip(s);
            let y = g.scale_by_scalar(x, r); // normalize
            let sq = g.mul_elem(y, y);
            g.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn param_gradients_accumulate() {
        let p = Param::new("w", Matrix::from_vec(1, 2, vec![2.0, 3.0]));
        let mut g = Graph::new();
        let w = g.param(&p);
        // loss = sum(w*w) + sum(w) uses w twice
        let sq = g.mul_elem(w, w);
        let s1 = g.sum_all(sq);
        let s2 = g.sum_all(w);
        let loss = g.add(s1, s2);
        let grads = g.backward(loss);
        let gw = grads.get(&p).unwrap();
        assert_eq!(gw.data, vec![5.0, 7.0]); // 2w + 1
    }

    #[test]
    fn no_grad_through_constants() {
        let mut g = Graph::new();
        let c = g.constant(Matrix::scalar(4.0));
        let x = g.input(Matrix::scalar(3.0));
        let y = g.mul_elem(c, x);
        let loss = g.sum_all(y);
        let gx = g.grad_of_input(loss, x);
        assert_eq!(gx.item(), 4.0);
    }
}
