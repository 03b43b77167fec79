//! Minimal reverse-mode automatic differentiation over dense row-major
//! matrices. Parameter leaves point into one flat vector so gradients land
//! directly in a flat buffer of the same layout.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape mismatch");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, o: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }
}

/// `a (r×k) · b (k×c)` accumulated into `out`.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

/// `a (r×k) · bᵀ` where `b` is `c×k`, accumulated into `out`.
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let brow = &b[j * k..(j + 1) * k];
            out[i * c + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `aᵀ · b` where `a` is `k×r` and `b` is `k×c`, accumulated into `out` (r×c).
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, r: usize, c: usize) {
    for p in 0..k {
        let brow = &b[p * c..(p + 1) * c];
        for i in 0..r {
            let x = a[p * r + i];
            if x == 0.0 {
                continue;
            }
            let orow = &mut out[i * c..(i + 1) * c];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

pub type Var = usize;

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`.
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Broadcasts a 1×c row over every row of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Multiplies by a 1×1 node.
    ScaleBy(Var, Var),
    Tanh(Var),
    Relu(Var),
    /// Row-wise normalisation with gain and bias rows; caches x̂ and 1/σ.
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    /// Row-wise softmax restricted to `mask`; masked entries are exactly 0.
    SoftmaxRows { x: Var, mask: Vec<bool> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    Row(Var, usize),
    /// Log-softmax of a 1×c row over allowed entries at temperature `t`.
    /// Forbidden entries hold −∞.
    LogSoftmax { x: Var, mask: Vec<bool>, t: f64 },
    /// Entropy of the distribution given by a `LogSoftmax` node.
    Entropy { logp: Var, mask: Vec<bool> },
    Pick(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Mat,
}

/// Records a forward computation and replays it backwards.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v].value.data[0]
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(Op::Const, m)
    }

    pub fn param(&mut self, theta: &[f64], offset: usize, rows: usize, cols: usize) -> Var {
        let m = Mat::from_vec(rows, cols, theta[offset..offset + rows * cols].to_vec());
        self.push(Op::Param(offset), m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(x.cols, y.rows, "matmul shape");
        let mut out = Mat::zeros(x.rows, y.cols);
        gemm_acc(&x.data, &y.data, &mut out.data, x.rows, x.cols, y.cols);
        self.push(Op::MatMul(a, b), out)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(x.cols, y.cols, "matmul_t shape");
        let mut out = Mat::zeros(x.rows, y.rows);
        gemm_nt_acc(&x.data, &y.data, &mut out.data, x.rows, x.cols, y.rows);
        self.push(Op::MatMulT(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "add shape");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let out = Mat::from_vec(x.rows, x.cols, data);
        self.push(Op::Add(a, b), out)
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((y.rows, y.cols), (1, x.cols), "add_row shape");
        let mut out = x.clone();
        for r in 0..x.rows {
            for c in 0..x.cols {
                out.data[r * x.cols + c] += y.data[c];
            }
        }
        self.push(Op::AddRow(a, b), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = &self.nodes[a].value;
        let out = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|v| v * s).collect());
        self.push(Op::Scale(a, s), out)
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let x = &self.nodes[a].value;
        let out = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|v| v * k).collect());
        self.push(Op::ScaleBy(a, s), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let x = &self.nodes[a].value;
        let out = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|v| v.tanh()).collect());
        self.push(Op::Tanh(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = &self.nodes[a].value;
        let out = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|v| v.max(0.0)).collect());
        self.push(Op::Relu(a), out)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (xv, g, b) = (&self.nodes[x].value, &self.nodes[gain].value, &self.nodes[bias].value);
        let (r, c) = (xv.rows, xv.cols);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = Mat::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out.data[i * c + j] = h * g.data[j] + b.data[j];
            }
        }
        self.push(Op::LayerNorm { x, gain, bias, xhat, inv_std }, out)
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Vec<bool>) -> Var {
        let xv = &self.nodes[x].value;
        assert_eq!(mask.len(), xv.data.len(), "softmax mask shape");
        let mut out = Mat::zeros(xv.rows, xv.cols);
        for i in 0..xv.rows {
            let span = i * xv.cols..(i + 1) * xv.cols;
            let max = span
                .clone()
                .filter(|&k| mask[k])
                .map(|k| xv.data[k])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for k in span.clone() {
                if mask[k] {
                    let e = (xv.data[k] - max).exp();
                    out.data[k] = e;
                    z += e;
                }
            }
            for k in span {
                out.data[k] /= z;
            }
        }
        self.push(Op::SoftmaxRows { x, mask }, out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0]].value.rows;
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = &self.nodes[p].value;
            assert_eq!(m.rows, rows, "concat rows");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = &self.nodes[x].value;
        let mut out = Mat::zeros(m.rows, len);
        for r in 0..m.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols { x, start }, out)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = &self.nodes[x].value;
        let mut out = Mat::zeros(1, m.cols);
        for r in 0..m.rows {
            for c in 0..m.cols {
                out.data[c] += m.at(r, c);
            }
        }
        let inv = 1.0 / m.rows as f64;
        out.data.iter_mut().for_each(|v| *v *= inv);
        self.push(Op::MeanRows(x), out)
    }

    pub fn row(&mut self, x: Var, r: usize) -> Var {
        let m = &self.nodes[x].value;
        let out = Mat::from_vec(1, m.cols, m.row(r).to_vec());
        self.push(Op::Row(x, r), out)
    }

    pub fn log_softmax(&mut self, x: Var, mask: Vec<bool>, t: f64) -> Var {
        let m = &self.nodes[x].value;
        assert_eq!(m.rows, 1, "log_softmax expects a row");
        let z: Vec<f64> = m.data.iter().map(|v| v / t).collect();
        let max = z.iter().zip(&mask).filter(|(_, &a)| a).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        assert!(max.is_finite(), "log_softmax needs an allowed entry");
        let lse = max + z.iter().zip(&mask).filter(|(_, &a)| a).map(|(v, _)| (v - max).exp()).sum::<f64>().ln();
        let data = z
            .iter()
            .zip(&mask)
            .map(|(v, &a)| if a { v - lse } else { f64::NEG_INFINITY })
            .collect();
        let out = Mat::from_vec(1, m.cols, data);
        self.push(Op::LogSoftmax { x, mask, t }, out)
    }

    pub fn entropy(&mut self, logp: Var) -> Var {
        let mask = match &self.nodes[logp].op {
            Op::LogSoftmax { mask, .. } => mask.clone(),
            _ => panic!("entropy expects a log_softmax node"),
        };
        let lp = &self.nodes[logp].value;
        let h = -lp
            .data
            .iter()
            .zip(&mask)
            .filter(|(_, &a)| a)
            .map(|(l, _)| l.exp() * l)
            .sum::<f64>();
        self.push(Op::Entropy { logp, mask }, Mat::from_vec(1, 1, vec![h]))
    }

    pub fn pick(&mut self, x: Var, idx: usize) -> Var {
        let v = self.nodes[x].value.data[idx];
        self.push(Op::Pick(x, idx), Mat::from_vec(1, 1, vec![v]))
    }

    /// Propagates `seeds` (node, upstream gradient) backwards, accumulating
    /// parameter gradients into `grad` (same layout as the flat parameters).
    pub fn backward(&self, seeds: &[(Var, Mat)], grad: &mut [f64]) {
        let mut g: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        for (v, m) in seeds {
            acc(&mut g, *v, m.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(off) => {
                    for (dst, s) in grad[*off..*off + gi.data.len()].iter_mut().zip(&gi.data) {
                        *dst += s;
                    }
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    gemm_nt_acc(&gi.data, &y.data, &mut ga.data, x.rows, y.cols, y.rows);
                    let mut gb = Mat::zeros(y.rows, y.cols);
                    gemm_tn_acc(&x.data, &gi.data, &mut gb.data, x.rows, x.cols, y.cols);
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // out = x·yᵀ: dx = g·y, dy = gᵀ·x
                    let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    gemm_acc(&gi.data, &y.data, &mut ga.data, x.rows, y.rows, y.cols);
                    let mut gb = Mat::zeros(y.rows, y.cols);
                    gemm_tn_acc(&gi.data, &x.data, &mut gb.data, x.rows, y.rows, x.cols);
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, gi.clone());
                    acc(&mut g, *a, gi);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Mat::zeros(1, gi.cols);
                    for r in 0..gi.rows {
                        for c in 0..gi.cols {
                            gb.data[c] += gi.at(r, c);
                        }
                    }
                    acc(&mut g, *b, gb);
                    acc(&mut g, *a, gi);
                }
                Op::Scale(a, s) => {
                    let m = Mat::from_vec(gi.rows, gi.cols, gi.data.iter().map(|v| v * s).collect());
                    acc(&mut g, *a, m);
                }
                Op::ScaleBy(a, s) => {
                    let k = self.scalar(*s);
                    let x = &self.nodes[*a].value;
                    let ds: f64 = gi.data.iter().zip(&x.data).map(|(p, q)| p * q).sum();
                    acc(&mut g, *s, Mat::from_vec(1, 1, vec![ds]));
                    let m = Mat::from_vec(gi.rows, gi.cols, gi.data.iter().map(|v| v * k).collect());
                    acc(&mut g, *a, m);
                }
                Op::Tanh(a) => {
                    let data = gi.data.iter().zip(&node.value.data).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                    acc(&mut g, *a, Mat::from_vec(gi.rows, gi.cols, data));
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let data = gi.data.iter().zip(&x.data).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                    acc(&mut g, *a, Mat::from_vec(gi.rows, gi.cols, data));
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = &self.nodes[*gain].value;
                    let (r, c) = (gi.rows, gi.cols);
                    let mut gx = Mat::zeros(r, c);
                    let mut gg = Mat::zeros(1, c);
                    let mut gb = Mat::zeros(1, c);
                    for i in 0..r {
                        let mut dxhat = vec![0.0; c];
                        for j in 0..c {
                            let k = i * c + j;
                            gg.data[j] += gi.data[k] * xhat[k];
                            gb.data[j] += gi.data[k];
                            dxhat[j] = gi.data[k] * gv.data[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat.iter().zip(&xhat[i * c..(i + 1) * c]).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx.data[i * c + j] = inv_std[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                        }
                    }
                    acc(&mut g, *gain, gg);
                    acc(&mut g, *bias, gb);
                    acc(&mut g, *x, gx);
                }
                Op::SoftmaxRows { x, mask } => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let span = i * y.cols..(i + 1) * y.cols;
                        let dot: f64 = span.clone().map(|k| gi.data[k] * y.data[k]).sum();
                        for k in span {
                            if mask[k] {
                                gx.data[k] = y.data[k] * (gi.data[k] - dot);
                            }
                        }
                    }
                    acc(&mut g, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.nodes[p].value.cols;
                        let mut gp = Mat::zeros(gi.rows, pc);
                        for r in 0..gi.rows {
                            gp.data[r * pc..(r + 1) * pc].copy_from_slice(&gi.row(r)[off..off + pc]);
                        }
                        acc(&mut g, p, gp);
                        off += pc;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xc = self.nodes[*x].value.cols;
                    let mut gx = Mat::zeros(gi.rows, xc);
                    for r in 0..gi.rows {
                        gx.data[r * xc + start..r * xc + start + gi.cols].copy_from_slice(gi.row(r));
                    }
                    acc(&mut g, *x, gx);
                }
                Op::MeanRows(x) => {
                    let xr = self.nodes[*x].value.rows;
                    let inv = 1.0 / xr as f64;
                    let mut gx = Mat::zeros(xr, gi.cols);
                    for r in 0..xr {
                        for c in 0..gi.cols {
                            gx.data[r * gi.cols + c] = gi.data[c] * inv;
                        }
                    }
                    acc(&mut g, *x, gx);
                }
                Op::Row(x, r) => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    gx.data[r * xv.cols..(r + 1) * xv.cols].copy_from_slice(&gi.data);
                    acc(&mut g, *x, gx);
                }
                Op::LogSoftmax { x, mask, t } => {
                    let y = &node.value;
                    let total: f64 = gi.data.iter().zip(mask).filter(|(_, &a)| a).map(|(v, _)| v).sum();
                    let data = (0..y.cols)
                        .map(|k| if mask[k] { (gi.data[k] - y.data[k].exp() * total) / t } else { 0.0 })
                        .collect();
                    acc(&mut g, *x, Mat::from_vec(1, y.cols, data));
                }
                Op::Entropy { logp, mask } => {
                    let lp = &self.nodes[*logp].value;
                    let s = gi.data[0];
                    let data = (0..lp.cols)
                        .map(|k| if mask[k] { -s * lp.data[k].exp() * (lp.data[k] + 1.0) } else { 0.0 })
                        .collect();
                    acc(&mut g, *logp, Mat::from_vec(1, lp.cols, data));
                }
                Op::Pick(x, idx) => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    gx.data[*idx] = gi.data[0];
                    acc(&mut g, *x, gx);
                }
            }
        }
    }
}

fn acc(g: &mut [Option<Mat>], v: Var, m: Mat) {
    match &mut g[v] {
        Some(e) => e.add_assign(&m),
        slot => *slot = Some(m),
    }
}
