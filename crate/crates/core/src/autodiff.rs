//! Minimal reverse-mode tape over row-major f64 matrices.
//!
//! Only the operations the reconstruction model needs are implemented, and
//! loss terms are fused nodes so the graph stays small. Values are computed
//! with the kernels in [`crate::tensor`], which the no-gradient inference
//! path uses as well.

use crate::tensor::{
    gelu, gelu_grad, layernorm_rows, matmul_acc, matmul_nt_acc, matmul_tn_acc,
    softmax_rows_inplace, LAYER_NORM_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    AddRowBias(usize, usize),
    /// `x: [g*p, n]` plus a `[p, n]` block tiled `g` times down the rows.
    AddTiledRows(usize, usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    Gelu(usize),
    MeanPoolGroups {
        x: usize,
        group: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    /// Row-wise L2 normalization.
    NormalizeRows(usize),
    SumScalars(Vec<usize>),
    /// Mean of |x - target| over unmasked entries.
    MaskedL1 {
        x: usize,
        target: Vec<f64>,
        mask: Option<Vec<bool>>,
        count: usize,
    },
    /// Sum over rows of the geodesic angle (radians) between unit
    /// quaternion rows of `q` and constant unit quaternion rows `target`.
    QuatGeodesicSum {
        q: usize,
        target: Vec<f64>,
    },
    /// Sum of elementwise Huber losses against a constant target.
    HuberSum {
        x: usize,
        target: Vec<f64>,
        delta: f64,
    },
    /// Mean over rows of (1 - cosine similarity) against constant rows.
    CosineDistMean {
        x: usize,
        target: Vec<f64>,
    },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, needs: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            needs_grad: needs,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Vec<f64>, rows: usize, cols: usize, requires_grad: bool) -> Var {
        self.push(value, rows, cols, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.leaf(value, rows, cols, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        debug_assert_eq!(self.shape(b), (r, c));
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(value, r, c, needs, Op::Add(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.shape(a);
        let value: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        let needs = self.needs(a);
        self.push(value, r, c, needs, Op::Scale(a.0, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        debug_assert_eq!(k, k2);
        let mut value = vec![0.0; m * n];
        matmul_acc(&mut value, self.value(a), self.value(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, m, n, needs, Op::MatMul(a.0, b.0))
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        debug_assert_eq!(k, k2);
        let mut value = vec![0.0; m * n];
        matmul_nt_acc(&mut value, self.value(a), self.value(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, m, n, needs, Op::MatMulNT(a.0, b.0))
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (m, n) = self.shape(a);
        debug_assert_eq!(self.shape(bias), (1, n));
        let bv = self.value(bias).to_vec();
        let value: Vec<f64> = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bv).map(|(x, b)| x + b).collect::<Vec<_>>())
            .collect();
        let needs = self.needs(a) || self.needs(bias);
        self.push(value, m, n, needs, Op::AddRowBias(a.0, bias.0))
    }

    pub fn add_tiled_rows(&mut self, a: Var, block: Var) -> Var {
        let (m, n) = self.shape(a);
        let (p, n2) = self.shape(block);
        debug_assert_eq!(n, n2);
        debug_assert_eq!(m % p, 0);
        let bv = self.value(block).to_vec();
        let mut value = self.value(a).to_vec();
        for (i, row) in value.chunks_mut(n).enumerate() {
            let brow = &bv[(i % p) * n..(i % p + 1) * n];
            for (x, b) in row.iter_mut().zip(brow) {
                *x += b;
            }
        }
        let needs = self.needs(a) || self.needs(block);
        self.push(value, m, n, needs, Op::AddTiledRows(a.0, block.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut value = self.value(a).to_vec();
        softmax_rows_inplace(&mut value, n);
        let needs = self.needs(a);
        self.push(value, m, n, needs, Op::SoftmaxRows(a.0))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (m, n) = self.shape(x);
        debug_assert_eq!(self.shape(gain), (1, n));
        debug_assert_eq!(self.shape(bias), (1, n));
        let mut value = vec![0.0; m * n];
        layernorm_rows(&mut value, self.value(x), self.value(gain), self.value(bias), n);
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            value,
            m,
            n,
            needs,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let value: Vec<f64> = self.value(a).iter().map(|&v| gelu(v)).collect();
        let needs = self.needs(a);
        self.push(value, m, n, needs, Op::Gelu(a.0))
    }

    pub fn mean_pool_groups(&mut self, a: Var, group: usize) -> Var {
        let (m, n) = self.shape(a);
        debug_assert_eq!(m % group, 0);
        let out_rows = m / group;
        let mut value = vec![0.0; out_rows * n];
        for (i, row) in self.value(a).chunks(n).enumerate() {
            let orow = &mut value[(i / group) * n..(i / group + 1) * n];
            for (o, x) in orow.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = 1.0 / group as f64;
        for v in value.iter_mut() {
            *v *= inv;
        }
        let needs = self.needs(a);
        self.push(value, out_rows, n, needs, Op::MeanPoolGroups { x: a.0, group })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        debug_assert!(start + len <= m);
        let value = self.value(a)[start * n..(start + len) * n].to_vec();
        let needs = self.needs(a);
        self.push(value, len, n, needs, Op::SliceRows { x: a.0, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        debug_assert!(start + len <= n);
        let mut value = Vec::with_capacity(m * len);
        for row in self.value(a).chunks(n) {
            value.extend_from_slice(&row[start..start + len]);
        }
        let needs = self.needs(a);
        self.push(value, m, len, needs, Op::SliceCols { x: a.0, start })
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let needs = self.needs(a);
        self.push(value, m, n, needs, Op::NormalizeRows(a.0))
    }

    pub fn sum_scalars(&mut self, terms: &[Var]) -> Var {
        let total: f64 = terms.iter().map(|v| self.scalar(*v)).sum();
        let needs = terms.iter().any(|v| self.needs(*v));
        self.push(
            vec![total],
            1,
            1,
            needs,
            Op::SumScalars(terms.iter().map(|v| v.0).collect()),
        )
    }

    /// Mean absolute error against a constant target, restricted to the
    /// mask when given. `mask` counts `true` entries; it must be nonempty.
    pub fn masked_l1(&mut self, x: Var, target: Vec<f64>, mask: Option<Vec<bool>>) -> Var {
        let xv = self.value(x);
        debug_assert_eq!(xv.len(), target.len());
        let count = match &mask {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => xv.len(),
        };
        debug_assert!(count > 0);
        let mut acc = 0.0;
        for (i, (xi, ti)) in xv.iter().zip(&target).enumerate() {
            let keep = mask.as_ref().map_or(true, |m| m[i]);
            if keep {
                acc += (xi - ti).abs();
            }
        }
        let value = acc / count as f64;
        let needs = self.needs(x);
        self.push(
            vec![value],
            1,
            1,
            needs,
            Op::MaskedL1 {
                x: x.0,
                target,
                mask,
                count,
            },
        )
    }

    /// Sum of geodesic angles between unit-quaternion rows `[k,4]` and
    /// constant unit targets, sign-invariant (q and -q are the same
    /// rotation).
    pub fn quat_geodesic_sum(&mut self, q: Var, target: Vec<f64>) -> Var {
        let (k, n) = self.shape(q);
        debug_assert_eq!(n, 4);
        debug_assert_eq!(target.len(), k * 4);
        let mut acc = 0.0;
        for (qrow, trow) in self.value(q).chunks(4).zip(target.chunks(4)) {
            let dot: f64 = qrow.iter().zip(trow).map(|(a, b)| a * b).sum();
            acc += 2.0 * dot.abs().min(1.0).acos();
        }
        let needs = self.needs(q);
        self.push(vec![acc], 1, 1, needs, Op::QuatGeodesicSum { q: q.0, target })
    }

    pub fn huber_sum(&mut self, x: Var, target: Vec<f64>, delta: f64) -> Var {
        let xv = self.value(x);
        debug_assert_eq!(xv.len(), target.len());
        let mut acc = 0.0;
        for (xi, ti) in xv.iter().zip(&target) {
            let r = (xi - ti).abs();
            acc += if r <= delta {
                0.5 * r * r
            } else {
                delta * (r - 0.5 * delta)
            };
        }
        let needs = self.needs(x);
        self.push(
            vec![acc],
            1,
            1,
            needs,
            Op::HuberSum {
                x: x.0,
                target,
                delta,
            },
        )
    }

    /// Mean over rows of (1 - cosine similarity) against constant rows.
    pub fn cosine_dist_mean(&mut self, x: Var, target: Vec<f64>) -> Var {
        let (k, n) = self.shape(x);
        debug_assert_eq!(target.len(), k * n);
        let mut acc = 0.0;
        for (xrow, trow) in self.value(x).chunks(n).zip(target.chunks(n)) {
            let dot: f64 = xrow.iter().zip(trow).map(|(a, b)| a * b).sum();
            let nx = xrow.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let nt = trow.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            acc += 1.0 - dot / (nx * nt);
        }
        let value = acc / k as f64;
        let needs = self.needs(x);
        self.push(vec![value], 1, 1, needs, Op::CosineDistMean { x: x.0, target })
    }

    /// Reverse pass from a scalar loss node. Gradients are only materialized
    /// for nodes on a path to a gradient-requiring leaf.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        debug_assert_eq!(self.nodes[loss.0].value.len(), 1);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].clone() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &gout);
                    self.accumulate(&mut grads, *b, &gout);
                }
                Op::Scale(a, f) => {
                    if self.nodes[*a].needs_grad {
                        let g: Vec<f64> = gout.iter().map(|v| v * f).collect();
                        self.accumulate(&mut grads, *a, &g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                    let n = self.nodes[*b].cols;
                    if self.nodes[*a].needs_grad {
                        let mut ga = vec![0.0; m * k];
                        matmul_nt_acc(&mut ga, &gout, &self.nodes[*b].value, m, n, k);
                        self.accumulate(&mut grads, *a, &ga);
                    }
                    if self.nodes[*b].needs_grad {
                        let mut gb = vec![0.0; k * n];
                        matmul_tn_acc(&mut gb, &self.nodes[*a].value, &gout, m, k, n);
                        self.accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                    let n = self.nodes[*b].rows;
                    if self.nodes[*a].needs_grad {
                        let mut ga = vec![0.0; m * k];
                        matmul_acc(&mut ga, &gout, &self.nodes[*b].value, m, n, k);
                        self.accumulate(&mut grads, *a, &ga);
                    }
                    if self.nodes[*b].needs_grad {
                        let mut gb = vec![0.0; n * k];
                        matmul_tn_acc(&mut gb, &gout, &self.nodes[*a].value, m, n, k);
                        self.accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::AddRowBias(a, bias) => {
                    let n = node.cols;
                    self.accumulate(&mut grads, *a, &gout);
                    if self.nodes[*bias].needs_grad {
                        let mut gb = vec![0.0; n];
                        for row in gout.chunks(n) {
                            for (g, r) in gb.iter_mut().zip(row) {
                                *g += r;
                            }
                        }
                        self.accumulate(&mut grads, *bias, &gb);
                    }
                }
                Op::AddTiledRows(a, block) => {
                    let n = node.cols;
                    let p = self.nodes[*block].rows;
                    self.accumulate(&mut grads, *a, &gout);
                    if self.nodes[*block].needs_grad {
                        let mut gb = vec![0.0; p * n];
                        for (i, row) in gout.chunks(n).enumerate() {
                            let brow = &mut gb[(i % p) * n..(i % p + 1) * n];
                            for (g, r) in brow.iter_mut().zip(row) {
                                *g += r;
                            }
                        }
                        self.accumulate(&mut grads, *block, &gb);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.nodes[*a].needs_grad {
                        let n = node.cols;
                        let y = &node.value;
                        let mut gx = vec![0.0; y.len()];
                        for ((gxrow, yrow), grow) in
                            gx.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n))
                        {
                            let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                gxrow[j] = yrow[j] * (grow[j] - dot);
                            }
                        }
                        self.accumulate(&mut grads, *a, &gx);
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let n = node.cols;
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*gain].value;
                    let mut gx = vec![0.0; xv.len()];
                    let mut ggain = vec![0.0; n];
                    let mut gbias = vec![0.0; n];
                    for ((xrow, grow), gxrow) in
                        xv.chunks(n).zip(gout.chunks(n)).zip(gx.chunks_mut(n))
                    {
                        let mean = xrow.iter().sum::<f64>() / n as f64;
                        let var =
                            xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let mut mean_gd = 0.0;
                        let mut mean_gdx = 0.0;
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * rstd;
                            let gd = grow[j] * gv[j];
                            ggain[j] += grow[j] * xhat;
                            gbias[j] += grow[j];
                            mean_gd += gd;
                            mean_gdx += gd * xhat;
                        }
                        mean_gd /= n as f64;
                        mean_gdx /= n as f64;
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * rstd;
                            let gd = grow[j] * gv[j];
                            gxrow[j] = rstd * (gd - mean_gd - xhat * mean_gdx);
                        }
                    }
                    if self.nodes[*x].needs_grad {
                        self.accumulate(&mut grads, *x, &gx);
                    }
                    if self.nodes[*gain].needs_grad {
                        self.accumulate(&mut grads, *gain, &ggain);
                    }
                    if self.nodes[*bias].needs_grad {
                        self.accumulate(&mut grads, *bias, &gbias);
                    }
                }
                Op::Gelu(a) => {
                    if self.nodes[*a].needs_grad {
                        let g: Vec<f64> = self.nodes[*a]
                            .value
                            .iter()
                            .zip(&gout)
                            .map(|(x, g)| g * gelu_grad(*x))
                            .collect();
                        self.accumulate(&mut grads, *a, &g);
                    }
                }
                Op::MeanPoolGroups { x, group } => {
                    if self.nodes[*x].needs_grad {
                        let n = node.cols;
                        let inv = 1.0 / *group as f64;
                        let mut gx = vec![0.0; self.nodes[*x].value.len()];
                        for (i, gxrow) in gx.chunks_mut(n).enumerate() {
                            let orow = &gout[(i / group) * n..(i / group + 1) * n];
                            for (g, o) in gxrow.iter_mut().zip(orow) {
                                *g = o * inv;
                            }
                        }
                        self.accumulate(&mut grads, *x, &gx);
                    }
                }
                Op::SliceRows { x, start } => {
                    if self.nodes[*x].needs_grad {
                        let n = node.cols;
                        let mut gx = vec![0.0; self.nodes[*x].value.len()];
                        gx[*start * n..*start * n + gout.len()].copy_from_slice(&gout);
                        self.accumulate(&mut grads, *x, &gx);
                    }
                }
                Op::SliceCols { x, start } => {
                    if self.nodes[*x].needs_grad {
                        let n_in = self.nodes[*x].cols;
                        let len = node.cols;
                        let mut gx = vec![0.0; self.nodes[*x].value.len()];
                        for (i, grow) in gout.chunks(len).enumerate() {
                            gx[i * n_in + start..i * n_in + start + len].copy_from_slice(grow);
                        }
                        self.accumulate(&mut grads, *x, &gx);
                    }
                }
                Op::NormalizeRows(a) => {
                    if self.nodes[*a].needs_grad {
                        let n = node.cols;
                        let xv = &self.nodes[*a].value;
                        let yv = &node.value;
                        let mut gx = vec![0.0; xv.len()];
                        for (((xrow, yrow), grow), gxrow) in xv
                            .chunks(n)
                            .zip(yv.chunks(n))
                            .zip(gout.chunks(n))
                            .zip(gx.chunks_mut(n))
                        {
                            let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                            let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                gxrow[j] = (grow[j] - yrow[j] * dot) / norm;
                            }
                        }
                        self.accumulate(&mut grads, *a, &gx);
                    }
                }
                Op::SumScalars(terms) => {
                    for t in terms {
                        if self.nodes[*t].needs_grad {
                            self.accumulate(&mut grads, *t, &gout);
                        }
                    }
                }
                Op::MaskedL1 {
                    x,
                    target,
                    mask,
                    count,
                } => {
                    if self.nodes[*x].needs_grad {
                        let scale = gout[0] / *count as f64;
                        let xv = &self.nodes[*x].value;
                        let mut gx = vec![0.0; xv.len()];
                        for (i, (gv, (xi, ti))) in
                            gx.iter_mut().zip(xv.iter().zip(target)).enumerate()
                        {
                            let keep = mask.as_ref().map_or(true, |m| m[i]);
                            if keep {
                                let d = xi - ti;
                                *gv = if d > 0.0 {
                                    scale
                                } else if d < 0.0 {
                                    -scale
                                } else {
                                    0.0
                                };
                            }
                        }
                        self.accumulate(&mut grads, *x, &gx);
                    }
                }
                Op::QuatGeodesicSum { q, target } => {
                    if self.nodes[*q].needs_grad {
                        let qv = &self.nodes[*q].value;
                        let mut gq = vec![0.0; qv.len()];
                        for ((qrow, trow), grow) in
                            qv.chunks(4).zip(target.chunks(4)).zip(gq.chunks_mut(4))
                        {
                            let dot: f64 = qrow.iter().zip(trow).map(|(a, b)| a * b).sum();
                            let a = dot.abs().min(1.0);
                            if a < 1.0 - 1e-9 {
                                let coef =
                                    gout[0] * (-2.0 / (1.0 - a * a).sqrt()) * dot.signum();
                                for j in 0..4 {
                                    grow[j] = coef * trow[j];
                                }
                            }
                            // Exactly aligned quaternions sit at the loss
                            // minimum; leave the (sub)gradient at zero.
                        }
                        self.accumulate(&mut grads, *q, &gq);
                    }
                }
                Op::HuberSum { x, target, delta } => {
                    if self.nodes[*x].needs_grad {
                        let xv = &self.nodes[*x].value;
                        let gx: Vec<f64> = xv
                            .iter()
                            .zip(target)
                            .map(|(xi, ti)| {
                                let r = xi - ti;
                                gout[0]
                                    * if r.abs() <= *delta {
                                        r
                                    } else {
                                        delta * r.signum()
                                    }
                            })
                            .collect();
                        self.accumulate(&mut grads, *x, &gx);
                    }
                }
                Op::CosineDistMean { x, target } => {
                    if self.nodes[*x].needs_grad {
                        let n = self.nodes[*x].cols;
                        let k = self.nodes[*x].rows;
                        let xv = &self.nodes[*x].value;
                        let mut gx = vec![0.0; xv.len()];
                        let scale = gout[0] / k as f64;
                        for ((xrow, trow), gxrow) in
                            xv.chunks(n).zip(target.chunks(n)).zip(gx.chunks_mut(n))
                        {
                            let dot: f64 = xrow.iter().zip(trow).map(|(a, b)| a * b).sum();
                            let nx = xrow.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                            let nt = trow.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                            for j in 0..n {
                                // d/dx of -cos(x,t)
                                gxrow[j] = scale
                                    * (-(trow[j] / (nx * nt)) + dot * xrow[j] / (nx * nx * nx * nt));
                            }
                        }
                        self.accumulate(&mut grads, *x, &gx);
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            slot @ None => {
                *slot = Some(g.to_vec());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Builds a small graph touching every op and checks the backward pass
    /// against central finite differences on every input coordinate.
    fn build_loss(inputs: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let x = tape.leaf(inputs[0].clone(), 4, 6, true); // tokens
        let w = tape.leaf(inputs[1].clone(), 6, 4, true);
        let gain = tape.leaf(inputs[2].clone(), 1, 6, true);
        let bias = tape.leaf(inputs[3].clone(), 1, 6, true);
        let pos = tape.leaf(inputs[4].clone(), 2, 6, true);

        let xp = tape.add_tiled_rows(x, pos);
        let normed = tape.layernorm(xp, gain, bias);
        let scores = tape.matmul_nt(normed, normed);
        let probs = tape.softmax_rows(scores);
        let mixed = tape.matmul(probs, normed);
        let a = tape.add(mixed, normed);
        let h = tape.matmul(a, w); // [4,4]
        let act = tape.gelu(h);
        let pooled = tape.mean_pool_groups(act, 2); // [2,4]
        let quat = tape.normalize_rows(pooled);
        let target_q = vec![0.5, 0.5, 0.5, 0.5, 1.0, 0.0, 0.0, 0.0];
        let l_quat = tape.quat_geodesic_sum(quat, target_q);
        let tail = tape.slice_rows(act, 1, 2);
        let tail_cols = tape.slice_cols(tail, 1, 3);
        let l_hub = tape.huber_sum(tail_cols, vec![0.1; 6], 0.3);
        let l_l1 = tape.masked_l1(
            a,
            vec![0.05; 24],
            Some((0..24).map(|i| i % 3 != 0).collect()),
        );
        let l_cos = tape.cosine_dist_mean(pooled, vec![0.3, -0.2, 0.4, 0.9, 0.1, 0.2, 0.3, 0.4]);
        let scaled = tape.scale(l_cos, 0.7);
        let loss = tape.sum_scalars(&[l_quat, l_hub, l_l1, scaled]);

        let grads = tape.backward(loss);
        let leaf_vars = [x, w, gain, bias, pos];
        let out = leaf_vars
            .iter()
            .map(|v| grads.get(*v).unwrap().to_vec())
            .collect();
        (tape.scalar(loss), out)
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let sizes = [24, 24, 6, 6, 12];
        let inputs: Vec<Vec<f64>> = sizes
            .iter()
            .map(|&s| (0..s).map(|_| rng.random_range(-0.8..0.8)).collect())
            .collect();
        let (_, analytic) = build_loss(&inputs);
        let h = 1e-6;
        for (which, input) in inputs.iter().enumerate() {
            for i in 0..input.len() {
                let mut plus = inputs.clone();
                plus[which][i] += h;
                let mut minus = inputs.clone();
                minus[which][i] -= h;
                let (lp, _) = build_loss(&plus);
                let (lm, _) = build_loss(&minus);
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic[which][i];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "input {which} coord {i}: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn grad_skips_constant_branches() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], 1, 2, true);
        let c = tape.constant(vec![3.0, 4.0], 1, 2);
        let s = tape.add(a, c);
        let l = tape.masked_l1(s, vec![0.0, 0.0], None);
        let grads = tape.backward(l);
        assert!(grads.get(c).is_none());
        assert!(grads.get(a).is_some());
    }
}
