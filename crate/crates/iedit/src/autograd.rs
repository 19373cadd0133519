//! A small reverse-mode autograd tape over dense f64 tensors.
//!
//! Each training step builds a fresh tape: leaves are created from parameter
//! or input data, ops append nodes, and `backward` walks the tape in reverse.
//! Everything is sequential and allocation-order deterministic, which is what
//! makes bit-identical reruns possible.

#![allow(clippy::needless_range_loop)] // index loops read clearest in kernels

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// out[m×n] = a[m×k] · b[k×n]
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    SoftmaxRows {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Silu(Var),
    /// 3×3 convolution over CHW data, padding 1.
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        c_in: usize,
        c_out: usize,
        h: usize,
        w_: usize,
        stride: usize,
    },
    UpsampleNearest2 {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
    },
    RmsNormRows {
        a: Var,
        rows: usize,
        cols: usize,
        eps: f64,
    },
    GatherRows {
        table: Var,
        cols: usize,
        indices: Vec<usize>,
    },
    /// Stack 1-D vars of equal length into a matrix, one per row.
    StackRows {
        rows: Vec<Var>,
        cols: usize,
    },
    SelectColumn {
        a: Var,
        rows: usize,
        cols: usize,
        col: usize,
    },
    SliceCols {
        a: Var,
        rows: usize,
        cols: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
        rows: usize,
        widths: Vec<usize>,
    },
    MeanVars {
        vars: Vec<Var>,
    },
    MinMaxNormalize {
        a: Var,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
        c: usize,
        hw: usize,
    },
    ConcatChannels {
        a: Var,
        b: Var,
        c_a: usize,
        hw: usize,
    },
    /// Mean of mask-weighted squared differences; mask broadcasts over channels.
    MaskedSqMean {
        pred: Var,
        target: Var,
        mask: Vec<f64>,
        channels: usize,
        count: f64,
    },
    SqDiffMean {
        a: Var,
        b: Var,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            data,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Var {
        self.push(data, shape, Op::Leaf, requires_grad)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.rg(*v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_rg(&[a, b]);
        self.push(data, shape, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_rg(&[a, b]);
        self.push(data, shape, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_rg(&[a, b]);
        self.push(data, shape, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(data, shape, Op::Scale(a, s), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = mat_dims(self.shape(a));
        let (k2, n) = mat_dims(self.shape(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_kernel(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.any_rg(&[a, b]);
        self.push(out, vec![m, n], Op::Matmul { a, b, m, k, n }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (rows, cols) = mat_dims(self.shape(a));
        let src = self.data(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.rg(a);
        self.push(out, vec![cols, rows], Op::Transpose { a, rows, cols }, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = mat_dims(self.shape(a));
        let mut out = self.data(a).to_vec();
        for r in 0..rows {
            softmax_row(&mut out[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(a);
        self.push(out, vec![rows, cols], Op::SoftmaxRows { a, rows, cols }, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x * sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(data, shape, Op::Silu(a), rg)
    }

    /// 3×3 conv, padding 1, over `x` shaped `[c_in, h, w]`; weight `[c_out, c_in*9]`,
    /// bias `[c_out]`. Output `[c_out, h/stride, w/stride]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (c_in, h, w_) = chw_dims(self.shape(x));
        let (c_out, kdim) = mat_dims(self.shape(w));
        assert_eq!(kdim, c_in * 9, "conv weight inner dim");
        assert_eq!(self.data(b).len(), c_out, "conv bias len");
        let (oh, ow) = (h / stride, w_ / stride);
        let cols = im2col(self.data(x), c_in, h, w_, stride);
        let mut out = vec![0.0; c_out * oh * ow];
        matmul_kernel(self.data(w), &cols, &mut out, c_out, c_in * 9, oh * ow);
        let bias = self.data(b);
        for co in 0..c_out {
            let bv = bias[co];
            for p in &mut out[co * oh * ow..(co + 1) * oh * ow] {
                *p += bv;
            }
        }
        let rg = self.any_rg(&[x, w, b]);
        self.push(
            out,
            vec![c_out, oh, ow],
            Op::Conv2d {
                x,
                w,
                b,
                c_in,
                c_out,
                h,
                w_,
                stride,
            },
            rg,
        )
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let (c, h, w) = chw_dims(self.shape(x));
        let src = self.data(x);
        let mut out = vec![0.0; c * h * 2 * w * 2];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = src[ch * h * w + i * w + j];
                    let base = ch * 4 * h * w;
                    for di in 0..2 {
                        for dj in 0..2 {
                            out[base + (2 * i + di) * 2 * w + 2 * j + dj] = v;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            out,
            vec![c, 2 * h, 2 * w],
            Op::UpsampleNearest2 { x, c, h, w },
            rg,
        )
    }

    pub fn rms_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (rows, cols) = mat_dims(self.shape(a));
        let src = self.data(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|x| x * x).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = row[c] * inv;
            }
        }
        let rg = self.rg(a);
        self.push(
            out,
            vec![rows, cols],
            Op::RmsNormRows { a, rows, cols, eps },
            rg,
        )
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let (rows, cols) = mat_dims(self.shape(table));
        let src = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            assert!(i < rows, "gather index {i} out of {rows}");
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        self.push(
            out,
            vec![indices.len(), cols],
            Op::GatherRows {
                table,
                cols,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let cols = self.data(rows[0]).len();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            assert_eq!(self.data(r).len(), cols, "stack_rows width mismatch");
            out.extend_from_slice(self.data(r));
        }
        let rg = self.any_rg(rows);
        self.push(
            out,
            vec![rows.len(), cols],
            Op::StackRows {
                rows: rows.to_vec(),
                cols,
            },
            rg,
        )
    }

    pub fn select_column(&mut self, a: Var, col: usize) -> Var {
        let (rows, cols) = mat_dims(self.shape(a));
        assert!(col < cols);
        let src = self.data(a);
        let out = (0..rows).map(|r| src[r * cols + col]).collect();
        let rg = self.rg(a);
        self.push(out, vec![rows], Op::SelectColumn { a, rows, cols, col }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = mat_dims(self.shape(a));
        assert!(start + len <= cols);
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        self.push(
            out,
            vec![rows, len],
            Op::SliceCols {
                a,
                rows,
                cols,
                start,
                len,
            },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = mat_dims(self.shape(parts[0])).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = mat_dims(self.shape(p));
                assert_eq!(r, rows, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let w = widths[pi];
            let src = self.data(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.any_rg(parts);
        self.push(
            out,
            vec![rows, total],
            Op::ConcatCols {
                parts: parts.to_vec(),
                rows,
                widths,
            },
            rg,
        )
    }

    pub fn mean_vars(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let shape = self.shape(vars[0]).to_vec();
        let n = self.data(vars[0]).len();
        let mut out = vec![0.0; n];
        for &v in vars {
            assert_eq!(self.data(v).len(), n, "mean_vars shape mismatch");
            for (o, x) in out.iter_mut().zip(self.data(v)) {
                *o += x;
            }
        }
        let inv = 1.0 / vars.len() as f64;
        for o in &mut out {
            *o *= inv;
        }
        let rg = self.any_rg(vars);
        self.push(
            out,
            shape,
            Op::MeanVars {
                vars: vars.to_vec(),
            },
            rg,
        )
    }

    /// Min–max normalize to [0, 1]; when max == min the output is constant 0.5.
    pub fn minmax_normalize(&mut self, a: Var) -> Var {
        let src = self.data(a);
        let mn = src.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let data = if mx > mn {
            let inv = 1.0 / (mx - mn);
            src.iter().map(|x| (x - mn) * inv).collect()
        } else {
            vec![0.5; src.len()]
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(data, shape, Op::MinMaxNormalize { a }, rg)
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (c, h, w) = chw_dims(self.shape(x));
        assert_eq!(self.data(bias).len(), c, "channel bias len");
        let hw = h * w;
        let b = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        for ch in 0..c {
            let bv = b[ch];
            for p in &mut out[ch * hw..(ch + 1) * hw] {
                *p += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_rg(&[x, bias]);
        self.push(out, shape, Op::AddChannelBias { x, bias, c, hw }, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (c_a, h, w) = chw_dims(self.shape(a));
        let (c_b, h2, w2) = chw_dims(self.shape(b));
        assert_eq!((h, w), (h2, w2), "concat_channels spatial mismatch");
        let mut out = Vec::with_capacity((c_a + c_b) * h * w);
        out.extend_from_slice(self.data(a));
        out.extend_from_slice(self.data(b));
        let rg = self.any_rg(&[a, b]);
        self.push(
            out,
            vec![c_a + c_b, h, w],
            Op::ConcatChannels {
                a,
                b,
                c_a,
                hw: h * w,
            },
            rg,
        )
    }

    /// Masked mean-squared error: mean over masked elements of
    /// `(pred - target)^2`, where `mask` is a 0/1 map broadcast over channels.
    pub fn masked_sq_mean(&mut self, pred: Var, target: Var, mask: &[f64]) -> Result<Var> {
        assert_eq!(
            self.shape(pred),
            self.shape(target),
            "masked_sq_mean shapes"
        );
        let (c, h, w) = chw_dims(self.shape(pred));
        assert_eq!(mask.len(), h * w, "mask size");
        let nnz = mask.iter().filter(|&&m| m != 0.0).count();
        if nnz == 0 {
            return Err(Error::DegenerateMask);
        }
        let count = (nnz * c) as f64;
        let p = self.data(pred);
        let t = self.data(target);
        let mut acc = 0.0;
        for ch in 0..c {
            for i in 0..h * w {
                let d = p[ch * h * w + i] - t[ch * h * w + i];
                acc += mask[i] * d * d;
            }
        }
        let rg = self.any_rg(&[pred, target]);
        Ok(self.push(
            vec![acc / count],
            vec![1],
            Op::MaskedSqMean {
                pred,
                target,
                mask: mask.to_vec(),
                channels: c,
                count,
            },
            rg,
        ))
    }

    /// Plain mean of squared differences over all elements.
    pub fn sq_diff_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sq_diff_mean shapes");
        let n = self.data(a).len() as f64;
        let acc: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.any_rg(&[a, b]);
        self.push(vec![acc / n], vec![1], Op::SqDiffMean { a, b }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            self.data(a).len(),
            shape.iter().product::<usize>(),
            "reshape size"
        );
        // Represent as a 1-input stack-like copy so the gradient passes through.
        let data = self.data(a).to_vec();
        let rg = self.rg(a);
        let cols = data.len();
        self.push(
            data,
            shape,
            Op::StackRows {
                rows: vec![a],
                cols,
            },
            rg,
        )
    }

    /// Run reverse-mode accumulation from scalar `loss`; returns per-node grads.
    pub fn backward(&mut self, loss: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        assert_eq!(self.nodes[loss.0].data.len(), 1, "backward from non-scalar");
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_into = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64], tape: &Tape| {
            if !tape.rg(v) {
                return;
            }
            let slot = &mut grads[v.0];
            match slot {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                None => *slot = Some(contrib.to_vec()),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(grads, *a, g, self);
                add_into(grads, *b, g, self);
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g, self);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                add_into(grads, *b, &neg, self);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                add_into(grads, *a, &ga, self);
                add_into(grads, *b, &gb, self);
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
                add_into(grads, *a, &ga, self);
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.rg(*a) {
                    // dA = g · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    matmul_nt(g, self.data(*b), &mut ga, *m, *n, *k);
                    add_into(grads, *a, &ga, self);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · g
                    let mut gb = vec![0.0; k * n];
                    matmul_tn(self.data(*a), g, &mut gb, *m, *k, *n);
                    add_into(grads, *b, &gb, self);
                }
            }
            Op::Transpose { a, rows, cols } => {
                let mut ga = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        ga[r * cols + c] = g[c * rows + r];
                    }
                }
                add_into(grads, *a, &ga, self);
            }
            Op::SoftmaxRows { a, rows, cols } => {
                let y = &self.nodes[i].data;
                let mut ga = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for c in 0..*cols {
                        ga[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                add_into(grads, *a, &ga, self);
            }
            Op::Silu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(gv, &x)| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    })
                    .collect();
                add_into(grads, *a, &ga, self);
            }
            Op::Conv2d {
                x,
                w,
                b,
                c_in,
                c_out,
                h,
                w_,
                stride,
            } => {
                let (oh, ow) = (h / stride, w_ / stride);
                if self.rg(*b) {
                    let mut gb = vec![0.0; *c_out];
                    for co in 0..*c_out {
                        gb[co] = g[co * oh * ow..(co + 1) * oh * ow].iter().sum();
                    }
                    add_into(grads, *b, &gb, self);
                }
                let cols = im2col(self.data(*x), *c_in, *h, *w_, *stride);
                if self.rg(*w) {
                    // dW = g · colsᵀ
                    let mut gw = vec![0.0; c_out * c_in * 9];
                    matmul_nt(g, &cols, &mut gw, *c_out, oh * ow, c_in * 9);
                    add_into(grads, *w, &gw, self);
                }
                if self.rg(*x) {
                    // dcols = Wᵀ · g, then scatter back
                    let mut gcols = vec![0.0; c_in * 9 * oh * ow];
                    matmul_tn(self.data(*w), g, &mut gcols, *c_out, c_in * 9, oh * ow);
                    let gx = col2im(&gcols, *c_in, *h, *w_, *stride);
                    add_into(grads, *x, &gx, self);
                }
            }
            Op::UpsampleNearest2 { x, c, h, w } => {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..*c {
                    for i in 0..*h {
                        for j in 0..*w {
                            let base = ch * 4 * h * w;
                            let mut acc = 0.0;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    acc += g[base + (2 * i + di) * 2 * w + 2 * j + dj];
                                }
                            }
                            gx[ch * h * w + i * w + j] = acc;
                        }
                    }
                }
                add_into(grads, *x, &gx, self);
            }
            Op::RmsNormRows { a, rows, cols, eps } => {
                let src = self.data(*a);
                let mut ga = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let row = &src[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let ms = row.iter().map(|x| x * x).sum::<f64>() / *cols as f64;
                    let denom = (ms + eps).sqrt();
                    let dot: f64 = gr.iter().zip(row).map(|(gv, xv)| gv * xv).sum();
                    let scale = dot / (*cols as f64 * denom * denom * denom);
                    for c in 0..*cols {
                        ga[r * cols + c] = gr[c] / denom - row[c] * scale;
                    }
                }
                add_into(grads, *a, &ga, self);
            }
            Op::GatherRows {
                table,
                cols,
                indices,
            } => {
                if self.rg(*table) {
                    let trows = self.shape(*table)[0];
                    let mut gt = vec![0.0; trows * cols];
                    for (pos, &idx) in indices.iter().enumerate() {
                        for c in 0..*cols {
                            gt[idx * cols + c] += g[pos * cols + c];
                        }
                    }
                    add_into(grads, *table, &gt, self);
                }
            }
            Op::StackRows { rows, cols } => {
                for (pos, &r) in rows.iter().enumerate() {
                    add_into(grads, r, &g[pos * cols..(pos + 1) * cols], self);
                }
            }
            Op::SelectColumn { a, rows, cols, col } => {
                let mut ga = vec![0.0; rows * cols];
                for r in 0..*rows {
                    ga[r * cols + col] = g[r];
                }
                add_into(grads, *a, &ga, self);
            }
            Op::SliceCols {
                a,
                rows,
                cols,
                start,
                len,
            } => {
                let mut ga = vec![0.0; rows * cols];
                for r in 0..*rows {
                    ga[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                add_into(grads, *a, &ga, self);
            }
            Op::ConcatCols {
                parts,
                rows,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let w = widths[pi];
                    if self.rg(p) {
                        let mut gp = vec![0.0; rows * w];
                        for r in 0..*rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        add_into(grads, p, &gp, self);
                    }
                    off += w;
                }
            }
            Op::MeanVars { vars } => {
                let inv = 1.0 / vars.len() as f64;
                let gv: Vec<f64> = g.iter().map(|x| x * inv).collect();
                for &v in vars {
                    add_into(grads, v, &gv, self);
                }
            }
            Op::MinMaxNormalize { a } => {
                let src = self.data(*a);
                let n = src.len();
                let (mut i_min, mut i_max) = (0usize, 0usize);
                for (j, &v) in src.iter().enumerate() {
                    if v < src[i_min] {
                        i_min = j;
                    }
                    if v > src[i_max] {
                        i_max = j;
                    }
                }
                let (mn, mx) = (src[i_min], src[i_max]);
                let mut ga = vec![0.0; n];
                if mx > mn {
                    let inv = 1.0 / (mx - mn);
                    let inv2 = inv * inv;
                    for j in 0..n {
                        ga[j] += g[j] * inv;
                        ga[i_min] += g[j] * (src[j] - mx) * inv2;
                        ga[i_max] += g[j] * (mn - src[j]) * inv2;
                    }
                }
                add_into(grads, *a, &ga, self);
            }
            Op::AddChannelBias { x, bias, c, hw } => {
                add_into(grads, *x, g, self);
                if self.rg(*bias) {
                    let mut gb = vec![0.0; *c];
                    for ch in 0..*c {
                        gb[ch] = g[ch * hw..(ch + 1) * hw].iter().sum();
                    }
                    add_into(grads, *bias, &gb, self);
                }
            }
            Op::ConcatChannels { a, b, c_a, hw, .. } => {
                add_into(grads, *a, &g[..c_a * hw], self);
                add_into(grads, *b, &g[c_a * hw..], self);
            }
            Op::MaskedSqMean {
                pred,
                target,
                mask,
                channels,
                count,
            } => {
                let p = self.data(*pred);
                let t = self.data(*target);
                let hw = mask.len();
                let s = 2.0 * g[0] / count;
                let mut gp = vec![0.0; p.len()];
                for ch in 0..*channels {
                    for i in 0..hw {
                        let idx = ch * hw + i;
                        gp[idx] = s * mask[i] * (p[idx] - t[idx]);
                    }
                }
                if self.rg(*target) {
                    let gt: Vec<f64> = gp.iter().map(|x| -x).collect();
                    add_into(grads, *target, &gt, self);
                }
                add_into(grads, *pred, &gp, self);
            }
            Op::SqDiffMean { a, b } => {
                let n = self.data(*a).len() as f64;
                let s = 2.0 * g[0] / n;
                let ga: Vec<f64> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(x, y)| s * (x - y))
                    .collect();
                if self.rg(*b) {
                    let gb: Vec<f64> = ga.iter().map(|x| -x).collect();
                    add_into(grads, *b, &gb, self);
                }
                add_into(grads, *a, &ga, self);
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`, or None if `v` did not require grad
    /// or did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn mat_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => panic!("expected matrix shape, got {other:?}"),
    }
}

fn chw_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [c, h, w] => (*c, *h, *w),
        other => panic!("expected CHW shape, got {other:?}"),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Rank-4 panel update: out_row += a0·b0 + a1·b1 + a2·b2 + a3·b3.
#[inline]
fn axpy4(orow: &mut [f64], coef: [f64; 4], rows: [&[f64]; 4]) {
    let n = orow.len();
    for j in 0..n {
        orow[j] += coef[0] * rows[0][j]
            + coef[1] * rows[1][j]
            + coef[2] * rows[2][j]
            + coef[3] * rows[3][j];
    }
}

/// out[m×n] += a[m×k] · b[k×n] (out must be zeroed by the caller)
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut kk = 0;
        while kk + 4 <= k {
            axpy4(
                orow,
                [arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]],
                [
                    &b[kk * n..(kk + 1) * n],
                    &b[(kk + 1) * n..(kk + 2) * n],
                    &b[(kk + 2) * n..(kk + 3) * n],
                    &b[(kk + 3) * n..(kk + 4) * n],
                ],
            );
            kk += 4;
        }
        for kk in kk..k {
            let av = arow[kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] = a[m×k] · b[n×k]ᵀ
fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            // four accumulators so the reduction vectorizes
            let mut acc = [0.0f64; 4];
            let mut kk = 0;
            while kk + 4 <= k {
                acc[0] += arow[kk] * brow[kk];
                acc[1] += arow[kk + 1] * brow[kk + 1];
                acc[2] += arow[kk + 2] * brow[kk + 2];
                acc[3] += arow[kk + 3] * brow[kk + 3];
                kk += 4;
            }
            let mut tail = 0.0;
            for kk in kk..k {
                tail += arow[kk] * brow[kk];
            }
            out[i * n + j] = acc[0] + acc[1] + acc[2] + acc[3] + tail;
        }
    }
}

/// out[k×n] = a[m×k]ᵀ · b[m×n]
fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in out.iter_mut() {
        *p = 0.0;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Unfold a CHW tensor into a `[c*9, oh*ow]` matrix for 3×3/pad-1 convolution.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (oh, ow) = (h / stride, w / stride);
    let mut cols = vec![0.0; c * 9 * oh * ow];
    for ch in 0..c {
        for ki in 0..3 {
            for kj in 0..3 {
                let krow = (ch * 9 + ki * 3 + kj) * oh * ow;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - 1;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[krow + oi * ow + oj] = x[ch * h * w + ii as usize * w + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter a `[c*9, oh*ow]` gradient back onto the CHW input of `im2col`.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (oh, ow) = (h / stride, w / stride);
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for ki in 0..3 {
            for kj in 0..3 {
                let krow = (ch * 9 + ki * 3 + kj) * oh * ow;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - 1;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        x[ch * h * w + ii as usize * w + jj as usize] += cols[krow + oi * ow + oj];
                    }
                }
            }
        }
    }
    x
}
