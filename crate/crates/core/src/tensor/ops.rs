use std::sync::Arc;

use super::conv::conv_backward;
use super::{grad_slot, shape_err, Node, Op, Tape, Tensor, TensorError, Var};
use crate::scalar::{matmul, MatRef, Real};

/// Argmax positions recorded by [`Tape::maxpool2`], consumed by [`Tape::max_unpool2`].
#[derive(Debug, Clone)]
pub struct PoolIndices {
    /// Flat index into the pooled input for every pooled output element.
    pub(crate) argmax: Arc<[usize]>,
    /// `C x H x W` of the tensor that was pooled.
    pub(crate) input_shape: [usize; 3],
}

impl PoolIndices {
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Batch-norm running statistics (non-trainable buffers).
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats { mean: vec![T::ZERO; channels], var: vec![T::ONE; channels] }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Bilinear corner indices and weights of a query point on an `h x w` vertex grid.
///
/// Grid vertex `(r, c)` sits at `(c / (w-1), r / (h-1))`; points on the far
/// edges fall into the last cell with full weight on the far vertex.
pub fn bilinear_stencil(x: f64, y: f64, h: usize, w: usize) -> Result<([usize; 4], [f64; 4]), TensorError> {
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(TensorError::OutOfDomain { x, y });
    }
    let axis = |t: f64, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let u = t * (n - 1) as f64;
        let i0 = (u.floor() as usize).min(n - 2);
        (i0, i0 + 1, u - i0 as f64)
    };
    let (c0, c1, fx) = axis(x, w);
    let (r0, r1, fy) = axis(y, h);
    Ok((
        [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    ))
}

impl<T: Real> Tape<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > T::ZERO { a } else { T::ZERO }).collect();
        let value = Tensor { shape: v.shape().to_vec(), data };
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Relu { x })
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<(Var, PoolIndices), TensorError> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) || s[1] == 0 || s[2] == 0 {
            return Err(shape_err("maxpool2", format!("need C x H x W with even H, W; got {:?}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = v.data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            let base = ch * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + (2 * i) * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let argmax: Arc<[usize]> = argmax.into();
        let indices = PoolIndices { argmax: argmax.clone(), input_shape: [c, h, w] };
        let rg = self.requires_grad(x);
        let var = self.push(Tensor { shape: vec![c, ho, wo], data: out }, rg, Op::MaxPool2 { x, argmax });
        Ok((var, indices))
    }

    /// Scatter `x` back to the argmax positions of a matching [`Tape::maxpool2`].
    pub fn max_unpool2(&mut self, x: Var, indices: &PoolIndices) -> Result<Var, TensorError> {
        let v = self.value(x);
        let [c, h, w] = indices.input_shape;
        if v.shape() != [c, h / 2, w / 2] {
            return Err(shape_err(
                "max_unpool2",
                format!("input {:?} does not match pooled shape {:?}", v.shape(), [c, h / 2, w / 2]),
            ));
        }
        let mut out = vec![T::ZERO; c * h * w];
        for (o, &idx) in indices.argmax.iter().enumerate() {
            out[idx] = v.data()[o];
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor { shape: vec![c, h, w], data: out },
            rg,
            Op::MaxUnpool2 { x, argmax: indices.argmax.clone() },
        ))
    }

    /// Per-channel batch normalization of a single `C x H x W` feature map.
    ///
    /// With `training`, statistics come from the map itself and `stats` is
    /// updated with momentum 0.1 (unbiased variance); otherwise `stats` is used.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<T>,
        training: bool,
    ) -> Result<Var, TensorError> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(shape_err("batch_norm2d", format!("need C x H x W, got {:?}", s)));
        }
        let (c, m) = (s[0], s[1] * s[2]);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] || stats.mean.len() != c {
            return Err(shape_err("batch_norm2d", format!("per-channel parameters must have length {}", c)));
        }
        let eps = T::from_f64(BN_EPS);
        let mom = T::from_f64(BN_MOMENTUM);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![T::ZERO; c * m];
        let mut xhat = vec![T::ZERO; c * m];
        let mut inv_std = vec![T::ZERO; c];
        let mf = T::from_usize(m);
        for ch in 0..c {
            let plane = &xd[ch * m..(ch + 1) * m];
            let (mean, var) = if training {
                let mean = plane.iter().copied().sum::<T>() / mf;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                let unbiased = if m > 1 { var * mf / T::from_usize(m - 1) } else { var };
                stats.mean[ch] = (T::ONE - mom) * stats.mean[ch] + mom * mean;
                stats.var[ch] = (T::ONE - mom) * stats.var[ch] + mom * unbiased;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let is = T::ONE / (var + eps).sqrt();
            inv_std[ch] = is;
            for i in 0..m {
                let xh = (plane[i] - mean) * is;
                xhat[ch * m + i] = xh;
                out[ch * m + i] = gd[ch] * xh + bd[ch];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            Tensor { shape: s, data: out },
            rg,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: training },
        ))
    }

    /// Bilinear interpolation of a `C x H x W` vertex-aligned feature map at
    /// points in the unit square. Returns `N x C`.
    pub fn bilinear_gather(&mut self, f: Var, pts: &[[f64; 2]]) -> Result<Var, TensorError> {
        let s = self.value(f).shape().to_vec();
        if s.len() != 3 {
            return Err(shape_err("bilinear_gather", format!("need C x H x W, got {:?}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let fd = self.value(f).data();
        let mut corners = Vec::with_capacity(pts.len());
        let mut weights = Vec::with_capacity(pts.len());
        let mut out = vec![T::ZERO; pts.len() * c];
        for (n, p) in pts.iter().enumerate() {
            let (idx, wt) = bilinear_stencil(p[0], p[1], h, w)?;
            let wt = wt.map(T::from_f64);
            let row = &mut out[n * c..(n + 1) * c];
            for (ch, o) in row.iter_mut().enumerate() {
                let plane = &fd[ch * hw..(ch + 1) * hw];
                *o = wt[0] * plane[idx[0]] + wt[1] * plane[idx[1]] + wt[2] * plane[idx[2]] + wt[3] * plane[idx[3]];
            }
            corners.push(idx.map(|i| i as u32));
            weights.push(wt);
        }
        let rg = self.requires_grad(f);
        Ok(self.push(Tensor { shape: vec![pts.len(), c], data: out }, rg, Op::Gather { f, corners, weights }))
    }

    /// Row-wise affine map: `x (N x F_in) * W^T (F_in x F_out) + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(b).shape() != [ws[0]] {
            return Err(shape_err(
                "dense",
                format!("x {:?}, W {:?}, b {:?}", xs, ws, self.value(b).shape()),
            ));
        }
        let (n, f_in, f_out) = (xs[0], xs[1], ws[0]);
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(n * f_out);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        matmul(
            MatRef::new(self.value(x).data(), n, f_in),
            MatRef::t(self.value(w).data(), f_out, f_in),
            &mut out,
            true,
        );
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(Tensor { shape: vec![n, f_out], data: out }, rg, Op::Dense { x, w, b }))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let Some(first) = parts.first() else {
            return Err(shape_err("concat", "no inputs"));
        };
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {} for rank {}", axis, base.len())));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{:?} vs {:?} along axis {}", s, base, axis)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let inner = v.numel() / outer;
                out.extend_from_slice(&v.data()[o * inner..(o + 1) * inner]);
            }
        }
        let rg = parts.iter().any(|p| self.requires_grad(*p));
        Ok(self.push(Tensor { shape, data: out }, rg, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Mean squared error `(1/n) * sum (truth_i - pred_i)^2`.
    pub fn mse_loss(&mut self, pred: Var, truth: &[T]) -> Result<Var, TensorError> {
        let p = self.value(pred).data();
        if p.len() != truth.len() || p.is_empty() {
            return Err(shape_err("mse_loss", format!("pred has {} values, truth {}", p.len(), truth.len())));
        }
        let n = T::from_usize(p.len());
        let loss = p.iter().zip(truth).map(|(&a, &b)| (b - a) * (b - a)).sum::<T>() / n;
        let rg = self.requires_grad(pred);
        Ok(self.push(Tensor::scalar(loss), rg, Op::Mse { pred, truth: truth.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    pub(crate) fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, k, pad, cols } => {
                conv_backward(nodes, node.value.shape(), (*x, *w, *b, *k, *pad, cols), g, grads)
            }
            Op::Relu { x } => {
                let xv = nodes[x.0].value.data();
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > T::ZERO {
                            *d += gi;
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for (o, &idx) in argmax.iter().enumerate() {
                        dx[idx] += g[o];
                    }
                }
            }
            Op::MaxUnpool2 { x, argmax } => {
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for (o, &idx) in argmax.iter().enumerate() {
                        dx[o] += g[idx];
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let m = xhat.len() / c;
                let gam = nodes[gamma.0].value.data();
                if let Some(dg) = grad_slot(grads, nodes, *gamma) {
                    for ch in 0..c {
                        dg[ch] += (0..m).map(|i| g[ch * m + i] * xhat[ch * m + i]).sum::<T>();
                    }
                }
                if let Some(db) = grad_slot(grads, nodes, *beta) {
                    for ch in 0..c {
                        db[ch] += g[ch * m..(ch + 1) * m].iter().copied().sum::<T>();
                    }
                }
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    let mf = T::from_usize(m);
                    for ch in 0..c {
                        let gs = &g[ch * m..(ch + 1) * m];
                        let xs = &xhat[ch * m..(ch + 1) * m];
                        let scale = gam[ch] * inv_std[ch];
                        if *batch_stats {
                            let sum_g = gs.iter().copied().sum::<T>();
                            let sum_gx = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>();
                            for i in 0..m {
                                dx[ch * m + i] += scale * (gs[i] - sum_g / mf - xs[i] * sum_gx / mf);
                            }
                        } else {
                            for i in 0..m {
                                dx[ch * m + i] += scale * gs[i];
                            }
                        }
                    }
                }
            }
            Op::Gather { f, corners, weights } => {
                let s = nodes[f.0].value.shape();
                let (c, hw) = (s[0], s[1] * s[2]);
                if let Some(df) = grad_slot(grads, nodes, *f) {
                    for (n, (idx, wt)) in corners.iter().zip(weights).enumerate() {
                        for ch in 0..c {
                            let gv = g[n * c + ch];
                            let plane = &mut df[ch * hw..(ch + 1) * hw];
                            for q in 0..4 {
                                plane[idx[q] as usize] += wt[q] * gv;
                            }
                        }
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (n, f_in) = (xs[0], xs[1]);
                let f_out = nodes[w.0].value.shape()[0];
                if let Some(dw) = grad_slot(grads, nodes, *w) {
                    matmul(MatRef::t(g, n, f_out), MatRef::new(nodes[x.0].value.data(), n, f_in), dw, true);
                }
                if let Some(db) = grad_slot(grads, nodes, *b) {
                    for row in g.chunks(f_out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    matmul(MatRef::new(g, n, f_out), MatRef::new(nodes[w.0].value.data(), f_out, f_in), dx, true);
                }
            }
            Op::Concat { parts, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let mut offset = 0;
                let row_len = node.value.numel() / outer;
                for p in parts {
                    let inner = nodes[p.0].value.numel() / outer;
                    if let Some(dp) = grad_slot(grads, nodes, *p) {
                        for o in 0..outer {
                            let src = &g[o * row_len + offset..o * row_len + offset + inner];
                            for (d, &v) in dp[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    offset += inner;
                }
            }
            Op::Mse { pred, truth } => {
                let p = nodes[pred.0].value.data();
                let scale = T::from_f64(2.0) * g[0] / T::from_usize(p.len());
                if let Some(dp) = grad_slot(grads, nodes, *pred) {
                    for ((d, &a), &t) in dp.iter_mut().zip(p).zip(truth) {
                        *d += scale * (a - t);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}
