//! 2-D cross-correlation via im2col + gemm.

use super::{grad_slot, shape_err, Node, Op, Tape, Tensor, TensorError, Var};
use crate::scalar::{matmul, MatRef, Real};

pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw_out = g.cols();
    let mut cols = vec![T::ZERO; g.rows() * hw_out];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..g.h_out {
                    let ih = oh as isize + ki as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    // valid ow range: 0 <= ow + kj - pad < w
                    let lo = g.pad.saturating_sub(kj);
                    let hi = (g.w + g.pad).saturating_sub(kj).min(g.w_out);
                    if lo < hi {
                        dst[oh * g.w_out + lo..oh * g.w_out + hi].copy_from_slice(&src_row[lo + kj - g.pad..hi + kj - g.pad]);
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw_out = g.cols();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..g.h_out {
                    let ih = oh as isize + ki as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let lo = g.pad.saturating_sub(kj);
                    let hi = (g.w + g.pad).saturating_sub(kj).min(g.w_out);
                    for ow in lo..hi {
                        dst_row[ow + kj - g.pad] += src[oh * g.w_out + ow];
                    }
                }
            }
        }
    }
}

fn geometry(x: &[usize], w: &[usize], b: &[usize], pad: usize) -> Result<(ConvGeom, usize), TensorError> {
    if x.len() != 3 || w.len() != 4 {
        return Err(shape_err("conv2d", format!("input {:?}, weight {:?}", x, w)));
    }
    let (c_out, c_in, k, k2) = (w[0], w[1], w[2], w[3]);
    if c_in != x[0] {
        return Err(shape_err("conv2d", format!("input has {} channels, weight expects {}", x[0], c_in)));
    }
    if k != k2 || k % 2 == 0 {
        return Err(shape_err("conv2d", format!("kernel must be square and odd, got {}x{}", k, k2)));
    }
    if b != [c_out] {
        return Err(shape_err("conv2d", format!("bias {:?} for {} output channels", b, c_out)));
    }
    let (h, wd) = (x[1], x[2]);
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(shape_err("conv2d", "kernel larger than padded input"));
    }
    let g = ConvGeom { c_in, h, w: wd, k, pad, h_out: h + 2 * pad + 1 - k, w_out: wd + 2 * pad + 1 - k };
    Ok((g, c_out))
}

impl<T: Real> Tape<T> {
    /// Stride-1 zero-padded cross-correlation.
    ///
    /// `x`: `C_in x H x W`, `w`: `C_out x C_in x k x k`, `b`: `C_out`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var, TensorError> {
        let (g, c_out) = geometry(self.value(x).shape(), self.value(w).shape(), self.value(b).shape(), pad)?;
        let cols = im2col(self.value(x).data(), &g);
        let hw = g.cols();
        let mut out = vec![T::ZERO; c_out * hw];
        let bias = self.value(b).data();
        for (co, row) in out.chunks_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        matmul(
            MatRef::new(self.value(w).data(), c_out, g.rows()),
            MatRef::new(&cols, g.rows(), hw),
            &mut out,
            true,
        );
        let requires_grad = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        let value = Tensor::new(vec![c_out, g.h_out, g.w_out], out)?;
        // im2col buffer is only needed for the weight gradient
        let cols = if self.requires_grad(w) { cols } else { Vec::new() };
        Ok(self.push(value, requires_grad, Op::Conv2d { x, w, b, k: g.k, pad, cols }))
    }
}

pub(crate) fn conv_backward<T: Real>(
    nodes: &[Node<T>],
    out_shape: &[usize],
    (x, w, b, k, pad, cols): (Var, Var, Var, usize, usize, &[T]),
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let xs = nodes[x.0].value.shape();
    let c_out = out_shape[0];
    let geom = ConvGeom { c_in: xs[0], h: xs[1], w: xs[2], k, pad, h_out: out_shape[1], w_out: out_shape[2] };
    let hw = geom.cols();
    let kk = geom.rows();
    if let Some(dw) = grad_slot(grads, nodes, w) {
        matmul(MatRef::new(g, c_out, hw), MatRef::t(cols, kk, hw), dw, true);
    }
    if let Some(db) = grad_slot(grads, nodes, b) {
        for (co, row) in g.chunks(hw).enumerate() {
            db[co] += row.iter().copied().sum::<T>();
        }
    }
    if nodes[x.0].requires_grad {
        let mut dcols = vec![T::ZERO; kk * hw];
        matmul(MatRef::t(nodes[w.0].value.data(), c_out, kk), MatRef::new(g, c_out, hw), &mut dcols, false);
        if let Some(dx) = grad_slot(grads, nodes, x) {
            col2im_add(&dcols, &geom, dx);
        }
    }
}
