//! Reverse-mode differentiation over a linear tape of tensor ops.
//!
//! Feature maps use `[N, C, D, H, W]` layout; token rows use `[N, S, C]`.

use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub struct Conv3dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    /// Cubic kernel edge, 1 or 3; padding keeps the spatial size.
    pub k: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GroupNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

const GN_EPS: f32 = 1e-5;

enum Op {
    Input,
    Conv3d(Var, Conv3dLayer),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Add(Var, Var),
    AddChannelBias(Var, Var),
    Silu(Var),
    GroupNorm {
        x: Var,
        layer: GroupNormLayer,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Linear(Var, LinearLayer),
    ToRows(Var),
    FromRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f32>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    pub params: Vec<Vec<f32>>,
    nodes: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient reaching `var` (zero-length if none flowed).
    pub fn wrt(&self, var: Var) -> &[f32] {
        self.nodes[var.0].as_deref().unwrap_or(&[])
    }
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

fn spatial(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

/// `c = alpha * a * b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices lying within the given slices,
    // which callers construct from the same shapes used to size the buffers.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a `[C, D, H, W]` sample into `[C*k^3, D*H*W]` patches (zero padding).
fn im2col(x: &[f32], c: usize, dims: [usize; 3], k: usize, cols: &mut [f32]) {
    let [d, h, w] = dims;
    let s = d * h * w;
    let r = (k / 2) as isize;
    cols.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..c {
        let xc = &x[ci * s..(ci + 1) * s];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let dst = &mut cols[row * s..(row + 1) * s];
                    let (oz, oy, ox) = (kz as isize - r, ky as isize - r, kx as isize - r);
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = ((w as isize - ox).min(w as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for z in 0..d {
                        let sz = z as isize + oz;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + oy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let dst_off = (z * h + y) * w;
                            let src_off = (sz as usize * h + sy as usize) * w;
                            let xs = (x_lo as isize + ox) as usize;
                            let len = x_hi - x_lo;
                            dst[dst_off + x_lo..dst_off + x_hi]
                                .copy_from_slice(&xc[src_off + xs..src_off + xs + len]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into `dx`.
fn col2im(cols: &[f32], c: usize, dims: [usize; 3], k: usize, dx: &mut [f32]) {
    let [d, h, w] = dims;
    let s = d * h * w;
    let r = (k / 2) as isize;
    for ci in 0..c {
        let dxc = &mut dx[ci * s..(ci + 1) * s];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let src = &cols[row * s..(row + 1) * s];
                    let (oz, oy, ox) = (kz as isize - r, ky as isize - r, kx as isize - r);
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = ((w as isize - ox).min(w as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for z in 0..d {
                        let sz = z as isize + oz;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + oy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src_off = (z * h + y) * w;
                            let dst_off = (sz as usize * h + sy as usize) * w;
                            let xs = (x_lo as isize + ox) as usize;
                            for i in 0..x_hi - x_lo {
                                dxc[dst_off + xs + i] += src[src_off + x_lo + i];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, shape: Vec<usize>, value: Vec<f32>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "input shape");
        self.push(shape, value, Op::Input)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn conv3d(&mut self, x: Var, layer: Conv3dLayer) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 5, "conv3d expects [N, C, D, H, W]");
        assert_eq!(shape[1], layer.cin, "conv3d input channels");
        let (n, s) = (shape[0], spatial(&shape));
        let dims = [shape[2], shape[3], shape[4]];
        let kk = layer.cin * layer.k * layer.k * layer.k;
        let w = self.store.value(layer.w);
        let b = self.store.value(layer.b);
        let xv = self.value(x);
        let mut out = vec![0.0f32; n * layer.cout * s];
        let mut cols = if layer.k == 1 {
            Vec::new()
        } else {
            vec![0.0f32; kk * s]
        };
        for ni in 0..n {
            let xs = &xv[ni * layer.cin * s..(ni + 1) * layer.cin * s];
            let patches: &[f32] = if layer.k == 1 {
                xs
            } else {
                im2col(xs, layer.cin, dims, layer.k, &mut cols);
                &cols
            };
            let o = &mut out[ni * layer.cout * s..(ni + 1) * layer.cout * s];
            for co in 0..layer.cout {
                o[co * s..(co + 1) * s].iter_mut().for_each(|v| *v = b[co]);
            }
            gemm(layer.cout, kk, s, w, kk, 1, patches, s, 1, 1.0, o);
        }
        let mut oshape = shape;
        oshape[1] = layer.cout;
        self.push(oshape, out, Op::Conv3d(x, layer))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let [n, c, d, h, w] = [shape[0], shape[1], shape[2], shape[3], shape[4]];
        assert!(
            d % 2 == 0 && h % 2 == 0 && w % 2 == 0,
            "avg_pool2 needs even dims"
        );
        let (d2, h2, w2) = (d / 2, h / 2, w / 2);
        let xv = self.value(x);
        let mut out = vec![0.0f32; n * c * d2 * h2 * w2];
        for nc in 0..n * c {
            let src = &xv[nc * d * h * w..];
            let dst = &mut out[nc * d2 * h2 * w2..(nc + 1) * d2 * h2 * w2];
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        dst[((z / 2) * h2 + y / 2) * w2 + xx / 2] +=
                            0.125 * src[(z * h + y) * w + xx];
                    }
                }
            }
        }
        self.push(alloc::vec![n, c, d2, h2, w2], out, Op::AvgPool2(x))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let [n, c, d, h, w] = [shape[0], shape[1], shape[2], shape[3], shape[4]];
        let (d2, h2, w2) = (d * 2, h * 2, w * 2);
        let xv = self.value(x);
        let mut out = vec![0.0f32; n * c * d2 * h2 * w2];
        for nc in 0..n * c {
            let src = &xv[nc * d * h * w..(nc + 1) * d * h * w];
            let dst = &mut out[nc * d2 * h2 * w2..(nc + 1) * d2 * h2 * w2];
            for z in 0..d2 {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dst[(z * h2 + y) * w2 + xx] = src[((z / 2) * h + y / 2) * w + xx / 2];
                    }
                }
            }
        }
        self.push(alloc::vec![n, c, d2, h2, w2], out, Op::Upsample2(x))
    }

    /// Channel concatenation of two `[N, C, ...]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2..], sb[2..], "concat spatial dims");
        let (n, s) = (sa[0], spatial(&sa));
        let (ca, cb) = (sa[1], sb[1]);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(n * (ca + cb) * s);
        for ni in 0..n {
            out.extend_from_slice(&av[ni * ca * s..(ni + 1) * ca * s]);
            out.extend_from_slice(&bv[ni * cb * s..(ni + 1) * cb * s]);
        }
        let mut shape = sa;
        shape[1] = ca + cb;
        self.push(shape, out, Op::Concat(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Add(a, b))
    }

    /// Adds `bias[n, c]` to every voxel of channel `c` of sample `n`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c, s) = (shape[0], shape[1], spatial(&shape));
        assert_eq!(self.shape(bias), &[n, c], "channel bias shape");
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for nc in 0..n * c {
            let add = bv[nc];
            out[nc * s..(nc + 1) * s].iter_mut().for_each(|v| *v += add);
        }
        self.push(shape, out, Op::AddChannelBias(x, bias))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Silu(x))
    }

    pub fn group_norm(&mut self, x: Var, layer: GroupNormLayer) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c, s) = (shape[0], shape[1], spatial(&shape));
        assert_eq!(c, layer.channels, "group norm channels");
        let cg = c / layer.groups;
        let xv = self.value(x);
        let gamma = self.store.value(layer.gamma);
        let beta = self.store.value(layer.beta);
        let mut out = vec![0.0f32; xv.len()];
        let mut means = Vec::with_capacity(n * layer.groups);
        let mut rstds = Vec::with_capacity(n * layer.groups);
        let m = (cg * s) as f64;
        for ni in 0..n {
            for g in 0..layer.groups {
                let off = (ni * c + g * cg) * s;
                let chunk = &xv[off..off + cg * s];
                let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / m;
                let var = chunk
                    .iter()
                    .map(|&v| (v as f64 - mean) * (v as f64 - mean))
                    .sum::<f64>()
                    / m;
                let rstd = 1.0 / libm::sqrt(var + GN_EPS as f64);
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    for i in 0..s {
                        let idx = off + ci * s + i;
                        let xh = ((xv[idx] as f64 - mean) * rstd) as f32;
                        out[idx] = xh * gamma[ch] + beta[ch];
                    }
                }
                means.push(mean as f32);
                rstds.push(rstd as f32);
            }
        }
        self.push(
            shape,
            out,
            Op::GroupNorm {
                x,
                layer,
                mean: means,
                rstd: rstds,
            },
        )
    }

    /// Applies `y = x W^T + b` to every row of width `layer.inp`.
    pub fn linear(&mut self, x: Var, layer: LinearLayer) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(*shape.last().unwrap(), layer.inp, "linear input width");
        let rows = self.value(x).len() / layer.inp;
        let w = self.store.value(layer.w);
        let b = self.store.value(layer.b);
        let mut out = vec![0.0f32; rows * layer.out];
        for r in 0..rows {
            out[r * layer.out..(r + 1) * layer.out].copy_from_slice(b);
        }
        gemm(
            rows,
            layer.inp,
            layer.out,
            self.value(x),
            layer.inp,
            1,
            w,
            1,
            layer.inp,
            1.0,
            &mut out,
        );
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = layer.out;
        self.push(oshape, out, Op::Linear(x, layer))
    }

    /// `[N, C, D, H, W]` to `[N, S, C]`.
    pub fn to_rows(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c, s) = (shape[0], shape[1], spatial(&shape));
        let xv = self.value(x);
        let mut out = vec![0.0f32; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..s {
                    out[(ni * s + i) * c + ci] = xv[(ni * c + ci) * s + i];
                }
            }
        }
        self.push(alloc::vec![n, s, c], out, Op::ToRows(x))
    }

    /// `[N, S, C]` back to `[N, C, D, H, W]` with the spatial dims of `like`.
    pub fn from_rows(&mut self, x: Var, like: Var) -> Var {
        let rs = self.shape(x).to_vec();
        let (n, s, c) = (rs[0], rs[1], rs[2]);
        let mut shape = self.shape(like).to_vec();
        assert_eq!(spatial(&shape), s, "from_rows spatial size");
        shape[1] = c;
        let xv = self.value(x);
        let mut out = vec![0.0f32; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..s {
                    out[(ni * c + ci) * s + i] = xv[(ni * s + i) * c + ci];
                }
            }
        }
        self.push(shape, out, Op::FromRows(x))
    }

    /// Scaled dot-product attention of `q [N, S, d]` over `k, v [N, T, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        assert_eq!(ks, self.shape(v), "attention key/value shapes");
        assert_eq!(qs[0], ks[0]);
        assert_eq!(qs[2], ks[2]);
        let (n, s, dk, t) = (qs[0], qs[1], qs[2], ks[1]);
        let scale = 1.0 / libm::sqrtf(dk as f32);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0f32; n * s * t];
        let mut out = vec![0.0f32; n * s * dk];
        for ni in 0..n {
            for i in 0..s {
                let qrow = &qv[(ni * s + i) * dk..(ni * s + i + 1) * dk];
                let p = &mut probs[(ni * s + i) * t..(ni * s + i + 1) * t];
                let mut top = f32::NEG_INFINITY;
                for j in 0..t {
                    let krow = &kv[(ni * t + j) * dk..(ni * t + j + 1) * dk];
                    let sc = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f32>() * scale;
                    p[j] = sc;
                    top = top.max(sc);
                }
                let mut z = 0.0;
                for pj in p.iter_mut() {
                    *pj = libm::expf(*pj - top);
                    z += *pj;
                }
                let o = &mut out[(ni * s + i) * dk..(ni * s + i + 1) * dk];
                for j in 0..t {
                    p[j] /= z;
                    let vrow = &vv[(ni * t + j) * dk..(ni * t + j + 1) * dk];
                    for (oo, vvv) in o.iter_mut().zip(vrow) {
                        *oo += p[j] * vvv;
                    }
                }
            }
        }
        self.push(alloc::vec![n, s, dk], out, Op::Attention { q, k, v, probs })
    }

    /// Back-propagates `seed` (same size as `out`) through the tape.
    pub fn backward(&self, out: Var, seed: Vec<f32>) -> Gradients {
        assert_eq!(
            seed.len(),
            self.nodes[out.0].value.len(),
            "seed gradient size"
        );
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads = self.store.zero_grads();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backward_node(node, &g, &mut grads, &mut pgrads);
            grads[idx] = Some(g);
        }
        Gradients {
            params: pgrads,
            nodes: grads,
        }
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
        pgrads: &mut [Vec<f32>],
    ) {
        fn acc(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut Vec<f32> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        match &node.op {
            Op::Input => {}
            Op::Conv3d(x, layer) => {
                let xs = self.shape(*x);
                let (n, s) = (xs[0], spatial(xs));
                let dims = [xs[2], xs[3], xs[4]];
                let kk = layer.cin * layer.k * layer.k * layer.k;
                let xv = self.value(*x);
                let w = self.store.value(layer.w);
                let mut cols = vec![0.0f32; if layer.k == 1 { 0 } else { kk * s }];
                let mut dcols = vec![0.0f32; kk * s];
                let mut dw = core::mem::take(&mut pgrads[layer.w.0]);
                {
                    let db = &mut pgrads[layer.b.0];
                    for ni in 0..n {
                        let gy = &g[ni * layer.cout * s..(ni + 1) * layer.cout * s];
                        for co in 0..layer.cout {
                            db[co] += gy[co * s..(co + 1) * s].iter().sum::<f32>();
                        }
                    }
                }
                let dx = acc(grads, *x, xv.len());
                for ni in 0..n {
                    let xsmp = &xv[ni * layer.cin * s..(ni + 1) * layer.cin * s];
                    let patches: &[f32] = if layer.k == 1 {
                        xsmp
                    } else {
                        im2col(xsmp, layer.cin, dims, layer.k, &mut cols);
                        &cols
                    };
                    let gy = &g[ni * layer.cout * s..(ni + 1) * layer.cout * s];
                    // dW += dY * patches^T
                    gemm(layer.cout, s, kk, gy, s, 1, patches, 1, s, 1.0, &mut dw);
                    // dpatches = W^T * dY
                    gemm(kk, layer.cout, s, w, 1, kk, gy, s, 1, 0.0, &mut dcols);
                    let dxs = &mut dx[ni * layer.cin * s..(ni + 1) * layer.cin * s];
                    if layer.k == 1 {
                        for (a, b) in dxs.iter_mut().zip(&dcols) {
                            *a += b;
                        }
                    } else {
                        col2im(&dcols, layer.cin, dims, layer.k, dxs);
                    }
                }
                pgrads[layer.w.0] = dw;
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x).to_vec();
                let [n, c, d, h, w] = [xs[0], xs[1], xs[2], xs[3], xs[4]];
                let (d2, h2, w2) = (d / 2, h / 2, w / 2);
                let dx = acc(grads, *x, n * c * d * h * w);
                for nc in 0..n * c {
                    let gs = &g[nc * d2 * h2 * w2..];
                    let dst = &mut dx[nc * d * h * w..(nc + 1) * d * h * w];
                    for z in 0..d {
                        for y in 0..h {
                            for xx in 0..w {
                                dst[(z * h + y) * w + xx] +=
                                    0.125 * gs[((z / 2) * h2 + y / 2) * w2 + xx / 2];
                            }
                        }
                    }
                }
            }
            Op::Upsample2(x) => {
                let xs = self.shape(*x).to_vec();
                let [n, c, d, h, w] = [xs[0], xs[1], xs[2], xs[3], xs[4]];
                let (d2, h2, w2) = (d * 2, h * 2, w * 2);
                let dx = acc(grads, *x, n * c * d * h * w);
                for nc in 0..n * c {
                    let gs = &g[nc * d2 * h2 * w2..(nc + 1) * d2 * h2 * w2];
                    let dst = &mut dx[nc * d * h * w..(nc + 1) * d * h * w];
                    for z in 0..d2 {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                dst[((z / 2) * h + y / 2) * w + xx / 2] +=
                                    gs[(z * h2 + y) * w2 + xx];
                            }
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (n, s, ca, cb) = (sa[0], spatial(&sa), sa[1], sb[1]);
                {
                    let da = acc(grads, *a, n * ca * s);
                    for ni in 0..n {
                        let src = &g[ni * (ca + cb) * s..ni * (ca + cb) * s + ca * s];
                        for (d, v) in da[ni * ca * s..(ni + 1) * ca * s].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                let db = acc(grads, *b, n * cb * s);
                for ni in 0..n {
                    let src = &g[ni * (ca + cb) * s + ca * s..(ni + 1) * (ca + cb) * s];
                    for (d, v) in db[ni * cb * s..(ni + 1) * cb * s].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let d = acc(grads, v, g.len());
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::AddChannelBias(x, bias) => {
                let (n, c, s) = (node.shape[0], node.shape[1], spatial(&node.shape));
                {
                    let dx = acc(grads, *x, g.len());
                    for (a, b) in dx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                let db = acc(grads, *bias, n * c);
                for nc in 0..n * c {
                    db[nc] += g[nc * s..(nc + 1) * s].iter().sum::<f32>();
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let dx = acc(grads, *x, xv.len());
                for i in 0..xv.len() {
                    let sg = sigmoid(xv[i]);
                    dx[i] += g[i] * sg * (1.0 + xv[i] * (1.0 - sg));
                }
            }
            Op::GroupNorm {
                x,
                layer,
                mean,
                rstd,
            } => {
                let xs = self.shape(*x);
                let (n, c, s) = (xs[0], xs[1], spatial(xs));
                let cg = c / layer.groups;
                let xv = self.value(*x);
                let gamma = self.store.value(layer.gamma);
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let dx = acc(grads, *x, xv.len());
                let m = (cg * s) as f32;
                for ni in 0..n {
                    for gi in 0..layer.groups {
                        let (mu, rs) = (mean[ni * layer.groups + gi], rstd[ni * layer.groups + gi]);
                        let off = (ni * c + gi * cg) * s;
                        let mut sum_dxh = 0.0f32;
                        let mut sum_dxh_xh = 0.0f32;
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            for i in 0..s {
                                let idx = off + ci * s + i;
                                let xh = (xv[idx] - mu) * rs;
                                let dxh = g[idx] * gamma[ch];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                                dgamma[ch] += g[idx] * xh;
                                dbeta[ch] += g[idx];
                            }
                        }
                        let (a, b) = (sum_dxh / m, sum_dxh_xh / m);
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            for i in 0..s {
                                let idx = off + ci * s + i;
                                let xh = (xv[idx] - mu) * rs;
                                let dxh = g[idx] * gamma[ch];
                                dx[idx] += rs * (dxh - a - xh * b);
                            }
                        }
                    }
                }
                for (p, d) in pgrads[layer.gamma.0].iter_mut().zip(dgamma) {
                    *p += d;
                }
                for (p, d) in pgrads[layer.beta.0].iter_mut().zip(dbeta) {
                    *p += d;
                }
            }
            Op::Linear(x, layer) => {
                let xv = self.value(*x);
                let rows = xv.len() / layer.inp;
                let w = self.store.value(layer.w);
                {
                    let db = &mut pgrads[layer.b.0];
                    for r in 0..rows {
                        for (d, v) in db.iter_mut().zip(&g[r * layer.out..(r + 1) * layer.out]) {
                            *d += v;
                        }
                    }
                }
                // dW += dY^T X
                gemm(
                    layer.out,
                    rows,
                    layer.inp,
                    g,
                    1,
                    layer.out,
                    xv,
                    layer.inp,
                    1,
                    1.0,
                    &mut pgrads[layer.w.0],
                );
                // dX += dY W
                let dx = acc(grads, *x, xv.len());
                gemm(
                    rows, layer.out, layer.inp, g, layer.out, 1, w, layer.inp, 1, 1.0, dx,
                );
            }
            Op::ToRows(x) => {
                let xs = self.shape(*x);
                let (n, c, s) = (xs[0], xs[1], spatial(xs));
                let dx = acc(grads, *x, n * c * s);
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..s {
                            dx[(ni * c + ci) * s + i] += g[(ni * s + i) * c + ci];
                        }
                    }
                }
            }
            Op::FromRows(x) => {
                let xs = self.shape(*x);
                let (n, s, c) = (xs[0], xs[1], xs[2]);
                let dx = acc(grads, *x, n * c * s);
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..s {
                            dx[(ni * s + i) * c + ci] += g[(ni * c + ci) * s + i];
                        }
                    }
                }
            }
            Op::Attention { q, k, v, probs } => {
                let qs = self.shape(*q);
                let ks = self.shape(*k);
                let (n, s, dk, t) = (qs[0], qs[1], qs[2], ks[1]);
                let scale = 1.0 / libm::sqrtf(dk as f32);
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![0.0f32; qv.len()];
                let mut dkk = vec![0.0f32; kv.len()];
                let mut dv = vec![0.0f32; vv.len()];
                let mut dp = vec![0.0f32; t];
                for ni in 0..n {
                    for i in 0..s {
                        let row = ni * s + i;
                        let go = &g[row * dk..(row + 1) * dk];
                        let p = &probs[row * t..(row + 1) * t];
                        let mut dot_pd = 0.0f32;
                        for j in 0..t {
                            let kvr = (ni * t + j) * dk;
                            let vrow = &vv[kvr..kvr + dk];
                            dp[j] = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                            dot_pd += dp[j] * p[j];
                            for (d, o) in dv[kvr..kvr + dk].iter_mut().zip(go) {
                                *d += p[j] * o;
                            }
                        }
                        let qrow = &qv[row * dk..(row + 1) * dk];
                        for j in 0..t {
                            let ds = p[j] * (dp[j] - dot_pd) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kvr = (ni * t + j) * dk;
                            for e in 0..dk {
                                dq[row * dk + e] += ds * kv[kvr + e];
                                dkk[kvr + e] += ds * qrow[e];
                            }
                        }
                    }
                }
                for (var, d) in [(*q, dq), (*k, dkk), (*v, dv)] {
                    let slot = acc(grads, var, d.len());
                    for (a, b) in slot.iter_mut().zip(d) {
                        *a += b;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use crate::rng::{normal, seeded};
    use alloc::string::ToString;

    /// Checks input and parameter gradients of `sum(r * f(x))` by central differences.
    fn check<F>(store: &mut ParamStore, shape: Vec<usize>, f: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut rng = seeded(3);
        let n: usize = shape.iter().product();
        let x0: Vec<f32> = (0..n).map(|_| normal(&mut rng)).collect();
        let (r, analytic) = {
            let mut tape = Tape::new(store);
            let x = tape.input(shape.clone(), x0.clone());
            let y = f(&mut tape, x);
            let r: Vec<f32> = (0..tape.value(y).len()).map(|_| normal(&mut rng)).collect();
            let g = tape.backward(y, r.clone());
            (r, (g.wrt(x).to_vec(), g.params))
        };
        let eval = |store: &ParamStore, xv: &[f32]| -> f64 {
            let mut tape = Tape::new(store);
            let x = tape.input(shape.clone(), xv.to_vec());
            let y = f(&mut tape, x);
            tape.value(y)
                .iter()
                .zip(&r)
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let h = 1e-2f32;
        let close = |num: f64, ana: f32| {
            let tol = 2e-2 * (1.0 + num.abs());
            assert!(
                (num - ana as f64).abs() < tol,
                "numeric {num} vs analytic {ana}"
            );
        };
        for i in (0..n).step_by((n / 17).max(1)) {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            let num = (eval(store, &xp) - eval(store, &xm)) / (2.0 * h as f64);
            close(num, analytic.0[i]);
        }
        for p in 0..store.len() {
            let len = store.values()[p].len();
            for i in (0..len).step_by((len / 5).max(1)) {
                let orig = store.values()[p][i];
                store.values_mut()[p][i] = orig + h;
                let up = eval(store, &x0);
                store.values_mut()[p][i] = orig - h;
                let down = eval(store, &x0);
                store.values_mut()[p][i] = orig;
                close((up - down) / (2.0 * h as f64), analytic.1[p][i]);
            }
        }
    }

    fn conv(store: &mut ParamStore, cin: usize, cout: usize, k: usize) -> Conv3dLayer {
        let mut rng = seeded(1);
        let w = store.add(
            "w".to_string(),
            vec![cout, cin, k, k, k],
            Init::Uniform(0.5),
            &mut rng,
        );
        let b = store.add("b".to_string(), vec![cout], Init::Uniform(0.5), &mut rng);
        Conv3dLayer { w, b, cin, cout, k }
    }

    fn linear(store: &mut ParamStore, inp: usize, out: usize) -> LinearLayer {
        let mut rng = seeded(2);
        let w = store.add(
            "w".to_string(),
            vec![out, inp],
            Init::Uniform(0.5),
            &mut rng,
        );
        let b = store.add("b".to_string(), vec![out], Init::Uniform(0.5), &mut rng);
        LinearLayer { w, b, inp, out }
    }

    #[test]
    fn conv3x3_matches_direct_sum() {
        let mut store = ParamStore::new();
        let layer = conv(&mut store, 2, 3, 3);
        let (d, h, w) = (3, 4, 5);
        let mut rng = seeded(9);
        let x: Vec<f32> = (0..2 * d * h * w).map(|_| normal(&mut rng)).collect();
        let mut tape = Tape::new(&store);
        let xi = tape.input(vec![1, 2, d, h, w], x.clone());
        let y = tape.conv3d(xi, layer);
        let wv = store.value(layer.w);
        let bv = store.value(layer.b);
        for co in 0..3 {
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = bv[co];
                        for ci in 0..2 {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (sz, sy, sx) = (
                                            z as isize + kz as isize - 1,
                                            yy as isize + ky as isize - 1,
                                            xx as isize + kx as isize - 1,
                                        );
                                        if sz < 0 || sy < 0 || sx < 0 {
                                            continue;
                                        }
                                        let (sz, sy, sx) = (sz as usize, sy as usize, sx as usize);
                                        if sz >= d || sy >= h || sx >= w {
                                            continue;
                                        }
                                        acc += wv[(((co * 2 + ci) * 3 + kz) * 3 + ky) * 3 + kx]
                                            * x[((ci * d + sz) * h + sy) * w + sx];
                                    }
                                }
                            }
                        }
                        let got = tape.value(y)[((co * d + z) * h + yy) * w + xx];
                        assert!((got - acc).abs() < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut store = ParamStore::new();
        let layer = conv(&mut store, 2, 3, 3);
        check(&mut store, vec![2, 2, 2, 3, 4], |t, x| t.conv3d(x, layer));
        let mut store = ParamStore::new();
        let layer = conv(&mut store, 3, 2, 1);
        check(&mut store, vec![1, 3, 2, 2, 2], |t, x| t.conv3d(x, layer));
    }

    #[test]
    fn resampling_gradients() {
        let mut store = ParamStore::new();
        check(&mut store, vec![1, 2, 2, 4, 4], |t, x| t.avg_pool2(x));
        check(&mut store, vec![2, 1, 1, 2, 3], |t, x| t.upsample2(x));
    }

    #[test]
    fn elementwise_gradients() {
        let mut store = ParamStore::new();
        check(&mut store, vec![1, 2, 2, 2, 2], |t, x| t.silu(x));
        check(&mut store, vec![1, 2, 2, 2, 2], |t, x| {
            let s = t.silu(x);
            let c = t.concat(x, s);
            let d = t.concat(s, x);
            t.add(c, d)
        });
        check(&mut store, vec![2, 3, 1, 2, 2], |t, x| {
            let b = t.input(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]);
            let y = t.add_channel_bias(x, b);
            t.silu(y)
        });
    }

    #[test]
    fn group_norm_gradients() {
        let mut store = ParamStore::new();
        let mut rng = seeded(4);
        let gamma = store.add("g".to_string(), vec![4], Init::Uniform(1.0), &mut rng);
        let beta = store.add("b".to_string(), vec![4], Init::Uniform(1.0), &mut rng);
        let layer = GroupNormLayer {
            gamma,
            beta,
            channels: 4,
            groups: 2,
        };
        check(&mut store, vec![2, 4, 1, 2, 3], |t, x| {
            let y = t.group_norm(x, layer);
            t.silu(y)
        });
    }

    #[test]
    fn group_norm_normalises_groups() {
        let mut store = ParamStore::new();
        let mut rng = seeded(4);
        let gamma = store.add("g".to_string(), vec![2], Init::Ones, &mut rng);
        let beta = store.add("b".to_string(), vec![2], Init::Zeros, &mut rng);
        let layer = GroupNormLayer {
            gamma,
            beta,
            channels: 2,
            groups: 1,
        };
        let mut tape = Tape::new(&store);
        let x = tape.input(
            vec![1, 2, 1, 1, 4],
            (0..8).map(|i| i as f32 * 3.0 + 1.0).collect(),
        );
        let y = tape.group_norm(x, layer);
        let v = tape.value(y);
        let mean: f32 = v.iter().sum::<f32>() / 8.0;
        let var: f32 = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f32>() / 8.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn linear_and_rows_gradients() {
        let mut store = ParamStore::new();
        let layer = linear(&mut store, 3, 2);
        check(&mut store, vec![2, 3, 1, 2, 2], |t, x| {
            let r = t.to_rows(x);
            let y = t.linear(r, layer);
            t.from_rows(y, x)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut store = ParamStore::new();
        let lq = linear(&mut store, 3, 4);
        let lk = linear(&mut store, 3, 4);
        let lv = linear(&mut store, 3, 4);
        check(&mut store, vec![2, 3, 1, 2, 2], |t, x| {
            let rows = t.to_rows(x);
            let q = t.linear(rows, lq);
            let k = t.linear(rows, lk);
            let v = t.linear(rows, lv);
            t.attention(q, k, v)
        });
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let q = tape.input(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let kv = tape.input(vec![1, 3, 2], vec![5.0, 0.0, 0.0, 5.0, 1.0, 1.0]);
        let o = tape.attention(q, kv, kv);
        for row in tape.value(o).chunks(2) {
            assert!(row.iter().all(|&v| (0.0..=5.0).contains(&v)));
        }
        // First query aligns with the first key.
        assert!(tape.value(o)[0] > tape.value(o)[1]);
    }
}
