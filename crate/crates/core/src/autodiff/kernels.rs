//! Plain-loop numeric kernels shared by the forward and backward rules.

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×n] · bᵀ` where `b` is `k×n`; result is `m×k`.
pub(crate) fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`; result is `k×n`.
pub(crate) fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    /// Input coordinate for output position `o` and kernel tap `k`, or `None` in the padding.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Direct zero-padded cross-correlation.
pub(crate) fn conv2d(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.n * g.f * oh * ow];
    for n in 0..g.n {
        for f in 0..g.f {
            let obase = (n * g.f + f) * oh * ow;
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                let wbase = (f * g.c + c) * g.kh * g.kw;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..g.kh {
                            let Some(iy) = g.source(oy, ky, g.h) else {
                                continue;
                            };
                            for kx in 0..g.kw {
                                let Some(ix) = g.source(ox, kx, g.w) else {
                                    continue;
                                };
                                acc += x[xbase + iy * g.w + ix] * w[wbase + ky * g.kw + kx];
                            }
                        }
                        out[obase + oy * ow + ox] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d` with respect to its input and its kernel.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    upstream: &[f64],
    g: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for n in 0..g.n {
        for f in 0..g.f {
            let obase = (n * g.f + f) * oh * ow;
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                let wbase = (f * g.c + c) * g.kh * g.kw;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let up = upstream[obase + oy * ow + ox];
                        if up == 0.0 {
                            continue;
                        }
                        for ky in 0..g.kh {
                            let Some(iy) = g.source(oy, ky, g.h) else {
                                continue;
                            };
                            for kx in 0..g.kw {
                                let Some(ix) = g.source(ox, kx, g.w) else {
                                    continue;
                                };
                                let xi = xbase + iy * g.w + ix;
                                let wi = wbase + ky * g.kw + kx;
                                gx[xi] += up * w[wi];
                                gw[wi] += up * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}
