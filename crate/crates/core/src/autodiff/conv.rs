//! Slice-level kernels for stride-1, zero-padded ("same") cross-correlation.
//!
//! Layouts are row-major: input `[cin, h, w]`, weight `[cout, cin, kh, kw]`,
//! output `[cout, h, w]`. Every tap is applied as a shifted row-wise
//! multiply-add so the inner loops run over contiguous memory.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub dilation: usize,
}

impl ConvGeom {
    fn offset(&self, k: usize, size: usize) -> isize {
        (k as isize - (size / 2) as isize) * self.dilation as isize
    }

    /// Output coordinates whose shifted input coordinate stays inside `0..n`.
    fn span(n: usize, d: isize) -> (usize, usize) {
        let start = (-d).max(0) as usize;
        let end = (n as isize - d).clamp(0, n as isize) as usize;
        (start.min(end), end)
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize, isize, isize)> + '_ {
        (0..self.kh).flat_map(move |ky| {
            (0..self.kw).map(move |kx| (ky, kx, self.offset(ky, self.kh), self.offset(kx, self.kw)))
        })
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `out[co] = bias[co] + sum_ci sum_tap w * shift(input[ci])`.
pub(crate) fn forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let plane = g.h * g.w;
    let ksz = g.kh * g.kw;
    for co in 0..g.cout {
        let out_c = &mut out[co * plane..(co + 1) * plane];
        out_c.fill(bias.map_or(0.0, |b| b[co]));
        for ci in 0..g.cin {
            let in_c = &input[ci * plane..(ci + 1) * plane];
            let w_base = (co * g.cin + ci) * ksz;
            for (ky, kx, dy, dx) in g.taps() {
                let wv = weight[w_base + ky * g.kw + kx];
                if wv == 0.0 {
                    continue;
                }
                let (y0, y1) = ConvGeom::span(g.h, dy);
                let (x0, x1) = ConvGeom::span(g.w, dx);
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let src = ((y as isize + dy) as usize) * g.w;
                    let src = &in_c[(src as isize + x0 as isize + dx) as usize..][..x1 - x0];
                    axpy(wv, src, &mut out_c[y * g.w + x0..y * g.w + x1]);
                }
            }
        }
    }
}

/// Accumulates `d loss / d input` into `grad_in`.
pub(crate) fn backward_input(g: &ConvGeom, weight: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    let plane = g.h * g.w;
    let ksz = g.kh * g.kw;
    for co in 0..g.cout {
        let go = &grad_out[co * plane..(co + 1) * plane];
        for ci in 0..g.cin {
            let gi = &mut grad_in[ci * plane..(ci + 1) * plane];
            let w_base = (co * g.cin + ci) * ksz;
            for (ky, kx, dy, dx) in g.taps() {
                let wv = weight[w_base + ky * g.kw + kx];
                if wv == 0.0 {
                    continue;
                }
                let (y0, y1) = ConvGeom::span(g.h, dy);
                let (x0, x1) = ConvGeom::span(g.w, dx);
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let dst = ((y as isize + dy) as usize * g.w) as isize + x0 as isize + dx;
                    let dst = &mut gi[dst as usize..][..x1 - x0];
                    axpy(wv, &go[y * g.w + x0..y * g.w + x1], dst);
                }
            }
        }
    }
}

/// Accumulates `d loss / d weight` into `grad_w`.
pub(crate) fn backward_weight(g: &ConvGeom, input: &[f64], grad_out: &[f64], grad_w: &mut [f64]) {
    let plane = g.h * g.w;
    let ksz = g.kh * g.kw;
    for co in 0..g.cout {
        let go = &grad_out[co * plane..(co + 1) * plane];
        for ci in 0..g.cin {
            let in_c = &input[ci * plane..(ci + 1) * plane];
            let w_base = (co * g.cin + ci) * ksz;
            for (ky, kx, dy, dx) in g.taps() {
                let (y0, y1) = ConvGeom::span(g.h, dy);
                let (x0, x1) = ConvGeom::span(g.w, dx);
                if x0 >= x1 || y0 >= y1 {
                    continue;
                }
                let acc = if dx == 0 {
                    // Whole rows are contiguous in both planes.
                    let src = ((y0 as isize + dy) as usize) * g.w;
                    let n = (y1 - y0) * g.w;
                    dot(&go[y0 * g.w..y0 * g.w + n], &in_c[src..src + n])
                } else {
                    (y0..y1)
                        .map(|y| {
                            let src = ((y as isize + dy) as usize * g.w) as isize + x0 as isize + dx;
                            dot(&go[y * g.w + x0..y * g.w + x1], &in_c[src as usize..][..x1 - x0])
                        })
                        .sum()
                };
                grad_w[w_base + ky * g.kw + kx] += acc;
            }
        }
    }
}

pub(crate) fn backward_bias(g: &ConvGeom, grad_out: &[f64], grad_b: &mut [f64]) {
    let plane = g.h * g.w;
    for (co, gb) in grad_b.iter_mut().enumerate().take(g.cout) {
        *gb += grad_out[co * plane..(co + 1) * plane].iter().sum::<f64>();
    }
}
