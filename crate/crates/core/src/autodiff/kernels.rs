//! Raw loops behind the spatial graph ops. All arrays are row-major HWC.

use crate::field::wrap_index;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Periodic source row/col for each (output index, kernel tap).
    fn taps(&self, out: usize, len: usize) -> Vec<usize> {
        let mut t = Vec::with_capacity(out * self.k);
        for o in 0..out {
            for kk in 0..self.k {
                t.push(wrap_index((o * self.stride + kk) as isize - self.pad as isize, len));
            }
        }
        t
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (cin, cout, k) = (g.cin, g.cout, g.k);
    let rows = g.taps(g.oh, g.h);
    let cols = g.taps(g.ow, g.w);
    let mut out = vec![0.0; g.oh * g.ow * cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * cout..][..cout];
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for ky in 0..k {
                let iy = rows[oy * k + ky];
                for kx in 0..k {
                    let ix = cols[ox * k + kx];
                    let inp = &input[(iy * g.w + ix) * cin..][..cin];
                    let kb = &kernel[(ky * k + kx) * cin * cout..][..cin * cout];
                    for (ci, &a) in inp.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let wrow = &kb[ci * cout..][..cout];
                        for (ov, wv) in o.iter_mut().zip(wrow) {
                            *ov += a * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input and kernel gradients (either may be skipped).
pub(crate) fn conv_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    gout: &[f64],
    mut gin: Option<&mut [f64]>,
    mut gk: Option<&mut [f64]>,
) {
    let (cin, cout, k) = (g.cin, g.cout, g.k);
    let rows = g.taps(g.oh, g.h);
    let cols = g.taps(g.ow, g.w);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let go = &gout[(oy * g.ow + ox) * cout..][..cout];
            for ky in 0..k {
                let iy = rows[oy * k + ky];
                for kx in 0..k {
                    let ix = cols[ox * k + kx];
                    let base = (iy * g.w + ix) * cin;
                    let koff = (ky * k + kx) * cin * cout;
                    if let Some(gin) = gin.as_deref_mut() {
                        let kb = &kernel[koff..][..cin * cout];
                        let gi = &mut gin[base..][..cin];
                        for (ci, giv) in gi.iter_mut().enumerate() {
                            let wrow = &kb[ci * cout..][..cout];
                            let mut acc = 0.0;
                            for (a, b) in wrow.iter().zip(go) {
                                acc += a * b;
                            }
                            *giv += acc;
                        }
                    }
                    if let Some(gk) = gk.as_deref_mut() {
                        let inp = &input[base..][..cin];
                        let gkb = &mut gk[koff..][..cin * cout];
                        for (ci, &a) in inp.iter().enumerate() {
                            if a == 0.0 {
                                continue;
                            }
                            let grow = &mut gkb[ci * cout..][..cout];
                            for (gv, b) in grow.iter_mut().zip(go) {
                                *gv += a * b;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Depth-to-space: `(H, W, C r^2) -> (rH, rW, C)`, with input channel
/// `c r^2 + dy r + dx` landing at output `(r y + dy, r x + dx, c)`.
pub(crate) fn shuffle_index(h: usize, w: usize, c_in: usize, r: usize) -> Vec<usize> {
    let c_out = c_in / (r * r);
    let ow = w * r;
    let mut map = Vec::with_capacity(h * w * c_in);
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c_in {
                let c = ci / (r * r);
                let rem = ci % (r * r);
                let (dy, dx) = (rem / r, rem % r);
                map.push(((y * r + dy) * ow + (x * r + dx)) * c_out + c);
            }
        }
    }
    map
}

/// Depthwise periodic cross-correlation with a square kernel of half width `m`.
pub(crate) fn filter_backward(gout: &[f64], n: usize, channels: usize, kernel: &[f64], m: usize, gin: &mut [f64]) {
    let side = 2 * m + 1;
    let wrap: Vec<Vec<usize>> = (0..side)
        .map(|d| (0..n).map(|i| wrap_index(i as isize + d as isize - m as isize, n)).collect())
        .collect();
    for i in 0..n {
        for r in 0..side {
            let si = wrap[r][i];
            for c in 0..side {
                let kv = kernel[r * side + c];
                if kv == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let src = (si * n + wrap[c][j]) * channels;
                    let dst = (i * n + j) * channels;
                    for ch in 0..channels {
                        gin[src + ch] += kv * gout[dst + ch];
                    }
                }
            }
        }
    }
}
