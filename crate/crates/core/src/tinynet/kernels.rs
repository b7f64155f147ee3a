//! Dense kernels on NCHW `f64` buffers. Every batch reduction runs in a
//! fixed order so results do not depend on the thread count.

use rayon::prelude::*;

/// Samples per parallel work unit; fixed so reductions are reproducible.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_hw(&self) -> (usize, usize) {
        let p = self.pad();
        ((self.h + 2 * p - self.k) / self.stride + 1, (self.w + 2 * p - self.k) / self.stride + 1)
    }

    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn in_len(&self) -> usize {
        self.ci * self.h * self.w
    }

    fn out_len(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.co * ho * wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (ho, wo) = self.out_hw();
        let p = self.pad() as isize;
        let np = ho * wo;
        for c in 0..self.ci {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (c * self.k + ky) * self.k + kx;
                    let row = &mut cols[r * np..(r + 1) * np];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - p;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - p;
                            row[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                x[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (ho, wo) = self.out_hw();
        let p = self.pad() as isize;
        let np = ho * wo;
        for c in 0..self.ci {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (c * self.k + ky) * self.k + kx;
                    let row = &cols[r * np..(r + 1) * np];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - p;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - p;
                            if ix >= 0 && (ix as usize) < self.w {
                                dx[(c * self.h + iy as usize) * self.w + ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution without bias; `x` is `n * ci * h * w`.
pub fn conv_forward(g: &ConvGeom, weight: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    let (il, ol, rows) = (g.in_len(), g.out_len(), g.rows());
    let np = ol / g.co;
    let mut out = vec![0.0; n * ol];
    out.par_chunks_mut(ol).zip(x.par_chunks(il)).for_each_init(
        || vec![0.0; rows * np],
        |cols, (o, xi)| {
            g.im2col(xi, cols);
            for co in 0..g.co {
                let orow = &mut o[co * np..(co + 1) * np];
                for r in 0..rows {
                    let wv = weight[co * rows + r];
                    if wv == 0.0 {
                        continue;
                    }
                    for (ov, cv) in orow.iter_mut().zip(&cols[r * np..(r + 1) * np]) {
                        *ov += wv * cv;
                    }
                }
            }
        },
    );
    out
}

/// Returns `(dx, dweight)` for the convolution.
pub fn conv_backward(g: &ConvGeom, weight: &[f64], x: &[f64], dy: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let (il, ol, rows) = (g.in_len(), g.out_len(), g.rows());
    let np = ol / g.co;
    let mut dx = vec![0.0; n * il];
    let partials: Vec<Vec<f64>> = dx
        .par_chunks_mut(il * CHUNK)
        .zip(x.par_chunks(il * CHUNK))
        .zip(dy.par_chunks(ol * CHUNK))
        .map(|((dxc, xc), dyc)| {
            let mut dw = vec![0.0; weight.len()];
            let mut cols = vec![0.0; rows * np];
            let mut dcols = vec![0.0; rows * np];
            for ((dxi, xi), dyi) in dxc.chunks_mut(il).zip(xc.chunks(il)).zip(dyc.chunks(ol)) {
                g.im2col(xi, &mut cols);
                dcols.iter_mut().for_each(|v| *v = 0.0);
                for co in 0..g.co {
                    let grow = &dyi[co * np..(co + 1) * np];
                    for r in 0..rows {
                        let crow = &cols[r * np..(r + 1) * np];
                        dw[co * rows + r] += grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                        let wv = weight[co * rows + r];
                        for (d, gv) in dcols[r * np..(r + 1) * np].iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                }
                g.col2im(&dcols, dxi);
            }
            dw
        })
        .collect();
    (dx, sum_in_order(partials, weight.len()))
}

fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

/// `y = x W^T + b` with `W` stored `out x in`.
pub fn fc_forward(weight: &[f64], bias: &[f64], x: &[f64], n: usize, fin: usize, fout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * fout];
    out.par_chunks_mut(fout).zip(x.par_chunks(fin)).for_each(|(o, xi)| {
        for (j, ov) in o.iter_mut().enumerate() {
            *ov = bias[j] + weight[j * fin..(j + 1) * fin].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
        }
    });
    out
}

/// Returns `(dx, dweight, dbias)`.
pub fn fc_backward(weight: &[f64], x: &[f64], dy: &[f64], n: usize, fin: usize, fout: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * fin];
    dx.par_chunks_mut(fin).zip(dy.par_chunks(fout)).for_each(|(dxi, dyi)| {
        for (j, &g) in dyi.iter().enumerate() {
            for (d, w) in dxi.iter_mut().zip(&weight[j * fin..(j + 1) * fin]) {
                *d += g * w;
            }
        }
    });
    let mut dw = vec![0.0; fout * fin];
    let mut db = vec![0.0; fout];
    for s in 0..n {
        let (xi, dyi) = (&x[s * fin..(s + 1) * fin], &dy[s * fout..(s + 1) * fout]);
        for (j, &g) in dyi.iter().enumerate() {
            db[j] += g;
            for (d, xv) in dw[j * fin..(j + 1) * fin].iter_mut().zip(xi) {
                *d += g * xv;
            }
        }
    }
    (dx, dw, db)
}

/// Per-channel mean and biased variance over batch and space.
pub fn channel_stats(x: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let cnt = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += x[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let m = s / cnt;
        let mut v = 0.0;
        for i in 0..n {
            v += x[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().map(|t| (t - m) * (t - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / cnt;
    }
    (mean, var)
}

/// Normalises with the given statistics; returns `(y, xhat)`.
pub fn bn_forward(x: &[f64], n: usize, c: usize, hw: usize, mean: &[f64], var: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let base = (i * c + ch) * hw;
            for t in base..base + hw {
                let h = (x[t] - mean[ch]) * inv;
                xhat[t] = h;
                y[t] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Backward through batch normalisation. With `batch_stats` the statistics
/// are treated as functions of `x`; otherwise they are constants.
/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward(
    dy: &[f64],
    xhat: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    var: &[f64],
    gamma: &[f64],
    eps: f64,
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cnt = (n * hw) as f64;
    let mut dg = vec![0.0; c];
    let mut db = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for t in base..base + hw {
                dg[ch] += dy[t] * xhat[t];
                db[ch] += dy[t];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for i in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let base = (i * c + ch) * hw;
            for t in base..base + hw {
                dx[t] = if batch_stats {
                    gamma[ch] * inv * (dy[t] - db[ch] / cnt - xhat[t] * dg[ch] / cnt)
                } else {
                    gamma[ch] * inv * dy[t]
                };
            }
        }
    }
    (dx, dg, db)
}
