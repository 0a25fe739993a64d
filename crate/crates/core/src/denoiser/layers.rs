//! Forward and backward kernels on `(N, h, w, ch)` activations stored flat
//! in row-major order.

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

/// `y[r, :] = x[r, :] W + b` with `W` stored `[cin, cout]`.
pub fn linear(x: &[f64], rows: usize, cin: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * cin);
    debug_assert_eq!(w.len(), cin * cout);
    let mut y = Vec::with_capacity(rows * cout);
    for r in 0..rows {
        let start = y.len();
        y.extend_from_slice(b);
        let yr = &mut y[start..start + cout];
        for (i, &xi) in x[r * cin..(r + 1) * cin].iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, wv) in yr.iter_mut().zip(&w[i * cout..(i + 1) * cout]) {
                *o += xi * wv;
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub fn linear_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    cin: usize,
    w: &[f64],
    cout: usize,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dw = vec![0.0; cin * cout];
    let mut db = vec![0.0; cout];
    let mut dx = if need_dx { vec![0.0; rows * cin] } else { Vec::new() };
    for r in 0..rows {
        let g = &dy[r * cout..(r + 1) * cout];
        for (d, gv) in db.iter_mut().zip(g) {
            *d += gv;
        }
        let xr = &x[r * cin..(r + 1) * cin];
        for i in 0..cin {
            let wi = &w[i * cout..(i + 1) * cout];
            let dwi = &mut dw[i * cout..(i + 1) * cout];
            let xi = xr[i];
            let mut acc = 0.0;
            for o in 0..cout {
                dwi[o] += xi * g[o];
                acc += wi[o] * g[o];
            }
            if need_dx {
                dx[r * cin + i] = acc;
            }
        }
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug)]
pub struct Grid {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// Zero-padded "same" convolution with an odd `k x k` kernel stored
/// `[k, k, cin, cout]`.
pub fn conv2d(x: &[f64], g: Grid, cin: usize, k: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    if k == 1 {
        return linear(x, g.rows(), cin, w, b, cout);
    }
    let pad = (k / 2) as isize;
    let mut y = vec![0.0; g.rows() * cout];
    for n in 0..g.n {
        for oy in 0..g.h {
            for ox in 0..g.w {
                let yo = ((n * g.h + oy) * g.w + ox) * cout;
                let yr = &mut y[yo..yo + cout];
                yr.copy_from_slice(b);
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let xo = ((n * g.h + iy as usize) * g.w + ix as usize) * cin;
                        let wo = (ky * k + kx) * cin * cout;
                        for i in 0..cin {
                            let xi = x[xo + i];
                            let wrow = &w[wo + i * cout..wo + (i + 1) * cout];
                            for (o, wv) in yr.iter_mut().zip(wrow) {
                                *o += xi * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward(
    x: &[f64],
    dy: &[f64],
    g: Grid,
    cin: usize,
    k: usize,
    w: &[f64],
    cout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    if k == 1 {
        return linear_backward(x, dy, g.rows(), cin, w, cout, true);
    }
    let pad = (k / 2) as isize;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for n in 0..g.n {
        for oy in 0..g.h {
            for ox in 0..g.w {
                let yo = ((n * g.h + oy) * g.w + ox) * cout;
                let gr = &dy[yo..yo + cout];
                for (d, gv) in db.iter_mut().zip(gr) {
                    *d += gv;
                }
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let xo = ((n * g.h + iy as usize) * g.w + ix as usize) * cin;
                        let wo = (ky * k + kx) * cin * cout;
                        for i in 0..cin {
                            let xi = x[xo + i];
                            let wrow = &w[wo + i * cout..wo + (i + 1) * cout];
                            let dwrow = &mut dw[wo + i * cout..wo + (i + 1) * cout];
                            let mut acc = 0.0;
                            for o in 0..cout {
                                dwrow[o] += xi * gr[o];
                                acc += wrow[o] * gr[o];
                            }
                            dx[xo + i] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub const NORM_EPS: f64 = 1e-5;

/// Largest group count `<= min(8, ch)` that divides `ch`.
pub fn group_count(ch: usize) -> usize {
    (1..=ch.min(8)).rev().find(|g| ch % g == 0).unwrap_or(1)
}

pub struct NormCache {
    pub xhat: Vec<f64>,
    /// One entry per (sample, group).
    pub inv_std: Vec<f64>,
}

pub fn group_norm(x: &[f64], n: usize, cells: usize, ch: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, NormCache) {
    let groups = group_count(ch);
    let gs = ch / groups;
    let m = (cells * gs) as f64;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; n * groups];
    for s in 0..n {
        for gi in 0..groups {
            let mut mean = 0.0;
            for c in 0..cells {
                let o = (s * cells + c) * ch + gi * gs;
                mean += x[o..o + gs].iter().sum::<f64>();
            }
            mean /= m;
            let mut var = 0.0;
            for c in 0..cells {
                let o = (s * cells + c) * ch + gi * gs;
                var += x[o..o + gs].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            }
            var /= m;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[s * groups + gi] = inv;
            for c in 0..cells {
                let o = (s * cells + c) * ch + gi * gs;
                for j in 0..gs {
                    xhat[o + j] = (x[o + j] - mean) * inv;
                }
            }
        }
    }
    let mut y = xhat.clone();
    for row in y.chunks_exact_mut(ch) {
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = *v * g + b;
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    n: usize,
    cells: usize,
    ch: usize,
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let groups = group_count(ch);
    let gs = ch / groups;
    let m = (cells * gs) as f64;
    let mut dgamma = vec![0.0; ch];
    let mut dbeta = vec![0.0; ch];
    let mut dxhat = vec![0.0; dy.len()];
    for (r, (gr, xr)) in dy.chunks_exact(ch).zip(cache.xhat.chunks_exact(ch)).enumerate() {
        for c in 0..ch {
            dgamma[c] += gr[c] * xr[c];
            dbeta[c] += gr[c];
            dxhat[r * ch + c] = gr[c] * gamma[c];
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for s in 0..n {
        for gi in 0..groups {
            let (mut sum, mut dot) = (0.0, 0.0);
            for c in 0..cells {
                let o = (s * cells + c) * ch + gi * gs;
                for j in 0..gs {
                    sum += dxhat[o + j];
                    dot += dxhat[o + j] * cache.xhat[o + j];
                }
            }
            let inv = cache.inv_std[s * groups + gi];
            for c in 0..cells {
                let o = (s * cells + c) * ch + gi * gs;
                for j in 0..gs {
                    dx[o + j] = inv / m * (m * dxhat[o + j] - sum - cache.xhat[o + j] * dot);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Sinusoidal features of `s` (already scaled), `[sin(s f_0), .., cos(s f_0), ..]`.
pub fn sinusoid(s: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for k in 0..half {
        let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
        out[k] = (s * freq).sin();
        out[half + k] = (s * freq).cos();
    }
    for v in out.iter_mut().skip(2 * half) {
        *v = 0.0;
    }
}

/// Fixed 2D sinusoidal encodings `[gh, gw, dim]`: the first half of the
/// channels encode the row, the second half the column.
pub fn positional_encoding(gh: usize, gw: usize, dim: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let mut pe = vec![0.0; gh * gw * dim];
    for y in 0..gh {
        for x in 0..gw {
            let o = (y * gw + x) * dim;
            for k in 0..quarter {
                let freq = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                pe[o + k] = (y as f64 * freq).sin();
                pe[o + quarter + k] = (y as f64 * freq).cos();
                pe[o + 2 * quarter + k] = (x as f64 * freq).sin();
                pe[o + 3 * quarter + k] = (x as f64 * freq).cos();
            }
        }
    }
    pe
}
