//! Direct loops for grouped affine maps where one side is very narrow (the
//! time input and the state output of the main network). General GEMM
//! packing costs more than the arithmetic at these shapes.

/// Widths at or below this use the direct loops.
pub(crate) const NARROW: usize = 4;

/// `out[m × n] = x[m × k] · w[k × n]` (row-major), with `k` or `n` narrow.
pub(crate) fn forward(x: &[f64], m: usize, k: usize, w: &[f64], n: usize, out: &mut [f64]) {
    if k <= NARROW {
        for r in 0..m {
            let xr = &x[r * k..(r + 1) * k];
            let o = &mut out[r * n..(r + 1) * n];
            o.iter_mut().for_each(|v| *v = 0.0);
            for (kk, &a) in xr.iter().enumerate() {
                for (ov, &wv) in o.iter_mut().zip(&w[kk * n..(kk + 1) * n]) {
                    *ov = a.mul_add(wv, *ov);
                }
            }
        }
    } else {
        let wt = transpose(w, k, n);
        for r in 0..m {
            let xr = &x[r * k..(r + 1) * k];
            for c in 0..n {
                out[r * n + c] = dot(xr, &wt[c * k..(c + 1) * k]);
            }
        }
    }
}

/// `dx[m × k] = g[m × n] · w[k × n]ᵀ`, with `k` or `n` narrow.
pub(crate) fn input_grad(g: &[f64], m: usize, n: usize, w: &[f64], k: usize, dx: &mut [f64]) {
    if k <= NARROW {
        for r in 0..m {
            let gr = &g[r * n..(r + 1) * n];
            for kk in 0..k {
                dx[r * k + kk] = dot(gr, &w[kk * n..(kk + 1) * n]);
            }
        }
    } else {
        let wt = transpose(w, k, n);
        for r in 0..m {
            let o = &mut dx[r * k..(r + 1) * k];
            o.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..n {
                let a = g[r * n + c];
                for (ov, &wv) in o.iter_mut().zip(&wt[c * k..(c + 1) * k]) {
                    *ov = a.mul_add(wv, *ov);
                }
            }
        }
    }
}

/// `dw[k × n] += x[m × k]ᵀ · g[m × n]`, with `k` or `n` narrow.
pub(crate) fn weight_grad(x: &[f64], m: usize, k: usize, g: &[f64], n: usize, dw: &mut [f64]) {
    if k <= NARROW {
        for r in 0..m {
            let gr = &g[r * n..(r + 1) * n];
            for kk in 0..k {
                let a = x[r * k + kk];
                for (d, &gv) in dw[kk * n..(kk + 1) * n].iter_mut().zip(gr) {
                    *d = a.mul_add(gv, *d);
                }
            }
        }
    } else {
        let mut dwt = transpose(dw, k, n);
        for r in 0..m {
            let xr = &x[r * k..(r + 1) * k];
            for c in 0..n {
                let a = g[r * n + c];
                for (d, &xv) in dwt[c * k..(c + 1) * k].iter_mut().zip(xr) {
                    *d = a.mul_add(xv, *d);
                }
            }
        }
        for kk in 0..k {
            for c in 0..n {
                dw[kk * n + c] = dwt[c * k + kk];
            }
        }
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = x[l].mul_add(y[l], lanes[l]);
        }
    }
    let mut s = lanes.iter().sum::<f64>();
    for (x, y) in ra.iter().zip(rb) {
        s = x.mul_add(*y, s);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|kk| a[i * k + kk] * b[kk * n + j]).sum();
            }
        }
        out
    }

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn narrow_kernels_match_naive_products() {
        for &(m, k, n) in &[(7, 1, 32), (5, 32, 2), (3, 2, 19), (4, 13, 3), (2, 4, 4)] {
            let x: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let w: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            let g: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.23).sin()).collect();

            let mut out = vec![0.0; m * n];
            forward(&x, m, k, &w, n, &mut out);
            close(&out, &naive(&x, m, k, &w, n));

            let mut wt = vec![0.0; n * k];
            for kk in 0..k {
                for c in 0..n {
                    wt[c * k + kk] = w[kk * n + c];
                }
            }
            let mut dx = vec![0.0; m * k];
            input_grad(&g, m, n, &w, k, &mut dx);
            close(&dx, &naive(&g, m, n, &wt, k));

            let mut xt = vec![0.0; k * m];
            for r in 0..m {
                for kk in 0..k {
                    xt[kk * m + r] = x[r * k + kk];
                }
            }
            let mut dw = vec![1.0; k * n];
            weight_grad(&x, m, k, &g, n, &mut dw);
            let expect: Vec<f64> = naive(&xt, k, m, &g, n).iter().map(|v| v + 1.0).collect();
            close(&dw, &expect);
        }
    }
}

