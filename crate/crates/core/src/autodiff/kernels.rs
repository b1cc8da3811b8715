//! Flat f64 kernels shared by the value, tape-backward and dual-number paths.

pub fn ew_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn ew_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn ew_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn ew_scale(a: &[f64], c: f64) -> Vec<f64> {
    a.iter().map(|x| x * c).collect()
}

pub fn ew_neg(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| -x).collect()
}

pub fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// out(m,n) = a(m,k) @ b(k,n), row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// out(m,k) = a(m,n) @ b(k,n)^T  — used for dA in the matmul backward.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + kk] = acc;
        }
    }
    out
}

/// out(k,n) = a(m,k)^T @ b(m,n)  — used for dB in the matmul backward.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&x| x * sigmoid(x)).collect()
}

/// d/dx silu(x) = s(x) * (1 + x * (1 - s(x)))
pub fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn relu(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
}

pub fn ew_sin(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| x.sin()).collect()
}

pub fn ew_cos(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| x.cos()).collect()
}

pub fn ew_square(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| x * x).collect()
}

pub fn ew_sqrt(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| x.sqrt()).collect()
}

pub fn sum(a: &[f64]) -> f64 {
    a.iter().sum()
}

/// Concatenate row-major matrices along the last axis. All parts share `rows`.
pub fn concat_cols(parts: &[(&[f64], usize)], rows: usize) -> Vec<f64> {
    let total: usize = parts.iter().map(|(_, w)| w).sum();
    let mut out = vec![0.0; rows * total];
    for i in 0..rows {
        let mut off = 0;
        for (data, w) in parts {
            out[i * total + off..i * total + off + w].copy_from_slice(&data[i * w..(i + 1) * w]);
            off += w;
        }
    }
    out
}

/// Inverse of `concat_cols` for gradients: slice columns back into parts.
pub fn split_cols(g: &[f64], rows: usize, widths: &[usize]) -> Vec<Vec<f64>> {
    let total: usize = widths.iter().sum();
    let mut parts: Vec<Vec<f64>> = widths.iter().map(|w| vec![0.0; rows * w]).collect();
    for i in 0..rows {
        let mut off = 0;
        for (p, &w) in parts.iter_mut().zip(widths) {
            p[i * w..(i + 1) * w].copy_from_slice(&g[i * total + off..i * total + off + w]);
            off += w;
        }
    }
    parts
}

/// Tile a single row (len `cols`) into `rows` copies.
pub fn broadcast_rows(x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        out[i * cols..(i + 1) * cols].copy_from_slice(x);
    }
    out
}

/// Column sums of a (rows, cols) matrix — the broadcast_rows adjoint.
pub fn sum_rows(g: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j] += g[i * cols + j];
        }
    }
    out
}

pub fn l2_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}
