//! Dense row-major kernels. All reductions run in a fixed sequential order so
//! results are bitwise reproducible, and every output row depends only on
//! the matching input row.

/// `c[n×m] = a[n×k] · b[k×m]`
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `c[n×m] = a[n×k] · b[m×k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * m + j] = acc;
        }
    }
    c
}

/// `c[n×m] = a[k×n]ᵀ · b[k×m]`
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let api = a[p * n + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut c[i * m..(i + 1) * m];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
    c
}

/// Copies columns `[start, start + width)` of a row-major `rows×cols` matrix.
pub fn take_cols(x: &[f64], rows: usize, cols: usize, start: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&x[r * cols + start..r * cols + start + width]);
    }
    out
}

/// Adds a `rows×width` block into columns `[start, start + width)` of `dst`.
pub fn add_cols(dst: &mut [f64], src: &[f64], rows: usize, cols: usize, start: usize, width: usize) {
    for r in 0..rows {
        let d = &mut dst[r * cols + start..r * cols + start + width];
        for (a, b) in d.iter_mut().zip(&src[r * width..(r + 1) * width]) {
            *a += b;
        }
    }
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// `dx = y ⊙ (dy − Σ_j dy_j y_j)` per row.
pub fn softmax_backward(y: &[f64], dy: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for j in 0..cols {
            dxr[j] = yr[j] * (dyr[j] - dot);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
