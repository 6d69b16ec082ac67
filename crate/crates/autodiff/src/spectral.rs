//! Power iteration for spectral weight normalization.

/// `u^T W v` for a row-major `rows x cols` matrix.
pub fn bilinear(w: &[f64], rows: usize, cols: usize, u: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        acc += u[r] * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    x.iter_mut().for_each(|v| *v /= n);
}

/// Runs `iters` rounds of `v <- W^T u / |.|`, `u <- W v / |.|` in place and
/// returns the resulting estimate of the largest singular value.
pub fn power_iterate(w: &[f64], rows: usize, cols: usize, u: &mut [f64], v: &mut [f64], iters: usize) -> f64 {
    for _ in 0..iters {
        v.iter_mut().for_each(|x| *x = 0.0);
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            for (vi, &a) in v.iter_mut().zip(row) {
                *vi += a * u[r];
            }
        }
        normalize(v);
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            u[r] = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        }
        normalize(u);
    }
    bilinear(w, rows, cols, u, v)
}
