//! Periodic 2D filtering with square `r×r` kernels anchored at the top-left tap.
//!
//! Kernels are row-major `r*r` slices; tap `q = a*r + b` sits at offset `(a, b)`.

/// `out(p) = Σ_q k[q] · x(p + off(q))`, indices wrapped.
pub fn correlate_periodic(x: &[f64], width: usize, height: usize, kernel: &[f64], r: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), width * height);
    debug_assert_eq!(kernel.len(), r * r);
    let mut out = vec![0.0; x.len()];
    for row in 0..height {
        for col in 0..width {
            let mut acc = 0.0;
            for a in 0..r {
                let src_row = (row + a) % height;
                for b in 0..r {
                    acc += kernel[a * r + b] * x[src_row * width + (col + b) % width];
                }
            }
            out[row * width + col] = acc;
        }
    }
    out
}

/// `out(p) = Σ_q k[q] · x(p − off(q))`, indices wrapped; the adjoint of
/// [`correlate_periodic`] under the same kernel.
pub fn convolve_periodic(x: &[f64], width: usize, height: usize, kernel: &[f64], r: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), width * height);
    debug_assert_eq!(kernel.len(), r * r);
    let mut out = vec![0.0; x.len()];
    for row in 0..height {
        for col in 0..width {
            let mut acc = 0.0;
            for a in 0..r {
                let src_row = (row + height - a % height) % height;
                for b in 0..r {
                    let src_col = (col + width - b % width) % width;
                    acc += kernel[a * r + b] * x[src_row * width + src_col];
                }
            }
            out[row * width + col] = acc;
        }
    }
    out
}

/// 180° rotation of a row-major `r×r` kernel, i.e. reversal of its taps.
pub fn rotate180(kernel: &[f64]) -> Vec<f64> {
    kernel.iter().rev().copied().collect()
}
