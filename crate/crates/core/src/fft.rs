//! Row-major 2D FFT on top of `rustfft`, with per-thread plan caching.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    // src is rows x cols, dst becomes cols x rows
    const BLOCK: usize = 16;
    for rb in (0..rows).step_by(BLOCK) {
        for cb in (0..cols).step_by(BLOCK) {
            for r in rb..(rb + BLOCK).min(rows) {
                for c in cb..(cb + BLOCK).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

fn transform(data: &mut [Complex64], nx: usize, ny: usize, inverse: bool) {
    debug_assert_eq!(data.len(), nx * ny);
    let (row_fft, col_fft) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            (p.plan_fft_inverse(nx), p.plan_fft_inverse(ny))
        } else {
            (p.plan_fft_forward(nx), p.plan_fft_forward(ny))
        }
    });
    let scratch_len = row_fft
        .get_inplace_scratch_len()
        .max(col_fft.get_inplace_scratch_len());
    let mut scratch = vec![Complex64::default(); scratch_len];
    row_fft.process_with_scratch(data, &mut scratch);

    let mut t = vec![Complex64::default(); nx * ny];
    transpose(data, &mut t, ny, nx);
    col_fft.process_with_scratch(&mut t, &mut scratch);
    transpose(&t, data, nx, ny);
}

/// Unnormalized forward transform, in place.
pub(crate) fn forward_in_place(data: &mut [Complex64], nx: usize, ny: usize) {
    transform(data, nx, ny, false);
}

/// Inverse transform scaled by `1/(nx*ny)`, in place.
pub(crate) fn inverse_in_place(data: &mut [Complex64], nx: usize, ny: usize) {
    transform(data, nx, ny, true);
    let scale = 1.0 / (nx * ny) as f64;
    for v in data.iter_mut() {
        *v *= scale;
    }
}
