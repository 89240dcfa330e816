//! Dense kernels shared by the tape ops.

use crate::exec::{self, Execution};

/// Strided read-only view of an `rows × cols` matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// The same storage read as its transpose.
    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_offset(&self) -> usize {
        (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// Work (in multiply-accumulates) below which a product is never split.
const PAR_MIN_MACS: usize = 1 << 18;

/// `c = a·b + beta·c`, with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());

    let exec = exec::kernel_execution();
    let threads = exec::threads();
    if exec.is_parallel() && threads > 1 && m >= 2 * threads && m * k * n >= PAR_MIN_MACS {
        let chunk_rows = m.div_ceil(threads);
        exec::for_each_chunk_mut(Execution::Parallel, c, chunk_rows * n, |i, c_chunk| {
            let r0 = i * chunk_rows;
            let rows = c_chunk.len() / n;
            let sub = MatRef {
                data: &a.data[r0 * a.rs..],
                rows,
                ..a
            };
            gemm_serial(sub, b, beta, c_chunk);
        });
    } else {
        gemm_serial(a, b, beta, c);
    }
}

fn gemm_serial(a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    // SAFETY: offsets of every element addressed through (rows, cols, strides)
    // were bounds-checked against the backing slices above, and `c` holds
    // exactly m·n row-major elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    // Branch-free so mixed-sign inputs do not mispredict.
    let e = (-x.abs()).exp();
    let r = 1.0 / (1.0 + e);
    if x >= 0.0 {
        r
    } else {
        e * r
    }
}

/// In-place numerically stable softmax over `row`.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Indices of the `k` largest entries, ties broken by lowest index.
pub(crate) fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}
