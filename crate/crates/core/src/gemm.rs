//! Cache-blocked SGEMM, `C := alpha·A·B + beta·C`.
//!
//! GotoBLAS-style schedule: B is packed once per call into `KC × NR` column
//! panels, A is packed per `MC × KC` block into `MR`-row panels, and an
//! `MR × NR` register tile accumulates each `KC` slice. The accumulation order
//! for every `C[i][j]` is `k = 0..K` in `KC` chunks regardless of how rows
//! are distributed over threads, so results are bitwise thread-invariant.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const MR: usize = 4;
pub const NR: usize = 16;
pub const MC: usize = 64;
pub const KC: usize = 256;

#[derive(Debug, Clone, Copy)]
pub struct MatrixView<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    row_stride: usize,
}

#[derive(Debug)]
pub struct MatrixViewMut<'a> {
    data: &'a mut [f32],
    rows: usize,
    cols: usize,
    row_stride: usize,
}

fn check_view(len: usize, rows: usize, cols: usize, row_stride: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("empty matrix view {rows}x{cols}")));
    }
    if row_stride < cols {
        return Err(Error::Shape(format!("row stride {row_stride} is smaller than {cols} columns")));
    }
    let needed = (rows - 1) * row_stride + cols;
    if needed > len {
        return Err(Error::Shape(format!(
            "{rows}x{cols} view with stride {row_stride} needs {needed} elements, buffer has {len}"
        )));
    }
    Ok(())
}

impl<'a> MatrixView<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize, row_stride: usize) -> Result<Self> {
        check_view(data.len(), rows, cols, row_stride)?;
        Ok(MatrixView {
            data,
            rows,
            cols,
            row_stride,
        })
    }

    pub fn dense(data: &'a [f32], rows: usize, cols: usize) -> Result<Self> {
        Self::new(data, rows, cols, cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.row_stride + c]
    }
}

impl<'a> MatrixViewMut<'a> {
    pub fn new(data: &'a mut [f32], rows: usize, cols: usize, row_stride: usize) -> Result<Self> {
        check_view(data.len(), rows, cols, row_stride)?;
        Ok(MatrixViewMut {
            data,
            rows,
            cols,
            row_stride,
        })
    }

    pub fn dense(data: &'a mut [f32], rows: usize, cols: usize) -> Result<Self> {
        Self::new(data, rows, cols, cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// B packed into `KC`-deep slices of `NR`-wide column panels, zero-padded on
/// the right edge. Reusable across calls with the same B.
#[derive(Debug, Clone)]
pub struct PackedB {
    k: usize,
    n: usize,
    panels: usize,
    data: Vec<f32>,
}

impl PackedB {
    pub fn pack(b: &MatrixView<'_>) -> Self {
        let (k, n) = (b.rows, b.cols);
        let panels = n.div_ceil(NR);
        let mut data = vec![0.0f32; k * panels * NR];
        // Layout: for each KC slice starting at k0 (depth kc), panels are
        // contiguous [panel][kc][NR] at offset k0 * panels * NR.
        for k0 in (0..k).step_by(KC) {
            let kc = KC.min(k - k0);
            let slice = &mut data[k0 * panels * NR..][..kc * panels * NR];
            for (jp, panel) in slice.chunks_exact_mut(kc * NR).enumerate() {
                let j0 = jp * NR;
                let nr = NR.min(n - j0);
                for kk in 0..kc {
                    let row = &b.data[(k0 + kk) * b.row_stride + j0..][..nr];
                    panel[kk * NR..][..nr].copy_from_slice(row);
                }
            }
        }
        PackedB { k, n, panels, data }
    }

    pub fn rows(&self) -> usize {
        self.k
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    #[inline]
    fn panel(&self, k0: usize, kc: usize, jp: usize) -> &[f32] {
        &self.data[k0 * self.panels * NR + jp * kc * NR..][..kc * NR]
    }
}

/// Parallel over `MC`-row panels of C in the current rayon pool.
/// Returns the flop count `2·M·N·K`.
pub fn gemm(alpha: f32, a: &MatrixView<'_>, b: &MatrixView<'_>, beta: f32, c: &mut MatrixViewMut<'_>) -> Result<u64> {
    check_shapes(a, b.rows, b.cols, c)?;
    let packed = PackedB::pack(b);
    gemm_packed_impl(alpha, a, &packed, beta, c, true);
    Ok(flop_count(a.rows, b.cols, a.cols))
}

/// Same arithmetic as [`gemm`] without spawning tasks.
pub fn gemm_serial(
    alpha: f32,
    a: &MatrixView<'_>,
    b: &MatrixView<'_>,
    beta: f32,
    c: &mut MatrixViewMut<'_>,
) -> Result<u64> {
    check_shapes(a, b.rows, b.cols, c)?;
    let packed = PackedB::pack(b);
    gemm_packed_impl(alpha, a, &packed, beta, c, false);
    Ok(flop_count(a.rows, b.cols, a.cols))
}

/// GEMM against a pre-packed B. `parallel` selects row-panel parallelism.
pub fn gemm_packed(
    alpha: f32,
    a: &MatrixView<'_>,
    b: &PackedB,
    beta: f32,
    c: &mut MatrixViewMut<'_>,
    parallel: bool,
) -> Result<u64> {
    check_shapes(a, b.k, b.n, c)?;
    gemm_packed_impl(alpha, a, b, beta, c, parallel);
    Ok(flop_count(a.rows, b.n, a.cols))
}

/// Runs [`gemm`] on a pool of `threads` workers.
pub fn gemm_with_threads(
    threads: usize,
    alpha: f32,
    a: &MatrixView<'_>,
    b: &MatrixView<'_>,
    beta: f32,
    c: &mut MatrixViewMut<'_>,
) -> Result<u64> {
    crate::parallel::install(threads, || gemm(alpha, a, b, beta, c))
}

pub fn flop_count(m: usize, n: usize, k: usize) -> u64 {
    2 * m as u64 * n as u64 * k as u64
}

fn check_shapes(a: &MatrixView<'_>, bk: usize, bn: usize, c: &MatrixViewMut<'_>) -> Result<()> {
    if a.cols != bk || c.rows != a.rows || c.cols != bn {
        return Err(Error::Shape(format!(
            "gemm shapes disagree: A {}x{}, B {bk}x{bn}, C {}x{}",
            a.rows, a.cols, c.rows, c.cols
        )));
    }
    Ok(())
}

fn gemm_packed_impl(alpha: f32, a: &MatrixView<'_>, b: &PackedB, beta: f32, c: &mut MatrixViewMut<'_>, parallel: bool) {
    let (m, stride) = (c.rows, c.row_stride);
    let used = (m - 1) * stride + c.cols;
    let data = &mut c.data[..used];
    let run = |(bi, chunk): (usize, &mut [f32])| {
        let i0 = bi * MC;
        let mc = MC.min(m - i0);
        row_block(alpha, a, b, beta, chunk, stride, i0, mc);
    };
    if parallel {
        data.par_chunks_mut(MC * stride).enumerate().for_each(run);
    } else {
        data.chunks_mut(MC * stride).enumerate().for_each(run);
    }
}

#[allow(clippy::too_many_arguments)]
fn row_block(alpha: f32, a: &MatrixView<'_>, b: &PackedB, beta: f32, c: &mut [f32], ldc: usize, i0: usize, mc: usize) {
    let (k, n) = (b.k, b.n);
    let mut apack = vec![0.0f32; mc.div_ceil(MR) * MR * KC.min(k)];
    for k0 in (0..k).step_by(KC) {
        let kc = KC.min(k - k0);
        pack_a(a, i0, mc, k0, kc, &mut apack);
        let first = k0 == 0;
        for jp in 0..b.panels {
            let j0 = jp * NR;
            let nr = NR.min(n - j0);
            let bp = b.panel(k0, kc, jp);
            for ip in 0..mc.div_ceil(MR) {
                let mr = MR.min(mc - ip * MR);
                let ap = &apack[ip * MR * kc..][..MR * kc];
                let acc = micro_kernel(kc, ap, bp);
                for (i, row) in acc.iter().enumerate().take(mr) {
                    let dst = &mut c[(ip * MR + i) * ldc + j0..][..nr];
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d = if first {
                            // beta == 0 ignores whatever C held, NaN included
                            if beta == 0.0 {
                                alpha * v
                            } else {
                                beta * *d + alpha * v
                            }
                        } else {
                            *d + alpha * v
                        };
                    }
                }
            }
        }
    }
}

/// Packs rows `i0..i0+mc`, columns `k0..k0+kc` of A as `[panel][kc][MR]`.
fn pack_a(a: &MatrixView<'_>, i0: usize, mc: usize, k0: usize, kc: usize, out: &mut [f32]) {
    for ip in 0..mc.div_ceil(MR) {
        let panel = &mut out[ip * MR * kc..][..MR * kc];
        for i in 0..MR {
            let r = ip * MR + i;
            if r < mc {
                let row = &a.data[(i0 + r) * a.row_stride + k0..][..kc];
                for (kk, &v) in row.iter().enumerate() {
                    panel[kk * MR + i] = v;
                }
            } else {
                for kk in 0..kc {
                    panel[kk * MR + i] = 0.0;
                }
            }
        }
    }
}

#[inline(always)]
fn micro_kernel(kc: usize, ap: &[f32], bp: &[f32]) -> [[f32; NR]; MR] {
    let mut acc = [[0.0f32; NR]; MR];
    for (a, b) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)).take(kc) {
        let b: &[f32; NR] = b.try_into().expect("panel width");
        for i in 0..MR {
            let ai = a[i];
            for j in 0..NR {
                acc[i][j] += ai * b[j];
            }
        }
    }
    acc
}
