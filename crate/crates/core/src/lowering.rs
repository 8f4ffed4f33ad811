//! Convolution lowered to GEMM.
//!
//! Row `r` of the lowered matrix is output position `(n, oh, ow)` in
//! row-major order; column `c` is the tap `(kh, kw, ic)` with `ic` fastest.
//! Weights are permuted once into the matching `(KH·KW·IC) × OC` matrix, and
//! the GEMM result (`rows × OC`) is transposed back to `(MB, OC, OH, OW)`.
//!
//! The explicit path materializes the whole matrix; the implicit path lowers
//! `tile_rows` rows at a time into per-worker scratch.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gemm::{gemm_packed, MatrixView, MatrixViewMut, PackedB};
use crate::parallel;
use crate::problem::ConvProblem;
use crate::reference::ConvInputs;
use crate::tensor::Tensor4D;

/// Per-worker scratch budget for one implicit-lowering tile.
pub const SCRATCH_BUDGET_BYTES: usize = 512 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct LoweredMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl LoweredMatrix {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn view(&self) -> MatrixView<'_> {
        MatrixView::dense(&self.data, self.rows, self.cols).expect("matrix is dense")
    }
}

pub fn lowered_shape(p: &ConvProblem) -> (usize, usize) {
    (p.mb * p.oh * p.ow, p.kh * p.kw * p.ic)
}

/// Column index of tap `(kh, kw, ic)`.
#[inline]
pub fn lowered_col(p: &ConvProblem, kh: usize, kw: usize, ic: usize) -> usize {
    (kh * p.kw + kw) * p.ic + ic
}

/// Lowers rows `first..first + out.len() / cols` into `out`.
fn lower_rows(p: &ConvProblem, src: &[f32], first: usize, out: &mut [f32]) {
    let cols = p.kh * p.kw * p.ic;
    let (ohw, ihw) = (p.oh * p.ow, p.ih * p.iw);
    for (i, row) in out.chunks_exact_mut(cols).enumerate() {
        let r = first + i;
        let (n, pos) = (r / ohw, r % ohw);
        let (oh, ow) = (pos / p.ow, pos % p.ow);
        let img = &src[n * p.ic * ihw..][..p.ic * ihw];
        for kh in 0..p.kh {
            let ih = (oh * p.sh + kh) as isize - p.ph as isize;
            for kw in 0..p.kw {
                let iw = (ow * p.sw + kw) as isize - p.pw as isize;
                let dst = &mut row[(kh * p.kw + kw) * p.ic..][..p.ic];
                if ih < 0 || iw < 0 || ih as usize >= p.ih || iw as usize >= p.iw {
                    dst.fill(0.0);
                } else {
                    let at = ih as usize * p.iw + iw as usize;
                    for (ic, d) in dst.iter_mut().enumerate() {
                        *d = img[ic * ihw + at];
                    }
                }
            }
        }
    }
}

fn try_alloc(len: usize) -> Result<Vec<f32>> {
    let mut v = Vec::new();
    v.try_reserve_exact(len).map_err(|_| Error::ScratchAlloc {
        bytes: len.saturating_mul(4),
    })?;
    v.resize(len, 0.0);
    Ok(v)
}

pub fn im2row(p: &ConvProblem, src: &Tensor4D) -> Result<LoweredMatrix> {
    p.validate()?;
    if src.dims() != p.src_dims() {
        return Err(Error::Shape(format!("src dims {:?} do not match {p}", src.dims())));
    }
    let src = src.to_plain();
    let (rows, cols) = lowered_shape(p);
    let mut data = try_alloc(rows.checked_mul(cols).ok_or(Error::ScratchAlloc { bytes: usize::MAX })?)?;
    lower_rows(p, src.data(), 0, &mut data);
    Ok(LoweredMatrix { rows, cols, data })
}

/// `(KH·KW·IC) × OC` weight matrix in lowered-column order.
pub fn weight_matrix(p: &ConvProblem, wei: &Tensor4D) -> Vec<f32> {
    let wei = wei.to_plain();
    let w = wei.data();
    let cols = p.kh * p.kw * p.ic;
    let mut out = vec![0.0f32; cols * p.oc];
    for oc in 0..p.oc {
        for ic in 0..p.ic {
            for kh in 0..p.kh {
                for kw in 0..p.kw {
                    out[lowered_col(p, kh, kw, ic) * p.oc + oc] = w[((oc * p.ic + ic) * p.kh + kh) * p.kw + kw];
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImplicitTileConfig {
    pub tile_rows: usize,
    pub threads: usize,
}

impl ImplicitTileConfig {
    /// One output row (`OW` positions) per tile, shrunk if a tile would
    /// exceed [`SCRATCH_BUDGET_BYTES`].
    pub fn for_problem(p: &ConvProblem, threads: usize) -> Self {
        let cols = p.kh * p.kw * p.ic;
        let max_rows = (SCRATCH_BUDGET_BYTES / (cols * 4)).max(1);
        ImplicitTileConfig {
            tile_rows: p.ow.min(max_rows),
            threads,
        }
    }

    pub fn tile_bytes(&self, p: &ConvProblem) -> usize {
        self.tile_rows * p.kh * p.kw * p.ic * 4
    }

    pub fn fits_budget(&self, p: &ConvProblem) -> bool {
        self.tile_bytes(p) <= SCRATCH_BUDGET_BYTES
    }
}

/// Scratch accounting of one implicit-lowering call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScratchStats {
    pub tiles: usize,
    pub tile_bytes: usize,
    /// Largest number of scratch bytes alive at the same time.
    pub peak_bytes: usize,
}

struct ScratchTracker {
    live: AtomicUsize,
    peak: AtomicUsize,
}

struct Scratch<'a> {
    buf: Vec<f32>,
    tracker: &'a ScratchTracker,
}

impl<'a> Scratch<'a> {
    fn new(tracker: &'a ScratchTracker, len: usize) -> Self {
        let bytes = len * 4;
        let live = tracker.live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        tracker.peak.fetch_max(live, Ordering::SeqCst);
        Scratch {
            buf: vec![0.0; len],
            tracker,
        }
    }
}

impl Drop for Scratch<'_> {
    fn drop(&mut self) {
        self.tracker.live.fetch_sub(self.buf.len() * 4, Ordering::SeqCst);
    }
}

pub(crate) struct LoweringPrepared {
    src: Tensor4D,
    weights: PackedB,
    bias: Option<Vec<f32>>,
}

pub(crate) fn prepare(p: &ConvProblem, inputs: &ConvInputs) -> Result<LoweringPrepared> {
    p.validate()?;
    inputs.check(p)?;
    let wm = weight_matrix(p, &inputs.wei);
    let (_, cols) = lowered_shape(p);
    let weights = PackedB::pack(&MatrixView::dense(&wm, cols, p.oc)?);
    Ok(LoweringPrepared {
        src: inputs.src.to_plain(),
        weights,
        bias: inputs.bias.clone(),
    })
}

/// Output rows pre-seeded with the bias so the GEMM can fold it in with beta=1.
fn seeded_output(p: &ConvProblem, bias: Option<&[f32]>) -> Result<(Vec<f32>, f32)> {
    let (rows, _) = lowered_shape(p);
    let mut out = try_alloc(rows * p.oc)?;
    match bias {
        Some(b) => {
            out.chunks_exact_mut(p.oc).for_each(|r| r.copy_from_slice(b));
            Ok((out, 1.0))
        }
        None => Ok((out, 0.0)),
    }
}

/// `(rows × OC)` GEMM output to `(MB, OC, OH, OW)`.
fn to_nchw(p: &ConvProblem, mat: &[f32]) -> Result<Tensor4D> {
    let mut out = Tensor4D::zeros(p.dst_dims())?;
    let ohw = p.oh * p.ow;
    out.data_mut()
        .par_chunks_mut(ohw)
        .enumerate()
        .for_each(|(plane, dst)| {
            let (n, oc) = (plane / p.oc, plane % p.oc);
            let rows = &mat[n * ohw * p.oc..][..ohw * p.oc];
            for (pos, d) in dst.iter_mut().enumerate() {
                *d = rows[pos * p.oc + oc];
            }
        });
    Ok(out)
}

pub(crate) fn execute_im2row(p: &ConvProblem, prep: &LoweringPrepared, threads: usize) -> Result<Tensor4D> {
    let lowered = im2row(p, &prep.src)?;
    let (mut c, beta) = seeded_output(p, prep.bias.as_deref())?;
    parallel::install(threads, || -> Result<Tensor4D> {
        let mut cv = MatrixViewMut::dense(&mut c, lowered.rows, p.oc)?;
        gemm_packed(1.0, &lowered.view(), &prep.weights, beta, &mut cv, true)?;
        to_nchw(p, &c)
    })
}

pub(crate) fn execute_implicit(
    p: &ConvProblem,
    prep: &LoweringPrepared,
    cfg: &ImplicitTileConfig,
) -> Result<(Tensor4D, ScratchStats)> {
    if cfg.tile_rows == 0 || cfg.threads == 0 {
        return Err(Error::Config("tile_rows and threads must be positive".into()));
    }
    let (rows, cols) = lowered_shape(p);
    let tile_rows = cfg.tile_rows.min(rows);
    let (mut c, beta) = seeded_output(p, prep.bias.as_deref())?;
    let tracker = ScratchTracker {
        live: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
    };
    let src = prep.src.data();
    let out = parallel::install(cfg.threads, || -> Result<Tensor4D> {
        c.par_chunks_mut(tile_rows * p.oc)
            .enumerate()
            .try_for_each_init(
                || Scratch::new(&tracker, tile_rows * cols),
                |scratch, (t, ctile)| -> Result<()> {
                    let first = t * tile_rows;
                    let n_rows = ctile.len() / p.oc;
                    let a = &mut scratch.buf[..n_rows * cols];
                    lower_rows(p, src, first, a);
                    let mut cv = MatrixViewMut::dense(ctile, n_rows, p.oc)?;
                    gemm_packed(1.0, &MatrixView::dense(a, n_rows, cols)?, &prep.weights, beta, &mut cv, false)?;
                    Ok(())
                },
            )?;
        to_nchw(p, &c)
    })?;
    Ok((
        out,
        ScratchStats {
            tiles: rows.div_ceil(tile_rows),
            tile_bytes: tile_rows * cols * 4,
            peak_bytes: tracker.peak.load(Ordering::SeqCst),
        },
    ))
}

/// Explicit lowering: materialize the full matrix, then one GEMM.
pub fn conv_im2row(p: &ConvProblem, inputs: &ConvInputs, threads: usize) -> Result<Tensor4D> {
    let prep = prepare(p, inputs)?;
    execute_im2row(p, &prep, threads)
}

/// Implicit lowering: tiles of `tile_rows` rows are lowered on the fly into
/// per-worker scratch and multiplied in parallel.
pub fn conv_gemm_implicit(p: &ConvProblem, inputs: &ConvInputs, cfg: &ImplicitTileConfig) -> Result<Tensor4D> {
    conv_gemm_implicit_with_stats(p, inputs, cfg).map(|(t, _)| t)
}

pub fn conv_gemm_implicit_with_stats(
    p: &ConvProblem,
    inputs: &ConvInputs,
    cfg: &ImplicitTileConfig,
) -> Result<(Tensor4D, ScratchStats)> {
    let prep = prepare(p, inputs)?;
    execute_implicit(p, &prep, cfg)
}
