//! Direct convolution on channel-blocked tensors.
//!
//! Output channels, input channels and output columns are grouped into
//! fixed-size blocks. Each task owns one `(n, oc-block, oh)` output row and
//! walks it in `ow_block`-wide tiles, keeping an `ow_block × oc_block`
//! accumulator tile live across all input-channel blocks and kernel taps.
//! Channel tails are handled by zero-padded blocks.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::parallel;
use crate::problem::ConvProblem;
use crate::reference::{valid_taps, ConvInputs};
use crate::tensor::{check_block, Layout, Tensor4D};

pub const MAX_OW_BLOCK: usize = 28;
pub const MIN_OW_BLOCK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectConfig {
    pub oc_block: usize,
    pub ic_block: usize,
    pub ow_block: usize,
    pub threads: usize,
}

impl Default for DirectConfig {
    /// 7 divides every ResNet50 spatial width (56/28/14/7).
    fn default() -> Self {
        DirectConfig {
            oc_block: 16,
            ic_block: 16,
            ow_block: 7,
            threads: 1,
        }
    }
}

impl DirectConfig {
    pub fn with_threads(threads: usize) -> Self {
        DirectConfig {
            threads,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_block(self.oc_block)?;
        check_block(self.ic_block)?;
        if !(MIN_OW_BLOCK..=MAX_OW_BLOCK).contains(&self.ow_block) {
            return Err(Error::Config(format!(
                "ow_block {} outside [{MIN_OW_BLOCK}, {MAX_OW_BLOCK}]",
                self.ow_block
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// Weights as `[OC/ocb][IC/icb][KH][KW][icb][ocb]`, zero-padded to whole blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedDirectWeights {
    oc: usize,
    ic: usize,
    kh: usize,
    kw: usize,
    oc_block: usize,
    ic_block: usize,
    data: Vec<f32>,
}

impl PackedDirectWeights {
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn oc_blocks(&self) -> usize {
        self.oc.div_ceil(self.oc_block)
    }

    pub fn ic_blocks(&self) -> usize {
        self.ic.div_ceil(self.ic_block)
    }

    pub fn offset(&self, oc: usize, ic: usize, kh: usize, kw: usize) -> usize {
        let (ocb, icb) = (self.oc_block, self.ic_block);
        let outer = (((oc / ocb) * self.ic_blocks() + ic / icb) * self.kh + kh) * self.kw + kw;
        outer * icb * ocb + (ic % icb) * ocb + oc % ocb
    }

    pub fn unpack(&self) -> Tensor4D {
        let mut t = Tensor4D::zeros([self.oc, self.ic, self.kh, self.kw]).expect("positive dims");
        for oc in 0..self.oc {
            for ic in 0..self.ic {
                for kh in 0..self.kh {
                    for kw in 0..self.kw {
                        t.set(oc, ic, kh, kw, self.data[self.offset(oc, ic, kh, kw)]);
                    }
                }
            }
        }
        t
    }
}

pub fn pack_weights_direct(wei: &Tensor4D, cfg: &DirectConfig) -> Result<PackedDirectWeights> {
    check_block(cfg.oc_block)?;
    check_block(cfg.ic_block)?;
    if wei.layout() != Layout::Plain {
        return Err(Error::Layout("weights must be plain (OC, IC, KH, KW)".into()));
    }
    let [oc, ic, kh, kw] = wei.dims();
    let mut packed = PackedDirectWeights {
        oc,
        ic,
        kh,
        kw,
        oc_block: cfg.oc_block,
        ic_block: cfg.ic_block,
        data: Vec::new(),
    };
    packed.data = vec![0.0; packed.oc_blocks() * cfg.oc_block * packed.ic_blocks() * cfg.ic_block * kh * kw];
    let src = wei.data();
    for o in 0..oc {
        for i in 0..ic {
            for y in 0..kh {
                for x in 0..kw {
                    let off = packed.offset(o, i, y, x);
                    packed.data[off] = src[((o * ic + i) * kh + y) * kw + x];
                }
            }
        }
    }
    Ok(packed)
}

/// Multiply counts executed by the direct kernel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DirectWork {
    /// In-bounds `(n, oh, ow, kh, kw)` taps.
    pub spatial_taps: u64,
    /// Taps that fell into spatial zero padding and were skipped.
    pub skipped_border_taps: u64,
    /// Multiplies between real input and output channels.
    pub useful_mults: u64,
    /// Multiplies against zero-padded channel-block tails.
    pub channel_padding_mults: u64,
}

impl DirectWork {
    pub fn executed_mults(&self) -> u64 {
        self.useful_mults + self.channel_padding_mults
    }
}

pub(crate) struct DirectPrepared {
    cfg: DirectConfig,
    src: Tensor4D,
    weights: PackedDirectWeights,
    bias: Vec<f32>,
}

pub(crate) fn prepare(p: &ConvProblem, inputs: &ConvInputs, cfg: &DirectConfig) -> Result<DirectPrepared> {
    p.validate()?;
    cfg.validate()?;
    inputs.check(p)?;
    let src = match inputs.src.layout() {
        Layout::Blocked { c_block } if c_block == cfg.ic_block => inputs.src.clone(),
        Layout::Plain => inputs.src.to_blocked(cfg.ic_block)?,
        Layout::Blocked { .. } => inputs.src.from_blocked()?.to_blocked(cfg.ic_block)?,
    };
    let weights = pack_weights_direct(&inputs.wei, cfg)?;
    let mut bias = vec![0.0f32; p.oc.div_ceil(cfg.oc_block) * cfg.oc_block];
    if let Some(b) = &inputs.bias {
        bias[..p.oc].copy_from_slice(b);
    }
    Ok(DirectPrepared {
        cfg: *cfg,
        src,
        weights,
        bias,
    })
}

pub(crate) fn execute(p: &ConvProblem, prep: &DirectPrepared) -> Result<(Tensor4D, DirectWork)> {
    let cfg = prep.cfg;
    let mut out = Tensor4D::zeros_with_layout(p.dst_dims(), Layout::Blocked { c_block: cfg.oc_block })?;
    let taps = parallel::install(cfg.threads, || match (cfg.oc_block, cfg.ic_block) {
        (16, 16) => run::<16, 16>(p, prep, &mut out),
        (16, 8) => run::<16, 8>(p, prep, &mut out),
        (8, 16) => run::<8, 16>(p, prep, &mut out),
        (8, 8) => run::<8, 8>(p, prep, &mut out),
        _ => unreachable!("validated block sizes"),
    });

    let oc_blocks = p.oc.div_ceil(cfg.oc_block) as u64;
    let ic_blocks = p.ic.div_ceil(cfg.ic_block) as u64;
    let spatial = taps / oc_blocks;
    let all_taps = (p.mb * p.oh * p.ow * p.kh * p.kw) as u64;
    let executed = taps * (ic_blocks * cfg.ic_block as u64) * cfg.oc_block as u64;
    let useful = spatial * p.ic as u64 * p.oc as u64;
    Ok((
        out,
        DirectWork {
            spatial_taps: spatial,
            skipped_border_taps: all_taps - spatial,
            useful_mults: useful,
            channel_padding_mults: executed - useful,
        },
    ))
}

fn run<const OCB: usize, const ICB: usize>(p: &ConvProblem, prep: &DirectPrepared, out: &mut Tensor4D) -> u64 {
    let oc_blocks = p.oc.div_ceil(OCB);
    let row_len = p.ow * OCB;
    out.data_mut()
        .par_chunks_mut(row_len)
        .enumerate()
        .map(|(idx, row)| {
            let oh = idx % p.oh;
            let ocb = (idx / p.oh) % oc_blocks;
            let n = idx / (p.oh * oc_blocks);
            output_row::<OCB, ICB>(p, prep, n, ocb, oh, row)
        })
        .sum()
}

/// Computes one `(n, ocb, oh)` row of `OW × OCB` outputs; returns the number
/// of in-bounds spatial taps visited.
fn output_row<const OCB: usize, const ICB: usize>(
    p: &ConvProblem,
    prep: &DirectPrepared,
    n: usize,
    ocb: usize,
    oh: usize,
    row: &mut [f32],
) -> u64 {
    let ic_blocks = p.ic.div_ceil(ICB);
    let src = prep.src.data();
    let wei = prep.weights.data();
    let bias = &prep.bias[ocb * OCB..][..OCB];
    let ow_block = prep.cfg.ow_block;
    let (kh_lo, kh_hi) = valid_taps(oh, p.sh, p.ph, p.kh, p.ih);
    let mut taps = 0u64;

    for ow0 in (0..p.ow).step_by(ow_block) {
        let width = ow_block.min(p.ow - ow0);
        let mut acc = [[0.0f32; OCB]; MAX_OW_BLOCK];
        for icb in 0..ic_blocks {
            for kh in kh_lo..kh_hi {
                let ih = oh * p.sh + kh - p.ph;
                let srow = &src[((n * ic_blocks + icb) * p.ih + ih) * p.iw * ICB..][..p.iw * ICB];
                for kw in 0..p.kw {
                    let wbase = (((ocb * ic_blocks + icb) * p.kh + kh) * p.kw + kw) * ICB * OCB;
                    let wk = &wei[wbase..][..ICB * OCB];
                    for (o, a) in acc.iter_mut().enumerate().take(width) {
                        let iw = ((ow0 + o) * p.sw + kw) as isize - p.pw as isize;
                        if iw < 0 || iw as usize >= p.iw {
                            continue;
                        }
                        if icb == 0 {
                            taps += 1;
                        }
                        let s = &srow[iw as usize * ICB..][..ICB];
                        for (ic, &sv) in s.iter().enumerate() {
                            let wr: &[f32; OCB] = wk[ic * OCB..][..OCB].try_into().unwrap();
                            for oc in 0..OCB {
                                a[oc] += sv * wr[oc];
                            }
                        }
                    }
                }
            }
        }
        for (o, a) in acc.iter().enumerate().take(width) {
            let dst = &mut row[(ow0 + o) * OCB..][..OCB];
            for oc in 0..OCB {
                dst[oc] = a[oc] + bias[oc];
            }
        }
    }
    taps
}

/// Direct convolution; the result is blocked by `cfg.oc_block`.
pub fn conv_direct(p: &ConvProblem, inputs: &ConvInputs, cfg: &DirectConfig) -> Result<Tensor4D> {
    conv_direct_with_work(p, inputs, cfg).map(|(t, _)| t)
}

pub fn conv_direct_with_work(p: &ConvProblem, inputs: &ConvInputs, cfg: &DirectConfig) -> Result<(Tensor4D, DirectWork)> {
    let prep = prepare(p, inputs, cfg)?;
    execute(p, &prep)
}
