//! Naive convolution: the ground truth every optimized kernel is checked
//! against. Single-threaded, unblocked, fixed loop order.

use crate::error::{Error, Result};
use crate::problem::ConvProblem;
use crate::tensor::{FillPattern, Layout, Tensor4D};

/// Source, weights and optional per-output-channel bias of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvInputs {
    pub src: Tensor4D,
    pub wei: Tensor4D,
    pub bias: Option<Vec<f32>>,
}

impl ConvInputs {
    pub fn new(src: Tensor4D, wei: Tensor4D, bias: Option<Vec<f32>>) -> Self {
        ConvInputs { src, wei, bias }
    }

    /// Uniform `[-1, 1)` source, weights and bias derived from one seed.
    /// Seeded inputs on a dyadic grid in `[-1, 1]` (steps of 1/8).
    ///
    /// Like benchdnn's fills, the values are chosen so FP32 accumulation is
    /// exact: any kernel computing the right sum matches the oracle
    /// bitwise, whatever its summation order.
    pub fn random(p: &ConvProblem, seed: u64) -> Result<Self> {
        Self::random_with(p, seed, |seed| FillPattern::SeededDyadic { seed, bits: 3 })
    }

    /// Seeded inputs uniform over `[-1, 1)`; results then carry ordinary
    /// FP32 rounding that grows with the reduction length.
    pub fn random_uniform(p: &ConvProblem, seed: u64) -> Result<Self> {
        Self::random_with(p, seed, |seed| FillPattern::SeededUniform {
            seed,
            lo: -1.0,
            hi: 1.0,
        })
    }

    fn random_with(p: &ConvProblem, seed: u64, fill: impl Fn(u64) -> FillPattern) -> Result<Self> {
        let src = Tensor4D::filled(p.src_dims(), fill(seed))?;
        let wei = Tensor4D::filled(p.wei_dims(), fill(seed.wrapping_add(1)))?;
        let bias = Tensor4D::filled([1, p.oc, 1, 1], fill(seed.wrapping_add(2)))?.into_data();
        Ok(ConvInputs {
            src,
            wei,
            bias: Some(bias),
        })
    }

    pub fn check(&self, p: &ConvProblem) -> Result<()> {
        if self.src.dims() != p.src_dims() {
            return Err(Error::Shape(format!(
                "src dims {:?} do not match problem {p} ({:?})",
                self.src.dims(),
                p.src_dims()
            )));
        }
        if self.wei.dims() != p.wei_dims() {
            return Err(Error::Shape(format!(
                "weight dims {:?} do not match problem {p} ({:?})",
                self.wei.dims(),
                p.wei_dims()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != p.oc {
                return Err(Error::Shape(format!("bias has {} entries, expected OC={}", b.len(), p.oc)));
            }
        }
        Ok(())
    }

    pub(crate) fn check_plain(&self, p: &ConvProblem) -> Result<()> {
        self.check(p)?;
        if self.src.layout() != Layout::Plain || self.wei.layout() != Layout::Plain {
            return Err(Error::Layout("expected plain src and weights".into()));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn bias_at(&self, oc: usize) -> f32 {
        self.bias.as_ref().map_or(0.0, |b| b[oc])
    }
}

/// Range of kernel taps `k` for which `out·stride + k − pad` lands inside
/// `[0, extent)`.
#[inline]
pub(crate) fn valid_taps(out: usize, stride: usize, pad: usize, kernel: usize, extent: usize) -> (usize, usize) {
    let origin = (out * stride) as isize - pad as isize;
    let lo = (-origin).max(0) as usize;
    let hi = (extent as isize - origin).clamp(0, kernel as isize) as usize;
    (lo.min(hi), hi)
}

pub fn conv_naive(p: &ConvProblem, inputs: &ConvInputs) -> Result<Tensor4D> {
    p.validate()?;
    inputs.check_plain(p)?;
    let src = inputs.src.data();
    let wei = inputs.wei.data();
    let mut out = Tensor4D::zeros(p.dst_dims())?;
    let dst = out.data_mut();
    let (ihw, khw) = (p.ih * p.iw, p.kh * p.kw);

    let mut o = 0;
    for n in 0..p.mb {
        for oc in 0..p.oc {
            let w_oc = &wei[oc * p.ic * khw..][..p.ic * khw];
            for oh in 0..p.oh {
                let (kh_lo, kh_hi) = valid_taps(oh, p.sh, p.ph, p.kh, p.ih);
                for ow in 0..p.ow {
                    let (kw_lo, kw_hi) = valid_taps(ow, p.sw, p.pw, p.kw, p.iw);
                    let mut acc = 0.0f64;
                    for ic in 0..p.ic {
                        let s = &src[(n * p.ic + ic) * ihw..][..ihw];
                        let w = &w_oc[ic * khw..][..khw];
                        for kh in kh_lo..kh_hi {
                            let ih = oh * p.sh + kh - p.ph;
                            for kw in kw_lo..kw_hi {
                                let iw = ow * p.sw + kw - p.pw;
                                acc += f64::from(s[ih * p.iw + iw]) * f64::from(w[kh * p.kw + kw]);
                            }
                        }
                    }
                    dst[o] = (acc + f64::from(inputs.bias_at(oc))) as f32;
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}
