//! Dense 4-D FP32 tensors in plain (N, C, H, W) or channel-blocked
//! (N, C/cb, H, W, cb) layout.
//!
//! Element coordinates are always logical `(n, c, h, w)`; the layout only
//! changes where an element lives in the buffer. Blocked tensors round the
//! channel extent up to a multiple of the block and keep the padding zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Channel block widths accepted by [`Layout::Blocked`].
pub const CHANNEL_BLOCKS: [usize; 2] = [8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    Plain,
    Blocked { c_block: usize },
}

impl Layout {
    pub fn blocked(c_block: usize) -> Result<Self> {
        check_block(c_block)?;
        Ok(Layout::Blocked { c_block })
    }
}

pub(crate) fn check_block(c_block: usize) -> Result<()> {
    if CHANNEL_BLOCKS.contains(&c_block) {
        Ok(())
    } else {
        Err(Error::ChannelBlock(c_block))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FillPattern {
    Constant(f32),
    /// Each element takes its logical row-major (n, c, h, w) index.
    LinearIndex,
    /// Uniform in `[lo, hi)` from a ChaCha8 stream; values are drawn in
    /// logical order so the result does not depend on the layout.
    SeededUniform { seed: u64, lo: f32, hi: f32 },
    /// Uniform over the grid `k / 2^bits`, `k ∈ [-2^bits, 2^bits]`, from a
    /// ChaCha8 stream. Products and moderate sums of such values are exact in
    /// FP32, so every summation order gives the same result.
    SeededDyadic { seed: u64, bits: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4D {
    dims: [usize; 4],
    layout: Layout,
    data: Vec<f32>,
}

impl Tensor4D {
    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        Self::zeros_with_layout(dims, Layout::Plain)
    }

    pub fn zeros_with_layout(dims: [usize; 4], layout: Layout) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("tensor extents must be positive, got {dims:?}")));
        }
        if let Layout::Blocked { c_block } = layout {
            check_block(c_block)?;
        }
        let len = storage_len(dims, layout);
        Ok(Tensor4D {
            dims,
            layout,
            data: vec![0.0; len],
        })
    }

    /// Wraps a plain-layout buffer.
    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("tensor extents must be positive, got {dims:?}")));
        }
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(Error::Shape(format!(
                "buffer of {} elements does not match dims {dims:?} ({want} elements)",
                data.len()
            )));
        }
        Ok(Tensor4D {
            dims,
            layout: Layout::Plain,
            data,
        })
    }

    pub fn filled(dims: [usize; 4], pattern: FillPattern) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        t.fill(pattern);
        Ok(t)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Number of logical elements, N·C·H·W.
    pub fn logical_len(&self) -> usize {
        self.dims.iter().product()
    }

    /// Number of channel blocks; 1 block of C channels for plain tensors.
    pub fn channel_blocks(&self) -> usize {
        match self.layout {
            Layout::Plain => 1,
            Layout::Blocked { c_block } => self.dims[1].div_ceil(c_block),
        }
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cc, hh, ww] = self.dims;
        debug_assert!(n < self.dims[0] && c < cc && h < hh && w < ww);
        match self.layout {
            Layout::Plain => ((n * cc + c) * hh + h) * ww + w,
            Layout::Blocked { c_block } => {
                let blocks = cc.div_ceil(c_block);
                ((((n * blocks + c / c_block) * hh + h) * ww + w) * c_block) + c % c_block
            }
        }
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let off = self.offset(n, c, h, w);
        self.data[off] = v;
    }

    pub fn fill(&mut self, pattern: FillPattern) -> &mut Self {
        match pattern {
            FillPattern::Constant(v) => {
                if self.layout == Layout::Plain {
                    self.data.fill(v);
                } else {
                    self.data.fill(0.0);
                    self.for_each_logical(|_| v);
                }
            }
            FillPattern::LinearIndex => {
                let mut i = 0usize;
                self.for_each_logical(|_| {
                    let v = i as f32;
                    i += 1;
                    v
                });
            }
            FillPattern::SeededUniform { seed, lo, hi } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                self.for_each_logical(|_| {
                    let u: f32 = rng.random();
                    lo + (hi - lo) * u
                });
            }
            FillPattern::SeededDyadic { seed, bits } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = 1i32 << bits;
                let scale = 1.0 / m as f32;
                self.for_each_logical(|_| rng.random_range(-m..=m) as f32 * scale);
            }
        }
        self
    }

    /// Visits elements in logical order, storing the returned value.
    fn for_each_logical(&mut self, mut f: impl FnMut([usize; 4]) -> f32) {
        let [nn, cc, hh, ww] = self.dims;
        for n in 0..nn {
            for c in 0..cc {
                for h in 0..hh {
                    for w in 0..ww {
                        let v = f([n, c, h, w]);
                        self.set(n, c, h, w, v);
                    }
                }
            }
        }
    }

    pub fn to_blocked(&self, c_block: usize) -> Result<Tensor4D> {
        check_block(c_block)?;
        if self.layout != Layout::Plain {
            return Err(Error::Layout("to_blocked expects a plain tensor".into()));
        }
        let [nn, cc, hh, ww] = self.dims;
        let hw = hh * ww;
        let mut out = Tensor4D::zeros_with_layout(self.dims, Layout::Blocked { c_block })?;
        let blocks = cc.div_ceil(c_block);
        for n in 0..nn {
            for c in 0..cc {
                let src = &self.data[(n * cc + c) * hw..][..hw];
                let (b, inner) = (c / c_block, c % c_block);
                let base = (n * blocks + b) * hw * c_block + inner;
                for (i, &v) in src.iter().enumerate() {
                    out.data[base + i * c_block] = v;
                }
            }
        }
        Ok(out)
    }

    pub fn from_blocked(&self) -> Result<Tensor4D> {
        let Layout::Blocked { c_block } = self.layout else {
            return Err(Error::Layout("from_blocked expects a blocked tensor".into()));
        };
        let [nn, cc, hh, ww] = self.dims;
        let hw = hh * ww;
        let blocks = cc.div_ceil(c_block);
        let mut out = Tensor4D::zeros(self.dims)?;
        for n in 0..nn {
            for c in 0..cc {
                let dst = &mut out.data[(n * cc + c) * hw..][..hw];
                let (b, inner) = (c / c_block, c % c_block);
                let base = (n * blocks + b) * hw * c_block + inner;
                for (i, v) in dst.iter_mut().enumerate() {
                    *v = self.data[base + i * c_block];
                }
            }
        }
        Ok(out)
    }

    /// Plain copy regardless of the current layout.
    pub fn to_plain(&self) -> Tensor4D {
        match self.layout {
            Layout::Plain => self.clone(),
            Layout::Blocked { .. } => self.from_blocked().expect("layout checked"),
        }
    }
}

fn storage_len(dims: [usize; 4], layout: Layout) -> usize {
    let [n, c, h, w] = dims;
    match layout {
        Layout::Plain => n * c * h * w,
        Layout::Blocked { c_block } => n * c.div_ceil(c_block) * c_block * h * w,
    }
}

/// Maximum over elements of `|a - b| / max(|a|, |b|, 1)`, compared logically
/// so tensors in different layouts can be checked against each other.
pub fn max_rel_diff(a: &Tensor4D, b: &Tensor4D) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!(
            "cannot compare tensors of dims {:?} and {:?}",
            a.dims, b.dims
        )));
    }
    let rel = |x: f32, y: f32| {
        let (x, y) = (x as f64, y as f64);
        if x == y {
            return 0.0;
        }
        let d = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
        if d.is_nan() {
            f64::INFINITY
        } else {
            d
        }
    };
    if a.layout == Layout::Plain && b.layout == Layout::Plain {
        return Ok(a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| rel(x, y))
            .fold(0.0, f64::max));
    }
    let [nn, cc, hh, ww] = a.dims;
    let mut worst = 0.0f64;
    for n in 0..nn {
        for c in 0..cc {
            for h in 0..hh {
                for w in 0..ww {
                    worst = worst.max(rel(a.get(n, c, h, w), b.get(n, c, h, w)));
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_zero_fill() {
        let t = Tensor4D::filled([2, 3, 4, 5], FillPattern::Constant(0.0)).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_index_fill() {
        let t = Tensor4D::filled([1, 1, 2, 2], FillPattern::LinearIndex).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn seeded_uniform_is_reproducible() {
        let p = FillPattern::SeededUniform {
            seed: 42,
            lo: -1.0,
            hi: 1.0,
        };
        let a = Tensor4D::filled([2, 5, 7, 7], p).unwrap();
        let b = Tensor4D::filled([2, 5, 7, 7], p).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (-1.0..1.0).contains(&v)));
        let c = Tensor4D::filled(
            [2, 5, 7, 7],
            FillPattern::SeededUniform {
                seed: 43,
                lo: -1.0,
                hi: 1.0,
            },
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn seeded_fill_is_layout_independent() {
        let p = FillPattern::SeededUniform {
            seed: 7,
            lo: 0.0,
            hi: 1.0,
        };
        let plain = Tensor4D::filled([1, 5, 3, 3], p).unwrap();
        let mut blocked = Tensor4D::zeros_with_layout([1, 5, 3, 3], Layout::Blocked { c_block: 8 }).unwrap();
        blocked.fill(p);
        assert_eq!(max_rel_diff(&plain, &blocked).unwrap(), 0.0);
    }

    #[test]
    fn blocked_round_trip_64_channels() {
        let t = Tensor4D::filled([1, 64, 5, 5], FillPattern::LinearIndex).unwrap();
        let b = t.to_blocked(16).unwrap();
        assert_eq!(b.channel_blocks(), 4);
        assert_eq!(b.data().len(), t.data().len());
        assert_eq!(b.from_blocked().unwrap(), t);
    }

    #[test]
    fn blocked_padding_is_zero() {
        let t = Tensor4D::filled([1, 3, 2, 2], FillPattern::Constant(1.0)).unwrap();
        let b = t.to_blocked(8).unwrap();
        assert_eq!(b.channel_blocks(), 1);
        assert_eq!(b.data().len(), 8 * 4);
        for pos in 0..4 {
            let px = &b.data()[pos * 8..][..8];
            assert_eq!(&px[..3], &[1.0; 3]);
            assert_eq!(&px[3..], &[0.0; 5]);
        }
    }

    #[test]
    fn blocked_index_arithmetic() {
        // c = outer * c_block + inner: channel 17 -> outer 1, inner 1.
        let t = Tensor4D::filled([1, 64, 2, 2], FillPattern::LinearIndex).unwrap();
        let b = t.to_blocked(16).unwrap();
        let expected = t.get(0, 17, 0, 0);
        let hw = 4;
        let off = hw * 16 + 1;
        assert_eq!(b.data()[off], expected);
        assert_eq!(expected, (17 * 4) as f32);
    }

    #[test]
    fn bad_block_rejected() {
        let t = Tensor4D::zeros([1, 4, 2, 2]).unwrap();
        assert!(matches!(t.to_blocked(4), Err(Error::ChannelBlock(4))));
        assert!(matches!(t.from_blocked(), Err(Error::Layout(_))));
    }

    #[test]
    fn rel_diff_examples() {
        let a = Tensor4D::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor4D::from_vec([1, 1, 1, 1], vec![1.00001]).unwrap();
        assert_eq!(max_rel_diff(&a, &a).unwrap(), 0.0);
        let d = max_rel_diff(&a, &b).unwrap();
        assert!((d - 1e-5).abs() < 2.0 * f32::EPSILON as f64, "{d}");
        let c = Tensor4D::zeros([1, 1, 1, 2]).unwrap();
        assert!(matches!(max_rel_diff(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn rel_diff_plain_vs_blocked() {
        let t = Tensor4D::filled(
            [2, 19, 3, 4],
            FillPattern::SeededUniform {
                seed: 1,
                lo: -5.0,
                hi: 5.0,
            },
        )
        .unwrap();
        let b = t.to_blocked(8).unwrap();
        assert_eq!(max_rel_diff(&t, &b).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise_identity(
            n in 1usize..3, c in 1usize..40, h in 1usize..5, w in 1usize..5,
            block in prop::sample::select(CHANNEL_BLOCKS.to_vec()), seed in any::<u64>(),
        ) {
            let t = Tensor4D::filled([n, c, h, w], FillPattern::SeededUniform { seed, lo: -1e3, hi: 1e3 }).unwrap();
            let back = t.to_blocked(block).unwrap().from_blocked().unwrap();
            prop_assert_eq!(back.data(), t.data());
        }

        #[test]
        fn rel_diff_is_symmetric(seed_a in any::<u64>(), seed_b in any::<u64>()) {
            let fill = |seed| FillPattern::SeededUniform { seed, lo: -2.0, hi: 2.0 };
            let a = Tensor4D::filled([1, 3, 4, 4], fill(seed_a)).unwrap();
            let b = Tensor4D::filled([1, 3, 4, 4], fill(seed_b)).unwrap();
            prop_assert_eq!(max_rel_diff(&a, &b).unwrap(), max_rel_diff(&b, &a).unwrap());
            prop_assert_eq!(max_rel_diff(&a, &a).unwrap(), 0.0);
        }
    }
}
