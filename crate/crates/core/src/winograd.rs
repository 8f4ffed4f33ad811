//! Winograd F(2×2, 3×3) convolution.
//!
//! Each 2×2 output tile is computed from a 4×4 input tile:
//! `Y = Aᵀ [ (G g Gᵀ) ⊙ (Bᵀ d B) ] A`. Across channels the elementwise
//! products become 16 independent GEMMs `M[k] = U[k] · V[k]` with
//! `U[k]: OC × IC` (transformed weights) and `V[k]: IC × P` (transformed
//! input tiles, `P = MB · ⌈OH/2⌉ · ⌈OW/2⌉`). Border tiles read zeros outside
//! the padded input and the scatter crops outputs past `OH`/`OW`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gemm::{gemm_packed, MatrixView, MatrixViewMut, PackedB};
use crate::kernel::KernelId;
use crate::parallel;
use crate::problem::ConvProblem;
use crate::reference::ConvInputs;
use crate::tensor::Tensor4D;

/// Input transform Bᵀ.
pub const BT: [[f32; 4]; 4] = [
    [1.0, 0.0, -1.0, 0.0],
    [0.0, 1.0, 1.0, 0.0],
    [0.0, -1.0, 1.0, 0.0],
    [0.0, 1.0, 0.0, -1.0],
];

/// Filter transform G.
pub const G: [[f32; 3]; 4] = [
    [1.0, 0.0, 0.0],
    [0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5],
    [0.0, 0.0, 1.0],
];

/// Output transform Aᵀ.
pub const AT: [[f32; 4]; 2] = [[1.0, 1.0, 1.0, 0.0], [0.0, 1.0, -1.0, -1.0]];

/// Transformed-domain points per tile.
pub const ALPHA2: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WinogradPlan {
    pub tiles_h: usize,
    pub tiles_w: usize,
    /// Tile count `MB · tiles_h · tiles_w`.
    pub tiles: usize,
}

impl WinogradPlan {
    pub fn new(p: &ConvProblem) -> Result<Self> {
        supports(p).map_err(|reason| Error::Unsupported {
            kernel: KernelId::Wino.to_string(),
            reason,
        })?;
        let tiles_h = p.oh.div_ceil(2);
        let tiles_w = p.ow.div_ceil(2);
        Ok(WinogradPlan {
            tiles_h,
            tiles_w,
            tiles: p.mb * tiles_h * tiles_w,
        })
    }
}

pub fn supports(p: &ConvProblem) -> std::result::Result<(), String> {
    if p.kh != 3 || p.kw != 3 {
        return Err(format!("F(2x2,3x3) needs a 3x3 kernel, got {}x{}", p.kh, p.kw));
    }
    if p.sh != 1 || p.sw != 1 {
        return Err(format!("F(2x2,3x3) needs stride 1, got {}x{}", p.sh, p.sw));
    }
    Ok(())
}

/// `G · g · Gᵀ` for one 3×3 filter, row-major 4×4.
pub fn transform_filter(g: &[f32; 9]) -> [f32; 16] {
    let mut gg = [[0.0f32; 3]; 4];
    for i in 0..4 {
        for j in 0..3 {
            gg[i][j] = (0..3).map(|k| G[i][k] * g[k * 3 + j]).sum();
        }
    }
    let mut u = [0.0f32; 16];
    for i in 0..4 {
        for j in 0..4 {
            u[i * 4 + j] = (0..3).map(|k| gg[i][k] * G[j][k]).sum();
        }
    }
    u
}

/// `Bᵀ · d · B` for one 4×4 tile.
#[inline]
pub fn transform_input(d: &[f32; 16]) -> [f32; 16] {
    let mut t = [[0.0f32; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            t[i][j] = (0..4).map(|k| BT[i][k] * d[k * 4 + j]).sum();
        }
    }
    let mut v = [0.0f32; 16];
    for i in 0..4 {
        for j in 0..4 {
            v[i * 4 + j] = (0..4).map(|k| t[i][k] * BT[j][k]).sum();
        }
    }
    v
}

/// `Aᵀ · m · A` for one 4×4 tile, row-major 2×2.
#[inline]
pub fn transform_output(m: &[f32; 16]) -> [f32; 4] {
    let mut t = [[0.0f32; 4]; 2];
    for i in 0..2 {
        for j in 0..4 {
            t[i][j] = (0..4).map(|k| AT[i][k] * m[k * 4 + j]).sum();
        }
    }
    let mut y = [0.0f32; 4];
    for i in 0..2 {
        for j in 0..2 {
            y[i * 2 + j] = (0..4).map(|k| t[i][k] * AT[j][k]).sum();
        }
    }
    y
}

/// Transformed weights `U[k][oc][ic]`, 16 planes of `OC × IC`.
#[derive(Debug, Clone, PartialEq)]
pub struct WinogradWeights {
    pub oc: usize,
    pub ic: usize,
    pub data: Vec<f32>,
}

impl WinogradWeights {
    pub fn plane(&self, k: usize) -> &[f32] {
        &self.data[k * self.oc * self.ic..][..self.oc * self.ic]
    }
}

pub fn transform_weights(wei: &Tensor4D) -> Result<WinogradWeights> {
    let wei = wei.to_plain();
    let [oc, ic, kh, kw] = wei.dims();
    if kh != 3 || kw != 3 {
        return Err(Error::Unsupported {
            kernel: KernelId::Wino.to_string(),
            reason: format!("weight transform needs 3x3 filters, got {kh}x{kw}"),
        });
    }
    let plane = oc * ic;
    let mut data = vec![0.0f32; ALPHA2 * plane];
    for (idx, g) in wei.data().chunks_exact(9).enumerate() {
        let u = transform_filter(g.try_into().unwrap());
        for (k, v) in u.into_iter().enumerate() {
            data[k * plane + idx] = v;
        }
    }
    Ok(WinogradWeights { oc, ic, data })
}

pub(crate) struct WinogradPrepared {
    plan: WinogradPlan,
    /// One packed `U[k]ᵀ`-free operand per k: the GEMM is `M[k] = U[k] · V[k]`
    /// with U on the left, so U stays row-major and V is packed per call.
    weights: WinogradWeights,
    src: Tensor4D,
    bias: Option<Vec<f32>>,
}

pub(crate) fn prepare(p: &ConvProblem, inputs: &ConvInputs) -> Result<WinogradPrepared> {
    p.validate()?;
    let plan = WinogradPlan::new(p)?;
    inputs.check(p)?;
    Ok(WinogradPrepared {
        plan,
        weights: transform_weights(&inputs.wei)?,
        src: inputs.src.to_plain(),
        bias: inputs.bias.clone(),
    })
}

pub(crate) fn execute(p: &ConvProblem, prep: &WinogradPrepared, threads: usize) -> Result<Tensor4D> {
    let plan = prep.plan;
    let tiles = plan.tiles;
    let (ic, oc) = (p.ic, p.oc);
    let src = prep.src.data();
    let ihw = p.ih * p.iw;
    let per_image = plan.tiles_h * plan.tiles_w;

    parallel::install(threads, || -> Result<Tensor4D> {
        // V laid out [ic][k][tile]: each input channel is an independent task,
        // and plane k is the IC × P matrix at offset k·P with row stride 16·P.
        let mut v = vec![0.0f32; ic * ALPHA2 * tiles];
        v.par_chunks_mut(ALPHA2 * tiles).enumerate().for_each(|(c, vc)| {
            for t in 0..tiles {
                let (n, rem) = (t / per_image, t % per_image);
                let (th, tw) = (rem / plan.tiles_w, rem % plan.tiles_w);
                let plane = &src[(n * ic + c) * ihw..][..ihw];
                let mut d = [0.0f32; 16];
                for y in 0..4 {
                    let ih = (2 * th + y) as isize - p.ph as isize;
                    if ih < 0 || ih as usize >= p.ih {
                        continue;
                    }
                    for x in 0..4 {
                        let iw = (2 * tw + x) as isize - p.pw as isize;
                        if iw >= 0 && (iw as usize) < p.iw {
                            d[y * 4 + x] = plane[ih as usize * p.iw + iw as usize];
                        }
                    }
                }
                for (k, val) in transform_input(&d).into_iter().enumerate() {
                    vc[k * tiles + t] = val;
                }
            }
        });

        // 16 independent GEMMs, M[k] = U[k] (OC × IC) · V[k] (IC × P).
        let mut m = vec![0.0f32; ALPHA2 * oc * tiles];
        m.par_chunks_mut(oc * tiles).enumerate().try_for_each(|(k, mk)| -> Result<()> {
            let vk = MatrixView::new(&v[k * tiles..], ic, tiles, ALPHA2 * tiles)?;
            let uk = MatrixView::dense(prep.weights.plane(k), oc, ic)?;
            let packed = PackedB::pack(&vk);
            let mut cv = MatrixViewMut::dense(mk, oc, tiles)?;
            gemm_packed(1.0, &uk, &packed, 0.0, &mut cv, false)?;
            Ok(())
        })?;

        // Output transform, one (n, oc) plane per task.
        let mut out = Tensor4D::zeros(p.dst_dims())?;
        let ohw = p.oh * p.ow;
        out.data_mut().par_chunks_mut(ohw).enumerate().for_each(|(idx, dst)| {
            let (n, o) = (idx / oc, idx % oc);
            let b = prep.bias.as_ref().map_or(0.0, |b| b[o]);
            for th in 0..plan.tiles_h {
                for tw in 0..plan.tiles_w {
                    let t = n * per_image + th * plan.tiles_w + tw;
                    let mut mt = [0.0f32; 16];
                    for (k, val) in mt.iter_mut().enumerate() {
                        *val = m[(k * oc + o) * tiles + t];
                    }
                    let y = transform_output(&mt);
                    for dy in 0..2 {
                        let oh = 2 * th + dy;
                        if oh >= p.oh {
                            continue;
                        }
                        for dx in 0..2 {
                            let ow = 2 * tw + dx;
                            if ow < p.ow {
                                dst[oh * p.ow + ow] = y[dy * 2 + dx] + b;
                            }
                        }
                    }
                }
            }
        });
        Ok(out)
    })
}

pub fn conv_winograd(p: &ConvProblem, inputs: &ConvInputs, threads: usize) -> Result<Tensor4D> {
    let prep = prepare(p, inputs)?;
    execute(p, &prep, threads)
}

/// Multiplications by transform constants other than 0 and ±1, i.e. the
/// ones an implementation cannot turn into additions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransformMults {
    pub input: u64,
    pub weight: u64,
    pub output: u64,
}

impl TransformMults {
    pub fn total(&self) -> u64 {
        self.input + self.weight + self.output
    }
}

fn nontrivial(row: &[f32]) -> u64 {
    row.iter().filter(|&&c| c != 0.0 && c.abs() != 1.0).count() as u64
}

pub fn transform_mults(p: &ConvProblem) -> Result<TransformMults> {
    let plan = WinogradPlan::new(p)?;
    // G·g: each of the 3 columns of g meets every row of G; (G·g)·Gᵀ: each of
    // the 4 rows meets every row of G again.
    let g_rows: u64 = G.iter().map(|r| nontrivial(r)).sum();
    let per_filter = 3 * g_rows + 4 * g_rows;
    let bt_rows: u64 = BT.iter().map(|r| nontrivial(r)).sum();
    let at_rows: u64 = AT.iter().map(|r| nontrivial(r)).sum();
    let tiles_by_channel = |c: usize| plan.tiles as u64 * c as u64;
    Ok(TransformMults {
        input: (4 * bt_rows + 4 * bt_rows) * tiles_by_channel(p.ic),
        weight: per_filter * (p.oc * p.ic) as u64,
        output: (4 * at_rows + 2 * at_rows) * tiles_by_channel(p.oc),
    })
}

/// Elementwise-product count of a kernel: `MB·OC·OH·OW·IC·KH·KW` for the
/// direct formulations, `16·OC·IC·P` (GEMM stage only) for Winograd.
pub fn mult_count(p: &ConvProblem, kernel: KernelId) -> Result<u64> {
    p.validate()?;
    match kernel {
        KernelId::Wino => {
            let plan = WinogradPlan::new(p)?;
            Ok(ALPHA2 as u64 * p.oc as u64 * p.ic as u64 * plan.tiles as u64)
        }
        _ => Ok(p.macs()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{parse_descriptor, resnet50_conv_suite, FEATURED_DESCRIPTOR};
    use crate::reference::conv_naive;
    use crate::tensor::{max_rel_diff, FillPattern};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense f64 matrix product, independent of the kernel's f32 helpers.
    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (n, k, m) = (a.len(), b.len(), b[0].len());
        (0..n).map(|i| (0..m).map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum()).collect()).collect()
    }

    fn to64<const R: usize, const C: usize>(m: &[[f32; C]; R]) -> Vec<Vec<f64>> {
        m.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    }

    fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..m[0].len()).map(|j| m.iter().map(|r| r[j]).collect()).collect()
    }

    #[test]
    fn toom_cook_1d_identity() {
        // At·[(G·g) ⊙ (Bt·d)] equals the two valid outputs of correlating d with g.
        let (bt, g_m, at) = (to64(&BT), to64(&G), to64(&AT));
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let g: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gcol: Vec<Vec<f64>> = g.iter().map(|&v| vec![v]).collect();
            let dcol: Vec<Vec<f64>> = d.iter().map(|&v| vec![v]).collect();
            let u = matmul(&g_m, &gcol);
            let v = matmul(&bt, &dcol);
            let prod: Vec<Vec<f64>> = (0..4).map(|i| vec![u[i][0] * v[i][0]]).collect();
            let y = matmul(&at, &prod);
            for i in 0..2 {
                let direct: f64 = (0..3).map(|k| d[i + k] * g[k]).sum();
                assert!((y[i][0] - direct).abs() <= 1e-6, "{} vs {direct}", y[i][0]);
            }
        }
    }

    #[test]
    fn zero_filter_transforms_to_zero() {
        let wei = Tensor4D::zeros([3, 2, 3, 3]).unwrap();
        assert!(transform_weights(&wei).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_delta_matches_dense_product() {
        let mut g = [0.0f32; 9];
        g[4] = 1.0;
        let gm: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| g[i * 3 + j] as f64).collect()).collect();
        let g64 = to64(&G);
        let want = matmul(&matmul(&g64, &gm), &transpose(&g64));
        let got = transform_filter(&g);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(got[i * 4 + j] as f64, want[i][j]);
            }
        }
        // G's middle column is (0, .5, -.5, 0): outer product of itself.
        assert_eq!(got[5], 0.25);
        assert_eq!(got[6], -0.25);
        assert_eq!(got[0], 0.0);
    }

    #[test]
    fn weight_transform_is_linear() {
        let fill = |seed| {
            Tensor4D::filled(
                [4, 3, 3, 3],
                FillPattern::SeededUniform {
                    seed,
                    lo: -1.0,
                    hi: 1.0,
                },
            )
            .unwrap()
        };
        let (a, b) = (fill(1), fill(2));
        let mut sum = a.clone();
        sum.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        let (ua, ub, us) = (
            transform_weights(&a).unwrap(),
            transform_weights(&b).unwrap(),
            transform_weights(&sum).unwrap(),
        );
        for i in 0..us.data.len() {
            assert!((us.data[i] - (ua.data[i] + ub.data[i])).abs() <= 1e-6);
        }
        assert_eq!(ua.plane(0).len(), 12);
    }

    #[test]
    fn rejects_non_3x3_and_strided() {
        for desc in ["IC4IH8_OC4_KH1", "IC4IH8_OC4_KH3SH2PH1", "IC4IH8_OC4_KH5"] {
            let p = parse_descriptor(desc).unwrap();
            let inputs = ConvInputs::random(&p, 1).unwrap();
            assert!(matches!(conv_winograd(&p, &inputs, 1), Err(Error::Unsupported { .. })), "{desc}");
            assert!(mult_count(&p, KernelId::Wino).is_err());
        }
        assert!(transform_weights(&Tensor4D::zeros([1, 1, 1, 1]).unwrap()).is_err());
    }

    fn check(desc: &str, seed: u64) {
        let p = parse_descriptor(desc).unwrap();
        let inputs = ConvInputs::random(&p, seed).unwrap();
        let d = max_rel_diff(&conv_naive(&p, &inputs).unwrap(), &conv_winograd(&p, &inputs, 2).unwrap()).unwrap();
        assert!(d <= 1e-4, "{desc}: {d}");
    }

    #[test]
    fn featured_layer_matches_oracle() {
        check(FEATURED_DESCRIPTOR, 42);
    }

    #[test]
    fn single_tile_constant_input() {
        let p = parse_descriptor("IC1IH4_OC1OH2_KH3").unwrap();
        let src = Tensor4D::filled(p.src_dims(), FillPattern::Constant(2.0)).unwrap();
        let wei = Tensor4D::from_vec(p.wei_dims(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        let inputs = ConvInputs::new(src, wei, None);
        let want = conv_naive(&p, &inputs).unwrap();
        assert_eq!(want.data(), &[90.0; 4]);
        let got = conv_winograd(&p, &inputs, 1).unwrap();
        assert!(max_rel_diff(&want, &got).unwrap() <= 1e-6);
    }

    #[test]
    fn ragged_edges() {
        check("IC5IH7_OC6_KH3PH1", 3);
        check("MB2_IC3IH9IW6_OC4_KH3", 4);
        check("IC2IH5IW8_OC3_KH3PH1PW0", 5);
    }

    #[test]
    fn thread_count_invariant() {
        let p = parse_descriptor("MB2_IC10IH13_OC7_KH3PH1").unwrap();
        let inputs = ConvInputs::random(&p, 6).unwrap();
        let one = conv_winograd(&p, &inputs, 1).unwrap();
        assert_eq!(one, conv_winograd(&p, &inputs, 2).unwrap());
        assert_eq!(one, conv_winograd(&p, &inputs, 8).unwrap());
    }

    #[test]
    fn featured_mult_counts() {
        let p = parse_descriptor(FEATURED_DESCRIPTOR).unwrap();
        let direct = mult_count(&p, KernelId::Direct).unwrap();
        let wino = mult_count(&p, KernelId::Wino).unwrap();
        assert_eq!(direct, 115_605_504);
        assert_eq!(wino, 51_380_224);
        assert_eq!(direct * 4, wino * 9);
        // per 2x2 tile: 4 outputs x 9 taps vs 16 transform points
        assert_eq!(4 * 9 * 4, 16 * 9);
        let t = transform_mults(&p).unwrap();
        assert_eq!(t.input, 0);
        assert_eq!(t.output, 0);
        assert_eq!(t.weight, 42 * 64 * 64);
    }

    #[test]
    fn ratio_on_suite() {
        for p in resnet50_conv_suite().iter().filter(|p| supports(p).is_ok()) {
            let direct = mult_count(p, KernelId::Direct).unwrap();
            let wino = mult_count(p, KernelId::Wino).unwrap();
            if p.oh % 2 == 0 && p.ow % 2 == 0 {
                assert_eq!(direct * 4, wino * 9, "{p}");
            } else {
                assert!(direct * 4 < wino * 9, "{p}");
            }
        }
        // Ragged edges compute cropped outputs, so the ratio drops below 2.25.
        let odd = parse_descriptor("IC8IH7_OC8_KH3PH1").unwrap();
        let ratio = mult_count(&odd, KernelId::Direct).unwrap() as f64 / mult_count(&odd, KernelId::Wino).unwrap() as f64;
        assert!(ratio < 2.25 && ratio > 1.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn random_problems_match_oracle(
            mb in 1usize..3, ic in 1usize..24, oc in 1usize..24, ih in 3usize..20, iw in 3usize..20,
            pad in 0usize..2, seed in any::<u64>(),
        ) {
            let mut p = ConvProblem::square(mb, ic, ih, oc, 3, 1, pad).unwrap();
            p.iw = iw;
            p.ow = crate::problem::output_extent(iw, 3, 1, pad).unwrap();
            let inputs = ConvInputs::random(&p, seed).unwrap();
            let d = max_rel_diff(&conv_naive(&p, &inputs).unwrap(), &conv_winograd(&p, &inputs, 2).unwrap()).unwrap();
            prop_assert!(d <= 1e-4, "{} {}", p, d);
        }
    }
}
