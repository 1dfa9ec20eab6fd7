//! HQ cue extractor: a residual encoder pooled into a 64-dim vector, its
//! pretraining decoder, and the SSIM measure used by the pretraining loss.

use crate::error::{invalid, Result};
use crate::nn::{global_avg_pool, Builder, Conv2d, Ctx, Linear, ResBlock, LRELU_SLOPE};
use rand::Rng;
use tape::{Graph, Tensor, Var};

pub const CUE_DIM: usize = 64;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_RANGE: f64 = 1.0;

/// Checks `(B, 1, H, W)` with `H`, `W` positive multiples of 16.
pub(crate) fn check_image(shape: &[usize], what: &str) -> Result<()> {
    if shape.len() != 4 || shape[1] != 1 {
        return Err(invalid!("{} must be (B, 1, H, W), got {:?}", what, shape));
    }
    if shape[2] == 0 || shape[3] == 0 || shape[2] % 16 != 0 || shape[3] % 16 != 0 {
        return Err(invalid!("{} spatial dims must be multiples of 16, got {:?}", what, shape));
    }
    Ok(())
}

/// Stem convolution followed by four stride-2 residual stages of width
/// `w, 2w, 4w, 8w`.
#[derive(Clone, Debug)]
pub struct ResidualEncoder {
    pub stem: Conv2d,
    pub stages: Vec<ResBlock>,
    pub widths: [usize; 4],
}

/// Full-resolution stem output and the four stage outputs (strides 2 to 16).
pub struct EncoderFeatures<'g> {
    pub stem: Var<'g>,
    pub levels: [Var<'g>; 4],
}

impl ResidualEncoder {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, width: usize) -> Self {
        let widths = [width, 2 * width, 4 * width, 8 * width];
        let stem = Conv2d::k3(b, "stem", 1, width);
        let mut cin = width;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let block = ResBlock::new(b, &format!("stage{}", i + 1), cin, w, 2);
                cin = w;
                block
            })
            .collect();
        Self { stem, stages, widths }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> EncoderFeatures<'g> {
        let stem = self.stem.forward(ctx, x).leaky_relu(LRELU_SLOPE);
        let f1 = self.stages[0].forward(ctx, stem);
        let f2 = self.stages[1].forward(ctx, f1);
        let f3 = self.stages[2].forward(ctx, f2);
        let f4 = self.stages[3].forward(ctx, f3);
        EncoderFeatures {
            stem,
            levels: [f1, f2, f3, f4],
        }
    }

    pub fn deepest_width(&self) -> usize {
        self.widths[3]
    }
}

/// The cue network `G`: encoder, global pooling, linear head to [`CUE_DIM`].
#[derive(Clone, Debug)]
pub struct CueExtractor {
    pub encoder: ResidualEncoder,
    pub head: Linear,
}

impl CueExtractor {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, width: usize) -> Self {
        let encoder = ResidualEncoder::new(&mut b.sub("encoder"), width);
        let head = Linear::new(b, "head", encoder.deepest_width(), CUE_DIM);
        Self { encoder, head }
    }

    /// Cue vectors `(B, 64)` together with the deepest feature map.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, z: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        check_image(&z.shape(), "guidance image")?;
        let feats = self.encoder.forward(ctx, z);
        let deepest = feats.levels[3];
        Ok((self.head.forward(ctx, global_avg_pool(deepest)), deepest))
    }

    pub fn encode<'g>(&self, ctx: &Ctx<'g>, z: Var<'g>) -> Result<Var<'g>> {
        Ok(self.forward(ctx, z)?.0)
    }
}

/// Pretraining decoder mirroring the encoder back to a `[0, 1]` image.
#[derive(Clone, Debug)]
pub struct CueDecoder {
    pub ups: Vec<Conv2d>,
    pub out: Conv2d,
}

impl CueDecoder {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, width: usize) -> Self {
        let chans = [8 * width, 4 * width, 2 * width, width, width];
        let ups = (0..4)
            .map(|i| Conv2d::k3(b, &format!("up{}", i + 1), chans[i], chans[i + 1]))
            .collect();
        let out = Conv2d::k3(b, "out", width, 1);
        Self { ups, out }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, deepest: Var<'g>) -> Var<'g> {
        let mut h = deepest;
        for up in &self.ups {
            h = up.forward(ctx, h.upsample2x()).leaky_relu(LRELU_SLOPE);
        }
        self.out.forward(ctx, h).sigmoid()
    }
}

pub fn gaussian_window() -> Tensor {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let mut k = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            k.push(a * b / (total * total));
        }
    }
    Tensor::from_vec(vec![1, 1, SSIM_WINDOW, SSIM_WINDOW], k)
}

/// Mean SSIM over all valid 11×11 Gaussian windows, every channel and sample.
pub fn ssim_var<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || sa.len() != 4 {
        return Err(invalid!("ssim inputs must share a (B, C, H, W) shape, got {:?} and {:?}", sa, sb));
    }
    if sa[2] < SSIM_WINDOW || sa[3] < SSIM_WINDOW {
        return Err(invalid!("ssim needs at least {0}x{0} pixels, got {1:?}", SSIM_WINDOW, sa));
    }
    let planes = [sa[0] * sa[1], 1, sa[2], sa[3]];
    let (a, b) = (a.reshape(&planes), b.reshape(&planes));
    let window = a.graph().constant(gaussian_window());
    let blur = |x: Var<'g>| x.conv2d(window, 1, 0);
    let (mu_a, mu_b) = (blur(a), blur(b));
    let (mu_aa, mu_bb, mu_ab) = (mu_a.sqr(), mu_b.sqr(), mu_a.mul(mu_b));
    let var_a = blur(a.sqr()).sub(mu_aa);
    let var_b = blur(b.sqr()).sub(mu_bb);
    let cov = blur(a.mul(b)).sub(mu_ab);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let num = mu_ab.mul_scalar(2.0).add_scalar(c1).mul(cov.mul_scalar(2.0).add_scalar(c2));
    let den = mu_aa.add(mu_bb).add_scalar(c1).mul(var_a.add(var_b).add_scalar(c2));
    Ok(num.div(den).mean_all())
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let g = Graph::new();
    Ok(ssim_var(g.constant(a.clone()), g.constant(b.clone()))?.value().item())
}

/// `MSE + w · (1 − SSIM)`.
pub fn reconstruction_loss_var<'g>(recon: Var<'g>, target: Var<'g>, ssim_weight: f64) -> Result<Var<'g>> {
    let mse = recon.sub(target).sqr().mean_all();
    let s = ssim_var(recon, target)?;
    Ok(mse.add(s.rsub_scalar(1.0).mul_scalar(ssim_weight)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Group, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(seed: u64) -> (ParamStore, CueExtractor, CueDecoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = CueExtractor::new(&mut Builder::new(&mut store, &mut rng, Group::Cue, "cue"), 4);
        let d = CueDecoder::new(&mut Builder::new(&mut store, &mut rng, Group::CueDecoder, "cue_dec"), 4);
        (store, g, d)
    }

    /// Direct per-window SSIM with explicit loops.
    fn naive_ssim(a: &Tensor, b: &Tensor) -> f64 {
        let (h, w) = (a.shape()[2], a.shape()[3]);
        let k = gaussian_window();
        let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
        let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
        let mut total = 0.0;
        let mut count = 0.0;
        for y in 0..=h - SSIM_WINDOW {
            for x in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = k.data()[i * SSIM_WINDOW + j];
                        let va = a.data()[(y + i) * w + x + j];
                        let vb = b.data()[(y + i) * w + x + j];
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn ssim_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::rand_uniform(vec![1, 1, 16, 16], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(vec![1, 1, 16, 16], 0.0, 1.0, &mut rng);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-9);
        let c = Tensor::full(vec![1, 1, 16, 16], 0.3);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        let binary = a.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let inverse = binary.map(|v| 1.0 - v);
        assert!(ssim(&binary, &inverse).unwrap() < -0.5);
        assert!(ssim(&a, &Tensor::zeros(vec![1, 1, 16, 8])).is_err());
        assert!(ssim(&Tensor::zeros(vec![1, 1, 8, 8]), &Tensor::zeros(vec![1, 1, 8, 8])).is_err());
    }

    #[test]
    fn cue_vector_shape_and_determinism() {
        let (store, g, d) = build(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::rand_uniform(vec![2, 1, 32, 32], 0.0, 1.0, &mut rng);
        let run = || {
            let graph = Graph::new();
            let ctx = Ctx::new(&graph, &store, &[]);
            let (v, deepest) = g.forward(&ctx, graph.constant(z.clone())).unwrap();
            let recon = d.forward(&ctx, deepest);
            (v.value().as_ref().clone(), recon.value().as_ref().clone())
        };
        let (v, recon) = run();
        assert_eq!(v.shape(), &[2, CUE_DIM]);
        assert!(v.all_finite());
        assert_eq!(recon.shape(), &[2, 1, 32, 32]);
        assert_eq!(run().0, v);

        let graph = Graph::new();
        let ctx = Ctx::new(&graph, &store, &[]);
        assert!(g.encode(&ctx, graph.constant(Tensor::zeros(vec![1, 1, 24, 32]))).is_err());
        assert!(g.encode(&ctx, graph.constant(Tensor::zeros(vec![1, 2, 32, 32]))).is_err());
    }

    #[test]
    fn reconstruction_loss_matches_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::rand_uniform(vec![1, 1, 16, 16], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(vec![1, 1, 16, 16], 0.0, 1.0, &mut rng);
        let g = Graph::new();
        let l = reconstruction_loss_var(g.constant(a.clone()), g.constant(b.clone()), 0.7).unwrap();
        let mse = a.zip_map(&b, |x, y| (x - y) * (x - y)).mean();
        let want = mse + 0.7 * (1.0 - naive_ssim(&a, &b));
        assert!((l.value().item() - want).abs() < 1e-9);
    }
}
