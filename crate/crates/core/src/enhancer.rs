//! The guided generator: LQ encoder with structure head, joint guidance
//! vector, and a decoder whose every level is restyled by a VIN block.

use crate::cue::{check_image, CueExtractor, EncoderFeatures, ResidualEncoder, CUE_DIM};
use crate::error::{invalid, Error, Result};
use crate::nn::{global_avg_pool, Builder, Conv2d, Ctx, Linear, ParamId, ParamStore, LRELU_SLOPE};
use crate::normalization::{IntegrationMode, VinBlock};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use tape::{Graph, Tensor, Var};

pub const STRUCTURE_DIM: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// cue vector of an HQ exemplar
    HqVector,
    /// a trained free vector replaces the exemplar cue
    LearnableTensor,
    /// structure vector only
    None,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 3] = [GuidanceMode::HqVector, GuidanceMode::LearnableTensor, GuidanceMode::None];

    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::HqVector => "hq_vector",
            GuidanceMode::LearnableTensor => "learnable_tensor",
            GuidanceMode::None => "none",
        }
    }

    pub fn guide_dim(self) -> usize {
        match self {
            GuidanceMode::None => STRUCTURE_DIM,
            _ => CUE_DIM + STRUCTURE_DIM,
        }
    }

    pub fn needs_exemplar(self) -> bool {
        self == GuidanceMode::HqVector
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid!("unknown guidance mode {:?}", s))
    }
}

/// Concatenates cue and structure vectors along the feature axis.
pub fn joint_vector<'g>(v_z: Var<'g>, v_y: Var<'g>) -> Result<Var<'g>> {
    let (sz, sy) = (v_z.shape(), v_y.shape());
    if sz.len() != 2 || sy.len() != 2 || sz[1] != CUE_DIM || sy[1] != STRUCTURE_DIM || sz[0] != sy[0] {
        return Err(invalid!(
            "joint vector needs (B, {}) and (B, {}), got {:?} and {:?}",
            CUE_DIM,
            STRUCTURE_DIM,
            sz,
            sy
        ));
    }
    Ok(Var::concat(&[v_z, v_y], 1))
}

/// Plain-vector form of [`joint_vector`].
pub fn joint(v_z: &[f64], v_y: &[f64]) -> Result<Vec<f64>> {
    let g = Graph::new();
    let v = joint_vector(
        g.constant(Tensor::from_vec(vec![1, v_z.len()], v_z.to_vec())),
        g.constant(Tensor::from_vec(vec![1, v_y.len()], v_y.to_vec())),
    )?;
    Ok(v.value().data().to_vec())
}

/// One decoder level below the deepest: fuse the upsampled coarser output
/// with the skip feature, then refine.
#[derive(Clone, Debug)]
struct MergeBlock {
    squeeze: Conv2d,
    refine: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Enhancer {
    pub encoder: ResidualEncoder,
    pub structure_head: Linear,
    bottom: Conv2d,
    merges: Vec<MergeBlock>,
    pub vins: Vec<VinBlock>,
    head_fuse: Conv2d,
    head_out: Conv2d,
    /// present in [`GuidanceMode::LearnableTensor`]
    pub learned_cue: Option<ParamId>,
    pub guidance: GuidanceMode,
    pub integration: IntegrationMode,
}

/// Encoder outputs for one LQ batch.
pub struct LqEncoding<'g> {
    pub features: EncoderFeatures<'g>,
    pub v_y: Var<'g>,
}

impl Enhancer {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        width: usize,
        guidance: GuidanceMode,
        integration: IntegrationMode,
    ) -> Self {
        let encoder = ResidualEncoder::new(&mut b.sub("encoder"), width);
        let w = encoder.widths;
        let structure_head = Linear::new(b, "fc_e", w[3], STRUCTURE_DIM);
        let guide = guidance.guide_dim();
        let mut d = b.sub("decoder");
        let bottom = Conv2d::k3(&mut d, "r4", w[3], w[3]);
        let mut vins = vec![VinBlock::new(&mut d, "vin4", guide, w[3], integration)];
        let mut merges = Vec::new();
        for k in (0..3).rev() {
            let squeeze = Conv2d::k1(&mut d, &format!("merge{}.squeeze", k + 1), w[k + 1] + w[k], w[k]);
            let refine = Conv2d::k3(&mut d, &format!("merge{}.refine", k + 1), w[k], w[k]);
            merges.push(MergeBlock { squeeze, refine });
            vins.push(VinBlock::new(&mut d, &format!("vin{}", k + 1), guide, w[k], integration));
        }
        let head_fuse = Conv2d::k3(&mut d, "head.fuse", 2 * w[0], w[0]);
        let head_out = Conv2d::k3(&mut d, "head.out", w[0], 1);
        let learned_cue = (guidance == GuidanceMode::LearnableTensor)
            .then(|| {
                let init = Tensor::randn(vec![1, CUE_DIM], 1.0, b.rng);
                b.param("learned_cue", init)
            });
        Self {
            encoder,
            structure_head,
            bottom,
            merges,
            vins,
            head_fuse,
            head_out,
            learned_cue,
            guidance,
            integration,
        }
    }

    /// Zeroes the last convolution of every VIN branch so each block starts
    /// as the identity on its decoder features.
    pub fn zero_init_residuals(&self, store: &mut ParamStore) {
        for vin in &self.vins {
            vin.conv.zero_init(store);
        }
    }

    pub fn encode_lq<'g>(&self, ctx: &Ctx<'g>, y: Var<'g>) -> Result<LqEncoding<'g>> {
        check_image(&y.shape(), "LQ image")?;
        let features = self.encoder.forward(ctx, y);
        let v_y = self.structure_head.forward(ctx, global_avg_pool(features.levels[3]));
        Ok(LqEncoding { features, v_y })
    }

    /// The cue part of the guidance vector for a batch of `batch` images.
    pub fn cue<'g>(
        &self,
        ctx: &Ctx<'g>,
        extractor: &CueExtractor,
        z: Option<Var<'g>>,
        batch: usize,
    ) -> Result<Option<Var<'g>>> {
        match self.guidance {
            GuidanceMode::HqVector => {
                let z = z.ok_or_else(|| Error::State("hq_vector guidance needs an HQ exemplar".into()))?;
                let v = extractor.encode(ctx, z)?;
                let n = v.shape()[0];
                if n == batch {
                    Ok(Some(v))
                } else if n == 1 {
                    Ok(Some(v.expand(&[batch, CUE_DIM])))
                } else {
                    Err(invalid!("{} guidance images for a batch of {}", n, batch))
                }
            }
            GuidanceMode::LearnableTensor => {
                let id = self
                    .learned_cue
                    .ok_or_else(|| Error::State("learnable_tensor guidance without its parameter".into()))?;
                Ok(Some(ctx.p(id).expand(&[batch, CUE_DIM])))
            }
            GuidanceMode::None => Ok(None),
        }
    }

    /// Guidance vector for the decoder: `concat(v_z, v_y)`, or `v_y` alone.
    pub fn guide<'g>(&self, v_z: Option<Var<'g>>, v_y: Var<'g>) -> Result<Var<'g>> {
        match v_z {
            Some(v_z) => joint_vector(v_z, v_y),
            None => Ok(v_y),
        }
    }

    pub fn decode<'g>(&self, ctx: &Ctx<'g>, features: &EncoderFeatures<'g>, v_c: Var<'g>) -> Result<Var<'g>> {
        let f = &features.levels;
        let want = self.guidance.guide_dim();
        let vs = v_c.shape();
        let fs = f[3].shape();
        if vs.len() != 2 || vs[1] != want || vs[0] != fs[0] {
            return Err(invalid!("guidance vector {:?} does not fit (B={}, {})", vs, fs[0], want));
        }
        let mut h = self.vins[0].forward(ctx, self.bottom.forward(ctx, f[3]), v_c)?;
        for (i, merge) in self.merges.iter().enumerate() {
            let skip = f[2 - i];
            let up = h.upsample2x();
            if up.shape()[2..] != skip.shape()[2..] {
                return Err(invalid!("decoder level {:?} does not match skip {:?}", up.shape(), skip.shape()));
            }
            let r = merge
                .refine
                .forward(ctx, merge.squeeze.forward(ctx, Var::concat(&[up, skip], 1)));
            h = self.vins[i + 1].forward(ctx, r, v_c)?;
        }
        let full = Var::concat(&[h.upsample2x(), features.stem], 1);
        let h = self.head_fuse.forward(ctx, full).leaky_relu(LRELU_SLOPE);
        Ok(self.head_out.forward(ctx, h).sigmoid())
    }

    /// Full pipeline `y, z -> x̂`. The returned guidance vector is the
    /// decoder's conditioning input, kept for the feature-consistency loss.
    pub fn forward<'g>(
        &self,
        ctx: &Ctx<'g>,
        extractor: &CueExtractor,
        y: Var<'g>,
        z: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let enc = self.encode_lq(ctx, y)?;
        let v_z = self.cue(ctx, extractor, z, y.shape()[0])?;
        let v_c = self.guide(v_z, enc.v_y)?;
        let xhat = self.decode(ctx, &enc.features, v_c)?;
        Ok((xhat, v_c))
    }

    /// The re-encoded counterpart of the guidance vector for an output image.
    pub fn reencode<'g>(&self, ctx: &Ctx<'g>, extractor: &CueExtractor, xhat: Var<'g>) -> Result<Var<'g>> {
        let v_y = self.encode_lq(ctx, xhat)?.v_y;
        match self.guidance {
            GuidanceMode::None => Ok(v_y),
            _ => joint_vector(extractor.encode(ctx, xhat)?, v_y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Group, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tape::numeric::{central_difference, relative_error};

    fn build(seed: u64, mode: GuidanceMode) -> (ParamStore, CueExtractor, Enhancer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = CueExtractor::new(&mut Builder::new(&mut store, &mut rng, Group::Cue, "cue"), 4);
        let e = Enhancer::new(
            &mut Builder::new(&mut store, &mut rng, Group::Gen, "gen"),
            4,
            mode,
            IntegrationMode::AdaLin,
        );
        (store, g, e)
    }

    #[test]
    fn pyramid_and_output_shapes() {
        let (store, g, e) = build(0, GuidanceMode::HqVector);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = Tensor::rand_uniform(vec![2, 1, 64, 64], 0.0, 1.0, &mut rng);
        let z = Tensor::rand_uniform(vec![1, 1, 64, 64], 0.0, 1.0, &mut rng);
        let graph = Graph::new();
        let ctx = Ctx::new(&graph, &store, &[]);
        let enc = e.encode_lq(&ctx, graph.constant(y.clone())).unwrap();
        let spatial: Vec<usize> = enc.features.levels.iter().map(|f| f.shape()[2]).collect();
        assert_eq!(spatial, vec![32, 16, 8, 4]);
        assert_eq!(enc.v_y.shape(), vec![2, STRUCTURE_DIM]);
        let (xhat, v_c) = e.forward(&ctx, &g, graph.constant(y.clone()), Some(graph.constant(z.clone()))).unwrap();
        assert_eq!(v_c.shape(), vec![2, 80]);
        let out = xhat.value();
        assert_eq!(out.shape(), y.shape());
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let graph2 = Graph::new();
        let ctx2 = Ctx::new(&graph2, &store, &[]);
        let (again, _) = e
            .forward(&ctx2, &g, graph2.constant(y.clone()), Some(graph2.constant(z)))
            .unwrap();
        assert_eq!(*again.value(), *out);
        assert!(e.encode_lq(&ctx2, graph2.constant(Tensor::zeros(vec![1, 1, 40, 40]))).is_err());
        assert!(matches!(
            e.forward(&ctx2, &g, graph2.constant(y), None),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn joint_vector_order() {
        let vz: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let vy: Vec<f64> = (0..16).map(|i| -(i as f64)).collect();
        let vc = joint(&vz, &vy).unwrap();
        assert_eq!(vc.len(), 80);
        assert_eq!(&vc[..64], &vz[..]);
        assert_eq!(&vc[64..], &vy[..]);
        assert_eq!(joint(&[0.0; 64], &[0.0; 16]).unwrap(), vec![0.0; 80]);
        assert!(joint(&[0.0; 63], &[0.0; 16]).is_err());
    }

    #[test]
    fn guidance_modes_size_the_style_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = Tensor::rand_uniform(vec![1, 1, 32, 32], 0.0, 1.0, &mut rng);
        for mode in [GuidanceMode::LearnableTensor, GuidanceMode::None] {
            let (store, g, e) = build(3, mode);
            let graph = Graph::new();
            let ctx = Ctx::new(&graph, &store, &[]);
            let (xhat, v_c) = e.forward(&ctx, &g, graph.constant(y.clone()), None).unwrap();
            assert_eq!(v_c.shape()[1], mode.guide_dim());
            assert_eq!(xhat.shape(), vec![1, 1, 32, 32]);
            assert_eq!(e.reencode(&ctx, &g, xhat).unwrap().shape(), v_c.shape());
        }
        assert_eq!("learnable_tensor".parse::<GuidanceMode>().unwrap(), GuidanceMode::LearnableTensor);
        assert!("tensor".parse::<GuidanceMode>().is_err());
    }

    #[test]
    fn cue_reaches_output() {
        let (store, _, e) = build(4, GuidanceMode::HqVector);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = Tensor::rand_uniform(vec![1, 1, 32, 32], 0.0, 1.0, &mut rng);
        let graph = Graph::new();
        let ctx = Ctx::new(&graph, &store, &[]);
        let enc = e.encode_lq(&ctx, graph.constant(y)).unwrap();
        let v_z = graph.variable(Tensor::randn(vec![1, CUE_DIM], 1.0, &mut rng));
        let v_c = e.guide(Some(v_z), enc.v_y).unwrap();
        let xhat = e.decode(&ctx, &enc.features, v_c).unwrap();
        let grads = graph.backward(xhat.mean_all());
        assert!(grads.get(v_z).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn end_to_end_gradients() {
        let (mut store, g, e) = build(6, GuidanceMode::HqVector);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = Tensor::rand_uniform(vec![1, 1, 32, 32], 0.0, 1.0, &mut rng);
        let z = Tensor::rand_uniform(vec![1, 1, 32, 32], 0.0, 1.0, &mut rng);
        let probe = Tensor::randn(vec![1, 1, 32, 32], 1.0, &mut rng);
        let functional = |store: &ParamStore| {
            let graph = Graph::new();
            let ctx = Ctx::new(&graph, store, &[Group::Gen]);
            let (xhat, _) = e
                .forward(&ctx, &g, graph.constant(y.clone()), Some(graph.constant(z.clone())))
                .unwrap();
            xhat.mul(graph.constant(probe.clone())).sum_all().value().item()
        };
        let graph = Graph::new();
        let ctx = Ctx::new(&graph, &store, &[Group::Gen]);
        let (xhat, _) = e
            .forward(&ctx, &g, graph.constant(y.clone()), Some(graph.constant(z.clone())))
            .unwrap();
        let grads = graph.backward(xhat.mul(graph.constant(probe.clone())).sum_all());
        let analytic = ctx.collect_grads(&grads, &[Group::Gen]);

        let mut checked = 0;
        for _ in 0..32 {
            let (id, grad) = &analytic[rng.random_range(0..analytic.len())];
            let i = rng.random_range(0..grad.numel());
            let base = store.get(*id).clone();
            let fd = central_difference(
                |t| {
                    store.set(*id, t.clone());
                    functional(&store)
                },
                &base,
                &[i],
                1e-5,
            )[0];
            store.set(*id, base);
            assert!(
                relative_error(grad.data()[i], fd, 1e-6) < 1e-3,
                "{}[{}]: {} vs {}",
                store.name(*id),
                i,
                grad.data()[i],
                fd
            );
            checked += 1;
        }
        assert_eq!(checked, 32);
    }
}
