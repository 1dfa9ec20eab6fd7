//! All networks of one run, sharing a single named parameter store.

use crate::adversary::Discriminator;
use crate::bilevel::SegNet;
use crate::config::ModelConfig;
use crate::cue::{CueDecoder, CueExtractor};
use crate::data::derive_seed;
use crate::enhancer::Enhancer;
use crate::error::{invalid, Result};
use crate::nn::{Builder, Ctx, Group, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tape::{Graph, Tensor};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub cue: CueExtractor,
    pub cue_decoder: CueDecoder,
    pub enhancer: Enhancer,
    pub dis: Discriminator,
    pub seg: SegNet,
}

impl Model {
    /// Each network draws its initial weights from its own seed stream, so
    /// changing one network's shape leaves the others' initialisation intact.
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let rng = |k: u64| ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xC0DE, k]));
        let mut r = rng(1);
        let cue = CueExtractor::new(&mut Builder::new(&mut store, &mut r, Group::Cue, "cue"), config.cue_width);
        let mut r = rng(2);
        let cue_decoder = CueDecoder::new(
            &mut Builder::new(&mut store, &mut r, Group::CueDecoder, "cue_decoder"),
            config.cue_width,
        );
        let mut r = rng(3);
        let enhancer = Enhancer::new(
            &mut Builder::new(&mut store, &mut r, Group::Gen, "gen"),
            config.gen_width,
            config.guidance,
            config.integration,
        );
        enhancer.zero_init_residuals(&mut store);
        let mut r = rng(4);
        let dis = Discriminator::new(&mut Builder::new(&mut store, &mut r, Group::Dis, "dis"), 1, config.dis_width);
        let mut r = rng(5);
        let seg = SegNet::new(&mut Builder::new(&mut store, &mut r, Group::Seg, "seg"), config.seg_width);
        Self {
            config: config.clone(),
            store,
            cue,
            cue_decoder,
            enhancer,
            dis,
            seg,
        }
    }

    /// Cue vectors `(B, 64)` for a batch of HQ images.
    pub fn encode_hq(&self, z: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let ctx = Ctx::new(&g, &self.store, &[]);
        Ok(self.cue.encode(&ctx, g.constant(z.clone()))?.value().as_ref().clone())
    }

    /// Enhanced images for `y`; `z` is one guidance image per input or a
    /// single image shared by the batch, and is ignored outside exemplar mode.
    pub fn enhance(&self, y: &Tensor, z: Option<&Tensor>) -> Result<Tensor> {
        let g = Graph::new();
        let ctx = Ctx::new(&g, &self.store, &[]);
        let zv = z.map(|z| g.constant(z.clone()));
        let (xhat, _) = self.enhancer.forward(&ctx, &self.cue, g.constant(y.clone()), zv)?;
        Ok(xhat.value().as_ref().clone())
    }

    pub fn segment(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let ctx = Ctx::new(&g, &self.store, &[]);
        Ok(self.seg.forward(&ctx, g.constant(x.clone()))?.value().as_ref().clone())
    }

    /// Copies every parameter of `groups` from `other`, matching by name.
    pub fn copy_groups_from(&mut self, other: &Model, groups: &[Group]) -> Result<()> {
        for id in self.store.ids_in(groups) {
            let name = self.store.name(id).to_string();
            let src = other
                .store
                .lookup(&name)
                .ok_or_else(|| invalid!("source model has no parameter {}", name))?;
            let value = other.store.get(src);
            if value.shape() != self.store.get(id).shape() {
                return Err(invalid!("parameter {} differs in shape", name));
            }
            self.store.set(id, value.clone());
        }
        Ok(())
    }
}
