//! Training sessions: cue pretraining, plain adversarial enhancement training,
//! cooperative training with the segmentation head, and evaluation.

use crate::adversary::{loss_gan_d_var, loss_gan_g_var};
use crate::bilevel::{cooperative_loss_var, loss_downstream_var};
use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::config::{EvalConfig, RunConfig};
use crate::cue::reconstruction_loss_var;
use crate::data::{derive_seed, LoadedSplit};
use crate::enhancer::GuidanceMode;
use crate::error::{invalid, Error, Result};
use crate::metrics::{seg_scores, ImageMetrics, MetricReport};
use crate::model::Model;
use crate::nn::{Ctx, Group, ParamId, ParamStore};
use crate::objectives::{loss_fc_var, loss_haar_var, loss_intervar_var, loss_intravar_var, EnhancementTerms, LossWeights};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use tape::{Adam, AdamConfig, Graph, Tensor, Var};

pub const PHASE_PRETRAIN: &str = "pretrain";
pub const PHASE_TRAIN: &str = "train";
pub const PHASE_COOP: &str = "coop";
pub const PHASE_DOWNSTREAM: &str = "downstream";

const TAG_PRETRAIN: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_COOP: u64 = 3;
const TAG_DOWNSTREAM: u64 = 4;
const TAG_EVAL: u64 = 5;

/// Unpaired training images; `lq_masks` is index-aligned with `lq`.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub hq: Vec<Tensor>,
    pub lq: Vec<Tensor>,
    pub lq_masks: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub y: Tensor,
    pub z: Tensor,
    /// a second, independently drawn guidance batch
    pub z_alt: Tensor,
    pub mask: Option<Tensor>,
}

impl TrainingSet {
    pub fn from_split(split: &LoadedSplit) -> Self {
        Self {
            hq: split.hq.clone(),
            lq: split.lq.clone(),
            lq_masks: split.lq_masks.clone(),
        }
    }

    /// Draws `n` LQ images (with masks) and `n` HQ images independently,
    /// applying random horizontal and vertical flips when `flip` is set.
    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize, flip: bool) -> Result<Batch> {
        if self.hq.is_empty() || self.lq.is_empty() {
            return Err(invalid!("training needs at least one HQ and one LQ image"));
        }
        let with_masks = self.lq_masks.len() == self.lq.len();
        let flips = |rng: &mut R, t: &Tensor, m: Option<&Tensor>| {
            let (fw, fh) = if flip { (rng.random::<bool>(), rng.random::<bool>()) } else { (false, false) };
            let apply = |t: &Tensor| {
                let t = if fw { t.flip_w() } else { t.clone() };
                if fh {
                    t.flip_h()
                } else {
                    t
                }
            };
            (apply(t), m.map(apply))
        };
        let (mut ys, mut ms, mut zs, mut zalts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let i = rng.random_range(0..self.lq.len());
            let (y, m) = flips(rng, &self.lq[i], with_masks.then(|| &self.lq_masks[i]));
            ys.push(y);
            ms.extend(m);
            let j = rng.random_range(0..self.hq.len());
            zs.push(flips(rng, &self.hq[j], None).0);
            let k = rng.random_range(0..self.hq.len());
            zalts.push(flips(rng, &self.hq[k], None).0);
        }
        let cat = |v: &[Tensor]| Tensor::concat(&v.iter().collect::<Vec<_>>(), 0);
        Ok(Batch {
            y: cat(&ys),
            z: cat(&zs),
            z_alt: cat(&zalts),
            mask: with_masks.then(|| cat(&ms)),
        })
    }
}

/// One Adam instance bound to a fixed, ordered parameter list.
#[derive(Clone, Debug)]
pub struct OptSlot {
    pub ids: Vec<ParamId>,
    pub groups: Vec<Group>,
    pub adam: Adam,
}

impl OptSlot {
    fn new(store: &ParamStore, groups: &[Group], config: AdamConfig) -> Self {
        let ids = store.ids_in(groups);
        let shapes: Vec<&[usize]> = ids.iter().map(|&id| store.get(id).shape()).collect();
        Self {
            adam: Adam::new(config, &shapes),
            ids,
            groups: groups.to_vec(),
        }
    }

    /// `grads` must come from `Ctx::collect_grads` over this slot's groups.
    fn apply(&mut self, store: &mut ParamStore, grads: Vec<(ParamId, Tensor)>) {
        debug_assert!(grads.iter().map(|g| g.0).eq(self.ids.iter().copied()));
        let mut values: Vec<Tensor> = self.ids.iter().map(|&id| store.get(id).clone()).collect();
        {
            let mut refs: Vec<&mut Tensor> = values.iter_mut().collect();
            let gs: Vec<Option<&Tensor>> = grads.iter().map(|(_, g)| Some(g)).collect();
            self.adam.step(&mut refs, &gs);
        }
        for (&id, v) in self.ids.iter().zip(values) {
            store.set(id, v);
        }
        store.apply_clamps(&self.ids);
    }
}

/// Per-step loss values.
#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct StepReport {
    pub phase: String,
    pub step: u64,
    pub haar: f64,
    pub fc: f64,
    pub gan_g: f64,
    pub gan_d: Option<f64>,
    /// `L^e`, including any enabled consistency terms
    pub enhancement: f64,
    pub downstream: Option<f64>,
    /// the objective the enhancer descended on
    pub total: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "phase,step,haar,fc,gan_g,gan_d,enhancement,downstream,total";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{:.8}", v)).unwrap_or_default();
        format!(
            "{},{},{:.8},{:.8},{:.8},{},{:.8},{},{:.8}",
            self.phase,
            self.step,
            self.haar,
            self.fc,
            self.gan_g,
            opt(self.gan_d),
            self.enhancement,
            opt(self.downstream),
            self.total
        )
    }
}

/// The enhancement objective for one batch, built on `ctx`.
pub struct EnhancementPass<'g> {
    pub xhat: Var<'g>,
    pub terms: EnhancementTerms<'g>,
    pub loss: Var<'g>,
}

/// Builds `x̂ = Φ(y, z)` and `L^e = L_Haar + λ₁ L_FC + λ₂ L_GAN` (plus the
/// optional cue consistency terms) on `ctx`.
pub fn enhancement_pass<'g>(
    ctx: &Ctx<'g>,
    model: &Model,
    batch: &Batch,
    weights: &LossWeights,
    consistency: (f64, f64),
) -> Result<EnhancementPass<'g>> {
    let g = ctx.graph;
    let y = g.constant(batch.y.clone());
    let z = g.constant(batch.z.clone());
    let (xhat, v_c) = model.enhancer.forward(ctx, &model.cue, y, Some(z))?;
    let v_xhat = model.enhancer.reencode(ctx, &model.cue, xhat)?;
    let terms = EnhancementTerms {
        haar: loss_haar_var(xhat, y, model.config.hf_mask)?,
        fc: loss_fc_var(v_xhat, v_c)?,
        gan: loss_gan_g_var(model.dis.forward(ctx, xhat)?),
    };
    let mut loss = terms.total(weights);
    let (inter_w, intra_w) = consistency;
    if model.config.guidance == GuidanceMode::HqVector && (inter_w > 0.0 || intra_w > 0.0) {
        let v1 = model.cue.encode(ctx, z)?;
        if inter_w > 0.0 {
            let v2 = model.cue.encode(ctx, g.constant(batch.z_alt.clone()))?;
            loss = loss.add(loss_intervar_var(v1, v2)?.mul_scalar(inter_w));
        }
        if intra_w > 0.0 {
            let v2 = model.cue.encode(ctx, g.constant(batch.z.flip_w()))?;
            loss = loss.add(loss_intravar_var(v1, v2)?.mul_scalar(intra_w));
        }
    }
    Ok(EnhancementPass { xhat, terms, loss })
}

/// A model together with its optimizer states and phase counters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub counters: BTreeMap<String, u64>,
    pub optimizers: BTreeMap<String, OptSlot>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.seed);
        Ok(Self::assemble(config, model))
    }

    fn assemble(config: RunConfig, model: Model) -> Self {
        let t = &config.train;
        let adam = |lr: f64| AdamConfig {
            lr,
            beta1: t.beta1,
            beta2: t.beta2,
            ..AdamConfig::default()
        };
        let store = &model.store;
        let mut optimizers = BTreeMap::new();
        optimizers.insert(
            "cue_ae".to_string(),
            OptSlot::new(store, &[Group::Cue, Group::CueDecoder], adam(config.pretrain.lr)),
        );
        optimizers.insert("gen".to_string(), OptSlot::new(store, &Self::gen_groups(&config), adam(t.lr)));
        optimizers.insert("dis".to_string(), OptSlot::new(store, &[Group::Dis], adam(t.lr)));
        optimizers.insert("seg".to_string(), OptSlot::new(store, &[Group::Seg], adam(config.coop.lr_downstream)));
        Self {
            config,
            model,
            counters: BTreeMap::new(),
            optimizers,
        }
    }

    fn gen_groups(config: &RunConfig) -> Vec<Group> {
        if config.train.unfreeze_cue {
            vec![Group::Gen, Group::Cue]
        } else {
            vec![Group::Gen]
        }
    }

    /// Restores parameters, counters and optimizer moments from `ckpt`.
    /// `config` replaces the stored configuration except for the model section,
    /// which must match.
    pub fn resume(config: RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        if config.model != ckpt.config.model {
            return Err(Error::Config("model section differs from the checkpoint's".into()));
        }
        let mut model = Model::new(&config.model, config.seed);
        ckpt.apply_to(&mut model.store)?;
        let mut trainer = Self::assemble(config, model);
        trainer.counters = ckpt.counters.clone();
        for (role, state) in &ckpt.optimizers {
            let slot = trainer
                .optimizers
                .get_mut(role)
                .ok_or_else(|| Error::State(format!("unknown optimizer role {}", role)))?;
            if state.params.len() == slot.ids.len() {
                state.restore(&mut slot.adam, &trainer.model.store, &slot.ids)?;
            } else if state.step > 0 {
                return Err(Error::State(format!("optimizer {} covers a different parameter set", role)));
            }
        }
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(&self.config, &self.model.store);
        c.counters = self.counters.clone();
        for (role, slot) in &self.optimizers {
            c.optimizers
                .insert(role.clone(), OptimizerState::capture(&slot.adam, &self.model.store, &slot.ids));
        }
        c
    }

    pub fn counter(&self, phase: &str) -> u64 {
        self.counters.get(phase).copied().unwrap_or(0)
    }

    fn bump(&mut self, phase: &str) -> u64 {
        let c = self.counters.entry(phase.to_string()).or_insert(0);
        *c += 1;
        *c - 1
    }

    fn step_rng(&self, tag: u64, step: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, tag, step]))
    }

    fn consistency(&self) -> (f64, f64) {
        (self.config.train.intervar_weight, self.config.train.intravar_weight)
    }

    /// One epoch of cue autoencoder training over `images`; returns the mean
    /// reconstruction loss.
    pub fn pretrain_epoch(&mut self, images: &[Tensor]) -> Result<f64> {
        if images.is_empty() {
            return Err(invalid!("cue pretraining needs images"));
        }
        let epoch = self.bump(PHASE_PRETRAIN);
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut self.step_rng(TAG_PRETRAIN, epoch));
        let groups = [Group::Cue, Group::CueDecoder];
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(self.config.pretrain.batch) {
            let x = Tensor::concat(&chunk.iter().map(|&i| &images[i]).collect::<Vec<_>>(), 0);
            let (loss, grads) = {
                let g = Graph::new();
                let ctx = Ctx::new(&g, &self.model.store, &groups);
                let xv = g.constant(x);
                let (_, deepest) = self.model.cue.forward(&ctx, xv)?;
                let recon = self.model.cue_decoder.forward(&ctx, deepest);
                let loss = reconstruction_loss_var(recon, xv, self.config.pretrain.ssim_weight)?;
                let grads = g.backward(loss);
                (loss.value().item(), ctx.collect_grads(&grads, &groups))
            };
            self.optimizers
                .get_mut("cue_ae")
                .expect("slot")
                .apply(&mut self.model.store, grads);
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(sum / count as f64)
    }

    /// One plain step: the enhancer descends on `L^e` while the discriminator
    /// takes its ascent step on the same generated batch.
    pub fn train_step(&mut self, data: &TrainingSet) -> Result<StepReport> {
        let step = self.bump(PHASE_TRAIN);
        let batch = data.sample(&mut self.step_rng(TAG_TRAIN, step), self.config.train.batch, self.config.train.flip_augment)?;
        self.enhancement_step(PHASE_TRAIN, step, &batch, false)
    }

    /// One cooperative step on `L^d + λ₃ L^e`, jointly over the enhancer and
    /// the segmentation head.
    pub fn coop_step(&mut self, data: &TrainingSet) -> Result<StepReport> {
        if data.lq_masks.len() != data.lq.len() {
            return Err(invalid!("cooperative training needs a mask for every LQ image"));
        }
        let step = self.bump(PHASE_COOP);
        let batch = data.sample(&mut self.step_rng(TAG_COOP, step), self.config.train.batch, self.config.train.flip_augment)?;
        self.enhancement_step(PHASE_COOP, step, &batch, true)
    }

    /// Runs one update on an explicit batch. With `cooperative`, the batch
    /// must carry masks.
    pub fn enhancement_step(&mut self, phase: &str, step: u64, batch: &Batch, cooperative: bool) -> Result<StepReport> {
        let weights = self.config.train.weights;
        let update_d = step % self.config.train.alternate_d_every as u64 == 0;
        let update_seg = cooperative && !self.config.coop.freeze_downstream;
        let gen_groups = Self::gen_groups(&self.config);
        let mut trainable = gen_groups.clone();
        if update_d {
            trainable.push(Group::Dis);
        }
        if update_seg {
            trainable.push(Group::Seg);
        }
        let mask = match (cooperative, &batch.mask) {
            (true, Some(m)) => Some(m),
            (true, None) => return Err(invalid!("cooperative step without masks")),
            (false, _) => None,
        };
        let (report, gen_grads, dis_grads, seg_grads) = {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &self.model.store, &trainable);
            let pass = enhancement_pass(&ctx, &self.model, batch, &weights, self.consistency())?;
            let mut report = StepReport {
                phase: phase.to_string(),
                step,
                haar: pass.terms.haar.value().item(),
                fc: pass.terms.fc.value().item(),
                gan_g: pass.terms.gan.value().item(),
                enhancement: pass.loss.value().item(),
                ..StepReport::default()
            };
            let objective = match mask {
                Some(m) => {
                    let logits = self.model.seg.forward(&ctx, pass.xhat)?;
                    let ld = loss_downstream_var(logits, m)?;
                    report.downstream = Some(ld.value().item());
                    cooperative_loss_var(ld, pass.loss, weights.lambda3)
                }
                None => pass.loss,
            };
            report.total = objective.value().item();
            let grads = g.backward(objective);
            let gen_grads = ctx.collect_grads(&grads, &gen_groups);
            let seg_grads = update_seg.then(|| ctx.collect_grads(&grads, &[Group::Seg]));
            let dis_grads = if update_d {
                let real = self.model.dis.forward(&ctx, g.constant(batch.z.clone()))?;
                let fake = self.model.dis.forward(&ctx, pass.xhat.detach())?;
                let ld = loss_gan_d_var(real, fake);
                report.gan_d = Some(ld.value().item());
                Some(ctx.collect_grads(&g.backward(ld), &[Group::Dis]))
            } else {
                None
            };
            (report, gen_grads, dis_grads, seg_grads)
        };
        let store = &mut self.model.store;
        self.optimizers.get_mut("gen").expect("slot").apply(store, gen_grads);
        if let Some(d) = dis_grads {
            self.optimizers.get_mut("dis").expect("slot").apply(store, d);
        }
        if let Some(s) = seg_grads {
            self.optimizers.get_mut("seg").expect("slot").apply(store, s);
        }
        Ok(report)
    }

    /// Trains only the segmentation head on the frozen enhancer's outputs.
    pub fn downstream_step(&mut self, data: &TrainingSet) -> Result<f64> {
        if data.lq_masks.len() != data.lq.len() {
            return Err(invalid!("segmentation training needs a mask for every LQ image"));
        }
        let step = self.bump(PHASE_DOWNSTREAM);
        let batch = data.sample(
            &mut self.step_rng(TAG_DOWNSTREAM, step),
            self.config.train.batch,
            self.config.train.flip_augment,
        )?;
        let xhat = self.model.enhance(&batch.y, Some(&batch.z))?;
        let mask = batch.mask.as_ref().expect("masks checked above");
        let (loss, grads) = {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &self.model.store, &[Group::Seg]);
            let logits = self.model.seg.forward(&ctx, g.constant(xhat))?;
            let ld = loss_downstream_var(logits, mask)?;
            let grads = g.backward(ld);
            (ld.value().item(), ctx.collect_grads(&grads, &[Group::Seg]))
        };
        self.optimizers
            .get_mut("seg")
            .expect("slot")
            .apply(&mut self.model.store, grads);
        Ok(loss)
    }
}

/// Index of the HQ guidance image used for LQ test image `i`.
pub fn guidance_index(eval: &EvalConfig, seed: u64, i: usize, n_hq: usize) -> usize {
    match eval.guidance_index {
        Some(j) => j % n_hq,
        None => ChaCha8Rng::seed_from_u64(derive_seed(&[seed, TAG_EVAL, i as u64])).random_range(0..n_hq),
    }
}

const EVAL_CHUNK: usize = 10;

/// Enhances every LQ image of `split` and measures the outputs; segmentation
/// scores are added when the split carries LQ masks.
pub fn evaluate(model: &Model, split: &LoadedSplit, eval: &EvalConfig, seed: u64) -> Result<(MetricReport, Vec<Tensor>)> {
    if split.lq.is_empty() {
        return Err(invalid!("nothing to evaluate"));
    }
    if model.config.guidance.needs_exemplar() && split.hq.is_empty() {
        return Err(invalid!("hq_vector guidance needs HQ images in the evaluation split"));
    }
    let ids = &split.manifest.lq_ids;
    let with_masks = split.lq_masks.len() == split.lq.len();
    let mut images = Vec::with_capacity(split.lq.len());
    let mut outputs = Vec::with_capacity(split.lq.len());
    for start in (0..split.lq.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(split.lq.len());
        let y = Tensor::concat(&split.lq[start..end].iter().collect::<Vec<_>>(), 0);
        let z = (!split.hq.is_empty()).then(|| {
            let zs: Vec<&Tensor> = (start..end)
                .map(|i| &split.hq[guidance_index(eval, seed, i, split.hq.len())])
                .collect();
            Tensor::concat(&zs, 0)
        });
        let xhat = model.enhance(&y, z.as_ref())?;
        let logits = if with_masks { Some(model.segment(&xhat)?) } else { None };
        for (k, i) in (start..end).enumerate() {
            let x = xhat.batch_item(k);
            let mut m = ImageMetrics::measure(&ids[i], &x, &eval.radii)?;
            if let Some(l) = &logits {
                m.seg = Some(seg_scores(&l.batch_item(k), &split.lq_masks[i], eval.threshold)?);
            }
            images.push(m);
            outputs.push(x);
        }
    }
    let report = MetricReport {
        checkpoint: String::new(),
        dataset: split.manifest.root_path.display().to_string(),
        seed,
        images,
    };
    Ok((report, outputs))
}
