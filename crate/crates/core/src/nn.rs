//! Parameter storage, graph binding and the handful of layers the networks use.

use rand::Rng;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use tape::{Gradients, Graph, Tensor, Var};

/// Negative slope of every leaky ReLU in the model.
pub const LRELU_SLOPE: f64 = 0.2;

/// Which network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    /// HQ cue extractor `G`.
    Cue,
    /// Decoder half of the cue autoencoder; only used during pretraining.
    CueDecoder,
    /// Enhancement generator: encoder, structure head, decoder, VIN blocks.
    Gen,
    /// Patch discriminator.
    Dis,
    /// Downstream segmentation head.
    Seg,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Cue, Group::CueDecoder, Group::Gen, Group::Dis, Group::Seg];

    pub fn tag(self) -> u8 {
        match self {
            Group::Cue => 0,
            Group::CueDecoder => 1,
            Group::Gen => 2,
            Group::Dis => 3,
            Group::Seg => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.tag() == tag)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    group: Group,
    value: Rc<Tensor>,
    clamp: Option<(f64, f64)>,
}

/// Named parameter tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {}", name);
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            group,
            value: Rc::new(value),
            clamp: None,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Registers a parameter that is projected into `[lo, hi]` after each update.
    pub fn add_clamped(
        &mut self,
        name: impl Into<String>,
        group: Group,
        value: Tensor,
        lo: f64,
        hi: f64,
    ) -> ParamId {
        let id = self.add(name, group, value);
        self.entries[id.0].clamp = Some((lo, hi));
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.get(id).shape(), value.shape(), "shape change for {}", self.name(id));
        self.entries[id.0].value = Rc::new(value);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.entries[id.0].group
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, groups: &[Group]) -> Vec<ParamId> {
        self.ids().filter(|&id| groups.contains(&self.group(id))).collect()
    }

    pub fn count_in(&self, groups: &[Group]) -> usize {
        self.ids_in(groups).iter().map(|&id| self.get(id).numel()).sum()
    }

    /// Projects clamped parameters back into their interval.
    pub fn apply_clamps(&mut self, ids: &[ParamId]) {
        for &id in ids {
            if let Some((lo, hi)) = self.entries[id.0].clamp {
                let t = self.get_mut(id);
                for v in t.data_mut() {
                    *v = v.clamp(lo, hi);
                }
            }
        }
    }

    pub(crate) fn value_rc(&self, id: ParamId) -> Rc<Tensor> {
        Rc::clone(&self.entries[id.0].value)
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub group: Group,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, group: Group, prefix: &str) -> Self {
        Self {
            store,
            rng,
            group,
            prefix: prefix.to_string(),
        }
    }

    /// A builder for a nested scope, sharing the store and RNG.
    pub fn sub(&mut self, name: &str) -> Builder<'_, R> {
        Builder {
            store: self.store,
            rng: self.rng,
            group: self.group,
            prefix: format!("{}.{}", self.prefix, name),
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(format!("{}.{}", self.prefix, name), self.group, value)
    }

    pub fn clamped(&mut self, name: &str, value: Tensor, lo: f64, hi: f64) -> ParamId {
        self.store
            .add_clamped(format!("{}.{}", self.prefix, name), self.group, value, lo, hi)
    }

    /// He-normal tensor for a layer feeding a leaky ReLU.
    pub fn he(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let gain = (2.0 / (1.0 + LRELU_SLOPE * LRELU_SLOPE)).sqrt();
        Tensor::randn(shape, gain / (fan_in as f64).sqrt(), self.rng)
    }
}

/// Binds store parameters to graph leaves, once per graph.
pub struct Ctx<'g> {
    pub graph: &'g Graph,
    store: &'g ParamStore,
    trainable: Vec<Group>,
    bound: RefCell<Vec<Option<Var<'g>>>>,
}

impl<'g> Ctx<'g> {
    /// Parameters in `trainable` groups become gradient leaves; the rest are constants.
    pub fn new(graph: &'g Graph, store: &'g ParamStore, trainable: &[Group]) -> Self {
        Self {
            graph,
            store,
            trainable: trainable.to_vec(),
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn store(&self) -> &'g ParamStore {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<'g> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let trainable = self.trainable.contains(&self.store.group(id));
        let v = self.graph.leaf(self.store.value_rc(id), trainable);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    /// The graph leaf bound to `id`, if this context has touched it.
    pub fn bound(&self, id: ParamId) -> Option<Var<'g>> {
        self.bound.borrow()[id.0]
    }

    /// Gradients for every trainable parameter in `groups`; zeros where no path exists.
    pub fn collect_grads(&self, grads: &Gradients, groups: &[Group]) -> Vec<(ParamId, Tensor)> {
        self.store
            .ids_in(groups)
            .into_iter()
            .map(|id| {
                let g = match self.bound(id) {
                    Some(v) => grads.get_or_zeros(v),
                    None => Tensor::zeros(self.store.get(id).shape().to_vec()),
                };
                (id, g)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let mut s = b.sub(name);
        let w = s.he(vec![cout, cin, kernel, kernel], cin * kernel * kernel);
        let weight = s.param("w", w);
        let bias = Some(s.param("b", Tensor::zeros(vec![cout])));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    /// 3×3, stride 1, same padding.
    pub fn k3<R: Rng>(b: &mut Builder<'_, R>, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(b, name, cin, cout, 3, 1, 1)
    }

    pub fn k1<R: Rng>(b: &mut Builder<'_, R>, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(b, name, cin, cout, 1, 1, 0)
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        for v in store.get_mut(self.weight).data_mut() {
            *v = 0.0;
        }
        if let Some(b) = self.bias {
            for v in store.get_mut(b).data_mut() {
                *v = 0.0;
            }
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let y = x.conv2d(ctx.p(self.weight), self.stride, self.padding);
        match self.bias {
            Some(b) => y.add_channel_bias(ctx.p(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, din: usize, dout: usize) -> Self {
        let mut s = b.sub(name);
        let w = Tensor::randn(vec![dout, din], 1.0 / (din as f64).sqrt(), s.rng);
        let weight = s.param("w", w);
        let bias = s.param("b", Tensor::zeros(vec![dout]));
        Self { weight, bias }
    }

    /// `(B, din) -> (B, dout)`
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        x.linear(ctx.p(self.weight), Some(ctx.p(self.bias)))
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        for id in [self.weight, self.bias] {
            for v in store.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
    }
}

/// Two 3×3 convolutions with an identity or 1×1 projection skip.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv_a: Conv2d,
    conv_b: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let mut s = b.sub(name);
        let conv_a = Conv2d::new(&mut s, "conv_a", cin, cout, 3, stride, 1);
        let conv_b = Conv2d::k3(&mut s, "conv_b", cout, cout);
        let skip = (cin != cout || stride != 1).then(|| Conv2d::new(&mut s, "skip", cin, cout, 1, stride, 0));
        Self { conv_a, conv_b, skip }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.conv_a.forward(ctx, x).leaky_relu(LRELU_SLOPE);
        let h = self.conv_b.forward(ctx, h);
        let s = match &self.skip {
            Some(p) => p.forward(ctx, x),
            None => x,
        };
        h.add(s).leaky_relu(LRELU_SLOPE)
    }
}

/// `(B, C, H, W) -> (B, C)` spatial mean.
pub fn global_avg_pool<'g>(x: Var<'g>) -> Var<'g> {
    let shape = x.shape();
    x.mean_axes(&[2, 3]).reshape(&[shape[0], shape[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_names_and_groups() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng, Group::Gen, "gen");
        let conv = Conv2d::k3(&mut b, "c1", 2, 4);
        assert_eq!(store.name(conv.weight), "gen.c1.w");
        assert_eq!(store.get(conv.weight).shape(), &[4, 2, 3, 3]);
        assert_eq!(store.ids_in(&[Group::Gen]).len(), 2);
        assert!(store.ids_in(&[Group::Dis]).is_empty());
        assert_eq!(store.lookup("gen.c1.b"), conv.bias);
    }

    #[test]
    fn clamps_apply_only_to_flagged() {
        let mut store = ParamStore::new();
        let rho = store.add_clamped("rho", Group::Gen, Tensor::scalar(1.7), 0.0, 1.0);
        let w = store.add("w", Group::Gen, Tensor::scalar(1.7));
        store.apply_clamps(&[rho, w]);
        assert_eq!(store.get(rho).item(), 1.0);
        assert_eq!(store.get(w).item(), 1.7);
    }

    #[test]
    fn frozen_groups_bind_as_constants() {
        let mut store = ParamStore::new();
        let a = store.add("a", Group::Cue, Tensor::scalar(2.0));
        let b = store.add("b", Group::Gen, Tensor::scalar(3.0));
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, &[Group::Gen]);
        let y = ctx.p(a).mul(ctx.p(b));
        let grads = g.backward(y);
        let collected = ctx.collect_grads(&grads, &[Group::Cue, Group::Gen]);
        assert_eq!(collected[0].1.item(), 0.0);
        assert_eq!(collected[1].1.item(), 2.0);
    }

    #[test]
    fn resblock_halves_resolution() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Builder::new(&mut store, &mut rng, Group::Gen, "r");
        let block = ResBlock::new(&mut b, "s1", 3, 6, 2);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, &[]);
        let x = ctx.constant(Tensor::ones(vec![2, 3, 8, 8]));
        assert_eq!(block.forward(&ctx, x).shape(), vec![2, 6, 4, 4]);
    }
}
